//! Channel independence diagnostics.
//!
//! Under independent channels the redundant link's loss and deadline miss
//! ratios are products of the per-channel ones, and the redundant latency
//! CCDF follows from the per-channel CCDFs and loss probabilities. The
//! report compares those predictions with what the merged trace shows.

use thiserror::Error;

use crate::metrics::{self, Eccdf, MetricsError};
use crate::trace::{Micros, Trial};

/// Relative error tolerated before the channels are flagged dependent.
pub const DEFAULT_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndependenceError {
    #[error("both channels lose every packet; the combined CCDF is undefined")]
    BothChannelsLost,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn product_loss_estimate(loss_a: f64, loss_b: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&loss_a) && (0.0..=1.0).contains(&loss_b));
    loss_a * loss_b
}

pub fn product_dmr_estimate(dmr_a: f64, dmr_b: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&dmr_a) && (0.0..=1.0).contains(&dmr_b));
    dmr_a * dmr_b
}

/// Walks the union of two breakpoint sets in ascending order, yielding
/// each breakpoint with both functions' left limits and values there.
fn merged_grid<'a>(
    f: &'a Eccdf,
    g: &'a Eccdf,
) -> impl Iterator<Item = (Micros, (f64, f64), (f64, f64))> + 'a {
    let (fp, gp) = (f.points(), g.points());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut fv, mut gv) = (1.0, 1.0);
    std::iter::from_fn(move || {
        let h = match (fp.get(i), gp.get(j)) {
            (None, None) => return None,
            (Some(a), None) => a.0,
            (None, Some(b)) => b.0,
            (Some(a), Some(b)) => a.0.min(b.0),
        };
        let before = (fv, gv);
        if fp.get(i).is_some_and(|p| p.0 == h) {
            fv = fp[i].1;
            i += 1;
        }
        if gp.get(j).is_some_and(|p| p.0 == h) {
            gv = gp[j].1;
            j += 1;
        }
        Some((h, before, (fv, gv)))
    })
}

/// Predicted CCDF of the redundant latency from the per-channel CCDFs and
/// loss probabilities, evaluated on the union of both breakpoint sets.
pub fn combined_ccdf(
    ccdf_a: &Eccdf,
    ccdf_b: &Eccdf,
    loss_a: f64,
    loss_b: f64,
) -> Result<Eccdf, IndependenceError> {
    let denom = 1.0 - loss_a * loss_b;
    if denom <= 0.0 {
        return Err(IndependenceError::BothChannelsLost);
    }
    let (rx_a, rx_b) = (1.0 - loss_a, 1.0 - loss_b);
    let mut points = Vec::with_capacity(ccdf_a.points().len() + ccdf_b.points().len());
    let mut prev = 1.0f64;
    for (h, _, (fa, fb)) in merged_grid(ccdf_a, ccdf_b) {
        let v = (loss_a * rx_b * fb + loss_b * rx_a * fa + rx_a * rx_b * fa * fb) / denom;
        // rounding can nudge the value a hair outside the valid envelope
        let v = v.clamp(0.0, prev);
        points.push((h, v));
        prev = v;
    }
    Ok(Eccdf::from_points(points)?)
}

/// Largest absolute difference between two step functions, taken at and
/// just below every breakpoint of either.
pub fn ks_distance(f: &Eccdf, g: &Eccdf) -> f64 {
    merged_grid(f, g)
        .map(|(_, (f0, g0), (f1, g1))| (f0 - g0).abs().max((f1 - g1).abs()))
        .fold(0.0, f64::max)
}

/// `(measured - estimated) / estimated`, or `None` when the estimate is 0.
pub fn relative_error(measured: f64, estimated: f64) -> Option<f64> {
    (estimated > 0.0).then(|| (measured - estimated) / estimated)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndependenceReport {
    pub loss_a: f64,
    pub loss_b: f64,
    pub est_loss: f64,
    pub meas_loss: f64,
    /// `(h, estimated, measured)` per deadline.
    pub dmr: Vec<(Micros, f64, f64)>,
    /// `None` when the redundant link delivered nothing.
    pub est_ccdf: Option<Eccdf>,
    pub meas_ccdf: Option<Eccdf>,
    pub d_ks: Option<f64>,
}

impl IndependenceReport {
    pub fn compute(trial: &Trial, deadlines_us: &[Micros]) -> Result<Self, IndependenceError> {
        let (a, b) = (trial.trace_a(), trial.trace_b());
        let ab = trial.merge_redundant();
        let loss_a = metrics::loss_ratio(a)?;
        let loss_b = metrics::loss_ratio(b)?;
        let meas_loss = metrics::loss_ratio(&ab)?;
        let dmr = deadlines_us
            .iter()
            .map(|&h| {
                let est = product_dmr_estimate(
                    metrics::deadline_miss_ratio(a, h)?,
                    metrics::deadline_miss_ratio(b, h)?,
                );
                Ok((h, est, metrics::deadline_miss_ratio(&ab, h)?))
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;

        let meas_ccdf = metrics::eccdf(&ab).ok();
        let est_ccdf = match (metrics::eccdf(a).ok(), metrics::eccdf(b).ok()) {
            (Some(fa), Some(fb)) => Some(combined_ccdf(&fa, &fb, loss_a, loss_b)?),
            // a silent channel carries zero weight, so the other one stands in
            (Some(fa), None) => Some(combined_ccdf(&fa, &fa, loss_a, loss_b)?),
            (None, Some(fb)) => Some(combined_ccdf(&fb, &fb, loss_a, loss_b)?),
            (None, None) => None,
        };
        let d_ks = match (&meas_ccdf, &est_ccdf) {
            (Some(m), Some(e)) => Some(ks_distance(m, e)),
            _ => None,
        };
        Ok(IndependenceReport {
            loss_a,
            loss_b,
            est_loss: product_loss_estimate(loss_a, loss_b),
            meas_loss,
            dmr,
            est_ccdf,
            meas_ccdf,
            d_ks,
        })
    }

    /// Relative errors of the loss ratio and of every deadline, `None` where
    /// the estimate is zero.
    pub fn relative_errors(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![("loss".to_string(), relative_error(self.meas_loss, self.est_loss))];
        out.extend(
            self.dmr
                .iter()
                .map(|&(h, est, meas)| (format!("dmr>{h}us"), relative_error(meas, est))),
        );
        out
    }

    /// Largest defined absolute relative error.
    pub fn max_relative_error(&self) -> Option<f64> {
        self.relative_errors().into_iter().filter_map(|(_, e)| e.map(f64::abs)).reduce(f64::max)
    }

    /// True when every defined relative error stays within `tolerance`, or
    /// when no estimate was defined and all measurements are zero too.
    pub fn consistent_with_independence(&self, tolerance: f64) -> bool {
        let undefined_ok = self.meas_loss == 0.0 || self.est_loss > 0.0;
        let dmr_ok = self.dmr.iter().all(|&(_, est, meas)| meas == 0.0 || est > 0.0);
        undefined_ok && dmr_ok && self.max_relative_error().is_none_or(|e| e <= tolerance)
    }
}
