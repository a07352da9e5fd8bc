use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{Level, LevelFilter, Metadata, Record};
use seamless_core::independence::{IndependenceReport, DEFAULT_TOLERANCE};
use seamless_core::io::{export_ccdf, format_ms, parse_ms, read_trial_with_warnings, write_trial};
use seamless_core::metrics::{Eccdf, MetricsOptions, MetricsReport, DEFAULT_DEADLINES_US};
use seamless_core::sim::{simulate_trial, SimConfig};
use seamless_core::trace::{ChannelId, Micros, Trial};

#[derive(Parser)]
#[command(name = "seamless", version, about = "Simulate and analyse dual-channel redundant links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace from a TOML configuration.
    Simulate {
        config: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Per-channel latency, deadline, loss, burst and autocorrelation report.
    Analyze {
        trace: PathBuf,
        /// Comma-separated deadlines, in ms unless suffixed `us`.
        #[arg(long, default_value = "1,3,10,30ms", value_parser = parse_deadlines)]
        deadlines: Deadlines,
        /// Largest autocorrelation lag; defaults to min(1000, N/10).
        #[arg(long)]
        max_lag: Option<usize>,
    },
    /// Checks the redundant link against the independent-channel prediction.
    Compare { trace: PathBuf },
}

#[derive(Debug, Clone)]
struct Deadlines(Vec<Micros>);

fn parse_deadlines(text: &str) -> Result<Deadlines, String> {
    let (body, scale) = if let Some(b) = text.strip_suffix("us") {
        (b, 1)
    } else {
        (text.strip_suffix("ms").unwrap_or(text), 1000)
    };
    let mut out = Vec::new();
    for item in body.split(',') {
        let item = item.trim();
        let us = if scale == 1 { item.parse().ok() } else { parse_ms(item) };
        match us {
            Some(v) if v >= 0 => out.push(v),
            _ => return Err(format!("invalid deadline `{item}`")),
        }
    }
    Ok(Deadlines(out))
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Warn
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            eprintln!("{}: {}", record.level().as_str().to_lowercase(), record.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn main() -> ExitCode {
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(LevelFilter::Warn));
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, seed, out } => simulate(&config, seed, &out),
        Command::Analyze { trace, deadlines, max_lag } => analyze(&trace, &deadlines.0, max_lag),
        Command::Compare { trace } => compare(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn simulate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = SimConfig::from_toml_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let trial = simulate_trial(&cfg)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_trial(&trial, BufWriter::new(file))?;
    let ab = trial.merge_redundant();
    println!(
        "N={} loss_A={} loss_B={} loss_AB={} (permille) -> {}",
        trial.n_packets(),
        permille(trial.trace_a().n_lost(), trial.n_packets()),
        permille(trial.trace_b().n_lost(), trial.n_packets()),
        permille(ab.n_lost(), trial.n_packets()),
        out.display()
    );
    Ok(())
}

fn permille(count: usize, n: usize) -> String {
    format!("{:.3}", count as f64 / n as f64 * 1e3)
}

fn load(path: &Path) -> Result<Trial> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let read = read_trial_with_warnings(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    for w in &read.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(read.trial)
}

/// `trace.csv` -> `trace.<suffix>` next to it.
fn sibling(trace: &Path, suffix: &str) -> PathBuf {
    trace.with_extension(suffix)
}

fn reports(trial: &Trial, opts: &MetricsOptions) -> Result<[MetricsReport; 3]> {
    let ab = trial.merge_redundant();
    Ok([
        MetricsReport::compute(trial.trace_a(), opts)?,
        MetricsReport::compute(trial.trace_b(), opts)?,
        MetricsReport::compute(&ab, opts)?,
    ])
}

fn ms(v: f64) -> String {
    format!("{:.3}", v / 1000.0)
}

fn pm(v: f64) -> String {
    format!("{:.3}", v * 1e3)
}

fn deadline_label(h: Micros) -> String {
    let s = format_ms(h);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn print_table(rows: &[&MetricsReport], indep: Option<&IndependenceReport>, deadlines: &[Micros]) {
    let mut header = vec!["chan".to_string(), "mean".into(), "std".into(), "p99.99".into(), "max".into()];
    for &h in deadlines {
        header.push(format!("d>{}ms", deadline_label(h)));
        header.push("est".into());
    }
    header.extend(["D_KS", "loss", "est"].map(String::from));
    let mut lines = vec![header];
    for r in rows {
        let est = indep.filter(|_| r.channel == ChannelId::Redundant);
        let mut row = vec![r.channel.label().to_string()];
        match &r.latency {
            Some(l) => row.extend([ms(l.mean_us), ms(l.std_us), ms(l.p9999_us as f64), ms(l.max_us as f64)]),
            None => row.extend(std::iter::repeat_n("--".to_string(), 4)),
        }
        for &(h, v) in &r.dmr {
            row.push(pm(v));
            let e = est.and_then(|i| i.dmr.iter().find(|d| d.0 == h)).map(|d| pm(d.1));
            row.push(e.unwrap_or_else(|| "--".into()));
        }
        row.push(est.and_then(|i| i.d_ks).map_or("--".into(), |d| format!("{d:.4}")));
        row.push(pm(r.loss_ratio));
        row.push(est.map_or("--".into(), |i| pm(i.est_loss)));
        lines.push(row);
    }
    let widths: Vec<usize> =
        (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    println!("latency in ms, ratios in permille");
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        println!("{}", cells.join("  ").trim_end());
    }
}

fn analyze(path: &Path, deadlines: &[Micros], max_lag: Option<usize>) -> Result<()> {
    let trial = load(path)?;
    let opts = MetricsOptions { deadlines_us: deadlines.to_vec(), max_lag };
    let reports = reports(&trial, &opts)?;
    let indep = match IndependenceReport::compute(&trial, deadlines) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("no independence estimates: {e}");
            None
        }
    };
    println!("N={} period={} ms", trial.n_packets(), format_ms(trial.period_us()));
    print_table(&reports.iter().collect::<Vec<_>>(), indep.as_ref(), deadlines);

    println!();
    println!("{:>4}  {:>7}  {:>7}  {:>7}  {:>7}  {:>8}  {:>5}", "chan", "N_B=1", "N_B=2", "N_B=3", "N_B=4", "N_B>=5", "B_max");
    for r in &reports {
        let b = &r.bursts;
        println!(
            "{:>4}  {:>7}  {:>7}  {:>7}  {:>7}  {:>8}  {:>5}",
            r.channel.label(),
            b.count(1),
            b.count(2),
            b.count(3),
            b.count(4),
            b.count_at_least(5),
            b.b_max
        );
    }

    let out = sibling(path, "autocorr.dat");
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(w, "# k pi_A pi_B pi_AB")?;
    let max_lag = reports[0].autocorr.max_lag;
    for k in 0..=max_lag {
        let cell = |r: &MetricsReport| r.autocorr.pi.as_ref().map_or("nan".to_string(), |p| p[k].to_string());
        writeln!(w, "{k} {} {} {}", cell(&reports[0]), cell(&reports[1]), cell(&reports[2]))?;
    }
    w.flush()?;
    println!();
    println!("wrote {}", out.display());
    Ok(())
}

fn write_ccdf(path: &Path, ccdf: Option<&Eccdf>, what: &str) -> Result<()> {
    let Some(ccdf) = ccdf else {
        log::warn!("{what}: nothing received, {} not written", path.display());
        return Ok(());
    };
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    export_ccdf(ccdf, BufWriter::new(file))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(path: &Path) -> Result<()> {
    let trial = load(path)?;
    let deadlines = DEFAULT_DEADLINES_US.to_vec();
    let indep = IndependenceReport::compute(&trial, &deadlines)?;
    let opts = MetricsOptions { deadlines_us: deadlines.clone(), max_lag: Some(0) };
    let [ra, rb, rab] = reports(&trial, &opts)?;
    print_table(&[&rab], Some(&indep), &deadlines);

    let errors: Vec<String> = indep
        .relative_errors()
        .into_iter()
        .map(|(name, e)| match e {
            Some(e) => format!("{name} {:+.1}%", e * 100.0),
            None => format!("{name} undefined"),
        })
        .collect();
    println!("relative error: {}", errors.join(", "));
    let pass = indep.consistent_with_independence(DEFAULT_TOLERANCE);
    let worst = indep.max_relative_error().map_or("undefined".into(), |e| format!("{:.1}%", e * 100.0));
    println!(
        "independence: {} (max |relative error| {worst}, tolerance {:.0}%)",
        if pass { "PASS" } else { "FAIL" },
        DEFAULT_TOLERANCE * 100.0
    );

    write_ccdf(&sibling(path, "ccdf_A.dat"), ra.ccdf.as_ref(), "A")?;
    write_ccdf(&sibling(path, "ccdf_B.dat"), rb.ccdf.as_ref(), "B")?;
    write_ccdf(&sibling(path, "ccdf_AB.dat"), rab.ccdf.as_ref(), "AB")?;
    write_ccdf(&sibling(path, "ccdf_AB_est.dat"), indep.est_ccdf.as_ref(), "AB estimate")

}
