//! `vqlab`: reproducible codebook-dynamics runs from the command line.
//!
//! Subcommands:
//! - `demo <translation|expansion|shrink|split> --rule <rule>`: run one toy
//!   experiment, writing `trace.csv` and five SVG snapshots.
//! - `sweep`: run the batch-size sweep, writing `sweep.csv` and printing a
//!   rank-correlation summary.
//! - `check`: run the invariant suite (fixed-point, gradcheck, NTK
//!   exactness) and exit nonzero on any failure.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use vqlab::harness::{
    batch_size_sweep, run_experiment, spearman, CodebookInit, ExperimentConfig, TraceLog,
    DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
};
use vqlab::kmeans::{lloyd, InitStrategy, DEFAULT_MAX_ITER, DEFAULT_TOL};
use vqlab::streams::{DriftKind, ScalingMode};
use vqlab::svg::{render_trace_snapshots, PlotStyle};
use vqlab::transvq::{
    gradient_check_with_fault, ProjectorConfig, ProjectorParams, TensorId,
};
use vqlab::updaters::{ema_batch_step, RuleKind, UpdateRule};

#[derive(Parser)]
#[command(name = "vqlab", version, about = "Codebook dynamics laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DemoName {
    Translation,
    Expansion,
    Shrink,
    Split,
}

impl DemoName {
    fn kind(self) -> DriftKind {
        match self {
            DemoName::Translation => DriftKind::Translation,
            DemoName::Expansion => DriftKind::Scaling(ScalingMode::Expand),
            DemoName::Shrink => DriftKind::Scaling(ScalingMode::Shrink),
            DemoName::Split => DriftKind::Split,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CheckName {
    FixedPoint,
    Gradcheck,
    NtkExactness,
}

fn parse_rule(s: &str) -> Result<RuleKind, String> {
    s.parse::<RuleKind>().map_err(|e| e.to_string())
}

/// Flags shared by `demo` and `sweep`; unset values fall back to the config
/// file, then to the built-in defaults.
#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// Update rule: vanilla, ema, nsvq-softmax, nsvq-rbf, delta-e,
    /// modified-ste, or ntk-exact.
    #[arg(long, value_parser = parse_rule)]
    rule: Option<RuleKind>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs (full passes over the dataset).
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory, created if absent.
    #[arg(long, env = "VQLAB_OUT")]
    out: Option<PathBuf>,
    /// TOML config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one toy drift experiment and write its trace and snapshots.
    Demo {
        /// Which drift process to run.
        name: DemoName,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the batch-size sweep and write sweep.csv.
    Sweep {
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        batch_sizes: Vec<usize>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the invariant suite and report pass/fail per property.
    Check {
        /// Run a single named check instead of all of them.
        #[arg(long, value_enum)]
        only: Option<CheckName>,
        /// Debug aid: corrupt one analytic gradient so gradcheck must fail.
        #[arg(long)]
        inject_gradient_fault: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Values accepted from a `--config` file. A versioned schema key is
/// mandatory so stale files fail loudly.
#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    schema_version: Option<u32>,
    rule: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    out: Option<PathBuf>,
}

const CONFIG_SCHEMA_VERSION: u32 = 1;

fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    // toml errors carry line/column context in their Display output.
    let parsed: FileConfig = toml::from_str(&text)
        .map_err(|e| anyhow!("config file {}:\n{e}", path.display()))?;
    match parsed.schema_version {
        Some(CONFIG_SCHEMA_VERSION) => Ok(parsed),
        Some(v) => Err(anyhow!(
            "config file {} has schema_version {v}, expected {CONFIG_SCHEMA_VERSION}",
            path.display()
        )),
        None => Err(anyhow!(
            "config file {} is missing schema_version",
            path.display()
        )),
    }
}

/// Flags override file values, file values override defaults.
struct ResolvedRun {
    rule: RuleKind,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    out: PathBuf,
}

fn resolve(flags: &RunFlags, default_rule: RuleKind) -> Result<ResolvedRun> {
    let file = match &flags.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let file_rule = file
        .rule
        .as_deref()
        .map(|s| s.parse::<RuleKind>().map_err(|e| anyhow!("{e}")))
        .transpose()?;
    Ok(ResolvedRun {
        rule: flags.rule.or(file_rule).unwrap_or(default_rule),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        epochs: flags.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS),
        batch_size: flags
            .batch_size
            .or(file.batch_size)
            .unwrap_or(DEFAULT_BATCH_SIZE),
        out: flags
            .out
            .clone()
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from("out")),
    })
}

fn experiment_config(kind: DriftKind, run: &ResolvedRun) -> ExperimentConfig {
    let mut config = ExperimentConfig::toy(kind, UpdateRule::new(run.rule));
    config.seed = run.seed;
    config.epochs = run.epochs;
    config.batch_size = run.batch_size;
    config
}

fn write_trace_outputs(trace: &TraceLog, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let csv_path = out_dir.join("trace.csv");
    let mut csv = std::io::BufWriter::new(
        fs::File::create(&csv_path)
            .with_context(|| format!("cannot create {}", csv_path.display()))?,
    );
    trace.write_csv(&mut csv)?;
    csv.flush()?;

    let style = PlotStyle::default();
    let rendered = render_trace_snapshots(trace, &style);
    let mut index = 0;
    for (step, svg) in rendered {
        if step == 0 {
            continue;
        }
        index += 1;
        let path = out_dir.join(format!("snap_{index}.svg"));
        fs::write(&path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_demo(name: DemoName, flags: &RunFlags) -> Result<ExitCode> {
    let run = resolve(flags, RuleKind::Ema)?;
    let config = experiment_config(name.kind(), &run);
    let trace = run_experiment(&config).map_err(|e| anyhow!("run failed: {e}"))?;
    write_trace_outputs(&trace, &run.out)?;
    let last = trace
        .final_record()
        .map(|r| (r.distortion_current, r.distortion_target))
        .unwrap_or((f64::NAN, f64::NAN));
    println!(
        "demo {} rule {} seed {}: epochs {} B {} -> {}",
        trace.process_name,
        trace.rule_name,
        run.seed,
        run.epochs,
        run.batch_size,
        run.out.display()
    );
    println!(
        "final utilization {} distortion_current {} distortion_target {}",
        trace
            .epoch_utilization
            .last()
            .copied()
            .unwrap_or(f64::NAN),
        last.0,
        last.1
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(batch_sizes: &[usize], flags: &RunFlags) -> Result<ExitCode> {
    let run = resolve(flags, RuleKind::Ema)?;
    let config = experiment_config(DriftKind::Translation, &run);
    let rows =
        batch_size_sweep(&config, batch_sizes).map_err(|e| anyhow!("sweep failed: {e}"))?;
    fs::create_dir_all(&run.out)
        .with_context(|| format!("cannot create output directory {}", run.out.display()))?;
    let path = run.out.join("sweep.csv");
    let mut file = std::io::BufWriter::new(
        fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?,
    );
    writeln!(file, "B,final_distortion,final_utilization")?;
    for row in &rows {
        writeln!(
            file,
            "{},{},{}",
            row.batch_size, row.final_distortion, row.final_utilization
        )?;
    }
    file.flush()?;

    for row in &rows {
        println!(
            "B {:5}: final distortion {:.6} utilization {:.4}",
            row.batch_size, row.final_distortion, row.final_utilization
        );
    }
    if rows.len() >= 2 {
        let bs: Vec<f64> = rows.iter().map(|r| r.batch_size as f64).collect();
        let ds: Vec<f64> = rows.iter().map(|r| r.final_distortion).collect();
        let rho = spearman(&bs, &ds).map_err(|e| anyhow!("{e}"))?;
        let verdict = if rho < 0.0 {
            "negative: larger batches reduce final distortion"
        } else {
            "not negative"
        };
        println!("spearman(B, final_distortion) = {rho:.4} ({verdict})");
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

struct CheckOutcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check_fixed_point(seed: u64) -> CheckOutcome {
    // The translation stream's base cloud is a plain 2D standard Gaussian.
    let (points, _) = match vqlab::streams::sample_base(DriftKind::Translation, 1500, 1.0, None, seed)
    {
        Ok(p) => p,
        Err(e) => {
            return CheckOutcome {
                name: "fixed-point",
                passed: false,
                detail: format!("sampling failed: {e}"),
            }
        }
    };
    let result = match lloyd(
        points.view(),
        16,
        &InitStrategy::KMeansPlusPlus,
        seed,
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
    ) {
        Ok(r) => r,
        Err(e) => {
            return CheckOutcome {
                name: "fixed-point",
                passed: false,
                detail: format!("lloyd failed: {e}"),
            }
        }
    };
    let mut updated = result.codebook.clone();
    let batch = match vqlab::core::Batch::from_points(points.clone()) {
        Ok(b) => b,
        Err(e) => {
            return CheckOutcome {
                name: "fixed-point",
                passed: false,
                detail: format!("batch failed: {e}"),
            }
        }
    };
    if let Err(e) = ema_batch_step(&mut updated, &batch, 1.0) {
        return CheckOutcome {
            name: "fixed-point",
            passed: false,
            detail: format!("full-batch update failed: {e}"),
        };
    }
    let mut max_disp = 0.0f64;
    for c in 0..result.codebook.k() {
        let diff = &updated.code(c) - &result.codebook.code(c);
        max_disp = max_disp.max(diff.dot(&diff).sqrt());
    }
    CheckOutcome {
        name: "fixed-point",
        passed: result.converged && max_disp < 1e-7,
        detail: format!("max centroid displacement {max_disp:.3e} (threshold 1e-7)"),
    }
}

fn check_gradcheck(seed: u64, inject_fault: bool) -> CheckOutcome {
    let fault = inject_fault.then_some(TensorId::WValue);
    let mut worst: f64 = 0.0;
    for (k, d_model) in [(1usize, 8usize), (4, 8), (16, 16)] {
        let cfg = ProjectorConfig { dim: 2, d_model, mlp_ratio: 2 };
        let params = match ProjectorParams::random_init(cfg, seed.wrapping_add(k as u64)) {
            Ok(p) => p,
            Err(e) => {
                return CheckOutcome {
                    name: "gradcheck",
                    passed: false,
                    detail: format!("init failed: {e}"),
                }
            }
        };
        // K distinct rows of a fresh Gaussian cloud as the base codebook.
        let base = vqlab::streams::sample_base(
            DriftKind::Translation,
            k.max(32),
            1.0,
            None,
            seed ^ 0x5EED ^ k as u64,
        )
        .and_then(|(points, _)| {
            vqlab::kmeans::init_codebook(
                points.view(),
                k,
                &InitStrategy::RandomSample,
                seed,
            )
        });
        let base = match base {
            Ok(b) => b,
            Err(e) => {
                return CheckOutcome {
                    name: "gradcheck",
                    passed: false,
                    detail: format!("base codebook failed: {e}"),
                }
            }
        };
        match gradient_check_with_fault(&params, &base, 1e-5, fault) {
            Ok(err) => worst = worst.max(err),
            Err(e) => {
                return CheckOutcome {
                    name: "gradcheck",
                    passed: false,
                    detail: format!("gradient check failed to run: {e}"),
                }
            }
        }
    }
    CheckOutcome {
        name: "gradcheck",
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.3e} (threshold 1e-5)"),
    }
}

fn check_ntk_exactness(seed: u64) -> CheckOutcome {
    let mut config = ExperimentConfig::toy(
        DriftKind::Translation,
        UpdateRule::new(RuleKind::NtkExact),
    );
    config.seed = seed;
    config.batch_size = 1;
    config.epochs = 2;
    config.init = CodebookInit::Lloyd;
    let trace = match run_experiment(&config) {
        Ok(t) => t,
        Err(e) => {
            return CheckOutcome {
                name: "ntk-exactness",
                passed: false,
                detail: format!("run failed: {e}"),
            }
        }
    };
    let mut worst = 0.0f64;
    let mut prev_codebook = trace.initial_codebook.clone();
    let mut prev_state = vec![0.0; 2];
    for record in &trace.records {
        for c in 0..config.k {
            if record.winners.contains(&c) {
                continue;
            }
            let mut err = 0.0;
            for j in 0..config.d {
                let moved = record.codebook[[c, j]] - prev_codebook[[c, j]];
                let wanted = record.drift_state[j] - prev_state[j];
                err += (moved - wanted) * (moved - wanted);
            }
            worst = worst.max(err.sqrt());
        }
        prev_codebook = record.codebook.clone();
        prev_state = record.drift_state.clone();
    }
    let full_utilization = trace.epoch_utilization.iter().all(|u| *u == 1.0);
    CheckOutcome {
        name: "ntk-exactness",
        passed: worst < 1e-9 && full_utilization,
        detail: format!(
            "worst tracking error {worst:.3e} (threshold 1e-9), epoch utilization {:?}",
            trace.epoch_utilization
        ),
    }
}

fn cmd_check(only: Option<CheckName>, inject_fault: bool, seed: u64) -> Result<ExitCode> {
    let selected = |name: CheckName| only.is_none() || only == Some(name);
    let mut outcomes = Vec::new();
    if selected(CheckName::FixedPoint) {
        outcomes.push(check_fixed_point(seed));
    }
    if selected(CheckName::Gradcheck) {
        outcomes.push(check_gradcheck(seed, inject_fault));
    }
    if selected(CheckName::NtkExactness) {
        outcomes.push(check_ntk_exactness(seed));
    }
    let mut all_passed = true;
    for outcome in &outcomes {
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", outcome.name, outcome.detail);
        all_passed &= outcome.passed;
    }
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Demo { name, ref flags } => cmd_demo(name, flags),
        Command::Sweep { ref batch_sizes, ref flags } => cmd_sweep(batch_sizes, flags),
        Command::Check { only, inject_gradient_fault, seed } => {
            cmd_check(only, inject_gradient_fault, seed.unwrap_or(0))
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
