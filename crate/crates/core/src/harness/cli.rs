//! `lora-lab` command line. Exit codes: 0 success, 1 configuration or I/O
//! error (including usage errors), 2 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::pipeline::{self, Datasets};
use crate::harness::report::{
    ensure_dir, write_csv, write_json, write_text, BOUND_COLUMNS, JENSEN_COLUMNS, MCNORM_COLUMNS, RUN_COLUMNS,
    STABILITY_COLUMNS, SWEEP_COLUMNS,
};
use crate::harness::svg::{LineChart, Series};
use crate::rng::{self, derive_seed, tag};
use crate::theory::jensen::{jensen_check, JensenSettings};
use crate::theory::mcnorm::mc_masked_norm_check;
use crate::theory::sweep::{bound_table, probe_report, run_cells, GapSweepRecord};
use crate::theory::stability::ETA_NOTE;
use crate::training::{Model, RunOptions, RunRecord};

pub const THREADS_ENV: &str = "LORA_LAB_THREADS";
/// Set to `1` to record real per-epoch wall-clock time (breaks byte-identical reruns).
pub const WALLCLOCK_ENV: &str = "LORA_LAB_WALLCLOCK";

#[derive(Debug, Parser)]
#[command(name = "lora-lab", version, about = "LoRA Dropout laboratory")]
pub struct Cli {
    /// Experiment configuration (JSON); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `out` (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dense base model on the pretrain split.
    Pretrain,
    /// Attach adapters to a pretrained checkpoint and fine-tune them.
    Finetune {
        /// Pretrained checkpoint; pretrains in memory from the seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on the fine-tune test split.
    Eval {
        /// Fine-tuned checkpoint; pretrains and fine-tunes in memory when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generalization gap over the configured p-grid and seeds.
    Sweep,
    /// Ensemble loss versus mean instance loss over random batches.
    JensenCheck {
        /// Model to check; a randomly initialized adapter model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Leave-one-out stability of a small convex learner against its bound.
    StabilityProbe,
    /// Monte Carlo check of the masked-norm identity.
    McnormCheck,
    /// Line chart of a run-record or sweep CSV.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

struct Context {
    config: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    options: RunOptions,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a non-negative integer")))?,
        Err(_) => 0,
    };
    // A pool may already exist when the CLI runs in-process more than once.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn context(cli: &Cli) -> Result<Context> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let wall_clock = std::env::var(WALLCLOCK_ENV).is_ok_and(|v| v == "1");
    Ok(Context {
        seed: config.seed,
        config,
        out,
        options: RunOptions { wall_clock },
    })
}

fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let ctx = context(cli)?;
    ensure_dir(&ctx.out)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Finetune { checkpoint } => cmd_finetune(&ctx, checkpoint.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint.as_deref()),
        Command::Sweep => cmd_sweep(&ctx),
        Command::JensenCheck { checkpoint } => cmd_jensen(&ctx, checkpoint.as_deref()),
        Command::StabilityProbe => cmd_stability(&ctx),
        Command::McnormCheck => cmd_mcnorm(&ctx),
        Command::Plot { input } => cmd_plot(&ctx, input),
    }
}

fn write_run(ctx: &Context, stem: &str, record: &RunRecord) -> Result<()> {
    write_csv(&ctx.path(&format!("{stem}_run.csv")), &RUN_COLUMNS, &record.rows)?;
    write_json(&ctx.path(&format!("{stem}_run.json")), record)
}

fn load_model(path: &Path) -> Result<Model<f64>> {
    Checkpoint::<f64>::load(path)?.to_model()
}

fn pretrained(ctx: &Context, data: &Datasets, checkpoint: Option<&Path>) -> Result<Model<f64>> {
    match checkpoint {
        Some(path) => {
            let model = load_model(path)?;
            let expect = ctx.config.model_spec().layer_shapes();
            let got: Vec<_> = model.layers().iter().map(|l| l.shape()).collect();
            if let Some(l) = (0..expect.len().max(got.len())).find(|&l| expect.get(l) != got.get(l)) {
                return Err(Error::Load {
                    layer: l,
                    message: format!(
                        "checkpoint {} does not match the configured model (expected {:?}, found {:?})",
                        path.display(),
                        expect.get(l),
                        got.get(l)
                    ),
                });
            }
            Ok(model)
        }
        None => Ok(pipeline::pretrain(&ctx.config, ctx.seed, data, ctx.options)?.0),
    }
}

fn cmd_pretrain(ctx: &Context) -> Result<()> {
    let data = Datasets::generate(&ctx.config, ctx.seed)?;
    let (model, record) = pipeline::pretrain(&ctx.config, ctx.seed, &data, ctx.options)?;
    Checkpoint::from_model(&model, &ctx.config.model_spec()).save(&ctx.path("pretrain.json"))?;
    write_run(ctx, "pretrain", &record)?;
    if let Some(last) = record.last() {
        info!("pretrain: test_acc {:.4} test_loss {:.4}", last.test_acc, last.test_loss);
    }
    Ok(())
}

fn cmd_finetune(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let data = Datasets::generate(&ctx.config, ctx.seed)?;
    let base = pretrained(ctx, &data, checkpoint)?;
    let (model, mut record) = pipeline::finetune(&ctx.config, ctx.seed, &data, &base, None, ctx.options)?;
    let path = ctx.path("finetune.json");
    Checkpoint::from_model(&model, &ctx.config.model_spec()).save(&path)?;
    record.checkpoint = Some("finetune.json".into());
    write_run(ctx, "finetune", &record)?;
    if let Some(last) = record.last() {
        info!(
            "finetune: train_acc {:.4} test_acc {:.4} gap {:.4}",
            last.train_acc,
            last.test_acc,
            last.test_loss - last.train_loss
        );
    }
    Ok(())
}

fn cmd_eval(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let data = Datasets::generate(&ctx.config, ctx.seed)?;
    let model = match checkpoint {
        Some(path) => load_model(path)?,
        None => {
            let base = pipeline::pretrain(&ctx.config, ctx.seed, &data, ctx.options)?.0;
            pipeline::finetune(&ctx.config, ctx.seed, &data, &base, None, ctx.options)?.0
        }
    };
    let report = pipeline::evaluate_model(&ctx.config, ctx.seed, &data, &model)?;
    info!("eval: accuracy {:.4} ece {:.4} (N = {}, p = {})", report.accuracy, report.ece, report.instances, report.p);
    write_json(&ctx.path("eval.json"), &report)
}

fn sweep_chart(record: &GapSweepRecord) -> LineChart {
    let mut seeds: Vec<u64> = record.rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    seeds.sort_unstable();
    seeds.dedup();
    let mut ps: Vec<f64> = record.rows.iter().map(|r| r.p).collect();
    ps.dedup();
    let mut series: Vec<Series> = seeds
        .iter()
        .map(|&s| Series {
            name: format!("seed {s}"),
            points: record
                .rows
                .iter()
                .filter(|r| r.seed == s)
                .map(|r| (r.p, if r.diverged { f64::NAN } else { r.gap }))
                .collect(),
        })
        .collect();
    series.push(Series {
        name: "mean".into(),
        points: ps
            .iter()
            .map(|&p| (p, record.mean_at(p, |r| r.gap).unwrap_or(f64::NAN)))
            .collect(),
    });
    LineChart {
        title: "generalization gap vs dropout rate".into(),
        x_label: "dropout rate p".into(),
        y_label: "test loss - train loss".into(),
        series,
    }
}

fn cmd_sweep(ctx: &Context) -> Result<()> {
    let cells = run_cells(&ctx.config, ctx.options)?;
    let cell_dir = ctx.path("sweep_cells");
    ensure_dir(&cell_dir)?;
    for cell in &cells {
        if let Some(record) = &cell.record {
            let name = format!("p{:.3}_seed{}.csv", cell.row.p, cell.row.seed);
            write_csv(&cell_dir.join(name), &RUN_COLUMNS, &record.rows)?;
        }
    }
    let (bound, constants, c_source) = bound_table(&ctx.config, ctx.seed)?;
    let rows: Vec<_> = cells.into_iter().map(|c| c.row).collect();
    let record = GapSweepRecord {
        diverged: rows.iter().filter(|r| r.diverged).count(),
        rows,
        bound,
        constants,
        c_source,
        eta_note: ETA_NOTE.into(),
    };
    write_csv(&ctx.path("sweep.csv"), &SWEEP_COLUMNS, &record.rows)?;
    write_csv(&ctx.path("sweep_bound.csv"), &BOUND_COLUMNS, &record.bound)?;
    write_json(&ctx.path("sweep.json"), &record)?;
    write_text(&ctx.path("sweep.svg"), &sweep_chart(&record).render())?;
    for b in &record.bound {
        if let Some(gap) = record.mean_at(b.p, |r| r.gap) {
            info!("sweep: p {:.2} mean gap {:.4} bound {:.4}", b.p, gap, b.bound);
        }
    }
    if record.diverged > 0 {
        log::warn!("sweep: {} diverged cells excluded from means", record.diverged);
    }
    Ok(())
}

fn cmd_jensen(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let data = Datasets::generate(&ctx.config, ctx.seed)?;
    let model = match checkpoint {
        Some(path) => load_model(path)?,
        None => pipeline::random_adapter_model(&ctx.config, ctx.seed)?,
    };
    let j = &ctx.config.jensen;
    let settings = JensenSettings {
        p: j.p,
        instances: j.instances,
        trials: j.trials,
        batch_size: j.batch_size,
        domain: j.domain,
    };
    let report = jensen_check(&model, &data.finetune_test, &settings, derive_seed(&[ctx.seed, tag("jensen")]))?;
    write_csv(&ctx.path("jensen.csv"), &JENSEN_COLUMNS, &report.rows)?;
    write_json(&ctx.path("jensen.json"), &report)?;
    info!(
        "jensen-check: {} trials, {} violations, max negative gap {:e}",
        report.rows.len(),
        report.violations,
        report.max_negative_gap
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct StabilityCsvRow {
    lambda: f64,
    i: usize,
    perturbation: f64,
    beta_bound: f64,
}

fn cmd_stability(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config.stability;
    let reports = cfg
        .lambdas
        .iter()
        .map(|&lambda| probe_report(cfg, lambda, ctx.seed))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<StabilityCsvRow> = reports
        .iter()
        .flat_map(|r| {
            r.rows.iter().map(|row| StabilityCsvRow {
                lambda: r.lambda,
                i: row.i,
                perturbation: row.perturbation,
                beta_bound: r.beta_bound,
            })
        })
        .collect();
    write_csv(&ctx.path("stability.csv"), &STABILITY_COLUMNS, &rows)?;
    write_json(&ctx.path("stability.json"), &reports)?;
    for r in &reports {
        info!(
            "stability-probe: lambda {} max perturbation {:e} bound {:e} satisfied {}",
            r.lambda, r.max_observed, r.beta_bound, r.bound_satisfied
        );
    }
    Ok(())
}

fn cmd_mcnorm(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config.mcnorm;
    let delta = match &cfg.delta {
        Some(d) => d.clone(),
        None => {
            let mut r = rng::rng_from(&[ctx.seed, tag("mcnorm-delta")]);
            (0..cfg.dim).map(|_| StandardNormal.sample(&mut r)).collect()
        }
    };
    let mut r = rng::rng_from(&[ctx.seed, tag("mcnorm-masks")]);
    let report = mc_masked_norm_check(&delta, cfg.p, cfg.draws, &mut r)?;
    write_csv(&ctx.path("mcnorm.csv"), &MCNORM_COLUMNS, std::slice::from_ref(&report))?;
    write_json(&ctx.path("mcnorm.json"), &report)?;
    info!(
        "mcnorm-check: mc {:.6} closed form {:.6} rel error {:.2e}",
        report.mc_estimate, report.closed_form, report.rel_error
    );
    Ok(())
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn cmd_plot(ctx: &Context, input: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
    let headers = reader.headers()?.clone();
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let num = |rec: &csv::StringRecord, k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let chart = if let (Some(p), Some(seed), Some(gap)) =
        (column(&headers, "p"), column(&headers, "seed"), column(&headers, "gap"))
    {
        let mut seeds: Vec<String> = records.iter().filter_map(|r| r.get(seed).map(str::to_string)).collect();
        seeds.sort();
        seeds.dedup();
        LineChart {
            title: format!("{stem}: gap vs p"),
            x_label: "dropout rate p".into(),
            y_label: "gap".into(),
            series: seeds
                .iter()
                .map(|s| Series {
                    name: format!("seed {s}"),
                    points: records
                        .iter()
                        .filter(|r| r.get(seed) == Some(s.as_str()))
                        .map(|r| (num(r, p), num(r, gap)))
                        .collect(),
                })
                .collect(),
        }
    } else if let Some(epoch) = column(&headers, "epoch") {
        let series = ["train_loss", "test_loss", "train_acc", "test_acc"]
            .iter()
            .filter_map(|&name| {
                column(&headers, name).map(|k| Series {
                    name: name.into(),
                    points: records.iter().map(|r| (num(r, epoch), num(r, k))).collect(),
                })
            })
            .collect();
        LineChart {
            title: format!("{stem}: training curves"),
            x_label: "epoch".into(),
            y_label: "value".into(),
            series,
        }
    } else {
        return Err(Error::Config(format!(
            "{}: expected a run-record (epoch, ...) or sweep (p, seed, gap, ...) CSV",
            input.display()
        )));
    };
    let path = ctx.path(&format!("{stem}.svg"));
    write_text(&path, &chart.render())?;
    info!("plot: wrote {}", path.display());
    Ok(())
}
