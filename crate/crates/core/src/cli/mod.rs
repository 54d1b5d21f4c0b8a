//! The `otdg` command-line front end: strict JSON configuration, the
//! train/loo/ablate/bounds/ot commands and their on-disk artifacts.

mod config;
mod io;

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{
    CsvSpec, DatasetSpec, ExperimentConfig, OtConfig, OtMode, RotatedSpec, DEFAULT_OUT,
};
pub use io::{
    load_point_cloud, read_point_cloud, write_ablation_table, write_loo_runs, write_loo_table,
    write_metrics, write_plot_rows, write_point_cloud, Report, FORMAT_VERSION,
};

use crate::bounds::run_sweeps;
use crate::dg::{ablate, leave_one_out, train, Holdout, TrainConfig};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::ot::{free_support_barycenter, sinkhorn_divergence, sinkhorn_ot, BarycenterOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_BOUNDS: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "otdg",
    version,
    about = "Wasserstein-barycenter domain generalization and transport-bound checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seed list; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    /// Disable thread parallelism.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed with a fixed unseen domain.
    Train(Common),
    /// Leave-one-domain-out accuracy table.
    Loo(Common),
    /// The five-variant ablation table.
    Ablate(Common),
    /// Randomized sweeps over the transport-inequality bounds.
    Bounds(Common),
    /// Sinkhorn divergence or free-support barycenter of point-cloud files.
    Ot {
        /// Overrides `ot.mode` from the config.
        #[arg(value_enum)]
        mode: Option<OtMode>,
        #[command(flatten)]
        common: Common,
    },
}

/// What a command produced and how the process should exit.
#[derive(Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Numerical(_)
        | Error::NonFinite { .. }
        | Error::SingularKernel(_)
        | Error::NotPositiveDefinite(_)
        | Error::Shape { .. }
        | Error::Unbound(_)
        | Error::NonScalarOutput(_) => EXIT_NUMERICAL,
        Error::Config { .. }
        | Error::Parse { .. }
        | Error::InvalidArgument(_)
        | Error::UnsupportedFamily(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for line in &out.summary {
                println!("{line}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            out.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn prepare(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.resolve(common.out.clone(), common.seed.clone(), common.serial);
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(c) => cmd_train(&prepare(c)?),
        Command::Loo(c) => cmd_loo(&prepare(c)?),
        Command::Ablate(c) => cmd_ablate(&prepare(c)?),
        Command::Bounds(c) => cmd_bounds(&prepare(c)?),
        Command::Ot { mode, common } => {
            let mut cfg = prepare(common)?;
            if let Some(m) = mode {
                cfg.ot.mode = *m;
            }
            cmd_ot(&cfg)
        }
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn report<T: Serialize>(
    path: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    warnings: &[String],
    result: T,
) -> Result<()> {
    let r = Report {
        format_version: FORMAT_VERSION,
        command,
        config: cfg,
        warnings,
        result,
    };
    io::write_json(path, &r)
}

fn training_warnings(cfg: &ExperimentConfig) -> Vec<String> {
    let mut w = vec![];
    for m in cfg.method_list() {
        for msg in (TrainConfig {
            method: m,
            ..cfg.train.clone()
        })
        .grid_warnings()
        {
            if !w.contains(&msg) {
                w.push(msg);
            }
        }
    }
    w
}

fn ok(files: Vec<PathBuf>, summary: Vec<String>, warnings: Vec<String>) -> Result<Outcome> {
    Ok(Outcome {
        exit_code: EXIT_OK,
        files,
        summary,
        warnings,
    })
}

/// Per seed: `report_seed{s}.json`, `metrics_seed{s}.csv`, `model_seed{s}.bin`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = cfg.dataset.load()?;
    let unseen = cfg.unseen_index(&ds)?.unwrap_or(ds.domains.len() - 1);
    let warnings = training_warnings(cfg);
    let dir = out_dir(cfg)?;
    let (mut files, mut summary) = (vec![], vec![]);
    for seed in cfg.seed_list() {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let outcome = train(&tc, &ds, unseen)?;
        let r = &outcome.report;
        let metrics = dir.join(format!("metrics_seed{seed}.csv"));
        write_metrics(r, create(&metrics)?)?;
        let model = dir.join(format!("model_seed{seed}.bin"));
        let mut w = create(&model)?;
        outcome.model.write_to(&mut w)?;
        std::io::Write::flush(&mut w)?;
        let json = dir.join(format!("report_seed{seed}.json"));
        report(&json, "train", cfg, &warnings, r)?;
        summary.push(format!(
            "{} seed {seed}: unseen {} accuracy {:.4} (epoch {}, val {:.4})",
            r.method.name(),
            r.unseen_domain,
            r.test_acc,
            r.selected_epoch,
            r.best_val_acc
        ));
        files.extend([json, metrics, model]);
    }
    ok(files, summary, warnings)
}

/// `loo_table.csv`, `loo_runs.csv` and `loo_report.json`.
pub fn cmd_loo(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = cfg.dataset.load()?;
    let warnings = training_warnings(cfg);
    let dir = out_dir(cfg)?;
    let seeds = cfg.seed_list();
    let tables = cfg
        .method_list()
        .into_iter()
        .map(|m| {
            leave_one_out(
                &TrainConfig {
                    method: m,
                    ..cfg.train.clone()
                },
                &ds,
                &seeds,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let table = dir.join("loo_table.csv");
    write_loo_table(&tables, create(&table)?)?;
    let runs = dir.join("loo_runs.csv");
    {
        let mut buf = vec![];
        for (i, t) in tables.iter().enumerate() {
            let mut part = vec![];
            write_loo_runs(t, &mut part)?;
            // keep one header
            let skip = if i == 0 {
                0
            } else {
                part.iter().position(|b| *b == b'\n').map_or(0, |p| p + 1)
            };
            buf.extend_from_slice(&part[skip..]);
        }
        std::fs::write(&runs, buf)?;
    }
    let json = dir.join("loo_report.json");
    report(&json, "loo", cfg, &warnings, &tables)?;
    let summary = tables
        .iter()
        .map(|t| {
            let (_, avg) = t.rows.last().expect("Avg row");
            format!(
                "{}: average unseen accuracy {:.4} ± {:.4}",
                t.method.name(),
                avg.mean,
                avg.std
            )
        })
        .collect();
    ok(vec![json, table, runs], summary, warnings)
}

/// `ablation_table.csv` and `ablation_report.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = cfg.dataset.load()?;
    let (holdout, name) = match cfg.unseen_index(&ds)? {
        Some(u) => (Holdout::One(u), ds.domains[u].name.clone()),
        None => (Holdout::All, "Avg".to_string()),
    };
    let mut warnings = cfg.train.grid_warnings();
    if cfg.methods.is_some() {
        warnings.push("`methods` is ignored by ablate".into());
    }
    let dir = out_dir(cfg)?;
    let t = ablate(&cfg.train, &ds, holdout, &cfg.seed_list())?;
    let table = dir.join("ablation_table.csv");
    write_ablation_table(&t, &name, create(&table)?)?;
    let json = dir.join("ablation_report.json");
    report(&json, "ablate", cfg, &warnings, &t)?;
    let summary = t
        .columns
        .iter()
        .map(|c| format!("{}: {:.4} ± {:.4}", c.name, c.stats.mean, c.stats.std))
        .collect();
    ok(vec![json, table], summary, warnings)
}

/// `bounds_report.json` and `bounds_summary.csv`; exit 3 on any violation.
pub fn cmd_bounds(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let outcome = run_sweeps(&cfg.bounds)?;
    let csv_path = dir.join("bounds_summary.csv");
    {
        let mut w = csv::Writer::from_writer(create(&csv_path)?);
        let row = |w: &mut csv::Writer<_>, r: [String; 7]| {
            w.write_record(r)
                .map_err(|e| Error::Io(std::io::Error::other(e)))
        };
        row(
            &mut w,
            [
                "name",
                "cases",
                "min_slack",
                "min_margin",
                "monte_carlo",
                "failures",
                "passed",
            ]
            .map(String::from),
        )?;
        for s in &outcome.sweeps {
            row(
                &mut w,
                [
                    s.name.clone(),
                    s.cases.to_string(),
                    s.min_slack.to_string(),
                    s.min_margin.to_string(),
                    s.monte_carlo.to_string(),
                    s.failures.to_string(),
                    s.passed.to_string(),
                ],
            )?;
        }
        w.flush()?;
    }
    let json = dir.join("bounds_report.json");
    report(&json, "bounds", cfg, &[], &outcome)?;
    let mut summary: Vec<String> = outcome
        .sweeps
        .iter()
        .map(|s| {
            let verdict = if s.passed { "ok" } else { "VIOLATED" };
            format!(
                "{:<28} {:>5} cases  min slack {:+.3e}  {verdict}",
                s.name, s.cases, s.min_slack
            )
        })
        .collect();
    summary.push(format!(
        "regime: {} pairs, both orderings {}, conditions verified {}",
        outcome.regime.len(),
        outcome.regime_has_both_orderings,
        outcome.regime_conditions_verified
    ));
    let code = if outcome.all_passed {
        EXIT_OK
    } else {
        EXIT_BOUNDS
    };
    Ok(Outcome {
        exit_code: code,
        files: vec![json, csv_path],
        summary,
        warnings: vec![],
    })
}

#[derive(Serialize)]
struct SinkhornResult {
    divergence: f64,
    ot_eps: f64,
    cost: f64,
    iterations_used: usize,
    converged: bool,
    marginal_error: f64,
}

#[derive(Serialize)]
struct BarycenterSummary<'a> {
    support: &'a EmpiricalMeasure,
    divergence_to_inputs: Vec<f64>,
    objective_trace: &'a [f64],
    converged: bool,
}

/// Sinkhorn between exactly two clouds, or the barycenter of one or more.
pub fn cmd_ot(cfg: &ExperimentConfig) -> Result<Outcome> {
    let o = &cfg.ot;
    let clouds = o
        .inputs
        .iter()
        .map(|p| load_point_cloud(p))
        .collect::<Result<Vec<_>>>()?;
    let opts = o.sinkhorn_options();
    let dir = out_dir(cfg)?;
    let json = dir.join("ot_report.json");
    let mut warnings = vec![];
    match o.mode {
        OtMode::Sinkhorn => {
            let [a, b] = clouds.as_slice() else {
                return Err(Error::Config {
                    field: "ot.inputs".into(),
                    msg: "sinkhorn needs exactly two point clouds".into(),
                });
            };
            let plan = sinkhorn_ot(a, b, &opts)?;
            let divergence = sinkhorn_divergence(a, b, &opts)?;
            let res = SinkhornResult {
                divergence,
                ot_eps: plan.ot_eps,
                cost: plan.cost,
                iterations_used: plan.iterations_used,
                converged: plan.converged,
                marginal_error: plan.marginal_error,
            };
            if !plan.converged {
                warnings.push(format!(
                    "sinkhorn did not converge in {} iterations",
                    o.max_iter
                ));
            }
            report(&json, "ot", cfg, &warnings, &res)?;
            let code = if plan.converged {
                EXIT_OK
            } else {
                EXIT_NUMERICAL
            };
            let summary = vec![format!(
                "sinkhorn divergence {divergence:.6e}, transport cost {:.6e}",
                plan.cost
            )];
            Ok(Outcome {
                exit_code: code,
                files: vec![json],
                summary,
                warnings,
            })
        }
        OtMode::Barycenter => {
            if clouds.is_empty() {
                return Err(Error::Config {
                    field: "ot.inputs".into(),
                    msg: "barycenter needs at least one point cloud".into(),
                });
            }
            if let Some(w) = &o.weights {
                if w.len() != clouds.len() {
                    return Err(Error::Config {
                        field: "ot.weights".into(),
                        msg: "one weight per input is required".into(),
                    });
                }
            }
            let k =
                o.k.unwrap_or_else(|| clouds.iter().map(|c| c.len()).max().unwrap_or(1));
            let bo = BarycenterOptions {
                k,
                sinkhorn: opts,
                outer_iters: o.outer_iters,
                tol: o.support_tol,
                seed: o.seed,
                parallel: cfg.train.parallel && cfg.bounds.parallel,
            };
            let res = free_support_barycenter(&clouds, o.weights.as_deref(), &bo)?;
            let divergence_to_inputs = clouds
                .iter()
                .map(|c| sinkhorn_divergence(&res.measure, c, &opts))
                .collect::<Result<Vec<_>>>()?;
            let support = dir.join("barycenter_support.csv");
            write_point_cloud(&res.measure, create(&support)?)?;
            let mut files = vec![json.clone(), support];
            if o.plot {
                if res.measure.dim() <= 2 {
                    let plot = dir.join("barycenter_plot.csv");
                    write_plot_rows(&res.measure, create(&plot)?)?;
                    files.push(plot);
                } else {
                    warnings.push(format!(
                        "no plot rows for a {}-dimensional support",
                        res.measure.dim()
                    ));
                }
            }
            if !res.converged {
                warnings.push(format!(
                    "barycenter support still moving after {} iterations",
                    o.outer_iters
                ));
            }
            let body = BarycenterSummary {
                support: &res.measure,
                divergence_to_inputs,
                objective_trace: &res.objective_trace,
                converged: res.converged,
            };
            report(&json, "ot", cfg, &warnings, &body)?;
            let code = if res.converged {
                EXIT_OK
            } else {
                EXIT_NUMERICAL
            };
            let summary = vec![format!(
                "barycenter: {} support points, final objective {:.6e}",
                res.measure.len(),
                res.objective_trace.last().copied().unwrap_or(f64::NAN)
            )];
            Ok(Outcome {
                exit_code: code,
                files,
                summary,
                warnings,
            })
        }
    }
}
