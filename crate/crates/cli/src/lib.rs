//! `hicem`: pipeline stages, interventions and the explorer service.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use hicem_core::api::Explorer;
use hicem_core::config::RunConfig;
use hicem_core::eval::curve_tsv;
use hicem_core::pipeline::{files, summary_text, Pipeline, ServedRun};
use hicem_core::Error;

pub mod server;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hicem", version, about = "Concept models, concept splitting and interventions")]
pub struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the artifact directory.
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world.
    Gen,
    /// Train the flat CEM.
    TrainCem,
    /// Discover sub-concepts in the CEM's embeddings.
    Split,
    /// Match discovered sub-concepts to the concept bank.
    Match,
    /// Train the HiCEM on the matched sub-concepts.
    TrainHicem,
    /// Test-split metrics for both models.
    Eval,
    /// Intervention curves; prints one as TSV.
    Curve {
        #[arg(long, value_enum, default_value = "hicem-sub")]
        which: CurveChoice,
    },
    /// Intervene on one sample of a finished run and print the prediction payload.
    Intervene {
        #[arg(long)]
        sample: String,
        /// Request body, e.g. '{"interventions":[{"level":"top","concept":0,"present":true}]}'.
        #[arg(long, conflicts_with = "spec_file")]
        spec: Option<String>,
        #[arg(long)]
        spec_file: Option<PathBuf>,
    },
    /// Serve the explorer API for a finished run.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Run whatever is not up to date and print the report digest.
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CurveChoice {
    CemTop,
    HicemTop,
    HicemSub,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_STAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_STAGE,
        message: format!("writing output: {e}"),
    }
}

/// The run config after applying `--config`, `--seed` and `--artifacts`.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.artifacts {
        cfg.artifacts = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command, writing its normal output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Intervene { sample, spec, spec_file } => {
            let body = match (spec, spec_file) {
                (Some(s), None) => s.clone().into_bytes(),
                (None, Some(p)) => {
                    std::fs::read(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
                }
                _ => return Err(CliError::config("give exactly one of --spec and --spec-file")),
            };
            let explorer = Explorer::new(ServedRun::open(&cfg.artifacts)?);
            let resp = explorer.intervene(sample, &body);
            if resp.status != 200 {
                let code = if resp.status < 500 { EXIT_CONFIG } else { EXIT_STAGE };
                return Err(CliError {
                    code,
                    message: resp.body.trim_end().to_string(),
                });
            }
            out.write_all(resp.body.as_bytes()).map_err(io_err)?;
        }
        Command::Serve { bind } => {
            let explorer = Explorer::new(ServedRun::open(&cfg.artifacts)?);
            let addr: std::net::SocketAddr = bind
                .parse()
                .map_err(|e| CliError::config(format!("--bind {bind}: {e}")))?;
            server::serve_blocking(Arc::new(explorer), addr).map_err(|e| CliError {
                code: EXIT_STAGE,
                message: format!("server on {addr}: {e}"),
            })?;
        }
        stage => run_stage(stage, &cfg, out)?,
    }
    Ok(())
}

fn run_stage(command: &Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut p = Pipeline::new(cfg)?;
    let dir = p.dir().display().to_string();
    let text = match command {
        Command::Gen => {
            let w = p.world()?;
            format!(
                "{} rows, {} features, {} concepts, {} bank entries -> {dir}/{}\n",
                w.dataset.len(),
                w.dataset.n_hidden(),
                w.hierarchy.len(),
                w.bank.entries.len(),
                files::WORLD
            )
        }
        Command::TrainCem => {
            let m = p.cem()?;
            format!(
                "{} epochs, best {} -> {dir}/{}\n",
                m.report.epochs_run,
                m.report.best_epoch,
                files::CEM
            )
        }
        Command::Split => {
            let mut s = String::new();
            for row in p.split_summary()? {
                s.push_str(&format!(
                    "{:<12} {:<8} rows {:>6}  sub-concepts {:>4}{}\n",
                    row.concept,
                    row.polarity.as_str(),
                    row.partition_rows,
                    row.discovered,
                    row.skipped.as_deref().map(|r| format!("  skipped: {r}")).unwrap_or_default()
                ));
            }
            s.push_str(&format!("-> {dir}/{}\n", files::LABELS_TSV));
            s
        }
        Command::Match => {
            let m = p.matching()?;
            let mut s = String::new();
            for r in &m.table.rows {
                s.push_str(&format!(
                    "{:<16} {}  {}\n",
                    r.bank,
                    r.match_auc.map_or("  n/a ".into(), |a| format!("{a:.4}")),
                    r.sub.as_deref().unwrap_or("-")
                ));
            }
            s
        }
        Command::TrainHicem => {
            let m = p.hicem()?;
            format!(
                "{} sub-concepts, {} epochs, best {} -> {dir}/{}\n",
                m.net().n_subs(),
                m.report.epochs_run,
                m.report.best_epoch,
                files::HICEM
            )
        }
        Command::Eval => {
            let e = p.eval()?;
            format!(
                "CEM   accuracy {:.4}  concept AUC {:.4}\nHiCEM accuracy {:.4}  concept AUC {:.4}  sub-concept AUC {}\n",
                e.cem.task_accuracy,
                e.cem.concept_auc_mean,
                e.hicem.task_accuracy,
                e.hicem.concept_auc_mean,
                e.hicem.sub_auc_mean.map_or("n/a".into(), |a| format!("{a:.4}"))
            )
        }
        Command::Curve { which } => {
            let c = p.curves()?;
            curve_tsv(match which {
                CurveChoice::CemTop => &c.cem_top,
                CurveChoice::HicemTop => &c.hicem_top,
                CurveChoice::HicemSub => &c.hicem_sub,
            })
        }
        Command::Report => {
            let r = summary_text(p.report()?);
            format!("{r}-> {dir}/{}\n", files::REPORT)
        }
        Command::Intervene { .. } | Command::Serve { .. } => unreachable!("handled by execute"),
    };
    out.write_all(text.as_bytes()).map_err(io_err)
}
