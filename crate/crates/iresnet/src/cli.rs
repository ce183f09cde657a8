//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iresnet_core::analyzer::{analyze, golden_cells, verify_cells};
use iresnet_core::graph::Shape;
use iresnet_core::networks::{build_network, Family, VariantId};

use crate::config::FileConfig;
use crate::error::{Error, Result};
use crate::run::{self, GradcheckOptions};
use crate::{archfile, report};

#[derive(Debug, Parser)]
#[command(name = "iresnet", version, about = "Build, analyze, verify and train improved residual networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a network and write it as an .arch.json file.
    Build(BuildArgs),
    /// Print the structure of an .arch.json file.
    Summarize(SummarizeArgs),
    /// Per-layer parameter and FLOP counts.
    Count(CountArgs),
    /// Check computed complexity against the published tables.
    VerifyTables(VerifyArgs),
    /// Train a CIFAR network from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split of a config.
    Eval(EvalArgs),
    /// Finite-difference check of a network's loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub family: Family,
    #[arg(long)]
    pub variant: VariantId,
    #[arg(long)]
    pub depth: usize,
    /// Defaults to 1000 (imagenet), 10 (cifar) or 400 (video3d).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Output path [default: <family>-<variant>-<depth>.arch.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub arch: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub arch: PathBuf,
    /// Per-sample input shape such as 3x224x224 [default: the graph's input]
    #[arg(long)]
    pub input: Option<Shape>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Check the cells of this CSV instead of the embedded tables.
    #[arg(long)]
    pub golden: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate drops; empty for none.
    #[arg(long, value_parser = parse_milestones)]
    pub milestones: Option<Milestones>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<VariantId>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Train on the first N images only.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Record per-epoch wall time (false writes 0 so histories compare equal).
    #[arg(long)]
    pub wall_time: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Milestones(pub Vec<usize>);

fn parse_milestones(s: &str) -> std::result::Result<Milestones, String> {
    if s.trim().is_empty() {
        return Ok(Milestones(Vec::new()));
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("not an epoch number: {p:?}")))
        .collect::<std::result::Result<_, _>>()
        .map(Milestones)
}

impl TrainArgs {
    fn overrides(&self) -> FileConfig {
        let mut f = FileConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            record_wall_time: self.wall_time,
            out_dir: self.out.clone(),
            ..Default::default()
        };
        f.arch.variant = self.variant;
        f.arch.depth = self.depth;
        f.optim.base_lr = self.lr;
        f.optim.milestones = self.milestones.clone().map(|m| m.0);
        f.data.subset = self.subset;
        f.data.dir = self.data_dir.clone();
        f
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub arch: PathBuf,
    /// Number of random input samples.
    #[arg(long)]
    pub samples: usize,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    pub per_param: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Retries of a failing coordinate, each with a 10x smaller step.
    #[arg(long, default_value_t = 1)]
    pub refine: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(Error::io("<stdout>"))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Build(a) => {
            let classes = a.classes.unwrap_or(a.family.default_classes());
            let graph = build_network(a.family, a.variant, a.depth, classes)?;
            let path = a
                .out
                .unwrap_or_else(|| format!("{}-{}-{}.{}", a.family, a.variant, a.depth, archfile::EXTENSION).into());
            archfile::write(&path, &graph)?;
            emit(out, &format!("{}\nwrote {}\n", report::census_line(&graph), path.display()))
        }
        Command::Summarize(a) => emit(out, &report::summary(&archfile::read(&a.arch)?)),
        Command::Count(a) => {
            let graph = archfile::read(&a.arch)?;
            let input = a.input.unwrap_or_else(|| graph.input.clone());
            let r = analyze(&graph, &input)?;
            emit(out, &match a.format {
                Format::Text => report::count_text(&r),
                Format::Csv => report::count_csv(&r),
            })
        }
        Command::VerifyTables(a) => {
            let cells = match &a.golden {
                Some(p) => report::read_golden(&fs::read_to_string(p).map_err(Error::io(p))?, p)?,
                None => golden_cells(),
            };
            let r = verify_cells(&cells)?;
            emit(out, &report::verify_text(&r))?;
            if let Some(p) = &a.csv {
                fs::write(p, report::verify_csv(&r)).map_err(Error::io(p))?;
            }
            let failed = r.failures().count();
            if failed > 0 {
                return Err(Error::Failed(format!("{failed} of {} cells failed", r.rows.len())));
            }
            Ok(())
        }
        Command::Train(a) => {
            let file = FileConfig::read(&a.config)?.overlay(&a.overrides());
            let config = file.resolve()?;
            let dir = file.out_dir.clone().unwrap_or_else(|| run::default_out_dir(&config));
            let hist = run::train_to_dir(&config, &dir, out)?;
            let last = hist.records.last().map_or_else(
                || "no epochs run".to_string(),
                |r| format!("final loss={:.4} train_top1={:.4}", r.train_loss, r.train_top1),
            );
            emit(out, &format!("{last}\nwrote {}\n", dir.display()))
        }
        Command::Eval(a) => {
            let mut file = FileConfig::read(&a.config)?;
            if a.data_dir.is_some() {
                file.data.dir = a.data_dir.clone();
            }
            let e = run::eval_checkpoint(&file.resolve()?, &a.checkpoint)?;
            let top5 = e.top5.map_or_else(String::new, |t| format!(" top5_error={t:.4}"));
            emit(out, &format!("top1_error={:.4}{top5}\n", e.top1))
        }
        Command::Gradcheck(a) => {
            let graph = archfile::read(&a.arch)?;
            let opts = GradcheckOptions {
                samples: a.samples,
                per_param: a.per_param,
                epsilon: a.epsilon,
                refinements: a.refine,
                tolerance: a.threshold,
                seed: a.seed,
            };
            let (r, worst) = run::gradcheck(&graph, opts)?;
            let at = worst.map_or_else(String::new, |w| format!(" at {w}"));
            emit(
                out,
                &format!(
                    "checked {} coordinates ({} at a refined step); worst relative error {:.3e}{at}\n",
                    r.checked, r.refined, r.max_rel_error
                ),
            )?;
            if !(r.max_rel_error < a.threshold) {
                return Err(Error::Failed(format!(
                    "relative error {:.3e} exceeds threshold {:.0e}",
                    r.max_rel_error, a.threshold
                )));
            }
            Ok(())
        }
    }
}
