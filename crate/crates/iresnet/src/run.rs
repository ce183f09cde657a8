//! Training, evaluation and gradient-check drivers behind the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use iresnet_core::engine::{finite_diff_check_refined, sample_coords, GradCheckReport, Tensor};
use iresnet_core::graph::ArchGraph;
use iresnet_core::model::{InitPolicy, Model};
use iresnet_core::networks::build_network;
use iresnet_core::trainer::{evaluate, train, TopKErrors, TrainConfig, TrainHistory, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{load_datasets, FileConfig};
use crate::error::{Error, Result};
use crate::history;

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.irnf";
pub const BEST_CHECKPOINT: &str = "best.irnf";
pub const CONFIG_FILE: &str = "config.toml";

/// Trains `config`, writing the resolved config, the history CSV (rewritten
/// after every epoch), `best.irnf` whenever validation top-1 improves and
/// `final.irnf` at the end. Progress lines go to `log`.
pub fn train_to_dir(config: &TrainConfig, out: &Path, log: &mut dyn Write) -> Result<TrainHistory> {
    config.validate()?;
    let (train_set, val_set) = load_datasets(config)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, FileConfig::from_resolved(config, None).to_toml()).map_err(Error::io(&cfg_path))?;
    let hist_path = out.join(HISTORY_FILE);
    history::write(&hist_path, &[])?;

    let start = Instant::now();
    let mut clock = || start.elapsed().as_secs_f64();
    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut failure: Option<Error> = None;
    let mut on_epoch = |rec: &iresnet_core::trainer::EpochRecord, t: &Trainer| {
        (|| -> Result<()> {
            records.push(rec.clone());
            history::write(&hist_path, &records)?;
            if let Some(v) = rec.val_top1.filter(|&v| v > best) {
                best = v;
                checkpoint::write(&out.join(BEST_CHECKPOINT), &t.model.named_tensors())?;
            }
            let val = rec.val_top1.map_or_else(String::new, |v| format!(" val_top1={v:.4}"));
            writeln!(
                log,
                "epoch {}/{} lr={} loss={:.4} train_top1={:.4}{val}",
                rec.epoch, config.epochs, rec.lr, rec.train_loss, rec.train_top1
            )
            .map_err(Error::io("<stdout>"))
        })()
        .map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            iresnet_core::Error::InvalidArgument(msg)
        })
    };
    let result = train(config.clone(), &train_set, Some(&val_set), &mut clock, &mut on_epoch);
    if let Some(e) = failure {
        return Err(e);
    }
    let (hist, trainer) = result?;
    checkpoint::write(&out.join(FINAL_CHECKPOINT), &trainer.model.named_tensors())?;
    Ok(hist)
}

/// Default output directory for a run without one configured.
pub fn default_out_dir(config: &TrainConfig) -> PathBuf {
    PathBuf::from(format!(
        "runs/{}-{}-{}-seed{}",
        config.arch.family, config.arch.variant, config.arch.depth, config.seed
    ))
}

/// Top-k errors of a checkpoint on the validation split of `config`.
pub fn eval_checkpoint(config: &TrainConfig, checkpoint_path: &Path) -> Result<TopKErrors> {
    let a = &config.arch;
    let graph = build_network(a.family, a.variant, a.depth, a.classes)?;
    let mut model = Model::<f32>::lower(&graph, config.init_policy())?;
    model.load_named(&checkpoint::read(checkpoint_path)?)?;
    let (_, val) = load_datasets(config)?;
    Ok(evaluate(&mut model, &val, config.batch_size)?)
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Batch size of the random input.
    pub samples: usize,
    /// Checked coordinates per parameter tensor.
    pub per_param: usize,
    pub epsilon: f64,
    /// Times a coordinate at or above `tolerance` is retried with a 10x smaller step.
    pub refinements: usize,
    pub tolerance: f64,
    pub seed: u64,
}

/// Central-difference check of the loss gradient of a whole network in f64
/// on random inputs and labels.
pub fn gradcheck(graph: &ArchGraph, opts: GradcheckOptions) -> Result<(GradCheckReport, Option<String>)> {
    if opts.samples < 2 {
        return Err(Error::Usage("gradcheck needs --samples >= 2 for batch norm".into()));
    }
    let classes = graph
        .meta
        .as_ref()
        .map(|m| m.classes)
        .ok_or_else(|| Error::Usage("gradcheck needs an architecture with metadata".into()))?;
    let mut model = Model::<f64>::lower(
        graph,
        InitPolicy {
            seed: opts.seed,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut shape = vec![opts.samples];
    shape.extend(&graph.input.0);
    let x = Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0));
    let y: Vec<usize> = (0..opts.samples).map(|_| rng.random_range(0..classes)).collect();
    let coords = sample_coords(model.params(), opts.per_param, &mut rng);
    let mut params = model.params().clone();
    let report = finite_diff_check_refined(&mut params, &coords, opts.epsilon, opts.refinements, opts.tolerance, |ps| {
        *model.params_mut() = ps.clone();
        let (loss, _) = model.loss_and_grad(x.clone(), &y)?;
        *ps = model.params().clone();
        Ok(loss)
    })?;
    let worst = report.worst.map(|(p, e)| format!("{}[{e}]", params.get(p).id));
    Ok((report, worst))
}
