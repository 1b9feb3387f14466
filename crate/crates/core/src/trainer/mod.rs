//! Episodic training, evaluation, checkpoints and the end-to-end gradient
//! check.

pub mod checkpoint;
pub mod gradcheck;

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::dir::load_dataset_dir;
use crate::data::{
    make_splits, sample_episode, synth_dataset, Dataset, DatasetView, EpisodeSpec, MetaSplit,
    SplitRule,
};
use crate::error::{Error, Result};
use crate::model::{evaluate_episodes, Model};
use crate::numeric::{DenseMatrix, Mode, ParamStore};
use crate::objective::mean_ci;
use crate::par::Execution;
use crate::seed::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{run_grad_check, tiny_gradcheck_config, GradCheckSetup};

/// Training-loop settings pulled out of a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_steps: usize,
    pub lr_decay_coeff: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub seed: u64,
    pub episode: EpisodeSpec,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let tc = Self {
            initial_lr: cfg.lr,
            lr_decay_steps: cfg.lr_decay_steps,
            lr_decay_coeff: cfg.lr_decay_coeff,
            momentum: cfg.momentum,
            epochs: cfg.epochs,
            episodes_per_epoch: cfg.episodes_per_epoch,
            seed: cfg.seed,
            episode: EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries)?,
        };
        if tc.epochs == 0 || tc.episodes_per_epoch == 0 {
            return Err(Error::InvalidParam(
                "training needs at least one epoch and one episode per epoch".into(),
            ));
        }
        Ok(tc)
    }
}

/// `initial_lr · coeff^⌊epoch / steps⌋`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_steps.max(1)) as i32;
    cfg.initial_lr * cfg.lr_decay_coeff.powi(k)
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<DenseMatrix>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store
                .iter()
                .map(|(_, v)| DenseMatrix::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[DenseMatrix], lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), vel) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = store.get_mut(id);
            if self.momentum == 0.0 {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            } else {
                for ((w, v), d) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                    *v = self.momentum * *v + d;
                    *w -= lr * *v;
                }
            }
        }
    }
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    pub episode_seed: u64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_cl: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_mean_accuracy: Vec<f64>,
    /// Episodes consumed; the next training episode seed index.
    pub episodes_seen: u64,
}

/// Runs the full schedule, writing one JSON line per episode to `log`.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_view: &DatasetView<'_>,
    cfg: &TrainConfig,
    exec: Execution,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let mut sgd = Sgd::new(store, cfg.momentum);
    let mut summary = TrainSummary::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for _ in 0..cfg.episodes_per_epoch {
            let seed = derive_seed(cfg.seed, "train-episode", summary.episodes_seen);
            summary.episodes_seen += 1;
            let episode = sample_episode(train_view, cfg.episode, seed)?;
            let (out, grads) = model.episode_gradients(store, &episode, Mode::Train, exec)?;
            sgd.step(store, &grads, lr);
            let record = EpisodeRecord {
                epoch,
                episode_seed: seed,
                loss_total: out.losses.total,
                loss_ce: out.losses.ce,
                loss_cl: out.losses.cl,
                accuracy: out.accuracy,
                lr,
            };
            let line = serde_json::to_string(&record).expect("plain record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
            loss_sum += out.losses.total;
            acc_sum += out.accuracy;
        }
        let n = cfg.episodes_per_epoch as f64;
        summary.epoch_mean_loss.push(loss_sum / n);
        summary.epoch_mean_accuracy.push(acc_sum / n);
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Mean accuracy and 95% interval over `n_episodes` episodes drawn from
/// `view`. Episodes run concurrently; each has its own derived seed.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    view: &DatasetView<'_>,
    spec: EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalSummary> {
    if n_episodes < 2 {
        return Err(Error::InvalidParam(
            "evaluation needs at least 2 episodes".into(),
        ));
    }
    let episodes = (0..n_episodes as u64)
        .map(|k| sample_episode(view, spec, derive_seed(seed, "eval-episode", k)))
        .collect::<Result<Vec<_>>>()?;
    let accuracies = evaluate_episodes(model, store, &episodes, exec)?;
    let (mean, ci95) = mean_ci(&accuracies)?;
    Ok(EvalSummary {
        mean,
        ci95,
        accuracies,
    })
}

/// The configured dataset (a directory, or synthetic when `data.dir` is
/// empty) and its class split.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, MetaSplit)> {
    let dataset = if cfg.data_dir.is_empty() {
        let spec = cfg.synth_spec();
        synth_dataset(&spec, derive_seed(cfg.seed, "synth", 0))?
    } else {
        load_dataset_dir(Path::new(&cfg.data_dir))?
    };
    let r = &cfg.split_ratios.0;
    let split = make_splits(
        &dataset.classes(),
        &SplitRule::Ratios(r[0], r[1], r[2]),
        derive_seed(cfg.seed, "split", 0),
    )?;
    Ok((dataset, split))
}

/// Builds a freshly initialized model for `dataset`.
pub fn init_model(cfg: &RunConfig, dataset: &Dataset) -> Result<(Model, ParamStore)> {
    Model::init(cfg, dataset.kind(), dataset.payload_shape(), cfg.seed)
}
