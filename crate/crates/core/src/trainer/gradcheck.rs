//! Finite-difference check of the total episode loss.

use crate::config::RunConfig;
use crate::data::{sample_episode, synth_dataset, Episode, EpisodeSpec};
use crate::error::Result;
use crate::model::Model;
use crate::numeric::gradcheck::{compare_with_finite_differences, GradCheckReport};
use crate::numeric::{DenseMatrix, GradTape, Mode, ParamStore};
use crate::par::Execution;
use crate::seed::derive_seed;

/// 3-way 1-shot, 2 queries per class, c = 8, 2×2 feature maps, one
/// sampleFormer layer, 2 heads, α = λ = 0.5, no dropout.
pub fn tiny_gradcheck_config() -> RunConfig {
    RunConfig {
        ways: 3,
        shots: 1,
        queries: 2,
        synth_classes: 3,
        synth_samples_per_class: 3,
        synth_channels: 8,
        synth_signal_channels: 8,
        synth_height: 2,
        synth_width: 2,
        cife_channels: 8,
        cife_heads: 2,
        cife_dropout: 0.0,
        sf_layers: 1,
        sf_heads: 2,
        sf_dropout: 0.0,
        sf_decoder_dropout: 0.0,
        pf_heads: 2,
        pf_dropout: 0.0,
        alpha: 0.5,
        lambda: 0.5,
        ..RunConfig::default()
    }
}

/// A model, its parameters and one episode, ready for checking.
pub struct GradCheckSetup {
    pub model: Model,
    pub store: ParamStore,
    pub episode: Episode,
}

impl GradCheckSetup {
    /// Builds everything from `cfg` using synthetic feature maps.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let spec = cfg.synth_spec();
        let data = synth_dataset(&spec, derive_seed(cfg.seed, "gradcheck-data", 0))?;
        let (model, store) = Model::init(cfg, data.kind(), data.payload_shape(), cfg.seed)?;
        let episode = sample_episode(
            &data.full_view(),
            EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries)?,
            derive_seed(cfg.seed, "gradcheck-episode", 0),
        )?;
        Ok(Self {
            model,
            store,
            episode,
        })
    }

    /// Tape gradients of the eval-mode total loss.
    pub fn analytic(&self, exec: Execution) -> Result<Vec<DenseMatrix>> {
        Ok(self
            .model
            .episode_gradients(&self.store, &self.episode, Mode::Eval, exec)?
            .1)
    }

    /// Compares `grads` with central differences of step `step`.
    pub fn check(
        &self,
        grads: &[DenseMatrix],
        step: f64,
        exec: Execution,
    ) -> Result<GradCheckReport> {
        let loss = |s: &ParamStore, t: &mut GradTape| {
            let v = self
                .model
                .episode_loss(s, &self.episode, Execution::Sequential)?;
            Ok(t.constant(DenseMatrix::scalar(v)))
        };
        compare_with_finite_differences(&self.store, &loss, grads, step, exec)
    }
}

pub fn run_grad_check(cfg: &RunConfig, exec: Execution) -> Result<GradCheckReport> {
    let setup = GradCheckSetup::new(cfg)?;
    let grads = setup.analytic(exec)?;
    setup.check(&grads, cfg.gradcheck_step, exec)
}
