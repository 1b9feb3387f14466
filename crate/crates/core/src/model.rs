//! The full episode model.
//!
//! Each image runs through the feature extractor and patch block on its own
//! tape (images are independent, so these run in parallel). The episode tape
//! takes the per-image tokens and normalized patches as constants and
//! computes the sample transformer, the transport-based local metric, the
//! fused metric and the losses. Gradients flow back to the image tapes
//! through seeded reverse passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cife::{Backbone, Cife, FeatureExtractor};
use crate::config::RunConfig;
use crate::data::{Episode, LabeledSample, PayloadKind};
use crate::emd::{uniform_plan, LocalMetricConfig};
use crate::error::{Error, Result};
use crate::metric::{MetricKind, MetricMatrix};
use crate::numeric::{DenseMatrix, ForwardCtx, GradTape, Mode, ParamStore, Var};
use crate::objective::{
    classify, contrastive_var, cross_entropy_var, episode_accuracy, fuse_vars, total_var,
    FusionConfig, LossConfig, Prediction,
};
use crate::par::{map_range, try_map_range, Execution};
use crate::patch_former::PatchFormer;
use crate::sample_former::SampleFormer;
use crate::seed::derive_seed;

#[derive(Clone, Debug)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub sample_former: SampleFormer,
    pub patch_former: Option<PatchFormer>,
    pub width: usize,
    pub ways: usize,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub local: LocalMetricConfig,
}

/// One image's forward pass on its own tape.
struct ImageBranch {
    tape: GradTape,
    token: Var,
    patches: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub cl: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub losses: LossValues,
    pub global: MetricMatrix,
    pub local: MetricMatrix,
    pub fused: MetricMatrix,
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
}

struct EpisodePass {
    tape: GradTape,
    branches: Vec<ImageBranch>,
    tokens: (Var, Var),
    patches: Option<(Var, Var)>,
    global: Var,
    local: Var,
    fused: Var,
    ce: Var,
    cl: Var,
    total: Var,
}

impl Model {
    /// Registers every parameter in `store`, driven by `seed`.
    pub fn init(
        cfg: &RunConfig,
        kind: PayloadKind,
        shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let mut store = ParamStore::new();
        let (c, _, _) = shape;
        let backbone = match kind {
            PayloadKind::Raster if !cfg.backbone_enabled => {
                return Err(Error::InvalidParam(
                    "raster data needs backbone.enabled = true".into(),
                ))
            }
            PayloadKind::Raster => Some(Backbone::init(
                &mut store,
                c,
                &cfg.backbone_widths.0,
                &mut rng,
            )?),
            PayloadKind::Features => None,
        };
        let (c3, c4) = match &backbone {
            Some(b) => (b.widths[2], b.widths[3]),
            None => (c, c),
        };
        let (cife, width) = if cfg.cife_enabled {
            let cife = Cife::init(
                &mut store,
                c3,
                c4,
                cfg.cife_channels,
                cfg.cife_heads,
                cfg.cife_dropout,
                &mut rng,
            )?;
            (Some(cife), cfg.cife_channels)
        } else {
            (None, c4)
        };
        let sample_former = SampleFormer::init(&mut store, width, cfg.sample_former(), &mut rng)?;
        let patch_former = if cfg.pf_enabled {
            Some(PatchFormer::init(
                &mut store,
                width,
                cfg.pf_heads,
                cfg.pf_dropout,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok((
            Self {
                extractor: FeatureExtractor { backbone, cife },
                sample_former,
                patch_former,
                width,
                ways: cfg.ways,
                fusion: cfg.fusion(),
                loss: cfg.loss(),
                local: cfg.local_metric(),
            },
            store,
        ))
    }

    fn uses_local(&self) -> bool {
        self.fusion.lambda != 1.0
    }

    fn image_branch(
        &self,
        store: &ParamStore,
        sample: &LabeledSample,
        mode: Mode,
        seed: u64,
    ) -> Result<ImageBranch> {
        let mut tape = GradTape::new();
        let mut ctx = ForwardCtx::new(mode, seed);
        let level = self
            .extractor
            .extract(&mut tape, store, &sample.payload, &mut ctx)?;
        let token = tape.col_mean(level.tokens)?;
        let patches = if self.uses_local() {
            let p = match &self.patch_former {
                Some(pf) => pf.forward(&mut tape, store, level.tokens, &mut ctx)?,
                None => level.tokens,
            };
            tape.row_l2_normalize(p)?
        } else {
            level.tokens
        };
        Ok(ImageBranch {
            tape,
            token,
            patches,
        })
    }

    fn episode_pass(
        &self,
        store: &ParamStore,
        episode: &Episode,
        mode: Mode,
        exec: Execution,
    ) -> Result<EpisodePass> {
        let images: Vec<&LabeledSample> = episode.support.iter().chain(&episode.query).collect();
        let (n_s, n_q) = (episode.support.len(), episode.query.len());
        let seed = episode.seed;
        let branches = try_map_range(exec, images.len(), |i| {
            self.image_branch(store, images[i], mode, derive_seed(seed, "image", i as u64))
        })?;

        let mut t = GradTape::new();
        let mut ctx = ForwardCtx::new(mode, derive_seed(seed, "episode", 0));
        let stack = |range: std::ops::Range<usize>, pick: fn(&ImageBranch) -> Var| {
            let parts: Vec<&DenseMatrix> = range
                .map(|i| branches[i].tape.value(pick(&branches[i])))
                .collect();
            DenseMatrix::vstack(&parts)
        };
        let s_tok = t.constant(stack(0..n_s, |b| b.token)?);
        let q_tok = t.constant(stack(n_s..n_s + n_q, |b| b.token)?);
        let sf = self
            .sample_former
            .forward(&mut t, store, s_tok, q_tok, &mut ctx)?;

        let (local, patches) = if self.uses_local() {
            let s_p = stack(0..n_s, |b| b.patches)?;
            let q_p = stack(n_s..n_s + n_q, |b| b.patches)?;
            let hw = branches[0].tape.value(branches[0].patches).rows();
            let plans = try_map_range(exec, n_q * n_s, |k| {
                let (j, i) = (k / n_s, k % n_s);
                let qj = q_p.select_rows(&(j * hw..(j + 1) * hw).collect::<Vec<_>>());
                let si = s_p.select_rows(&(i * hw..(i + 1) * hw).collect::<Vec<_>>());
                Ok(uniform_plan(&qj.matmul_nt(&si)?, &self.local)?.flows)
            })?;
            let (sv, qv) = (t.constant(s_p), t.constant(q_p));
            (t.transport_aggregate(qv, sv, hw, plans)?, Some((sv, qv)))
        } else {
            (t.constant(DenseMatrix::zeros(n_q, n_s)), None)
        };

        let fused = fuse_vars(&mut t, sf.global_metric, local, &self.fusion)?;
        let (s_lab, q_lab) = (episode.support_labels(), episode.query_labels());
        let ce = cross_entropy_var(&mut t, fused, &s_lab, &q_lab, episode.spec.ways, &self.loss)?;
        let cl = contrastive_var(
            &mut t,
            sf.global_metric,
            &s_lab,
            &q_lab,
            self.loss.contrastive,
        )?;
        let total = total_var(&mut t, ce, cl, &self.loss)?;
        Ok(EpisodePass {
            tape: t,
            branches,
            tokens: (s_tok, q_tok),
            patches,
            global: sf.global_metric,
            local,
            fused,
            ce,
            cl,
            total,
        })
    }

    fn outcome(&self, pass: &EpisodePass, episode: &Episode) -> Result<EpisodeOutcome> {
        let t = &pass.tape;
        let (rows, cols) = (episode.query_ids(), episode.support_ids());
        let metric =
            |v: Var, kind| MetricMatrix::new(t.value(v).clone(), rows.clone(), cols.clone(), kind);
        let fused = metric(pass.fused, MetricKind::Fused)?;
        let predictions = classify(
            &fused,
            &episode.support_labels(),
            episode.spec.ways,
            self.loss.kshot,
        )?;
        let accuracy = episode_accuracy(&predictions, &episode.query_labels());
        Ok(EpisodeOutcome {
            losses: LossValues {
                total: t.value(pass.total).item(),
                ce: t.value(pass.ce).item(),
                cl: t.value(pass.cl).item(),
            },
            global: metric(pass.global, MetricKind::Global)?,
            local: metric(pass.local, MetricKind::Local)?,
            fused,
            predictions,
            accuracy,
        })
    }

    /// Forward pass only.
    pub fn run_episode(
        &self,
        store: &ParamStore,
        episode: &Episode,
        mode: Mode,
        exec: Execution,
    ) -> Result<EpisodeOutcome> {
        let pass = self.episode_pass(store, episode, mode, exec)?;
        self.outcome(&pass, episode)
    }

    /// Forward pass plus the gradient of the total loss for every parameter
    /// of `store`, in store order.
    pub fn episode_gradients(
        &self,
        store: &ParamStore,
        episode: &Episode,
        mode: Mode,
        exec: Execution,
    ) -> Result<(EpisodeOutcome, Vec<DenseMatrix>)> {
        let pass = self.episode_pass(store, episode, mode, exec)?;
        let outcome = self.outcome(&pass, episode)?;
        if !outcome.losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { seed: episode.seed });
        }
        let g = pass.tape.backward(pass.total)?;
        let mut grads = g.for_store(store);

        let n_s = episode.support.len();
        let row_block = |v: Var, start: usize, len: usize| -> Option<DenseMatrix> {
            g.wrt(v)
                .map(|m| m.select_rows(&(start..start + len).collect::<Vec<_>>()))
        };
        let branch_grads = try_map_range(exec, pass.branches.len(), |i| {
            let b = &pass.branches[i];
            let (tok_var, idx) = if i < n_s {
                (pass.tokens.0, i)
            } else {
                (pass.tokens.1, i - n_s)
            };
            let mut seeds = Vec::new();
            if let Some(gt) = row_block(tok_var, idx, 1) {
                seeds.push((b.token, gt));
            }
            if let Some((sv, qv)) = pass.patches {
                let hw = b.tape.value(b.patches).rows();
                let v = if i < n_s { sv } else { qv };
                if let Some(gp) = row_block(v, idx * hw, hw) {
                    seeds.push((b.patches, gp));
                }
            }
            Ok(b.tape.backward_seeded(seeds)?.for_store(store))
        })?;
        for bg in branch_grads {
            for (acc, g) in grads.iter_mut().zip(bg) {
                acc.add_assign(&g);
            }
        }
        Ok((outcome, grads))
    }

    /// Eval-mode total loss, used by finite-difference checks.
    pub fn episode_loss(
        &self,
        store: &ParamStore,
        episode: &Episode,
        exec: Execution,
    ) -> Result<f64> {
        Ok(self
            .run_episode(store, episode, Mode::Eval, exec)?
            .losses
            .total)
    }
}

/// Accuracy of several episodes, each evaluated independently.
pub fn evaluate_episodes(
    model: &Model,
    store: &ParamStore,
    episodes: &[Episode],
    exec: Execution,
) -> Result<Vec<f64>> {
    let results = map_range(exec, episodes.len(), |i| {
        model
            .run_episode(store, &episodes[i], Mode::Eval, exec)
            .map(|o| o.accuracy)
    });
    results.into_iter().collect()
}
