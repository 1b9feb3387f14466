//! Backbone and cross-scale interactive feature extraction.
//!
//! The backbone is four stages of 3x3 conv, ReLU and 2x2 max-pool. The
//! fusion block resizes level 3 onto level 4's grid (nearest neighbor),
//! projects both to width `c`, runs one transformer block over the `2·h·w`
//! tokens of a single image and keeps the level-4 positions.

use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSample, Payload, PayloadKind};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::numeric::kernels::DEFAULT_LN_EPS;
use crate::numeric::nn::{linear, AttentionLayer, FfnLayer, LayerNormLayer, LinearLayer};
use crate::numeric::{ForwardCtx, GradTape, HeadScale, ParamStore, Var};
use crate::par::{try_map_range, Execution};

pub const BACKBONE_STAGES: usize = 4;

/// A spatial token matrix on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Level {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureMap>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    /// One `9·c_in → c_out` projection per stage, columns ordered `(ky, kx, ch)`.
    pub stages: Vec<LinearLayer>,
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl Backbone {
    pub fn init(
        store: &mut ParamStore,
        in_channels: usize,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.len() != BACKBONE_STAGES || widths.contains(&0) || in_channels == 0 {
            return Err(Error::InvalidParam(format!(
                "backbone needs {BACKBONE_STAGES} nonzero widths, got {widths:?}"
            )));
        }
        let mut stages = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            stages.push(LinearLayer::init(
                store,
                &format!("backbone.stage{i}"),
                9 * c_in,
                c_out,
                rng,
            ));
            c_in = c_out;
        }
        Ok(Self {
            stages,
            in_channels,
            widths: widths.to_vec(),
        })
    }

    pub fn forward(
        &self,
        t: &mut GradTape,
        store: &ParamStore,
        input: Level,
    ) -> Result<Vec<Level>> {
        if input.height < 1 << BACKBONE_STAGES || input.width < 1 << BACKBONE_STAGES {
            return Err(Error::shape(
                "backbone_forward",
                format!(
                    "raster {}x{} is smaller than 16x16",
                    input.height, input.width
                ),
            ));
        }
        if t.value(input.tokens).cols() != self.in_channels {
            return Err(Error::shape(
                "backbone_forward",
                format!(
                    "{} input channels, expected {}",
                    t.value(input.tokens).cols(),
                    self.in_channels
                ),
            ));
        }
        let mut x = input;
        let mut levels = Vec::with_capacity(BACKBONE_STAGES);
        for stage in &self.stages {
            let cols = t.im2col3x3(x.tokens, x.height, x.width)?;
            let w = stage.vars(t, store);
            let conv = linear(t, cols, &w)?;
            let act = t.relu(conv)?;
            let pooled = t.max_pool2(act, x.height, x.width)?;
            x = Level {
                tokens: pooled,
                height: x.height / 2,
                width: x.width / 2,
            };
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Nearest-neighbor source rows mapping an `h3 × w3` grid onto `h4 × w4`.
pub fn nearest_resize_index(h3: usize, w3: usize, h4: usize, w4: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h4 * w4);
    for y in 0..h4 {
        for x in 0..w4 {
            idx.push((y * h3 / h4) * w3 + x * w3 / w4);
        }
    }
    idx
}

#[derive(Clone, Copy, Debug)]
pub struct Cife {
    pub proj3: LinearLayer,
    pub proj4: LinearLayer,
    pub attention: AttentionLayer,
    pub norm1: LayerNormLayer,
    pub ffn: FfnLayer,
    pub norm2: LayerNormLayer,
    pub width: usize,
    pub dropout: f64,
}

impl Cife {
    pub fn init(
        store: &mut ParamStore,
        c3: usize,
        c4: usize,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj3: LinearLayer::init(store, "cife.proj3", c3, width, rng),
            proj4: LinearLayer::init(store, "cife.proj4", c4, width, rng),
            attention: AttentionLayer::init(
                store,
                "cife.attn",
                width,
                heads,
                HeadScale::PerHead,
                rng,
            )?,
            norm1: LayerNormLayer::init(store, "cife.ln1", width, DEFAULT_LN_EPS),
            ffn: FfnLayer::init(store, "cife.ffn", width, 2 * width, rng),
            norm2: LayerNormLayer::init(store, "cife.ln2", width, DEFAULT_LN_EPS),
            width,
            dropout,
        })
    }

    /// Returns the `h4·w4 × c` fused tokens at level-4 positions.
    pub fn forward(
        &self,
        t: &mut GradTape,
        store: &ParamStore,
        level3: Level,
        level4: Level,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let idx = nearest_resize_index(level3.height, level3.width, level4.height, level4.width);
        let resized = t.gather_rows(level3.tokens, idx)?;
        let (w3, w4) = (self.proj3.vars(t, store), self.proj4.vars(t, store));
        let p3 = linear(t, resized, &w3)?;
        let p4 = linear(t, level4.tokens, &w4)?;
        let x = t.concat_rows(vec![p3, p4])?;
        let msa = self.attention.forward(t, store, x, x, x)?;
        let msa = ctx.dropout(t, msa.output, self.dropout)?;
        let sum = t.add(x, msa)?;
        let x1 = self.norm1.forward(t, store, sum)?;
        let f = self.ffn.forward(t, store, x1)?;
        let f = ctx.dropout(t, f, self.dropout)?;
        let sum = t.add(x1, f)?;
        let x2 = self.norm2.forward(t, store, sum)?;
        let n = level4.height * level4.width;
        t.gather_rows(x2, (n..2 * n).collect())
    }
}

/// Backbone (for rasters) followed by optional fusion. Precomputed feature
/// payloads skip the backbone and serve as both fusion levels.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub backbone: Option<Backbone>,
    pub cife: Option<Cife>,
}

impl FeatureExtractor {
    pub fn extract(
        &self,
        t: &mut GradTape,
        store: &ParamStore,
        payload: &Payload,
        ctx: &mut ForwardCtx,
    ) -> Result<Level> {
        let map = payload.map();
        let input = Level {
            tokens: t.constant(map.tokens().clone()),
            height: map.height(),
            width: map.width(),
        };
        let (l3, l4) = match payload {
            Payload::Features(_) => (input, input),
            Payload::Raster(_) => {
                let bb = self.backbone.as_ref().ok_or_else(|| {
                    Error::InvalidParam("raster payloads need the backbone enabled".into())
                })?;
                let levels = bb.forward(t, store, input)?;
                (levels[2], levels[3])
            }
        };
        match &self.cife {
            Some(c) => Ok(Level {
                tokens: c.forward(t, store, l3, l4, ctx)?,
                height: l4.height,
                width: l4.width,
            }),
            None => Ok(l4),
        }
    }
}

pub fn backbone_forward(
    raster: &FeatureMap,
    store: &ParamStore,
    bb: &Backbone,
) -> Result<MultiScaleFeatures> {
    let mut t = GradTape::new();
    let input = Level {
        tokens: t.constant(raster.tokens().clone()),
        height: raster.height(),
        width: raster.width(),
    };
    let levels = bb
        .forward(&mut t, store, input)?
        .into_iter()
        .map(|l| FeatureMap::from_tokens(l.height, l.width, t.value(l.tokens).clone()))
        .collect::<Result<_>>()?;
    Ok(MultiScaleFeatures { levels })
}

pub fn cife_forward(
    ms: &MultiScaleFeatures,
    store: &ParamStore,
    cife: &Cife,
) -> Result<FeatureMap> {
    if ms.levels.len() < 4 {
        return Err(Error::shape(
            "cife_forward",
            format!("{} levels", ms.levels.len()),
        ));
    }
    let mut t = GradTape::new();
    let mut level = |f: &FeatureMap| Level {
        tokens: t.constant(f.tokens().clone()),
        height: f.height(),
        width: f.width(),
    };
    let (l3, l4) = (level(&ms.levels[2]), level(&ms.levels[3]));
    let out = cife.forward(&mut t, store, l3, l4, &mut ForwardCtx::eval())?;
    FeatureMap::from_tokens(l4.height, l4.width, t.value(out).clone())
}

/// Eval-mode features for every sample, computed independently (in
/// parallel when `exec` allows).
pub fn batch_features(
    samples: &[LabeledSample],
    store: &ParamStore,
    extractor: &FeatureExtractor,
    exec: Execution,
) -> Result<Vec<FeatureMap>> {
    if let Some(first) = samples.first() {
        let kind: PayloadKind = first.payload.kind();
        if samples.iter().any(|s| s.payload.kind() != kind) {
            return Err(Error::InvalidParam("mixed payload kinds in batch".into()));
        }
    }
    try_map_range(exec, samples.len(), |i| {
        let mut t = GradTape::new();
        let out = extractor.extract(&mut t, store, &samples[i].payload, &mut ForwardCtx::eval())?;
        FeatureMap::from_tokens(out.height, out.width, t.value(out.tokens).clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassId, SampleId};
    use crate::numeric::gradcheck::grad_check;
    use crate::numeric::scalar;
    use crate::numeric::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let v: Vec<f64> = (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureMap::from_chw(c, h, w, &v).unwrap()
    }

    /// Conv (zero pad 1) + bias + ReLU + 2x2 max-pool on channel-major data.
    fn scalar_stage(
        x: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        wt: &DenseMatrix,
        b: &[f64],
    ) -> Vec<f64> {
        let c_out = b.len();
        let mut conv = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ch in 0..c_in {
                                let v = x[ch * h * w + sy as usize * w + sx as usize];
                                s += v * wt[((ky * 3 + kx) * c_in + ch, o)];
                            }
                        }
                    }
                    conv[o * h * w + y * w + xx] = s.max(0.0);
                }
            }
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(conv[o * h * w + (2 * y + dy) * w + 2 * xx + dx]);
                        }
                    }
                    out[o * ho * wo + y * wo + xx] = m;
                }
            }
        }
        out
    }

    #[test]
    fn backbone_matches_scalar_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, 2, &[3, 4, 3, 2], &mut rng).unwrap();
        let raster = random_map(&mut rng, 2, 16, 20);
        let ms = backbone_forward(&raster, &store, &bb).unwrap();
        let mut x = raster.to_chw();
        let (mut c, mut h, mut w) = (2, 16, 20);
        for (i, stage) in bb.stages.iter().enumerate() {
            let b = store.get(stage.b).row(0).to_vec();
            x = scalar_stage(&x, c, h, w, store.get(stage.w), &b);
            c = b.len();
            h /= 2;
            w /= 2;
            assert_eq!(ms.levels[i].shape(), (c, h, w));
            let got = ms.levels[i].to_chw();
            let err = got
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "stage {i}: {err}");
        }
        assert_eq!(backbone_forward(&raster, &store, &bb).unwrap(), ms);
    }

    #[test]
    fn zero_raster_zero_bias_gives_zero_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, 3, &[4, 4, 4, 4], &mut rng).unwrap();
        for s in &bb.stages {
            let name = store.name(s.b).to_string();
            let n = store.get(s.b).cols();
            store.set(&name, DenseMatrix::zeros(1, n)).unwrap();
        }
        let raster = FeatureMap::from_chw(3, 16, 16, &vec![0.0; 768]).unwrap();
        let ms = backbone_forward(&raster, &store, &bb).unwrap();
        assert!(ms
            .levels
            .iter()
            .all(|l| l.tokens().data().iter().all(|v| *v == 0.0)));
        let small = FeatureMap::from_chw(3, 8, 8, &vec![0.0; 192]).unwrap();
        assert!(backbone_forward(&small, &store, &bb).is_err());
    }

    #[test]
    fn nearest_resize_maps_grids() {
        assert_eq!(nearest_resize_index(2, 2, 1, 1), vec![0]);
        assert_eq!(nearest_resize_index(4, 4, 2, 2), vec![0, 2, 8, 10]);
        assert_eq!(nearest_resize_index(2, 2, 2, 2), vec![0, 1, 2, 3]);
        assert_eq!(nearest_resize_index(10, 10, 5, 5).len(), 25);
    }

    #[test]
    fn single_position_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cife = Cife::init(&mut store, 3, 3, 4, 2, 0.0, &mut rng).unwrap();
        // identical projections make both tokens equal, so attention returns v(x)
        let w = store.get(cife.proj3.w).clone();
        let b = store.get(cife.proj3.b).clone();
        store.set("cife.proj4.w", w).unwrap();
        store.set("cife.proj4.b", b).unwrap();
        let f = random_map(&mut rng, 3, 1, 1);
        let ms = MultiScaleFeatures {
            levels: vec![f.clone(), f.clone(), f.clone(), f.clone()],
        };
        let out = cife_forward(&ms, &store, &cife).unwrap();
        let x = scalar::linear_named(&store, "cife.proj3", &scalar::rows_of(f.tokens()));
        let v = scalar::linear_named(&store, "cife.attn.v", &x);
        let x1 = scalar::layer_norm_named(&store, "cife.ln1", &scalar::add(&x, &v), DEFAULT_LN_EPS);
        let ff = scalar::ffn_named(&store, "cife.ffn", &x1);
        let x2 =
            scalar::layer_norm_named(&store, "cife.ln2", &scalar::add(&x1, &ff), DEFAULT_LN_EPS);
        assert!(scalar::max_abs_diff(&x2, out.tokens()) < 1e-12);
    }

    #[test]
    fn fused_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cife = Cife::init(&mut store, 48, 64, 64, 8, 0.0, &mut rng).unwrap();
        let ms = MultiScaleFeatures {
            levels: vec![
                random_map(&mut rng, 16, 40, 40),
                random_map(&mut rng, 32, 20, 20),
                random_map(&mut rng, 48, 10, 10),
                random_map(&mut rng, 64, 5, 5),
            ],
        };
        assert_eq!(
            cife_forward(&ms, &store, &cife).unwrap().shape(),
            (64, 5, 5)
        );
    }

    fn sample(id: u64, payload: Payload) -> LabeledSample {
        LabeledSample {
            id: SampleId(id),
            class: ClassId(0),
            payload: Arc::new(payload),
        }
    }

    #[test]
    fn batch_shares_weights_and_bypasses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cife = Cife::init(&mut store, 6, 6, 8, 2, 0.0, &mut rng).unwrap();
        let maps: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, 6, 2, 2)).collect();
        let samples: Vec<_> = (0..5)
            .map(|i| sample(i as u64, Payload::Features(maps[i % 4].clone())))
            .collect();
        let ex = FeatureExtractor {
            backbone: None,
            cife: Some(cife),
        };
        let out = batch_features(&samples, &store, &ex, Execution::Parallel).unwrap();
        assert_eq!(out[0], out[4]);
        assert_eq!(out.len(), 5);
        // batch order does not matter
        let rev: Vec<_> = samples.iter().rev().cloned().collect();
        let out_rev = batch_features(&rev, &store, &ex, Execution::Sequential).unwrap();
        for i in 0..5 {
            assert_eq!(out[i], out_rev[4 - i]);
        }

        let plain = FeatureExtractor {
            backbone: None,
            cife: None,
        };
        let out = batch_features(&samples, &store, &plain, Execution::Parallel).unwrap();
        for i in 0..5 {
            assert_eq!(&out[i], samples[i].payload.map());
        }

        let mixed = vec![
            samples[0].clone(),
            sample(9, Payload::Raster(maps[0].clone())),
        ];
        assert!(batch_features(&mixed, &store, &plain, Execution::Parallel).is_err());
    }

    #[test]
    fn fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cife = Cife::init(&mut store, 3, 4, 4, 2, 0.0, &mut rng).unwrap();
        let l3 = random_map(&mut rng, 3, 4, 4);
        let l4 = random_map(&mut rng, 4, 2, 2);
        let weights = DenseMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let report = grad_check(
            &store,
            |store: &ParamStore, t: &mut GradTape| {
                let a = Level {
                    tokens: t.constant(l3.tokens().clone()),
                    height: 4,
                    width: 4,
                };
                let b = Level {
                    tokens: t.constant(l4.tokens().clone()),
                    height: 2,
                    width: 2,
                };
                let out = cife.forward(t, store, a, b, &mut ForwardCtx::eval())?;
                let w = t.mul_const(out, weights.clone())?;
                t.sum_all(w)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-5), "{:?}", report.worst);
    }
}
