//! Transformer building blocks recorded on a [`GradTape`].
//!
//! Each block exists in two forms: a layer type holding [`ParamId`]s that the
//! model uses, and a plain function taking concrete matrices (built on a
//! throwaway tape, so both forms share one code path).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, check_rate, dropout_mask, LayerNormParams, Mode};
use super::matrix::DenseMatrix;
use super::params::{ParamId, ParamStore};
use super::tape::{GradTape, Var};
use crate::error::{Error, Result};

/// Mode plus the seeded stream that drives dropout masks.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dropout(&mut self, t: &mut GradTape, x: Var, rate: f64) -> Result<Var> {
        check_rate(rate)?;
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = t.value(x).shape();
        let mask = dropout_mask(r, c, rate, &mut self.rng);
        t.mul_const(x, mask)
    }
}

/// How attention logits are scaled before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadScale {
    /// No scaling.
    None,
    /// `1/sqrt(c / heads)` per head.
    PerHead,
    /// `1/sqrt(c)` regardless of head count.
    Full,
}

impl HeadScale {
    fn factor(self, c: usize, heads: usize) -> f64 {
        match self {
            HeadScale::None => 1.0,
            HeadScale::PerHead => 1.0 / ((c / heads) as f64).sqrt(),
            HeadScale::Full => 1.0 / (c as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub fn linear(t: &mut GradTape, x: Var, l: &LinearVars) -> Result<Var> {
    let xw = t.matmul(x, l.w)?;
    t.add_row_bias(xw, l.b)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Per-head `affinity·values`, heads concatenated.
    pub output: Var,
    /// Head-averaged affinity, row-stochastic.
    pub affinity: Var,
}

/// Multi-head attention without an output projection.
pub fn multi_head_attention(
    t: &mut GradTape,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionVars,
    heads: usize,
    scale: HeadScale,
) -> Result<AttentionOutput> {
    let q = linear(t, queries, &w.query)?;
    let k = linear(t, keys, &w.key)?;
    let v = linear(t, values, &w.value)?;
    let c = t.value(q).cols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::InvalidParam(format!(
            "{heads} heads do not divide width {c}"
        )));
    }
    let d = c / heads;
    let factor = scale.factor(c, heads);
    let mut outs = Vec::with_capacity(heads);
    let mut affs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * d, d)?,
                t.slice_cols(k, h * d, d)?,
                t.slice_cols(v, h * d, d)?,
            )
        };
        let mut logits = t.matmul_nt(qh, kh)?;
        if factor != 1.0 {
            logits = t.scale(logits, factor)?;
        }
        let a = t.softmax_rows(logits)?;
        outs.push(t.matmul(a, vh)?);
        affs.push(a);
    }
    let (output, affinity) = if heads == 1 {
        (outs[0], affs[0])
    } else {
        (t.concat_cols(outs)?, t.mean_of(affs)?)
    };
    Ok(AttentionOutput { output, affinity })
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
    pub eps: f64,
}

pub fn layer_norm(t: &mut GradTape, x: Var, p: &LayerNormVars) -> Result<Var> {
    t.layer_norm(x, p.gain, p.bias, p.eps)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub hidden: LinearVars,
    pub out: LinearVars,
}

/// `relu(x·w1 + b1)·w2 + b2`
pub fn ffn(t: &mut GradTape, x: Var, p: &FfnVars) -> Result<Var> {
    let h = linear(t, x, &p.hidden)?;
    let h = t.relu(h)?;
    linear(t, h, &p.out)
}

// Layers holding parameter ids.

#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = store.register_uniform(format!("{name}.b"), 1, fan_out, fan_in, rng);
        Self { w, b }
    }

    pub fn vars(&self, t: &mut GradTape, store: &ParamStore) -> LinearVars {
        LinearVars {
            w: t.param(store, self.w),
            b: t.param(store, self.b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionLayer {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub heads: usize,
    pub scale: HeadScale,
}

impl AttentionLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        scale: HeadScale,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidParam(format!(
                "{name}: {heads} heads do not divide width {width}"
            )));
        }
        Ok(Self {
            query: LinearLayer::init(store, &format!("{name}.q"), width, width, rng),
            key: LinearLayer::init(store, &format!("{name}.k"), width, width, rng),
            value: LinearLayer::init(store, &format!("{name}.v"), width, width, rng),
            heads,
            scale,
        })
    }

    pub fn forward(
        &self,
        t: &mut GradTape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<AttentionOutput> {
        let w = AttentionVars {
            query: self.query.vars(t, store),
            key: self.key.vars(t, store),
            value: self.value.vars(t, store),
        };
        multi_head_attention(t, queries, keys, values, &w, self.heads, self.scale)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), DenseMatrix::filled(1, width, 1.0)),
            bias: store.register(format!("{name}.bias"), DenseMatrix::zeros(1, width)),
            eps,
        }
    }

    pub fn forward(&self, t: &mut GradTape, store: &ParamStore, x: Var) -> Result<Var> {
        let p = LayerNormVars {
            gain: t.param(store, self.gain),
            bias: t.param(store, self.bias),
            eps: self.eps,
        };
        layer_norm(t, x, &p)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnLayer {
    pub hidden: LinearLayer,
    pub out: LinearLayer,
}

impl FfnLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: LinearLayer::init(store, &format!("{name}.1"), width, hidden, rng),
            out: LinearLayer::init(store, &format!("{name}.2"), hidden, width, rng),
        }
    }

    pub fn forward(&self, t: &mut GradTape, store: &ParamStore, x: Var) -> Result<Var> {
        let p = FfnVars {
            hidden: self.hidden.vars(t, store),
            out: self.out.vars(t, store),
        };
        ffn(t, x, &p)
    }
}

// Plain-matrix forms.

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl Linear {
    fn push(&self, t: &mut GradTape) -> LinearVars {
        LinearVars {
            w: t.constant(self.w.clone()),
            b: t.constant(DenseMatrix::row_vector(&self.b)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub head_count: usize,
    pub scale: HeadScale,
    pub dropout_rate: f64,
}

impl AttentionParams {
    pub fn new(
        query_proj: Linear,
        key_proj: Linear,
        value_proj: Linear,
        head_count: usize,
        scale: HeadScale,
        dropout_rate: f64,
    ) -> Result<Self> {
        let c = query_proj.w.cols();
        if head_count == 0 || !c.is_multiple_of(head_count) {
            return Err(Error::InvalidParam(format!(
                "{head_count} heads do not divide width {c}"
            )));
        }
        check_rate(dropout_rate)?;
        Ok(Self {
            query_proj,
            key_proj,
            value_proj,
            head_count,
            scale,
            dropout_rate,
        })
    }
}

/// Returns `(output, head-averaged affinity)`. Dropout is not applied here;
/// the model applies it to the block output.
pub fn attention(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    values: &DenseMatrix,
    p: &AttentionParams,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut t = GradTape::new();
    let (q, k, v) = (
        t.constant(queries.clone()),
        t.constant(keys.clone()),
        t.constant(values.clone()),
    );
    let w = AttentionVars {
        query: p.query_proj.push(&mut t),
        key: p.key_proj.push(&mut t),
        value: p.value_proj.push(&mut t),
    };
    let out = multi_head_attention(&mut t, q, k, v, &w, p.head_count, p.scale)?;
    Ok((t.value(out.output).clone(), t.value(out.affinity).clone()))
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

pub fn feed_forward(x: &DenseMatrix, p: &FfnParams) -> Result<DenseMatrix> {
    let mut t = GradTape::new();
    let xv = t.constant(x.clone());
    let vars = FfnVars {
        hidden: Linear {
            w: p.w1.clone(),
            b: p.b1.clone(),
        }
        .push(&mut t),
        out: Linear {
            w: p.w2.clone(),
            b: p.b2.clone(),
        }
        .push(&mut t),
    };
    let out = ffn(&mut t, xv, &vars)?;
    Ok(t.value(out).clone())
}

/// Row-wise layer norm of a matrix with shared parameters.
pub fn layer_norm_matrix(x: &DenseMatrix, p: &LayerNormParams) -> Result<DenseMatrix> {
    kernels::layer_norm_rows(
        x,
        &DenseMatrix::row_vector(&p.gain),
        &DenseMatrix::row_vector(&p.bias),
        p.epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::kernels::softmax_rows;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_linear(rng: &mut ChaCha8Rng, c: usize) -> Linear {
        Linear {
            w: random(rng, c, c),
            b: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    fn identity_linear(c: usize) -> Linear {
        Linear {
            w: DenseMatrix::identity(c),
            b: vec![0.0; c],
        }
    }

    #[test]
    fn single_head_identity_reduces_to_scaled_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 6);
        let p = AttentionParams::new(
            identity_linear(6),
            identity_linear(6),
            identity_linear(6),
            1,
            HeadScale::PerHead,
            0.0,
        )
        .unwrap();
        let (_, aff) = attention(&x, &x, &x, &p).unwrap();
        let expected = softmax_rows(&x.matmul_nt(&x).unwrap().scale(1.0 / 6f64.sqrt())).unwrap();
        assert_eq!(aff, expected);
    }

    #[test]
    fn single_key_broadcasts_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 3, 4);
        let k = random(&mut rng, 1, 4);
        let p = AttentionParams::new(
            random_linear(&mut rng, 4),
            random_linear(&mut rng, 4),
            identity_linear(4),
            2,
            HeadScale::PerHead,
            0.0,
        )
        .unwrap();
        let (out, aff) = attention(&q, &k, &k, &p).unwrap();
        assert!(aff.data().iter().all(|v| *v == 1.0));
        for r in 0..3 {
            assert_eq!(out.row(r), k.row(0));
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let p = AttentionParams::new(
            identity_linear(6),
            identity_linear(6),
            identity_linear(6),
            4,
            HeadScale::PerHead,
            0.0,
        );
        assert!(p.is_err());
    }

    /// Straight-line scalar reimplementation for 2 tokens, c = 2, 2 heads.
    #[test]
    fn attention_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 2, 2);
        let (lq, lk, lv) = (
            random_linear(&mut rng, 2),
            random_linear(&mut rng, 2),
            random_linear(&mut rng, 2),
        );
        let proj = |l: &Linear, r: usize, j: usize| {
            x[(r, 0)] * l.w[(0, j)] + x[(r, 1)] * l.w[(1, j)] + l.b[j]
        };
        // with d = 1 per head, scale = 1/sqrt(1)
        let mut out = [[0.0; 2]; 2];
        let mut aff = [[0.0; 2]; 2];
        for h in 0..2 {
            for i in 0..2 {
                let l0 = proj(&lq, i, h) * proj(&lk, 0, h);
                let l1 = proj(&lq, i, h) * proj(&lk, 1, h);
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
                out[i][h] = a0 * proj(&lv, 0, h) + a1 * proj(&lv, 1, h);
                aff[i][0] += a0 / 2.0;
                aff[i][1] += a1 / 2.0;
            }
        }
        let p = AttentionParams::new(lq, lk, lv, 2, HeadScale::PerHead, 0.0).unwrap();
        let (o, a) = attention(&x, &x, &x, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((o[(i, j)] - out[i][j]).abs() < 1e-12);
                assert!((a[(i, j)] - aff[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_cases() {
        let zero = FfnParams {
            w1: DenseMatrix::zeros(3, 5),
            b1: vec![0.0; 5],
            w2: DenseMatrix::zeros(5, 3),
            b2: vec![0.0; 3],
        };
        let x = DenseMatrix::from_fn(2, 3, |r, c| (r + c) as f64 - 1.0);
        assert_eq!(feed_forward(&x, &zero).unwrap(), DenseMatrix::zeros(2, 3));

        let id = FfnParams {
            w1: DenseMatrix::identity(3),
            b1: vec![0.0; 3],
            w2: DenseMatrix::identity(3),
            b2: vec![0.0; 3],
        };
        let pos = x.map(|v| v.abs() + 0.5);
        assert_eq!(feed_forward(&pos, &id).unwrap(), pos);
    }

    #[test]
    fn ffn_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 4);
        let p = FfnParams {
            w1: random(&mut rng, 4, 6),
            b1: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w2: random(&mut rng, 6, 4),
            b2: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let out = feed_forward(&x, &p).unwrap();
        for i in 0..3 {
            let mut hidden = [0.0; 6];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut s = p.b1[j];
                for k in 0..4 {
                    s += x[(i, k)] * p.w1[(k, j)];
                }
                *hv = if s > 0.0 { s } else { 0.0 };
            }
            for j in 0..4 {
                let mut s = p.b2[j];
                for (k, hv) in hidden.iter().enumerate() {
                    s += hv * p.w2[(k, j)];
                }
                assert!((out[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_permutation_permutes_affinity_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random(&mut rng, 3, 4);
        let k = random(&mut rng, 5, 4);
        let p = AttentionParams::new(
            random_linear(&mut rng, 4),
            random_linear(&mut rng, 4),
            random_linear(&mut rng, 4),
            2,
            HeadScale::PerHead,
            0.0,
        )
        .unwrap();
        let perm = [3, 0, 4, 1, 2];
        let (o1, a1) = attention(&q, &k, &k, &p).unwrap();
        let kp = k.select_rows(&perm);
        let (o2, a2) = attention(&q, &kp, &kp, &p).unwrap();
        for r in 0..3 {
            for (j, &src) in perm.iter().enumerate() {
                assert!((a2[(r, j)] - a1[(r, src)]).abs() < 1e-12);
            }
        }
        assert!(o1.max_abs_diff(&o2) < 1e-12);
    }

    #[test]
    fn eval_ctx_dropout_is_identity() {
        let mut t = GradTape::new();
        let x = t.constant(DenseMatrix::filled(2, 2, 3.0));
        let mut ctx = ForwardCtx::eval();
        assert_eq!(ctx.dropout(&mut t, x, 0.5).unwrap(), x);
    }
}
