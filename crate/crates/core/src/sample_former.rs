//! Sample-level transformer. Support tokens pass through an encoder stack,
//! query tokens through a decoder stack of self-attention followed by
//! cross-attention onto the encoded supports. The cross-attention affinity
//! is the global metric.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::data::SampleId;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::metric::{MetricKind, MetricMatrix};
use crate::numeric::kernels::DEFAULT_LN_EPS;
use crate::numeric::nn::{AttentionLayer, FfnLayer, LayerNormLayer};
use crate::numeric::{DenseMatrix, ForwardCtx, GradTape, HeadScale, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Support,
    Query,
}

/// One token per image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: DenseMatrix,
    pub origin: Origin,
    pub ids: Vec<SampleId>,
}

impl TokenSequence {
    pub fn new(tokens: DenseMatrix, origin: Origin, ids: Vec<SampleId>) -> Result<Self> {
        if tokens.rows() == 0 || tokens.rows() != ids.len() {
            return Err(Error::shape(
                "TokenSequence::new",
                format!("{} tokens with {} ids", tokens.rows(), ids.len()),
            ));
        }
        if let Some(row) = tokens.first_non_finite_row() {
            return Err(Error::NonFinite {
                op: "TokenSequence::new",
                row,
            });
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::InvalidParam(
                "duplicate ids in token sequence".into(),
            ));
        }
        Ok(Self {
            tokens,
            origin,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    fn expect(&self, origin: Origin) -> Result<()> {
        if self.origin != origin {
            return Err(Error::InvalidParam(format!(
                "expected {origin:?} tokens, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }
}

/// Global average pooling over the spatial positions.
pub fn image_tokenize(f: &FeatureMap) -> Vec<f64> {
    let t = f.tokens();
    let n = t.rows() as f64;
    (0..t.cols())
        .map(|k| (0..t.rows()).map(|p| t[(p, k)]).sum::<f64>() / n)
        .collect()
}

pub fn tokenize_set(
    features: &[FeatureMap],
    ids: Vec<SampleId>,
    origin: Origin,
) -> Result<TokenSequence> {
    let rows: Vec<Vec<f64>> = features.iter().map(image_tokenize).collect();
    let tokens = if rows.is_empty() {
        DenseMatrix::zeros(0, 0)
    } else {
        DenseMatrix::from_rows(&rows)?
    };
    TokenSequence::new(tokens, origin, ids)
}

/// Which decoder layers contribute to the global metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricLayers {
    Last,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleFormerConfig {
    pub layers: usize,
    pub heads: usize,
    /// Scale the cross-attention logits like the self-attention ones.
    pub cross_scale: bool,
    pub encoder_dropout: f64,
    pub decoder_dropout: f64,
    pub metric_layers: MetricLayers,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attention: AttentionLayer,
    pub norm1: LayerNormLayer,
    pub ffn: FfnLayer,
    pub norm2: LayerNormLayer,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attention: AttentionLayer,
    pub norm1: LayerNormLayer,
    pub cross_attention: AttentionLayer,
    pub norm2: LayerNormLayer,
}

#[derive(Clone, Debug)]
pub struct SampleFormer {
    pub config: SampleFormerConfig,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleFormerVars {
    pub support: Var,
    pub query: Var,
    pub global_metric: Var,
}

impl SampleFormer {
    pub fn init(
        store: &mut ParamStore,
        width: usize,
        config: SampleFormerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::InvalidParam(
                "sampleFormer needs at least one layer".into(),
            ));
        }
        let cross = if config.cross_scale {
            HeadScale::PerHead
        } else {
            HeadScale::None
        };
        let mut encoder = Vec::new();
        for l in 0..config.layers {
            let p = format!("sampleformer.enc{l}");
            encoder.push(EncoderLayer {
                attention: AttentionLayer::init(
                    store,
                    &format!("{p}.attn"),
                    width,
                    config.heads,
                    HeadScale::PerHead,
                    rng,
                )?,
                norm1: LayerNormLayer::init(store, &format!("{p}.ln1"), width, DEFAULT_LN_EPS),
                ffn: FfnLayer::init(store, &format!("{p}.ffn"), width, 2 * width, rng),
                norm2: LayerNormLayer::init(store, &format!("{p}.ln2"), width, DEFAULT_LN_EPS),
            });
        }
        let mut decoder = Vec::new();
        for l in 0..config.layers {
            let p = format!("sampleformer.dec{l}");
            decoder.push(DecoderLayer {
                self_attention: AttentionLayer::init(
                    store,
                    &format!("{p}.self"),
                    width,
                    config.heads,
                    HeadScale::PerHead,
                    rng,
                )?,
                norm1: LayerNormLayer::init(store, &format!("{p}.ln1"), width, DEFAULT_LN_EPS),
                cross_attention: AttentionLayer::init(
                    store,
                    &format!("{p}.cross"),
                    width,
                    config.heads,
                    cross,
                    rng,
                )?,
                norm2: LayerNormLayer::init(store, &format!("{p}.ln2"), width, DEFAULT_LN_EPS),
            });
        }
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// `Ĥ = LN(H + MHA(H))`, then `H̃ = LN(Ĥ + FFN(Ĥ))`.
    pub fn encode_layer(
        &self,
        layer: usize,
        t: &mut GradTape,
        store: &ParamStore,
        h: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let l = &self.encoder[layer];
        let rate = self.config.encoder_dropout;
        let msg = l.attention.forward(t, store, h, h, h)?;
        let msg = ctx.dropout(t, msg.output, rate)?;
        let sum = t.add(h, msg)?;
        let h_hat = l.norm1.forward(t, store, sum)?;
        let f = l.ffn.forward(t, store, h_hat)?;
        let f = ctx.dropout(t, f, rate)?;
        let sum = t.add(h_hat, f)?;
        l.norm2.forward(t, store, sum)
    }

    /// `Ĥq = LN(Hq + MHA(Hq))`.
    pub fn decode_self(
        &self,
        layer: usize,
        t: &mut GradTape,
        store: &ParamStore,
        hq: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let l = &self.decoder[layer];
        let msg = l.self_attention.forward(t, store, hq, hq, hq)?;
        let msg = ctx.dropout(t, msg.output, self.config.decoder_dropout)?;
        let sum = t.add(hq, msg)?;
        l.norm1.forward(t, store, sum)
    }

    /// `H̃q = Ĥq + LN(A·Vs)` with `A = softmax(Qq Ksᵀ)`. Returns `(H̃q, A)`.
    pub fn cross_attend(
        &self,
        layer: usize,
        t: &mut GradTape,
        store: &ParamStore,
        hq_hat: Var,
        hs: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let l = &self.decoder[layer];
        let att = l.cross_attention.forward(t, store, hq_hat, hs, hs)?;
        let msg = ctx.dropout(t, att.output, self.config.decoder_dropout)?;
        let normed = l.norm2.forward(t, store, msg)?;
        Ok((t.add(hq_hat, normed)?, att.affinity))
    }

    pub fn forward(
        &self,
        t: &mut GradTape,
        store: &ParamStore,
        support: Var,
        query: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<SampleFormerVars> {
        if t.value(support).rows() == 0 || t.value(query).rows() == 0 {
            return Err(Error::InvalidParam("empty support or query set".into()));
        }
        let mut hs = support;
        for l in 0..self.encoder.len() {
            hs = self.encode_layer(l, t, store, hs, ctx)?;
        }
        let mut hq = query;
        let mut affinities = Vec::new();
        for l in 0..self.decoder.len() {
            let hq_hat = self.decode_self(l, t, store, hq, ctx)?;
            let (next, aff) = self.cross_attend(l, t, store, hq_hat, hs, ctx)?;
            hq = next;
            affinities.push(aff);
        }
        let global_metric = match self.config.metric_layers {
            MetricLayers::Last => *affinities.last().expect("at least one layer"),
            MetricLayers::Mean => t.mean_of(affinities)?,
        };
        Ok(SampleFormerVars {
            support: hs,
            query: hq,
            global_metric,
        })
    }
}

// Eval-mode wrappers over concrete token sequences.

pub fn encode_support(
    h_s: &TokenSequence,
    store: &ParamStore,
    sf: &SampleFormer,
    layer: usize,
) -> Result<TokenSequence> {
    h_s.expect(Origin::Support)?;
    let mut t = GradTape::new();
    let x = t.constant(h_s.tokens.clone());
    let out = sf.encode_layer(layer, &mut t, store, x, &mut ForwardCtx::eval())?;
    TokenSequence::new(t.value(out).clone(), Origin::Support, h_s.ids.clone())
}

pub fn decode_query_self(
    h_q: &TokenSequence,
    store: &ParamStore,
    sf: &SampleFormer,
    layer: usize,
) -> Result<TokenSequence> {
    h_q.expect(Origin::Query)?;
    let mut t = GradTape::new();
    let x = t.constant(h_q.tokens.clone());
    let out = sf.decode_self(layer, &mut t, store, x, &mut ForwardCtx::eval())?;
    TokenSequence::new(t.value(out).clone(), Origin::Query, h_q.ids.clone())
}

pub fn cross_attend(
    h_q_hat: &TokenSequence,
    h_s_tilde: &TokenSequence,
    store: &ParamStore,
    sf: &SampleFormer,
    layer: usize,
) -> Result<(TokenSequence, MetricMatrix)> {
    h_q_hat.expect(Origin::Query)?;
    h_s_tilde.expect(Origin::Support)?;
    let mut t = GradTape::new();
    let q = t.constant(h_q_hat.tokens.clone());
    let s = t.constant(h_s_tilde.tokens.clone());
    let (out, aff) = sf.cross_attend(layer, &mut t, store, q, s, &mut ForwardCtx::eval())?;
    Ok((
        TokenSequence::new(t.value(out).clone(), Origin::Query, h_q_hat.ids.clone())?,
        MetricMatrix::new(
            t.value(aff).clone(),
            h_q_hat.ids.clone(),
            h_s_tilde.ids.clone(),
            MetricKind::Global,
        )?,
    ))
}

/// Tokenizes both sets and runs the full stack. Returns `(H̃s, H̃q, m_g)`.
pub fn sample_former_forward(
    support: &TokenSequence,
    query: &TokenSequence,
    store: &ParamStore,
    sf: &SampleFormer,
) -> Result<(TokenSequence, TokenSequence, MetricMatrix)> {
    support.expect(Origin::Support)?;
    query.expect(Origin::Query)?;
    let mut t = GradTape::new();
    let s = t.constant(support.tokens.clone());
    let q = t.constant(query.tokens.clone());
    let out = sf.forward(&mut t, store, s, q, &mut ForwardCtx::eval())?;
    Ok((
        TokenSequence::new(
            t.value(out.support).clone(),
            Origin::Support,
            support.ids.clone(),
        )?,
        TokenSequence::new(t.value(out.query).clone(), Origin::Query, query.ids.clone())?,
        MetricMatrix::new(
            t.value(out.global_metric).clone(),
            query.ids.clone(),
            support.ids.clone(),
            MetricKind::Global,
        )?,
    ))
}
