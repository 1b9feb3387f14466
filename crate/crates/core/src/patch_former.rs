//! Patch-level branch: spatial tokens of one image refined by a single
//! self-attention block, `P̃ = LN(P + MSA(P))`, shared by support and query.

use rand_chacha::ChaCha8Rng;

use crate::data::SampleId;
use crate::error::Result;
use crate::features::FeatureMap;
use crate::numeric::kernels::DEFAULT_LN_EPS;
use crate::numeric::nn::{AttentionLayer, LayerNormLayer};
use crate::numeric::{DenseMatrix, ForwardCtx, GradTape, HeadScale, ParamStore, Var};

/// `(h·w) × c` patch embeddings of one image in row-major spatial order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    pub tokens: DenseMatrix,
    pub sample_id: SampleId,
}

impl PatchTokens {
    pub fn new(tokens: DenseMatrix, sample_id: SampleId) -> Self {
        Self { tokens, sample_id }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn to_map(&self, height: usize, width: usize) -> Result<FeatureMap> {
        FeatureMap::from_tokens(height, width, self.tokens.clone())
    }
}

pub fn patch_tokenize(f: &FeatureMap, sample_id: SampleId) -> PatchTokens {
    PatchTokens::new(f.tokens().clone(), sample_id)
}

#[derive(Clone, Copy, Debug)]
pub struct PatchFormer {
    pub attention: AttentionLayer,
    pub norm: LayerNormLayer,
    pub dropout: f64,
}

impl PatchFormer {
    pub fn init(
        store: &mut ParamStore,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionLayer::init(
                store,
                "patchformer.attn",
                width,
                heads,
                HeadScale::PerHead,
                rng,
            )?,
            norm: LayerNormLayer::init(store, "patchformer.ln", width, DEFAULT_LN_EPS),
            dropout,
        })
    }

    pub fn forward(
        &self,
        t: &mut GradTape,
        store: &ParamStore,
        patches: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let msa = self
            .attention
            .forward(t, store, patches, patches, patches)?;
        let msa = ctx.dropout(t, msa.output, self.dropout)?;
        let sum = t.add(patches, msa)?;
        self.norm.forward(t, store, sum)
    }
}

/// Eval-mode transform of one image's patches.
pub fn patch_transform(
    p: &PatchTokens,
    store: &ParamStore,
    layer: &PatchFormer,
) -> Result<PatchTokens> {
    let mut t = GradTape::new();
    let x = t.constant(p.tokens.clone());
    let out = layer.forward(&mut t, store, x, &mut ForwardCtx::eval())?;
    Ok(PatchTokens::new(t.value(out).clone(), p.sample_id))
}
