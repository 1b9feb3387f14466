//! Metric fusion, nearest-neighbor classification and the training losses.
//!
//! Every loss has a tape form (used for training) and a plain form that
//! builds a throwaway tape, so both share one implementation.

use crate::data::SampleId;
use crate::error::{Error, Result};
use crate::metric::{MetricKind, MetricMatrix};
use crate::numeric::tape::first_argmax;
use crate::numeric::{DenseMatrix, GradTape, GroupReduce, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub lambda: f64,
    /// Min-max rescale each local-metric row into `[0, 1]` before fusing.
    pub global_normalize: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParam(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// How a class score is formed from its K support columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KShotAgg {
    Max,
    Mean,
}

impl From<KShotAgg> for GroupReduce {
    fn from(a: KShotAgg) -> Self {
        match a {
            KShotAgg::Max => GroupReduce::Max,
            KShotAgg::Mean => GroupReduce::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveMode {
    /// One log-ratio over every query-support pair of the episode.
    Global,
    /// One log-ratio per query row, averaged.
    PerQuery,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub ce_temperature: f64,
    pub contrastive: ContrastiveMode,
    pub kshot: KShotAgg,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParam(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.ce_temperature > 0.0 && self.ce_temperature.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "temperature {} must be positive",
                self.ce_temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub scores: Vec<f64>,
    pub support: SampleId,
}

/// Support column indices of each class, in class order.
pub fn class_groups(support_labels: &[usize], ways: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); ways];
    for (col, &label) in support_labels.iter().enumerate() {
        groups
            .get_mut(label)
            .ok_or_else(|| Error::InvalidParam(format!("support label {label} >= {ways} ways")))?
            .push(col);
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(Error::InvalidParam(format!("class {empty} has no support")));
    }
    Ok(groups)
}

fn pair_mask(support_labels: &[usize], query_labels: &[usize]) -> Vec<bool> {
    query_labels
        .iter()
        .flat_map(|q| support_labels.iter().map(move |s| s == q))
        .collect()
}

pub fn fuse_vars(t: &mut GradTape, global: Var, local: Var, cfg: &FusionConfig) -> Result<Var> {
    cfg.validate()?;
    let local = if cfg.global_normalize {
        t.row_min_max(local)?
    } else {
        local
    };
    let g = t.scale(global, cfg.lambda)?;
    let l = t.scale(local, 1.0 - cfg.lambda)?;
    t.add(g, l)
}

/// `λ·m_g + (1 − λ)·m_l`, elementwise.
pub fn fuse_metric(
    m_g: &MetricMatrix,
    m_l: &MetricMatrix,
    cfg: &FusionConfig,
) -> Result<MetricMatrix> {
    if m_g.values.shape() != m_l.values.shape() || !m_g.aligned_with(m_l) {
        return Err(Error::shape(
            "fuse_metric",
            format!(
                "{:?} vs {:?} or misaligned ids",
                m_g.values.shape(),
                m_l.values.shape()
            ),
        ));
    }
    let mut t = GradTape::new();
    let g = t.constant(m_g.values.clone());
    let l = t.constant(m_l.values.clone());
    let out = fuse_vars(&mut t, g, l, cfg)?;
    MetricMatrix::new(
        t.value(out).clone(),
        m_g.row_ids.clone(),
        m_g.col_ids.clone(),
        MetricKind::Fused,
    )
}

/// Per-class scores (K-shot aggregation), predicted class with ties to the
/// lowest index, and the single most similar support.
pub fn classify(
    m: &MetricMatrix,
    support_labels: &[usize],
    ways: usize,
    agg: KShotAgg,
) -> Result<Vec<Prediction>> {
    if support_labels.len() != m.n_support() {
        return Err(Error::shape(
            "classify",
            format!(
                "{} labels for {} supports",
                support_labels.len(),
                m.n_support()
            ),
        ));
    }
    let groups = class_groups(support_labels, ways)?;
    Ok((0..m.n_query())
        .map(|r| {
            let row = m.values.row(r);
            let scores: Vec<f64> = groups
                .iter()
                .map(|g| {
                    let vals = g.iter().map(|&c| row[c]);
                    match agg {
                        KShotAgg::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                        KShotAgg::Mean => vals.sum::<f64>() / g.len() as f64,
                    }
                })
                .collect();
            Prediction {
                class: first_argmax(scores.iter().copied()),
                support: m.col_ids[first_argmax(row.iter().copied())],
                scores,
            }
        })
        .collect())
}

/// `LSE(all) − LSE(pos)`, globally or per query row (then averaged).
pub fn contrastive_var(
    t: &mut GradTape,
    m_g: Var,
    support_labels: &[usize],
    query_labels: &[usize],
    mode: ContrastiveMode,
) -> Result<Var> {
    let (rows, cols) = t.value(m_g).shape();
    if (rows, cols) != (query_labels.len(), support_labels.len()) {
        return Err(Error::shape(
            "contrastive_loss",
            "label counts do not match the metric",
        ));
    }
    let mask = pair_mask(support_labels, query_labels);
    let has_pos = match mode {
        ContrastiveMode::Global => mask.iter().any(|&b| b),
        ContrastiveMode::PerQuery => mask.chunks(cols).all(|row| row.iter().any(|&b| b)),
    };
    if !has_pos {
        return Err(Error::NoPositivePairs);
    }
    let per_row = mode == ContrastiveMode::PerQuery;
    let all = t.masked_log_sum_exp(m_g, vec![true; rows * cols], per_row)?;
    let pos = t.masked_log_sum_exp(m_g, mask, per_row)?;
    let diff = t.sub(all, pos)?;
    if per_row {
        let s = t.sum_all(diff)?;
        t.scale(s, 1.0 / rows as f64)
    } else {
        Ok(diff)
    }
}

pub fn contrastive_loss(
    m_g: &MetricMatrix,
    support_labels: &[usize],
    query_labels: &[usize],
    mode: ContrastiveMode,
) -> Result<f64> {
    let mut t = GradTape::new();
    let m = t.constant(m_g.values.clone());
    let out = contrastive_var(&mut t, m, support_labels, query_labels, mode)?;
    Ok(t.value(out).item())
}

/// Per-class logits from the fused metric, divided by the temperature.
pub fn class_logits_var(
    t: &mut GradTape,
    m: Var,
    support_labels: &[usize],
    ways: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    let groups = class_groups(support_labels, ways)?;
    let scores = t.group_reduce_cols(m, groups, cfg.kshot.into())?;
    t.scale(scores, 1.0 / cfg.ce_temperature)
}

pub fn cross_entropy_var(
    t: &mut GradTape,
    m: Var,
    support_labels: &[usize],
    query_labels: &[usize],
    ways: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if query_labels.iter().any(|&q| q >= ways) {
        return Err(Error::InvalidParam("query label out of range".into()));
    }
    let logits = class_logits_var(t, m, support_labels, ways, cfg)?;
    t.softmax_cross_entropy(logits, query_labels.to_vec())
}

pub fn cross_entropy_loss(
    m: &MetricMatrix,
    support_labels: &[usize],
    query_labels: &[usize],
    ways: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut t = GradTape::new();
    let v = t.constant(m.values.clone());
    let out = cross_entropy_var(&mut t, v, support_labels, query_labels, ways, cfg)?;
    Ok(t.value(out).item())
}

pub fn total_var(t: &mut GradTape, ce: Var, cl: Var, cfg: &LossConfig) -> Result<Var> {
    let a = t.scale(ce, cfg.alpha)?;
    let b = t.scale(cl, 1.0 - cfg.alpha)?;
    t.add(a, b)
}

pub fn total_loss(l_ce: f64, l_cl: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * l_ce + (1.0 - cfg.alpha) * l_cl
}

pub fn episode_accuracy(preds: &[Prediction], query_labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let correct = preds
        .iter()
        .zip(query_labels)
        .filter(|(p, &l)| p.class == l)
        .count();
    correct as f64 / preds.len() as f64
}

/// Mean and 95% half-width `1.96 · s / √n` with the sample standard deviation.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 episodes, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Convenience: a metric from raw values with synthetic ids.
pub fn metric_from_values(values: DenseMatrix, kind: MetricKind) -> Result<MetricMatrix> {
    let rows = (0..values.rows() as u64).map(SampleId).collect();
    let cols = (0..values.cols() as u64)
        .map(|i| SampleId(1_000_000 + i))
        .collect();
    MetricMatrix::new(values, rows, cols, kind)
}
