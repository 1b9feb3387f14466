//! Positive/negative similarity distribution report and the λ × N
//! sensitivity sweep.

use crate::config::RunConfig;
use crate::data::{sample_episode, Dataset, DatasetView, EpisodeSpec, MetaSplit};
use crate::error::{Error, Result};
use crate::metric::MetricMatrix;
use crate::model::Model;
use crate::numeric::{Mode, ParamStore};
use crate::par::Execution;
use crate::seed::derive_seed;
use crate::trainer::{evaluate, init_model, train, TrainConfig};

/// Per query: the mean fused similarity to same-class supports and the mean
/// over all other supports.
pub fn query_pair_similarities(
    fused: &MetricMatrix,
    support_labels: &[usize],
    query_labels: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::with_capacity(query_labels.len());
    let mut neg = Vec::with_capacity(query_labels.len());
    for (j, &label) in query_labels.iter().enumerate() {
        let (mut ps, mut pn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for (i, &s) in support_labels.iter().enumerate() {
            let v = fused.values[(j, i)];
            if s == label {
                ps += v;
                pn += 1;
            } else {
                ns += v;
                nn += 1;
            }
        }
        if pn > 0 && nn > 0 {
            pos.push(ps / pn as f64);
            neg.push(ns / nn as f64);
        }
    }
    (pos, neg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Min-max normalized over the union of both lists.
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
    pub bins: usize,
    pub pos_hist: Vec<usize>,
    pub neg_hist: Vec<usize>,
    pub mean_pos: f64,
    pub mean_neg: f64,
}

fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

impl MetricReport {
    pub fn from_raw(pos: Vec<f64>, neg: Vec<f64>, bins: usize) -> Result<Self> {
        if bins == 0 || pos.is_empty() || neg.is_empty() {
            return Err(Error::InvalidParam(
                "report needs bins > 0 and at least one pair".into(),
            ));
        }
        let lo = pos
            .iter()
            .chain(&neg)
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = pos
            .iter()
            .chain(&neg)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let norm = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .map(|x| if span > 0.0 { (x - lo) / span } else { 0.5 })
                .collect()
        };
        let (positives, negatives) = (norm(pos), norm(neg));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            pos_hist: histogram(&positives, bins),
            neg_hist: histogram(&negatives, bins),
            mean_pos: mean(&positives),
            mean_neg: mean(&negatives),
            positives,
            negatives,
            bins,
        })
    }

    /// `bin_low,bin_high,positive,negative` rows, then the two means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,positive,negative\n");
        let w = 1.0 / self.bins as f64;
        for b in 0..self.bins {
            out.push_str(&format!(
                "{:.4},{:.4},{},{}\n",
                b as f64 * w,
                (b + 1) as f64 * w,
                self.pos_hist[b],
                self.neg_hist[b]
            ));
        }
        out.push_str(&format!(
            "mean_positive,{}\nmean_negative,{}\n",
            self.mean_pos, self.mean_neg
        ));
        out
    }
}

/// Fused similarities over `n_episodes` evaluation episodes drawn from `view`.
#[allow(clippy::too_many_arguments)]
pub fn metric_report(
    model: &Model,
    store: &ParamStore,
    view: &DatasetView<'_>,
    spec: EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    bins: usize,
    exec: Execution,
) -> Result<MetricReport> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for k in 0..n_episodes as u64 {
        let ep = sample_episode(view, spec, derive_seed(seed, "report-episode", k))?;
        let out = model.run_episode(store, &ep, Mode::Eval, exec)?;
        let (p, n) = query_pair_similarities(&out.fused, &ep.support_labels(), &ep.query_labels());
        pos.extend(p);
        neg.extend(n);
    }
    MetricReport::from_raw(pos, neg, bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub layers: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Trains and evaluates one model per (λ, N) pair with the sweep's short
/// schedule. Rows come out λ-major.
pub fn run_sweep(
    cfg: &RunConfig,
    data: &Dataset,
    split: &MetaSplit,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let train_view = data.view(&split.train)?;
    let test_view = data.view(&split.test)?;
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep_lambdas.0 {
        for &layers in &cfg.sweep_layers.0 {
            let run = RunConfig {
                lambda,
                sf_layers: layers,
                epochs: cfg.sweep_epochs,
                ..cfg.clone()
            };
            run.validate()?;
            let (model, mut store) = init_model(&run, data)?;
            let tc = TrainConfig::from_run(&run)?;
            train(
                &model,
                &mut store,
                &train_view,
                &tc,
                exec,
                &mut std::io::sink(),
            )?;
            let eval = evaluate(
                &model,
                &store,
                &test_view,
                tc.episode,
                cfg.sweep_eval_episodes,
                derive_seed(cfg.seed, "sweep-eval", 0),
                exec,
            )?;
            rows.push(SweepRow {
                lambda,
                layers,
                accuracy: eval.mean,
                ci95: eval.ci95,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,layers,accuracy,ci95\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.lambda, r.layers, r.accuracy, r.ci95
        ));
    }
    out
}
