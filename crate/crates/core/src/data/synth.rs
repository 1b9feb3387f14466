//! Synthetic class-cluster data.
//!
//! Each class has a fixed random per-channel center over the first
//! `signal_channels` channels, repeated at every spatial position (other
//! channels have a zero center). A sample is its center plus
//! i.i.d. Gaussian noise, plus an optional nuisance vector over the
//! non-signal channels that is constant across spatial positions. The
//! nuisance is either drawn fresh per sample or taken from a shared bank of
//! `nuisance_styles` vectors, sample `s` of every class using style
//! `s mod nuisance_styles`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

use super::{ClassId, Dataset, DatasetView, LabeledSample, Payload, PayloadKind, SampleId};
use crate::error::{Error, Result};
use crate::features::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of each class-center entry.
    pub cluster_separation: f64,
    /// Standard deviation of the per-entry noise.
    pub noise_scale: f64,
    pub signal_channels: usize,
    /// Standard deviation of the nuisance entries.
    pub nuisance_scale: f64,
    /// Size of the shared nuisance bank; 0 draws a fresh vector per sample.
    pub nuisance_styles: usize,
    pub kind: PayloadKind,
}

impl SynthSpec {
    pub fn features(
        num_classes: usize,
        samples_per_class: usize,
        channels: usize,
        height: usize,
        width: usize,
        cluster_separation: f64,
        noise_scale: f64,
    ) -> Self {
        Self {
            num_classes,
            samples_per_class,
            channels,
            height,
            width,
            cluster_separation,
            noise_scale,
            signal_channels: channels,
            nuisance_scale: 0.0,
            nuisance_styles: 0,
            kind: PayloadKind::Features,
        }
    }
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.cluster_separation < 0.0 || spec.noise_scale <= 0.0 || spec.nuisance_scale < 0.0 {
        return Err(Error::InvalidParam(
            "synthetic data needs separation >= 0, noise > 0, nuisance >= 0".into(),
        ));
    }
    if spec.signal_channels == 0 || spec.signal_channels > spec.channels {
        return Err(Error::InvalidParam(format!(
            "signal channels {} outside 1..={}",
            spec.signal_channels, spec.channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, hw) = (spec.channels, spec.height * spec.width);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let per_channel: Vec<f64> = (0..c)
                .map(|ch| {
                    if ch < spec.signal_channels {
                        spec.cluster_separation * normal(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            (0..c * hw).map(|i| per_channel[i / hw]).collect()
        })
        .collect();

    let draw_nuisance = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..c)
            .map(|ch| {
                if ch >= spec.signal_channels {
                    spec.nuisance_scale * normal(rng)
                } else {
                    0.0
                }
            })
            .collect()
    };
    let styles: Vec<Vec<f64>> = (0..spec.nuisance_styles)
        .map(|_| draw_nuisance(&mut rng))
        .collect();

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (k, center) in centers.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let nuisance = if styles.is_empty() {
                draw_nuisance(&mut rng)
            } else {
                styles[s % styles.len()].clone()
            };
            let values: Vec<f64> = center
                .iter()
                .enumerate()
                .map(|(i, m)| m + nuisance[i / hw] + spec.noise_scale * normal(&mut rng))
                .collect();
            let map = FeatureMap::from_chw(c, spec.height, spec.width, &values)?;
            let payload = match spec.kind {
                PayloadKind::Features => Payload::Features(map),
                PayloadKind::Raster => Payload::Raster(map),
            };
            samples.push(LabeledSample {
                id: SampleId((k * spec.samples_per_class + s) as u64),
                class: ClassId(k as u32),
                payload: Arc::new(payload),
            });
        }
    }
    Dataset::new(samples)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Split-half nearest-centroid accuracy on raw payloads over `trials`
/// random `ways`-class subsets of the view: centroids come from the first
/// half of each class (in dataset order) and the second half is classified.
pub fn nearest_centroid_accuracy(
    view: &DatasetView<'_>,
    ways: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = view.dataset.samples();
    let (mut correct, mut total) = (0usize, 0usize);
    for _ in 0..trials {
        let chosen: Vec<ClassId> = index::sample(&mut rng, view.classes().len(), ways)
            .into_iter()
            .map(|i| view.classes()[i])
            .collect();
        let halves: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = chosen
            .iter()
            .map(|&cl| {
                let idx = view.dataset.class_indices(cl);
                let maps = |part: &[usize]| {
                    part.iter()
                        .map(|&i| samples[i].payload.map().to_chw())
                        .collect()
                };
                let mid = idx.len() / 2;
                (maps(&idx[..mid]), maps(&idx[mid..]))
            })
            .collect();
        let centroids: Vec<Vec<f64>> = halves
            .iter()
            .map(|(fit, _)| {
                let mut s = vec![0.0; fit[0].len()];
                for v in fit {
                    s.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
                s.iter().map(|x| x / fit.len() as f64).collect()
            })
            .collect();
        for (truth, (_, held_out)) in halves.iter().enumerate() {
            for x in held_out {
                let mut best = (usize::MAX, f64::INFINITY);
                for (k, centroid) in centroids.iter().enumerate() {
                    let d = sq_dist(x, centroid);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                correct += usize::from(best.0 == truth);
                total += 1;
            }
        }
    }
    correct as f64 / total.max(1) as f64
}
