//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys and
//! unparsable values are errors. [`RunConfig::to_text`] echoes every key
//! exactly once in declaration order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{PayloadKind, SynthSpec};
use crate::emd::{LocalMetricConfig, Solver};
use crate::error::{Error, Result};
use crate::objective::{ContrastiveMode, FusionConfig, KShotAgg, LossConfig};
use crate::sample_former::{MetricLayers, SampleFormerConfig};

/// Comma-separated list value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| ()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = ();
            fn from_str(s: &str) -> std::result::Result<Self, ()> {
                match s { $($text => Ok(Self::$variant),)+ _ => Err(()) }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

text_enum!(SolverKind { Exact => "exact", Sinkhorn => "sinkhorn" });
text_enum!(KShotKey { Max => "max", Mean => "mean" });
text_enum!(ContrastiveKey { Global => "global", PerQuery => "per_query" });
text_enum!(MetricLayersKey { Last => "last", Mean => "mean" });
text_enum!(PayloadKey { Features => "features", Raster => "raster" });

macro_rules! run_config {
    ($($key:literal => $field:ident : $ty:ty = $default:expr),+ $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty),+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default),+ }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),+];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let bad = || Error::BadValue { key: key.to_string(), value: value.to_string() };
                match key {
                    $($key => self.$field = value.parse::<$ty>().map_err(|_| bad())?,)+
                    _ => return Err(Error::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.to_string())),+]
            }
        }
    };
}

run_config! {
    "seed" => seed: u64 = 0,
    "data.dir" => data_dir: String = String::new(),
    "out.dir" => out_dir: String = "out".into(),
    "synth.classes" => synth_classes: usize = 100,
    "synth.samples_per_class" => synth_samples_per_class: usize = 30,
    "synth.kind" => synth_kind: PayloadKey = PayloadKey::Features,
    "synth.channels" => synth_channels: usize = 64,
    "synth.height" => synth_height: usize = 5,
    "synth.width" => synth_width: usize = 5,
    "synth.separation" => synth_separation: f64 = 3.0,
    "synth.noise" => synth_noise: f64 = 1.0,
    "synth.signal_channels" => synth_signal_channels: usize = 64,
    "synth.nuisance" => synth_nuisance: f64 = 0.0,
    "synth.nuisance_styles" => synth_nuisance_styles: usize = 0,
    "split.ratios" => split_ratios: List<u32> = List(vec![64, 16, 20]),
    "episode.ways" => ways: usize = 5,
    "episode.shots" => shots: usize = 1,
    "episode.queries" => queries: usize = 15,
    "backbone.enabled" => backbone_enabled: bool = true,
    "backbone.widths" => backbone_widths: List<usize> = List(vec![16, 32, 48, 64]),
    "cife.enabled" => cife_enabled: bool = true,
    "cife.channels" => cife_channels: usize = 64,
    "cife.heads" => cife_heads: usize = 8,
    "cife.dropout" => cife_dropout: f64 = 0.5,
    "sampleformer.layers" => sf_layers: usize = 3,
    "sampleformer.heads" => sf_heads: usize = 8,
    "sampleformer.cross_scale" => sf_cross_scale: bool = false,
    "sampleformer.dropout" => sf_dropout: f64 = 0.5,
    "sampleformer.decoder_dropout" => sf_decoder_dropout: f64 = 0.5,
    "sampleformer.metric_layers" => sf_metric_layers: MetricLayersKey = MetricLayersKey::Last,
    "patchformer.enabled" => pf_enabled: bool = true,
    "patchformer.heads" => pf_heads: usize = 8,
    "patchformer.dropout" => pf_dropout: f64 = 0.1,
    "emd.solver" => emd_solver: SolverKind = SolverKind::Exact,
    "emd.sinkhorn_eps" => emd_sinkhorn_eps: f64 = 0.05,
    "emd.sinkhorn_iters" => emd_sinkhorn_iters: usize = 1000,
    "fusion.lambda" => lambda: f64 = 0.1,
    "fusion.global_normalize" => global_normalize: bool = false,
    "loss.alpha" => alpha: f64 = 0.7,
    "loss.ce_temperature" => ce_temperature: f64 = 1.0,
    "loss.contrastive" => contrastive: ContrastiveKey = ContrastiveKey::Global,
    "classify.kshot_agg" => kshot_agg: KShotKey = KShotKey::Max,
    "train.lr" => lr: f64 = 5e-4,
    "train.lr_decay_steps" => lr_decay_steps: usize = 10,
    "train.lr_decay_coeff" => lr_decay_coeff: f64 = 0.9,
    "train.momentum" => momentum: f64 = 0.0,
    "train.epochs" => epochs: usize = 100,
    "train.episodes_per_epoch" => episodes_per_epoch: usize = 50,
    "eval.val_episodes" => val_episodes: usize = 1000,
    "eval.test_episodes" => test_episodes: usize = 5000,
    "gradcheck.step" => gradcheck_step: f64 = 1e-5,
    "gradcheck.tolerance" => gradcheck_tolerance: f64 = 1e-4,
    "report.bins" => report_bins: usize = 10,
    "sweep.lambdas" => sweep_lambdas: List<f64> = List(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
    "sweep.layers" => sweep_layers: List<usize> = List(vec![1, 2, 3, 4]),
    "sweep.epochs" => sweep_epochs: usize = 2,
    "sweep.eval_episodes" => sweep_eval_episodes: usize = 50,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::BadValue {
                key: line.to_string(),
                value: String::new(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: String| Error::BadValue {
            key: key.to_string(),
            value,
        };
        if self.split_ratios.0.len() != 3 {
            return Err(bad("split.ratios", self.split_ratios.to_string()));
        }
        if self.backbone_widths.0.len() != 4 {
            return Err(bad("backbone.widths", self.backbone_widths.to_string()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(bad("train.lr", self.lr.to_string()));
        }
        if !(self.lr_decay_coeff > 0.0 && self.lr_decay_coeff <= 1.0) {
            return Err(bad("train.lr_decay_coeff", self.lr_decay_coeff.to_string()));
        }
        if self.lr_decay_steps == 0 {
            return Err(bad("train.lr_decay_steps", "0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("train.momentum", self.momentum.to_string()));
        }
        for (key, rate) in [
            ("cife.dropout", self.cife_dropout),
            ("sampleformer.dropout", self.sf_dropout),
            ("sampleformer.decoder_dropout", self.sf_decoder_dropout),
            ("patchformer.dropout", self.pf_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(bad(key, rate.to_string()));
            }
        }
        self.fusion()
            .validate()
            .map_err(|_| bad("fusion.lambda", self.lambda.to_string()))?;
        self.loss().validate().map_err(|_| {
            bad(
                "loss.alpha / loss.ce_temperature",
                format!("{} / {}", self.alpha, self.ce_temperature),
            )
        })?;
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            lambda: self.lambda,
            global_normalize: self.global_normalize,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            ce_temperature: self.ce_temperature,
            contrastive: match self.contrastive {
                ContrastiveKey::Global => ContrastiveMode::Global,
                ContrastiveKey::PerQuery => ContrastiveMode::PerQuery,
            },
            kshot: self.kshot(),
        }
    }

    pub fn kshot(&self) -> KShotAgg {
        match self.kshot_agg {
            KShotKey::Max => KShotAgg::Max,
            KShotKey::Mean => KShotAgg::Mean,
        }
    }

    pub fn local_metric(&self) -> LocalMetricConfig {
        LocalMetricConfig {
            solver: match self.emd_solver {
                SolverKind::Exact => Solver::Exact,
                SolverKind::Sinkhorn => Solver::Sinkhorn {
                    eps: self.emd_sinkhorn_eps,
                    max_iters: self.emd_sinkhorn_iters,
                },
            },
        }
    }

    pub fn sample_former(&self) -> SampleFormerConfig {
        SampleFormerConfig {
            layers: self.sf_layers,
            heads: self.sf_heads,
            cross_scale: self.sf_cross_scale,
            encoder_dropout: self.sf_dropout,
            decoder_dropout: self.sf_decoder_dropout,
            metric_layers: match self.sf_metric_layers {
                MetricLayersKey::Last => MetricLayers::Last,
                MetricLayersKey::Mean => MetricLayers::Mean,
            },
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_classes: self.synth_classes,
            samples_per_class: self.synth_samples_per_class,
            channels: self.synth_channels,
            height: self.synth_height,
            width: self.synth_width,
            cluster_separation: self.synth_separation,
            noise_scale: self.synth_noise,
            signal_channels: self.synth_signal_channels,
            nuisance_scale: self.synth_nuisance,
            nuisance_styles: self.synth_nuisance_styles,
            kind: self.synth_payload_kind(),
        }
    }

    pub fn synth_payload_kind(&self) -> PayloadKind {
        match self.synth_kind {
            PayloadKey::Features => PayloadKind::Features,
            PayloadKey::Raster => PayloadKind::Raster,
        }
    }
}
