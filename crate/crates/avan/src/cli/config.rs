//! Run configuration: one flat `key = value` file covering every
//! hyperparameter, each with a default. Unknown keys are errors so typos
//! fail fast instead of silently running defaults.

use std::path::Path;

use crate::cli::formats::{read_text, KvReader};
use crate::encoders::AutoencoderConfig;
use crate::error::{Error, Result};
use crate::inference::RmapRectify;
use crate::relational::{ModelConfig, TrainConfig};
use crate::synthdata::DatasetConfig;

/// Every tunable of the pipeline. Dataset keys drive `gen`; model and
/// training keys drive `pretrain`/`train`/`sweep-delay`; threshold keys
/// drive `eval` and `infer`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Model architecture.
    pub crop: usize,
    pub code_dim: usize,
    pub widths: [usize; 5],
    pub rel_hidden: [usize; 2],
    // Training.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub margin: f64,
    pub l1: f64,
    pub train_frac: f64,
    pub combined_encodes_original: bool,
    // Temporal alignment.
    pub delay_s: f64,
    // Autoencoder pretraining.
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub ae_l1: f64,
    // Evaluation and inference.
    pub threshold: f64,
    pub z_threshold: f64,
    pub rmap_rectify: RmapRectify,
    // Delay sweep.
    pub sweep_steps: usize,
    pub sweep_delays: Vec<f64>,
    // Master seed (overridable by --seed).
    pub seed: u64,
    // Synthetic dataset generation.
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub objects: usize,
    pub voxels: usize,
    pub networks: usize,
    pub sparsity: f64,
    pub fmri_rate_hz: f64,
    pub noise_sigma: f64,
    pub subjects: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        let a = AutoencoderConfig::default();
        RunConfig {
            crop: m.crop,
            code_dim: m.d,
            widths: m.widths,
            rel_hidden: m.rel_hidden,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            margin: t.margin,
            l1: t.l1_coeff,
            train_frac: t.train_frac,
            combined_encodes_original: t.combined_encodes_original,
            delay_s: d.delay_s,
            ae_epochs: a.epochs,
            ae_lr: a.lr,
            ae_l1: a.l1_coeff,
            threshold: 0.5,
            z_threshold: 3.0,
            rmap_rectify: RmapRectify::Clamp,
            sweep_steps: 3000,
            sweep_delays: vec![0.0, 2.0, 4.0, 6.0],
            seed: 0,
            width: d.width,
            height: d.height,
            fps: d.fps,
            duration_s: d.duration_s,
            objects: d.objects,
            voxels: d.voxels,
            networks: d.networks,
            sparsity: d.sparsity,
            fmri_rate_hz: d.fmri_rate_hz,
            noise_sigma: d.noise_sigma,
            subjects: d.subjects,
        }
    }
}

fn parse_list<T: std::str::FromStr>(path: &Path, key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| {
                Error::format(path, format!("key `{key}`: cannot parse `{tok}`"))
            })
        })
        .collect()
}

fn fixed<const N: usize>(path: &Path, key: &str, items: Vec<usize>) -> Result<[usize; N]> {
    items.try_into().map_err(|v: Vec<usize>| {
        Error::format(path, format!("key `{key}` needs {N} values, got {}", v.len()))
    })
}

impl RunConfig {
    /// Defaults overridden by whatever keys the file sets; unknown keys are
    /// rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut kv = KvReader::new(path, &text)?;
        let mut cfg = RunConfig::default();

        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.parse_opt($key)? {
                    cfg.$field = v;
                }
            };
        }
        take!(crop, "crop");
        take!(code_dim, "code_dim");
        if let Some(raw) = kv.opt("widths").map(str::to_string) {
            cfg.widths = fixed(path, "widths", parse_list(path, "widths", &raw)?)?;
        }
        if let Some(raw) = kv.opt("rel_hidden").map(str::to_string) {
            cfg.rel_hidden = fixed(path, "rel_hidden", parse_list(path, "rel_hidden", &raw)?)?;
        }
        take!(steps, "steps");
        take!(batch, "batch");
        take!(lr, "lr");
        take!(margin, "margin");
        take!(l1, "l1");
        take!(train_frac, "train_frac");
        take!(combined_encodes_original, "combined_encodes_original");
        take!(delay_s, "delay_s");
        take!(ae_epochs, "ae_epochs");
        take!(ae_lr, "ae_lr");
        take!(ae_l1, "ae_l1");
        take!(threshold, "threshold");
        take!(z_threshold, "z_threshold");
        if let Some(raw) = kv.opt("rmap_rectify") {
            cfg.rmap_rectify = match raw {
                "clamp" => RmapRectify::Clamp,
                "minmax" => RmapRectify::MinMax,
                other => {
                    return Err(Error::format(
                        path,
                        format!("key `rmap_rectify` must be clamp or minmax, got `{other}`"),
                    ))
                }
            };
        }
        take!(sweep_steps, "sweep_steps");
        if let Some(raw) = kv.opt("sweep_delays").map(str::to_string) {
            cfg.sweep_delays = parse_list(path, "sweep_delays", &raw)?;
        }
        take!(seed, "seed");
        take!(width, "width");
        take!(height, "height");
        take!(fps, "fps");
        take!(duration_s, "duration_s");
        take!(objects, "objects");
        take!(voxels, "voxels");
        take!(networks, "networks");
        take!(sparsity, "sparsity");
        take!(fmri_rate_hz, "fmri_rate_hz");
        take!(noise_sigma, "noise_sigma");
        take!(subjects, "subjects");
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(Error::usage(format!(
                "crop must be a positive multiple of 32, got {}",
                self.crop
            )));
        }
        if self.sweep_delays.is_empty() {
            return Err(Error::usage("sweep_delays must list at least one delay"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            crop: self.crop,
            d: self.code_dim,
            v: self.voxels,
            widths: self.widths,
            rel_hidden: self.rel_hidden,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            margin: self.margin,
            l1_coeff: self.l1,
            train_frac: self.train_frac,
            combined_encodes_original: self.combined_encodes_original,
            seed,
        }
    }

    pub fn autoencoder_config(&self, seed: u64) -> AutoencoderConfig {
        AutoencoderConfig { epochs: self.ae_epochs, lr: self.ae_lr, l1_coeff: self.ae_l1, seed }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            width: self.width,
            height: self.height,
            fps: self.fps,
            duration_s: self.duration_s,
            objects: self.objects,
            voxels: self.voxels,
            networks: self.networks,
            sparsity: self.sparsity,
            fmri_rate_hz: self.fmri_rate_hz,
            delay_s: self.delay_s,
            noise_sigma: self.noise_sigma,
            subjects: self.subjects,
            ..DatasetConfig::default()
        }
    }
}
