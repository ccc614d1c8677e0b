//! Training configuration, presets and the `key = value` file format.
//!
//! The network predicts the middle frame of every window of `frames`
//! frames: zero-based index `frames / 2` (rounded down). Data generation,
//! supervision and evaluation all use that index.

use std::path::PathBuf;

use crate::body::BodyConfig;
use crate::error::{Error, Result};
use crate::feature_stream::Readout;
use crate::kv::{parse_value, Record};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::nn::{Activation, AdaLnConfig, NormPlacement};
use crate::synth::SynthConfig;

/// Learning-rate curve over the planned steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate down to zero.
    Cosine,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?} (expected constant or cosine)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    /// Rate for step `step` of `total`.
    pub fn rate(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let progress = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected toy or paper)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub stage: u8,
    pub frames: usize,
    pub body: BodyConfig,
    pub pose_dim: usize,
    pub pose_layers: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub norm_placement: NormPlacement,
    pub adaln_depth: usize,
    pub adaln_residual_gain: bool,
    pub readout: Readout,
    pub residual_rank: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Optimizer steps; when zero, `epochs` passes over the data are run.
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global gradient-norm limit, zero disables clipping.
    pub grad_clip: f64,
    pub fps: f64,
    /// Replace every image feature by zeros.
    pub zero_features: bool,
    /// Frames per generated clip.
    pub clip_frames: usize,
    pub noise_std: f64,
    pub log_every: usize,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => TrainConfig {
                preset,
                stage: 1,
                frames: 8,
                body: BodyConfig::TOY,
                pose_dim: 64,
                pose_layers: 2,
                decoder_dim: 32,
                decoder_layers: 2,
                heads: 4,
                feature_dim: 64,
                mlp_ratio: 4,
                activation: Activation::Gelu,
                norm_placement: NormPlacement::Pre,
                adaln_depth: 1,
                adaln_residual_gain: true,
                readout: Readout::MidFrame,
                residual_rank: 8,
                batch_size: 4,
                learning_rate: 1e-3,
                schedule: Schedule::Cosine,
                steps: 3000,
                epochs: 0,
                seed: 0,
                weights: LossWeights {
                    edge: 2.0,
                    surface_mean: true,
                    ..LossWeights::default()
                },
                grad_clip: 1.0,
                fps: 1.0,
                zero_features: false,
                clip_frames: 12,
                noise_std: 2.0,
                log_every: 100,
                dataset: PathBuf::from("data"),
                checkpoint: PathBuf::from("checkpoint.bin"),
            },
            Preset::Paper => TrainConfig {
                preset,
                stage: 1,
                frames: 16,
                body: BodyConfig::FULL,
                pose_dim: 256,
                pose_layers: 3,
                decoder_dim: 64,
                decoder_layers: 3,
                heads: 8,
                feature_dim: 2048,
                mlp_ratio: 4,
                activation: Activation::Gelu,
                norm_placement: NormPlacement::Pre,
                adaln_depth: 1,
                adaln_residual_gain: true,
                readout: Readout::MidFrame,
                residual_rank: 8,
                batch_size: 64,
                learning_rate: 5e-5,
                schedule: Schedule::Constant,
                steps: 0,
                epochs: 30,
                seed: 0,
                weights: LossWeights::default(),
                grad_clip: 1.0,
                fps: 1.0,
                zero_features: false,
                clip_frames: 20,
                noise_std: 2.0,
                log_every: 100,
                dataset: PathBuf::from("data"),
                checkpoint: PathBuf::from("checkpoint.bin"),
            },
        }
    }

    /// Batch size and epochs of the end-to-end stage in the paper preset.
    pub fn for_stage(mut self, stage: u8) -> Self {
        self.stage = stage;
        if self.preset == Preset::Paper && stage == 2 {
            self.batch_size = 32;
            self.epochs = 20;
        }
        self
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            body: self.body,
            pose_dim: self.pose_dim,
            pose_layers: self.pose_layers,
            decoder_dim: self.decoder_dim,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            feature_dim: self.feature_dim,
            mlp_ratio: self.mlp_ratio,
            activation: self.activation,
            norm_placement: self.norm_placement,
            adaln: AdaLnConfig {
                depth: self.adaln_depth,
                residual_gain: self.adaln_residual_gain,
                activation: self.activation,
            },
            readout: self.readout,
            residual_rank: self.residual_rank,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            body: self.body,
            frames: self.clip_frames,
            feature_dim: self.feature_dim,
            noise_std: self.noise_std,
            ..SynthConfig::toy(self.clip_frames, self.feature_dim)
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const W: &str = "config";
        let v = value.trim();
        match key.trim() {
            "preset" => {
                let p = Preset::parse(v)?;
                let keep = (self.dataset.clone(), self.checkpoint.clone());
                *self = TrainConfig::preset(p).for_stage(self.stage);
                (self.dataset, self.checkpoint) = keep;
            }
            "stage" => {
                let s: u8 = parse_value(key, v, W)?;
                if s != 1 && s != 2 {
                    return Err(Error::Config(format!("stage must be 1 or 2, got {s}")));
                }
                self.stage = s;
            }
            "frames" => self.frames = parse_value(key, v, W)?,
            "joints" => self.body.joints = parse_value(key, v, W)?,
            "rings_per_bone" => self.body.rings_per_bone = parse_value(key, v, W)?,
            "verts_per_ring" => self.body.verts_per_ring = parse_value(key, v, W)?,
            "coarse_stride" => self.body.coarse_stride = parse_value(key, v, W)?,
            "pose_dim" => self.pose_dim = parse_value(key, v, W)?,
            "pose_layers" => self.pose_layers = parse_value(key, v, W)?,
            "decoder_dim" => self.decoder_dim = parse_value(key, v, W)?,
            "decoder_layers" => self.decoder_layers = parse_value(key, v, W)?,
            "heads" => self.heads = parse_value(key, v, W)?,
            "feature_dim" => self.feature_dim = parse_value(key, v, W)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, v, W)?,
            "activation" => self.activation = Activation::parse(v)?,
            "norm_placement" => self.norm_placement = NormPlacement::parse(v)?,
            "adaln_depth" => self.adaln_depth = parse_value(key, v, W)?,
            "adaln_residual_gain" => self.adaln_residual_gain = parse_value(key, v, W)?,
            "readout" => self.readout = Readout::parse(v)?,
            "residual_rank" => self.residual_rank = parse_value(key, v, W)?,
            "batch_size" => self.batch_size = parse_value(key, v, W)?,
            "learning_rate" => self.learning_rate = parse_value(key, v, W)?,
            "schedule" => self.schedule = Schedule::parse(v)?,
            "steps" => self.steps = parse_value(key, v, W)?,
            "epochs" => self.epochs = parse_value(key, v, W)?,
            "seed" => self.seed = parse_value(key, v, W)?,
            "weight_mesh" => self.weights.mesh = parse_value(key, v, W)?,
            "weight_joint" => self.weights.joint = parse_value(key, v, W)?,
            "weight_normal" => self.weights.normal = parse_value(key, v, W)?,
            "weight_edge" => self.weights.edge = parse_value(key, v, W)?,
            "supervise_output_pose" => self.weights.output_pose = parse_value(key, v, W)?,
            "surface_mean" => self.weights.surface_mean = parse_value(key, v, W)?,
            "grad_clip" => self.grad_clip = parse_value(key, v, W)?,
            "fps" => self.fps = parse_value(key, v, W)?,
            "zero_features" => self.zero_features = parse_value(key, v, W)?,
            "clip_frames" => self.clip_frames = parse_value(key, v, W)?,
            "noise_std" => self.noise_std = parse_value(key, v, W)?,
            "log_every" => self.log_every = parse_value(key, v, W)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Settings from a config file applied on top of the preset named in it
    /// (or `base` when it names none).
    pub fn from_text(text: &str, base: Preset) -> Result<Self> {
        let record = Record::parse(text, "config")?;
        let preset = match record.get("preset") {
            Some(p) => Preset::parse(p)?,
            None => base,
        };
        let mut cfg = TrainConfig::preset(preset);
        for (k, v) in &record.entries {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the settings of a config file in order; a `preset` entry is
    /// applied first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let record = Record::parse(text, "config")?;
        if let Some(p) = record.get("preset") {
            self.set("preset", p)?;
        }
        for (k, v) in &record.entries {
            if k != "preset" {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut r = Record::default();
        r.push("preset", self.preset.name());
        r.push("stage", self.stage);
        r.push("frames", self.frames);
        r.push("joints", self.body.joints);
        r.push("rings_per_bone", self.body.rings_per_bone);
        r.push("verts_per_ring", self.body.verts_per_ring);
        r.push("coarse_stride", self.body.coarse_stride);
        r.push("pose_dim", self.pose_dim);
        r.push("pose_layers", self.pose_layers);
        r.push("decoder_dim", self.decoder_dim);
        r.push("decoder_layers", self.decoder_layers);
        r.push("heads", self.heads);
        r.push("feature_dim", self.feature_dim);
        r.push("mlp_ratio", self.mlp_ratio);
        r.push("activation", self.activation.name());
        r.push("norm_placement", self.norm_placement.name());
        r.push("adaln_depth", self.adaln_depth);
        r.push("adaln_residual_gain", self.adaln_residual_gain);
        r.push("readout", self.readout.name());
        r.push("residual_rank", self.residual_rank);
        r.push("batch_size", self.batch_size);
        r.push("learning_rate", self.learning_rate);
        r.push("schedule", self.schedule.name());
        r.push("steps", self.steps);
        r.push("epochs", self.epochs);
        r.push("seed", self.seed);
        r.push("weight_mesh", self.weights.mesh);
        r.push("weight_joint", self.weights.joint);
        r.push("weight_normal", self.weights.normal);
        r.push("weight_edge", self.weights.edge);
        r.push("supervise_output_pose", self.weights.output_pose);
        r.push("surface_mean", self.weights.surface_mean);
        r.push("grad_clip", self.grad_clip);
        r.push("fps", self.fps);
        r.push("zero_features", self.zero_features);
        r.push("clip_frames", self.clip_frames);
        r.push("noise_std", self.noise_std);
        r.push("log_every", self.log_every);
        r.push("dataset", self.dataset.display());
        r.push("checkpoint", self.checkpoint.display());
        r.render()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.clip_frames < self.frames {
            return bad(format!(
                "need 1 <= frames <= clip_frames, got {} and {}",
                self.frames, self.clip_frames
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.steps == 0 && self.epochs == 0 {
            return bad("either steps or epochs must be positive".into());
        }
        for (name, dim) in [("pose_dim", self.pose_dim), ("decoder_dim", self.decoder_dim)] {
            if dim == 0 || dim % self.heads.max(1) != 0 {
                return bad(format!("{name} {dim} must be a positive multiple of heads {}", self.heads));
            }
        }
        if self.feature_dim < 2 || self.feature_dim % 2 != 0 {
            return bad(format!("feature_dim must be even and at least 2, got {}", self.feature_dim));
        }
        let w = &self.weights;
        if [w.mesh, w.joint, w.normal, w.edge].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || !(self.fps > 0.0) || self.grad_clip < 0.0 {
            return bad("learning_rate and fps must be positive, grad_clip nonnegative".into());
        }
        Ok(())
    }
}
