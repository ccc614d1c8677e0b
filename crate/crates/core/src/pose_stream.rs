//! Spatial-temporal Transformer lifting a 2D keypoint sequence, plus
//! per-frame image features, to the 3D pose of the middle frame.

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, EncoderLayer, EncoderLayerConfig, LayerNorm, Linear, NormPlacement};

/// Map pixel keypoints `[.., 2]` to `2·p/w − (1, h/w)`.
pub fn normalize_2d(pixels: &Tensor, width: f64, height: f64) -> Result<Tensor> {
    check_image(width, height)?;
    let aspect = height / width;
    Ok(Tensor::from_fn(pixels.shape().to_vec(), |i| {
        let v = pixels.data()[i];
        let shift = if i % 2 == 0 { 1.0 } else { aspect };
        2.0 * v / width - shift
    }))
}

/// Inverse of [`normalize_2d`].
pub fn denormalize_2d(coords: &Tensor, width: f64, height: f64) -> Result<Tensor> {
    check_image(width, height)?;
    let aspect = height / width;
    Ok(Tensor::from_fn(coords.shape().to_vec(), |i| {
        let v = coords.data()[i];
        let shift = if i % 2 == 0 { 1.0 } else { aspect };
        (v + shift) * width / 2.0
    }))
}

fn check_image(width: f64, height: f64) -> Result<()> {
    if width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidImage { width, height })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoseStreamConfig {
    pub frames: usize,
    pub joints: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub placement: NormPlacement,
}

/// One spatial layer (attention over joints of a frame) followed by one
/// temporal layer (attention over frames of a joint).
#[derive(Clone, Debug)]
pub struct StLayer {
    pub spatial: EncoderLayer,
    pub temporal: EncoderLayer,
}

impl StLayer {
    /// `[T, J, C]` → `[T, J, C]`
    pub fn spatial(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.spatial.forward(g, x)
    }

    /// `[T, J, C]` → `[T, J, C]`, attending along `T`.
    pub fn temporal(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let xt = g.permute(x, &[1, 0, 2])?;
        let y = self.temporal.forward(g, xt)?;
        g.permute(y, &[1, 0, 2])
    }
}

#[derive(Clone, Debug)]
pub struct PoseStream {
    pub config: PoseStreamConfig,
    pub embed: Linear,
    pub feature_proj: Linear,
    pub spatial_pos: ParamId,
    pub temporal_pos: ParamId,
    pub layers: Vec<StLayer>,
    pub head_norm: LayerNorm,
    pub head: Linear,
    /// `[T, 1]` weights fusing the frames, initialized to `1/T`.
    pub fuse_weight: ParamId,
    pub fuse_bias: ParamId,
}

impl PoseStream {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: PoseStreamConfig) -> Result<Self> {
        let PoseStreamConfig {
            frames: t,
            joints: j,
            dim: c,
            ..
        } = cfg;
        if t == 0 || j < 2 {
            return Err(Error::Config(format!("pose stream needs T >= 1 and J >= 2, got T={t} J={j}")));
        }
        let layer_cfg = EncoderLayerConfig {
            dim: c,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            activation: cfg.activation,
            placement: cfg.placement,
        };
        let embed = Linear::new(store, init, &format!("{name}.embed"), 2, c, true);
        let feature_proj = Linear::new(store, init, &format!("{name}.feature_proj"), cfg.feature_dim, c, true);
        let spatial_pos = store.add(format!("{name}.spatial_pos"), init.normal([j, c], 0.02));
        let temporal_pos = store.add(format!("{name}.temporal_pos"), init.normal([t, 1, c], 0.02));
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            layers.push(StLayer {
                spatial: EncoderLayer::new(store, init, &format!("{name}.layer{i}.spatial"), &layer_cfg)?,
                temporal: EncoderLayer::new(store, init, &format!("{name}.layer{i}.temporal"), &layer_cfg)?,
            });
        }
        let head_norm = LayerNorm::new(store, &format!("{name}.head_norm"), c);
        let head = Linear::zeroed(store, &format!("{name}.head"), c, 3);
        let fuse_weight = store.add(format!("{name}.fuse.w"), Tensor::full([t, 1], 1.0 / t as f64));
        let fuse_bias = store.add(format!("{name}.fuse.b"), Tensor::zeros([1]));
        Ok(PoseStream {
            config: cfg,
            embed,
            feature_proj,
            spatial_pos,
            temporal_pos,
            layers,
            head_norm,
            head,
            fuse_weight,
            fuse_bias,
        })
    }

    fn check_inputs(&self, g: &Graph<'_>, pose: Var, features: Var) -> Result<()> {
        let c = &self.config;
        if g.shape(pose) != [c.frames, c.joints, 2] {
            return Err(Error::shape(
                "pose_stream",
                format!("expected 2D poses [{}, {}, 2], got {:?}", c.frames, c.joints, g.shape(pose)),
            ));
        }
        if g.shape(features) != [c.frames, c.feature_dim] {
            return Err(Error::shape(
                "pose_stream",
                format!("expected features [{}, {}], got {:?}", c.frames, c.feature_dim, g.shape(features)),
            ));
        }
        Ok(())
    }

    /// Add the projected per-frame feature `[T, D_f]` to every joint token
    /// of the matching frame of `x` `[T, J, C]`.
    pub fn inject_features(&self, g: &mut Graph<'_>, x: Var, features: Var) -> Result<Var> {
        let (tx, tf) = (g.shape(x)[0], g.shape(features)[0]);
        if tx != tf {
            return Err(Error::shape(
                "inject_features",
                format!("{tx} token frames but {tf} feature frames"),
            ));
        }
        let f = self.feature_proj.forward(g, features)?;
        let f = g.reshape(f, &[tf, 1, self.config.dim])?;
        g.add(x, f)
    }

    /// Normalized 2D poses `[T, J, 2]` and features `[T, D_f]` to the token
    /// grid `[T, J, C]` after all spatial-temporal layers.
    pub fn encode(&self, g: &mut Graph<'_>, pose: Var, features: Var) -> Result<Var> {
        self.check_inputs(g, pose, features)?;
        let x = self.embed.forward(g, pose)?;
        let x = self.inject_features(g, x, features)?;
        let sp = g.param(self.spatial_pos)?;
        let tp = g.param(self.temporal_pos)?;
        let x = g.add(x, sp)?;
        let mut x = g.add(x, tp)?;
        for layer in &self.layers {
            x = layer.spatial(g, x)?;
            x = layer.temporal(g, x)?;
        }
        Ok(x)
    }

    /// Token grid `[T, J, C]` to the fused pose `[J, 3]`.
    pub fn head(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        let h = self.head_norm.forward(g, tokens)?;
        let per_frame = self.head.forward(g, h)?;
        let by_joint = g.permute(per_frame, &[1, 2, 0])?;
        let w = g.param(self.fuse_weight)?;
        let b = g.param(self.fuse_bias)?;
        let fused = g.matmul(by_joint, w)?;
        let fused = g.reshape(fused, &[self.config.joints, 3])?;
        g.add(fused, b)
    }

    /// Intermediate mid-frame pose `[J, 3]`.
    pub fn forward(&self, g: &mut Graph<'_>, pose: Var, features: Var) -> Result<Var> {
        let tokens = self.encode(g, pose, features)?;
        self.head(g, tokens)
    }
}
