//! The full network: pose stream, image-feature stream and decoder.

use crate::autodiff::{Graph, Init, ParamStore, Tensor, Var};
use crate::body::{BodyConfig, BodyModel};
use crate::decoder::{BlockAttention, Decoder, DecoderConfig, DecoderOutput};
use crate::error::Result;
use crate::feature_stream::{FeatureStream, FeatureStreamConfig, Readout};
use crate::nn::{Activation, AdaLnConfig, NormPlacement};
use crate::pose_stream::{PoseStream, PoseStreamConfig};

/// Parameter name prefix of the pose stream.
pub const POSE_PREFIX: &str = "pose.";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
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
    pub adaln: AdaLnConfig,
    pub readout: Readout,
    pub residual_rank: usize,
}

/// Network inputs for one window.
#[derive(Clone, Debug)]
pub struct WindowInput {
    /// Normalized 2D keypoints `[T, J, 2]`.
    pub pose_2d: Tensor,
    /// `[T, D_f]`
    pub features: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Intermediate pose from the pose stream.
    pub initial_pose: Var,
    /// Mid-frame temporal feature.
    pub feature: Var,
    /// Coarse mesh placed on the nearest joints of the intermediate pose.
    pub initial_mesh: Var,
    pub decoded: DecoderOutput,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub body: BodyModel,
    pub pose: PoseStream,
    pub features: FeatureStream,
    pub decoder: Decoder,
}

impl Model {
    /// Build the network and register its parameters in `store`.
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        let body = BodyModel::build(config.body)?;
        let mut init = Init::new(seed);
        let pose = PoseStream::new(
            store,
            &mut init,
            "pose",
            PoseStreamConfig {
                frames: config.frames,
                joints: config.body.joints,
                dim: config.pose_dim,
                layers: config.pose_layers,
                heads: config.heads,
                feature_dim: config.feature_dim,
                mlp_ratio: config.mlp_ratio,
                activation: config.activation,
                placement: config.norm_placement,
            },
        )?;
        let features = FeatureStream::new(
            store,
            &mut init,
            "feature",
            FeatureStreamConfig {
                feature_dim: config.feature_dim,
                hidden: (config.feature_dim / 2).max(1),
                readout: config.readout,
            },
        );
        let decoder = Decoder::new(
            store,
            &mut init,
            "decoder",
            DecoderConfig {
                joints: config.body.joints,
                coarse_vertices: body.coarse_count(),
                vertices: body.vertex_count(),
                dim: config.decoder_dim,
                layers: config.decoder_layers,
                heads: config.heads,
                feature_dim: config.feature_dim,
                mlp_ratio: config.mlp_ratio,
                activation: config.activation,
                adaln: config.adaln,
                residual_rank: config.residual_rank,
            },
            &body.upsample_init,
        )?
        .with_rest_offsets(body.coarse_rest_offsets())?;
        Ok(Model {
            config,
            body,
            pose,
            features,
            decoder,
        })
    }

    /// Intermediate pose only.
    pub fn initial_pose(&self, g: &mut Graph<'_>, pose_2d: Var, features: Var) -> Result<Var> {
        self.pose.forward(g, pose_2d, features)
    }

    pub fn forward(&self, g: &mut Graph<'_>, pose_2d: Var, features: Var) -> Result<ModelOutput> {
        self.forward_inner(g, pose_2d, features, None)
    }

    pub fn forward_with_attention(&self, g: &mut Graph<'_>, pose_2d: Var, features: Var) -> Result<(ModelOutput, Vec<BlockAttention>)> {
        let mut maps = Vec::new();
        let out = self.forward_inner(g, pose_2d, features, Some(&mut maps))?;
        Ok((out, maps))
    }

    fn forward_inner(&self, g: &mut Graph<'_>, pose_2d: Var, features: Var, maps: Option<&mut Vec<BlockAttention>>) -> Result<ModelOutput> {
        let initial_pose = self.pose.forward(g, pose_2d, features)?;
        let feature = self.features.forward(g, features)?;
        let initial_mesh = self.body.nearest_joint_init_var(g, initial_pose)?;
        let decoded = match maps {
            Some(list) => {
                let (out, m) = self.decoder.forward_with_attention(g, initial_pose, initial_mesh, feature)?;
                *list = m;
                out
            }
            None => self.decoder.forward(g, initial_pose, initial_mesh, feature)?,
        };
        Ok(ModelOutput {
            initial_pose,
            feature,
            initial_mesh,
            decoded,
        })
    }

    /// Plain-tensor prediction of pose `[J, 3]` and mesh `[V, 3]`.
    pub fn predict(&self, store: &ParamStore, input: &WindowInput) -> Result<Prediction> {
        let mut g = Graph::with_params(store);
        let p = g.constant(input.pose_2d.clone())?;
        let f = g.constant(input.features.clone())?;
        let out = self.forward(&mut g, p, f)?;
        Ok(Prediction {
            initial_pose: g.value(out.initial_pose).clone(),
            pose: g.value(out.decoded.pose).clone(),
            coarse: g.value(out.decoded.coarse).clone(),
            mesh: g.value(out.decoded.mesh).clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub initial_pose: Tensor,
    pub pose: Tensor,
    pub coarse: Tensor,
    pub mesh: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let m = Model::new(&mut store, TrainConfig::preset(Preset::Toy).model(), 1).unwrap();
        (store, m)
    }

    fn input(seed: u64, m: &Model) -> WindowInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &m.config;
        WindowInput {
            pose_2d: Tensor::from_fn([c.frames, c.body.joints, 2], |_| rng.random_range(-1.0..1.0)),
            features: Tensor::from_fn([c.frames, c.feature_dim], |_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn shapes_and_prefixes() {
        let (store, m) = toy();
        let p = m.predict(&store, &input(2, &m)).unwrap();
        assert_eq!(p.initial_pose.shape(), &[12, 3]);
        assert_eq!(p.pose.shape(), &[12, 3]);
        assert_eq!(p.coarse.shape(), &[48, 3]);
        assert_eq!(p.mesh.shape(), &[144, 3]);
        for (_, name, _) in store.iter() {
            assert!(["pose.", "feature.", "decoder."].iter().any(|pre| name.starts_with(pre)), "{name}");
        }
    }

    #[test]
    fn untrained_outputs_are_the_rest_template_at_the_origin() {
        let (store, m) = toy();
        let p = m.predict(&store, &input(3, &m)).unwrap();
        for t in [&p.initial_pose, &p.pose] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(p.coarse, m.body.coarse_rest_offsets());
    }

    #[test]
    fn rest_offsets_rebuild_the_coarse_template() {
        let (_, m) = toy();
        let placed = m.body.nearest_joint_init(&m.body.rest_joints()).unwrap();
        let sum = Tensor::from_fn(placed.shape().to_vec(), |i| {
            placed.data()[i] + m.body.coarse_rest_offsets().data()[i]
        });
        assert!(sum.max_abs_diff(&m.body.coarse_template()) < 1e-12);
    }

    #[test]
    fn initial_mesh_sits_on_initial_pose() {
        let (mut store, m) = toy();
        store.perturb(4, 0.05);
        let x = input(5, &m);
        let mut g = Graph::with_params(&store);
        let p = g.constant(x.pose_2d).unwrap();
        let f = g.constant(x.features).unwrap();
        let out = m.forward(&mut g, p, f).unwrap();
        let pose = g.value(out.initial_pose);
        let mesh = g.value(out.initial_mesh);
        for v in 0..mesh.shape()[0] {
            assert!((0..12).any(|j| mesh.row(v) == pose.row(j)));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, _) = toy();
        let (b, _) = toy();
        assert_eq!(a.numel(), b.numel());
        for ((_, na, ta), (_, nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!((na, ta), (nb, tb));
        }
    }
}
