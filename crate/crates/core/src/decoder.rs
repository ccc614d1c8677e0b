//! Symmetric pose/mesh cross-attention decoder conditioned on the temporal
//! image feature, with coarse-to-fine mesh upsampling.

use std::io::Write;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdaLn, AdaLnConfig, LayerNorm, Linear, Mlp, MultiHeadAttention};

/// Standard deviation of the joint and vertex position embeddings at
/// initialization.
pub const POSITION_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    pub joints: usize,
    pub coarse_vertices: usize,
    pub vertices: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub adaln: AdaLnConfig,
    /// Inner width `k` of the image-feature vertex residual.
    pub residual_rank: usize,
}

/// Parameters of one token stream inside a block.
#[derive(Clone, Debug)]
pub struct Side {
    pub norm_cross: AdaLn,
    pub cross: MultiHeadAttention,
    pub norm_merge: AdaLn,
    pub merge: Mlp,
    pub norm_self: AdaLn,
    pub attn: MultiHeadAttention,
    pub norm_mlp: AdaLn,
    pub mlp: Mlp,
}

impl Side {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let (d, df) = (cfg.dim, cfg.feature_dim);
        let ada = |store: &mut ParamStore, init: &mut Init, n: &str| AdaLn::new(store, init, &format!("{name}.{n}"), d, df, &cfg.adaln);
        Ok(Side {
            norm_cross: ada(store, init, "norm_cross"),
            cross: MultiHeadAttention::new(store, init, &format!("{name}.cross"), d, cfg.heads)?,
            norm_merge: ada(store, init, "norm_merge"),
            merge: Mlp::new(store, init, &format!("{name}.merge"), d, cfg.mlp_ratio, cfg.activation),
            norm_self: ada(store, init, "norm_self"),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.heads)?,
            norm_mlp: ada(store, init, "norm_mlp"),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), d, cfg.mlp_ratio, cfg.activation),
        })
    }

    /// Merge and self-interaction stages applied after the cross residual.
    fn refine(&self, g: &mut Graph<'_>, x: Var, f: Var, weights: Option<&mut Var>) -> Result<Var> {
        let h = self.norm_merge.forward(g, x, f)?;
        let h = self.merge.forward(g, h)?;
        let x = g.add(h, x)?;
        let h = self.norm_self.forward(g, x, f)?;
        let (h, w) = self.attn.mca_with_weights(g, h, h)?;
        if let Some(slot) = weights {
            *slot = w;
        }
        let x = g.add(h, x)?;
        let h = self.norm_mlp.forward(g, x, f)?;
        let h = self.mlp.forward(g, h)?;
        g.add(h, x)
    }
}

/// Head-averaged attention maps of one block, named by the direction in
/// which information flows.
#[derive(Clone, Debug)]
pub struct BlockAttention {
    /// Pose queries over mesh keys, `[J, V′]`.
    pub mesh_to_pose: Tensor,
    /// Mesh queries over pose keys, `[V′, J]`.
    pub pose_to_mesh: Tensor,
    pub mesh_to_mesh: Tensor,
    pub pose_to_pose: Tensor,
}

impl BlockAttention {
    pub fn maps(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("mesh_to_pose", &self.mesh_to_pose),
            ("pose_to_mesh", &self.pose_to_mesh),
            ("mesh_to_mesh", &self.mesh_to_mesh),
            ("pose_to_pose", &self.pose_to_pose),
        ]
    }
}

/// Raw per-head weights recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
struct AttentionVars {
    mesh_to_pose: Var,
    pose_to_mesh: Var,
    mesh_to_mesh: Var,
    pose_to_pose: Var,
}

#[derive(Clone, Debug)]
pub struct CoEvoBlock {
    pub pose: Side,
    pub mesh: Side,
}

impl CoEvoBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        Ok(CoEvoBlock {
            pose: Side::new(store, init, &format!("{name}.pose"), cfg)?,
            mesh: Side::new(store, init, &format!("{name}.mesh"), cfg)?,
        })
    }

    /// Pose tokens `[J, C]` and mesh tokens `[V′, C]` refined jointly.
    pub fn forward(&self, g: &mut Graph<'_>, xp: Var, xm: Var, f: Var) -> Result<(Var, Var)> {
        self.forward_inner(g, xp, xm, f, None)
    }

    fn forward_inner(&self, g: &mut Graph<'_>, xp: Var, xm: Var, f: Var, record: Option<&mut AttentionVars>) -> Result<(Var, Var)> {
        let np = self.pose.norm_cross.forward(g, xp, f)?;
        let nm = self.mesh.norm_cross.forward(g, xm, f)?;
        let (cp, wp) = self.pose.cross.mca_with_weights(g, np, nm)?;
        let (cm, wm) = self.mesh.cross.mca_with_weights(g, nm, np)?;
        let xp = g.add(cp, xp)?;
        let xm = g.add(cm, xm)?;
        match record {
            Some(rec) => {
                rec.mesh_to_pose = wp;
                rec.pose_to_mesh = wm;
                let xp = self.pose.refine(g, xp, f, Some(&mut rec.pose_to_pose))?;
                let xm = self.mesh.refine(g, xm, f, Some(&mut rec.mesh_to_mesh))?;
                Ok((xp, xm))
            }
            None => {
                let xp = self.pose.refine(g, xp, f, None)?;
                let xm = self.mesh.refine(g, xm, f, None)?;
                Ok((xp, xm))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Refined pose `[J, 3]`.
    pub pose: Var,
    /// Coarse mesh `[V′, 3]`.
    pub coarse: Var,
    /// Fine mesh `[V, 3]`.
    pub mesh: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub pose_embed: Linear,
    pub vertex_embed: Linear,
    pub joint_pos: ParamId,
    pub vertex_pos: ParamId,
    pub blocks: Vec<CoEvoBlock>,
    pub pose_norm: LayerNorm,
    pub pose_head: Linear,
    pub mesh_norm: LayerNorm,
    pub mesh_head: Linear,
    /// `[V, V′]` learned upsampling, initialized from the geometric weights.
    pub upsample: ParamId,
    pub upsample_bias: ParamId,
    /// Image feature to a `3 × k` matrix.
    pub residual_in: Linear,
    /// `k → V`, starts at zero.
    pub residual_out: Linear,
    /// Constant `[V′, 3]` added to the coarse input before the head's
    /// correction; zero unless set with [`Decoder::with_rest_offsets`].
    pub rest_offsets: Tensor,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: DecoderConfig, upsample_init: &Tensor) -> Result<Self> {
        let (j, vc, v, c) = (cfg.joints, cfg.coarse_vertices, cfg.vertices, cfg.dim);
        if upsample_init.shape() != [v, vc] {
            return Err(Error::shape(
                "decoder",
                format!("upsampling init must be [{v}, {vc}], got {:?}", upsample_init.shape()),
            ));
        }
        let k = cfg.residual_rank.max(1);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(CoEvoBlock::new(store, init, &format!("{name}.block{i}"), &cfg)?);
        }
        Ok(Decoder {
            config: cfg,
            pose_embed: Linear::new(store, init, &format!("{name}.pose_embed"), 3, c, true),
            vertex_embed: Linear::new(store, init, &format!("{name}.vertex_embed"), 3, c, true),
            joint_pos: store.add(format!("{name}.joint_pos"), init.normal([j, c], POSITION_STD)),
            vertex_pos: store.add(format!("{name}.vertex_pos"), init.normal([vc, c], POSITION_STD)),
            blocks,
            pose_norm: LayerNorm::new(store, &format!("{name}.pose_norm"), c),
            pose_head: Linear::zeroed(store, &format!("{name}.pose_head"), c, 3),
            mesh_norm: LayerNorm::new(store, &format!("{name}.mesh_norm"), c),
            mesh_head: Linear::zeroed(store, &format!("{name}.mesh_head"), c, 3),
            upsample: store.add(format!("{name}.upsample.w"), upsample_init.clone()),
            upsample_bias: store.add(format!("{name}.upsample.b"), Tensor::zeros([v, 1])),
            residual_in: Linear::new(store, init, &format!("{name}.residual_in"), cfg.feature_dim, 3 * k, true),
            residual_out: Linear::zeroed(store, &format!("{name}.residual_out"), k, v),
            rest_offsets: Tensor::zeros([vc, 3]),
        })
    }

    /// Offsets of each coarse vertex from its nearest joint in the rest pose,
    /// so that an untrained decoder emits the template placed on the input
    /// pose rather than a collapsed mesh.
    pub fn with_rest_offsets(mut self, offsets: Tensor) -> Result<Self> {
        if offsets.shape() != [self.config.coarse_vertices, 3] {
            return Err(Error::shape(
                "decoder",
                format!(
                    "rest offsets must be [{}, 3], got {:?}",
                    self.config.coarse_vertices,
                    offsets.shape()
                ),
            ));
        }
        self.rest_offsets = offsets;
        Ok(self)
    }

    /// Pose `[J, 3]` and coarse mesh `[V′, 3]` to token sets with their
    /// position embeddings added.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, pose: Var, coarse: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        if g.shape(pose) != [c.joints, 3] || g.shape(coarse) != [c.coarse_vertices, 3] {
            return Err(Error::shape(
                "decoder",
                format!(
                    "expected pose [{}, 3] and coarse mesh [{}, 3], got {:?} and {:?}",
                    c.joints,
                    c.coarse_vertices,
                    g.shape(pose),
                    g.shape(coarse)
                ),
            ));
        }
        let xp = self.pose_embed.forward(g, pose)?;
        let jp = g.param(self.joint_pos)?;
        let xp = g.add(xp, jp)?;
        let xm = self.vertex_embed.forward(g, coarse)?;
        let vp = g.param(self.vertex_pos)?;
        let xm = g.add(xm, vp)?;
        Ok((xp, xm))
    }

    /// `M = U·M′ + b + residual(f)`, `[V′, 3]` → `[V, 3]`.
    pub fn upsample_with_residual(&self, g: &mut Graph<'_>, coarse: Var, f: Var) -> Result<Var> {
        let k = self.config.residual_rank.max(1);
        let u = g.param(self.upsample)?;
        let b = g.param(self.upsample_bias)?;
        let up = g.matmul(u, coarse)?;
        let up = g.add(up, b)?;
        let r = self.residual_in.forward(g, f)?;
        let r = g.reshape(r, &[3, k])?;
        let r = self.residual_out.forward(g, r)?;
        let r = g.transpose(r)?;
        g.add(up, r)
    }

    pub fn forward(&self, g: &mut Graph<'_>, pose: Var, coarse: Var, f: Var) -> Result<DecoderOutput> {
        self.forward_inner(g, pose, coarse, f, None)
    }

    /// Forward pass that also returns every block's head-averaged attention.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph<'_>,
        pose: Var,
        coarse: Var,
        f: Var,
    ) -> Result<(DecoderOutput, Vec<BlockAttention>)> {
        let mut maps = Vec::new();
        let out = self.forward_inner(g, pose, coarse, f, Some(&mut maps))?;
        Ok((out, maps))
    }

    fn forward_inner(
        &self,
        g: &mut Graph<'_>,
        pose: Var,
        coarse: Var,
        f: Var,
        mut maps: Option<&mut Vec<BlockAttention>>,
    ) -> Result<DecoderOutput> {
        if g.shape(f) != [self.config.feature_dim] {
            return Err(Error::shape(
                "decoder",
                format!("expected feature [{}], got {:?}", self.config.feature_dim, g.shape(f)),
            ));
        }
        let (mut xp, mut xm) = self.embed_tokens(g, pose, coarse)?;
        for block in &self.blocks {
            match maps.as_deref_mut() {
                Some(list) => {
                    let mut rec = AttentionVars {
                        mesh_to_pose: xp,
                        pose_to_mesh: xp,
                        mesh_to_mesh: xp,
                        pose_to_pose: xp,
                    };
                    (xp, xm) = block.forward_inner(g, xp, xm, f, Some(&mut rec))?;
                    list.push(BlockAttention {
                        mesh_to_pose: head_mean(g.value(rec.mesh_to_pose)),
                        pose_to_mesh: head_mean(g.value(rec.pose_to_mesh)),
                        mesh_to_mesh: head_mean(g.value(rec.mesh_to_mesh)),
                        pose_to_pose: head_mean(g.value(rec.pose_to_pose)),
                    });
                }
                None => (xp, xm) = block.forward(g, xp, xm, f)?,
            }
        }
        let hp = self.pose_norm.forward(g, xp)?;
        let dp = self.pose_head.forward(g, hp)?;
        let out_pose = g.add(pose, dp)?;
        let hm = self.mesh_norm.forward(g, xm)?;
        let dm = self.mesh_head.forward(g, hm)?;
        let offsets = g.constant(self.rest_offsets.clone())?;
        let base = g.add(coarse, offsets)?;
        let out_coarse = g.add(base, dm)?;
        let mesh = self.upsample_with_residual(g, out_coarse, f)?;
        Ok(DecoderOutput {
            pose: out_pose,
            coarse: out_coarse,
            mesh,
        })
    }
}

/// `[h, n, m]` → `[n, m]` averaged over heads.
fn head_mean(w: &Tensor) -> Tensor {
    let s = w.shape();
    let (h, n, m) = (s[0], s[1], s[2]);
    Tensor::from_fn([n, m], |i| (0..h).map(|k| w.data()[k * n * m + i]).sum::<f64>() / h as f64)
}

/// A matrix as comma-separated rows.
pub fn write_matrix_csv<W: Write>(mut out: W, m: &Tensor) -> std::io::Result<()> {
    let cols = m.shape()[1];
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()
}
