//! Procedural humanoid body: skeleton, tube mesh, coarse vertex subset,
//! coarse-to-fine interpolation weights and joint regressor.

mod geometry;
mod skeleton;

pub use geometry::{edges_from_faces, face_normals, write_obj, FaceNormals};
pub use skeleton::{Skeleton, MAX_JOINTS, MIN_JOINTS};

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BodyConfig {
    pub joints: usize,
    pub rings_per_bone: usize,
    pub verts_per_ring: usize,
    pub coarse_stride: usize,
}

impl BodyConfig {
    /// Small body used by tests and the toy preset: 144 vertices, 48 coarse.
    pub const TOY: BodyConfig = BodyConfig {
        joints: 12,
        rings_per_bone: 2,
        verts_per_ring: 6,
        coarse_stride: 3,
    };

    /// Closest tube layout to the reference body's 6890 / 431 vertex counts:
    /// 6912 vertices, 432 coarse.
    pub const FULL: BodyConfig = BodyConfig {
        joints: 24,
        rings_per_bone: 9,
        verts_per_ring: 32,
        coarse_stride: 16,
    };

    pub fn vertex_count(&self) -> usize {
        self.joints * self.rings_per_bone * self.verts_per_ring
    }

    pub fn coarse_count(&self) -> usize {
        self.joints * self.rings_per_bone * self.verts_per_ring.div_ceil(self.coarse_stride.max(1))
    }
}

#[derive(Clone, Debug)]
pub struct BodyModel {
    pub config: BodyConfig,
    pub skeleton: Skeleton,
    /// Rest-pose vertices `[V, 3]`.
    pub template: Tensor,
    /// Joint whose tube each vertex belongs to.
    pub owner: Vec<usize>,
    /// Center of the ring each vertex lies on, in rest pose.
    pub ring_centers: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub coarse_indices: Arc<Vec<usize>>,
    /// Row-stochastic `[V, V′]` weights rebuilding fine vertices from coarse.
    pub upsample_init: Tensor,
    /// Row-stochastic `[J, V]` joint regressor.
    pub regressor: Tensor,
    /// Closest rest joint of every coarse vertex.
    pub nearest_joint: Arc<Vec<usize>>,
}

impl BodyModel {
    pub fn build(config: BodyConfig) -> Result<Self> {
        let BodyConfig {
            joints,
            rings_per_bone: rings,
            verts_per_ring: per_ring,
            coarse_stride: stride,
        } = config;
        if rings < 2 || per_ring < 3 || stride == 0 || stride > per_ring {
            return Err(Error::Config(format!("degenerate body layout {config:?}")));
        }
        let skeleton = Skeleton::humanoid(joints)?;
        if config.coarse_count() < joints {
            return Err(Error::Config(format!(
                "coarse vertex count {} is below the joint count {joints}",
                config.coarse_count()
            )));
        }

        let v_count = config.vertex_count();
        let mut verts: Vec<Vector3<f64>> = Vec::with_capacity(v_count);
        let mut owner = Vec::with_capacity(v_count);
        let mut ring_centers = Vec::with_capacity(v_count);
        let mut faces = Vec::new();
        let mut coarse = Vec::new();
        for j in 0..joints {
            let (dir, len) = skeleton.segment(j);
            let (u, w) = ring_basis(&dir);
            let radius = skeleton.radii[j];
            let base = verts.len();
            for r in 0..rings {
                let center = skeleton.rest[j] + dir * (len * r as f64 / rings as f64);
                for k in 0..per_ring {
                    let a = TAU * k as f64 / per_ring as f64;
                    verts.push(center + (u * a.cos() + w * a.sin()) * radius);
                    owner.push(j);
                    ring_centers.push(center);
                    if k % stride == 0 {
                        coarse.push(base + r * per_ring + k);
                    }
                }
            }
            for r in 0..rings - 1 {
                for k in 0..per_ring {
                    let k1 = (k + 1) % per_ring;
                    let a = base + r * per_ring + k;
                    let b = base + r * per_ring + k1;
                    let c = base + (r + 1) * per_ring + k;
                    let d = base + (r + 1) * per_ring + k1;
                    faces.push([a, b, d]);
                    faces.push([a, d, c]);
                }
            }
        }

        let template = Tensor::from_fn([v_count, 3], |i| verts[i / 3][i % 3]);
        let edges = edges_from_faces(&faces);
        let upsample_init = interpolation_weights(&verts, &coarse);

        let mut regressor = Tensor::zeros([joints, v_count]);
        {
            let data = regressor.data_mut();
            for j in 0..joints {
                let first = j * rings * per_ring;
                for k in 0..per_ring {
                    data[j * v_count + first + k] = 1.0 / per_ring as f64;
                }
            }
        }

        let nearest_joint = coarse
            .iter()
            .map(|&v| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, p) in skeleton.rest.iter().enumerate() {
                    let d = (verts[v] - p).norm_squared();
                    if d < best_d {
                        best = j;
                        best_d = d;
                    }
                }
                best
            })
            .collect();

        Ok(BodyModel {
            config,
            skeleton,
            template,
            owner,
            ring_centers,
            faces,
            edges,
            coarse_indices: Arc::new(coarse),
            upsample_init,
            regressor,
            nearest_joint: Arc::new(nearest_joint),
        })
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.owner.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_indices.len()
    }

    pub fn rest_joints(&self) -> Tensor {
        let rest = &self.skeleton.rest;
        Tensor::from_fn([rest.len(), 3], |i| rest[i / 3][i % 3])
    }

    /// Template vertices at the coarse indices, `[V′, 3]`.
    pub fn coarse_template(&self) -> Tensor {
        select_rows(&self.template, &self.coarse_indices)
    }

    /// Rest-pose offset of every coarse vertex from its nearest joint,
    /// `[V′, 3]`.
    pub fn coarse_rest_offsets(&self) -> Tensor {
        let coarse = self.coarse_template();
        let joints = select_rows(&self.rest_joints(), &self.nearest_joint);
        Tensor::from_fn([self.coarse_count(), 3], |i| coarse.data()[i] - joints.data()[i])
    }

    /// Vertical extent of the template.
    pub fn height(&self) -> f64 {
        let ys = self.template.data().iter().skip(1).step_by(3);
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
        hi - lo
    }

    /// Place every coarse vertex on its nearest joint of `pose` `[J, 3]`.
    pub fn nearest_joint_init(&self, pose: &Tensor) -> Result<Tensor> {
        if pose.shape() != [self.joint_count(), 3] {
            return Err(Error::shape(
                "nearest_joint_init",
                format!("expected pose [{}, 3], got {:?}", self.joint_count(), pose.shape()),
            ));
        }
        Ok(select_rows(pose, &self.nearest_joint))
    }

    /// Graph version of [`Self::nearest_joint_init`].
    pub fn nearest_joint_init_var(&self, g: &mut Graph<'_>, pose: Var) -> Result<Var> {
        if g.shape(pose) != [self.joint_count(), 3] {
            return Err(Error::shape(
                "nearest_joint_init",
                format!("expected pose [{}, 3], got {:?}", self.joint_count(), g.shape(pose)),
            ));
        }
        g.index_select(pose, self.nearest_joint.clone())
    }

    /// `𝒥·M` for a mesh `[V, 3]`.
    pub fn regress_joints(&self, mesh: &Tensor) -> Result<Tensor> {
        if mesh.shape() != [self.vertex_count(), 3] {
            return Err(Error::shape(
                "regress_joints",
                format!("expected mesh [{}, 3], got {:?}", self.vertex_count(), mesh.shape()),
            ));
        }
        let v = self.vertex_count();
        let r = self.regressor.data();
        let m = mesh.data();
        Ok(Tensor::from_fn([self.joint_count(), 3], |i| {
            let (j, c) = (i / 3, i % 3);
            (0..v).map(|k| r[j * v + k] * m[k * 3 + c]).sum()
        }))
    }
}

/// Rows of `t` `[N, C]` picked by `idx`.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.shape()[1];
    Tensor::from_fn([idx.len(), c], |i| t.data()[idx[i / c] * c + i % c])
}

/// Two unit vectors spanning the plane orthogonal to `dir`.
fn ring_basis(dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if dir.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let u = dir.cross(&helper).normalize();
    let w = dir.cross(&u);
    (u, w)
}

/// Inverse-distance weights over the three nearest coarse vertices; coarse
/// vertices map to themselves.
fn interpolation_weights(verts: &[Vector3<f64>], coarse: &[usize]) -> Tensor {
    let vc = coarse.len();
    let mut u = Tensor::zeros([verts.len(), vc]);
    let data = u.data_mut();
    let mut pos = vec![usize::MAX; verts.len()];
    for (c, &v) in coarse.iter().enumerate() {
        pos[v] = c;
    }
    for (v, p) in verts.iter().enumerate() {
        let row = &mut data[v * vc..(v + 1) * vc];
        if pos[v] != usize::MAX {
            row[pos[v]] = 1.0;
            continue;
        }
        let mut dist: Vec<(f64, usize)> = coarse.iter().enumerate().map(|(c, &cv)| ((verts[cv] - p).norm(), c)).collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &dist[..3.min(vc)];
        let total: f64 = near.iter().map(|(d, _)| 1.0 / d).sum();
        for &(d, c) in near {
            row[c] = (1.0 / d) / total;
        }
    }
    u
}
