//! Training losses over pose and mesh predictions.

use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::body::face_normals;
use crate::error::{Error, Result};

/// Added to predicted edge lengths before dividing.
pub const NORMAL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mesh: f64,
    pub joint: f64,
    pub normal: f64,
    pub edge: f64,
    /// Also supervise the decoder's direct pose output at the joint weight.
    pub output_pose: bool,
    /// Average the normal and edge terms over face pairs instead of summing.
    pub surface_mean: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mesh: 1.0,
            joint: 1.0,
            normal: 0.1,
            edge: 20.0,
            output_pose: true,
            surface_mean: false,
        }
    }
}

impl LossWeights {
    /// `mesh·m + joint·j + normal·n + edge·e`.
    pub fn combine(&self, mesh: f64, joint: f64, normal: f64, edge: f64) -> f64 {
        self.mesh * mesh + self.joint * joint + self.normal * normal + self.edge * edge
    }
}

/// Vertex pairs of every face, listed once per incident face.
#[derive(Clone, Debug)]
pub struct Topology {
    pub faces: Vec<[usize; 3]>,
    first: Arc<Vec<usize>>,
    second: Arc<Vec<usize>>,
}

impl Topology {
    pub fn new(faces: &[[usize; 3]]) -> Self {
        let mut first = Vec::with_capacity(faces.len() * 3);
        let mut second = Vec::with_capacity(faces.len() * 3);
        for f in faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
                first.push(a);
                second.push(b);
            }
        }
        Topology {
            faces: faces.to_vec(),
            first: Arc::new(first),
            second: Arc::new(second),
        }
    }

    pub fn pair_count(&self) -> usize {
        self.first.len()
    }

    /// Per-pair difference vectors `[3F, 3]` of a plain mesh.
    pub fn pair_vectors(&self, mesh: &Tensor) -> Tensor {
        Tensor::from_fn([self.pair_count(), 3], |i| {
            let (p, c) = (i / 3, i % 3);
            mesh.at(&[self.first[p], c]) - mesh.at(&[self.second[p], c])
        })
    }

    fn pair_vars(&self, g: &mut Graph<'_>, mesh: Var) -> Result<Var> {
        let a = g.index_select(mesh, self.first.clone())?;
        let b = g.index_select(mesh, self.second.clone())?;
        g.sub(a, b)
    }

    /// Predicted edges shorter than `threshold`.
    pub fn short_edges(&self, mesh: &Tensor, threshold: f64) -> usize {
        let d = self.pair_vectors(mesh);
        (0..self.pair_count())
            .filter(|&p| d.row(p).iter().map(|v| v * v).sum::<f64>().sqrt() < threshold)
            .count()
    }
}

/// Quantities of a ground-truth mesh that the surface losses reuse.
#[derive(Clone, Debug)]
pub struct MeshTarget {
    pub vertices: Tensor,
    /// Unit normal of the owning face, one row per vertex pair.
    pub pair_normals: Tensor,
    /// `[3F, 1]`
    pub pair_lengths: Tensor,
}

impl MeshTarget {
    pub fn new(vertices: Tensor, topology: &Topology) -> Result<Self> {
        if vertices.rank() != 2 || vertices.shape()[1] != 3 {
            return Err(Error::shape("mesh_target", format!("expected [V, 3], got {:?}", vertices.shape())));
        }
        let normals = face_normals(&vertices, &topology.faces);
        let pair_normals = Tensor::from_fn([topology.pair_count(), 3], |i| normals.normals[i / 9][i % 3]);
        let d = topology.pair_vectors(&vertices);
        let pair_lengths = Tensor::from_fn([topology.pair_count(), 1], |p| d.row(p).iter().map(|v| v * v).sum::<f64>().sqrt());
        Ok(MeshTarget {
            vertices,
            pair_normals,
            pair_lengths,
        })
    }
}

fn same_shape(g: &Graph<'_>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) || g.rank(a) != 2 || g.shape(a)[1] != 3 {
        return Err(Error::shape(
            op,
            format!("expected matching [N, 3] shapes, got {:?} and {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Summed absolute coordinate error divided by the row count.
fn row_l1(g: &mut Graph<'_>, op: &'static str, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, op, pred, target)?;
    let rows = g.shape(pred)[0] as f64;
    let d = g.sub(target, pred)?;
    let d = g.abs(d)?;
    let s = g.sum(d)?;
    g.mul_scalar(s, 1.0 / rows)
}

/// Intermediate pose error, `[J, 3]` against `[J, 3]`.
pub fn loss_joint_int(g: &mut Graph<'_>, pose: Var, gt: Var) -> Result<Var> {
    row_l1(g, "loss_joint_int", pose, gt)
}

pub fn loss_mesh(g: &mut Graph<'_>, mesh: Var, gt: Var) -> Result<Var> {
    row_l1(g, "loss_mesh", mesh, gt)
}

/// Error of joints regressed from the mesh by `regressor` `[J, V]`.
pub fn loss_joint(g: &mut Graph<'_>, mesh: Var, regressor: Var, gt: Var) -> Result<Var> {
    let rs = g.shape(regressor).to_vec();
    if rs.len() != 2 || g.shape(mesh).first() != Some(&rs[1]) {
        return Err(Error::shape(
            "loss_joint",
            format!("regressor {:?} does not match mesh {:?}", rs, g.shape(mesh)),
        ));
    }
    let joints = g.matmul(regressor, mesh)?;
    row_l1(g, "loss_joint", joints, gt)
}

/// Predicted edge directions against ground-truth face normals.
pub fn loss_normal(g: &mut Graph<'_>, mesh: Var, target: &MeshTarget, topology: &Topology) -> Result<Var> {
    if g.shape(mesh) != target.vertices.shape() {
        return Err(Error::shape(
            "loss_normal",
            format!("mesh {:?} vs target {:?}", g.shape(mesh), target.vertices.shape()),
        ));
    }
    let d = topology.pair_vars(g, mesh)?;
    let len = g.norm_axis(d, 1)?;
    let len = g.add_scalar(len, NORMAL_EPS)?;
    let unit = g.div(d, len)?;
    let n = g.constant(target.pair_normals.clone())?;
    let dot = g.hadamard(unit, n)?;
    let dot = g.sum_axis(dot, 1)?;
    let dot = g.abs(dot)?;
    g.sum(dot)
}

/// Edge length differences, summed over every face's vertex pairs.
pub fn loss_edge(g: &mut Graph<'_>, mesh: Var, target: &MeshTarget, topology: &Topology) -> Result<Var> {
    if g.shape(mesh) != target.vertices.shape() {
        return Err(Error::shape(
            "loss_edge",
            format!("mesh {:?} vs target {:?}", g.shape(mesh), target.vertices.shape()),
        ));
    }
    let d = topology.pair_vars(g, mesh)?;
    let len = g.norm_axis(d, 1)?;
    let gt = g.constant(target.pair_lengths.clone())?;
    let diff = g.sub(gt, len)?;
    let diff = g.abs(diff)?;
    g.sum(diff)
}

/// Individual terms of the end-to-end objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mesh: Var,
    /// Regressed-joint term, plus the output-pose term when enabled.
    pub joint: Var,
    pub normal: Var,
    pub edge: Var,
    pub total: Var,
}

pub struct LossInputs<'a> {
    pub mesh: Var,
    pub pose: Var,
    pub gt_joints: Var,
    pub gt_mesh: Var,
    pub target: &'a MeshTarget,
    pub regressor: Var,
    pub topology: &'a Topology,
}

pub fn total_loss(g: &mut Graph<'_>, x: &LossInputs<'_>, w: &LossWeights) -> Result<LossTerms> {
    let mesh = loss_mesh(g, x.mesh, x.gt_mesh)?;
    let mut joint = loss_joint(g, x.mesh, x.regressor, x.gt_joints)?;
    if w.output_pose {
        let direct = row_l1(g, "loss_output_pose", x.pose, x.gt_joints)?;
        joint = g.add(joint, direct)?;
    }
    let mut normal = loss_normal(g, x.mesh, x.target, x.topology)?;
    let mut edge = loss_edge(g, x.mesh, x.target, x.topology)?;
    if w.surface_mean {
        let k = 1.0 / x.topology.pair_count().max(1) as f64;
        normal = g.mul_scalar(normal, k)?;
        edge = g.mul_scalar(edge, k)?;
    }
    let terms = [(mesh, w.mesh), (joint, w.joint), (normal, w.normal), (edge, w.edge)];
    let mut total = g.mul_scalar(terms[0].0, terms[0].1)?;
    for &(v, k) in &terms[1..] {
        let s = g.mul_scalar(v, k)?;
        total = g.add(total, s)?;
    }
    Ok(LossTerms {
        mesh,
        joint,
        normal,
        edge,
        total,
    })
}
