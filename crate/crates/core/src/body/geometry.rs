use std::collections::BTreeSet;
use std::io::{self, Write};

use nalgebra::Vector3;

use crate::autodiff::Tensor;

/// Unit face normals. Faces whose cross product vanishes get a zero vector
/// and are flagged.
#[derive(Clone, Debug)]
pub struct FaceNormals {
    pub normals: Vec<Vector3<f64>>,
    pub degenerate: Vec<bool>,
}

const DEGENERATE_AREA: f64 = 1e-14;

pub fn face_normals(vertices: &Tensor, faces: &[[usize; 3]]) -> FaceNormals {
    let p = |i: usize| Vector3::from_row_slice(vertices.row(i));
    let mut normals = Vec::with_capacity(faces.len());
    let mut degenerate = Vec::with_capacity(faces.len());
    for f in faces {
        let n = (p(f[1]) - p(f[0])).cross(&(p(f[2]) - p(f[0])));
        let len = n.norm();
        if len <= DEGENERATE_AREA {
            normals.push(Vector3::zeros());
            degenerate.push(true);
        } else {
            normals.push(n / len);
            degenerate.push(false);
        }
    }
    FaceNormals { normals, degenerate }
}

/// Undirected edges `(lo, hi)` of `faces`, sorted and without duplicates.
pub fn edges_from_faces(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            set.insert([a.min(b), a.max(b)]);
        }
    }
    set.into_iter().collect()
}

/// Wavefront OBJ with `v` and `f` records, 1-based face indices.
pub fn write_obj<W: Write>(mut out: W, vertices: &Tensor, faces: &[[usize; 3]]) -> io::Result<()> {
    for v in 0..vertices.shape()[0] {
        let r = vertices.row(v);
        writeln!(out, "v {} {} {}", r[0], r[1], r[2])?;
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    out.flush()
}
