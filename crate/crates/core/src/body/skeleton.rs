use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Full 24-joint humanoid: name, parent index, rest offset from the parent
/// (Y up, +X to the body's left), tube radius.
const FULL: [(&str, usize, [f64; 3], f64); 24] = [
    ("pelvis", 0, [0.0, 0.0, 0.0], 0.12),
    ("left_hip", 0, [0.09, -0.08, 0.0], 0.08),
    ("right_hip", 0, [-0.09, -0.08, 0.0], 0.08),
    ("spine1", 0, [0.0, 0.11, -0.01], 0.12),
    ("left_knee", 1, [0.01, -0.40, 0.0], 0.06),
    ("right_knee", 2, [-0.01, -0.40, 0.0], 0.06),
    ("spine2", 3, [0.0, 0.13, 0.0], 0.12),
    ("left_ankle", 4, [0.0, -0.40, -0.02], 0.045),
    ("right_ankle", 5, [0.0, -0.40, -0.02], 0.045),
    ("spine3", 6, [0.0, 0.06, 0.01], 0.13),
    ("left_foot", 7, [0.0, -0.06, 0.12], 0.04),
    ("right_foot", 8, [0.0, -0.06, 0.12], 0.04),
    ("neck", 9, [0.0, 0.21, -0.02], 0.05),
    ("left_collar", 9, [0.07, 0.12, 0.0], 0.05),
    ("right_collar", 9, [-0.07, 0.12, 0.0], 0.05),
    ("head", 12, [0.0, 0.09, 0.03], 0.09),
    ("left_shoulder", 13, [0.11, 0.03, 0.0], 0.05),
    ("right_shoulder", 14, [-0.11, 0.03, 0.0], 0.05),
    ("left_elbow", 16, [0.25, 0.0, 0.0], 0.04),
    ("right_elbow", 17, [-0.25, 0.0, 0.0], 0.04),
    ("left_wrist", 18, [0.25, 0.0, 0.0], 0.035),
    ("right_wrist", 19, [-0.25, 0.0, 0.0], 0.035),
    ("left_hand", 20, [0.08, 0.0, 0.0], 0.03),
    ("right_hand", 21, [-0.08, 0.0, 0.0], 0.03),
];

/// Order in which joints of the full tree are kept when fewer are asked for.
const PRIORITY: [usize; 24] = [
    0, 15, 18, 19, 20, 21, 4, 5, 7, 8, 6, 12, // the twelve-joint core
    1, 2, 16, 17, 3, 9, 10, 11, 13, 14, 22, 23,
];

pub const MIN_JOINTS: usize = 12;
pub const MAX_JOINTS: usize = 24;

/// Joint tree in rest pose. Parents precede children, the root is its own
/// parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub names: Vec<&'static str>,
    pub parents: Vec<usize>,
    pub offsets: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
    pub rest: Vec<Vector3<f64>>,
}

impl Skeleton {
    /// The humanoid restricted to `joints` joints. Dropped joints are
    /// collapsed into the offsets of their kept descendants.
    pub fn humanoid(joints: usize) -> Result<Self> {
        if !(MIN_JOINTS..=MAX_JOINTS).contains(&joints) {
            return Err(Error::Config(format!(
                "joint count must be in {MIN_JOINTS}..={MAX_JOINTS}, got {joints}"
            )));
        }
        let mut keep: Vec<usize> = PRIORITY[..joints].to_vec();
        keep.sort_unstable();
        let full_rest = full_rest();
        let mut remap = [usize::MAX; 24];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut names = Vec::with_capacity(joints);
        let mut parents = Vec::with_capacity(joints);
        let mut offsets = Vec::with_capacity(joints);
        let mut radii = Vec::with_capacity(joints);
        for &old in &keep {
            let (name, _, _, radius) = FULL[old];
            let mut anc = FULL[old].1;
            while old != 0 && remap[anc] == usize::MAX {
                anc = FULL[anc].1;
            }
            let parent = if old == 0 { 0 } else { remap[anc] };
            let offset = if old == 0 {
                Vector3::zeros()
            } else {
                full_rest[old] - full_rest[anc]
            };
            names.push(name);
            parents.push(parent);
            offsets.push(offset);
            radii.push(radius);
        }
        let mut sk = Skeleton {
            names,
            parents,
            offsets,
            radii,
            rest: Vec::new(),
        };
        sk.rest = sk.accumulate(&sk.offsets);
        Ok(sk)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (1..self.len()).filter(move |&c| self.parents[c] == j)
    }

    /// Joint positions from per-joint offsets.
    pub fn accumulate(&self, offsets: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(self.len());
        for (j, off) in offsets.iter().enumerate() {
            let base = if j == 0 { Vector3::zeros() } else { pos[self.parents[j]] };
            pos.push(base + off);
        }
        pos
    }

    /// Direction and length of the tube owned by joint `j`: towards its most
    /// central child, or along its own offset for leaves.
    pub fn segment(&self, j: usize) -> (Vector3<f64>, f64) {
        let child = self
            .children(j)
            .min_by(|&a, &b| self.offsets[a].x.abs().total_cmp(&self.offsets[b].x.abs()).then(a.cmp(&b)));
        match child {
            Some(c) => {
                let v = self.offsets[c];
                (v.normalize(), v.norm())
            }
            None => {
                let v = self.offsets[j];
                (v.normalize(), (0.3 * v.norm()).max(0.12))
            }
        }
    }
}

fn full_rest() -> Vec<Vector3<f64>> {
    let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(24);
    for (j, (_, parent, off, _)) in FULL.iter().enumerate() {
        let base = if j == 0 { Vector3::zeros() } else { pos[*parent] };
        pos.push(base + Vector3::from(*off));
    }
    pos
}
