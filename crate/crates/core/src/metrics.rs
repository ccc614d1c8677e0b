//! Evaluation metrics: joint and vertex errors, similarity alignment and
//! acceleration error.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Best similarity transform of a prediction onto a target.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: Tensor,
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Set when the configuration was too degenerate to fit a rotation and
    /// only the centroids were matched.
    pub translation_only: bool,
}

fn points(t: &Tensor) -> Vec<Vector3<f64>> {
    (0..t.shape()[0]).map(|r| Vector3::from_row_slice(t.row(r))).collect()
}

fn from_points(p: &[Vector3<f64>]) -> Tensor {
    Tensor::from_fn([p.len(), 3], |i| p[i / 3][i % 3])
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 || a.shape()[1] != 3 || a.shape()[0] == 0 {
        return Err(Error::shape(
            op,
            format!("expected matching [N, 3], got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Scale, rotation and translation minimizing the squared distance from the
/// transformed prediction to the target.
pub fn procrustes_align(pred: &Tensor, target: &Tensor) -> Result<Alignment> {
    check_pair("procrustes_align", pred, target)?;
    let x = points(pred);
    let y = points(target);
    let (mx, my) = (centroid(&x), centroid(&y));
    let xc: Vec<_> = x.iter().map(|p| p - mx).collect();
    let yc: Vec<_> = y.iter().map(|p| p - my).collect();
    let var_x: f64 = xc.iter().map(|p| p.norm_squared()).sum();
    let cov: Matrix3<f64> = yc.iter().zip(&xc).map(|(b, a)| b * a.transpose()).sum();
    let svd = cov.svd(true, true);
    let s = svd.singular_values;
    let top = s.max();
    let rank = s.iter().filter(|&&v| v > 1e-12 * top.max(1e-300)).count();
    if x.len() < 3 || var_x <= 1e-24 || rank < 2 {
        let t = my - mx;
        let aligned: Vec<_> = x.iter().map(|p| p + t).collect();
        return Ok(Alignment {
            aligned: from_points(&aligned),
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: t,
            translation_only: true,
        });
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let flip = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let weakest = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap_or(2);
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[weakest] = flip;
    let d = Matrix3::from_diagonal(&diag);
    let rotation = u * d * vt;
    let scale = (0..3).map(|i| d[(i, i)] * s[i]).sum::<f64>() / var_x;
    let translation = my - scale * rotation * mx;
    let aligned: Vec<_> = x.iter().map(|p| scale * rotation * p + translation).collect();
    Ok(Alignment {
        aligned: from_points(&aligned),
        scale,
        rotation,
        translation,
        translation_only: false,
    })
}

/// Mean Euclidean distance between corresponding rows.
pub fn mean_distance(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair("mean_distance", pred, target)?;
    let n = pred.shape()[0];
    Ok((0..n)
        .map(|r| {
            pred.row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64)
}

pub fn pa_mpjpe(pred: &Tensor, target: &Tensor) -> Result<f64> {
    mean_distance(&procrustes_align(pred, target)?.aligned, target)
}

/// Mean second-difference error over interior frames and joints, scaled by
/// `fps²`. `None` when fewer than three frames are given.
pub fn accel_error(pred: &[Tensor], target: &[Tensor], fps: f64) -> Result<Option<f64>> {
    if pred.len() != target.len() {
        return Err(Error::shape("accel_error", format!("{} vs {} frames", pred.len(), target.len())));
    }
    if pred.len() < 3 {
        return Ok(None);
    }
    for (a, b) in pred.iter().zip(target) {
        check_pair("accel_error", a, b)?;
    }
    let rows = pred[0].shape()[0];
    let mut total = 0.0;
    for t in 1..pred.len() - 1 {
        for r in 0..rows {
            let mut sq = 0.0;
            for c in 0..3 {
                let second = |s: &[Tensor]| s[t + 1].at(&[r, c]) - 2.0 * s[t].at(&[r, c]) + s[t - 1].at(&[r, c]);
                sq += (second(pred) - second(target)).powi(2);
            }
            total += sq.sqrt();
        }
    }
    Ok(Some(total / ((pred.len() - 2) * rows) as f64 * fps * fps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub accel: Option<f64>,
    pub frames: usize,
    /// Frames contributing to the acceleration error.
    pub accel_frames: usize,
    /// Frames whose alignment fell back to translation only.
    pub degenerate_alignments: usize,
}

/// A predicted or ground-truth pose and mesh sequence.
#[derive(Clone, Copy, Debug)]
pub struct Sequence<'a> {
    pub poses: &'a [Tensor],
    pub meshes: &'a [Tensor],
}

impl EvaluationReport {
    pub fn evaluate(pred: Sequence<'_>, gt: Sequence<'_>, fps: f64) -> Result<Self> {
        let n = gt.poses.len();
        if pred.poses.len() != n || pred.meshes.len() != n || gt.meshes.len() != n || n == 0 {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "sequence lengths differ or are empty: {} {} {} {}",
                    pred.poses.len(),
                    pred.meshes.len(),
                    gt.poses.len(),
                    gt.meshes.len()
                ),
            ));
        }
        let (mut mpjpe, mut pa, mut pve, mut degenerate) = (0.0, 0.0, 0.0, 0);
        for t in 0..n {
            mpjpe += mean_distance(&pred.poses[t], &gt.poses[t])?;
            let al = procrustes_align(&pred.poses[t], &gt.poses[t])?;
            degenerate += al.translation_only as usize;
            pa += mean_distance(&al.aligned, &gt.poses[t])?;
            pve += mean_distance(&pred.meshes[t], &gt.meshes[t])?;
        }
        let accel = accel_error(pred.poses, gt.poses, fps)?;
        let k = n as f64;
        Ok(EvaluationReport {
            mpjpe: mpjpe / k,
            pa_mpjpe: pa / k,
            pve: pve / k,
            accel,
            frames: n,
            accel_frames: if accel.is_some() { n - 2 } else { 0 },
            degenerate_alignments: degenerate,
        })
    }

    /// Frame-weighted mean of several reports.
    pub fn aggregate(reports: &[EvaluationReport]) -> Option<EvaluationReport> {
        let frames: usize = reports.iter().map(|r| r.frames).sum();
        if frames == 0 {
            return None;
        }
        let mean = |f: fn(&EvaluationReport) -> f64| reports.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / frames as f64;
        let accel_frames: usize = reports.iter().map(|r| r.accel_frames).sum();
        let accel = (accel_frames > 0).then(|| {
            reports
                .iter()
                .filter_map(|r| r.accel.map(|a| a * r.accel_frames as f64))
                .sum::<f64>()
                / accel_frames as f64
        });
        Some(EvaluationReport {
            mpjpe: mean(|r| r.mpjpe),
            pa_mpjpe: mean(|r| r.pa_mpjpe),
            pve: mean(|r| r.pve),
            accel,
            frames,
            accel_frames,
            degenerate_alignments: reports.iter().map(|r| r.degenerate_alignments).sum(),
        })
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        let mut s = format!("mpjpe = {}\npa_mpjpe = {}\npve = {}\n", self.mpjpe, self.pa_mpjpe, self.pve);
        if let Some(a) = self.accel {
            s.push_str(&format!("accel = {a}\n"));
        }
        s.push_str(&format!(
            "frames = {}\naccel_frames = {}\ndegenerate_alignments = {}\n",
            self.frames, self.accel_frames, self.degenerate_alignments
        ));
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mpjpe": self.mpjpe,
            "pa_mpjpe": self.pa_mpjpe,
            "pve": self.pve,
            "accel": self.accel,
            "frames": self.frames,
            "accel_frames": self.accel_frames,
            "degenerate_alignments": self.degenerate_alignments,
        })
    }
}
