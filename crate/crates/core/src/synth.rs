//! Seeded synthetic motion clips: animated skeletons, skinned tube meshes,
//! pinhole projections and shape-aware per-frame features.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::body::{BodyConfig, BodyModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub body: BodyConfig,
    /// Frames per clip.
    pub frames: usize,
    pub feature_dim: usize,
    pub motion_amplitude: f64,
    /// Keypoint noise standard deviation in pixels.
    pub noise_std: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub focal: f64,
    pub scale_range: (f64, f64),
    pub girth_range: (f64, f64),
    /// Seed of the fixed feature projection, shared by every clip.
    pub feature_seed: u64,
}

impl SynthConfig {
    pub fn toy(frames: usize, feature_dim: usize) -> Self {
        SynthConfig {
            body: BodyConfig::TOY,
            frames,
            feature_dim,
            motion_amplitude: 1.0,
            noise_std: 2.0,
            image_width: 256.0,
            image_height: 256.0,
            focal: 350.0,
            scale_range: (0.85, 1.15),
            girth_range: (0.7, 1.4),
            feature_seed: 0x5eed,
        }
    }
}

/// Pinhole camera; `rotation`/`translation` map world points into the
/// camera frame (z forward, y up in the world becomes up in the image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub width: f64,
    pub height: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Camera at `eye` looking at `target` with world Y as up.
    pub fn look_at(focal: f64, width: f64, height: f64, eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = Vector3::y().cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera {
            focal,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the lens.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z <= 1e-6 {
            return None;
        }
        Some([
            self.width / 2.0 + self.focal * p.x / p.z,
            self.height / 2.0 - self.focal * p.y / p.z,
        ])
    }
}

/// One generated clip. All 3D data is in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub seed: u64,
    /// `[T, J, 3]`
    pub joints: Tensor,
    /// `[T, V, 3]`
    pub mesh: Tensor,
    /// `[T, J, 2]` pixels.
    pub pose_2d: Tensor,
    /// `[T, D_f]`
    pub features: Tensor,
    pub camera: Camera,
    pub body_scale: f64,
    pub girth: f64,
}

impl MotionClip {
    pub fn frames(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.joints.shape()[1]
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    fn frame_rows(t: &Tensor, frame: usize) -> Tensor {
        let (n, c) = (t.shape()[1], t.shape()[2]);
        let start = frame * n * c;
        Tensor::new([n, c], t.data()[start..start + n * c].to_vec()).expect("frame slice")
    }

    pub fn joints_at(&self, frame: usize) -> Tensor {
        Self::frame_rows(&self.joints, frame)
    }

    pub fn mesh_at(&self, frame: usize) -> Tensor {
        Self::frame_rows(&self.mesh, frame)
    }

    /// Joints of `frame` relative to the root joint.
    pub fn target_joints(&self, frame: usize) -> Tensor {
        let j = self.joints_at(frame);
        let root = [j.at(&[0, 0]), j.at(&[0, 1]), j.at(&[0, 2])];
        j.map_indexed(|i, v| v - root[i % 3])
    }

    /// Mesh of `frame` relative to the root joint.
    pub fn target_mesh(&self, frame: usize) -> Tensor {
        let j = self.joints_at(frame);
        let root = [j.at(&[0, 0]), j.at(&[0, 1]), j.at(&[0, 2])];
        self.mesh_at(frame).map_indexed(|i, v| v - root[i % 3])
    }
}

/// Smooth per-joint angle curves.
#[derive(Clone, Debug)]
struct Motion {
    /// Per joint and axis: amplitude, frequency (cycles per frame), phase.
    curves: Vec<[(f64, f64, f64); 3]>,
    sway: [(f64, f64, f64); 3],
}

/// Per-joint angle limits (radians) around x, y, z before the amplitude
/// factor. Roots and spines move less than limbs.
fn angle_limits(skeleton: &crate::body::Skeleton, j: usize) -> [f64; 3] {
    match skeleton.names[j] {
        "pelvis" => [0.15, 0.4, 0.1],
        n if n.starts_with("spine") || n == "neck" || n == "head" => [0.2, 0.25, 0.15],
        n if n.contains("knee") || n.contains("elbow") => [0.9, 0.1, 0.3],
        _ => [0.6, 0.3, 0.5],
    }
}

impl Motion {
    fn sample(model: &BodyModel, rng: &mut ChaCha8Rng) -> Self {
        let sk = &model.skeleton;
        let curves = (0..sk.len())
            .map(|j| {
                let lim = angle_limits(sk, j);
                [0, 1, 2].map(|a| {
                    (
                        lim[a] * rng.random_range(0.3..1.0),
                        rng.random_range(0.02..0.08),
                        rng.random_range(0.0..TAU),
                    )
                })
            })
            .collect();
        let sway = [0, 1, 2].map(|a| {
            let amp = if a == 1 { 0.03 } else { 0.1 };
            (rng.random_range(0.0..amp), rng.random_range(0.01..0.04), rng.random_range(0.0..TAU))
        });
        Motion { curves, sway }
    }

    fn rotation(&self, j: usize, t: f64, amplitude: f64) -> Rotation3<f64> {
        let a = self.curves[j].map(|(amp, freq, phase)| amplitude * amp * (TAU * freq * t + phase).sin());
        Rotation3::from_euler_angles(a[0], a[1], a[2])
    }

    fn root(&self, t: f64, amplitude: f64) -> Vector3<f64> {
        Vector3::from_iterator(
            self.sway
                .iter()
                .map(|&(amp, freq, phase)| amplitude * amp * (TAU * freq * t + phase).sin()),
        )
    }
}

/// Forward kinematics of one frame: world joint positions and global
/// rotations, for rest offsets scaled by `scale`.
fn pose_frame(model: &BodyModel, motion: &Motion, t: f64, amplitude: f64, scale: f64) -> (Vec<Vector3<f64>>, Vec<Rotation3<f64>>) {
    let sk = &model.skeleton;
    let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(sk.len());
    let mut rot: Vec<Rotation3<f64>> = Vec::with_capacity(sk.len());
    for j in 0..sk.len() {
        let local = motion.rotation(j, t, amplitude);
        if j == 0 {
            pos.push(motion.root(t, amplitude) + sk.offsets[0] * scale);
            rot.push(local);
        } else {
            let p = sk.parents[j];
            pos.push(pos[p] + rot[p] * (sk.offsets[j] * scale));
            rot.push(rot[p] * local);
        }
    }
    (pos, rot)
}

fn to_tensor(frames: &[Vec<Vector3<f64>>]) -> Tensor {
    let n = frames.first().map_or(0, Vec::len);
    Tensor::from_fn([frames.len(), n, 3], |i| frames[i / (3 * n)][(i / 3) % n][i % 3])
}

/// World joint trajectories `[T, J, 3]` of a seeded motion at unit scale.
pub fn animate(model: &BodyModel, seed: u64, frames: usize, amplitude: f64) -> Result<Tensor> {
    if frames == 0 {
        return Err(Error::Config("a clip needs at least one frame".into()));
    }
    let motion = Motion::sample(model, &mut ChaCha8Rng::seed_from_u64(seed));
    let traj: Vec<_> = (0..frames)
        .map(|t| pose_frame(model, &motion, t as f64, amplitude, 1.0).0)
        .collect();
    Ok(to_tensor(&traj))
}

/// Rest-pose vertices of a body with the given scale and girth: rings keep
/// their centers under scaling and widen by `girth`.
pub fn shaped_template(model: &BodyModel, scale: f64, girth: f64) -> Vec<Vector3<f64>> {
    (0..model.vertex_count())
        .map(|v| {
            let c = model.ring_centers[v];
            let p = Vector3::from_row_slice(model.template.row(v));
            c * scale + (p - c) * (scale * girth)
        })
        .collect()
}

/// Rigidly attach every vertex to its owner joint's frame.
fn skin_frame(model: &BodyModel, shaped: &[Vector3<f64>], scale: f64, pos: &[Vector3<f64>], rot: &[Rotation3<f64>]) -> Vec<Vector3<f64>> {
    shaped
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let j = model.owner[v];
            pos[j] + rot[j] * (p - model.skeleton.rest[j] * scale)
        })
        .collect()
}

/// Skin a trajectory produced by [`animate`] with the same seed; meshes
/// `[T, V, 3]` at unit scale and girth.
pub fn skin(model: &BodyModel, seed: u64, joints: &Tensor, amplitude: f64) -> Result<Tensor> {
    let frames = joints.shape()[0];
    if joints.shape() != [frames, model.joint_count(), 3] {
        return Err(Error::shape("skin", format!("unexpected trajectory shape {:?}", joints.shape())));
    }
    let motion = Motion::sample(model, &mut ChaCha8Rng::seed_from_u64(seed));
    let shaped = shaped_template(model, 1.0, 1.0);
    let meshes: Vec<_> = (0..frames)
        .map(|t| {
            let (pos, rot) = pose_frame(model, &motion, t as f64, amplitude, 1.0);
            skin_frame(model, &shaped, 1.0, &pos, &rot)
        })
        .collect();
    Ok(to_tensor(&meshes))
}

/// Pixel projection `[T, J, 2]` of camera-frame joints `[T, J, 3]`.
pub fn project_2d(joints: &Tensor, camera: &Camera, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (frames, j) = (joints.shape()[0], joints.shape()[1]);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(frames * j * 2);
    for t in 0..frames {
        for k in 0..j {
            let p = Vector3::new(joints.at(&[t, k, 0]), joints.at(&[t, k, 1]), joints.at(&[t, k, 2]));
            let px = camera.project(&p).ok_or(Error::BehindCamera { frame: t, joint: k })?;
            for c in px {
                out.push(if noise_std > 0.0 { c + noise.sample(rng) } else { c });
            }
        }
    }
    Tensor::new([frames, j, 2], out)
}

/// Fixed random projection used by [`synth_features`].
#[derive(Clone, Debug)]
pub struct FeatureProjection {
    /// `[D_f, 3V′ + 1]`
    pub weight: Tensor,
}

impl FeatureProjection {
    pub fn new(seed: u64, feature_dim: usize, coarse: usize) -> Self {
        let inputs = 3 * coarse + 1;
        let std = 1.0 / (inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureProjection {
            weight: Tensor::from_fn([feature_dim, inputs], |_| normal.sample(&mut rng)),
        }
    }

    /// `tanh(W·[root-relative coarse vertices, scale])` per frame.
    pub fn features(&self, model: &BodyModel, clip_mesh: &Tensor, clip_joints: &Tensor, scale: f64) -> Tensor {
        let frames = clip_mesh.shape()[0];
        let (d, inputs) = (self.weight.shape()[0], self.weight.shape()[1]);
        let w = self.weight.data();
        let mut out = Vec::with_capacity(frames * d);
        let mut x = vec![0.0; inputs];
        for t in 0..frames {
            for (i, &v) in model.coarse_indices.iter().enumerate() {
                for c in 0..3 {
                    x[3 * i + c] = clip_mesh.at(&[t, v, c]) - clip_joints.at(&[t, 0, c]);
                }
            }
            x[inputs - 1] = scale;
            for r in 0..d {
                let s: f64 = w[r * inputs..(r + 1) * inputs].iter().zip(&x).map(|(a, b)| a * b).sum();
                out.push(s.tanh());
            }
        }
        Tensor::new([frames, d], out).expect("feature shape")
    }
}

pub fn synth_features(model: &BodyModel, projection: &FeatureProjection, clip: &MotionClip) -> Tensor {
    projection.features(model, &clip.mesh, &clip.joints, clip.body_scale)
}

/// Seed of clip `index` in a dataset generated from `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic clip generator for one configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: SynthConfig,
    pub model: BodyModel,
    pub projection: FeatureProjection,
}

impl Generator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        if config.frames == 0 || config.feature_dim == 0 {
            return Err(Error::Config("clips need frames and a feature dimension".into()));
        }
        let model = BodyModel::build(config.body)?;
        let projection = FeatureProjection::new(config.feature_seed, config.feature_dim, model.coarse_count());
        Ok(Generator { config, model, projection })
    }

    /// Clip with explicitly chosen body shape.
    pub fn clip_with_shape(&self, seed: u64, scale: f64, girth: f64) -> Result<MotionClip> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion = Motion::sample(&self.model, &mut rng);
        let dist: f64 = rng.random_range(3.6..4.4);
        let azimuth: f64 = rng.random_range(-1.2..1.2);
        let elevation = rng.random_range(-0.2..0.4);
        let eye = Vector3::new(dist * azimuth.sin(), elevation, dist * azimuth.cos());
        let camera = Camera::look_at(cfg.focal, cfg.image_width, cfg.image_height, eye, Vector3::zeros());
        let shaped = shaped_template(&self.model, scale, girth);
        let mut joints = Vec::with_capacity(cfg.frames);
        let mut meshes = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            let (pos, rot) = pose_frame(&self.model, &motion, t as f64, cfg.motion_amplitude, scale);
            let mesh = skin_frame(&self.model, &shaped, scale, &pos, &rot);
            joints.push(pos.iter().map(|p| camera.to_camera(p)).collect::<Vec<_>>());
            meshes.push(mesh.iter().map(|p| camera.to_camera(p)).collect::<Vec<_>>());
        }
        let joints = to_tensor(&joints);
        let mesh = to_tensor(&meshes);
        let pose_2d = project_2d(&joints, &camera, cfg.noise_std, &mut rng)?;
        let mut clip = MotionClip {
            seed,
            joints,
            mesh,
            pose_2d,
            features: Tensor::zeros([cfg.frames, cfg.feature_dim]),
            camera,
            body_scale: scale,
            girth,
        };
        clip.features = synth_features(&self.model, &self.projection, &clip);
        Ok(clip)
    }

    pub fn clip(&self, seed: u64) -> Result<MotionClip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
        let (s0, s1) = self.config.scale_range;
        let (g0, g1) = self.config.girth_range;
        let scale = if s1 > s0 { rng.random_range(s0..s1) } else { s0 };
        let girth = if g1 > g0 { rng.random_range(g0..g1) } else { g0 };
        self.clip_with_shape(seed, scale, girth)
    }

    pub fn clips(&self, seed: u64, count: usize) -> Result<Vec<MotionClip>> {
        (0..count).map(|i| self.clip(clip_seed(seed, i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::face_normals;
    use crate::pose_stream::normalize_2d;

    fn toy() -> Generator {
        Generator::new(SynthConfig::toy(12, 16)).unwrap()
    }

    fn bone_lengths(model: &BodyModel, traj: &Tensor, t: usize) -> Vec<f64> {
        (1..model.joint_count())
            .map(|j| {
                let p = model.skeleton.parents[j];
                (0..3)
                    .map(|c| (traj.at(&[t, j, c]) - traj.at(&[t, p, c])).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn zero_amplitude_is_rest_pose() {
        let g = toy();
        let traj = animate(&g.model, 3, 5, 0.0).unwrap();
        let rest = g.model.rest_joints();
        for t in 0..5 {
            for j in 0..g.model.joint_count() {
                for c in 0..3 {
                    assert!((traj.at(&[t, j, c]) - rest.at(&[j, c])).abs() < 1e-12);
                }
            }
        }
        let mesh = skin(&g.model, 3, &traj, 0.0).unwrap();
        for v in 0..g.model.vertex_count() {
            for c in 0..3 {
                assert!((mesh.at(&[2, v, c]) - g.model.template.at(&[v, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bones_keep_their_length() {
        let g = toy();
        let traj = animate(&g.model, 11, 30, 1.0).unwrap();
        let first = bone_lengths(&g.model, &traj, 0);
        for t in 1..30 {
            for (a, b) in bone_lengths(&g.model, &traj, t).iter().zip(&first) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let offsets: Vec<f64> = g.model.skeleton.offsets[1..].iter().map(|o| o.norm()).collect();
        for (a, b) in first.iter().zip(&offsets) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = toy();
        assert_eq!(animate(&g.model, 5, 8, 1.0).unwrap(), animate(&g.model, 5, 8, 1.0).unwrap());
        assert_eq!(g.clip(9).unwrap(), g.clip(9).unwrap());
        assert_ne!(g.clip(9).unwrap().joints, g.clip(10).unwrap().joints);
    }

    #[test]
    fn regressed_joints_track_skeleton() {
        let g = toy();
        let clip = g.clip(21).unwrap();
        for t in 0..clip.frames() {
            let regressed = g.model.regress_joints(&clip.mesh_at(t)).unwrap();
            assert!(regressed.max_abs_diff(&clip.joints_at(t)) < 1e-9);
        }
    }

    #[test]
    fn translation_moves_every_vertex_equally() {
        let g = toy();
        let traj = animate(&g.model, 4, 3, 1.0).unwrap();
        let mesh = skin(&g.model, 4, &traj, 1.0).unwrap();
        let motion = Motion::sample(&g.model, &mut ChaCha8Rng::seed_from_u64(4));
        let shaped = shaped_template(&g.model, 1.0, 1.0);
        let (mut pos, rot) = pose_frame(&g.model, &motion, 1.0, 1.0, 1.0);
        let shift = Vector3::new(0.5, -1.0, 2.0);
        for p in &mut pos {
            *p += shift;
        }
        let moved = skin_frame(&g.model, &shaped, 1.0, &pos, &rot);
        for (v, p) in moved.iter().enumerate() {
            for c in 0..3 {
                assert!((p[c] - mesh.at(&[1, v, c]) - shift[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn faces_stay_non_degenerate() {
        let g = toy();
        for seed in 0..3 {
            let clip = g.clip(seed).unwrap();
            for t in 0..clip.frames() {
                assert!(face_normals(&clip.mesh_at(t), &g.model.faces).degenerate.iter().all(|d| !d));
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::look_at(300.0, 256.0, 192.0, Vector3::new(0.0, 0.0, 5.0), Vector3::zeros());
        let on_axis = cam.project(&Vector3::new(0.0, 0.0, 4.0)).unwrap();
        assert_eq!(on_axis, [128.0, 96.0]);
        let near = cam.project(&Vector3::new(0.2, -0.1, 2.0)).unwrap();
        let far = cam.project(&Vector3::new(0.2, -0.1, 4.0)).unwrap();
        for c in 0..2 {
            let mid = [128.0, 96.0][c];
            assert!(((near[c] - mid) - 2.0 * (far[c] - mid)).abs() < 1e-12);
        }
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!((cam.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_keypoints_match_projection() {
        let mut cfg = SynthConfig::toy(6, 8);
        cfg.noise_std = 0.0;
        let g = Generator::new(cfg).unwrap();
        let clip = g.clip(2).unwrap();
        for t in 0..6 {
            for j in 0..clip.joint_count() {
                let p = Vector3::new(clip.joints.at(&[t, j, 0]), clip.joints.at(&[t, j, 1]), clip.joints.at(&[t, j, 2]));
                let px = clip.camera.project(&p).unwrap();
                assert_eq!([clip.pose_2d.at(&[t, j, 0]), clip.pose_2d.at(&[t, j, 1])], px);
                assert!(px[0] > 0.0 && px[0] < 256.0 && px[1] > 0.0 && px[1] < 256.0);
            }
        }
        let a = normalize_2d(&clip.pose_2d, 256.0, 256.0).unwrap();
        let b = normalize_2d(&g.clip(2).unwrap().pose_2d, 256.0, 256.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn behind_camera_is_reported() {
        let cam = Camera::look_at(300.0, 256.0, 256.0, Vector3::new(0.0, 0.0, 5.0), Vector3::zeros());
        let joints = Tensor::new([1, 2, 3], vec![0.0, 0.0, 3.0, 0.0, 0.0, -1.0]).unwrap();
        let err = project_2d(&joints, &cam, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { frame: 0, joint: 1 }));
    }

    #[test]
    fn features_see_body_shape() {
        let g = toy();
        let a = g.clip_with_shape(7, 1.0, 1.0).unwrap();
        let b = g.clip_with_shape(7, 1.1, 1.0).unwrap();
        let c = g.clip_with_shape(7, 1.0, 1.3).unwrap();
        for t in 0..a.frames() {
            let row = |x: &MotionClip| x.features.row(t).to_vec();
            assert_ne!(row(&a), row(&b));
            assert_ne!(row(&a), row(&c));
        }
        assert!(a.features.data().iter().all(|v| v.abs() < 1.0));
        let same = g.projection.features(&g.model, &a.mesh, &a.joints, 1.0);
        assert_eq!(same, a.features);
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let mut cfg = SynthConfig::toy(4, 8);
        cfg.motion_amplitude = 0.0;
        let g = Generator::new(cfg).unwrap();
        let clip = g.clip(1).unwrap();
        for t in 1..4 {
            assert_eq!(clip.features.row(t), clip.features.row(0));
        }
    }

    #[test]
    fn targets_are_root_relative() {
        let clip = toy().clip(5).unwrap();
        let t = clip.target_joints(3);
        assert_eq!(t.row(0), &[0.0, 0.0, 0.0]);
        let m = clip.target_mesh(3);
        let j = clip.joints_at(3);
        assert!((m.at(&[4, 1]) + j.at(&[0, 1]) - clip.mesh_at(3).at(&[4, 1])).abs() < 1e-12);
    }

    #[test]
    fn girth_leaves_joints_alone() {
        let g = toy();
        let thin = g.clip_with_shape(3, 1.0, 0.8).unwrap();
        let wide = g.clip_with_shape(3, 1.0, 1.3).unwrap();
        assert_eq!(thin.joints, wide.joints);
        assert_ne!(thin.mesh, wide.mesh);
    }
}
