//! Two-stage training, sliding-window evaluation and the sample pipeline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feature_stream::mid_frame;
use crate::losses::{loss_joint_int, total_loss, LossInputs, MeshTarget, Topology};
use crate::metrics::{EvaluationReport, Sequence};
use crate::model::{Model, Prediction, WindowInput, POSE_PREFIX};
use crate::optim::{Adam, AdamConfig, GradBuffer};
use crate::pose_stream::normalize_2d;
use crate::synth::MotionClip;

/// One training window: network inputs plus mid-frame targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: usize,
    /// First frame of the window.
    pub start: usize,
    pub input: WindowInput,
    /// Root-relative joints `[J, 3]` of the mid frame.
    pub joints: Tensor,
    /// Root-relative mesh `[V, 3]` of the mid frame.
    pub mesh: Tensor,
    pub target: MeshTarget,
}

/// Inputs of the window of `frames` frames starting at `start`.
pub fn window_input(clip: &MotionClip, start: usize, frames: usize, zero_features: bool) -> Result<WindowInput> {
    let (j, d) = (clip.joint_count(), clip.feature_dim());
    let raw = &clip.pose_2d.data()[start * j * 2..(start + frames) * j * 2];
    let pixels = Tensor::new([frames, j, 2], raw.to_vec())?;
    let pose_2d = normalize_2d(&pixels, clip.camera.width, clip.camera.height)?;
    let features = if zero_features {
        Tensor::zeros([frames, d])
    } else {
        Tensor::new([frames, d], clip.features.data()[start * d..(start + frames) * d].to_vec())?
    };
    Ok(WindowInput { pose_2d, features })
}

/// Every full window of every clip, in clip then start order. Clips shorter
/// than `frames` are skipped with a warning.
pub fn build_samples(clips: &[MotionClip], frames: usize, zero_features: bool, topology: &Topology) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        if clip.frames() < frames {
            log::warn!("clip {c} has {} frames, fewer than the window of {frames}; skipped", clip.frames());
            continue;
        }
        for start in 0..=clip.frames() - frames {
            let frame = start + mid_frame(frames);
            let mesh = clip.target_mesh(frame);
            out.push(Sample {
                clip: c,
                start,
                input: window_input(clip, start, frames, zero_features)?,
                joints: clip.target_joints(frame),
                target: MeshTarget::new(mesh.clone(), topology)?,
                mesh,
            });
        }
    }
    Ok(out)
}

/// Sample indices of batch `step`. Samples are drawn without replacement
/// from a fresh permutation per epoch, seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, samples: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch as u64 {
        let flat = step * batch as u64 + b;
        let epoch = flat / samples as u64;
        let pos = (flat % samples as u64) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, samples)));
        }
        out.push(cached.as_ref().expect("set above").1[pos]);
    }
    out
}

fn epoch_order(seed: u64, epoch: u64, samples: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-step record of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Steps completed before this one.
    pub step: u64,
    /// Batch-mean loss before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss components of one sample, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub joint_int: f64,
    pub mesh: f64,
    pub joint: f64,
    pub normal: f64,
    pub edge: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub topology: Topology,
    regressor: Tensor,
}

impl Trainer {
    /// Fresh model with parameters seeded by `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config.model(), config.seed)?;
        let optimizer = Adam::new(&store, AdamConfig::default());
        let topology = Topology::new(&model.body.faces);
        let regressor = model.body.regressor.clone();
        Ok(Trainer {
            config,
            model,
            store,
            optimizer,
            step: 0,
            topology,
            regressor,
        })
    }

    /// Stage-2 start: fresh model with the pose stream copied from a stage-1
    /// checkpoint and a reset optimizer.
    pub fn from_stage1(config: TrainConfig, stage1: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        stage1.restore(&mut t.store, POSE_PREFIX)?;
        Ok(t)
    }

    /// Continue a run from one of its own checkpoints.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config.stage != config.stage {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint is from stage {}, resuming stage {}",
                ckpt.config.stage, config.stage
            )));
        }
        let mut t = Trainer::new(config)?;
        ckpt.restore(&mut t.store, "")?;
        if let Some(adam) = ckpt.optimizer_for(&t.store)? {
            t.optimizer = adam;
        }
        t.step = ckpt.step;
        Ok(t)
    }

    /// Model for evaluation only, with every parameter from `ckpt`.
    pub fn for_evaluation(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        ckpt.restore(&mut t.store, "")?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, Some(&self.optimizer), &self.config, self.step)
    }

    /// Parameters updated in the current stage.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.stage != 1 || name.starts_with(POSE_PREFIX)
    }

    /// Total steps the configuration asks for on `samples` samples.
    pub fn planned_steps(&self, samples: usize) -> u64 {
        if self.config.steps > 0 {
            self.config.steps as u64
        } else {
            (self.config.epochs * samples.div_ceil(self.config.batch_size)) as u64
        }
    }

    /// Scalar objective of the current stage for one sample.
    fn stage_loss(&self, g: &mut Graph<'_>, sample: &Sample) -> Result<Var> {
        let pose_2d = g.constant(sample.input.pose_2d.clone())?;
        let feats = g.constant(sample.input.features.clone())?;
        let gt_joints = g.constant(sample.joints.clone())?;
        if self.config.stage == 1 {
            let p0 = self.model.initial_pose(g, pose_2d, feats)?;
            return loss_joint_int(g, p0, gt_joints);
        }
        let out = self.model.forward(g, pose_2d, feats)?;
        let gt_mesh = g.constant(sample.mesh.clone())?;
        let regressor = g.constant(self.regressor.clone())?;
        let inputs = LossInputs {
            mesh: out.decoded.mesh,
            pose: out.decoded.pose,
            gt_joints,
            gt_mesh,
            target: &sample.target,
            regressor,
            topology: &self.topology,
        };
        Ok(total_loss(g, &inputs, &self.config.weights)?.total)
    }

    fn sample_grads(&self, sample: &Sample) -> Result<(f64, Gradients)> {
        let mut g = Graph::with_params(&self.store);
        let loss = self.stage_loss(&mut g, sample)?;
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?))
    }

    /// Every loss term of one sample, without gradients.
    pub fn sample_losses(&self, sample: &Sample) -> Result<LossValues> {
        let mut g = Graph::with_params(&self.store);
        let pose_2d = g.constant(sample.input.pose_2d.clone())?;
        let feats = g.constant(sample.input.features.clone())?;
        let gt_joints = g.constant(sample.joints.clone())?;
        let out = self.model.forward(&mut g, pose_2d, feats)?;
        let joint_int = loss_joint_int(&mut g, out.initial_pose, gt_joints)?;
        let gt_mesh = g.constant(sample.mesh.clone())?;
        let regressor = g.constant(self.regressor.clone())?;
        let inputs = LossInputs {
            mesh: out.decoded.mesh,
            pose: out.decoded.pose,
            gt_joints,
            gt_mesh,
            target: &sample.target,
            regressor,
            topology: &self.topology,
        };
        let terms = total_loss(&mut g, &inputs, &self.config.weights)?;
        let v = |x| g.value(x).item();
        Ok(LossValues {
            joint_int: v(joint_int),
            mesh: v(terms.mesh),
            joint: v(terms.joint),
            normal: v(terms.normal),
            edge: v(terms.edge),
            total: v(terms.total),
        })
    }

    /// Every loss term averaged over `samples`.
    pub fn mean_losses(&self, samples: &[Sample]) -> Result<LossValues> {
        let mut m = LossValues::default();
        for s in samples {
            let l = self.sample_losses(s)?;
            m.joint_int += l.joint_int;
            m.mesh += l.mesh;
            m.joint += l.joint;
            m.normal += l.normal;
            m.edge += l.edge;
            m.total += l.total;
        }
        let n = samples.len().max(1) as f64;
        for x in [
            &mut m.joint_int,
            &mut m.mesh,
            &mut m.joint,
            &mut m.normal,
            &mut m.edge,
            &mut m.total,
        ] {
            *x /= n;
        }
        Ok(m)
    }

    /// Mean stage loss over `samples` at the current parameters.
    pub fn mean_loss(&self, samples: &[Sample]) -> Result<f64> {
        let mut sum = 0.0;
        for s in samples {
            let mut g = Graph::with_params(&self.store);
            let loss = self.stage_loss(&mut g, s)?;
            sum += g.value(loss).item();
        }
        Ok(sum / samples.len().max(1) as f64)
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<StepLog> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let batch = batch_indices(self.config.seed, self.step, self.config.batch_size, samples.len());
        let mut buffer = GradBuffer::new(&self.store);
        let mut loss = 0.0;
        for &i in &batch {
            let (value, grads) = self.sample_grads(&samples[i])?;
            loss += value;
            buffer.accumulate(&grads, |id| self.is_trainable(self.store.name(id)));
        }
        let scale = 1.0 / batch.len() as f64;
        buffer.scale(scale);
        let grad_norm = buffer.clip(self.config.grad_clip);
        let total = self.planned_steps(samples.len());
        let lr = self.config.schedule.rate(self.config.learning_rate, self.step, total);
        self.optimizer.update(&mut self.store, &buffer, lr)?;
        let log = StepLog {
            step: self.step,
            loss: loss * scale,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    /// Train until `until` steps are complete, reporting every step.
    pub fn run(&mut self, samples: &[Sample], until: u64, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut curve = Vec::new();
        while self.step < until {
            let log = self.train_step(samples)?;
            on_step(&log);
            curve.push(log);
        }
        Ok(curve)
    }

    pub fn samples(&self, clips: &[MotionClip]) -> Result<Vec<Sample>> {
        check_clips(&self.config, clips)?;
        build_samples(clips, self.config.frames, self.config.zero_features, &self.topology)
    }

    pub fn predict(&self, input: &WindowInput) -> Result<Prediction> {
        self.model.predict(&self.store, input)
    }

    /// Sliding-window metrics of the output pose and mesh on every clip.
    pub fn evaluate(&self, clips: &[MotionClip]) -> Result<Evaluation> {
        check_clips(&self.config, clips)?;
        evaluate_with(clips, self.config.frames, self.config.fps, |clip, start| {
            let input = window_input(clip, start, self.config.frames, self.config.zero_features)?;
            let p = self.predict(&input)?;
            Ok((p.pose, p.mesh))
        })
    }
}

fn check_clips(config: &TrainConfig, clips: &[MotionClip]) -> Result<()> {
    let joints = config.body.joints;
    let vertices = config.body.vertex_count();
    for (i, c) in clips.iter().enumerate() {
        if c.joint_count() != joints || c.vertex_count() != vertices || c.feature_dim() != config.feature_dim {
            return Err(Error::shape(
                "dataset",
                format!(
                    "clip {i} has J={}, V={}, D_f={}; model expects J={joints}, V={vertices}, D_f={}",
                    c.joint_count(),
                    c.vertex_count(),
                    c.feature_dim(),
                    config.feature_dim
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// One entry per clip; `None` for clips shorter than the window.
    pub clips: Vec<Option<EvaluationReport>>,
    pub aggregate: Option<EvaluationReport>,
}

impl Evaluation {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.clips.iter().enumerate() {
            match r {
                Some(r) => {
                    s.push_str(&format!("[clip {i}]\n"));
                    s.push_str(&r.to_text());
                }
                None => s.push_str(&format!("[clip {i}]\nskipped = true\n")),
            }
        }
        if let Some(a) = &self.aggregate {
            s.push_str("[aggregate]\n");
            s.push_str(&a.to_text());
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "clips": self.clips.iter().map(|r| r.as_ref().map(|r| r.to_json())).collect::<Vec<_>>(),
            "aggregate": self.aggregate.as_ref().map(|r| r.to_json()),
        })
    }
}

/// Slide a window over each clip and score `predict(clip, start)`, which
/// returns the mid-frame pose and mesh.
pub fn evaluate_with<F>(clips: &[MotionClip], frames: usize, fps: f64, mut predict: F) -> Result<Evaluation>
where
    F: FnMut(&MotionClip, usize) -> Result<(Tensor, Tensor)>,
{
    let mut reports = Vec::with_capacity(clips.len());
    for (c, clip) in clips.iter().enumerate() {
        if clip.frames() < frames {
            log::warn!("clip {c} has {} frames, fewer than the window of {frames}; skipped", clip.frames());
            reports.push(None);
            continue;
        }
        let (mut poses, mut meshes, mut gt_poses, mut gt_meshes) = (vec![], vec![], vec![], vec![]);
        for start in 0..=clip.frames() - frames {
            let (p, m) = predict(clip, start)?;
            let frame = start + mid_frame(frames);
            poses.push(p);
            meshes.push(m);
            gt_poses.push(clip.target_joints(frame));
            gt_meshes.push(clip.target_mesh(frame));
        }
        let pred = Sequence {
            poses: &poses,
            meshes: &meshes,
        };
        let gt = Sequence {
            poses: &gt_poses,
            meshes: &gt_meshes,
        };
        reports.push(Some(EvaluationReport::evaluate(pred, gt, fps)?));
    }
    let present: Vec<EvaluationReport> = reports.iter().flatten().cloned().collect();
    Ok(Evaluation {
        aggregate: EvaluationReport::aggregate(&present),
        clips: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::synth::Generator;

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::preset(Preset::Toy);
        c.pose_dim = 16;
        c.pose_layers = 1;
        c.decoder_dim = 16;
        c.decoder_layers = 1;
        c.feature_dim = 8;
        c.heads = 2;
        c.mlp_ratio = 2;
        c.batch_size = 2;
        c.learning_rate = 1e-2;
        c.clip_frames = 10;
        c
    }

    fn clips(c: &TrainConfig, n: usize) -> Vec<MotionClip> {
        Generator::new(c.synth()).unwrap().clips(11, n).unwrap()
    }

    #[test]
    fn windows_cover_each_clip() {
        let c = small_config();
        let t = Trainer::new(c.clone()).unwrap();
        let data = clips(&c, 2);
        let s = t.samples(&data).unwrap();
        assert_eq!(s.len(), 2 * (10 - 8 + 1));
        let last = s.last().unwrap();
        assert_eq!((last.clip, last.start), (1, 2));
        assert_eq!(last.joints, data[1].target_joints(2 + 4));
        assert_eq!(last.input.pose_2d.shape(), &[8, 12, 2]);
    }

    #[test]
    fn zero_features_flag() {
        let c = small_config();
        let data = clips(&c, 1);
        let w = window_input(&data[0], 1, 8, true).unwrap();
        assert!(w.features.data().iter().all(|&x| x == 0.0));
        let w = window_input(&data[0], 1, 8, false).unwrap();
        assert_eq!(w.features.data(), &data[0].features.data()[8..8 * 9]);
    }

    #[test]
    fn batches_are_epoch_permutations() {
        let n = 7;
        let mut seen = Vec::new();
        for step in 0..7 {
            seen.extend(batch_indices(3, step, 3, n));
        }
        for epoch in seen.chunks(n).take(3) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(batch_indices(3, 4, 3, n), batch_indices(3, 4, 3, n));
        assert_ne!(
            (0..5).flat_map(|s| batch_indices(3, s, 3, n)).collect::<Vec<_>>(),
            (0..5).flat_map(|s| batch_indices(4, s, 3, n)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn stage1_first_loss_is_mean_target_distance() {
        let c = small_config();
        let mut t = Trainer::new(c.clone()).unwrap();
        let s = t.samples(&clips(&c, 2)).unwrap();
        let batch = batch_indices(c.seed, 0, c.batch_size, s.len());
        // untrained head outputs zero, so the loss is the mean L1 norm of the targets
        let want: f64 = batch
            .iter()
            .map(|&i| {
                let j = &s[i].joints;
                let rows = j.shape()[0];
                (0..rows).map(|r| j.row(r).iter().map(|x| x.abs()).sum::<f64>()).sum::<f64>() / rows as f64
            })
            .sum::<f64>()
            / batch.len() as f64;
        let log = t.train_step(&s).unwrap();
        assert!((log.loss - want).abs() < 1e-12, "{} vs {want}", log.loss);
    }

    #[test]
    fn stage1_touches_only_the_pose_stream() {
        let c = small_config();
        let mut t = Trainer::new(c.clone()).unwrap();
        let before = t.store.clone();
        let s = t.samples(&clips(&c, 1)).unwrap();
        t.run(&s, 3, |_| {}).unwrap();
        for (id, name, p) in t.store.iter() {
            assert_eq!(before.get(id) != p, name.starts_with(POSE_PREFIX), "{name}");
        }
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut c = small_config().for_stage(2);
        c.weights.mesh = 0.0;
        c.weights.joint = 0.0;
        c.weights.normal = 0.0;
        c.weights.edge = 0.0;
        let mut t = Trainer::new(c.clone()).unwrap();
        t.store.perturb(1, 0.05);
        let before = t.store.clone();
        let s = t.samples(&clips(&c, 1)).unwrap();
        t.run(&s, 2, |_| {}).unwrap();
        for (id, name, p) in t.store.iter() {
            assert_eq!(before.get(id), p, "{name}");
        }
    }

    #[test]
    fn resume_continues_bit_identically() {
        let c = small_config();
        let data = clips(&c, 2);
        let mut full = Trainer::new(c.clone()).unwrap();
        let s = full.samples(&data).unwrap();
        let curve = full.run(&s, 6, |_| {}).unwrap();

        let mut half = Trainer::new(c.clone()).unwrap();
        half.run(&s, 3, |_| {}).unwrap();
        let bytes = half.checkpoint().encode();
        let ck = Checkpoint::decode(&bytes, "mem").unwrap();
        let mut resumed = Trainer::resume(c, &ck).unwrap();
        let rest = resumed.run(&s, 6, |_| {}).unwrap();
        assert_eq!(&curve[3..], &rest[..]);
        for (id, _, p) in full.store.iter() {
            assert_eq!(resumed.store.get(id), p);
        }
    }

    #[test]
    fn stage2_starts_from_stage1_pose() {
        let c = small_config();
        let data = clips(&c, 1);
        let mut s1 = Trainer::new(c.clone()).unwrap();
        let s = s1.samples(&data).unwrap();
        s1.run(&s, 3, |_| {}).unwrap();
        let ck = s1.checkpoint();
        let mut c2 = c.for_stage(2);
        c2.seed = 99;
        let s2 = Trainer::from_stage1(c2, &ck).unwrap();
        assert_eq!(s2.optimizer.step, 0);
        let a = s1.predict(&s[0].input).unwrap();
        let b = s2.predict(&s[0].input).unwrap();
        assert_eq!(a.initial_pose, b.initial_pose);
    }

    #[test]
    fn ground_truth_predictions_score_zero() {
        let c = small_config();
        let data = clips(&c, 2);
        let e = evaluate_with(&data, 8, 30.0, |clip, start| {
            let f = start + mid_frame(8);
            Ok((clip.target_joints(f), clip.target_mesh(f)))
        })
        .unwrap();
        let a = e.aggregate.unwrap();
        assert_eq!((a.mpjpe, a.pve, a.accel), (0.0, 0.0, Some(0.0)));
        assert!(a.pa_mpjpe < 1e-8);
        assert_eq!(a.frames, 6);
    }

    #[test]
    fn short_clips_are_skipped() {
        let c = small_config();
        let mut data = clips(&c, 2);
        let mut short = small_config();
        short.clip_frames = 5;
        data.insert(1, clips(&short, 1).remove(0));
        let t = Trainer::new(c).unwrap();
        let e = t.evaluate(&data).unwrap();
        assert!(e.clips[1].is_none());
        assert!(e.clips[0].is_some() && e.clips[2].is_some());
        let e2 = t.evaluate(&data).unwrap();
        assert_eq!(e, e2);
    }
}
