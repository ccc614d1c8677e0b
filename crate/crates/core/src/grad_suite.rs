//! Finite-difference checks over every layer type and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    grad_check, grad_check_inputs, grad_check_params, GradCheckOptions, GradCheckReport, Graph, Init, ParamStore, Tensor, Var,
};
use crate::body::BodyModel;
use crate::config::TrainConfig;
use crate::decoder::{CoEvoBlock, Decoder, DecoderConfig};
use crate::error::Result;
use crate::feature_stream::{FeatureStream, FeatureStreamConfig, GruCell, Readout};
use crate::losses::{loss_edge, loss_joint, loss_joint_int, loss_mesh, loss_normal, MeshTarget, Topology};
use crate::model::Model;
use crate::nn::{
    Activation, AdaLn, AdaLnConfig, EncoderLayer, EncoderLayerConfig, LayerNorm, Linear, Mlp, MultiHeadAttention, NormPlacement,
};
use crate::pose_stream::{PoseStream, PoseStreamConfig};

/// Outcome of one named check; inputs and parameters are reported apart.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed())
    }

    pub fn probes(&self) -> usize {
        self.entries.iter().map(|e| e.report.probes).sum()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `Σ w ⊙ y` with fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.hadamard(y, w)?;
    g.sum(p)
}

struct Suite {
    opts: GradCheckOptions,
    rng: ChaCha8Rng,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn push(&mut self, name: &str, report: GradCheckReport) {
        log::info!(
            "{name}: max relative error {:.3e} over {} probes",
            report.max_rel_error,
            report.probes
        );
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            report,
        });
    }

    /// Check `layer(inputs)` against both the inputs and the parameters.
    fn layer<F>(&mut self, name: &str, store: &mut ParamStore, inputs: &[&[usize]], out_shape: &[usize], layer: F) -> Result<()>
    where
        F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
    {
        // move zero-initialized parameters off their degenerate start
        store.perturb(self.rng.random(), 0.2);
        let xs: Vec<Tensor> = inputs.iter().map(|s| random(s, &mut self.rng)).collect();
        let w = random(out_shape, &mut self.rng);
        let f = |g: &mut Graph<'_>, v: &[Var]| {
            let y = layer(g, v)?;
            project(g, y, &w)
        };
        let r = grad_check_inputs(store, f, &xs, &self.opts)?;
        self.push(&format!("{name} (inputs)"), r);
        let r = grad_check_params(
            store,
            |g| {
                let v = xs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
                f(g, &v)
            },
            &self.opts,
        )?;
        self.push(&format!("{name} (parameters)"), r);
        Ok(())
    }
}

/// Run every check. `opts.max_probes` bounds the probes per tensor, which
/// matters only for the full model.
pub fn run_suite(config: &TrainConfig, opts: &GradCheckOptions) -> Result<SuiteReport> {
    let layer_opts = GradCheckOptions {
        max_probes: None,
        ..opts.clone()
    };
    let mut s = Suite {
        opts: layer_opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        entries: Vec::new(),
    };
    let mut init = Init::new(opts.seed);
    let act = Activation::Gelu;

    let mut st = ParamStore::new();
    let lin = Linear::new(&mut st, &mut init, "linear", 5, 4, true);
    s.layer("linear", &mut st, &[&[3, 5]], &[3, 4], |g, v| lin.forward(g, v[0]))?;

    let mut st = ParamStore::new();
    let mlp = Mlp::new(&mut st, &mut init, "mlp", 4, 2, act);
    s.layer("mlp", &mut st, &[&[3, 4]], &[3, 4], |g, v| mlp.forward(g, v[0]))?;

    let mut st = ParamStore::new();
    let ln = LayerNorm::new(&mut st, "layer_norm", 6);
    s.layer("layer_norm", &mut st, &[&[3, 6]], &[3, 6], |g, v| ln.forward(g, v[0]))?;

    let mut st = ParamStore::new();
    let ada_cfg = AdaLnConfig {
        depth: 2,
        residual_gain: true,
        activation: act,
    };
    let ada = AdaLn::new(&mut st, &mut init, "ada_ln", 6, 5, &ada_cfg);
    s.layer("ada_ln", &mut st, &[&[3, 6], &[5]], &[3, 6], |g, v| ada.forward(g, v[0], v[1]))?;

    let mut st = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut st, &mut init, "msa", 8, 2)?;
    s.layer("msa", &mut st, &[&[4, 8]], &[4, 8], |g, v| mha.msa(g, v[0]))?;
    s.layer("mca", &mut st, &[&[4, 8], &[3, 8]], &[4, 8], |g, v| mha.mca(g, v[0], v[1]))?;

    for placement in [NormPlacement::Pre, NormPlacement::Post] {
        let mut st = ParamStore::new();
        let cfg = EncoderLayerConfig {
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            activation: act,
            placement,
        };
        let enc = EncoderLayer::new(&mut st, &mut init, "encoder", &cfg)?;
        let name = format!("encoder_layer ({})", placement.name());
        s.layer(&name, &mut st, &[&[2, 3, 8]], &[2, 3, 8], |g, v| enc.forward(g, v[0]))?;
    }

    let mut st = ParamStore::new();
    let gru = GruCell::new(&mut st, &mut init, "gru", 4, 3);
    s.layer("gru_cell", &mut st, &[&[4], &[3]], &[3], |g, v| gru.step(g, v[0], v[1]))?;

    for readout in [Readout::MidFrame, Readout::EndStates] {
        let mut st = ParamStore::new();
        let cfg = FeatureStreamConfig {
            feature_dim: 4,
            hidden: 2,
            readout,
        };
        let fs = FeatureStream::new(&mut st, &mut init, "feature", cfg);
        let name = format!("feature_stream ({})", readout.name());
        s.layer(&name, &mut st, &[&[5, 4]], &[4], |g, v| fs.forward(g, v[0]))?;
    }

    let mut st = ParamStore::new();
    let pcfg = PoseStreamConfig {
        frames: 3,
        joints: 4,
        dim: 8,
        layers: 1,
        heads: 2,
        feature_dim: 6,
        mlp_ratio: 2,
        activation: act,
        placement: NormPlacement::Pre,
    };
    let ps = PoseStream::new(&mut st, &mut init, "pose", pcfg)?;
    s.layer("pose_stream", &mut st, &[&[3, 4, 2], &[3, 6]], &[4, 3], |g, v| {
        ps.forward(g, v[0], v[1])
    })?;

    let dcfg = DecoderConfig {
        joints: 4,
        coarse_vertices: 5,
        vertices: 7,
        dim: 8,
        layers: 1,
        heads: 2,
        feature_dim: 6,
        mlp_ratio: 2,
        activation: act,
        adaln: ada_cfg,
        residual_rank: 2,
    };
    let mut st = ParamStore::new();
    let block = CoEvoBlock::new(&mut st, &mut init, "block", &dcfg)?;
    s.layer("coevo_block (pose tokens)", &mut st, &[&[4, 8], &[5, 8], &[6]], &[4, 8], |g, v| {
        Ok(block.forward(g, v[0], v[1], v[2])?.0)
    })?;
    s.layer("coevo_block (mesh tokens)", &mut st, &[&[4, 8], &[5, 8], &[6]], &[5, 8], |g, v| {
        Ok(block.forward(g, v[0], v[1], v[2])?.1)
    })?;

    let mut st = ParamStore::new();
    let upsample = random(&[7, 5], &mut s.rng);
    let dec = Decoder::new(&mut st, &mut init, "decoder", dcfg, &upsample)?;
    s.layer("decoder", &mut st, &[&[4, 3], &[5, 3], &[6]], &[7, 3], |g, v| {
        Ok(dec.forward(g, v[0], v[1], v[2])?.mesh)
    })?;

    loss_checks(&mut s, config)?;
    model_check(&mut s, config, opts)?;
    Ok(SuiteReport { entries: s.entries })
}

fn loss_checks(s: &mut Suite, config: &TrainConfig) -> Result<()> {
    let body = BodyModel::build(config.body)?;
    let topo = Topology::new(&body.faces);
    let (j, v) = (body.joint_count(), body.vertex_count());
    let gt_mesh = body.template.map(|x| x * 1.1);
    let target = MeshTarget::new(gt_mesh.clone(), &topo)?;
    let offset = random(&[v, 3], &mut s.rng);
    let mesh = gt_mesh.map_indexed(|i, x| x + 0.2 * offset.data()[i]);
    let pose = random(&[j, 3], &mut s.rng);
    let gt_pose = random(&[j, 3], &mut s.rng);
    let reg = body.regressor.clone();
    let opts = s.opts.clone();

    let r = grad_check(
        |g, x| {
            let gt = g.constant(gt_pose.clone())?;
            loss_joint_int(g, x[0], gt)
        },
        std::slice::from_ref(&pose),
        &opts,
    )?;
    s.push("loss_joint_int", r);
    let r = grad_check(
        |g, x| {
            let gt = g.constant(gt_mesh.clone())?;
            loss_mesh(g, x[0], gt)
        },
        std::slice::from_ref(&mesh),
        &opts,
    )?;
    s.push("loss_mesh", r);
    let r = grad_check(
        |g, x| {
            let gt = g.constant(gt_pose.clone())?;
            let r = g.constant(reg.clone())?;
            loss_joint(g, x[0], r, gt)
        },
        std::slice::from_ref(&mesh),
        &opts,
    )?;
    s.push("loss_joint", r);
    let r = grad_check(|g, x| loss_normal(g, x[0], &target, &topo), std::slice::from_ref(&mesh), &opts)?;
    s.push("loss_normal", r);
    let r = grad_check(|g, x| loss_edge(g, x[0], &target, &topo), std::slice::from_ref(&mesh), &opts)?;
    s.push("loss_edge", r);
    Ok(())
}

/// Every parameter tensor of the configured model, through the pose stream,
/// the feature stream and the decoder.
fn model_check(s: &mut Suite, config: &TrainConfig, opts: &GradCheckOptions) -> Result<()> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config.model(), opts.seed)?;
    store.perturb(opts.seed ^ 0xabc, 0.1);
    let c = &model.config;
    let pose_2d = random(&[c.frames, c.body.joints, 2], &mut s.rng);
    let feats = random(&[c.frames, c.feature_dim], &mut s.rng);
    let w_p0 = random(&[c.body.joints, 3], &mut s.rng);
    let w_p = random(&[c.body.joints, 3], &mut s.rng);
    let w_m = random(&[c.body.vertex_count(), 3], &mut s.rng);
    let r = grad_check_params(
        &store,
        |g| {
            let p = g.constant(pose_2d.clone())?;
            let f = g.constant(feats.clone())?;
            let out = model.forward(g, p, f)?;
            let a = project(g, out.initial_pose, &w_p0)?;
            let b = project(g, out.decoded.pose, &w_p)?;
            let m = project(g, out.decoded.mesh, &w_m)?;
            let ab = g.add(a, b)?;
            g.add(ab, m)
        },
        opts,
    )?;
    s.push("full model (parameters)", r);
    Ok(())
}
