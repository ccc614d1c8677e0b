//! Bidirectional GRU collapsing a per-frame feature sequence into a single
//! temporal feature for the middle frame.

use crate::autodiff::{Graph, Init, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Which recurrent states feed the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Readout {
    /// Both directions' states at frame `⌊T/2⌋`.
    #[default]
    MidFrame,
    /// Forward state after the last frame, backward state after the first.
    EndStates,
}

impl Readout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mid" => Ok(Readout::MidFrame),
            "end" => Ok(Readout::EndStates),
            other => Err(Error::Config(format!("unknown readout {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Readout::MidFrame => "mid",
            Readout::EndStates => "end",
        }
    }
}

/// Zero-based index of the frame a clip of `frames` frames predicts.
pub fn mid_frame(frames: usize) -> usize {
    frames / 2
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureStreamConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub readout: Readout,
}

/// One gate: an input map with bias and a hidden map with bias.
#[derive(Clone, Debug)]
pub struct Gate {
    pub input: Linear,
    pub hidden: Linear,
}

impl Gate {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, h: usize) -> Self {
        Gate {
            input: Linear::new(store, init, &format!("{name}.x"), d_in, h, true),
            hidden: Linear::new(store, init, &format!("{name}.h"), h, h, true),
        }
    }
}

/// `z = σ(·)`, `r = σ(·)`, `ĥ = tanh(x·Wx + b + r ⊙ (h·Wh + b'))`,
/// `h' = (1 − z) ⊙ h + z ⊙ ĥ`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    pub hidden: usize,
}

/// Input-side gate projections for every frame, `[T, H]` each.
struct Projected {
    z: Var,
    r: Var,
    n: Var,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Self {
        GruCell {
            update: Gate::new(store, init, &format!("{name}.update"), d_in, hidden),
            reset: Gate::new(store, init, &format!("{name}.reset"), d_in, hidden),
            candidate: Gate::new(store, init, &format!("{name}.candidate"), d_in, hidden),
            hidden,
        }
    }

    fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<Projected> {
        Ok(Projected {
            z: self.update.input.forward(g, x)?,
            r: self.reset.input.forward(g, x)?,
            n: self.candidate.input.forward(g, x)?,
        })
    }

    /// One step from pre-projected inputs `[1, H]` and state `[1, H]`.
    fn step_projected(&self, g: &mut Graph<'_>, xz: Var, xr: Var, xn: Var, h: Var) -> Result<Var> {
        let hz = self.update.hidden.forward(g, h)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let hr = self.reset.hidden.forward(g, h)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let hn = self.candidate.hidden.forward(g, h)?;
        let gated = g.hadamard(r, hn)?;
        let n = g.add(xn, gated)?;
        let n = g.tanh(n)?;
        // (1 − z)·h + z·n = h + z·(n − h)
        let diff = g.sub(n, h)?;
        let delta = g.hadamard(z, diff)?;
        g.add(h, delta)
    }

    /// `x` `[D]`, `h` `[H]` → `[H]`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Result<Var> {
        if g.shape(h) != [self.hidden] {
            return Err(Error::shape(
                "gru_cell",
                format!("expected state [{}], got {:?}", self.hidden, g.shape(h)),
            ));
        }
        let d = g.shape(x).to_vec();
        let x = g.reshape(x, &[1, d[0]])?;
        let p = self.project(g, x)?;
        let h = g.reshape(h, &[1, self.hidden])?;
        let out = self.step_projected(g, p.z, p.r, p.n, h)?;
        g.reshape(out, &[self.hidden])
    }

    /// States after each frame, visiting frames in `order`.
    fn run(&self, g: &mut Graph<'_>, x: Var, order: impl Iterator<Item = usize>, frames: usize) -> Result<Vec<Var>> {
        let p = self.project(g, x)?;
        let mut h = g.constant(crate::autodiff::Tensor::zeros([1, self.hidden]))?;
        let mut states = vec![h; frames];
        for t in order {
            let xz = g.slice(p.z, 0, t, 1)?;
            let xr = g.slice(p.r, 0, t, 1)?;
            let xn = g.slice(p.n, 0, t, 1)?;
            h = self.step_projected(g, xz, xr, xn, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}

#[derive(Clone, Debug)]
pub struct FeatureStream {
    pub config: FeatureStreamConfig,
    pub forward_cell: GruCell,
    pub backward_cell: GruCell,
    /// `2H → D_f`
    pub output: Linear,
}

impl FeatureStream {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: FeatureStreamConfig) -> Self {
        let FeatureStreamConfig {
            feature_dim: d, hidden: h, ..
        } = config;
        FeatureStream {
            config,
            forward_cell: GruCell::new(store, init, &format!("{name}.fwd"), d, h),
            backward_cell: GruCell::new(store, init, &format!("{name}.bwd"), d, h),
            output: Linear::new(store, init, &format!("{name}.out"), 2 * h, d, true),
        }
    }

    /// The two directional states `[1, H]` selected by the readout.
    pub fn states(&self, g: &mut Graph<'_>, features: Var) -> Result<(Var, Var)> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::shape(
                "feature_stream",
                format!("expected features [T, {}], got {shape:?}", self.config.feature_dim),
            ));
        }
        let t = shape[0];
        let fwd = self.forward_cell.run(g, features, 0..t, t)?;
        let bwd = self.backward_cell.run(g, features, (0..t).rev(), t)?;
        Ok(match self.config.readout {
            Readout::MidFrame => (fwd[mid_frame(t)], bwd[mid_frame(t)]),
            Readout::EndStates => (fwd[t - 1], bwd[0]),
        })
    }

    /// `[T, D_f]` → `[D_f]`
    pub fn forward(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let (hf, hb) = self.states(g, features)?;
        let both = g.concat(&[hf, hb], 1)?;
        let f = self.output.forward(g, both)?;
        g.reshape(f, &[self.config.feature_dim])
    }
}
