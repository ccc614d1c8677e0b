//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator. Entries whose analytic
    /// and numeric values are both below it are compared absolutely.
    pub floor: f64,
    /// Probe at most this many coordinates per tensor (seeded sample).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// One label per checked tensor (input index or parameter name).
    pub labels: Vec<String>,
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    pub probes: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_probes {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut coords = sample(&mut rng, len, k).into_vec();
            coords.sort_unstable();
            coords
        }
        _ => (0..len).collect(),
    }
}

struct Accumulator {
    labels: Vec<String>,
    per_input: Vec<f64>,
    worst: Option<Worst>,
    max: f64,
    probes: usize,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            labels: Vec::new(),
            per_input: Vec::new(),
            worst: None,
            max: 0.0,
            probes: 0,
        }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.probes += 1;
        let slot = &mut self.per_input[input];
        *slot = slot.max(err);
        if err > self.max || self.worst.is_none() {
            self.max = self.max.max(err);
            self.worst = Some(Worst {
                input,
                coord,
                analytic,
                numeric,
            });
        }
    }

    fn finish(self, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            labels: self.labels,
            per_input: self.per_input,
            max_rel_error: self.max,
            worst: self.worst,
            probes: self.probes,
            tolerance,
        }
    }
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compare analytic gradients of scalar `f` with respect to each of
/// `inputs` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    grad_check_inputs(&ParamStore::new(), f, inputs, opts)
}

/// Like [`grad_check`], with `store` bound to every graph so that `f` can
/// use parameterized layers. Only the inputs are probed.
pub fn grad_check_inputs<F>(store: &ParamStore, f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Contract("gradient check step must be positive".into()));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let vars = values.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::with_params(store);
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut acc = Accumulator::new();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        acc.labels.push(format!("input {i}"));
        acc.per_input.push(0.0);
        let analytic = grads.wrt(vars[i]).expect("input leaf has a gradient");
        for c in probe_coords(input.len(), opts, i as u64) {
            let x0 = input.data()[c];
            probe[i].data_mut()[c] = x0 + opts.step;
            let plus = eval(&probe).map_err(|e| probe_error(e, i, c))?;
            probe[i].data_mut()[c] = x0 - opts.step;
            let minus = eval(&probe).map_err(|e| probe_error(e, i, c))?;
            probe[i].data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            acc.record(i, c, analytic.data()[c], numeric, opts.floor);
        }
    }
    Ok(acc.finish(opts.tolerance))
}

/// Gradient check of scalar `f` with respect to every tensor in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Contract("gradient check step must be positive".into()));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };

    let grads = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        scalar_of(&g, out)?;
        g.backward(out)?
    };

    let mut work = store.clone();
    let mut acc = Accumulator::new();
    for (i, id) in store.ids().enumerate() {
        acc.labels.push(store.name(id).to_string());
        acc.per_input.push(0.0);
        let len = store.get(id).len();
        // parameters the function never touched have zero gradient
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        for c in probe_coords(len, opts, i as u64) {
            let x0 = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = x0 + opts.step;
            let plus = eval(&work).map_err(|e| probe_error(e, i, c))?;
            work.get_mut(id).data_mut()[c] = x0 - opts.step;
            let minus = eval(&work).map_err(|e| probe_error(e, i, c))?;
            work.get_mut(id).data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            acc.record(i, c, analytic.data()[c], numeric, opts.floor);
        }
    }
    Ok(acc.finish(opts.tolerance))
}

fn probe_error(e: Error, input: usize, coord: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::ProbeNonFinite { input, coord },
        other => other,
    }
}
