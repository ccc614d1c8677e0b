use super::{Activation, Linear};
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Stabilizer added to the standard deviation.
pub const NORM_EPS: f64 = 1e-6;

/// `(x − μ) / (σ + eps)` over the last axis, biased σ.
pub fn normalize(g: &mut Graph<'_>, x: Var, eps: f64) -> Result<Var> {
    let axis = g.rank(x).checked_sub(1).ok_or_else(|| Error::shape("normalize", "scalar input"))?;
    let mu = g.mean_axis(x, axis)?;
    let centered = g.sub(x, mu)?;
    let sd = g.std_axis(x, axis)?;
    let den = g.add_scalar(sd, eps)?;
    g.div(centered, den)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([dim])),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        check_last(g, x, self.dim, "layer_norm")?;
        let n = normalize(g, x, NORM_EPS)?;
        let a = g.param(self.gain)?;
        let b = g.param(self.shift)?;
        let scaled = g.hadamard(n, a)?;
        g.add(scaled, b)
    }
}

fn check_last(g: &Graph<'_>, x: Var, dim: usize, op: &'static str) -> Result<()> {
    match g.shape(x).last() {
        Some(&d) if d == dim => Ok(()),
        _ => Err(Error::shape(op, format!("expected last axis {dim}, got shape {:?}", g.shape(x)))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaLnConfig {
    /// Number of linear layers in each conditioning map.
    pub depth: usize,
    /// Produce the scale as `1 + map(f)` with the map's last layer starting
    /// at zero, so an untrained layer acts as plain unit-scale normalization.
    pub residual_gain: bool,
    pub activation: Activation,
}

impl Default for AdaLnConfig {
    fn default() -> Self {
        AdaLnConfig {
            depth: 1,
            residual_gain: true,
            activation: Activation::Gelu,
        }
    }
}

/// Stack of linear layers mapping the conditioning feature to `dim` values.
#[derive(Clone, Debug)]
struct Conditioner {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Conditioner {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cond_dim: usize, dim: usize, cfg: &AdaLnConfig, zero_last: bool) -> Self {
        let depth = cfg.depth.max(1);
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let fan_in = if i == 0 { cond_dim } else { dim };
            let lname = format!("{name}.{i}");
            let layer = if i + 1 == depth && zero_last {
                Linear::zeroed(store, &lname, fan_in, dim)
            } else {
                Linear::new(store, init, &lname, fan_in, dim, true)
            };
            layers.push(layer);
        }
        Conditioner {
            layers,
            activation: cfg.activation,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let mut h = f;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.activation.apply(g, h)?;
            }
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Layer normalization whose scale and shift are generated from a
/// conditioning vector.
#[derive(Clone, Debug)]
pub struct AdaLn {
    scale: Conditioner,
    shift: Conditioner,
    residual_gain: bool,
    pub dim: usize,
    pub cond_dim: usize,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, cond_dim: usize, cfg: &AdaLnConfig) -> Self {
        let zero = cfg.residual_gain;
        AdaLn {
            scale: Conditioner::new(store, init, &format!("{name}.scale"), cond_dim, dim, cfg, zero),
            shift: Conditioner::new(store, init, &format!("{name}.shift"), cond_dim, dim, cfg, zero),
            residual_gain: cfg.residual_gain,
            dim,
            cond_dim,
        }
    }

    /// The `(scale, shift)` pair produced for one conditioning vector.
    pub fn modulation(&self, g: &mut Graph<'_>, f: Var) -> Result<(Var, Var)> {
        if g.shape(f) != [self.cond_dim] {
            return Err(Error::shape(
                "ada_ln",
                format!("expected feature [{}], got {:?}", self.cond_dim, g.shape(f)),
            ));
        }
        let mut alpha = self.scale.forward(g, f)?;
        if self.residual_gain {
            alpha = g.add_scalar(alpha, 1.0)?;
        }
        let beta = self.shift.forward(g, f)?;
        Ok((alpha, beta))
    }

    /// Normalize every token of `x` with the single pair derived from `f`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, f: Var) -> Result<Var> {
        check_last(g, x, self.dim, "ada_ln")?;
        let (alpha, beta) = self.modulation(g, f)?;
        let n = normalize(g, x, NORM_EPS)?;
        let scaled = g.hadamard(n, alpha)?;
        g.add(scaled, beta)
    }

    /// Parameter ids of the last layer of each conditioning map, as
    /// `(scale weight, scale bias, shift weight, shift bias)`.
    pub fn output_params(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        let s = self.scale.layers.last().expect("non-empty");
        let t = self.shift.layers.last().expect("non-empty");
        (s.weight, s.bias.expect("bias"), t.weight, t.bias.expect("bias"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_inputs, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn run(f: impl FnOnce(&mut Graph<'_>) -> Var, store: &ParamStore) -> Tensor {
        let mut g = Graph::with_params(store);
        let out = f(&mut g);
        g.value(out).clone()
    }

    #[test]
    fn constant_token_gives_shift() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 3);
        store.get_mut(ln.shift).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let y = run(
            |g| {
                let x = g.constant(Tensor::full([2, 3], 4.0)).unwrap();
                ln.forward(g, x).unwrap()
            },
            &store,
        );
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_one_two_three() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 3);
        let y = run(
            |g| {
                let x = g.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
                ln.forward(g, x).unwrap()
            },
            &store,
        );
        // biased σ = sqrt(2/3)
        let sd = (2.0f64 / 3.0).sqrt();
        let want = [-1.0 / sd, 0.0, 1.0 / sd];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!((y.data()[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn normalized_tokens_have_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[5, 8]);
        let store = ParamStore::new();
        for eps in [0.0, NORM_EPS] {
            let n = run(
                |g| {
                    let v = g.constant(x.clone()).unwrap();
                    normalize(g, v, eps).unwrap()
                },
                &store,
            );
            for t in 0..5 {
                let row = n.row(t);
                let xr = x.row(t);
                let mean = row.iter().sum::<f64>() / 8.0;
                let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
                let xm = xr.iter().sum::<f64>() / 8.0;
                let xs = (xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 8.0).sqrt();
                assert!(mean.abs() < 1e-12);
                // the stabilizer shrinks the spread by σ / (σ + eps)
                assert!((sd - xs / (xs + eps)).abs() < 1e-9, "{sd}");
            }
        }
    }

    #[test]
    fn ada_ln_with_zero_maps_is_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AdaLnConfig {
            residual_gain: false,
            ..AdaLnConfig::default()
        };
        let mut store = ParamStore::new();
        let ada = AdaLn::new(&mut store, &mut Init::new(3), "ada", 4, 6, &cfg);
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let a = random(&mut rng, &[4]);
        let b = random(&mut rng, &[4]);
        let (sw, sb, tw, tb) = ada.output_params();
        store.fill(sw, 0.0);
        store.fill(tw, 0.0);
        *store.get_mut(sb) = a.clone();
        *store.get_mut(tb) = b.clone();
        *store.get_mut(ln.gain) = a;
        *store.get_mut(ln.shift) = b;
        for _ in 0..20 {
            let x = random(&mut rng, &[3, 4]);
            let f = random(&mut rng, &[6]);
            let out = run(
                |g| {
                    let xv = g.constant(x.clone()).unwrap();
                    let fv = g.constant(f.clone()).unwrap();
                    let y1 = ada.forward(g, xv, fv).unwrap();
                    let y2 = ln.forward(g, xv).unwrap();
                    g.sub(y1, y2).unwrap()
                },
                &store,
            );
            assert!(out.data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn residual_gain_starts_as_unit_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ada = AdaLn::new(&mut store, &mut Init::new(5), "ada", 4, 6, &AdaLnConfig::default());
        let x = random(&mut rng, &[2, 4]);
        let f = random(&mut rng, &[6]);
        let d = run(
            |g| {
                let xv = g.constant(x.clone()).unwrap();
                let fv = g.constant(f.clone()).unwrap();
                let y = ada.forward(g, xv, fv).unwrap();
                let n = normalize(g, xv, NORM_EPS).unwrap();
                g.sub(y, n).unwrap()
            },
            &store,
        );
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_features_differ_by_their_affine_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let ada = AdaLn::new(&mut store, &mut Init::new(7), "ada", 5, 3, &AdaLnConfig::default());
        store.perturb(8, 0.3);
        let x = random(&mut rng, &[4, 5]);
        let f1 = random(&mut rng, &[3]);
        let f2 = random(&mut rng, &[3]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x).unwrap();
        let v1 = g.constant(f1).unwrap();
        let v2 = g.constant(f2).unwrap();
        let y1 = ada.forward(&mut g, xv, v1).unwrap();
        let y2 = ada.forward(&mut g, xv, v2).unwrap();
        let (a1, b1) = ada.modulation(&mut g, v1).unwrap();
        let (a2, b2) = ada.modulation(&mut g, v2).unwrap();
        // y2 = (y1 − b1) · a2 / a1 + b2
        let (y1, y2) = (g.value(y1).clone(), g.value(y2).clone());
        let (a1, b1, a2, b2) = (g.value(a1).clone(), g.value(b1).clone(), g.value(a2).clone(), g.value(b2).clone());
        for t in 0..4 {
            for c in 0..5 {
                let i = t * 5 + c;
                let pred = (y1.data()[i] - b1.data()[c]) * a2.data()[c] / a1.data()[c] + b2.data()[c];
                assert!((pred - y2.data()[i]).abs() < 1e-10);
            }
        }
        assert!(y1.max_abs_diff(&y2) > 1e-3);
    }

    #[test]
    fn ada_ln_gradient_wrt_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = AdaLnConfig {
            depth: 2,
            ..AdaLnConfig::default()
        };
        let ada = AdaLn::new(&mut store, &mut Init::new(10), "ada", 4, 3, &cfg);
        store.perturb(11, 0.3);
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[3, 4]);
        let f = random(&mut rng, &[3]);
        let report = grad_check_inputs(
            &store,
            |g, v| {
                let xv = g.constant(x.clone())?;
                let wv = g.constant(w.clone())?;
                let y = ada.forward(g, xv, v[0])?;
                let p = g.hadamard(y, wv)?;
                g.sum(p)
            },
            &[f],
            &GradCheckOptions {
                tolerance: 1e-5,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
