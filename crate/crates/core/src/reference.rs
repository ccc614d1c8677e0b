//! Plain-loop reference implementations used as test oracles.

use crate::autodiff::{ParamId, ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn param_rows(store: &ParamStore, id: ParamId) -> Rows {
    rows(store.get(id))
}

pub fn param_vec(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn add_row(a: &Rows, b: &[f64]) -> Rows {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn map(a: &Rows, f: impl Fn(f64) -> f64) -> Rows {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(x: &Rows, gain: &[f64], shift: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mu = r.iter().sum::<f64>() / d;
            let sd = (r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| gain[i] * (v - mu) / (sd + eps) + shift[i])
                .collect()
        })
        .collect()
}

pub fn attention(q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum())
                .collect()
        })
        .collect()
}

/// Multi-head cross attention with weights `[q, k, v, o]`.
pub fn mca(x: &Rows, y: &Rows, w: &[Rows; 4], heads: usize) -> Rows {
    let (q, k, v) = (matmul(x, &w[0]), matmul(y, &w[1]), matmul(y, &w[2]));
    let dh = q[0].len() / heads;
    let cols = |m: &Rows, h: usize| -> Rows { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
    let mut cat = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let o = attention(&cols(&q, h), &cols(&k, h), &cols(&v, h));
        for (c, r) in cat.iter_mut().zip(o) {
            c.extend(r);
        }
    }
    matmul(&cat, &w[3])
}

pub fn linear(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    add_row(&matmul(x, w), b)
}

pub fn mlp(x: &Rows, w1: &Rows, b1: &[f64], w2: &Rows, b2: &[f64]) -> Rows {
    linear(&map(&linear(x, w1, b1), gelu), w2, b2)
}

pub fn assert_rows_close(got: &Tensor, want: &Rows, tol: f64) {
    let g = rows(got);
    assert_eq!(g.len(), want.len());
    for (a, b) in g.iter().zip(want) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }
}
