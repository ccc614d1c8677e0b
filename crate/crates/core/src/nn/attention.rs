use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d)·V` over the last two axes.
/// Returns the output and the attention weights `[.., n, m]`.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    let ok = sq.len() >= 2
        && sq.len() == sk.len()
        && sk.len() == sv.len()
        && sq[sq.len() - 1] == sk[sk.len() - 1]
        && sk[sk.len() - 2] == sv[sv.len() - 2];
    if !ok {
        return Err(Error::shape("attention", format!("incompatible q {sq:?}, k {sk:?}, v {sv:?}")));
    }
    let d = sq[sq.len() - 1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.mul_scalar(scores, 1.0 / (d as f64).sqrt())?;
    let axis = g.rank(scores) - 1;
    let weights = g.softmax(scores, axis)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention with bias-free query, key, value and output
/// projections, all `dim × dim`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model dimension {dim} is not divisible by {heads} heads")));
        }
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), init.xavier(dim, dim));
        Ok(MultiHeadAttention {
            query: proj("q"),
            key: proj("k"),
            value: proj("v"),
            output: proj("o"),
            dim,
            heads,
        })
    }

    /// Self attention over the second-to-last axis.
    pub fn msa(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.mca(g, x, x)
    }

    /// Cross attention: queries from `x` `[.., n, d]`, keys and values from
    /// `y` `[.., m, d]`.
    pub fn mca(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
        self.mca_with_weights(g, x, y).map(|(out, _)| out)
    }

    /// As [`Self::mca`], also returning the per-head weights `[.., h, n, m]`.
    pub fn mca_with_weights(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Result<(Var, Var)> {
        let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
        let r = sx.len();
        if r < 2 || sy.len() != r || sx[..r - 2] != sy[..r - 2] || sx[r - 1] != self.dim || sy[r - 1] != self.dim {
            return Err(Error::shape(
                "multi_head_attention",
                format!("queries {sx:?} and keys {sy:?} for model dimension {}", self.dim),
            ));
        }
        let wq = g.param(self.query)?;
        let wk = g.param(self.key)?;
        let wv = g.param(self.value)?;
        let wo = g.param(self.output)?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(y, wk)?;
        let v = g.matmul(y, wv)?;
        let q = self.split(g, q)?;
        let k = self.split(g, k)?;
        let v = self.split(g, v)?;
        let (heads, weights) = attention(g, q, k, v)?;
        let merged = self.merge(g, heads)?;
        let out = g.matmul(merged, wo)?;
        Ok((out, weights))
    }

    /// `[.., n, d]` → `[.., h, n, d/h]`
    fn split(&self, g: &mut Graph<'_>, t: Var) -> Result<Var> {
        let mut shape = g.shape(t).to_vec();
        let r = shape.len();
        shape.pop();
        shape.extend([self.heads, self.dim / self.heads]);
        let t = g.reshape(t, &shape)?;
        g.permute(t, &head_swap(r + 1))
    }

    /// `[.., h, n, d/h]` → `[.., n, d]`
    fn merge(&self, g: &mut Graph<'_>, t: Var) -> Result<Var> {
        let r = g.rank(t);
        let t = g.permute(t, &head_swap(r))?;
        let mut shape = g.shape(t)[..r - 2].to_vec();
        shape.push(self.dim);
        g.reshape(t, &shape)
    }
}

/// Permutation swapping the token and head axes of a rank-`r` tensor whose
/// last axis is the per-head feature.
fn head_swap(r: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_inputs, GradCheckOptions, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    type Rows = Vec<Vec<f64>>;

    fn rows(t: &Tensor) -> Rows {
        let cols = *t.shape().last().unwrap();
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    fn matmul(a: &Rows, b: &Rows) -> Rows {
        a.iter()
            .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    /// Plain-loop reference attention.
    fn scalar_attention(q: &Rows, k: &Rows, v: &Rows) -> Rows {
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

    /// Plain-loop reference multi-head cross attention.
    fn scalar_mca(x: &Rows, y: &Rows, wq: &Rows, wk: &Rows, wv: &Rows, wo: &Rows, heads: usize) -> Rows {
        let (q, k, v) = (matmul(x, wq), matmul(y, wk), matmul(y, wv));
        let dh = q[0].len() / heads;
        let cols = |m: &Rows, h: usize| -> Rows { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
        let mut cat = vec![Vec::new(); x.len()];
        for h in 0..heads {
            let o = scalar_attention(&cols(&q, h), &cols(&k, h), &cols(&v, h));
            for (c, r) in cat.iter_mut().zip(o) {
                c.extend(r);
            }
        }
        matmul(&cat, wo)
    }

    fn assert_close(got: &Tensor, want: &Rows, tol: f64) {
        for (g, w) in rows(got).iter().zip(want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < tol, "{a} vs {b}");
            }
        }
    }

    fn mha(dim: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut store, &mut Init::new(seed), "att", dim, heads).unwrap();
        (store, m)
    }

    fn weights(store: &ParamStore, m: &MultiHeadAttention) -> [Rows; 4] {
        [m.query, m.key, m.value, m.output].map(|id| rows(store.get(id)))
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, &[1, 3])).unwrap();
        let k = g.constant(random(&mut rng, &[1, 3])).unwrap();
        let v = g.constant(random(&mut rng, &[1, 3])).unwrap();
        let (out, _) = attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, &[4, 3])).unwrap();
        let row = random(&mut rng, &[1, 3]);
        let k = g.constant(Tensor::from_fn([5, 3], |i| row.data()[i % 3])).unwrap();
        let vt = random(&mut rng, &[5, 2]);
        let v = g.constant(vt.clone()).unwrap();
        let (out, _) = attention(&mut g, q, k, v).unwrap();
        for r in rows(g.value(out)) {
            for c in 0..2 {
                let mean: f64 = (0..5).map(|i| vt.at(&[i, c])).sum::<f64>() / 5.0;
                assert!((r[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_matches_scalar_reference() {
        let q = Tensor::new([2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let k = Tensor::new([2, 2], vec![-0.5, 0.9, 0.4, 0.4]).unwrap();
        let v = Tensor::new([2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()).unwrap(),
            g.constant(k.clone()).unwrap(),
            g.constant(v.clone()).unwrap(),
        );
        let (out, _) = attention(&mut g, qv, kv, vv).unwrap();
        assert_close(g.value(out), &scalar_attention(&rows(&q), &rows(&k), &rows(&v)), 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros([2, 3])).unwrap();
        let k = g.constant(Tensor::zeros([2, 4])).unwrap();
        assert!(attention(&mut g, q, k, k).is_err());
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, &mut Init::new(0), "a", 6, 4).is_err());
    }

    #[test]
    fn one_head_is_plain_attention() {
        let (store, m) = mha(4, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[3, 4]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x).unwrap();
        let out = m.msa(&mut g, xv).unwrap();
        let (wq, wk, wv, wo) = (
            g.param(m.query).unwrap(),
            g.param(m.key).unwrap(),
            g.param(m.value).unwrap(),
            g.param(m.output).unwrap(),
        );
        let q = g.matmul(xv, wq).unwrap();
        let k = g.matmul(xv, wk).unwrap();
        let v = g.matmul(xv, wv).unwrap();
        let (a, _) = attention(&mut g, q, k, v).unwrap();
        let direct = g.matmul(a, wo).unwrap();
        assert_eq!(g.value(out).data(), g.value(direct).data());
    }

    #[test]
    fn zero_query_projection_gives_identical_rows() {
        let (mut store, m) = mha(4, 2, 5);
        store.fill(m.query, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::with_params(&store);
        let x = g.constant(random(&mut rng, &[3, 4])).unwrap();
        let out = m.msa(&mut g, x).unwrap();
        let r = rows(g.value(out));
        for row in &r[1..] {
            for (a, b) in row.iter().zip(&r[0]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn msa_two_heads_matches_scalar_reference() {
        let (store, m) = mha(4, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[3, 4]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone()).unwrap();
        let out = m.msa(&mut g, xv).unwrap();
        let [wq, wk, wv, wo] = weights(&store, &m);
        let want = scalar_mca(&rows(&x), &rows(&x), &wq, &wk, &wv, &wo, 2);
        assert_close(g.value(out), &want, 1e-13);
    }

    #[test]
    fn mca_matches_scalar_reference() {
        let (store, m) = mha(4, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, &[2, 4]);
        let y = random(&mut rng, &[3, 4]);
        let mut g = Graph::with_params(&store);
        let (xv, yv) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
        let out = m.mca(&mut g, xv, yv).unwrap();
        assert_eq!(g.shape(out), &[2, 4]);
        let [wq, wk, wv, wo] = weights(&store, &m);
        let want = scalar_mca(&rows(&x), &rows(&y), &wq, &wk, &wv, &wo, 2);
        assert_close(g.value(out), &want, 1e-13);
    }

    #[test]
    fn mca_with_itself_is_msa_bit_exactly() {
        let (store, m) = mha(8, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, &[2, 5, 8]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone()).unwrap();
        let xc = g.constant(x).unwrap();
        let a = m.msa(&mut g, xv).unwrap();
        let b = m.mca(&mut g, xv, xc).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn single_key_row_projects_through_output() {
        let (store, m) = mha(4, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, &[3, 4]);
        let y = random(&mut rng, &[1, 4]);
        let mut g = Graph::with_params(&store);
        let (xv, yv) = (g.constant(x).unwrap(), g.constant(y.clone()).unwrap());
        let out = m.mca(&mut g, xv, yv).unwrap();
        let [_, _, wv, wo] = weights(&store, &m);
        let want = matmul(&matmul(&rows(&y), &wv), &wo);
        for r in rows(g.value(out)) {
            for (a, b) in r.iter().zip(&want[0]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batched_attention_is_per_batch() {
        let (store, m) = mha(4, 2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&mut rng, &[3, 2, 4]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone()).unwrap();
        let o = m.msa(&mut g, xv).unwrap();
        let out = g.value(o).clone();
        let [wq, wk, wv, wo] = weights(&store, &m);
        for b in 0..3 {
            let xb: Rows = (0..2).map(|i| (0..4).map(|c| x.at(&[b, i, c])).collect()).collect();
            let want = scalar_mca(&xb, &xb, &wq, &wk, &wv, &wo, 2);
            for i in 0..2 {
                for c in 0..4 {
                    assert!((out.at(&[b, i, c]) - want[i][c]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn mca_gradients_match_finite_differences() {
        let (store, m) = mha(4, 2, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random(&mut rng, &[2, 4]);
        let y = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[2, 4]);
        let report = grad_check_inputs(
            &store,
            |g, v| {
                let o = m.mca(g, v[0], v[1])?;
                let wv = g.constant(w.clone())?;
                let p = g.hadamard(o, wv)?;
                g.sum(p)
            },
            &[x, y],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn outputs_stay_in_value_hull(seed in 0u64..500, n in 1usize..5, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let q = g.constant(random(&mut rng, &[n, 3]).map(|v| 4.0 * v)).unwrap();
            let k = g.constant(random(&mut rng, &[m, 3]).map(|v| 4.0 * v)).unwrap();
            let vt = random(&mut rng, &[m, 2]);
            let v = g.constant(vt.clone()).unwrap();
            let (out, w) = attention(&mut g, q, k, v).unwrap();
            for r in rows(g.value(w)) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for r in rows(g.value(out)) {
                for c in 0..2 {
                    let col = (0..m).map(|i| vt.at(&[i, c]));
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(r[c] >= lo - 1e-12 && r[c] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn key_value_order_does_not_matter(seed in 0u64..500, rot in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, &[2, 3]);
            let k = random(&mut rng, &[4, 3]);
            let v = random(&mut rng, &[4, 2]);
            let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
            let shuffle = |t: &Tensor| {
                let c = t.shape()[1];
                Tensor::from_fn(t.shape().to_vec(), |i| t.at(&[perm[i / c], i % c]))
            };
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
            let (a, _) = attention(&mut g, qv, kv, vv).unwrap();
            let (ks, vs) = (g.constant(shuffle(&k)).unwrap(), g.constant(shuffle(&v)).unwrap());
            let (b, _) = attention(&mut g, qv, ks, vs).unwrap();
            prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-14);
        }
    }
}
