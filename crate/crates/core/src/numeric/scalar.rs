//! Straight-line loop implementations used as test oracles. Nothing here
//! touches the tape or the matrix kernels.

use super::matrix::DenseMatrix;
use super::params::ParamStore;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &DenseMatrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Rows {
    rows_of(store.get(store.id(name).unwrap_or_else(|| panic!("no param {name}"))))
}

pub fn linear(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut s = b[j];
                    for k in 0..row.len() {
                        s += row[k] * w[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn linear_named(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    linear(x, &w, &b[0])
}

pub fn layer_norm(x: &Rows, gain: &[f64], bias: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) / (var + eps).sqrt() * gain[k] + bias[k])
                .collect()
        })
        .collect()
}

pub fn layer_norm_named(store: &ParamStore, name: &str, x: &Rows, eps: f64) -> Rows {
    let g = param(store, &format!("{name}.gain"));
    let b = param(store, &format!("{name}.bias"));
    layer_norm(x, &g[0], &b[0], eps)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention from projected q, k, v. Returns output and
/// head-averaged affinity.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize, scale: f64) -> (Rows, Rows) {
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    let mut aff = vec![vec![0.0; k.len()]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| {
                    let mut s = 0.0;
                    for t in h * d..(h + 1) * d {
                        s += q[i][t] * k[j][t];
                    }
                    s * scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.len() {
                let a = e[j] / z;
                aff[i][j] += a / heads as f64;
                for t in h * d..(h + 1) * d {
                    out[i][t] += a * v[j][t];
                }
            }
        }
    }
    (out, aff)
}

pub fn attention_named(
    store: &ParamStore,
    name: &str,
    queries: &Rows,
    keys: &Rows,
    heads: usize,
    scale: f64,
) -> (Rows, Rows) {
    let q = linear_named(store, &format!("{name}.q"), queries);
    let k = linear_named(store, &format!("{name}.k"), keys);
    let v = linear_named(store, &format!("{name}.v"), keys);
    attention(&q, &k, &v, heads, scale)
}

pub fn ffn_named(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let h: Rows = linear_named(store, &format!("{name}.1"), x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear_named(store, &format!("{name}.2"), &h)
}

pub fn max_abs_diff(a: &Rows, b: &DenseMatrix) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b[(i, j)]).abs());
        }
    }
    m
}
