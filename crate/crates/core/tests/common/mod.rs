//! Independent reference implementations used as test oracles. Nothing here
//! goes through the autodiff graph.

#![allow(dead_code)]

use genrel_core::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn param(store: &ParamStore, name: &str) -> Mat {
    to_mat(&store.get(name).unwrap().tensor)
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{prefix}.w"));
    let b = &param(store, &format!("{prefix}.b"))[0];
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn mlp(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = relu(&linear(store, &format!("{prefix}.fc1"), x));
    linear(store, &format!("{prefix}.fc2"), &h)
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Mat, eps: f64) -> Mat {
    let gain = &param(store, &format!("{prefix}.gain"))[0];
    let bias = &param(store, &format!("{prefix}.bias"))[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| gain[j] * (v - mean) / sd + bias[j])
                .collect()
        })
        .collect()
}

fn softmax_masked(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(v, &k)| if k { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn attention(store: &ParamStore, prefix: &str, heads: usize, q: &Mat, kv: &Mat, mask: &[bool]) -> Mat {
    let d = q[0].len();
    if !mask.iter().any(|&m| m) {
        return vec![vec![0.0; d]; q.len()];
    }
    let qp = linear(store, &format!("{prefix}.q"), q);
    let kp = linear(store, &format!("{prefix}.k"), kv);
    let vp = linear(store, &format!("{prefix}.v"), kv);
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in qp.iter().enumerate() {
            let logits: Vec<f64> = kp
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax_masked(&logits, mask);
            for c in cols.clone() {
                cat[i][c] = w.iter().zip(&vp).map(|(a, v)| a * v[c]).sum();
            }
        }
    }
    linear(store, &format!("{prefix}.o"), &cat)
}

/// `LN(Q + MHA(Q, K, K; mask))` in eval mode.
pub fn ca(store: &ParamStore, prefix: &str, heads: usize, q: &Mat, kv: &Mat, mask: &[bool]) -> Mat {
    let a = attention(store, &format!("{prefix}.attn"), heads, q, kv, mask);
    let res: Mat = q
        .iter()
        .zip(&a)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect();
    layer_norm(store, &format!("{prefix}.ln"), &res, 1e-5)
}

pub fn pool(h: &Mat, mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let d = h[0].len();
    (0..d)
        .map(|c| h.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r[c]).sum::<f64>() / n)
        .collect()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `P(s+ > s-) + P(tie)/2` by enumerating every positive/negative pair.
pub fn brute_auroc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !pos[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if pos[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Sum over distinct score thresholds `t` (descending) of
/// `(R(t) - R(prev)) * P(t)`, counting from scratch at each threshold.
pub fn brute_ap(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let total_pos = pos.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected = scores.iter().filter(|&&s| s >= t).count();
        let tp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && p).count();
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / selected as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}
