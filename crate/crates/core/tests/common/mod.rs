//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain loops over `Vec`s and shares no
//! code with the library beyond its data types.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub struct Gate {
    pub w_alpha: Vec<Vec<f64>>,
    pub b_alpha: Vec<f64>,
    pub w_u: Vec<Vec<f64>>,
    pub b_u: Vec<f64>,
}

/// One alignment layer evaluated entry by entry. Returns the alignment
/// features and the refreshed stream.
#[allow(clippy::too_many_arguments)]
pub fn ra_layer(
    x: &[Vec<f64>],
    x_mask: &[bool],
    y: &[Vec<f64>],
    y_mask: &[bool],
    gamma: f64,
    lambda: f64,
    relu_in_denominator: bool,
    gate: &Gate,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = x.len();
    let m = y.len();
    let d = x[0].len();

    let mut s = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            if x_mask[i] && y_mask[j] {
                s[i][j] = cos(&x[i], &y[j]);
            }
        }
    }

    let mut s_bar = vec![vec![0.0; m]; n];
    for j in 0..m {
        if !y_mask[j] {
            continue;
        }
        let mut sq = 0.0;
        for i in 0..n {
            if x_mask[i] {
                let mut z = s[i][j] + gamma;
                if relu_in_denominator && z < 0.0 {
                    z = 0.0;
                }
                sq += z * z;
            }
        }
        let den = sq.sqrt().max(1e-8);
        for i in 0..n {
            if x_mask[i] {
                let z = s[i][j] + gamma;
                s_bar[i][j] = if z > 0.0 { z / den } else { 0.0 };
            }
        }
    }

    let mut c = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut top = f64::NEG_INFINITY;
        for j in 0..m {
            if y_mask[j] && lambda * s_bar[i][j] > top {
                top = lambda * s_bar[i][j];
            }
        }
        let mut weights = vec![0.0; m];
        let mut total = 0.0;
        for j in 0..m {
            if y_mask[j] {
                weights[j] = (lambda * s_bar[i][j] - top).exp();
                total += weights[j];
            }
        }
        for j in 0..m {
            for t in 0..d {
                c[i][t] += weights[j] / total * y[j][t];
            }
        }
    }

    let mut refreshed = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut xc = x[i].clone();
        xc.extend_from_slice(&c[i]);
        for t in 0..d {
            let mut pa = gate.b_alpha[t];
            let mut pu = gate.b_u[t];
            for k in 0..2 * d {
                pa += xc[k] * gate.w_alpha[k][t];
                pu += xc[k] * gate.w_u[k][t];
            }
            let alpha = 1.0 / (1.0 + (-pa).exp());
            let u = pu.tanh();
            refreshed[i][t] = (1.0 - alpha) * x[i][t] + alpha * u;
        }
    }
    (c, refreshed)
}

/// Clipped n-gram overlap found by matching each hypothesis n-gram to an
/// unused equal reference n-gram.
pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    let grams = |t: &[String]| -> Vec<Vec<String>> {
        if t.len() < n {
            return Vec::new();
        }
        (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
    };
    let h = grams(hyp);
    let r = grams(reference);
    let mut used = vec![false; r.len()];
    let mut overlap = 0usize;
    for g in &h {
        for (k, q) in r.iter().enumerate() {
            if !used[k] && q == g {
                used[k] = true;
                overlap += 1;
                break;
            }
        }
    }
    prf(overlap, h.len(), r.len())
}

pub fn prf(overlap: usize, hyp_total: usize, ref_total: usize) -> (f64, f64, f64) {
    let p = if hyp_total == 0 {
        0.0
    } else {
        overlap as f64 / hyp_total as f64
    };
    let r = if ref_total == 0 {
        0.0
    } else {
        overlap as f64 / ref_total as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len())
            .filter(|i| bits >> i & 1 == 1)
            .map(|i| &a[i])
            .collect();
        if sub.len() <= best {
            continue;
        }
        let mut k = 0;
        for t in b {
            if k < sub.len() && sub[k] == t {
                k += 1;
            }
        }
        if k == sub.len() {
            best = sub.len();
        }
    }
    best
}

pub fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for t in 0..out.len() {
            out[t] += r[t];
        }
    }
    for v in &mut out {
        *v /= rows.len() as f64;
    }
    out
}

/// Returns (average, extrema, greedy).
pub fn relevance(hyp: &[Vec<f64>], reference: &[Vec<f64>]) -> (f64, f64, f64) {
    let extrema = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut out = rows[0].clone();
        for r in &rows[1..] {
            for t in 0..out.len() {
                if r[t].abs() > out[t].abs() {
                    out[t] = r[t];
                }
            }
        }
        out
    };
    let one_way = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for u in a {
            let mut best = f64::NEG_INFINITY;
            for v in b {
                best = best.max(cos(u, v));
            }
            total += best;
        }
        total / a.len() as f64
    };
    (
        cos(&mean(hyp), &mean(reference)),
        cos(&extrema(hyp), &extrema(reference)),
        0.5 * (one_way(hyp, reference) + one_way(reference, hyp)),
    )
}

pub fn m_sim(image_rows: &[Vec<f64>], hyp: &[Vec<f64>]) -> f64 {
    let pooled = mean(image_rows);
    let mut best = f64::NEG_INFINITY;
    for t in hyp {
        best = best.max(cos(&pooled, t));
    }
    best
}

/// Summed contrastive loss of one layer with in-batch negatives.
pub fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..anchors.len() {
        let logits: Vec<f64> = positives
            .iter()
            .map(|p| cos(&anchors[i], p) / tau)
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln() + top;
        total += lse - logits[i];
    }
    total
}
