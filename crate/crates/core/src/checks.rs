//! Finite-difference gradient checks over every differentiable stage of the
//! model, on random small instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{info_nce, nll, pool, regularizer_on_tape, PoolKind, PooledVector};
use crate::model::{Icaf, ModelConfig};
use crate::numerics::{grad_check, Tape, Tensor, Var};
use crate::ra_layer::{
    cam_attend, cam_normalize, cam_similarity, ram_gate, AlignSettings, AlignmentFeatures,
    GateParams, SimilarityMatrix,
};
use crate::representation::{FragmentFeatures, Modality, TokenSequence, SOS};
use crate::rng;

/// Result of checking one operation on several instances.
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const OPS: [&str; 11] = [
    "cam_similarity",
    "cam_normalize",
    "cam_attend",
    "ram_gate",
    "encoder",
    "decoder",
    "pool_mean",
    "pool_max",
    "info_nce",
    "nll",
    "total_loss",
];

/// Entries of `shape` drawn uniformly from `[lo, hi)`.
fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("positive extents")
}

/// Contracts any tensor to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct amount.
fn contract(tape: &mut Tape, v: Var, r: &mut ChaCha8Rng) -> Result<Var> {
    let w = uniform(r, tape.shape(v), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn mask_with_one_off(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut mask = vec![true; n];
    if n > 1 && r.random_bool(0.5) {
        mask[n - 1] = false;
    }
    mask
}

fn frags(rows: Var, mask: &[bool], modality: Modality) -> FragmentFeatures {
    FragmentFeatures {
        rows,
        mask: mask.to_vec(),
        modality,
    }
}

fn gate_of(v: &[Var]) -> GateParams {
    GateParams {
        w_alpha: v[0],
        b_alpha: v[1],
        w_u: v[2],
        b_u: v[3],
    }
}

fn check_instance(op: &str, r: &mut ChaCha8Rng, tol: f64) -> Result<f64> {
    let n = r.random_range(2..=4);
    let m = r.random_range(2..=4);
    let d = r.random_range(2..=4);
    let row_mask = mask_with_one_off(r, n);
    let col_mask = mask_with_one_off(r, m);
    let settings = AlignSettings::default();
    let seed: u64 = r.random();
    let out_rng = move || rng::stream(seed, "contract", 0);

    let report = match op {
        "cam_similarity" => {
            let inputs = [
                uniform(r, &[n, d], -1.0, 1.0),
                uniform(r, &[m, d], -1.0, 1.0),
            ];
            grad_check(
                |t, v| {
                    let s = cam_similarity(
                        t,
                        &frags(v[0], &row_mask, Modality::Text),
                        &frags(v[1], &col_mask, Modality::Image),
                    )?;
                    let keep: Vec<bool> = (0..n * m)
                        .map(|k| row_mask[k / m] && col_mask[k % m])
                        .collect();
                    let s = t.mask_fill(s.values, &keep, 0.0)?;
                    contract(t, s, &mut out_rng())
                },
                &inputs,
                tol,
            )?
        }
        "cam_normalize" => {
            // Keep s + γ away from the relu kink.
            let data = (0..n * m)
                .map(|_| {
                    let mag = r.random_range(0.05..0.9);
                    (if r.random_bool(0.5) { mag } else { -mag }) - settings.gamma
                })
                .collect();
            let inputs = [Tensor::new(vec![n, m], data)?];
            let relu_den = r.random_bool(0.5);
            grad_check(
                |t, v| {
                    let s = SimilarityMatrix {
                        values: v[0],
                        row_mask: row_mask.clone(),
                        col_mask: col_mask.clone(),
                        normalized: false,
                    };
                    let out = cam_normalize(t, &s, settings.gamma, relu_den)?;
                    let keep: Vec<bool> = (0..n * m)
                        .map(|k| row_mask[k / m] && col_mask[k % m])
                        .collect();
                    let out = t.mask_fill(out.values, &keep, 0.0)?;
                    contract(t, out, &mut out_rng())
                },
                &inputs,
                tol,
            )?
        }
        "cam_attend" => {
            let inputs = [
                uniform(r, &[n, m], -1.0, 1.0),
                uniform(r, &[m, d], -1.0, 1.0),
            ];
            grad_check(
                |t, v| {
                    let s = SimilarityMatrix {
                        values: v[0],
                        row_mask: row_mask.clone(),
                        col_mask: col_mask.clone(),
                        normalized: true,
                    };
                    let c = cam_attend(
                        t,
                        &s,
                        &frags(v[1], &col_mask, Modality::Image),
                        settings.lambda,
                    )?;
                    contract(t, c.rows, &mut out_rng())
                },
                &inputs,
                tol,
            )?
        }
        "ram_gate" => {
            let inputs = [
                uniform(r, &[n, d], -1.0, 1.0),
                uniform(r, &[n, d], -1.0, 1.0),
                uniform(r, &[2 * d, d], -0.5, 0.5),
                uniform(r, &[d], -0.5, 0.5),
                uniform(r, &[2 * d, d], -0.5, 0.5),
                uniform(r, &[d], -0.5, 0.5),
            ];
            grad_check(
                |t, v| {
                    let c = AlignmentFeatures {
                        rows: v[1],
                        attention: v[1],
                        mask: row_mask.clone(),
                    };
                    let out = ram_gate(
                        t,
                        &frags(v[0], &row_mask, Modality::Text),
                        &c,
                        &gate_of(&v[2..6]),
                        None,
                    )?;
                    contract(t, out.rows, &mut out_rng())
                },
                &inputs,
                tol,
            )?
        }
        "encoder" => {
            let cfg = ModelConfig {
                d_model: 4,
                layers: 2,
                decoder_layers: 1,
                heads: 2,
                ffn_dim: 4,
                vocab_size: 8,
                channels: 1,
                height: 2,
                width: 2,
                patch_size: 1,
                dropout: 0.0,
                ..ModelConfig::default()
            };
            let mut model = Icaf::new(cfg, seed)?;
            for p in model.params.iter_mut() {
                if p.name.contains("w_") {
                    p.value = uniform(r, p.value.shape(), -0.5, 0.5);
                }
            }
            let inputs = [
                uniform(r, &[n, 4], -1.0, 1.0),
                uniform(r, &[m, 4], -1.0, 1.0),
            ];
            grad_check(
                |t, v| {
                    let enc = model.encode(
                        t,
                        &frags(v[0], &row_mask, Modality::Text),
                        &frags(v[1], &col_mask, Modality::Image),
                    )?;
                    let mut parts = Vec::new();
                    let mut c = out_rng();
                    for k in 0..enc.layers() {
                        parts.push(contract(t, enc.text_alignments[k].rows, &mut c)?);
                        parts.push(contract(t, enc.image_alignments[k].rows, &mut c)?);
                        parts.push(contract(t, enc.text_states[k].rows, &mut c)?);
                        parts.push(contract(t, enc.image_states[k].rows, &mut c)?);
                    }
                    t.add_all(&parts)
                },
                &inputs,
                tol,
            )?
        }
        "decoder" => {
            let cfg = ModelConfig {
                d_model: 4,
                layers: 1,
                decoder_layers: 1,
                heads: 2,
                ffn_dim: 6,
                vocab_size: 8,
                channels: 1,
                height: 2,
                width: 2,
                patch_size: 1,
                dropout: 0.0,
                ..ModelConfig::default()
            };
            let mut model = Icaf::new(cfg, seed)?;
            for p in model.params.iter_mut() {
                if p.name.starts_with("decoder") && p.value.rank() == 2 {
                    p.value = uniform(r, p.value.shape(), -0.7, 0.7);
                }
            }
            let len = r.random_range(1..=3);
            let mut ids = vec![SOS];
            ids.extend((0..len).map(|_| r.random_range(4..8)));
            let inputs = [uniform(r, &[n, 4], -1.0, 1.0)];
            grad_check(
                |t, v| {
                    let memory = frags(v[0], &row_mask, Modality::Text);
                    let logits = model.decoder_logits(t, &memory, &ids)?;
                    contract(t, logits, &mut out_rng())
                },
                &inputs,
                tol,
            )?
        }
        "pool_mean" | "pool_max" => {
            let kind = if op == "pool_mean" {
                PoolKind::Mean
            } else {
                PoolKind::Max
            };
            // Distinct values keep the max away from ties.
            let mut vals: Vec<f64> = (0..n * d).map(|k| k as f64 * 0.1).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(r);
            let inputs = [Tensor::new(vec![n, d], vals)?];
            grad_check(
                |t, v| {
                    let p = pool(t, &frags(v[0], &row_mask, Modality::Text), kind)?;
                    contract(t, p.vector, &mut out_rng())
                },
                &inputs,
                tol,
            )?
        }
        "info_nce" => {
            let layers = r.random_range(1..=2);
            let inputs: Vec<Tensor> = (0..(layers + 1) * n)
                .map(|_| uniform(r, &[d], -1.0, 1.0))
                .collect();
            let tau = [0.1, 0.5, 1.0][r.random_range(0..3)];
            grad_check(
                |t, v| {
                    let as_pool = |x: Var| PooledVector {
                        vector: x,
                        kind: PoolKind::Mean,
                    };
                    let positives: Vec<PooledVector> = v[..n].iter().map(|&x| as_pool(x)).collect();
                    let anchors: Vec<Vec<PooledVector>> = (0..layers)
                        .map(|k| {
                            v[(k + 1) * n..(k + 2) * n]
                                .iter()
                                .map(|&x| as_pool(x))
                                .collect()
                        })
                        .collect();
                    info_nce(t, &anchors, &positives, tau)
                },
                &inputs,
                tol,
            )?
        }
        "nll" => {
            let vocab = d + 3;
            let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
            let target = TokenSequence::with_mask(ids, row_mask.clone())?;
            let inputs = [uniform(r, &[n, vocab], -2.0, 2.0)];
            grad_check(|t, v| nll(t, v[0], &target), &inputs, tol)?
        }
        "total_loss" => {
            let b1: f64 = r.random_range(0.0..0.3);
            let b2: f64 = r.random_range(0.0..0.3);
            let wd: f64 = r.random_range(0.0..0.1);
            let batch = r.random_range(1..=3) as f64;
            let inputs = [
                uniform(r, &[], 0.1, 3.0),
                uniform(r, &[], 0.1, 3.0),
                uniform(r, &[], 0.1, 3.0),
                uniform(r, &[d, 2], -1.0, 1.0),
                uniform(r, &[d], -1.0, 1.0),
            ];
            grad_check(
                |t, v| {
                    let i2t = t.scale(v[1], b1);
                    let t2i = t.scale(v[2], b2);
                    let sum = t.add_all(&[v[0], i2t, t2i])?;
                    let mean = t.scale(sum, 1.0 / batch);
                    let reg = regularizer_on_tape(t, &v[3..5], wd)?;
                    t.add(mean, reg)
                },
                &inputs,
                tol,
            )?
        }
        other => panic!("unknown op {other}"),
    };
    Ok(report.max_rel_error)
}

/// Runs `instances` random checks of `op`.
pub fn check_op(op: &'static str, instances: usize, seed: u64, tolerance: f64) -> Result<OpCheck> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng::stream(seed, op, i as u64);
        worst = worst.max(check_instance(op, &mut r, tolerance)?);
    }
    Ok(OpCheck {
        op,
        instances,
        max_rel_error: worst,
        tolerance,
    })
}

pub fn check_all(instances: usize, seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .map(|op| check_op(op, instances, seed, tolerance))
        .collect()
}
