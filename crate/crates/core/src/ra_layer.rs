//! One recurrent alignment layer.
//!
//! The cross-modal attention half scores every `(x_i, y_j)` pair by cosine
//! similarity, thresholds and column-normalizes the scores, and attends over
//! `Y` with a sharpened softmax. The gated update half blends each `x_i` with
//! its attended feature `c_i`:
//!
//! ```text
//! a_i  = sigmoid(W_a [x_i, c_i] + b_a)
//! u_i  = tanh(W_u [x_i, c_i] + b_u)
//! x*_i = (1 − a_i) ⊙ x_i + a_i ⊙ u_i
//! ```

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, MASKED};
use crate::representation::FragmentFeatures;

/// Guard for the column denominators of the normalized similarities.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Pairwise similarity scores between `X` (rows) and `Y` (columns).
///
/// Entries in a masked row or column hold [`MASKED`] in the raw matrix.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub values: Var,
    pub row_mask: Vec<bool>,
    pub col_mask: Vec<bool>,
    pub normalized: bool,
}

/// Attended features `C^x` and the attention weights that produced them.
#[derive(Clone, Debug)]
pub struct AlignmentFeatures {
    pub rows: Var,
    pub attention: Var,
    pub mask: Vec<bool>,
}

impl AlignmentFeatures {
    pub fn as_fragments(&self, like: &FragmentFeatures) -> FragmentFeatures {
        FragmentFeatures {
            rows: self.rows,
            mask: self.mask.clone(),
            modality: like.modality,
        }
    }
}

/// Gate weights bound on a tape. `w_*` are `2d × d`, `b_*` are `d`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub w_u: Var,
    pub b_u: Var,
}

/// Scalar settings of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignSettings {
    pub gamma: f64,
    pub lambda: f64,
    pub relu_in_denominator: bool,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self {
            gamma: -0.15,
            lambda: 6.0,
            relu_in_denominator: false,
        }
    }
}

/// Raw cosine similarities `⟨x_i, y_j⟩ / (‖x_i‖‖y_j‖)`.
pub fn cam_similarity(
    tape: &mut Tape,
    x: &FragmentFeatures,
    y: &FragmentFeatures,
) -> Result<SimilarityMatrix> {
    let (n, dx) = tape.value(x.rows).dims2();
    let (m, dy) = tape.value(y.rows).dims2();
    if dx != dy {
        return Err(Error::shape(format!(
            "fragment widths differ: {dx} vs {dy}"
        )));
    }
    if x.mask.len() != n || y.mask.len() != m {
        return Err(Error::shape("fragment mask length does not match rows"));
    }
    for (name, f) in [("X", x), ("Y", y)] {
        let v = tape.value(f.rows);
        for i in (0..f.mask.len()).filter(|&i| f.mask[i]) {
            if v.row(i).iter().all(|&e| e == 0.0) {
                return Err(Error::domain(format!("{name} fragment {i} has zero norm")));
            }
        }
    }
    let xn = tape.normalize_rows(x.rows);
    let yn = tape.normalize_rows(y.rows);
    let raw = tape.matmul_bt(xn, yn)?;
    let keep: Vec<bool> = (0..n * m).map(|k| x.mask[k / m] && y.mask[k % m]).collect();
    let values = tape.mask_fill(raw, &keep, MASKED)?;
    Ok(SimilarityMatrix {
        values,
        row_mask: x.mask.clone(),
        col_mask: y.mask.clone(),
        normalized: false,
    })
}

/// `relu(s_ij + γ) / sqrt(Σ_i (s_ij + γ)²)`, per column, over unmasked rows.
pub fn cam_normalize(
    tape: &mut Tape,
    s: &SimilarityMatrix,
    gamma: f64,
    relu_in_denominator: bool,
) -> Result<SimilarityMatrix> {
    if !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite"));
    }
    let values = tape.cam_normalize(
        s.values,
        gamma,
        &s.row_mask,
        &s.col_mask,
        relu_in_denominator,
        NORMALIZE_EPS,
    )?;
    Ok(SimilarityMatrix {
        values,
        row_mask: s.row_mask.clone(),
        col_mask: s.col_mask.clone(),
        normalized: true,
    })
}

/// `c_i = Σ_j softmax_j(λ s̄_ij) y_j`; masked columns get zero weight.
pub fn cam_attend(
    tape: &mut Tape,
    s_norm: &SimilarityMatrix,
    y: &FragmentFeatures,
    lambda: f64,
) -> Result<AlignmentFeatures> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if !y.mask.iter().any(|&m| m) {
        return Err(Error::invalid("every reference fragment is masked"));
    }
    let (n, m) = tape.value(s_norm.values).dims2();
    if m != y.len() {
        return Err(Error::shape(
            "similarity columns do not match reference rows",
        ));
    }
    let allowed: Vec<bool> = (0..n * m).map(|k| s_norm.col_mask[k % m]).collect();
    let attention = tape.softmax_rows(s_norm.values, lambda, Some(&allowed))?;
    let rows = tape.matmul(attention, y.rows)?;
    Ok(AlignmentFeatures {
        rows,
        attention,
        mask: s_norm.row_mask.clone(),
    })
}

/// Gated blend of `x` with its alignment features.
///
/// `forced_alpha` replaces the learned forgetting coefficient by a constant
/// (0 keeps `x`, 1 replaces it by `u`).
pub fn ram_gate(
    tape: &mut Tape,
    x: &FragmentFeatures,
    c: &AlignmentFeatures,
    gate: &GateParams,
    forced_alpha: Option<f64>,
) -> Result<FragmentFeatures> {
    let (n, d) = tape.value(x.rows).dims2();
    if tape.value(c.rows).dims2() != (n, d) {
        return Err(Error::shape(format!(
            "alignment features {:?} do not match stream {:?}",
            tape.shape(c.rows),
            tape.shape(x.rows)
        )));
    }
    for w in [gate.w_alpha, gate.w_u] {
        if tape.value(w).dims2() != (2 * d, d) || tape.value(w).rank() != 2 {
            return Err(Error::shape(format!(
                "gate weight {:?} expected [{}, {d}]",
                tape.shape(w),
                2 * d
            )));
        }
    }
    for b in [gate.b_alpha, gate.b_u] {
        if tape.shape(b) != [d] {
            return Err(Error::shape(format!(
                "gate bias {:?} expected [{d}]",
                tape.shape(b)
            )));
        }
    }
    let xc = tape.concat_cols(&[x.rows, c.rows])?;
    let alpha = match forced_alpha {
        Some(a) => tape.constant(Tensor::filled(&[n, d], a)),
        None => {
            let pre = tape.matmul(xc, gate.w_alpha)?;
            let pre = tape.add_row(pre, gate.b_alpha)?;
            tape.sigmoid(pre)
        }
    };
    let u_pre = tape.matmul(xc, gate.w_u)?;
    let u_pre = tape.add_row(u_pre, gate.b_u)?;
    let u = tape.tanh(u_pre);
    let neg = tape.scale(alpha, -1.0);
    let retain = tape.add_scalar(neg, 1.0);
    let kept = tape.mul(retain, x.rows)?;
    let fresh = tape.mul(alpha, u)?;
    let rows = tape.add(kept, fresh)?;
    Ok(FragmentFeatures {
        rows,
        mask: x.mask.clone(),
        modality: x.modality,
    })
}

/// One full layer: alignment features of `x_prev` against `y_ref`, then the
/// refreshed stream state.
pub fn ra_forward(
    tape: &mut Tape,
    x_prev: &FragmentFeatures,
    y_ref: &FragmentFeatures,
    settings: &AlignSettings,
    gate: &GateParams,
    forced_alpha: Option<f64>,
) -> Result<(AlignmentFeatures, FragmentFeatures)> {
    let raw = cam_similarity(tape, x_prev, y_ref)?;
    let norm = cam_normalize(tape, &raw, settings.gamma, settings.relu_in_denominator)?;
    let aligned = cam_attend(tape, &norm, y_ref, settings.lambda)?;
    let refreshed = ram_gate(tape, x_prev, &aligned, gate, forced_alpha)?;
    Ok((aligned, refreshed))
}
