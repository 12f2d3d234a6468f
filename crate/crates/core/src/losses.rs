//! Pooling, the per-layer contrastive objectives, reconstruction loss, the
//! β schedules and the combined training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};
use crate::representation::{FragmentFeatures, TokenSequence, PAD};
use crate::rng;

pub const BETA_MIN: f64 = 0.0;
pub const BETA_MAX: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => Err(Error::Config(format!("unknown pooling kind {s:?}"))),
        }
    }
}

/// A `d`-vector summarizing a set of fragments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledVector {
    pub vector: Var,
    pub kind: PoolKind,
}

/// Mean or per-dimension max over the unmasked rows of `features`.
pub fn pool(tape: &mut Tape, features: &FragmentFeatures, kind: PoolKind) -> Result<PooledVector> {
    let vector = match kind {
        PoolKind::Mean => tape.mean_rows(features.rows, &features.mask)?,
        PoolKind::Max => tape.max_rows(features.rows, &features.mask)?,
    };
    Ok(PooledVector { vector, kind })
}

/// Plain-value pooling used outside of training.
pub fn pool_values(
    rows: &crate::numerics::Tensor,
    mask: &[bool],
    kind: PoolKind,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(rows.clone());
    let f = FragmentFeatures {
        rows: v,
        mask: mask.to_vec(),
        modality: crate::representation::Modality::Text,
    };
    let p = pool(&mut tape, &f, kind)?;
    Ok(tape.value(p.vector).data().to_vec())
}

fn stack_unit_rows(tape: &mut Tape, vectors: &[PooledVector], what: &str) -> Result<Var> {
    for (i, p) in vectors.iter().enumerate() {
        if tape.value(p.vector).data().iter().all(|&x| x == 0.0) {
            return Err(Error::domain(format!("{what} {i} has zero norm")));
        }
    }
    let rows: Vec<Var> = vectors.iter().map(|p| p.vector).collect();
    let stacked = tape.stack_rows(&rows)?;
    Ok(tape.normalize_rows(stacked))
}

/// One InfoNCE term per layer. `anchors[k][i]` is item `i` at layer `k`;
/// every item's positive is `positives[i]` and the other positives in the
/// batch serve as its negatives.
pub fn info_nce_per_layer(
    tape: &mut Tape,
    anchors: &[Vec<PooledVector>],
    positives: &[PooledVector],
    tau: f64,
) -> Result<Vec<Var>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if positives.is_empty() {
        return Err(Error::invalid("contrastive loss needs a nonempty batch"));
    }
    if anchors.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one layer"));
    }
    let batch = positives.len();
    let pos = stack_unit_rows(tape, positives, "positive")?;
    let targets: Vec<Option<usize>> = (0..batch).map(Some).collect();
    let mut out = Vec::with_capacity(anchors.len());
    for (k, layer) in anchors.iter().enumerate() {
        if layer.len() != batch {
            return Err(Error::shape(format!(
                "layer {k} has {} anchors for {batch} positives",
                layer.len()
            )));
        }
        let a = stack_unit_rows(tape, layer, "anchor")?;
        let sims = tape.matmul_bt(a, pos)?;
        let logits = tape.scale(sims, 1.0 / tau);
        out.push(tape.cross_entropy(logits, &targets)?);
    }
    Ok(out)
}

/// Sum over items and layers of the per-layer InfoNCE terms.
pub fn info_nce(
    tape: &mut Tape,
    anchors: &[Vec<PooledVector>],
    positives: &[PooledVector],
    tau: f64,
) -> Result<Var> {
    let terms = info_nce_per_layer(tape, anchors, positives, tau)?;
    tape.add_all(&terms)
}

/// Summed negative log-likelihood of the non-pad target tokens; row `t` of
/// `logits` scores `target.ids[t]`.
pub fn nll(tape: &mut Tape, logits: Var, target: &TokenSequence) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if rows != target.len() {
        return Err(Error::shape(format!(
            "{rows} logit rows for a target of length {}",
            target.len()
        )));
    }
    let targets: Vec<Option<usize>> = target
        .ids
        .iter()
        .zip(&target.mask)
        .map(|(&id, &m)| (m && id != PAD).then_some(id))
        .collect();
    tape.cross_entropy(logits, &targets)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaKind {
    Random,
    #[default]
    Increase,
    Decrease,
}

impl std::str::FromStr for BetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "increase" => Ok(Self::Increase),
            "decrease" => Ok(Self::Decrease),
            _ => Err(Error::Config(format!("unknown beta schedule {s:?}"))),
        }
    }
}

/// Whether β moves across training epochs or across alignment layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMode {
    #[default]
    PerEpoch,
    PerLayer,
}

impl std::str::FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "per-epoch" | "epoch" => Ok(Self::PerEpoch),
            "per-layer" | "layer" => Ok(Self::PerLayer),
            _ => Err(Error::Config(format!("unknown beta mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub kind: BetaKind,
    /// Number of steps the schedule spans; the last index is `horizon − 1`.
    pub horizon: usize,
    /// Only read by [`BetaKind::Random`].
    pub seed: u64,
}

impl BetaSchedule {
    pub fn new(kind: BetaKind, horizon: usize, seed: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("beta schedule horizon must be positive"));
        }
        Ok(Self {
            kind,
            horizon,
            seed,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.horizon)
            .map(|e| beta_value(self, e).expect("index within horizon"))
            .collect()
    }
}

/// β at `epoch`. Linear kinds hit both endpoints exactly; a one-step
/// horizon sits at the kind's starting value.
pub fn beta_value(schedule: &BetaSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.horizon {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule horizon {}",
            schedule.horizon
        )));
    }
    let frac = if schedule.horizon == 1 {
        0.0
    } else {
        epoch as f64 / (schedule.horizon - 1) as f64
    };
    Ok(match schedule.kind {
        BetaKind::Increase => BETA_MAX * frac,
        BetaKind::Decrease => BETA_MAX * (1.0 - frac),
        BetaKind::Random => {
            let mut r = rng::stream(schedule.seed, "beta", epoch as u64);
            r.random_range(BETA_MIN..=BETA_MAX)
        }
    })
}

/// Per-step losses. `gene`, `i2t` and `t2i` are batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gene: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub reg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.gene, self.i2t, self.t2i, self.reg, self.beta1, self.beta2, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `weight_decay · ‖θ‖₂` over every parameter value.
pub fn regularizer(params: &ParamStore, weight_decay: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|p| p.value.data())
        .map(|v| v * v)
        .sum();
    weight_decay * sq.sqrt()
}

/// Combines batch-mean loss terms: `gene + β1·i2t + β2·t2i + reg`.
pub fn total_loss(
    gene: f64,
    i2t: f64,
    t2i: f64,
    beta1: f64,
    beta2: f64,
    params: &ParamStore,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    if !(weight_decay >= 0.0) {
        return Err(Error::invalid(format!(
            "weight decay {weight_decay} is negative"
        )));
    }
    let reg = regularizer(params, weight_decay);
    let out = LossBreakdown {
        gene,
        i2t,
        t2i,
        reg,
        beta1,
        beta2,
        total: gene + beta1 * i2t + beta2 * t2i + reg,
    };
    if !out.is_finite() {
        return Err(Error::domain(format!(
            "non-finite loss component in {out:?}"
        )));
    }
    Ok(out)
}

/// `weight_decay · ‖θ‖₂` on the tape, over the given parameter nodes.
pub fn regularizer_on_tape(tape: &mut Tape, params: &[Var], weight_decay: f64) -> Result<Var> {
    let squares: Vec<Var> = params.iter().map(|&p| tape.sum_squares(p)).collect();
    let total = tape.add_all(&squares)?;
    let norm = tape.sqrt(total)?;
    Ok(tape.scale(norm, weight_decay))
}
