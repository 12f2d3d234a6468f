//! The optimization loop: Adam with global-norm clipping, β schedules,
//! learning-rate halving on dev regressions, logging and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, Batch, EncodedExample};
use crate::error::{Error, Result};
use crate::evaluation::rouge_n;
use crate::losses::{
    beta_value, info_nce_per_layer, nll, pool, regularizer_on_tape, BetaKind, BetaMode,
    BetaSchedule, LossBreakdown, PooledVector,
};
use crate::model::{Checkpoint, Icaf, OptimizerSnapshot};
use crate::numerics::{cosine, ParamStore, Tape, Tensor, Var};
use crate::representation::{Dropout, Vocabulary};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 turns clipping off.
    pub clip_norm: f64,
    pub beta1: BetaKind,
    pub beta2: BetaKind,
    pub beta_mode: BetaMode,
    /// Dev evaluation every this many epochs; 0 disables it.
    pub dev_every: usize,
    /// Periodic checkpoint every this many epochs; 0 keeps only the final one.
    pub ckpt_every: usize,
    pub lr_halving: bool,
    pub seed: u64,
    pub disable_t2i: bool,
    pub disable_i2t: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            beta1: BetaKind::Increase,
            beta2: BetaKind::Increase,
            beta_mode: BetaMode::PerEpoch,
            dev_every: 1,
            ckpt_every: 0,
            lr_halving: true,
            seed: 0,
            disable_t2i: false,
            disable_i2t: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("train.lr must be a finite nonnegative number");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return fail("train.weight_decay and train.clip_norm must be nonnegative");
        }
        Ok(())
    }

    pub fn beta_schedules(&self) -> Result<(BetaSchedule, BetaSchedule)> {
        Ok((
            BetaSchedule::new(
                self.beta1,
                self.epochs,
                rng::derive_seed(self.seed, "beta1", 0),
            )?,
            BetaSchedule::new(
                self.beta2,
                self.epochs,
                rng::derive_seed(self.seed, "beta2", 0),
            )?,
        ))
    }
}

/// Adam moments plus the learning-rate schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub best_dev: Option<f64>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            lr,
            best_dev: None,
        }
    }

    /// One Adam update from the gradients accumulated in `params`.
    pub fn update(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Halves the rate when `current` is below the best dev score seen so
    /// far. Returns whether it halved.
    pub fn lr_schedule_step(&mut self, current: f64) -> bool {
        let halve = matches!(self.best_dev, Some(best) if current < best);
        if halve {
            self.lr /= 2.0;
        }
        self.best_dev = Some(self.best_dev.map_or(current, |b| b.max(current)));
        halve
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            lr: self.lr,
            best_dev: self.best_dev,
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    pub fn from_snapshot(s: OptimizerSnapshot) -> Self {
        Self {
            first_moment: s.first_moment,
            second_moment: s.second_moment,
            step: s.step,
            lr: s.lr,
            best_dev: s.best_dev,
        }
    }
}

/// One line of the step log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub gene: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub reg: f64,
    pub total: f64,
    pub lr: f64,
}

/// One line of the dev log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub epoch: usize,
    pub rouge1: f64,
    pub lr: f64,
    pub halved: bool,
}

pub const STEP_LOG: &str = "train_log.jsonl";
pub const DEV_LOG: &str = "dev_log.jsonl";

struct JsonLines {
    steps: BufWriter<File>,
    dev: BufWriter<File>,
}

impl JsonLines {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            steps: open(STEP_LOG)?,
            dev: open(DEV_LOG)?,
        })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Per-example features gathered during a forward pass.
struct ItemForward {
    gene: Var,
    text_layers: Vec<PooledVector>,
    image_layers: Vec<PooledVector>,
    text_embed: PooledVector,
    image_embed: PooledVector,
}

/// Owns the model and optimizer for a training run.
pub struct Trainer {
    pub model: Icaf,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub vocab: Vocabulary,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<StepRecord>,
    pub dev_history: Vec<DevRecord>,
    out_dir: Option<PathBuf>,
    log_dir: Option<PathBuf>,
    logs: Option<JsonLines>,
}

impl Trainer {
    pub fn new(model: Icaf, config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but model.vocab_size is {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let optimizer = OptimizerState::new(&model.params, config.lr);
        Ok(Self {
            model,
            config,
            optimizer,
            vocab,
            epoch: 0,
            history: Vec::new(),
            dev_history: Vec::new(),
            out_dir: None,
            log_dir: None,
            logs: None,
        })
    }

    /// Restores a run; training continues after the checkpoint's epoch.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = Icaf::from_params(ck.model_config, ck.params)?;
        let vocab = Vocabulary::from_tokens(ck.vocab)?;
        let mut t = Self::new(model, ck.train_config, vocab)?;
        t.optimizer = OptimizerState::from_snapshot(ck.optimizer);
        t.epoch = ck.epoch;
        Ok(t)
    }

    /// Checkpoints go to `out_dir`; logs go to `log_dir` (defaults to
    /// `out_dir`).
    pub fn with_output(mut self, out_dir: PathBuf, log_dir: Option<PathBuf>) -> Self {
        self.log_dir = Some(log_dir.unwrap_or_else(|| out_dir.clone()));
        self.out_dir = Some(out_dir);
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            epoch: self.epoch,
            seed: self.config.seed,
            vocab: self.vocab.tokens().to_vec(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.snapshot(),
        }
    }

    fn forward_item(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        i: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<ItemForward> {
        let kind = self.model.config.pooling;
        let (t0, i0) = self
            .model
            .embed(tape, &batch.texts[i], &batch.patches[i], dropout)?;
        let enc = self.model.encode(tape, &t0, &i0)?;
        let logits = self.model.decode_train(tape, &enc, &batch.summaries[i])?;
        let gene = nll(tape, logits, &batch.summaries[i])?;
        let mut text_layers = Vec::with_capacity(enc.layers());
        let mut image_layers = Vec::with_capacity(enc.layers());
        if !self.config.disable_t2i {
            for c in &enc.text_alignments {
                text_layers.push(pool(tape, &c.as_fragments(&t0), kind)?);
            }
        }
        if !self.config.disable_i2t {
            for c in &enc.image_alignments {
                image_layers.push(pool(tape, &c.as_fragments(&i0), kind)?);
            }
        }
        Ok(ItemForward {
            gene,
            text_layers,
            image_layers,
            text_embed: pool(tape, &t0, kind)?,
            image_embed: pool(tape, &i0, kind)?,
        })
    }

    /// Weighted sum of per-layer contrastive terms. Returns the weighted
    /// term, the unweighted sum and the effective β.
    fn contrastive(
        &self,
        tape: &mut Tape,
        anchors: Vec<Vec<PooledVector>>,
        positives: &[PooledVector],
        kind: BetaKind,
        epoch_beta: f64,
        label: &str,
    ) -> Result<(Var, f64, f64)> {
        let terms = info_nce_per_layer(tape, &anchors, positives, self.model.config.tau)?;
        let raw: f64 = terms.iter().map(|&t| tape.value(t).item()).sum();
        match self.config.beta_mode {
            BetaMode::PerEpoch => {
                let sum = tape.add_all(&terms)?;
                Ok((tape.scale(sum, epoch_beta), raw, epoch_beta))
            }
            BetaMode::PerLayer => {
                let sched = BetaSchedule::new(
                    kind,
                    terms.len(),
                    rng::derive_seed(self.config.seed, label, self.epoch as u64),
                )?;
                let mut weighted = Vec::with_capacity(terms.len());
                let mut betas = Vec::with_capacity(terms.len());
                for (k, &t) in terms.iter().enumerate() {
                    let b = beta_value(&sched, k)?;
                    betas.push(b);
                    weighted.push(tape.scale(t, b));
                }
                let sum = tape.add_all(&weighted)?;
                let effective = if raw > 0.0 {
                    tape.value(sum).item() / raw
                } else {
                    betas.iter().sum::<f64>() / betas.len() as f64
                };
                Ok((sum, raw, effective))
            }
        }
    }

    /// One forward, backward and optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch, beta1: f64, beta2: f64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut dropout = if self.model.config.dropout > 0.0 {
            Some(Dropout::new(
                self.model.config.dropout,
                rng::stream(self.config.seed, "dropout", self.optimizer.step),
            )?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let mut items = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            items.push(self.forward_item(&mut tape, batch, i, dropout.as_mut())?);
        }
        let b = batch.len() as f64;
        let genes: Vec<Var> = items.iter().map(|it| it.gene).collect();
        let gene_sum = tape.add_all(&genes)?;
        let mut objective = vec![gene_sum];

        let mut t2i = (0.0, 0.0);
        if !self.config.disable_t2i {
            let layers = self.model.config.layers;
            let anchors = (0..layers)
                .map(|k| items.iter().map(|it| it.text_layers[k]).collect())
                .collect();
            let positives: Vec<PooledVector> = items.iter().map(|it| it.image_embed).collect();
            let (term, raw, beta) = self.contrastive(
                &mut tape,
                anchors,
                &positives,
                self.config.beta2,
                beta2,
                "beta2-layer",
            )?;
            objective.push(term);
            t2i = (raw, beta);
        }
        let mut i2t = (0.0, 0.0);
        if !self.config.disable_i2t {
            let layers = self.model.config.layers;
            let anchors = (0..layers)
                .map(|k| items.iter().map(|it| it.image_layers[k]).collect())
                .collect();
            let positives: Vec<PooledVector> = items.iter().map(|it| it.text_embed).collect();
            let (term, raw, beta) = self.contrastive(
                &mut tape,
                anchors,
                &positives,
                self.config.beta1,
                beta1,
                "beta1-layer",
            )?;
            objective.push(term);
            i2t = (raw, beta);
        }
        let summed = tape.add_all(&objective)?;
        let data_term = tape.scale(summed, 1.0 / b);
        let all_params: Vec<Var> = self
            .model
            .params
            .ids()
            .map(|id| tape.param(&self.model.params, id))
            .collect();
        let reg = regularizer_on_tape(&mut tape, &all_params, self.config.weight_decay)?;
        let loss = tape.add(data_term, reg)?;

        let breakdown = LossBreakdown {
            gene: tape.value(gene_sum).item() / b,
            i2t: i2t.0 / b,
            t2i: t2i.0 / b,
            reg: tape.value(reg).item(),
            beta1: i2t.1,
            beta2: t2i.1,
            total: tape.value(loss).item(),
        };
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch_ids: batch.ids.clone(),
                detail: format!("{breakdown:?}"),
            });
        }

        self.model.params.zero_grad();
        tape.backward_into(loss, &mut self.model.params)?;
        let norm = self.model.params.grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch_ids: batch.ids.clone(),
                detail: format!("gradient norm is {norm}"),
            });
        }
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.model.params.scale_grads(self.config.clip_norm / norm);
        }
        self.optimizer.update(&mut self.model.params)?;
        Ok(breakdown)
    }

    /// Mean ROUGE-1 F1 of greedy generations against the references.
    pub fn dev_score(&self, dev: &[EncodedExample]) -> Result<f64> {
        if dev.is_empty() {
            return Err(Error::invalid("dev split is empty"));
        }
        let mut total = 0.0;
        for ex in dev {
            let out = self.model.summarize(&ex.text, &ex.patches)?;
            let hyp = self.vocab.decode(&out.ids);
            let reference = self.vocab.decode(&ex.summary.unpadded());
            total += rouge_n(&hyp, &reference, 1)?.f1;
        }
        Ok(total / dev.len() as f64)
    }

    fn open_logs(&mut self) -> Result<()> {
        if self.logs.is_none() {
            if let Some(dir) = &self.log_dir {
                self.logs = Some(JsonLines::open(dir, self.epoch > 0)?);
            }
        }
        Ok(())
    }

    fn save_to(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir)?;
            self.checkpoint().save(&dir.join(name))?;
        }
        Ok(())
    }

    /// Runs one epoch. Returns its step records.
    pub fn run_epoch(
        &mut self,
        train: &[EncodedExample],
        dev: Option<&[EncodedExample]>,
    ) -> Result<Vec<StepRecord>> {
        self.open_logs()?;
        let epoch = self.epoch;
        let (s1, s2) = self.config.beta_schedules()?;
        let beta1 = beta_value(&s1, epoch)?;
        let beta2 = beta_value(&s2, epoch)?;
        let batches = batch_iterator(
            train,
            self.config.batch_size,
            rng::derive_seed(self.config.seed, "epoch-shuffle", epoch as u64),
        )?;
        let mut records = Vec::with_capacity(batches.len());
        for batch in &batches {
            let lr = self.optimizer.lr;
            let step = self.optimizer.step;
            let l = self.train_step(batch, beta1, beta2)?;
            let rec = StepRecord {
                epoch,
                step,
                gene: l.gene,
                i2t: l.i2t,
                t2i: l.t2i,
                beta1: l.beta1,
                beta2: l.beta2,
                reg: l.reg,
                total: l.total,
                lr,
            };
            if let Some(logs) = &mut self.logs {
                JsonLines::line(&mut logs.steps, &rec)?;
            }
            records.push(rec);
        }
        self.epoch += 1;
        if let Some(dev) = dev {
            if self.config.dev_every > 0 && self.epoch.is_multiple_of(self.config.dev_every) {
                let score = self.dev_score(dev)?;
                let halved = self.config.lr_halving && self.optimizer.lr_schedule_step(score);
                if !self.config.lr_halving {
                    self.optimizer.best_dev =
                        Some(self.optimizer.best_dev.map_or(score, |b| b.max(score)));
                }
                let rec = DevRecord {
                    epoch,
                    rouge1: score,
                    lr: self.optimizer.lr,
                    halved,
                };
                if let Some(logs) = &mut self.logs {
                    JsonLines::line(&mut logs.dev, &rec)?;
                }
                self.dev_history.push(rec);
            }
        }
        if let Some(logs) = &mut self.logs {
            logs.steps.flush()?;
            logs.dev.flush()?;
        }
        if self.config.ckpt_every > 0 && self.epoch.is_multiple_of(self.config.ckpt_every) {
            self.save_to(&format!("epoch-{:04}.ckpt", self.epoch))?;
        }
        self.history.extend_from_slice(&records);
        Ok(records)
    }

    /// Trains from the current epoch through `config.epochs`, then writes
    /// `final.ckpt` when an output directory is set.
    pub fn fit(&mut self, train: &[EncodedExample], dev: Option<&[EncodedExample]>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(train, dev)?;
        }
        self.save_to("final.ckpt")
    }
}

/// Mean per-token NLL of `examples` in inference mode.
pub fn mean_token_nll(model: &Icaf, examples: &[EncodedExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let enc = model.encode_example(&mut tape, &ex.text, &ex.patches)?;
        let logits = model.decode_train(&mut tape, &enc, &ex.summary)?;
        let l = nll(&mut tape, logits, &ex.summary)?;
        total += tape.value(l).item();
        tokens += ex.summary.unpadded().len();
    }
    if tokens == 0 {
        return Err(Error::invalid("no target tokens"));
    }
    Ok(total / tokens as f64)
}

/// Mean cosine between pooled `C^T_K` and pooled `I_0`, over matched pairs
/// and over pairs whose image is shifted cyclically by one example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Separation {
    pub matched: f64,
    pub mismatched: f64,
}

impl Separation {
    pub fn margin(&self) -> f64 {
        self.matched - self.mismatched
    }
}

pub fn contrastive_separation(model: &Icaf, examples: &[EncodedExample]) -> Result<Separation> {
    if examples.len() < 2 {
        return Err(Error::invalid("separation needs at least two examples"));
    }
    let kind = model.config.pooling;
    let mut text = Vec::with_capacity(examples.len());
    let mut image = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut tape = Tape::new();
        let enc = model.encode_example(&mut tape, &ex.text, &ex.patches)?;
        let t = pool(&mut tape, &enc.decoder_memory(), kind)?;
        let i = pool(&mut tape, &enc.image_embed, kind)?;
        text.push(tape.value(t.vector).data().to_vec());
        image.push(tape.value(i.vector).data().to_vec());
    }
    let n = examples.len();
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for i in 0..n {
        matched += cosine(&text[i], &image[i])?;
        mismatched += cosine(&text[i], &image[(i + 1) % n])?;
    }
    Ok(Separation {
        matched: matched / n as f64,
        mismatched: mismatched / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_split, generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    fn setup(batch: usize) -> (Trainer, Vec<EncodedExample>) {
        let data = generate_synthetic(
            1,
            &SyntheticConfig {
                vocab_size: 40,
                channels: 1,
                height: 8,
                width: 8,
                patch_size: 2,
                train: 4,
                dev: 2,
                test: 2,
                ..SyntheticConfig::default()
            },
        )
        .unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            layers: 2,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 40,
            channels: 1,
            height: 8,
            width: 8,
            patch_size: 2,
            dropout: 0.1,
            ..ModelConfig::default()
        };
        let enc = encode_split(&data.train, &data.vocab, 2, 64, 8).unwrap();
        let model = Icaf::new(cfg, 3).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: batch,
            seed: 5,
            ..TrainConfig::default()
        };
        (Trainer::new(model, tc, data.vocab).unwrap(), enc)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut t, enc) = setup(2);
        t.optimizer.lr = 0.0;
        let before = t.model.params.clone();
        let batch = Batch::from_examples(&[&enc[0], &enc[1]]);
        t.train_step(&batch, 0.2, 0.1).unwrap();
        for (a, b) in before.iter().zip(t.model.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn identical_states_give_identical_steps() {
        let (mut a, enc) = setup(2);
        let (mut b, _) = setup(2);
        let batch = Batch::from_examples(&[&enc[0], &enc[1]]);
        assert_eq!(
            a.train_step(&batch, 0.2, 0.1).unwrap(),
            b.train_step(&batch, 0.2, 0.1).unwrap()
        );
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn single_pair_batch_has_no_contrastive_loss() {
        let (mut t, enc) = setup(1);
        let l = t
            .train_step(&Batch::from_examples(&[&enc[2]]), 0.3, 0.3)
            .unwrap();
        assert_eq!(l.i2t, 0.0);
        assert_eq!(l.t2i, 0.0);
        assert!((l.total - (l.gene + l.reg)).abs() < 1e-12);
    }

    #[test]
    fn disabled_terms_report_zero() {
        let (mut t, enc) = setup(2);
        t.config.disable_t2i = true;
        let l = t
            .train_step(&Batch::from_examples(&[&enc[0], &enc[1]]), 0.3, 0.3)
            .unwrap();
        assert_eq!((l.t2i, l.beta2), (0.0, 0.0));
        assert!(l.i2t > 0.0);
    }

    #[test]
    fn lr_halving() {
        let mut o = OptimizerState::new(&ParamStore::new(), 1e-3);
        assert!(!o.lr_schedule_step(0.5));
        assert!(!o.lr_schedule_step(0.6));
        assert_eq!(o.lr, 1e-3);
        assert!(o.lr_schedule_step(0.4));
        assert_eq!(o.lr, 5e-4);
        o.lr_schedule_step(0.3);
        o.lr_schedule_step(0.2);
        assert_eq!(o.lr, 1e-3 / 8.0);
        assert_eq!(o.best_dev, Some(0.6));
    }

    #[test]
    fn per_layer_mode_runs() {
        let (mut t, enc) = setup(2);
        t.config.beta_mode = BetaMode::PerLayer;
        let l = t
            .train_step(&Batch::from_examples(&[&enc[0], &enc[1]]), 0.0, 0.0)
            .unwrap();
        assert!((0.0..=0.3).contains(&l.beta1));
        assert!(l.total.is_finite());
    }

    #[test]
    fn fit_writes_logs_and_checkpoints() {
        let (t, enc) = setup(3);
        let dir = tempfile::tempdir().unwrap();
        let mut t = t.with_output(dir.path().to_path_buf(), None);
        t.config.ckpt_every = 2;
        t.fit(&enc, Some(&enc[..2])).unwrap();
        assert_eq!(t.epoch, 3);
        assert!(dir.path().join("final.ckpt").exists());
        assert!(dir.path().join("epoch-0002.ckpt").exists());
        let log = fs::read_to_string(dir.path().join(STEP_LOG)).unwrap();
        assert_eq!(log.lines().count(), 6);
        let dev = fs::read_to_string(dir.path().join(DEV_LOG)).unwrap();
        assert_eq!(dev.lines().count(), 3);
    }
}
