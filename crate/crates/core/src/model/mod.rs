//! The full network: fragment embeddings, the dual-stream alignment encoder
//! and a transformer decoder that reads only the text stream's final
//! alignment features.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::ra_layer::{ra_forward, AlignSettings, AlignmentFeatures, GateParams};
use crate::representation::{
    embed_text, project_patches, sinusoid_table, Dropout, FragmentFeatures, Modality,
    TokenSequence, EOS, SOS,
};
use crate::rng;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct GateIds {
    w_alpha: ParamId,
    b_alpha: ParamId,
    w_u: ParamId,
    b_u: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct StreamIds {
    gate: GateIds,
    self_attn: Option<AttnIds>,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayerIds {
    text: StreamIds,
    image: StreamIds,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayerIds {
    ln_self: LnIds,
    self_attn: AttnIds,
    ln_cross: LnIds,
    cross_attn: AttnIds,
    ln_ffn: LnIds,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Test hooks that pin the forgetting coefficient of individual layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateOverrides {
    pub text: Vec<Option<f64>>,
    pub image: Vec<Option<f64>>,
}

/// Everything the encoder produced for one example.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `T_0`
    pub text_embed: FragmentFeatures,
    /// `I_0`
    pub image_embed: FragmentFeatures,
    /// `C^T_1..C^T_K`
    pub text_alignments: Vec<AlignmentFeatures>,
    /// `C^I_1..C^I_K`
    pub image_alignments: Vec<AlignmentFeatures>,
    /// `T_1..T_K`
    pub text_states: Vec<FragmentFeatures>,
    /// `I_1..I_K`
    pub image_states: Vec<FragmentFeatures>,
}

impl EncoderOutput {
    pub fn layers(&self) -> usize {
        self.text_alignments.len()
    }

    /// `C^T_K` as fragments; the decoder's only view of the input.
    pub fn decoder_memory(&self) -> FragmentFeatures {
        self.text_alignments
            .last()
            .expect("encoder has at least one layer")
            .as_fragments(&self.text_embed)
    }
}

/// Parameter counts by component, for `model-info`.
#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub total_parameters: usize,
    pub tensors: usize,
    pub embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
}

/// The trainable model: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Icaf {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub gate_overrides: GateOverrides,
    tokens: ParamId,
    patch_proj: ParamId,
    encoder: Vec<EncoderLayerIds>,
    decoder: Vec<DecoderLayerIds>,
    ln_final: LnIds,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn filled(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::filled(shape, v))
    }

    fn gate(&mut self, prefix: &str, d: usize) -> Result<GateIds> {
        Ok(GateIds {
            w_alpha: self.normal(format!("{prefix}.w_alpha"), &[2 * d, d])?,
            b_alpha: self.filled(format!("{prefix}.b_alpha"), &[d], 0.0)?,
            w_u: self.normal(format!("{prefix}.w_u"), &[2 * d, d])?,
            b_u: self.filled(format!("{prefix}.b_u"), &[d], 0.0)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.normal(format!("{prefix}.wq"), &[d, d])?,
            bq: self.filled(format!("{prefix}.bq"), &[d], 0.0)?,
            wk: self.normal(format!("{prefix}.wk"), &[d, d])?,
            bk: self.filled(format!("{prefix}.bk"), &[d], 0.0)?,
            wv: self.normal(format!("{prefix}.wv"), &[d, d])?,
            bv: self.filled(format!("{prefix}.bv"), &[d], 0.0)?,
            wo: self.normal(format!("{prefix}.wo"), &[d, d])?,
            bo: self.filled(format!("{prefix}.bo"), &[d], 0.0)?,
        })
    }

    fn ln(&mut self, prefix: &str, d: usize) -> Result<LnIds> {
        Ok(LnIds {
            gain: self.filled(format!("{prefix}.gain"), &[d], 1.0)?,
            bias: self.filled(format!("{prefix}.bias"), &[d], 0.0)?,
        })
    }
}

impl Icaf {
    /// Fresh model with weights drawn from `N(0, 0.02²)`, zero biases and
    /// unit layer-norm gains. Deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: rng::stream(seed, "init", 0),
            normal: Normal::new(0.0, INIT_STD).expect("valid normal"),
        };
        let tokens = b.normal("embed.tokens".into(), &[config.vocab_size, d])?;
        let patch_proj = b.normal("embed.patch_proj".into(), &[config.patch_dim(), d])?;

        let shared = if config.share_gates {
            Some(b.gate("encoder.gate", d)?)
        } else {
            None
        };
        let mut encoder = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let mut stream = |name: &str| -> Result<StreamIds> {
                let prefix = format!("encoder.layer{k}.{name}");
                let gate = match shared {
                    Some(g) => g,
                    None => b.gate(&format!("{prefix}.gate"), d)?,
                };
                let self_attn = if config.self_attention_in_cam {
                    Some(b.attn(&format!("{prefix}.self_attn"), d)?)
                } else {
                    None
                };
                Ok(StreamIds { gate, self_attn })
            };
            let text = stream("text")?;
            let image = stream("image")?;
            encoder.push(EncoderLayerIds { text, image });
        }

        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let p = format!("decoder.layer{l}");
            decoder.push(DecoderLayerIds {
                ln_self: b.ln(&format!("{p}.ln_self"), d)?,
                self_attn: b.attn(&format!("{p}.self_attn"), d)?,
                ln_cross: b.ln(&format!("{p}.ln_cross"), d)?,
                cross_attn: b.attn(&format!("{p}.cross_attn"), d)?,
                ln_ffn: b.ln(&format!("{p}.ln_ffn"), d)?,
                w1: b.normal(format!("{p}.ffn.w1"), &[d, config.ffn_dim])?,
                b1: b.filled(format!("{p}.ffn.b1"), &[config.ffn_dim], 0.0)?,
                w2: b.normal(format!("{p}.ffn.w2"), &[config.ffn_dim, d])?,
                b2: b.filled(format!("{p}.ffn.b2"), &[d], 0.0)?,
            });
        }
        let ln_final = b.ln("decoder.ln_final", d)?;
        let out_w = if config.tie_embeddings {
            None
        } else {
            Some(b.normal("decoder.out.w".into(), &[d, config.vocab_size])?)
        };
        let out_b = b.filled("decoder.out.b".into(), &[config.vocab_size], 0.0)?;

        let gate_overrides = GateOverrides {
            text: vec![None; config.layers],
            image: vec![None; config.layers],
        };
        Ok(Self {
            config,
            params: store,
            gate_overrides,
            tokens,
            patch_proj,
            encoder,
            decoder,
            ln_final,
            out_w,
            out_b,
        })
    }

    /// Rebuilds a model from a parameter store whose names and shapes match
    /// what [`Icaf::new`] would create for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn settings(&self) -> AlignSettings {
        AlignSettings {
            gamma: self.config.gamma,
            lambda: self.config.lambda,
            relu_in_denominator: self.config.relu_in_denominator,
        }
    }

    pub fn token_table(&self) -> &Tensor {
        &self.params.get(self.tokens).value
    }

    pub fn patch_projection(&self) -> &Tensor {
        &self.params.get(self.patch_proj).value
    }

    pub fn info(&self) -> ModelInfo {
        let mut info = ModelInfo {
            config: self.config.clone(),
            total_parameters: self.params.total_values(),
            tensors: self.params.len(),
            embedding: 0,
            encoder: 0,
            decoder: 0,
        };
        for p in self.params.iter() {
            let n = p.value.numel();
            if p.name.starts_with("embed.") {
                info.embedding += n;
            } else if p.name.starts_with("encoder.") {
                info.encoder += n;
            } else {
                info.decoder += n;
            }
        }
        info
    }

    /// `T_0` from token ids and `I_0` from a patch matrix.
    pub fn embed(
        &self,
        tape: &mut Tape,
        text: &TokenSequence,
        patches: &Tensor,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(FragmentFeatures, FragmentFeatures)> {
        let table = tape.param(&self.params, self.tokens);
        let t0 = embed_text(tape, text, table, dropout.as_deref_mut())?;
        let raw = tape.constant(patches.clone());
        let proj = tape.param(&self.params, self.patch_proj);
        let mut i0 = project_patches(tape, raw, proj)?;
        if self.config.image_positional {
            let pe = tape.constant(sinusoid_table(i0.len(), self.config.d_model));
            i0.rows = tape.add(i0.rows, pe)?;
        }
        if let Some(d) = dropout {
            i0.rows = d.apply(tape, i0.rows)?;
        }
        Ok((t0, i0))
    }

    fn bind_gate(&self, tape: &mut Tape, g: &GateIds) -> GateParams {
        GateParams {
            w_alpha: tape.param(&self.params, g.w_alpha),
            b_alpha: tape.param(&self.params, g.b_alpha),
            w_u: tape.param(&self.params, g.w_u),
            b_u: tape.param(&self.params, g.b_u),
        }
    }

    fn stream_step(
        &self,
        tape: &mut Tape,
        ids: &StreamIds,
        x: &FragmentFeatures,
        reference: &FragmentFeatures,
        forced: Option<f64>,
    ) -> Result<(AlignmentFeatures, FragmentFeatures)> {
        let mut input = x.clone();
        if let Some(attn) = &ids.self_attn {
            let allowed: Vec<bool> = (0..x.len() * x.len())
                .map(|k| x.mask[k % x.len()])
                .collect();
            let mixed = self.attention(tape, attn, x.rows, x.rows, Some(&allowed))?;
            input.rows = tape.add(x.rows, mixed)?;
        }
        let gate = self.bind_gate(tape, &ids.gate);
        ra_forward(tape, &input, reference, &self.settings(), &gate, forced)
    }

    /// Stacked alignment layers. Each layer iterates its own stream state
    /// but always aligns against the other modality's original embedding.
    pub fn encode(
        &self,
        tape: &mut Tape,
        t0: &FragmentFeatures,
        i0: &FragmentFeatures,
    ) -> Result<EncoderOutput> {
        let d = self.config.d_model;
        for (name, f, modality) in [("text", t0, Modality::Text), ("image", i0, Modality::Image)] {
            if tape.value(f.rows).cols() != d || f.modality != modality {
                return Err(Error::shape(format!(
                    "{name} embedding {:?} is not {modality:?} fragments of width {d}",
                    tape.shape(f.rows)
                )));
            }
        }
        let mut out = EncoderOutput {
            text_embed: t0.clone(),
            image_embed: i0.clone(),
            text_alignments: Vec::with_capacity(self.encoder.len()),
            image_alignments: Vec::with_capacity(self.encoder.len()),
            text_states: Vec::with_capacity(self.encoder.len()),
            image_states: Vec::with_capacity(self.encoder.len()),
        };
        let mut text = t0.clone();
        let mut image = i0.clone();
        for (k, layer) in self.encoder.iter().enumerate() {
            let ctx = |e: Error| match e {
                Error::Shape(m) => Error::Shape(format!("encoder layer {}: {m}", k + 1)),
                Error::NumericDomain(m) => {
                    Error::NumericDomain(format!("encoder layer {}: {m}", k + 1))
                }
                other => other,
            };
            let forced_t = self.gate_overrides.text.get(k).copied().flatten();
            let forced_i = self.gate_overrides.image.get(k).copied().flatten();
            let (ct, t_next) = self
                .stream_step(tape, &layer.text, &text, i0, forced_t)
                .map_err(ctx)?;
            let (ci, i_next) = self
                .stream_step(tape, &layer.image, &image, t0, forced_i)
                .map_err(ctx)?;
            out.text_alignments.push(ct);
            out.image_alignments.push(ci);
            out.text_states.push(t_next.clone());
            out.image_states.push(i_next.clone());
            text = t_next;
            image = i_next;
        }
        Ok(out)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(&self.params, w);
        let bv = tape.param(&self.params, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, ids: &LnIds) -> Result<Var> {
        let y = tape.layer_norm(x, LN_EPS);
        let g = tape.param(&self.params, ids.gain);
        let b = tape.param(&self.params, ids.bias);
        let y = tape.mul_row(y, g)?;
        tape.add_row(y, b)
    }

    /// Multi-head scaled dot-product attention of `query` rows over
    /// `memory` rows. `allowed` is a row-major `n_query × n_memory` mask.
    fn attention(
        &self,
        tape: &mut Tape,
        ids: &AttnIds,
        query: Var,
        memory: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(tape, query, ids.wq, ids.bq)?;
        let k = self.linear(tape, memory, ids.wk, ids.bk)?;
        let v = self.linear(tape, memory, ids.wv, ids.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let probs = tape.softmax_rows(scores, scale, allowed)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let joined = tape.concat_cols(&outs)?;
        self.linear(tape, joined, ids.wo, ids.bo)
    }

    /// Decoder logits for an input id sequence: row `t` depends on
    /// `inputs[..=t]` and on `memory`.
    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        memory: &FragmentFeatures,
        inputs: &[usize],
    ) -> Result<Var> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::invalid("decoder needs at least one input position"));
        }
        let m = memory.len();
        if !memory.mask.iter().any(|&b| b) {
            return Err(Error::invalid("decoder memory is fully masked"));
        }
        let table = tape.param(&self.params, self.tokens);
        let tok = tape.gather_rows(table, inputs)?;
        let pe = tape.constant(sinusoid_table(n, self.config.d_model));
        let mut h = tape.add(tok, pe)?;

        let causal: Vec<bool> = (0..n * n).map(|k| k % n <= k / n).collect();
        let cross: Vec<bool> = (0..n * m).map(|k| memory.mask[k % m]).collect();
        for layer in &self.decoder {
            let x = self.layer_norm(tape, h, &layer.ln_self)?;
            let a = self.attention(tape, &layer.self_attn, x, x, Some(&causal))?;
            h = tape.add(h, a)?;
            let x = self.layer_norm(tape, h, &layer.ln_cross)?;
            let a = self.attention(tape, &layer.cross_attn, x, memory.rows, Some(&cross))?;
            h = tape.add(h, a)?;
            let x = self.layer_norm(tape, h, &layer.ln_ffn)?;
            let f = self.linear(tape, x, layer.w1, layer.b1)?;
            let f = tape.relu(f);
            let f = self.linear(tape, f, layer.w2, layer.b2)?;
            h = tape.add(h, f)?;
        }
        let h = self.layer_norm(tape, h, &self.ln_final)?;
        let logits = match self.out_w {
            Some(w) => {
                let wv = tape.param(&self.params, w);
                tape.matmul(h, wv)?
            }
            None => tape.matmul_bt(h, table)?,
        };
        let b = tape.param(&self.params, self.out_b);
        tape.add_row(logits, b)
    }

    /// Teacher-forced logits, one row per target position. Row `t` sees the
    /// target only through positions `< t` (position 0 sees just `<sos>`).
    pub fn decode_train(
        &self,
        tape: &mut Tape,
        encoded: &EncoderOutput,
        target: &TokenSequence,
    ) -> Result<Var> {
        if target.ids.first() != Some(&SOS) {
            return Err(Error::Format("target must begin with <sos>".into()));
        }
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(SOS);
        inputs.extend_from_slice(&target.ids[..target.len() - 1]);
        self.decoder_logits(tape, &encoded.decoder_memory(), &inputs)
    }

    /// Greedy decoding from `<sos>` until `<eos>` or `max_len` tokens.
    /// Ties go to the lowest token id.
    pub fn generate(
        &self,
        tape: &mut Tape,
        encoded: &EncoderOutput,
        max_len: usize,
    ) -> Result<TokenSequence> {
        if max_len < 2 {
            return Err(Error::invalid(format!(
                "max_len must be at least 2, got {max_len}"
            )));
        }
        let memory = encoded.decoder_memory();
        let mut out = vec![SOS];
        let mut inputs = vec![SOS, SOS];
        while out.len() < max_len {
            let logits = self.decoder_logits(tape, &memory, &inputs)?;
            let last = tape.value(logits).row(inputs.len() - 1);
            let mut best = 0;
            for (id, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = id;
                }
            }
            out.push(best);
            inputs.push(best);
            if best == EOS {
                break;
            }
        }
        Ok(TokenSequence::new(out))
    }

    /// Encodes a single example in inference mode (no dropout).
    pub fn encode_example(
        &self,
        tape: &mut Tape,
        text: &TokenSequence,
        patches: &Tensor,
    ) -> Result<EncoderOutput> {
        let (t0, i0) = self.embed(tape, text, patches, None)?;
        self.encode(tape, &t0, &i0)
    }

    /// Greedy summary for one example.
    pub fn summarize(&self, text: &TokenSequence, patches: &Tensor) -> Result<TokenSequence> {
        let mut tape = Tape::new();
        let enc = self.encode_example(&mut tape, text, patches)?;
        self.generate(&mut tape, &enc, self.config.max_summary_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::{patchify, ImageTensor};
    use rand::{Rng, SeedableRng};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            layers: 2,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 12,
            vocab_size: 10,
            dropout: 0.0,
            channels: 1,
            height: 4,
            width: 4,
            patch_size: 2,
            max_summary_len: 6,
            ..ModelConfig::default()
        }
    }

    fn example(seed: u64) -> (TokenSequence, Tensor) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids = vec![SOS, 4, 5, 6, 7, EOS];
        let pixels = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
        let img = ImageTensor::new(1, 4, 4, pixels).unwrap();
        (TokenSequence::new(ids), patchify(&img, 2).unwrap())
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let a = Icaf::new(small_config(), 1).unwrap();
        let b = Icaf::new(small_config(), 1).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.by_name("encoder.layer1.image.gate.w_u").is_some());
        assert!(a.params.by_name("decoder.out.w").is_some());
    }

    #[test]
    fn shared_gates_and_tied_output() {
        let cfg = ModelConfig {
            share_gates: true,
            tie_embeddings: true,
            ..small_config()
        };
        let m = Icaf::new(cfg, 1).unwrap();
        assert!(m.params.by_name("encoder.gate.w_alpha").is_some());
        assert!(m
            .params
            .by_name("encoder.layer0.text.gate.w_alpha")
            .is_none());
        assert!(m.params.by_name("decoder.out.w").is_none());
        let (text, patches) = example(3);
        m.summarize(&text, &patches).unwrap();
    }

    #[test]
    fn single_layer_encoder_equals_one_ra_call() {
        let cfg = ModelConfig {
            layers: 1,
            ..small_config()
        };
        let m = Icaf::new(cfg, 2).unwrap();
        let (text, patches) = example(4);
        let mut tape = Tape::new();
        let (t0, i0) = m.embed(&mut tape, &text, &patches, None).unwrap();
        let enc = m.encode(&mut tape, &t0, &i0).unwrap();
        assert_eq!(enc.layers(), 1);
        let g = m.bind_gate(&mut tape, &m.encoder[0].text.gate);
        let (c, t1) = ra_forward(&mut tape, &t0, &i0, &m.settings(), &g, None).unwrap();
        assert_eq!(tape.value(c.rows), tape.value(enc.text_alignments[0].rows));
        assert_eq!(tape.value(t1.rows), tape.value(enc.text_states[0].rows));
    }

    #[test]
    fn retention_gate_freezes_second_layer_state() {
        let mut m = Icaf::new(small_config(), 5).unwrap();
        m.gate_overrides.text[1] = Some(0.0);
        let (text, patches) = example(6);
        let mut tape = Tape::new();
        let enc = m.encode_example(&mut tape, &text, &patches).unwrap();
        assert_eq!(
            tape.value(enc.text_states[1].rows),
            tape.value(enc.text_states[0].rows)
        );
    }

    #[test]
    fn decode_requires_sos() {
        let m = Icaf::new(small_config(), 7).unwrap();
        let (text, patches) = example(8);
        let mut tape = Tape::new();
        let enc = m.encode_example(&mut tape, &text, &patches).unwrap();
        let bad = TokenSequence::new(vec![4, 5]);
        assert!(matches!(
            m.decode_train(&mut tape, &enc, &bad),
            Err(Error::Format(_))
        ));
        let one = TokenSequence::new(vec![SOS]);
        let logits = m.decode_train(&mut tape, &enc, &one).unwrap();
        assert_eq!(tape.shape(logits), &[1, 10]);
    }

    #[test]
    fn rigged_eos_generates_immediately() {
        let mut m = Icaf::new(small_config(), 9).unwrap();
        let b = m.params.id("decoder.out.b").unwrap();
        m.params.get_mut(b).value.data_mut()[EOS] = 1e3;
        let (text, patches) = example(10);
        let out = m.summarize(&text, &patches).unwrap();
        assert_eq!(out.ids, vec![SOS, EOS]);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let m = Icaf::new(small_config(), 11).unwrap();
        let (text, patches) = example(12);
        let a = m.summarize(&text, &patches).unwrap();
        let b = m.summarize(&text, &patches).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert_eq!(a.ids[0], SOS);
        let mut tape = Tape::new();
        let enc = m.encode_example(&mut tape, &text, &patches).unwrap();
        assert!(m.generate(&mut tape, &enc, 1).is_err());
    }

    #[test]
    fn self_attention_variant_runs() {
        let cfg = ModelConfig {
            self_attention_in_cam: true,
            image_positional: true,
            ..small_config()
        };
        let m = Icaf::new(cfg, 13).unwrap();
        let (text, patches) = example(14);
        m.summarize(&text, &patches).unwrap();
    }

    #[test]
    fn from_params_rejects_mismatched_store() {
        let a = Icaf::new(small_config(), 1).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            ..small_config()
        };
        assert!(Icaf::from_params(cfg, a.params.clone()).is_err());
        assert!(Icaf::from_params(small_config(), a.params).is_ok());
    }
}
