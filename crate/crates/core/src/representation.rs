//! Text and image fragment embeddings.
//!
//! Text becomes one row per token: a learned token-table row plus a fixed
//! sinusoidal position vector. Images are cut into non-overlapping square
//! patches, flattened, and linearly projected to the model width.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<unk>", "<pad>", "<sos>", "<eos>"];

/// Token ↔ id bijection with the four reserved tokens at ids 0–3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular words; the reserved tokens are
    /// prepended automatically.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from a full token list, reserved tokens included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Format(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token {tok:?} at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace split plus lowercasing.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }

    /// `<sos> words <eos>`, cut to at most `cap` ids with `<eos>` kept last.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], cap: usize) -> Result<TokenSequence> {
        if cap < 2 {
            return Err(Error::invalid(
                "length cap must leave room for <sos> and <eos>",
            ));
        }
        let keep = words.len().min(cap - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(SOS);
        ids.extend(words[..keep].iter().map(|w| self.id(w.as_ref())));
        ids.push(EOS);
        Ok(TokenSequence::new(ids))
    }

    /// Words for the ids of `seq`, skipping padding and the reserved
    /// sequence markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != SOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Token ids with a validity mask (false only on a trailing padding suffix).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::shape("token ids and mask differ in length"));
        }
        if let Some(first_pad) = mask.iter().position(|m| !m) {
            if mask[first_pad..].iter().any(|&m| m) {
                return Err(Error::invalid(
                    "mask must be false only on a trailing suffix",
                ));
            }
        }
        Ok(Self { ids, mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Extends to `len` with `<pad>` entries masked out.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.mask.push(false);
        }
        out
    }

    /// The real tokens only.
    pub fn unpadded(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// A `C×H×W` image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels * height * width != pixels.len() || pixels.is_empty() {
            return Err(Error::shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Per-fragment feature rows living on a tape, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentFeatures {
    pub rows: Var,
    pub mask: Vec<bool>,
    pub modality: Modality,
}

impl FragmentFeatures {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 − rate)`.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(Self { rate, rng })
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        let mask: Vec<f64> = (0..numel)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

/// Fixed sinusoidal position table: `sin(p / 10000^(2i/d))` on even dims,
/// `cos(...)` on odd dims.
pub fn sinusoid_table(positions: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; positions * dim];
    for p in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(positions, dim, data).expect("sinusoid table shape")
}

/// Token rows plus position vectors; mask copied from `seq`.
pub fn embed_text(
    tape: &mut Tape,
    seq: &TokenSequence,
    token_table: Var,
    dropout: Option<&mut Dropout>,
) -> Result<FragmentFeatures> {
    let (vocab, dim) = tape.value(token_table).dims2();
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::OutOfVocabulary {
            id: bad,
            vocab_size: vocab,
        });
    }
    let tokens = tape.gather_rows(token_table, &seq.ids)?;
    let positions = tape.constant(sinusoid_table(seq.len(), dim));
    let mut rows = tape.add(tokens, positions)?;
    if let Some(d) = dropout {
        rows = d.apply(tape, rows)?;
    }
    Ok(FragmentFeatures {
        rows,
        mask: seq.mask.clone(),
        modality: Modality::Text,
    })
}

/// Cuts `img` into `P×P` patches in row-major patch order; each patch is
/// flattened channel-major, then row, then column. Result is `M × C·P²`.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Tensor> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let dim = img.channels * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..img.channels {
                for y in 0..patch {
                    for x in 0..patch {
                        data.push(img.at(c, py * patch + y, px * patch + x));
                    }
                }
            }
        }
    }
    Tensor::matrix(gh * gw, dim, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ImageTensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::shape("geometry not divisible by patch size"));
    }
    let (gh, gw) = (height / patch, width / patch);
    if patches.dims2() != (gh * gw, channels * patch * patch) {
        return Err(Error::shape(format!(
            "patch matrix {:?} does not match {channels}x{height}x{width}/{patch}",
            patches.shape()
        )));
    }
    let mut img = ImageTensor {
        channels,
        height,
        width,
        pixels: vec![0.0; channels * height * width],
    };
    let mut it = patches.data().iter();
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..channels {
                for y in 0..patch {
                    for x in 0..patch {
                        img.set(c, py * patch + y, px * patch + x, *it.next().unwrap());
                    }
                }
            }
        }
    }
    Ok(img)
}

/// `patches · projection`, tagged as image fragments with no padding.
pub fn project_patches(tape: &mut Tape, patches: Var, projection: Var) -> Result<FragmentFeatures> {
    let (m, raw) = tape.value(patches).dims2();
    let (rows, _) = tape.value(projection).dims2();
    if raw != rows || tape.value(projection).rank() != 2 {
        return Err(Error::shape(format!(
            "projection {:?} does not accept patches of width {raw}",
            tape.shape(projection)
        )));
    }
    let rows = tape.matmul(patches, projection)?;
    Ok(FragmentFeatures {
        rows,
        mask: vec![true; m],
        modality: Modality::Image,
    })
}
