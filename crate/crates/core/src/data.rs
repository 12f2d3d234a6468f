//! Synthetic paired data, the dataset directory format, encoding and
//! batching.
//!
//! Every example comes from a recipe of 2 to 4 distinct concepts. The source
//! text names the concepts among filler words, the image paints each concept's
//! pattern into that concept's grid cell, and the summary lists the concepts
//! in canonical order.
//!
//! Directory layout:
//!
//! ```text
//! manifest           key=value lines
//! vocab.txt          one token per line; line number = id
//! train.records      id \t matched \t image_ref \t source \t summary
//! dev.records
//! test.records
//! images/<id>.img    u32 LE channels, height, width, bytes-per-value (8),
//!                    then channel-major f64 LE pixels
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::representation::{patchify, ImageTensor, TokenSequence, Vocabulary, PAD};
use crate::rng;

pub const DATASET_VERSION: u32 = 1;
pub const CONCEPTS: [&str; 12] = [
    "apple", "boat", "cloud", "dog", "egg", "fish", "goat", "hat", "island", "jar", "kite", "lamp",
];
pub const BACKGROUND: f64 = 0.1;
const MIN_CONCEPTS: usize = 2;
const MAX_CONCEPTS: usize = 4;
const IMAGE_PRECISION: u32 = 8;

/// One (source, image, summary) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub source: Vec<String>,
    pub image: ImageTensor,
    pub summary: Vec<String>,
    /// False for constructed mismatches.
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    pub vocab_file: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub train: Vec<PairedExample>,
    pub dev: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[PairedExample] {
        match which {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            channels: 3,
            height: 16,
            width: 16,
            patch_size: 4,
            train: 32,
            dev: 16,
            test: 16,
            min_distractors: 2,
            max_distractors: 4,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let specials = crate::representation::SPECIAL_TOKENS.len();
        if self.vocab_size <= specials + CONCEPTS.len() {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for filler words",
                self.vocab_size
            )));
        }
        if self.patch_size == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config("image is not divisible into patches".into()));
        }
        let cells = (self.height / self.patch_size) * (self.width / self.patch_size);
        if cells < CONCEPTS.len() {
            return Err(Error::Config(format!(
                "{cells} grid cells cannot hold {} concepts",
                CONCEPTS.len()
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.min_distractors < 2 || self.max_distractors < self.min_distractors {
            return Err(Error::Config(
                "distractor range must satisfy 2 <= min <= max".into(),
            ));
        }
        Ok(())
    }
}

/// Specials, the concept nouns, then fillers `w000`, `w001`, ...
pub fn synthetic_vocabulary(vocab_size: usize) -> Result<Vocabulary> {
    let specials = crate::representation::SPECIAL_TOKENS.len();
    let fillers = vocab_size
        .checked_sub(specials + CONCEPTS.len())
        .ok_or_else(|| Error::Config(format!("vocab_size {vocab_size} is too small")))?;
    let words = CONCEPTS
        .iter()
        .map(|c| c.to_string())
        .chain((0..fillers).map(|i| format!("w{i:03}")));
    Vocabulary::from_words(words)
}

/// The fixed pixel pattern of concept `k`, flattened like a patch
/// (channel, then row, then column). Each pixel is 0 or 1 and at least one
/// is lit.
pub fn concept_pattern(k: usize, channels: usize, patch: usize) -> Vec<f64> {
    let mut r = rng::stream(0, "concept-pattern", k as u64);
    let mut p: Vec<f64> = (0..channels * patch * patch)
        .map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    if p.iter().all(|&v| v == 0.0) {
        p[0] = 1.0;
    }
    p
}

/// Grid cell (row, column) where concept `k` is drawn.
pub fn concept_cell(k: usize, grid_width: usize) -> (usize, usize) {
    (k / grid_width, k % grid_width)
}

pub fn render_image(
    concepts: &[usize],
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ImageTensor> {
    let mut img = ImageTensor::filled(channels, height, width, BACKGROUND)?;
    let grid_w = width / patch;
    for &k in concepts {
        let pattern = concept_pattern(k, channels, patch);
        let (gy, gx) = concept_cell(k, grid_w);
        for c in 0..channels {
            for y in 0..patch {
                for x in 0..patch {
                    let v = pattern[(c * patch + y) * patch + x];
                    img.set(c, gy * patch + y, gx * patch + x, v);
                }
            }
        }
    }
    Ok(img)
}

/// All concept sets of the allowed sizes, in lexicographic order by size.
fn recipe_space() -> Vec<Vec<usize>> {
    fn extend(start: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for k in start..CONCEPTS.len() {
            cur.push(k);
            extend(k + 1, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in MIN_CONCEPTS..=MAX_CONCEPTS {
        extend(0, size, &mut Vec::new(), &mut out);
    }
    out
}

pub fn recipe_capacity() -> usize {
    recipe_space().len()
}

pub fn example_id(n: usize) -> String {
    format!("ex{n:05}")
}

/// Builds all three splits from `seed`. Every example has its own recipe.
pub fn generate_synthetic(seed: u64, config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let total = config.train + config.dev + config.test;
    let mut recipes = recipe_space();
    if total > recipes.len() {
        return Err(Error::Capacity(format!(
            "{total} examples requested but only {} distinct recipes exist",
            recipes.len()
        )));
    }
    recipes.shuffle(&mut rng::stream(seed, "recipes", 0));
    let vocab = synthetic_vocabulary(config.vocab_size)?;
    let fillers = config.vocab_size - crate::representation::SPECIAL_TOKENS.len() - CONCEPTS.len();

    let mut examples = Vec::with_capacity(total);
    for (n, concepts) in recipes.into_iter().take(total).enumerate() {
        let mut r = rng::stream(seed, "example", n as u64);
        let distractors = r.random_range(config.min_distractors..=config.max_distractors);
        let mut source: Vec<String> = concepts.iter().map(|&k| CONCEPTS[k].to_string()).collect();
        for _ in 0..distractors {
            source.push(format!("w{:03}", r.random_range(0..fillers)));
        }
        source.shuffle(&mut r);
        let summary = concepts.iter().map(|&k| CONCEPTS[k].to_string()).collect();
        let image = render_image(
            &concepts,
            config.channels,
            config.height,
            config.width,
            config.patch_size,
        )?;
        examples.push(PairedExample {
            id: example_id(n),
            source,
            image,
            summary,
            matched: true,
        });
    }
    let test = examples.split_off(config.train + config.dev);
    let dev = examples.split_off(config.train);
    Ok(Dataset {
        manifest: DatasetManifest {
            version: DATASET_VERSION,
            train: config.train,
            dev: config.dev,
            test: config.test,
            seed,
            vocab_file: "vocab.txt".into(),
            channels: config.channels,
            height: config.height,
            width: config.width,
            patch_size: config.patch_size,
        },
        vocab,
        train: examples,
        dev,
        test,
    })
}

/// Concept indices whose pattern appears at their cell, in index order.
pub fn detect_concepts(img: &ImageTensor, patch: usize) -> Vec<usize> {
    let grid_w = img.width / patch;
    let cells = grid_w * (img.height / patch);
    (0..CONCEPTS.len().min(cells))
        .filter(|&k| {
            let (gy, gx) = concept_cell(k, grid_w);
            let pattern = concept_pattern(k, img.channels, patch);
            let mut idx = 0;
            let mut all = true;
            for c in 0..img.channels {
                for y in 0..patch {
                    for x in 0..patch {
                        all &= img.at(c, gy * patch + y, gx * patch + x) == pattern[idx];
                        idx += 1;
                    }
                }
            }
            all
        })
        .collect()
}

/// Number of patches that are not uniformly background.
pub fn foreground_patches(img: &ImageTensor, patch: usize) -> Result<usize> {
    let p = patchify(img, patch)?;
    Ok((0..p.rows())
        .filter(|&i| p.row(i).iter().any(|&v| v != BACKGROUND))
        .count())
}

/// The same examples with images shifted cyclically by one, so example `i`
/// carries the image of example `i + 1`.
pub fn mismatched(split: &[PairedExample]) -> Vec<PairedExample> {
    let n = split.len();
    (0..n)
        .map(|i| PairedExample {
            id: format!("{}-mm", split[i].id),
            image: split[(i + 1) % n].image.clone(),
            matched: false,
            ..split[i].clone()
        })
        .collect()
}

fn manifest_text(m: &DatasetManifest) -> String {
    format!(
        "version={}\nseed={}\ntrain={}\ndev={}\ntest={}\nvocab={}\nchannels={}\nheight={}\nwidth={}\npatch_size={}\n",
        m.version, m.seed, m.train, m.dev, m.test, m.vocab_file, m.channels, m.height, m.width, m.patch_size
    )
}

fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: "manifest".into(),
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    fn get<T: std::str::FromStr>(kv: &BTreeMap<String, (usize, String)>, key: &str) -> Result<T> {
        let (line, v) = kv.get(key).ok_or_else(|| Error::Parse {
            file: "manifest".into(),
            line: 0,
            message: format!("missing key {key}"),
        })?;
        v.parse().map_err(|_| Error::Parse {
            file: "manifest".into(),
            line: *line,
            message: format!("bad value {v:?} for {key}"),
        })
    }
    let version: u32 = get(&kv, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    Ok(DatasetManifest {
        version,
        seed: get(&kv, "seed")?,
        train: get(&kv, "train")?,
        dev: get(&kv, "dev")?,
        test: get(&kv, "test")?,
        vocab_file: get(&kv, "vocab")?,
        channels: get(&kv, "channels")?,
        height: get(&kv, "height")?,
        width: get(&kv, "width")?,
        patch_size: get(&kv, "patch_size")?,
    })
}

pub fn image_to_bytes(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len() * 8);
    for v in [img.channels, img.height, img.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&IMAGE_PRECISION.to_le_bytes());
    for p in &img.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 16 {
        return Err(Error::Format("image header truncated".into()));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
    };
    let (c, h, w, precision) = (word(0), word(1), word(2), word(3));
    if precision != IMAGE_PRECISION as usize {
        return Err(Error::Format(format!(
            "unsupported pixel precision {precision}"
        )));
    }
    let body = &bytes[16..];
    if body.len() != c * h * w * 8 {
        return Err(Error::Format(format!(
            "image body is {} bytes, expected {} for {c}x{h}x{w}",
            body.len(),
            c * h * w * 8
        )));
    }
    let pixels = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    ImageTensor::new(c, h, w, pixels)
}

fn record_line(ex: &PairedExample) -> String {
    format!(
        "{}\t{}\timages/{}.img\t{}\t{}\n",
        ex.id,
        u8::from(ex.matched),
        ex.id,
        ex.source.join(" "),
        ex.summary.join(" ")
    )
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::write(dir.join("manifest"), manifest_text(&dataset.manifest))?;
    dataset
        .vocab
        .save(&dir.join(&dataset.manifest.vocab_file))?;
    for split in Split::ALL {
        let mut text = String::new();
        for ex in dataset.split(split) {
            text.push_str(&record_line(ex));
            fs::write(
                dir.join("images").join(format!("{}.img", ex.id)),
                image_to_bytes(&ex.image),
            )?;
        }
        fs::write(dir.join(format!("{}.records", split.name())), text)?;
    }
    Ok(())
}

/// Counts reported by [`load_dataset`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub truncated: usize,
}

fn parse_records(
    dir: &Path,
    split: Split,
    word_cap: usize,
    stats: &mut LoadStats,
) -> Result<Vec<PairedExample>> {
    let file = format!("{}.records", split.name());
    let text = fs::read_to_string(dir.join(&file))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let perr = |message: String| Error::Parse {
            file: file.clone(),
            line: i + 1,
            message,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(perr(format!(
                "expected 5 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(perr("empty record id".into()));
        }
        let matched = match fields[1] {
            "1" => true,
            "0" => false,
            other => return Err(perr(format!("matched flag must be 0 or 1, got {other:?}"))),
        };
        let bytes = fs::read(dir.join(fields[2]))
            .map_err(|e| perr(format!("record {id}: cannot read image {}: {e}", fields[2])))?;
        let image = image_from_bytes(&bytes).map_err(|e| perr(format!("record {id}: {e}")))?;
        let mut source = Vocabulary::tokenize(fields[3]);
        if source.len() > word_cap {
            source.truncate(word_cap);
            stats.truncated += 1;
        }
        let summary = Vocabulary::tokenize(fields[4]);
        if summary.is_empty() {
            return Err(perr(format!("record {id}: empty summary")));
        }
        out.push(PairedExample {
            id,
            source,
            image,
            summary,
            matched,
        });
    }
    Ok(out)
}

/// Reads a dataset directory. Sources longer than `max_text_len − 2` words
/// are cut so their encoding, with `<sos>` and `<eos>`, fits `max_text_len`.
pub fn load_dataset(dir: &Path, max_text_len: usize) -> Result<(Dataset, LoadStats)> {
    if max_text_len < 3 {
        return Err(Error::invalid("max_text_len must be at least 3"));
    }
    let manifest = parse_manifest(&fs::read_to_string(dir.join("manifest"))?)?;
    let vocab = Vocabulary::load(&dir.join(&manifest.vocab_file))?;
    let mut stats = LoadStats::default();
    let train = parse_records(dir, Split::Train, max_text_len - 2, &mut stats)?;
    let dev = parse_records(dir, Split::Dev, max_text_len - 2, &mut stats)?;
    let test = parse_records(dir, Split::Test, max_text_len - 2, &mut stats)?;
    let mut seen = std::collections::HashSet::new();
    for ex in train.iter().chain(&dev).chain(&test) {
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::Format(format!(
                "record id {} appears more than once",
                ex.id
            )));
        }
    }
    Ok((
        Dataset {
            manifest,
            vocab,
            train,
            dev,
            test,
        },
        stats,
    ))
}

/// An example in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub text: TokenSequence,
    pub summary: TokenSequence,
    pub patches: Tensor,
}

pub fn encode_example(
    ex: &PairedExample,
    vocab: &Vocabulary,
    patch_size: usize,
    max_text_len: usize,
    max_summary_len: usize,
) -> Result<EncodedExample> {
    Ok(EncodedExample {
        id: ex.id.clone(),
        text: vocab.encode(&ex.source, max_text_len)?,
        summary: vocab.encode(&ex.summary, max_summary_len)?,
        patches: patchify(&ex.image, patch_size)?,
    })
}

pub fn encode_split(
    split: &[PairedExample],
    vocab: &Vocabulary,
    patch_size: usize,
    max_text_len: usize,
    max_summary_len: usize,
) -> Result<Vec<EncodedExample>> {
    split
        .iter()
        .map(|ex| encode_example(ex, vocab, patch_size, max_text_len, max_summary_len))
        .collect()
}

/// Items padded to the batch maxima.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub texts: Vec<TokenSequence>,
    pub summaries: Vec<TokenSequence>,
    pub patches: Vec<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_examples(items: &[&EncodedExample]) -> Self {
        let text_len = items.iter().map(|e| e.text.len()).max().unwrap_or(0);
        let sum_len = items.iter().map(|e| e.summary.len()).max().unwrap_or(0);
        Self {
            ids: items.iter().map(|e| e.id.clone()).collect(),
            texts: items.iter().map(|e| e.text.padded(text_len)).collect(),
            summaries: items.iter().map(|e| e.summary.padded(sum_len)).collect(),
            patches: items.iter().map(|e| e.patches.clone()).collect(),
        }
    }
}

/// Shuffles `split` under `seed` and cuts it into batches; the last batch
/// may be short.
pub fn batch_iterator(
    split: &[EncodedExample],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if split.is_empty() {
        return Err(Error::invalid("cannot batch an empty split"));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", 0));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let items: Vec<&EncodedExample> = chunk.iter().map(|&i| &split[i]).collect();
            Batch::from_examples(&items)
        })
        .collect())
}

/// Whether `seq` contains any padding.
pub fn has_padding(seq: &TokenSequence) -> bool {
    seq.ids.contains(&PAD)
}

/// Fits a linear least-squares probe from mean-pooled raw patches to concept
/// indicators on `fit`, then returns the fraction of `check` examples whose
/// concept set is recovered exactly by thresholding at 0.5.
pub fn concept_probe(fit: &[PairedExample], check: &[PairedExample], patch: usize) -> Result<f64> {
    use nalgebra::DMatrix;
    if fit.is_empty() || check.is_empty() {
        return Err(Error::invalid("probe needs nonempty fit and check sets"));
    }
    let features = |ex: &PairedExample| -> Result<Vec<f64>> {
        let p = patchify(&ex.image, patch)?;
        let mut mean = vec![0.0; p.cols()];
        for i in 0..p.rows() {
            for (m, v) in mean.iter_mut().zip(p.row(i)) {
                *m += v / p.rows() as f64;
            }
        }
        mean.push(1.0);
        Ok(mean)
    };
    let labels = |ex: &PairedExample| -> Vec<f64> {
        CONCEPTS
            .iter()
            .map(|c| f64::from(u8::from(ex.summary.iter().any(|w| w == c))))
            .collect()
    };
    let dim = features(&fit[0])?.len();
    let mut x = DMatrix::zeros(fit.len(), dim);
    let mut y = DMatrix::zeros(fit.len(), CONCEPTS.len());
    for (i, ex) in fit.iter().enumerate() {
        for (j, v) in features(ex)?.into_iter().enumerate() {
            x[(i, j)] = v;
        }
        for (j, v) in labels(ex).into_iter().enumerate() {
            y[(i, j)] = v;
        }
    }
    let w = x
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::domain(format!("probe solve failed: {e}")))?;
    let mut exact = 0;
    for ex in check {
        let f = DMatrix::from_row_slice(1, dim, &features(ex)?);
        let pred = f * &w;
        let want = labels(ex);
        if (0..CONCEPTS.len()).all(|j| (pred[(0, j)] > 0.5) == (want[j] > 0.5)) {
            exact += 1;
        }
    }
    Ok(exact as f64 / check.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train: 12,
            dev: 4,
            test: 4,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(7, &small()).unwrap();
        let b = generate_synthetic(7, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(8, &small()).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn summaries_come_from_sources_and_images() {
        let d = generate_synthetic(1, &small()).unwrap();
        for ex in d.train.iter().chain(&d.dev).chain(&d.test) {
            let src: HashSet<_> = ex.source.iter().collect();
            assert!(ex.summary.iter().all(|w| src.contains(w)));
            assert!(ex.summary.len() < ex.source.len());
            assert!((2..=4).contains(&ex.summary.len()));
            assert_eq!(foreground_patches(&ex.image, 4).unwrap(), ex.summary.len());
            let found: Vec<String> = detect_concepts(&ex.image, 4)
                .into_iter()
                .map(|k| CONCEPTS[k].to_string())
                .collect();
            assert_eq!(found, ex.summary);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        assert_eq!(recipe_capacity(), 66 + 220 + 495);
        let cfg = SyntheticConfig {
            train: 800,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_synthetic(1, &cfg),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn splits_are_disjoint() {
        let d = generate_synthetic(3, &small()).unwrap();
        let mut ids = HashSet::new();
        for ex in d.train.iter().chain(&d.dev).chain(&d.test) {
            assert!(ids.insert(ex.id.clone()));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate_synthetic(5, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let (back, stats) = load_dataset(dir.path(), 500).unwrap();
        assert_eq!(back, d);
        assert_eq!(stats.truncated, 0);
    }

    #[test]
    fn long_sources_are_truncated_with_eos() {
        let mut d = generate_synthetic(5, &small()).unwrap();
        d.train[0].source = (0..600).map(|i| format!("w{:03}", i % 400)).collect();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let (back, stats) = load_dataset(dir.path(), 500).unwrap();
        assert_eq!(stats.truncated, 1);
        let enc = encode_example(&back.train[0], &back.vocab, 4, 500, 16).unwrap();
        assert_eq!(enc.text.len(), 500);
        assert_eq!(*enc.text.ids.last().unwrap(), crate::representation::EOS);
    }

    #[test]
    fn missing_image_names_the_record() {
        let d = generate_synthetic(5, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let victim = &d.dev[1].id;
        fs::remove_file(dir.path().join("images").join(format!("{victim}.img"))).unwrap();
        match load_dataset(dir.path(), 500) {
            Err(Error::Parse {
                file,
                line,
                message,
            }) => {
                assert_eq!(file, "dev.records");
                assert_eq!(line, 2);
                assert!(message.contains(victim.as_str()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let d = generate_synthetic(5, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("test.records");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("broken line\n");
        fs::write(&path, text).unwrap();
        match load_dataset(dir.path(), 500) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batching() {
        let d = generate_synthetic(2, &small()).unwrap();
        let enc = encode_split(&d.train, &d.vocab, 4, 500, 16).unwrap();
        let one = batch_iterator(&enc, enc.len(), 9).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 12);
        let a = batch_iterator(&enc, 5, 9).unwrap();
        assert_eq!(a, batch_iterator(&enc, 5, 9).unwrap());
        assert_eq!(a.iter().map(Batch::len).collect::<Vec<_>>(), vec![5, 5, 2]);
        for b in &a {
            let l = b.texts[0].len();
            assert!(b.texts.iter().all(|t| t.len() == l));
            for t in &b.texts {
                assert_eq!(t.real_len() == t.len(), !has_padding(t));
            }
        }
        let same: Vec<EncodedExample> = (0..3).map(|_| enc[0].clone()).collect();
        let b = batch_iterator(&same, 3, 1).unwrap();
        assert!(b[0].texts.iter().all(|t| !has_padding(t)));
        assert!(batch_iterator(&[], 2, 1).is_err());
        assert!(batch_iterator(&enc, 0, 1).is_err());
    }

    #[test]
    fn mismatch_shifts_images() {
        let d = generate_synthetic(2, &small()).unwrap();
        let mm = mismatched(&d.train);
        assert_eq!(mm[0].image, d.train[1].image);
        assert_eq!(mm[11].image, d.train[0].image);
        assert!(mm.iter().all(|e| !e.matched));
    }

    #[test]
    fn probe_recovers_concepts() {
        let cfg = SyntheticConfig {
            train: 80,
            dev: 10,
            test: 20,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(4, &cfg).unwrap();
        assert_eq!(concept_probe(&d.train, &d.test, 4).unwrap(), 1.0);
    }
}
