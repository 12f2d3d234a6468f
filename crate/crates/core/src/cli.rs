//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checks;
use crate::config::RunConfig;
use crate::data::{
    encode_split, generate_synthetic, image_from_bytes, load_dataset, save_dataset, Dataset,
    EncodedExample, PairedExample,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    corpus_report, embedding_relevance, m_sim, score_example, EvalReport, ExampleScores, Relevance,
};
use crate::model::{Checkpoint, Icaf};
use crate::numerics::Tape;
use crate::representation::{patchify, project_patches, Vocabulary};
use crate::training::Trainer;

pub const LOG_DIR_ENV: &str = "ICAF_LOG_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "icaf",
    version,
    about = "Multimodal summarization with iterative contrastive alignment"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` assignments applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, logs and a dev report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Generate a synthetic dataset into `<out>/data` even if data.dir is set.
        #[arg(long)]
        gen_data: bool,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Greedy summaries for a records file, one `id<TAB>summary` line each.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Records file; image paths are resolved against its directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Score hypotheses against references.
    Eval {
        /// Lines of `id<TAB>text` (or a records file).
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Enables the embedding relevance scores.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory holding the images, for m_sim.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        m_sim: bool,
        /// Silence the warning printed when m_sim cannot be computed.
        #[arg(long)]
        quiet: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Finite-difference gradient checks of every model stage.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Parameter counts for a configuration.
    ModelInfo {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Clobber(_) => 2,
        Error::NumericDomain(_) | Error::NonFiniteLoss { .. } | Error::CheckInvalid(_) => 4,
        _ => 3,
    }
}

/// Refuses to reuse a nonempty output path unless `overwrite` is set, in
/// which case the old contents are removed.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if nonempty {
            if !overwrite {
                return Err(Error::Clobber(dir.to_path_buf()));
            }
            if dir.is_dir() {
                fs::remove_dir_all(dir)?;
            } else {
                fs::remove_file(dir)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn prepare_file(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Clobber(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = cfg.to_text();
    fs::write(out.join("effective.cfg"), &text)?;
    eprintln!("effective config:\n{text}");
    Ok(())
}

fn obtain_dataset(cfg: &RunConfig, out: &Path, gen_data: bool) -> Result<Dataset> {
    match (&cfg.data.dir, gen_data) {
        (Some(dir), false) => {
            let (d, stats) = load_dataset(dir, cfg.model.max_text_len)?;
            if stats.truncated > 0 {
                eprintln!(
                    "truncated {} source texts to {} tokens",
                    stats.truncated, cfg.model.max_text_len
                );
            }
            Ok(d)
        }
        _ => {
            let d = generate_synthetic(cfg.seed, &cfg.synthetic())?;
            save_dataset(&d, &out.join("data"))?;
            Ok(d)
        }
    }
}

fn encode(d: &Dataset, split: &[PairedExample], model: &Icaf) -> Result<Vec<EncodedExample>> {
    encode_split(
        split,
        &d.vocab,
        model.config.patch_size,
        model.config.max_text_len,
        model.config.max_summary_len,
    )
}

fn write_report(
    report: &EvalReport,
    scores: &[ExampleScores],
    out: &Path,
    prefix: &str,
) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join(format!("{prefix}report.json")), json + "\n")?;
    let mut per = String::new();
    for s in scores {
        per.push_str(&serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?);
        per.push('\n');
    }
    fs::write(out.join(format!("{prefix}examples.jsonl")), per)?;
    fs::write(out.join(format!("{prefix}report.txt")), report_text(report))?;
    Ok(())
}

pub fn report_text(r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "examples           {}\nrouge-1 P/R/F      {:.4} {:.4} {:.4}\nrouge-2 P/R/F      {:.4} {:.4} {:.4}\nrouge-l P/R/F      {:.4} {:.4} {:.4}\nembedding average  {}\nembedding extrema  {}\nembedding greedy   {}\nm_sim              {}\n",
        r.examples,
        r.rouge1.precision, r.rouge1.recall, r.rouge1.f1,
        r.rouge2.precision, r.rouge2.recall, r.rouge2.f1,
        r.rouge_l.precision, r.rouge_l.recall, r.rouge_l.f1,
        opt(r.relevance_average),
        opt(r.relevance_extrema),
        opt(r.relevance_greedy),
        opt(r.m_sim),
    )
}

/// Greedy summaries of `examples` as `(id, words)`.
pub fn summarize_all(
    model: &Icaf,
    vocab: &Vocabulary,
    examples: &[EncodedExample],
) -> Result<Vec<(String, Vec<String>)>> {
    examples
        .iter()
        .map(|ex| {
            let out = model.summarize(&ex.text, &ex.patches)?;
            Ok((ex.id.clone(), vocab.decode(&out.ids)))
        })
        .collect()
}

fn cmd_train(
    config: &ConfigArgs,
    out: &Path,
    gen_data: bool,
    resume: Option<&Path>,
    overwrite: bool,
) -> Result<()> {
    let cfg = config.resolve()?;
    prepare_dir(out, overwrite)?;
    echo_config(&cfg, out)?;
    let data = obtain_dataset(&cfg, out, gen_data)?;
    let log_dir = std::env::var_os(LOG_DIR_ENV).map(PathBuf::from);
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p)?)?,
        None => {
            let model = Icaf::new(cfg.model.clone(), cfg.seed)?;
            Trainer::new(model, cfg.train.clone(), data.vocab.clone())?
        }
    }
    .with_output(out.to_path_buf(), log_dir);
    let train = encode(&data, &data.train, &trainer.model)?;
    let dev = encode(&data, &data.dev, &trainer.model)?;
    let dev_opt = (!dev.is_empty()).then_some(dev.as_slice());
    trainer.fit(&train, dev_opt)?;
    if let Some(last) = trainer.history.last() {
        eprintln!(
            "finished epoch {}: total {:.5} gene {:.5} lr {:e}",
            trainer.epoch, last.total, last.gene, trainer.optimizer.lr
        );
    }
    if !dev.is_empty() {
        let hyps = summarize_all(&trainer.model, &trainer.vocab, &dev)?;
        let mut scores = Vec::with_capacity(dev.len());
        for ((id, hyp), ex) in hyps.iter().zip(&data.dev) {
            scores.push(score_example(id, hyp, &ex.summary)?);
        }
        let report = corpus_report(&scores)?;
        write_report(&report, &scores, out, "dev_")?;
        eprint!("{}", report_text(&report));
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<PairedExample>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            file: file.clone(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(perr(format!(
                "expected 5 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let bytes = fs::read(base.join(fields[2])).map_err(|e| {
            perr(format!(
                "record {}: cannot read image {}: {e}",
                fields[0], fields[2]
            ))
        })?;
        out.push(PairedExample {
            id: fields[0].to_string(),
            matched: fields[1] == "1",
            image: image_from_bytes(&bytes)
                .map_err(|e| perr(format!("record {}: {e}", fields[0])))?,
            source: Vocabulary::tokenize(fields[3]),
            summary: Vocabulary::tokenize(fields[4]),
        });
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<(Icaf, Vocabulary)> {
    let ck = Checkpoint::load(path)?;
    let vocab = Vocabulary::from_tokens(ck.vocab)?;
    let model = Icaf::from_params(ck.model_config, ck.params)?;
    Ok((model, vocab))
}

fn cmd_generate(checkpoint: &Path, input: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let (model, vocab) = load_model(checkpoint)?;
    let records = read_records(input)?;
    prepare_file(out, overwrite)?;
    let mut text = String::new();
    for ex in &records {
        let mut words = ex.source.clone();
        words.truncate(model.config.max_text_len - 2);
        let enc = crate::data::encode_example(
            &PairedExample {
                source: words,
                ..ex.clone()
            },
            &vocab,
            model.config.patch_size,
            model.config.max_text_len,
            model.config.max_summary_len,
        )?;
        let summary = model.summarize(&enc.text, &enc.patches)?;
        text.push_str(&format!(
            "{}\t{}\n",
            ex.id,
            vocab.decode(&summary.ids).join(" ")
        ));
    }
    fs::write(out, text)?;
    Ok(())
}

/// `(id, words)` per nonempty line. One field is text with the line number
/// as id; with more fields the first is the id and the last the text.
pub fn read_text_lines(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() == 1 {
                ((i + 1).to_string(), Vocabulary::tokenize(fields[0]))
            } else {
                (
                    fields[0].to_string(),
                    Vocabulary::tokenize(fields[fields.len() - 1]),
                )
            }
        })
        .collect())
}

/// Loaded resources for the optional metrics.
struct Embeddings {
    model: Icaf,
    vocab: Vocabulary,
}

impl Embeddings {
    fn relevance(&self, hyp: &[String], reference: &[String]) -> Result<Relevance> {
        if hyp.is_empty() {
            return Ok(Relevance::default());
        }
        let h: Vec<usize> = hyp.iter().map(|w| self.vocab.id(w)).collect();
        let r: Vec<usize> = reference.iter().map(|w| self.vocab.id(w)).collect();
        embedding_relevance(&h, &r, self.model.token_table())
    }

    fn m_sim(&self, ex: &PairedExample, hyp: &[String]) -> Result<f64> {
        if hyp.is_empty() {
            return Ok(0.0);
        }
        let patches = patchify(&ex.image, self.model.config.patch_size)?;
        let mut tape = Tape::new();
        let raw = tape.constant(patches);
        let proj = tape.constant(self.model.patch_projection().clone());
        let i0 = project_patches(&mut tape, raw, proj)?;
        let ids: Vec<usize> = hyp.iter().map(|w| self.vocab.id(w)).collect();
        m_sim(
            tape.value(i0.rows),
            &i0.mask,
            &ids,
            self.model.token_table(),
        )
    }
}

/// Returns whether an m_sim request could not be honoured.
#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    hyp: &Path,
    reference: &Path,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    want_m_sim: bool,
    quiet: bool,
    out: &Path,
    overwrite: bool,
) -> Result<bool> {
    let hyps = read_text_lines(hyp)?;
    let refs = read_text_lines(reference)?;
    if hyps.len() != refs.len() {
        return Err(Error::Format(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            hyps.len(),
            reference.display(),
            refs.len()
        )));
    }
    let emb = match checkpoint {
        Some(p) => {
            let (model, vocab) = load_model(p)?;
            Some(Embeddings { model, vocab })
        }
        None => None,
    };
    let mut m_sim_missing = false;
    let images: Option<std::collections::HashMap<String, PairedExample>> = if want_m_sim {
        match (dataset, &emb) {
            (Some(dir), Some(_)) => {
                let (d, _) = load_dataset(dir, usize::MAX)?;
                Some(
                    d.train
                        .into_iter()
                        .chain(d.dev)
                        .chain(d.test)
                        .map(|e| (e.id.clone(), e))
                        .collect(),
                )
            }
            _ => {
                m_sim_missing = true;
                if !quiet {
                    eprintln!("error: m_sim needs both --dataset and --checkpoint; reporting the other metrics without it");
                }
                None
            }
        }
    } else {
        None
    };
    prepare_dir(out, overwrite)?;
    let mut scores = Vec::with_capacity(hyps.len());
    for ((id, h), (_, r)) in hyps.iter().zip(&refs) {
        let mut s = score_example(id, h, r)?;
        if let Some(e) = &emb {
            s.relevance = Some(e.relevance(h, r)?);
            if let Some(imgs) = &images {
                let ex = imgs
                    .get(id)
                    .ok_or_else(|| Error::Format(format!("no dataset record with id {id}")))?;
                s.m_sim = Some(e.m_sim(ex, h)?);
            }
        }
        scores.push(s);
    }
    if scores.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let report = corpus_report(&scores)?;
    write_report(&report, &scores, out, "")?;
    print!("{}", report_text(&report));
    std::io::stdout().flush()?;
    Ok(m_sim_missing)
}

fn cmd_gen_data(config: &ConfigArgs, out: &Path, overwrite: bool) -> Result<()> {
    let cfg = config.resolve()?;
    let d = generate_synthetic(cfg.seed, &cfg.synthetic())?;
    prepare_dir(out, overwrite)?;
    save_dataset(&d, out)?;
    eprintln!(
        "wrote {} train, {} dev, {} test examples to {}",
        d.train.len(),
        d.dev.len(),
        d.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_grad_check(instances: usize, seed: u64, tolerance: f64) -> Result<bool> {
    let mut ok = true;
    for op in checks::OPS {
        let c = checks::check_op(op, instances, seed, tolerance)?;
        println!(
            "{:<16} {} instances  max rel err {:.3e}  {}",
            c.op,
            c.instances,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
        ok &= c.passed();
    }
    Ok(ok)
}

fn cmd_model_info(config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve()?;
    let model = Icaf::new(cfg.model, cfg.seed)?;
    let info = model.info();
    println!(
        "{}",
        serde_json::to_string_pretty(&info).map_err(|e| Error::Format(e.to_string()))?
    );
    Ok(())
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result: Result<i32> = match &cli.command {
        Command::Train {
            config,
            out,
            gen_data,
            resume,
            overwrite,
        } => cmd_train(config, out, *gen_data, resume.as_deref(), *overwrite).map(|_| 0),
        Command::Generate {
            checkpoint,
            input,
            out,
            overwrite,
        } => cmd_generate(checkpoint, input, out, *overwrite).map(|_| 0),
        Command::Eval {
            hyp,
            reference,
            checkpoint,
            dataset,
            m_sim,
            quiet,
            out,
            overwrite,
        } => cmd_eval(
            hyp,
            reference,
            checkpoint.as_deref(),
            dataset.as_deref(),
            *m_sim,
            *quiet,
            out,
            *overwrite,
        )
        .map(|missing| if missing { 3 } else { 0 }),
        Command::GenData {
            config,
            out,
            overwrite,
        } => cmd_gen_data(config, out, *overwrite).map(|_| 0),
        Command::GradCheck {
            instances,
            seed,
            tolerance,
        } => cmd_grad_check(*instances, *seed, *tolerance).map(|ok| if ok { 0 } else { 4 }),
        Command::ModelInfo { config } => cmd_model_info(config).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
