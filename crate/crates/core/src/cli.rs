//! Command-line surface: run configuration files and the eight subcommands.
//!
//! A run configuration is plain text, one `key = value` per line, `#`
//! starting a comment. Every key of [`RunConfig::pairs`] is accepted;
//! anything else is an error. `--set key=value` overrides a file value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::classify::{find_head, latent_classify, predict, ClassifierConfig};
use crate::corpus::{Corpus, Split, Vocab, BOS, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::generate::{analogy, decode_sample, interpolate, Strategy};
use crate::latent::ClassConditionalPrior;
use crate::metrics::{
    active_units, bleu, bleu_f1, content_tokens, g_score, mi_estimate, neg_elbo_eval, ppl_from_elbo, self_bleu,
    ElboSampling, EvalReport, AU_THRESHOLD,
};
use crate::pe::{ParamsReport, TrainMode};
use crate::schedule::TrainSchedule;
use crate::train::{StepRecord, TrainConfig, Trainer};
use crate::vae::{normal_noise, AdaVae};
use crate::ModelConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

/// Model architecture plus everything a run needs besides the corpus bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `vocab_size` is ignored here; it is derived from the training corpus.
    pub model: ModelConfig,
    /// Most frequent corpus words kept; the reserved tokens come on top.
    pub max_vocab: usize,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub free_bits: f64,
    pub mode: TrainMode,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Posterior draws per sentence for MI.
    pub mi_samples: usize,
    /// Posterior draws per sentence for −ELBO (0: use μ).
    pub elbo_samples: usize,
    pub max_len: usize,
    pub classifier_steps: usize,
    pub classifier_lr: f64,
    pub classifier_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(1024),
            max_vocab: 1020,
            train: None,
            test: None,
            out: None,
            seed: 0,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            free_bits: 0.5,
            mode: TrainMode::Pe,
            checkpoint_every: 500,
            mi_samples: 10,
            elbo_samples: 10,
            max_len: 30,
            classifier_steps: 300,
            classifier_lr: 3e-3,
            classifier_batch: 16,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Keys that change the training trace; a resumed run must agree on them.
    const TRACE_KEYS: [&'static str; 7] = ["max_vocab", "seed", "steps", "batch_size", "lr", "free_bits", "mode"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "vocab_size" => {
                return Err(Error::Config(
                    "`vocab_size` is derived from the training corpus; set `max_vocab` instead".into(),
                ))
            }
            "max_vocab" => self.max_vocab = parse(key, value)?,
            "train" => self.train = opt_path(value),
            "test" => self.test = opt_path(value),
            "out" => self.out = opt_path(value),
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "free_bits" => self.free_bits = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "mi_samples" => self.mi_samples = parse(key, value)?,
            "elbo_samples" => self.elbo_samples = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "classifier_steps" => self.classifier_steps = parse(key, value)?,
            "classifier_lr" => self.classifier_lr = parse(key, value)?,
            "classifier_batch" => self.classifier_batch = parse(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown configuration key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.steps == 0 || self.max_vocab == 0 {
            return Err(Error::Config("steps, batch_size and max_vocab must be positive".into()));
        }
        if !(self.lr > 0.0 && self.free_bits >= 0.0 && self.classifier_lr > 0.0) {
            return Err(Error::Config(
                "lr and classifier_lr must be positive, free_bits non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its resolved value, model keys first.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut out: Vec<_> = self
            .model
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| *k != "vocab_size")
            .collect();
        out.extend([
            ("max_vocab", self.max_vocab.to_string()),
            ("train", path(&self.train)),
            ("test", path(&self.test)),
            ("out", path(&self.out)),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("free_bits", self.free_bits.to_string()),
            ("mode", self.mode.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("mi_samples", self.mi_samples.to_string()),
            ("elbo_samples", self.elbo_samples.to_string()),
            ("max_len", self.max_len.to_string()),
            ("classifier_steps", self.classifier_steps.to_string()),
            ("classifier_lr", self.classifier_lr.to_string()),
            ("classifier_batch", self.classifier_batch.to_string()),
        ]);
        out
    }

    /// The resolved file written next to run outputs. The derived
    /// vocabulary size is recorded as a comment so the file reloads.
    pub fn to_text(&self, vocab_size: Option<usize>) -> String {
        let mut s = String::new();
        if let Some(v) = vocab_size {
            let _ = writeln!(s, "# vocab_size = {v} (derived from the training corpus)");
        }
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule::new(self.steps, self.lr, self.free_bits)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::new(self.schedule(), self.batch_size, self.seed, self.mode)
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            steps: self.classifier_steps,
            batch_size: self.classifier_batch,
            lr: self.classifier_lr,
            seed: self.seed,
        }
    }

    /// Resolved settings as checkpoint metadata (`run.<key>`).
    pub fn meta(&self) -> BTreeMap<String, String> {
        self.pairs().into_iter().map(|(k, v)| (format!("run.{k}"), v)).collect()
    }
}

#[derive(Parser, Debug)]
#[command(name = "adavae", version, about = "Adapter-tuned transformer VAE at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Shorthand for `--set mode=...` (fb, pe or ft).
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Shorthand for `--set seed=...`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(m) = &self.mode {
            cfg.set("mode", m)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on `train`; writes config.txt, train.log and checkpoint.bin into `out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from `out`/checkpoint.bin.
        #[arg(long)]
        resume: bool,
    },
    /// Report −ELBO, PPL, MI and AU on `test`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Add accuracy and the BLEU family for label-conditioned generation
        /// (needs a checkpoint written by `classify`).
        #[arg(long)]
        labels: bool,
    },
    /// Decode `n` latents drawn from a class prior or from N(0, I).
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "prior")]
        label: Option<usize>,
        /// Sample from the standard normal prior.
        #[arg(long)]
        prior: bool,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        /// `greedy` or `topK`.
        #[arg(long, default_value = "greedy")]
        strategy: String,
    },
    /// Greedy decodes along the segment between μ(a) and μ(b).
    Interpolate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        a: String,
        b: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Decodes μ(b) − μ(a) + μ(c).
    Analogy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        a: String,
        b: String,
        c: String,
    },
    /// Train a latent classifier on labeled `train`, report accuracy on `test`.
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trainable versus total parameters per component.
    ParamsReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Take the architecture from a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Count the GPT-2-small shaped 8/12-layer configuration.
        #[arg(long, conflicts_with = "checkpoint")]
        paper_shaped: bool,
    },
    /// Write μ(x) and log σ(x) for every sentence of a corpus.
    ExportLatents {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to encode (default: `test`, then `train`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

/// Stable process exit codes.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 4,
        Error::Data { .. }
        | Error::Io(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointShape { .. }
        | Error::CheckpointTruncated { .. }
        | Error::CheckpointIntegrity(_)
        | Error::CheckpointFormat(_) => 3,
        _ => 2,
    }
}

/// Parses the process arguments, runs, and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs one parsed command, writing its results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { cfg, resume } => cmd_train(&cfg.resolve()?, resume, out),
        Command::Eval {
            cfg,
            checkpoint,
            labels,
        } => cmd_eval(&cfg.resolve()?, &checkpoint, labels, out),
        Command::Generate {
            cfg,
            checkpoint,
            label,
            prior,
            n,
            strategy,
        } => {
            if label.is_none() && !prior {
                return Err(Error::Config("generate needs --label or --prior".into()));
            }
            cmd_generate(&cfg.resolve()?, &checkpoint, label, n, strategy.parse()?, out)
        }
        Command::Interpolate {
            cfg,
            checkpoint,
            a,
            b,
            steps,
        } => cmd_interpolate(&cfg.resolve()?, &checkpoint, &a, &b, steps, out),
        Command::Analogy {
            cfg,
            checkpoint,
            a,
            b,
            c,
        } => cmd_analogy(&cfg.resolve()?, &checkpoint, [&a, &b, &c], out),
        Command::Classify { cfg, checkpoint } => cmd_classify(&cfg.resolve()?, &checkpoint, out),
        Command::ParamsReport {
            cfg,
            checkpoint,
            paper_shaped,
        } => {
            let run = cfg.resolve()?;
            let model = match (checkpoint, paper_shaped) {
                (Some(p), _) => load_checkpoint(&p)?.model,
                (None, true) => ModelConfig::paper_shaped(),
                (None, false) => {
                    let mut m = run.model.clone();
                    m.vocab_size = run.max_vocab + RESERVED.len();
                    m
                }
            };
            writeln!(out, "{}", ParamsReport::for_config(&model, run.mode))?;
            Ok(())
        }
        Command::ExportLatents { cfg, checkpoint, input } => {
            let run = cfg.resolve()?;
            let path = input
                .or_else(|| run.test.clone())
                .or_else(|| run.train.clone())
                .ok_or_else(|| Error::Config("export-latents needs --input, `test` or `train`".into()))?;
            cmd_export_latents(&run, &checkpoint, &path, out)
        }
    }
}

fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    if !path.is_file() {
        return Err(Error::Config(format!("corpus file {} not found", path.display())));
    }
    Corpus::load(path, split)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

fn load_model(path: &Path) -> Result<(Checkpoint, AdaVae)> {
    let ckpt = load_checkpoint(path)?;
    let model = AdaVae::from_store(ckpt.model.clone(), ckpt.params.clone())?;
    Ok((ckpt, model))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set (config file or --set {key}=...)")))
}

fn write_resolved(run: &RunConfig, vocab_size: Option<usize>) -> Result<()> {
    if let Some(dir) = &run.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), run.to_text(vocab_size))?;
    }
    Ok(())
}

fn labeled(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Result<Vec<(Vec<usize>, usize)>> {
    if !corpus.is_labeled() {
        return Err(Error::Config(format!("the {} corpus has no labels", corpus.split)));
    }
    Ok(corpus
        .encode_all(vocab, max_len)
        .into_iter()
        .zip(corpus.labels())
        .map(|(t, l)| (t, l.unwrap_or(0)))
        .collect())
}

/// Fits one Gaussian per label over μ(x) of the training sentences.
pub fn fit_prior(model: &AdaVae, data: &[(Vec<usize>, usize)]) -> Result<ClassConditionalPrior> {
    let z: Vec<(Vec<f64>, usize)> = data
        .iter()
        .map(|(t, l)| Ok((model.encode(t)?.0, *l)))
        .collect::<Result<_>>()?;
    ClassConditionalPrior::fit(&z)
}

/// Keeps the header and every logged step below `step`.
fn truncate_log(path: &Path, step: u64) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = format!("{}\n", StepRecord::HEADER);
    for line in text.lines().skip(1) {
        match line.split('\t').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(t) if t < step => {
                kept.push_str(line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    Ok(kept)
}

pub fn cmd_train(run: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<()> {
    let train_path = required(&run.train, "train")?;
    let dir = required(&run.out, "out")?.to_path_buf();
    let corpus = load_corpus(train_path, Split::Train)?;
    let vocab = Vocab::build(&corpus, run.max_vocab)?;
    let mut model_cfg = run.model.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.validate()?;
    let sentences = corpus.encode_all(&vocab, model_cfg.max_seq_len);
    write_resolved(run, Some(vocab.len()))?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join(LOG_FILE);
    let (mut trainer, log_prefix) = if resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        ckpt.check_config(&model_cfg)?;
        if ckpt.vocab != vocab {
            return Err(Error::Config(
                "training corpus vocabulary differs from the checkpoint".into(),
            ));
        }
        let meta = run.meta();
        for k in RunConfig::TRACE_KEYS {
            let k = format!("run.{k}");
            if ckpt.meta.get(&k) != meta.get(&k) {
                return Err(Error::Config(format!(
                    "cannot resume: `{}` is {:?} in the checkpoint but {:?} now",
                    &k[4..],
                    ckpt.meta.get(&k),
                    meta.get(&k)
                )));
            }
        }
        let step = ckpt.step;
        (
            Trainer::resume(ckpt, sentences, run.train_config())?,
            truncate_log(&log_path, step)?,
        )
    } else {
        let model = AdaVae::new(model_cfg, run.seed)?;
        (
            Trainer::new(model, sentences, run.train_config())?,
            format!("{}\n", StepRecord::HEADER),
        )
    };

    let mut log = fs::File::create(&log_path)?;
    log.write_all(log_prefix.as_bytes())?;
    let every = if run.checkpoint_every == 0 {
        run.steps
    } else {
        run.checkpoint_every
    } as u64;
    while !trainer.is_done() {
        let next = (trainer.step / every + 1) * every;
        let result = trainer.run_until(next, &mut log);
        if let Err(e) = result {
            log.flush()?;
            return Err(e);
        }
        trainer.checkpoint(&vocab, run.meta()).save(&ckpt_path)?;
    }
    log.flush()?;

    let mut ckpt = trainer.checkpoint(&vocab, run.meta());
    if corpus.is_labeled() {
        let data = labeled(&corpus, &vocab, trainer.model.config.max_seq_len)?;
        ckpt.prior = Some(fit_prior(&trainer.model, &data)?);
    }
    ckpt.save(&ckpt_path)?;
    let acc = trainer.model.teacher_forced_accuracy(&trainer.sentences)?;
    writeln!(
        out,
        "trained {} steps; teacher-forced accuracy {acc:.4}; checkpoint {}",
        trainer.step,
        ckpt_path.display()
    )?;
    Ok(())
}

/// −ELBO, PPL, MI and AU of `model` over `sentences`.
pub fn evaluate(model: &AdaVae, sentences: &[Vec<usize>], run: &RunConfig) -> Result<EvalReport> {
    let sampling = match run.elbo_samples {
        0 => ElboSampling::Mean,
        n => ElboSampling::Samples {
            samples: n,
            seed: run.seed,
        },
    };
    let elbo = neg_elbo_eval(model, sentences, sampling)?;
    Ok(EvalReport {
        neg_elbo: elbo.total_nats,
        neg_elbo_per_sentence: elbo.per_sentence_nats,
        ppl: ppl_from_elbo(elbo.total_nats, elbo.token_count),
        mi: mi_estimate(model, sentences, run.mi_samples, run.seed)?,
        au: active_units(model, sentences, AU_THRESHOLD)?,
        accuracy: None,
        bleu: None,
        self_bleu: None,
        g_score: None,
        bleu_f1: None,
    })
}

fn cmd_eval(run: &RunConfig, checkpoint: &Path, with_labels: bool, out: &mut dyn Write) -> Result<()> {
    let test_path = required(&run.test, "test")?;
    let (ckpt, model) = load_model(checkpoint)?;
    let corpus = load_corpus(test_path, Split::Test)?;
    let sentences = corpus.encode_all(&ckpt.vocab, model.config.max_seq_len);
    let mut report = evaluate(&model, &sentences, run)?;

    if with_labels {
        let data = labeled(&corpus, &ckpt.vocab, model.config.max_seq_len)?;
        let head = find_head(&model.store)
            .map_err(|_| Error::Config("checkpoint has no classifier head; run `classify` first".into()))?;
        let prior = ckpt
            .prior
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no class prior; train on a labeled corpus".into()))?;
        let mut refs: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        for (t, l) in &data {
            refs.entry(*l).or_default().push(content_tokens(t));
        }
        let (mut hits, mut hyps, mut hyp_refs) = (0, Vec::new(), Vec::new());
        for (i, (_, label)) in data.iter().enumerate() {
            let z = prior.sample(*label, run.seed.wrapping_add(i as u64))?;
            let gen = decode_sample(&model, Some(&z), run.max_len, Strategy::Greedy)?;
            let mut ids = vec![BOS];
            ids.extend(&gen);
            ids.push(EOS);
            if predict(&model, &head, &ids)? == *label {
                hits += 1;
            }
            hyps.push(gen);
            hyp_refs.push(refs[label].clone());
        }
        let acc = hits as f64 / data.len() as f64;
        let b = bleu(&hyps, &hyp_refs, 4)?;
        let sb = self_bleu(&hyps, 4)?;
        report.accuracy = Some(acc);
        report.bleu = Some(b);
        report.self_bleu = Some(sb);
        report.g_score = Some(g_score(acc, b));
        report.bleu_f1 = Some(bleu_f1(b, sb));
    }

    let mut text = String::new();
    let _ = writeln!(text, "{:<24} {:>16}", "metric", "value");
    for (k, v) in report.pairs() {
        let _ = writeln!(text, "{k:<24} {v:>16}");
    }
    let _ = writeln!(text);
    let _ = write!(text, "{report}");
    out.write_all(text.as_bytes())?;
    if let Some(dir) = &run.out {
        write_resolved(run, Some(ckpt.vocab.len()))?;
        fs::write(dir.join("eval.txt"), report.to_string())?;
    }
    Ok(())
}

fn cmd_generate(
    run: &RunConfig,
    checkpoint: &Path,
    label: Option<usize>,
    n: usize,
    strategy: Strategy,
    out: &mut dyn Write,
) -> Result<()> {
    let (ckpt, model) = load_model(checkpoint)?;
    let prior = match label {
        Some(_) => Some(
            ckpt.prior
                .as_ref()
                .ok_or_else(|| Error::Config("checkpoint has no class prior; train on a labeled corpus".into()))?,
        ),
        None => None,
    };
    for i in 0..n as u64 {
        let seed = run.seed.wrapping_add(i);
        let z = match (label, prior) {
            (Some(l), Some(p)) => p.sample(l, seed)?,
            _ => normal_noise(run.seed, i, model.config.latent_dim),
        };
        let strategy = match strategy {
            Strategy::TopK { k, .. } => Strategy::TopK { k, seed },
            s => s,
        };
        let tokens = decode_sample(&model, Some(&z), run.max_len, strategy)?;
        writeln!(out, "{}", ckpt.vocab.decode(&tokens))?;
    }
    Ok(())
}

fn encode_text(ckpt: &Checkpoint, text: &str) -> Vec<usize> {
    ckpt.vocab.encode(text, ckpt.model.max_seq_len)
}

fn cmd_interpolate(
    run: &RunConfig,
    checkpoint: &Path,
    a: &str,
    b: &str,
    steps: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let (ckpt, model) = load_model(checkpoint)?;
    for p in interpolate(
        &model,
        &encode_text(&ckpt, a),
        &encode_text(&ckpt, b),
        steps,
        run.max_len,
    )? {
        writeln!(out, "{:.3}\t{}", p.tau, ckpt.vocab.decode(&p.tokens))?;
    }
    Ok(())
}

fn cmd_analogy(run: &RunConfig, checkpoint: &Path, s: [&str; 3], out: &mut dyn Write) -> Result<()> {
    let (ckpt, model) = load_model(checkpoint)?;
    let [a, b, c] = s.map(|t| encode_text(&ckpt, t));
    let (_, tokens) = analogy(&model, &a, &b, &c, run.max_len)?;
    writeln!(out, "{}", ckpt.vocab.decode(&tokens))?;
    Ok(())
}

fn cmd_classify(run: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    let (ckpt, model) = load_model(checkpoint)?;
    let len = model.config.max_seq_len;
    let train = labeled(
        &load_corpus(required(&run.train, "train")?, Split::Train)?,
        &ckpt.vocab,
        len,
    )?;
    let test = labeled(
        &load_corpus(required(&run.test, "test")?, Split::Test)?,
        &ckpt.vocab,
        len,
    )?;
    let (acc, tuned, _) = latent_classify(&model, &train, &test, run.mode, &run.classifier())?;
    writeln!(out, "mode={} accuracy={acc}", run.mode)?;
    if let Some(dir) = &run.out {
        write_resolved(run, Some(ckpt.vocab.len()))?;
        let mut saved = ckpt.clone();
        saved.params = tuned.store;
        saved.optimizer = None;
        saved.meta.extend(run.meta());
        saved.save(dir.join("classifier.bin"))?;
    }
    Ok(())
}

fn cmd_export_latents(run: &RunConfig, checkpoint: &Path, input: &Path, out: &mut dyn Write) -> Result<()> {
    let (ckpt, model) = load_model(checkpoint)?;
    let corpus = load_corpus(input, Split::Test)?;
    let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    let mut text = String::from("index\tlabel\tmu\tlog_sigma\n");
    for (i, (tokens, label)) in corpus
        .encode_all(&ckpt.vocab, model.config.max_seq_len)
        .iter()
        .zip(corpus.labels())
        .enumerate()
    {
        let (mu, ls) = model.encode(tokens)?;
        let label = label.map_or_else(|| "-".to_string(), |l| l.to_string());
        let _ = writeln!(text, "{i}\t{label}\t{}\t{}", join(&mu), join(&ls));
    }
    match &run.out {
        Some(dir) => {
            write_resolved(run, Some(ckpt.vocab.len()))?;
            fs::write(dir.join("latents.tsv"), &text)?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}
