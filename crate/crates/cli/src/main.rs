//! Command-line entry point for the design pipeline.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error (corpus,
//! splits, checkpoints), 3 numeric or training failure.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqdesign_core::analysis::{
    confusion, distribution_kl, emit_report, read_fasta, residue_distribution, ModelDistribution,
};
use seqdesign_core::data::{parse_corpus, Corpus, DatasetSplit};
use seqdesign_core::error::Error;
use seqdesign_core::evaluation::{
    aggregate, evaluate_records, render_report, subset_rows, write_fasta, EvalReport, Metrics,
    RecoveryMode, SequenceModel, SubsetRule,
};
use seqdesign_core::geometry::featurize;
use seqdesign_core::pipeline::{
    ablate, load_design_model, resume, run_step1, run_step2, TrainConfig,
};
use seqdesign_core::{BackboneRecord, ResidueAlphabet};

#[derive(Parser)]
#[command(
    name = "seqdesign",
    about = "Structure-conditioned protein sequence design: train, evaluate, generate, analyze",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every training-adjacent subcommand. Each flag
/// overrides the corresponding config-file key, so flag and file paths
/// produce identical runs for identical effective settings.
#[derive(Args, Clone)]
struct ConfigOpts {
    /// Config file of flat `key = value` lines mirroring the full
    /// training configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root random seed; all RNG streams derive from it and are logged.
    #[arg(long)]
    seed: Option<u64>,

    /// Structural module init: `random`, or a checkpoint path
    /// (`pretrained` alone aborts with instructions) [default: random —
    /// artifact default, no structural checkpoint ships with the code].
    #[arg(long)]
    psm: Option<String>,

    /// Contextual module init: `pretrained` (run stage-one pretraining),
    /// `random`, or a stage-one checkpoint path [default: pretrained].
    #[arg(long)]
    pcm: Option<String>,

    /// Weight of the auxiliary alignment loss [artifact default: 1].
    #[arg(long)]
    lambda: Option<f64>,

    /// Sampling temperature for recovery decoding (default 1e-6).
    #[arg(long)]
    temperature: Option<f64>,

    /// Exponential cross-entropy reduction: `paper_sum` (literal, log
    /// domain on overflow) or `stable_mean` [artifact default:
    /// stable_mean].
    #[arg(long)]
    expce: Option<String>,

    /// Non-autoregressive decoder reading: positional queries only
    /// [artifact default: off].
    #[arg(long)]
    nar: bool,

    /// Extra config overrides as KEY=VALUE (any config-file key).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigOpts {
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_text(&std::fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(psm) = &self.psm {
            cfg.psm = psm.clone();
        }
        if let Some(pcm) = &self.pcm {
            cfg.pcm = pcm.clone();
        }
        if let Some(lambda) = self.lambda {
            cfg.loss.cac_weight = lambda;
        }
        if let Some(t) = self.temperature {
            cfg.sample_temperature = t;
        }
        if let Some(mode) = &self.expce {
            cfg.set_key("expce", mode)?;
        }
        if self.nar {
            cfg.nar = true;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
            cfg.set_key(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CorpusOpts {
    /// JSONL corpus of structure-sequence records.
    #[arg(long)]
    corpus: PathBuf,

    /// JSON split file (train/validation/test name lists).
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage one only: pretrain the contextual autoencoder on training
    /// sequences.
    #[command(name = "pretrain-ae")]
    PretrainAe {
        #[command(flatten)]
        corpus: CorpusOpts,
        #[command(flatten)]
        config: ConfigOpts,
        /// Run directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full two-stage training run.
    Train {
        #[command(flatten)]
        corpus: CorpusOpts,
        #[command(flatten)]
        config: ConfigOpts,
        #[arg(long)]
        out: PathBuf,
        /// Resume stage two from this checkpoint (config hash must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perplexity and recovery over a corpus, with Short/Single-chain
    /// subsets and optional extra corpora.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusOpts,
        /// Trained checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Name list (one per line) defining the Single-chain subset.
        #[arg(long = "single-chain")]
        single_chain: Option<PathBuf>,
        /// Additional labelled corpora as LABEL=PATH (repeatable).
        #[arg(long = "extra-corpus", value_name = "LABEL=PATH")]
        extra: Vec<String>,
        /// Also report recovery from a true greedy rollout (conditioning
        /// on the model's own predictions) alongside the default
        /// teacher-forced argmax.
        #[arg(long)]
        rollout: bool,
        /// Write generated sequences as FASTA.
        #[arg(long)]
        fasta: Option<PathBuf>,
        /// Sampling temperature for rollout decoding (default 1e-6).
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Generate sequences for every record in a corpus.
    Generate {
        #[command(flatten)]
        corpus: CorpusOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output FASTA path.
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-position logits as JSON lines.
        #[arg(long)]
        logits: Option<PathBuf>,
        /// Debug: dump featurized graphs as JSON lines.
        #[arg(long = "dump-features")]
        dump_features: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Residue-distribution, KL, and confusion analyses of generated
    /// sequences against the native corpus.
    Analyze {
        /// Native (base) corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Generated sequences as LABEL=FASTA (repeatable).
        #[arg(long = "generated", value_name = "LABEL=FASTA")]
        generated: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four pretrained/random module combinations.
    Ablate {
        #[command(flatten)]
        corpus: CorpusOpts,
        #[command(flatten)]
        config: ConfigOpts,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Training(_) | Error::Shape(_) => 3,
        _ => 2,
    }
}

/// Corpus plus train/validation/test indices into its record list.
type SplitCorpus = (Corpus, Vec<usize>, Vec<usize>, Vec<usize>);

fn load_corpus_and_split(opts: &CorpusOpts) -> Result<SplitCorpus, Error> {
    let alphabet = ResidueAlphabet::canonical();
    let corpus = parse_corpus(&opts.corpus, &alphabet)?;
    for issue in &corpus.issues {
        log::warn!("{}", issue.message);
    }
    let index_of = |name: &str| corpus.records.iter().position(|r| r.name == name);
    match &opts.splits {
        Some(path) => {
            let split = DatasetSplit::load(path)?;
            let lookup = |names: &[String]| -> Result<Vec<usize>, Error> {
                names
                    .iter()
                    .map(|n| {
                        index_of(n).ok_or_else(|| {
                            Error::Split(format!("split names {n:?} not present in corpus"))
                        })
                    })
                    .collect()
            };
            let train = lookup(&split.train)?;
            let val = lookup(&split.validation)?;
            let test = lookup(&split.test)?;
            Ok((corpus, train, val, test))
        }
        None => {
            let all: Vec<usize> = (0..corpus.records.len()).collect();
            Ok((corpus, all, vec![], vec![]))
        }
    }
}

fn refs<'a>(corpus: &'a Corpus, idx: &[usize]) -> Vec<&'a BackboneRecord> {
    idx.iter().map(|&i| &corpus.records[i]).collect()
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::PretrainAe {
            corpus,
            config,
            out,
        } => {
            let mut cfg = config.build()?;
            cfg.pcm = "pretrained".into();
            let (corpus, train, _, _) = load_corpus_and_split(&corpus)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.cfg"), cfg.to_text())?;
            let step1 = run_step1(&refs(&corpus, &train), &cfg, &out)?;
            let path = step1
                .ae_checkpoint
                .expect("pretraining produces a checkpoint");
            println!("stage-one checkpoint: {}", path.display());
            Ok(())
        }
        Command::Train {
            corpus,
            config,
            out,
            resume: resume_from,
        } => {
            let cfg = config.build()?;
            let (corpus, train, val, _) = load_corpus_and_split(&corpus)?;
            let train_refs = refs(&corpus, &train);
            let val_refs = refs(&corpus, &val);
            let ckpt = match resume_from {
                Some(path) => resume(&path, &cfg, &train_refs, &val_refs, &out)?,
                None => {
                    let step1 = run_step1(&train_refs, &cfg, &out)?;
                    run_step2(&cfg, &step1, &train_refs, &val_refs, &out)?
                }
            };
            println!("final checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::Evaluate {
            corpus,
            checkpoint,
            out,
            single_chain,
            extra,
            rollout,
            fasta,
            temperature,
        } => {
            let (model, cfg, ckpt) = load_design_model(&checkpoint)?;
            let temperature = temperature.unwrap_or(cfg.sample_temperature);
            let alphabet = ResidueAlphabet::canonical();
            let (main_corpus, _, _, test) = load_corpus_and_split(&corpus)?;
            // With a split file, evaluate the test part; otherwise the
            // whole corpus.
            let main_refs: Vec<&BackboneRecord> = if test.is_empty() {
                main_corpus.records.iter().collect()
            } else {
                refs(&main_corpus, &test)
            };
            let rows = evaluate_records(
                &model,
                &main_refs,
                temperature,
                RecoveryMode::TeacherForcedArgmax,
            )?;
            let mut sections: Vec<(String, Metrics)> = Vec::new();
            sections.push((
                "All".into(),
                aggregate(&subset_rows(&rows, &SubsetRule::All))?,
            ));
            let short = subset_rows(&rows, &SubsetRule::MaxLength(100));
            if !short.is_empty() {
                sections.push(("Short".into(), aggregate(&short)?));
            }
            match &single_chain {
                Some(path) => {
                    let names: HashSet<String> = std::fs::read_to_string(path)?
                        .lines()
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect();
                    let subset = subset_rows(&rows, &SubsetRule::Names(&names));
                    if !subset.is_empty() {
                        sections.push(("Single-chain".into(), aggregate(&subset)?));
                    }
                }
                None => {
                    log::info!("no --single-chain list supplied; subset skipped");
                }
            }
            if rollout {
                let roll_rows =
                    evaluate_records(&model, &main_refs, temperature, RecoveryMode::Rollout)?;
                sections.push((
                    "All (rollout)".into(),
                    aggregate(&roll_rows.iter().collect::<Vec<_>>())?,
                ));
            }
            for spec in &extra {
                let (label, path) = spec.split_once('=').ok_or_else(|| {
                    Error::Config(format!("--extra-corpus {spec:?}: expected LABEL=PATH"))
                })?;
                let extra_corpus = parse_corpus(path, &alphabet)?;
                let extra_refs: Vec<&BackboneRecord> = extra_corpus.records.iter().collect();
                let extra_rows = evaluate_records(
                    &model,
                    &extra_refs,
                    temperature,
                    RecoveryMode::TeacherForcedArgmax,
                )?;
                sections.push((
                    label.to_string(),
                    aggregate(&extra_rows.iter().collect::<Vec<_>>())?,
                ));
            }
            if let Some(path) = &fasta {
                let mut entries = Vec::new();
                for rec in &main_refs {
                    let tokens = model.generate(rec, temperature)?;
                    entries.push((rec.name.clone(), alphabet.decode(&tokens)));
                }
                write_fasta(&entries, path)?;
            }
            let report = EvalReport {
                sections,
                rows,
                checkpoint_hash: ckpt.header.config_hash.clone(),
                corpus_hash: corpus_digest(&corpus.corpus)?,
            };
            let text = render_report(&report);
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.txt"), &text)?;
                std::fs::write(
                    dir.join("report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
            Ok(())
        }
        Command::Generate {
            corpus,
            checkpoint,
            out,
            logits,
            dump_features,
            temperature,
        } => {
            let (model, cfg, _) = load_design_model(&checkpoint)?;
            let temperature = temperature.unwrap_or(cfg.sample_temperature);
            let alphabet = ResidueAlphabet::canonical();
            let (main_corpus, _, _, _) = load_corpus_and_split(&corpus)?;
            let mut entries = Vec::new();
            let mut logit_lines = Vec::new();
            for rec in &main_corpus.records {
                let tokens = model.generate(rec, temperature)?;
                entries.push((rec.name.clone(), alphabet.decode(&tokens)));
                if logits.is_some() {
                    let l = model.teacher_forced_logits(rec)?;
                    let rows: Vec<Vec<f64>> = (0..l.nrows()).map(|i| l.row(i).to_vec()).collect();
                    logit_lines.push(serde_json::json!({
                        "name": rec.name,
                        "logits": rows,
                    }));
                }
            }
            write_fasta(&entries, &out)?;
            if let Some(path) = logits {
                let mut text = String::new();
                for line in &logit_lines {
                    text.push_str(&serde_json::to_string(line)?);
                    text.push('\n');
                }
                std::fs::write(path, text)?;
            }
            if let Some(path) = dump_features {
                let mut text = String::new();
                for rec in &main_corpus.records {
                    let graph = featurize(rec, &cfg.featurizer)?;
                    let node_scalars: Vec<Vec<f64>> = (0..graph.n)
                        .map(|i| graph.node_scalars.row(i).to_vec())
                        .collect();
                    text.push_str(&serde_json::to_string(&serde_json::json!({
                        "name": rec.name,
                        "mask": graph.mask,
                        "edges": graph.edges.edges,
                        "node_scalars": node_scalars,
                    }))?);
                    text.push('\n');
                }
                std::fs::write(path, text)?;
            }
            println!("wrote {} sequences to {}", entries.len(), out.display());
            Ok(())
        }
        Command::Analyze {
            corpus,
            generated,
            out,
        } => {
            let alphabet = ResidueAlphabet::canonical();
            let base_corpus = parse_corpus(&corpus, &alphabet)?;
            let native: Vec<String> = base_corpus
                .records
                .iter()
                .map(|r| r.sequence.clone())
                .collect();
            let base = residue_distribution(&native, &alphabet)?;
            let mut models = Vec::new();
            let mut confusion_out = None;
            for spec in &generated {
                let (label, path) = spec.split_once('=').ok_or_else(|| {
                    Error::Config(format!("--generated {spec:?}: expected LABEL=FASTA"))
                })?;
                let entries = read_fasta(path)?;
                let seqs: Vec<String> = entries.iter().map(|(_, s)| s.clone()).collect();
                let dist = residue_distribution(&seqs, &alphabet)?;
                let kl = distribution_kl(&dist, &base, 1e-8);
                println!("{label}: {} residues, KL vs base {kl:.6}", dist.total());
                models.push(ModelDistribution {
                    model: label.to_string(),
                    distribution: dist,
                    kl_vs_base: kl,
                });
                // Confusion for the first labelled model with paired records.
                if confusion_out.is_none() {
                    let by_name = seqdesign_core::analysis::fasta_map(&entries);
                    let pairs: Vec<(String, String, Option<&[bool]>)> = base_corpus
                        .records
                        .iter()
                        .filter_map(|r| {
                            by_name
                                .get(&r.name)
                                .map(|g| (r.sequence.clone(), g.clone(), Some(r.mask.as_slice())))
                        })
                        .collect();
                    if !pairs.is_empty() {
                        let (matrix, warnings) = confusion(&pairs, &alphabet);
                        for w in warnings {
                            log::warn!("{w}");
                        }
                        println!(
                            "{label}: confusion diagonal ratio {:.4} over {} positions",
                            matrix.diagonal_ratio(),
                            matrix.total()
                        );
                        confusion_out = Some((label.to_string(), matrix));
                    }
                }
            }
            let corpus_label = corpus
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "corpus".into());
            let conf_ref = confusion_out.as_ref().map(|(l, m)| (l.as_str(), m));
            let files = emit_report(&base, &models, conf_ref, &corpus_label, &alphabet, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Ablate {
            corpus,
            config,
            out,
        } => {
            let cfg = config.build()?;
            let (corpus, train, val, test) = load_corpus_and_split(&corpus)?;
            let rows = ablate(
                &cfg,
                &refs(&corpus, &train),
                &refs(&corpus, &val),
                &refs(&corpus, &test),
                &out,
            )?;
            println!(
                "{:<3} {:<5} {:<5} {:>9} {:>9} {:>9} {:>9} {:>10}",
                "#", "PSM", "PCM", "ppl_dev", "ppl_test", "rec_dev", "rec_test", "rec_train"
            );
            for (i, r) in rows.iter().enumerate() {
                println!(
                    "{:<3} {:<5} {:<5} {:>9.4} {:>9.4} {:>9.2} {:>9.2} {:>10.2}",
                    i + 1,
                    if r.psm_pretrained { "yes" } else { "no" },
                    if r.pcm_pretrained { "yes" } else { "no" },
                    r.dev_perplexity,
                    r.test_perplexity,
                    r.dev_recovery,
                    r.test_recovery,
                    r.train_recovery
                );
            }
            Ok(())
        }
    }
}

fn corpus_digest(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    Ok(seqdesign_core::checkpoint::sha256_hex(&bytes))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
