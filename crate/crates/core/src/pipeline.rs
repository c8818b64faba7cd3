//! Two-stage training pipeline: stage one pretrains the contextual
//! autoencoder (and loads or randomizes the structural weights), stage
//! two assembles the full design model and trains it with the exponential
//! cross-entropy plus alignment objective. Also: checkpoint/resume, the
//! run-directory layout, and the pretrained-module ablation matrix.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alphabet::ResidueAlphabet;
use crate::checkpoint::{self, Checkpoint};
use crate::data::{make_batches, BackboneRecord, BatchMode};
use crate::error::{Error, Result};
use crate::evaluation::{self, RecoveryMode, SequenceModel};
use crate::geometry::{featurize, FeaturizerConfig};
use crate::gvp::{GvpConfig, StructuralEncoder};
use crate::nn::ParamStore;
use crate::objectives::{self, BatchTargets, CacDirection, ExpCeMode, LossConfig};
use crate::rng::derive_rng;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{transfer_pcm, ContextModel, SeqAutoencoder, TransformerConfig};

/// Where a module's initial weights come from: `"random"`, `"pretrained"`
/// (stage-one output for the contextual module; requires a path for the
/// structural module), or a checkpoint path.
pub const INIT_RANDOM: &str = "random";
pub const INIT_PRETRAINED: &str = "pretrained";

/// Full hyperparameter record. Serializes to a flat `key = value` text
/// document; the SHA-256 of that canonical text is the config hash
/// embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    // optimizer
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// 0 batches by record count; otherwise a token budget per batch.
    pub token_budget: usize,
    /// Global gradient-norm clip; 0 switches clipping off.
    pub grad_clip: f64,
    pub max_len: usize,
    // pipeline
    pub seed: u64,
    pub psm: String,
    pub pcm: String,
    pub nar: bool,
    pub steps_step1: usize,
    pub steps_step2: usize,
    pub validate_every: usize,
    pub patience: usize,
    /// Stop training once teacher-forced training recovery reaches this
    /// percentage; 0 disables the early exit.
    pub stop_at_train_recovery: f64,
    pub sample_temperature: f64,
    // objectives
    pub loss: LossConfig,
    // model
    pub transformer: TransformerConfig,
    pub gvp_layers: usize,
    pub gvp_hidden_scalars: usize,
    pub gvp_hidden_vectors: usize,
    pub gvp_edge_hidden_scalars: usize,
    pub gvp_edge_hidden_vectors: usize,
    pub gvp_message_gvps: usize,
    pub gvp_ff_gvps: usize,
    pub gvp_dropout: f64,
    pub featurizer: FeaturizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.0,
            batch_size: 5,
            token_budget: 0,
            grad_clip: 1.0,
            max_len: 512,
            seed: 0,
            psm: INIT_RANDOM.into(),
            pcm: INIT_PRETRAINED.into(),
            nar: false,
            steps_step1: 2000,
            steps_step2: 2000,
            validate_every: 50,
            patience: 10,
            stop_at_train_recovery: 0.0,
            sample_temperature: 1e-6,
            loss: LossConfig::default(),
            transformer: TransformerConfig::default(),
            gvp_layers: 4,
            gvp_hidden_scalars: 1024,
            gvp_hidden_vectors: 256,
            gvp_edge_hidden_scalars: 32,
            gvp_edge_hidden_vectors: 1,
            gvp_message_gvps: 2,
            gvp_ff_gvps: 2,
            gvp_dropout: 0.1,
            featurizer: FeaturizerConfig::default(),
        }
    }
}

macro_rules! config_keys {
    ($macro:ident, $cfg:expr) => {
        $macro!($cfg,
            lr: f64 => lr,
            momentum: f64 => momentum,
            batch_size: usize => batch_size,
            token_budget: usize => token_budget,
            grad_clip: f64 => grad_clip,
            max_len: usize => max_len,
            seed: u64 => seed,
            nar: bool => nar,
            steps_step1: usize => steps_step1,
            steps_step2: usize => steps_step2,
            validate_every: usize => validate_every,
            patience: usize => patience,
            stop_at_train_recovery: f64 => stop_at_train_recovery,
            sample_temperature: f64 => sample_temperature,
            lambda: f64 => loss.cac_weight,
            distill_temperature: f64 => loss.distill_temperature,
            cac_t2_scaling: bool => loss.cac_t2_scaling,
            tf_width: usize => transformer.width,
            tf_heads: usize => transformer.heads,
            tf_encoder_layers: usize => transformer.encoder_layers,
            tf_decoder_layers: usize => transformer.decoder_layers,
            tf_ff_mult: usize => transformer.ff_mult,
            tf_attn_dropout: f64 => transformer.attn_dropout,
            gvp_layers: usize => gvp_layers,
            gvp_hidden_scalars: usize => gvp_hidden_scalars,
            gvp_hidden_vectors: usize => gvp_hidden_vectors,
            gvp_edge_hidden_scalars: usize => gvp_edge_hidden_scalars,
            gvp_edge_hidden_vectors: usize => gvp_edge_hidden_vectors,
            gvp_message_gvps: usize => gvp_message_gvps,
            gvp_ff_gvps: usize => gvp_ff_gvps,
            gvp_dropout: f64 => gvp_dropout,
            feat_k_neighbors: usize => featurizer.k_neighbors,
            feat_rbf_count: usize => featurizer.rbf_count,
            feat_rbf_min: f64 => featurizer.rbf_min,
            feat_rbf_max: f64 => featurizer.rbf_max,
            feat_rbf_sigma: f64 => featurizer.rbf_sigma,
            feat_offset_features: usize => featurizer.offset_features,
            feat_dihedrals: bool => featurizer.with_dihedrals,
            feat_orientations: bool => featurizer.with_orientations,
            feat_rbf: bool => featurizer.with_rbf,
            feat_offset: bool => featurizer.with_offset,
            feat_frame_projection: bool => featurizer.with_frame_projection
        )
    };
}

impl TrainConfig {
    /// Canonical flat text form: one `key = value` per line, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($cfg:expr, $($key:ident : $ty:ty => $($field:ident).+),+) => {
                $(out.push_str(&format!("{} = {}\n", stringify!($key), $cfg.$($field).+));)+
            };
        }
        config_keys!(emit, self);
        out.push_str(&format!("psm = {}\n", self.psm));
        out.push_str(&format!("pcm = {}\n", self.pcm));
        out.push_str(&format!(
            "expce = {}\n",
            match self.loss.expce_reduction {
                ExpCeMode::PaperSum => "paper_sum",
                ExpCeMode::StableMean => "stable_mean",
            }
        ));
        out.push_str(&format!(
            "cac_direction = {}\n",
            match self.loss.cac_direction {
                CacDirection::StructToContext => "struct_to_context",
                CacDirection::ContextToStruct => "context_to_struct",
            }
        ));
        out.push_str(&format!("tf_max_len = {}\n", self.transformer.max_len));
        out
    }

    /// Parse the flat text form. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {}: expected `key = value`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set_key(key, value)
                .map_err(|e| Error::Config(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one flat key. Used by both the config file parser and CLI
    /// flag overrides so the two paths cannot diverge.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        macro_rules! apply {
            ($cfg:expr, $($key:ident : $ty:ty => $($field:ident).+),+) => {
                match key {
                    $(stringify!($key) => { $cfg.$($field).+ = parse::<$ty>(key, value)?; return Ok(()); })+
                    _ => {}
                }
            };
        }
        config_keys!(apply, self);
        match key {
            "psm" => self.psm = value.to_string(),
            "pcm" => self.pcm = value.to_string(),
            "expce" => {
                self.loss.expce_reduction = match value {
                    "paper_sum" => ExpCeMode::PaperSum,
                    "stable_mean" => ExpCeMode::StableMean,
                    _ => return Err(Error::Config(format!("bad expce mode {value:?}"))),
                }
            }
            "cac_direction" => {
                self.loss.cac_direction = match value {
                    "struct_to_context" => CacDirection::StructToContext,
                    "context_to_struct" => CacDirection::ContextToStruct,
                    _ => return Err(Error::Config(format!("bad cac direction {value:?}"))),
                }
            }
            "tf_max_len" => {
                self.transformer.max_len = parse::<usize>(key, value)?;
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.loss.validate()?;
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_len > self.transformer.max_len {
            return Err(Error::Config(format!(
                "max_len {} exceeds transformer positional table {}",
                self.max_len, self.transformer.max_len
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        checkpoint::sha256_hex(self.to_text().as_bytes())
    }

    pub fn batch_mode(&self) -> BatchMode {
        if self.token_budget > 0 {
            BatchMode::TokenBudget(self.token_budget)
        } else {
            BatchMode::Records(self.batch_size)
        }
    }

    /// Structural encoder geometry implied by this config. Input widths
    /// come from the featurizer; the output width is the transformer
    /// width (the contextual encoder consumes it directly).
    pub fn gvp_config(&self) -> GvpConfig {
        GvpConfig {
            node_scalar_in: self.featurizer.node_scalar_dim(),
            node_vector_in: self.featurizer.node_vector_dim().max(1),
            edge_scalar_in: self.featurizer.edge_scalar_dim(),
            edge_vector_in: self.featurizer.edge_vector_dim(),
            hidden_scalars: self.gvp_hidden_scalars,
            hidden_vectors: self.gvp_hidden_vectors,
            edge_hidden_scalars: self.gvp_edge_hidden_scalars,
            edge_hidden_vectors: self.gvp_edge_hidden_vectors,
            layers: self.gvp_layers,
            message_gvps: self.gvp_message_gvps,
            ff_gvps: self.gvp_ff_gvps,
            dropout: self.gvp_dropout,
            out_dim: self.transformer.width,
        }
    }
}

/// Where a module's weights actually came from, recorded in run metadata
/// so ablation wiring is auditable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Random {
        seed: u64,
    },
    Checkpoint {
        path: String,
        config_hash: String,
        tensors_loaded: usize,
    },
}

impl Provenance {
    pub fn is_pretrained(&self) -> bool {
        matches!(self, Provenance::Checkpoint { .. })
    }
}

/// Run metadata written next to the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub alphabet_hash: String,
    pub seed: u64,
    pub psm_provenance: Provenance,
    pub pcm_provenance: Provenance,
    /// Label of every RNG stream the run draws from.
    pub rng_streams: Vec<String>,
}

/// Line-delimited metrics log; bytes are a pure function of the run.
pub struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
}

#[derive(Serialize)]
struct TrainLine<'a> {
    step: u64,
    phase: &'a str,
    loss: f64,
    expce: f64,
    expce_log: f64,
    expce_log_domain: bool,
    cac: f64,
}

#[derive(Serialize)]
struct ValLine<'a> {
    step: u64,
    phase: &'a str,
    perplexity: f64,
    recovery: f64,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(MetricsLog {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(MetricsLog {
            file: std::io::BufWriter::new(file),
        })
    }

    fn train(
        &mut self,
        step: u64,
        loss: f64,
        expce: &objectives::ExpCe<f32>,
        cac: f64,
    ) -> Result<()> {
        let line = TrainLine {
            step,
            phase: "train",
            loss,
            expce: expce.value,
            expce_log: expce.log_value,
            expce_log_domain: expce.log_domain,
            cac,
        };
        writeln!(self.file, "{}", serde_json::to_string(&line)?)?;
        Ok(())
    }

    fn val(&mut self, step: u64, perplexity: f64, recovery: f64) -> Result<()> {
        let line = ValLine {
            step,
            phase: "val",
            perplexity,
            recovery,
        };
        writeln!(self.file, "{}", serde_json::to_string(&line)?)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Plain stochastic gradient descent with optional classical momentum and
/// global-norm clipping.
pub struct Sgd<F: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    buffers: HashMap<String, Array2<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, clip: f64) -> Self {
        Sgd {
            lr,
            momentum,
            clip,
            buffers: HashMap::new(),
        }
    }

    /// Apply one update from accumulated gradients, returning the global
    /// gradient norm before clipping.
    pub fn step(&mut self, store: &ParamStore<F>) -> f64 {
        let mut sq_sum = 0.0f64;
        for (_, p) in store.iter() {
            for g in p.grad().iter() {
                let g = g.into_f64();
                sq_sum += g * g;
            }
        }
        let norm = sq_sum.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        for (name, p) in store.iter() {
            let mut g = p.grad().mapv(|v| v * F::of_f64(scale));
            if self.momentum > 0.0 {
                let buf = self
                    .buffers
                    .entry(name.clone())
                    .or_insert_with(|| Array2::zeros(g.raw_dim()));
                *buf = &*buf * F::of_f64(self.momentum) + &g;
                g = buf.clone();
            }
            p.apply_delta(&g.mapv(|v| v * F::of_f64(self.lr)));
        }
        norm
    }
}

/// The assembled stage-two model: structural encoder feeding the
/// contextual encoder-decoder.
pub struct DesignModel<F: Scalar> {
    pub store: ParamStore<F>,
    pub structural: StructuralEncoder<F>,
    pub contextual: ContextModel<F>,
    pub featurizer: FeaturizerConfig,
    pub sample_temperature: f64,
}

/// Structural and contextual features plus logits for one record.
pub struct ForwardOutput<F: Scalar> {
    pub z_struc: Tensor<F>,
    pub z_seq: Tensor<F>,
    pub logits: Tensor<F>,
}

impl<F: Scalar> DesignModel<F> {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let structural = StructuralEncoder::new(&mut store, cfg.gvp_config());
        let contextual = ContextModel::new(&mut store, cfg.transformer.clone(), cfg.nar)?;
        Ok(DesignModel {
            store,
            structural,
            contextual,
            featurizer: cfg.featurizer.clone(),
            sample_temperature: cfg.sample_temperature,
        })
    }

    /// Teacher-forced forward pass for one record.
    pub fn forward_record(
        &self,
        record: &BackboneRecord,
        mut rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<ForwardOutput<F>> {
        let graph = featurize(record, &self.featurizer)?;
        let z_struc = self.structural.encode(&graph, rng.as_deref_mut());
        let z_seq = self.contextual.encode(&z_struc, rng.as_deref_mut())?;
        let logits = self
            .contextual
            .decode_teacher_forced(&z_seq, &record.tokens, rng)?;
        Ok(ForwardOutput {
            z_struc,
            z_seq,
            logits,
        })
    }
}

impl<F: Scalar> SequenceModel for DesignModel<F> {
    fn teacher_forced_logits(&self, record: &BackboneRecord) -> Result<Array2<f64>> {
        let out = self.forward_record(record, None)?;
        Ok(out.logits.data().mapv(|v| v.into_f64()))
    }

    fn generate(&self, record: &BackboneRecord, temperature: f64) -> Result<Vec<usize>> {
        let graph = featurize(record, &self.featurizer)?;
        let z_struc = self.structural.encode(&graph, None);
        let z_seq = self.contextual.encode(&z_struc, None)?;
        let mut rng = derive_rng(self.store.seed(), &format!("sample/{}", record.name));
        self.contextual
            .decode_greedy(&z_seq, temperature, Some(&mut rng))
    }
}

/// Stage-one autoencoder wrapped as a [`SequenceModel`]: the "structure"
/// is ignored, only the sequence is read.
pub struct AeSequenceModel<'a, F: Scalar> {
    pub model: &'a SeqAutoencoder<F>,
}

impl<F: Scalar> SequenceModel for AeSequenceModel<'_, F> {
    fn teacher_forced_logits(&self, record: &BackboneRecord) -> Result<Array2<f64>> {
        let logits = self.model.teacher_forced_logits(&record.tokens, None)?;
        Ok(logits.data().mapv(|v| v.into_f64()))
    }

    fn generate(&self, record: &BackboneRecord, temperature: f64) -> Result<Vec<usize>> {
        self.model.greedy_decode(&record.tokens, temperature)
    }
}

fn usable_records<'a>(
    records: &[&'a BackboneRecord],
    max_len: usize,
) -> (Vec<&'a BackboneRecord>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for &r in records {
        if r.num_unmasked() < 2 {
            warnings.push(format!(
                "record {}: fewer than 2 unmasked residues; skipped",
                r.name
            ));
        } else if r.len() > max_len {
            warnings.push(format!(
                "record {}: length {} over limit {max_len}; skipped",
                r.name,
                r.len()
            ));
        } else {
            out.push(r);
        }
    }
    (out, warnings)
}

/// Stage-one output handed to stage two.
#[derive(Debug)]
pub struct Step1Output {
    pub ae_checkpoint: Option<PathBuf>,
    pub pcm_provenance_hint: String,
}

/// Pretrain the contextual autoencoder on training-split sequences (the
/// recovery task: encoder input, decoder target and output are all the
/// native sequence). Returns the checkpoint path.
pub fn ae_pretrain(
    records: &[&BackboneRecord],
    cfg: &TrainConfig,
    run_dir: &Path,
    log: &mut MetricsLog,
) -> Result<PathBuf> {
    let (records, warnings) = usable_records(records, cfg.max_len.min(cfg.transformer.max_len));
    for w in &warnings {
        log::warn!("{w}");
    }
    if records.is_empty() {
        return Err(Error::Corpus("no trainable records for stage one".into()));
    }
    let mut store = ParamStore::<f32>::new(cfg.seed);
    let ae = SeqAutoencoder::new(&mut store, cfg.transformer.clone())?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.grad_clip);
    let owned: Vec<BackboneRecord> = records.iter().map(|&r| r.clone()).collect();

    let mut step: u64 = 0;
    'epochs: for epoch in 0.. {
        let (batches, _) = make_batches(&owned, cfg.batch_mode(), cfg.max_len, cfg.seed, epoch);
        for batch in &batches {
            if step >= cfg.steps_step1 as u64 {
                break 'epochs;
            }
            let mut rng = derive_rng(cfg.seed, &format!("ae_dropout/step{step}"));
            store.zero_grads();
            let mut loss_acc: Option<Tensor<f32>> = None;
            for rec in &batch.records {
                let logits = ae.teacher_forced_logits(&rec.tokens, Some(&mut rng))?;
                let ce = objectives::seq_ce(&logits, &rec.tokens, &rec.mask)?;
                loss_acc = Some(match loss_acc {
                    Some(acc) => acc.add(&ce),
                    None => ce,
                });
            }
            let loss = loss_acc.unwrap().scale(1.0 / batch.records.len() as f32);
            let loss_v = loss.item() as f64;
            if !loss_v.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite stage-one loss at step {step}; batch {:?}",
                    batch
                        .records
                        .iter()
                        .map(|r| r.name.as_str())
                        .collect::<Vec<_>>()
                )));
            }
            loss.backward();
            sgd.step(&store);
            step += 1;
            let expce_stub = objectives::ExpCe::<f32> {
                loss: Tensor::scalar(loss_v as f32),
                log_domain: false,
                log_value: loss_v,
                value: loss_v.exp(),
            };
            log.train(step, loss_v, &expce_stub, 0.0)?;
            if step.is_multiple_of(cfg.validate_every.max(1) as u64) {
                let model = AeSequenceModel { model: &ae };
                let refs: Vec<&BackboneRecord> = owned.iter().collect();
                let rec = evaluation::recovery(
                    &model,
                    &refs,
                    cfg.sample_temperature,
                    RecoveryMode::TeacherForcedArgmax,
                )?;
                let ppl = evaluation::perplexity(&model, &refs)?;
                log.val(step, ppl, rec)?;
                if cfg.stop_at_train_recovery > 0.0 && rec >= cfg.stop_at_train_recovery {
                    break 'epochs;
                }
            }
        }
        if batches.is_empty() {
            break;
        }
    }
    log.flush()?;

    let path = run_dir.join("ae.ckpt");
    let alphabet = ResidueAlphabet::canonical();
    checkpoint::save(
        &path,
        &cfg.hash(),
        &cfg.to_text(),
        &alphabet.hash(),
        step,
        serde_json::json!({"phase": "stage1"}),
        &checkpoint::store_to_tensors(&store),
    )?;
    Ok(path)
}

/// Stage one: pretrain (or pass through) the two modules per config.
pub fn run_step1(
    train_records: &[&BackboneRecord],
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<Step1Output> {
    std::fs::create_dir_all(run_dir)?;
    // Fail fast on an impossible structural-module request.
    if cfg.psm == INIT_PRETRAINED {
        return Err(Error::Config(
            "psm = pretrained needs a checkpoint path: pass `--psm PATH` pointing at a \
             checkpoint containing psm.* tensors, or use `--psm random`"
                .into(),
        ));
    }
    if cfg.pcm == INIT_PRETRAINED {
        let mut log = MetricsLog::create(run_dir.join("metrics_step1.log"))?;
        let path = ae_pretrain(train_records, cfg, run_dir, &mut log)?;
        Ok(Step1Output {
            ae_checkpoint: Some(path),
            pcm_provenance_hint: INIT_PRETRAINED.into(),
        })
    } else if cfg.pcm == INIT_RANDOM {
        Ok(Step1Output {
            ae_checkpoint: None,
            pcm_provenance_hint: INIT_RANDOM.into(),
        })
    } else {
        // Explicit checkpoint path: stage-one training is skipped.
        let path = PathBuf::from(&cfg.pcm);
        if !path.exists() {
            return Err(Error::Config(format!(
                "pcm checkpoint {path:?} does not exist"
            )));
        }
        Ok(Step1Output {
            ae_checkpoint: Some(path),
            pcm_provenance_hint: "checkpoint".into(),
        })
    }
}

/// Assemble the stage-two model and apply module initializations,
/// recording provenance.
pub fn assemble_design_model(
    cfg: &TrainConfig,
    step1: &Step1Output,
) -> Result<(DesignModel<f32>, Provenance, Provenance)> {
    let model = DesignModel::<f32>::new(cfg, cfg.seed)?;
    let alphabet = ResidueAlphabet::canonical();

    let psm_prov = if cfg.psm == INIT_RANDOM {
        Provenance::Random { seed: cfg.seed }
    } else {
        let ckpt = checkpoint::load(&cfg.psm)?;
        if ckpt.header.alphabet_hash != alphabet.hash() {
            return Err(Error::Checkpoint(
                "structural checkpoint was built against a different residue alphabet".into(),
            ));
        }
        let loaded = checkpoint::load_into_store(&ckpt, &model.store, "psm.")?;
        Provenance::Checkpoint {
            path: cfg.psm.clone(),
            config_hash: ckpt.header.config_hash.clone(),
            tensors_loaded: loaded,
        }
    };

    let pcm_prov = match &step1.ae_checkpoint {
        None => Provenance::Random { seed: cfg.seed },
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.header.alphabet_hash != alphabet.hash() {
                return Err(Error::Checkpoint(
                    "contextual checkpoint was built against a different residue alphabet".into(),
                ));
            }
            let src_cfg = TrainConfig::from_text(&ckpt.header.config_text)?;
            let tensors = checkpoint::tensors_as::<f32>(&ckpt);
            let moved = transfer_pcm(
                &tensors,
                &src_cfg.transformer,
                &model.store,
                &cfg.transformer,
            )?;
            Provenance::Checkpoint {
                path: path.display().to_string(),
                config_hash: ckpt.header.config_hash.clone(),
                tensors_loaded: moved,
            }
        }
    };
    Ok((model, psm_prov, pcm_prov))
}

fn save_model_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    model: &DesignModel<f32>,
    sgd: &Sgd<f32>,
    step: u64,
    metrics: serde_json::Value,
) -> Result<()> {
    let mut tensors = checkpoint::store_to_tensors(&model.store);
    if sgd.momentum > 0.0 {
        for (name, buf) in sgd.buffers.iter() {
            tensors.insert(format!("opt.momentum.{name}"), buf.clone());
        }
        tensors.sort_keys();
    }
    let alphabet = ResidueAlphabet::canonical();
    checkpoint::save(
        path,
        &cfg.hash(),
        &cfg.to_text(),
        &alphabet.hash(),
        step,
        metrics,
        &tensors,
    )
}

/// Train the assembled model (stage two), optionally starting from a
/// previous step. Returns the final step count.
#[allow(clippy::too_many_arguments)]
fn train_step2_loop(
    model: &DesignModel<f32>,
    cfg: &TrainConfig,
    train: &[BackboneRecord],
    val: &[BackboneRecord],
    run_dir: &Path,
    log: &mut MetricsLog,
    sgd: &mut Sgd<f32>,
    start_step: u64,
    stop_after: Option<u64>,
) -> Result<u64> {
    let limit = stop_after.unwrap_or(u64::MAX).min(cfg.steps_step2 as u64);
    let mut step: u64 = 0;
    let mut best_val = f64::INFINITY;
    let mut strikes = 0usize;
    'epochs: for epoch in 0.. {
        let (batches, _) = make_batches(train, cfg.batch_mode(), cfg.max_len, cfg.seed, epoch);
        if batches.is_empty() {
            break;
        }
        for batch in &batches {
            if step >= limit {
                break 'epochs;
            }
            if step < start_step {
                // Replay of an interrupted run: batch order and RNG
                // derivations depend only on (seed, epoch, step), so
                // consumed steps are skipped without any compute.
                step += 1;
                continue;
            }
            let mut rng = derive_rng(cfg.seed, &format!("dropout/step{step}"));
            model.store.zero_grads();

            let mut outputs = Vec::with_capacity(batch.records.len());
            for rec in &batch.records {
                outputs.push((model.forward_record(rec, Some(&mut rng))?, rec));
            }
            let targets: Vec<BatchTargets<f32>> = outputs
                .iter()
                .map(|(out, rec)| BatchTargets {
                    logits: &out.logits,
                    native: &rec.tokens,
                    mask: &rec.mask,
                })
                .collect();
            let expce = objectives::exp_ce(&targets, cfg.loss.expce_reduction)?;
            // Token-weighted alignment loss across the batch.
            let mut cac_acc: Option<Tensor<f32>> = None;
            let mut cac_tokens = 0usize;
            for (out, rec) in &outputs {
                let count = rec.num_unmasked();
                let term = objectives::cac_loss(&out.z_struc, &out.z_seq, &rec.mask, &cfg.loss)?
                    .scale(count as f32);
                cac_tokens += count;
                cac_acc = Some(match cac_acc {
                    Some(acc) => acc.add(&term),
                    None => term,
                });
            }
            let cac = cac_acc.unwrap().scale(1.0 / cac_tokens as f32);
            let cac_v = cac.item() as f64;
            let total =
                objectives::total_loss(&expce.loss, &cac, cfg.loss.cac_weight).map_err(|e| {
                    Error::Training(format!(
                        "{e}; batch {:?}",
                        batch
                            .records
                            .iter()
                            .map(|r| r.name.as_str())
                            .collect::<Vec<_>>()
                    ))
                })?;
            let loss_v = total.item() as f64;
            total.backward();
            sgd.step(&model.store);
            step += 1;
            log.train(step, loss_v, &expce, cac_v)?;

            if step.is_multiple_of(cfg.validate_every.max(1) as u64) {
                let val_refs: Vec<&BackboneRecord> = if val.is_empty() {
                    train.iter().collect()
                } else {
                    val.iter().collect()
                };
                let ppl = evaluation::perplexity(model, &val_refs)?;
                let rec = evaluation::recovery(
                    model,
                    &val_refs,
                    cfg.sample_temperature,
                    RecoveryMode::TeacherForcedArgmax,
                )?;
                log.val(step, ppl, rec)?;
                if ppl < best_val {
                    best_val = ppl;
                    strikes = 0;
                    save_model_checkpoint(
                        &run_dir.join("best.ckpt"),
                        cfg,
                        model,
                        sgd,
                        step,
                        serde_json::json!({"val_perplexity": ppl, "val_recovery": rec}),
                    )?;
                } else {
                    strikes += 1;
                    if cfg.patience > 0 && strikes >= cfg.patience {
                        break 'epochs;
                    }
                }
                if cfg.stop_at_train_recovery > 0.0 {
                    let train_refs: Vec<&BackboneRecord> = train.iter().collect();
                    let train_rec = evaluation::recovery(
                        model,
                        &train_refs,
                        cfg.sample_temperature,
                        RecoveryMode::TeacherForcedArgmax,
                    )?;
                    if train_rec >= cfg.stop_at_train_recovery {
                        break 'epochs;
                    }
                }
            }
        }
    }
    log.flush()?;
    Ok(step)
}

/// Stage two: assemble, record metadata, train, and checkpoint.
pub fn run_step2(
    cfg: &TrainConfig,
    step1: &Step1Output,
    train_records: &[&BackboneRecord],
    val_records: &[&BackboneRecord],
    run_dir: &Path,
) -> Result<PathBuf> {
    run_step2_with_limit(cfg, step1, train_records, val_records, run_dir, None)
}

/// Stage two with an optional hard step limit, standing in for an
/// interrupted run: the checkpoint still carries the full config so a
/// later `resume` continues to `steps_step2`.
pub fn run_step2_with_limit(
    cfg: &TrainConfig,
    step1: &Step1Output,
    train_records: &[&BackboneRecord],
    val_records: &[&BackboneRecord],
    run_dir: &Path,
    stop_after: Option<u64>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(run_dir)?;
    let (model, psm_prov, pcm_prov) = assemble_design_model(cfg, step1)?;

    std::fs::write(run_dir.join("config.cfg"), cfg.to_text())?;
    let metadata = RunMetadata {
        config_hash: cfg.hash(),
        alphabet_hash: ResidueAlphabet::canonical().hash(),
        seed: cfg.seed,
        psm_provenance: psm_prov,
        pcm_provenance: pcm_prov,
        rng_streams: vec![
            "init/<param>".into(),
            "batch/epoch<e>".into(),
            "dropout/step<s>".into(),
            "ae_dropout/step<s>".into(),
            "sample/<record>".into(),
        ],
    };
    std::fs::write(
        run_dir.join("metadata.json"),
        serde_json::to_string_pretty(&metadata)?,
    )?;

    let (train, warnings) = usable_records(train_records, cfg.max_len.min(cfg.transformer.max_len));
    for w in &warnings {
        log::warn!("{w}");
    }
    if train.is_empty() {
        return Err(Error::Corpus("no trainable records for stage two".into()));
    }
    let train: Vec<BackboneRecord> = train.iter().map(|&r| r.clone()).collect();
    let (val, _) = usable_records(val_records, cfg.max_len.min(cfg.transformer.max_len));
    let val: Vec<BackboneRecord> = val.iter().map(|&r| r.clone()).collect();

    let mut log = MetricsLog::create(run_dir.join("metrics.log"))?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.grad_clip);
    let step = train_step2_loop(
        &model, cfg, &train, &val, run_dir, &mut log, &mut sgd, 0, stop_after,
    )?;

    let path = run_dir.join("last.ckpt");
    save_model_checkpoint(
        &path,
        cfg,
        &model,
        &sgd,
        step,
        serde_json::json!({"phase": "stage2"}),
    )?;
    Ok(path)
}

/// Resume stage-two training from a checkpoint. The config hash must
/// match exactly; weights, batch order, and per-step RNG streams continue
/// bit-reproducibly. Early-stop bookkeeping (best validation value,
/// patience strikes) is not part of the checkpoint and restarts.
pub fn resume(
    checkpoint_path: &Path,
    cfg: &TrainConfig,
    train_records: &[&BackboneRecord],
    val_records: &[&BackboneRecord],
    run_dir: &Path,
) -> Result<PathBuf> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    if ckpt.header.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {} vs requested {}; refusing to resume",
            ckpt.header.config_hash,
            cfg.hash()
        )));
    }
    std::fs::create_dir_all(run_dir)?;
    let model = DesignModel::<f32>::new(cfg, cfg.seed)?;
    checkpoint::load_into_store(&ckpt, &model.store, "")?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.grad_clip);
    if cfg.momentum > 0.0 {
        for (name, tensor) in ckpt.tensors.iter() {
            if let Some(pname) = name.strip_prefix("opt.momentum.") {
                sgd.buffers.insert(pname.to_string(), tensor.clone());
            }
        }
    }

    let (train, _) = usable_records(train_records, cfg.max_len.min(cfg.transformer.max_len));
    let train: Vec<BackboneRecord> = train.iter().map(|&r| r.clone()).collect();
    let (val, _) = usable_records(val_records, cfg.max_len.min(cfg.transformer.max_len));
    let val: Vec<BackboneRecord> = val.iter().map(|&r| r.clone()).collect();

    let mut log = MetricsLog::append(run_dir.join("metrics.log"))?;
    let step = train_step2_loop(
        &model,
        cfg,
        &train,
        &val,
        run_dir,
        &mut log,
        &mut sgd,
        ckpt.header.step,
        None,
    )?;
    let path = run_dir.join("last.ckpt");
    save_model_checkpoint(
        &path,
        cfg,
        &model,
        &sgd,
        step,
        serde_json::json!({"phase": "stage2"}),
    )?;
    Ok(path)
}

/// One row of the pretrained-module ablation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub psm_pretrained: bool,
    pub pcm_pretrained: bool,
    pub dev_perplexity: f64,
    pub dev_recovery: f64,
    pub test_perplexity: f64,
    pub test_recovery: f64,
    pub train_recovery: f64,
}

/// Train all four pretrained/random combinations and evaluate each.
///
/// The pretrained contextual weights come from a stage-one run on the
/// training split. Pretrained structural weights come from `cfg.psm` when
/// it names a checkpoint; otherwise a bootstrap stage-two run (both
/// modules random) provides them, standing in for an external structural
/// checkpoint at desk scale.
pub fn ablate(
    cfg: &TrainConfig,
    train_records: &[&BackboneRecord],
    dev_records: &[&BackboneRecord],
    test_records: &[&BackboneRecord],
    run_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(run_dir)?;
    // Contextual pretraining once.
    let ae_cfg = TrainConfig {
        pcm: INIT_PRETRAINED.into(),
        psm: INIT_RANDOM.into(),
        ..cfg.clone()
    };
    let step1 = run_step1(train_records, &ae_cfg, &run_dir.join("stage1"))?;
    let ae_ckpt = step1
        .ae_checkpoint
        .clone()
        .expect("stage one produced a checkpoint");

    // Structural warm start: explicit checkpoint, or bootstrap.
    let psm_ckpt: PathBuf = if cfg.psm != INIT_RANDOM && cfg.psm != INIT_PRETRAINED {
        PathBuf::from(&cfg.psm)
    } else {
        let boot_cfg = TrainConfig {
            psm: INIT_RANDOM.into(),
            pcm: INIT_RANDOM.into(),
            ..cfg.clone()
        };
        let boot_dir = run_dir.join("psm_bootstrap");
        let step1 = Step1Output {
            ae_checkpoint: None,
            pcm_provenance_hint: INIT_RANDOM.into(),
        };
        run_step2(&boot_cfg, &step1, train_records, &[], &boot_dir)?
    };

    let mut rows = Vec::new();
    for (psm_on, pcm_on) in [(false, false), (false, true), (true, false), (true, true)] {
        let row_dir = run_dir.join(format!(
            "psm_{}__pcm_{}",
            if psm_on { "pre" } else { "rand" },
            if pcm_on { "pre" } else { "rand" }
        ));
        let row_cfg = TrainConfig {
            psm: if psm_on {
                psm_ckpt.display().to_string()
            } else {
                INIT_RANDOM.into()
            },
            pcm: if pcm_on {
                ae_ckpt.display().to_string()
            } else {
                INIT_RANDOM.into()
            },
            ..cfg.clone()
        };
        let step1 = Step1Output {
            ae_checkpoint: pcm_on.then(|| ae_ckpt.clone()),
            pcm_provenance_hint: row_cfg.pcm.clone(),
        };
        let ckpt_path = run_step2(&row_cfg, &step1, train_records, dev_records, &row_dir)?;
        let (model, _, _) = load_design_model(&ckpt_path)?;

        let eval_on = |records: &[&BackboneRecord]| -> Result<(f64, f64)> {
            if records.is_empty() {
                return Ok((f64::NAN, f64::NAN));
            }
            let ppl = evaluation::perplexity(&model, records)?;
            let rec = evaluation::recovery(
                &model,
                records,
                cfg.sample_temperature,
                RecoveryMode::TeacherForcedArgmax,
            )?;
            Ok((ppl, rec))
        };
        let (dev_ppl, dev_rec) = eval_on(dev_records)?;
        let (test_ppl, test_rec) = eval_on(test_records)?;
        let (_, train_rec) = eval_on(train_records)?;
        rows.push(AblationRow {
            psm_pretrained: psm_on,
            pcm_pretrained: pcm_on,
            dev_perplexity: dev_ppl,
            dev_recovery: dev_rec,
            test_perplexity: test_ppl,
            test_recovery: test_rec,
            train_recovery: train_rec,
        });
    }

    // Shaped like the pretrained-module ablation table: one row per
    // configuration, dev and test columns.
    let mut table = String::from("#\tPSM\tPCM\tppl_dev\tppl_test\trec_dev\trec_test\trec_train\n");
    for (i, r) in rows.iter().enumerate() {
        table.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{:.2}\n",
            i + 1,
            if r.psm_pretrained { "yes" } else { "no" },
            if r.pcm_pretrained { "yes" } else { "no" },
            r.dev_perplexity,
            r.test_perplexity,
            r.dev_recovery,
            r.test_recovery,
            r.train_recovery
        ));
    }
    std::fs::write(run_dir.join("ablation.tsv"), table)?;
    Ok(rows)
}

/// Rebuild a design model from a self-describing checkpoint.
pub fn load_design_model(path: &Path) -> Result<(DesignModel<f32>, TrainConfig, Checkpoint)> {
    let ckpt = checkpoint::load(path)?;
    let alphabet = ResidueAlphabet::canonical();
    if ckpt.header.alphabet_hash != alphabet.hash() {
        return Err(Error::Checkpoint(
            "checkpoint built against a different alphabet".into(),
        ));
    }
    let cfg = TrainConfig::from_text(&ckpt.header.config_text)?;
    let model = DesignModel::<f32>::new(&cfg, cfg.seed)?;
    // Optimizer state may ride along; only model tensors are required.
    checkpoint::load_into_store(&ckpt, &model.store, "")?;
    Ok((model, cfg, ckpt))
}
