//! Evaluation metrics: perplexity and sequence recovery, per-record rows,
//! subset reports, and FASTA output.
//!
//! Metrics are micro-averaged (token-weighted) across a corpus; the
//! per-record table carries enough raw sums to recompute macro averages
//! or any subset exactly.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alphabet::{ResidueAlphabet, ALPHABET_SIZE};
use crate::data::BackboneRecord;
use crate::error::{Error, Result};
use crate::tensor::softmax_rows_array;

/// Anything that can score and generate sequences for a backbone record.
/// Logits are f64 regardless of the model's training precision so metric
/// identities hold to tight tolerances.
pub trait SequenceModel {
    /// Per-position logits over the 20-residue alphabet under teacher
    /// forcing on the native sequence.
    fn teacher_forced_logits(&self, record: &BackboneRecord) -> Result<Array2<f64>>;

    /// Generated token per position at the given sampling temperature.
    fn generate(&self, record: &BackboneRecord, temperature: f64) -> Result<Vec<usize>>;
}

/// How recovery counts matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Argmax of teacher-forced logits in one pass (default).
    TeacherForcedArgmax,
    /// True greedy rollout that conditions on its own predictions.
    Rollout,
}

/// Raw per-record sums; every aggregate below is derived from these.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordRow {
    pub name: String,
    pub length: usize,
    pub unmasked: usize,
    pub nll_sum: f64,
    pub matches: usize,
    pub perplexity: f64,
    pub recovery_pct: f64,
}

/// Micro-averaged metrics over a set of rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub records: usize,
    pub tokens: usize,
    pub perplexity: f64,
    pub recovery_pct: f64,
}

/// Named metric sections (All, Short, Single-chain, extra corpora) plus
/// the per-record table of the primary corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub sections: Vec<(String, Metrics)>,
    pub rows: Vec<RecordRow>,
    pub checkpoint_hash: String,
    pub corpus_hash: String,
}

fn masked_nll(logits: &Array2<f64>, record: &BackboneRecord) -> Result<(f64, usize)> {
    if logits.nrows() != record.len() || logits.ncols() != ALPHABET_SIZE {
        return Err(Error::Shape(format!(
            "logits {}x{} for record {} of length {}",
            logits.nrows(),
            logits.ncols(),
            record.name,
            record.len()
        )));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for i in 0..record.len() {
        if !record.mask[i] {
            continue;
        }
        let row: Vec<f64> = logits.row(i).to_vec();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - row[record.tokens[i]];
        tokens += 1;
    }
    Ok((nll, tokens))
}

fn count_matches(generated: &[usize], record: &BackboneRecord) -> Result<usize> {
    if generated.len() != record.len() {
        return Err(Error::Shape(format!(
            "generated length {} vs record {} length {}",
            generated.len(),
            record.name,
            record.len()
        )));
    }
    Ok((0..record.len())
        .filter(|&i| record.mask[i] && generated[i] == record.tokens[i])
        .count())
}

fn argmax_tokens(logits: &Array2<f64>) -> Vec<usize> {
    (0..logits.nrows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Score every record, returning per-record rows. This is the single
/// evaluation pass everything else aggregates from.
pub fn evaluate_records(
    model: &dyn SequenceModel,
    records: &[&BackboneRecord],
    temperature: f64,
    mode: RecoveryMode,
) -> Result<Vec<RecordRow>> {
    if records.is_empty() {
        return Err(Error::Evaluation("empty corpus".into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let logits = model.teacher_forced_logits(rec)?;
        let (nll_sum, tokens) = masked_nll(&logits, rec)?;
        if tokens == 0 {
            return Err(Error::Evaluation(format!(
                "record {} has no unmasked positions",
                rec.name
            )));
        }
        let generated = match mode {
            RecoveryMode::TeacherForcedArgmax => argmax_tokens(&logits),
            RecoveryMode::Rollout => model.generate(rec, temperature)?,
        };
        let matches = count_matches(&generated, rec)?;
        rows.push(RecordRow {
            name: rec.name.clone(),
            length: rec.len(),
            unmasked: tokens,
            nll_sum,
            matches,
            perplexity: (nll_sum / tokens as f64).exp(),
            recovery_pct: 100.0 * matches as f64 / tokens as f64,
        });
    }
    Ok(rows)
}

/// Micro-average a set of rows: perplexity is exp of the token-weighted
/// mean negative log-likelihood, recovery the pooled match fraction.
pub fn aggregate(rows: &[&RecordRow]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::Evaluation("no records in subset".into()));
    }
    let tokens: usize = rows.iter().map(|r| r.unmasked).sum();
    let nll: f64 = rows.iter().map(|r| r.nll_sum).sum();
    let matches: usize = rows.iter().map(|r| r.matches).sum();
    Ok(Metrics {
        records: rows.len(),
        tokens,
        perplexity: (nll / tokens as f64).exp(),
        recovery_pct: 100.0 * matches as f64 / tokens as f64,
    })
}

/// Corpus perplexity.
pub fn perplexity(model: &dyn SequenceModel, records: &[&BackboneRecord]) -> Result<f64> {
    let rows = evaluate_records(model, records, 1e-6, RecoveryMode::TeacherForcedArgmax)?;
    Ok(aggregate(&rows.iter().collect::<Vec<_>>())?.perplexity)
}

/// Corpus recovery percentage at the given sampling temperature.
pub fn recovery(
    model: &dyn SequenceModel,
    records: &[&BackboneRecord],
    temperature: f64,
    mode: RecoveryMode,
) -> Result<f64> {
    let rows = evaluate_records(model, records, temperature, mode)?;
    Ok(aggregate(&rows.iter().collect::<Vec<_>>())?.recovery_pct)
}

/// Subset selector for report sections.
pub enum SubsetRule<'a> {
    All,
    /// Sequence length at most the bound (the "Short" convention is 100).
    MaxLength(usize),
    /// Explicit name list (the single-chain membership is external data).
    Names(&'a HashSet<String>),
}

pub fn subset_rows<'a>(rows: &'a [RecordRow], rule: &SubsetRule) -> Vec<&'a RecordRow> {
    rows.iter()
        .filter(|r| match rule {
            SubsetRule::All => true,
            SubsetRule::MaxLength(n) => r.length <= *n,
            SubsetRule::Names(names) => names.contains(&r.name),
        })
        .collect()
}

/// Render the report as a fixed-width text table plus TSV rows.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "checkpoint {}  corpus {}\n",
        report.checkpoint_hash, report.corpus_hash
    ));
    out.push_str(&format!(
        "{:<16} {:>8} {:>10} {:>12} {:>12}\n",
        "section", "records", "tokens", "perplexity", "recovery%"
    ));
    for (label, m) in &report.sections {
        out.push_str(&format!(
            "{:<16} {:>8} {:>10} {:>12.4} {:>12.2}\n",
            label, m.records, m.tokens, m.perplexity, m.recovery_pct
        ));
    }
    out.push_str("\nname\tlength\tunmasked\tnll_sum\tmatches\tperplexity\trecovery_pct\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{:.4}\n",
            r.name, r.length, r.unmasked, r.nll_sum, r.matches, r.perplexity, r.recovery_pct
        ));
    }
    out
}

/// Write generated sequences as FASTA (header = record name).
pub fn write_fasta(entries: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    for (name, seq) in entries {
        writeln!(f, ">{name}")?;
        writeln!(f, "{seq}")?;
    }
    Ok(())
}

/// Baseline with uniform logits everywhere: perplexity is exactly the
/// alphabet size.
pub struct UniformModel;

impl SequenceModel for UniformModel {
    fn teacher_forced_logits(&self, record: &BackboneRecord) -> Result<Array2<f64>> {
        Ok(Array2::zeros((record.len(), ALPHABET_SIZE)))
    }

    fn generate(&self, record: &BackboneRecord, _temperature: f64) -> Result<Vec<usize>> {
        Ok(vec![0; record.len()])
    }
}

/// Oracle baseline that always predicts the native sequence with a huge
/// margin: recovery 100, perplexity ~1.
pub struct PerfectModel;

impl SequenceModel for PerfectModel {
    fn teacher_forced_logits(&self, record: &BackboneRecord) -> Result<Array2<f64>> {
        let mut logits = Array2::zeros((record.len(), ALPHABET_SIZE));
        for (i, &t) in record.tokens.iter().enumerate() {
            logits[(i, t)] = 200.0;
        }
        Ok(logits)
    }

    fn generate(&self, record: &BackboneRecord, _temperature: f64) -> Result<Vec<usize>> {
        Ok(record.tokens.clone())
    }
}

/// Position-independent baseline scoring every residue by its corpus
/// frequency.
pub struct NaturalFrequencyModel {
    log_freqs: [f64; ALPHABET_SIZE],
}

impl NaturalFrequencyModel {
    /// Fit from unmasked residues of a corpus with add-one smoothing.
    pub fn fit(records: &[&BackboneRecord]) -> Self {
        let mut counts = [1.0f64; ALPHABET_SIZE];
        for rec in records {
            for i in 0..rec.len() {
                if rec.mask[i] {
                    counts[rec.tokens[i]] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        let mut log_freqs = [0.0; ALPHABET_SIZE];
        for (i, c) in counts.iter().enumerate() {
            log_freqs[i] = (c / total).ln();
        }
        NaturalFrequencyModel { log_freqs }
    }
}

impl SequenceModel for NaturalFrequencyModel {
    fn teacher_forced_logits(&self, record: &BackboneRecord) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn(
            (record.len(), ALPHABET_SIZE),
            |(_, c)| self.log_freqs[c],
        ))
    }

    fn generate(&self, record: &BackboneRecord, _temperature: f64) -> Result<Vec<usize>> {
        let mut best = 0;
        for (i, v) in self.log_freqs.iter().enumerate() {
            if *v > self.log_freqs[best] {
                best = i;
            }
        }
        Ok(vec![best; record.len()])
    }
}

/// Probabilities from teacher-forced logits, for logit dumps.
pub fn softmax_probs(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows_array(logits)
}

/// Decode generated tokens back to a sequence string.
pub fn tokens_to_sequence(alphabet: &ResidueAlphabet, tokens: &[usize]) -> String {
    alphabet.decode(tokens)
}
