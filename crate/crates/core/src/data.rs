//! Corpus parsing, validation, splits, and batching.
//!
//! Corpus files are UTF-8 JSON lines. Each line is a map with fields
//! `name` (string), `seq` (string) and `coords` (map from atom name `N`,
//! `CA`, `C` to per-residue `[x, y, z]` lists, `null` where the atom is
//! missing). An `O` entry, if present, is ignored. Split files are a JSON
//! map `train`/`validation`/`test` -> list of record names.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alphabet::ResidueAlphabet;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Coordinate sentinel for masked residues. NaN never survives silent use:
/// any arithmetic that touches it by mistake poisons downstream finiteness
/// checks instead of producing a plausible number.
pub const MASKED_COORD: f64 = f64::NAN;

/// One structure-sequence pair: per-residue N/CA/C coordinates in
/// angstroms, the native sequence, and a per-residue validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneRecord {
    pub name: String,
    pub sequence: String,
    /// Token index per residue; positions with `mask == false` carry a
    /// placeholder and never enter losses or metrics.
    pub tokens: Vec<usize>,
    /// `coords[i][a]` is atom `a` of residue `i`, atoms ordered (N, CA, C).
    pub coords: Vec<[[f64; 3]; 3]>,
    /// True when the residue symbol is known and all three atoms are finite.
    pub mask: Vec<bool>,
}

impl BackboneRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Alpha-carbon position of residue `i`.
    pub fn ca(&self, i: usize) -> [f64; 3] {
        self.coords[i][1]
    }

    /// Internal consistency check of the record invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.sequence.chars().count();
        if self.tokens.len() != n || self.coords.len() != n || self.mask.len() != n {
            return Err(Error::Corpus(format!(
                "record {}: inconsistent lengths (seq {}, tokens {}, coords {}, mask {})",
                self.name,
                n,
                self.tokens.len(),
                self.coords.len(),
                self.mask.len()
            )));
        }
        for i in 0..n {
            if self.mask[i] {
                let finite = self.coords[i]
                    .iter()
                    .all(|a| a.iter().all(|v| v.is_finite()));
                if !finite {
                    return Err(Error::Corpus(format!(
                        "record {}: residue {} unmasked but has non-finite coordinates",
                        self.name, i
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A non-fatal problem found while parsing one corpus line.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordIssue {
    pub line: usize,
    pub message: String,
}

/// Parsed corpus with per-line issues collected instead of aborting.
#[derive(Debug)]
pub struct Corpus {
    pub records: Vec<BackboneRecord>,
    pub issues: Vec<RecordIssue>,
}

impl Corpus {
    pub fn get(&self, name: &str) -> Option<&BackboneRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

#[derive(Deserialize, Serialize)]
struct RawRecord {
    name: String,
    seq: String,
    coords: RawCoords,
}

#[derive(Deserialize, Serialize)]
struct RawCoords {
    #[serde(rename = "N")]
    n: Vec<Option<[f64; 3]>>,
    #[serde(rename = "CA")]
    ca: Vec<Option<[f64; 3]>>,
    #[serde(rename = "C")]
    c: Vec<Option<[f64; 3]>>,
    #[serde(rename = "O", default, skip_serializing_if = "Option::is_none")]
    o: Option<serde_json::Value>,
}

fn record_from_raw(
    raw: RawRecord,
    line: usize,
    alphabet: &ResidueAlphabet,
    issues: &mut Vec<RecordIssue>,
) -> Result<BackboneRecord> {
    let seq_chars: Vec<char> = raw.seq.chars().collect();
    let n = seq_chars.len();
    if n == 0 {
        return Err(Error::Record {
            line,
            msg: "empty sequence".into(),
        });
    }
    for (atom, list) in [
        ("N", &raw.coords.n),
        ("CA", &raw.coords.ca),
        ("C", &raw.coords.c),
    ] {
        if list.len() != n {
            return Err(Error::Record {
                line,
                msg: format!(
                    "atom {atom} has {} entries for a {n}-residue sequence",
                    list.len()
                ),
            });
        }
    }
    let mut tokens = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let mut ok = true;
        let token = match alphabet.index_of(seq_chars[i]) {
            Some(t) => t,
            None => {
                issues.push(RecordIssue {
                    line,
                    message: format!(
                        "record {}: residue {} symbol {:?} outside alphabet, masked",
                        raw.name, i, seq_chars[i]
                    ),
                });
                ok = false;
                0
            }
        };
        let mut xyz = [[MASKED_COORD; 3]; 3];
        for (a, list) in [&raw.coords.n, &raw.coords.ca, &raw.coords.c]
            .iter()
            .enumerate()
        {
            match list[i] {
                Some(p) if p.iter().all(|v| v.is_finite()) => xyz[a] = p,
                _ => ok = false,
            }
        }
        if !ok {
            xyz = [[MASKED_COORD; 3]; 3];
        }
        tokens.push(token);
        coords.push(xyz);
        mask.push(ok);
    }
    let rec = BackboneRecord {
        name: raw.name,
        sequence: raw.seq,
        tokens,
        coords,
        mask,
    };
    rec.validate()?;
    Ok(rec)
}

/// Parse a JSONL corpus. Malformed lines are reported as issues and
/// skipped; a corpus with zero valid records is an error. Output order
/// equals input order.
pub fn parse_corpus(path: impl AsRef<Path>, alphabet: &ResidueAlphabet) -> Result<Corpus> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(&text) {
            Ok(raw) => match record_from_raw(raw, line_no, alphabet, &mut issues) {
                Ok(rec) => records.push(rec),
                Err(e) => issues.push(RecordIssue {
                    line: line_no,
                    message: e.to_string(),
                }),
            },
            Err(e) => issues.push(RecordIssue {
                line: line_no,
                message: format!("corpus line {line_no}: malformed record: {e}"),
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::Corpus(format!(
            "no valid records ({} lines rejected)",
            issues.len()
        )));
    }
    Ok(Corpus { records, issues })
}

/// Canonical JSONL serialization; masked residues are written with null
/// atoms. `parse` then `serialize` is a fixed point.
pub fn serialize_records(records: &[BackboneRecord], mut out: impl Write) -> Result<()> {
    for rec in records {
        let atom = |a: usize| -> Vec<Option<[f64; 3]>> {
            (0..rec.len())
                .map(|i| {
                    if rec.mask[i] {
                        Some(rec.coords[i][a])
                    } else {
                        None
                    }
                })
                .collect()
        };
        let raw = RawRecord {
            name: rec.name.clone(),
            seq: rec.sequence.clone(),
            coords: RawCoords {
                n: atom(0),
                ca: atom(1),
                c: atom(2),
                o: None,
            },
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Disjoint train/validation/test name lists.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let split: DatasetSplit = serde_json::from_str(&text)
            .map_err(|e| Error::Split(format!("bad split file: {e}")))?;
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for (part, names) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            for name in names {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Split(format!(
                        "name {name:?} appears in more than one part (seen again in {part})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Partition corpus records by name. Every split name must exist in
    /// the corpus. Records the split does not mention are dropped.
    #[allow(clippy::type_complexity)]
    pub fn apply<'a>(
        &self,
        corpus: &'a Corpus,
    ) -> Result<(
        Vec<&'a BackboneRecord>,
        Vec<&'a BackboneRecord>,
        Vec<&'a BackboneRecord>,
    )> {
        let by_name: std::collections::HashMap<&str, &BackboneRecord> = corpus
            .records
            .iter()
            .map(|r| (r.name.as_str(), r))
            .collect();
        let lookup = |names: &[String]| -> Result<Vec<&'a BackboneRecord>> {
            names
                .iter()
                .map(|n| {
                    by_name.get(n.as_str()).copied().ok_or_else(|| {
                        Error::Split(format!(
                            "split names {n:?} but the corpus has no such record"
                        ))
                    })
                })
                .collect()
        };
        Ok((
            lookup(&self.train)?,
            lookup(&self.validation)?,
            lookup(&self.test)?,
        ))
    }
}

/// How records are grouped into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Fixed record count per batch (default 5).
    Records(usize),
    /// Greedy grouping under a token budget.
    TokenBudget(usize),
}

/// A batch of records with padded views of tokens and coordinates.
/// Padding positions are false in `padding_mask` and masked everywhere
/// downstream; the per-record views are authoritative.
#[derive(Debug, Clone)]
pub struct Batch {
    pub records: Vec<BackboneRecord>,
    /// `B x L` token tensor, zero-padded.
    pub tokens: Array2<usize>,
    /// `B x L x 9` coordinate tensor (N,CA,C flattened), NaN-padded.
    pub coords: Array3<f64>,
    /// `B x L`, true for real residue positions.
    pub padding_mask: Array2<bool>,
}

impl Batch {
    pub fn from_records(records: Vec<BackboneRecord>) -> Batch {
        let b = records.len();
        let l = records.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut tokens = Array2::zeros((b, l));
        let mut coords = Array3::from_elem((b, l, 9), MASKED_COORD);
        let mut padding_mask = Array2::from_elem((b, l), false);
        for (r, rec) in records.iter().enumerate() {
            for i in 0..rec.len() {
                tokens[(r, i)] = rec.tokens[i];
                padding_mask[(r, i)] = true;
                for a in 0..3 {
                    for x in 0..3 {
                        coords[(r, i, a * 3 + x)] = rec.coords[i][a][x];
                    }
                }
            }
        }
        Batch {
            records,
            tokens,
            coords,
            padding_mask,
        }
    }
}

/// Shuffle records deterministically and group them into batches. Records
/// longer than `max_len` are skipped with a warning message. Every kept
/// record appears exactly once.
pub fn make_batches(
    records: &[BackboneRecord],
    mode: BatchMode,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> (Vec<Batch>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut kept: Vec<&BackboneRecord> = Vec::new();
    for r in records {
        if r.len() > max_len {
            warnings.push(format!(
                "record {} has {} residues, over the {max_len}-token limit; skipped",
                r.name,
                r.len()
            ));
        } else {
            kept.push(r);
        }
    }
    let mut order: Vec<usize> = (0..kept.len()).collect();
    let mut rng = derive_rng(seed, &format!("batch/epoch{epoch}"));
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    match mode {
        BatchMode::Records(per) => {
            let per = per.max(1);
            for chunk in order.chunks(per) {
                let recs: Vec<BackboneRecord> = chunk.iter().map(|&i| kept[i].clone()).collect();
                batches.push(Batch::from_records(recs));
            }
        }
        BatchMode::TokenBudget(budget) => {
            let mut current: Vec<BackboneRecord> = Vec::new();
            let mut used = 0usize;
            for &i in &order {
                let len = kept[i].len();
                if !current.is_empty() && used + len > budget {
                    batches.push(Batch::from_records(std::mem::take(&mut current)));
                    used = 0;
                }
                used += len;
                current.push(kept[i].clone());
            }
            if !current.is_empty() {
                batches.push(Batch::from_records(current));
            }
        }
    }
    (batches, warnings)
}
