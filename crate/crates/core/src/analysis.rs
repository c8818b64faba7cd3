//! Interpretability analyses: residue-type distributions with KL
//! divergence against the native distribution, and the native-vs-predicted
//! confusion matrix, emitted as delimited tables and SVG plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alphabet::{ResidueAlphabet, ALPHABET_SIZE};
use crate::error::{Error, Result};

/// Residue-type statistics over a set of sequences. Frequencies are used
/// for KL divergence; the min-max normalized values exist for plotting
/// only and are never a probability distribution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResidueDistribution {
    pub counts: Vec<u64>,
    /// Symbols outside the alphabet, counted separately and reported.
    pub other: u64,
    pub frequencies: Vec<f64>,
    pub minmax: Vec<f64>,
}

/// Count residue types across sequences.
pub fn residue_distribution(
    sequences: &[impl AsRef<str>],
    alphabet: &ResidueAlphabet,
) -> Result<ResidueDistribution> {
    if sequences.is_empty() {
        return Err(Error::Evaluation("no sequences to analyze".into()));
    }
    let mut counts = vec![0u64; ALPHABET_SIZE];
    let mut other = 0u64;
    for seq in sequences {
        for c in seq.as_ref().chars() {
            match alphabet.index_of(c) {
                Some(i) => counts[i] += 1,
                None => other += 1,
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Evaluation(
            "sequences contain no alphabet symbols".into(),
        ));
    }
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    debug_assert!((frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let min = frequencies.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = frequencies
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    // Degenerate spread (all frequencies equal) maps to all ones.
    let minmax: Vec<f64> = if (max - min).abs() < 1e-15 {
        vec![1.0; ALPHABET_SIZE]
    } else {
        frequencies
            .iter()
            .map(|f| (f - min) / (max - min))
            .collect()
    };
    Ok(ResidueDistribution {
        counts,
        other,
        frequencies,
        minmax,
    })
}

impl ResidueDistribution {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// KL divergence of the generated residue distribution from the base
/// distribution, on frequencies (never the min-max values), with epsilon
/// smoothing and renormalization so zero counts stay finite.
pub fn distribution_kl(
    generated: &ResidueDistribution,
    base: &ResidueDistribution,
    eps: f64,
) -> f64 {
    let smooth = |f: &[f64]| -> Vec<f64> {
        let denom = 1.0 + eps * f.len() as f64;
        f.iter().map(|&p| (p + eps) / denom).collect()
    };
    let p = smooth(&generated.frequencies);
    let q = smooth(&base.frequencies);
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// 20x20 counts, rows = native residue, columns = predicted residue.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((ALPHABET_SIZE, ALPHABET_SIZE)),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..ALPHABET_SIZE).map(|i| self.counts[(i, i)]).sum()
    }

    /// Fraction of positions where prediction equals native; equals
    /// recovery/100 over the same positions.
    pub fn diagonal_ratio(&self) -> f64 {
        self.diagonal_sum() as f64 / self.total() as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..ALPHABET_SIZE)
            .map(|r| self.counts.row(r).iter().sum())
            .collect()
    }
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulate a confusion matrix over paired native/generated sequences.
/// Pairs of unequal length are skipped with a warning; positions with a
/// false mask entry or symbols outside the alphabet never count.
pub fn confusion(
    pairs: &[(impl AsRef<str>, impl AsRef<str>, Option<&[bool]>)],
    alphabet: &ResidueAlphabet,
) -> (ConfusionMatrix, Vec<String>) {
    let mut matrix = ConfusionMatrix::new();
    let mut warnings = Vec::new();
    for (idx, (native, generated, mask)) in pairs.iter().enumerate() {
        let native: Vec<char> = native.as_ref().chars().collect();
        let generated: Vec<char> = generated.as_ref().chars().collect();
        if native.len() != generated.len() {
            warnings.push(format!(
                "pair {idx}: native length {} vs generated {}; skipped",
                native.len(),
                generated.len()
            ));
            continue;
        }
        for i in 0..native.len() {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            match (
                alphabet.index_of(native[i]),
                alphabet.index_of(generated[i]),
            ) {
                (Some(n), Some(g)) => matrix.counts[(n, g)] += 1,
                _ => warnings.push(format!("pair {idx} position {i}: symbol outside alphabet")),
            }
        }
    }
    (matrix, warnings)
}

/// One model's distribution paired with its KL against the base.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDistribution {
    pub model: String,
    pub distribution: ResidueDistribution,
    pub kl_vs_base: f64,
}

/// Write distribution tables, the confusion matrix, and SVG plots into
/// `out_dir`, named `<model>__<corpus>__<analysis>.<ext>`. Output bytes
/// are a pure function of the inputs.
pub fn emit_report(
    base: &ResidueDistribution,
    models: &[ModelDistribution],
    confusion: Option<(&str, &ConfusionMatrix)>,
    corpus: &str,
    alphabet: &ResidueAlphabet,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    // Distribution table: one row per model per residue.
    let mut table = String::from("model\tresidue\tcount\tfrequency\tminmax\n");
    let mut rows: Vec<(&str, &ResidueDistribution)> = vec![("base", base)];
    for m in models {
        rows.push((&m.model, &m.distribution));
    }
    for (model, dist) in &rows {
        for i in 0..ALPHABET_SIZE {
            table.push_str(&format!(
                "{model}\t{}\t{}\t{:.6}\t{:.6}\n",
                alphabet.symbol(i),
                dist.counts[i],
                dist.frequencies[i],
                dist.minmax[i]
            ));
        }
        if dist.other > 0 {
            table.push_str(&format!("{model}\tother\t{}\t0\t0\n", dist.other));
        }
    }
    let path = out_dir.join(format!("all__{corpus}__distribution.tsv"));
    std::fs::write(&path, table)?;
    written.push(path);

    // KL summary.
    let mut kl = String::from("model\tkl_vs_base\ttotal_residues\n");
    for m in models {
        kl.push_str(&format!(
            "{}\t{:.6}\t{}\n",
            m.model,
            m.kl_vs_base,
            m.distribution.total()
        ));
    }
    let path = out_dir.join(format!("all__{corpus}__kl.tsv"));
    std::fs::write(&path, kl)?;
    written.push(path);

    // Bar plot of min-max normalized distributions.
    let path = out_dir.join(format!("all__{corpus}__distribution.svg"));
    std::fs::write(&path, distribution_svg(&rows, alphabet))?;
    written.push(path);

    if let Some((model, matrix)) = confusion {
        let mut out = String::from("native\\predicted");
        for i in 0..ALPHABET_SIZE {
            out.push('\t');
            out.push(alphabet.symbol(i));
        }
        out.push('\n');
        for r in 0..ALPHABET_SIZE {
            out.push(alphabet.symbol(r));
            for c in 0..ALPHABET_SIZE {
                out.push_str(&format!("\t{}", matrix.counts[(r, c)]));
            }
            out.push('\n');
        }
        let path = out_dir.join(format!("{model}__{corpus}__confusion.tsv"));
        std::fs::write(&path, out)?;
        written.push(path);

        let path = out_dir.join(format!("{model}__{corpus}__confusion.svg"));
        std::fs::write(&path, confusion_svg(matrix, alphabet))?;
        written.push(path);
    }
    Ok(written)
}

fn distribution_svg(rows: &[(&str, &ResidueDistribution)], alphabet: &ResidueAlphabet) -> String {
    let plot_w = 940.0;
    let plot_h = 300.0;
    let group_w = plot_w / ALPHABET_SIZE as f64;
    let bar_w = group_w / (rows.len() as f64 + 0.5);
    let palette = [
        "#4c9f70", "#3b6fb6", "#c85a4c", "#8e6bb2", "#b8903c", "#5aa0a8",
    ];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        plot_w as u32 + 60,
        plot_h as u32 + 80
    ));
    for (mi, (model, dist)) in rows.iter().enumerate() {
        let color = palette[mi % palette.len()];
        for (ri, v) in dist.minmax.iter().enumerate() {
            let h = v * plot_h;
            let x = 40.0 + ri as f64 * group_w + mi as f64 * bar_w;
            let y = 20.0 + plot_h - h;
            svg.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{model}</text>\n",
            40 + mi * 120,
            plot_h as u32 + 70
        ));
    }
    for i in 0..ALPHABET_SIZE {
        let x = 40.0 + (i as f64 + 0.35) * group_w;
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            plot_h as u32 + 40,
            alphabet.symbol(i)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn confusion_svg(matrix: &ConfusionMatrix, alphabet: &ResidueAlphabet) -> String {
    let cell = 22.0;
    let origin = 40.0;
    let max = matrix.counts.iter().cloned().max().unwrap_or(1).max(1) as f64;
    let mut svg = String::new();
    let size = (origin + cell * ALPHABET_SIZE as f64 + 20.0) as u32;
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n"
    ));
    for r in 0..ALPHABET_SIZE {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            14,
            origin + (r as f64 + 0.7) * cell,
            alphabet.symbol(r)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            origin + (r as f64 + 0.3) * cell,
            30,
            alphabet.symbol(r)
        ));
        for c in 0..ALPHABET_SIZE {
            let v = matrix.counts[(r, c)] as f64;
            let intensity = (v / max).sqrt();
            let shade = (255.0 - intensity * 205.0) as u8;
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({shade},{},255)\"/>\n",
                origin + c as f64 * cell,
                origin + r as f64 * cell,
                shade
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Parse a FASTA file into (name, sequence) entries.
pub fn read_fasta(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut out: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if let Some(name) = line.strip_prefix('>') {
            out.push((name.trim().to_string(), String::new()));
        } else if let Some(last) = out.last_mut() {
            last.1.push_str(line.trim());
        } else if !line.trim().is_empty() {
            return Err(Error::Corpus("FASTA sequence before any header".into()));
        }
    }
    if out.is_empty() {
        return Err(Error::Corpus("empty FASTA file".into()));
    }
    Ok(out)
}

/// Deterministic name->sequence map from FASTA entries.
pub fn fasta_map(entries: &[(String, String)]) -> BTreeMap<String, String> {
    entries.iter().cloned().collect()
}
