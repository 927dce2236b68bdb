//! Robustness metrics over generated splits.
//!
//! Corruption error is the mean over severities of the corrupt top-1 error
//! (the plain sum is kept as `raw_sum`). Degradation is reported as
//! `E_corrupt - E_clean`, so higher means worse. Clean error has no
//! severity; it is the same value at every level.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::error::{invalid, Error, Result};
use crate::generator::{intersect_indices, load_level, Dataset, SplitManifest};
use crate::tensor::ImageTensor;

/// Per-severity clean and corrupt top-1 error over one index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub severities: Vec<f64>,
    pub clean: Vec<f64>,
    pub corrupt: Vec<f64>,
    pub indices: Vec<usize>,
}

fn error_fraction(classifier: &ClassifierHandle, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
    let preds = classifier.predict(images)?;
    let wrong = preds.iter().zip(labels).filter(|(p, &l)| p.argmax() != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Top-1 error of `classifier` on the clean images and on every severity of
/// `manifest`, restricted to `indices` (default: the manifest's successful
/// samples).
pub fn error_rates(
    manifest: &SplitManifest,
    manifest_file: &Path,
    clean: &Dataset,
    classifier: &ClassifierHandle,
    indices: Option<&BTreeSet<usize>>,
) -> Result<ErrorTable> {
    let own = manifest.success_indices();
    let set: BTreeSet<usize> = match indices {
        Some(s) => s.intersection(&own).copied().collect(),
        None => own,
    };
    let set: Vec<usize> = set.into_iter().filter(|i| clean.get(*i).is_some()).collect();
    if set.is_empty() {
        return invalid("no samples in the index intersection");
    }
    let labels: Vec<usize> = set.iter().map(|&i| clean.get(i).unwrap().label).collect();
    let clean_images: Vec<ImageTensor> = set.iter().map(|&i| (*clean.get(i).unwrap().image).clone()).collect();
    let clean_error = error_fraction(classifier, &clean_images, &labels)?;

    let n_sev = manifest.header.severities.len();
    let mut corrupt = Vec::with_capacity(n_sev);
    for k in 0..n_sev {
        let images = set
            .iter()
            .map(|&i| {
                let record = manifest.record(i).expect("index from manifest");
                let level = record
                    .levels
                    .get(k)
                    .ok_or_else(|| Error::Format(format!("sample {i} lacks severity {}", k + 1)))?;
                load_level(manifest_file, level)
            })
            .collect::<Result<Vec<_>>>()?;
        corrupt.push(error_fraction(classifier, &images, &labels)?);
    }
    Ok(ErrorTable {
        severities: manifest.header.severities.clone(),
        clean: vec![clean_error; n_sev],
        corrupt,
        indices: set,
    })
}

/// One corruption's aggregate scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionScore {
    /// Mean corrupt error over severities.
    pub ce: f64,
    /// Sum of corrupt errors over severities.
    pub raw_sum: f64,
    pub accuracy: f64,
    /// Mean of `E_corrupt - E_clean` over severities.
    pub degradation: f64,
}

pub fn aggregate(table: &ErrorTable) -> Result<CorruptionScore> {
    let n = table.corrupt.len();
    if n == 0 || table.clean.len() != n {
        return invalid("error table needs matching, non-empty clean and corrupt rows");
    }
    let raw_sum: f64 = table.corrupt.iter().sum();
    let ce = raw_sum / n as f64;
    let degradation = table.corrupt.iter().zip(&table.clean).map(|(c, e)| c - e).sum::<f64>() / n as f64;
    Ok(CorruptionScore { ce, raw_sum, accuracy: 1.0 - ce, degradation })
}

/// Mean corruption error across corruption types.
pub fn mean_corruption_error(tables: &[ErrorTable]) -> Result<f64> {
    let Some(first) = tables.first() else {
        return invalid("no corruption tables");
    };
    if let Some(t) = tables.iter().find(|t| t.corrupt.len() != first.corrupt.len()) {
        return invalid(format!(
            "severity counts differ across corruptions: {} vs {}",
            first.corrupt.len(),
            t.corrupt.len()
        ));
    }
    let scores = tables.iter().map(aggregate).collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().map(|s| s.ce).sum::<f64>() / scores.len() as f64)
}

/// Attack statistics read from a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub attempted: usize,
    pub successes: usize,
    pub attack_success_rate: f64,
    pub mean_l2: f64,
    pub max_l2: f64,
    pub mean_queries: f64,
}

pub fn attack_stats(manifest: &SplitManifest) -> AttackStats {
    use crate::generator::Termination;
    let attempted: Vec<_> = manifest.records.iter().filter(|r| r.termination != Termination::Skipped).collect();
    let ok: Vec<_> = attempted.iter().filter(|r| r.success).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let l2: Vec<f64> = ok.iter().map(|r| r.l2).collect();
    let q: Vec<f64> = attempted.iter().map(|r| r.evaluations as f64).collect();
    AttackStats {
        attempted: attempted.len(),
        successes: ok.len(),
        attack_success_rate: manifest.attack_success_rate(),
        mean_l2: mean(&l2),
        max_l2: l2.iter().copied().fold(0.0, f64::max),
        mean_queries: mean(&q),
    }
}

/// Mean L2 of the written images per severity.
pub fn mean_l2_by_severity(manifest: &SplitManifest) -> Vec<f64> {
    (0..manifest.header.severities.len())
        .map(|k| {
            let vals: Vec<f64> = manifest.records.iter().filter_map(|r| r.levels.get(k).map(|l| l.l2)).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}

/// Splits generated against one victim, possibly one per filter.
#[derive(Debug, Clone)]
pub struct VictimSplits<'a> {
    pub victim: String,
    /// `(manifest, path of its file)`.
    pub splits: Vec<(&'a SplitManifest, &'a Path)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub victims: Vec<String>,
    pub models: Vec<String>,
    pub severity: usize,
    pub indices: Vec<usize>,
    /// `accuracy[i][j]`: model `j` on the split generated against victim `i`,
    /// averaged over that victim's filters.
    pub accuracy: Vec<Vec<f64>>,
}

/// Accuracy of every model on every victim's split at 1-based `severity`,
/// over the indices shared by all splits.
pub fn transfer_matrix(
    victims: &[VictimSplits<'_>],
    models: &[(String, &ClassifierHandle)],
    clean: &Dataset,
    severity: usize,
) -> Result<TransferMatrix> {
    if victims.is_empty() || models.is_empty() || victims.iter().any(|v| v.splits.is_empty()) {
        return invalid("every victim needs at least one split and at least one model is required");
    }
    if severity == 0 {
        return invalid("severities are numbered from 1");
    }
    let all: Vec<&SplitManifest> = victims.iter().flat_map(|v| v.splits.iter().map(|s| s.0)).collect();
    let shared: BTreeSet<usize> =
        intersect_indices(all.iter().copied()).into_iter().filter(|i| clean.get(*i).is_some()).collect();
    if shared.is_empty() {
        return invalid("splits share no successful samples");
    }
    let labels: Vec<usize> = shared.iter().map(|&i| clean.get(i).unwrap().label).collect();
    let mut accuracy = vec![vec![0.0; models.len()]; victims.len()];
    for (i, v) in victims.iter().enumerate() {
        for &(manifest, path) in &v.splits {
            let images = shared
                .iter()
                .map(|&idx| {
                    let level = manifest.record(idx).and_then(|r| r.levels.get(severity - 1)).ok_or_else(|| {
                        Error::InvalidArgument(format!("split of {} lacks severity {severity} for {idx}", v.victim))
                    })?;
                    load_level(path, level)
                })
                .collect::<Result<Vec<_>>>()?;
            for (j, (_, model)) in models.iter().enumerate() {
                accuracy[i][j] += (1.0 - error_fraction(model, &images, &labels)?) / v.splits.len() as f64;
            }
        }
    }
    Ok(TransferMatrix {
        victims: victims.iter().map(|v| v.victim.clone()).collect(),
        models: models.iter().map(|m| m.0.clone()).collect(),
        severity,
        indices: shared.into_iter().collect(),
        accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Verdict {
    Pass,
    FailLower,
    FailHigher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Match {
    pub ours: f64,
    pub reference: f64,
    /// `|ours - reference| / reference`.
    pub relative_gap: f64,
    /// `reference / ours - 1`: how much higher the reference is.
    pub reference_excess: f64,
    pub verdict: L2Verdict,
}

/// Allowed relative gap between our mean L2 and a reference mean L2.
pub const L2_MATCH_TOLERANCE: f64 = 0.25;

pub fn l2_match_check(ours: &[f64], reference: &[f64]) -> Result<Vec<L2Match>> {
    if ours.is_empty() || ours.len() != reference.len() {
        return invalid("need one mean L2 per severity on both sides");
    }
    ours.iter()
        .zip(reference)
        .map(|(&o, &r)| {
            if r.is_nan() || r <= 0.0 {
                return invalid(format!("reference L2 must be positive, got {r}"));
            }
            let relative_gap = (o - r).abs() / r;
            let verdict = if relative_gap <= L2_MATCH_TOLERANCE {
                L2Verdict::Pass
            } else if o < r {
                L2Verdict::FailLower
            } else {
                L2Verdict::FailHigher
            };
            Ok(L2Match { ours: o, reference: r, relative_gap, reference_excess: r / o - 1.0, verdict })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// One row per corruption and severity.
pub fn write_error_tables_csv(tables: &[(String, &ErrorTable)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["corruption", "severity", "multiplier", "clean_error", "corrupt_error", "samples"])
        .map_err(csv_err)?;
    for (name, table) in tables {
        for (k, ((m, c), e)) in table.severities.iter().zip(&table.clean).zip(&table.corrupt).enumerate() {
            w.write_record([
                name.clone(),
                (k + 1).to_string(),
                m.to_string(),
                c.to_string(),
                e.to_string(),
                table.indices.len().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_transfer_csv(matrix: &TransferMatrix, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["generated_on".to_string()];
    header.extend(matrix.models.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (v, row) in matrix.victims.iter().zip(&matrix.accuracy) {
        let mut rec = vec![v.clone()];
        rec.extend(row.iter().map(|a| a.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Line plot of corrupt accuracy against severity, one line per series.
pub fn error_plot_svg(series: &[(String, &ErrorTable)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let n = series.iter().map(|s| s.1.corrupt.len()).max().unwrap_or(1).max(1);
    let x = |k: usize| PAD + if n == 1 { 0.0 } else { k as f64 * (W - 2.0 * PAD) / (n - 1) as f64 };
    let y = |acc: f64| H - PAD - acc * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD},{PAD} L{PAD},{} L{},{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    for t in 0..=4 {
        let a = t as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{a:.2}</text>"#, PAD - 6.0, y(a) + 4.0);
    }
    for k in 0..n {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(k), H - PAD + 16.0, k + 1);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">severity</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (s, (name, table)) in series.iter().enumerate() {
        let color = COLORS[s % COLORS.len()];
        let points: Vec<String> =
            table.corrupt.iter().enumerate().map(|(k, e)| format!("{:.1},{:.1}", x(k), y(1.0 - e))).collect();
        let _ =
            writeln!(svg, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, points.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * s as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
