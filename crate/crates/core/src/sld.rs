//! Post-training community analysis: per-head divergence against the final
//! decision head, bounded-divergence histograms, and failure reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frustum::{ModelGraph, HEAD_COUNT};
use crate::scalar::Scalar;
use crate::softlog::{sld, ProbVec};
use crate::svg;
use crate::tensor::Tensor;

pub const FINAL_HEAD: usize = 17;
const SLD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Individual,
    Community,
    Final,
}

pub fn head_kind(head: usize) -> HeadKind {
    match head {
        1..=12 => HeadKind::Individual,
        13..=16 => HeadKind::Community,
        _ => HeadKind::Final,
    }
}

pub fn head_name(head: usize) -> String {
    format!("N{head}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadReportRow {
    pub head: usize,
    pub kind: HeadKind,
    /// Percent accuracy of this head on the split.
    pub accuracy: f64,
    /// Mean divergence against the final head over the split.
    pub mean_sld: f64,
}

/// Per-head accuracy and divergence-vs-final table plus the per-example
/// divergence samples behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SldReport {
    pub rows: Vec<HeadReportRow>,
    /// `samples[head-1]` holds the per-example divergences of that head
    /// against the final head.
    pub samples: Vec<Vec<f64>>,
}

impl SldReport {
    /// Build from stored head outputs (17 x N) and true labels. Any
    /// divergence outside [0,1] beyond tolerance is a pipeline failure.
    pub fn from_outputs(outputs: &[Vec<ProbVec>], labels: &[usize]) -> Result<SldReport> {
        if outputs.len() != HEAD_COUNT {
            return Err(Error::shape(
                "sld_report",
                format!("{} heads, expected {HEAD_COUNT}", outputs.len()),
            ));
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty split".into()));
        }
        for head in outputs {
            if head.len() != n {
                return Err(Error::shape(
                    "sld_report",
                    format!("{} outputs vs {n} labels", head.len()),
                ));
            }
        }
        let reference = &outputs[FINAL_HEAD - 1];
        let mut rows = Vec::with_capacity(HEAD_COUNT);
        let mut samples = Vec::with_capacity(HEAD_COUNT);
        for head in 1..=HEAD_COUNT {
            let probs = &outputs[head - 1];
            let mut head_samples = Vec::with_capacity(n);
            let mut correct = 0usize;
            for (p, (r, &truth)) in probs.iter().zip(reference.iter().zip(labels)) {
                let d = sld(p, r)?;
                if !(-SLD_TOL..=1.0 + SLD_TOL).contains(&d) {
                    return Err(Error::domain(
                        "sld_report",
                        format!("divergence {d} outside [0,1]"),
                    ));
                }
                head_samples.push(d.clamp(0.0, 1.0));
                if p.argmax() == truth {
                    correct += 1;
                }
            }
            let mean = head_samples.iter().sum::<f64>() / n as f64;
            rows.push(HeadReportRow {
                head,
                kind: head_kind(head),
                accuracy: 100.0 * correct as f64 / n as f64,
                mean_sld: mean,
            });
            samples.push(head_samples);
        }
        Ok(SldReport { rows, samples })
    }

    /// CSV with one row per head: head, kind, accuracy, mean SLD.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,kind,accuracy_pct,mean_sld\n");
        for row in &self.rows {
            let kind = match row.kind {
                HeadKind::Individual => "individual",
                HeadKind::Community => "community",
                HeadKind::Final => "final",
            };
            out.push_str(&format!(
                "{},{},{:.4},{:.6}\n",
                head_name(row.head),
                kind,
                row.accuracy,
                row.mean_sld
            ));
        }
        out
    }
}

/// Divergence report of a trained graph over one split.
pub fn branch_sld_report<E: Scalar>(
    graph: &ModelGraph<E>,
    images: &Tensor<f64>,
    labels: &[usize],
) -> Result<SldReport> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let mut outputs: Vec<Vec<ProbVec>> = vec![Vec::with_capacity(labels.len()); HEAD_COUNT];
    let sample: usize = images.shape()[1..].iter().product();
    let chunk_size = 64;
    let mut offset = 0;
    while offset < labels.len() {
        let end = (offset + chunk_size).min(labels.len());
        let mut shape = images.shape().to_vec();
        shape[0] = end - offset;
        let batch = Tensor::<E>::new(
            shape,
            images.data()[offset * sample..end * sample]
                .iter()
                .map(|&v| E::from_f64(v))
                .collect(),
        )?;
        let heads = graph.forward_eval(&batch)?;
        for (h, rows) in heads.into_iter().enumerate() {
            outputs[h].extend(rows);
        }
        offset = end;
    }
    SldReport::from_outputs(&outputs, labels)
}

/// Histogram over [0,1] with uniform bins, right-closed last bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub bin_width: f64,
}

pub fn sld_histogram(samples: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("bins {bins} < 2")));
    }
    let mut counts = vec![0usize; bins];
    for &v in samples {
        if !(-SLD_TOL..=1.0 + SLD_TOL).contains(&v) {
            return Err(Error::domain(
                "sld_histogram",
                format!("sample {v} outside [0,1]"),
            ));
        }
        let idx = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram {
        counts,
        bin_width: 1.0 / bins as f64,
    })
}

impl Histogram {
    pub fn svg(&self, title: &str) -> String {
        svg::histogram_svg(&self.counts, title)
    }
}

/// One misclassified example with every head's distribution; heads whose
/// own decision disagrees with the final head's (wrong) decision are the
/// discordance set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureCase {
    pub example: usize,
    pub true_label: usize,
    pub predicted: usize,
    /// `head_probs[head-1]` is that head's distribution for the example.
    pub head_probs: Vec<Vec<f64>>,
    pub discordant_heads: Vec<usize>,
}

/// All final-head misclassifications over a split.
pub fn failure_report(outputs: &[Vec<ProbVec>], labels: &[usize]) -> Result<Vec<FailureCase>> {
    if outputs.len() != HEAD_COUNT {
        return Err(Error::shape(
            "failure_report",
            format!("{} heads, expected {HEAD_COUNT}", outputs.len()),
        ));
    }
    let final_outputs = &outputs[FINAL_HEAD - 1];
    let mut failures = Vec::new();
    for (i, &truth) in labels.iter().enumerate() {
        let predicted = final_outputs[i].argmax();
        if predicted == truth {
            continue;
        }
        let head_probs: Vec<Vec<f64>> = outputs
            .iter()
            .map(|head| head[i].values().to_vec())
            .collect();
        let discordant_heads: Vec<usize> = (1..HEAD_COUNT)
            .filter(|&h| outputs[h - 1][i].argmax() != predicted)
            .collect();
        failures.push(FailureCase {
            example: i,
            true_label: truth,
            predicted,
            head_probs,
            discordant_heads,
        });
    }
    Ok(failures)
}

/// Emit report.csv, histograms/*.svg and failures.json (plus image cards
/// for the first few failures when images are supplied).
pub fn write_report_dir(
    report: &SldReport,
    failures: &[FailureCase],
    images: Option<(&Tensor<f64>, &[String])>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    let hist_dir = out_dir.join("histograms");
    std::fs::create_dir_all(&hist_dir)?;
    for row in &report.rows {
        if row.head == FINAL_HEAD {
            continue;
        }
        let hist = sld_histogram(&report.samples[row.head - 1], 20)?;
        let title = format!("SLD {} vs N{FINAL_HEAD}", head_name(row.head));
        std::fs::write(
            hist_dir.join(format!("n{:02}.svg", row.head)),
            hist.svg(&title),
        )?;
    }
    std::fs::write(
        out_dir.join("failures.json"),
        serde_json::to_string_pretty(failures)?,
    )?;
    if let Some((images, class_names)) = images {
        let dir = out_dir.join("failures");
        std::fs::create_dir_all(&dir)?;
        let size = images.shape()[3];
        let sample: usize = images.shape()[1..].iter().product();
        for case in failures.iter().take(16) {
            let pixels = &images.data()[case.example * sample..case.example * sample + size * size];
            let caption = format!(
                "#{} true {} predicted {}",
                case.example, class_names[case.true_label], class_names[case.predicted]
            );
            std::fs::write(
                dir.join(format!("example_{:04}.svg", case.example)),
                svg::image_card_svg(pixels, size, &caption),
            )?;
        }
    }
    Ok(())
}
