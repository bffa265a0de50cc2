//! Balanced accuracy and negative log-likelihood over per-source decisions.
//!
//! Every method produces one fused score per source image. The score is read as
//! a log posterior ratio: the decision is `score > threshold` and the fake-class
//! probability used for NLL is the logistic of the raw score.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::FusedScore;
use crate::error::{Error, Result};
use crate::types::{Dataset, Label, QuerySet};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn balanced_accuracy(decisions: &[(Label, Label)]) -> Result<f64> {
    let mut total = [0usize; 2];
    let mut correct = [0usize; 2];
    for &(pred, truth) in decisions {
        total[truth.as_index()] += 1;
        if pred == truth {
            correct[truth.as_index()] += 1;
        }
    }
    if total.contains(&0) {
        return Err(Error::invalid(
            "balanced accuracy needs examples of both classes",
        ));
    }
    let tnr = correct[0] as f64 / total[0] as f64;
    let tpr = correct[1] as f64 / total[1] as f64;
    Ok((tpr + tnr) / 2.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn nll(scores: &[(f64, Label)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("nll of an empty score list"));
    }
    let mut total = 0.0;
    for &(score, truth) in scores {
        if !score.is_finite() {
            return Err(Error::Numerical(format!(
                "fused score {score} is not finite"
            )));
        }
        let p_fake = sigmoid(score);
        let p = match truth {
            Label::Fake => p_fake,
            Label::Real => 1.0 - p_fake,
        };
        total -= p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
    }
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bacc: f64,
    pub nll: f64,
    pub n_sources: usize,
}

/// Scores each query set with `method`, one decision per source.
pub fn evaluate<F>(ds: &Dataset, method: F, threshold: f64) -> Result<Evaluation>
where
    F: Fn(&QuerySet) -> Result<FusedScore> + Sync,
{
    let scored = ds
        .sets
        .par_iter()
        .map(|set| Ok((method(set)?.score, set.require_label()?)))
        .collect::<Result<Vec<(f64, Label)>>>()?;
    evaluate_scores(&scored, threshold)
}

pub fn evaluate_scores(scored: &[(f64, Label)], threshold: f64) -> Result<Evaluation> {
    let decisions: Vec<(Label, Label)> = scored
        .iter()
        .map(|&(s, t)| {
            (
                if s > threshold {
                    Label::Fake
                } else {
                    Label::Real
                },
                t,
            )
        })
        .collect();
    Ok(Evaluation {
        bacc: balanced_accuracy(&decisions)?,
        nll: nll(scored)?,
        n_sources: scored.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub k: String,
    pub bacc: Option<f64>,
    pub nll: Option<f64>,
    pub n_sources: usize,
    /// Number of seeded repetitions averaged into this row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

impl EvalRow {
    pub fn available(method: impl Into<String>, k: impl Into<String>, e: Evaluation) -> Self {
        EvalRow {
            method: method.into(),
            k: k.into(),
            bacc: Some(e.bacc),
            nll: Some(e.nll),
            n_sources: e.n_sources,
            repetitions: None,
            unavailable: None,
        }
    }

    pub fn unavailable(
        method: impl Into<String>,
        k: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        EvalRow {
            method: method.into(),
            k: k.into(),
            bacc: None,
            nll: None,
            n_sources: 0,
            repetitions: None,
            unavailable: Some(reason.into()),
        }
    }

    fn cell(&self) -> String {
        match (self.bacc, self.nll) {
            (Some(b), Some(n)) => format!("{:.1} / {:.2}", 100.0 * b, n),
            _ => "n/a".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
    pub rows: Vec<EvalRow>,
    pub config_digest: String,
    pub prob_clamp: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, config_digest: impl Into<String>) -> Self {
        EvalReport {
            detector: None,
            rows,
            config_digest: config_digest.into(),
            prob_clamp: PROB_CLAMP,
            notes: Vec::new(),
        }
    }

    pub fn row(&self, method: &str, k: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    pub fn to_table(&self) -> String {
        let name = self.detector.clone().unwrap_or_else(|| "bAcc / NLL".into());
        render_table(&[(name, self)])
    }
}

/// Aligned text table with methods as rows and one column per report. An AVG
/// column is appended when more than one report is given.
pub fn render_table(columns: &[(String, &EvalReport)]) -> String {
    let mut keys: Vec<(String, String)> = Vec::new();
    for (_, rep) in columns {
        for r in &rep.rows {
            let key = (r.method.clone(), r.k.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }

    let mut header: Vec<String> = vec!["method".into(), "k".into()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    let with_avg = columns.len() > 1;
    if with_avg {
        header.push("AVG".into());
    }

    let mut body: Vec<Vec<String>> = Vec::new();
    for (method, k) in &keys {
        let mut line = vec![method.clone(), k.clone()];
        let mut acc = (0.0, 0.0, 0usize);
        for (_, rep) in columns {
            match rep.row(method, k) {
                Some(r) => {
                    if let (Some(b), Some(n)) = (r.bacc, r.nll) {
                        acc = (acc.0 + b, acc.1 + n, acc.2 + 1);
                    }
                    line.push(r.cell());
                }
                None => line.push("-".into()),
            }
        }
        if with_avg {
            line.push(if acc.2 == 0 {
                "n/a".into()
            } else {
                format!(
                    "{:.1} / {:.2}",
                    100.0 * acc.0 / acc.2 as f64,
                    acc.1 / acc.2 as f64
                )
            });
        }
        body.push(line);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|l| l[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let fmt_line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c < 2 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    fmt_line(&mut out, &header);
    let _ = writeln!(
        out,
        "{}",
        "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
    );
    for line in &body {
        fmt_line(&mut out, line);
    }
    out
}
