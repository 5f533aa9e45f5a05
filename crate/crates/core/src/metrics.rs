//! Task accuracy, type-token ratio, response similarity and the
//! learning × forgetting report matrices.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};
use crate::model::{TinyLm, Token};
use crate::tasks::{Dataset, MIXED_DOMAIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccuracyCounts {
    pub evaluated: usize,
    pub correct: usize,
    /// Responses that hit the token limit without emitting the stop token.
    pub format_failures: usize,
}

impl AccuracyCounts {
    pub fn accuracy(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.correct as f64 / self.evaluated as f64
        }
    }
}

fn strip_stop(tokens: &[Token], stop: Token) -> &[Token] {
    match tokens.split_last() {
        Some((last, rest)) if *last == stop => rest,
        _ => tokens,
    }
}

/// Greedy responses with the trailing stop token removed, plus whether each
/// one terminated.
pub fn decode_responses(
    model: &TinyLm,
    prompts: &[&[Token]],
    max_tokens: usize,
    stop_token: Token,
) -> Result<Vec<(Vec<Token>, bool)>> {
    prompts
        .par_iter()
        .map(|p| {
            let out = model.greedy_decode(p, max_tokens, stop_token)?;
            let stopped = out.last() == Some(&stop_token);
            Ok((strip_stop(&out, stop_token).to_vec(), stopped))
        })
        .collect()
}

/// Exact-match accuracy of greedy answers against gold answers.
pub fn accuracy(model: &TinyLm, eval_set: &Dataset, max_tokens: usize, stop_token: Token) -> Result<AccuracyCounts> {
    if eval_set.is_empty() {
        return Err(LwfError::EmptyDataset);
    }
    let prompts: Vec<&[Token]> = eval_set.prompts().collect();
    let responses = decode_responses(model, &prompts, max_tokens, stop_token)?;
    let mut counts = AccuracyCounts::default();
    for (x, (resp, stopped)) in eval_set.iter().zip(&responses) {
        counts.evaluated += 1;
        if !stopped {
            counts.format_failures += 1;
        }
        if resp.as_slice() == strip_stop(&x.answer, stop_token) {
            counts.correct += 1;
        }
    }
    Ok(counts)
}

/// Distinct tokens over total tokens, pooled across responses.
pub fn ttr(responses: &[Vec<Token>]) -> Result<f64> {
    let total: usize = responses.iter().map(|r| r.len()).sum();
    if total == 0 {
        return Err(LwfError::Invalid(
            "type-token ratio needs at least one non-empty response".into(),
        ));
    }
    let distinct: HashSet<Token> = responses.iter().flatten().copied().collect();
    Ok(distinct.len() as f64 / total as f64)
}

/// Mean of the encoder's embedding rows over the response tokens.
pub fn bag_embedding(encoder: &TinyLm, response: &[Token]) -> Vec<f64> {
    let e = encoder.config().embed_dim;
    let mut v = vec![0.0; e];
    if response.is_empty() {
        return v;
    }
    for &t in response {
        for (a, b) in v.iter_mut().zip(encoder.embedding(t)) {
            *a += b;
        }
    }
    let n = response.len() as f64;
    v.iter_mut().for_each(|a| *a /= n);
    v
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of paired responses under the bag-of-embedding
/// encoder.
pub fn mean_response_cosine(encoder: &TinyLm, a: &[Vec<Token>], b: &[Vec<Token>]) -> Result<f64> {
    if a.is_empty() {
        return Err(LwfError::Invalid(
            "response similarity needs at least one prompt".into(),
        ));
    }
    if a.len() != b.len() {
        return Err(LwfError::DimensionMismatch {
            what: "responses",
            got: b.len(),
            expected: a.len(),
        });
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| cosine(&bag_embedding(encoder, ra), &bag_embedding(encoder, rb)))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn response_similarity(
    model_a: &TinyLm,
    model_b: &TinyLm,
    prompts: &[&[Token]],
    encoder: &TinyLm,
    max_tokens: usize,
    stop_token: Token,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(LwfError::Invalid(
            "response similarity needs at least one prompt".into(),
        ));
    }
    let ra: Vec<Vec<Token>> = decode_responses(model_a, prompts, max_tokens, stop_token)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let rb: Vec<Vec<Token>> = decode_responses(model_b, prompts, max_tokens, stop_token)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    mean_response_cosine(encoder, &ra, &rb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub accuracy: f64,
    pub counts: AccuracyCounts,
    /// `None` when every response was empty.
    pub ttr: Option<f64>,
    /// Similarity to the baseline model's responses, when one was given.
    pub similarity: Option<f64>,
}

/// Per-domain evaluation of one model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: BTreeMap<String, DomainEval>,
}

impl EvalReport {
    pub fn accuracy(&self, domain: &str) -> Option<f64> {
        self.domains.get(domain).map(|d| d.accuracy)
    }
}

/// Evaluates `model` on every eval set. With `baseline`, also records the
/// similarity of the two models' responses (encoded with `encoder`).
pub fn evaluate(
    model: &TinyLm,
    eval_sets: &[Dataset],
    max_tokens: usize,
    stop_token: Token,
    baseline: Option<(&TinyLm, &TinyLm)>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for set in eval_sets {
        let prompts: Vec<&[Token]> = set.prompts().collect();
        let responses = decode_responses(model, &prompts, max_tokens, stop_token)?;
        let mut counts = AccuracyCounts::default();
        for (x, (resp, stopped)) in set.iter().zip(&responses) {
            counts.evaluated += 1;
            counts.format_failures += usize::from(!stopped);
            counts.correct += usize::from(resp.as_slice() == strip_stop(&x.answer, stop_token));
        }
        let texts: Vec<Vec<Token>> = responses.into_iter().map(|(r, _)| r).collect();
        let similarity = match baseline {
            Some((base_model, encoder)) => {
                let base_texts: Vec<Vec<Token>> = decode_responses(base_model, &prompts, max_tokens, stop_token)?
                    .into_iter()
                    .map(|(r, _)| r)
                    .collect();
                Some(mean_response_cosine(encoder, &texts, &base_texts)?)
            }
            None => None,
        };
        report.domains.insert(
            set.domain_id().to_string(),
            DomainEval {
                accuracy: counts.accuracy(),
                counts,
                ttr: ttr(&texts).ok(),
                similarity,
            },
        );
    }
    Ok(report)
}

/// `(new - base) / base * 100`, undefined for a zero base.
pub fn pct_change(new: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| (new - base) / base * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub learning: String,
    pub forgetting: String,
    pub learning_acc_change_pct: Option<f64>,
    pub forgetting_acc_change_pct: Option<f64>,
    pub similarity: Option<f64>,
    pub ttr_change_pct: Option<f64>,
    /// Mean accuracy change over domains that are neither learned nor
    /// forgotten in this run.
    pub side_acc_change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMatrix {
    pub learning: Vec<String>,
    pub forgetting: Vec<String>,
    /// Baseline accuracy of each learning task on itself.
    pub baseline_accuracy: BTreeMap<String, f64>,
    pub cells: Vec<ReportCell>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vs: Vec<f64> = values.flatten().collect();
    (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
}

/// Assembles the learning (columns) × forgetting (rows) matrices. Runs are
/// keyed by `(learning, forgetting)`; baselines by learning task.
pub fn report_matrix(
    runs: &BTreeMap<(String, String), EvalReport>,
    baseline: &BTreeMap<String, EvalReport>,
) -> Result<ReportMatrix> {
    let learning: BTreeSet<String> = runs.keys().map(|(l, _)| l.clone()).collect();
    let mut forgetting: Vec<String> = runs
        .keys()
        .map(|(_, f)| f.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    // the pooled setting goes last, as its own row
    if let Some(pos) = forgetting.iter().position(|f| f == MIXED_DOMAIN) {
        let m = forgetting.remove(pos);
        forgetting.push(m);
    }
    let mut baseline_accuracy = BTreeMap::new();
    for l in &learning {
        let base = baseline.get(l).ok_or_else(|| LwfError::MissingBaseline(l.clone()))?;
        if let Some(a) = base.accuracy(l) {
            baseline_accuracy.insert(l.clone(), a);
        }
    }

    let mut cells = Vec::new();
    for f in &forgetting {
        for l in &learning {
            let Some(run) = runs.get(&(l.clone(), f.clone())) else {
                continue;
            };
            let base = &baseline[l];
            let change = |d: &str| -> Option<f64> { pct_change(run.accuracy(d)?, base.accuracy(d)?) };
            let ttr_change =
                |d: &str| -> Option<f64> { pct_change(run.domains.get(d)?.ttr?, base.domains.get(d)?.ttr?) };
            let forgotten: Vec<&String> = if f == MIXED_DOMAIN {
                run.domains.keys().filter(|d| *d != l).collect()
            } else {
                vec![f]
            };
            let side: Vec<&String> = run
                .domains
                .keys()
                .filter(|d| *d != l && !forgotten.contains(d))
                .collect();
            cells.push(ReportCell {
                learning: l.clone(),
                forgetting: f.clone(),
                learning_acc_change_pct: change(l),
                forgetting_acc_change_pct: mean(forgotten.iter().map(|d| change(d))),
                similarity: mean(forgotten.iter().map(|d| run.domains.get(*d).and_then(|e| e.similarity))),
                ttr_change_pct: mean(forgotten.iter().map(|d| ttr_change(d))),
                side_acc_change_pct: mean(side.iter().map(|d| change(d))),
            });
        }
    }
    Ok(ReportMatrix {
        learning: learning.into_iter().collect(),
        forgetting,
        baseline_accuracy,
        cells,
    })
}

/// Matrix views emitted by [`ReportMatrix::to_text`] and [`ReportMatrix::to_csv`].
pub const MATRIX_METRICS: [&str; 5] = [
    "learning_acc_change_pct",
    "forgetting_acc_change_pct",
    "similarity",
    "ttr_change_pct",
    "side_acc_change_pct",
];

impl ReportMatrix {
    pub fn cell(&self, learning: &str, forgetting: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.learning == learning && c.forgetting == forgetting)
    }

    fn metric(cell: &ReportCell, metric: &str) -> Option<f64> {
        match metric {
            "learning_acc_change_pct" => cell.learning_acc_change_pct,
            "forgetting_acc_change_pct" => cell.forgetting_acc_change_pct,
            "similarity" => cell.similarity,
            "ttr_change_pct" => cell.ttr_change_pct,
            "side_acc_change_pct" => cell.side_acc_change_pct,
            _ => None,
        }
    }

    /// Rows are forgetting tasks, columns learning tasks.
    pub fn to_csv(&self, metric: &str) -> String {
        let mut out = String::from("forgetting");
        for l in &self.learning {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for f in &self.forgetting {
            out.push_str(f);
            for l in &self.learning {
                let v = self.cell(l, f).and_then(|c| Self::metric(c, metric));
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .learning
            .iter()
            .chain(&self.forgetting)
            .map(|s| s.len())
            .max()
            .unwrap_or(0)
            .max(10);
        let mut out = String::new();
        for metric in MATRIX_METRICS {
            let _ = writeln!(out, "{metric}");
            let _ = write!(out, "{:>width$}", "");
            for l in &self.learning {
                let _ = write!(out, " {l:>width$}");
            }
            out.push('\n');
            if metric == "learning_acc_change_pct" {
                let _ = write!(out, "{:>width$}", "vanilla");
                for l in &self.learning {
                    match self.baseline_accuracy.get(l) {
                        Some(a) => {
                            let _ = write!(out, " {:>width$.2}", a * 100.0);
                        }
                        None => {
                            let _ = write!(out, " {:>width$}", "n/a");
                        }
                    }
                }
                out.push('\n');
            }
            for f in &self.forgetting {
                let _ = write!(out, "{f:>width$}");
                for l in &self.learning {
                    let text = match self.cell(l, f).and_then(|c| Self::metric(c, metric)) {
                        _ if l == f => "-".to_string(),
                        Some(v) if metric == "similarity" => format!("{:.2}", v * 100.0),
                        Some(v) => format!("{v:+.2}%"),
                        None => "n/a".to_string(),
                    };
                    let _ = write!(out, " {text:>width$}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}
