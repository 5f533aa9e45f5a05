//! Diagonal Fisher estimation and forgetting confidence.
//!
//! The forgetting confidence of a candidate `x` is the Fisher-weighted
//! squared distance between the parameters reached by a short gradient
//! update on `x` (starting at the base model) and the learning-task optimum:
//! `FC(x) = 0.5 * sum_i F_i (theta_base_i - alpha * g_i(x) - theta_star_i)^2`.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};
use crate::model::{Differentiable, Example, ParamVector};
use crate::tasks::Dataset;

const FISHER_MAGIC: &[u8; 4] = b"LWFF";
const FISHER_VERSION: u32 = 1;
/// Examples whose gradients are held in memory at once during estimation.
const FISHER_CHUNK: usize = 64;

/// Per-parameter nonnegative importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    weights: Vec<f64>,
}

impl FisherDiagonal {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(bad) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(LwfError::Invalid(format!(
                "fisher weight {bad} is not a finite nonnegative value"
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|w| w * c).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.weights.len());
        out.extend_from_slice(FISHER_MAGIC);
        out.extend_from_slice(&FISHER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LwfError::BadCheckpoint(format!("fisher file: {m}"));
        if bytes.len() < 16 || &bytes[..4] != FISHER_MAGIC {
            return Err(bad("bad header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FISHER_VERSION {
            return Err(bad("unsupported version"));
        }
        let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != 8 * dim {
            return Err(bad("length does not match header"));
        }
        Self::new(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub example_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcConfig {
    /// One-step update coefficient.
    pub alpha: f64,
    /// Inner gradient steps used to approximate `theta*(x)`.
    pub steps: usize,
    /// Inner step size for `steps > 1`; defaults to `alpha / steps`, so every
    /// variant spends the same total update budget.
    pub step_size: Option<f64>,
}

impl Default for FcConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            steps: 1,
            step_size: None,
        }
    }
}

impl FcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.steps == 0 || self.step_size.is_some_and(|s| !(s > 0.0)) {
            return Err(LwfError::InvalidConfig(format!(
                "bad forgetting-confidence settings {self:?}"
            )));
        }
        Ok(())
    }

    fn inner_step(&self) -> f64 {
        if self.steps == 1 {
            self.alpha
        } else {
            self.step_size.unwrap_or(self.alpha / self.steps as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Highest,
    Lowest,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Highest => "highest",
            Direction::Lowest => "lowest",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = LwfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest" => Ok(Direction::Highest),
            "lowest" => Ok(Direction::Lowest),
            other => Err(LwfError::InvalidConfig(format!("unknown direction {other:?}"))),
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Empirical diagonal Fisher: mean squared per-example gradient at the given
/// (learning-task optimum) parameters.
pub fn estimate_fisher<M: Differentiable>(model_at_theta_star: &M, d_l: &[M::Sample]) -> Result<FisherDiagonal> {
    if d_l.is_empty() {
        return Err(LwfError::EmptyDataset);
    }
    let dim = model_at_theta_star.params().dim();
    let mut acc = vec![CompensatedSum::default(); dim];
    for chunk in d_l.chunks(FISHER_CHUNK) {
        let grads = chunk
            .par_iter()
            .map(|x| model_at_theta_star.grad(x))
            .collect::<Result<Vec<_>>>()?;
        for g in &grads {
            for (a, v) in acc.iter_mut().zip(g.as_slice()) {
                a.add(v * v);
            }
        }
    }
    let n = d_l.len() as f64;
    FisherDiagonal::new(acc.iter().map(|a| a.value() / n).collect())
}

/// Parameters reached from the base model after the configured inner update
/// on `x`, standing in for `theta*(x)`.
pub fn updated_params<M: Differentiable>(x: &M::Sample, base: &M, cfg: &FcConfig) -> Result<ParamVector> {
    cfg.validate()?;
    let step = cfg.inner_step();
    let mut model = base.clone();
    for _ in 0..cfg.steps {
        let g = model.grad(x)?;
        model.params_mut().axpy(-step, &g);
    }
    Ok(model.params().clone())
}

/// `0.5 * sum_i F_i (theta_i - theta_star_i)^2`
pub fn fisher_distance(theta: &ParamVector, theta_star_l: &ParamVector, fisher: &FisherDiagonal) -> Result<f64> {
    theta_star_l.check_dim("theta_star_L", theta.dim())?;
    if fisher.dim() != theta.dim() {
        return Err(LwfError::DimensionMismatch {
            what: "fisher",
            got: fisher.dim(),
            expected: theta.dim(),
        });
    }
    let s: f64 = fisher
        .weights()
        .iter()
        .zip(theta.as_slice().iter().zip(theta_star_l.as_slice()))
        .map(|(f, (a, b))| f * (a - b) * (a - b))
        .sum();
    Ok(0.5 * s)
}

pub fn forgetting_confidence<M: Differentiable>(
    x: &M::Sample,
    base: &M,
    theta_star_l: &ParamVector,
    fisher: &FisherDiagonal,
    cfg: &FcConfig,
) -> Result<f64> {
    let dim = base.params().dim();
    theta_star_l.check_dim("theta_star_L", dim)?;
    if fisher.dim() != dim {
        return Err(LwfError::DimensionMismatch {
            what: "fisher",
            got: fisher.dim(),
            expected: dim,
        });
    }
    fisher_distance(&updated_params(x, base, cfg)?, theta_star_l, fisher)
}

/// Scores every candidate; output is ordered by example index.
pub fn score_candidates<M: Differentiable>(
    candidates: &[M::Sample],
    base: &M,
    theta_star_l: &ParamVector,
    fisher: &FisherDiagonal,
    cfg: &FcConfig,
) -> Result<Vec<ConfidenceEntry>> {
    candidates
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            Ok(ConfidenceEntry {
                example_index: i,
                score: forgetting_confidence(x, base, theta_star_l, fisher, cfg)?,
            })
        })
        .collect()
}

/// Candidates chosen for unlearning, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub examples: Vec<Example>,
    pub scores: Vec<f64>,
    /// How many fewer candidates were available than the quota asked for.
    pub shortfall: usize,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `floor(d_l_size / n_u)`
pub fn unlearning_quota(d_l_size: usize, n_u: usize) -> Result<usize> {
    if n_u == 0 {
        return Err(LwfError::InvalidConfig("n_u must be positive".into()));
    }
    Ok(d_l_size / n_u)
}

/// Indices of `scores` sorted by the requested extreme, ties to the lower
/// example index.
pub fn rank_order(scores: &[ConfidenceEntry], direction: Direction) -> Vec<usize> {
    let mut order: Vec<&ConfidenceEntry> = scores.iter().collect();
    order.sort_by(|a, b| {
        let by_score = match direction {
            Direction::Highest => b.score.total_cmp(&a.score),
            Direction::Lowest => a.score.total_cmp(&b.score),
        };
        by_score.then(a.example_index.cmp(&b.example_index))
    });
    order.into_iter().map(|e| e.example_index).collect()
}

pub fn select_unlearning_set(
    d_self: &Dataset,
    scores: &[ConfidenceEntry],
    d_l_size: usize,
    n_u: usize,
    direction: Direction,
) -> Result<Selection> {
    let quota = unlearning_quota(d_l_size, n_u)?;
    if scores.len() != d_self.len() {
        return Err(LwfError::DimensionMismatch {
            what: "scores",
            got: scores.len(),
            expected: d_self.len(),
        });
    }
    let mut seen = HashSet::with_capacity(scores.len());
    for e in scores {
        if e.example_index >= d_self.len() || !seen.insert(e.example_index) {
            return Err(LwfError::Invalid(format!(
                "scores must cover each candidate exactly once (index {})",
                e.example_index
            )));
        }
        if !e.score.is_finite() {
            return Err(LwfError::Invalid(format!(
                "score of candidate {} is not finite",
                e.example_index
            )));
        }
    }
    let mut by_index = vec![0.0; scores.len()];
    for e in scores {
        by_index[e.example_index] = e.score;
    }
    let take = quota.min(d_self.len());
    let indices: Vec<usize> = rank_order(scores, direction).into_iter().take(take).collect();
    Ok(Selection {
        examples: indices.iter().map(|&i| d_self.examples()[i].clone()).collect(),
        scores: indices.iter().map(|&i| by_index[i]).collect(),
        indices,
        shortfall: quota - take,
    })
}

/// Pools candidates from several sources and keeps the global quota at the
/// requested extreme. Returned indices address the concatenation of the
/// sources.
pub fn pool_mixed(
    d_selfs: &[Dataset],
    scores: &[Vec<ConfidenceEntry>],
    d_l_size: usize,
    n_u: usize,
    direction: Direction,
) -> Result<(Dataset, Selection)> {
    if d_selfs.len() < 2 {
        return Err(LwfError::Invalid("mixed pooling needs at least two sources".into()));
    }
    if scores.len() != d_selfs.len() {
        return Err(LwfError::DimensionMismatch {
            what: "score lists",
            got: scores.len(),
            expected: d_selfs.len(),
        });
    }
    let mut pooled_examples = Vec::new();
    let mut pooled_scores = Vec::new();
    for (ds, sc) in d_selfs.iter().zip(scores) {
        if sc.len() != ds.len() {
            return Err(LwfError::DimensionMismatch {
                what: "scores",
                got: sc.len(),
                expected: ds.len(),
            });
        }
        let offset = pooled_examples.len();
        pooled_scores.extend(sc.iter().map(|e| ConfidenceEntry {
            example_index: e.example_index + offset,
            score: e.score,
        }));
        pooled_examples.extend(ds.examples().iter().cloned());
    }
    let pooled = Dataset::mixed(pooled_examples)?;
    let selection = select_unlearning_set(&pooled, &pooled_scores, d_l_size, n_u, direction)?;
    Ok((pooled, selection))
}

/// `|A ∩ B| / |A|` over candidate indices.
pub fn overlap_ratio(a: &Selection, b: &Selection) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LwfError::DimensionMismatch {
            what: "selection",
            got: b.len(),
            expected: a.len(),
        });
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let set: HashSet<usize> = a.indices.iter().copied().collect();
    let common = b.indices.iter().filter(|i| set.contains(i)).count();
    Ok(common as f64 / a.len() as f64)
}

/// Writes `example_index,domain_id,score,rank` rows, rank 1 being the highest
/// score.
pub fn write_scores_csv<W: Write>(w: &mut W, d_self: &Dataset, scores: &[ConfidenceEntry]) -> Result<()> {
    let order = rank_order(scores, Direction::Highest);
    let mut rank = vec![0usize; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    writeln!(w, "example_index,domain_id,score,rank")?;
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|e| e.example_index);
    for e in &sorted {
        let domain = &d_self
            .examples()
            .get(e.example_index)
            .ok_or_else(|| LwfError::Invalid(format!("score index {} outside dataset", e.example_index)))?
            .domain_id;
        writeln!(
            w,
            "{},{},{},{}",
            e.example_index, domain, e.score, rank[e.example_index]
        )?;
    }
    Ok(())
}

pub fn read_scores_csv<R: BufRead>(r: R) -> Result<Vec<ConfidenceEntry>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = || LwfError::Invalid(format!("scores csv line {}: malformed row", i + 1));
        if fields.len() != 4 {
            return Err(parse_err());
        }
        out.push(ConfidenceEntry {
            example_index: fields[0].parse().map_err(|_| parse_err())?,
            score: fields[2].parse().map_err(|_| parse_err())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TinyLm, TinyLmConfig};

    fn toy_model(seed: u64) -> TinyLm {
        TinyLm::init(
            TinyLmConfig {
                vocab_size: 8,
                context: 3,
                embed_dim: 3,
                hidden_dim: 4,
                pad_token: 7,
            },
            seed,
        )
        .unwrap()
    }

    fn entries(scores: &[f64]) -> Vec<ConfidenceEntry> {
        scores
            .iter()
            .enumerate()
            .map(|(example_index, &score)| ConfidenceEntry { example_index, score })
            .collect()
    }

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            "f-self",
            (0..n)
                .map(|i| Example::new(vec![(i % 5) as u32], vec![((i + 1) % 5) as u32], "f-self"))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fisher_is_nonnegative_and_zero_for_unused_rows() {
        let m = toy_model(1);
        let xs = vec![
            Example::new(vec![1, 2], vec![3], "d"),
            Example::new(vec![2], vec![1, 2], "d"),
        ];
        let f = estimate_fisher(&m, &xs).unwrap();
        assert!(f.weights().iter().all(|w| *w >= 0.0));
        // tokens 4, 5, 6 never appear as model inputs
        for tok in 4..7 {
            for c in 0..3 {
                assert_eq!(f.weights()[tok * 3 + c], 0.0);
            }
        }
    }

    #[test]
    fn fc_vanishes_in_degenerate_cases() {
        let m = toy_model(2);
        let x = Example::new(vec![1, 2], vec![3], "d");
        let theta = m.params().clone();
        let zero = FisherDiagonal::new(vec![0.0; theta.dim()]).unwrap();
        assert_eq!(
            forgetting_confidence(&x, &m, &theta, &zero, &FcConfig::default()).unwrap(),
            0.0
        );

        // no movement and no gradient: distance 0
        let ones = FisherDiagonal::new(vec![1.0; theta.dim()]).unwrap();
        assert_eq!(fisher_distance(&theta, &theta, &ones).unwrap(), 0.0);
    }

    #[test]
    fn fc_rejects_dimension_mismatch() {
        let m = toy_model(2);
        let x = Example::new(vec![1], vec![3], "d");
        let short = ParamVector::zeros(3);
        let f = FisherDiagonal::new(vec![1.0; m.params().dim()]).unwrap();
        assert!(forgetting_confidence(&x, &m, &short, &f, &FcConfig::default()).is_err());
        let f_short = FisherDiagonal::new(vec![1.0; 2]).unwrap();
        assert!(forgetting_confidence(&x, &m, m.params(), &f_short, &FcConfig::default()).is_err());
    }

    #[test]
    fn quota_is_floor_of_ratio() {
        let d = dataset(30);
        let scores = entries(&(0..30).map(|i| i as f64).collect::<Vec<_>>());
        let s = select_unlearning_set(&d, &scores, 70, 7, Direction::Highest).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.indices[0], 29);
        assert_eq!(s.shortfall, 0);
        assert!(select_unlearning_set(&d, &scores, 70, 0, Direction::Highest).is_err());
    }

    #[test]
    fn shortfall_is_reported() {
        let d = dataset(4);
        let s = select_unlearning_set(&d, &entries(&[1.0, 2.0, 3.0, 4.0]), 70, 7, Direction::Highest).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.shortfall, 6);
    }

    #[test]
    fn ties_at_the_boundary_go_to_the_lower_index() {
        let d = dataset(5);
        let scores = entries(&[1.0, 5.0, 3.0, 3.0, 0.5]);
        let s = select_unlearning_set(&d, &scores, 2, 1, Direction::Highest).unwrap();
        assert_eq!(s.indices, vec![1, 2]);
        let s = select_unlearning_set(&d, &entries(&[2.0, 1.0, 1.0, 4.0, 1.0]), 2, 1, Direction::Lowest).unwrap();
        assert_eq!(s.indices, vec![1, 2]);
    }

    #[test]
    fn lowest_is_the_opposite_extreme() {
        let d = dataset(6);
        let scores = entries(&[0.3, 0.9, 0.1, 0.7, 0.5, 0.2]);
        let hi = select_unlearning_set(&d, &scores, 3, 1, Direction::Highest).unwrap();
        let lo = select_unlearning_set(&d, &scores, 3, 1, Direction::Lowest).unwrap();
        assert_eq!(hi.indices, vec![1, 3, 4]);
        assert_eq!(lo.indices, vec![2, 5, 0]);
    }

    #[test]
    fn selection_requires_complete_scores() {
        let d = dataset(3);
        let mut scores = entries(&[1.0, 2.0, 3.0]);
        scores[2].example_index = 0;
        assert!(select_unlearning_set(&d, &scores, 3, 1, Direction::Highest).is_err());
        assert!(select_unlearning_set(&d, &entries(&[1.0]), 3, 1, Direction::Highest).is_err());
    }

    #[test]
    fn mixed_pool_draws_from_the_strongest_source() {
        let a = dataset(5);
        let b = dataset(5);
        let sa = entries(&[10.0, 11.0, 12.0, 13.0, 14.0]);
        let sb = entries(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (pooled, sel) = pool_mixed(
            &[a.clone(), b.clone()],
            &[sa.clone(), sb.clone()],
            3,
            1,
            Direction::Highest,
        )
        .unwrap();
        assert_eq!(pooled.len(), 10);
        assert!(sel.indices.iter().all(|&i| i < 5));
        // same quota as a single source
        assert_eq!(
            sel.len(),
            select_unlearning_set(&a, &sa, 3, 1, Direction::Highest).unwrap().len()
        );
        assert!(pool_mixed(&[a], &[sa], 3, 1, Direction::Highest).is_err());
    }

    #[test]
    fn overlap_ratio_extremes() {
        let d = dataset(6);
        let scores = entries(&[0.3, 0.9, 0.1, 0.7, 0.5, 0.2]);
        let hi = select_unlearning_set(&d, &scores, 3, 1, Direction::Highest).unwrap();
        let lo = select_unlearning_set(&d, &scores, 3, 1, Direction::Lowest).unwrap();
        assert_eq!(overlap_ratio(&hi, &hi).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&hi, &lo).unwrap(), 0.0);
        let two = select_unlearning_set(&d, &scores, 2, 1, Direction::Highest).unwrap();
        assert!(overlap_ratio(&hi, &two).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let d = dataset(4);
        let scores = entries(&[0.25, 1.5e-9, 3.0, 3.0]);
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &d, &scores).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "2,f-self,3,1");
        assert_eq!(lines[4], "3,f-self,3,2");
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), scores);
    }

    #[test]
    fn fisher_file_round_trip() {
        let f = FisherDiagonal::new(vec![0.0, 1.5, 2.25e-7]).unwrap();
        assert_eq!(FisherDiagonal::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(FisherDiagonal::new(vec![-1.0]).is_err());
        assert!(FisherDiagonal::from_bytes(b"LWFF").is_err());
    }
}
