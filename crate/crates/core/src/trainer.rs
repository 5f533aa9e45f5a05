//! Fine-tuning with interleaved gradient-ascent unlearning.
//!
//! A [`Schedule`] is the per-sample consumption order of learning and
//! unlearning examples. The trainer groups it into optimizer steps: a batch
//! holds up to `batch_size` learning samples, and an unlearning sample joins
//! the batch holding the learning sample that precedes it. Unlearning samples
//! seen before any learning sample form their own batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};
use crate::model::{Differentiable, ParamVector};
use crate::optim::{AdamW, AdamWConfig};

/// Stream offset for the unlearning-placement generator so that it never
/// shares draws with the learning-order shuffle.
const PLACEMENT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Periodic,
    Ahead,
    Random,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Periodic => "periodic",
            Strategy::Ahead => "ahead",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = LwfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "periodic" => Ok(Strategy::Periodic),
            "ahead" => Ok(Strategy::Ahead),
            "random" => Ok(Strategy::Random),
            other => Err(LwfError::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Learning samples between consecutive unlearning samples.
    pub n_u: usize,
    /// Unlearning rate.
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Periodic,
            n_u: 7,
            beta: 0.1,
            batch_size: 4,
            epochs: 1,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl StrategyConfig {
    pub fn vanilla(&self) -> Self {
        Self {
            strategy: Strategy::Vanilla,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LwfError::InvalidConfig(m));
        if self.n_u == 0 {
            return bad("n_u must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad(format!("beta must be finite and nonnegative, got {}", self.beta));
        }
        self.optimizer.validate()
    }
}

/// One sample consumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Learn(usize),
    Unlearn(usize),
}

impl Step {
    pub fn is_unlearn(&self) -> bool {
        matches!(self, Step::Unlearn(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub learn: Vec<usize>,
    pub unlearn: Vec<usize>,
}

impl Batch {
    pub fn kind(&self) -> StepKind {
        match (self.learn.is_empty(), self.unlearn.is_empty()) {
            (false, true) => StepKind::Learn,
            (true, false) => StepKind::Unlearn,
            _ => StepKind::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn learn_count(&self) -> usize {
        self.steps.iter().filter(|s| !s.is_unlearn()).count()
    }

    pub fn unlearn_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_unlearn()).count()
    }

    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let mut out = Vec::new();
        let mut current = Batch::default();
        for step in &self.steps {
            match *step {
                Step::Learn(i) => {
                    let full = current.learn.len() >= batch_size;
                    let unlearn_only = current.learn.is_empty() && !current.unlearn.is_empty();
                    if full || unlearn_only {
                        out.push(std::mem::take(&mut current));
                    }
                    current.learn.push(i);
                }
                Step::Unlearn(j) => {
                    if current.learn.is_empty() && current.unlearn.len() >= batch_size {
                        out.push(std::mem::take(&mut current));
                    }
                    current.unlearn.push(j);
                }
            }
        }
        if !current.learn.is_empty() || !current.unlearn.is_empty() {
            out.push(current);
        }
        out
    }
}

/// Per-sample plan for `epochs` passes over the learning set.
///
/// Learning samples are shuffled each epoch; unlearning samples are consumed
/// in the order given (callers pass them by descending confidence). Each epoch
/// spends `min(floor(d_l_size / n_u), d_u_size)` unlearning samples; the
/// periodic cadence runs on across epoch boundaries.
pub fn build_schedule(cfg: &StrategyConfig, d_l_size: usize, d_u_size: usize) -> Result<Schedule> {
    cfg.validate()?;
    if d_l_size == 0 {
        return Err(LwfError::EmptyDataset);
    }
    let per_epoch = if cfg.strategy == Strategy::Vanilla {
        0
    } else {
        (d_l_size / cfg.n_u).min(d_u_size)
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut place_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PLACEMENT_STREAM);
    let mut steps = Vec::with_capacity(cfg.epochs * (d_l_size + per_epoch));
    let mut learn_orders = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..d_l_size).collect();
        order.shuffle(&mut order_rng);
        learn_orders.push(order);
    }

    if cfg.strategy == Strategy::Ahead {
        for _ in 0..cfg.epochs {
            steps.extend((0..per_epoch).map(Step::Unlearn));
        }
        for order in learn_orders {
            steps.extend(order.into_iter().map(Step::Learn));
        }
        return Ok(Schedule { steps });
    }

    if cfg.strategy == Strategy::Periodic {
        // One cadence across epoch boundaries; D_U restarts from the top
        // each time its per-epoch quota is spent.
        let budget = cfg.epochs * per_epoch;
        let mut spent = 0;
        for (i, l) in learn_orders.into_iter().flatten().enumerate() {
            steps.push(Step::Learn(l));
            if (i + 1) % cfg.n_u == 0 && spent < budget {
                steps.push(Step::Unlearn(spent % per_epoch));
                spent += 1;
            }
        }
        return Ok(Schedule { steps });
    }

    for order in learn_orders {
        match cfg.strategy {
            Strategy::Vanilla => steps.extend(order.into_iter().map(Step::Learn)),
            Strategy::Random => {
                let total = d_l_size + per_epoch;
                let mut slots = vec![false; total];
                for pos in rand::seq::index::sample(&mut place_rng, total, per_epoch) {
                    slots[pos] = true;
                }
                let mut learn = order.into_iter();
                let mut next_u = 0;
                for is_unlearn in slots {
                    if is_unlearn {
                        steps.push(Step::Unlearn(next_u));
                        next_u += 1;
                    } else {
                        steps.push(Step::Learn(learn.next().expect("slot count matches")));
                    }
                }
            }
            Strategy::Ahead | Strategy::Periodic => unreachable!(),
        }
    }
    Ok(Schedule { steps })
}

/// `sum L(x) - beta * L(x_u)`
pub fn periodic_loss<M: Differentiable>(
    batch_learn: &[M::Sample],
    x_u: Option<&M::Sample>,
    model: &M,
    beta: f64,
) -> Result<f64> {
    if batch_learn.is_empty() {
        return Err(LwfError::Invalid(
            "periodic batch needs at least one learning sample".into(),
        ));
    }
    let mut total = 0.0;
    for x in batch_learn {
        total += model.loss(x)?;
    }
    if let Some(u) = x_u {
        total -= beta * model.loss(u)?;
    }
    Ok(total)
}

/// Value and gradient of [`periodic_loss`].
pub fn periodic_loss_grad<M: Differentiable>(
    batch_learn: &[M::Sample],
    x_u: Option<&M::Sample>,
    model: &M,
    beta: f64,
) -> Result<(f64, ParamVector)> {
    if batch_learn.is_empty() {
        return Err(LwfError::Invalid(
            "periodic batch needs at least one learning sample".into(),
        ));
    }
    let learn: Vec<&M::Sample> = batch_learn.iter().collect();
    let unlearn: Vec<&M::Sample> = x_u.into_iter().collect();
    batch_loss_grad(model, &learn, &unlearn, beta)
}

fn batch_loss_grad<M: Differentiable>(
    model: &M,
    learn: &[&M::Sample],
    unlearn: &[&M::Sample],
    beta: f64,
) -> Result<(f64, ParamVector)> {
    let dim = model.params().dim();
    let mut terms: Vec<(&M::Sample, f64)> = learn.iter().map(|x| (*x, 1.0)).collect();
    if beta != 0.0 {
        terms.extend(unlearn.iter().map(|x| (*x, -beta)));
    }
    let parts = terms
        .par_iter()
        .map(|(x, w)| {
            let mut g = vec![0.0; dim];
            let loss = model.accumulate_grad(x, *w, &mut g)?;
            Ok((loss * w, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for (loss, g) in parts {
        total += loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, ParamVector::new(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Learn,
    Unlearn,
    Mixed,
}

impl StepKind {
    pub fn name(&self) -> &'static str {
        match self {
            StepKind::Learn => "learn",
            StepKind::Unlearn => "unlearn",
            StepKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub kind: StepKind,
    pub loss: f64,
    pub grad_norm: f64,
    pub n_learn: usize,
    pub n_unlearn: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Realized per-sample consumption order.
    pub consumptions: Vec<Step>,
}

impl TrainingLog {
    pub fn write_jsonl<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        for e in &self.entries {
            let line = serde_json::json!({
                "step": e.step,
                "kind": e.kind.name(),
                "loss": e.loss,
                "grad_norm": e.grad_norm,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Fine-tunes `base` on `d_l` while unlearning `d_u` per the strategy.
pub fn train<M: Differentiable>(
    base: &M,
    d_l: &[M::Sample],
    d_u: &[M::Sample],
    cfg: &StrategyConfig,
) -> Result<(M, TrainingLog)> {
    cfg.validate()?;
    let schedule = build_schedule(cfg, d_l.len(), d_u.len())?;
    let mut model = base.clone();
    let mut opt = AdamW::new(cfg.optimizer, model.params().dim());
    let mut log = TrainingLog {
        entries: Vec::new(),
        consumptions: schedule.steps.clone(),
    };
    for (step, batch) in schedule.batches(cfg.batch_size).into_iter().enumerate() {
        let kind = batch.kind();
        if batch.learn.is_empty() && cfg.beta == 0.0 {
            // nothing to optimize; stepping would still apply weight decay
            continue;
        }
        let learn: Vec<&M::Sample> = batch.learn.iter().map(|&i| &d_l[i]).collect();
        let unlearn: Vec<&M::Sample> = batch.unlearn.iter().map(|&j| &d_u[j]).collect();
        let (loss, grad) = batch_loss_grad(&model, &learn, &unlearn, cfg.beta)?;
        let non_finite = |what| LwfError::NonFinite {
            step,
            kind: kind.name().to_string(),
            what,
        };
        if !loss.is_finite() {
            return Err(non_finite("loss"));
        }
        if !grad.is_finite() {
            return Err(non_finite("gradient"));
        }
        let grad_norm = grad.norm();
        opt.step(model.params_mut().as_mut_slice(), grad.as_slice())?;
        if !model.params().is_finite() {
            return Err(non_finite("parameters"));
        }
        log.entries.push(LogEntry {
            step,
            kind,
            loss,
            grad_norm,
            n_learn: batch.learn.len(),
            n_unlearn: batch.unlearn.len(),
        });
    }
    Ok((model, log))
}

/// Vanilla training on the learning set; the result is `theta*_L`.
pub fn fit_theta_star<M: Differentiable>(base: &M, d_l: &[M::Sample], cfg: &StrategyConfig) -> Result<ParamVector> {
    let (model, _) = train(base, d_l, &[], &cfg.vanilla())?;
    Ok(model.params().clone())
}

/// Size-equalized, round-robin interleaving of several learning sets.
/// Larger sets are down-sampled with a generator seeded from `seed`.
pub fn balanced_mixture<S: Clone>(d_ls: &[&[S]], seed: u64) -> Result<Vec<S>> {
    if d_ls.len() < 2 {
        return Err(LwfError::Invalid(
            "multi-task training needs at least two learning sets".into(),
        ));
    }
    if d_ls.iter().any(|d| d.is_empty()) {
        return Err(LwfError::EmptyDataset);
    }
    let m = d_ls.iter().map(|d| d.len()).min().expect("non-empty list");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = d_ls
        .iter()
        .map(|d| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(m);
            idx
        })
        .collect();
    let mut out = Vec::with_capacity(m * d_ls.len());
    for r in 0..m {
        for (d, p) in d_ls.iter().zip(&picks) {
            out.push(d[p[r]].clone());
        }
    }
    Ok(out)
}

pub fn train_multitask<M: Differentiable>(
    base: &M,
    d_ls: &[&[M::Sample]],
    d_u: &[M::Sample],
    cfg: &StrategyConfig,
) -> Result<(M, TrainingLog)> {
    let mixture = balanced_mixture(d_ls, cfg.seed)?;
    train(base, &mixture, d_u, cfg)
}
