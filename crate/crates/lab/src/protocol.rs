//! The ablation sweep and the directional checks read off it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lwf_core::fisher::{overlap_ratio, select_unlearning_set, Direction};
use lwf_core::metrics::pct_change;
use lwf_core::trainer::Strategy;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::pipeline::{json_bytes, Lab, RunSpec};

pub const DIRECTIONS: [Direction; 2] = [Direction::Highest, Direction::Lowest];

/// Learning and forgetting accuracy of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub learning: String,
    pub forgetting: String,
    pub strategy: Strategy,
    pub direction: Direction,
    pub beta: f64,
    pub learning_acc: f64,
    pub forgetting_acc: f64,
    /// Learning accuracy change against the same seed's vanilla run, in %.
    pub learning_change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaRun {
    pub seed: u64,
    pub learning: String,
    pub forgetting: String,
    pub learning_acc: f64,
    pub forgetting_acc: f64,
}

/// Learning accuracy changes of one (strategy, direction) over every pair,
/// β and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub strategy: Strategy,
    pub direction: Direction,
    pub values: Vec<f64>,
    /// Runs left out because the vanilla accuracy was zero.
    pub undefined: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    pub fn from_values(strategy: Strategy, direction: Direction, values: Vec<f64>, undefined: usize) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            strategy,
            direction,
            values,
            undefined,
            mean,
            variance,
            min,
            max,
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Overlap of the multi-step top selection with the one-step one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOverlap {
    pub seed: u64,
    pub learning: String,
    pub forgetting: String,
    pub steps: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub config_hash: String,
    pub vanilla: Vec<VanillaRun>,
    pub runs: Vec<AblationRun>,
    pub distributions: Vec<Distribution>,
    pub step_overlap: Vec<StepOverlap>,
}

impl Lab {
    /// Sweeps strategies × {highest, lowest} × β over every seed and pair,
    /// next to each pair's vanilla run, then compares multi-step FC
    /// selections with the one-step ones. Needs the per-seed artifacts that
    /// [`Lab::prepare_seed`] produces.
    pub fn ablate(&self) -> Result<Ablation> {
        let exp = &self.cfg.experiment;
        let mut vanilla = Vec::new();
        let mut runs = Vec::new();
        for &seed in &self.cfg.seeds {
            let mut vanilla_acc = BTreeMap::new();
            for l in &exp.learning {
                let spec = RunSpec::vanilla(l);
                self.train(seed, &spec)?;
                vanilla_acc.insert(l.clone(), self.eval(seed, &spec)?);
            }
            for (l, f) in self.cfg.pairs() {
                let v = &vanilla_acc[&l];
                let v_learn = domain_acc(v, &l)?;
                vanilla.push(VanillaRun {
                    seed,
                    learning: l.clone(),
                    forgetting: f.clone(),
                    learning_acc: v_learn,
                    forgetting_acc: forgetting_acc(self, v, &l, &f)?,
                });
                for &strategy in &exp.strategies {
                    for direction in DIRECTIONS {
                        for &beta in &exp.betas {
                            let spec = RunSpec {
                                learning: l.clone(),
                                forgetting: Some(f.clone()),
                                strategy,
                                direction,
                                beta,
                            };
                            self.train(seed, &spec)?;
                            let r = self.eval(seed, &spec)?;
                            let learning_acc = domain_acc(&r, &l)?;
                            runs.push(AblationRun {
                                seed,
                                learning: l.clone(),
                                forgetting: f.clone(),
                                strategy,
                                direction,
                                beta,
                                learning_acc,
                                forgetting_acc: forgetting_acc(self, &r, &l, &f)?,
                                learning_change_pct: pct_change(learning_acc, v_learn),
                            });
                        }
                    }
                }
            }
        }

        let mut distributions = Vec::new();
        for &strategy in &exp.strategies {
            for direction in DIRECTIONS {
                let picked: Vec<_> = runs
                    .iter()
                    .filter(|r| r.strategy == strategy && r.direction == direction)
                    .collect();
                let values: Vec<f64> = picked.iter().filter_map(|r| r.learning_change_pct).collect();
                let undefined = picked.len() - values.len();
                distributions.push(Distribution::from_values(strategy, direction, values, undefined));
            }
        }

        let step_overlap = self.step_overlaps()?;
        let ablation = Ablation {
            config_hash: self.config_hash().to_string(),
            vanilla,
            runs,
            distributions,
            step_overlap,
        };
        self.root_put("ablation.json", &json_bytes(&ablation))?;
        self.root_put("ablation.txt", ablation.to_text().as_bytes())?;
        Ok(ablation)
    }

    fn step_overlaps(&self) -> Result<Vec<StepOverlap>> {
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            for l in &self.cfg.experiment.learning {
                let d_l_size = self.dataset(l, "train")?.len();
                for f in self.forgetting_domains() {
                    if &f == l {
                        continue;
                    }
                    let d_self = self.self_data(seed, &f)?;
                    let pick = |steps| -> Result<_> {
                        let scores = self.scores(seed, l, &f, steps)?;
                        Ok(select_unlearning_set(
                            &d_self,
                            &scores,
                            d_l_size,
                            self.cfg.train.n_u,
                            Direction::Highest,
                        )?)
                    };
                    let one = pick(1)?;
                    for &steps in &self.cfg.experiment.fc_steps {
                        self.score(seed, l, &f, Some(steps))?;
                        out.push(StepOverlap {
                            seed,
                            learning: l.clone(),
                            forgetting: f.clone(),
                            steps,
                            overlap: overlap_ratio(&one, &pick(steps)?)?,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

fn domain_acc(r: &lwf_core::metrics::EvalReport, domain: &str) -> Result<f64> {
    r.accuracy(domain)
        .ok_or_else(|| LabError::Manifest(format!("evaluation has no entry for {domain:?}")))
}

/// Accuracy on the forgetting target; the mean over its sources when mixed.
fn forgetting_acc(lab: &Lab, r: &lwf_core::metrics::EvalReport, learning: &str, forgetting: &str) -> Result<f64> {
    let sources = lab.cfg.forgetting_sources(learning, forgetting)?;
    let accs = sources.iter().map(|s| domain_acc(r, s)).collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

fn mean(vs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = vs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Seed means of one run family on one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub learning_acc: f64,
    pub forgetting_acc: f64,
}

impl Ablation {
    pub fn vanilla_means(&self, learning: &str, forgetting: &str) -> Means {
        let rows: Vec<_> = self
            .vanilla
            .iter()
            .filter(|v| v.learning == learning && v.forgetting == forgetting)
            .collect();
        Means {
            learning_acc: mean(rows.iter().map(|v| v.learning_acc)),
            forgetting_acc: mean(rows.iter().map(|v| v.forgetting_acc)),
        }
    }

    pub fn means(
        &self,
        learning: &str,
        forgetting: &str,
        strategy: Strategy,
        direction: Direction,
        beta: f64,
    ) -> Means {
        let rows: Vec<_> = self
            .runs
            .iter()
            .filter(|r| {
                r.learning == learning
                    && r.forgetting == forgetting
                    && r.strategy == strategy
                    && r.direction == direction
                    && r.beta == beta
            })
            .collect();
        Means {
            learning_acc: mean(rows.iter().map(|r| r.learning_acc)),
            forgetting_acc: mean(rows.iter().map(|r| r.forgetting_acc)),
        }
    }

    pub fn distribution(&self, strategy: Strategy, direction: Direction) -> Option<&Distribution> {
        self.distributions
            .iter()
            .find(|d| d.strategy == strategy && d.direction == direction)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy change vs vanilla on the learning task (%)");
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>4} {:>9} {:>10} {:>9} {:>9}",
            "strategy", "fc", "n", "mean", "variance", "min", "max"
        );
        for d in &self.distributions {
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:>4} {:>9.3} {:>10.3} {:>9.3} {:>9.3}",
                d.strategy.name(),
                d.direction.name(),
                d.values.len(),
                d.mean,
                d.variance,
                d.min,
                d.max
            );
        }
        for d in &self.distributions {
            let vals: Vec<String> = d.values.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(s, "{}-{}: [{}]", d.strategy.name(), d.direction.name(), vals.join(", "));
        }
        let _ = writeln!(s, "\none-step vs multi-step top-FC overlap");
        let mut by_steps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for o in &self.step_overlap {
            by_steps.entry(o.steps).or_default().push(o.overlap);
        }
        for (steps, v) in by_steps {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let _ = writeln!(s, "steps {steps}: mean {:.4} min {:.4}", mean(v.iter().copied()), lo);
        }
        s
    }
}
