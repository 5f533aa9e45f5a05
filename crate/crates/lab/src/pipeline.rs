//! The pipeline commands. Every command reads its inputs from the output
//! directory, writes its outputs atomically and records their hashes in the
//! owning directory's manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/<domain>.{train,eval}.jsonl
//! seed-<s>/base.ckpt
//! seed-<s>/self/<domain>-self.jsonl
//! seed-<s>/learn-<L>/target.ckpt
//! seed-<s>/learn-<L>/fisher.bin
//! seed-<s>/learn-<L>/scores/<F>.csv            one-step scores
//! seed-<s>/learn-<L>/scores/<F>.steps-<k>.csv  k-step scores
//! seed-<s>/learn-<L>/runs/<run>/{model.ckpt, log.jsonl, selection.json, eval.json}
//! report.{json,txt}, report-<metric>.csv, ablation.{json,txt}
//! ```

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use lwf_core::elicit::{elicit, ElicitConfig, SELF_SUFFIX};
use lwf_core::fisher::{
    estimate_fisher, pool_mixed, read_scores_csv, score_candidates, select_unlearning_set, write_scores_csv,
    ConfidenceEntry, Direction, FcConfig, FisherDiagonal, Selection,
};
use lwf_core::metrics::{evaluate, report_matrix, EvalReport, ReportMatrix, MATRIX_METRICS};
use lwf_core::tasks::{Dataset, Vocab, MIXED_DOMAIN};
use lwf_core::trainer::{balanced_mixture, fit_theta_star, train, Strategy, StrategyConfig};
use lwf_core::{Differentiable, Example, TinyLm};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::store::Store;

pub const SPLITS: [&str; 2] = ["train", "eval"];

/// One fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub learning: String,
    /// `None` for vanilla fine-tuning.
    pub forgetting: Option<String>,
    pub strategy: Strategy,
    pub direction: Direction,
    pub beta: f64,
}

impl RunSpec {
    pub fn vanilla(learning: &str) -> Self {
        Self {
            learning: learning.to_string(),
            forgetting: None,
            strategy: Strategy::Vanilla,
            direction: Direction::Highest,
            beta: 0.0,
        }
    }

    pub fn is_vanilla(&self) -> bool {
        self.strategy == Strategy::Vanilla || self.forgetting.is_none()
    }

    pub fn name(&self) -> String {
        match &self.forgetting {
            Some(f) if !self.is_vanilla() => format!(
                "{}-{}-{}-b{}",
                self.strategy.name(),
                self.direction.name(),
                f,
                self.beta
            ),
            _ => "vanilla".to_string(),
        }
    }
}

/// What a training run recorded about its unlearning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub spec: RunSpec,
    pub sources: Vec<String>,
    pub candidates: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub shortfall: usize,
}

pub struct Lab {
    pub cfg: RunConfig,
    hash: String,
}

impl Lab {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        Self { cfg, hash }
    }

    pub fn root(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn data_store(&self) -> Store {
        Store::new(self.root().join("data"), self.hash.clone(), None)
    }

    fn root_store(&self) -> Store {
        Store::new(self.root().to_path_buf(), self.hash.clone(), None)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root().join(format!("seed-{seed}"))
    }

    fn seed_store(&self, seed: u64) -> Store {
        Store::new(self.seed_dir(seed), self.hash.clone(), Some(seed))
    }

    fn check_seed(&self, seed: u64) -> Result<()> {
        if self.cfg.seeds.contains(&seed) {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "seed {seed} is not in the configured seed list"
            )))
        }
    }

    fn learn_rel(learning: &str, file: &str) -> String {
        format!("learn-{learning}/{file}")
    }

    pub fn run_rel(spec: &RunSpec, file: &str) -> String {
        Self::learn_rel(&spec.learning, &format!("runs/{}/{file}", spec.name()))
    }

    fn scores_rel(learning: &str, forgetting: &str, steps: usize) -> String {
        if steps == 1 {
            Self::learn_rel(learning, &format!("scores/{forgetting}.csv"))
        } else {
            Self::learn_rel(learning, &format!("scores/{forgetting}.steps-{steps}.csv"))
        }
    }

    // ---- gen ----

    pub fn gen(&self) -> Result<()> {
        let store = self.data_store();
        for spec in &self.cfg.tasks {
            let (train, eval) = spec.generate(&self.cfg.vocab)?;
            for (split, ds) in SPLITS.iter().zip([train, eval]) {
                store.put(&format!("{}.{split}.jsonl", spec.domain_id), &jsonl_bytes(&ds)?)?;
            }
        }
        Ok(())
    }

    pub fn dataset(&self, domain: &str, split: &str) -> Result<Dataset> {
        self.cfg.task(domain)?;
        let rel = format!("{domain}.{split}.jsonl");
        let bytes = self.data_store().get(&rel, "gen")?;
        Ok(Dataset::read_jsonl(bytes.as_slice(), &self.data_store().path(&rel))?)
    }

    // ---- pretrain ----

    pub fn pretrain(&self, seed: u64) -> Result<()> {
        self.check_seed(seed)?;
        let sets: Vec<Dataset> = self
            .cfg
            .tasks
            .iter()
            .map(|t| self.dataset(&t.domain_id, "train"))
            .collect::<Result<_>>()?;
        let slices: Vec<&[Example]> = sets.iter().map(|d| d.examples()).collect();
        let mixture = if slices.len() == 1 {
            slices[0].to_vec()
        } else {
            balanced_mixture(&slices, seed)?
        };
        let init = TinyLm::init(self.cfg.model_config(), seed)?;
        let p = &self.cfg.pretrain;
        let cfg = StrategyConfig {
            strategy: Strategy::Vanilla,
            batch_size: p.batch_size,
            epochs: p.epochs,
            seed,
            optimizer: p.optimizer,
            ..StrategyConfig::default()
        };
        let (base, _) = train(&init, &mixture, &[], &cfg)?;
        self.seed_store(seed).put("base.ckpt", &base.to_bytes())?;
        Ok(())
    }

    pub fn base(&self, seed: u64) -> Result<TinyLm> {
        self.load_model(seed, "base.ckpt", "pretrain")
    }

    fn load_model(&self, seed: u64, rel: &str, producer: &'static str) -> Result<TinyLm> {
        let bytes = self.seed_store(seed).get(rel, producer)?;
        Ok(TinyLm::from_bytes(&bytes)?)
    }

    // ---- fit-target ----

    pub fn fit_target(&self, seed: u64, learning: &str) -> Result<()> {
        self.check_seed(seed)?;
        let base = self.base(seed)?;
        let d_l = self.dataset(learning, "train")?;
        let cfg = self.cfg.train.strategy_config(seed).vanilla();
        let star = fit_theta_star(&base, d_l.examples(), &cfg)?;
        let target = base.with_params(star)?;
        self.seed_store(seed)
            .put(&Self::learn_rel(learning, "target.ckpt"), &target.to_bytes())?;
        Ok(())
    }

    pub fn target(&self, seed: u64, learning: &str) -> Result<TinyLm> {
        self.load_model(seed, &Self::learn_rel(learning, "target.ckpt"), "fit-target")
    }

    // ---- elicit ----

    pub fn elicit(&self, seed: u64, forgetting: &str) -> Result<()> {
        self.check_seed(seed)?;
        if forgetting == MIXED_DOMAIN {
            return Err(LabError::Config(
                "elicit takes a single domain; the mixed pool is built at train time".into(),
            ));
        }
        let base = self.base(seed)?;
        let d_f = self.dataset(forgetting, "train")?;
        let cfg = ElicitConfig {
            max_tokens: self.cfg.elicit.max_tokens,
            stop_token: Vocab::STOP,
        };
        let out = elicit(&base, &d_f, &cfg)?;
        self.seed_store(seed).put(
            &format!("self/{forgetting}{SELF_SUFFIX}.jsonl"),
            &jsonl_bytes(&out.dataset)?,
        )?;
        Ok(())
    }

    pub fn self_data(&self, seed: u64, forgetting: &str) -> Result<Dataset> {
        let store = self.seed_store(seed);
        let rel = format!("self/{forgetting}{SELF_SUFFIX}.jsonl");
        let bytes = store.get(&rel, "elicit")?;
        Ok(Dataset::read_jsonl(bytes.as_slice(), &store.path(&rel))?)
    }

    // ---- fisher ----

    pub fn fisher(&self, seed: u64, learning: &str) -> Result<()> {
        self.check_seed(seed)?;
        let target = self.target(seed, learning)?;
        let d_l = self.dataset(learning, "train")?;
        let f = estimate_fisher(&target, d_l.examples())?;
        self.seed_store(seed)
            .put(&Self::learn_rel(learning, "fisher.bin"), &f.to_bytes())?;
        Ok(())
    }

    pub fn fisher_weights(&self, seed: u64, learning: &str) -> Result<FisherDiagonal> {
        let bytes = self
            .seed_store(seed)
            .get(&Self::learn_rel(learning, "fisher.bin"), "fisher")?;
        Ok(FisherDiagonal::from_bytes(&bytes)?)
    }

    // ---- score ----

    /// Scores the forgetting domain's self-generated candidates; `steps`
    /// overrides the configured inner step count.
    pub fn score(&self, seed: u64, learning: &str, forgetting: &str, steps: Option<usize>) -> Result<PathBuf> {
        self.check_seed(seed)?;
        if forgetting == MIXED_DOMAIN {
            return Err(LabError::Config(
                "score takes a single domain; mixed pools the per-domain scores".into(),
            ));
        }
        self.cfg.forgetting_sources(learning, forgetting)?;
        let base = self.base(seed)?;
        let target = self.target(seed, learning)?;
        let fisher = self.fisher_weights(seed, learning)?;
        let d_self = self.self_data(seed, forgetting)?;
        let fc = FcConfig {
            steps: steps.unwrap_or(self.cfg.fc.steps),
            ..self.cfg.fc
        };
        let scores = score_candidates(d_self.examples(), &base, target.params(), &fisher, &fc)?;
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &d_self, &scores)?;
        self.seed_store(seed)
            .put(&Self::scores_rel(learning, forgetting, fc.steps), &buf)
    }

    pub fn scores(&self, seed: u64, learning: &str, forgetting: &str, steps: usize) -> Result<Vec<ConfidenceEntry>> {
        let bytes = self
            .seed_store(seed)
            .get(&Self::scores_rel(learning, forgetting, steps), "score")?;
        Ok(read_scores_csv(BufReader::new(bytes.as_slice()))?)
    }

    /// Unlearning set of a run: per-domain selection, or the pooled top of
    /// every source in the mixed setting.
    pub fn select(&self, seed: u64, spec: &RunSpec) -> Result<(Vec<String>, Dataset, Selection)> {
        let forgetting = spec
            .forgetting
            .as_deref()
            .ok_or_else(|| LabError::Config("a non-vanilla run needs a forgetting domain".into()))?;
        let sources = self.cfg.forgetting_sources(&spec.learning, forgetting)?;
        let d_l_size = self.dataset(&spec.learning, "train")?.len();
        let n_u = self.cfg.train.n_u;
        let mut selfs = Vec::new();
        let mut scores = Vec::new();
        for s in &sources {
            let d = self.self_data(seed, s)?;
            let sc = self.scores(seed, &spec.learning, s, 1)?;
            if sc.len() != d.len() {
                return Err(LabError::Manifest(format!(
                    "scores for {s} cover {} candidates but the self-generated set has {}",
                    sc.len(),
                    d.len()
                )));
            }
            selfs.push(d);
            scores.push(sc);
        }
        if forgetting == MIXED_DOMAIN {
            let (pooled, sel) = pool_mixed(&selfs, &scores, d_l_size, n_u, spec.direction)?;
            Ok((sources, pooled, sel))
        } else {
            let sel = select_unlearning_set(&selfs[0], &scores[0], d_l_size, n_u, spec.direction)?;
            Ok((sources, selfs.remove(0), sel))
        }
    }

    // ---- train ----

    pub fn train(&self, seed: u64, spec: &RunSpec) -> Result<String> {
        self.check_seed(seed)?;
        self.cfg.task(&spec.learning)?;
        let base = self.base(seed)?;
        let d_l = self.dataset(&spec.learning, "train")?;
        let mut cfg = StrategyConfig {
            strategy: spec.strategy,
            beta: spec.beta,
            ..self.cfg.train.strategy_config(seed)
        };
        let store = self.seed_store(seed);
        let d_u = if spec.is_vanilla() {
            cfg.strategy = Strategy::Vanilla;
            Vec::new()
        } else {
            let (sources, pool, sel) = self.select(seed, spec)?;
            let record = SelectionRecord {
                spec: spec.clone(),
                sources,
                candidates: pool.len(),
                indices: sel.indices.clone(),
                scores: sel.scores.clone(),
                shortfall: sel.shortfall,
            };
            store.put(&Self::run_rel(spec, "selection.json"), &json_bytes(&record))?;
            sel.examples
        };
        let (model, log) = train(&base, d_l.examples(), &d_u, &cfg)?;
        let mut log_bytes = Vec::new();
        log.write_jsonl(&mut log_bytes)?;
        store.put(&Self::run_rel(spec, "log.jsonl"), &log_bytes)?;
        store.put(&Self::run_rel(spec, "model.ckpt"), &model.to_bytes())?;
        Ok(spec.name())
    }

    pub fn run_model(&self, seed: u64, spec: &RunSpec) -> Result<TinyLm> {
        self.load_model(seed, &Self::run_rel(spec, "model.ckpt"), "train")
    }

    // ---- eval ----

    /// Evaluates a run on every domain's eval split. Non-vanilla runs are
    /// also compared with the vanilla run's responses, encoded with the base
    /// model's embeddings.
    pub fn eval(&self, seed: u64, spec: &RunSpec) -> Result<EvalReport> {
        self.check_seed(seed)?;
        let model = self.run_model(seed, spec)?;
        let sets: Vec<Dataset> = self
            .cfg
            .tasks
            .iter()
            .map(|t| self.dataset(&t.domain_id, "eval"))
            .collect::<Result<_>>()?;
        let reference = if spec.is_vanilla() {
            None
        } else {
            let vanilla = self.load_model(
                seed,
                &Self::run_rel(&RunSpec::vanilla(&spec.learning), "model.ckpt"),
                "train --strategy vanilla",
            )?;
            Some((vanilla, self.base(seed)?))
        };
        let report = evaluate(
            &model,
            &sets,
            self.cfg.eval.max_tokens,
            Vocab::STOP,
            reference.as_ref().map(|(v, b)| (v, b)),
        )?;
        self.seed_store(seed)
            .put(&Self::run_rel(spec, "eval.json"), &json_bytes(&report))?;
        Ok(report)
    }

    pub fn eval_report(&self, seed: u64, spec: &RunSpec) -> Result<EvalReport> {
        let store = self.seed_store(seed);
        let rel = Self::run_rel(spec, "eval.json");
        let bytes = store.get(&rel, "eval")?;
        serde_json::from_slice(&bytes).map_err(|e| LabError::Manifest(format!("{}: {e}", store.path(&rel).display())))
    }

    /// The run the configured train settings describe for a pair.
    pub fn configured_run(&self, learning: &str, forgetting: &str) -> RunSpec {
        RunSpec {
            learning: learning.to_string(),
            forgetting: Some(forgetting.to_string()),
            strategy: self.cfg.train.strategy,
            direction: self.cfg.train.direction,
            beta: self.cfg.train.beta,
        }
    }

    // ---- report ----

    /// Verifies every manifest against the current config, then averages each
    /// run's evaluation over seeds and builds the report matrices.
    pub fn report(&self) -> Result<Report> {
        self.data_store().verify()?;
        for &seed in &self.cfg.seeds {
            self.seed_store(seed).verify()?;
        }
        let mut runs: BTreeMap<(String, String), Vec<EvalReport>> = BTreeMap::new();
        let mut baseline: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
        for &seed in &self.cfg.seeds {
            for l in &self.cfg.experiment.learning {
                baseline
                    .entry(l.clone())
                    .or_default()
                    .push(self.eval_report(seed, &RunSpec::vanilla(l))?);
            }
            for (l, f) in self.cfg.pairs() {
                let r = self.eval_report(seed, &self.configured_run(&l, &f))?;
                runs.entry((l, f)).or_default().push(r);
            }
        }
        let mean_runs: BTreeMap<_, _> = runs.iter().map(|(k, v)| (k.clone(), mean_report(v))).collect();
        let mean_base: BTreeMap<_, _> = baseline.iter().map(|(k, v)| (k.clone(), mean_report(v))).collect();
        let matrix = report_matrix(&mean_runs, &mean_base)?;
        let report = Report {
            config_hash: self.hash.clone(),
            seeds: self.cfg.seeds.clone(),
            run: self.configured_run("<learning>", "<forgetting>").name(),
            matrix,
        };
        let store = self.root_store();
        store.put("report.json", &json_bytes(&report))?;
        store.put("report.txt", report.matrix.to_text().as_bytes())?;
        for metric in MATRIX_METRICS {
            store.put(&format!("report-{metric}.csv"), report.matrix.to_csv(metric).as_bytes())?;
        }
        Ok(report)
    }

    // ---- whole pipeline ----

    /// Every command in order for every seed: the configured run and the
    /// vanilla baseline for each pair, then the report.
    pub fn run_all(&self) -> Result<Report> {
        self.gen()?;
        for &seed in &self.cfg.seeds {
            self.prepare_seed(seed)?;
            for l in &self.cfg.experiment.learning {
                let v = RunSpec::vanilla(l);
                self.train(seed, &v)?;
                self.eval(seed, &v)?;
            }
            for (l, f) in self.cfg.pairs() {
                let spec = self.configured_run(&l, &f);
                self.train(seed, &spec)?;
                self.eval(seed, &spec)?;
            }
        }
        self.report()
    }

    /// Base model, targets, self-generated data, Fisher weights and one-step
    /// scores for one seed.
    pub fn prepare_seed(&self, seed: u64) -> Result<()> {
        self.pretrain(seed)?;
        for f in self.forgetting_domains() {
            self.elicit(seed, &f)?;
        }
        for l in &self.cfg.experiment.learning {
            self.fit_target(seed, l)?;
            self.fisher(seed, l)?;
            for f in self.forgetting_domains() {
                if &f != l {
                    self.score(seed, l, &f, None)?;
                }
            }
        }
        Ok(())
    }

    /// Single domains whose self-generated data some pair needs.
    pub fn forgetting_domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (l, f) in self.cfg.pairs() {
            for s in self.cfg.forgetting_sources(&l, &f).unwrap_or_default() {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub(crate) fn root_put(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.root_store().put(rel, bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Run name pattern the matrix cells come from.
    pub run: String,
    pub matrix: ReportMatrix,
}

/// Per-domain mean of several evaluations; optional metrics are averaged
/// over the evaluations that have them.
pub fn mean_report(reports: &[EvalReport]) -> EvalReport {
    let mut out = EvalReport::default();
    let Some(first) = reports.first() else {
        return out;
    };
    for domain in first.domains.keys() {
        let entries: Vec<_> = reports.iter().filter_map(|r| r.domains.get(domain)).collect();
        let n = entries.len() as f64;
        let opt_mean = |f: &dyn Fn(&lwf_core::metrics::DomainEval) -> Option<f64>| {
            let vs: Vec<f64> = entries.iter().filter_map(|e| f(e)).collect();
            (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
        };
        let mut counts = lwf_core::metrics::AccuracyCounts::default();
        for e in &entries {
            counts.evaluated += e.counts.evaluated;
            counts.correct += e.counts.correct;
            counts.format_failures += e.counts.format_failures;
        }
        out.domains.insert(
            domain.clone(),
            lwf_core::metrics::DomainEval {
                accuracy: entries.iter().map(|e| e.accuracy).sum::<f64>() / n,
                counts,
                ttr: opt_mean(&|e| e.ttr),
                similarity: opt_mean(&|e| e.similarity),
            },
        );
    }
    out
}

pub(crate) fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("artifact serializes");
    b.push(b'\n');
    b
}

fn jsonl_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    Ok(buf)
}
