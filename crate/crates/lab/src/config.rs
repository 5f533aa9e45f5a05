//! Run configuration: one TOML file, with `key=value` overrides addressed by
//! dotted paths (`train.beta=0.05`, `tasks.0.n_train=50`).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use lwf_core::fisher::{Direction, FcConfig};
use lwf_core::optim::AdamWConfig;
use lwf_core::tasks::{TaskSpec, Vocab, MIXED_DOMAIN};
use lwf_core::trainer::{Strategy, StrategyConfig};
use lwf_core::TinyLmConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "LWF_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

fn default_batch() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElicitSettings {
    pub max_tokens: usize,
}

impl Default for ElicitSettings {
    fn default() -> Self {
        Self { max_tokens: 256 }
    }
}

/// Fine-tuning settings shared by every run; the seed comes from the seed
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub strategy: Strategy,
    pub direction: Direction,
    pub n_u: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let s = StrategyConfig::default();
        Self {
            strategy: s.strategy,
            direction: Direction::Highest,
            n_u: s.n_u,
            beta: s.beta,
            batch_size: s.batch_size,
            epochs: s.epochs,
            optimizer: s.optimizer,
        }
    }
}

impl TrainSettings {
    pub fn strategy_config(&self, seed: u64) -> StrategyConfig {
        StrategyConfig {
            strategy: self.strategy,
            n_u: self.n_u,
            beta: self.beta,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub max_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { max_tokens: 8 }
    }
}

/// Which (learning, forgetting) pairs to run and what the ablation sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    pub learning: Vec<String>,
    /// Forgetting domains; `"mixed"` pools every non-learning domain.
    pub forgetting: Vec<String>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// Inner step counts compared against the one-step score.
    #[serde(default = "default_fc_steps")]
    pub fc_steps: Vec<usize>,
}

fn default_betas() -> Vec<f64> {
    vec![0.05, 0.10, 0.20, 0.25]
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Periodic, Strategy::Ahead, Strategy::Random]
}

fn default_fc_steps() -> Vec<usize> {
    vec![2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub vocab: Vocab,
    pub model: ModelSettings,
    pub tasks: Vec<TaskSpec>,
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub elicit: ElicitSettings,
    #[serde(default)]
    pub fc: FcConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    pub experiment: ExperimentSettings,
}

impl RunConfig {
    /// Reads `path`, applies the output-root environment override, then the
    /// `key=value` overrides, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        Self::from_toml(&text, env_root.as_deref(), overrides)
    }

    pub fn from_toml(text: &str, output_root: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| LabError::Config(one_line(&e.to_string())))?;
        if let Some(root) = output_root {
            table.insert(
                "output_dir".into(),
                toml::Value::String(root.to_string_lossy().into_owned()),
            );
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut ids = HashSet::new();
        let mut tags = HashSet::new();
        for t in &self.tasks {
            if t.domain_id.is_empty() || t.domain_id == MIXED_DOMAIN || t.domain_id.contains(['/', '\\']) {
                return bad(format!("invalid domain id {:?}", t.domain_id));
            }
            if !ids.insert(t.domain_id.as_str()) {
                return bad(format!("duplicate domain id {:?}", t.domain_id));
            }
            if !tags.insert(t.tag) {
                return bad(format!("tag {} is used by more than one task", t.tag));
            }
            t.validate(&self.vocab)?;
        }
        self.model_config().validate()?;
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain epochs and batch_size must be positive".into());
        }
        self.pretrain.optimizer.validate()?;
        if self.elicit.max_tokens == 0 || self.eval.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        self.fc.validate()?;
        self.train.strategy_config(0).validate()?;
        let exp = &self.experiment;
        if exp.learning.is_empty() {
            return bad("experiment.learning must name at least one domain".into());
        }
        for l in &exp.learning {
            if !ids.contains(l.as_str()) {
                return bad(format!("experiment.learning names unknown domain {l:?}"));
            }
        }
        for f in &exp.forgetting {
            if f == MIXED_DOMAIN {
                if self.tasks.len() < 3 {
                    return bad("the mixed setting needs at least two non-learning domains".into());
                }
            } else if !ids.contains(f.as_str()) {
                return bad(format!("experiment.forgetting names unknown domain {f:?}"));
            }
        }
        if exp.betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return bad("experiment.betas must be finite and nonnegative".into());
        }
        if exp.fc_steps.iter().any(|s| *s < 2) {
            return bad("experiment.fc_steps compares against one step; use values >= 2".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> TinyLmConfig {
        TinyLmConfig {
            vocab_size: self.vocab.size(),
            context: self.model.context,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            pad_token: Vocab::PAD,
        }
    }

    pub fn task(&self, domain: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.domain_id == domain)
            .ok_or_else(|| LabError::Config(format!("unknown domain {domain:?}")))
    }

    /// Domains whose self-generated data a forgetting target draws from.
    pub fn forgetting_sources(&self, learning: &str, forgetting: &str) -> Result<Vec<String>> {
        if forgetting == MIXED_DOMAIN {
            return Ok(self
                .tasks
                .iter()
                .map(|t| t.domain_id.clone())
                .filter(|d| d != learning)
                .collect());
        }
        self.task(forgetting)?;
        if forgetting == learning {
            return Err(LabError::Config(format!(
                "{learning:?} cannot be both learned and forgotten"
            )));
        }
        Ok(vec![forgetting.to_string()])
    }

    /// `(learning, forgetting)` pairs of the experiment, diagonal excluded.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for l in &self.experiment.learning {
            for f in &self.experiment.forgetting {
                if l != f {
                    out.push((l.clone(), f.clone()));
                }
            }
        }
        out
    }

    /// Hex SHA-256 of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets a dotted key. The value is read as a TOML literal when possible and
/// as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("bad override key {key:?}")));
    }
    let mut root = toml::Value::Table(std::mem::take(table));
    let result = set_path(&mut root, &parts, value);
    if let toml::Value::Table(t) = root {
        *table = t;
    }
    result.map_err(|_| LabError::Config(format!("override key {key:?} does not address a config entry")))
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value) -> std::result::Result<(), ()> {
    let (head, rest) = parts.split_first().ok_or(())?;
    let child = match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.to_string(), value);
                return Ok(());
            }
            t.entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(items) => {
            let idx: usize = head.parse().map_err(|_| ())?;
            let item = items.get_mut(idx).ok_or(())?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => return Err(()),
    };
    set_path(child, rest, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
output_dir = "out"
seeds = [0, 1]

[model]
context = 6
embed_dim = 4
hidden_dim = 8

[[tasks]]
domain_id = "add-a"
tag = 0
kind = "modular-add"
modulus = 4
operand_range = 10
n_train = 20
n_eval = 10
seed = 3

[[tasks]]
domain_id = "add-b"
tag = 1
kind = "modular-add"
modulus = 6
operand_range = 10
n_train = 20
n_eval = 10
seed = 3

[pretrain]
epochs = 2

[experiment]
learning = ["add-a"]
forgetting = ["add-b"]
"#;

    #[test]
    fn defaults_match_the_reference_settings() {
        let c = RunConfig::from_toml(SAMPLE, None, &[]).unwrap();
        assert_eq!(c.train.n_u, 7);
        assert_eq!(c.train.beta, 0.1);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.epochs, 1);
        assert_eq!(c.fc.alpha, 1e-2);
        assert_eq!(c.elicit.max_tokens, 256);
        assert_eq!(c.experiment.betas, vec![0.05, 0.10, 0.20, 0.25]);
        assert_eq!(c.pairs(), vec![("add-a".to_string(), "add-b".to_string())]);
    }

    #[test]
    fn overrides_address_nested_keys_and_array_items() {
        let c = RunConfig::from_toml(
            SAMPLE,
            None,
            &[
                "train.beta=0.05".into(),
                "train.strategy=ahead".into(),
                "tasks.1.modulus=7".into(),
                "seeds=[4]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.beta, 0.05);
        assert_eq!(c.train.strategy, Strategy::Ahead);
        assert_eq!(c.seeds, vec![4]);
        assert!(matches!(
            c.tasks[1].kind,
            lwf_core::tasks::TaskKind::ModularAdd { modulus: 7, .. }
        ));
    }

    #[test]
    fn output_root_override_does_not_change_the_hash() {
        let a = RunConfig::from_toml(SAMPLE, None, &[]).unwrap();
        let b = RunConfig::from_toml(SAMPLE, Some(Path::new("/elsewhere")), &[]).unwrap();
        assert_eq!(b.output_dir, PathBuf::from("/elsewhere"));
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml(SAMPLE, None, &["train.beta=0.2".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bad_configs_are_rejected() {
        for o in [
            "experiment.learning=[\"nope\"]",
            "train.n_u=0",
            "seeds=[]",
            "seeds=[1, 1]",
            "tasks.1.tag=0",
            "train.bogus=1",
            "experiment.fc_steps=[1]",
            "noequals",
            "tasks.9.tag=1",
        ] {
            let err = RunConfig::from_toml(SAMPLE, None, &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{o}: {err}");
        }
        assert!(RunConfig::from_toml("seeds = [", None, &[]).is_err());
    }

    #[test]
    fn mixed_forgetting_pools_every_other_domain() {
        let c = RunConfig::from_toml(SAMPLE, None, &[]).unwrap();
        assert_eq!(
            c.forgetting_sources("add-a", "add-b").unwrap(),
            vec!["add-b".to_string()]
        );
        assert!(c.forgetting_sources("add-a", "add-a").is_err());
        assert_eq!(
            c.forgetting_sources("add-a", "mixed").unwrap(),
            vec!["add-b".to_string()]
        );
    }
}
