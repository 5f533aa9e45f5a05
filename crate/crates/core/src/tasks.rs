//! Synthetic QA task families over a shared vocabulary.
//!
//! Every prompt starts with a domain-tag token so that domains share all
//! other tokens. Two modular-add domains with different moduli over the same
//! operands map identical prompt bodies to different answers.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};
use crate::model::{Example, Token};

/// Fixed token layout shared by all task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_tags: u32,
}

impl Vocab {
    /// Tokens `0..10` are the decimal digits.
    pub const DIGITS: u32 = 10;
    pub const ADD: Token = 10;
    pub const REVERSE: Token = 11;
    pub const SORT: Token = 12;
    pub const PARITY: Token = 13;
    pub const QUERY: Token = 14;
    pub const STOP: Token = 15;
    pub const PAD: Token = 16;
    const FIRST_TAG: Token = 17;

    pub fn new(n_tags: u32) -> Self {
        Self { n_tags }
    }

    pub fn size(&self) -> usize {
        (Self::FIRST_TAG + self.n_tags) as usize
    }

    pub fn tag_token(&self, tag: u32) -> Result<Token> {
        if tag >= self.n_tags {
            return Err(LwfError::InvalidConfig(format!(
                "tag {tag} exceeds the {} available tag tokens",
                self.n_tags
            )));
        }
        Ok(Self::FIRST_TAG + tag)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    /// `a + b` reduced modulo `modulus`, operands drawn from `0..operand_range`.
    ModularAdd { modulus: u32, operand_range: u32 },
    /// Reverse a digit payload of length in `min_len..=max_len`.
    Reversal { min_len: usize, max_len: usize },
    /// Sort a digit payload of fixed length.
    Sorting { len: usize },
    /// Parity of a bit payload of fixed length.
    Parity { n_bits: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub domain_id: String,
    /// Index of the domain-tag token (`0..n_tags`).
    pub tag: u32,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

/// Ordered examples from one domain. Pooled candidate sets built with
/// [`Dataset::mixed`] are the one exception and carry the id `"mixed"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    domain_id: String,
    examples: Vec<Example>,
}

pub const MIXED_DOMAIN: &str = "mixed";

impl Dataset {
    pub fn new(domain_id: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        let domain_id = domain_id.into();
        if examples.is_empty() {
            return Err(LwfError::EmptyDataset);
        }
        if let Some(x) = examples.iter().find(|x| x.domain_id != domain_id) {
            return Err(LwfError::MixedDomains {
                expected: domain_id,
                found: x.domain_id.clone(),
            });
        }
        Ok(Self { domain_id, examples })
    }

    /// Dataset whose examples keep their own domain ids.
    pub fn mixed(examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(LwfError::EmptyDataset);
        }
        Ok(Self {
            domain_id: MIXED_DOMAIN.to_string(),
            examples,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &[Token]> {
        self.examples.iter().map(|x| x.prompt.as_slice())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for x in &self.examples {
            let line = serde_json::to_string(x).map_err(|e| LwfError::Invalid(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?), path)
    }

    /// Parses JSONL from `reader`; `path` only labels errors.
    pub fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let x: Example = serde_json::from_str(&line).map_err(|e| LwfError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            examples.push(x);
        }
        let domain = match examples.first() {
            Some(x) => x.domain_id.clone(),
            None => return Err(LwfError::EmptyDataset),
        };
        if examples.iter().all(|x| x.domain_id == domain) {
            Dataset::new(domain, examples)
        } else {
            Dataset::mixed(examples)
        }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;
    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Decimal digits of `n`, most significant first.
pub fn digits(n: u32) -> Vec<Token> {
    n.to_string().bytes().map(|b| (b - b'0') as Token).collect()
}

impl TaskSpec {
    fn invalid(&self, reason: impl Into<String>) -> LwfError {
        LwfError::InvalidTask {
            domain: self.domain_id.clone(),
            reason: reason.into(),
        }
    }

    /// Number of distinct prompt bodies the spec can produce, saturating.
    fn space_size(&self) -> u128 {
        match self.kind {
            TaskKind::ModularAdd { operand_range, .. } => (operand_range as u128).pow(2),
            TaskKind::Reversal { min_len, max_len } => (min_len..=max_len)
                .map(|l| 10u128.saturating_pow(l as u32))
                .fold(0u128, |a, b| a.saturating_add(b)),
            TaskKind::Sorting { len } => 10u128.saturating_pow(len as u32),
            TaskKind::Parity { n_bits } => 2u128.saturating_pow(n_bits as u32),
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        vocab.tag_token(self.tag).map_err(|e| self.invalid(e.to_string()))?;
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(self.invalid("n_train and n_eval must be positive"));
        }
        match self.kind {
            TaskKind::ModularAdd { modulus, operand_range } => {
                if modulus < 2 {
                    return Err(self.invalid("modulus must be at least 2"));
                }
                if operand_range == 0 {
                    return Err(self.invalid("operand_range must be positive"));
                }
            }
            TaskKind::Reversal { min_len, max_len } => {
                if min_len == 0 || max_len < min_len {
                    return Err(self.invalid("reversal needs 1 <= min_len <= max_len"));
                }
            }
            TaskKind::Sorting { len } => {
                if len == 0 {
                    return Err(self.invalid("sorting needs len >= 1"));
                }
            }
            TaskKind::Parity { n_bits } => {
                if n_bits == 0 {
                    return Err(self.invalid("parity needs n_bits >= 1"));
                }
            }
        }
        let needed = (self.n_train + self.n_eval) as u128;
        if self.space_size() < needed {
            return Err(self.invalid(format!(
                "only {} distinct prompts exist but {} were requested",
                self.space_size(),
                needed
            )));
        }
        Ok(())
    }

    /// Prompt body (without the tag) and answer (with stop) for one draw.
    fn sample_body(&self, rng: &mut ChaCha8Rng) -> Vec<Token> {
        match self.kind {
            TaskKind::ModularAdd { operand_range, .. } => {
                let a = rng.random_range(0..operand_range);
                let b = rng.random_range(0..operand_range);
                let mut body = digits(a);
                body.push(Vocab::ADD);
                body.extend(digits(b));
                body.push(Vocab::QUERY);
                body
            }
            TaskKind::Reversal { min_len, max_len } => {
                let len = rng.random_range(min_len..=max_len);
                self.payload_prompt(Vocab::REVERSE, (0..len).map(|_| rng.random_range(0..Vocab::DIGITS)))
            }
            TaskKind::Sorting { len } => {
                self.payload_prompt(Vocab::SORT, (0..len).map(|_| rng.random_range(0..Vocab::DIGITS)))
            }
            TaskKind::Parity { n_bits } => {
                self.payload_prompt(Vocab::PARITY, (0..n_bits).map(|_| rng.random_range(0..2)))
            }
        }
    }

    fn payload_prompt(&self, op: Token, payload: impl Iterator<Item = Token>) -> Vec<Token> {
        let mut body = vec![op];
        body.extend(payload);
        body.push(Vocab::QUERY);
        body
    }

    /// Gold answer (including the stop token) for a prompt body.
    pub fn answer_for(&self, body: &[Token]) -> Vec<Token> {
        let mut answer = match self.kind {
            TaskKind::ModularAdd { modulus, .. } => {
                let plus = body.iter().position(|&t| t == Vocab::ADD).expect("operator present");
                let number = |ds: &[Token]| ds.iter().fold(0u64, |acc, &d| acc * 10 + d as u64);
                let a = number(&body[..plus]);
                let b = number(&body[plus + 1..body.len() - 1]);
                digits(((a + b) % modulus as u64) as u32)
            }
            TaskKind::Reversal { .. } => {
                let mut p = body[1..body.len() - 1].to_vec();
                p.reverse();
                p
            }
            TaskKind::Sorting { .. } => {
                let mut p = body[1..body.len() - 1].to_vec();
                p.sort_unstable();
                p
            }
            TaskKind::Parity { .. } => {
                let ones = body[1..body.len() - 1].iter().filter(|&&t| t == 1).count();
                vec![(ones % 2) as Token]
            }
        };
        answer.push(Vocab::STOP);
        answer
    }

    /// Deterministic train/eval split with disjoint prompts.
    pub fn generate(&self, vocab: &Vocab) -> Result<(Dataset, Dataset)> {
        self.validate(vocab)?;
        let tag = vocab.tag_token(self.tag)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let needed = self.n_train + self.n_eval;

        let bodies: Vec<Vec<Token>> = if self.space_size() <= 4 * needed as u128 {
            // small spaces are enumerated and shuffled
            let mut all = self.enumerate_bodies();
            all.shuffle(&mut rng);
            all.truncate(needed);
            all
        } else {
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(needed);
            while out.len() < needed {
                let body = self.sample_body(&mut rng);
                if seen.insert(body.clone()) {
                    out.push(body);
                }
            }
            out
        };

        let make = |body: &Vec<Token>| {
            let mut prompt = vec![tag];
            prompt.extend_from_slice(body);
            Example::new(prompt, self.answer_for(body), self.domain_id.clone())
        };
        let train = bodies[..self.n_train].iter().map(make).collect();
        let eval = bodies[self.n_train..].iter().map(make).collect();
        Ok((
            Dataset::new(&self.domain_id, train)?,
            Dataset::new(&self.domain_id, eval)?,
        ))
    }

    fn enumerate_bodies(&self) -> Vec<Vec<Token>> {
        fn strings(len: usize, alphabet: u32) -> Vec<Vec<Token>> {
            let mut out = vec![Vec::new()];
            for _ in 0..len {
                out = out
                    .into_iter()
                    .flat_map(|s| {
                        (0..alphabet).map(move |d| {
                            let mut s = s.clone();
                            s.push(d);
                            s
                        })
                    })
                    .collect();
            }
            out
        }
        match self.kind {
            TaskKind::ModularAdd { operand_range, .. } => (0..operand_range)
                .flat_map(|a| {
                    (0..operand_range).map(move |b| {
                        let mut body = digits(a);
                        body.push(Vocab::ADD);
                        body.extend(digits(b));
                        body.push(Vocab::QUERY);
                        body
                    })
                })
                .collect(),
            TaskKind::Reversal { min_len, max_len } => (min_len..=max_len)
                .flat_map(|l| strings(l, Vocab::DIGITS))
                .map(|p| self.payload_prompt(Vocab::REVERSE, p.into_iter()))
                .collect(),
            TaskKind::Sorting { len } => strings(len, Vocab::DIGITS)
                .into_iter()
                .map(|p| self.payload_prompt(Vocab::SORT, p.into_iter()))
                .collect(),
            TaskKind::Parity { n_bits } => strings(n_bits, 2)
                .into_iter()
                .map(|p| self.payload_prompt(Vocab::PARITY, p.into_iter()))
                .collect(),
        }
    }
}

/// Fraction of `a`'s prompt bodies (tag removed) that also occur in `b` with
/// a different answer.
pub fn conflict_fraction(a: &Dataset, b: &Dataset) -> f64 {
    let b_answers: std::collections::HashMap<&[Token], &[Token]> =
        b.iter().map(|x| (&x.prompt[1..], x.answer.as_slice())).collect();
    let conflicting = a
        .iter()
        .filter(|x| matches!(b_answers.get(&x.prompt[1..]), Some(ans) if *ans != x.answer.as_slice()))
        .count();
    conflicting as f64 / a.len() as f64
}
