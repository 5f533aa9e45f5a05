//! Builds the self-generated representation of a forgetting task by greedy
//! decoding the base model on the task's prompts. Gold answers are never read.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};
use crate::model::{Example, TinyLm, Token};
use crate::tasks::Dataset;

pub const SELF_SUFFIX: &str = "-self";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElicitConfig {
    pub max_tokens: usize,
    pub stop_token: Token,
}

impl ElicitConfig {
    pub fn new(stop_token: Token) -> Self {
        Self {
            max_tokens: 256,
            stop_token,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elicited {
    pub dataset: Dataset,
    /// Prompts where the model stopped immediately; their answer is the lone
    /// stop token.
    pub empty_responses: usize,
    /// Examples whose (prompt, answer) pair repeats an earlier one. Kept.
    pub duplicates: usize,
}

pub fn elicit(base: &TinyLm, forgetting: &Dataset, cfg: &ElicitConfig) -> Result<Elicited> {
    if cfg.max_tokens == 0 {
        return Err(LwfError::InvalidConfig("max_tokens must be at least 1".into()));
    }
    let domain = format!("{}{}", forgetting.domain_id(), SELF_SUFFIX);
    let responses = forgetting
        .examples()
        .par_iter()
        .map(|x| base.greedy_decode(&x.prompt, cfg.max_tokens, cfg.stop_token))
        .collect::<Result<Vec<_>>>()?;

    let mut empty_responses = 0;
    let mut examples = Vec::with_capacity(responses.len());
    for (x, mut answer) in forgetting.examples().iter().zip(responses) {
        if answer.last() == Some(&cfg.stop_token) {
            answer.pop();
        }
        if answer.is_empty() {
            empty_responses += 1;
            answer.push(cfg.stop_token);
        }
        examples.push(Example::new(x.prompt.clone(), answer, domain.clone()));
    }
    let mut seen = HashSet::new();
    let duplicates = examples
        .iter()
        .filter(|x| !seen.insert((x.prompt.clone(), x.answer.clone())))
        .count();
    Ok(Elicited {
        dataset: Dataset::new(domain, examples)?,
        empty_responses,
        duplicates,
    })
}
