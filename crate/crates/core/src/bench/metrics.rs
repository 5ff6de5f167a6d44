//! Exact match and normalized token F1.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, strips punctuation characters and drops articles and
/// tokens left empty.
pub fn normalize_text<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            t.as_ref()
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty() && !ARTICLES.contains(&t.as_str()))
        .collect()
}

/// 1.0 when the normalized sequences are equal, else 0.0.
pub fn score_em<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if normalize_text(pred) == normalize_text(gold) {
        1.0
    } else {
        0.0
    }
}

/// Multiset token F1 after normalization. Two empty sequences score 1.
pub fn score_nf1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let p = normalize_text(pred);
    let g = normalize_text(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Em,
    Nf1,
}

impl Metric {
    /// Score in `[0, 1]`.
    pub fn score<S: AsRef<str>>(self, pred: &[S], gold: &[S]) -> f64 {
        match self {
            Metric::Em => score_em(pred, gold),
            Metric::Nf1 => score_nf1(pred, gold),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Em => "em",
            Metric::Nf1 => "nf1",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "em" => Ok(Metric::Em),
            "nf1" => Ok(Metric::Nf1),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}
