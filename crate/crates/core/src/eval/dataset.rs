//! Dataset files and answer parsing.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::AnswerTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    Yes,
    No,
}

impl Gold {
    pub fn flipped(self) -> Self {
        match self {
            Self::Yes => Self::No,
            Self::No => Self::Yes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Yes,
    No,
    Unparseable,
}

impl Prediction {
    pub fn flipped(self) -> Self {
        match self {
            Self::Yes => Self::No,
            Self::No => Self::Yes,
            Self::Unparseable => Self::Unparseable,
        }
    }

    /// The class this prediction counts as. Unparseable answers count as the
    /// class opposite to the gold label.
    pub fn effective(self, gold: Gold) -> Gold {
        match self {
            Self::Yes => Gold::Yes,
            Self::No => Gold::No,
            Self::Unparseable => gold.flipped(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryQARecord {
    pub image_uri: String,
    pub question: String,
    pub gold: Gold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Prediction>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retrieval_used: bool,
}

impl BinaryQARecord {
    pub fn new(image_uri: impl Into<String>, question: impl Into<String>, gold: Gold) -> Self {
        Self { image_uri: image_uri.into(), question: question.into(), gold, predicted: None, retrieval_used: false }
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.predicted.map(|p| p.effective(self.gold) == self.gold)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub image_uri: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold_letter: String,
}

fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

/// Loads `{image_uri, question, gold}` lines; predictions, if present, are dropped.
pub fn load_binary_dataset(path: impl AsRef<Path>) -> Result<Vec<BinaryQARecord>> {
    let mut records: Vec<BinaryQARecord> = load_jsonl(path.as_ref())?;
    for r in &mut records {
        r.predicted = None;
        r.retrieval_used = false;
    }
    Ok(records)
}

pub fn write_binary_dataset(path: impl AsRef<Path>, records: &[BinaryQARecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let bare = BinaryQARecord::new(&r.image_uri, &r.question, r.gold);
        out.push_str(&serde_json::to_string(&bare).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_choice_dataset(path: impl AsRef<Path>) -> Result<Vec<ChoiceRecord>> {
    load_jsonl(path.as_ref())
}

/// First standalone "yes" or "no" in the answer, case-insensitive.
pub fn parse_binary_text(text: &str) -> Prediction {
    for w in text.split(|c: char| !c.is_alphanumeric()) {
        if w.eq_ignore_ascii_case("yes") {
            return Prediction::Yes;
        }
        if w.eq_ignore_ascii_case("no") {
            return Prediction::No;
        }
    }
    Prediction::Unparseable
}

pub fn parse_binary_answer(trace: &AnswerTrace) -> Prediction {
    parse_binary_text(&trace.text())
}

/// First standalone option letter (A-Z) in the answer, optionally followed by
/// `.` or `)`.
pub fn parse_choice_letter(text: &str) -> Option<char> {
    text.split(|c: char| c.is_whitespace() || c == '(' || c == ',')
        .map(|w| w.trim_end_matches(['.', ')', ':']))
        .find(|w| w.len() == 1 && w.chars().all(|c| c.is_ascii_uppercase()))
        .and_then(|w| w.chars().next())
}

/// Exact-letter accuracy for choice questions.
pub fn choice_accuracy(golds: &[ChoiceRecord], answers: &[String]) -> Result<f64> {
    if golds.len() != answers.len() {
        return Err(Error::LengthMismatch { left: golds.len(), right: answers.len() });
    }
    if golds.is_empty() {
        return Err(Error::MissingPredictions(0));
    }
    let correct = golds
        .iter()
        .zip(answers)
        .filter(|(g, a)| parse_choice_letter(a).map(String::from) == Some(g.gold_letter.to_uppercase()))
        .count();
    Ok(correct as f64 / golds.len() as f64)
}
