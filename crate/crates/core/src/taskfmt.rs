//! Samples, the closed word-level vocabulary, and the three training
//! encodings:
//!
//! ```text
//! QA:  C TQ [ANS] A [EOS]              loss on A [EOS]
//! LM:  [TASK_k] C TQ [ANS] A [EOS]     loss on everything after [TASK_k]
//! ID:  C IDQ [ANS2] [TASK_k] [EOS]     loss on [TASK_k] [EOS]
//! ```
//!
//! Inputs are the sequence without its last token and targets are the
//! sequence shifted left by one.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const EOS: &str = "[EOS]";
pub const ANS: &str = "[ANS]";
pub const ANS2: &str = "[ANS2]";
pub const GEN: &str = "[GEN]";

pub fn task_token(k: usize) -> String {
    format!("[TASK_{k}]")
}

/// Closed word-level vocabulary plus the fixed question strings.
///
/// Ids `0..5` are `[PAD] [EOS] [ANS] [ANS2] [GEN]`, followed by one
/// `[TASK_k]` per task, followed by content words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    n_tasks: usize,
    task_questions: Vec<Vec<usize>>,
    id_question: Vec<usize>,
}

impl Vocab {
    /// `task_questions[k]` is the canonical question of task `k`.
    pub fn new<S: AsRef<str>>(content: &[S], task_questions: &[&str], id_question: &str) -> Result<Self> {
        let n_tasks = task_questions.len();
        let mut words: Vec<String> = [PAD, EOS, ANS, ANS2, GEN].iter().map(|s| s.to_string()).collect();
        words.extend((0..n_tasks).map(task_token));
        let mut index: HashMap<String, usize> = words.iter().cloned().zip(0..).collect();
        let question_words = task_questions
            .iter()
            .chain(std::iter::once(&id_question))
            .flat_map(|q| q.split_whitespace());
        for w in content.iter().map(|s| s.as_ref()).chain(question_words) {
            if is_special(w) {
                return Err(Error::invalid(format!("content word `{w}` looks like a special token")));
            }
            if !index.contains_key(w) {
                index.insert(w.to_string(), words.len());
                words.push(w.to_string());
            }
        }
        let mut v = Vocab {
            words,
            index,
            n_tasks,
            task_questions: Vec::new(),
            id_question: Vec::new(),
        };
        v.task_questions = task_questions.iter().map(|q| v.encode(q)).collect::<Result<_>>()?;
        v.id_question = v.encode(id_question)?;
        if v.task_questions.iter().any(Vec::is_empty) || v.id_question.is_empty() {
            return Err(Error::invalid("question strings must be non-empty"));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn ans(&self) -> usize {
        2
    }

    pub fn ans2(&self) -> usize {
        3
    }

    pub fn gen(&self) -> usize {
        4
    }

    pub fn task(&self, k: usize) -> Result<usize> {
        if k >= self.n_tasks {
            return Err(Error::invalid(format!("unknown task id {k}")));
        }
        Ok(5 + k)
    }

    /// Task index of a `[TASK_k]` token id.
    pub fn task_of(&self, id: usize) -> Option<usize> {
        (5..5 + self.n_tasks).contains(&id).then(|| id - 5)
    }

    pub fn is_special_id(&self, id: usize) -> bool {
        id < 5 + self.n_tasks
    }

    pub fn task_question(&self, k: usize) -> Result<&[usize]> {
        self.task_questions
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown task id {k}")))
    }

    pub fn id_question(&self) -> &[usize] {
        &self.id_question
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::UnknownToken {
            id,
            vocab: self.words.len(),
        })
    }

    /// Whitespace tokenisation.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Vec<&str> = ids.iter().map(|&i| self.word(i)).collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One token per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    /// Reads a vocabulary file and checks it matches the given questions.
    pub fn load(path: &Path, task_questions: &[&str], id_question: &str) -> Result<Self> {
        let f = fs::File::open(path)?;
        let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
        let specials = 5 + task_questions.len();
        if lines.len() < specials {
            return Err(Error::invalid(format!("{}: too few tokens", path.display())));
        }
        let v = Vocab::new(&lines[specials..], task_questions, id_question)?;
        if v.words != lines {
            return Err(Error::invalid(format!(
                "{}: special tokens or question words out of order",
                path.display()
            )));
        }
        Ok(v)
    }
}

fn is_special(w: &str) -> bool {
    w.starts_with('[') && w.ends_with(']') && w.len() > 2
}

/// One QA-format example, as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: usize,
    pub context: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("context", &self.context),
            ("question", &self.question),
            ("answer", &self.answer),
        ] {
            if v.is_empty() {
                return Err(Error::invalid(format!("sample {field} is empty")));
            }
        }
        Ok(())
    }
}

/// Text form of a sample, as stored in dataset files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub task: usize,
    pub context: String,
    pub question: String,
    pub answer: String,
}

impl SampleRecord {
    pub fn from_sample(s: &Sample, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            task: s.task_id,
            context: vocab.decode(&s.context)?,
            question: vocab.decode(&s.question)?,
            answer: vocab.decode(&s.answer)?,
        })
    }

    pub fn to_sample(&self, vocab: &Vocab) -> Result<Sample> {
        vocab.task(self.task)?;
        let s = Sample {
            task_id: self.task,
            context: vocab.encode(&self.context)?,
            question: vocab.encode(&self.question)?,
            answer: vocab.encode(&self.answer)?,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, samples: &[Sample], vocab: &Vocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, &SampleRecord::from_sample(s, vocab)?)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.to_sample(vocab)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Qa,
    Lm,
    Id,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub kind: Kind,
    pub task_id: usize,
}

impl EncodedExample {
    pub fn active(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn shift(seq: Vec<usize>, first_active: usize, kind: Kind, task_id: usize, max_len: usize) -> Result<EncodedExample> {
    if seq.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max: max_len,
        });
    }
    let n = seq.len() - 1;
    // target position i predicts seq[i + 1]
    let loss_mask = (0..n).map(|i| i + 1 >= first_active).collect();
    Ok(EncodedExample {
        input_ids: seq[..n].to_vec(),
        target_ids: seq[1..].to_vec(),
        loss_mask,
        kind,
        task_id,
    })
}

/// `C TQ [ANS] A [EOS]`, loss on `A [EOS]`.
pub fn encode_qa(s: &Sample, vocab: &Vocab, max_len: usize) -> Result<EncodedExample> {
    s.validate()?;
    let mut seq = qa_prompt(s, vocab);
    let first = seq.len();
    seq.extend_from_slice(&s.answer);
    seq.push(vocab.eos());
    shift(seq, first, Kind::Qa, s.task_id, max_len)
}

/// The QA prompt `C TQ [ANS]` that evaluation decodes from.
pub fn qa_prompt(s: &Sample, vocab: &Vocab) -> Vec<usize> {
    let mut seq = Vec::with_capacity(s.context.len() + s.question.len() + 1);
    seq.extend_from_slice(&s.context);
    seq.extend_from_slice(&s.question);
    seq.push(vocab.ans());
    seq
}

/// `[TASK_k] C TQ [ANS] A [EOS]` (or `[GEN]` first), loss on every target.
pub fn encode_lm(s: &Sample, vocab: &Vocab, use_task_token: bool, max_len: usize) -> Result<EncodedExample> {
    s.validate()?;
    let lead = if use_task_token { vocab.task(s.task_id)? } else { vocab.gen() };
    let mut seq = vec![lead];
    seq.extend(qa_prompt(s, vocab));
    seq.extend_from_slice(&s.answer);
    seq.push(vocab.eos());
    shift(seq, 1, Kind::Lm, s.task_id, max_len)
}

/// `C IDQ [ANS2] [TASK_k] [EOS]`, loss on `[TASK_k] [EOS]`.
pub fn encode_id(s: &Sample, vocab: &Vocab, max_len: usize) -> Result<EncodedExample> {
    s.validate()?;
    let mut seq = s.context.clone();
    seq.extend_from_slice(vocab.id_question());
    seq.push(vocab.ans2());
    let first = seq.len();
    seq.push(vocab.task(s.task_id)?);
    seq.push(vocab.eos());
    shift(seq, first, Kind::Id, s.task_id, max_len)
}

/// Splits a generated `[TASK_k] C TQ [ANS] A [EOS]` sequence.
///
/// `TQ` is recognised as the canonical question of whichever task ends right
/// before `[ANS]`; `corresponding` says whether that is task `k`'s question.
/// The answer runs to the first `[EOS]` or the end of `tokens`. Returns
/// `None` for any missing landmark, empty part or stray special token.
pub fn parse_pseudo(tokens: &[usize], vocab: &Vocab) -> Option<(Sample, bool)> {
    let (&first, rest) = tokens.split_first()?;
    let task = vocab.task_of(first)?;
    let ans = rest.iter().position(|&t| t == vocab.ans())?;
    let before = &rest[..ans];
    let after = &rest[ans + 1..];
    let end = after.iter().position(|&t| t == vocab.eos()).unwrap_or(after.len());
    let answer = &after[..end];

    let (q_task, q) = (0..vocab.n_tasks())
        .filter_map(|k| {
            let q = vocab.task_question(k).ok()?;
            before.ends_with(q).then_some((k, q))
        })
        .max_by_key(|(_, q)| q.len())?;
    let context = &before[..before.len() - q.len()];
    if context.is_empty() || answer.is_empty() {
        return None;
    }
    if context.iter().chain(answer).any(|&t| vocab.is_special_id(t)) {
        return None;
    }
    Some((
        Sample {
            task_id: task,
            context: context.to_vec(),
            question: q.to_vec(),
            answer: answer.to_vec(),
        },
        q_task == task,
    ))
}
