//! Synthetic three-task suite.
//!
//! * `cls`: a bag of review words with one polarity keyword; the answer is
//!   `positive` or `negative`.
//! * `span`: filler words with one `marker` followed by two argument words;
//!   the answer is the two words after the marker.
//! * `slot`: a restaurant request naming one food, price or area value; the
//!   answer is `slot : value`.
//!
//! Every sample is a pure function of `(seed, task, index)`, so train and
//! test splits are disjoint index ranges drawn from the same distribution.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use crate::error::{Error, Result};
use crate::llltrain::TaskData;
use crate::taskfmt::{Sample, Vocab};

const CLS_FILLERS: &[&str] = &[
    "movie", "film", "plot", "actors", "story", "scenes", "music", "ending", "script", "cast", "director", "acting",
    "was", "is", "this", "it", "felt", "very", "quite", "rather", "seemed", "really",
];
const POSITIVE: &[&str] = &["good", "great", "excellent", "lovely", "wonderful"];
const NEGATIVE: &[&str] = &["bad", "awful", "terrible", "boring", "dull"];

const SPAN_ARGS: &[&str] = &[
    "alice", "bob", "carol", "dave", "eve", "frank", "grace", "heidi", "ivan", "judy", "box", "cup", "key", "book",
    "lamp", "door",
];
const SPAN_FILLERS: &[&str] = &[
    "red", "blue", "green", "yellow", "ran", "took", "gave", "saw", "put", "with", "from", "into", "over", "then",
];
const MARKER: &str = "marker";

const FOOD: &[&str] = &["italian", "chinese", "indian", "french", "thai"];
const PRICE: &[&str] = &["cheap", "moderate", "expensive"];
const AREA: &[&str] = &["north", "south", "east", "west", "centre"];
const FOOD_TEMPLATES: &[&str] = &["i want X food", "looking for X food please", "any X food around here"];
const PRICE_TEMPLATES: &[&str] = &["find a X restaurant", "i need something X", "a X place to eat"];
const AREA_TEMPLATES: &[&str] = &["somewhere in the X", "a restaurant in the X of town", "i am in the X"];

pub const ID_QUESTION: &str = "which task is this";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Cls,
    Span,
    Slot,
}

impl ToyKind {
    pub const ALL: [ToyKind; 3] = [ToyKind::Cls, ToyKind::Span, ToyKind::Slot];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Cls => "cls",
            ToyKind::Span => "span",
            ToyKind::Slot => "slot",
        }
    }

    pub fn question(self) -> &'static str {
        match self {
            ToyKind::Cls => "is this positive or negative",
            ToyKind::Span => "what follows the marker",
            ToyKind::Slot => "what is the change in state",
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            ToyKind::Cls | ToyKind::Slot => Metric::Em,
            ToyKind::Span => Metric::Nf1,
        }
    }

    pub fn answer_space(self) -> &'static str {
        match self {
            ToyKind::Cls => "positive | negative",
            ToyKind::Span => "the two context words after `marker`",
            ToyKind::Slot => "food|price|area : value",
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        ToyKind::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown task id {id}")))
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}` (expected cls, span or slot)")))
    }
}

/// The shared vocabulary of the suite.
pub fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let mut words: Vec<&str> = Vec::new();
        words.extend(CLS_FILLERS);
        words.extend(POSITIVE);
        words.extend(NEGATIVE);
        words.extend(["positive", "negative"]);
        words.extend(SPAN_ARGS);
        words.extend(SPAN_FILLERS);
        words.push(MARKER);
        for t in FOOD_TEMPLATES.iter().chain(PRICE_TEMPLATES).chain(AREA_TEMPLATES) {
            words.extend(t.split_whitespace().filter(|w| *w != "X"));
        }
        words.extend(FOOD);
        words.extend(PRICE);
        words.extend(AREA);
        words.extend(["food", "price", "area", ":"]);
        Vocab::new(&words, &questions(), ID_QUESTION).expect("toy vocabulary is well formed")
    })
}

/// Canonical question of each task, indexed by task id.
pub fn questions() -> [&'static str; 3] {
    ToyKind::ALL.map(ToyKind::question)
}

fn sample_rng(seed: u64, kind: ToyKind, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind.id() as u64) << 48) | index);
    rng
}

fn words_for(kind: ToyKind, index: u64, rng: &mut ChaCha8Rng) -> (Vec<&'static str>, Vec<&'static str>) {
    match kind {
        ToyKind::Cls => {
            let positive = index % 2 == 0;
            let n = rng.random_range(4..=7);
            let mut ctx: Vec<&str> = (0..n).map(|_| *CLS_FILLERS.choose(rng).expect("non-empty")).collect();
            let pool = if positive { POSITIVE } else { NEGATIVE };
            let at = rng.random_range(0..=ctx.len());
            ctx.insert(at, pool.choose(rng).expect("non-empty"));
            (ctx, vec![if positive { "positive" } else { "negative" }])
        }
        ToyKind::Span => {
            let n = rng.random_range(3..=6);
            let mut ctx: Vec<&str> = (0..n).map(|_| *SPAN_FILLERS.choose(rng).expect("non-empty")).collect();
            let ans: Vec<&str> = (0..2).map(|_| *SPAN_ARGS.choose(rng).expect("non-empty")).collect();
            let at = rng.random_range(0..=n);
            ctx.splice(at..at, std::iter::once(MARKER).chain(ans.iter().copied()));
            (ctx, ans)
        }
        ToyKind::Slot => {
            let (slot, values, templates) = match index % 3 {
                0 => ("food", FOOD, FOOD_TEMPLATES),
                1 => ("price", PRICE, PRICE_TEMPLATES),
                _ => ("area", AREA, AREA_TEMPLATES),
            };
            let v = *values.choose(rng).expect("non-empty");
            let t = templates.choose(rng).expect("non-empty");
            let ctx = t.split_whitespace().map(|w| if w == "X" { v } else { w }).collect();
            (ctx, vec![slot, ":", v])
        }
    }
}

/// Samples with indices in `range`.
pub fn generate(kind: ToyKind, seed: u64, range: Range<u64>) -> Vec<Sample> {
    let v = vocab();
    range
        .map(|i| {
            let mut rng = sample_rng(seed, kind, i);
            let (ctx, ans) = words_for(kind, i, &mut rng);
            let enc = |ws: &[&str]| ws.iter().map(|w| v.id(w).expect("toy word in vocabulary")).collect();
            Sample {
                task_id: kind.id(),
                context: enc(&ctx),
                question: v.task_question(kind.id()).expect("toy task").to_vec(),
                answer: enc(&ans),
            }
        })
        .collect()
}

pub fn gen_task_cls(seed: u64, n: usize) -> Vec<Sample> {
    generate(ToyKind::Cls, seed, 0..n as u64)
}

pub fn gen_task_span(seed: u64, n: usize) -> Vec<Sample> {
    generate(ToyKind::Span, seed, 0..n as u64)
}

pub fn gen_task_slot(seed: u64, n: usize) -> Vec<Sample> {
    generate(ToyKind::Slot, seed, 0..n as u64)
}

/// Split sizes and the data seed, shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 200,
            data_seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be ≥ 1"));
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Train indices `0..n_train`, test indices `n_train..n_train + n_test`.
pub fn task_data(kind: ToyKind, data: &DataConfig) -> TaskData {
    let n = data.n_train as u64;
    TaskData {
        id: kind.id(),
        name: kind.name().to_string(),
        metric: kind.metric(),
        train: generate(kind, data.data_seed, 0..n),
        test: generate(kind, data.data_seed, n..n + data.n_test as u64),
    }
}

/// The six task orders.
pub fn all_orders() -> Vec<[ToyKind; 3]> {
    use ToyKind::*;
    vec![
        [Cls, Span, Slot],
        [Cls, Slot, Span],
        [Span, Cls, Slot],
        [Span, Slot, Cls],
        [Slot, Cls, Span],
        [Slot, Span, Cls],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskfmt;

    fn words(ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| vocab().word(i).unwrap().to_string()).collect()
    }

    #[test]
    fn cls_is_balanced_and_keyed() {
        let s = gen_task_cls(3, 10);
        let pos = s.iter().filter(|x| words(&x.answer) == ["positive"]).count();
        assert_eq!(pos, 5);
        let s = gen_task_cls(3, 7);
        let pos = s.iter().filter(|x| words(&x.answer) == ["positive"]).count();
        assert_eq!(pos, 4);
        for x in gen_task_cls(5, 200) {
            let ctx = words(&x.context);
            let p = ctx.iter().filter(|w| POSITIVE.contains(&w.as_str())).count();
            let n = ctx.iter().filter(|w| NEGATIVE.contains(&w.as_str())).count();
            assert_eq!(p + n, 1);
            let want = if p == 1 { "positive" } else { "negative" };
            assert_eq!(words(&x.answer), [want]);
        }
    }

    #[test]
    fn span_answer_follows_marker() {
        let mut at_end = false;
        for x in gen_task_span(1, 300) {
            let ctx = words(&x.context);
            let m: Vec<usize> = (0..ctx.len()).filter(|&i| ctx[i] == MARKER).collect();
            assert_eq!(m.len(), 1);
            assert_eq!(words(&x.answer), ctx[m[0] + 1..m[0] + 3].to_vec());
            at_end |= m[0] == ctx.len() - 3;
        }
        assert!(at_end);
    }

    #[test]
    fn slot_answers_match_template_value() {
        for x in gen_task_slot(2, 90) {
            let ctx = words(&x.context);
            let ans = words(&x.answer);
            assert_eq!(ans.len(), 3);
            assert_eq!(ans[1], ":");
            let values = match ans[0].as_str() {
                "food" => FOOD,
                "price" => PRICE,
                "area" => AREA,
                other => panic!("unknown slot {other}"),
            };
            assert!(values.contains(&ans[2].as_str()));
            assert!(ctx.contains(&ans[2]));
        }
    }

    #[test]
    fn deterministic_and_split_consistent() {
        for k in ToyKind::ALL {
            assert_eq!(generate(k, 9, 0..50), generate(k, 9, 0..50));
            assert_ne!(generate(k, 9, 0..50), generate(k, 10, 0..50));
            let all = generate(k, 9, 0..30);
            assert_eq!(generate(k, 9, 20..30), all[20..].to_vec());
        }
    }

    #[test]
    fn fits_model_and_parses() {
        let v = vocab();
        for k in ToyKind::ALL {
            for s in generate(k, 4, 0..100) {
                let e = taskfmt::encode_lm(&s, v, true, 33).unwrap();
                assert!(e.input_ids.len() <= 24);
                let (p, corr) = taskfmt::parse_pseudo(&e.input_ids, v).unwrap();
                assert_eq!(p, s);
                assert!(corr);
            }
        }
        assert_eq!(ToyKind::from_id(2).unwrap(), ToyKind::Slot);
        assert_eq!("span".parse::<ToyKind>().unwrap(), ToyKind::Span);
    }

    #[test]
    fn orders_are_the_six_permutations() {
        let o = all_orders();
        assert_eq!(o.len(), 6);
        let mut sorted = o.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
    }
}
