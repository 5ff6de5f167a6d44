//! Lifelong training over a stream of tasks.
//!
//! Before task `t ≥ 2` the model generates pseudo samples of every earlier
//! task, which are mixed into the new task's data. Each training batch packs
//! the QA, LM and (optionally) ID encodings of its samples into one forward
//! pass. The loss is
//!
//! ```text
//! L = (L_QA + V_QA) + λ·(L_LM + V_LM) + β·(L_ID + V_ID)
//! ```
//!
//! where `V_k` is the adapter's auxiliary loss over the rows of kind `k`,
//! present only while the adapter trains.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::Metric;
use crate::error::{Error, Result};
use crate::numcore::{AdamWConfig, AdamWState, ParamStore, ParamVars, Tape, Var};
use crate::rng::RngStreams;
use crate::rvae::{self, Mode, ReconMode, RvaeConfig, RvaeHook, ADAPTER_PREFIX};
use crate::taskfmt::{self, EncodedExample, Kind, Sample, Vocab};
use crate::tinylm::{self, HiddenAdapter, ModelConfig, PackedBatch};

/// How the epochs of one task are split between parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backbone and adapter train together every epoch.
    Naive,
    /// First half backbone only, second half joint.
    AltM1,
    /// First half joint, second half backbone only.
    AltM1Rev,
    /// First half backbone only, second half adapter only.
    AltM1Star,
    /// `alt_turns` turns, each split backbone only / adapter only.
    Alt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Naive,
        TrainMode::AltM1,
        TrainMode::AltM1Rev,
        TrainMode::AltM1Star,
        TrainMode::Alt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Naive => "naive",
            TrainMode::AltM1 => "alt_m1",
            TrainMode::AltM1Rev => "alt_m1_rev",
            TrainMode::AltM1Star => "alt_m1_star",
            TrainMode::Alt => "alt",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    BackboneOnly,
    Joint,
    AdapterOnly,
}

impl TrainPhase {
    pub fn trains_backbone(self) -> bool {
        self != TrainPhase::AdapterOnly
    }

    pub fn trains_adapter(self) -> bool {
        self != TrainPhase::BackboneOnly
    }

    /// Whether parameter `name` receives updates in this phase.
    pub fn trains(self, name: &str) -> bool {
        if name.starts_with(ADAPTER_PREFIX) {
            self.trains_adapter()
        } else {
            self.trains_backbone()
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainPhase::BackboneOnly => "backbone_only",
            TrainPhase::Joint => "joint",
            TrainPhase::AdapterOnly => "adapter_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LllConfig {
    pub lambda_lm: f64,
    pub beta_id: f64,
    /// Replay size as a fraction of the new task's size.
    pub gamma: f64,
    pub epochs_per_task: usize,
    pub alt_turns: usize,
    pub mode: TrainMode,
    /// Train both groups, not only the adapter, in the second half of each
    /// `alt` turn.
    pub alt_joint_second_half: bool,
    pub use_id_task: bool,
    /// Start LM sequences with `[TASK_k]` instead of `[GEN]`.
    pub use_task_token: bool,
    pub recon_mode: ReconMode,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Top-k sampling width for pseudo-sample generation; 1 is greedy.
    pub gen_top_k: usize,
    /// Answer-length cap when decoding predictions for evaluation.
    pub eval_max_answer: usize,
    pub seed: u64,
}

impl Default for LllConfig {
    fn default() -> Self {
        Self {
            lambda_lm: 0.25,
            beta_id: 0.5,
            gamma: 0.2,
            epochs_per_task: 24,
            alt_turns: 3,
            mode: TrainMode::Alt,
            alt_joint_second_half: false,
            use_id_task: true,
            use_task_token: true,
            recon_mode: ReconMode::Mse,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.0,
            gen_top_k: 20,
            eval_max_answer: 16,
            seed: 0,
        }
    }
}

impl LllConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a finite value ≥ 0, got {v}")))
            }
        };
        nonneg("lambda_lm", self.lambda_lm)?;
        nonneg("beta_id", self.beta_id)?;
        nonneg("lr", self.lr)?;
        nonneg("weight_decay", self.weight_decay)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::config("epochs_per_task", "must be ≥ 1"));
        }
        if self.alt_turns == 0 {
            return Err(Error::config("alt_turns", "must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        if self.gen_top_k == 0 {
            return Err(Error::config("gen_top_k", "must be ≥ 1"));
        }
        if self.eval_max_answer == 0 {
            return Err(Error::config("eval_max_answer", "must be ≥ 1"));
        }
        match self.mode {
            TrainMode::Naive => {}
            TrainMode::Alt => {
                if self.epochs_per_task % (2 * self.alt_turns) != 0 {
                    return Err(Error::config(
                        "epochs_per_task",
                        format!(
                            "{} is not divisible by 2·alt_turns = {}",
                            self.epochs_per_task,
                            2 * self.alt_turns
                        ),
                    ));
                }
            }
            _ => {
                if self.epochs_per_task % 2 != 0 {
                    return Err(Error::config(
                        "epochs_per_task",
                        format!("{} must be even in mode {}", self.epochs_per_task, self.mode),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Phase of a 0-based epoch within one task.
pub fn phase_for_epoch(epoch: usize, cfg: &LllConfig) -> Result<TrainPhase> {
    let e = cfg.epochs_per_task;
    if epoch >= e {
        return Err(Error::invalid(format!("epoch {epoch} out of range for {e} epochs per task")));
    }
    let first_half = epoch < e / 2;
    Ok(match cfg.mode {
        TrainMode::Naive => TrainPhase::Joint,
        TrainMode::AltM1 if first_half => TrainPhase::BackboneOnly,
        TrainMode::AltM1 => TrainPhase::Joint,
        TrainMode::AltM1Rev if first_half => TrainPhase::Joint,
        TrainMode::AltM1Rev => TrainPhase::BackboneOnly,
        TrainMode::AltM1Star if first_half => TrainPhase::BackboneOnly,
        TrainMode::AltM1Star => TrainPhase::AdapterOnly,
        TrainMode::Alt => {
            let turn = e / cfg.alt_turns;
            if epoch % turn < turn / 2 {
                TrainPhase::BackboneOnly
            } else if cfg.alt_joint_second_half {
                TrainPhase::Joint
            } else {
                TrainPhase::AdapterOnly
            }
        }
    })
}

/// Phases of every epoch of one task.
pub fn schedule(cfg: &LllConfig) -> Result<Vec<TrainPhase>> {
    (0..cfg.epochs_per_task).map(|e| phase_for_epoch(e, cfg)).collect()
}

/// `⌊γ·|Dₜ| / (t − 1)⌋` pseudo samples per earlier task.
///
/// A quotient within 1e-9 (relative) of an integer is taken as that integer,
/// so decimal ratios such as 0.29·100 give 29 rather than 28.
pub fn pseudo_count(gamma: f64, t: usize, d_t: usize) -> Result<usize> {
    if t < 2 {
        return Err(Error::invalid(format!("pseudo_count needs task index t ≥ 2, got {t}")));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be finite and ≥ 0, got {gamma}")));
    }
    let x = gamma * d_t as f64 / (t - 1) as f64;
    let r = x.round();
    let n = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.floor() };
    Ok(n as usize)
}

/// Samples from the `k` highest logits; ties resolve to the lower id.
pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> usize {
    if k <= 1 {
        return tinylm::argmax(logits);
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    let max = logits[idx[0]];
    let w: Vec<f64> = idx.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &wi) in idx.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    *idx.last().expect("k ≥ 1")
}

/// Replay outcome for one earlier task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub task_id: usize,
    pub requested: usize,
    pub attempts: usize,
    /// Parsed samples kept for training.
    pub accepted: usize,
    pub rejected: usize,
    /// Accepted samples whose question belongs to `task_id`.
    pub corresponding: usize,
    #[serde(skip)]
    pub samples: Vec<Sample>,
}

impl ReplayEntry {
    pub fn shortfall(&self) -> usize {
        self.requested - self.accepted
    }

    /// Corresponding samples over requested samples; `None` when nothing
    /// was requested.
    pub fn correspondence_rate(&self) -> Option<f64> {
        (self.requested > 0).then(|| self.corresponding as f64 / self.requested as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub entries: Vec<ReplayEntry>,
}

impl ReplayPlan {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().flat_map(|e| e.samples.iter())
    }

    pub fn generated(&self) -> usize {
        self.entries.iter().map(|e| e.accepted).sum()
    }

    /// Pooled over entries: Σ corresponding / Σ requested.
    pub fn correspondence_rate(&self) -> Option<f64> {
        pooled_rate(&self.entries)
    }
}

fn pooled_rate(entries: &[ReplayEntry]) -> Option<f64> {
    let req: usize = entries.iter().map(|e| e.requested).sum();
    let corr: usize = entries.iter().map(|e| e.corresponding).sum();
    (req > 0).then(|| corr as f64 / req as f64)
}

/// The last condition index is reserved for rows without a task identity
/// (QA and ID encodings).
pub fn null_condition(rvae: &RvaeConfig) -> usize {
    rvae.n_conditions.saturating_sub(1)
}

/// Decodes sequences from the given prefixes with the adapter in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    prefixes: &[Vec<usize>],
    tags: &[usize],
    stop: usize,
    max_new: usize,
    choose: &mut dyn FnMut(usize, &[f64]) -> usize,
) -> Result<Vec<Vec<usize>>> {
    // Eval mode never draws noise; the generator is a placeholder.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut hook = rvae.map(|r| RvaeHook::new(r, Mode::Eval, &mut unused));
    let ad = hook.as_mut().map(|h| h as &mut dyn HiddenAdapter);
    tinylm::decode_with(params, model, prefixes, tags, stop, max_new, ad, choose)
}

const GEN_CHUNK: usize = 64;

/// Parse outcome of one decoded pseudo sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoStatus {
    /// Well formed with the requested task's question.
    Corresponding,
    /// Well formed but asks another task's question.
    OtherTask,
    /// No `[EOS]` or not parseable.
    Malformed,
}

/// Classifies a decoded sequence and returns the parsed sample if any.
pub fn classify_pseudo(tokens: &[usize], vocab: &Vocab) -> (PseudoStatus, Option<Sample>) {
    if tokens.last() != Some(&vocab.eos()) {
        return (PseudoStatus::Malformed, None);
    }
    match taskfmt::parse_pseudo(tokens, vocab) {
        Some((s, true)) => (PseudoStatus::Corresponding, Some(s)),
        Some((s, false)) => (PseudoStatus::OtherTask, Some(s)),
        None => (PseudoStatus::Malformed, None),
    }
}

/// `n` raw decodes from `[TASK_k]` with top-k sampling, in chunks.
#[allow(clippy::too_many_arguments)]
pub fn sample_pseudo<R: Rng + ?Sized>(
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    vocab: &Vocab,
    task: usize,
    n: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let start = vocab.task(task)?;
    let tag = match rvae {
        Some(r) if r.conditional => task,
        _ => 0,
    };
    let mut outs = Vec::with_capacity(n);
    while outs.len() < n {
        let m = (n - outs.len()).min(GEN_CHUNK);
        outs.extend(decode(
            params,
            model,
            rvae,
            &vec![vec![start]; m],
            &vec![tag; m],
            vocab.eos(),
            model.max_seq_len,
            &mut |_, l| sample_top_k(l, top_k, rng),
        )?);
    }
    Ok(outs)
}

/// Generates pseudo samples for each `(task_id, count)` request.
///
/// Decoding starts from `[TASK_k]` and runs to `[EOS]` or the length cap.
/// Outputs without `[EOS]` or that fail [`taskfmt::parse_pseudo`] are
/// rejected. Attempts stop at three times the requested count.
pub fn generate_replay<R: Rng + ?Sized>(
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    vocab: &Vocab,
    requests: &[(usize, usize)],
    top_k: usize,
    rng: &mut R,
) -> Result<ReplayPlan> {
    let mut plan = ReplayPlan::default();
    for &(task, requested) in requests {
        vocab.task(task)?;
        let mut e = ReplayEntry {
            task_id: task,
            requested,
            attempts: 0,
            accepted: 0,
            rejected: 0,
            corresponding: 0,
            samples: Vec::new(),
        };
        let budget = 3 * requested;
        while e.accepted < requested && e.attempts < budget {
            let n = (requested - e.accepted).min(budget - e.attempts).min(GEN_CHUNK);
            let outs = sample_pseudo(params, model, rvae, vocab, task, n, top_k, rng)?;
            e.attempts += n;
            for out in outs {
                match classify_pseudo(&out, vocab) {
                    (status, Some(s)) if e.accepted < requested => {
                        e.accepted += 1;
                        e.corresponding += usize::from(status == PseudoStatus::Corresponding);
                        e.samples.push(s);
                    }
                    _ => e.rejected += 1,
                }
            }
        }
        plan.entries.push(e);
    }
    Ok(plan)
}

/// Loss components of one batch, or averages over an epoch.
///
/// `qa`, `lm` and `id` are unweighted mean token NLLs; `kl` and `recon` are
/// already weighted by `1`, `λ` and `β` per kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "loss_total")]
    pub total: f64,
    #[serde(rename = "loss_qa")]
    pub qa: f64,
    #[serde(rename = "loss_lm")]
    pub lm: f64,
    #[serde(rename = "loss_id")]
    pub id: f64,
    #[serde(rename = "loss_kl")]
    pub kl: f64,
    #[serde(rename = "loss_recon")]
    pub recon: f64,
}

impl LossBreakdown {
    /// `qa + λ·lm + β·id + kl + recon`.
    pub fn recombine(&self, lambda_lm: f64, beta_id: f64) -> f64 {
        self.qa + lambda_lm * self.lm + beta_id * self.id + self.kl + self.recon
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.total += b.total;
            m.qa += b.qa;
            m.lm += b.lm;
            m.id += b.id;
            m.kl += b.kl;
            m.recon += b.recon;
        }
        m.total /= n;
        m.qa /= n;
        m.lm /= n;
        m.id /= n;
        m.kl /= n;
        m.recon /= n;
        m
    }
}

/// QA, LM and (if enabled) ID encodings of every sample.
pub fn encode_batch(samples: &[&Sample], vocab: &Vocab, cfg: &LllConfig, max_seq_len: usize) -> Result<Vec<EncodedExample>> {
    let max_len = max_seq_len + 1;
    let mut out = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        out.push(taskfmt::encode_qa(s, vocab, max_len)?);
        out.push(taskfmt::encode_lm(s, vocab, cfg.use_task_token, max_len)?);
        if cfg.use_id_task {
            out.push(taskfmt::encode_id(s, vocab, max_len)?);
        }
    }
    Ok(out)
}

fn kind_index(k: Kind) -> usize {
    match k {
        Kind::Qa => 0,
        Kind::Lm => 1,
        Kind::Id => 2,
    }
}

/// Records the composite loss of `batch` on `tape`.
///
/// Returns the scalar loss, the parameter handles (for gradient collection)
/// and the value breakdown. The adapter runs in train mode with noise from
/// `noise_rng`; its auxiliary loss is added only when `phase` trains it.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    cfg: &LllConfig,
    batch: &[EncodedExample],
    phase: TrainPhase,
    noise_rng: &mut R,
) -> Result<(Var, ParamVars, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::invalid("composite loss of an empty batch"));
    }
    let weights = [
        1.0,
        cfg.lambda_lm,
        if cfg.use_id_task { cfg.beta_id } else { 0.0 },
    ];
    let conditional = rvae.filter(|r| r.conditional);
    let tags: Vec<usize> = batch
        .iter()
        .map(|e| match conditional {
            Some(_) if e.kind == Kind::Lm => e.task_id,
            Some(r) => null_condition(r),
            None => 0,
        })
        .collect();
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.input_ids.as_slice()).collect();
    let packed = PackedBatch::pack(&seqs, &tags)?;

    let p = params.bind(tape, |n| phase.trains(n));
    // Backbone-only epochs bypass the adapter entirely.
    let active = rvae.filter(|_| phase.trains_adapter());
    let mut hook = active.map(|r| RvaeHook::new(r, Mode::Train, noise_rng));
    let h = tinylm::forward_hidden(
        tape,
        &p,
        model,
        &packed,
        hook.as_mut().map(|h| h as &mut dyn HiddenAdapter),
    )?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut row_kind = Vec::new();
    let mut seg_rows: [Vec<usize>; 3] = Default::default();
    for (e, seg) in batch.iter().zip(&packed.segments) {
        let k = kind_index(e.kind);
        seg_rows[k].extend(seg.start..seg.start + seg.len);
        for (i, (&t, &m)) in e.target_ids.iter().zip(&e.loss_mask).enumerate() {
            if m {
                rows.push(seg.start + i);
                targets.push(t);
                row_kind.push(k);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("batch has no loss-active positions"));
    }
    let mut counts = [0usize; 3];
    for &k in &row_kind {
        counts[k] += 1;
    }
    let logits = tinylm::logits_for_rows(tape, &p, h, &rows)?;
    let ce = tape.cross_entropy_rows(logits, &targets)?;
    let mut sums = [0.0; 3];
    for (&v, &k) in tape.value(ce).iter().zip(&row_kind) {
        sums[k] += v;
    }
    let means: Vec<f64> = (0..3)
        .map(|k| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { 0.0 })
        .collect();
    let row_w: Vec<f64> = row_kind.iter().map(|&k| weights[k] / counts[k] as f64).collect();
    let mut total = tape.weighted_sum(ce, &row_w)?;
    let mut out = LossBreakdown {
        qa: means[0],
        lm: means[1],
        id: means[2],
        ..LossBreakdown::default()
    };

    if let (Some(r), Some(hook)) = (active, hook.as_ref()) {
        {
            let v = *hook
                .outputs
                .first()
                .ok_or_else(|| Error::invalid("adapter position is unset"))?;
            for k in 0..3 {
                if seg_rows[k].is_empty() || weights[k] == 0.0 {
                    continue;
                }
                let sel = &seg_rows[k];
                let mu = tape.gather(v.mu, sel)?;
                let sigma = tape.gather(v.sigma, sel)?;
                let kl = rvae::kl_per_dimension_var(tape, mu, sigma)?;
                let fb = rvae::free_bits_kl_var(tape, kl, r.rho);
                out.kl += weights[k] * tape.scalar_value(fb);
                let mut term = fb;
                let dec = tape.gather(v.decoded, sel)?;
                let hin = tape.gather(v.h_in, sel)?;
                if let Some(rec) = rvae::recon_term_var(tape, dec, hin, cfg.recon_mode)? {
                    out.recon += weights[k] * tape.scalar_value(rec);
                    term = tape.add(term, rec)?;
                }
                let weighted = tape.scale(term, weights[k]);
                total = tape.add(total, weighted)?;
            }
        }
    }
    out.total = tape.scalar_value(total);
    Ok((total, p, out))
}

/// Value of the composite loss; see [`build_loss`].
#[allow(clippy::too_many_arguments)]
pub fn composite_loss<R: Rng + ?Sized>(
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    cfg: &LllConfig,
    batch: &[EncodedExample],
    phase: TrainPhase,
    noise_rng: &mut R,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (_, _, b) = build_loss(&mut tape, params, model, rvae, cfg, batch, phase, noise_rng)?;
    Ok(b)
}

/// One task of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Task id, which selects the `[TASK_k]` token.
    pub id: usize,
    pub name: String,
    pub metric: Metric,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub task: String,
    pub epoch: usize,
    pub phase: TrainPhase,
    pub steps: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub task: String,
    pub train_size: usize,
    pub replay: Vec<ReplayEntry>,
    /// Pooled over the stage's replay entries.
    pub correspondence_rate: Option<f64>,
    /// Scores (0–100) of every task seen so far.
    pub scores: BTreeMap<String, f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub order: Vec<String>,
    pub gamma: f64,
    pub seed: u64,
    /// Scores after the last stage, 0–100.
    pub final_scores: BTreeMap<String, f64>,
    pub average: f64,
    pub stages: Vec<StageRecord>,
    pub loss_curve: Vec<EpochRecord>,
}

/// Everything needed to continue a run, apart from the task data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: ParamStore,
    pub optimizer: AdamWState,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub rng: RngStreams,
    /// Index of the task being trained.
    pub stage: usize,
    /// Next epoch to run within the stage.
    pub epoch: usize,
    /// Real plus replay samples of the current stage; empty before the
    /// stage has been prepared.
    pub train_set: Vec<Sample>,
    pub stage_replay: Vec<ReplayEntry>,
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
}

/// Receives training events. Errors abort the run.
pub trait Observer {
    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainerState) -> Result<()> {
        Ok(())
    }

    fn on_stage(&mut self, _record: &StageRecord, _state: &TrainerState) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

/// Initial model and adapter parameters, drawn from the init stream.
pub fn init_params(model: &ModelConfig, rvae: Option<&RvaeConfig>, rng: &mut RngStreams) -> Result<ParamStore> {
    let mut p = tinylm::init_params(model, &mut rng.init)?;
    if let Some(r) = rvae {
        p.extend(rvae::init_params(r, &mut rng.init)?);
    }
    Ok(p)
}

/// Sequential trainer over a fixed task order.
pub struct Trainer {
    pub model: ModelConfig,
    pub rvae: Option<RvaeConfig>,
    pub cfg: LllConfig,
    pub vocab: Vocab,
    pub tasks: Vec<TaskData>,
    pub state: TrainerState,
    tape: Tape,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        rvae: Option<RvaeConfig>,
        cfg: LllConfig,
        vocab: Vocab,
        tasks: Vec<TaskData>,
    ) -> Result<Self> {
        let mut rng = RngStreams::new(cfg.seed);
        let params = init_params(&model, rvae.as_ref(), &mut rng)?;
        let state = TrainerState {
            params,
            optimizer: AdamWState::new(adamw(&cfg)),
            progress: Progress {
                rng,
                stage: 0,
                epoch: 0,
                train_set: Vec::new(),
                stage_replay: Vec::new(),
                epochs: Vec::new(),
                stages: Vec::new(),
            },
        };
        Self::from_state(model, rvae, cfg, vocab, tasks, state)
    }

    /// Continues from a saved state.
    pub fn from_state(
        model: ModelConfig,
        rvae: Option<RvaeConfig>,
        cfg: LllConfig,
        vocab: Vocab,
        tasks: Vec<TaskData>,
        state: TrainerState,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if model.vocab_size != vocab.len() {
            return Err(Error::config(
                "vocab_size",
                format!("model has {} tokens, vocabulary has {}", model.vocab_size, vocab.len()),
            ));
        }
        if tasks.is_empty() {
            return Err(Error::invalid("task stream is empty"));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::invalid(format!("task id {} appears twice in the stream", t.id)));
            }
            vocab.task(t.id)?;
            if t.train.iter().chain(&t.test).any(|s| s.task_id != t.id) {
                return Err(Error::invalid(format!("task `{}` holds samples of another task", t.name)));
            }
            if t.train.is_empty() || t.test.is_empty() {
                return Err(Error::invalid(format!("task `{}` has an empty split", t.name)));
            }
        }
        match &rvae {
            Some(r) => {
                r.validate()?;
                if model.adapter_position.is_none() {
                    return Err(Error::config("adapter_position", "an adapter needs a position"));
                }
                if r.d_model != model.d_model {
                    return Err(Error::config("rvae.d_model", "must equal the model's d_model"));
                }
                if r.conditional && r.n_conditions < vocab.n_tasks() + 1 {
                    return Err(Error::config(
                        "rvae.n_conditions",
                        format!("needs one per task plus a null condition ({})", vocab.n_tasks() + 1),
                    ));
                }
            }
            None => {
                if cfg.mode != TrainMode::Naive {
                    return Err(Error::config("mode", "phase schedules need an adapter; use naive"));
                }
            }
        }
        Ok(Self {
            model,
            rvae,
            cfg,
            vocab,
            tasks,
            state,
            tape: Tape::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.progress.stage >= self.tasks.len()
    }

    /// Runs to the end of the stream.
    pub fn run(&mut self, obs: &mut dyn Observer) -> Result<RunResult> {
        while !self.is_done() {
            if self.state.progress.train_set.is_empty() {
                self.begin_stage()?;
            }
            if self.state.progress.epoch < self.cfg.epochs_per_task {
                let rec = self.run_epoch()?;
                obs.on_epoch(&rec, &self.state)?;
            } else {
                let rec = self.finish_stage()?;
                obs.on_stage(&rec, &self.state)?;
            }
        }
        self.result()
    }

    /// Generates replay for the current stage and builds its training set.
    pub fn begin_stage(&mut self) -> Result<()> {
        let stage = self.state.progress.stage;
        let task = &self.tasks[stage];
        let mut plan = ReplayPlan::default();
        if stage > 0 {
            let n = pseudo_count(self.cfg.gamma, stage + 1, task.train.len())?;
            let requests: Vec<(usize, usize)> = self.tasks[..stage].iter().map(|t| (t.id, n)).collect();
            if n > 0 {
                plan = generate_replay(
                    &self.state.params,
                    &self.model,
                    self.rvae.as_ref(),
                    &self.vocab,
                    &requests,
                    self.cfg.gen_top_k,
                    &mut self.state.progress.rng.generation,
                )?;
            } else {
                plan.entries = requests
                    .iter()
                    .map(|&(k, _)| ReplayEntry {
                        task_id: k,
                        requested: 0,
                        attempts: 0,
                        accepted: 0,
                        rejected: 0,
                        corresponding: 0,
                        samples: Vec::new(),
                    })
                    .collect();
            }
        }
        let pr = &mut self.state.progress;
        pr.train_set = task.train.iter().chain(plan.samples()).cloned().collect();
        pr.stage_replay = plan.entries;
        pr.epoch = 0;
        self.state.optimizer = AdamWState::new(adamw(&self.cfg));
        Ok(())
    }

    pub fn current_phase(&self) -> Result<TrainPhase> {
        if self.rvae.is_none() {
            return Ok(TrainPhase::Joint);
        }
        phase_for_epoch(self.state.progress.epoch, &self.cfg)
    }

    /// One pass over the shuffled training set.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let phase = self.current_phase()?;
        let mut order: Vec<usize> = (0..self.state.progress.train_set.len()).collect();
        order.shuffle(&mut self.state.progress.rng.shuffle);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| self.state.progress.train_set[i].clone())
                .collect();
            losses.push(self.train_step(&samples, phase)?);
        }
        let pr = &mut self.state.progress;
        let rec = EpochRecord {
            stage: pr.stage,
            task: self.tasks[pr.stage].name.clone(),
            epoch: pr.epoch,
            phase,
            steps: losses.len(),
            loss: LossBreakdown::mean(&losses),
        };
        pr.epoch += 1;
        pr.epochs.push(rec.clone());
        Ok(rec)
    }

    /// One optimizer update on `samples`.
    pub fn train_step(&mut self, samples: &[Sample], phase: TrainPhase) -> Result<LossBreakdown> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = encode_batch(&refs, &self.vocab, &self.cfg, self.model.max_seq_len)?;
        self.tape.reset();
        let st = &mut self.state;
        let (loss, p, breakdown) = build_loss(
            &mut self.tape,
            &st.params,
            &self.model,
            self.rvae.as_ref(),
            &self.cfg,
            &batch,
            phase,
            &mut st.progress.rng.noise,
        )?;
        let mut grads = self.tape.backward(loss)?;
        let g = p.collect_grads(&mut grads, &st.params);
        st.optimizer.step(
            st.params
                .iter_mut()
                .filter_map(|(name, t)| g.get(name).map(|gv| (name, t, gv.as_slice()))),
        )?;
        Ok(breakdown)
    }

    /// Evaluates all tasks seen so far and moves to the next stage.
    pub fn finish_stage(&mut self) -> Result<StageRecord> {
        let stage = self.state.progress.stage;
        let mut scores = BTreeMap::new();
        for t in &self.tasks[..=stage] {
            scores.insert(t.name.clone(), self.evaluate(t)?);
        }
        let average = scores.values().sum::<f64>() / scores.len() as f64;
        let pr = &mut self.state.progress;
        let rec = StageRecord {
            stage,
            task: self.tasks[stage].name.clone(),
            train_size: pr.train_set.len(),
            correspondence_rate: pooled_rate(&pr.stage_replay),
            replay: std::mem::take(&mut pr.stage_replay),
            scores,
            average,
        };
        pr.stages.push(rec.clone());
        pr.stage += 1;
        pr.epoch = 0;
        pr.train_set.clear();
        Ok(rec)
    }

    /// Test-split score (0–100) of one task.
    pub fn evaluate(&self, task: &TaskData) -> Result<f64> {
        evaluate(
            &self.state.params,
            &self.model,
            self.rvae.as_ref(),
            &self.vocab,
            task,
            self.cfg.eval_max_answer,
        )
    }

    pub fn result(&self) -> Result<RunResult> {
        let pr = &self.state.progress;
        let last = pr
            .stages
            .last()
            .ok_or_else(|| Error::invalid("no stage has finished"))?;
        Ok(RunResult {
            order: self.tasks.iter().map(|t| t.name.clone()).collect(),
            gamma: self.cfg.gamma,
            seed: self.cfg.seed,
            final_scores: last.scores.clone(),
            average: last.average,
            stages: pr.stages.clone(),
            loss_curve: pr.epochs.clone(),
        })
    }
}

fn adamw(cfg: &LllConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Greedy answers for a set of samples, without the trailing `[EOS]`.
pub fn predict_answers(
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    vocab: &Vocab,
    samples: &[Sample],
    max_answer: usize,
) -> Result<Vec<Vec<usize>>> {
    let null = rvae.filter(|r| r.conditional).map(null_condition).unwrap_or(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(GEN_CHUNK) {
        let prefixes: Vec<Vec<usize>> = chunk.iter().map(|s| taskfmt::qa_prompt(s, vocab)).collect();
        let tags = vec![null; chunk.len()];
        let decoded = decode(
            params,
            model,
            rvae,
            &prefixes,
            &tags,
            vocab.eos(),
            max_answer,
            &mut |_, l| tinylm::argmax(l),
        )?;
        for (d, p) in decoded.into_iter().zip(&prefixes) {
            let mut ans = d[p.len()..].to_vec();
            if ans.last() == Some(&vocab.eos()) {
                ans.pop();
            }
            out.push(ans);
        }
    }
    Ok(out)
}

/// Mean test score of `task` scaled to 0–100.
pub fn evaluate(
    params: &ParamStore,
    model: &ModelConfig,
    rvae: Option<&RvaeConfig>,
    vocab: &Vocab,
    task: &TaskData,
    max_answer: usize,
) -> Result<f64> {
    let preds = predict_answers(params, model, rvae, vocab, &task.test, max_answer)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(&task.test) {
        let pw: Vec<&str> = p.iter().map(|&i| vocab.word(i)).collect::<Result<_>>()?;
        let gw: Vec<&str> = s.answer.iter().map(|&i| vocab.word(i)).collect::<Result<_>>()?;
        total += task.metric.score(&pw, &gw);
    }
    Ok(100.0 * total / task.test.len() as f64)
}

/// Trains `tasks` in order and returns the run summary.
pub fn train_stream(
    model: ModelConfig,
    rvae: Option<RvaeConfig>,
    cfg: LllConfig,
    vocab: Vocab,
    tasks: Vec<TaskData>,
    obs: &mut dyn Observer,
) -> Result<RunResult> {
    Trainer::new(model, rvae, cfg, vocab, tasks)?.run(obs)
}
