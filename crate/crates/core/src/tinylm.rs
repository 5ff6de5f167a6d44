//! Decoder-only causal transformer with an adapter hook between blocks.
//!
//! Pre-norm GPT-style blocks, learned absolute positions, output projection
//! tied to the token embedding. Batches are packed: sequences are laid end to
//! end as rows and attention is restricted to each sequence's own prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, ParamVars, Segment, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `0` in configuration files means "size of the vocabulary".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// `k` inserts the adapter behind block `k`; `0` is before the first block.
    pub adapter_position: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 128,
            adapter_position: Some(2),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if let Some(p) = self.adapter_position {
            if p > self.n_layers {
                return Err(Error::config(
                    "adapter_position",
                    format!("{p} exceeds n_layers {}", self.n_layers),
                ));
            }
        }
        Ok(())
    }
}

/// Backbone parameters live under this prefix; the adapter uses its own.
pub const LM_PREFIX: &str = "lm.";

fn layer_name(l: usize, rest: &str) -> String {
    format!("lm.h{l}.{rest}")
}

pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    p.init_normal("lm.tok_emb", &[cfg.vocab_size, d], rng);
    p.init_normal("lm.pos_emb", &[cfg.max_seq_len, d], rng);
    for l in 0..cfg.n_layers {
        p.init_ones(&layer_name(l, "ln1.g"), &[d]);
        p.init_zeros(&layer_name(l, "ln1.b"), &[d]);
        p.init_normal(&layer_name(l, "attn.qkv.w"), &[d, 3 * d], rng);
        p.init_zeros(&layer_name(l, "attn.qkv.b"), &[3 * d]);
        p.init_normal(&layer_name(l, "attn.proj.w"), &[d, d], rng);
        p.init_zeros(&layer_name(l, "attn.proj.b"), &[d]);
        p.init_ones(&layer_name(l, "ln2.g"), &[d]);
        p.init_zeros(&layer_name(l, "ln2.b"), &[d]);
        p.init_normal(&layer_name(l, "mlp.fc.w"), &[d, 4 * d], rng);
        p.init_zeros(&layer_name(l, "mlp.fc.b"), &[4 * d]);
        p.init_normal(&layer_name(l, "mlp.proj.w"), &[4 * d, d], rng);
        p.init_zeros(&layer_name(l, "mlp.proj.b"), &[d]);
    }
    p.init_ones("lm.ln_f.g", &[d]);
    p.init_zeros("lm.ln_f.b", &[d]);
    Ok(p)
}

/// Several token sequences laid end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// One label per sequence (the task id); adapters may condition on it.
    pub tags: Vec<usize>,
}

impl PackedBatch {
    pub fn pack<S: AsRef<[usize]>>(seqs: &[S], tags: &[usize]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("cannot pack an empty batch"));
        }
        if tags.len() != seqs.len() {
            return Err(Error::invalid(format!(
                "{} tags for {} sequences",
                tags.len(),
                seqs.len()
            )));
        }
        let mut b = PackedBatch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            tags: tags.to_vec(),
        };
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::invalid("cannot pack an empty sequence"));
            }
            b.segments.push(Segment {
                start: b.tokens.len(),
                len: s.len(),
            });
            b.tokens.extend_from_slice(s);
            b.positions.extend(0..s.len());
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Tag of the sequence owning each row.
    pub fn row_tags(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.rows());
        for (seg, &t) in self.segments.iter().zip(&self.tags) {
            out.extend(std::iter::repeat_n(t, seg.len));
        }
        out
    }

    /// Row index of the last token of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start + s.len - 1).collect()
    }
}

/// Receives the hidden state leaving block `adapter_position` and returns its
/// replacement.
pub trait HiddenAdapter {
    fn apply(&mut self, tape: &mut Tape, params: &ParamVars, h: Var, batch: &PackedBatch) -> Result<Var>;
}

/// Pass-through adapter.
pub struct IdentityAdapter;

impl HiddenAdapter for IdentityAdapter {
    fn apply(&mut self, _: &mut Tape, _: &ParamVars, h: Var, _: &PackedBatch) -> Result<Var> {
        Ok(h)
    }
}

fn check_tokens(cfg: &ModelConfig, batch: &PackedBatch) -> Result<()> {
    for s in &batch.segments {
        if s.len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s.len,
                max: cfg.max_seq_len,
            });
        }
    }
    if let Some(&id) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::UnknownToken {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn block(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig, l: usize, x: Var, batch: &PackedBatch) -> Result<Var> {
    let g = |rest: &str| p.get(&layer_name(l, rest));
    let a = tape.layer_norm(x, g("ln1.g")?, g("ln1.b")?)?;
    let qkv = tape.linear(a, g("attn.qkv.w")?, Some(g("attn.qkv.b")?))?;
    let att = tape.causal_attention(qkv, &batch.segments, cfg.n_heads)?;
    let proj = tape.linear(att, g("attn.proj.w")?, Some(g("attn.proj.b")?))?;
    let x = tape.add(x, proj)?;
    let m = tape.layer_norm(x, g("ln2.g")?, g("ln2.b")?)?;
    let fc = tape.linear(m, g("mlp.fc.w")?, Some(g("mlp.fc.b")?))?;
    let act = tape.gelu(fc);
    let out = tape.linear(act, g("mlp.proj.w")?, Some(g("mlp.proj.b")?))?;
    tape.add(x, out)
}

/// Final hidden states `[rows, d_model]` after the closing layer norm.
pub fn forward_hidden(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    batch: &PackedBatch,
    mut adapter: Option<&mut dyn HiddenAdapter>,
) -> Result<Var> {
    check_tokens(cfg, batch)?;
    let tok = tape.gather(p.get("lm.tok_emb")?, &batch.tokens)?;
    let pos = tape.gather(p.get("lm.pos_emb")?, &batch.positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..=cfg.n_layers {
        if cfg.adapter_position == Some(l) {
            if let Some(a) = adapter.as_deref_mut() {
                x = a.apply(tape, p, x, batch)?;
            }
        }
        if l < cfg.n_layers {
            x = block(tape, p, cfg, l, x, batch)?;
        }
    }
    tape.layer_norm(x, p.get("lm.ln_f.g")?, p.get("lm.ln_f.b")?)
}

/// Logits `[rows.len(), vocab]` for the selected hidden rows, using the
/// tied embedding as output projection.
pub fn logits_for_rows(tape: &mut Tape, p: &ParamVars, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.gather(hidden, rows)?;
    tape.matmul_bt(h, p.get("lm.tok_emb")?)
}

/// Logits for one sequence, shape `[len, vocab]`.
pub fn lm_forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    tokens: &[usize],
    adapter: Option<&mut dyn HiddenAdapter>,
) -> Result<Tensor> {
    let batch = PackedBatch::pack(&[tokens], &[0])?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let h = forward_hidden(&mut tape, &p, cfg, &batch, adapter)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let logits = logits_for_rows(&mut tape, &p, h, &rows)?;
    Ok(tape.tensor(logits))
}

/// Mean NLL of `targets` over positions where `mask` is set.
pub fn lm_nll(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (n, _) = tape.dims2(logits);
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "lm_nll",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("lm_nll: loss mask has no active position"));
    }
    let sel = tape.gather(logits, &rows)?;
    let t: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let ce = tape.cross_entropy_rows(sel, &t)?;
    Ok(tape.mean(ce))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Batched autoregressive decoding with a caller-supplied token rule.
///
/// Each returned sequence is its prefix followed by the chosen tokens,
/// including `stop` when it was produced. A sequence also halts after
/// `max_new` tokens or on reaching `max_seq_len`.
#[allow(clippy::too_many_arguments)]
pub fn decode_with(
    params: &ParamStore,
    cfg: &ModelConfig,
    prefixes: &[Vec<usize>],
    tags: &[usize],
    stop: usize,
    max_new: usize,
    mut adapter: Option<&mut dyn HiddenAdapter>,
    choose: &mut dyn FnMut(usize, &[f64]) -> usize,
) -> Result<Vec<Vec<usize>>> {
    if tags.len() != prefixes.len() {
        return Err(Error::invalid("decode: one tag per prefix required"));
    }
    for p in prefixes {
        if p.is_empty() {
            return Err(Error::invalid("decode: empty prefix"));
        }
        if p.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: p.len(),
                max: cfg.max_seq_len,
            });
        }
    }
    let mut seqs: Vec<Vec<usize>> = prefixes.to_vec();
    let mut active: Vec<usize> = (0..seqs.len())
        .filter(|&i| max_new > 0 && seqs[i].len() < cfg.max_seq_len)
        .collect();
    let mut produced = vec![0usize; seqs.len()];
    let mut tape = Tape::new();
    while !active.is_empty() {
        tape.reset();
        let p = params.bind(&mut tape, |_| false);
        let batch_seqs: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch_tags: Vec<usize> = active.iter().map(|&i| tags[i]).collect();
        let batch = PackedBatch::pack(&batch_seqs, &batch_tags)?;
        let ad = adapter.as_mut().map(|a| &mut **a as &mut dyn HiddenAdapter);
        let h = forward_hidden(&mut tape, &p, cfg, &batch, ad)?;
        let logits = logits_for_rows(&mut tape, &p, h, &batch.last_rows())?;
        let v = cfg.vocab_size;
        let lv = tape.value(logits);
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let next = choose(i, &lv[k * v..(k + 1) * v]);
            seqs[i].push(next);
            produced[i] += 1;
            if next != stop && produced[i] < max_new && seqs[i].len() < cfg.max_seq_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(seqs)
}

/// Greedy decoding of a single prefix.
pub fn greedy_decode(
    params: &ParamStore,
    cfg: &ModelConfig,
    prefix: &[usize],
    stop: usize,
    max_new: usize,
    adapter: Option<&mut dyn HiddenAdapter>,
) -> Result<Vec<usize>> {
    let mut out = greedy_decode_batch(params, cfg, &[prefix.to_vec()], &[0], stop, max_new, adapter)?;
    Ok(out.pop().expect("one prefix in, one sequence out"))
}

pub fn greedy_decode_batch(
    params: &ParamStore,
    cfg: &ModelConfig,
    prefixes: &[Vec<usize>],
    tags: &[usize],
    stop: usize,
    max_new: usize,
    adapter: Option<&mut dyn HiddenAdapter>,
) -> Result<Vec<Vec<usize>>> {
    decode_with(params, cfg, prefixes, tags, stop, max_new, adapter, &mut |_, l| argmax(l))
}
