//! Weighted residual VAE adapter and its conditional variant.
//!
//! ```text
//! μ      = LN_μ(relu(Enc_μ(LN_in(h))))
//! σ      = relu(Enc_σ(LN_in(h))) + SIGMA_FLOOR
//! z      = μ + σ ⊙ ε   (train)      z = μ   (eval)
//! h_out  = α·h + (1 − α)·Dec(z)
//! ```
//!
//! The conditional variant adds a per-task embedding to `LN_in(h)` and
//! concatenates a second per-task embedding to `z` before decoding. The KL
//! term is always taken against `N(0, I)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::tinylm::{HiddenAdapter, PackedBatch};

/// Added after the σ relu so that `log σ²` stays finite.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Adapter parameters live under this prefix.
pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvaeConfig {
    pub d_model: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub rho: f64,
    pub conditional: bool,
    pub n_conditions: usize,
    pub cond_dim: usize,
    /// Stop gradients from the adapter's encoder and reconstruction target
    /// reaching the backbone. Without it the early KL gradient dominates
    /// the backbone's Adam statistics.
    pub detach_input: bool,
}

impl Default for RvaeConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            latent_dim: 100,
            alpha: 0.5,
            rho: 0.2,
            conditional: false,
            n_conditions: 0,
            cond_dim: 16,
            detach_input: true,
        }
    }
}

impl RvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::config("rho", "must be non-negative"));
        }
        if self.conditional && self.n_conditions == 0 {
            return Err(Error::config("n_conditions", "conditional adapter needs at least one condition"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    /// Mean squared error between `Dec(z)` and the incoming hidden state.
    Mse,
    /// No explicit term; the downstream task loss reconstructs through `h_out`.
    TaskNll,
}

impl std::str::FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ReconMode::Mse),
            "task-nll" => Ok(ReconMode::TaskNll),
            other => Err(Error::config("recon_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn pname(rest: &str) -> String {
    format!("{ADAPTER_PREFIX}{rest}")
}

pub fn init_params<R: Rng + ?Sized>(cfg: &RvaeConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, k) = (cfg.d_model, cfg.latent_dim);
    let mut p = ParamStore::new();
    p.init_ones(&pname("ln_in.g"), &[d]);
    p.init_zeros(&pname("ln_in.b"), &[d]);
    p.init_normal(&pname("enc_mu.w"), &[d, k], rng);
    p.init_zeros(&pname("enc_mu.b"), &[k]);
    p.init_ones(&pname("ln_mu.g"), &[k]);
    p.init_zeros(&pname("ln_mu.b"), &[k]);
    p.init_normal(&pname("enc_sigma.w"), &[d, k], rng);
    // σ starts near 1 so the first KL terms are O(1) per dimension.
    p.insert(pname("enc_sigma.b"), Tensor::new(vec![k], vec![1.0; k])?);
    let dec_in = if cfg.conditional { k + cfg.cond_dim } else { k };
    p.init_zeros(&pname("dec.w"), &[dec_in, d]);
    p.init_zeros(&pname("dec.b"), &[d]);
    if cfg.conditional {
        p.init_normal(&pname("cond_dec"), &[cfg.n_conditions, cfg.cond_dim], rng);
        p.init_normal(&pname("cond_enc"), &[cfg.n_conditions, d], rng);
    }
    Ok(p)
}

/// Standard normal noise of shape `[rows, latent_dim]`.
pub fn sample_noise<R: Rng + ?Sized>(rows: usize, latent_dim: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, latent_dim, data).expect("noise shape")
}

/// Tape handles of one adapter application.
#[derive(Debug, Clone, Copy)]
pub struct RvaeVars {
    pub h_in: Var,
    pub h_out: Var,
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub decoded: Var,
}

/// Records the adapter on `tape`. `noise = None` means eval mode (`z = μ`).
/// `conditions` holds one task index per row and must be present exactly
/// when the adapter is conditional.
pub fn rvae_forward(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &RvaeConfig,
    h_in: Var,
    noise: Option<&Tensor>,
    conditions: Option<&[usize]>,
) -> Result<RvaeVars> {
    let (rows, d) = tape.dims2(h_in);
    if d != cfg.d_model {
        return Err(Error::Shape {
            op: "rvae_forward",
            lhs: tape.shape(h_in).to_vec(),
            rhs: vec![cfg.d_model],
        });
    }
    match (cfg.conditional, conditions) {
        (true, None) => return Err(Error::invalid("conditional adapter requires a condition")),
        (false, Some(_)) => return Err(Error::invalid("unconditional adapter got a condition")),
        (true, Some(c)) => {
            if c.len() != rows {
                return Err(Error::invalid(format!("{} conditions for {rows} rows", c.len())));
            }
            if let Some(&bad) = c.iter().find(|&&c| c >= cfg.n_conditions) {
                return Err(Error::invalid(format!(
                    "condition {bad} out of range for {} conditions",
                    cfg.n_conditions
                )));
            }
        }
        (false, None) => {}
    }

    let g = |rest: &str| p.get(&pname(rest));
    let enc_in = if cfg.detach_input { tape.detach(h_in) } else { h_in };
    let mut x = tape.layer_norm(enc_in, g("ln_in.g")?, g("ln_in.b")?)?;
    if let Some(c) = conditions {
        let ce = tape.gather(g("cond_enc")?, c)?;
        x = tape.add(x, ce)?;
    }
    let mu_pre = tape.linear(x, g("enc_mu.w")?, Some(g("enc_mu.b")?))?;
    let mu_act = tape.relu(mu_pre);
    let mu = tape.layer_norm(mu_act, g("ln_mu.g")?, g("ln_mu.b")?)?;
    let s_pre = tape.linear(x, g("enc_sigma.w")?, Some(g("enc_sigma.b")?))?;
    let s_act = tape.relu(s_pre);
    let sigma = tape.add_scalar(s_act, SIGMA_FLOOR);

    let z = match noise {
        None => mu,
        Some(eps) => {
            if eps.shape() != [rows, cfg.latent_dim] {
                return Err(Error::Shape {
                    op: "rvae noise",
                    lhs: eps.shape().to_vec(),
                    rhs: vec![rows, cfg.latent_dim],
                });
            }
            let e = tape.constant(eps);
            let se = tape.mul(sigma, e)?;
            tape.add(mu, se)?
        }
    };
    let dec_in = match conditions {
        Some(c) => {
            let cd = tape.gather(g("cond_dec")?, c)?;
            tape.concat_cols(z, cd)?
        }
        None => z,
    };
    let decoded = tape.linear(dec_in, g("dec.w")?, Some(g("dec.b")?))?;
    let h_out = tape.mix(h_in, decoded, cfg.alpha)?;
    Ok(RvaeVars {
        h_in: enc_in,
        h_out,
        mu,
        sigma,
        z,
        decoded,
    })
}

/// Per-dimension KL from `N(0, I)`, averaged over rows: `[rows, d] → [d]`.
pub fn kl_per_dimension_var(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let kl = tape.gauss_kl(mu, sigma)?;
    Ok(tape.mean_rows(kl))
}

/// `Σᵢ max(ρ, klᵢ)`, accumulated as `ρ·d + Σᵢ max(0, klᵢ − ρ)` so the
/// all-below-floor case is exactly `ρ·d`.
pub fn free_bits_kl_var(tape: &mut Tape, kl_per_dim: Var, rho: f64) -> Var {
    let d = tape.value(kl_per_dim).len() as f64;
    let shifted = tape.add_scalar(kl_per_dim, -rho);
    let excess = tape.max_scalar(shifted, 0.0);
    let s = tape.sum(excess);
    tape.add_scalar(s, rho * d)
}

pub fn recon_term_var(tape: &mut Tape, decoded: Var, h_in: Var, mode: ReconMode) -> Result<Option<Var>> {
    match mode {
        ReconMode::TaskNll => Ok(None),
        ReconMode::Mse => {
            let diff = tape.sub(decoded, h_in)?;
            let sq = tape.square(diff);
            Ok(Some(tape.mean(sq)))
        }
    }
}

/// Reconstruction term plus free-bits KL over the rows of one forward pass.
pub fn rvae_aux_loss_var(tape: &mut Tape, out: &RvaeVars, recon: ReconMode, rho: f64) -> Result<Var> {
    let kl = kl_per_dimension_var(tape, out.mu, out.sigma)?;
    let fb = free_bits_kl_var(tape, kl, rho);
    match recon_term_var(tape, out.decoded, out.h_in, recon)? {
        Some(r) => tape.add(r, fb),
        None => Ok(fb),
    }
}

/// Value form of [`kl_per_dimension_var`].
pub fn kl_per_dimension(mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, s) = (tape.constant(mu), tape.constant(sigma));
    let kl = kl_per_dimension_var(&mut tape, m, s)?;
    Ok(tape.tensor(kl))
}

/// Value form of [`free_bits_kl_var`].
pub fn free_bits_kl(kl_per_dim: &[f64], rho: f64) -> f64 {
    let excess: f64 = kl_per_dim.iter().map(|&k| (k - rho).max(0.0)).sum();
    excess + rho * kl_per_dim.len() as f64
}

/// Adapter values after one application, copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RvaeOutput {
    pub h_out: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z: Tensor,
    pub decoded: Tensor,
    pub kl_per_dim: Tensor,
    pub recon_loss: f64,
}

/// Stand-alone adapter forward on a hidden-state matrix.
pub fn rvae_apply<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &RvaeConfig,
    h_in: &Tensor,
    mode: Mode,
    rng: &mut R,
    condition: Option<usize>,
) -> Result<RvaeOutput> {
    let (rows, _) = h_in.dims2();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let h = tape.constant(h_in);
    let noise = match mode {
        Mode::Train => Some(sample_noise(rows, cfg.latent_dim, rng)),
        Mode::Eval => None,
    };
    let conds = condition.map(|c| vec![c; rows]);
    let v = rvae_forward(&mut tape, &p, cfg, h, noise.as_ref(), conds.as_deref())?;
    let kl = kl_per_dimension_var(&mut tape, v.mu, v.sigma)?;
    let recon = recon_term_var(&mut tape, v.decoded, v.h_in, ReconMode::Mse)?.expect("mse term");
    Ok(RvaeOutput {
        h_out: tape.tensor(v.h_out),
        mu: tape.tensor(v.mu),
        sigma: tape.tensor(v.sigma),
        z: tape.tensor(v.z),
        decoded: tape.tensor(v.decoded),
        kl_per_dim: tape.tensor(kl),
        recon_loss: tape.scalar_value(recon),
    })
}

/// Adapter hook for [`crate::tinylm::forward_hidden`].
///
/// Conditions come from the batch tags when the adapter is conditional.
/// Every application is kept so the caller can build the auxiliary loss.
pub struct RvaeHook<'a, R: Rng + ?Sized> {
    pub cfg: &'a RvaeConfig,
    pub mode: Mode,
    pub rng: &'a mut R,
    pub outputs: Vec<RvaeVars>,
}

impl<'a, R: Rng + ?Sized> RvaeHook<'a, R> {
    pub fn new(cfg: &'a RvaeConfig, mode: Mode, rng: &'a mut R) -> Self {
        Self {
            cfg,
            mode,
            rng,
            outputs: Vec::new(),
        }
    }
}

impl<R: Rng + ?Sized> HiddenAdapter for RvaeHook<'_, R> {
    fn apply(&mut self, tape: &mut Tape, params: &ParamVars, h: Var, batch: &PackedBatch) -> Result<Var> {
        let rows = batch.rows();
        let noise = match self.mode {
            Mode::Train => Some(sample_noise(rows, self.cfg.latent_dim, self.rng)),
            Mode::Eval => None,
        };
        let conds = self.cfg.conditional.then(|| batch.row_tags());
        let v = rvae_forward(tape, params, self.cfg, h, noise.as_ref(), conds.as_deref())?;
        self.outputs.push(v);
        Ok(v.h_out)
    }
}
