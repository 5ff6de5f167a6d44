//! Dense tensors, a define-by-run gradient tape, AdamW, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

use std::collections::BTreeMap;

pub use gradcheck::{finite_diff_check, GradCheckEntry, GradCheckReport};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamStore, ParamVars};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates a graph built by `build` on named inputs and returns its named
/// outputs. The graph is rebuilt on every call.
pub fn forward_eval<F>(inputs: &BTreeMap<String, Tensor>, build: F) -> Result<BTreeMap<String, Tensor>>
where
    F: FnOnce(&mut Tape, &InputVars) -> Result<BTreeMap<String, Var>>,
{
    let mut tape = Tape::new();
    let vars = InputVars(
        inputs
            .iter()
            .map(|(k, t)| (k.clone(), tape.constant(t)))
            .collect(),
    );
    let outs = build(&mut tape, &vars)?;
    Ok(outs.into_iter().map(|(k, v)| (k, tape.tensor(v))).collect())
}

/// Name → tape handle for [`forward_eval`] inputs.
pub struct InputVars(BTreeMap<String, Var>);

impl InputVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unbound graph input `{name}`")))
    }
}
