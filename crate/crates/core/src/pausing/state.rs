use super::config::kept_count;
use super::entropy::token_entropy;
use super::select::TokenSelector;
use crate::error::{Error, Result};
use crate::model::Net;
use crate::numerics::{Graph, Tensor, Var};

/// What one pause stage saw and decided.
#[derive(Debug, Clone)]
pub struct PauseRecord {
    /// Encoder layer (1-based) after which the stage ran.
    pub layer: usize,
    pub tau: f64,
    /// Tokens `[B, n, D]` active when the stage ran, before the split.
    pub snapshot: Var,
    /// Auxiliary logits `[B, n, K]` for those tokens.
    pub aux_logits: Var,
    /// Per-token entropy `[B, n]` of the auxiliary prediction.
    pub entropy: Tensor,
    /// Positions (into `snapshot`) that stayed active, ascending per image.
    pub kept: Vec<Vec<usize>>,
}

impl PauseRecord {
    pub fn active_before(&self) -> usize {
        self.entropy.shape()[1]
    }

    pub fn active_after(&self) -> usize {
        self.kept.first().map_or(0, Vec::len)
    }
}

/// Stack of pause stages applied so far, in execution order.
#[derive(Debug, Clone, Default)]
pub struct PauseState {
    records: Vec<PauseRecord>,
}

impl PauseState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: PauseRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[PauseRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Kept positions of every stage, flattened in (stage, image) order;
    /// suitable for replay through a [`super::FixedSelector`].
    pub fn selections(&self) -> Vec<Vec<usize>> {
        self.records.iter().flat_map(|r| r.kept.iter().cloned()).collect()
    }
}

/// Runs the auxiliary decoder on `x[B, n, D]`, keeps `n − floor(tau·n)`
/// tokens per image as chosen by `selector`, and records the split.
/// Returns the `[B, n', D]` tokens that continue through the encoder.
pub fn pause_step(
    g: &mut Graph,
    net: &Net<'_>,
    x: Var,
    layer: usize,
    tau: f64,
    selector: &mut dyn TokenSelector,
    state: &mut PauseState,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::contract(format!("pause_step expects [B, n, D], got {s:?}")));
    }
    let (batch, n) = (s[0], s[1]);
    let keep = kept_count(n, tau);
    let aux_logits = net.aux_decode(g, x)?;
    let entropy = token_entropy(g.value(aux_logits));
    let kept: Vec<Vec<usize>> = entropy
        .data()
        .chunks_exact(n)
        .take(batch)
        .map(|row| selector.select(row, keep))
        .collect();
    let next = g.gather_rows(x, &kept)?;
    state.push(PauseRecord {
        layer,
        tau,
        snapshot: x,
        aux_logits,
        entropy,
        kept,
    });
    Ok(next)
}

/// Scatters `current` back through every recorded stage, last to first,
/// so paused positions carry their representation from the stage that
/// paused them. With no stages this is the identity.
fn unwind(g: &mut Graph, current: Var, state: &PauseState, pick: impl Fn(&PauseRecord) -> Var) -> Result<Var> {
    let mut current = current;
    for record in state.records.iter().rev() {
        let m = g.shape(current).get(1).copied().unwrap_or(0);
        if m != record.active_after() {
            return Err(Error::contract(format!(
                "stage at layer {} kept {} tokens but {m} were supplied",
                record.layer,
                record.active_after()
            )));
        }
        current = g.scatter_rows(pick(record), current, &record.kept)?;
    }
    Ok(current)
}

/// Restores the full token grid from the final active tokens.
pub fn assemble(g: &mut Graph, x_final: Var, state: &PauseState) -> Result<Var> {
    unwind(g, x_final, state, |r| r.snapshot)
}

/// Full-grid token logits where paused positions take the auxiliary
/// logits of the stage that paused them.
pub fn assemble_logits(g: &mut Graph, final_logits: Var, state: &PauseState) -> Result<Var> {
    unwind(g, final_logits, state, |r| r.aux_logits)
}
