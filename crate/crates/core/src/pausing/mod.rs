//! Entropy-guided patch pausing: after chosen encoder layers, the
//! auxiliary decoder scores every active token and the most confident ones
//! stop being processed. They are reinserted before the main decoder.

mod config;
mod entropy;
mod forward;
mod select;
mod state;

pub use config::{kept_count, paused_count, PauseConfig, PauseStage};
pub use entropy::{entropy_of_logits, token_entropy};
pub use forward::{
    early_exit_token_logits, encode, forward_early_exit, forward_with_pausing, forward_with_selector, Encoded,
    PauseStats,
};
pub use select::{top_entropy, EntropySelector, FixedSelector, RandomSelector, TokenSelector};
pub use state::{assemble, assemble_logits, pause_step, PauseRecord, PauseState};

/// Per-token entropy vector `[B, n]`.
pub type EntropyVector = crate::numerics::Tensor;
