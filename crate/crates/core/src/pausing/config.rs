use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pause `tau` of the active tokens right after encoder layer `layer` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PauseStage {
    pub layer: usize,
    pub tau: f64,
}

/// Ordered pause stages; empty means no pausing.
///
/// Serialized as a JSON list of `{"layer": int, "tau": float}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PauseConfig {
    stages: Vec<PauseStage>,
}

/// Number of tokens paused out of `active` at proportion `tau`: `floor(tau · active)`.
pub fn paused_count(active: usize, tau: f64) -> usize {
    (tau * active as f64).floor() as usize
}

/// Tokens that stay active: `active − floor(tau · active)`.
pub fn kept_count(active: usize, tau: f64) -> usize {
    active - paused_count(active, tau)
}

impl PauseConfig {
    pub fn new(stages: Vec<PauseStage>) -> Self {
        Self { stages }
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// Builds a config from `(layer, tau)` pairs.
    pub fn from_pairs(pairs: &[(usize, f64)]) -> Self {
        Self::new(pairs.iter().map(|&(layer, tau)| PauseStage { layer, tau }).collect())
    }

    pub fn stages(&self) -> &[PauseStage] {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn tau_at(&self, layer: usize) -> Option<f64> {
        self.stages.iter().find(|s| s.layer == layer).map(|s| s.tau)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let mut prev = 0;
        for s in &self.stages {
            if s.layer < 1 || s.layer > num_layers {
                return Err(Error::config(format!(
                    "pause layer {} outside [1, {num_layers}]",
                    s.layer
                )));
            }
            if s.layer <= prev {
                return Err(Error::config("pause layers must be strictly increasing"));
            }
            if !(0.0..1.0).contains(&s.tau) {
                return Err(Error::config(format!(
                    "pause proportion {} at layer {} outside [0, 1)",
                    s.tau, s.layer
                )));
            }
            prev = s.layer;
        }
        Ok(())
    }

    /// Active-token count entering each layer `1..=num_layers`, with `tau`
    /// applied to the tokens still active at each stage.
    pub fn active_counts(&self, num_tokens: usize, num_layers: usize) -> Vec<usize> {
        let mut active = num_tokens;
        (1..=num_layers)
            .map(|layer| {
                let entering = active;
                if let Some(tau) = self.tau_at(layer) {
                    active = kept_count(active, tau);
                }
                entering
            })
            .collect()
    }

    /// Short identifier such as `3:0.2+5:0.2`; `none` when empty.
    pub fn id(&self) -> String {
        if self.stages.is_empty() {
            return "none".into();
        }
        self.stages
            .iter()
            .map(|s| format!("{}:{}", s.layer, s.tau))
            .collect::<Vec<_>>()
            .join("+")
    }

    /// The thirteen inference configurations of the reference sweep.
    pub fn table1() -> Vec<PauseConfig> {
        let single = |layer, tau| Self::from_pairs(&[(layer, tau)]);
        let mut out = vec![
            single(3, 0.2),
            single(3, 0.4),
            single(3, 0.6),
            single(5, 0.2),
            single(5, 0.4),
            single(5, 0.6),
            single(5, 0.8),
        ];
        for tau in [0.2, 0.3, 0.4] {
            out.push(Self::from_pairs(&[(3, tau), (5, tau)]));
        }
        for tau in [0.2, 0.3, 0.4] {
            out.push(Self::from_pairs(&[(3, tau), (5, tau), (7, tau)]));
        }
        out
    }
}

impl fmt::Display for PauseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Parses the form produced by [`PauseConfig::id`].
impl std::str::FromStr for PauseConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" || s.is_empty() {
            return Ok(Self::none());
        }
        let stages = s
            .split('+')
            .map(|part| {
                let bad = || Error::config(format!("bad pause stage {part:?}, expected layer:tau"));
                let (l, t) = part.split_once(':').ok_or_else(bad)?;
                Ok(PauseStage {
                    layer: l.trim().parse().map_err(|_| bad())?,
                    tau: t.trim().parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(stages))
    }
}
