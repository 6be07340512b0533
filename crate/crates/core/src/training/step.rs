use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{sample_pause_event, Baseline, PauseEvent, TrainConfig};
use super::optim::OptimizerState;
use crate::data::{collate, generate_samples, sample_rng, Dataset, SyntheticTaskConfig, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Net};
use crate::numerics::{Graph, Tensor, Var};
use crate::pausing::{encode, EntropySelector, PauseConfig, PauseState, RandomSelector, TokenSelector};

/// Losses of one step as written to the JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_main: f64,
    pub loss_aux: Option<f64>,
    pub layer: Option<usize>,
    pub tau: Option<f64>,
}

/// A built training graph with handles to each loss term.
pub struct LossGraph {
    pub graph: Graph,
    pub param_vars: Vec<Var>,
    pub main: Var,
    /// Auxiliary loss; absent without a pause event.
    pub aux: Option<Var>,
    pub total: Var,
    pub state: PauseState,
}

/// Pixel cross-entropy of `[B, H, W, K]` logits against flat labels.
fn pixel_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = *g.shape(logits).last().expect("rank-4 logits");
    let flat = g.reshape(logits, &[labels.len(), k])?;
    g.cross_entropy(flat, labels, Some(IGNORE_LABEL as usize))
}

/// Builds `L_main + aux_weight · L_aux` for one batch. With an event, the
/// encoder pauses once after `event.layer`, choosing tokens with `selector`;
/// the auxiliary loss covers every token active at that layer.
pub fn build_loss(
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    event: Option<PauseEvent>,
    selector: &mut dyn TokenSelector,
    aux_weight: f64,
) -> Result<LossGraph> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let net = Net::new(&bound, params.config());
    let config = event.map_or_else(PauseConfig::none, |e| PauseConfig::from_pairs(&[(e.layer, e.tau)]));
    let enc = encode(&mut g, &net, images, &config, selector)?;
    let full = crate::pausing::assemble(&mut g, enc.tokens, &enc.state)?;
    let logits = net.decode(&mut g, full)?;
    let main = pixel_loss(&mut g, logits, labels)?;
    let (aux, total) = match enc.state.records().first() {
        Some(rec) => {
            let aux_px = net.to_pixels(&mut g, rec.aux_logits)?;
            let aux = pixel_loss(&mut g, aux_px, labels)?;
            let weighted = g.scale(aux, aux_weight)?;
            (Some(aux), g.add(main, weighted)?)
        }
        None => (None, main),
    };
    Ok(LossGraph {
        param_vars: bound.vars().to_vec(),
        graph: g,
        main,
        aux,
        total,
        state: enc.state,
    })
}

impl LossGraph {
    /// Backpropagates `loss` and returns parameter gradients in canonical order.
    pub fn gradients(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        self.graph.backward(loss)?;
        self.param_vars
            .iter()
            .map(|&v| {
                let grad = self.graph.grad(v).expect("parameters are tracked").to_vec();
                Tensor::new(self.graph.shape(v).to_vec(), grad)
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.graph.data(v)[0]
    }
}

/// One optimization step: sample the pause event, build the loss, update
/// `params` in place. Aborts on a non-finite loss before touching parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    images: &Tensor,
    labels: &[usize],
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepReport> {
    let event = match config.baseline {
        Baseline::NoPausing => None,
        _ => Some(sample_pause_event(rng, config)?),
    };
    let mut lg = match config.baseline {
        Baseline::RandomPausing => build_loss(params, images, labels, event, &mut RandomSelector::new(rng), config.aux_weight)?,
        _ => build_loss(params, images, labels, event, &mut EntropySelector, config.aux_weight)?,
    };
    let report = StepReport {
        step,
        loss_main: lg.value(lg.main),
        loss_aux: lg.aux.map(|v| lg.value(v)),
        layer: event.map(|e| e.layer),
        tau: event.map(|e| e.tau),
    };
    let total = lg.value(lg.total);
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step} (pause layer {:?}, tau {:?}): main {}, aux {:?}",
            report.layer, report.tau, report.loss_main, report.loss_aux
        )));
    }
    let grads = lg.gradients(lg.total)?;
    optimizer.update(params, &grads, step, config);
    Ok(report)
}

/// Where training batches come from. Batch `s` depends only on the source
/// seed and `s`, so resumed runs see the same data.
#[derive(Debug, Clone)]
pub enum BatchSource {
    Synthetic { task: SyntheticTaskConfig, seed: u64 },
    Dataset { data: std::sync::Arc<Dataset>, seed: u64 },
}

impl BatchSource {
    pub fn batch(&self, step: u64, batch_size: usize) -> Result<(Tensor, Vec<usize>)> {
        match self {
            Self::Synthetic { task, seed } => {
                let samples = generate_samples(task, *seed, step * batch_size as u64, batch_size);
                collate(&samples)
            }
            Self::Dataset { data, seed } => {
                if data.is_empty() {
                    return Err(Error::config("training dataset is empty"));
                }
                let mut rng = sample_rng(*seed, step);
                let picks = index::sample(&mut rng, data.len(), batch_size.min(data.len()));
                collate(picks.iter().map(|i| &data.samples[i]))
            }
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        match self {
            Self::Synthetic { task, .. } => (task.height, task.width),
            Self::Dataset { data, .. } => (data.height, data.width),
        }
    }
}

/// Training state: parameters, optimizer moments, step counter and RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters drawn from the run's seeded RNG, which then drives
    /// pause sampling.
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate(model.num_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(model, &mut rng)?;
        // keep every parameter on the f32 grid so checkpoints are exact
        let mut params = params;
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let optimizer = OptimizerState::new(config.optimizer, params.parameter_count());
        Ok(Self {
            config,
            params,
            optimizer,
            step: 0,
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate(ckpt.params.config().num_layers)?;
        Ok(Self {
            config: ckpt.train_config,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
            rng: ckpt.rng,
        })
    }

    pub fn resume(path: impl AsRef<Path>, model: Option<&ModelConfig>) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path, model)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train_config: self.config.clone(),
            params: self.params.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.checkpoint(), path)
    }

    pub fn step_once(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let report = train_step(
            images,
            labels,
            &mut self.params,
            &mut self.optimizer,
            &self.config,
            &mut self.rng,
            self.step,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `until` steps are done. Each report is appended to `log`
    /// as a JSON line; with `checkpoint` set, saves every
    /// `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        source: &BatchSource,
        until: u64,
        mut log: Option<&mut dyn Write>,
        checkpoint: Option<&Path>,
    ) -> Result<Vec<StepReport>> {
        let (h, w) = source.image_size();
        let c = self.params.config();
        if (h, w) != (c.image_height, c.image_width) {
            return Err(Error::config(format!(
                "data is {h}x{w} but the model expects {}x{}",
                c.image_height, c.image_width
            )));
        }
        let mut reports = Vec::new();
        while self.step < until {
            let (images, labels) = source.batch(self.step, self.config.batch_size)?;
            let report = self.step_once(&images, &labels)?;
            if let Some(out) = log.as_deref_mut() {
                let line = serde_json::to_string(&report).map_err(|e| Error::contract(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            reports.push(report);
            let every = self.config.checkpoint_every as u64;
            if let Some(path) = checkpoint {
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == until {
                    self.save(path)?;
                }
            }
        }
        Ok(reports)
    }
}
