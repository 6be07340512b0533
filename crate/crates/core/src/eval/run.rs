use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::CostModel;
use super::metrics::{argmax_rows, ConfusionMatrix, MiouReport};
use super::skyline::skyline_indices;
use crate::data::{collate, sample_rng, Dataset, SegSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Net};
use crate::numerics::{Graph, Tensor};
use crate::pausing::{
    assemble, early_exit_token_logits, encode, token_entropy, EntropySelector, PauseConfig, RandomSelector,
    TokenSelector,
};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "PAUMER_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selection {
    Entropy,
    /// Uniform token choice; shard `i` draws from stream `i` of `seed`.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Paused tokens rejoin the grid before the main decoder.
    Reassemble,
    /// Paused tokens keep their auxiliary predictions.
    EarlyExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub selection: Selection,
    pub decode: DecodeMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            selection: Selection::Entropy,
            decode: DecodeMode::Reassemble,
        }
    }
}

/// Worker pool sized by `PAUMER_THREADS` (rayon's default when unset).
pub fn eval_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))
}

/// Pixel logits `[B, H, W, K]` under a pause configuration.
pub fn predict(
    params: &ModelParams,
    images: &Tensor,
    config: &PauseConfig,
    selector: &mut dyn TokenSelector,
    decode: DecodeMode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(&bound, params.config());
    let enc = encode(&mut g, &net, images, config, selector)?;
    let out = match decode {
        DecodeMode::Reassemble => {
            let full = assemble(&mut g, enc.tokens, &enc.state)?;
            net.decode(&mut g, full)?
        }
        DecodeMode::EarlyExit => {
            let tokens = early_exit_token_logits(&mut g, &net, &enc)?;
            net.to_pixels(&mut g, tokens)?
        }
    };
    Ok(g.value(out).clone())
}

fn check_dataset(params: &ModelParams, data: &Dataset) -> Result<()> {
    let c = params.config();
    if (data.height, data.width) != (c.image_height, c.image_width) || data.num_classes != c.num_classes {
        return Err(Error::config(format!(
            "dataset is {}x{} with {} classes; model expects {}x{} with {}",
            data.height, data.width, data.num_classes, c.image_height, c.image_width, c.num_classes
        )));
    }
    Ok(())
}

fn shard_matrix(
    params: &ModelParams,
    shard: &[SegSample],
    index: usize,
    config: &PauseConfig,
    options: &EvalOptions,
) -> Result<ConfusionMatrix> {
    let (images, labels) = collate(shard)?;
    let logits = match options.selection {
        Selection::Entropy => predict(params, &images, config, &mut EntropySelector, options.decode)?,
        Selection::Random { seed } => {
            let mut rng = sample_rng(seed, index as u64);
            predict(params, &images, config, &mut RandomSelector::new(&mut rng), options.decode)?
        }
    };
    let k = params.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    cm.add(&argmax_rows(logits.data(), k), &labels, Some(IGNORE_LABEL as usize))?;
    Ok(cm)
}

/// Confusion matrix over the whole set, evaluated in parallel shards of
/// `batch_size` images and merged.
pub fn evaluate(params: &ModelParams, data: &Dataset, config: &PauseConfig, options: &EvalOptions) -> Result<ConfusionMatrix> {
    check_dataset(params, data)?;
    config.validate(params.config().num_layers)?;
    if options.batch_size == 0 {
        return Err(Error::config("eval batch_size must be positive"));
    }
    let k = params.config().num_classes;
    let shards: Vec<(usize, &[SegSample])> = data.samples.chunks(options.batch_size).enumerate().collect();
    eval_pool()?.install(|| {
        shards
            .par_iter()
            .map(|&(i, shard)| shard_matrix(params, shard, i, config, options))
            .try_reduce(|| ConfusionMatrix::new(k), |a, b| Ok(a.merge(&b)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Throughput {
    pub images_per_sec: f64,
    pub median_secs: f64,
    pub token_layer_products: usize,
}

/// Median wall-clock throughput of the entropy-paused forward pass on
/// `images`, after `warmup` untimed runs. Runs on the calling thread.
pub fn bench_throughput(
    params: &ModelParams,
    config: &PauseConfig,
    images: &Tensor,
    warmup: usize,
    iters: usize,
) -> Result<Throughput> {
    if iters < 3 {
        return Err(Error::config("bench needs at least 3 timed iterations"));
    }
    config.validate(params.config().num_layers)?;
    let run = || predict(params, images, config, &mut EntropySelector, DecodeMode::Reassemble);
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(run()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    Ok(Throughput {
        images_per_sec: images.shape()[0] as f64 / median.max(f64::MIN_POSITIVE),
        median_secs: median,
        token_layer_products: CostModel::new(params.config()).token_layer_products(config),
    })
}

/// One row of the speed/accuracy trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub config_id: String,
    pub throughput_ips: f64,
    pub token_layer_products: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub eval: EvalOptions,
    /// Images per timed forward pass.
    pub bench_batch: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            eval: EvalOptions::default(),
            bench_batch: 8,
            warmup: 1,
            iters: 3,
        }
    }
}

pub fn miou_of(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.report() {
        MiouReport::Evaluated { miou, .. } => Ok(miou),
        MiouReport::NoEvaluatedPixels => Err(Error::contract("no evaluated pixels")),
    }
}

/// mIoU and throughput for each configuration, in order.
pub fn sweep(params: &ModelParams, configs: &[PauseConfig], data: &Dataset, options: &SweepOptions) -> Result<Vec<TradeoffPoint>> {
    for c in configs {
        c.validate(params.config().num_layers)?;
    }
    let bench_n = options.bench_batch.min(data.len());
    let bench_images = if bench_n > 0 {
        Some(collate(&data.samples[..bench_n])?.0)
    } else {
        None
    };
    configs
        .iter()
        .map(|config| {
            let cm = evaluate(params, data, config, &options.eval)?;
            let throughput = match &bench_images {
                Some(images) => bench_throughput(params, config, images, options.warmup, options.iters)?,
                None => return Err(Error::config("sweep needs at least one evaluation image")),
            };
            Ok(TradeoffPoint {
                config_id: config.id(),
                throughput_ips: throughput.images_per_sec,
                token_layer_products: throughput.token_layer_products,
                miou: miou_of(&cm)?,
            })
        })
        .collect()
}

/// Points not dominated in (throughput, mIoU), in input order.
pub fn skyline(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.throughput_ips, p.miou)).collect();
    skyline_indices(&coords).into_iter().map(|i| points[i].clone()).collect()
}

/// Writes `config_id,throughput_ips,token_layer_products,miou` rows.
pub fn write_tradeoff_csv(out: impl Write, points: &[TradeoffPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if points.is_empty() {
        w.write_record(["config_id", "throughput_ips", "token_layer_products", "miou"])
            .map_err(csv_err)?;
    }
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("csv output", io),
        other => Error::contract(format!("csv: {other:?}")),
    }
}

/// One token's auxiliary prediction at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub layer: usize,
    pub entropy_nats: f64,
    pub correct: bool,
    /// Ground-truth class at the patch's center pixel (255 = ignore).
    pub class_id: u8,
}

/// Label at each patch's center pixel, `[B·N]`.
fn center_labels(labels: &[usize], batch: usize, params: &ModelParams) -> Vec<u8> {
    let c = params.config();
    let (h, w, p) = (c.image_height, c.image_width, c.patch_size);
    let mut out = Vec::with_capacity(batch * c.num_tokens());
    for b in 0..batch {
        for gy in 0..c.grid_height() {
            for gx in 0..c.grid_width() {
                let (y, x) = (gy * p + p / 2, gx * p + p / 2);
                out.push(labels[b * h * w + y * w + x] as u8);
            }
        }
    }
    out
}

/// Streams per-token auxiliary entropy and correctness after each listed
/// layer of the unpaused encoder. Rows are ordered by batch, layer, image,
/// token. Returns the number of rows written.
pub fn entropy_report(
    params: &ModelParams,
    data: &Dataset,
    layers: &[usize],
    batch_size: usize,
    mut emit: impl FnMut(EntropyRow) -> Result<()>,
) -> Result<usize> {
    check_dataset(params, data)?;
    let c = params.config();
    if let Some(&l) = layers.iter().find(|&&l| l < 1 || l > c.num_layers) {
        return Err(Error::config(format!("layer {l} outside [1, {}]", c.num_layers)));
    }
    let max_layer = layers.iter().copied().max().unwrap_or(0);
    let k = c.num_classes;
    let mut rows = 0;
    for shard in data.samples.chunks(batch_size.max(1)) {
        let (images, labels) = collate(shard)?;
        let centers = center_labels(&labels, shard.len(), params);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let net = Net::new(&bound, c);
        let mut x = net.patch_embed(&mut g, &images)?;
        for layer in 1..=max_layer {
            x = net.encoder_layer(&mut g, layer - 1, x)?;
            if !layers.contains(&layer) {
                continue;
            }
            let logits = net.aux_decode(&mut g, x)?;
            let entropy = token_entropy(g.value(logits));
            let preds = argmax_rows(g.data(logits), k);
            for ((&h, &pred), &class_id) in entropy.data().iter().zip(&preds).zip(&centers) {
                emit(EntropyRow {
                    layer,
                    entropy_nats: h,
                    correct: class_id != IGNORE_LABEL && pred == class_id as usize,
                    class_id,
                })?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

/// [`entropy_report`] written as CSV with header
/// `layer,entropy_nats,correct,class_id`.
pub fn write_entropy_csv(out: impl Write, params: &ModelParams, data: &Dataset, layers: &[usize], batch_size: usize) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "entropy_nats", "correct", "class_id"]).map_err(csv_err)?;
    let rows = entropy_report(params, data, layers, batch_size, |row| {
        w.write_record([
            row.layer.to_string(),
            row.entropy_nats.to_string(),
            row.correct.to_string(),
            row.class_id.to_string(),
        ])
        .map_err(csv_err)
    })?;
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(rows)
}
