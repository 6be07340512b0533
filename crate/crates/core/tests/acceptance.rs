//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use paumer::data::{Dataset, SyntheticTaskConfig, IGNORE_LABEL};
use paumer::eval::{
    bench_throughput, entropy_report, evaluate, miou_of, skyline_indices, CostModel, EvalOptions, Selection,
};
use paumer::model::{forward_full, DecoderKind, ModelConfig, ModelParams, Net};
use paumer::numerics::{Graph, Tensor};
use paumer::pausing::{
    assemble, encode, entropy_of_logits, forward_with_pausing, kept_count, top_entropy, EntropySelector,
    FixedSelector, PauseConfig,
};
use paumer::training::{
    build_loss, decode_checkpoint, encode_checkpoint, Baseline, BatchSource, PauseEvent, TrainConfig, Trainer,
};

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Fresh parameters with every tensor perturbed so biases and positional
/// embeddings are non-trivial.
fn jittered(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = ModelParams::init(config, &mut r).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
    p
}

fn random_images(config: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = batch * config.image_height * config.image_width * 3;
    Tensor::new(
        vec![batch, config.image_height, config.image_width, 3],
        (0..n).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap()
}

fn small_model(layers: usize, dim: usize) -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 32,
        patch_size: 8,
        embed_dim: dim,
        num_layers: layers,
        num_heads: 2,
        num_classes: 3,
        ffn_hidden: None,
        decoder_kind: DecoderKind::Linear,
        mask_decoder_layers: 1,
    }
}

/// Paused order is (entropy asc, index asc); the kept set is the rest.
fn full_sort_keep(entropy: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropy.len()).collect();
    order.sort_by(|&a, &b| entropy[a].partial_cmp(&entropy[b]).unwrap().then(a.cmp(&b)));
    let mut kept = order[entropy.len() - keep..].to_vec();
    kept.sort();
    kept
}

fn mechanism() -> Check {
    // reassembly: every grid position receives exactly the row from the
    // stage at which it left the active set
    let mut conserved = 0;
    for seed in 0..60u64 {
        let mut r = rng(seed);
        let cfg = ModelConfig {
            decoder_kind: if seed % 2 == 0 { DecoderKind::Linear } else { DecoderKind::MaskTransformer },
            ..small_model(6, 8)
        };
        let p = jittered(&cfg, seed, 0.3);
        let images = random_images(&cfg, 2, seed + 100);
        let (l1, l2) = (r.random_range(1..=3), r.random_range(4..=6));
        let config = PauseConfig::from_pairs(&[(l1, r.random_range(0.0..0.95)), (l2, r.random_range(0.0..0.95))]);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let net = Net::new(&bound, &cfg);
        let enc = encode(&mut g, &net, &images, &config, &mut EntropySelector).unwrap();
        let full = assemble(&mut g, enc.tokens, &enc.state).unwrap();
        let (d, n_all) = (cfg.embed_dim, cfg.num_tokens());
        for b in 0..2 {
            let mut pos: Vec<usize> = (0..n_all).collect();
            let mut source: Vec<Option<Vec<f64>>> = vec![None; n_all];
            for rec in enc.state.records() {
                let n = pos.len();
                let snap = &g.data(rec.snapshot)[b * n * d..(b + 1) * n * d];
                for (i, &q) in pos.iter().enumerate() {
                    if rec.kept[b].binary_search(&i).is_err() {
                        if source[q].is_some() {
                            return Err(format!("position {q} paused twice (seed {seed})"));
                        }
                        source[q] = Some(snap[i * d..(i + 1) * d].to_vec());
                    }
                }
                pos = rec.kept[b].iter().map(|&i| pos[i]).collect();
            }
            let n = pos.len();
            let fin = &g.data(enc.tokens)[b * n * d..(b + 1) * n * d];
            for (i, &q) in pos.iter().enumerate() {
                source[q] = Some(fin[i * d..(i + 1) * d].to_vec());
            }
            let out = &g.data(full)[b * n_all * d..(b + 1) * n_all * d];
            for (q, src) in source.iter().enumerate() {
                if src.as_deref() != Some(&out[q * d..(q + 1) * d]) {
                    return Err(format!("position {q} not conserved (seed {seed})"));
                }
            }
        }
        conserved += 1;
    }

    // pause identity: empty and zero-proportion configs reproduce the
    // unpaused forward bit for bit
    for seed in 0..20u64 {
        let cfg = ModelConfig {
            decoder_kind: if seed % 2 == 0 { DecoderKind::Linear } else { DecoderKind::MaskTransformer },
            ..small_model(6, 8)
        };
        let p = jittered(&cfg, seed, 0.3);
        let images = random_images(&cfg, 2, seed);
        let full = forward_full(&images, &p).unwrap();
        for config in [PauseConfig::none(), PauseConfig::from_pairs(&[(3, 0.0)]), PauseConfig::from_pairs(&[(1, 0.0), (5, 0.0)])] {
            let (out, _) = forward_with_pausing(&images, &p, &config).unwrap();
            if out.data().iter().zip(full.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("config {config} differs from the unpaused forward (seed {seed})"));
            }
        }
    }

    // selection: partial selection equals the full-sort oracle
    let mut r = rng(7);
    for case in 0..1000 {
        let n = r.random_range(1..400);
        // coarse values force ties
        let levels = if case % 3 == 0 { 4.0 } else { 1e9 };
        let entropy: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * levels).floor() / levels).collect();
        let keep = kept_count(n, r.random_range(0.0..1.0));
        if top_entropy(&entropy, keep) != full_sort_keep(&entropy, keep) {
            return Err(format!("selection mismatch on instance {case} (n = {n}, keep = {keep})"));
        }
    }
    Ok(format!("{conserved} reassembly instances, 60 identity checks, 1000 selection instances"))
}

fn entropy_identities() -> Check {
    let mut scratch = Vec::new();
    let mut worst: f64 = 0.0;
    for k in 2..=64 {
        let ln_k = (k as f64).ln();
        for offset in [-50.0, 0.0, 3.7, 200.0] {
            worst = worst.max((entropy_of_logits(&vec![offset; k], &mut scratch) - ln_k).abs());
        }
        let mut one_hot = vec![0.0; k];
        one_hot[k / 2] = 1e4;
        worst = worst.max(entropy_of_logits(&one_hot, &mut scratch).abs());
    }
    if worst > 1e-9 {
        return Err(format!("identity error {worst:e}"));
    }
    let mut r = rng(3);
    for _ in 0..20_000 {
        let k = r.random_range(1..40);
        let scale = [0.01, 1.0, 30.0, 1e3][r.random_range(0..4)];
        let logits: Vec<f64> = (0..k).map(|_| r.random_range(-scale..scale)).collect();
        let h = entropy_of_logits(&logits, &mut scratch);
        if !(0.0..=(k as f64).ln()).contains(&h) {
            return Err(format!("entropy {h} outside [0, ln {k}]"));
        }
    }
    Ok(format!("max identity error {worst:.1e}; 20000 random rows within [0, ln K]"))
}

fn gradients() -> Check {
    let cfg = ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        ..small_model(2, 8)
    };
    let p = jittered(&cfg, 11, 0.2);
    let images = random_images(&cfg, 2, 12);
    let mut r = rng(13);
    let labels: Vec<usize> = (0..2 * 16 * 16)
        .map(|_| if r.random_bool(0.1) { IGNORE_LABEL as usize } else { r.random_range(0..3) })
        .collect();
    let event = PauseEvent { layer: 1, tau: 0.5 };
    let lambda = 0.1;
    let mut lg = build_loss(&p, &images, &labels, Some(event), &mut EntropySelector, lambda).unwrap();
    let selections = lg.state.selections();
    if selections.iter().any(|s| s.len() != 8) {
        return Err("pausing was not active".into());
    }
    let grads = lg.gradients(lg.total).unwrap();
    let total = |q: &ModelParams| {
        let lg = build_loss(q, &images, &labels, Some(event), &mut FixedSelector::new(selections.clone()), lambda).unwrap();
        lg.value(lg.total)
    };
    let sizes: Vec<usize> = p.tensors().iter().map(Tensor::numel).collect();
    let count: usize = sizes.iter().sum();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let mut flat = r.random_range(0..count);
        let slot = sizes
            .iter()
            .position(|&s| {
                if flat < s {
                    true
                } else {
                    flat -= s;
                    false
                }
            })
            .unwrap();
        let at = |delta: f64| {
            let mut q = p.clone();
            q.tensors_mut()[slot].data_mut()[flat] += delta;
            total(&q)
        };
        let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let g = grads[slot].data()[flat];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    ensure(worst < 1e-4, format!("worst relative error {worst:.2e} over 25 parameters"))
}

fn compute_accounting() -> Check {
    let cfg = ModelConfig {
        image_height: 80,
        image_width: 80,
        ..small_model(12, 8)
    };
    let config = PauseConfig::from_pairs(&[(3, 0.4)]);
    let p = jittered(&cfg, 1, 0.1);
    let images = random_images(&cfg, 1, 2);
    let (_, paused) = forward_with_pausing(&images, &p, &config).unwrap();
    let (_, base) = forward_with_pausing(&images, &p, &PauseConfig::none()).unwrap();
    let model = CostModel::new(&cfg);
    let counts = (paused.token_layer_products, base.token_layer_products);
    if counts != (840, 1200)
        || model.token_layer_products(&config) != 840
        || model.token_layer_products(&PauseConfig::none()) != 1200
        || model.active_counts(&config) != paused.per_layer_active
    {
        return Err(format!("token-layer products {counts:?}"));
    }

    // wall clock at 256 tokens
    let big = ModelConfig {
        image_height: 128,
        image_width: 128,
        embed_dim: 64,
        num_heads: 4,
        ..small_model(12, 64)
    };
    let p = jittered(&big, 3, 0.05);
    let images = random_images(&big, 2, 4);
    let fast = bench_throughput(&p, &config, &images, 1, 7).unwrap();
    let slow = bench_throughput(&p, &PauseConfig::none(), &images, 1, 7).unwrap();
    ensure(
        fast.images_per_sec > slow.images_per_sec,
        format!(
            "840 vs 1200 token-layers; N = {}: {:.2} vs {:.2} images/s",
            big.num_tokens(),
            fast.images_per_sec,
            slow.images_per_sec
        ),
    )
}

fn skyline_oracle() -> Check {
    let mut r = rng(21);
    let dominates = |q: (f64, f64), p: (f64, f64)| q.0 >= p.0 && q.1 >= p.1 && (q.0 > p.0 || q.1 > p.1);
    for case in 0..1000 {
        let n = r.random_range(0..120);
        let grid = [3.0, 20.0, 1e9][case % 3];
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| ((r.random::<f64>() * grid).floor(), (r.random::<f64>() * grid).floor()))
            .collect();
        let brute: Vec<usize> = (0..n).filter(|&i| !pts.iter().any(|&q| dominates(q, pts[i]))).collect();
        if skyline_indices(&pts) != brute {
            return Err(format!("mismatch on set {case}"));
        }
    }
    Ok("1000 point sets".into())
}

fn checkpointing() -> Check {
    let cfg = small_model(4, 16);
    let task = SyntheticTaskConfig {
        height: 32,
        width: 32,
        num_classes: 3,
        ..Default::default()
    };
    let train = TrainConfig {
        batch_size: 2,
        steps: 20,
        pause_layers: vec![3, 4],
        seed: 9,
        ..Default::default()
    };
    let source = BatchSource::Synthetic { task, seed: 9 };
    let mut straight = Trainer::new(&cfg, train.clone()).unwrap();
    let a = straight.run(&source, 20, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.pmckpt");
    let mut first = Trainer::new(&cfg, train).unwrap();
    let mut b = first.run(&source, 10, None, None).unwrap();
    first.save(&path).unwrap();
    let mut resumed = Trainer::resume(&path, Some(&cfg)).unwrap();
    b.extend(resumed.run(&source, 20, None, None).unwrap());

    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x.loss_main - y.loss_main).abs().max((x.loss_aux.unwrap_or(0.0) - y.loss_aux.unwrap_or(0.0)).abs()))
        .fold(0.0, f64::max);
    if a.len() != 20 || b.len() != 20 || worst > 1e-6 {
        return Err(format!("resume diverged by {worst:e}"));
    }
    let bytes = encode_checkpoint(&straight.checkpoint()).unwrap();
    let again = encode_checkpoint(&decode_checkpoint(&bytes, Some(&cfg)).unwrap()).unwrap();
    let resumed_bytes = encode_checkpoint(&resumed.checkpoint()).unwrap();
    let saved = std::fs::read(&path).unwrap();
    let reread = encode_checkpoint(&decode_checkpoint(&saved, None).unwrap()).unwrap();
    ensure(
        bytes == again && bytes == resumed_bytes && saved == reread,
        format!("20-step trace max diff {worst:.1e}; round-trip byte-identical ({} bytes)", bytes.len()),
    )
}

const TOY_STEPS: u64 = 5000;
const TOY_BATCH: usize = 2;
const SEEDS: [u64; 3] = [1, 2, 3];

fn toy_model() -> ModelConfig {
    ModelConfig {
        image_height: 64,
        image_width: 64,
        patch_size: 8,
        embed_dim: 64,
        num_layers: 6,
        num_heads: 4,
        num_classes: 5,
        ffn_hidden: None,
        decoder_kind: DecoderKind::Linear,
        mask_decoder_layers: 1,
    }
}

fn toy_task() -> SyntheticTaskConfig {
    SyntheticTaskConfig::default()
}

struct Trained {
    seed: u64,
    baseline: Baseline,
    params: ModelParams,
}

fn train_toys() -> (Vec<Trained>, f64) {
    let start = Instant::now();
    let runs: Vec<(u64, Baseline)> = SEEDS
        .iter()
        .flat_map(|&s| [(s, Baseline::Entropy), (s, Baseline::RandomPausing)])
        .collect();
    let model = toy_model();
    let trained = runs
        .par_iter()
        .map(|&(seed, baseline)| {
            let config = TrainConfig {
                steps: TOY_STEPS as usize,
                batch_size: TOY_BATCH,
                baseline,
                seed,
                ..Default::default()
            }
            .clamp_layers(model.num_layers);
            let mut t = Trainer::new(&model, config).unwrap();
            t.run(&BatchSource::Synthetic { task: toy_task(), seed }, TOY_STEPS, None, None).unwrap();
            Trained {
                seed,
                baseline,
                params: t.params,
            }
        })
        .collect();
    (trained, start.elapsed().as_secs_f64())
}

fn held_out() -> Dataset {
    Dataset::synthetic(&toy_task(), 1_000_003, 200).unwrap()
}

fn toy_end_to_end(trained: &[Trained], train_secs: f64) -> Check {
    let start = Instant::now();
    let model = toy_model();
    let data = held_out();
    let cost = CostModel::new(&model);
    let base = cost.token_layer_products(&PauseConfig::none()) as f64;
    // the mildest valid standard configuration with a 25% cut
    let target = PauseConfig::table1()
        .into_iter()
        .filter(|c| c.validate(model.num_layers).is_ok())
        .filter(|c| cost.token_layer_products(c) as f64 <= 0.75 * base)
        .max_by_key(|c| cost.token_layer_products(c))
        .ok_or("no standard configuration reaches a 25% reduction")?;
    let ladder: Vec<PauseConfig> = std::iter::once(PauseConfig::none())
        .chain([0.2, 0.4, 0.6].map(|t| PauseConfig::from_pairs(&[(3, t)])))
        .collect();
    let miou = |params: &ModelParams, config: &PauseConfig, selection: Selection| {
        let options = EvalOptions {
            selection,
            ..Default::default()
        };
        miou_of(&evaluate(params, &data, config, &options).unwrap()).unwrap()
    };

    let mut lines = Vec::new();
    let (mut full_ok, mut monotone_ok) = (true, true);
    let (mut ent_sum, mut rnd_sum) = (0.0, 0.0);
    for &seed in &SEEDS {
        let pick = |b: Baseline| &trained.iter().find(|t| t.seed == seed && t.baseline == b).unwrap().params;
        let ent = pick(Baseline::Entropy);
        let curve: Vec<f64> = ladder.iter().map(|c| miou(ent, c, Selection::Entropy)).collect();
        let at_target_ent = miou(ent, &target, Selection::Entropy);
        let at_target_rnd = miou(pick(Baseline::RandomPausing), &target, Selection::Random { seed });
        full_ok &= curve[0] >= 0.80;
        monotone_ok &= curve.windows(2).all(|w| w[1] <= w[0] + 0.01);
        ent_sum += at_target_ent;
        rnd_sum += at_target_rnd;
        lines.push(format!(
            "seed {seed}: layer-3 ladder [{}], {target}: entropy {at_target_ent:.4} random {at_target_rnd:.4}",
            curve.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ));
    }
    let k = SEEDS.len() as f64;
    let gap = (ent_sum - rnd_sum) / k;
    let reduction = 1.0 - cost.token_layer_products(&target) as f64 / base;
    let summary = format!(
        "(a) {} (b) gap {gap:+.4} at {target} ({:.1}% fewer token-layers) {} (c) {}; train {train_secs:.0}s, eval {:.0}s\n    {}",
        if full_ok { "ok" } else { "FAILED" },
        100.0 * reduction,
        if gap >= 0.01 { "ok" } else { "FAILED" },
        if monotone_ok { "ok" } else { "FAILED" },
        start.elapsed().as_secs_f64(),
        lines.join("\n    ")
    );
    ensure(full_ok && gap >= 0.01 && monotone_ok, summary)
}

fn entropy_separation(trained: &[Trained]) -> Check {
    let model = toy_model();
    let layers: Vec<usize> = (2..=model.num_layers).step_by(2).collect();
    let last = *layers.last().unwrap();
    let data = held_out();
    let mut gaps = Vec::new();
    for t in trained.iter().filter(|t| t.baseline == Baseline::Entropy) {
        let (mut right, mut wrong) = ((0.0, 0usize), (0.0, 0usize));
        entropy_report(&t.params, &data, &layers, 16, |row| {
            if row.layer == last && row.class_id != IGNORE_LABEL {
                let acc = if row.correct { &mut right } else { &mut wrong };
                acc.0 += row.entropy_nats;
                acc.1 += 1;
            }
            Ok(())
        })
        .unwrap();
        if right.1 == 0 || wrong.1 == 0 {
            return Err(format!("seed {}: no {} tokens", t.seed, if right.1 == 0 { "correct" } else { "incorrect" }));
        }
        gaps.push((t.seed, right.0 / right.1 as f64, wrong.0 / wrong.1 as f64));
    }
    let (seed, right, wrong) = gaps[0];
    let others: Vec<String> = gaps[1..]
        .iter()
        .map(|(s, r, w)| format!("seed {s}: {:.3}", w - r))
        .collect();
    ensure(
        wrong - right >= 0.2,
        format!(
            "layer {last}, seed {seed}: correct {right:.3} vs incorrect {wrong:.3} nats (gap {:.3}; {})",
            wrong - right,
            others.join(", ")
        ),
    )
}

fn run(id: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id}: {tag} - {name} [{secs:.1}s] {detail}");
    result.is_ok()
}

fn main() {
    let mut all = true;
    all &= run(1, "mechanism exactness", mechanism);
    all &= run(2, "entropy correctness", entropy_identities);
    all &= run(3, "gradient soundness", gradients);
    all &= run(4, "compute accounting", compute_accounting);

    let trained = catch_unwind(train_toys).ok();
    match &trained {
        Some((runs, secs)) => {
            all &= run(5, "toy end-to-end", || toy_end_to_end(runs, *secs));
        }
        None => {
            println!("criterion 5: FAIL - toy end-to-end: training panicked");
            all = false;
        }
    }
    all &= run(6, "skyline oracle", skyline_oracle);
    match &trained {
        Some((runs, _)) => all &= run(7, "entropy separation", || entropy_separation(runs)),
        None => {
            println!("criterion 7: FAIL - entropy separation: no trained model");
            all = false;
        }
    }
    all &= run(8, "determinism and checkpointing", checkpointing);
    if !all {
        std::process::exit(1);
    }
}
