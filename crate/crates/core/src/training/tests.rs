use rand::Rng;

use super::*;
use crate::data::{SyntheticTaskConfig, IGNORE_LABEL};
use crate::error::Error;
use crate::model::{forward_full, jittered_params, random_images, toy_config, DecoderKind, ModelConfig, ModelParams};
use crate::numerics::testutil::{rel_err, rng};
use crate::numerics::Tensor;
use crate::pausing::{EntropySelector, FixedSelector};

fn small_config(decoder_kind: DecoderKind) -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        decoder_kind,
        mask_decoder_layers: 1,
        ..toy_config()
    }
}

fn random_labels(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..batch * cfg.image_height * cfg.image_width)
        .map(|_| {
            if r.random_bool(0.1) {
                IGNORE_LABEL as usize
            } else {
                r.random_range(0..cfg.num_classes)
            }
        })
        .collect()
}

const EVENT: PauseEvent = PauseEvent { layer: 3, tau: 0.5 };

/// Total-loss value with the token selection frozen to `selections`.
fn frozen_total(p: &ModelParams, images: &Tensor, labels: &[usize], selections: &[Vec<usize>], lambda: f64) -> f64 {
    let lg = build_loss(p, images, labels, Some(EVENT), &mut FixedSelector::new(selections.to_vec()), lambda).unwrap();
    lg.value(lg.total)
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    for kind in [DecoderKind::Linear, DecoderKind::MaskTransformer] {
        let cfg = small_config(kind);
        let p = jittered_params(&cfg, 1, 0.2);
        let images = random_images(&cfg, 2, 2);
        let labels = random_labels(&cfg, 2, 3);
        let mut lg = build_loss(&p, &images, &labels, Some(EVENT), &mut EntropySelector, 0.1).unwrap();
        let selections = lg.state.selections();
        assert_eq!(selections[0].len(), 8);
        let grads = lg.gradients(lg.total).unwrap();

        // fourth-order central differences keep truncation and roundoff
        // well below the tolerance for gradients as small as 1e-6
        let mut r = rng(4);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for slot in 0..p.tensors().len() {
            for _ in 0..2 {
                let i = r.random_range(0..p.get(slot).numel());
                let at = |delta: f64| {
                    let mut q = p.clone();
                    q.get_mut(slot).data_mut()[i] += delta;
                    frozen_total(&q, &images, &labels, &selections, 0.1)
                };
                let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                worst = worst.max(rel_err(grads[slot].data()[i], fd));
            }
        }
        assert!(worst < 1e-4, "{kind:?}: worst relative error {worst}");
    }
}

#[test]
fn gradient_is_linear_in_aux_weight() {
    let cfg = small_config(DecoderKind::MaskTransformer);
    let p = jittered_params(&cfg, 5, 0.2);
    let images = random_images(&cfg, 2, 6);
    let labels = random_labels(&cfg, 2, 7);
    let lambda = 0.37;
    let mut lg = build_loss(&p, &images, &labels, Some(EVENT), &mut EntropySelector, lambda).unwrap();
    let sel = lg.state.selections();
    let total = lg.gradients(lg.total).unwrap();
    let mut main_g = build_loss(&p, &images, &labels, Some(EVENT), &mut FixedSelector::new(sel.clone()), lambda).unwrap();
    let main = main_g.gradients(main_g.main).unwrap();
    let mut aux_g = build_loss(&p, &images, &labels, Some(EVENT), &mut FixedSelector::new(sel), lambda).unwrap();
    let aux = aux_g.gradients(aux_g.aux.unwrap()).unwrap();
    let mut aux_nonzero = false;
    for ((t, m), a) in total.iter().zip(&main).zip(&aux) {
        for ((t, m), a) in t.data().iter().zip(m.data()).zip(a.data()) {
            assert!((t - (m + lambda * a)).abs() <= 1e-10);
            aux_nonzero |= *a != 0.0;
        }
    }
    assert!(aux_nonzero);

    // with zero weight the update equals the main-loss gradient
    let mut zero = build_loss(&p, &images, &labels, Some(EVENT), &mut EntropySelector, 0.0).unwrap();
    for (z, m) in zero.gradients(zero.total).unwrap().iter().zip(&main) {
        assert!(z.max_abs_diff(m) <= 1e-15);
    }
}

#[test]
fn no_pause_loss_is_plain_cross_entropy() {
    let cfg = small_config(DecoderKind::Linear);
    let p = jittered_params(&cfg, 8, 0.2);
    let images = random_images(&cfg, 2, 9);
    let labels = random_labels(&cfg, 2, 10);
    let lg = build_loss(&p, &images, &labels, None, &mut EntropySelector, 0.0).unwrap();
    assert!(lg.aux.is_none());
    let logits = forward_full(&images, &p).unwrap();
    let k = cfg.num_classes;
    let (mut sum, mut count) = (0.0, 0);
    for (row, &y) in logits.data().chunks(k).zip(&labels) {
        if y == IGNORE_LABEL as usize {
            continue;
        }
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        sum += lse - row[y];
        count += 1;
    }
    assert!((lg.value(lg.total) - sum / count as f64).abs() < 1e-12);
}

fn toy_train_config(baseline: Baseline) -> TrainConfig {
    TrainConfig {
        steps: 20,
        batch_size: 2,
        pause_layers: vec![3, 4],
        seed: 11,
        baseline,
        ..Default::default()
    }
}

fn toy_source(cfg: &ModelConfig) -> BatchSource {
    BatchSource::Synthetic {
        task: SyntheticTaskConfig {
            height: cfg.image_height,
            width: cfg.image_width,
            num_classes: cfg.num_classes,
            ..Default::default()
        },
        seed: 3,
    }
}

#[test]
fn seeded_training_is_deterministic() {
    for baseline in [Baseline::Entropy, Baseline::RandomPausing, Baseline::NoPausing] {
        let cfg = small_config(DecoderKind::Linear);
        let run = || {
            let mut t = Trainer::new(&cfg, toy_train_config(baseline)).unwrap();
            let reports = t.run(&toy_source(&cfg), 3, None, None).unwrap();
            (encode_checkpoint(&t.checkpoint()).unwrap(), reports)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra[0].tau.is_none(), baseline == Baseline::NoPausing);
        assert_eq!(ra[0].loss_aux.is_none(), baseline == Baseline::NoPausing);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = small_config(DecoderKind::MaskTransformer);
    let source = toy_source(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    for baseline in [Baseline::RandomPausing, Baseline::Entropy] {
        let mut straight = Trainer::new(&cfg, toy_train_config(baseline)).unwrap();
        let full = straight.run(&source, 20, None, None).unwrap();

        let mut first = Trainer::new(&cfg, toy_train_config(baseline)).unwrap();
        let mut trace = first.run(&source, 10, None, Some(&path)).unwrap();
        let mut resumed = Trainer::resume(&path, Some(&cfg)).unwrap();
        assert_eq!(resumed.step, 10);
        trace.extend(resumed.run(&source, 20, None, None).unwrap());
        assert_eq!(trace.len(), 20);
        for (a, b) in trace.iter().zip(&full) {
            assert!((a.loss_main - b.loss_main).abs() <= 1e-6);
            assert_eq!(a.layer, b.layer);
        }
        assert_eq!(resumed.params, straight.params);
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = small_config(DecoderKind::MaskTransformer);
    let mut t = Trainer::new(&cfg, toy_train_config(Baseline::Entropy)).unwrap();
    t.run(&toy_source(&cfg), 2, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path, None).unwrap();
    assert_eq!(loaded, t.checkpoint());
    let path2 = dir.path().join("b.ckpt");
    save_checkpoint(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path2).unwrap(), bytes);

    for cut in [3, 30, bytes.len() / 2, bytes.len() - 1] {
        match decode_checkpoint(&bytes[..cut], None) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
            other => panic!("cut {cut}: expected format error, got {:?}", other.map(|_| ())),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad, None), Err(Error::Format { offset: 0, .. })));

    let wider = ModelConfig {
        embed_dim: 16,
        ..cfg.clone()
    };
    match load_checkpoint(&path, Some(&wider)) {
        Err(Error::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "embed.weight"),
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
    let linear = ModelConfig {
        decoder_kind: DecoderKind::Linear,
        ..cfg.clone()
    };
    match load_checkpoint(&path, Some(&linear)) {
        Err(Error::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "decoder.weight"),
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let cfg = small_config(DecoderKind::Linear);
    let mut t = Trainer::new(&cfg, toy_train_config(Baseline::Entropy)).unwrap();
    let slot = t.params.layout().aux_bias;
    t.params.get_mut(slot).data_mut()[0] = f64::NAN;
    let before = t.params.clone();
    let (images, labels) = toy_source(&cfg).batch(0, 2).unwrap();
    let err = t.step_once(&images, &labels).unwrap_err();
    assert!(matches!(&err, Error::Numeric(msg) if msg.contains("step 0")), "{err}");
    assert_eq!(t.step, 0);
    assert_eq!(format!("{:?}", t.params), format!("{before:?}"));
}

#[test]
fn jsonl_log_records() {
    let cfg = small_config(DecoderKind::Linear);
    let mut t = Trainer::new(&cfg, toy_train_config(Baseline::NoPausing)).unwrap();
    let mut log = Vec::new();
    t.run(&toy_source(&cfg), 2, Some(&mut log), None).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    let keys: Vec<&String> = lines[1].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["layer", "loss_aux", "loss_main", "step", "tau"]);
    assert_eq!(lines[1]["step"], 1);
    assert!(lines[1]["tau"].is_null());
}

#[test]
fn dataset_source_batches() {
    let cfg = small_config(DecoderKind::Linear);
    let task = SyntheticTaskConfig {
        height: 32,
        width: 32,
        num_classes: 3,
        ..Default::default()
    };
    let data = std::sync::Arc::new(crate::data::Dataset::synthetic(&task, 1, 5).unwrap());
    let src = BatchSource::Dataset { data, seed: 2 };
    let (a, la) = src.batch(4, 3).unwrap();
    let (b, lb) = src.batch(4, 3).unwrap();
    assert_eq!((a.shape(), la.len()), (&[3, 32, 32, 3][..], 3 * 32 * 32));
    assert_eq!((a, la), (b, lb));
    let mut t = Trainer::new(&cfg, toy_train_config(Baseline::RandomPausing)).unwrap();
    t.run(&src, 1, None, None).unwrap();
}
