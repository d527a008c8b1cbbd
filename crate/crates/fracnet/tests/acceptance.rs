//! Acceptance suite: nine quantitative criteria run sequentially, one
//! pass/fail line each. Sequential execution keeps the wall-clock budgets of
//! the gradient suite and the training sanity run meaningful.
//!
//! Run with `cargo test --test acceptance` (or `cargo test --workspace`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use fracnet::bam;
use fracnet::data::{self, DatasetManifest, Label, ManifestEntry, Split};
use fracnet::graph::{ConvSpec, Graph, Mode};
use fracnet::metrics::{metrics_from_counts, Averaging, ConfusionCounts, MetricsBundle};
use fracnet::model::{
    attach_head, build_backbone, build_backbone_with_input, insert_attention, pooled_features,
    HeadConfig,
};
use fracnet::optim::{adam_step, plateau_schedule, AdamState};
use fracnet::params::Params;
use fracnet::report::{emit_comparison, emit_curves, RunRecord};
use fracnet::rng::{derive_seed, SplitMix64};
use fracnet::synthetic;
use fracnet::tensor::Tensor;
use fracnet::train::{self, TrainConfig};
use fracnet::verify;

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.next_symmetric(scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ---- 1: gradient suite -------------------------------------------------------

fn criterion_1_gradient_suite() -> String {
    let started = Instant::now();
    let checks = verify::run_suite(2024).expect("suite runs");
    let elapsed = started.elapsed().as_secs_f64();
    let mut worst_layer = 0.0f64;
    let mut model_err = 0.0f64;
    for c in &checks {
        assert!(
            c.passed(),
            "{} error {} exceeds tolerance {}",
            c.name,
            c.max_rel_err,
            c.tolerance
        );
        if c.name == "full_model" {
            model_err = c.max_rel_err;
        } else {
            worst_layer = worst_layer.max(c.max_rel_err);
        }
    }
    assert!(worst_layer < 1e-4, "layer error {worst_layer}");
    assert!(model_err < 1e-3, "model error {model_err}");
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s");
    format!(
        "{} layers, worst layer err {worst_layer:.2e}, model err {model_err:.2e}, {elapsed:.1}s",
        checks.len()
    )
}

// ---- 2: attention identity anchor ---------------------------------------------

fn criterion_2_bam_identity() -> String {
    // Gate-zero initialization refines to exactly 1.5 * F.
    for trial in 0..20u64 {
        let mut params: Params<f64> = Params::new();
        let mut rng = SplitMix64::new(derive_seed(900, &[trial]));
        let ids = bam::register_bam_params(&mut params, "bam", 16, 4, 4, &mut rng).unwrap();
        let f = random_tensor(&[2, 16, 9, 9], derive_seed(901, &[trial]), 25.0);
        let mut g = Graph::new();
        let fx = g.leaf(f.clone());
        let out = bam::bam_refine(&mut g, &mut params, &ids, fx, Mode::Train).unwrap();
        for (o, i) in g.value(out).data().iter().zip(f.data()) {
            assert_eq!(o.to_bits(), (1.5 * i).to_bits(), "not exactly 1.5F");
        }
    }

    // With live gains the fused map stays strictly inside (0, 1) for inputs
    // up to |1e3|.
    let mut extreme = (f64::INFINITY, f64::NEG_INFINITY);
    for trial in 0..20u64 {
        let mut params: Params<f64> = Params::new();
        let mut rng = SplitMix64::new(derive_seed(902, &[trial]));
        let ids = bam::register_bam_params(&mut params, "bam", 16, 4, 4, &mut rng).unwrap();
        for name in ["bam.channel.bn.gamma", "bam.spatial.bn.gamma"] {
            let id = params.id(name).unwrap();
            let n = params.get(id).numel();
            params.set_data(id, &vec![0.9; n]).unwrap();
        }
        let f = random_tensor(&[2, 16, 9, 9], derive_seed(903, &[trial]), 1e3);
        let mut g = Graph::new();
        let fx = g.leaf(f);
        let shape = g.value(fx).shape().to_vec();
        let ch = bam::channel_gate(&mut g, &mut params, &ids, fx, Mode::Train).unwrap();
        let sp = bam::spatial_gate(&mut g, &mut params, &ids, fx, Mode::Train).unwrap();
        let ch = g.broadcast_to(ch, &shape).unwrap();
        let sp = g.broadcast_to(sp, &shape).unwrap();
        let gate = g.add(ch, sp).unwrap();
        let m = g.sigmoid(gate);
        for &v in g.value(m).data() {
            assert!(v > 0.0 && v < 1.0, "attention map value {v} outside (0,1)");
            extreme.0 = extreme.0.min(v);
            extreme.1 = extreme.1.max(v);
        }
    }
    format!(
        "20 gate-zero refinements bit-equal 1.5F; map range [{:.3e}, {:.6}] inside (0,1)",
        extreme.0, extreme.1
    )
}

// ---- 3: convolution oracle -----------------------------------------------------

/// Direct-loop cross-correlation reference, written independently of the
/// engine's kernel: plain nested loops over every tap.
#[allow(clippy::too_many_arguments)]
fn conv_reference(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    ker: &[f64],
    (co, k): (usize, usize),
    bias: &[f64],
    stride: usize,
    padding: usize,
    dilation: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0f64; n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as i64 * stride as i64 + ky as i64 * dilation as i64
                                    - padding as i64;
                                let ix = ox as i64 * stride as i64 + kx as i64 * dilation as i64
                                    - padding as i64;
                                if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += x[((ni * ci + i) * h + iy as usize) * w + ix as usize]
                                    * ker[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn criterion_3_conv_oracle() -> String {
    let mut rng = SplitMix64::new(33);
    let mut max_dev = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let n = 1 + rng.next_below(2);
        let ci = 1 + rng.next_below(3);
        let co = 1 + rng.next_below(4);
        let h = 3 + rng.next_below(8);
        let w = 3 + rng.next_below(8);
        let k = 1 + rng.next_below(3);
        let stride = 1 + rng.next_below(3);
        let padding = rng.next_below(4);
        let dilation = 1 + rng.next_below(4);
        let oh = fracnet::tensor::conv_out_extent(h, k, stride, padding, dilation);
        let ow = fracnet::tensor::conv_out_extent(w, k, stride, padding, dilation);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            continue;
        };
        if oh == 0 || ow == 0 {
            continue;
        }
        done += 1;

        let x = random_tensor(&[n, ci, h, w], rng.next_u64(), 2.0);
        let ker = random_tensor(&[co, ci, k, k], rng.next_u64(), 1.0);
        let bias = random_tensor(&[co], rng.next_u64(), 1.0);

        let expected = conv_reference(
            x.data(),
            (n, ci, h, w),
            ker.data(),
            (co, k),
            bias.data(),
            stride,
            padding,
            dilation,
            (oh, ow),
        );

        let mut g = Graph::new();
        let xn = g.leaf(x);
        let kn = g.leaf(ker);
        let bn = g.leaf(bias);
        let y = g
            .conv2d(
                xn,
                kn,
                Some(bn),
                ConvSpec {
                    stride,
                    padding,
                    dilation,
                },
            )
            .unwrap();
        assert_eq!(g.value(y).shape(), &[n, co, oh, ow]);
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            let dev = (a - e).abs();
            max_dev = max_dev.max(dev);
            assert!(dev < 1e-6, "conv deviates by {dev}");
        }
    }
    format!("100 randomized cases, max |engine - reference| = {max_dev:.2e}")
}

// ---- 4: split reproduction -------------------------------------------------------

fn criterion_4_split_reproduction() -> String {
    let mut entries = Vec::new();
    for i in 0..717 {
        entries.push(ManifestEntry {
            path: format!("Fractured/f{i:05}.png"),
            label: Label::Fractured,
            bytes: 1,
        });
    }
    for i in 0..3366 {
        entries.push(ManifestEntry {
            path: format!("Non_fractured/n{i:05}.png"),
            label: Label::NonFractured,
            bytes: 1,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = DatasetManifest {
        root: "/synthetic".into(),
        entries,
        scanned_at: 0,
    };
    assert_eq!(manifest.entries.len(), 4083);

    let split = data::split_dataset(&manifest, (0.80, 0.115, 0.085), 42, None, Vec::new()).unwrap();
    assert_eq!(split.counts(), [3266, 470, 347], "reference counts");

    // Partition: every path exactly once.
    let mut paths: Vec<&str> = split.entries.iter().map(|e| e.path.as_str()).collect();
    paths.sort_unstable();
    paths.dedup();
    assert_eq!(paths.len(), 4083);

    let again = data::split_dataset(&manifest, (0.80, 0.115, 0.085), 42, None, Vec::new()).unwrap();
    assert_eq!(split.to_json().unwrap(), again.to_json().unwrap());
    "4083 entries -> 3266/470/347, partition holds, identical seeds give identical manifests"
        .to_string()
}

// ---- 5: metrics oracle --------------------------------------------------------------

fn criterion_5_metrics_oracle() -> String {
    let mut rng = SplitMix64::new(55);
    for case in 0..100 {
        let n = 1 + rng.next_below(300);
        let preds: Vec<usize> = (0..n).map(|_| rng.next_below(2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(2)).collect();
        let counts = ConfusionCounts::from_predictions(&preds, &labels).unwrap();

        // Independent per-sample tally.
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let tally = correct as f64 / n as f64;

        let micro = metrics_from_counts(&counts, Averaging::Micro).unwrap();
        assert_eq!(micro.accuracy, tally, "case {case}");
        assert_eq!(micro.precision, micro.recall);
        assert_eq!(micro.recall, micro.accuracy);
        assert_eq!(micro.f1, micro.accuracy);

        let per_class = metrics_from_counts(&counts, Averaging::PerClass).unwrap();
        assert_eq!(per_class.accuracy, tally);
    }
    "100 random vectors: counts match per-sample tally exactly; micro P = R = F1 = accuracy"
        .to_string()
}

// ---- 6: optimizer and scheduler conformance --------------------------------------------

fn criterion_6_optimizer_scheduler() -> String {
    // Hand-computed first step: w = -lr/(1 + eps-adjustment).
    let mut params = Params::<f64>::new();
    let id = params
        .add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap(), true)
        .unwrap();
    params.accumulate_grad(id, &[1.0]);
    let mut state = AdamState::with_defaults(&params);
    adam_step(&mut params, &mut state, 1e-3, None).unwrap();
    let w1 = params.get(id).data()[0];
    assert!((w1 + 1e-3).abs() < 1e-9, "first step w = {w1}");

    // 200 steps on (w-3)^2 against an independently coded recurrence.
    let mut params = Params::<f64>::new();
    let id = params
        .add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap(), true)
        .unwrap();
    let mut state = AdamState::with_defaults(&params);
    let (mut w_ref, mut m_ref, mut v_ref) = (0.0f64, 0.0f64, 0.0f64);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
    for t in 1..=200 {
        let w = params.get(id).data()[0];
        params.zero_grads();
        params.accumulate_grad(id, &[2.0 * (w - 3.0)]);
        adam_step(&mut params, &mut state, lr, None).unwrap();

        let g = 2.0 * (w_ref - 3.0);
        m_ref = b1 * m_ref + (1.0 - b1) * g;
        v_ref = b2 * v_ref + (1.0 - b2) * g * g;
        w_ref -= lr * (m_ref / (1.0 - b1.powi(t))) / ((v_ref / (1.0 - b2.powi(t))).sqrt() + eps);
        let w_now = params.get(id).data()[0];
        assert!((w_now - w_ref).abs() < 1e-9, "step {t}: {w_now} vs {w_ref}");
    }
    let w_final = params.get(id).data()[0];
    assert!((w_final - 3.0).abs() < 0.05, "w converged to {w_final}");

    // Plateau rule: flat losses reduce exactly at epoch patience + 1.
    let mut lr = 1e-3;
    let mut history = Vec::new();
    let mut reduced_at = None;
    for epoch in 1..=30 {
        history.push(1.0);
        let next = plateau_schedule(&history, lr, 0.1, 10, 1e-6);
        if next < lr && reduced_at.is_none() {
            reduced_at = Some(epoch);
        }
        lr = next;
    }
    assert_eq!(reduced_at, Some(11), "reduction epoch");

    // Never increases, on arbitrary histories.
    let mut rng = SplitMix64::new(66);
    for _ in 0..50 {
        let mut lr = 1e-3;
        let mut history = Vec::new();
        for _ in 0..60 {
            history.push(rng.next_f64());
            let next = plateau_schedule(&history, lr, 0.5, 3, 1e-6);
            assert!(next <= lr && next >= 1e-6);
            lr = next;
        }
    }
    "Adam matches hand recurrence to 1e-9 over 200 steps; plateau fires at epoch 11, never raises"
        .to_string()
}

// ---- 7: training sanity -------------------------------------------------------------------

fn criterion_7_training_sanity() -> String {
    let started = Instant::now();
    let backbone = build_backbone(16, 3).unwrap();
    let with_bam = insert_attention(&backbone, 16, 4).unwrap();
    let head = HeadConfig::default_for(pooled_features(&with_bam).unwrap(), 2);
    let spec = attach_head(&with_bam, &head).unwrap();
    let mut params: Params<f32> = fracnet::model::init_params(&spec, 7).unwrap();

    // 64 train / 16 val: 64x64 sources scaled into the 224x224 pipeline.
    let train_data = synthetic::textured_split(32, 64, (224, 224), 3, 11);
    let val_data = synthetic::textured_split(8, 64, (224, 224), 3, 13);
    assert_eq!(train_data.len(), 64);
    assert_eq!(val_data.len(), 16);

    let config = TrainConfig {
        epochs: 30,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train::train(&spec, &mut params, &train_data, &val_data, &config).unwrap();

    let first_perfect = outcome
        .log
        .records
        .iter()
        .find(|r| r.train_acc == 1.0)
        .map(|r| r.epoch);
    let best_val_acc = outcome
        .log
        .records
        .iter()
        .map(|r| r.val_acc)
        .fold(0.0, f64::max);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        first_perfect.is_some(),
        "train accuracy never reached 1.0 in 30 epochs"
    );
    assert!(
        best_val_acc >= 0.90,
        "val accuracy peaked at {best_val_acc}"
    );
    assert!(elapsed < 600.0, "sanity run took {elapsed:.0}s");

    // The emitted log reproduces the curve schema.
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("log.csv");
    std::fs::write(&log_path, outcome.log.to_csv()).unwrap();
    let (loss_path, acc_path) = emit_curves(&log_path, dir.path()).unwrap();
    let loss_text = std::fs::read_to_string(loss_path).unwrap();
    let acc_text = std::fs::read_to_string(acc_path).unwrap();
    assert!(loss_text.starts_with("epoch,train_loss,val_loss\n"));
    assert!(acc_text.starts_with("epoch,train_acc,val_acc\n"));
    assert_eq!(loss_text.lines().count(), 31);
    assert_eq!(acc_text.lines().count(), 31);

    format!(
        "train acc 1.0 at epoch {}, best val acc {best_val_acc:.4}, {elapsed:.0}s, curves emitted",
        first_perfect.unwrap()
    )
}

// ---- 8: determinism ------------------------------------------------------------------------

fn write_fixture_tree(root: &Path) {
    for (dir, class) in [("Fractured", 1usize), ("Non_fractured", 0usize)] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..16u64 {
            let raw = synthetic::textured_image(64, class, 4000 + i * 13 + class as u64);
            let img = image::GrayImage::from_raw(64, 64, raw).unwrap();
            img.save(d.join(format!("img{i:03}.png"))).unwrap();
        }
    }
}

#[allow(clippy::type_complexity)]
fn pipeline_once(tree: &Path, work: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
    // prep
    let manifest = data::scan_dataset(tree).unwrap();
    let (pruned, rejected) = data::prune_corrupted(&manifest);
    let split = data::split_dataset(&pruned, (0.8, 0.1, 0.1), 9, None, rejected).unwrap();
    let split_path = work.join("split.json");
    split.save(&split_path).unwrap();

    // train
    let backbone = build_backbone_with_input(8, 3, 64, 64).unwrap();
    let with_bam = insert_attention(&backbone, 4, 2).unwrap();
    let head = HeadConfig::default_for(pooled_features(&with_bam).unwrap(), 2);
    let spec = attach_head(&with_bam, &head).unwrap();
    let mut params: Params<f32> = fracnet::model::init_params(&spec, 9).unwrap();
    let load = |sp: Split| {
        let entries = split.entries_for(sp);
        let (images, labels) = data::load_entries(tree, &entries, 3, (64, 64)).unwrap();
        train::LoadedSplit { images, labels }
    };
    let train_data = load(Split::Train);
    let val_data = load(Split::Val);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let outcome = train::train(&spec, &mut params, &train_data, &val_data, &config).unwrap();
    let ckpt = work.join("checkpoint");
    train::save_checkpoint(
        &ckpt,
        &spec,
        &outcome.best_params,
        &outcome.best_adam,
        &outcome.log,
    )
    .unwrap();

    // eval
    let (spec2, mut params2) = train::load_checkpoint(&ckpt).unwrap();
    let test_data = load(Split::Test);
    let counts = train::evaluate(&spec2, &mut params2, &test_data, 8).unwrap();
    let bundle = MetricsBundle::from_counts(counts).unwrap();
    let metrics_json = format!("{}\n", serde_json::to_string_pretty(&bundle).unwrap());
    std::fs::write(work.join("metrics.json"), &metrics_json).unwrap();

    (
        std::fs::read(&split_path).unwrap(),
        std::fs::read(ckpt.join("log.csv")).unwrap(),
        std::fs::read(ckpt.join("params.tnsr")).unwrap(),
        std::fs::read(ckpt.join("optimizer.tnsr")).unwrap(),
        metrics_json.into_bytes(),
    )
}

fn criterion_8_determinism() -> String {
    let tree = tempfile::tempdir().unwrap();
    write_fixture_tree(tree.path());
    let work_a = tempfile::tempdir().unwrap();
    let work_b = tempfile::tempdir().unwrap();
    let a = pipeline_once(tree.path(), work_a.path());
    let b = pipeline_once(tree.path(), work_b.path());
    assert_eq!(a.0, b.0, "split manifests differ");
    assert_eq!(a.1, b.1, "logs differ");
    assert_eq!(a.2, b.2, "parameter checkpoints differ");
    assert_eq!(a.3, b.3, "optimizer checkpoints differ");
    assert_eq!(a.4, b.4, "metrics reports differ");
    "two prep->train->eval runs: manifest, log, checkpoints, metrics all bit-identical".to_string()
}

// ---- 9: report fidelity ------------------------------------------------------------------------

fn criterion_9_report_fidelity() -> String {
    let record = RunRecord {
        run_id: "inceptionv3".into(),
        model: "InceptionV3".into(),
        config: serde_json::json!({}),
        metrics: fracnet::metrics::MetricsReport {
            accuracy: 0.9048,
            precision: 0.9057,
            recall: 0.9057,
            f1: 0.9057,
            averaging: Averaging::Micro,
            degenerate: false,
        },
        log_path: "log.csv".into(),
    };
    let out = emit_comparison(&[record]).unwrap();
    let expected_row = "InceptionV3 0.9048 0.9057 0.9057 0.9057\n";
    assert!(out.text.contains(expected_row), "table text:\n{}", out.text);
    "row \"InceptionV3 0.9048 0.9057 0.9057 0.9057\" rendered byte-exactly".to_string()
}

type Criterion = (&'static str, fn() -> String);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 gradient suite", criterion_1_gradient_suite),
        ("2 attention identity anchor", criterion_2_bam_identity),
        ("3 convolution oracle", criterion_3_conv_oracle),
        ("4 split reproduction", criterion_4_split_reproduction),
        ("5 metrics oracle", criterion_5_metrics_oracle),
        ("6 optimizer/scheduler", criterion_6_optimizer_scheduler),
        ("7 training sanity", criterion_7_training_sanity),
        ("8 determinism", criterion_8_determinism),
        ("9 report fidelity", criterion_9_report_fidelity),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(detail) => println!("[PASS] criterion {name}: {detail}"),
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("[FAIL] criterion {name}: {msg}");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
