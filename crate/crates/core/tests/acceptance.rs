//! End-to-end acceptance battery. Every criterion prints one PASS/FAIL line
//! (run with `--nocapture` to see them) and then asserts.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use emoaudionet::audio::AudioClip;
use emoaudionet::augment::{add_noise, augment_corpus, pitch_shift, AugmentSpec};
use emoaudionet::corpus::{generate_synthetic_corpus, load_examples, SyntheticSpec};
use emoaudionet::dsp::{dct2, dct3, fft_length, peak_frequency, power_spectrum};
use emoaudionet::metrics::{label_range, nrmse, summarize_confusion};
use emoaudionet::model::ParamGroup;
use emoaudionet::nn::*;
use emoaudionet::spectro::resize_bilinear;
use emoaudionet::train::train_step;
use emoaudionet::*;
use rand::Rng;

fn verdict(id: usize, name: &str, ok: bool, detail: String, started: Instant) -> bool {
    println!(
        "criterion {id} [{name}]: {} ({detail}; {:.2?})",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed()
    );
    ok
}

fn random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// -- 1 ----------------------------------------------------------------------

#[test]
fn c1_architecture_shapes() {
    let t = Instant::now();
    let net = build_model(TaskKind::DepressionBinary, 128, 0).unwrap();
    let spec: usize = net.spectro_stream().output_shape().iter().product();
    let mfcc: usize = net.mfcc_stream().output_shape().iter().product();
    let fused = net.head().input_shape().iter().product::<usize>();
    let ok = spec == 1152 && mfcc == 2816 && fused == 3968 && t.elapsed().as_secs_f64() < 1.0;
    assert!(verdict(1, "shapes", ok, format!("spectro {spec}, mfcc {mfcc}, fused {fused}"), t));
}

// -- 2 ----------------------------------------------------------------------

fn surrogate_arch() -> Architecture {
    Architecture {
        width: 8,
        spectro_shape: [32, 32, 3],
        mfcc_len: 40,
        pool: 4,
    }
}

/// Window id of flat index `i` for non-overlapping pooling of size `p`, or
/// `None` when the element falls outside every window.
fn pool_window(shape: &[usize], i: usize, p: usize) -> Option<Vec<usize>> {
    let c = *shape.last().unwrap();
    let spatial = &shape[..shape.len() - 1];
    let mut rest = i / c;
    let mut coords = vec![0; spatial.len()];
    for d in (0..spatial.len()).rev() {
        coords[d] = rest % spatial[d];
        rest /= spatial[d];
    }
    let mut id: Vec<usize> = Vec::new();
    for (d, &x) in coords.iter().enumerate() {
        if x / p >= spatial[d] / p {
            return None;
        }
        id.push(x / p);
    }
    id.push(i % c);
    Some(id)
}

/// Input coordinates where a step of `h` cannot change which branch of a
/// piecewise-linear layer is taken.
fn smooth_inputs(layer: &Layer, x: &Tensor) -> Vec<usize> {
    let margin = 1e-3;
    match layer {
        Layer::Relu => (0..x.len()).filter(|&i| x.data()[i].abs() >= margin).collect(),
        Layer::MaxPool(p) => {
            let shape = x.shape();
            let windows: Vec<Option<Vec<usize>>> = (0..x.len()).map(|i| pool_window(shape, i, p.window)).collect();
            (0..x.len())
                .filter(|&i| {
                    let Some(w) = &windows[i] else { return true };
                    (0..x.len())
                        .filter(|&j| j != i && windows[j].as_ref() == Some(w))
                        .all(|j| (x.data()[i] - x.data()[j]).abs() >= margin)
                })
                .collect()
        }
        _ => (0..x.len()).collect(),
    }
}

/// Checks one layer in isolation through the scalar `L = <w, layer(x)>`,
/// over both parameter and input coordinates.
fn layer_check(layer: &Layer, x: &Tensor, seed: u64) -> f64 {
    let mut rng = emoaudionet::seed::rng(seed);
    let ctx = ForwardCtx::eval();
    let (y, cache) = layer.forward(x, &ctx, 0).unwrap();
    let w = random(y.len(), &mut rng);
    let (dx, dparams) = layer
        .backward(&cache, &Tensor::new(y.shape(), w.clone()).unwrap(), true)
        .unwrap();
    let dx = dx.unwrap();
    let score = |l: &Layer, input: &Tensor| -> f64 {
        let (y, _) = l.forward(input, &ctx, 0).unwrap();
        y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let inputs = smooth_inputs(layer, x);
    for _ in 0..100.min(inputs.len()) {
        let i = inputs[rng.random_range(0..inputs.len())];
        let f = |v: &[f64]| score(layer, &Tensor::new(x.shape(), v.to_vec()).unwrap());
        let num = central_difference(f, x.data(), i, h);
        worst = worst.max(relative_error(dx.data()[i], num));
    }
    for (p, analytic) in dparams.iter().enumerate() {
        let len = analytic.len();
        for _ in 0..50 {
            let i = rng.random_range(0..len);
            let mut probe = layer.clone();
            let orig = probe.parameters()[p].data()[i];
            probe.parameters_mut()[p].data_mut()[i] = orig + h;
            let plus = score(&probe, x);
            probe.parameters_mut()[p].data_mut()[i] = orig - h;
            let minus = score(&probe, x);
            worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
        }
    }
    worst
}

#[test]
fn c2_gradient_correctness() {
    let t = Instant::now();
    let mut net = EmoAudioNet::new(TaskKind::DepressionBinary, surrogate_arch(), 3).unwrap();
    // nudge biases off zero so every ReLU sees a generic input
    let mut rng = emoaudionet::seed::rng(17);
    for p in net.parameters_mut() {
        if p.name.ends_with(".bias") {
            p.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let spec = Tensor::new(&[32, 32, 3], random(32 * 32 * 3, &mut rng)).unwrap();
    let mfcc = Tensor::new(&[40, 1], random(40, &mut rng)).unwrap();
    let opts = GradCheckOptions {
        samples: 200,
        step: 1e-5,
        seed: 5,
        active_only: true,
    };
    let full = grad_check(&mut net, &(spec.clone(), mfcc.clone()), 1, opts).unwrap();

    // per layer, fed with the activations the model actually produces
    let ctx = ForwardCtx::eval();
    let (spec_out, _) = net.spectro_stream().forward(&spec, &ctx).unwrap();
    let (mfcc_out, _) = net.mfcc_stream().forward(&mfcc, &ctx).unwrap();
    let fused = concat(&[&mfcc_out, &spec_out]);
    let mut layer_worst: Vec<(String, f64)> = Vec::new();
    for (stack, input) in [(net.spectro_stream(), &spec), (net.mfcc_stream(), &mfcc), (net.head(), &fused)] {
        let mut x = input.clone();
        for (i, layer) in stack.layers().iter().enumerate() {
            let err = layer_check(layer, &x, i as u64);
            layer_worst.push((format!("{}.{i}", stack.name()), err));
            x = layer.forward(&x, &ctx, i).unwrap().0;
        }
    }
    let logits = net.forward_tensors(&spec, &mfcc, &ctx).unwrap().logits;
    let ce = softmax_cross_entropy(&logits, 1).unwrap();
    let mut ce_err: f64 = 0.0;
    for i in 0..logits.len() {
        let f = |v: &[f64]| softmax_cross_entropy(&Tensor::from_vec(v.to_vec()), 1).unwrap().loss;
        ce_err = ce_err.max(relative_error(ce.grad.data()[i], central_difference(f, logits.data(), i, 1e-5)));
    }
    layer_worst.push(("softmax_cross_entropy".into(), ce_err));

    let (worst_name, worst_layer) = layer_worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let ok = full.checked == 200 && full.max_relative_error <= 1e-4 && worst_layer <= 1e-6 && t.elapsed().as_secs() < 120;
    let detail = format!(
        "model {:.2e} over {} coords, worst layer {worst_name} {:.2e} across {} layers",
        full.max_relative_error,
        full.checked,
        worst_layer,
        layer_worst.len()
    );
    assert!(verdict(2, "gradients", ok, detail, t));
}

// -- 3 ----------------------------------------------------------------------

#[test]
fn c3_confusion_metrics() {
    let t = Instant::now();
    // rows are predictions, columns the actual class; class 1 is depression
    let s = summarize_confusion(&[vec![1441, 354], vec![283, 303]]).unwrap();
    let pct = |v: f64| v * 100.0;
    let checks = [
        (pct(s.accuracy), 73.25, 0.01),
        (pct(s.per_class[1].precision), 51.71, 0.01),
        (pct(s.per_class[1].recall), 46.12, 0.01),
        (pct(s.per_class[1].f1), 49.0, 0.5),
        (pct(s.per_class[0].f1), 82.0, 0.5),
    ];
    let ok = checks.iter().all(|(got, want, tol)| (got - want).abs() <= *tol);
    let detail = format!(
        "accuracy {:.4}%, precision {:.4}%, recall {:.4}%, F1 {:.2}% / {:.2}%",
        checks[0].0, checks[1].0, checks[2].0, checks[3].0, checks[4].0
    );
    assert!(verdict(3, "confusion metrics", ok, detail, t));
}

// -- 4 ----------------------------------------------------------------------

#[test]
fn c4_nrmse() {
    let t = Instant::now();
    let range = label_range(TaskKind::DepressionSeverity);
    let v = nrmse(4.14, range);
    let ok = range == 23.0 && (v - 0.18).abs() <= 0.005;
    assert!(verdict(4, "nRMSE", ok, format!("4.14 / {range} = {v:.5}"), t));
}

// -- 5 ----------------------------------------------------------------------

/// `|sum x[n] e^{-2 pi i k n / N}|^2` with the phase reduced mod N before
/// the trig call so large `k n` do not lose precision.
fn naive_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let phase = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                re += x * phase.cos();
                im -= x * phase.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn c5_dsp_oracles() {
    let t = Instant::now();
    let mut rng = emoaudionet::seed::rng(23);
    let mut fft_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=512);
        let frame = random(n, &mut rng);
        let fast = power_spectrum(&frame);
        let slow = naive_power(&frame, fft_length(n));
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            fft_err = fft_err.max((a - b).abs());
        }
    }
    let mut dct_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=512);
        let x = random(n, &mut rng);
        for (a, b) in dct3(&dct2(&x)).iter().zip(&x) {
            dct_err = dct_err.max((a - b).abs());
        }
    }
    let mut resize_exact = true;
    for &(c, rows, cols) in &[(0.3, 257, 256), (7.25, 5, 9), (-1.1, 224, 224), (0.1, 1, 1), (1e-7, 300, 17)] {
        let out = resize_bilinear(&vec![c; rows * cols], rows, cols, 224, 224).unwrap();
        resize_exact &= out.len() == 224 * 224 && out.iter().all(|&v| v == c);
    }
    let ok = fft_err <= 1e-9 && dct_err <= 1e-9 && resize_exact && t.elapsed().as_secs() < 60;
    let detail = format!("FFT vs DFT {fft_err:.2e}, DCT round trip {dct_err:.2e}, constant resize exact {resize_exact}");
    assert!(verdict(5, "DSP oracles", ok, detail, t));
}

// -- 6 ----------------------------------------------------------------------

/// First epoch whose monitored accuracy reaches `target`.
fn first_reaching(history: &[emoaudionet::train::EpochRecord], target: f64) -> Option<usize> {
    history.iter().find(|r| r.dev_accuracy >= target).map(|r| r.epoch)
}

#[test]
fn c6_overfit_synthetic_corpus() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_corpus(&SyntheticSpec::default(), dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 40);
    let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let entries: Vec<_> = manifest.entries.iter().collect();
    let examples = load_examples(&manifest, &entries, TaskKind::DepressionBinary, &fx, None).unwrap();
    // Every TrainConfig default kept, early stopping included. The training
    // set doubles as the monitored split, so `dev_accuracy` is training accuracy.
    let config = TrainConfig {
        width: 8,
        max_epochs: 300,
        ..TrainConfig::default()
    };
    let out = train_model(&examples, &examples, TaskKind::DepressionBinary, &config).unwrap();
    let best = out.history.iter().map(|r| r.dev_accuracy).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let ok = best >= 0.95 && elapsed.as_secs() < 600;
    let detail = format!(
        "best training accuracy {best:.3}, run ended after epoch {} of {}",
        out.history.len(),
        config.max_epochs
    );
    let passed = verdict(6, "overfit", ok, detail, t);

    // Second route, reported only: the same run with early stopping out of
    // reach, to show what the 300-epoch budget alone achieves.
    let t = Instant::now();
    let open = TrainConfig {
        early_stop_patience: 300,
        ..config
    };
    let run = train_model(&examples, &examples, TaskKind::DepressionBinary, &open).unwrap();
    println!(
        "criterion 6 [overfit, no early stopping]: info (95% first at epoch {:?}, 100% first at epoch {:?}, final loss {:.4}, final lr {:.1e}; {:.2?})",
        first_reaching(&run.history, 0.95),
        first_reaching(&run.history, 1.0),
        run.history.last().unwrap().train_loss,
        run.history.last().unwrap().lr,
        t.elapsed()
    );
    assert!(passed, "overfit criterion not met under TrainConfig defaults");
}

// -- 7 ----------------------------------------------------------------------

fn sine(freq: f64, rate: u32, seconds: f64) -> AudioClip {
    let n = (rate as f64 * seconds) as usize;
    let s = (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect();
    AudioClip::new("sine", s, rate).unwrap()
}

fn peak_hz(clip: &AudioClip) -> f64 {
    let p = power_spectrum(clip.samples());
    peak_frequency(&p, fft_length(clip.len()), clip.sample_rate())
}

#[test]
fn c7_augmentation_contracts() {
    let t = Instant::now();
    let clip = sine(440.0, 16_000, 1.0);
    let identity = add_noise(&clip, 0.0, 9).unwrap() == clip && pitch_shift(&clip, 0.0).unwrap() == clip;
    let mut peaks = Vec::new();
    let mut within = true;
    for s in [0.5, 2.0, 5.0] {
        let expected = 440.0 * 2f64.powf(-s / 12.0);
        let got = peak_hz(&pitch_shift(&clip, s).unwrap());
        within &= ((got - expected) / expected).abs() <= 0.02;
        peaks.push(format!("s={s}: {got:.2} vs {expected:.2}"));
    }
    let clips: Vec<AudioClip> = (0..3).map(|i| sine(200.0 + 50.0 * i as f64, 16_000, 0.25).with_id(format!("c{i}"))).collect();
    let grown = augment_corpus(&clips, &AugmentSpec::default()).unwrap().len();
    let ok = identity && within && grown == 7 * clips.len() && t.elapsed().as_secs() < 60;
    let detail = format!("identities {identity}, {}, corpus {} -> {grown}", peaks.join(", "), clips.len());
    assert!(verdict(7, "augmentation", ok, detail, t));
}

// -- 8 ----------------------------------------------------------------------

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["emoaudionet"];
    full.extend_from_slice(args);
    emoaudionet::cli::run(full)
}

fn pipeline(root: &Path) -> (Vec<u8>, Vec<u8>, String) {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let corpus = root.join("corpus");
    let cache = root.join("cache");
    let manifest = corpus.join("manifest.csv");
    let config = root.join("train.json");
    fs::write(&config, r#"{"width": 8, "max_epochs": 5, "seed": 4}"#).unwrap();
    let ckpt = root.join("model.eanc");
    let report = root.join("report.json");
    assert_eq!(cli(&["synth", "--per-class", "6", "--duration", "1.0", "--seed", "4", "--out", &s(&corpus)]), 0);
    for kind in ["mfcc", "spectro"] {
        let args = ["extract", "--corpus", &s(&manifest), "--kind", kind, "--cache-dir", &s(&cache)];
        assert_eq!(cli(&args), 0);
    }
    let args = [
        "train", "--task", "dep-bin", "--corpus", &s(&manifest), "--config", &s(&config), "--out", &s(&ckpt),
        "--cache-dir", &s(&cache),
    ];
    assert_eq!(cli(&args), 0);
    let args = [
        "eval", "--ckpt", &s(&ckpt), "--corpus", &s(&manifest), "--report", &s(&report), "--split", "all",
        "--cache-dir", &s(&cache),
    ];
    assert_eq!(cli(&args), 0);
    (
        fs::read(&ckpt).unwrap(),
        fs::read(emoaudionet::checkpoint::sidecar_path(&ckpt)).unwrap(),
        fs::read_to_string(&report).unwrap(),
    )
}

#[test]
fn c8_pipeline_determinism() {
    let t = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let same_ckpt = first.0 == second.0 && first.1 == second.1;
    let same_report = first.2 == second.2;
    let ok = same_ckpt && same_report && t.elapsed().as_secs() < 300;
    let detail = format!("checkpoint {} bytes identical {same_ckpt}, report identical {same_report}", first.0.len());
    assert!(verdict(8, "determinism", ok, detail, t));
}

// -- 9 ----------------------------------------------------------------------

#[test]
fn c9_joint_update() {
    let t = Instant::now();
    let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let clip = sine(300.0, 16_000, 1.0).with_id("one");
    let example = LabeledExample {
        clip_id: "one".into(),
        features: fx.extract(&clip).unwrap(),
        label: 1,
        raw_label: None,
    };
    let mut net = build_model(TaskKind::DepressionBinary, 8, 2).unwrap();
    let before: Vec<Vec<f64>> = net.parameters().iter().map(|p| p.data().to_vec()).collect();
    train_step(&mut net, &[example], 1e-5, 0).unwrap();
    let groups = net.parameter_groups();
    let mut delta = [0.0f64; 3];
    for ((p, old), g) in net.parameters().iter().zip(&before).zip(&groups) {
        let d = p.data().iter().zip(old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let slot = match g {
            ParamGroup::Spectro => 0,
            ParamGroup::Mfcc => 1,
            ParamGroup::Head => 2,
        };
        delta[slot] = delta[slot].max(d);
    }
    let ok = delta.iter().all(|&d| d > 0.0) && t.elapsed().as_secs() < 10;
    let detail = format!("max delta spectro {:.2e}, mfcc {:.2e}, head {:.2e}", delta[0], delta[1], delta[2]);
    assert!(verdict(9, "joint update", ok, detail, t));
}
