//! Acceptance gate. Each test prints one PASS/FAIL line to stderr (bypassing
//! output capture) and then asserts. Tests hold a shared lock so the runtime
//! budgets are measured without competing threads.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffews::attention::{fusion_attn, qkv_fusion_attn, self_attn, AttentionParams, FeatureMap};
use diffews::codec::{
    mask_to_rgb, rgb_to_mask, threshold, BinaryMask, Codec, ImageTensor, LatentTensor, ScoreMap, SupervisionForm,
    ThresholdConfig, ThresholdMode,
};
use diffews::data::{gen_synthetic, sample_episodes};
use diffews::generation::{
    build_train_sample, encode_episode, infer, GenerationConfig, InferOptions, LatentPredictor, Process,
};
use diffews::runner::gradcheck::grad_check;
use diffews::runner::train::{evaluate, evaluate_episodes, fold_spec, load_dataset, train, training_specs};
use diffews::runner::{Checkpoint, RunConfig};
use diffews::schedule::{add_noise, eps_from_prediction, make_schedule, NoiseSample, ScheduleKind};
use diffews::tensor::Matrix;
use diffews::unet::{adapt_input_layer, conv2d, slotted_conv2d, BranchInput, ForwardOptions, PreparedSupport, UNet};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_latent(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> LatentTensor {
    LatentTensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn c01_schedule_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let kinds = [ScheduleKind::ScaledLinear, ScheduleKind::Linear, ScheduleKind::Constant];
    let (mut ab_err, mut rt_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let steps = rng.random_range(1..=1000);
        let b0 = rng.random_range(1e-5..0.05);
        let b1 = rng.random_range(b0..0.5);
        let kind = kinds[rng.random_range(0..3)];
        let sched = make_schedule(steps, b0, b1, kind).unwrap();

        let mut prod = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = match kind {
                ScheduleKind::Constant => b0,
                ScheduleKind::Linear => b0 * (1.0 - frac) + b1 * frac,
                ScheduleKind::ScaledLinear => (b0.sqrt() * (1.0 - frac) + b1.sqrt() * frac).powi(2),
            };
            prod *= 1.0 - beta;
            ab_err = ab_err.max((sched.alpha_bars[i] - prod).abs());
        }

        let z = random_latent(4, 4, 3, &mut rng);
        let eps = NoiseSample::like(&z, rng.random());
        let t = rng.random_range(0..steps);
        let zt = add_noise(&z, &eps, t, &sched).unwrap();
        let back = eps_from_prediction(&zt, &z, t, &sched).unwrap();
        for (a, b) in back.data.iter().zip(&eps.eps.data) {
            rt_err = rt_err.max((a - b).abs());
        }
    }
    let el = start.elapsed();
    let pass = ab_err < 1e-12 && rt_err < 1e-6 && el < Duration::from_secs(5);
    report(1, "schedule oracle", pass, &format!("alpha_bar err {ab_err:.2e}, round trip err {rt_err:.2e}, {}", secs(el)));
}

#[test]
fn c02_attention_reductions() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (width, heads) = (16, 4);
    let p = AttentionParams::random(width, heads, 7);
    let fmap = |rng: &mut ChaCha8Rng, h: usize, w: usize| FeatureMap::new(Matrix::randn(h * w, width, 1.0, rng), h, w).unwrap();
    let (mut empty, mut perm, mut gated) = (0.0f64, 0.0f64, 0.0f64);
    let mut qkv_exact = true;
    for _ in 0..10 {
        let q = fmap(&mut rng, 4, 4);
        let a = fmap(&mut rng, 4, 4);
        let b = fmap(&mut rng, 2, 4);
        let plain = self_attn(&q, &p).unwrap();
        empty = empty.max(fusion_attn(&q, &[], &p, None).unwrap().tokens.max_abs_diff(&plain.tokens));

        let ab = fusion_attn(&q, &[a.clone(), b.clone()], &p, None).unwrap();
        let ba = fusion_attn(&q, &[b.clone(), a.clone()], &p, None).unwrap();
        perm = perm.max(ab.tokens.max_abs_diff(&ba.tokens));

        let off = vec![false; a.len() + b.len()];
        let g = fusion_attn(&q, &[a.clone(), b.clone()], &p, Some(&off)).unwrap();
        gated = gated.max(g.tokens.max_abs_diff(&plain.tokens));

        let (rows, _) = qkv_fusion_attn(&q, &a, &p).unwrap();
        let kv = fusion_attn(&q, &[a], &p, None).unwrap();
        qkv_exact &= rows.tokens == kv.tokens;
    }
    let el = start.elapsed();
    let pass = empty < 1e-6 && perm < 1e-6 && gated < 1e-6 && qkv_exact && el < Duration::from_secs(10);
    report(
        2,
        "attention reductions",
        pass,
        &format!("empty {empty:.1e}, permutation {perm:.1e}, gated {gated:.1e}, qkv rows exact {qkv_exact}, {}", secs(el)),
    );
}

#[test]
fn c03_input_layer_adaptation() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = true;
    for _ in 0..5 {
        let z = random_latent(8, 8, 48, &mut rng);
        let kernel = Matrix::randn(9 * 48, 32, 0.05, &mut rng);
        let bias = Matrix::randn(1, 32, 0.1, &mut rng);
        let original = conv2d(&z, &kernel, Some(&bias)).unwrap();
        let doubled = z.concat_channels(&z).unwrap();
        let adapted = slotted_conv2d(&doubled, &adapt_input_layer(&kernel, 2), Some(&bias), 2).unwrap();
        exact &= adapted.data == original.data;
    }
    report(3, "input layer adaptation", exact, &format!("concat(z,z) through adapted layer bit-exact: {exact}"));
}

#[test]
fn c04_codec_closed_loop() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codec = Codec::new(4);
    let thr = ThresholdConfig::default();
    let mut failures = BTreeMap::new();
    for form in SupervisionForm::ALL {
        let mut bad = 0;
        for _ in 0..100 {
            let (h, w) = (16, 16);
            let image = ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.1..=1.0)).collect());
            let p = rng.random_range(0.0..1.0);
            let mask = BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect());
            let rgb = mask_to_rgb(&mask, &image, form).unwrap();
            let decoded = codec.decode(&codec.encode(&rgb).unwrap()).unwrap();
            if rgb_to_mask(&decoded, form, &thr, Some(&image)).unwrap() != mask {
                bad += 1;
            }
        }
        failures.insert(form.as_str(), bad);
    }
    let pass = failures.values().all(|&b| b == 0);
    report(4, "codec closed loop", pass, &format!("mismatches per form {failures:?}"));
}

#[test]
fn c05_thresholding() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let default = ThresholdConfig::default();
    let default_ok = default.mode == ThresholdMode::Relative && default.tau == 0.25;
    let mut mismatches = 0;
    for k in 0..1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let data: Vec<f64> = if k % 10 == 0 { vec![0.0; h * w] } else { (0..h * w).map(|_| rng.random_range(0.0..2.0)).collect() };
        let scores = ScoreMap { h, w, data: data.clone() };
        let mode = if rng.random_bool(0.5) { ThresholdMode::Relative } else { ThresholdMode::Absolute };
        let tau = if k % 7 == 0 { 0.25 } else { rng.random_range(0.01..0.99) };
        let got = threshold(&scores, &ThresholdConfig::new(mode, tau).unwrap());
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &s) in data.iter().enumerate() {
            let want = match mode {
                ThresholdMode::Absolute => s > tau,
                ThresholdMode::Relative => max > 0.0 && s > tau * max,
            };
            if got.data[i] != want {
                mismatches += 1;
            }
        }
    }
    let pass = default_ok && mismatches == 0;
    report(5, "thresholding", pass, &format!("{mismatches} pixel mismatches over 1000 maps, default relative 0.25: {default_ok}"));
}

#[test]
fn c06_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let cfg = RunConfig::default();
    let ds = load_dataset(&cfg).unwrap();
    let model = UNet::new(cfg.unet(), 6).unwrap();
    let spec = sample_episodes(&ds, &[0, 1, 2], 1, 1, 6).unwrap().remove(0);
    let codec = Codec::new(4);
    let enc = encode_episode(&codec, &ds.episode(&spec), &model.cfg, cfg.supervision_form).unwrap();
    let gen = cfg.generation();
    let sample = build_train_sample(&enc, &gen, &gen.schedule().unwrap(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let check = grad_check(&model, &sample, 48, 6, false).unwrap();
    let err = check.max_rel_error();
    let el = start.elapsed();
    let pass = check.entries.len() >= 32 && err < 1e-4 && el < Duration::from_secs(120);
    report(6, "gradient check", pass, &format!("{} parameters, max relative error {err:.2e}, {}", check.entries.len(), secs(el)));
}

struct Oracle(LatentTensor);

impl LatentPredictor for Oracle {
    fn predict(&self, _: &BranchInput, _: &[PreparedSupport], _: &ForwardOptions) -> diffews::Result<LatentTensor> {
        Ok(self.0.clone())
    }
}

#[test]
fn c07_perfect_predictor_pipelines() {
    let _g = serial();
    let ds = gen_synthetic(6, 6, (32, 32), 7).unwrap();
    let specs = sample_episodes(&ds, &[0, 1, 2, 3, 4, 5], 1, 20, 7).unwrap();
    let codec = Codec::new(4);
    let unet = diffews::unet::UNetConfig::toy(32);
    let runs = [(Process::Oi2m, 1), (Process::Mn2m, 1), (Process::Mn2m, 10), (Process::Mi2m, 1), (Process::Mi2m, 10)];
    let mut bad = Vec::new();
    for form in SupervisionForm::ALL {
        let opts = InferOptions { form, threshold: ThresholdConfig::default(), kv_sampling: false };
        for (process, steps) in runs {
            let gen = GenerationConfig { process, steps, ..Default::default() };
            let mut wrong = 0;
            for (k, spec) in specs.iter().enumerate() {
                let enc = encode_episode(&codec, &ds.episode(spec), &unet, form).unwrap();
                let out = infer(&Oracle(enc.z_mq.clone()), &enc, &gen, &codec, &opts, k as u64).unwrap();
                wrong += usize::from(out.mask != enc.query_mask);
            }
            if wrong > 0 {
                bad.push(format!("{}/{}/T{steps}: {wrong}", form.as_str(), process.as_str()));
            }
        }
    }
    report(7, "perfect predictor pipelines", bad.is_empty(), &format!("20 episodes x 4 forms x 5 process settings, failures {bad:?}"));
}

#[test]
fn c08_overfit() {
    let _g = serial();
    let start = Instant::now();
    let cfg = RunConfig {
        train_episodes: 8,
        eval_every: 100,
        early_stop_miou: 0.90,
        supervision_form: SupervisionForm::WhiteOnBlack,
        process: Process::Oi2m,
        ..Default::default()
    };
    let ds = load_dataset(&cfg).unwrap();
    let report_ = train(&cfg, &ds, None).unwrap();
    let (iters, miou) = report_.evals.last().copied().unwrap_or((0, 0.0));
    let model = report_.checkpoint.model().unwrap();
    let again = evaluate_episodes(&model, &cfg, &ds, &training_specs(&cfg, &ds).unwrap(), 1).unwrap().acc.miou().unwrap();
    let el = start.elapsed();
    let pass = miou >= 0.90 && iters <= 2000 && again == miou && el < Duration::from_secs(1800);
    report(
        8,
        "overfit",
        pass,
        &format!("seed {}, training mIoU {miou:.4} after {iters} iterations, re-evaluated {again:.4}, {}", cfg.seed, secs(el)),
    );
}

#[test]
fn c09_process_ordering() {
    let _g = serial();
    let start = Instant::now();
    let mut pairs = Vec::new();
    for seed in 0..3 {
        let mut scores = Vec::new();
        for process in [Process::Oi2m, Process::Mn2m] {
            // matched budgets: both processes train at the toy defaults
            let cfg = RunConfig { seed, process, eval_episodes: 24, ..Default::default() };
            let ds = load_dataset(&cfg).unwrap();
            let model = train(&cfg, &ds, None).unwrap().checkpoint.model().unwrap();
            scores.push(evaluate(&model, &cfg, &ds, &fold_spec(&cfg).unwrap(), 1).unwrap().acc.miou().unwrap());
        }
        pairs.push((scores[0], scores[1]));
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let oi = median(pairs.iter().map(|p| p.0).collect());
    let mn = median(pairs.iter().map(|p| p.1).collect());
    let per_seed: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    report(
        9,
        "process ordering",
        oi >= mn,
        &format!("held-out median mIoU one-step {oi:.4} vs noise-start {mn:.4} (per seed {per_seed:?}), {}", secs(start.elapsed())),
    );
}

#[test]
fn c10_n_shot_plumbing() {
    let _g = serial();
    let base = RunConfig { eval_episodes: 12, ..Default::default() };
    let ds = load_dataset(&base).unwrap();
    let model = UNet::new(base.unet(), 10).unwrap();
    let fold = fold_spec(&base).unwrap();
    let mut problems = Vec::new();
    let mut by_shot = BTreeMap::new();
    for n in [1, 3] {
        for kv in [false, true] {
            let cfg = RunConfig { infer_kv_sampling: kv, ..base.clone() };
            let ev = evaluate(&model, &cfg, &ds, &fold, n).unwrap();
            let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for o in &ev.outcomes {
                let gt = ds.episode(&o.spec).query_mask;
                let (mut i, mut u) = (0, 0);
                for (&p, &g) in o.prediction.data.iter().zip(&gt.data) {
                    i += usize::from(p && g);
                    u += usize::from(p || g);
                }
                if (i, u) != (o.intersection, o.union) {
                    problems.push(format!("n={n} kv={kv}: episode counts differ"));
                }
                let e = per_class.entry(o.spec.class_id).or_default();
                e.0 += i;
                e.1 += u;
            }
            let brute = per_class.values().map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 }).sum::<f64>()
                / per_class.len() as f64;
            let miou = ev.acc.miou().unwrap();
            if (brute - miou).abs() > 1e-12 {
                problems.push(format!("n={n} kv={kv}: mIoU {miou} vs oracle {brute}"));
            }
            by_shot.insert((n, kv), ev);
        }
    }
    let identical = by_shot[&(1, false)] == by_shot[&(1, true)];
    if !identical {
        problems.push("one-shot results differ with key/value sampling".into());
    }
    let summary: Vec<String> =
        by_shot.iter().map(|((n, kv), ev)| format!("n={n} kv={kv}: {:.4}", ev.acc.miou().unwrap())).collect();
    report(10, "n-shot plumbing", problems.is_empty(), &format!("{summary:?}, one-shot identical {identical}, problems {problems:?}"));
}

#[test]
fn c11_determinism_and_persistence() {
    let _g = serial();
    let exe = env!("CARGO_BIN_EXE_diffews");
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(exe)
            .args(["train", "--seed", "11", "--out"])
            .arg(&out)
            .args(["--set", "iterations=12", "--set", "eval_episodes=6", "--set", "checkpoint_every=6"])
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    let metrics_same = read(a.join("metrics.csv")) == read(b.join("metrics.csv"));
    let ckpt_same = read(a.join("final.ckpt")) == read(b.join("final.ckpt"));

    let ck = Checkpoint::load(&a.join("final.ckpt")).unwrap();
    let path = tmp.path().join("copy.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let round_trip = back == ck && read(path) == read(a.join("final.ckpt"));

    let ds = load_dataset(&ck.config).unwrap();
    let spec = sample_episodes(&ds, &[0], 1, 1, 0).unwrap().remove(0);
    let codec = Codec::new(4);
    let (m1, m2) = (ck.model().unwrap(), back.model().unwrap());
    let enc = encode_episode(&codec, &ds.episode(&spec), &m1.cfg, ck.config.supervision_form).unwrap();
    let gen = ck.config.generation();
    let s = build_train_sample(&enc, &gen, &gen.schedule().unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let opts = ForwardOptions::default();
    let forward_same = m1.dual_forward(&s.query, &s.supports, &opts).unwrap().data
        == m2.dual_forward(&s.query, &s.supports, &opts).unwrap().data;

    let pass = metrics_same && ckpt_same && round_trip && forward_same;
    report(
        11,
        "determinism and persistence",
        pass,
        &format!("metrics.csv identical {metrics_same}, checkpoint identical {ckpt_same}, round trip {round_trip}, forward {forward_same}"),
    );
}
