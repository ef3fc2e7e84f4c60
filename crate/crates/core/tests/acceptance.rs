//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jcrnet::checkpoint::Checkpoint;
use jcrnet::data::Dataset;
use jcrnet::gradsuite;
use jcrnet::image::ImageBuffer;
use jcrnet::kernels::ConvGeom;
use jcrnet::losses::{charbonnier, edge_loss, total_loss, LossConfig};
use jcrnet::metrics::{gaussian_taps, psnr, ssim, Peak};
use jcrnet::train::{cosine_lr, Schedule, TrainConfig, TraceEntry, Trainer};
use jcrnet::{Ctx, Jcrnet, ModelConfig, ParamStore, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/overfit")
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 convolution oracle", convolution_oracle),
        ("3 loss analytics", loss_analytics),
        ("4 schedule endpoints", schedule_endpoints),
        ("5 overfit smoke test", overfit_smoke),
        ("6 back-projection zero residual", zero_residual),
        ("7 metric oracles", metric_oracles),
        ("8 determinism and persistence", determinism_and_persistence),
        ("9 range and shape contracts", range_and_shape),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "acceptance {name:<34} {} ({:.1}s) {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = gradsuite::run_suite(None, 1).expect("suite runs");
    let elapsed = start.elapsed();
    let failing: Vec<&str> = reports.iter().filter(|r| !r.report.pass).map(|r| r.module).collect();
    let worst = reports.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let plain = reports.iter().map(|r| r.report.max_rel_err_plain).fold(0.0, f64::max);
    let checked: usize = reports.iter().map(|r| r.report.checked).sum();
    let skipped: usize = reports.iter().map(|r| r.report.skipped_kinks).sum();
    let covered = reports.len() == gradsuite::MODULES.len();
    outcome(
        failing.is_empty() && covered && elapsed < Duration::from_secs(300),
        format!(
            "{} cases, worst rel err {worst:.2e} (plain central difference {plain:.2e}), {checked} probes, {skipped} kink skips, {:.1}s; failing {failing:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn convolution_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut shapes, mut fwd_err, mut adj_err) = (0, 0.0f64, 0.0f64);
    while shapes < 250 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let xs = [rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(k..=9), rng.gen_range(k..=9)];
        let ws = [rng.gen_range(1..=4), xs[1], k, k];
        if ConvGeom::new(xs, ws, stride, pad).is_err() {
            continue;
        }
        shapes += 1;
        let x = uniform(&mut rng, xs.iter().product());
        let w = uniform(&mut rng, ws.iter().product());
        let b = uniform(&mut rng, ws[0]);
        let (expected, [oh, ow]) = common::conv_oracle(&x, xs, &w, ws, &b, stride, pad);

        let tape = Tape::<f64>::new();
        let xv = tape.leaf(Tensor::new(xs, x.clone()).unwrap().with_requires_grad(true)).unwrap();
        let wv = tape.leaf(Tensor::new(ws, w.clone()).unwrap().with_requires_grad(true)).unwrap();
        let bv = tape.constant(Tensor::new([ws[0]], b.clone()).unwrap()).unwrap();
        let out = xv.conv2d(wv, Some(bv), stride, pad).unwrap();
        assert_eq!(out.shape(), vec![xs[0], ws[0], oh, ow]);
        for (a, e) in out.value().data().iter().zip(&expected) {
            fwd_err = fwd_err.max((a - e).abs());
        }

        // <L x, y> = <x, L^T y> for the bias-free map, in both x and w
        let y = uniform(&mut rng, expected.len());
        let lin = xv.conv2d(wv, None, stride, pad).unwrap();
        let yv = tape.constant(Tensor::new(lin.shape(), y.clone()).unwrap()).unwrap();
        let grads = lin.mul(yv).unwrap().sum().unwrap().backward().unwrap();
        let lx_y = dot(lin.value().data(), &y);
        for (input, g) in [(&x, grads.get(xv).unwrap()), (&w, grads.get(wv).unwrap())] {
            let rhs = dot(input, g);
            adj_err = adj_err.max((lx_y - rhs).abs() / lx_y.abs().max(1.0));
        }
    }
    outcome(
        fwd_err <= 1e-6 && adj_err <= 1e-5,
        format!("{shapes} shapes, forward max abs err {fwd_err:.2e}, adjoint max rel err {adj_err:.2e}"),
    )
}

fn loss_analytics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [2, 3, 12, 12];
    let n = shape.iter().product();
    let x: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gt: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::new(shape, x.clone()).unwrap()).unwrap();
    let gv = tape.constant(Tensor::new(shape, gt).unwrap()).unwrap();

    let same = charbonnier(xv, xv, 1e-3).unwrap().value().item();
    let shifted = tape
        .constant(Tensor::new(shape, x.iter().map(|v| v + 0.37).collect()).unwrap())
        .unwrap();
    let drift = (edge_loss(shifted, gv, 1e-3).unwrap().value().item() as f64
        - edge_loss(xv, gv, 1e-3).unwrap().value().item() as f64)
        .abs();
    let cfg = LossConfig::default();
    let total = total_loss(xv, gv, &cfg).unwrap().value().item() as f64;
    let parts = charbonnier(xv, gv, 1e-3).unwrap().value().item() as f64
        + 0.05 * edge_loss(xv, gv, 1e-3).unwrap().value().item() as f64;
    let sum_err = (total - parts).abs();
    outcome(
        same == 1e-3 && drift <= 1e-6 && sum_err <= 1e-7 && cfg.lambda_edge == 0.05,
        format!("charbonnier(x,x)={same:e}, edge offset drift {drift:.2e}, weighted-sum err {sum_err:.2e}"),
    )
}

fn schedule_endpoints() -> Outcome {
    let sched = Schedule {
        total_steps: 1000,
        ..Schedule::default()
    };
    let first = cosine_lr(0, &sched);
    let last = cosine_lr(1000, &sched);
    let lrs: Vec<f64> = (0..=1000).map(|t| cosine_lr(t, &sched)).collect();
    let monotone = lrs.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        first == 2e-4 && last == 1e-6 && monotone,
        format!("lr(0)={first:e}, lr(T)={last:e}, monotone over T=1000: {monotone}"),
    )
}

fn overfit_smoke() -> Outcome {
    let (data, pairing) = Dataset::load(fixture_dir()).expect("bundled fixture");
    assert!(pairing.is_complete());
    let model = Jcrnet::new(ModelConfig::desk()).unwrap();
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let mut trainer = Trainer::new(&model, model.init_params(cfg.seed), cfg).unwrap();
    let trace = trainer.run(&data, |_, _| Ok(())).unwrap();
    let elapsed = start.elapsed();
    let final_loss = trace.last().unwrap().loss;
    let tail = trace[trace.len() - 50..].iter().map(|e| e.loss).sum::<f64>() / 50.0;
    let psnrs: Vec<f64> = data
        .pairs
        .iter()
        .map(|p| {
            let y = model.enhance(&trainer.params, &p.low.to_tensor()).unwrap();
            psnr(&ImageBuffer::from_tensor(&y, 0).unwrap(), &p.high, Peak::Unit).unwrap()
        })
        .collect();
    let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let min = psnrs.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        data.len() == 4
            && trace.len() == 2000
            && mean >= 28.0
            && final_loss < 0.03
            && elapsed < Duration::from_secs(600),
        format!(
            "{} pairs, {} steps in {:.0}s, training-set PSNR mean {mean:.2} dB (min {min:.2}), final loss {final_loss:.4} (last-50 mean {tail:.4})",
            data.len(),
            trace.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn zero_residual() -> Outcome {
    let width = 8;
    let model = Jcrnet::new(ModelConfig::tiny()).unwrap();
    let bp = &model.ias.residual;
    let mut params: ParamStore<f32> = model.init_params(6);
    // center-tap projection onto the first `half` channels and its embedding back;
    // slope-1 PReLUs and zero offsets make D(L1(x)) = x on that subspace
    let half = width / 2;
    let tap = |cout: usize, cin: usize| {
        let mut w = vec![0.0f32; cout * cin * 9];
        for c in 0..cout.min(cin) {
            w[(c * cin + c) * 9 + 4] = 1.0;
        }
        w
    };
    for block in [&bp.l1, &bp.d] {
        params.set(&block.encode.conv.weight, tap(half, width)).unwrap();
        params.fill(&block.encode.conv.bias, 0.0).unwrap();
        params.fill(&block.encode.act.slope, 1.0).unwrap();
        params.fill(&block.offset.conv.weight, 0.0).unwrap();
        params.fill(&block.offset.conv.bias, 0.0).unwrap();
        params.set(&block.decode.weight, tap(width, half)).unwrap();
        params.fill(&block.decode.bias, 0.0).unwrap();
    }
    params.fill(&bp.lambda, 1.0).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [2, width, 8, 8];
    let xf: Vec<f32> = (0..shape.iter().product::<usize>())
        .map(|i| {
            let channel = (i / 64) % width;
            if channel < half {
                rng.gen_range(-2.0..2.0)
            } else {
                0.0
            }
        })
        .collect();
    let residual_of = |params: &ParamStore<f32>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params).unwrap();
        let x = tape.constant(Tensor::new(shape, xf.clone()).unwrap()).unwrap();
        let t = bp.trace(&ctx, x).unwrap();
        let map = t.residual_map.value();
        (map.data().to_vec(), map.shape().to_vec())
    };
    let (map, map_shape) = residual_of(&params);
    let exact_zero = map.iter().all(|&v| v == 0.0);
    params.fill(&bp.lambda, 0.5).unwrap();
    let (off, _) = residual_of(&params);
    let sensitive = off.iter().any(|&v| v != 0.0);
    outcome(
        exact_zero && sensitive && map_shape == shape,
        format!(
            "residual map {map_shape:?} exactly zero: {exact_zero}; nonzero at lambda 0.5: {sensitive}"
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = common::random_image(&mut rng, 24, 20);
    let self_ssim = ssim(&x, &x).unwrap();

    // every sample differs by exactly 0.1: MSE 0.01
    let base = ImageBuffer::new(16, 16, vec![0.25; 16 * 16 * 3]).unwrap();
    let off = ImageBuffer::new(16, 16, vec![0.35; 16 * 16 * 3]).unwrap();
    let db = psnr(&off, &base, Peak::Unit).unwrap();

    let taps_ok = (gaussian_taps().iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let mut worst = 0.0f64;
    for k in 0..10 {
        let (h, w) = (rng.gen_range(11..=28), rng.gen_range(11..=28));
        let p = common::random_image(&mut rng, h, w);
        // correlated partner so SSIM spans a useful range
        let mix = k as f32 / 10.0;
        let noise = common::random_image(&mut rng, h, w);
        let q_px: Vec<f32> = p
            .pixels()
            .iter()
            .zip(noise.pixels())
            .map(|(a, n)| (1.0 - mix) * a + mix * n)
            .collect();
        let q = ImageBuffer::new(w, h, q_px).unwrap();
        worst = worst.max((ssim(&p, &q).unwrap() - common::ssim_reference(&p, &q)).abs());
    }
    outcome(
        (self_ssim - 1.0).abs() <= 1e-9 && (db - 20.0).abs() <= 1e-6 && worst <= 1e-6 && taps_ok,
        format!(
            "ssim(x,x)={self_ssim:.12}, psnr at MSE 0.01 = {db:.9} dB, ssim vs reference max diff {worst:.2e} over 10 pairs"
        ),
    )
}

fn short_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    cfg.schedule.total_steps = steps;
    cfg.patch.patch = 32;
    cfg
}

fn determinism_and_persistence() -> Outcome {
    let (data, _) = Dataset::load(fixture_dir()).expect("bundled fixture");
    let model = Jcrnet::new(ModelConfig::desk()).unwrap();
    let cfg = short_config(24);
    let run = || {
        let mut t = Trainer::new(&model, model.init_params(cfg.seed), cfg).unwrap();
        let trace = t.run(&data, |_, _| Ok(())).unwrap();
        (trace, t.params)
    };
    let (a, params_a) = run();
    let (b, _) = run();
    let bits = |t: &[TraceEntry]| t.iter().map(|e| (e.step, e.lr.to_bits(), e.loss.to_bits())).collect::<Vec<_>>();
    let identical = bits(&a) == bits(&b);

    let mut first = Trainer::new(&model, model.init_params(cfg.seed), cfg).unwrap();
    let mut resumed_trace = Vec::new();
    for _ in 0..10 {
        resumed_trace.push(first.step(&data).unwrap());
    }
    let ck = Checkpoint::new(&model.cfg, first.params.clone(), Some(first.state.clone()));
    let bytes = ck.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let byte_stable = loaded.to_bytes().unwrap() == bytes;
    let state = loaded.require_state().unwrap().clone();
    let mut second = Trainer::resume(&model, loaded.params, state, cfg).unwrap();
    resumed_trace.extend(second.run(&data, |_, _| Ok(())).unwrap());
    let resume_matches = bits(&resumed_trace) == bits(&a);
    let params_match = second
        .params
        .iter()
        .zip(params_a.iter())
        .all(|((_, p), (_, q))| p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    outcome(
        identical && resume_matches && params_match && byte_stable,
        format!(
            "repeat trace identical: {identical}; resume at step 10 reproduces trace: {resume_matches}, params: {params_match}; checkpoint byte-stable: {byte_stable} ({} bytes)",
            bytes.len()
        ),
    )
}

fn range_and_shape() -> Outcome {
    let model = Jcrnet::new(ModelConfig::desk()).unwrap();
    let mut params = model.init_params(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // push the output heads off their flat start so the clamp is actually exercised
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let multiple = model.cfg.size_multiple();
    let (mut in_range, mut shaped, mut clamped) = (0, 0, 0usize);
    for k in 0..100 {
        let n = rng.gen_range(1..=2);
        let (h, w) = (multiple * rng.gen_range(1..=6), multiple * rng.gen_range(1..=6));
        let data: Vec<f32> = (0..n * 3 * h * w)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..1.0),
            })
            .collect();
        let x = Tensor::new([n, 3, h, w], data).unwrap();
        let y = if k % 2 == 0 {
            model.enhance(&params, &x).unwrap()
        } else {
            model.enhance_padded(&params, &x).unwrap()
        };
        shaped += (y.shape() == x.shape()) as usize;
        in_range += y.data().iter().all(|v| (0.0..=1.0).contains(v)) as usize;
        clamped += y.data().iter().filter(|&&v| v == 0.0 || v == 1.0).count();
    }
    let mut odd_ok = 0;
    let odd_sizes = [(5, 7), (13, 9), (1, 1), (6, 10), (17, 3)];
    for (h, w) in odd_sizes {
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::new([1, 3, h, w], data).unwrap();
        if let Ok(y) = model.enhance_padded(&params, &x) {
            if y.shape() == x.shape() && y.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                odd_ok += 1;
            }
        }
    }
    outcome(
        in_range == 100 && shaped == 100 && odd_ok == odd_sizes.len(),
        format!(
            "{in_range}/100 in [0,1], {shaped}/100 shape-preserving ({clamped} samples at a clamp bound); {odd_ok}/{} odd sizes padded and cropped",
            odd_sizes.len()
        ),
    )
}
