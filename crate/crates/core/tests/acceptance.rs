//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 1 3 9`.

mod common;

use std::time::{Duration, Instant};

use dyconv::analysis::{
    correlation_histogram, fused_kernel_eq7, make_noise_instance_shifted, pearson, random_kernel_set, reconstruct_eq6,
    solve_white_response, BandTally,
};
use dyconv::arch::{dy_mobile_block, flops_ratio_dy_mobile, ratio_to_original, tiny_mobile, FusionPath, Network, Variant};
use dyconv::dynconv::{forward_infer, forward_train, Coefficients, DynamicConvLayer};
use dyconv::io::{generate, run_bench, BenchConfig, Dataset, ModelFile, SynthConfig};
use dyconv::tensor::conv2d;
use dyconv::training::{evaluate, train, TrainConfig};
use dyconv::{ConvGeometry, Error, Tensor};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SAMPLES: usize = 20_000;
const TEST_SAMPLES: usize = 4_000;
const TRAIN_DATA_SEED: u64 = 1000;
const TEST_DATA_SEED: u64 = 2000;
const TRAINING_SEEDS: [u64; 3] = [0, 1, 2];

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

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = r.random_range(1..=4);
        let cin = r.random_range(1..=32);
        let k = if r.random_bool(0.5) { 1 } else { 3 };
        let g = [1, 2, 4, 6][r.random_range(0..4)];
        let depthwise = r.random_bool(0.5);
        let (cout, groups) = if depthwise { (cin, cin) } else { (r.random_range(1..=32), 1) };
        let stride = r.random_range(1..=2);
        let hw = r.random_range(3..=8);
        let geom = ConvGeometry::same(cin, cout, k, stride, groups).unwrap();
        let layer = DynamicConvLayer::<f64>::init(geom, g, r.random_bool(0.5), &mut r).unwrap();
        let eta = Tensor::rand_uniform(&[n, cout * g], 0.0, 1.0, &mut r);
        let x = Tensor::rand_normal(&[n, cin, hw, hw], 1.0, &mut r);

        let coeffs = Coefficients::new(eta.clone()).unwrap();
        let a = forward_train(&layer, &coeffs, &x).unwrap();
        let b = forward_infer(&layer, &coeffs, &x).unwrap();
        worst64 = worst64.max(a.max_abs_diff(&b).unwrap());

        let layer32 = DynamicConvLayer::new(geom, g, layer.bank().cast(), layer.bias().map(Tensor::cast)).unwrap();
        let coeffs32 = Coefficients::new(eta.cast::<f32>()).unwrap();
        let x32 = x.cast::<f32>();
        let a = forward_train(&layer32, &coeffs32, &x32).unwrap();
        let b = forward_infer(&layer32, &coeffs32, &x32).unwrap();
        let scale = a.max_abs().max(f32::MIN_POSITIVE) as f64;
        worst32 = worst32.max(a.max_abs_diff(&b).unwrap() as f64 / scale);
    }
    let t = start.elapsed();
    outcome(
        worst64 <= 1e-10 && worst32 <= 1e-5 && t < Duration::from_secs(60),
        format!("200 configs, f64 max abs {worst64:.2e}, f32 max rel {worst32:.2e}, {}", secs(t)),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut det, mut beta, mut resid, mut recon, mut fused) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..1000 {
        let d = r.random_range(1..=8);
        let n = r.random_range(d + 2..=32);
        let shift = r.random_range(0..n);
        let inst = make_noise_instance_shifted(n, d, shift, r.random()).unwrap();
        let Ok(solved) = solve_white_response(&inst) else {
            failures += 1;
            continue;
        };
        // det(A) = 1 - sum gamma^2, computed independently of the solver
        let gamma_perp_sq = 1.0 - inst.gamma.iter().map(|g| g * g).sum::<f64>();
        det = det.max((solved.determinant - gamma_perp_sq).abs());
        beta = beta.max((solved.beta_hat() - inst.beta).abs());
        let kernels = random_kernel_set(&inst, r.random_range(0..=n - d - 1), r.random());
        let Ok(rec) = reconstruct_eq6(&inst, &kernels, 0) else {
            failures += 1;
            continue;
        };
        resid = resid.max(rec.residual);
        recon = recon.max((rec.white_response - inst.beta).abs());
        let w = fused_kernel_eq7(&kernels, &rec).unwrap();
        // one inner product of the fused kernel with the shifted window
        let window: Vec<f64> = (0..n).map(|m| inst.input[(m + inst.shift) % n]).collect();
        let single: f64 = w.iter().zip(&window).map(|(a, b)| a * b).sum();
        fused = fused.max((single - inst.beta).abs());
    }
    let t = start.elapsed();
    let worst = det.max(beta).max(resid).max(recon).max(fused);
    outcome(
        failures == 0 && worst < 1e-8 && t < Duration::from_secs(30),
        format!(
            "1000 instances, det {det:.1e}, beta {beta:.1e}, residual {resid:.1e}, reconstruction {recon:.1e}, fused {fused:.1e}, {failures} failed, {}",
            secs(t)
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut mismatches = Vec::new();
    for c in (6..=96).step_by(6) {
        let expected = Ratio::new(6 * c as u64 + 27, c as u64 + 27);
        let counted = ratio_to_original(&dy_mobile_block(c, 6).unwrap(), (14, 14)).unwrap();
        let closed = flops_ratio_dy_mobile(c).unwrap();
        if counted != expected || closed != expected {
            mismatches.push(format!("C={c}: counter {counted}, expected {expected}"));
        }
    }
    let c30 = ratio_to_original(&dy_mobile_block(30, 6).unwrap(), (14, 14)).unwrap();
    let pass = mismatches.is_empty() && c30 == Ratio::new(207, 57);
    outcome(pass, format!("C=6..96 exact; C=30 gives {c30} (=207/57) {}", mismatches.join("; ")))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for case in common::op_cases() {
        let e = common::check(&case.inputs, &*case.loss).unwrap();
        worst = worst.max(e);
        if e.is_nan() || e >= common::TOLERANCE {
            failures.push(format!("{} {e:.2e}", case.name));
        }
    }
    let ops = common::op_cases().len();
    let spec = common::two_block_net("dy-mobile", 6, 2).unwrap();
    let mut predictor = 0;
    for path in [FusionPath::Feature, FusionPath::Kernel] {
        for (name, e) in common::check_network(&spec, path, 3).unwrap() {
            worst = worst.max(e);
            predictor += usize::from(name.contains("predictor"));
            if e.is_nan() || e >= common::TOLERANCE {
                failures.push(format!("{path:?} {name} {e:.2e}"));
            }
        }
    }
    let t = start.elapsed();
    outcome(
        failures.is_empty() && predictor > 0 && t < Duration::from_secs(120),
        format!(
            "{ops} op cases + 2-block dy-mobile net ({predictor} predictor tensors), worst rel err {worst:.2e}, {} {}",
            secs(t),
            failures.join("; ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let cin = r.random_range(1..=12);
        let depthwise = r.random_bool(0.5);
        let (cout, groups) = if depthwise { (cin, cin) } else { (r.random_range(1..=12), 1) };
        let k = if r.random_bool(0.5) { 1 } else { 3 };
        let n = r.random_range(1..=4);
        let geom = ConvGeometry::same(cin, cout, k, r.random_range(1..=2), groups).unwrap();
        let layer = DynamicConvLayer::<f64>::init(geom, 1, false, &mut r).unwrap();
        let eta = Tensor::rand_uniform(&[n, cout], 0.0, 1.0, &mut r);
        let x = Tensor::rand_normal(&[n, cin, 6, 6], 1.0, &mut r);
        let coeffs = Coefficients::new(eta.clone()).unwrap();
        let plain = conv2d(&x, layer.bank(), None, &geom).unwrap();
        let (_, _, oh, ow) = plain.dims4().unwrap();
        let plane = oh * ow;
        let scaled = Tensor::from_fn(plain.shape(), |i| {
            let (s, t) = (i / (cout * plane), i / plane % cout);
            eta.data()[s * cout + t] * plain.data()[i]
        });
        for out in [forward_infer(&layer, &coeffs, &x).unwrap(), forward_train(&layer, &coeffs, &x).unwrap()] {
            worst = worst.max(out.max_abs_diff(&scaled).unwrap());
        }
    }
    outcome(worst <= 1e-12, format!("50 layers, both paths vs eta-scaled fixed conv, max abs {worst:.2e}"))
}

struct Runs {
    fix: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
    g6: Vec<f64>,
    criterion6_time: Duration,
}

fn train_eval(variant: Variant, g: usize, seed: u64, train_data: &Dataset, test_data: &Dataset) -> (f64, Duration) {
    let start = Instant::now();
    let spec = tiny_mobile(variant, g).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut net = Network::<f32>::new(&spec, &mut rng(seed)).unwrap();
    train(&mut net, train_data, &cfg, |_| {}).unwrap();
    let top1 = evaluate(&mut net, test_data, 500, FusionPath::Kernel).unwrap();
    (top1, start.elapsed())
}

fn desk_runs(with_sweep: bool) -> Runs {
    let start = Instant::now();
    let train_data = generate(&SynthConfig::new(TRAIN_SAMPLES, TRAIN_DATA_SEED)).unwrap();
    let test_data = generate(&SynthConfig::new(TEST_SAMPLES, TEST_DATA_SEED)).unwrap();
    let mut criterion6_time = start.elapsed();
    let mut runs = Runs {
        fix: Vec::new(),
        g1: Vec::new(),
        g2: Vec::new(),
        g6: Vec::new(),
        criterion6_time: Duration::ZERO,
    };
    for seed in TRAINING_SEEDS {
        let (a, t) = train_eval(Variant::Fixed, 1, seed, &train_data, &test_data);
        runs.fix.push(a);
        criterion6_time += t;
        let (a, t) = train_eval(Variant::Dynamic, 6, seed, &train_data, &test_data);
        runs.g6.push(a);
        criterion6_time += t;
        if with_sweep {
            runs.g1.push(train_eval(Variant::Dynamic, 1, seed, &train_data, &test_data).0);
            runs.g2.push(train_eval(Variant::Dynamic, 2, seed, &train_data, &test_data).0);
        }
        eprintln!(
            "  seed {seed}: fix {:.2} g6 {:.2}{}",
            runs.fix.last().unwrap(),
            runs.g6.last().unwrap(),
            if with_sweep {
                format!(" g1 {:.2} g2 {:.2}", runs.g1.last().unwrap(), runs.g2.last().unwrap())
            } else {
                String::new()
            }
        );
    }
    runs.criterion6_time = criterion6_time;
    runs
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/")
}

fn criterion_6(runs: &Runs) -> Outcome {
    let wins = runs.g6.iter().zip(&runs.fix).filter(|(d, f)| d > f).count();
    let margin = mean(&runs.g6) - mean(&runs.fix);
    outcome(
        wins >= 2 && margin >= 1.0 && runs.criterion6_time < Duration::from_secs(30 * 60),
        format!(
            "dy g6 {} vs fix {}: {wins}/3 wins, mean margin {margin:.2} points, {}",
            fmt_list(&runs.g6),
            fmt_list(&runs.fix),
            secs(runs.criterion6_time)
        ),
    )
}

fn criterion_7(runs: &Runs) -> Outcome {
    let (m1, m2, m6) = (mean(&runs.g1), mean(&runs.g2), mean(&runs.g6));
    let pass = m2 >= m1 - 0.5 && m6 >= m2 - 0.5;
    outcome(
        pass,
        format!(
            "3-seed means g1 {m1:.2} ({}), g2 {m2:.2} ({}), g6 {m6:.2} ({}), allowance 0.5",
            fmt_list(&runs.g1),
            fmt_list(&runs.g2),
            fmt_list(&runs.g6)
        ),
    )
}

fn criterion_8() -> Outcome {
    let report = run_bench(&BenchConfig::default()).unwrap();
    let mut pass = report.rows.iter().all(|r| r.fused < r.unfused);
    let mut parts = Vec::new();
    for &c in &BenchConfig::default().channels {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.channels == c).collect();
        pass &= rows.windows(2).all(|w| w[1].latency_reduced() >= w[0].latency_reduced());
        parts.push(format!(
            "C={c}: {}",
            rows.iter()
                .map(|r| format!("{}px {:.1}%", r.input_size, 100.0 * r.latency_reduced()))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    outcome(pass, format!("latency reduced {}", parts.join("; ")))
}

/// Textbook single-pass formula, kept apart from the library's two-pass one.
fn brute_pearson(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let (su, sv) = (u.iter().sum::<f64>(), v.iter().sum::<f64>());
    let suv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let (suu, svv) = (u.iter().map(|a| a * a).sum::<f64>(), v.iter().map(|b| b * b).sum::<f64>());
    (n * suv - su * sv) / ((n * suu - su * su).sqrt() * (n * svv - sv * sv).sqrt())
}

/// Input, expected `(bin, count)` entries, bands and skipped channels.
type Fixture = (Tensor<f64>, &'static [(usize, usize)], BandTally, usize);

fn fixture(channels: [[f64; 4]; 3]) -> Tensor<f64> {
    Tensor::new(&[1, 3, 2, 2], channels.concat()).unwrap()
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = r.random_range(3..=64);
        let u: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        worst = worst.max((pearson(&u, &v).unwrap() - brute_pearson(&u, &v)).abs());
    }
    // Pairs (0,1), (0,2), (1,2); r worked out by hand.
    let cases: [Fixture; 3] = [
        // r = -1, -2/(2 sqrt 5), +2/(2 sqrt 5)
        (
            fixture([[1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0], [1.0, -1.0, 1.0, -1.0]]),
            &[(0, 1), (5, 1), (14, 1)],
            BandTally { none: 0, weak: 0, middle: 2, strong: 1 },
            0,
        ),
        // r = 1, 0, 0
        (
            fixture([[1.0, 2.0, 3.0, 4.0], [3.0, 5.0, 7.0, 9.0], [1.0, -1.0, -1.0, 1.0]]),
            &[(19, 1), (10, 2)],
            BandTally { none: 2, weak: 0, middle: 0, strong: 1 },
            0,
        ),
        // r = -1/3 between the two spikes; constant channel skipped
        (
            fixture([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [2.0, 2.0, 2.0, 2.0]]),
            &[(6, 1)],
            BandTally { none: 0, weak: 1, middle: 0, strong: 0 },
            1,
        ),
    ];
    let mut fixtures_ok = true;
    for (x, bins, bands, skipped) in cases {
        let h = correlation_histogram(&x).unwrap();
        let mut expected = vec![0; h.counts.len()];
        for &(b, c) in bins {
            expected[b] = c;
        }
        fixtures_ok &= h.counts == expected && h.bands == bands && h.skipped_channels == skipped;
    }
    outcome(
        worst <= 1e-12 && fixtures_ok,
        format!("100 pairs max diff {worst:.1e}; 3 handcrafted fixtures {}", if fixtures_ok { "match" } else { "differ" }),
    )
}

fn criterion_10() -> Outcome {
    let mut r = rng(10);
    let mut bitwise = 0;
    for i in 0..50 {
        let g = [1, 2, 4, 6][i % 4];
        let variant = [Variant::Dynamic, Variant::Fixed, Variant::Original][i % 3];
        let spec = tiny_mobile(variant, g).unwrap();
        let ok = if i % 2 == 0 {
            let net = Network::<f32>::new(&spec, &mut r).unwrap();
            let m = ModelFile::from_network(&net);
            let back = ModelFile::<f32>::from_bytes(&m.to_bytes()).unwrap();
            let rebuilt = ModelFile::from_network(&back.clone().into_network().unwrap());
            back.to_bytes() == m.to_bytes() && rebuilt.to_bytes() == m.to_bytes()
        } else {
            let net = Network::<f64>::new(&spec, &mut r).unwrap();
            let m = ModelFile::from_network(&net);
            let back = ModelFile::<f64>::from_bytes(&m.to_bytes()).unwrap();
            back.to_bytes() == m.to_bytes()
                && back.tensors.iter().zip(&m.tensors).all(|((a, x), (b, y))| {
                    a == b && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        bitwise += usize::from(ok);
    }

    let net = Network::<f32>::new(&tiny_mobile(Variant::Dynamic, 2).unwrap(), &mut r).unwrap();
    let model = ModelFile::from_network(&net);
    let bytes = model.to_bytes();
    let header_end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
    let text = String::from_utf8(bytes[..header_end].to_vec()).unwrap();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let truncated = &bytes[..bytes.len() - 7];
    checks.push((
        "truncated",
        matches!(ModelFile::<f32>::from_bytes(truncated), Err(Error::Truncated { expected, actual }) if expected == bytes.len() - header_end && actual == expected - 7),
    ));
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 0x40;
    checks.push(("checksum", matches!(ModelFile::<f32>::from_bytes(&flipped), Err(Error::Checksum { .. }))));
    let mut version = bytes.clone();
    version[13] = b'9';
    checks.push((
        "version",
        matches!(ModelFile::<f32>::from_bytes(&version), Err(Error::Version { found: 9, expected: 1 })),
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    checks.push(("magic", matches!(ModelFile::<f32>::from_bytes(&magic), Err(Error::Format { offset: 0, .. }))));

    // Reverse the tensor table: still resolved by name.
    let lines: Vec<&str> = text.lines().collect();
    let first = lines.iter().position(|l| l.starts_with("tensor ")).unwrap();
    let last = lines.iter().rposition(|l| l.starts_with("tensor ")).unwrap();
    let mut permuted_lines = lines.clone();
    permuted_lines[first..=last].reverse();
    let mut permuted = (permuted_lines.join("\n") + "\n").into_bytes();
    permuted.extend_from_slice(&bytes[header_end..]);
    let loaded = ModelFile::<f32>::from_bytes(&permuted).and_then(|m| m.into_network());
    checks.push((
        "permuted table",
        loaded.map(|n| ModelFile::from_network(&n) == model).unwrap_or(false),
    ));

    // Shift one tensor's offset: error points at that header line.
    let victim = lines[first + 1];
    let line_offset = text.find(&format!("\n{victim}\n")).unwrap() + 1;
    let mut fields: Vec<String> = victim.split(' ').map(String::from).collect();
    fields[2] = (fields[2].parse::<usize>().unwrap() + 4).to_string();
    let moved = text.replacen(victim, &fields.join(" "), 1);
    let mut moved = moved.into_bytes();
    moved.extend_from_slice(&bytes[header_end..]);
    checks.push((
        "bad offset",
        matches!(ModelFile::<f32>::from_bytes(&moved), Err(Error::Format { offset, .. }) if offset == line_offset),
    ));

    let mut missing = model.clone();
    let dropped = missing.tensors.remove(5).0;
    checks.push((
        "missing tensor",
        matches!(missing.into_network(), Err(Error::Tensor { name, .. }) if name == dropped),
    ));

    let data = generate(&SynthConfig::new(8, 3)).unwrap().to_bytes();
    checks.push((
        "dataset truncated",
        matches!(Dataset::from_bytes(&data[..data.len() - 1]), Err(Error::Truncated { .. })),
    ));
    let mut bad_label = data.clone();
    let at = bad_label.len() - 2;
    bad_label[at] = 200;
    checks.push((
        "dataset label",
        matches!(Dataset::from_bytes(&bad_label), Err(Error::Format { offset, .. }) if offset == at),
    ));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        bitwise == 50 && failed.is_empty(),
        format!("{bitwise}/50 bitwise round trips; {} corruption fixtures, failed: {failed:?}", checks.len()),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |n: usize, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let o = f();
            println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, o));
        }
    };
    run(1, &criterion_1);
    run(2, &criterion_2);
    run(3, &criterion_3);
    run(4, &criterion_4);
    run(5, &criterion_5);
    run(8, &criterion_8);
    run(9, &criterion_9);
    run(10, &criterion_10);
    if wanted(6) || wanted(7) {
        let runs = desk_runs(wanted(7));
        run(6, &|| criterion_6(&runs));
        run(7, &|| criterion_7(&runs));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
