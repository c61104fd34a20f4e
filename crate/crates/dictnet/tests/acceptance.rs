//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `KNOWN_GAPS` fails.

mod common;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::planted_rotated;
use dictnet::data_io::{
    encode_idx_images, encode_idx_labels, idx_dataset, normalize, parse_idx_images,
    parse_idx_labels, read_idx, DataError, NormalizationMode,
};
use dictnet_core::activation::{apply, invert};
use dictnet_core::deep_net::train_ddnn;
use dictnet_core::dict_layer::{objective, sparse_code_omp, train_layer};
use dictnet_core::lcksvd::{
    build_discriminative_code, build_targets, stack_training_data, train_lcksvd1, train_lcksvd2,
};
use dictnet_core::numerics::{normalize_columns, seeded_gaussian, solve_least_squares};
use dictnet_core::supervised::{
    incoherence_penalty, train_class_discriminative, train_supervised_logistic, ClassDictSpec,
    LogisticLayerSpec, LogisticProblem,
};
use dictnet_core::{
    evaluate, ActivationKind, AtomAllocation, InversionGuard, LayerSpec, Matrix, NetworkSpec,
    RngSeed, Variant,
};

/// Criteria expected to fail; each is explained in the project notes and README.
const KNOWN_GAPS: &[u32] = &[7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn central(f: impl Fn(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

fn with_entry(m: &Matrix, r: usize, c: usize, v: f64) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if (i, j) == (r, c) { v } else { m.get(i, j) })
}

fn non_increasing(trace: &[f64], tol: f64) -> Option<f64> {
    let worst = trace.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    (worst > tol).then_some(worst)
}

fn planted_recovery() -> Outcome {
    let d_true = seeded_gaussian(20, 10, RngSeed(1));
    let z_true = seeded_gaussian(10, 200, RngSeed(2));
    let x = d_true.matmul(&z_true);
    let mut spec = LayerSpec::new(10);
    spec.max_iters = 200;
    spec.tol = 1e-15;
    spec.seed = RngSeed(3);
    let start = Instant::now();
    let layer = train_layer(&x, &spec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rel = (x.sub(&layer.dictionary.matmul(&layer.codes)).sum_sq() / x.sum_sq()).sqrt();
    // Dense codes only pin down the span of the planted atoms, not the atoms.
    let (d_unit, _) = normalize_columns(&d_true).unwrap();
    let coef = solve_least_squares(&layer.dictionary, &d_unit, 0.0).unwrap();
    let span_gap = d_unit.sub(&layer.dictionary.matmul(&coef)).max_abs();
    outcome(
        rel < 1e-3 && secs < 5.0,
        format!(
            "relative error {rel:.2e} (< 1e-3) after {} sweeps in {secs:.2} s (< 5 s); planted atoms lie in the learned span to {span_gap:.1e}",
            layer.loss_trace.len() - 1
        ),
    )
}

fn monotonicity() -> Outcome {
    let tol = 1e-6;
    let mut traces = 0;
    let mut failures = Vec::new();
    for seed in 0..25u64 {
        let v = seeded_gaussian(10, 60, RngSeed(1000 + seed));
        let labels: Vec<usize> = (0..60).map(|i| (i + seed as usize) % 3).collect();
        let mut spec = LayerSpec::new(6);
        spec.seed = RngSeed(seed);
        spec.max_iters = 30;

        let mut check = |name: &str, trace: &[f64]| {
            traces += 1;
            if let Some(rise) = non_increasing(trace, tol) {
                failures.push(format!("{name}#{seed} rises {rise:.2e}"));
            }
        };
        check("layer", &train_layer(&v, &spec).unwrap().loss_trace);
        let t = build_targets(&labels, 3).unwrap();
        check("lcksvd1", &train_lcksvd1(&v, &t, 0.7, &spec).unwrap().loss_trace);
        let alloc = AtomAllocation::uniform(6, 3).unwrap();
        let h = build_discriminative_code(&labels, &alloc).unwrap();
        check("lcksvd2", &train_lcksvd2(&v, &t, &h, &alloc, 0.7, &spec).unwrap().loss_trace);
        let y: Vec<i64> = labels.iter().map(|&l| if l == 0 { 1 } else { -1 }).collect();
        let mut lspec = LogisticLayerSpec::new(6, 0.5);
        lspec.seed = RngSeed(seed);
        lspec.max_iters = 20;
        check("logistic", &train_supervised_logistic(&v, &y, &lspec).unwrap().layer.loss_trace);
        let mut cspec = ClassDictSpec::new(3, 2, 1);
        cspec.seed = RngSeed(seed);
        cspec.max_iters = 20;
        check("class-dict", &train_class_discriminative(&v, &labels, &cspec).unwrap().loss_trace);
    }
    outcome(
        failures.is_empty(),
        format!("{traces} traces over 25 instances, max rise tolerance {tol:.0e}; violations: {}", failures.len())
            + &failures.iter().take(3).map(|f| format!(" [{f}]")).collect::<String>(),
    )
}

fn least_squares_residual(d: &Matrix, x: &Matrix, support: &[usize]) -> f64 {
    let sub = d.select_columns(support);
    let z = solve_least_squares(&sub, x, 0.0).unwrap();
    x.sub(&sub.matmul(&z)).sum_sq()
}

fn omp_oracle() -> Outcome {
    let s = 2;
    let mut greedy_optimal = 0;
    let mut problems = Vec::new();
    for seed in 0..20u64 {
        let (d, _) = normalize_columns(&seeded_gaussian(5, 8, RngSeed(2000 + seed))).unwrap();
        let x = seeded_gaussian(5, 1, RngSeed(3000 + seed));
        let z = sparse_code_omp(&d, &x, s).unwrap();
        let support: Vec<usize> = (0..8).filter(|&j| z.get(j, 0) != 0.0).collect();
        if support.len() > s {
            problems.push(format!("#{seed} uses {} atoms", support.len()));
            continue;
        }
        let omp_res = x.sub(&d.matmul(&z)).sum_sq();
        let mut best = f64::INFINITY;
        let mut best_support = Vec::new();
        for a in 0..8 {
            for b in a + 1..8 {
                let r = least_squares_residual(&d, &x, &[a, b]);
                if r < best {
                    best = r;
                    best_support = vec![a, b];
                }
            }
        }
        let scale = x.sum_sq().max(1.0);
        if omp_res < best - 1e-12 * scale {
            problems.push(format!("#{seed} beats exhaustive ({omp_res:.3e} < {best:.3e})"));
        }
        if support == best_support {
            greedy_optimal += 1;
            if (omp_res - best).abs() > 1e-10 * scale {
                problems.push(format!("#{seed} optimal support but residual {omp_res:.3e} vs {best:.3e}"));
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "20 problems (5x8, s=2) against all 28 supports; greedy path optimal in {greedy_optimal}; problems: {}",
            if problems.is_empty() { "none".to_string() } else { problems.join(", ") }
        ),
    )
}

fn activation_roundtrip() -> Outcome {
    let n = 100_000;
    let margin = 1e-6;
    let guard = InversionGuard::noiseless(margin);
    let mut worst: f64 = 0.0;
    for kind in [ActivationKind::Tanh, ActivationKind::Sigmoid] {
        let (lo, hi) = kind.range();
        let x_hi = kind.inverse_value(hi - margin);
        let x_lo = kind.inverse_value(lo + margin);
        let x = Matrix::from_fn(1, n, |_, i| x_lo + (x_hi - x_lo) * i as f64 / (n - 1) as f64);
        worst = worst.max(x.sub(&invert(kind, &apply(kind, &x), &guard)).max_abs());
    }
    outcome(
        worst <= 1e-9,
        format!("max |inverse(f(x)) - x| = {worst:.2e} (<= 1e-9) over 1e5 points, tanh and sigmoid, sigma 0"),
    )
}

fn gradient_checks() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..10u64 {
        let x = seeded_gaussian(5, 8, RngSeed(4000 + seed));
        let y: Vec<i64> = (0..8).map(|i| if (i + seed as usize) % 3 == 0 { 1 } else { -1 }).collect();
        let d = seeded_gaussian(5, 4, RngSeed(4100 + seed));
        let z = seeded_gaussian(4, 8, RngSeed(4200 + seed));
        let theta = seeded_gaussian(4, 1, RngSeed(4300 + seed)).into_vec();
        let b = 0.1 * seed as f64 - 0.3;
        let p = LogisticProblem { x: &x, y: &y, lambda: 0.7, ridge: 0.01 };
        let g = p.gradients(&d, &z, &theta, b);
        for k in 0..theta.len() {
            let fd = central(
                |t| {
                    let mut th = theta.clone();
                    th[k] = t;
                    p.objective(&d, &z, &th, b)
                },
                theta[k],
                h,
            );
            worst = worst.max(rel_err(fd, g.theta[k]));
            count += 1;
        }
        worst = worst.max(rel_err(central(|bb| p.objective(&d, &z, &theta, bb), b, h), g.bias));
        count += 1;
        let col = seed as usize % z.cols();
        for r in 0..z.rows() {
            let fd = central(|v| p.objective(&d, &with_entry(&z, r, col, v), &theta, b), z.get(r, col), h);
            worst = worst.max(rel_err(fd, g.z.get(r, col)));
            count += 1;
        }

        let dicts: Vec<Matrix> = (0..3).map(|i| seeded_gaussian(6, 2 + i, RngSeed(4400 + seed * 10 + i as u64))).collect();
        let (_, grads) = incoherence_penalty(&dicts).unwrap();
        for (i, gi) in grads.iter().enumerate() {
            for r in 0..gi.rows() {
                for c in 0..gi.cols() {
                    let fd = central(
                        |v| {
                            let mut ds = dicts.clone();
                            ds[i] = with_entry(&dicts[i], r, c, v);
                            incoherence_penalty(&ds).unwrap().0
                        },
                        dicts[i].get(r, c),
                        h,
                    );
                    worst = worst.max(rel_err(fd, gi.get(r, c)));
                    count += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{count} partial derivatives (logistic theta, b, code column; incoherence per block), h=1e-5, worst relative error {worst:.2e} (<= 1e-4)"),
    )
}

fn stacking_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let v = seeded_gaussian(10, 60, RngSeed(5000 + seed));
        let labels: Vec<usize> = (0..60).map(|i| (i * 7 + seed as usize) % 3).collect();
        let t = build_targets(&labels, 3).unwrap();
        let mu = 0.5 + seed as f64;
        let mut spec = LayerSpec::new(8);
        spec.seed = RngSeed(seed);
        spec.max_iters = 40;
        let stacked = stack_training_data(&v, mu, &[t.as_matrix()]);
        let direct = train_layer(&stacked, &spec).unwrap();
        let fit = train_lcksvd1(&v, &t, mu, &spec).unwrap();
        let a = *direct.loss_trace.last().unwrap();
        let b = *fit.loss_trace.last().unwrap();
        let recomputed = objective(&stacked, &direct.dictionary, &direct.codes, spec.ridge);
        // The unstacked model must describe the same fit of the stacked data.
        let unstacked = fit.model.fidelity(&v, &t, None, &fit.codes);
        let stacked_fit = objective(&stacked, &direct.dictionary, &direct.codes, 0.0);
        worst = worst
            .max((a - b).abs())
            .max((recomputed - a).abs())
            .max((unstacked - stacked_fit).abs());
    }
    outcome(
        worst <= 1e-9,
        format!("5 instances, max |J_stacked - J_lcksvd1| = {worst:.2e} (<= 1e-9)"),
    )
}

/// Ridge regression from pixels (plus a constant feature) to one-hot targets.
fn ridge_baseline(train: &Matrix, y_train: &[usize], test: &Matrix, y_test: &[usize], classes: usize) -> f64 {
    let with_bias = |m: &Matrix| Matrix::vstack(&[m, &Matrix::from_fn(1, m.cols(), |_, _| 1.0)]);
    let a = with_bias(train).transpose();
    let t = Matrix::from_fn(train.cols(), classes, |i, c| if y_train[i] == c { 1.0 } else { 0.0 });
    let w = solve_least_squares(&a, &t, 1.0).unwrap();
    let scores = w.tr_matmul(&with_bias(test));
    let correct = (0..test.cols())
        .filter(|&i| {
            let col = scores.column(i);
            let best = (0..classes).fold(0, |b, c| if col[c] > col[b] { c } else { b });
            best == y_test[i]
        })
        .count();
    correct as f64 / test.cols() as f64
}

fn mnist_subset() -> Outcome {
    let start = Instant::now();
    let train = read_idx(&fixture("train-images-idx3-ubyte.gz"), &fixture("train-labels-idx1-ubyte.gz")).unwrap();
    let test = read_idx(&fixture("t10k-images-idx3-ubyte.gz"), &fixture("t10k-labels-idx1-ubyte.gz")).unwrap();
    let delta = 0.1;
    let (train_n, norm) = normalize(&train, NormalizationMode::UnitScale, ActivationKind::Tanh, delta).unwrap();
    let x_test = norm.apply(&test.x).unwrap();

    let mut spec = NetworkSpec::new(Variant::Ddnn1, &[200, 100, 50], RngSeed(0));
    for layer in &mut spec.layers {
        layer.ridge = 1e-2;
    }
    spec.guard.clamp_margin = delta;
    let fit = train_ddnn(&train_n.x, &train.original_labels(), &spec).unwrap();
    let acc = evaluate(&fit.network, &x_test, &test.original_labels()).unwrap().accuracy;
    let secs = start.elapsed().as_secs_f64();

    let y_train: Vec<usize> = train.original_labels().iter().map(|&l| l as usize).collect();
    let y_test: Vec<usize> = test.original_labels().iter().map(|&l| l as usize).collect();
    let baseline = ridge_baseline(&train_n.x, &y_train, &x_test, &y_test, 10);
    outcome(
        acc >= 0.90 && acc > baseline && secs < 600.0,
        format!("DDNN1 [200,100,50] test accuracy {acc:.4} (>= 0.90), ridge baseline {baseline:.4} (must be exceeded), {secs:.0} s (< 600 s)"),
    )
}

fn ddnn2_vs_ddnn1() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let (x, y) = planted_rotated(32, 300, 3, 4, 1e-2, 1.0, seed);
        let labels: Vec<i64> = y.iter().map(|&l| l as i64).collect();
        let acc = |variant| {
            let mut spec = NetworkSpec::new(variant, &[32, 16], RngSeed(seed));
            for layer in &mut spec.layers {
                layer.ridge = 1e-4;
            }
            let fit = train_ddnn(&x, &labels, &spec).unwrap();
            evaluate(&fit.network, &x, &labels).unwrap().accuracy
        };
        let (a1, a2) = (acc(Variant::Ddnn1), acc(Variant::Ddnn2));
        if a2 >= a1 {
            wins += 1;
        }
        pairs.push(format!("{a2:.3}/{a1:.3}"));
    }
    outcome(
        wins >= 3,
        format!("DDNN2 >= DDNN1 training accuracy on {wins}/5 paired seeds (majority needed): {}", pairs.join(" ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let model = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_dictnet"))
            .args(["--train", "--data"])
            .arg(fixture("blobs.csv"))
            .arg("--model")
            .arg(&model)
            .args(["--atoms", "8,6,4", "--variant", "ddnn2", "--seed", "11", "--ridge", "1e-2"])
            .env("RUST_LOG", "error")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(model).unwrap()
    };
    let a = run("a.ddnn");
    let b = run("b.ddnn");
    outcome(
        !a.is_empty() && a == b,
        format!("two train-and-save runs through the CLI: {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn gunzip(path: &Path) -> Vec<u8> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(std::fs::File::open(path).unwrap())
        .read_to_end(&mut out)
        .unwrap();
    out
}

fn idx_fidelity() -> Outcome {
    // Built byte by byte, independently of the encoder.
    let mut images = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend((0u8..12).map(|i| i.wrapping_mul(37)));
    let labels = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 3, 7, 0, 7];
    let mut problems = Vec::new();

    let parsed = parse_idx_images(&images).unwrap();
    let parsed_labels = parse_idx_labels(&labels).unwrap();
    if encode_idx_images(&parsed) != images || encode_idx_labels(&parsed_labels) != labels {
        problems.push("constructed fixture".to_string());
    }
    let ds = idx_dataset(&parsed, &parsed_labels).unwrap();
    if ds.x.get(1, 0) != 37.0 || ds.original_labels() != vec![7, 0, 7] {
        problems.push("decoded values".to_string());
    }
    for name in ["train-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte.gz"] {
        let raw = gunzip(&fixture(name));
        if encode_idx_images(&parse_idx_images(&raw).unwrap()) != raw {
            problems.push(name.to_string());
        }
    }

    let mut bad_magic = images.clone();
    bad_magic[2] = 0x09;
    let mut trailing = labels.clone();
    trailing.push(1);
    let cases: [(&str, Result<(), DataError>); 5] = [
        ("bad magic", parse_idx_images(&bad_magic).map(drop)),
        ("truncated header", parse_idx_images(&images[..10]).map(drop)),
        ("truncated pixels", parse_idx_images(&images[..images.len() - 1]).map(drop)),
        ("trailing bytes", parse_idx_labels(&trailing).map(drop)),
        ("count mismatch", idx_dataset(&parsed, &parsed_labels[..2]).map(drop)),
    ];
    let ok = matches!(cases[0].1, Err(DataError::BadMagic { offset: 0, expected: 0x803, found: 0x903 }))
        && matches!(cases[1].1, Err(DataError::Truncated { offset: 8, .. }))
        && matches!(cases[2].1, Err(DataError::Truncated { offset: 16, needed: 12, available: 11 }))
        && matches!(cases[3].1, Err(DataError::TrailingBytes { offset: 11, extra: 1 }))
        && matches!(cases[4].1, Err(DataError::CountMismatch { images: 3, labels: 2, .. }));
    if !ok {
        problems.push(format!(
            "error variants: {:?}",
            cases.iter().map(|(n, r)| format!("{n}: {:?}", r.as_ref().err())).collect::<Vec<_>>()
        ));
    }
    outcome(
        problems.is_empty(),
        format!(
            "hand-built fixture and both MNIST image files re-encode byte for byte; 5 malformed inputs give distinct errors; problems: {}",
            if problems.is_empty() { "none".to_string() } else { problems.join(", ") }
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "planted factorization recovery", planted_recovery),
        (2, "objective monotonicity", monotonicity),
        (3, "OMP against exhaustive search", omp_oracle),
        (4, "activation roundtrip", activation_roundtrip),
        (5, "gradient checks", gradient_checks),
        (6, "LC-KSVD stacking equivalence", stacking_equivalence),
        (7, "MNIST subset end to end", mnist_subset),
        (8, "DDNN2 vs DDNN1 on planted toy", ddnn2_vs_ddnn1),
        (9, "deterministic model files", determinism),
        (10, "IDX bit fidelity", idx_fidelity),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        let note = match (result.pass, KNOWN_GAPS.contains(&id)) {
            (false, true) => " (known gap)",
            (true, true) => " (known gap now passes)",
            _ => "",
        };
        println!(
            "{verdict} criterion {id:>2} {name}: {} [{:.1} s]{note}",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass && !KNOWN_GAPS.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
