//! Acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lovasz::harness::{
    absent_class_probe, bias_sweep, divergence_witness, generate_circles, train_linear, Equibatch,
    LossKind, SweepLoss, SyntheticConfig, TrainConfig,
};
use lovasz::jaccard::{self, jaccard_grad, jaccard_set_function};
use lovasz::optim::{prox_lovasz_hinge, toy_trajectories, DescentMethod, ProxConfig};
use lovasz::submodular::{is_submodular, lovasz_extension, threshold_oracle, SetFunction};
use lovasz::verify::{self, GradLoss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// timing-sensitive checks must not overlap
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, passed: bool, detail: &str, elapsed: Duration, budget: Option<Duration>) {
    let within = budget.is_none_or(|b| elapsed < b);
    let status = if passed && within { "PASS" } else { "FAIL" };
    let budget = budget.map_or(String::new(), |b| format!(" / budget {:.0}s", b.as_secs_f64()));
    // straight to the handle so the line shows for passing tests too
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "ACCEPTANCE {status} [{id:02}] {name}: {detail} ({:.2}s{budget})",
        elapsed.as_secs_f64()
    )
    .unwrap();
    out.flush().unwrap();
    assert!(passed, "criterion {id} failed: {detail}");
    assert!(within, "criterion {id} exceeded its time budget");
}

fn random_delta(rng: &mut ChaCha8Rng, p: usize) -> Vec<bool> {
    (0..p).map(|_| rng.random::<bool>()).collect()
}

fn mask_of(bits: u32, p: usize) -> Vec<bool> {
    (0..p).map(|i| bits >> i & 1 == 1).collect()
}

#[test]
fn c01_fast_gradient_matches_oracles() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for instance in 0..1000 {
        let p = rng.random_range(1..=64);
        let delta = random_delta(&mut rng, p);
        // every fourth instance is quantized so that ties occur
        let m: Vec<f64> = (0..p)
            .map(|_| {
                let v: f64 = rng.random();
                if instance % 4 == 0 {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let fast = jaccard_grad(&m, &delta).unwrap();
        let setfn = jaccard_set_function(&delta).unwrap();
        let generic = lovasz_extension(&setfn, &m).unwrap();
        let levels = threshold_oracle(&setfn, &m).unwrap();
        worst = worst
            .max((fast.value - generic.value).abs())
            .max((fast.value - levels).abs());
        for (a, b) in fast.gradient.iter().zip(&generic.gradient) {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        1,
        "fast gradient vs generic extension and level-set oracle",
        worst <= 1e-9,
        &format!("1000 instances, p ≤ 64, max abs err {worst:.3e} (≤ 1e-9)"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

#[test]
fn c02_jaccard_loss_is_submodular() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for p in 1..=8usize {
        for bits in 0..1u32 << p {
            let delta = mask_of(bits, p);
            if !is_submodular(&jaccard_set_function(&delta).unwrap()).unwrap() {
                failures.push(delta);
            }
            checked += 1;
        }
    }
    // the checker must be able to say no
    let square = SetFunction::new(2, |m| {
        let k = m.iter().filter(|&&b| b).count() as f64;
        k * k
    })
    .unwrap();
    let rejects = !is_submodular(&square).unwrap();
    report(
        2,
        "Jaccard set function is submodular",
        failures.is_empty() && rejects,
        &format!(
            "{checked} ground truths over p ≤ 8, {} failures, supermodular control rejected: {rejects}",
            failures.len()
        ),
        start.elapsed(),
        Some(Duration::from_secs(60)),
    );
}

#[test]
fn c03_vertices_hinge_and_hamming() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    let mut vertex_mismatch = 0usize;
    let mut vertices = 0usize;
    for p in 1..=10usize {
        let deltas: Vec<u32> = if p <= 7 {
            (0..1u32 << p).collect()
        } else {
            (0..32).map(|_| rng.random_range(0..1u32 << p)).collect()
        };
        for dbits in deltas {
            let delta = mask_of(dbits, p);
            let setfn = jaccard_set_function(&delta).unwrap();
            for mbits in 0..1u32 << p {
                let errors = mbits.count_ones();
                let union = (mbits | dbits).count_ones();
                let expected = if errors == 0 { 0.0 } else { errors as f64 / union as f64 };
                let vertex: Vec<f64> = mask_of(mbits, p).iter().map(|&b| b as u8 as f64).collect();
                let fast = jaccard_grad(&vertex, &delta).unwrap().value;
                let generic = lovasz_extension(&setfn, &vertex).unwrap().value;
                if fast != expected || generic != expected {
                    vertex_mismatch += 1;
                }
                vertices += 1;
            }
        }
    }

    let mut hinge_mismatch = 0usize;
    for _ in 0..1000 {
        let s: f64 = rng.random_range(-3.0..3.0);
        let y: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let got = jaccard::lovasz_hinge(&[s], &[y]).unwrap().value;
        if got != (1.0 - s * f64::from(y)).max(0.0) {
            hinge_mismatch += 1;
        }
    }

    let mut hamming_err: f64 = 0.0;
    for _ in 0..200 {
        let p = rng.random_range(1..=40);
        let scores: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<i8> = (0..p).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let got = jaccard::lovasz_hinge_with(&SetFunction::hamming(p).unwrap(), &scores, &labels)
            .unwrap()
            .value;
        let mean_hinge = scores
            .iter()
            .zip(&labels)
            .map(|(&s, &y)| (1.0 - s * f64::from(y)).max(0.0))
            .sum::<f64>()
            / p as f64;
        hamming_err = hamming_err.max((got - mean_hinge).abs());
    }

    report(
        3,
        "vertex interpolation, single-pixel hinge, Hamming construction",
        vertex_mismatch == 0 && hinge_mismatch == 0 && hamming_err <= 1e-12,
        &format!(
            "{vertex_mismatch}/{vertices} vertex mismatches, {hinge_mismatch}/1000 hinge mismatches, \
             Hamming max err {hamming_err:.3e} (≤ 1e-12)"
        ),
        start.elapsed(),
        None,
    );
}

#[test]
fn c04_finite_difference_gradients() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut passed = true;
    for (k, loss) in GradLoss::ALL.into_iter().enumerate() {
        let errs = verify::gradcheck(loss, 16, 4, 100, 400 + k as u64).unwrap();
        let worst = errs.iter().copied().fold(0.0, f64::max);
        passed &= errs.len() == 100 && worst < 1e-4;
        parts.push(format!("{loss} {worst:.1e}"));
    }
    report(
        4,
        "finite-difference gradient checks",
        passed,
        &format!("100 tie-free points each, max err: {} (< 1e-4)", parts.join(", ")),
        start.elapsed(),
        Some(Duration::from_secs(30)),
    );
}

#[test]
fn c05_bias_sweep_minima() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let step = 0.01;
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let cfg = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        let data = generate_circles(&cfg).unwrap();
        let table = bias_sweep(&data, &SweepLoss::ALL, &cfg.bias_grid).unwrap();
        let at = |l| table.argmin(l).unwrap();
        let jac = at(SweepLoss::Jaccard);
        let steps = |l| ((at(l) - jac).abs() / step).round() as i64;
        let (lh, ce, hi) = (
            steps(SweepLoss::LovaszHinge),
            steps(SweepLoss::CrossEntropy),
            steps(SweepLoss::Hinge),
        );
        let ok = lh <= 1 && ce > 5 && hi > 5;
        good += ok as usize;
        lines.push(format!("seed {seed}: Δlh={lh} Δce={ce} Δhinge={hi} steps"));
    }
    report(
        5,
        "bias sweep minima",
        good >= 4,
        &format!("{good}/5 seeds meet the bounds (need 4); {}", lines.join("; ")),
        start.elapsed(),
        Some(Duration::from_secs(120)),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn c06_training_loss_ordering() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let kinds = [LossKind::LovaszHinge, LossKind::Hinge, LossKind::CrossEntropy];
    let mut medians = Vec::new();
    for kind in kinds {
        let scores: Vec<f64> = (0..5u64)
            .map(|seed| {
                let data = generate_circles(&SyntheticConfig {
                    seed,
                    ..SyntheticConfig::default()
                })
                .unwrap();
                let cfg = TrainConfig {
                    loss: kind,
                    epochs: 50,
                    seed,
                    ..TrainConfig::default()
                };
                train_linear(&data, &cfg).unwrap().last().image_miou
            })
            .collect();
        medians.push(median(scores));
    }
    report(
        6,
        "validation image-IoU ordering after training",
        medians[0] > medians[1] && medians[0] > medians[2],
        &format!(
            "median over 5 seeds: lovasz_hinge {:.4}, hinge {:.4}, cross_entropy {:.4}",
            medians[0], medians[1], medians[2]
        ),
        start.elapsed(),
        Some(Duration::from_secs(300)),
    );
}

/// `a/b < c/d` for nonnegative integers with positive denominators.
fn frac_lt((a, b): (u64, u64), (c, d): (u64, u64)) -> bool {
    (a as u128) * (d as u128) < (c as u128) * (b as u128)
}

fn frac_add((a, b): (u64, u64), (c, d): (u64, u64)) -> (u64, u64) {
    (a * d + c * b, b * d)
}

fn iou_frac(gt: &[usize], pred: &[usize], class: usize) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for (&g, &p) in gt.iter().zip(pred) {
        i += (g == class && p == class) as u64;
        u += (g == class || p == class) as u64;
    }
    if u == 0 {
        (1, 1)
    } else {
        (i, u)
    }
}

#[test]
fn c07_image_and_dataset_iou_diverge() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();

    // ten 50×50 images; the first is all foreground so background is absent there
    let data = generate_circles(&SyntheticConfig::default()).unwrap();
    let mut gt: Vec<Vec<usize>> = data.images.iter().map(|img| img.labels.clone()).collect();
    gt[0].iter_mut().for_each(|l| *l = 1);
    let probe = absent_class_probe(&gt, &gt, 2, 0, &[1234], 0).unwrap();
    let probe_ok = probe.image_iou_before == 1.0
        && probe.image_iou_after == 0.0
        && probe.total_pixels == 25_000
        && probe.dataset_delta_within(2, 1);
    let none = absent_class_probe(&gt, &gt, 2, 0, &[], 0).unwrap();
    let none_ok = none.dataset_counts_before == none.dataset_counts_after && none.image_delta() == 0.0;

    // exact rational image- and dataset-mIoU of the two predictors
    let w = divergence_witness().unwrap();
    let exact = |pred: &[Vec<usize>]| {
        let mut image = (0, 1);
        for (g, p) in w.gt.iter().zip(pred) {
            let per = frac_add(iou_frac(g, p, 0), iou_frac(g, p, 1));
            image = frac_add(image, per);
        }
        let flat_gt: Vec<usize> = w.gt.concat();
        let flat_pred: Vec<usize> = pred.concat();
        let dataset = frac_add(iou_frac(&flat_gt, &flat_pred, 0), iou_frac(&flat_gt, &flat_pred, 1));
        (image, dataset)
    };
    let (image_a, dataset_a) = exact(&w.pred_a);
    let (image_b, dataset_b) = exact(&w.pred_b);
    let rational_ok = frac_lt(image_a, image_b) && frac_lt(dataset_b, dataset_a);
    let library_ok = w.image_miou.0 < w.image_miou.1 && w.dataset_miou.0 > w.dataset_miou.1;

    report(
        7,
        "image-mIoU and dataset-mIoU disagree",
        probe_ok && none_ok && rational_ok && library_ok,
        &format!(
            "probe image IoU {}→{}, dataset counts {:?}→{:?} of {} px; witness image ({:.4}, {:.4}) dataset ({:.4}, {:.4})",
            probe.image_iou_before,
            probe.image_iou_after,
            probe.dataset_counts_before,
            probe.dataset_counts_after,
            probe.total_pixels,
            w.image_miou.0,
            w.image_miou.1,
            w.dataset_miou.0,
            w.dataset_miou.1
        ),
        start.elapsed(),
        None,
    );
}

#[test]
fn c08_gradient_runtime_scaling() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let rows = verify::bench_jaccard_grad(1 << 10, 1 << 20, 8).unwrap();
    let slope = verify::loglog_slope(&rows).unwrap();
    let table: Vec<String> = rows.iter().map(|(p, t)| format!("{p}:{:.0}ns", t)).collect();
    report(
        8,
        "jaccard_grad runtime log-log slope",
        (1.0..=1.15).contains(&slope),
        &format!("slope {slope:.4} in [1.0, 1.15]; {}", table.join(" ")),
        start.elapsed(),
        Some(Duration::from_secs(120)),
    );
}

#[test]
fn c09_prox_against_grid_and_toy_trajectories() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let mut cases: Vec<(Vec<f64>, Vec<bool>, f64)> = Vec::new();
    for p in 1..=3usize {
        for _ in 0..20 {
            let m0: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.5)).collect();
            let delta = random_delta(&mut rng, p);
            let lambda = [0.5, 2.0, 10.0][rng.random_range(0..3)];
            cases.push((m0, delta, lambda));
        }
    }
    // a foreground pixel tied with background pixels whose minimizer reorders them
    cases.push((vec![0.6436875922218515, 0.7078631056933813, 1.161203424879174], vec![false, true, false], 0.5));
    for (m0, delta, lambda) in cases {
        let prox = prox_lovasz_hinge(&m0, &delta, &ProxConfig::new(lambda).unwrap()).unwrap();
        let grid = verify::prox_grid_search(&m0, &delta, lambda, 41, 10).unwrap();
        for (a, b) in prox.iter().zip(&grid) {
            worst = worst.max((a - b).abs());
        }
        instances += 1;
    }
    let grid_ok = worst <= 1e-3;

    let nu = 1.3;
    let runs = toy_trajectories(nu, 0.1, 0.9, 100, [1.0, 2.0]).unwrap();
    let pick = |m| runs.iter().find(|t| t.method == m).unwrap();
    let prox = pick(DescentMethod::Prox);
    let momentum = pick(DescentMethod::Momentum);
    // sign changes of x₂ − ν x₁: crossings of the edge between the two sloped pieces
    let crossings = momentum
        .points
        .windows(2)
        .filter(|w| (w[0].x[1] - nu * w[0].x[0]) * (w[1].x[1] - nu * w[1].x[0]) < 0.0)
        .count();
    let toy_ok = prox.is_monotone() && momentum.increases() >= 1;

    report(
        9,
        "prox vs brute force, prox/momentum on the toy objective",
        grid_ok && toy_ok,
        &format!(
            "{instances} instances p ≤ 3, max |prox − grid| {worst:.2e} (≤ 1e-3); prox monotone: {}; \
             momentum objective increases: {} (need ≥ 1), edge crossings: {crossings}",
            prox.is_monotone(),
            momentum.increases()
        ),
        start.elapsed(),
        Some(Duration::from_secs(60)),
    );
}

#[test]
fn c10_equibatch_windows_cover_all_classes() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut bad_windows = 0usize;
    let mut bad_ids = 0usize;
    for classes in [3usize, 21] {
        let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for c in 0..classes {
            let n = rng.random_range(1..=6);
            index.insert(c, (0..n).map(|_| rng.random_range(0..100)).collect());
        }
        let draws: Vec<(usize, usize)> = Equibatch::new(&index, 77).unwrap().take(10_000).collect();
        for w in draws.windows(classes) {
            let seen: BTreeSet<usize> = w.iter().map(|d| d.0).collect();
            bad_windows += (seen.len() != classes) as usize;
        }
        bad_ids += draws.iter().filter(|(c, id)| !index[c].contains(id)).count();
    }
    report(
        10,
        "equibatch class coverage",
        bad_windows == 0 && bad_ids == 0,
        &format!("10⁴ draws for |C| ∈ {{3, 21}}: {bad_windows} windows missing a class, {bad_ids} foreign ids"),
        start.elapsed(),
        None,
    );
}
