//! Numerical checks shared by the test suites and the `props` command:
//! finite-difference gradient checks, a brute-force prox minimizer, and a
//! runtime benchmark of the Jaccard extension gradient.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::{absent_class_probe, divergence_witness, generate_circles, Equibatch, SyntheticConfig};
use crate::jaccard::{self, ClassMode};
use crate::optim::{prox_lovasz_hinge_path, MaxAffine, Momentum, PolySchedule, ProxConfig};
use crate::submodular::{is_submodular, lovasz_extension, threshold_oracle};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Minimum gap between sorted errors and from every kink at a test point.
pub const TIE_GAP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradLoss {
    LovaszHinge,
    LovaszSoftmax,
    CrossEntropy,
    Hinge,
    RahmanWang,
}

impl GradLoss {
    pub const ALL: [GradLoss; 5] = [
        GradLoss::LovaszHinge,
        GradLoss::LovaszSoftmax,
        GradLoss::CrossEntropy,
        GradLoss::Hinge,
        GradLoss::RahmanWang,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LovaszHinge => "lovasz_hinge",
            Self::LovaszSoftmax => "lovasz_softmax",
            Self::CrossEntropy => "cross_entropy",
            Self::Hinge => "hinge",
            Self::RahmanWang => "rahman_wang",
        }
    }

    fn multiclass(self) -> bool {
        matches!(self, Self::LovaszSoftmax | Self::CrossEntropy)
    }
}

impl fmt::Display for GradLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown loss {s:?}")))
    }
}

fn min_sorted_gap(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

/// One random test instance: flat scores (`p × classes` row-major for
/// multiclass losses) and labels.
struct Instance {
    scores: Vec<f64>,
    binary: Vec<i8>,
    classes: Vec<usize>,
}

fn binary_tie_free(scores: &[f64], labels: &[i8], loss: GradLoss) -> bool {
    if loss == GradLoss::RahmanWang {
        return true;
    }
    let mut margins: Vec<f64> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| 1.0 - s * y as f64)
        .collect();
    if margins.iter().any(|m| m.abs() <= TIE_GAP) {
        return false;
    }
    // only the positive margins enter the sort
    let mut positive: Vec<f64> = margins.drain(..).filter(|&m| m > 0.0).collect();
    min_sorted_gap(&mut positive) > TIE_GAP
}

fn softmax_tie_free(scores: &Array2<f64>, labels: &[usize]) -> Result<bool> {
    let probs = jaccard::softmax(scores.view());
    for c in 0..scores.ncols() {
        let mut errors = jaccard::softmax_errors(probs.view(), labels, c)?;
        if min_sorted_gap(&mut errors) <= TIE_GAP {
            return Ok(false);
        }
    }
    Ok(true)
}

fn draw_instance(loss: GradLoss, p: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Instance> {
    for _ in 0..10_000 {
        if loss.multiclass() {
            let scores: Vec<f64> = (0..p * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..classes)).collect();
            let arr = Array2::from_shape_vec((p, classes), scores.clone()).expect("shape matches");
            if loss == GradLoss::CrossEntropy || softmax_tie_free(&arr, &labels)? {
                return Ok(Instance {
                    scores,
                    binary: Vec::new(),
                    classes: labels,
                });
            }
        } else {
            let scores: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<i8> = (0..p).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            if binary_tie_free(&scores, &labels, loss) {
                return Ok(Instance {
                    scores,
                    binary: labels,
                    classes: Vec::new(),
                });
            }
        }
    }
    Err(Error::InvalidInput(format!(
        "could not draw a tie-free point for {loss} with p = {p}"
    )))
}

fn loss_and_grad(loss: GradLoss, inst: &Instance, scores: &[f64], classes: usize) -> Result<(f64, Vec<f64>)> {
    let out = match loss {
        GradLoss::LovaszHinge => jaccard::lovasz_hinge(scores, &inst.binary)?,
        GradLoss::Hinge => jaccard::hinge(scores, &inst.binary)?,
        GradLoss::RahmanWang => jaccard::rahman_wang_from_scores(scores, &inst.binary)?,
        GradLoss::LovaszSoftmax | GradLoss::CrossEntropy => {
            let arr = Array2::from_shape_vec((scores.len() / classes, classes), scores.to_vec())
                .expect("shape matches");
            let out = if loss == GradLoss::CrossEntropy {
                jaccard::cross_entropy(arr.view(), &inst.classes)?
            } else {
                jaccard::lovasz_softmax(arr.view(), &inst.classes, ClassMode::All)?
            };
            return Ok((out.value, out.grad.iter().copied().collect()));
        }
    };
    Ok((out.value, out.grad))
}

/// Largest absolute difference between the analytic gradient and central
/// finite differences, per trial, at random tie-free points.
pub fn gradcheck(loss: GradLoss, p: usize, classes: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(Error::InvalidInput("p must be at least 1".into()));
    }
    if loss.multiclass() && classes < 2 {
        return Err(Error::InvalidInput("multiclass losses need at least 2 classes".into()));
    }
    let classes = if loss.multiclass() { classes } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let inst = draw_instance(loss, p, classes, &mut rng)?;
        let (_, grad) = loss_and_grad(loss, &inst, &inst.scores, classes)?;
        let mut worst: f64 = 0.0;
        let mut x = inst.scores.clone();
        for k in 0..x.len() {
            let orig = x[k];
            x[k] = orig + FD_STEP;
            let (up, _) = loss_and_grad(loss, &inst, &x, classes)?;
            x[k] = orig - FD_STEP;
            let (down, _) = loss_and_grad(loss, &inst, &x, classes)?;
            x[k] = orig;
            worst = worst.max(((up - down) / (2.0 * FD_STEP) - grad[k]).abs());
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Prox objective `ext(max(m, 0)) + (λ/2)‖m − m⁰‖²` of the Lovász hinge in
/// margin space.
pub fn prox_objective(m: &[f64], m0: &[f64], delta: &[bool], lambda: f64) -> Result<f64> {
    let clipped: Vec<f64> = m.iter().map(|v| v.max(0.0)).collect();
    let ext = jaccard::jaccard_grad(&clipped, delta)?.value;
    let quad: f64 = m.iter().zip(m0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ext + 0.5 * lambda * quad)
}

/// Grid-search minimizer of [`prox_objective`] for small `p`. Extension
/// gradients lie in `[0, 1]ᵖ`, so the minimizer lies in the box
/// `[m⁰ − 1/λ, m⁰]`; the box is searched on a regular grid and then
/// repeatedly shrunk around the best point.
pub fn prox_grid_search(m0: &[f64], delta: &[bool], lambda: f64, points: usize, rounds: usize) -> Result<Vec<f64>> {
    let p = m0.len();
    if p == 0 || p > 4 {
        return Err(Error::InvalidInput(format!("grid search supports 1 ≤ p ≤ 4, got {p}")));
    }
    if points < 3 {
        return Err(Error::InvalidInput("grid needs at least 3 points per axis".into()));
    }
    let mut lo: Vec<f64> = m0.iter().map(|v| v - 1.0 / lambda).collect();
    let mut hi = m0.to_vec();
    let mut best = m0.to_vec();
    let mut best_val = prox_objective(&best, m0, delta, lambda)?;
    let total = points.pow(p as u32);
    let mut m = vec![0.0; p];
    for _ in 0..rounds {
        for flat in 0..total {
            let mut rest = flat;
            for d in 0..p {
                let k = rest % points;
                rest /= points;
                m[d] = lo[d] + (hi[d] - lo[d]) * k as f64 / (points - 1) as f64;
            }
            let v = prox_objective(&m, m0, delta, lambda)?;
            if v < best_val {
                best_val = v;
                best.copy_from_slice(&m);
            }
        }
        for d in 0..p {
            let cell = (hi[d] - lo[d]) / (points - 1) as f64;
            lo[d] = best[d] - 2.0 * cell;
            hi[d] = best[d] + 2.0 * cell;
        }
    }
    Ok(best)
}

struct BenchCase {
    p: usize,
    errors: Vec<f64>,
    delta: Vec<bool>,
    batch: usize,
}

impl BenchCase {
    fn new(p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ p as u64);
        let errors: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        let mut delta: Vec<bool> = (0..p).map(|_| rng.random::<bool>()).collect();
        delta.shuffle(&mut rng);
        Self {
            p,
            errors,
            delta,
            batch: bench_batch(p),
        }
    }

    /// Mean nanoseconds per call over one batch.
    fn time_batch(&self) -> Result<f64> {
        let start = Instant::now();
        for _ in 0..self.batch {
            black_box(jaccard::jaccard_grad(black_box(&self.errors), black_box(&self.delta))?);
        }
        Ok(start.elapsed().as_nanos() as f64 / self.batch as f64)
    }
}

/// Calls per timed batch at size `p`, so each batch covers about 2²⁰ elements.
pub fn bench_batch(p: usize) -> usize {
    ((1usize << 20) / p.max(1)).max(1)
}

/// Median over `rounds` of the mean per-call time of `jaccard_grad` on one
/// random instance of each size in `ps`. Sizes are interleaved within every
/// round so slow drift of the machine affects all sizes alike.
pub fn time_jaccard_grad(ps: &[usize], rounds: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    if ps.contains(&0) || rounds == 0 {
        return Err(Error::InvalidInput("sizes and rounds must be positive".into()));
    }
    let cases: Vec<BenchCase> = ps.iter().map(|&p| BenchCase::new(p, seed)).collect();
    for case in &cases {
        case.time_batch()?;
    }
    let mut samples = vec![Vec::with_capacity(rounds); cases.len()];
    for _ in 0..rounds {
        for (case, slot) in cases.iter().zip(&mut samples) {
            slot.push(case.time_batch()?);
        }
    }
    Ok(cases
        .iter()
        .zip(samples)
        .map(|(case, mut ts)| {
            ts.sort_by(f64::total_cmp);
            (case.p, ts[ts.len() / 2].max(1.0))
        })
        .collect())
}

pub const BENCH_ROUNDS: usize = 15;

/// `(p, median_ns)` for each power of two from `p_min` to `p_max`.
pub fn bench_jaccard_grad(p_min: usize, p_max: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    if !p_min.is_power_of_two() || !p_max.is_power_of_two() || p_min > p_max {
        return Err(Error::InvalidInput(format!(
            "p range must be powers of two with p_min ≤ p_max, got {p_min}..{p_max}"
        )));
    }
    let ps: Vec<usize> = std::iter::successors(Some(p_min), |&p| Some(p * 2))
        .take_while(|&p| p <= p_max)
        .collect();
    time_jaccard_grad(&ps, BENCH_ROUNDS, seed)
}

/// Least-squares slope of `ln t` against `ln p`.
pub fn loglog_slope(rows: &[(usize, f64)]) -> Option<f64> {
    if rows.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|&(p, t)| ((p as f64).ln(), t.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

fn random_delta(rng: &mut ChaCha8Rng, p: usize) -> Vec<bool> {
    (0..p).map(|_| rng.random::<bool>()).collect()
}

fn check_oracles(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.random_range(1..=64);
        let delta = random_delta(rng, p);
        let m: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        let fast = jaccard::jaccard_grad(&m, &delta)?;
        let setfn = jaccard::jaccard_set_function(&delta)?;
        let generic = lovasz_extension(&setfn, &m)?;
        worst = worst
            .max((fast.value - generic.value).abs())
            .max((fast.value - threshold_oracle(&setfn, &m)?).abs());
        for (a, b) in fast.gradient.iter().zip(&generic.gradient) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Check::new(
        "oracle_equivalence",
        worst <= 1e-9,
        format!("max abs err {worst:.2e} over 1000 instances"),
    ))
}

fn check_submodular() -> Result<Check> {
    let mut failures = 0;
    for p in 1..=8usize {
        for bits in 0..1u32 << p {
            let delta: Vec<bool> = (0..p).map(|i| bits >> i & 1 == 1).collect();
            failures += !is_submodular(&jaccard::jaccard_set_function(&delta)?)? as usize;
        }
    }
    Ok(Check::new(
        "submodularity",
        failures == 0,
        format!("{failures} non-submodular ground truths for p ≤ 8"),
    ))
}

fn check_vertices() -> Result<Check> {
    let mut mismatches = 0;
    for p in 1..=6usize {
        for dbits in 0..1u32 << p {
            let delta: Vec<bool> = (0..p).map(|i| dbits >> i & 1 == 1).collect();
            for mbits in 0..1u32 << p {
                let vertex: Vec<f64> = (0..p).map(|i| (mbits >> i & 1) as f64).collect();
                let errors = mbits.count_ones();
                let expected = if errors == 0 {
                    0.0
                } else {
                    errors as f64 / (mbits | dbits).count_ones() as f64
                };
                mismatches += (jaccard::jaccard_grad(&vertex, &delta)?.value != expected) as usize;
            }
        }
    }
    Ok(Check::new(
        "vertex_interpolation",
        mismatches == 0,
        format!("{mismatches} vertices differ from the set function"),
    ))
}

fn check_gradients(seed: u64) -> Result<Vec<Check>> {
    GradLoss::ALL
        .into_iter()
        .map(|loss| {
            let errs = gradcheck(loss, 16, 4, 100, seed)?;
            let worst = errs.iter().copied().fold(0.0, f64::max);
            Ok(Check::new(
                match loss {
                    GradLoss::LovaszHinge => "gradcheck_lovasz_hinge",
                    GradLoss::LovaszSoftmax => "gradcheck_lovasz_softmax",
                    GradLoss::CrossEntropy => "gradcheck_cross_entropy",
                    GradLoss::Hinge => "gradcheck_hinge",
                    GradLoss::RahmanWang => "gradcheck_rahman_wang",
                },
                worst < 1e-4,
                format!("max err {worst:.2e} over 100 points"),
            ))
        })
        .collect()
}

fn check_prox(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut grid_err: f64 = 0.0;
    let mut path_rises = 0;
    for _ in 0..30 {
        let p = rng.random_range(1..=3);
        let m0: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.5)).collect();
        let delta = random_delta(rng, p);
        let lambda = rng.random_range(0.5..10.0);
        let cfg = ProxConfig::new(lambda)?;
        let path = prox_lovasz_hinge_path(&m0, &delta, &cfg)?;
        let grid = prox_grid_search(&m0, &delta, lambda, 41, 10)?;
        for (a, b) in path.point.iter().zip(&grid) {
            grid_err = grid_err.max((a - b).abs());
        }
        let objectives = std::iter::once(&m0)
            .chain(&path.iterates)
            .chain(std::iter::once(&path.point))
            .map(|v| prox_objective(v, &m0, &delta, lambda))
            .collect::<Result<Vec<f64>>>()?;
        path_rises += objectives.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    }

    let f = MaxAffine::toy(1.3)?;
    let mut dominated = 0;
    for _ in 0..100 {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let eta = rng.random_range(0.01..1.0);
        let (fx, g) = f.eval(&x);
        let gd = [x[0] - eta * g[0], x[1] - eta * g[1]];
        let prox = f.matched_prox(&x, eta)?;
        dominated += (f.eval(&prox).0 <= f.eval(&gd).0 + 1e-12 && f.eval(&prox).0 <= fx + 1e-12) as usize;
    }

    Ok(vec![
        Check::new(
            "prox_matches_grid",
            grid_err <= 1e-3,
            format!("max |prox − grid| {grid_err:.2e} over 30 instances with p ≤ 3"),
        ),
        Check::new(
            "prox_path_descends",
            path_rises == 0,
            format!("{path_rises} increases of the prox objective along the path"),
        ),
        Check::new(
            "prox_dominates_gradient_step",
            dominated == 100,
            format!("{dominated}/100 starts"),
        ),
    ])
}

fn check_optimizers(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let alpha = 0.7;
    let grads: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut m = Momentum::new(3, alpha);
    let mut worst: f64 = 0.0;
    for t in 0..grads.len() {
        m.step(&grads[t], 1.0)?;
        for k in 0..3 {
            let unrolled: f64 = (0..=t).map(|j| alpha.powi(j as i32) * grads[t - j][k]).sum();
            worst = worst.max((m.velocity()[k] - unrolled).abs());
        }
    }

    let schedule = PolySchedule::new(0.01, 1000, 0.9)?;
    let rates = (0..=1000).map(|k| schedule.lr(k)).collect::<Result<Vec<f64>>>()?;
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]) && rates[1000] == 0.0;

    Ok(vec![
        Check::new(
            "momentum_unrolls",
            worst <= 1e-12,
            format!("max deviation from the weighted gradient sum {worst:.2e}"),
        ),
        Check::new("poly_lr_decreasing", monotone, "1000 steps".into()),
    ])
}

fn check_harness(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad_windows = 0;
    for classes in [3usize, 21] {
        let index: BTreeMap<usize, Vec<usize>> = (0..classes)
            .map(|c| (c, (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..50)).collect()))
            .collect();
        let draws: Vec<usize> = Equibatch::new(&index, seed)?.take(10_000).map(|d| d.0).collect();
        bad_windows += draws
            .windows(classes)
            .filter(|w| w.iter().collect::<BTreeSet<_>>().len() != classes)
            .count();
    }

    let w = divergence_witness()?;
    let diverges = (w.image_miou.0 < w.image_miou.1) && (w.dataset_miou.0 > w.dataset_miou.1);

    let data = generate_circles(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })?;
    let mut gt: Vec<Vec<usize>> = data.images.iter().map(|i| i.labels.clone()).collect();
    gt[0].iter_mut().for_each(|l| *l = 1);
    let probe = absent_class_probe(&gt, &gt, 2, 0, &[0], 0)?;
    let probe_ok = probe.image_iou_before == 1.0 && probe.image_iou_after == 0.0 && probe.dataset_delta_within(2, 1);

    Ok(vec![
        Check::new(
            "equibatch_coverage",
            bad_windows == 0,
            format!("{bad_windows} windows missing a class"),
        ),
        Check::new(
            "metric_divergence",
            diverges,
            format!("image {:?} vs dataset {:?}", w.image_miou, w.dataset_miou),
        ),
        Check::new(
            "absent_class_probe",
            probe_ok,
            format!(
                "image IoU {}→{}, dataset counts {:?}→{:?}",
                probe.image_iou_before, probe.image_iou_after, probe.dataset_counts_before, probe.dataset_counts_after
            ),
        ),
    ])
}

/// The invariant suite: oracle agreement, submodularity, vertex values,
/// gradient checks, prox correctness, optimizer recursions, sampling
/// coverage and metric probes.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![check_oracles(&mut rng)?, check_submodular()?, check_vertices()?];
    checks.extend(check_gradients(seed)?);
    checks.extend(check_prox(&mut rng)?);
    checks.extend(check_optimizers(&mut rng)?);
    checks.extend(check_harness(seed)?);
    Ok(checks)
}
