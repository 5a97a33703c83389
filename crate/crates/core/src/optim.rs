//! First-order optimizers: poly learning-rate schedule, momentum, and
//! proximal steps for piecewise-linear objectives.
//!
//! The Lovász-hinge prox works in margin space. The objective there is
//! `ext(max(m, 0))` for the Jaccard extension `ext`; it is evaluated by
//! walking the piecewise-linear surface from the input point, merging sorted
//! coordinates as they collide and freezing coordinates that reach zero.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};
use crate::jaccard::{hinge_margins, jaccard_grad, LossOutput};
use crate::submodular::Permutation;

/// `lr(k) = lr_base · (1 - k / max_iter)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub lr_base: f64,
    pub max_iter: usize,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(lr_base: f64, max_iter: usize, power: f64) -> Result<Self> {
        if !(lr_base > 0.0 && power > 0.0 && max_iter > 0) {
            return Err(Error::InvalidInput(format!(
                "poly schedule needs lr_base > 0, power > 0, max_iter > 0 \
                 (got {lr_base}, {power}, {max_iter})"
            )));
        }
        Ok(Self {
            lr_base,
            max_iter,
            power,
        })
    }

    pub fn lr(&self, k: usize) -> Result<f64> {
        if k > self.max_iter {
            return Err(Error::InvalidInput(format!(
                "iteration {k} is past max_iter {}",
                self.max_iter
            )));
        }
        let frac = 1.0 - k as f64 / self.max_iter as f64;
        Ok(self.lr_base * frac.powf(self.power))
    }
}

/// Heavy-ball momentum: `v ← αv + g`, `Δx = -η v`. `α = 0` is plain SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub alpha: f64,
    velocity: Vec<f64>,
    step_count: usize,
}

impl Momentum {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self {
            alpha,
            velocity: vec![0.0; dim],
            step_count: 0,
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Updates the velocity with `grad` and returns the parameter increment.
    pub fn step(&mut self, grad: &[f64], eta: f64) -> Result<Vec<f64>> {
        check_len(self.velocity.len(), grad.len())?;
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.alpha * *v + g;
        }
        self.step_count += 1;
        Ok(self.velocity.iter().map(|v| -eta * v).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxConfig {
    /// Weight of the quadratic term `(λ/2)‖m − m⁰‖²`.
    pub lambda: f64,
    /// Cap on edge traversals; `None` means `2p + 1`.
    pub max_pieces: Option<usize>,
    /// The walk stops once the projected gradient norm drops below this.
    pub tol: f64,
}

impl ProxConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            max_pieces: None,
            tol: 1e-12,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "prox needs lambda > 0 and tol > 0 (got {}, {})",
                self.lambda, self.tol
            )));
        }
        Ok(())
    }
}

/// Result of [`prox_lovasz_hinge_path`]: the prox point and the corners
/// visited on the way, all in the original coordinate order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxPath {
    pub point: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
    pub pieces: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    end: usize,
    value: f64,
    grad_sum: f64,
}

impl Block {
    fn len(&self) -> f64 {
        (self.end - self.start) as f64
    }

    fn rate(&self) -> f64 {
        self.grad_sum / self.len()
    }
}

/// Approximate prox of the Lovász hinge (Jaccard loss) in margin space:
/// `argmin_m ext(max(m, 0)) + (λ/2)‖m − m0‖²`.
pub fn prox_lovasz_hinge(m0: &[f64], delta: &[bool], cfg: &ProxConfig) -> Result<Vec<f64>> {
    prox_lovasz_hinge_path(m0, delta, cfg).map(|path| path.point)
}

/// [`prox_lovasz_hinge`], also returning the visited corners.
pub fn prox_lovasz_hinge_path(m0: &[f64], delta: &[bool], cfg: &ProxConfig) -> Result<ProxPath> {
    cfg.validate()?;
    check_len(delta.len(), m0.len())?;
    check_finite("m0", m0)?;
    let p = m0.len();
    let max_pieces = cfg.max_pieces.unwrap_or(2 * p + 1);

    let perm = Permutation::decreasing(m0);
    let v0 = perm.gather(m0);
    let d_sorted = perm.gather(delta);
    let active_len = v0.iter().take_while(|&&v| v > 0.0).count();

    // Gradient of the extension as a function of the sorted margins. The
    // chain order never changes during the walk, so neither does this.
    let clamped: Vec<f64> = v0.iter().map(|&v| v.max(0.0)).collect();
    let g = jaccard_grad(&clamped, &d_sorted)?.gradient;

    let mut blocks: Vec<Block> = Vec::new();
    for i in 0..active_len {
        match blocks.last_mut() {
            Some(b) if b.value == v0[i] => {
                b.end = i + 1;
                b.grad_sum += g[i];
            }
            _ => blocks.push(Block {
                start: i,
                end: i + 1,
                value: v0[i],
                grad_sum: g[i],
            }),
        }
    }

    let materialize = |blocks: &[Block]| -> Vec<f64> {
        let mut v = v0.clone();
        for b in blocks {
            v[b.start..b.end].fill(b.value);
        }
        for x in v.iter_mut().take(active_len).skip(blocks.last().map_or(0, |b| b.end)) {
            *x = 0.0;
        }
        perm.scatter(&v)
    };

    let mut iterates = vec![m0.to_vec()];
    let mut pieces = 0;
    loop {
        // Projection of g onto {tied coordinates move together, frozen ones stay}.
        let norm2: f64 = blocks.iter().map(|b| b.len() * b.rate().powi(2)).sum();
        if norm2.sqrt() <= cfg.tol {
            break;
        }
        // stop = 1/λ + <v − v0, ĝ> / <ĝ, ĝ>
        let mut inner = 0.0;
        for b in &blocks {
            let rate = b.rate();
            for &v0i in &v0[b.start..b.end] {
                inner += (b.value - v0i) * rate;
            }
        }
        let stop = 1.0 / cfg.lambda + inner / norm2;
        if stop <= 0.0 {
            break;
        }

        // Next edge along −ĝ: two neighbouring blocks meet, or the last one reaches zero.
        let mut t_edge = f64::INFINITY;
        for w in blocks.windows(2) {
            let closing = w[0].rate() - w[1].rate();
            if closing > 0.0 {
                t_edge = t_edge.min((w[0].value - w[1].value) / closing);
            }
        }
        if let Some(last) = blocks.last() {
            if last.rate() > 0.0 {
                t_edge = t_edge.min(last.value / last.rate());
            }
        }

        if stop < t_edge {
            for b in blocks.iter_mut() {
                b.value -= stop * b.rate();
            }
            iterates.push(materialize(&blocks));
            break;
        }

        pieces += 1;
        if pieces > max_pieces {
            return Err(Error::ProxNotConverged {
                pieces: max_pieces,
                partial: materialize(&blocks),
            });
        }
        let hit = |t: f64| t <= t_edge * (1.0 + 1e-12) + 1e-300;
        let mut merge_after = vec![false; blocks.len()];
        for (k, w) in blocks.windows(2).enumerate() {
            let closing = w[0].rate() - w[1].rate();
            merge_after[k] = closing > 0.0 && hit((w[0].value - w[1].value) / closing);
        }
        let zero_hit = blocks
            .last()
            .is_some_and(|b| b.rate() > 0.0 && hit(b.value / b.rate()));
        for b in blocks.iter_mut() {
            b.value -= t_edge * b.rate();
        }

        let mut merged: Vec<Block> = Vec::with_capacity(blocks.len());
        for (k, b) in blocks.iter().enumerate() {
            match merged.last_mut() {
                Some(prev) if merge_after[k - 1] => {
                    prev.end = b.end;
                    prev.grad_sum += b.grad_sum;
                }
                _ => merged.push(*b),
            }
        }
        if zero_hit {
            // The last block and anything merged into it sits at zero and
            // stays there: the surface is flat below zero.
            merged.pop();
        }
        blocks = merged;
        iterates.push(materialize(&blocks));
    }

    Ok(ProxPath {
        point: materialize(&blocks),
        iterates,
        pieces,
    })
}

/// Loss-layer direction for proximal backpropagation through the Lovász
/// hinge: `λ (m − prox(m))` on the raw margins `m = 1 − F y`, chained to the
/// scores. The value is the ordinary Lovász-hinge loss.
pub fn prox_hinge_direction(scores: &[f64], labels: &[i8], cfg: &ProxConfig) -> Result<LossOutput> {
    let margins = hinge_margins(scores, labels)?;
    let raw: Vec<f64> = scores
        .iter()
        .zip(labels)
        .map(|(&f, &y)| 1.0 - f * f64::from(y))
        .collect();
    let delta = crate::jaccard::foreground(labels);
    let value = jaccard_grad(&margins.errors, &delta)?.value;
    let prox = prox_lovasz_hinge(&raw, &delta, cfg)?;
    let grad = raw
        .iter()
        .zip(&prox)
        .zip(labels)
        .map(|((m, q), &y)| -f64::from(y) * cfg.lambda * (m - q))
        .collect();
    Ok(LossOutput { value, grad })
}

/// Pointwise maximum of affine functions `max_k (⟨a_k, x⟩ + b_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxAffine {
    slopes: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl MaxAffine {
    pub fn new(slopes: Vec<Vec<f64>>, offsets: Vec<f64>) -> Result<Self> {
        check_len(slopes.len(), offsets.len())?;
        let dim = slopes
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("need at least one piece".into()))?;
        for s in &slopes {
            check_len(dim, s.len())?;
        }
        Ok(Self { slopes, offsets })
    }

    /// `max(0, ν x₁, x₂)`.
    pub fn toy(nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::InvalidInput(format!("nu must be positive, got {nu}")));
        }
        Self::new(
            vec![vec![0.0, 0.0], vec![nu, 0.0], vec![0.0, 1.0]],
            vec![0.0; 3],
        )
    }

    pub fn dim(&self) -> usize {
        self.slopes[0].len()
    }

    fn piece(&self, k: usize, x: &[f64]) -> f64 {
        self.slopes[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offsets[k]
    }

    /// Value and the slope of the first piece attaining the maximum.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut best = 0;
        let mut best_val = self.piece(0, x);
        for k in 1..self.slopes.len() {
            let v = self.piece(k, x);
            if v > best_val {
                best = k;
                best_val = v;
            }
        }
        (best_val, self.slopes[best].clone())
    }

    /// Exact `argmin_u f(u) + (λ/2)‖u − x‖²`, by enumerating active sets of
    /// at most `dim + 1` pieces and solving their KKT systems.
    pub fn prox(&self, x: &[f64], lambda: f64) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        if !(lambda > 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        let n = self.slopes.len();
        let max_active = (self.dim() + 1).min(n);
        let objective = |u: &[f64]| {
            let dist2: f64 = u.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            self.eval(u).0 + 0.5 * lambda * dist2
        };

        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut fallback: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let active: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
            if active.len() > max_active {
                continue;
            }
            let Some((u, weights)) = self.solve_active(x, lambda, &active) else {
                continue;
            };
            let obj = objective(&u);
            if fallback.as_ref().is_none_or(|(o, _)| obj < *o) {
                fallback = Some((obj, u.clone()));
            }
            let level = self.piece(active[0], &u);
            let feasible = weights.iter().all(|&w| w >= -1e-12)
                && (0..n).all(|k| self.piece(k, &u) <= level + 1e-12 * (1.0 + level.abs()));
            if feasible && best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, u));
            }
        }
        best.or(fallback)
            .map(|(_, u)| u)
            .ok_or_else(|| Error::InvalidInput("degenerate piecewise-linear function".into()))
    }

    fn solve_active(&self, x: &[f64], lambda: f64, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
        let k = active.len();
        let a0 = &self.slopes[active[0]];
        let mut mat = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for (row, &j) in active.iter().enumerate().skip(1) {
            let diff: Vec<f64> = self.slopes[j].iter().zip(a0).map(|(a, b)| a - b).collect();
            for (col, &l) in active.iter().enumerate() {
                let dot: f64 = diff.iter().zip(&self.slopes[l]).map(|(a, b)| a * b).sum();
                mat[(row - 1, col)] = dot / lambda;
            }
            rhs[row - 1] = diff.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + self.offsets[j]
                - self.offsets[active[0]];
        }
        for col in 0..k {
            mat[(k - 1, col)] = 1.0;
        }
        rhs[k - 1] = 1.0;
        let w = mat.lu().solve(&rhs)?;
        if w.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut u = x.to_vec();
        for (col, &l) in active.iter().enumerate() {
            for (ui, a) in u.iter_mut().zip(&self.slopes[l]) {
                *ui -= w[col] * a / lambda;
            }
        }
        Some((u, w.iter().copied().collect()))
    }

    /// Prox step whose length matches the gradient step `η ∇f(x)`: finds
    /// `λ` with `‖prox_λ(x) − x‖ = η‖∇f(x)‖` by bisection and returns that
    /// prox point, i.e. the minimizer of `f` over the ball of that radius.
    pub fn matched_prox(&self, x: &[f64], eta: f64) -> Result<Vec<f64>> {
        let (_, g) = self.eval(x);
        let radius = eta * g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if radius == 0.0 {
            return Ok(x.to_vec());
        }
        let dist = |u: &[f64]| u.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let max_slope = self
            .slopes
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);

        // ‖prox_λ(x) − x‖ ≤ max_slope / λ, and is nonincreasing in λ.
        let mut hi = max_slope / radius;
        let mut lo = hi * 1e-12;
        let at_lo = self.prox(x, lo)?;
        if dist(&at_lo) <= radius {
            return Ok(at_lo);
        }
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if dist(&self.prox(x, mid)?) > radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi / lo < 1.0 + 1e-14 {
                break;
            }
        }
        self.prox(x, hi)
    }
}

/// Value of `max(0, ν x₁, x₂)` and the slope of its active piece (ties go to
/// the zero piece, then to `ν x₁`).
pub fn toy_piecewise_objective(x: [f64; 2], nu: f64) -> Result<(f64, [f64; 2])> {
    let f = MaxAffine::toy(nu)?;
    let (v, g) = f.eval(&x);
    Ok((v, [g[0], g[1]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DescentMethod {
    GradientDescent,
    Momentum,
    Prox,
}

impl DescentMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::GradientDescent => "gradient_descent",
            Self::Momentum => "momentum",
            Self::Prox => "prox",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub objective: f64,
    pub x: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub method: DescentMethod,
    /// Starting point at step 0, then one point per step.
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn objectives(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.objective).collect()
    }

    /// True if the objective never goes up from one step to the next.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].objective <= w[0].objective)
    }

    pub fn increases(&self) -> usize {
        self.points
            .windows(2)
            .filter(|w| w[1].objective > w[0].objective)
            .count()
    }

    /// `step,objective,x1,x2` rows, starting point included.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "objective", "x1", "x2"])?;
        for p in &self.points {
            w.write_record([
                p.step.to_string(),
                p.objective.to_string(),
                p.x[0].to_string(),
                p.x[1].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs gradient descent, momentum and matched-radius prox steps on the toy
/// objective from `start`.
pub fn toy_trajectories(
    nu: f64,
    eta: f64,
    alpha: f64,
    steps: usize,
    start: [f64; 2],
) -> Result<Vec<Trajectory>> {
    let f = MaxAffine::toy(nu)?;
    let objective = |x: [f64; 2]| f.eval(&x).0;
    let mut out = Vec::new();
    for method in [
        DescentMethod::GradientDescent,
        DescentMethod::Momentum,
        DescentMethod::Prox,
    ] {
        let mut x = start;
        let mut momentum = Momentum::new(2, if method == DescentMethod::Momentum { alpha } else { 0.0 });
        let mut points = vec![TrajectoryPoint {
            step: 0,
            objective: objective(x),
            x,
        }];
        for step in 1..=steps {
            x = match method {
                DescentMethod::Prox => {
                    let u = f.matched_prox(&x, eta)?;
                    [u[0], u[1]]
                }
                _ => {
                    let (_, g) = f.eval(&x);
                    let dx = momentum.step(&g, eta)?;
                    [x[0] + dx[0], x[1] + dx[1]]
                }
            };
            points.push(TrajectoryPoint {
                step,
                objective: objective(x),
                x,
            });
        }
        out.push(Trajectory { method, points });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn poly_schedule() {
        let s = PolySchedule::new(2.5e-4, 100, 0.9).unwrap();
        assert_eq!(s.lr(0).unwrap(), 2.5e-4);
        assert_eq!(s.lr(100).unwrap(), 0.0);
        assert_abs_diff_eq!(s.lr(50).unwrap() / 2.5e-4, 0.535_886_731_268_146, epsilon = 1e-12);
        assert!(s.lr(101).is_err());
        assert!(PolySchedule::new(0.0, 10, 0.9).is_err());
    }

    #[test]
    fn momentum_unrolls() {
        let g = [1.0, -2.0];
        let mut sgd = Momentum::new(2, 0.0);
        assert_eq!(sgd.step(&g, 0.1).unwrap(), vec![-0.1, 0.2]);

        let mut m = Momentum::new(2, 0.5);
        m.step(&g, 1.0).unwrap();
        assert_eq!(m.velocity(), &[1.0, -2.0]);
        m.step(&g, 1.0).unwrap();
        assert_eq!(m.velocity(), &[1.5, -3.0]);
        // zero gradient afterwards: motion decays by α per step
        let d1 = m.step(&[0.0, 0.0], 1.0).unwrap();
        let d2 = m.step(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(d2[0], 0.5 * d1[0]);
        assert_eq!(m.step_count(), 4);
        assert!(m.step(&[0.0], 1.0).is_err());
    }

    #[test]
    fn prox_inside_a_piece_is_a_gradient_step() {
        let cfg = ProxConfig::new(10.0).unwrap();
        let out = prox_lovasz_hinge(&[0.4, 0.1], &[true, true], &cfg).unwrap();
        assert_abs_diff_eq!(out[0], 0.35, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn prox_approaches_identity_for_large_lambda() {
        let m0 = [0.8, 0.3, 0.5, -0.2];
        let delta = [true, false, true, false];
        let cfg = ProxConfig::new(1e9).unwrap();
        let out = prox_lovasz_hinge(&m0, &delta, &cfg).unwrap();
        for (a, b) in out.iter().zip(&m0) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn prox_freezes_negative_and_zeroed_margins() {
        let cfg = ProxConfig::new(0.1).unwrap();
        let out = prox_lovasz_hinge(&[0.5, -0.3], &[true, false], &cfg).unwrap();
        assert_eq!(out, vec![0.0, -0.3]);
    }

    #[test]
    fn prox_reports_non_convergence() {
        let cfg = ProxConfig {
            lambda: 0.01,
            max_pieces: Some(0),
            tol: 1e-12,
        };
        match prox_lovasz_hinge(&[0.9, 0.2, 0.5], &[true, false, false], &cfg) {
            Err(Error::ProxNotConverged { partial, .. }) => assert_eq!(partial.len(), 3),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn prox_direction_matches_gradient_inside_piece() {
        let scores = [0.2, -0.4, 0.7, 0.1];
        let labels = [1i8, -1, 1, -1];
        let cfg = ProxConfig::new(1e4).unwrap();
        let prox = prox_hinge_direction(&scores, &labels, &cfg).unwrap();
        let plain = crate::jaccard::lovasz_hinge(&scores, &labels).unwrap();
        assert_abs_diff_eq!(prox.value, plain.value);
        for (a, b) in prox.grad.iter().zip(&plain.grad) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn toy_objective_examples() {
        assert_eq!(toy_piecewise_objective([-1.0, -1.0], 1.3).unwrap(), (0.0, [0.0, 0.0]));
        assert_eq!(toy_piecewise_objective([1.0, 0.0], 0.7).unwrap(), (0.7, [0.7, 0.0]));
        assert_eq!(toy_piecewise_objective([1.0, 1.0], 1.3).unwrap().0, 1.3);
        // tie between the two sloped pieces goes to ν x₁
        assert_eq!(toy_piecewise_objective([1.0, 1.0], 1.0).unwrap().1, [1.0, 0.0]);
        assert!(toy_piecewise_objective([1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn toy_prox_cases() {
        let f = MaxAffine::toy(1.0).unwrap();
        // interior of the x₂ piece: plain gradient step
        let u = f.prox(&[0.0, 2.0], 10.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 1.9, epsilon = 1e-12);
        // on the edge x₁ = x₂: slides along it with the averaged slope
        let u = f.prox(&[1.0, 1.0], 10.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.95, epsilon = 1e-12);
        // tiny λ: lands on the vertex
        let u = f.prox(&[0.1, 0.1], 1e-3).unwrap();
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matched_prox_keeps_step_length() {
        let f = MaxAffine::toy(1.3).unwrap();
        let x = [1.0, 1.3];
        let u = f.matched_prox(&x, 0.1).unwrap();
        let (_, g) = f.eval(&x);
        let r = 0.1 * (g[0].powi(2) + g[1].powi(2)).sqrt();
        let d = ((u[0] - x[0]).powi(2) + (u[1] - x[1]).powi(2)).sqrt();
        assert!((d - r).abs() < 1e-9, "{d} vs {r}");
        // stays on the edge ν x₁ = x₂
        assert_abs_diff_eq!(1.3 * u[0], u[1], epsilon = 1e-9);
    }

    #[test]
    fn trajectories_have_expected_shape() {
        let t = toy_trajectories(1.3, 0.1, 0.9, 5, [1.0, 1.0]).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|tr| tr.points.len() == 6));
        let empty = toy_trajectories(1.3, 0.1, 0.9, 0, [1.0, 1.0]).unwrap();
        assert!(empty.iter().all(|tr| tr.points.len() == 1));
        let mut buf = Vec::new();
        t[0].write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("step,objective,x1,x2\n0,"));
    }
}
