//! Adam (for the scalar PDE coefficients) and L-BFGS with a strong-Wolfe
//! line search (for network parameters).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    LengthMismatch { params: usize, grads: usize },
    #[error("NaN gradient at index {0}")]
    NanGradient(usize),
    #[error("objective returned a non-finite loss at the starting point")]
    NonFiniteLoss,
}

/// Adam hyperparameters. Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize, hyper: AdamParams) -> Self {
        AdamState {
            hyper,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(OptimError::LengthMismatch {
                params: params.len(),
                grads: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| g.is_nan()) {
            return Err(OptimError::NanGradient(i));
        }
        self.t += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// L-BFGS settings. Defaults: memory 10, c1 1e-4, c2 0.9, gradient tolerance
/// 1e-9, progress tolerance off.
#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Stop when |f_old - f_new| <= progress_tol * max(1, |f_new|). Zero
    /// disables the check.
    pub progress_tol: f64,
    /// Wolfe-accepted steps whose directional slope still exceeds this
    /// fraction of the initial slope are refined once by cubic
    /// interpolation. Near zero makes line searches exact on quadratics at
    /// roughly one extra evaluation per iteration.
    pub slope_refine_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_iters: 200,
            grad_tol: 1e-9,
            progress_tol: 0.0,
            slope_refine_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientConverged,
    MaxIterations,
    LineSearchFailed,
    ProgressConverged,
}

/// One accepted iteration, kept so callers can audit the Wolfe conditions.
#[derive(Debug, Clone, Copy)]
pub struct AcceptedStep {
    pub alpha: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Directional derivative g(x)^T p at the step origin.
    pub dphi0: f64,
    /// Directional derivative g(x + alpha p)^T p at the accepted point.
    pub dphi_alpha: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evals: usize,
    pub status: LbfgsStatus,
    pub steps: Vec<AcceptedStep>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizer of the cubic through (x1, f1, g1) and (x2, f2, g2), clamped to
/// `bounds`. Falls back to bisection when the cubic has no interior minimum.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = bounds;
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2sq = d1 * d1 - g1 * g2;
    if d2sq >= 0.0 {
        let d2 = d2sq.sqrt().copysign(x2 - x1);
        let min_pos = x2 - (x2 - x1) * (g2 + d2 - d1) / (g2 - g1 + 2.0 * d2);
        if min_pos.is_finite() {
            return min_pos.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct LinePoint {
    alpha: f64,
    f: f64,
    dphi: f64,
    grad: Vec<f64>,
}

/// Stateful L-BFGS: (s, y) curvature history plus the current iterate, so
/// callers can interleave other updates between steps. When the objective
/// changes between steps, call [`LbfgsState::mark_objective_changed`] so the
/// cached value and gradient are refreshed before the next direction.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub cfg: LbfgsConfig,
    history: Vec<(Vec<f64>, Vec<f64>, f64)>, // (s, y, 1/s'y)
    x: Vec<f64>,
    loss: f64,
    grad: Vec<f64>,
    evaluated: bool,
    evals: usize,
    iterations: usize,
    steps: Vec<AcceptedStep>,
}

/// What one [`LbfgsState::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Moved to a new iterate satisfying strong Wolfe.
    Stepped,
    /// Terminated; no further steps will make progress.
    Finished(LbfgsStatus),
}

impl LbfgsState {
    pub fn new(x0: &[f64], cfg: LbfgsConfig) -> Self {
        LbfgsState {
            cfg,
            history: Vec::new(),
            x: x0.to_vec(),
            loss: f64::INFINITY,
            grad: vec![0.0; x0.len()],
            evaluated: false,
            evals: 0,
            iterations: 0,
            steps: Vec::new(),
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }
    pub fn loss(&self) -> f64 {
        self.loss
    }
    pub fn grad_norm(&self) -> f64 {
        norm(&self.grad)
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    pub fn evals(&self) -> usize {
        self.evals
    }
    pub fn steps(&self) -> &[AcceptedStep] {
        &self.steps
    }
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// The loss landscape moved under the iterate (for example, a coupled
    /// coefficient was updated); invalidate the cached evaluation.
    pub fn mark_objective_changed(&mut self) {
        self.evaluated = false;
    }

    /// Drop the curvature history (used after large objective changes).
    pub fn reset_history(&mut self) {
        self.history.clear();
    }

    fn ensure_evaluated<F>(&mut self, f: &mut F) -> Result<(), OptimError>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        if !self.evaluated {
            self.loss = f(&self.x, &mut self.grad);
            self.evals += 1;
            if !self.loss.is_finite() {
                return Err(OptimError::NonFiniteLoss);
            }
            self.evaluated = true;
        }
        Ok(())
    }

    /// One quasi-Newton iteration: two-loop direction, strong-Wolfe line
    /// search, curvature update.
    pub fn step<F>(&mut self, f: &mut F) -> Result<StepOutcome, OptimError>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        self.ensure_evaluated(f)?;
        let n = self.x.len();
        if norm(&self.grad) <= self.cfg.grad_tol {
            return Ok(StepOutcome::Finished(LbfgsStatus::GradientConverged));
        }

        // Two-loop recursion for the search direction.
        let mut q = self.grad.clone();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let gamma = match self.history.last() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0,
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|&v| -v).collect();
        let mut dphi0 = dot(&self.grad, &dir);
        if !(dphi0 < 0.0) || !dphi0.is_finite() {
            // Not a descent direction; restart from steepest descent.
            self.history.clear();
            dir = self.grad.iter().map(|&g| -g).collect();
            dphi0 = dot(&self.grad, &dir);
            if dphi0 >= 0.0 {
                return Ok(StepOutcome::Finished(LbfgsStatus::GradientConverged));
            }
        }

        let ls = line_search_strong_wolfe(
            f,
            &self.x,
            self.loss,
            &dir,
            dphi0,
            self.cfg.c1,
            self.cfg.c2,
            self.cfg.slope_refine_tol,
            &mut self.evals,
        );
        let accepted = match ls {
            Some(p) => p,
            None => return Ok(StepOutcome::Finished(LbfgsStatus::LineSearchFailed)),
        };

        let mut x_new = self.x.clone();
        for i in 0..n {
            x_new[i] += accepted.alpha * dir[i];
        }
        let s: Vec<f64> = x_new.iter().zip(&self.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted
            .grad
            .iter()
            .zip(&self.grad)
            .map(|(a, b)| a - b)
            .collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 {
            if self.history.len() == self.cfg.memory {
                self.history.remove(0);
            }
            self.history.push((s, y, 1.0 / sy));
        }

        self.steps.push(AcceptedStep {
            alpha: accepted.alpha,
            loss_before: self.loss,
            loss_after: accepted.f,
            dphi0,
            dphi_alpha: accepted.dphi,
        });
        self.iterations += 1;

        let loss_prev = self.loss;
        self.x = x_new;
        self.loss = accepted.f;
        self.grad = accepted.grad;
        if norm(&self.grad) <= self.cfg.grad_tol {
            return Ok(StepOutcome::Finished(LbfgsStatus::GradientConverged));
        }
        if self.cfg.progress_tol > 0.0
            && (loss_prev - self.loss).abs() <= self.cfg.progress_tol * self.loss.abs().max(1.0)
        {
            return Ok(StepOutcome::Finished(LbfgsStatus::ProgressConverged));
        }
        Ok(StepOutcome::Stepped)
    }
}

/// Two-loop recursion + strong-Wolfe line search, driven to termination.
///
/// The objective writes its gradient into the provided buffer and returns the
/// loss. Line-search failure is not an error: the best point seen so far is
/// returned with a flagged status.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut state = LbfgsState::new(x0, *cfg);
    state.ensure_evaluated(&mut f)?;
    let mut best_x = state.x.clone();
    let mut best_loss = state.loss;
    let mut best_grad_norm = state.grad_norm();
    let mut status = LbfgsStatus::MaxIterations;
    while state.iterations < cfg.max_iters {
        match state.step(&mut f)? {
            StepOutcome::Stepped => {}
            StepOutcome::Finished(s) => {
                status = s;
                break;
            }
        }
        if state.loss < best_loss {
            best_loss = state.loss;
            best_x = state.x.clone();
            best_grad_norm = state.grad_norm();
        }
    }
    if state.loss <= best_loss {
        best_loss = state.loss;
        best_x = state.x.clone();
        best_grad_norm = state.grad_norm();
    }
    Ok(LbfgsResult {
        x: best_x,
        loss: best_loss,
        grad_norm: best_grad_norm,
        iterations: state.iterations,
        evals: state.evals,
        status,
        steps: state.steps,
    })
}

/// Bracket-and-zoom strong Wolfe search. Returns the accepted point or None.
#[allow(clippy::too_many_arguments)]
fn line_search_strong_wolfe<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    dir: &[f64],
    dphi0: f64,
    c1: f64,
    c2: f64,
    slope_refine_tol: f64,
    evals: &mut usize,
) -> Option<LinePoint>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const MAX_BRACKET: usize = 20;
    const MAX_ZOOM: usize = 30;
    fn probe_at<F: FnMut(&[f64], &mut [f64]) -> f64>(
        f: &mut F,
        x: &[f64],
        dir: &[f64],
        alpha: f64,
        evals: &mut usize,
    ) -> LinePoint {
        let mut xt = vec![0.0; x.len()];
        for i in 0..x.len() {
            xt[i] = x[i] + alpha * dir[i];
        }
        let mut grad = vec![0.0; x.len()];
        let mut fv = f(&xt, &mut grad);
        *evals += 1;
        if !fv.is_finite() {
            fv = f64::INFINITY;
        }
        let dphi = dot(&grad, dir);
        LinePoint { alpha, f: fv, dphi, grad }
    }

    let strong_wolfe =
        |p: &LinePoint| p.f <= f0 + c1 * p.alpha * dphi0 && p.dphi.abs() <= c2 * dphi0.abs();

    // A Wolfe point whose slope is still large is refined once by cubic
    // interpolation against the origin; on quadratics this lands on the exact
    // one-dimensional minimizer, which is what gives finite termination there.
    let refine = |cur: LinePoint, f: &mut F, evals: &mut usize| -> LinePoint {
        if cur.dphi.abs() <= slope_refine_tol * dphi0.abs() {
            return cur;
        }
        // The minimizer may lie beyond the accepted step when its slope is
        // still negative, so allow extrapolation.
        let trial = cubic_interpolate(
            0.0,
            f0,
            dphi0,
            cur.alpha,
            cur.f,
            cur.dphi,
            (0.0, 1e3 * cur.alpha),
        );
        if !(trial > 0.0 && trial.is_finite())
            || (trial - cur.alpha).abs() <= 1e-12 * cur.alpha
        {
            return cur;
        }
        let candidate = probe_at(f, x, dir, trial, evals);
        if candidate.f < cur.f && strong_wolfe(&candidate) {
            candidate
        } else {
            cur
        }
    };

    let mut prev = LinePoint {
        alpha: 0.0,
        f: f0,
        dphi: dphi0,
        grad: Vec::new(),
    };
    let mut alpha = 1.0;
    let mut bracket: Option<(LinePoint, LinePoint)> = None;
    for i in 0..MAX_BRACKET {
        let cur = probe_at(f, x, dir, alpha, evals);
        if cur.f > f0 + c1 * alpha * dphi0 || (i > 0 && cur.f >= prev.f) {
            bracket = Some((prev, cur));
            break;
        }
        if cur.dphi.abs() <= c2 * dphi0.abs() {
            return Some(refine(cur, f, evals));
        }
        if cur.dphi >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        let next = (2.0 * alpha).min(1e12);
        prev = cur;
        alpha = next;
    }
    let (mut lo, mut hi) = bracket?;

    for _ in 0..MAX_ZOOM {
        let (a, b) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        if (b - a) <= 1e-16 * b.max(1.0) {
            break;
        }
        let margin = 0.1 * (b - a);
        let mut trial = if hi.f.is_finite() {
            cubic_interpolate(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi, (a, b))
        } else {
            0.5 * (a + b)
        };
        if !(trial > a + margin) || !(trial < b - margin) {
            // Too close to the bracket edge; fall back toward the middle.
            trial = 0.5 * (a + b);
        }
        let cur = probe_at(f, x, dir, trial, evals);
        if cur.f > f0 + c1 * cur.alpha * dphi0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.dphi.abs() <= c2 * dphi0.abs() {
                return Some(refine(cur, f, evals));
            }
            if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
        if lo.f < f0 && strong_wolfe(&lo) {
            return Some(refine(lo, f, evals));
        }
    }
    // Accept a plain Armijo point if the zoom stalled on the curvature side.
    if lo.alpha > 0.0 && lo.f <= f0 + c1 * lo.alpha * dphi0 && lo.f < f0 {
        return Some(lo);
    }
    None
}
