//! Single-voxel recovery: fixed-step Wirtinger flow, its ball-constrained and
//! regularized variants, and certified convergence radii.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inner, norm_sq};
use crate::residual::ResidualOperator;
use crate::{CVec, Complex64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Absolute step on xi; ignored in certified mode.
    pub step: f64,
    pub max_iters: usize,
    /// Defaults to `1e-12 |s|^2` when absent.
    pub grad_tol: Option<f64>,
    pub rho: f64,
    pub certified: bool,
    /// Step factor for the signal block of the constrained flows.
    pub signal_step: f64,
    pub alternating: bool,
    pub record_trajectory: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            step: 1e3,
            max_iters: 100_000,
            grad_tol: None,
            rho: 0.5,
            certified: false,
            signal_step: 1.0,
            alternating: false,
            record_trajectory: false,
        }
    }
}

impl FlowConfig {
    pub fn certified(rho: f64) -> Self {
        FlowConfig { certified: true, rho, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Zero,
    Boundary,
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub xi_hat: Complex64,
    pub c_hat: CVec,
    pub s_hat: Option<CVec>,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    pub step: f64,
    pub trajectory: Option<Vec<Complex64>>,
    pub branch: Option<Branch>,
}

pub fn step_bound(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Domain(format!("rho = {rho} outside (0, 1]")));
    }
    Ok(rho / (2.0 + rho))
}

/// Principal branch of Lambert W by Halley iteration.
pub fn lambert_w0(x: f64) -> Result<f64> {
    let branch = -(-1.0f64).exp();
    if x < branch || x.is_nan() {
        return Err(Error::Domain(format!("lambert_w0({x}) below -1/e")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == branch {
        return Ok(-1.0);
    }
    let mut w = if x < -0.25 {
        // series about the branch point
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).sqrt();
        -1.0 + p - p * p / 3.0
    } else {
        x.ln_1p()
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= dw;
        if dw.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w)
}

/// `int_0^1 exp(|a + theta b|) d theta`
pub fn beta_integral(a: f64, b: f64) -> f64 {
    if b.abs() < 1e-300 || b.abs() < 1e-14 * a.abs().max(1.0) * 1e-2 {
        return a.abs().exp();
    }
    let end = a + b;
    if a >= 0.0 && end >= 0.0 {
        // e^a e^{b/2} sinh(b/2) (2/b)
        a.exp() * b.exp_m1() / b
    } else if a <= 0.0 && end <= 0.0 {
        (-a).exp() * (-b).exp_m1() / (-b)
    } else {
        (a.abs().exp_m1() + end.abs().exp_m1()) / b.abs()
    }
}

/// Norms that enter the convergence radii, evaluated at the true parameter.
#[derive(Debug, Clone, Copy)]
pub struct CurvatureInputs {
    /// `|R'(xi0) s0|^2`
    pub a: f64,
    /// `|R''(xi0) s0|`
    pub b: f64,
    pub signal_sq: f64,
    pub tau_ne: f64,
    pub tau_s: f64,
    pub im0: f64,
}

impl CurvatureInputs {
    pub fn new(op: &ResidualOperator, xi0: Complex64, s0: &CVec) -> Result<Self> {
        let app = op.apply(xi0, s0)?;
        let a = norm_sq(&app.r1);
        if !(a > 0.0) {
            return Err(Error::DegenerateCurvature);
        }
        Ok(CurvatureInputs {
            a,
            b: app.r2.norm(),
            signal_sq: norm_sq(s0),
            tau_ne: op.tau_ne,
            tau_s: op.tau_s,
            im0: xi0.im.max(0.0),
        })
    }

    /// Positive root `x` of `x^2 + (b / 2 tau^{5/2}) x - (1-rho) a / (2 tau^3) = 0`.
    pub fn gamma_plus(&self, rho: f64) -> f64 {
        let t = self.tau_ne;
        let lin = 0.5 * self.b / t.powf(2.5);
        let c = (1.0 - rho) * self.a / (2.0 * t.powi(3));
        // 2c / (lin + sqrt(lin^2 + 4c)), the cancellation-free form of the root
        2.0 * c / (lin + (lin * lin + 4.0 * c).sqrt())
    }

    /// `gamma(eta) = 2 |s0|^2 |eta| beta(tau_S Im xi0, tau_S |eta|)`, worst direction.
    pub fn gamma(&self, r: f64) -> f64 {
        2.0 * self.signal_sq * r * beta_integral(self.tau_s * self.im0, self.tau_s * r)
    }

    /// Lower bound on `|R' s|^2 - |R s| |R'' s|` at distance `r`, minus `rho a`.
    pub fn tight_margin(&self, r: f64, rho: f64) -> f64 {
        let t = self.tau_ne;
        let g = self.gamma(r);
        let m = (t * g).min(t * t * r * g);
        self.a - self.b * m.sqrt() - m.sqrt() * (t.powi(5) * g).sqrt() - t.powi(3) * g - rho * self.a
    }
}

pub fn gamma_plus(op: &ResidualOperator, xi0: Complex64, s0: &CVec, rho: f64) -> Result<f64> {
    step_bound(rho)?;
    Ok(CurvatureInputs::new(op, xi0, s0)?.gamma_plus(rho))
}

/// Largest `r` in `(0, cap]` with `h(r) >= 0` for decreasing `h` with `h(0) > 0`.
fn last_nonnegative(h: impl Fn(f64) -> f64, start: f64, cap: f64) -> Result<f64> {
    let mut lo = 0.0;
    let mut hi = start.max(1e-12);
    while h(hi) >= 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > cap {
            return Err(Error::NonBracketed(cap));
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub const RADIUS_SEARCH_CAP_HZ: f64 = 1e7;

impl CurvatureInputs {
    pub fn radius_lambert(&self, rho: f64) -> Result<f64> {
        let x = self.gamma_plus(rho);
        let arg = self.tau_s * (-self.tau_s * self.im0).exp() * x * x / (2.0 * self.signal_sq);
        Ok(lambert_w0(arg)? / self.tau_s)
    }

    pub fn radius_loose(&self, rho: f64) -> Result<f64> {
        let x = self.gamma_plus(rho);
        let target = x * x;
        let start = self.radius_lambert(rho)?;
        last_nonnegative(|r| 1.0 - self.gamma(r) / target, start, RADIUS_SEARCH_CAP_HZ)
    }

    pub fn radius_tight(&self, rho: f64) -> Result<f64> {
        let start = self.radius_loose(rho)?;
        last_nonnegative(|r| self.tight_margin(r, rho) / self.a, start, RADIUS_SEARCH_CAP_HZ)
    }
}

pub fn radius_lambert(op: &ResidualOperator, xi0: Complex64, s0: &CVec, rho: f64) -> Result<f64> {
    step_bound(rho)?;
    CurvatureInputs::new(op, xi0, s0)?.radius_lambert(rho)
}

pub fn radius_loose(op: &ResidualOperator, xi0: Complex64, s0: &CVec, rho: f64) -> Result<f64> {
    step_bound(rho)?;
    CurvatureInputs::new(op, xi0, s0)?.radius_loose(rho)
}

pub fn radius_tight(op: &ResidualOperator, xi0: Complex64, s0: &CVec, rho: f64) -> Result<f64> {
    step_bound(rho)?;
    CurvatureInputs::new(op, xi0, s0)?.radius_tight(rho)
}

/// Smallest Hessian eigenvalue `|R' s|^2 - |<R s, R'' s>|` at `xi`.
pub fn hessian_floor(op: &ResidualOperator, xi: Complex64, s0: &CVec) -> Result<f64> {
    let app = op.apply(xi, s0)?;
    Ok(norm_sq(&app.r1) - inner(&app.r0, &app.r2).norm())
}

/// Minimum of the normalized Hessian floor over the part of the circle
/// `|xi - xi0| = r` lying in the closed upper half-plane.
pub fn q_value(op: &ResidualOperator, xi0: Complex64, s0: &CVec, r: f64, angular_samples: usize) -> Result<f64> {
    let a0 = norm_sq(&op.apply(xi0, s0)?.r1);
    if !(a0 > 0.0) {
        return Err(Error::DegenerateCurvature);
    }
    if r == 0.0 {
        return Ok(hessian_floor(op, xi0, s0)? / a0);
    }
    let im0 = xi0.im.max(0.0);
    let (t0, t1) = if im0 >= r {
        (0.0, 2.0 * std::f64::consts::PI)
    } else {
        let lo = -(im0 / r).asin();
        (lo, std::f64::consts::PI - lo)
    };
    let n = angular_samples.max(3);
    let at = |th: f64| -> Result<f64> {
        let mut xi = xi0 + Complex64::from_polar(r, th);
        xi.im = xi.im.max(0.0);
        Ok(hessian_floor(op, xi, s0)? / a0)
    };
    let h = (t1 - t0) / (n - 1) as f64;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..n {
        let v = at(t0 + h * i as f64)?;
        if v < best.0 {
            best = (v, i);
        }
    }
    // golden-section refinement around the best sample
    let (mut lo, mut hi) = (t0 + h * (best.1 as f64 - 1.0).max(0.0), t0 + h * ((best.1 + 1).min(n - 1) as f64));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (at(x1)?, at(x2)?);
    for _ in 0..40 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = at(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = at(x2)?;
        }
    }
    Ok(best.0.min(f1).min(f2))
}

pub fn curvature_profile(
    op: &ResidualOperator,
    xi0: Complex64,
    s0: &CVec,
    radii: &[f64],
    angular_samples: usize,
) -> Result<Vec<(f64, f64)>> {
    radii.iter().map(|&r| Ok((r, q_value(op, xi0, s0, r, angular_samples)?))).collect()
}

/// Smallest `r` with `Q(r) <= 0`, found by a geometric scan from `start` and
/// bisection on the bracketing step. Infinite if not reached by `r_max`.
pub fn empirical_radius(
    op: &ResidualOperator,
    xi0: Complex64,
    s0: &CVec,
    start: f64,
    r_max: f64,
    angular_samples: usize,
) -> Result<f64> {
    let mut prev = 0.0;
    let mut r = start.max(1e-6);
    while r <= r_max {
        if q_value(op, xi0, s0, r, angular_samples)? <= 0.0 {
            let (mut lo, mut hi) = (prev, r);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if q_value(op, xi0, s0, mid, angular_samples)? <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(hi);
        }
        prev = r;
        r *= 1.05;
    }
    Ok(f64::INFINITY)
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureReport {
    pub radius_lambert_hz: f64,
    pub radius_loose_hz: f64,
    pub radius_tight_hz: f64,
    pub radius_empirical_hz: f64,
    /// `|R'(xi0) s0| / |R''(xi0) s0|`
    pub figure_of_merit: f64,
    pub q_profile: Vec<(f64, f64)>,
}

pub fn curvature_report(
    op: &ResidualOperator,
    xi0: Complex64,
    s0: &CVec,
    rho: f64,
    radii: &[f64],
    angular_samples: usize,
    r_max: f64,
) -> Result<CurvatureReport> {
    step_bound(rho)?;
    let ci = CurvatureInputs::new(op, xi0, s0)?;
    let tight = ci.radius_tight(rho)?;
    Ok(CurvatureReport {
        radius_lambert_hz: ci.radius_lambert(rho)?,
        radius_loose_hz: ci.radius_loose(rho)?,
        radius_tight_hz: tight,
        radius_empirical_hz: empirical_radius(op, xi0, s0, tight, r_max, angular_samples)?,
        figure_of_merit: ci.a.sqrt() / ci.b,
        q_profile: curvature_profile(op, xi0, s0, radii, angular_samples)?,
    })
}

/// `0.9 step_bound(rho) / ((2 + rho) |R'(xi) s|^2)`
pub fn certified_step(op: &ResidualOperator, xi: Complex64, s: &CVec, rho: f64) -> Result<f64> {
    let l = (2.0 + rho) * norm_sq(&op.apply(xi, s)?.r1);
    if !(l > 0.0) {
        return Err(Error::DegenerateCurvature);
    }
    Ok(0.9 * step_bound(rho)? / l)
}

fn clamp_upper(mut xi: Complex64) -> Complex64 {
    if xi.im < 0.0 {
        xi.im = 0.0;
    }
    xi
}

pub fn wirtinger_flow(op: &ResidualOperator, s0: &CVec, xi_init: Complex64, cfg: &FlowConfig) -> Result<RecoveryResult> {
    let tol = cfg.grad_tol.unwrap_or(1e-12 * norm_sq(s0));
    let alpha = if cfg.certified { certified_step(op, xi_init, s0, cfg.rho)? } else { cfg.step };
    let mut xi = xi_init;
    let mut traj = cfg.record_trajectory.then(|| vec![xi]);
    let mut iterations = 0;
    let mut gnorm;
    loop {
        let g = op.gradient(xi, s0)?;
        gnorm = g.chart_norm();
        if gnorm <= tol || iterations >= cfg.max_iters {
            break;
        }
        xi = clamp_upper(xi - alpha * g.chart());
        iterations += 1;
        if let Some(t) = traj.as_mut() {
            t.push(xi);
        }
    }
    Ok(RecoveryResult {
        xi_hat: xi,
        c_hat: op.concentrations_ri(xi, s0)?,
        s_hat: None,
        iterations,
        final_grad_norm: gnorm,
        converged: gnorm <= tol,
        step: alpha,
        trajectory: traj,
        branch: None,
    })
}

pub fn project_ball(v: &CVec, center: &CVec, radius: f64) -> CVec {
    let d = v - center;
    let n = d.norm();
    if n <= radius {
        v.clone()
    } else {
        center + d * Complex64::new(radius / n, 0.0)
    }
}

/// Joint projected descent on `(xi, s)` for `f(xi, s) + eps |s|^2` subject to
/// `|y - s| <= delta`.
fn projected_flow(
    op: &ResidualOperator,
    y: &CVec,
    delta: f64,
    eps: f64,
    xi_init: Complex64,
    cfg: &FlowConfig,
) -> Result<RecoveryResult> {
    if !(delta >= 0.0) || !(eps >= 0.0) {
        return Err(Error::Domain("delta and epsilon must be non-negative".into()));
    }
    let tol = cfg.grad_tol.unwrap_or(1e-12 * norm_sq(y));
    let alpha = if cfg.certified { certified_step(op, xi_init, y, cfg.rho)? } else { cfg.step };
    let mut xi = xi_init;
    let mut s = y.clone();
    let mut traj = cfg.record_trajectory.then(|| vec![xi]);
    let mut iterations = 0;
    let mut measure;
    let signal_step = |xi: Complex64| cfg.signal_step / (op.norm_bound(xi).powi(2) + 2.0 * eps);
    let s_grad = |xi: Complex64, s: &CVec| -> Result<CVec> {
        let fr = op.full_residual(xi, s)?;
        Ok(fr.d_s_conj * Complex64::new(2.0, 0.0) + s * Complex64::new(2.0 * eps, 0.0))
    };
    loop {
        let fr = op.full_residual(xi, &s)?;
        let g_xi = fr.grad_xi.chart();
        let a_s = signal_step(xi);
        let g_s = fr.d_s_conj * Complex64::new(2.0, 0.0) + &s * Complex64::new(2.0 * eps, 0.0);
        let s_next = project_ball(&(&s - &g_s * Complex64::new(a_s, 0.0)), y, delta);
        measure = g_xi.norm().max((&s - &s_next).norm() / a_s);
        if measure <= tol || iterations >= cfg.max_iters {
            break;
        }
        let xi_next = clamp_upper(xi - alpha * g_xi);
        s = if cfg.alternating {
            let a_s = signal_step(xi_next);
            project_ball(&(&s - s_grad(xi_next, &s)? * Complex64::new(a_s, 0.0)), y, delta)
        } else {
            s_next
        };
        xi = xi_next;
        iterations += 1;
        if let Some(t) = traj.as_mut() {
            t.push(xi);
        }
    }
    let branch = (eps > 0.0).then(|| {
        if s.norm() <= ((y - &s).norm() - delta).abs() {
            Branch::Zero
        } else {
            Branch::Boundary
        }
    });
    Ok(RecoveryResult {
        xi_hat: xi,
        c_hat: op.concentrations_ri(xi, &s)?,
        s_hat: Some(s),
        iterations,
        final_grad_norm: measure,
        converged: measure <= tol,
        step: alpha,
        trajectory: traj,
        branch,
    })
}

pub fn constrained_flow(
    op: &ResidualOperator,
    y: &CVec,
    delta: f64,
    xi_init: Complex64,
    cfg: &FlowConfig,
) -> Result<RecoveryResult> {
    projected_flow(op, y, delta, 0.0, xi_init, cfg)
}

pub fn regularized_constrained_flow(
    op: &ResidualOperator,
    y: &CVec,
    delta: f64,
    epsilon: f64,
    xi_init: Complex64,
    cfg: &FlowConfig,
) -> Result<RecoveryResult> {
    projected_flow(op, y, delta, epsilon, xi_init, cfg)
}

/// Largest radius in `radii` (ascending) such that flows started on that
/// circle and all smaller ones reach `xi0` within `tol_hz`.
pub fn empirical_basin(
    op: &ResidualOperator,
    xi0: Complex64,
    s0: &CVec,
    cfg: &FlowConfig,
    radii: &[f64],
    angular_samples: usize,
    tol_hz: f64,
) -> Result<f64> {
    let mut last = 0.0;
    for &r in radii {
        for k in 0..angular_samples {
            let th = 2.0 * std::f64::consts::PI * k as f64 / angular_samples as f64;
            let init = clamp_upper(xi0 + Complex64::from_polar(r, th));
            let res = wirtinger_flow(op, s0, init, cfg)?;
            if !res.converged || (res.xi_hat - xi0).norm() >= tol_hz {
                return Ok(last);
            }
        }
        last = r;
    }
    Ok(last)
}
