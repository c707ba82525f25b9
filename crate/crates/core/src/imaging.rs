//! Grid reconstruction under a bounded-gradient fieldmap constraint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::ResidualOperator;
use crate::solution_set::SolutionLattice;
use crate::solver::{project_ball, step_bound, FlowConfig};
use crate::{CVec, Complex64};

/// Row-major 2D grid of per-voxel echo signals; voxel `(x, y)` sits at `y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub signal: Vec<CVec>,
    pub mask: Vec<bool>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, signal: Vec<CVec>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if signal.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "grid {width}x{height} needs {n} voxels, got {} signals and {} mask entries",
                signal.len(),
                mask.len()
            )));
        }
        let ne = signal.first().map_or(0, |s| s.len());
        if signal.iter().any(|s| s.len() != ne) {
            return Err(Error::Dimension("echo count differs between voxels".into()));
        }
        if signal.iter().zip(&mask).any(|(s, &m)| m && s.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())) {
            return Err(Error::Domain("non-finite signal on mask".into()));
        }
        Ok(ImageGrid { width, height, signal, mask })
    }

    /// Mask of voxels whose signal norm exceeds `threshold`.
    pub fn with_threshold_mask(width: usize, height: usize, signal: Vec<CVec>, threshold: f64) -> Result<Self> {
        let mask = signal.iter().map(|s| s.norm() > threshold).collect();
        Self::new(width, height, signal, mask)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_echoes(&self) -> usize {
        self.signal.first().map_or(0, |s| s.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldmapConstraint {
    /// Per-voxel bound on the forward-difference gradient norm, Hz; may be infinite.
    pub eps_g: Vec<f64>,
}

impl FieldmapConstraint {
    pub fn uniform(n: usize, eps: f64) -> Result<Self> {
        Self::new(vec![eps; n])
    }

    pub fn from_mask(mask: &[bool], eps_on: f64, eps_off: f64) -> Result<Self> {
        Self::new(mask.iter().map(|&m| if m { eps_on } else { eps_off }).collect())
    }

    pub fn new(eps_g: Vec<f64>) -> Result<Self> {
        if eps_g.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(Error::Domain("gradient bounds must be non-negative".into()));
        }
        Ok(FieldmapConstraint { eps_g })
    }
}

pub fn forward_gradient(phi: &[f64], width: usize, height: usize) -> Vec<[f64; 2]> {
    let mut g = vec![[0.0; 2]; width * height];
    for y in 0..height {
        for x in 0..width {
            let v = y * width + x;
            if x + 1 < width {
                g[v][0] = phi[v + 1] - phi[v];
            }
            if y + 1 < height {
                g[v][1] = phi[v + width] - phi[v];
            }
        }
    }
    g
}

pub fn forward_gradient_adjoint(g: &[[f64; 2]], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let v = y * width + x;
            if x + 1 < width {
                out[v] -= g[v][0];
                out[v + 1] += g[v][0];
            }
            if y + 1 < height {
                out[v] -= g[v][1];
                out[v + width] += g[v][1];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplacianReport {
    pub max_abs_laplacian: f64,
    pub ok: bool,
}

pub fn laplacian_bound_check(phi: &[f64], width: usize, height: usize, eps0: f64) -> LaplacianReport {
    let mut m: f64 = 0.0;
    for y in 1..height.saturating_sub(1) {
        for x in 1..width.saturating_sub(1) {
            let v = y * width + x;
            let lap = phi[v + 1] + phi[v - 1] + phi[v + width] + phi[v - width] - 4.0 * phi[v];
            m = m.max(lap.abs());
        }
    }
    LaplacianReport { max_abs_laplacian: m, ok: m <= 4.0 * eps0 + 1e-9 }
}

/// `max_v max(0, |grad phi(v)| - eps_g(v))`
pub fn constraint_violation(phi: &[f64], width: usize, height: usize, constraint: &FieldmapConstraint) -> f64 {
    forward_gradient(phi, width, height)
        .iter()
        .zip(&constraint.eps_g)
        .map(|(g, &e)| (g[0].hypot(g[1]) - e).max(0.0))
        .fold(0.0, f64::max)
}

/// Projection onto `{(a, b, c) : |(b - a, c - a)| <= eps}`.
fn project_triple(z: [f64; 3], eps: f64) -> [f64; 3] {
    let d = [z[1] - z[0], z[2] - z[0]];
    let dn = d[0].hypot(d[1]);
    if dn <= eps {
        return z;
    }
    if eps == 0.0 {
        let m = (z[0] + z[1] + z[2]) / 3.0;
        return [m; 3];
    }
    // eigenbasis of D D^T = [[2, 1], [1, 2]]: (1, 1)/sqrt2 -> 3, (1, -1)/sqrt2 -> 1
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let d3 = s * (d[0] + d[1]);
    let d1 = s * (d[0] - d[1]);
    let g = |l: f64| (d3 / (1.0 + 3.0 * l)).powi(2) + (d1 / (1.0 + l)).powi(2) - eps * eps;
    let dg = |l: f64| -6.0 * d3 * d3 / (1.0 + 3.0 * l).powi(3) - 2.0 * d1 * d1 / (1.0 + l).powi(3);
    let mut lo = ((dn / eps - 1.0) / 3.0).max(0.0);
    let mut hi = dn / eps - 1.0;
    let mut l = lo;
    for _ in 0..100 {
        let v = g(l);
        if v > 0.0 {
            lo = l;
        } else {
            hi = l;
        }
        let mut next = l - v / dg(l);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - l).abs() <= 1e-16 * l.max(1.0) {
            l = next;
            break;
        }
        l = next;
    }
    let e3 = d3 / (1.0 + 3.0 * l);
    let e1 = d1 / (1.0 + l);
    // D y, then y = z - l D^T D y
    let dy = [s * (e3 + e1), s * (e3 - e1)];
    [z[0] + l * (dy[0] + dy[1]), z[1] - l * dy[0], z[2] - l * dy[1]]
}

fn project_pair(z: [f64; 2], eps: f64) -> [f64; 2] {
    let d = z[1] - z[0];
    if d.abs() <= eps {
        return z;
    }
    let shift = 0.5 * (d.abs() - eps) * d.signum();
    [z[0] + shift, z[1] - shift]
}

struct LocalConstraint {
    support: [usize; 3],
    len: usize,
    eps: f64,
}

fn local_constraints(width: usize, height: usize, constraint: &FieldmapConstraint) -> [Vec<LocalConstraint>; 3] {
    let mut colors: [Vec<LocalConstraint>; 3] = Default::default();
    for y in 0..height {
        for x in 0..width {
            let v = y * width + x;
            let eps = constraint.eps_g[v];
            if eps.is_infinite() {
                continue;
            }
            let mut support = [v, 0, 0];
            let mut len = 1;
            if x + 1 < width {
                support[len] = v + 1;
                len += 1;
            }
            if y + 1 < height {
                support[len] = v + width;
                len += 1;
            }
            if len == 1 {
                continue;
            }
            // supports of same-colored constraints are disjoint
            colors[(x + 2 * y) % 3].push(LocalConstraint { support, len, eps });
        }
    }
    colors
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub proj_tol: f64,
    pub max_sweeps: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { proj_tol: 1e-9, max_sweeps: 100_000 }
    }
}

/// Euclidean projection of `phi` onto the bounded-gradient set by Dykstra's
/// iterated corrections over the per-voxel constraints.
pub fn project_fieldmap(
    phi: &[f64],
    width: usize,
    height: usize,
    constraint: &FieldmapConstraint,
    cfg: &ProjectionConfig,
) -> Result<Vec<f64>> {
    let n = width * height;
    if phi.len() != n || constraint.eps_g.len() != n {
        return Err(Error::Dimension(format!("fieldmap of {} voxels on a {n}-voxel grid", phi.len())));
    }
    let colors = local_constraints(width, height, constraint);
    let mut x = phi.to_vec();
    if constraint_violation(&x, width, height, constraint) == 0.0 {
        return Ok(x);
    }
    let mut incr: [Vec<[f64; 3]>; 3] = [0, 1, 2].map(|c| vec![[0.0; 3]; colors[c].len()]);
    let mut change = f64::INFINITY;
    for _ in 0..cfg.max_sweeps {
        change = 0.0f64;
        for (cons, inc) in colors.iter().zip(incr.iter_mut()) {
            let updates: Vec<([f64; 3], [f64; 3])> = cons
                .par_iter()
                .with_min_len(256)
                .zip(inc.par_iter())
                .map(|(lc, p)| {
                    let mut z = [0.0; 3];
                    for k in 0..lc.len {
                        z[k] = x[lc.support[k]] + p[k];
                    }
                    let y = if lc.len == 3 {
                        project_triple(z, lc.eps)
                    } else {
                        let y2 = project_pair([z[0], z[1]], lc.eps);
                        [y2[0], y2[1], 0.0]
                    };
                    let mut q = [0.0; 3];
                    for k in 0..lc.len {
                        q[k] = z[k] - y[k];
                    }
                    (y, q)
                })
                .collect();
            for ((lc, p), (y, q)) in cons.iter().zip(inc.iter_mut()).zip(updates) {
                for k in 0..lc.len {
                    change = change.max((x[lc.support[k]] - y[k]).abs());
                    x[lc.support[k]] = y[k];
                }
                *p = q;
            }
        }
        if change < cfg.proj_tol && constraint_violation(&x, width, height, constraint) <= cfg.proj_tol {
            return Ok(x);
        }
    }
    let violation = constraint_violation(&x, width, height, constraint);
    if violation > 10.0 * cfg.proj_tol {
        return Err(Error::NonConvergence { violation, sweeps: cfg.max_sweeps });
    }
    let _ = change;
    Ok(x)
}

/// Real part projected onto the bounded-gradient set, imaginary part onto `[0, inf)`.
pub fn project_onto_c_phi(
    xi: &[Complex64],
    width: usize,
    height: usize,
    constraint: &FieldmapConstraint,
    cfg: &ProjectionConfig,
) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = xi.iter().map(|z| z.re).collect();
    let proj = project_fieldmap(&re, width, height, constraint, cfg)?;
    Ok(proj.iter().zip(xi).map(|(&r, z)| Complex64::new(r, z.im.max(0.0))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub flow: FlowConfig,
    pub projection: ProjectionConfig,
    pub max_backtracks: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig { flow: FlowConfig::default(), projection: ProjectionConfig::default(), max_backtracks: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub xi_map: Vec<Complex64>,
    pub c_map: Vec<CVec>,
    pub s_map: Option<Vec<CVec>>,
    pub objective_trace: Vec<f64>,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    pub step: f64,
}

struct VoxelEval {
    g_xi: Complex64,
    g_s: Option<CVec>,
}

fn evaluate(op: &ResidualOperator, xi: &[Complex64], s: &[CVec], with_s: bool) -> Result<Vec<VoxelEval>> {
    xi.par_iter()
        .zip(s.par_iter())
        .map(|(&x, sv)| {
            if with_s {
                let fr = op.full_residual(x, sv)?;
                Ok(VoxelEval { g_xi: fr.grad_xi.chart(), g_s: Some(fr.d_s_conj * Complex64::new(2.0, 0.0)) })
            } else {
                Ok(VoxelEval { g_xi: op.gradient(x, sv)?.chart(), g_s: None })
            }
        })
        .collect()
}

fn objective(op: &ResidualOperator, xi: &[Complex64], s: &[CVec]) -> Result<f64> {
    let vals: Result<Vec<f64>> = xi.par_iter().zip(s.par_iter()).map(|(&x, sv)| op.residual_value(x, sv)).collect();
    Ok(vals?.iter().sum())
}

fn check_dims(grid: &ImageGrid, op: &ResidualOperator, constraint: &FieldmapConstraint, xi_init: &[Complex64]) -> Result<()> {
    if grid.n_echoes() != op.n_echoes() && !grid.is_empty() {
        return Err(Error::Dimension(format!("grid has {} echoes, model {}", grid.n_echoes(), op.n_echoes())));
    }
    if constraint.eps_g.len() != grid.len() || xi_init.len() != grid.len() {
        return Err(Error::Dimension("constraint or initial fieldmap size differs from grid".into()));
    }
    Ok(())
}

/// Projected gradient descent on the sum of per-voxel residuals; `delta`
/// switches on the joint signal block with per-voxel balls around the data.
fn projected_descent(
    grid: &ImageGrid,
    op: &ResidualOperator,
    constraint: &FieldmapConstraint,
    delta: Option<&[f64]>,
    cfg: &ReconConfig,
    xi_init: &[Complex64],
) -> Result<ReconResult> {
    check_dims(grid, op, constraint, xi_init)?;
    if let Some(d) = delta {
        if d.len() != grid.len() || d.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Domain("delta must be non-negative per voxel".into()));
        }
    }
    let (w, h) = (grid.width, grid.height);
    let flow = &cfg.flow;
    let y = &grid.signal;
    let scale = y.iter().map(|s| s.norm_squared()).fold(0.0, f64::max);
    let tol = flow.grad_tol.unwrap_or(1e-12 * scale);
    let mut xi = project_onto_c_phi(xi_init, w, h, constraint, &cfg.projection)?;
    let mut s: Vec<CVec> = y.clone();
    let mut alpha = if flow.certified {
        let curv: Result<Vec<f64>> =
            xi.par_iter().zip(y.par_iter()).map(|(&x, sv)| Ok(op.apply(x, sv)?.r1.norm_squared())).collect();
        let lmax = curv?.into_iter().fold(0.0, f64::max) * (2.0 + flow.rho);
        if lmax == 0.0 {
            1.0
        } else {
            0.9 * step_bound(flow.rho)? / lmax
        }
    } else {
        flow.step
    };
    let mut signal_factor = flow.signal_step;
    let mut obj = objective(op, &xi, &s)?;
    let mut trace = vec![obj];
    let mut iterations = 0;
    let mut measure = f64::INFINITY;
    let mut converged = false;
    while iterations < flow.max_iters {
        let ev = evaluate(op, &xi, &s, delta.is_some())?;
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            let stepped: Vec<Complex64> = xi.iter().zip(&ev).map(|(x, e)| x - alpha * e.g_xi).collect();
            let cand_xi = project_onto_c_phi(&stepped, w, h, constraint, &cfg.projection)?;
            let mut m = xi.iter().zip(&cand_xi).map(|(a, b)| (a - b).norm() / alpha).fold(0.0, f64::max);
            let cand_s: Vec<CVec> = match delta {
                Some(d) => {
                    let out: Vec<(CVec, f64)> = (0..grid.len())
                        .into_par_iter()
                        .map(|v| {
                            let a_s = signal_factor / op.norm_bound(xi[v]).powi(2);
                            let g = ev[v].g_s.as_ref().expect("signal gradient");
                            let next = project_ball(&(&s[v] - g * Complex64::new(a_s, 0.0)), &y[v], d[v]);
                            let gm = (&s[v] - &next).norm() / a_s;
                            (next, gm)
                        })
                        .collect();
                    m = out.iter().fold(m, |acc, o| acc.max(o.1));
                    out.into_iter().map(|o| o.0).collect()
                }
                None => Vec::new(),
            };
            measure = m;
            if measure <= tol {
                converged = true;
                break;
            }
            let cand_obj = if delta.is_some() { objective(op, &cand_xi, &cand_s)? } else { objective(op, &cand_xi, &s)? };
            if cand_obj <= obj + 1e-12 * obj.abs() {
                xi = cand_xi;
                if delta.is_some() {
                    s = cand_s;
                }
                obj = cand_obj;
                accepted = true;
                break;
            }
            alpha *= 0.5;
            signal_factor *= 0.5;
        }
        if converged || !accepted {
            break;
        }
        trace.push(obj);
        iterations += 1;
    }
    let c_map: Result<Vec<CVec>> = xi.par_iter().zip(s.par_iter()).map(|(&x, sv)| op.concentrations_ri(x, sv)).collect();
    let re: Vec<f64> = xi.iter().map(|z| z.re).collect();
    Ok(ReconResult {
        constraint_violation: constraint_violation(&re, w, h, constraint),
        xi_map: xi,
        c_map: c_map?,
        s_map: delta.map(|_| s),
        objective_trace: trace,
        iterations,
        converged,
        final_grad_norm: measure,
        step: alpha,
    })
}

pub fn reconstruct(
    grid: &ImageGrid,
    op: &ResidualOperator,
    constraint: &FieldmapConstraint,
    cfg: &ReconConfig,
    xi_init: &[Complex64],
) -> Result<ReconResult> {
    projected_descent(grid, op, constraint, None, cfg, xi_init)
}

pub fn reconstruct_noisy(
    grid: &ImageGrid,
    op: &ResidualOperator,
    constraint: &FieldmapConstraint,
    delta: &[f64],
    cfg: &ReconConfig,
    xi_init: &[Complex64],
) -> Result<ReconResult> {
    projected_descent(grid, op, constraint, Some(delta), cfg, xi_init)
}

/// 4-connected component labels of the mask; `None` off the mask.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> (Vec<Option<usize>>, usize) {
    let mut label = vec![None; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(count);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            let (x, y) = (v % width, v / width);
            let mut nb = Vec::with_capacity(4);
            if x > 0 {
                nb.push(v - 1);
            }
            if x + 1 < width {
                nb.push(v + 1);
            }
            if y > 0 {
                nb.push(v - width);
            }
            if y + 1 < height {
                nb.push(v + width);
            }
            for u in nb {
                if mask[u] && label[u].is_none() {
                    label[u] = Some(count);
                    stack.push(u);
                }
            }
        }
        count += 1;
    }
    (label, count)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationReport {
    /// Lattice index of `Re(xi_a - xi_b)` per voxel, `None` on mismatch.
    pub offsets: Vec<Option<i64>>,
    pub mismatches: usize,
    pub components: usize,
    /// Every mask component carries a single offset and no voxel mismatches.
    pub constant_per_component: bool,
    /// Whether `eps_g(v) < period / 2` holds on the mask.
    pub bound_below_half_period: Option<bool>,
}

pub fn separation_check(
    xi_a: &[Complex64],
    xi_b: &[Complex64],
    lattice: &SolutionLattice,
    tol: f64,
    grid: &ImageGrid,
    constraint: Option<&FieldmapConstraint>,
) -> Result<SeparationReport> {
    let period = lattice
        .period_hz
        .ok_or_else(|| Error::Domain("separation check needs a finite lattice period".into()))?;
    if xi_a.len() != grid.len() || xi_b.len() != grid.len() {
        return Err(Error::Dimension("fieldmap sizes differ from grid".into()));
    }
    let offsets: Vec<Option<i64>> = xi_a
        .iter()
        .zip(xi_b)
        .map(|(a, b)| {
            let d = a.re - b.re;
            let k = (d / period).round();
            ((d - k * period).abs() <= tol).then_some(k as i64)
        })
        .collect();
    let (labels, count) = connected_components(&grid.mask, grid.width, grid.height);
    let mut per: Vec<Option<i64>> = vec![None; count];
    let mut constant = true;
    let mut mismatches = 0;
    for (v, lab) in labels.iter().enumerate() {
        let Some(l) = lab else { continue };
        match offsets[v] {
            None => {
                mismatches += 1;
                constant = false;
            }
            Some(k) => match per[*l] {
                None => per[*l] = Some(k),
                Some(k0) if k0 != k => constant = false,
                _ => {}
            },
        }
    }
    let bound_below_half_period = constraint.map(|c| {
        c.eps_g.iter().zip(&grid.mask).filter(|(_, &m)| m).all(|(&e, _)| e < 0.5 * period)
    });
    Ok(SeparationReport { offsets, mismatches, components: count, constant_per_component: constant, bound_below_half_period })
}

pub const METRIC_CAP_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
}

fn capped_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { METRIC_CAP_DB };
    }
    if num == 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

pub fn metrics(truth: &[Complex64], estimate: &[Complex64]) -> Result<Metrics> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(Error::Dimension(format!("{} truth values vs {} estimates", truth.len(), estimate.len())));
    }
    let err: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).norm_sqr()).sum();
    let energy: f64 = truth.iter().map(|a| a.norm_sqr()).sum();
    let peak = truth.iter().map(|a| a.norm_sqr()).fold(0.0, f64::max);
    let mse = err / truth.len() as f64;
    Ok(Metrics { mse, snr_db: capped_db(energy, err), psnr_db: capped_db(peak, mse) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PdffConvention {
    #[default]
    Magnitude,
    RealPart,
}

/// Fat fraction in percent; `None` where the denominator falls below `tol`.
pub fn pdff_map(
    c_map: &[CVec],
    water_idx: usize,
    fat_idx: usize,
    convention: PdffConvention,
    tol: f64,
) -> Result<Vec<Option<f64>>> {
    c_map
        .iter()
        .map(|c| {
            if water_idx >= c.len() || fat_idx >= c.len() {
                return Err(Error::Dimension(format!("species index out of range for {} species", c.len())));
            }
            let (w, f) = match convention {
                PdffConvention::Magnitude => (c[water_idx].norm(), c[fat_idx].norm()),
                PdffConvention::RealPart => (c[water_idx].re, c[fat_idx].re),
            };
            let den = w + f;
            Ok((den.abs() >= tol).then(|| 100.0 * f / den))
        })
        .collect()
}
