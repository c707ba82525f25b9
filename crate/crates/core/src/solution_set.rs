//! Identifiability analysis: the fieldmap lattice of exact solutions, zeros of
//! `Delta(eta) = [W(eta) Phi, Phi]`, swap structure at those zeros and the
//! local identifiability certificate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, binomial, gcd, lcm};
use crate::species_model::{weights, AcquisitionModel, EchoSpec, SELECTION_LIMIT};
use crate::{CMat, CVec, Complex64};

pub const DEFAULT_DENOM_LIMIT: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalEchoStructure {
    pub support: Vec<usize>,
    pub t_max: f64,
    /// `t_k / t_max = p_k / q_k` in lowest terms, one pair per support index.
    pub fractions: Vec<(u64, u64)>,
    pub p: u64,
    pub q: u64,
    pub commensurable: bool,
}

impl RationalEchoStructure {
    /// Common time quantum `u` with every `t_k` an integer multiple of `u`,
    /// and those multiples.
    pub fn quantum(&self) -> Option<(f64, Vec<u64>)> {
        if !self.commensurable {
            return None;
        }
        let mut qq = 1u64;
        for &(_, qk) in &self.fractions {
            qq = lcm(qq, qk)?;
        }
        let exps = self.fractions.iter().map(|&(pk, qk)| pk * (qq / qk)).collect();
        Some((self.t_max / qq as f64, exps))
    }
}

/// Best rational approximation with denominator at most `limit` that is within
/// `tol` of `x`, walking the continued-fraction convergents.
fn rationalize(x: f64, limit: u64, tol: f64) -> Option<(u64, u64)> {
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > u64::MAX as f64 / 2.0 {
            return None;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > limit {
            return None;
        }
        if (h2 as f64 / k2 as f64 - x).abs() < tol {
            let g = gcd(h2, k2);
            return Some((h2 / g, k2 / g));
        }
        let frac = r - a as f64;
        if frac <= 0.0 {
            return None;
        }
        r = 1.0 / frac;
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
    }
    None
}

/// Rationalizes `t_k / t_max` over `support`. The acceptance threshold on each
/// ratio is `1e-12 s / t_max`, i.e. a picosecond in echo time.
pub fn rationalize_echoes(echoes: &EchoSpec, support: &[usize], denom_limit: u64) -> RationalEchoStructure {
    let t = echoes.times();
    let t_max = support.iter().map(|&k| t[k]).fold(0.0, f64::max);
    let tol = 1e-12 / t_max;
    let mut fractions = Vec::with_capacity(support.len());
    let mut commensurable = true;
    for &k in support {
        match rationalize(t[k] / t_max, denom_limit, tol) {
            Some(f) => fractions.push(f),
            None => {
                commensurable = false;
                fractions.push((0, 0));
            }
        }
    }
    let (mut p, mut q) = (0, 0);
    if commensurable {
        let lp = fractions.iter().try_fold(1u64, |acc, &(pk, _)| lcm(acc, pk));
        let lq = lp.and_then(|pp| {
            fractions.iter().try_fold(1u64, |acc, &(pk, qk)| lcm(acc, (pp / pk).checked_mul(qk)?))
        });
        match (lp, lq) {
            (Some(a), Some(b)) => (p, q) = (a, b),
            _ => commensurable = false,
        }
    }
    if !commensurable {
        fractions.iter_mut().for_each(|f| *f = (0, 0));
    }
    RationalEchoStructure { support: support.to_vec(), t_max, fractions, p, q, commensurable }
}

/// Spacing of the set of real fieldmap shifts that leave the signal unchanged;
/// `None` when that set is `{0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolutionLattice {
    pub period_hz: Option<f64>,
}

impl SolutionLattice {
    pub fn is_finite(&self) -> bool {
        self.period_hz.is_some()
    }
}

pub fn fieldmap_lattice(structure: &RationalEchoStructure) -> SolutionLattice {
    SolutionLattice {
        period_hz: structure
            .commensurable
            .then(|| (1.0 / structure.t_max) * (structure.q as f64 / structure.p as f64)),
    }
}

/// Lattice for the full echo set.
pub fn model_lattice(model: &AcquisitionModel) -> SolutionLattice {
    let all: Vec<usize> = (0..model.n_echoes()).collect();
    fieldmap_lattice(&rationalize_echoes(&model.echoes, &all, DEFAULT_DENOM_LIMIT))
}

pub fn delta_matrix(eta: Complex64, model: &AcquisitionModel) -> CMat {
    let (ne, ns) = (model.n_echoes(), model.n_species());
    let w = weights(eta, model.times());
    let mut d = CMat::zeros(ne, 2 * ns);
    for k in 0..ne {
        for l in 0..ns {
            d[(k, l)] = w[k] * model.phi[(k, l)];
            d[(k, ns + l)] = model.phi[(k, l)];
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    ExactRecovery,
    SwapRisk,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaZero {
    pub eta_hz: f64,
    pub sigma_min: f64,
    pub kernel_dim: usize,
    pub classification: Classification,
    /// Eigenvalues of `W(-eta)` on range(Phi); present when the kernel is full.
    pub swap_phases: Option<Vec<Complex64>>,
    /// Orthonormal eigenbasis of `W(-eta)` restricted to range(Phi).
    #[serde(skip)]
    pub swap_basis: Option<Vec<CVec>>,
    /// `Phi^+` applied to `swap_basis`: the same directions in concentration space.
    #[serde(skip)]
    pub swap_coordinates: Option<Vec<CVec>>,
}

impl DeltaZero {
    /// Concentrations `c` with `W(eta) Phi c = Phi c0`, built from the swap
    /// eigenbasis.
    pub fn swap_vector(&self, model: &AcquisitionModel, c0: &CVec) -> Option<CVec> {
        let (basis, coords, phases) =
            (self.swap_basis.as_ref()?, self.swap_coordinates.as_ref()?, self.swap_phases.as_ref()?);
        let s0 = &model.phi * c0;
        let mut c = CVec::zeros(model.n_species());
        for ((v, u), ph) in basis.iter().zip(coords).zip(phases) {
            c += u * (ph * linalg::inner(v, &s0));
        }
        Some(c)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaZeroSet {
    pub zeros: Vec<DeltaZero>,
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroSetConfig {
    pub unit_circle_tol: f64,
    pub cluster_hz: f64,
    /// Kernel threshold relative to `sigma_max(Delta(0))`.
    pub kernel_tol: f64,
    pub degree_limit: usize,
    pub denom_limit: u64,
}

impl Default for ZeroSetConfig {
    fn default() -> Self {
        ZeroSetConfig {
            unit_circle_tol: 1e-8,
            cluster_hz: 1e-6,
            kernel_tol: 1e-8,
            degree_limit: 10_000,
            denom_limit: DEFAULT_DENOM_LIMIT,
        }
    }
}

/// `det(Delta_S)` as a sparse polynomial in `z = exp(2 pi i eta u)`, by
/// Laplace expansion along the first `n_s` columns.
fn selection_polynomial(model: &AcquisitionModel, rows: &[usize], exps: &[u64]) -> BTreeMap<u64, Complex64> {
    let ns = model.n_species();
    let mut poly = BTreeMap::new();
    for left in (0..2 * ns).combinations(ns) {
        let right: Vec<usize> = (0..2 * ns).filter(|i| !left.contains(i)).collect();
        let parity: usize = left.iter().enumerate().map(|(i, &p)| p - i).sum();
        let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
        let a = model.phi.select_rows(left.iter().map(|&i| &rows[i])).determinant();
        let b = model.phi.select_rows(right.iter().map(|&i| &rows[i])).determinant();
        let e: u64 = left.iter().map(|&i| exps[rows[i]]).sum();
        *poly.entry(e).or_insert(Complex64::new(0.0, 0.0)) += a * b * sign;
    }
    poly
}

/// Unit-modulus roots of a sparse polynomial, returned as phases `w` with the
/// compression step `g` such that `w = z^g`.
fn unit_roots(poly: &BTreeMap<u64, Complex64>, cfg: &ZeroSetConfig) -> Result<Option<(u64, Vec<f64>)>> {
    let scale = poly.values().map(|c| c.norm()).fold(0.0, f64::max);
    let terms: Vec<(u64, Complex64)> =
        poly.iter().filter(|(_, c)| c.norm() > 1e-13 * scale).map(|(&e, &c)| (e, c)).collect();
    if terms.is_empty() {
        return Ok(None);
    }
    let emin = terms[0].0;
    let g = terms.iter().fold(0u64, |acc, &(e, _)| gcd(acc, e - emin)).max(1);
    let degree = ((terms.last().unwrap().0 - emin) / g) as usize;
    if degree > cfg.degree_limit {
        return Err(Error::PolynomialDegreeLimit { degree, limit: cfg.degree_limit });
    }
    let mut coeffs = vec![Complex64::new(0.0, 0.0); degree + 1];
    for &(e, c) in &terms {
        coeffs[((e - emin) / g) as usize] = c / scale;
    }
    let roots = linalg::poly_roots(&coeffs);
    // group split multiple roots, polish the group mean with a multiplicity-aware Newton step
    let mut used = vec![false; roots.len()];
    let mut phases = Vec::new();
    for i in 0..roots.len() {
        if used[i] {
            continue;
        }
        let group: Vec<usize> =
            (i..roots.len()).filter(|&j| !used[j] && (roots[j] - roots[i]).norm() < 1e-4).collect();
        group.iter().for_each(|&j| used[j] = true);
        let m = group.len() as f64;
        let mut w = group.iter().map(|&j| roots[j]).sum::<Complex64>() / m;
        for _ in 0..8 {
            let (p, dp) = linalg::poly_eval(&coeffs, w);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp * m;
            if !step.is_finite() || step.norm() > 1e-3 {
                break;
            }
            w -= step;
            if step.norm() < 1e-16 {
                break;
            }
        }
        if (1.0 - w.norm()).abs() < cfg.unit_circle_tol {
            phases.push(w.arg());
        }
    }
    Ok(Some((g, phases)))
}

fn contains_within(sorted: &[f64], x: f64, tol: f64) -> bool {
    let i = sorted.partition_point(|&v| v < x - tol);
    i < sorted.len() && sorted[i] <= x + tol
}

/// Real `eta` in `band` where `Delta(eta)` loses rank, each classified by its
/// kernel structure.
pub fn delta_zero_set(model: &AcquisitionModel, band: (f64, f64), cfg: &ZeroSetConfig) -> Result<DeltaZeroSet> {
    let (ne, ns) = (model.n_echoes(), model.n_species());
    let all: Vec<usize> = (0..ne).collect();
    let structure = rationalize_echoes(&model.echoes, &all, cfg.denom_limit);
    let sigma_ref = linalg::singular_values(&delta_matrix(Complex64::new(0.0, 0.0), model))[0];
    let thresh = cfg.kernel_tol * sigma_ref;

    let candidates: Vec<f64> = match structure.quantum() {
        Some((u, exps)) if ne >= 2 * ns => {
            let count = binomial(ne, 2 * ns);
            if count > SELECTION_LIMIT {
                return Err(Error::CombinatorialLimit { count, limit: SELECTION_LIMIT });
            }
            let mut sets: Vec<Vec<f64>> = Vec::new();
            for rows in (0..ne).combinations(2 * ns) {
                let poly = selection_polynomial(model, &rows, &exps);
                let Some((g, phases)) = unit_roots(&poly, cfg)? else { continue };
                // w = exp(2 pi i eta g u): eta = (arg w / 2 pi + m) / (g u)
                let period = 1.0 / (g as f64 * u);
                let mut etas = Vec::new();
                for ph in phases {
                    let base = ph / (2.0 * PI) * period;
                    let m0 = ((band.0 - base) / period).ceil() as i64;
                    let m1 = ((band.1 - base) / period).floor() as i64;
                    etas.extend((m0..=m1).map(|m| base + m as f64 * period));
                }
                etas.sort_by(|a, b| a.partial_cmp(b).unwrap());
                sets.push(etas);
            }
            match sets.split_first() {
                None => Vec::new(),
                Some((first, rest)) => {
                    let mut out: Vec<f64> = Vec::new();
                    for &eta in first {
                        if out.last().is_some_and(|&l| (eta - l).abs() <= cfg.cluster_hz) {
                            continue;
                        }
                        if rest.iter().all(|s| contains_within(s, eta, cfg.cluster_hz)) {
                            out.push(eta);
                        }
                    }
                    out
                }
            }
        }
        _ => {
            if band.0 <= 0.0 && 0.0 <= band.1 {
                vec![0.0]
            } else {
                Vec::new()
            }
        }
    };

    let mut zeros = Vec::new();
    for eta in candidates {
        if let Some(z) = classify_zero(model, eta, thresh) {
            zeros.push(z);
        }
    }
    zeros.sort_by(|a, b| a.eta_hz.partial_cmp(&b.eta_hz).unwrap());
    Ok(DeltaZeroSet { zeros })
}

/// Kernel analysis of `Delta(eta)`; `None` when it has full column rank.
pub fn classify_zero(model: &AcquisitionModel, eta: f64, thresh: f64) -> Option<DeltaZero> {
    let ns = model.n_species();
    let d = delta_matrix(Complex64::new(eta, 0.0), model);
    let (sv, kern) = linalg::kernel(&d, thresh);
    let sigma_min = *sv.last().unwrap();
    if kern.is_empty() {
        return None;
    }
    let exact = kern.iter().all(|v| {
        let z1 = v.rows(0, ns);
        let z2 = v.rows(ns, ns);
        (z1 + z2).norm() < 1e-6 * v.norm()
    });
    let (mut phases, mut basis, mut coords) = (None, None, None);
    if kern.len() == ns {
        let svd = model.phi.clone().svd(true, false);
        let q = svd.u.unwrap();
        let w = weights(Complex64::new(-eta, 0.0), model.times());
        let b = q.adjoint() * CMat::from_diagonal(&w) * &q;
        let (z, t) = nalgebra::linalg::Schur::new(b).unpack();
        let pinv = linalg::pinv(&model.phi, 1e-12);
        let vs: Vec<CVec> = (0..ns).map(|l| &q * z.column(l)).collect();
        coords = Some(vs.iter().map(|v| &pinv * v).collect());
        phases = Some((0..ns).map(|l| t[(l, l)] / t[(l, l)].norm()).collect());
        basis = Some(vs);
    }
    Some(DeltaZero {
        eta_hz: eta,
        sigma_min,
        kernel_dim: kern.len(),
        classification: if exact { Classification::ExactRecovery } else { Classification::SwapRisk },
        swap_phases: phases,
        swap_basis: basis,
        swap_coordinates: coords,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityReport {
    pub residual_norm: f64,
    pub suspect: bool,
    pub reason: Option<String>,
}

/// Tests whether `T s0` lies in range(W(xi0) Phi), a necessary condition for
/// losing local identifiability. A positive answer is only a suspicion.
pub fn local_identifiability_certificate(
    xi0: Complex64,
    c0: &CVec,
    model: &AcquisitionModel,
    tol: f64,
) -> Result<IdentifiabilityReport> {
    let (ne, ns) = (model.n_echoes(), model.n_species());
    if ne > 2 * ns {
        return Ok(IdentifiabilityReport {
            residual_norm: f64::NAN,
            suspect: false,
            reason: Some(format!("{ne} echoes exceed 2 n_s = {}", 2 * ns)),
        });
    }
    let s0 = model.signal(xi0, c0)?;
    let ts0 = CVec::from_iterator(ne, model.times().iter().zip(s0.iter()).map(|(t, s)| s * *t));
    let m = model.weighting_matrix(xi0) * &model.phi;
    let c = linalg::lstsq(&m, &ts0);
    let residual_norm = (&ts0 - m * c).norm();
    let suspect = residual_norm <= tol * ts0.norm();
    Ok(IdentifiabilityReport {
        residual_norm,
        suspect,
        reason: (ts0.norm() == 0.0).then(|| "zero signal".to_string()),
    })
}
