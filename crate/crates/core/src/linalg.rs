//! Small dense complex kernels on top of nalgebra.

use nalgebra::DMatrix;

use crate::{CMat, CVec, Complex64};

pub const I: Complex64 = Complex64::new(0.0, 1.0);

/// Hermitian inner product, antilinear in the first argument.
pub fn inner(a: &CVec, b: &CVec) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sq(a: &CVec) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

pub fn singular_values(m: &CMat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Pseudoinverse by SVD, dropping singular values below `rel_tol * sigma_max`.
pub fn pinv(m: &CMat, rel_tol: f64) -> CMat {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out = CMat::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= rel_tol * smax || s == 0.0 {
            continue;
        }
        let vk = vt.row(k).adjoint();
        let uk = u.column(k).adjoint();
        out += (vk * uk) / Complex64::new(s, 0.0);
    }
    out
}

/// Least-squares solution of `a x = b` (minimum norm when rank deficient).
pub fn lstsq(a: &CMat, b: &CVec) -> CVec {
    pinv(a, 1e-14) * b
}

/// Right singular vectors whose singular values fall below `thresh`, i.e. a
/// numerical kernel basis. Wide matrices are padded with zero rows so the full
/// right basis is available.
pub fn kernel(m: &CMat, thresh: f64) -> (Vec<f64>, Vec<CVec>) {
    let (r, c) = (m.nrows(), m.ncols());
    let padded = if r < c {
        let mut p = CMat::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().cloned().zip(0..).collect();
    sv.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let values: Vec<f64> = sv.iter().map(|x| x.0).collect();
    let basis = sv
        .iter()
        .filter(|(s, _)| *s < thresh)
        .map(|&(_, k)| vt.row(k).adjoint())
        .collect();
    (values, basis)
}

/// Roots of `sum_k coeffs[k] z^k` from the eigenvalues of the companion matrix.
pub fn poly_roots(coeffs: &[Complex64]) -> Vec<Complex64> {
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let mut hi = coeffs.len() - 1;
    while coeffs[hi].norm() <= 1e-14 * scale {
        hi -= 1;
    }
    let mut lo = 0;
    while coeffs[lo].norm() <= 1e-14 * scale {
        lo += 1;
    }
    let mut roots = vec![Complex64::new(0.0, 0.0); lo];
    let c = &coeffs[lo..=hi];
    let d = c.len() - 1;
    if d == 0 {
        return roots;
    }
    let lead = c[d];
    let mut comp = DMatrix::<Complex64>::zeros(d, d);
    for j in 0..d {
        comp[(0, j)] = -c[d - 1 - j] / lead;
    }
    for i in 1..d {
        comp[(i, i - 1)] = Complex64::new(1.0, 0.0);
    }
    let eig = nalgebra::linalg::Schur::new(comp)
        .eigenvalues()
        .expect("complex Schur form is triangular");
    roots.extend(eig.iter().cloned());
    roots
}

/// Horner evaluation of the polynomial and its derivative.
pub fn poly_eval(coeffs: &[Complex64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

pub fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: u64, b: u64) -> Option<u64> {
    if a == 0 || b == 0 {
        return Some(0);
    }
    (a / gcd(a, b)).checked_mul(b)
}
