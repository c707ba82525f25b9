//! The residual `R(xi) = W(xi) P_R W(-xi)`, its xi-derivatives and the
//! voxel objectives built from it.
//!
//! Inner products are antilinear in the first argument. For a real objective
//! `f`, the gradient in the (Re xi, Im xi) chart is `(2 Re d_xi, -2 Im d_xi)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{self, inner, norm_sq, I};
use crate::species_model::{weights, AcquisitionModel};
use crate::{CMat, CVec, Complex64};

#[derive(Debug, Clone)]
pub struct ResidualOperator {
    pub model: AcquisitionModel,
    pub p_r: CMat,
    pub phi_pinv: CMat,
    /// `4 pi (t_ne - t_1)`
    pub tau_s: f64,
    /// `4 pi t_ne`
    pub tau_ne: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirtingerGradient {
    pub d_xi: Complex64,
    pub d_xi_conj: Complex64,
}

impl WirtingerGradient {
    fn new(d_xi: Complex64) -> Self {
        WirtingerGradient { d_xi, d_xi_conj: d_xi.conj() }
    }

    /// Gradient in the real chart packed as `dRe + i dIm`.
    pub fn chart(&self) -> Complex64 {
        2.0 * self.d_xi.conj()
    }

    pub fn chart_norm(&self) -> f64 {
        2.0 * self.d_xi.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirtingerHessian {
    /// `d^2 f / d xi d xi = 1/2 <R s, R'' s>`
    pub d_xixi: Complex64,
    /// `d^2 f / d xi d xi* = 1/2 |R' s|^2`
    pub d_xixiconj: f64,
}

/// `|eta|^2 |R' s|^2 + Re(eta^2 <R s, R'' s>)`, twice the second-order
/// Taylor term of the objective along `eta`.
pub fn hessian_quadratic_form(h: &WirtingerHessian, eta: Complex64) -> f64 {
    2.0 * (eta.norm_sqr() * h.d_xixiconj + (eta * eta * h.d_xixi).re)
}

/// `R s`, `R' s`, `R'' s` at one point.
#[derive(Debug, Clone)]
pub struct Applied {
    pub r0: CVec,
    pub r1: CVec,
    pub r2: CVec,
}

#[derive(Debug, Clone)]
pub struct FullResidual {
    pub value: f64,
    pub grad_xi: WirtingerGradient,
    /// `d f / d s* = 1/2 R^H R s`
    pub d_s_conj: CVec,
}

impl ResidualOperator {
    pub fn new(model: AcquisitionModel) -> Result<Self> {
        let sv = linalg::singular_values(&model.phi);
        let (smax, smin) = (sv[0], *sv.last().unwrap());
        if !(smin > 1e-10 * smax) {
            return Err(Error::RankDeficient(if smax > 0.0 { smin / smax } else { 0.0 }));
        }
        let phi_pinv = linalg::pinv(&model.phi, 1e-12);
        let ne = model.n_echoes();
        let mut p_r = CMat::identity(ne, ne) - &model.phi * &phi_pinv;
        // symmetrize away rounding so P_R is Hermitian to the last bit
        p_r = (&p_r + p_r.adjoint()) * Complex64::new(0.5, 0.0);
        let t = model.times();
        let tau_s = 4.0 * PI * (t[ne - 1] - t[0]);
        let tau_ne = 4.0 * PI * t[ne - 1];
        Ok(ResidualOperator { model, p_r, phi_pinv, tau_s, tau_ne })
    }

    pub fn times(&self) -> &[f64] {
        self.model.times()
    }

    pub fn n_echoes(&self) -> usize {
        self.model.n_echoes()
    }

    /// Largest |Im xi| accepted before exponentials risk overflow.
    pub fn max_imag(&self) -> f64 {
        700.0 / (2.0 * PI * self.model.echoes.t_max())
    }

    fn guard(&self, xi: Complex64) -> Result<()> {
        if !(xi.im.abs() <= self.max_imag()) {
            return Err(Error::OverflowRisk(xi.im));
        }
        Ok(())
    }

    pub fn residual_matrix(&self, xi: Complex64) -> Result<CMat> {
        self.guard(xi)?;
        let t = self.times();
        let n = t.len();
        Ok(CMat::from_fn(n, n, |j, k| {
            (2.0 * PI * I * xi * (t[j] - t[k])).exp() * self.p_r[(j, k)]
        }))
    }

    /// n-th derivative of `R` by the commutator recursion `R^(n) = 2 pi i [T, R^(n-1)]`.
    pub fn residual_derivative(&self, xi: Complex64, n: usize) -> Result<CMat> {
        let mut r = self.residual_matrix(xi)?;
        let t = self.times();
        for _ in 0..n {
            let tr = CMat::from_fn(r.nrows(), r.ncols(), |j, k| {
                2.0 * PI * I * (t[j] * r[(j, k)] - r[(j, k)] * t[k])
            });
            r = tr;
        }
        Ok(r)
    }

    /// `R s`, `R' s`, `R'' s` in O(n_e^2) without forming the matrices.
    pub fn apply(&self, xi: Complex64, s: &CVec) -> Result<Applied> {
        self.guard(xi)?;
        let t = self.times();
        let n = t.len();
        let w = weights(xi, t);
        let u: Vec<Complex64> = (0..n).map(|k| s[k] / w[k]).collect();
        let mut r0 = CVec::zeros(n);
        let mut r1 = CVec::zeros(n);
        let mut r2 = CVec::zeros(n);
        for j in 0..n {
            let (mut a0, mut a1, mut a2) = (Complex64::default(), Complex64::default(), Complex64::default());
            for k in 0..n {
                let e = self.p_r[(j, k)] * u[k];
                let d = 2.0 * PI * I * (t[j] - t[k]);
                a0 += e;
                a1 += d * e;
                a2 += d * d * e;
            }
            r0[j] = w[j] * a0;
            r1[j] = w[j] * a1;
            r2[j] = w[j] * a2;
        }
        Ok(Applied { r0, r1, r2 })
    }

    /// `R s` only.
    pub fn apply_r(&self, xi: Complex64, s: &CVec) -> Result<CVec> {
        self.guard(xi)?;
        let w = weights(xi, self.times());
        let u = s.component_div(&w);
        Ok(w.component_mul(&(&self.p_r * u)))
    }

    /// `f0(xi) = 1/2 |R(xi) s|^2`
    pub fn residual_value(&self, xi: Complex64, s: &CVec) -> Result<f64> {
        Ok(0.5 * norm_sq(&self.apply_r(xi, s)?))
    }

    pub fn gradient(&self, xi: Complex64, s: &CVec) -> Result<WirtingerGradient> {
        let a = self.apply(xi, s)?;
        Ok(WirtingerGradient::new(0.5 * inner(&a.r0, &a.r1)))
    }

    pub fn value_and_gradient(&self, xi: Complex64, s: &CVec) -> Result<(f64, WirtingerGradient)> {
        let a = self.apply(xi, s)?;
        Ok((0.5 * norm_sq(&a.r0), WirtingerGradient::new(0.5 * inner(&a.r0, &a.r1))))
    }

    pub fn hessian(&self, xi: Complex64, s: &CVec) -> Result<WirtingerHessian> {
        let a = self.apply(xi, s)?;
        Ok(WirtingerHessian { d_xixi: 0.5 * inner(&a.r0, &a.r2), d_xixiconj: 0.5 * norm_sq(&a.r1) })
    }

    /// `Phi^+ W(-xi) s`
    pub fn concentrations_ri(&self, xi: Complex64, s: &CVec) -> Result<CVec> {
        self.guard(xi)?;
        let w = weights(xi, self.times());
        Ok(&self.phi_pinv * s.component_div(&w))
    }

    /// `(W(xi) Phi)^+ s`
    pub fn concentrations_mp(&self, xi: Complex64, s: &CVec) -> Result<CVec> {
        self.guard(xi)?;
        let w = weights(xi, self.times());
        let m = CMat::from_diagonal(&w) * &self.model.phi;
        Ok(linalg::lstsq(&m, s))
    }

    /// `f(xi, s) = 1/2 |R(xi) s|^2` with gradients in both xi and s.
    pub fn full_residual(&self, xi: Complex64, s: &CVec) -> Result<FullResidual> {
        let a = self.apply(xi, s)?;
        let value = 0.5 * norm_sq(&a.r0);
        let grad_xi = WirtingerGradient::new(0.5 * inner(&a.r0, &a.r1));
        let d_s_conj = self.apply_r_adjoint(xi, &a.r0)? * Complex64::new(0.5, 0.0);
        Ok(FullResidual { value, grad_xi, d_s_conj })
    }

    /// `R(xi)^H v = R(xi*) v`
    pub fn apply_r_adjoint(&self, xi: Complex64, v: &CVec) -> Result<CVec> {
        self.apply_r(xi.conj(), v)
    }

    /// Upper bound on the operator norm of `R(xi)`.
    pub fn norm_bound(&self, xi: Complex64) -> f64 {
        (self.tau_s * xi.im.abs() / 2.0).exp()
    }
}
