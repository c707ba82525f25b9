//! Species spectra, echo schedules and the forward signal map
//! `s(xi, c) = W(xi) Phi c`.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, binomial, I};
use crate::{CMat, CVec, Complex64};

/// Larmor frequency of protons at 3 T, in Hz per ppm.
pub const HZ_PER_PPM_3T: f64 = 42.577_478_518 * 3.0;

/// Selections enumerated before giving up with `CombinatorialLimit`.
pub const SELECTION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub frequency_hz: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Species {
    pub name: String,
    pub peaks: Vec<SpectralPeak>,
}

impl Species {
    pub fn new(name: impl Into<String>, peaks: Vec<SpectralPeak>) -> Result<Self> {
        let name = name.into();
        if peaks.is_empty() {
            return Err(Error::InvalidSpecies(format!("{name}: no peaks")));
        }
        if let Some(p) = peaks.iter().find(|p| !(p.weight >= 0.0) || !p.frequency_hz.is_finite()) {
            return Err(Error::InvalidSpecies(format!("{name}: bad peak {p:?}")));
        }
        let total: f64 = peaks.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpecies(format!("{name}: weights sum to {total}")));
        }
        Ok(Species { name, peaks })
    }

    /// Like [`Species::new`] but rescales the weights to sum to one.
    pub fn normalized(name: impl Into<String>, mut peaks: Vec<SpectralPeak>) -> Result<Self> {
        let total: f64 = peaks.iter().map(|p| p.weight).sum();
        if total > 0.0 {
            for p in &mut peaks {
                p.weight /= total;
            }
        }
        Species::new(name, peaks)
    }

    pub fn single_peak(name: impl Into<String>, frequency_hz: f64) -> Self {
        Species { name: name.into(), peaks: vec![SpectralPeak { frequency_hz, weight: 1.0 }] }
    }

    /// Spectrum evaluated at time `t` (seconds).
    pub fn spectrum(&self, t: f64) -> Complex64 {
        self.peaks
            .iter()
            .map(|p| p.weight * (2.0 * std::f64::consts::PI * I * p.frequency_hz * t).exp())
            .sum()
    }
}

/// Peak as written in a preset file: either `ppm` or `hz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetPeak {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hz: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesPreset {
    pub name: String,
    pub peaks: Vec<PresetPeak>,
    #[serde(default)]
    pub normalize: bool,
    /// Added to every ppm value before conversion.
    #[serde(default)]
    pub temperature_correction_ppm: f64,
}

impl SpeciesPreset {
    pub fn to_species(&self, hz_per_ppm: f64) -> Result<Species> {
        let peaks = self
            .peaks
            .iter()
            .map(|p| {
                let hz = match (p.ppm, p.hz) {
                    (Some(ppm), None) => (ppm + self.temperature_correction_ppm) * hz_per_ppm,
                    (None, Some(hz)) => hz,
                    _ => {
                        return Err(Error::InvalidSpecies(format!(
                            "{}: each peak needs exactly one of ppm or hz",
                            self.name
                        )))
                    }
                };
                Ok(SpectralPeak { frequency_hz: hz, weight: p.weight })
            })
            .collect::<Result<Vec<_>>>()?;
        if self.normalize {
            Species::normalized(&self.name, peaks)
        } else {
            Species::new(&self.name, peaks)
        }
    }
}

const WATER_JSON: &str = include_str!("../presets/water.json");
const FAT_JSON: &str = include_str!("../presets/fat.json");
const SILICONE_JSON: &str = include_str!("../presets/silicone.json");

pub fn preset(name: &str) -> Result<SpeciesPreset> {
    let text = match name.to_ascii_lowercase().as_str() {
        "water" => WATER_JSON,
        "fat" => FAT_JSON,
        "silicone" => SILICONE_JSON,
        other => return Err(Error::InvalidSpecies(format!("unknown preset '{other}'"))),
    };
    Ok(serde_json::from_str(text)?)
}

pub fn preset_species(name: &str, hz_per_ppm: f64) -> Result<Species> {
    preset(name)?.to_species(hz_per_ppm)
}

/// Echo times in seconds, strictly increasing and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoSpec {
    times_s: Vec<f64>,
}

impl EchoSpec {
    pub fn new(times_s: Vec<f64>) -> Result<Self> {
        if times_s.is_empty() {
            return Err(Error::Dimension("no echo times".into()));
        }
        if !times_s.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(Error::Domain("echo times must be positive".into()));
        }
        if times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("echo times must be strictly increasing".into()));
        }
        Ok(EchoSpec { times_s })
    }

    pub fn from_ms(times_ms: &[f64]) -> Result<Self> {
        EchoSpec::new(times_ms.iter().map(|t| t * 1e-3).collect())
    }

    /// `n` equispaced echoes `t0 + k dt`, all in milliseconds.
    pub fn uniform_ms(t0_ms: f64, dt_ms: f64, n: usize) -> Result<Self> {
        EchoSpec::new((0..n).map(|k| (t0_ms + dt_ms * k as f64) * 1e-3).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times_s
    }

    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        *self.times_s.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct AcquisitionModel {
    pub echoes: EchoSpec,
    pub species: Vec<Species>,
    pub phi: CMat,
    pub hz_per_ppm: Option<f64>,
}

pub fn build_model(species: Vec<Species>, echoes: EchoSpec) -> Result<AcquisitionModel> {
    let (ne, ns) = (echoes.len(), species.len());
    if ns == 0 {
        return Err(Error::Dimension("no species".into()));
    }
    if ne < ns {
        return Err(Error::Dimension(format!("{ne} echoes cannot resolve {ns} species")));
    }
    for s in &species {
        Species::new(s.name.clone(), s.peaks.clone())?;
    }
    let phi = CMat::from_fn(ne, ns, |k, l| species[l].spectrum(echoes.times()[k]));
    Ok(AcquisitionModel { echoes, species, phi, hz_per_ppm: None })
}

impl AcquisitionModel {
    pub fn n_echoes(&self) -> usize {
        self.echoes.len()
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn times(&self) -> &[f64] {
        self.echoes.times()
    }

    pub fn with_hz_per_ppm(mut self, hz_per_ppm: f64) -> Self {
        self.hz_per_ppm = Some(hz_per_ppm);
        self
    }

    /// Diagonal of `W(xi)`.
    pub fn weights(&self, xi: Complex64) -> CVec {
        weights(xi, self.times())
    }

    pub fn weighting_matrix(&self, xi: Complex64) -> CMat {
        CMat::from_diagonal(&self.weights(xi))
    }

    pub fn signal(&self, xi: Complex64, c: &CVec) -> Result<CVec> {
        if c.len() != self.n_species() {
            return Err(Error::Dimension(format!(
                "concentration has {} entries, model has {} species",
                c.len(),
                self.n_species()
            )));
        }
        Ok(self.weights(xi).component_mul(&(&self.phi * c)))
    }
}

pub fn weights(xi: Complex64, times: &[f64]) -> CVec {
    CVec::from_iterator(
        times.len(),
        times.iter().map(|&t| (2.0 * std::f64::consts::PI * I * xi * t).exp()),
    )
}

pub fn weighting_matrix(xi: Complex64, echoes: &EchoSpec) -> CMat {
    CMat::from_diagonal(&weights(xi, echoes.times()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubmatrixReport {
    pub min_abs_det: f64,
    pub worst_selection: Vec<usize>,
    pub scale: f64,
    pub ok: bool,
}

/// Smallest |det| over all square row selections of the model matrix.
pub fn check_submatrices_nonsingular(model: &AcquisitionModel, tol: f64) -> Result<SubmatrixReport> {
    let (ne, ns) = (model.n_echoes(), model.n_species());
    let count = binomial(ne, ns);
    if count > SELECTION_LIMIT {
        return Err(Error::CombinatorialLimit { count, limit: SELECTION_LIMIT });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for rows in (0..ne).combinations(ns) {
        let sub = model.phi.select_rows(rows.iter());
        let d = sub.determinant().norm();
        if best.as_ref().map_or(true, |b| d < b.0) {
            best = Some((d, rows));
        }
    }
    let (min_abs_det, worst_selection) = best.expect("at least one selection");
    let sub = model.phi.select_rows(worst_selection.iter());
    let scale: f64 = sub.row_iter().map(|r| r.norm()).product();
    Ok(SubmatrixReport { min_abs_det, ok: min_abs_det > tol * scale, scale, worst_selection })
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianRankReport {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub ok: bool,
    pub reason: Option<String>,
}

/// Rank test for `[T Phi, Phi]`.
pub fn check_j_full_rank(model: &AcquisitionModel, tol: f64) -> JacobianRankReport {
    jacobian_rank(model.times(), &model.phi, tol)
}

/// Rank test of `[T Phi, Phi]` for raw echo times, which may repeat. `T` is
/// divided by the largest time so both blocks have comparable scale; this
/// does not change the rank.
pub fn jacobian_rank(times: &[f64], phi: &CMat, tol: f64) -> JacobianRankReport {
    let (ne, ns) = (phi.nrows(), phi.ncols());
    let tmax = times.iter().cloned().fold(0.0, f64::max);
    let mut j = CMat::zeros(ne, 2 * ns);
    for k in 0..ne {
        for l in 0..ns {
            j[(k, l)] = phi[(k, l)] * (times[k] / tmax);
            j[(k, ns + l)] = phi[(k, l)];
        }
    }
    let sv = linalg::singular_values(&j);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    if ne < 2 * ns {
        return JacobianRankReport {
            sigma_min: 0.0,
            sigma_max,
            ok: false,
            reason: Some("rank deficient by dimension".into()),
        };
    }
    let sigma_min = sv.last().copied().unwrap_or(0.0);
    JacobianRankReport { sigma_min, sigma_max, ok: sigma_min > tol * sigma_max, reason: None }
}
