//! Drivers that turn the analysis routines into CSV/JSON data files.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SpeciesRef;
use crate::error::Result;
use crate::imaging::ImageGrid;
use crate::linalg::singular_values;
use crate::phantom::PhantomTruth;
use crate::residual::ResidualOperator;
use crate::solution_set::{delta_matrix, delta_zero_set, model_lattice, DeltaZeroSet, ZeroSetConfig};
use crate::solver::{q_value, CurvatureInputs};
use crate::species_model::{build_model, preset_species, weights, EchoSpec, Species, HZ_PER_PPM_3T};
use crate::{CVec, Complex64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolutionSetExperiment {
    pub t0_ms: f64,
    pub dt_ms: f64,
    pub echo_counts: Vec<usize>,
    pub species: Vec<SpeciesRef>,
    pub hz_per_ppm: f64,
    pub phi_min_hz: f64,
    pub phi_max_hz: f64,
    pub phi_step_hz: f64,
}

impl Default for SolutionSetExperiment {
    fn default() -> Self {
        SolutionSetExperiment {
            t0_ms: 1.3,
            dt_ms: 1.05,
            echo_counts: vec![4, 6, 7, 8],
            species: vec![SpeciesRef::Preset("water".into()), SpeciesRef::Preset("fat".into())],
            hz_per_ppm: HZ_PER_PPM_3T,
            phi_min_hz: -1000.0,
            phi_max_hz: 21000.0,
            phi_step_hz: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroSetEntry {
    pub n_e: usize,
    pub lattice_period_hz: Option<f64>,
    pub zero_set: DeltaZeroSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionSetArtifacts {
    pub phi_hz: Vec<f64>,
    /// `|I - W(phi)|_F`, one column per echo count.
    pub weighting_error: Vec<Vec<f64>>,
    /// `sigma_min(Delta(phi))`, one column per echo count.
    pub delta_sigma_min: Vec<Vec<f64>>,
    pub echo_counts: Vec<usize>,
    pub zeros: Vec<ZeroSetEntry>,
}

fn resolve_species(refs: &[SpeciesRef], hz_per_ppm: f64) -> Result<Vec<Species>> {
    refs.iter()
        .map(|s| match s {
            SpeciesRef::Preset(n) => preset_species(n, hz_per_ppm),
            SpeciesRef::Inline(p) => p.to_species(hz_per_ppm),
        })
        .collect()
}

pub fn experiment_solution_set(cfg: &SolutionSetExperiment) -> Result<SolutionSetArtifacts> {
    let species = resolve_species(&cfg.species, cfg.hz_per_ppm)?;
    let steps = ((cfg.phi_max_hz - cfg.phi_min_hz) / cfg.phi_step_hz).floor().max(0.0) as usize;
    let phi: Vec<f64> = (0..=steps).map(|k| cfg.phi_min_hz + k as f64 * cfg.phi_step_hz).collect();
    let mut weighting_error = Vec::new();
    let mut delta_sigma_min = Vec::new();
    let mut zeros = Vec::new();
    for &n in &cfg.echo_counts {
        let echoes = EchoSpec::uniform_ms(cfg.t0_ms, cfg.dt_ms, n)?;
        let model = build_model(species.clone(), echoes.clone())?;
        weighting_error.push(
            phi.par_iter()
                .map(|&p| {
                    weights(Complex64::new(p, 0.0), echoes.times())
                        .iter()
                        .map(|w| (w - Complex64::new(1.0, 0.0)).norm_sqr())
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        );
        delta_sigma_min.push(
            phi.par_iter()
                .map(|&p| *singular_values(&delta_matrix(Complex64::new(p, 0.0), &model)).last().unwrap_or(&0.0))
                .collect(),
        );
        zeros.push(ZeroSetEntry {
            n_e: n,
            lattice_period_hz: model_lattice(&model).period_hz,
            zero_set: delta_zero_set(&model, (cfg.phi_min_hz, cfg.phi_max_hz), &ZeroSetConfig::default())?,
        });
    }
    Ok(SolutionSetArtifacts { phi_hz: phi, weighting_error, delta_sigma_min, echo_counts: cfg.echo_counts.clone(), zeros })
}

fn table_csv(x_name: &str, x: &[f64], names: &[String], cols: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{x_name},{}", names.join(","));
    for (i, xv) in x.iter().enumerate() {
        let _ = write!(out, "{xv}");
        for c in cols {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    out
}

impl SolutionSetArtifacts {
    pub fn weighting_error_csv(&self) -> String {
        let names: Vec<String> = self.echo_counts.iter().map(|n| format!("frob_error_ne{n}")).collect();
        table_csv("phi_hz", &self.phi_hz, &names, &self.weighting_error)
    }

    pub fn sigma_min_csv(&self) -> String {
        let names: Vec<String> = self.echo_counts.iter().map(|n| format!("sigma_min_ne{n}")).collect();
        table_csv("phi_hz", &self.phi_hz, &names, &self.delta_sigma_min)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("weighting_error.csv"), self.weighting_error_csv())?;
        std::fs::write(dir.join("delta_sigma_min.csv"), self.sigma_min_csv())?;
        std::fs::write(dir.join("delta_zeros.json"), serde_json::to_string_pretty(&self.zeros)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvatureExperiment {
    pub rho: f64,
    pub radii_hz: Vec<f64>,
    pub angular_samples: usize,
}

impl Default for CurvatureExperiment {
    fn default() -> Self {
        CurvatureExperiment { rho: 0.5, radii_hz: (0..=40).map(|k| 2.0 * k as f64).collect(), angular_samples: 64 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VoxelCurvature {
    pub x: usize,
    pub y: usize,
    pub radius_lambert_hz: f64,
    pub radius_tight_hz: f64,
    /// Radius where `Q` first drops to one half; `None` beyond the grid.
    pub radius_half_hz: Option<f64>,
    /// Radius where `Q` first reaches zero; `None` beyond the grid.
    pub radius_zero_hz: Option<f64>,
    pub q_profile: Vec<(f64, f64)>,
}

/// First crossing of `level` on the sampled profile, refined by bisection
/// between the bracketing samples.
fn refine_crossing(
    op: &ResidualOperator,
    xi0: Complex64,
    s0: &CVec,
    profile: &[(f64, f64)],
    level: f64,
    angular: usize,
) -> Result<Option<f64>> {
    let Some(k) = profile.iter().position(|p| p.1 <= level) else { return Ok(None) };
    if k == 0 {
        return Ok(Some(profile[0].0));
    }
    let (mut lo, mut hi) = (profile[k - 1].0, profile[k].0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if q_value(op, xi0, s0, mid, angular)? <= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

pub fn experiment_curvature(
    truth: &PhantomTruth,
    grid: &ImageGrid,
    op: &ResidualOperator,
    cfg: &CurvatureExperiment,
) -> Result<Vec<VoxelCurvature>> {
    let voxels: Vec<usize> = (0..grid.len()).filter(|&v| grid.mask[v]).collect();
    voxels
        .par_iter()
        .map(|&v| {
            let (xi0, s0) = (truth.xi_map[v], &grid.signal[v]);
            let ci = CurvatureInputs::new(op, xi0, s0)?;
            let q_profile: Vec<(f64, f64)> = cfg
                .radii_hz
                .iter()
                .map(|&r| Ok((r, q_value(op, xi0, s0, r, cfg.angular_samples)?)))
                .collect::<Result<_>>()?;
            Ok(VoxelCurvature {
                x: v % grid.width,
                y: v / grid.width,
                radius_lambert_hz: ci.radius_lambert(cfg.rho)?,
                radius_tight_hz: ci.radius_tight(cfg.rho)?,
                radius_half_hz: refine_crossing(op, xi0, s0, &q_profile, 0.5, cfg.angular_samples)?,
                radius_zero_hz: refine_crossing(op, xi0, s0, &q_profile, 0.0, cfg.angular_samples)?,
                q_profile,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn curvature_maps_csv(rows: &[VoxelCurvature]) -> String {
    let mut out = String::from("x,y,radius_lambert_hz,radius_tight_hz,radius_half_hz,radius_zero_hz\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.x,
            r.y,
            r.radius_lambert_hz,
            r.radius_tight_hz,
            opt(r.radius_half_hz),
            opt(r.radius_zero_hz)
        );
    }
    out
}

pub fn q_profiles_csv(rows: &[VoxelCurvature]) -> String {
    let mut out = String::from("x,y,r_hz,q\n");
    for r in rows {
        for (rad, q) in &r.q_profile {
            let _ = writeln!(out, "{},{},{rad},{q}", r.x, r.y);
        }
    }
    out
}

pub fn write_curvature(dir: &Path, rows: &[VoxelCurvature]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("curvature_maps.csv"), curvature_maps_csv(rows))?;
    std::fs::write(dir.join("q_profiles.csv"), q_profiles_csv(rows))?;
    Ok(())
}
