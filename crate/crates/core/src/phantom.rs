//! In-silico phantoms and data corruption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageGrid;
use crate::species_model::{build_model, AcquisitionModel, EchoSpec, Species};
use crate::{CVec, Complex64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Disk { center: [f64; 2], radius: f64 },
    Rect { center: [f64; 2], size: [f64; 2] },
}

impl Geometry {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Disk { center, radius } => (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius,
            Geometry::Rect { center, size } => {
                (x - center[0]).abs() <= 0.5 * size[0] && (y - center[1]).abs() <= 0.5 * size[1]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Geometry::Disk { center, radius } => center.iter().all(|c| c.is_finite()) && radius.is_finite() && *radius > 0.0,
            Geometry::Rect { center, size } => {
                center.iter().all(|c| c.is_finite()) && size.iter().all(|s| s.is_finite() && *s > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("malformed shape {self:?}")))
        }
    }
}

/// Shapes overlap additively, so a mixture is two shapes on the same footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    #[serde(flatten)]
    pub geometry: Geometry,
    pub species_index: usize,
    /// `[re, im]`
    pub concentration: Complex64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldSpec {
    Constant { value: f64 },
    Linear { offset: f64, gx: f64, gy: f64 },
    GaussianBump { offset: f64, amplitude: f64, center: [f64; 2], sigma: f64 },
    /// `offset + scale ((x - cx)^2 - (y - cy)^2)`
    Harmonic { offset: f64, scale: f64, center: [f64; 2] },
    /// Value of the last shape covering the voxel, `background` elsewhere.
    ByShape { background: f64, values: Vec<f64> },
}

impl FieldSpec {
    fn eval(&self, x: f64, y: f64, covering: Option<usize>) -> f64 {
        match self {
            FieldSpec::Constant { value } => *value,
            FieldSpec::Linear { offset, gx, gy } => offset + gx * x + gy * y,
            FieldSpec::GaussianBump { offset, amplitude, center, sigma } => {
                let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                offset + amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            FieldSpec::Harmonic { offset, scale, center } => {
                offset + scale * ((x - center[0]).powi(2) - (y - center[1]).powi(2))
            }
            FieldSpec::ByShape { background, values } => covering.map_or(*background, |k| values[k]),
        }
    }

    fn validate(&self, n_shapes: usize) -> Result<()> {
        match self {
            FieldSpec::ByShape { values, .. } if values.len() != n_shapes => Err(Error::Spec(format!(
                "by-shape field lists {} values for {n_shapes} shapes",
                values.len()
            ))),
            FieldSpec::GaussianBump { sigma, .. } if !(*sigma > 0.0) => Err(Error::Spec("gaussian bump needs sigma > 0".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<Shape>,
    pub fieldmap: FieldSpec,
    pub r2star: FieldSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub width: usize,
    pub height: usize,
    pub xi_map: Vec<Complex64>,
    pub c_map: Vec<CVec>,
    pub mask: Vec<bool>,
}

pub const DEFAULT_FAT_FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// 64x64 grid of twelve disks: pure water, fat and silicone, then water/fat
/// mixtures, over a smooth fieldmap bump. Species order is water, fat, silicone.
pub fn default_phantom() -> PhantomSpec {
    let xs = [9.0, 24.0, 40.0, 55.0];
    let ys = [12.0, 32.0, 52.0];
    let radius = 6.0;
    let mut shapes = Vec::new();
    let mut r2 = Vec::new();
    let disk = |k: usize| Geometry::Disk { center: [xs[k % 4], ys[k / 4]], radius };
    let pure = [("water", 0, 4.0), ("fat", 1, 6.0), ("silicone", 2, 3.0)];
    for (k, (name, idx, rate)) in pure.iter().enumerate() {
        shapes.push(Shape {
            geometry: disk(k),
            species_index: *idx,
            concentration: Complex64::new(1.0, 0.0),
            label: Some(name.to_string()),
        });
        r2.push(*rate);
    }
    for (j, ff) in DEFAULT_FAT_FRACTIONS.iter().enumerate() {
        let g = disk(3 + j);
        let label = Some(format!("ff{:.0}", ff * 100.0));
        shapes.push(Shape { geometry: g.clone(), species_index: 0, concentration: Complex64::new(1.0 - ff, 0.0), label: label.clone() });
        shapes.push(Shape { geometry: g, species_index: 1, concentration: Complex64::new(*ff, 0.0), label });
        r2.extend([5.0, 5.0]);
    }
    PhantomSpec {
        width: 64,
        height: 64,
        shapes,
        fieldmap: FieldSpec::GaussianBump { offset: 0.0, amplitude: 40.0, center: [32.0, 32.0], sigma: 20.0 },
        r2star: FieldSpec::ByShape { background: 0.0, values: r2 },
        seed: 0,
    }
}

pub fn generate_phantom(spec: &PhantomSpec, model: &AcquisitionModel) -> Result<(PhantomTruth, ImageGrid)> {
    let ns = model.n_species();
    for s in &spec.shapes {
        s.geometry.validate()?;
        if s.species_index >= ns {
            return Err(Error::Spec(format!("species index {} with {ns} species", s.species_index)));
        }
        if !s.concentration.re.is_finite() || !s.concentration.im.is_finite() {
            return Err(Error::Spec("non-finite concentration".into()));
        }
    }
    spec.fieldmap.validate(spec.shapes.len())?;
    spec.r2star.validate(spec.shapes.len())?;
    let (w, h) = (spec.width, spec.height);
    let mut xi_map = Vec::with_capacity(w * h);
    let mut c_map = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let mut c = CVec::zeros(ns);
            let mut covering = None;
            for (k, s) in spec.shapes.iter().enumerate() {
                if s.geometry.contains(fx, fy) {
                    c[s.species_index] += s.concentration;
                    covering = Some(k);
                }
            }
            let phi = spec.fieldmap.eval(fx, fy, covering);
            let r2 = spec.r2star.eval(fx, fy, covering);
            if !(r2 >= 0.0) || !phi.is_finite() {
                return Err(Error::Spec(format!("invalid fieldmap or negative r2* at ({x}, {y})")));
            }
            mask.push(c.iter().any(|z| z.norm() > 0.0));
            xi_map.push(Complex64::new(phi, r2));
            c_map.push(c);
        }
    }
    let signal: Result<Vec<CVec>> = xi_map.iter().zip(&c_map).map(|(xi, c)| model.signal(*xi, c)).collect();
    let grid = ImageGrid::new(w, h, signal?, mask.clone())?;
    Ok((PhantomTruth { width: w, height: h, xi_map, c_map, mask }, grid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MismatchConcentration {
    /// Applied on the mask only.
    Uniform(Complex64),
    PerVoxel(Vec<Complex64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub species: Species,
    pub concentration: MismatchConcentration,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub sigma: f64,
    #[serde(default)]
    pub mismatch: Option<Mismatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorruptionBudget {
    /// Mean over voxels of `|W(xi0) Phi_M c_M| + sigma sqrt(n_e)`.
    pub mean_bound: f64,
    pub max_bound: f64,
    /// Mean over voxels of the realized `|y - s0|`.
    pub mean_deviation: f64,
}

/// Adds the unmodeled species and circular complex Gaussian noise with
/// `E|z|^2 = sigma^2` per echo.
pub fn corrupt(
    grid: &ImageGrid,
    xi0: &[Complex64],
    echoes: &EchoSpec,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<(ImageGrid, CorruptionBudget)> {
    if !(spec.sigma >= 0.0) {
        return Err(Error::Domain("sigma must be non-negative".into()));
    }
    if xi0.len() != grid.len() || echoes.len() != grid.n_echoes() {
        return Err(Error::Dimension("fieldmap or echo count does not match the grid".into()));
    }
    let mismatch = match &spec.mismatch {
        Some(m) => {
            let model = build_model(vec![m.species.clone()], echoes.clone())?;
            let conc: Vec<Complex64> = match &m.concentration {
                MismatchConcentration::Uniform(c) => {
                    grid.mask.iter().map(|&on| if on { *c } else { Complex64::new(0.0, 0.0) }).collect()
                }
                MismatchConcentration::PerVoxel(v) if v.len() == grid.len() => v.clone(),
                MismatchConcentration::PerVoxel(v) => {
                    return Err(Error::Dimension(format!("{} mismatch concentrations for {} voxels", v.len(), grid.len())))
                }
            };
            Some((model, conc))
        }
        None => None,
    };
    let ne = grid.n_echoes();
    let normal = Normal::new(0.0, spec.sigma / 2f64.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(grid.len());
    let (mut sum_bound, mut max_bound, mut sum_dev) = (0.0, 0.0f64, 0.0);
    for v in 0..grid.len() {
        let mut y = grid.signal[v].clone();
        let mut bound = spec.sigma * (ne as f64).sqrt();
        if let Some((model, conc)) = &mismatch {
            let extra = model.signal(xi0[v], &CVec::from_element(1, conc[v]))?;
            bound += extra.norm();
            y += extra;
        }
        if spec.sigma > 0.0 {
            for z in y.iter_mut() {
                *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
        }
        sum_dev += (&y - &grid.signal[v]).norm();
        sum_bound += bound;
        max_bound = max_bound.max(bound);
        out.push(y);
    }
    let n = grid.len().max(1) as f64;
    let budget = CorruptionBudget { mean_bound: sum_bound / n, max_bound, mean_deviation: sum_dev / n };
    Ok((ImageGrid::new(grid.width, grid.height, out, grid.mask.clone())?, budget))
}
