//! JSON configuration shared by the CLI and the experiment drivers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::species_model::{build_model, preset_species, AcquisitionModel, EchoSpec, Species, SpeciesPreset, HZ_PER_PPM_3T};

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpeciesRef {
    Preset(String),
    Inline(SpeciesPreset),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoTrain {
    pub t0_ms: f64,
    pub dt_ms: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_times_ms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_train: Option<EchoTrain>,
    pub species: Vec<SpeciesRef>,
    #[serde(default = "default_hz_per_ppm")]
    pub hz_per_ppm: f64,
}

fn default_hz_per_ppm() -> f64 {
    HZ_PER_PPM_3T
}

impl AcquisitionConfig {
    /// Water, fat and silicone with six echoes from 1.238 ms spaced 0.986 ms.
    pub fn phantom_default() -> Self {
        AcquisitionConfig {
            echo_times_ms: None,
            echo_train: Some(EchoTrain { t0_ms: 1.238, dt_ms: 0.986, n: 6 }),
            species: ["water", "fat", "silicone"].iter().map(|s| SpeciesRef::Preset(s.to_string())).collect(),
            hz_per_ppm: HZ_PER_PPM_3T,
        }
    }

    pub fn echoes(&self) -> Result<EchoSpec> {
        match (&self.echo_times_ms, &self.echo_train) {
            (Some(t), None) => EchoSpec::from_ms(t),
            (None, Some(tr)) => EchoSpec::uniform_ms(tr.t0_ms, tr.dt_ms, tr.n),
            _ => Err(Error::Spec("give exactly one of echo_times_ms or echo_train".into())),
        }
    }

    pub fn species(&self) -> Result<Vec<Species>> {
        self.species
            .iter()
            .map(|s| match s {
                SpeciesRef::Preset(name) => preset_species(name, self.hz_per_ppm),
                SpeciesRef::Inline(p) => p.to_species(self.hz_per_ppm),
            })
            .collect()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| match s {
            SpeciesRef::Preset(n) => n == name,
            SpeciesRef::Inline(p) => p.name == name,
        })
    }

    pub fn build(&self) -> Result<AcquisitionModel> {
        Ok(build_model(self.species()?, self.echoes()?)?.with_hz_per_ppm(self.hz_per_ppm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    pub eps_on_mask_hz: f64,
    /// `null` in JSON disables the bound off the mask.
    #[serde(with = "infinite_as_null")]
    pub eps_off_mask_hz: f64,
    pub mask_threshold: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig { eps_on_mask_hz: 30.0, eps_off_mask_hz: 1000.0, mask_threshold: 1e-8 }
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
