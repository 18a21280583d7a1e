//! Pipeline configuration: one JSON document, every key overridable by its
//! dotted path (`model.nz`, `pricing.on_demand_rate`, ...).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::batchsim::PricingModel;
use crate::survey::{
    apply_reciprocity, make_layered_model, make_random_obn_geometry, Geometry, Position,
    ShotGatherPlan, VelocityModel2D,
};
use crate::wavekernel::{max_stable_dt, ricker, Wavelet};

use super::OrchestratorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
    /// Uniform velocity, used when `layers` is empty.
    pub velocity: f64,
    /// Layer velocities from top to bottom.
    pub layers: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nz: 101,
            nx: 101,
            dz: 10.0,
            dx: 10.0,
            velocity: 2000.0,
            layers: Vec::new(),
        }
    }
}

/// Velocity bump added to the migration model to build the "true" model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScattererConfig {
    /// Physical position; defaults to the model centre.
    pub x: Option<f64>,
    pub z: Option<f64>,
    /// Relative velocity increase.
    pub perturbation: f64,
    /// Cells on each side of the centre cell.
    pub half_width: usize,
}

impl Default for ScattererConfig {
    fn default() -> Self {
        Self {
            x: None,
            z: None,
            perturbation: 0.10,
            half_width: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Ocean-bottom nodes; each becomes one shot gather after reciprocity.
    pub n_receivers: usize,
    /// Surface sources; they become the receivers of every shot gather.
    pub n_sources: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n_receivers: 8,
            n_sources: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Launcher {
    /// One OS process per worker (`rtm worker`).
    #[default]
    Process,
    /// Worker loops on threads of the calling process.
    Thread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    /// The first attempt at this shot stalls and its worker gets killed.
    pub kill_shot: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub scatterer: ScattererConfig,
    pub geometry: GeometryConfig,
    pub peak_frequency: f64,
    /// Strength of the source that generates the observed data. Migration
    /// always uses the unit-peak wavelet, so the image scales linearly.
    pub source_amplitude: f64,
    pub dt: f64,
    pub nt: usize,
    pub workers: usize,
    pub fan_in: usize,
    pub reducer_parallel: usize,
    pub visibility_seconds: f64,
    /// Holds `store/`, `queue/`, `jobs/` and the outputs of a run.
    pub work_dir: PathBuf,
    pub seed: u64,
    pub pricing: PricingModel,
    pub scale_latency_seconds: f64,
    pub launcher: Launcher,
    /// Executable providing `rtm worker`; defaults to the running binary.
    pub worker_binary: Option<PathBuf>,
    pub fault: FaultConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scatterer: ScattererConfig::default(),
            geometry: GeometryConfig::default(),
            peak_frequency: 15.0,
            source_amplitude: 1.0,
            dt: 0.002,
            nt: 700,
            workers: 4,
            fan_in: 10,
            reducer_parallel: 4,
            visibility_seconds: 120.0,
            work_dir: PathBuf::from("rtm_work"),
            seed: 42,
            pricing: PricingModel::default(),
            scale_latency_seconds: 0.0,
            launcher: Launcher::Process,
            worker_binary: None,
            fault: FaultConfig::default(),
        }
    }
}

/// Everything a worker needs, rebuilt deterministically from the config.
#[derive(Debug, Clone)]
pub struct Survey {
    pub background: VelocityModel2D,
    pub truth: VelocityModel2D,
    pub geometry: Geometry,
    pub plans: Vec<ShotGatherPlan>,
    pub wavelet: Wavelet,
    pub scatterer: Position,
}

fn config_err(e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Config(e.to_string())
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        serde_json::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` style overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise; keys must already exist.
    pub fn with_overrides<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, OrchestratorError> {
        let mut doc = serde_json::to_value(self).map_err(config_err)?;
        for (key, raw) in pairs {
            let slot = key
                .split('.')
                .try_fold(&mut doc, |node, part| {
                    node.as_object_mut().and_then(|m| m.get_mut(part))
                })
                .ok_or_else(|| OrchestratorError::Config(format!("unknown config key `{key}`")))?;
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        serde_json::from_value(doc).map_err(config_err)
    }

    pub fn store_dir(&self) -> PathBuf {
        self.work_dir.join("store")
    }

    pub fn queue_dir(&self) -> PathBuf {
        self.work_dir.join("queue")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.work_dir.join("jobs")
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.workers == 0 {
            return Err(config_err("workers must be >= 1"));
        }
        if !(2..=32).contains(&self.fan_in) {
            return Err(config_err(format!("fan_in {} outside 2..=32", self.fan_in)));
        }
        if self.reducer_parallel == 0 {
            return Err(config_err("reducer_parallel must be >= 1"));
        }
        if !(self.visibility_seconds > 0.0) {
            return Err(config_err("visibility_seconds must be positive"));
        }
        if !self.source_amplitude.is_finite() {
            return Err(config_err("source_amplitude must be finite"));
        }
        if !(self.scatterer.perturbation > -1.0) {
            return Err(config_err("scatterer perturbation must exceed -1"));
        }
        self.pricing.validate().map_err(config_err)?;
        let survey = self.build_survey()?;
        let stable = max_stable_dt(&survey.truth);
        if self.dt > stable {
            return Err(config_err(format!(
                "dt {} exceeds the stable limit {stable:.6} s",
                self.dt
            )));
        }
        Ok(())
    }

    fn background_model(&self) -> Result<VelocityModel2D, OrchestratorError> {
        let m = &self.model;
        let layers = if m.layers.is_empty() {
            vec![m.velocity]
        } else {
            m.layers.clone()
        };
        make_layered_model(m.nz, m.nx, m.dz, m.dx, &layers).map_err(config_err)
    }

    pub fn build_survey(&self) -> Result<Survey, OrchestratorError> {
        let background = self.background_model()?;
        let (x0, x1, z0, z1) = background.extent();
        let scatterer = Position::new(
            self.scatterer.x.unwrap_or(0.5 * (x0 + x1)),
            self.scatterer.z.unwrap_or(0.5 * (z0 + z1)),
        );
        if !background.contains(scatterer) {
            return Err(config_err(format!(
                "scatterer ({}, {}) outside the model",
                scatterer.x, scatterer.z
            )));
        }
        let mut truth = background.clone();
        let (cz, cx) = background.nearest_cell(scatterer);
        let w = self.scatterer.half_width;
        for iz in cz.saturating_sub(w)..=(cz + w).min(background.nz - 1) {
            for ix in cx.saturating_sub(w)..=(cx + w).min(background.nx - 1) {
                let k = truth.index(iz, ix);
                truth.v[k] *= 1.0 + self.scatterer.perturbation;
            }
        }
        truth.validate().map_err(config_err)?;

        let record_time = self.nt as f64 * self.dt;
        let geometry = make_random_obn_geometry(
            &background,
            self.geometry.n_receivers,
            self.geometry.n_sources,
            self.seed,
            record_time,
            self.dt,
        )
        .map_err(config_err)?;
        let plans = apply_reciprocity(&geometry);
        let wavelet = ricker(self.peak_frequency, self.dt, self.nt).map_err(config_err)?;
        Ok(Survey {
            background,
            truth,
            geometry,
            plans,
            wavelet,
            scatterer,
        })
    }
}

/// Splits `--a.b value`, `--a.b=value` or `a.b=value` tokens into pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>, OrchestratorError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(tok) = it.next() {
        let key = tok.strip_prefix("--").unwrap_or(tok);
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if tok.starts_with("--") {
            let value = it
                .next()
                .ok_or_else(|| config_err(format!("missing value for --{key}")))?;
            out.push((key.to_string(), value.clone()));
        } else {
            return Err(config_err(format!("expected --key value, got `{tok}`")));
        }
    }
    Ok(out)
}
