//! Synthetic velocity models, randomized ocean-bottom acquisition and
//! source-receiver reciprocity.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

/// Slowest velocity a model may hold, in m/s.
pub const MIN_VELOCITY: f64 = 1000.0;
/// Fastest velocity a model may hold, in m/s.
pub const MAX_VELOCITY: f64 = 8000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SurveyError {
    #[error("model needs at least 3x3 grid points, got {nz}x{nx}")]
    GridTooSmall { nz: usize, nx: usize },
    #[error("grid spacing must be positive, got dz={dz} dx={dx}")]
    BadSpacing { dz: f64, dx: f64 },
    #[error("velocity {0} m/s outside [{MIN_VELOCITY}, {MAX_VELOCITY}]")]
    VelocityOutOfRange(f64),
    #[error("velocity array has {got} values, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("at least one layer velocity is required")]
    NoLayers,
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("record_time and dt_record must be positive")]
    BadTiming,
    #[error("position ({x}, {z}) lies outside the model")]
    OutsideModel { x: f64, z: f64 },
}

/// A point in the vertical plane, in meters. `z` grows with depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }
}

/// Gridded acoustic velocity, row-major with `z` as the slow axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel2D {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
    pub oz: f64,
    pub ox: f64,
    pub v: Vec<f64>,
}

impl VelocityModel2D {
    pub fn new(
        nz: usize,
        nx: usize,
        dz: f64,
        dx: f64,
        oz: f64,
        ox: f64,
        v: Vec<f64>,
    ) -> Result<Self, SurveyError> {
        let model = Self {
            nz,
            nx,
            dz,
            dx,
            oz,
            ox,
            v,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn uniform(
        nz: usize,
        nx: usize,
        dz: f64,
        dx: f64,
        velocity: f64,
    ) -> Result<Self, SurveyError> {
        Self::new(nz, nx, dz, dx, 0.0, 0.0, vec![velocity; nz * nx])
    }

    pub fn validate(&self) -> Result<(), SurveyError> {
        if self.nz < 3 || self.nx < 3 {
            return Err(SurveyError::GridTooSmall {
                nz: self.nz,
                nx: self.nx,
            });
        }
        if !(self.dz > 0.0 && self.dx > 0.0) {
            return Err(SurveyError::BadSpacing {
                dz: self.dz,
                dx: self.dx,
            });
        }
        if self.v.len() != self.nz * self.nx {
            return Err(SurveyError::LengthMismatch {
                expected: self.nz * self.nx,
                got: self.v.len(),
            });
        }
        if let Some(&bad) = self
            .v
            .iter()
            .find(|v| !(MIN_VELOCITY..=MAX_VELOCITY).contains(*v))
        {
            return Err(SurveyError::VelocityOutOfRange(bad));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, iz: usize, ix: usize) -> usize {
        iz * self.nx + ix
    }

    pub fn at(&self, iz: usize, ix: usize) -> f64 {
        self.v[self.index(iz, ix)]
    }

    pub fn max_velocity(&self) -> f64 {
        self.v.iter().copied().fold(f64::MIN, f64::max)
    }

    /// Physical extent as `(x_min, x_max, z_min, z_max)` over grid-point positions.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.ox,
            self.ox + (self.nx - 1) as f64 * self.dx,
            self.oz,
            self.oz + (self.nz - 1) as f64 * self.dz,
        )
    }

    /// True when `p` is strictly inside the grid's outer points.
    pub fn contains(&self, p: Position) -> bool {
        let (x0, x1, z0, z1) = self.extent();
        p.x > x0 && p.x < x1 && p.z > z0 && p.z < z1
    }

    /// Grid coordinates of the cell nearest to `p`.
    pub fn nearest_cell(&self, p: Position) -> (usize, usize) {
        let iz = ((p.z - self.oz) / self.dz)
            .round()
            .clamp(0.0, (self.nz - 1) as f64) as usize;
        let ix = ((p.x - self.ox) / self.dx)
            .round()
            .clamp(0.0, (self.nx - 1) as f64) as usize;
        (iz, ix)
    }
}

/// Horizontal layers of equal thickness, listed top to bottom. Rows that do
/// not divide evenly go to the last layer.
pub fn make_layered_model(
    nz: usize,
    nx: usize,
    dz: f64,
    dx: f64,
    layer_velocities: &[f64],
) -> Result<VelocityModel2D, SurveyError> {
    if layer_velocities.is_empty() {
        return Err(SurveyError::NoLayers);
    }
    if let Some(&bad) = layer_velocities
        .iter()
        .find(|v| !(MIN_VELOCITY..=MAX_VELOCITY).contains(*v))
    {
        return Err(SurveyError::VelocityOutOfRange(bad));
    }
    let n_layers = layer_velocities.len();
    let thickness = (nz / n_layers).max(1);
    let mut v = Vec::with_capacity(nz * nx);
    for iz in 0..nz {
        let layer = (iz / thickness).min(n_layers - 1);
        v.extend(std::iter::repeat_n(layer_velocities[layer], nx));
    }
    VelocityModel2D::new(nz, nx, dz, dx, 0.0, 0.0, v)
}

/// Acquisition geometry: where sources fire and where receivers listen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub sources: Vec<Position>,
    pub receivers: Vec<Position>,
    pub record_time: f64,
    pub dt_record: f64,
}

impl Geometry {
    pub fn validate(&self, model: &VelocityModel2D) -> Result<(), SurveyError> {
        if self.sources.is_empty() {
            return Err(SurveyError::ZeroCount("sources"));
        }
        if self.receivers.is_empty() {
            return Err(SurveyError::ZeroCount("receivers"));
        }
        if !(self.record_time > 0.0 && self.dt_record > 0.0) {
            return Err(SurveyError::BadTiming);
        }
        for p in self.sources.iter().chain(&self.receivers) {
            if !model.contains(*p) {
                return Err(SurveyError::OutsideModel { x: p.x, z: p.z });
            }
        }
        Ok(())
    }

    pub fn trace_count(&self) -> usize {
        self.sources.len() * self.receivers.len()
    }
}

/// Random ocean-bottom-node layout: receivers scattered along the seabed at
/// `z = (nz - 3) dz` with uniformly drawn `x`, sources on a regular shallow
/// line at `z = 2 dz`.
///
/// Both `x` ranges stay one grid cell away from the lateral edges so every
/// position is strictly inside the model. Receiver `x` values are drawn in
/// order from [`SplitMix64`] seeded with `seed`.
pub fn make_random_obn_geometry(
    model: &VelocityModel2D,
    n_receivers: usize,
    n_sources: usize,
    seed: u64,
    record_time: f64,
    dt_record: f64,
) -> Result<Geometry, SurveyError> {
    if n_receivers == 0 {
        return Err(SurveyError::ZeroCount("n_receivers"));
    }
    if n_sources == 0 {
        return Err(SurveyError::ZeroCount("n_sources"));
    }
    if !(record_time > 0.0 && dt_record > 0.0) {
        return Err(SurveyError::BadTiming);
    }
    let (x0, x1, _, _) = model.extent();
    let lo = x0 + model.dx;
    let hi = x1 - model.dx;
    let seabed_z = model.oz + (model.nz - 3) as f64 * model.dz;
    let source_z = model.oz + 2.0 * model.dz;

    let mut rng = SplitMix64::new(seed);
    let receivers = (0..n_receivers)
        .map(|_| Position::new(rng.uniform_range(lo, hi), seabed_z))
        .collect();

    let sources = if n_sources == 1 {
        vec![Position::new(0.5 * (lo + hi), source_z)]
    } else {
        let step = (hi - lo) / (n_sources - 1) as f64;
        (0..n_sources)
            .map(|i| Position::new(lo + i as f64 * step, source_z))
            .collect()
    };

    let geometry = Geometry {
        sources,
        receivers,
        record_time,
        dt_record,
    };
    geometry.validate(model)?;
    Ok(geometry)
}

/// One shot record's worth of work after reciprocity re-sorting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotGatherPlan {
    pub shot_id: u64,
    pub source: Position,
    /// Shared between every plan of a survey.
    pub receivers: Arc<[Position]>,
}

/// Swaps the roles of sources and receivers: each original receiver becomes
/// the source of one shot gather recorded at every original source position.
pub fn apply_reciprocity(geometry: &Geometry) -> Vec<ShotGatherPlan> {
    let receivers: Arc<[Position]> = geometry.sources.as_slice().into();
    geometry
        .receivers
        .iter()
        .enumerate()
        .map(|(i, r)| ShotGatherPlan {
            shot_id: i as u64,
            source: *r,
            receivers: Arc::clone(&receivers),
        })
        .collect()
}
