//! Single-shot 2D acoustic modeling and reverse-time migration.
//!
//! Constant-density acoustics with a 4th-order Laplacian, leapfrog time
//! stepping and a tapered sponge. Migration correlates the stored source
//! wavefield with the exact adjoint of the modeling recursion, so the
//! migration operator is the transpose of modeling to rounding error.

mod propagator;
mod wavelet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::survey::{Position, ShotGatherPlan, VelocityModel2D};

pub use propagator::{max_stable_dt, SPONGE_CELLS, SPONGE_DAMPING};
use propagator::{PointOp, Propagator};
pub use wavelet::{ricker, Wavelet};

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("time step {dt} s violates stability; largest stable step is {max_stable_dt} s")]
    Cfl { dt: f64, max_stable_dt: f64 },
    #[error("non-finite wavefield at step {step}")]
    NumericalBlowup { step: usize },
    #[error("observed record does not match the shot plan: {0}")]
    GeometryMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Traces for one shot, stored receiver-major: `traces[r * nt + t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot_id: u64,
    pub receivers: Vec<Position>,
    pub dt: f64,
    pub nt: usize,
    pub traces: Vec<f64>,
}

impl ShotRecord {
    pub fn trace(&self, receiver: usize) -> &[f64] {
        &self.traces[receiver * self.nt..(receiver + 1) * self.nt]
    }

    pub fn max_abs(&self) -> f64 {
        self.traces.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sample-wise `self - other`; both must share geometry and timing.
    pub fn difference(&self, other: &ShotRecord) -> Result<ShotRecord, KernelError> {
        if self.nt != other.nt || self.receivers != other.receivers || self.dt != other.dt {
            return Err(KernelError::GeometryMismatch(
                "records differ in timing or receivers".into(),
            ));
        }
        Ok(ShotRecord {
            traces: self
                .traces
                .iter()
                .zip(&other.traces)
                .map(|(a, b)| a - b)
                .collect(),
            ..self.clone()
        })
    }

    pub fn scaled(&self, factor: f64) -> ShotRecord {
        ShotRecord {
            traces: self.traces.iter().map(|x| x * factor).collect(),
            ..self.clone()
        }
    }
}

/// An image on the migration model's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
    pub oz: f64,
    pub ox: f64,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros_like(model: &VelocityModel2D) -> Self {
        Self {
            nz: model.nz,
            nx: model.nx,
            dz: model.dz,
            dx: model.dx,
            oz: model.oz,
            ox: model.ox,
            values: vec![0.0; model.nz * model.nx],
        }
    }

    pub fn same_grid(&self, other: &ImageGrid) -> bool {
        self.nz == other.nz
            && self.nx == other.nx
            && self.dz == other.dz
            && self.dx == other.dx
            && self.oz == other.oz
            && self.ox == other.ox
    }

    /// Grid cell `(iz, ix)` of the largest absolute value.
    pub fn argmax_abs(&self) -> (usize, usize) {
        let (k, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bk, bv), (k, v)| {
                if v.abs() > bv {
                    (k, v.abs())
                } else {
                    (bk, bv)
                }
            });
        (k / self.nx, k % self.nx)
    }

    /// Argmax after zeroing `margin` cells along every edge.
    pub fn argmax_abs_interior(&self, margin: usize) -> (usize, usize) {
        let mut masked = self.clone();
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                if iz < margin || ix < margin || iz + margin >= self.nz || ix + margin >= self.nx {
                    masked.values[iz * self.nx + ix] = 0.0;
                }
            }
        }
        masked.argmax_abs()
    }
}

/// The stored forward wavefield of one shot: one physical-grid snapshot per
/// recorded time sample.
pub struct SourceWavefield {
    nt: usize,
    cells: usize,
    snapshots: Vec<f64>,
}

impl SourceWavefield {
    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn snapshot(&self, step: usize) -> &[f64] {
        &self.snapshots[step * self.cells..(step + 1) * self.cells]
    }

    pub fn max_abs(&self) -> f64 {
        self.snapshots.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn source_series(wavelet: &Wavelet, dt: f64, nt: usize) -> Result<Vec<f64>, KernelError> {
    if (wavelet.dt - dt).abs() > 1e-12 * dt {
        return Err(KernelError::InvalidInput(format!(
            "wavelet sampled at {} s but modeling uses {} s",
            wavelet.dt, dt
        )));
    }
    let mut q = vec![0.0; nt];
    let n = nt.min(wavelet.samples.len());
    q[..n].copy_from_slice(&wavelet.samples[..n]);
    Ok(q)
}

fn point_ops(prop: &Propagator, positions: &[Position]) -> Result<Vec<PointOp>, KernelError> {
    positions.iter().map(|p| prop.point_op(*p)).collect()
}

/// Runs the modeling recursion for the source series `q`, recording at
/// `receivers` after every step. Optionally keeps the physical wavefield.
fn run_forward(
    prop: &Propagator,
    source: &PointOp,
    q: &[f64],
    receivers: &[PointOp],
    keep_wavefield: bool,
) -> Result<(Vec<f64>, Option<SourceWavefield>), KernelError> {
    let nt = q.len();
    let mut cur = vec![0.0; prop.field_len()];
    let mut prev = vec![0.0; prop.field_len()];
    let mut traces = vec![0.0; nt * receivers.len()];
    let cells = prop.physical_len();
    let mut snapshots = if keep_wavefield {
        vec![0.0; nt * cells]
    } else {
        Vec::new()
    };
    for (n, &qn) in q.iter().enumerate() {
        prop.step_forward(&mut cur, &mut prev, Some((source, qn)));
        for (r, op) in receivers.iter().enumerate() {
            traces[r * nt + n] = prop.extract(op, &cur);
        }
        if keep_wavefield {
            prop.crop_into(&cur, &mut snapshots[n * cells..(n + 1) * cells]);
        }
        prop.check_finite(&cur, n + 1)?;
    }
    prop.check_finite(&cur, 0)?;
    let wavefield = keep_wavefield.then_some(SourceWavefield {
        nt,
        cells,
        snapshots,
    });
    Ok((traces, wavefield))
}

/// Runs the transposed recursion driven by receiver-major `data`. Calls
/// `visit(step, a_field)` after each adjoint step, newest time first, and
/// returns the adjoint source series.
fn run_adjoint(
    prop: &Propagator,
    source: &PointOp,
    data: &[f64],
    nt: usize,
    receivers: &[PointOp],
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>, KernelError> {
    let mut a = vec![0.0; prop.field_len()];
    let mut b = vec![0.0; prop.field_len()];
    let mut scratch = vec![0.0; prop.field_len()];
    let mut q_adj = vec![0.0; nt];
    for n in (0..nt).rev() {
        prop.step_adjoint(&mut a, &mut b, &mut scratch);
        for (r, op) in receivers.iter().enumerate() {
            prop.spread(op, data[r * nt + n], &mut a);
        }
        q_adj[n] = prop.source_adjoint(source, &a);
        visit(n, &a);
        prop.check_finite(&a, nt - n)?;
    }
    prop.check_finite(&a, 0)?;
    Ok(q_adj)
}

/// Models one shot and keeps its source wavefield for imaging.
pub fn forward_model(
    model: &VelocityModel2D,
    source: Position,
    wavelet: &Wavelet,
    receivers: &[Position],
    dt: f64,
    nt: usize,
) -> Result<(ShotRecord, SourceWavefield), KernelError> {
    let (record, wavefield) = model_shot(model, source, wavelet, receivers, dt, nt, true)?;
    Ok((record, wavefield.expect("wavefield requested")))
}

/// Models one shot without storing the wavefield.
pub fn model_data(
    model: &VelocityModel2D,
    source: Position,
    wavelet: &Wavelet,
    receivers: &[Position],
    dt: f64,
    nt: usize,
) -> Result<ShotRecord, KernelError> {
    model_shot(model, source, wavelet, receivers, dt, nt, false).map(|(r, _)| r)
}

fn model_shot(
    model: &VelocityModel2D,
    source: Position,
    wavelet: &Wavelet,
    receivers: &[Position],
    dt: f64,
    nt: usize,
    keep: bool,
) -> Result<(ShotRecord, Option<SourceWavefield>), KernelError> {
    if receivers.is_empty() || nt == 0 {
        return Err(KernelError::InvalidInput(
            "need at least one receiver and one time step".into(),
        ));
    }
    let prop = Propagator::new(model, dt)?;
    let src = prop.point_op(source)?;
    let recs = point_ops(&prop, receivers)?;
    let q = source_series(wavelet, dt, nt)?;
    let (traces, wavefield) = run_forward(&prop, &src, &q, &recs, keep)?;
    let record = ShotRecord {
        shot_id: 0,
        receivers: receivers.to_vec(),
        dt,
        nt,
        traces,
    };
    Ok((record, wavefield))
}

/// Zero-lag cross-correlation image of one shot: the stored source
/// wavefield times the adjoint wavefield driven by `observed`.
pub fn rtm_shot_image(
    model: &VelocityModel2D,
    plan: &ShotGatherPlan,
    observed: &ShotRecord,
    wavelet: &Wavelet,
) -> Result<ImageGrid, KernelError> {
    if observed.receivers[..] != plan.receivers[..] {
        return Err(KernelError::GeometryMismatch(format!(
            "plan has {} receivers, record has {}",
            plan.receivers.len(),
            observed.receivers.len()
        )));
    }
    if observed.traces.len() != observed.nt * observed.receivers.len() {
        return Err(KernelError::GeometryMismatch(
            "trace array length does not match nt x receivers".into(),
        ));
    }
    let prop = Propagator::new(model, observed.dt)?;
    let src = prop.point_op(plan.source)?;
    let recs = point_ops(&prop, &plan.receivers)?;
    let q = source_series(wavelet, observed.dt, observed.nt)?;
    let (_, wavefield) = run_forward(&prop, &src, &q, &recs, true)?;
    let wavefield = wavefield.expect("wavefield requested");

    let mut image = ImageGrid::zeros_like(model);
    run_adjoint(&prop, &src, &observed.traces, observed.nt, &recs, |n, a| {
        prop.correlate_into(wavefield.snapshot(n), a, &mut image.values);
    })?;
    Ok(image)
}

/// Relative mismatch `|<Fq, d> - <q, F*d>| / |<Fq, d>|` for random `q` and
/// `d`, where `F` maps a source time series to receiver data.
pub fn adjoint_dot_test(
    model: &VelocityModel2D,
    plan: &ShotGatherPlan,
    wavelet_length: usize,
    seed: u64,
) -> Result<f64, KernelError> {
    let products = dot_products(model, plan, wavelet_length, seed, false)?;
    Ok((products.0 - products.1).abs() / products.0.abs())
}

/// Returns `(<Fq, d>, <q, F*d>)`. With `data_from_model` the data vector is
/// `Fq` itself instead of random noise.
pub fn dot_products(
    model: &VelocityModel2D,
    plan: &ShotGatherPlan,
    wavelet_length: usize,
    seed: u64,
    data_from_model: bool,
) -> Result<(f64, f64), KernelError> {
    if plan.receivers.is_empty() || wavelet_length == 0 {
        return Err(KernelError::InvalidInput(
            "dot test needs receivers and a positive length".into(),
        ));
    }
    let dt = max_stable_dt(model);
    let prop = Propagator::new(model, dt)?;
    let src = prop.point_op(plan.source)?;
    let recs = point_ops(&prop, &plan.receivers)?;
    let nt = wavelet_length;

    let mut rng = SplitMix64::new(seed);
    let q: Vec<f64> = (0..nt).map(|_| rng.standard_normal()).collect();
    let (fq, _) = run_forward(&prop, &src, &q, &recs, false)?;
    let d: Vec<f64> = if data_from_model {
        fq.clone()
    } else {
        (0..fq.len()).map(|_| rng.standard_normal()).collect()
    };
    let q_adj = run_adjoint(&prop, &src, &d, nt, &recs, |_, _| {})?;

    let lhs: f64 = fq.iter().zip(&d).map(|(a, b)| a * b).sum();
    let rhs: f64 = q.iter().zip(&q_adj).map(|(a, b)| a * b).sum();
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize, v: f64) -> VelocityModel2D {
        VelocityModel2D::uniform(n, n, 10.0, 10.0, v).unwrap()
    }

    #[test]
    fn cfl_violation_reports_stable_dt() {
        let m = uniform(21, 2000.0);
        let err = Propagator::new(&m, 0.01).err().unwrap();
        match err {
            KernelError::Cfl { max_stable_dt, .. } => {
                assert_eq!(max_stable_dt, max_stable_dt_for(&m))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn max_stable_dt_for(m: &VelocityModel2D) -> f64 {
        max_stable_dt(m)
    }

    #[test]
    fn zero_wavelet_gives_zero_traces() {
        let m = uniform(41, 2000.0);
        let dt = 0.002;
        let w = ricker(15.0, dt, 200).unwrap().scaled(0.0);
        let rec = model_data(
            &m,
            Position::new(200.0, 200.0),
            &w,
            &[Position::new(300.0, 250.0)],
            dt,
            200,
        )
        .unwrap();
        assert!(rec.traces.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn doubling_wavelet_doubles_traces() {
        let m = uniform(41, 2000.0);
        let dt = 0.002;
        let w = ricker(15.0, dt, 200).unwrap();
        let rx = [Position::new(300.0, 250.0), Position::new(120.0, 33.0)];
        let a = model_data(&m, Position::new(200.0, 200.0), &w, &rx, dt, 200).unwrap();
        let b = model_data(
            &m,
            Position::new(200.0, 200.0),
            &w.scaled(2.0),
            &rx,
            dt,
            200,
        )
        .unwrap();
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let m = uniform(41, 2000.0);
        let dt = 0.002;
        let w = ricker(15.0, dt, 100).unwrap();
        let plan = ShotGatherPlan {
            shot_id: 0,
            source: Position::new(100.0, 100.0),
            receivers: vec![Position::new(200.0, 20.0)].into(),
        };
        let rec = ShotRecord {
            shot_id: 0,
            receivers: vec![Position::new(210.0, 20.0)],
            dt,
            nt: 100,
            traces: vec![0.0; 100],
        };
        assert!(matches!(
            rtm_shot_image(&m, &plan, &rec, &w),
            Err(KernelError::GeometryMismatch(_))
        ));
    }

    #[test]
    fn positions_outside_model_rejected() {
        let m = uniform(21, 2000.0);
        let w = ricker(15.0, 0.002, 100).unwrap();
        let r = model_data(
            &m,
            Position::new(500.0, 50.0),
            &w,
            &[Position::new(50.0, 50.0)],
            0.002,
            100,
        );
        assert!(matches!(r, Err(KernelError::InvalidInput(_))));
    }

    #[test]
    fn wavelet_dt_must_match() {
        let m = uniform(21, 2000.0);
        let w = ricker(15.0, 0.001, 200).unwrap();
        let r = model_data(
            &m,
            Position::new(100.0, 100.0),
            &w,
            &[Position::new(50.0, 50.0)],
            0.002,
            100,
        );
        assert!(matches!(r, Err(KernelError::InvalidInput(_))));
    }
}
