//! Leapfrog time stepping for `u_tt = v^2 lap(u) + f` on a padded grid, and
//! the exact transpose of the same recursion.
//!
//! The computational grid is the model extended by [`SPONGE_CELLS`] on every
//! side (velocity replicated from the nearest edge) plus a two-cell halo that
//! is held at zero. One step maps the state `(cur, prev)` to
//!
//! ```text
//! cur'  = G * (2 cur + dt^2 v^2 lap(cur) - prev + dt^2 v^2 B q)
//! prev' = G * cur
//! ```
//!
//! where `G` is the sponge taper and `B` bilinear spreading. The adjoint
//! steps `(a, b) -> ((2 + lap dt^2 v^2) G a + G b, -G a)`.

use crate::survey::{Position, VelocityModel2D};

use super::KernelError;

pub const SPONGE_CELLS: usize = 30;
/// Damping rate reached at the outer edge of the sponge.
pub const SPONGE_DAMPING: f64 = 0.0035;
const HALO: usize = 2;
const BLOWUP_CHECK_EVERY: usize = 50;

/// Largest stable time step for the 4th-order Laplacian with leapfrog
/// stepping, times a 0.9 safety factor.
pub fn max_stable_dt(model: &VelocityModel2D) -> f64 {
    let h = model.dz.min(model.dx);
    0.9 * (3.0_f64.sqrt() / 2.0) * h / (std::f64::consts::SQRT_2 * model.max_velocity())
}

/// Bilinear weights onto the four surrounding grid points.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PointOp {
    taps: [(usize, f64); 4],
}

pub(crate) struct Propagator {
    nz: usize,
    nx: usize,
    stride: usize,
    rows: usize,
    oz: f64,
    ox: f64,
    dz: f64,
    dx: f64,
    vdt2: Vec<f64>,
    taper: Vec<f64>,
    c0: f64,
    cz: [f64; 2],
    cx: [f64; 2],
}

fn taper_profile(depth: usize) -> f64 {
    let r = depth as f64 / SPONGE_CELLS as f64;
    (-SPONGE_DAMPING * SPONGE_CELLS as f64 * r * r).exp()
}

impl Propagator {
    pub fn new(model: &VelocityModel2D, dt: f64) -> Result<Self, KernelError> {
        model
            .validate()
            .map_err(|e| KernelError::InvalidInput(e.to_string()))?;
        let stable = max_stable_dt(model);
        if !(dt > 0.0) || dt > stable {
            return Err(KernelError::Cfl {
                dt,
                max_stable_dt: stable,
            });
        }
        let pad = SPONGE_CELLS;
        let nzp = model.nz + 2 * pad;
        let nxp = model.nx + 2 * pad;
        let stride = nxp + 2 * HALO;
        let rows = nzp + 2 * HALO;
        let mut vdt2 = vec![0.0; rows * stride];
        let mut taper = vec![0.0; rows * stride];
        for pz in 0..nzp {
            let iz = pz.saturating_sub(pad).min(model.nz - 1);
            let depth_z = pad
                .saturating_sub(pz)
                .max((pz + 1).saturating_sub(pad + model.nz));
            for px in 0..nxp {
                let ix = px.saturating_sub(pad).min(model.nx - 1);
                let depth_x = pad
                    .saturating_sub(px)
                    .max((px + 1).saturating_sub(pad + model.nx));
                let k = (pz + HALO) * stride + px + HALO;
                let v = model.at(iz, ix);
                vdt2[k] = v * v * dt * dt;
                taper[k] = taper_profile(depth_z) * taper_profile(depth_x);
            }
        }
        let (iz2, ix2) = (1.0 / (model.dz * model.dz), 1.0 / (model.dx * model.dx));
        Ok(Self {
            nz: model.nz,
            nx: model.nx,
            stride,
            rows,
            oz: model.oz,
            ox: model.ox,
            dz: model.dz,
            dx: model.dx,
            vdt2,
            taper,
            c0: -2.5 * (iz2 + ix2),
            cz: [4.0 / 3.0 * iz2, -1.0 / 12.0 * iz2],
            cx: [4.0 / 3.0 * ix2, -1.0 / 12.0 * ix2],
        })
    }

    pub fn field_len(&self) -> usize {
        self.rows * self.stride
    }

    pub fn physical_len(&self) -> usize {
        self.nz * self.nx
    }

    #[inline]
    fn physical_index(&self, iz: usize, ix: usize) -> usize {
        (iz + SPONGE_CELLS + HALO) * self.stride + ix + SPONGE_CELLS + HALO
    }

    pub fn point_op(&self, p: Position) -> Result<PointOp, KernelError> {
        let fz = (p.z - self.oz) / self.dz;
        let fx = (p.x - self.ox) / self.dx;
        let max_z = (self.nz - 1) as f64;
        let max_x = (self.nx - 1) as f64;
        if !(fz >= 0.0 && fx >= 0.0 && fz <= max_z && fx <= max_x) {
            return Err(KernelError::InvalidInput(format!(
                "position ({}, {}) outside the model",
                p.x, p.z
            )));
        }
        let iz = (fz.floor() as usize).min(self.nz - 2);
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let wz = fz - iz as f64;
        let wx = fx - ix as f64;
        let k = self.physical_index(iz, ix);
        Ok(PointOp {
            taps: [
                (k, (1.0 - wz) * (1.0 - wx)),
                (k + 1, (1.0 - wz) * wx),
                (k + self.stride, wz * (1.0 - wx)),
                (k + self.stride + 1, wz * wx),
            ],
        })
    }

    #[inline(always)]
    fn laplacian(&self, u: &[f64], k: usize) -> f64 {
        let s = self.stride;
        self.c0 * u[k]
            + self.cz[0] * (u[k - s] + u[k + s])
            + self.cz[1] * (u[k - 2 * s] + u[k + 2 * s])
            + self.cx[0] * (u[k - 1] + u[k + 1])
            + self.cx[1] * (u[k - 2] + u[k + 2])
    }

    fn interior_rows(&self) -> std::ops::Range<usize> {
        HALO..self.rows - HALO
    }

    fn interior_cols(&self) -> std::ops::Range<usize> {
        HALO..self.stride - HALO
    }

    /// One forward step. On return `cur` holds the new field and `prev` the
    /// damped previous one.
    pub fn step_forward(
        &self,
        cur: &mut Vec<f64>,
        prev: &mut Vec<f64>,
        source: Option<(&PointOp, f64)>,
    ) {
        for r in self.interior_rows() {
            let base = r * self.stride;
            for c in self.interior_cols() {
                let k = base + c;
                let next = 2.0 * cur[k] + self.vdt2[k] * self.laplacian(cur, k) - prev[k];
                prev[k] = self.taper[k] * next;
            }
        }
        if let Some((op, q)) = source {
            for &(k, w) in &op.taps {
                prev[k] += self.taper[k] * self.vdt2[k] * w * q;
            }
        }
        for r in self.interior_rows() {
            let base = r * self.stride;
            for c in self.interior_cols() {
                cur[base + c] *= self.taper[base + c];
            }
        }
        std::mem::swap(cur, prev);
    }

    /// One transposed step on the adjoint state `(a, b)`; `scratch` must be
    /// field-sized and is overwritten.
    pub fn step_adjoint(&self, a: &mut Vec<f64>, b: &mut Vec<f64>, scratch: &mut [f64]) {
        for r in self.interior_rows() {
            let base = r * self.stride;
            for c in self.interior_cols() {
                let k = base + c;
                a[k] *= self.taper[k];
                scratch[k] = self.vdt2[k] * a[k];
            }
        }
        for r in self.interior_rows() {
            let base = r * self.stride;
            for c in self.interior_cols() {
                let k = base + c;
                b[k] = 2.0 * a[k] + self.laplacian(scratch, k) + self.taper[k] * b[k];
                a[k] = -a[k];
            }
        }
        std::mem::swap(a, b);
    }

    pub fn extract(&self, op: &PointOp, u: &[f64]) -> f64 {
        op.taps.iter().map(|&(k, w)| w * u[k]).sum()
    }

    pub fn spread(&self, op: &PointOp, value: f64, u: &mut [f64]) {
        for &(k, w) in &op.taps {
            u[k] += w * value;
        }
    }

    /// Transpose of the source injection, applied to the adjoint `a` field.
    pub fn source_adjoint(&self, op: &PointOp, a: &[f64]) -> f64 {
        op.taps
            .iter()
            .map(|&(k, w)| self.taper[k] * self.vdt2[k] * w * a[k])
            .sum()
    }

    /// Copies the physical part of a padded field into `out` (`nz * nx`).
    pub fn crop_into(&self, u: &[f64], out: &mut [f64]) {
        for iz in 0..self.nz {
            let k = self.physical_index(iz, 0);
            out[iz * self.nx..(iz + 1) * self.nx].copy_from_slice(&u[k..k + self.nx]);
        }
    }

    /// `acc[i] += snap[i] * u_phys[i]` over the physical region.
    pub fn correlate_into(&self, snap: &[f64], u: &[f64], acc: &mut [f64]) {
        for iz in 0..self.nz {
            let k = self.physical_index(iz, 0);
            let row = iz * self.nx..(iz + 1) * self.nx;
            for ((a, s), v) in acc[row.clone()]
                .iter_mut()
                .zip(&snap[row])
                .zip(&u[k..k + self.nx])
            {
                *a += s * v;
            }
        }
    }

    pub fn check_finite(&self, u: &[f64], step: usize) -> Result<(), KernelError> {
        if step.is_multiple_of(BLOWUP_CHECK_EVERY) && u.iter().any(|x| !x.is_finite()) {
            return Err(KernelError::NumericalBlowup { step });
        }
        Ok(())
    }
}
