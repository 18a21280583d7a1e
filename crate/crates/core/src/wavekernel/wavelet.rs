use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::KernelError;

/// Source time function sampled at a fixed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wavelet {
    pub samples: Vec<f64>,
    pub dt: f64,
    pub peak_frequency: f64,
}

impl Wavelet {
    /// Time of the main lobe, in seconds.
    pub fn peak_time(&self) -> f64 {
        1.5 / self.peak_frequency
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            ..self.clone()
        }
    }
}

/// Ricker wavelet delayed so its peak sits at `t = 1.5 / f`, normalized to a
/// unit maximum.
pub fn ricker(peak_frequency: f64, dt: f64, nt: usize) -> Result<Wavelet, KernelError> {
    if !(peak_frequency > 0.0 && dt > 0.0) || nt < 2 {
        return Err(KernelError::InvalidInput(format!(
            "ricker needs f > 0, dt > 0, nt >= 2 (got f={peak_frequency}, dt={dt}, nt={nt})"
        )));
    }
    if (nt as f64) * dt < 2.0 / peak_frequency {
        return Err(KernelError::InvalidInput(format!(
            "wavelet span {:.4} s is shorter than 2/f = {:.4} s",
            nt as f64 * dt,
            2.0 / peak_frequency
        )));
    }
    // Work in sample units so that a peak on the grid gives exact symmetry.
    let mut shift = 1.5 / (peak_frequency * dt);
    if (shift - shift.round()).abs() < 1e-9 {
        shift = shift.round();
    }
    let a = (PI * peak_frequency).powi(2);
    let mut samples: Vec<f64> = (0..nt)
        .map(|n| {
            let tau = (n as f64 - shift) * dt;
            let arg = a * tau * tau;
            (1.0 - 2.0 * arg) * (-arg).exp()
        })
        .collect();
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak > 0.0 && peak != 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    Ok(Wavelet {
        samples,
        dt,
        peak_frequency,
    })
}
