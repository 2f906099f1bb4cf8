use std::f64::consts::PI;

use num_complex::Complex64;

use super::{AscError, AscSet, RadarConfig, ScatteringCenter, PROPAGATION_SPEED};

/// `sin(t)/t` with the removable singularity filled in.
pub fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

/// `(j·ratio)^alpha` on the principal branch, for `ratio > 0`.
fn frequency_factor(ratio: f64, alpha: f64) -> Complex64 {
    if alpha == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    Complex64::from_polar(ratio.powf(alpha), PI / 2.0 * alpha)
}

/// Complex response of one scattering center at frequency `f` (Hz) and
/// aspect `phi` (radians).
pub fn evaluate_center_field(
    center: &ScatteringCenter,
    f: f64,
    phi: f64,
    cfg: &RadarConfig,
) -> Result<Complex64, AscError> {
    if f.is_nan() || f <= 0.0 {
        return Err(AscError::NonPositiveFrequency(f));
    }
    let (sin_phi, cos_phi) = phi.sin_cos();
    let k = 2.0 * PI * f / PROPAGATION_SPEED;
    let value = center.amplitude
        * frequency_factor(f / cfg.center_frequency, center.alpha)
        * Complex64::from_polar(1.0, -2.0 * k * (center.x * cos_phi + center.y * sin_phi))
        * sinc(k * center.length * (phi - center.orientation).sin())
        * (-2.0 * PI * f * center.gamma * sin_phi).exp();
    Ok(value)
}

/// Complex field sampled on the radar's `n_aspect × n_freq` grid.
///
/// Row `m` holds aspect `φ_m`, column `k` frequency `f_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub n_freq: usize,
    pub n_aspect: usize,
    pub values: Vec<Complex64>,
}

impl FieldGrid {
    pub fn zeros(n_freq: usize, n_aspect: usize) -> Self {
        Self {
            n_freq,
            n_aspect,
            values: vec![Complex64::new(0.0, 0.0); n_freq * n_aspect],
        }
    }

    pub fn at(&self, aspect: usize, freq: usize) -> Complex64 {
        self.values[aspect * self.n_freq + freq]
    }
}

/// Sum of every center's response over the full frequency/aspect grid.
pub fn synthesize_field(asc: &AscSet, cfg: &RadarConfig) -> Result<FieldGrid, AscError> {
    cfg.validate()?;
    let freqs = cfg.frequencies();
    let aspects = cfg.aspects();
    let trig: Vec<(f64, f64)> = aspects.iter().map(|a| a.sin_cos()).collect();
    let mut grid = FieldGrid::zeros(cfg.n_freq, cfg.n_aspect);
    let mut spectral = vec![Complex64::new(0.0, 0.0); freqs.len()];
    for c in &asc.centers {
        c.validate()?;
        for (s, &f) in spectral.iter_mut().zip(&freqs) {
            *s = c.amplitude * frequency_factor(f / cfg.center_frequency, c.alpha);
        }
        for (m, (&phi, &(sin_phi, cos_phi))) in aspects.iter().zip(&trig).enumerate() {
            let range = c.x * cos_phi + c.y * sin_phi;
            let sin_rel = (phi - c.orientation).sin();
            let row = &mut grid.values[m * cfg.n_freq..(m + 1) * cfg.n_freq];
            for ((out, &f), s) in row.iter_mut().zip(&freqs).zip(&spectral) {
                let k = 2.0 * PI * f / PROPAGATION_SPEED;
                let mut term = s * Complex64::from_polar(1.0, -2.0 * k * range);
                if c.length != 0.0 {
                    term *= sinc(k * c.length * sin_rel);
                }
                if c.gamma != 0.0 {
                    term *= (-2.0 * PI * f * c.gamma * sin_phi).exp();
                }
                *out += term;
            }
        }
    }
    if grid
        .values
        .iter()
        .any(|v| !v.re.is_finite() || !v.im.is_finite())
    {
        return Err(AscError::NonFinite);
    }
    Ok(grid)
}
