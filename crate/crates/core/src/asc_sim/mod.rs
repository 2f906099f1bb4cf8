//! Forward synthesis of attributed scattering centers.
//!
//! A target is a fixed-size set of scattering centers, each described by
//! seven physical parameters. [`synthesize_field`] sums their frequency/aspect
//! responses, [`form_image`] turns the field into an amplitude image and
//! [`generate_class_sample`] draws jittered instances of per-class templates.

mod field;
mod image;
mod templates;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use field::{evaluate_center_field, sinc, synthesize_field, FieldGrid};
pub use image::{form_image, form_image_unnormalized, AmplitudeImage};
pub use templates::{
    class_templates, generate_class_sample, ClassTemplate, SampleJitter, SimConfig,
};

/// Propagation speed of the electromagnetic wave, m/s.
pub const PROPAGATION_SPEED: f64 = 2.997_924_58e8;

/// Number of scattering centers per target.
pub const DEFAULT_CENTERS: usize = 40;

/// Number of physical parameters per center.
pub const ASC_PARAMS: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum AscError {
    #[error("frequency must be positive, got {0} Hz")]
    NonPositiveFrequency(f64),
    #[error("invalid scattering center: {0}")]
    InvalidCenter(String),
    #[error("invalid radar configuration: {0}")]
    InvalidRadar(String),
    #[error("output image {h}x{w} is smaller than 8x8")]
    ImageTooSmall { h: usize, w: usize },
    #[error("grid is {got_freq}x{got_aspect}, radar expects {want_freq}x{want_aspect}")]
    GridMismatch {
        got_freq: usize,
        got_aspect: usize,
        want_freq: usize,
        want_aspect: usize,
    },
    #[error("scattered field overflowed (non-finite value)")]
    NonFinite,
    #[error("unknown class {class} (have {classes})")]
    UnknownClass { class: usize, classes: usize },
}

/// The seven-parameter physical description of one scatterer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatteringCenter {
    pub amplitude: f64,
    /// Position in meters.
    pub x: f64,
    pub y: f64,
    /// Frequency dependence; in [-1, 1], usually a multiple of 0.5.
    pub alpha: f64,
    /// Length in meters; zero for a localized scatterer.
    pub length: f64,
    /// Orientation of a distributed scatterer, radians in [-π, π).
    pub orientation: f64,
    /// Aspect dependence, seconds per meter scale (tiny).
    pub gamma: f64,
}

impl ScatteringCenter {
    /// A localized unit scatterer at `(x, y)`.
    pub fn point(amplitude: f64, x: f64, y: f64) -> Self {
        Self {
            amplitude,
            x,
            y,
            alpha: 0.0,
            length: 0.0,
            orientation: 0.0,
            gamma: 0.0,
        }
    }

    /// Parameters in storage order `A, x, y, alpha, L, phi_bar, gamma`.
    pub fn to_array(&self) -> [f64; ASC_PARAMS] {
        [
            self.amplitude,
            self.x,
            self.y,
            self.alpha,
            self.length,
            self.orientation,
            self.gamma,
        ]
    }

    pub fn from_array(p: [f64; ASC_PARAMS]) -> Self {
        Self {
            amplitude: p[0],
            x: p[1],
            y: p[2],
            alpha: p[3],
            length: p[4],
            orientation: p[5],
            gamma: p[6],
        }
    }

    pub fn validate(&self) -> Result<(), AscError> {
        let bad = |what: &str| Err(AscError::InvalidCenter(format!("{what} in {self:?}")));
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.amplitude < 0.0 {
            return bad("negative amplitude");
        }
        if self.length < 0.0 {
            return bad("negative length");
        }
        if !(-1.0..=1.0).contains(&self.alpha) {
            return bad("alpha outside [-1, 1]");
        }
        if !(-PI..PI).contains(&self.orientation) {
            return bad("orientation outside [-pi, pi)");
        }
        if self.gamma.abs() > 0.1 {
            return bad("|gamma| > 0.1");
        }
        Ok(())
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// A target: exactly `P` scattering centers and a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscSet {
    pub centers: Vec<ScatteringCenter>,
    pub class_id: usize,
}

impl AscSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `P × 7` row-major parameter table.
    pub fn to_table(&self) -> Vec<f64> {
        self.centers.iter().flat_map(|c| c.to_array()).collect()
    }

    pub fn from_table(table: &[f64], class_id: usize) -> Self {
        let centers = table
            .chunks_exact(ASC_PARAMS)
            .map(|r| ScatteringCenter::from_array(r.try_into().expect("row of seven")))
            .collect();
        Self { centers, class_id }
    }

    pub fn validate(&self, expected_len: usize, classes: usize) -> Result<(), AscError> {
        if self.centers.len() != expected_len {
            return Err(AscError::InvalidCenter(format!(
                "set has {} centers, expected {expected_len}",
                self.centers.len()
            )));
        }
        if self.class_id >= classes {
            return Err(AscError::UnknownClass {
                class: self.class_id,
                classes,
            });
        }
        self.centers.iter().try_for_each(ScatteringCenter::validate)
    }
}

/// Frequency/aspect sampling of the simulated radar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarConfig {
    /// Hz.
    pub center_frequency: f64,
    /// Hz.
    pub bandwidth: f64,
    /// Radians.
    pub aspect_center: f64,
    /// Radians.
    pub aspect_span: f64,
    pub n_freq: usize,
    pub n_aspect: usize,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            center_frequency: 9.6e9,
            bandwidth: 0.591e9,
            aspect_center: 0.0,
            aspect_span: 3f64.to_radians(),
            n_freq: 128,
            n_aspect: 128,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<(), AscError> {
        let bad = |m: String| Err(AscError::InvalidRadar(m));
        if !(self.bandwidth > 0.0 && self.center_frequency > self.bandwidth / 2.0) {
            return bad(format!(
                "need f_c > B/2 > 0, got f_c={} B={}",
                self.center_frequency, self.bandwidth
            ));
        }
        for (name, n) in [("n_freq", self.n_freq), ("n_aspect", self.n_aspect)] {
            if n < 8 || !n.is_power_of_two() {
                return bad(format!("{name} must be a power of two >= 8, got {n}"));
            }
        }
        if !(self.aspect_span > 0.0 && self.aspect_span < PI) {
            return bad(format!("aspect span {} rad", self.aspect_span));
        }
        Ok(())
    }

    pub fn freq_step(&self) -> f64 {
        self.bandwidth / self.n_freq as f64
    }

    pub fn aspect_step(&self) -> f64 {
        self.aspect_span / self.n_aspect as f64
    }

    /// Frequency samples `f_c - B/2 + k·B/n`.
    pub fn frequencies(&self) -> Vec<f64> {
        let start = self.center_frequency - self.bandwidth / 2.0;
        (0..self.n_freq)
            .map(|k| start + k as f64 * self.freq_step())
            .collect()
    }

    /// Aspect samples `φ_c - span/2 + m·span/n`.
    pub fn aspects(&self) -> Vec<f64> {
        let start = self.aspect_center - self.aspect_span / 2.0;
        (0..self.n_aspect)
            .map(|m| start + m as f64 * self.aspect_step())
            .collect()
    }

    /// Meters per image column (x axis) for a transform of `fft_len` points.
    pub fn x_pixel_spacing(&self, fft_len: usize) -> f64 {
        PROPAGATION_SPEED / (2.0 * self.bandwidth) * self.n_freq as f64 / fft_len as f64
    }

    /// Meters per image row (y axis) for a transform of `fft_len` points.
    pub fn y_pixel_spacing(&self, fft_len: usize) -> f64 {
        PROPAGATION_SPEED / (2.0 * self.center_frequency * self.aspect_step() * fft_len as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_radar_is_valid() {
        RadarConfig::default().validate().unwrap();
    }

    #[test]
    fn radar_rejects_bad_grids() {
        let cfg = RadarConfig {
            n_freq: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RadarConfig {
            bandwidth: 30e9,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn center_validation() {
        assert!(ScatteringCenter::point(1.0, 0.0, 0.0).validate().is_ok());
        assert!(ScatteringCenter::point(-1.0, 0.0, 0.0).validate().is_err());
        let mut c = ScatteringCenter::point(1.0, 0.0, 0.0);
        c.orientation = PI;
        assert!(c.validate().is_err());
        c.orientation = wrap_angle(PI);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn table_round_trip() {
        let set = AscSet {
            centers: vec![ScatteringCenter {
                amplitude: 1.5,
                x: -2.0,
                y: 0.25,
                alpha: 0.5,
                length: 1.0,
                orientation: 0.3,
                gamma: 1e-11,
            }],
            class_id: 4,
        };
        assert_eq!(AscSet::from_table(&set.to_table(), 4), set);
    }
}
