use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AscError, FieldGrid, RadarConfig};

/// Non-negative magnitudes, row-major `height × width`.
///
/// Rows run along the y (aspect) axis and columns along x (frequency).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl AmplitudeImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// `(row, col)` of the largest pixel, first occurrence on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.pixels.iter().enumerate() {
            if v > self.pixels[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// The `size × size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> AmplitudeImage {
        assert!(
            top + size_h <= self.height && left + size_w <= self.width,
            "crop out of bounds"
        );
        let mut pixels = Vec::with_capacity(size_h * size_w);
        for r in top..top + size_h {
            pixels.extend_from_slice(
                &self.pixels[r * self.width + left..r * self.width + left + size_w],
            );
        }
        AmplitudeImage {
            height: size_h,
            width: size_w,
            pixels,
        }
    }

    pub fn center_crop(&self, size: usize) -> AmplitudeImage {
        self.crop(
            (self.height - size) / 2,
            (self.width - size) / 2,
            size,
            size,
        )
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Applies a separable Hann window to the grid.
pub fn windowed(grid: &FieldGrid) -> Vec<Complex64> {
    let wa = hann(grid.n_aspect);
    let wf = hann(grid.n_freq);
    grid.values
        .iter()
        .enumerate()
        .map(|(i, v)| v * wa[i / grid.n_freq] * wf[i % grid.n_freq])
        .collect()
}

/// Transform sizes used for an output of `out_h × out_w`.
pub fn transform_size(grid: &FieldGrid, out_h: usize, out_w: usize) -> (usize, usize) {
    (
        grid.n_aspect.max(out_h).next_power_of_two(),
        grid.n_freq.max(out_w).next_power_of_two(),
    )
}

/// Windowed, zero-padded, unitary 2-D inverse DFT magnitude, shifted so the
/// zero-offset bin sits at the center and cropped to `out_h × out_w`.
/// No peak normalization.
pub fn form_image_unnormalized(
    grid: &FieldGrid,
    cfg: &RadarConfig,
    out_h: usize,
    out_w: usize,
) -> Result<(usize, usize, Vec<f64>), AscError> {
    if grid.n_freq != cfg.n_freq
        || grid.n_aspect != cfg.n_aspect
        || grid.values.len() != cfg.n_freq * cfg.n_aspect
    {
        return Err(AscError::GridMismatch {
            got_freq: grid.n_freq,
            got_aspect: grid.n_aspect,
            want_freq: cfg.n_freq,
            want_aspect: cfg.n_aspect,
        });
    }
    if out_h < 8 || out_w < 8 {
        return Err(AscError::ImageTooSmall { h: out_h, w: out_w });
    }
    let (fh, fw) = transform_size(grid, out_h, out_w);
    let win = windowed(grid);
    let mut buf = vec![Complex64::new(0.0, 0.0); fh * fw];
    for m in 0..grid.n_aspect {
        buf[m * fw..m * fw + grid.n_freq]
            .copy_from_slice(&win[m * grid.n_freq..(m + 1) * grid.n_freq]);
    }

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(fw);
    for row in buf.chunks_exact_mut(fw) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_inverse(fh);
    let mut column = vec![Complex64::new(0.0, 0.0); fh];
    for c in 0..fw {
        for r in 0..fh {
            column[r] = buf[r * fw + c];
        }
        col_fft.process(&mut column);
        for r in 0..fh {
            buf[r * fw + c] = column[r];
        }
    }

    let scale = 1.0 / ((fh * fw) as f64).sqrt();
    let (top, left) = ((fh - out_h) / 2, (fw - out_w) / 2);
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        // fftshift: output row r shows bin (r + top + fh/2) mod fh
        let src_r = (r + top + fh / 2) % fh;
        for c in 0..out_w {
            let src_c = (c + left + fw / 2) % fw;
            out.push(buf[src_r * fw + src_c].norm() * scale);
        }
    }
    Ok((out_h, out_w, out))
}

/// Amplitude image with its peak normalized to 1 (an all-zero image stays zero).
pub fn form_image(
    grid: &FieldGrid,
    cfg: &RadarConfig,
    out_h: usize,
    out_w: usize,
) -> Result<AmplitudeImage, AscError> {
    let (h, w, mags) = form_image_unnormalized(grid, cfg, out_h, out_w)?;
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let pixels = if peak > 0.0 {
        mags.iter().map(|&v| (v / peak) as f32).collect()
    } else {
        vec![0.0; mags.len()]
    };
    Ok(AmplitudeImage {
        height: h,
        width: w,
        pixels,
    })
}
