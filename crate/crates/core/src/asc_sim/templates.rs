use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    form_image, synthesize_field, wrap_angle, AscError, AscSet, RadarConfig, ScatteringCenter,
};
use crate::dataset::SarSample;
use crate::rng::{derive_seed, seeded};

const TEMPLATE_SOURCE: &str = include_str!("../../data/class_templates.toml");

/// Aspect-dependence magnitudes of template centers (s/m).
const GAMMA_SCALE: f64 = 1e-10;

#[derive(Clone, Debug, Deserialize)]
struct Path {
    points: Vec<[f64; 2]>,
    #[serde(default)]
    closed: bool,
}

#[derive(Clone, Debug, Deserialize)]
struct TemplateSpec {
    name: String,
    paths: Vec<Path>,
    alpha: Vec<[f64; 2]>,
    distributed: f64,
    length: [f64; 2],
    clutter: usize,
}

#[derive(Deserialize)]
struct TemplateFile {
    class: Vec<TemplateSpec>,
}

/// A class's silhouette and attribute mix.
#[derive(Clone, Debug)]
pub struct ClassTemplate {
    pub name: String,
    segments: Vec<([f64; 2], [f64; 2])>,
    alpha: Vec<[f64; 2]>,
    distributed: f64,
    length: [f64; 2],
    pub clutter: usize,
}

/// The committed class templates, in class-id order.
pub fn class_templates() -> &'static [ClassTemplate] {
    static TEMPLATES: OnceLock<Vec<ClassTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        let file: TemplateFile =
            toml::from_str(TEMPLATE_SOURCE).expect("class_templates.toml parses");
        file.class
            .into_iter()
            .map(|t| {
                let mut segments = Vec::new();
                for p in &t.paths {
                    for w in p.points.windows(2) {
                        segments.push((w[0], w[1]));
                    }
                    if p.closed && p.points.len() > 2 {
                        segments.push((*p.points.last().unwrap(), p.points[0]));
                    }
                }
                ClassTemplate {
                    name: t.name,
                    segments,
                    alpha: t.alpha,
                    distributed: t.distributed,
                    length: t.length,
                    clutter: t.clutter,
                }
            })
            .collect()
    })
}

impl ClassTemplate {
    /// `n` points evenly spaced by arc length, with the local tangent angle.
    fn spread(&self, n: usize) -> Vec<(f64, f64, f64)> {
        let lens: Vec<f64> = self
            .segments
            .iter()
            .map(|(a, b)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt())
            .collect();
        let total: f64 = lens.iter().sum();
        let last = self.segments.len() - 1;
        (0..n)
            .map(|i| {
                let mut s = (i as f64 + 0.5) / n as f64 * total;
                for (j, ((a, b), &len)) in self.segments.iter().zip(&lens).enumerate() {
                    if s <= len || j == last {
                        let t = if len > 0.0 { (s / len).min(1.0) } else { 0.0 };
                        let x = a[0] + t * (b[0] - a[0]);
                        let y = a[1] + t * (b[1] - a[1]);
                        return (x, y, (b[1] - a[1]).atan2(b[0] - a[0]));
                    }
                    s -= len;
                }
                unreachable!("template has at least one segment")
            })
            .collect()
    }

    /// One center at `(x, y)` with attributes drawn from the class mix.
    fn draw_center<R: Rng>(&self, rng: &mut R, (x, y, tangent): (f64, f64, f64)) -> ScatteringCenter {
        let total_w: f64 = self.alpha.iter().map(|a| a[1]).sum();
        let mut pick = rng.gen_range(0.0..total_w);
        let mut alpha = self.alpha[0][0];
        for a in &self.alpha {
            if pick < a[1] {
                alpha = a[0];
                break;
            }
            pick -= a[1];
        }
        let length = if rng.gen_bool(self.distributed.clamp(0.0, 1.0)) {
            rng.gen_range(self.length[0]..=self.length[1])
        } else {
            0.0
        };
        ScatteringCenter {
            amplitude: rng.gen_range(0.4..1.0),
            x,
            y,
            alpha,
            length,
            orientation: wrap_angle(tangent),
            gamma: rng.gen_range(-GAMMA_SCALE..GAMMA_SCALE),
        }
    }

    /// A fixed reference instance of `n` centers for class `class_id`.
    /// Generated samples share its positions but redraw the attributes.
    pub fn canonical(&self, class_id: usize, n: usize) -> Vec<ScatteringCenter> {
        let mut rng = seeded(derive_seed(0xc1a5_5000, class_id as u64));
        self.spread(n)
            .into_iter()
            .map(|p| self.draw_center(&mut rng, p))
            .collect()
    }
}

/// Per-sample perturbation of a template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleJitter {
    /// Standard deviation of each center's position, meters.
    pub position_sigma: f64,
    /// Amplitudes are scaled by a factor in `1 ± amplitude_fraction`.
    pub amplitude_fraction: f64,
    /// The whole target is rotated by an angle in `± orientation_deg`.
    pub orientation_deg: f64,
}

impl Default for SampleJitter {
    fn default() -> Self {
        Self {
            position_sigma: 0.15,
            amplitude_fraction: 0.2,
            orientation_deg: 5.0,
        }
    }
}

/// Everything needed to synthesize one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub radar: RadarConfig,
    pub centers: usize,
    /// Stored image side length.
    pub image_size: usize,
    pub jitter: SampleJitter,
    /// Standard deviation of complex white noise added to the field,
    /// relative to the field's RMS; zero disables it.
    pub field_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            radar: RadarConfig::default(),
            centers: super::DEFAULT_CENTERS,
            image_size: 96,
            jitter: SampleJitter::default(),
            field_noise: 0.0,
        }
    }
}

/// Draws one jittered instance of class `class_id`.
///
/// Deterministic in `(class_id, seed, sim)`. The returned sample has id 0 and
/// clean labels; callers assign ids.
pub fn generate_class_sample(
    class_id: usize,
    seed: u64,
    sim: &SimConfig,
) -> Result<SarSample, AscError> {
    let templates = class_templates();
    let template = templates.get(class_id).ok_or(AscError::UnknownClass {
        class: class_id,
        classes: templates.len(),
    })?;
    sim.radar.validate()?;
    let clutter = template.clutter.min(sim.centers);
    let mut rng = seeded(derive_seed(seed, class_id as u64));

    let rotation = rng.gen_range(-1.0..=1.0) * sim.jitter.orientation_deg.to_radians();
    let (sr, cr) = rotation.sin_cos();
    let position = Normal::new(0.0, sim.jitter.position_sigma.max(0.0)).expect("finite sigma");
    let mut centers: Vec<ScatteringCenter> = template
        .spread(sim.centers - clutter)
        .into_iter()
        .map(|p| {
            let c = template.draw_center(&mut rng, p);
            let (dx, dy) = (position.sample(&mut rng), position.sample(&mut rng));
            let scale = 1.0 + rng.gen_range(-1.0..=1.0) * sim.jitter.amplitude_fraction;
            ScatteringCenter {
                amplitude: (c.amplitude * scale).max(0.0),
                x: cr * c.x - sr * c.y + dx,
                y: sr * c.x + cr * c.y + dy,
                orientation: wrap_angle(c.orientation + rotation),
                ..c
            }
        })
        .collect();
    for _ in 0..clutter {
        centers.push(ScatteringCenter::point(
            rng.gen_range(0.05..0.25),
            rng.gen_range(-7.0..7.0),
            rng.gen_range(-7.0..7.0),
        ));
    }
    // Extraction-style ordering: strongest first.
    centers.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    let asc = AscSet { centers, class_id };

    let mut grid = synthesize_field(&asc, &sim.radar)?;
    if sim.field_noise > 0.0 {
        let rms = (grid.values.iter().map(|v| v.norm_sqr()).sum::<f64>()
            / grid.values.len() as f64)
            .sqrt();
        let sigma = sim.field_noise * rms / 2f64.sqrt();
        for v in grid.values.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(re, im) * sigma;
        }
    }
    let image = form_image(&grid, &sim.radar, sim.image_size, sim.image_size)?;
    Ok(SarSample {
        id: 0,
        asc,
        image,
        true_label: class_id,
        train_label: class_id,
    })
}
