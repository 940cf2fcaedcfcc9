//! Procedural live/spoof face dataset with per-domain capture shifts.
//!
//! A live sample is a shaded face blob with a dome-shaped depth target. A
//! spoof is a live rendering re-captured: flattened shading, the domain's
//! attack texture, and an all-zero depth target. Domain transforms (colour
//! cast, blur, sensor noise) are applied last, then HSV channels are derived
//! from the final RGB.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator settings: {0}")]
    Invalid(String),
    #[error("unknown domain id {0}")]
    UnknownDomain(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Semantic class. Live maps to label 1, matching the convention that the
/// positive term of the classification loss belongs to genuine faces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Live,
    Spoof,
}

impl Class {
    pub fn label(self) -> f64 {
        match self {
            Class::Live => 1.0,
            Class::Spoof => 0.0,
        }
    }

    pub fn from_label(y: f64) -> Result<Self> {
        match y {
            v if v == 1.0 => Ok(Class::Live),
            v if v == 0.0 => Ok(Class::Spoof),
            other => Err(DataError::Format(format!("label {other} is not 0 or 1"))),
        }
    }
}

/// Attack artifact family rendered onto spoofs of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SpoofTexture {
    /// Sinusoidal interference stripes (screen replay).
    MoireStripes { period: f64, angle_deg: f64, amplitude: f64 },
    /// Periodic print dots.
    HalftoneDots { period: f64, amplitude: f64 },
    /// Specular glare patch from a glossy print.
    FlatReflectance { strength: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// Row-major 3x3 matrix applied to RGB.
    pub color_cast: [[f64; 3]; 3],
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub texture: SpoofTexture,
}

impl DomainSpec {
    /// Four capture environments with distinct casts and attack textures.
    pub fn defaults() -> Vec<DomainSpec> {
        vec![
            DomainSpec {
                id: 0,
                color_cast: [[1.2, 0.05, 0.0], [0.0, 0.9, 0.0], [0.0, 0.0, 0.5]],
                blur_sigma: 0.0,
                noise_sigma: 0.02,
                texture: SpoofTexture::MoireStripes {
                    period: 3.0,
                    angle_deg: 20.0,
                    amplitude: 0.06,
                },
            },
            DomainSpec {
                id: 1,
                color_cast: [[0.5, 0.0, 0.05], [0.0, 0.85, 0.05], [0.05, 0.1, 1.3]],
                blur_sigma: 0.6,
                noise_sigma: 0.01,
                texture: SpoofTexture::HalftoneDots {
                    period: 3.0,
                    amplitude: 0.08,
                },
            },
            DomainSpec {
                id: 2,
                color_cast: [[0.45, 0.05, 0.0], [0.05, 0.95, 0.05], [0.0, 0.05, 0.4]],
                blur_sigma: 0.3,
                noise_sigma: 0.04,
                texture: SpoofTexture::FlatReflectance { strength: 0.25 },
            },
            DomainSpec {
                id: 3,
                color_cast: [[0.75, 0.25, 0.25], [0.15, 0.45, 0.15], [0.25, 0.25, 0.75]],
                blur_sigma: 0.0,
                noise_sigma: 0.03,
                texture: SpoofTexture::MoireStripes {
                    period: 4.0,
                    angle_deg: -35.0,
                    amplitude: 0.07,
                },
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub domains: Vec<DomainSpec>,
    pub per_domain: usize,
    pub live_fraction: f64,
    pub image_size: usize,
    pub depth_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            domains: DomainSpec::defaults(),
            per_domain: 200,
            live_fraction: 0.5,
            image_size: 32,
            depth_size: 16,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_domain < 2 {
            return Err(DataError::Invalid(format!("per_domain must be >= 2, got {}", self.per_domain)));
        }
        if !(self.live_fraction > 0.0 && self.live_fraction < 1.0) {
            return Err(DataError::Invalid(format!(
                "live_fraction must be in (0,1), got {}",
                self.live_fraction
            )));
        }
        if self.image_size < 8 {
            return Err(DataError::Invalid(format!("image size must be >= 8, got {}", self.image_size)));
        }
        if self.depth_size == 0 {
            return Err(DataError::Invalid("depth size must be >= 1".into()));
        }
        if self.domains.is_empty() {
            return Err(DataError::Invalid("at least one domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.id != i {
                return Err(DataError::Invalid(format!("domain ids must be 0..n in order, got {} at {i}", d.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    /// `[6, H, W]`: RGB then HSV, all in [0, 1].
    pub image: Tensor,
    pub class: Class,
    /// `[1, d, d]`.
    pub depth: Tensor,
    pub true_domain: usize,
}

impl Sample {
    pub fn y(&self) -> f64 {
        self.class.label()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub samples: Vec<Sample>,
}

/// What a trainer may see of a sample: no domain identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub sample_id: usize,
    pub image: Tensor,
    pub class: Class,
    pub depth: Tensor,
}

impl TrainRecord {
    pub fn y(&self) -> f64 {
        self.class.label()
    }
}

impl From<&Sample> for TrainRecord {
    fn from(s: &Sample) -> Self {
        Self {
            sample_id: s.sample_id,
            image: s.image.clone(),
            class: s.class,
            depth: s.depth.clone(),
        }
    }
}

/// Leave-one-domain-out split. `train_domains` is held apart from the
/// records and only consulted for diagnostics or the generator-truth mode.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<TrainRecord>,
    pub train_domains: Vec<usize>,
    pub test: Vec<Sample>,
}

pub fn split_leave_one_domain_out(dataset: &Dataset, test_domain: usize) -> Result<Split> {
    if !dataset.samples.iter().any(|s| s.true_domain == test_domain) {
        return Err(DataError::UnknownDomain(test_domain));
    }
    let (test, train): (Vec<&Sample>, Vec<&Sample>) =
        dataset.samples.iter().partition(|s| s.true_domain == test_domain);
    Ok(Split {
        train_domains: train.iter().map(|s| s.true_domain).collect(),
        train: train.into_iter().map(TrainRecord::from).collect(),
        test: test.into_iter().cloned().collect(),
    })
}

/// SplitMix64 finaliser; per-sample seeds derive from `(seed, sample_id)`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hexcone HSV with every channel in [0, 1] (hue divided by 360 degrees).
/// Out-of-range inputs are clamped; returns the image and the clamp count.
pub fn rgb_to_hsv(rgb: &Tensor) -> Result<(Tensor, usize)> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::Invalid(format!("rgb_to_hsv expects [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = rgb.data();
    let mut out = vec![0.0; 3 * plane];
    let mut clamped = 0;
    for i in 0..plane {
        let mut px = [d[i], d[plane + i], d[2 * plane + i]];
        for v in px.iter_mut() {
            if !(0.0..=1.0).contains(v) {
                *v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        let (h, sat, v) = hsv_pixel(px[0], px[1], px[2]);
        out[i] = h;
        out[plane + i] = sat;
        out[2 * plane + i] = v;
    }
    Ok((Tensor::new(s, out).expect("shape"), clamped))
}

fn hsv_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let mut h = if max == r {
        60.0 * (((g - b) / delta) % 6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if h < 0.0 {
        h += 360.0;
    }
    (h / 360.0, s, v)
}

fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[i * w + clampi(j as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            plane[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(i as isize + k as isize - radius, h) * w + j])
                .sum();
        }
    }
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    radius: f64,
}

/// Dome `max(0, 1 - (r/R)^2)` sampled on a `d x d` grid.
fn depth_dome(face: &FaceGeometry, image_size: usize, d: usize) -> Tensor {
    let scale = d as f64 / image_size as f64;
    let (cx, cy, r) = (face.cx * scale, face.cy * scale, face.radius * scale);
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let rr = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
            data[i * d + j] = (1.0 - rr).max(0.0);
        }
    }
    Tensor::new(&[1, d, d], data).expect("shape")
}

fn render_sample(cfg: &GeneratorConfig, spec: &DomainSpec, sample_id: usize, class: Class) -> Sample {
    let n = cfg.image_size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, sample_id as u64));

    let face = FaceGeometry {
        cx: nf / 2.0 + rng.random_range(-0.06..0.06) * nf,
        cy: nf / 2.0 + rng.random_range(-0.06..0.06) * nf,
        radius: rng.random_range(0.30..0.38) * nf,
    };
    let tone = rng.random_range(0.6..0.8);
    let albedo = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.75)];
    let bg_level = rng.random_range(0.3..0.45);
    let bg_tint: [f64; 3] = std::array::from_fn(|_| bg_level * rng.random_range(0.9..1.1));
    let bg_slope = rng.random_range(-0.15..0.15);
    let light = {
        let lx = rng.random_range(-0.4..0.4);
        let ly = rng.random_range(-0.4..0.4);
        let lz: f64 = 1.0;
        let norm = (lx * lx + ly * ly + lz * lz).sqrt();
        [lx / norm, ly / norm, lz / norm]
    };
    let ambient = rng.random_range(0.2..0.35);
    let eye_dy = -0.25 * face.radius;
    let eye_dx = 0.38 * face.radius;
    let eye_r = 0.14 * face.radius;

    let mut rgb = vec![0.0; 3 * n * n];
    let mut face_mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let (dx, dy) = ((x - face.cx) / face.radius, (y - face.cy) / face.radius);
            let rr = dx * dx + dy * dy;
            let idx = i * n + j;
            if rr < 1.0 {
                face_mask[idx] = true;
                let z = (1.0 - rr).sqrt();
                let lambert = (dx * light[0] + dy * light[1] + z * light[2]).max(0.0);
                let mut shade = ambient + (1.0 - ambient) * lambert;
                let ex = (x - face.cx).abs() - eye_dx;
                let ey = y - face.cy - eye_dy;
                if ex * ex + ey * ey < eye_r * eye_r {
                    shade *= 0.35;
                }
                let my = y - face.cy - 0.45 * face.radius;
                if my.abs() < 0.06 * face.radius + 0.5 && (x - face.cx).abs() < 0.35 * face.radius {
                    shade *= 0.55;
                }
                for c in 0..3 {
                    rgb[c * n * n + idx] = albedo[c] * shade;
                }
            } else {
                let grad = 1.0 + bg_slope * (y / nf - 0.5);
                for c in 0..3 {
                    rgb[c * n * n + idx] = bg_tint[c] * grad;
                }
            }
        }
    }

    if class == Class::Spoof {
        recapture(&mut rgb, &face_mask, n, &face, &spec.texture, &mut rng);
    }

    // domain transforms: cast, blur, sensor noise
    let cast = &spec.color_cast;
    for idx in 0..n * n {
        let px = [rgb[idx], rgb[n * n + idx], rgb[2 * n * n + idx]];
        for c in 0..3 {
            rgb[c * n * n + idx] = cast[c][0] * px[0] + cast[c][1] * px[1] + cast[c][2] * px[2];
        }
    }
    for c in 0..3 {
        gaussian_blur(&mut rgb[c * n * n..(c + 1) * n * n], n, n, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in rgb.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    rgb.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let rgb_t = Tensor::new(&[3, n, n], rgb).expect("shape");
    let (hsv, _) = rgb_to_hsv(&rgb_t).expect("shape");
    let mut data = rgb_t.into_data();
    data.extend_from_slice(hsv.data());

    let depth = match class {
        Class::Live => depth_dome(&face, n, cfg.depth_size),
        Class::Spoof => Tensor::zeros(&[1, cfg.depth_size, cfg.depth_size]),
    };
    Sample {
        sample_id,
        image: Tensor::new(&[6, n, n], data).expect("shape"),
        class,
        depth,
        true_domain: spec.id,
    }
}

/// Flattened print/replay of the rendered face plus the domain's artifact.
/// Every added pattern is zero-mean over the image so channel means carry
/// little class information.
fn recapture(
    rgb: &mut [f64],
    face_mask: &[bool],
    n: usize,
    face: &FaceGeometry,
    texture: &SpoofTexture,
    rng: &mut ChaCha8Rng,
) {
    let plane = n * n;
    // compress shading towards the per-channel face mean
    let flatten = rng.random_range(0.35..0.55);
    let face_px = face_mask.iter().filter(|&&m| m).count().max(1) as f64;
    for c in 0..3 {
        let ch = &mut rgb[c * plane..(c + 1) * plane];
        let mean = ch.iter().zip(face_mask).filter(|(_, &m)| m).map(|(v, _)| *v).sum::<f64>() / face_px;
        for (v, &m) in ch.iter_mut().zip(face_mask) {
            if m {
                *v = mean + flatten * (*v - mean);
            }
        }
    }

    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pattern = vec![0.0; plane];
    match *texture {
        SpoofTexture::MoireStripes {
            period,
            angle_deg,
            amplitude,
        } => {
            let a = angle_deg.to_radians();
            let (ca, sa) = (a.cos(), a.sin());
            for i in 0..n {
                for j in 0..n {
                    let u = j as f64 * ca + i as f64 * sa;
                    pattern[i * n + j] = amplitude * (std::f64::consts::TAU * u / period + phase).sin();
                }
            }
        }
        SpoofTexture::HalftoneDots { period, amplitude } => {
            let off = rng.random_range(0.0..period);
            for i in 0..n {
                for j in 0..n {
                    let u = ((j as f64 + off) % period) - period / 2.0;
                    let v = ((i as f64 + off) % period) - period / 2.0;
                    let dot = if u * u + v * v < (0.3 * period).powi(2) { 1.0 } else { 0.0 };
                    pattern[i * n + j] = -amplitude * dot;
                }
            }
        }
        SpoofTexture::FlatReflectance { strength } => {
            let gx = face.cx + rng.random_range(-0.5..0.5) * face.radius;
            let gy = face.cy + rng.random_range(-0.5..0.5) * face.radius;
            let gr = rng.random_range(0.25..0.4) * face.radius;
            for i in 0..n {
                for j in 0..n {
                    let (dx, dy) = (j as f64 + 0.5 - gx, i as f64 + 0.5 - gy);
                    let g = (-(dx * dx + dy * dy) / (2.0 * gr * gr)).exp();
                    pattern[i * n + j] = strength * g;
                }
            }
        }
    }
    let mean = pattern.iter().sum::<f64>() / plane as f64;
    for c in 0..3 {
        for (v, p) in rgb[c * plane..(c + 1) * plane].iter_mut().zip(&pattern) {
            *v += p - mean;
        }
    }
}

/// Generates `per_domain` samples for every domain. `threads > 1` splits
/// rendering across workers; the result does not depend on the thread count.
pub fn generate(cfg: &GeneratorConfig, threads: usize) -> Result<Dataset> {
    cfg.validate()?;
    let n_live = ((cfg.per_domain as f64 * cfg.live_fraction).round() as usize).clamp(1, cfg.per_domain - 1);
    let jobs: Vec<(usize, usize, Class)> = cfg
        .domains
        .iter()
        .flat_map(|spec| {
            (0..cfg.per_domain).map(move |j| {
                let class = if j < n_live { Class::Live } else { Class::Spoof };
                (spec.id, spec.id * cfg.per_domain + j, class)
            })
        })
        .collect();
    let render = |job: &(usize, usize, Class)| render_sample(cfg, &cfg.domains[job.0], job.1, job.2);
    let samples = if threads <= 1 {
        jobs.iter().map(render).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(render).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("render worker panicked"))
                .collect()
        })
    };
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

pub const DATASET_FORMAT: &str = "pdl-dataset-v1";
const BLOB_NAME: &str = "samples.bin";
const SAMPLE_DIR: &str = "samples";

/// Written next to the sample data as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub generator: GeneratorConfig,
    pub n_samples: usize,
    pub counts_per_domain: Vec<usize>,
    pub live_per_domain: Vec<usize>,
    pub image_shape: [usize; 3],
    pub depth_shape: [usize; 3],
    /// Field order of every record, each field a run of little-endian f64.
    pub record_layout: Vec<RecordField>,
    pub record_f64s: usize,
    /// "blob" (one `samples.bin`) or "per_sample" (`samples/<id>.bin`).
    pub storage: String,
    /// SHA-256 of the sample payload.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordField {
    pub name: String,
    pub len: usize,
}

impl Dataset {
    fn layout(&self) -> Vec<RecordField> {
        let n = self.config.image_size;
        let d = self.config.depth_size;
        vec![
            RecordField { name: "sample_id".into(), len: 1 },
            RecordField { name: "label".into(), len: 1 },
            RecordField { name: "true_domain".into(), len: 1 },
            RecordField { name: "image".into(), len: 6 * n * n },
            RecordField { name: "depth".into(), len: d * d },
        ]
    }

    fn encode_record(s: &Sample, out: &mut Vec<u8>) {
        let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        push(s.sample_id as f64);
        push(s.y());
        push(s.true_domain as f64);
        s.image.data().iter().for_each(|&v| push(v));
        s.depth.data().iter().for_each(|&v| push(v));
    }

    pub fn manifest(&self, per_sample: bool) -> DatasetManifest {
        let nd = self.config.domains.len();
        let mut counts = vec![0; nd];
        let mut live = vec![0; nd];
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for s in &self.samples {
            counts[s.true_domain] += 1;
            if s.class == Class::Live {
                live[s.true_domain] += 1;
            }
            buf.clear();
            Self::encode_record(s, &mut buf);
            hasher.update(&buf);
        }
        let layout = self.layout();
        let n = self.config.image_size;
        let d = self.config.depth_size;
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            generator: self.config.clone(),
            n_samples: self.samples.len(),
            counts_per_domain: counts,
            live_per_domain: live,
            image_shape: [6, n, n],
            depth_shape: [1, d, d],
            record_f64s: layout.iter().map(|f| f.len).sum(),
            record_layout: layout,
            storage: if per_sample { "per_sample" } else { "blob" }.into(),
            content_hash: hex::encode(hasher.finalize()),
        }
    }

    /// Writes `manifest.json` plus either one blob or one file per sample.
    pub fn save(&self, dir: &Path, per_sample: bool) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = self.manifest(per_sample);
        if per_sample {
            let sdir = dir.join(SAMPLE_DIR);
            fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
            for s in &self.samples {
                let mut buf = Vec::new();
                Self::encode_record(s, &mut buf);
                let p = sdir.join(format!("{}.bin", s.sample_id));
                fs::write(&p, &buf).map_err(io_err(&p))?;
            }
        } else {
            let p = dir.join(BLOB_NAME);
            let mut f = std::io::BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?);
            let mut buf = Vec::new();
            for s in &self.samples {
                buf.clear();
                Self::encode_record(s, &mut buf);
                f.write_all(&buf).map_err(io_err(&p))?;
            }
            f.flush().map_err(io_err(&p))?;
        }
        let mp = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("serializable");
        fs::write(&mp, json + "\n").map_err(io_err(&mp))?;
        Ok(manifest)
    }

    /// Loads a dataset written by [`Dataset::save`] in either storage mode.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mp = dir.join("manifest.json");
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", mp.display())))?;
        if manifest.format != DATASET_FORMAT {
            return Err(DataError::Format(format!("unsupported format {:?}", manifest.format)));
        }
        let rec_bytes = manifest.record_f64s * 8;
        let mut raw_records: Vec<Vec<u8>> = Vec::with_capacity(manifest.n_samples);
        let blob = dir.join(BLOB_NAME);
        if blob.exists() {
            let mut bytes = Vec::new();
            fs::File::open(&blob)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(io_err(&blob))?;
            if bytes.len() != rec_bytes * manifest.n_samples {
                return Err(DataError::Format(format!(
                    "{} has {} bytes, expected {}",
                    blob.display(),
                    bytes.len(),
                    rec_bytes * manifest.n_samples
                )));
            }
            raw_records.extend(bytes.chunks(rec_bytes).map(|c| c.to_vec()));
        } else {
            let sdir = dir.join(SAMPLE_DIR);
            let mut files: Vec<(usize, PathBuf)> = fs::read_dir(&sdir)
                .map_err(io_err(&sdir))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    let id = p.file_stem()?.to_str()?.parse::<usize>().ok()?;
                    Some((id, p))
                })
                .collect();
            files.sort();
            for (_, p) in files {
                let bytes = fs::read(&p).map_err(io_err(&p))?;
                if bytes.len() != rec_bytes {
                    return Err(DataError::Format(format!("{} has wrong record size", p.display())));
                }
                raw_records.push(bytes);
            }
        }
        if raw_records.len() != manifest.n_samples {
            return Err(DataError::Format(format!(
                "found {} records, manifest says {}",
                raw_records.len(),
                manifest.n_samples
            )));
        }
        let [_, n, _] = manifest.image_shape;
        let [_, d, _] = manifest.depth_shape;
        let samples = raw_records
            .iter()
            .map(|rec| {
                let vals: Vec<f64> = rec
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                let img_end = 3 + 6 * n * n;
                Ok(Sample {
                    sample_id: vals[0] as usize,
                    class: Class::from_label(vals[1])?,
                    true_domain: vals[2] as usize,
                    image: Tensor::new(&[6, n, n], vals[3..img_end].to_vec())
                        .map_err(|e| DataError::Format(e.to_string()))?,
                    depth: Tensor::new(&[1, d, d], vals[img_end..].to_vec())
                        .map_err(|e| DataError::Format(e.to_string()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: manifest.generator,
            samples,
        })
    }
}

/// Stacks sample images into a `[B, 6, H, W]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Tensor {
    let items: Vec<&Tensor> = images.into_iter().collect();
    Tensor::stack(&items).expect("images share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Inverse hexcone transform, used as an oracle.
    fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
        let c = v * s;
        let hp = h * 6.0;
        let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
        let (r, g, b) = match hp as usize {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = v - c;
        [r + m, g + m, b + m]
    }

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            per_domain: 6,
            image_size: 16,
            depth_size: 8,
            seed: 42,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn primary_and_gray_hsv() {
        let t = Tensor::new(&[3, 1, 2], vec![1.0, 0.5, 0.0, 0.5, 0.0, 0.5]).unwrap();
        let (hsv, clamped) = rgb_to_hsv(&t).unwrap();
        assert_eq!(clamped, 0);
        let d = hsv.data();
        assert_eq!((d[0], d[2], d[4]), (0.0, 1.0, 1.0));
        assert_eq!((d[1], d[3], d[5]), (0.0, 0.0, 0.5));
    }

    #[test]
    fn hsv_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        let t = Tensor::new(&[3, 1, 1000], data.clone()).unwrap();
        let (hsv, _) = rgb_to_hsv(&t).unwrap();
        let h = hsv.data();
        for i in 0..1000 {
            let back = hsv_to_rgb(h[i], h[1000 + i], h[2000 + i]);
            for c in 0..3 {
                assert!((back[c] - data[c * 1000 + i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hsv_clamps_out_of_range() {
        let t = Tensor::new(&[3, 1, 1], vec![1.5, -0.2, 0.3]).unwrap();
        let (_, clamped) = rgb_to_hsv(&t).unwrap();
        assert_eq!(clamped, 2);
    }

    #[test]
    fn depth_targets_follow_class() {
        let ds = generate(&small_cfg(), 1).unwrap();
        for s in &ds.samples {
            match s.class {
                Class::Spoof => assert_eq!(s.depth.data().iter().sum::<f64>(), 0.0),
                Class::Live => {
                    let d = s.depth.data();
                    let max = d.iter().copied().fold(0.0, f64::max);
                    assert!(max > 0.0 && d.iter().all(|v| (0.0..=1.0).contains(v)));
                    // corner is outside the face blob
                    assert_eq!(d[0], 0.0);
                }
            }
        }
    }

    #[test]
    fn hsv_channels_match_rgb() {
        let ds = generate(&small_cfg(), 1).unwrap();
        let s = &ds.samples[3];
        let n = 16 * 16;
        let rgb = Tensor::new(&[3, 16, 16], s.image.data()[..3 * n].to_vec()).unwrap();
        let (hsv, _) = rgb_to_hsv(&rgb).unwrap();
        assert_eq!(hsv.data(), &s.image.data()[3 * n..]);
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let a = generate(&small_cfg(), 1).unwrap();
        let b = generate(&small_cfg(), 1).unwrap();
        let c = generate(&small_cfg(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = small_cfg();
        cfg.image_size = 7;
        assert!(generate(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.per_domain = 1;
        assert!(generate(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.live_fraction = 1.0;
        assert!(generate(&cfg, 1).is_err());
    }

    #[test]
    fn leave_one_out_counts() {
        let cfg = GeneratorConfig {
            per_domain: 100,
            image_size: 8,
            depth_size: 4,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg, 1).unwrap();
        let split = split_leave_one_domain_out(&ds, 2).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (300, 100));
        assert!(split.test.iter().all(|s| s.true_domain == 2));
        assert!(split.train_domains.iter().all(|&d| d != 2));
        let mut ids: Vec<usize> = split
            .train
            .iter()
            .map(|r| r.sample_id)
            .chain(split.test.iter().map(|s| s.sample_id))
            .collect();
        ids.sort();
        assert_eq!(ids, (0..400).collect::<Vec<_>>());
        assert!(matches!(split_leave_one_domain_out(&ds, 9), Err(DataError::UnknownDomain(9))));
    }

    #[test]
    fn save_load_both_layouts() {
        let ds = generate(&small_cfg(), 1).unwrap();
        for per_sample in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let m = ds.save(dir.path(), per_sample).unwrap();
            assert_eq!(m.n_samples, 24);
            let back = Dataset::load(dir.path()).unwrap();
            assert_eq!(back, ds);
        }
    }

    fn channel_means(s: &Sample) -> Vec<f64> {
        let plane = s.image.len() / 6;
        s.image.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
    }

    fn default_dataset() -> Dataset {
        generate(&GeneratorConfig::default(), 4).unwrap()
    }

    #[test]
    fn class_balance_per_domain() {
        let ds = default_dataset();
        let cfg = &ds.config;
        for dom in 0..cfg.domains.len() {
            let (live, total) = ds
                .samples
                .iter()
                .filter(|s| s.true_domain == dom)
                .fold((0, 0), |(l, t), s| (l + (s.class == Class::Live) as usize, t + 1));
            let frac = live as f64 / total as f64;
            assert!((frac - cfg.live_fraction).abs() <= 2.0 / (cfg.per_domain as f64).sqrt());
        }
    }

    #[test]
    fn domains_separable_by_channel_means() {
        let ds = default_dataset();
        let nd = ds.config.domains.len();
        let feats: Vec<Vec<f64>> = ds.samples.iter().map(channel_means).collect();
        let mut centroids = vec![vec![0.0; 6]; nd];
        let mut counts = vec![0.0; nd];
        for (s, f) in ds.samples.iter().zip(&feats).filter(|(s, _)| s.sample_id % 2 == 0) {
            counts[s.true_domain] += 1.0;
            centroids[s.true_domain].iter_mut().zip(f).for_each(|(c, v)| *c += v);
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let held: Vec<_> = ds.samples.iter().zip(&feats).filter(|(s, _)| s.sample_id % 2 == 1).collect();
        let correct = held
            .iter()
            .filter(|(s, f)| {
                let dist = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..nd).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == s.true_domain
            })
            .count();
        let acc = correct as f64 / held.len() as f64;
        assert!(acc >= 0.9, "nearest-centroid domain accuracy {acc}");
    }

    /// Logistic regression on standardized channel means, fit on the whole set.
    #[test]
    fn class_not_linear_in_channel_means() {
        let ds = default_dataset();
        let mut feats: Vec<Vec<f64>> = ds.samples.iter().map(channel_means).collect();
        for j in 0..6 {
            let n = feats.len() as f64;
            let mean = feats.iter().map(|f| f[j]).sum::<f64>() / n;
            let sd = (feats.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
            feats.iter_mut().for_each(|f| f[j] = (f[j] - mean) / sd);
        }
        let ys: Vec<f64> = ds.samples.iter().map(|s| s.y()).collect();
        let mut w = [0.0; 7];
        for _ in 0..3000 {
            let mut g = [0.0; 7];
            for (f, y) in feats.iter().zip(&ys) {
                let z = w[6] + f.iter().zip(&w[..6]).map(|(a, b)| a * b).sum::<f64>();
                let r = crate::tensor::sigmoid(z) - y;
                f.iter().enumerate().for_each(|(j, v)| g[j] += r * v);
                g[6] += r;
            }
            w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 0.5 * gi / ys.len() as f64);
        }
        let correct = feats
            .iter()
            .zip(&ys)
            .filter(|(f, y)| {
                let z = w[6] + f.iter().zip(&w[..6]).map(|(a, b)| a * b).sum::<f64>();
                (z > 0.0) == (**y == 1.0)
            })
            .count();
        let acc = correct as f64 / ys.len() as f64;
        assert!(acc < 0.85, "linear probe live/spoof accuracy {acc}");
    }
}
