//! Synthetic word clips with controllable modality coupling.
//!
//! Every class owns a mouth-opening trajectory and a lip texture. A clip is
//! rendered from a 68-point face template (iBUG ordering) under a random
//! per-clip similarity pose with per-frame jitter. The pixel stream and the
//! landmark stream are driven separately so that the class signal can be
//! routed to either modality or split between them.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{save_sample, split_dataset, DatasetManifest, GrayImage, Landmarks, SampleRecord, Split, VideoSample};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Pixels carry the class; landmarks follow a class-independent trajectory.
    VisualOnly,
    /// Landmarks carry the class; pixels are class-independent.
    GeometricOnly,
    /// `C = G * V`: landmarks carry `c % G`, pixel texture carries `c / G`.
    Complementary,
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Coupling::VisualOnly => "visual_only",
            Coupling::GeometricOnly => "geometric_only",
            Coupling::Complementary => "complementary",
        })
    }
}

impl FromStr for Coupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual_only" => Ok(Coupling::VisualOnly),
            "geometric_only" => Ok(Coupling::GeometricOnly),
            "complementary" => Ok(Coupling::Complementary),
            other => Err(Error::Config(format!(
                "unknown coupling `{other}` (expected visual_only, geometric_only or complementary)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub coupling: Coupling,
    /// Side of the square raw frames.
    pub frame_size: usize,
    pub frames: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, seed: u64, coupling: Coupling) -> Self {
        SynthConfig {
            classes,
            per_class,
            seed,
            coupling,
            frame_size: 96,
            frames: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 classes and 2 samples per class (got {} x {})",
                self.classes, self.per_class
            )));
        }
        if self.frame_size < 16 || self.frames < 5 {
            return Err(Error::Config(format!(
                "frame size {} / length {} too small",
                self.frame_size, self.frames
            )));
        }
        Ok(())
    }

    /// `(G, V)` with `V` the largest divisor of `C` not above `sqrt(C)`.
    pub fn complementary_factors(&self) -> (usize, usize) {
        let c = self.classes;
        let v = (1..=c).filter(|v| v * v <= c && c % v == 0).max().unwrap_or(1);
        (c / v, v)
    }
}

const SYLLABLES: [&str; 10] = ["ka", "ta", "ma", "sa", "ra", "la", "na", "ba", "da", "fa"];

/// Distinct, variable-length pseudo-words.
pub fn class_name(k: usize) -> String {
    let mut s = String::from(SYLLABLES[k % 10]);
    for j in 0..k % 3 {
        s.push_str(SYLLABLES[(k / 10 + j + k) % 10]);
    }
    if k >= 10 {
        s.push_str(&(k / 10).to_string());
    }
    s
}

/// Mouth opening of trajectory `k` at frame `t`.
fn opening(k: usize, t: usize, span: (usize, usize)) -> f64 {
    let (s, e) = span;
    if t < s || t > e {
        return 0.1;
    }
    let f = 1.0 + (k % 5) as f64;
    let amp = 0.9 * 0.75f64.powi((k % 5) as i32) * 0.6f64.powi(((k / 5) % 4) as i32);
    let phase = PI * (k / 20) as f64 / 5.0;
    let tau = (t - s) as f64 / (e - s + 1) as f64;
    0.1 + amp * (PI * f * tau + phase).sin().abs()
}

/// 68-point face in face units: mouth corners at `(-1, 0)` and `(1, 0)`,
/// y pointing down.
fn face_template(open: f64) -> [[f64; 2]; 68] {
    let mut p = [[0.0; 2]; 68];
    for (i, q) in p[0..17].iter_mut().enumerate() {
        let a = PI * i as f64 / 16.0;
        *q = [-2.6 * a.cos(), -1.5 + (4.0 + 0.5 * open) * a.sin()];
    }
    for i in 0..5 {
        let x = 0.5 + 0.45 * i as f64;
        let y = -4.0 - 0.3 * (PI * i as f64 / 4.0).sin();
        p[21 - i] = [-x, y];
        p[22 + i] = [x, y];
    }
    for i in 0..4 {
        p[27 + i] = [0.0, -3.2 + 0.5 * i as f64];
    }
    for i in 0..5 {
        p[31 + i] = [-0.6 + 0.3 * i as f64, -1.3 + 0.1 * (PI * i as f64 / 4.0).sin()];
    }
    for (base, cx) in [(36, -1.4), (42, 1.4)] {
        for i in 0..6 {
            let a = PI + 2.0 * PI * i as f64 / 6.0;
            p[base + i] = [cx + 0.5 * a.cos(), -3.0 - 0.2 * a.sin()];
        }
    }
    let (upper_out, lower_out) = (0.35 + 0.25 * open, 0.45 + 0.55 * open);
    for i in 0..=6 {
        let a = PI * i as f64 / 6.0;
        p[48 + i] = [-a.cos(), -upper_out * a.sin()];
    }
    for i in 1..6 {
        let a = PI * i as f64 / 6.0;
        p[54 + i] = [a.cos(), lower_out * a.sin()];
    }
    let (upper_in, lower_in) = (0.05 + 0.25 * open, 0.05 + 0.55 * open);
    for i in 0..=4 {
        let a = PI * i as f64 / 4.0;
        p[60 + i] = [-0.8 * a.cos(), -upper_in * a.sin()];
    }
    for i in 1..4 {
        let a = PI * i as f64 / 4.0;
        p[64 + i] = [0.8 * a.cos(), lower_in * a.sin()];
    }
    p
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    angle: f64,
}

impl Pose {
    fn apply(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            self.cx + self.scale * (c * q[0] - s * q[1]),
            self.cy + self.scale * (s * q[0] + c * q[1]),
        ]
    }

    fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = ((p[0] - self.cx) / self.scale, (p[1] - self.cy) / self.scale);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

fn inside(poly: &[[f64; 2]], q: [f64; 2]) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > q[1]) != (b[1] > q[1]) && q[0] < (b[0] - a[0]) * (q[1] - a[1]) / (b[1] - a[1]) + a[0] {
            hit = !hit;
        }
        j = i;
    }
    hit
}

const SKIN: f64 = 160.0;
const INNER_MOUTH: f64 = 30.0;
const PIXEL_NOISE: f64 = 6.0;
const LANDMARK_NOISE: f64 = 0.02;

/// Renders the lips of `face` (face units) into a frame under `pose`.
fn render(size: usize, pose: &Pose, face: &[[f64; 2]; 68], texture: usize, textures: usize, rng: &mut Rng) -> GrayImage {
    let outer = &face[48..60];
    let inner = &face[60..68];
    let base = 70.0 + 70.0 * texture as f64 / (textures.max(2) - 1) as f64;
    let vertical = texture % 2 == 1;
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut img = GrayImage::filled(size, size, 0);
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let q = pose.invert([x as f64 + ox, y as f64 + oy]);
                acc += if inside(inner, q) {
                    INNER_MOUTH
                } else if inside(outer, q) {
                    let u = if vertical { q[0] } else { q[1] };
                    base + if (2.0 * PI * u / 0.5).sin() >= 0.0 { 25.0 } else { -25.0 }
                } else {
                    SKIN
                };
            }
            let v = acc / 4.0 + noise.sample(rng);
            img.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

/// Deterministic clip `index` of `class`.
pub fn synth_sample(cfg: &SynthConfig, class: usize, index: usize) -> Result<VideoSample> {
    cfg.validate()?;
    if class >= cfg.classes {
        return Err(Error::Label {
            label: class,
            classes: cfg.classes,
        });
    }
    let mut rng = rng::stream(cfg.seed, &format!("synth/{class}/{index}"));
    let c = cfg.classes;
    let t_len = cfg.frames;
    let start = t_len / 5 + rng.random_range(0..=3usize);
    let end = (start + t_len / 2 - 1).min(t_len - 1);
    let span = (start, end);

    let (pixel_traj, texture, textures, landmark_traj) = match cfg.coupling {
        Coupling::VisualOnly => (class, class, c, rng.random_range(0..c)),
        Coupling::GeometricOnly => (rng.random_range(0..c), rng.random_range(0..c), c, class),
        Coupling::Complementary => {
            let (g, v) = cfg.complementary_factors();
            (rng.random_range(0..c), class / g, v, class % g)
        }
    };

    let size = cfg.frame_size as f64;
    let pose = Pose {
        cx: size / 2.0 + rng.random_range(-size / 20.0..=size / 20.0),
        cy: size / 2.0 + rng.random_range(-size / 20.0..=size / 20.0),
        scale: size / 10.0 * rng.random_range(0.9..=1.1),
        angle: rng.random_range(-15.0f64..=15.0).to_radians(),
    };
    let lm_noise = Normal::new(0.0, LANDMARK_NOISE).expect("valid sigma");

    let mut frames = Vec::with_capacity(t_len);
    let mut landmarks = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let frame_pose = Pose {
            cx: pose.cx + rng.random_range(-0.5..=0.5),
            cy: pose.cy + rng.random_range(-0.5..=0.5),
            angle: pose.angle + rng.random_range(-1.0f64..=1.0).to_radians(),
            ..pose
        };
        let pixel_face = face_template(opening(pixel_traj, t, span));
        frames.push(render(cfg.frame_size, &frame_pose, &pixel_face, texture, textures, &mut rng));

        let lm_face = face_template(opening(landmark_traj, t, span));
        let mut pts: Landmarks = [[0.0; 2]; 68];
        for (dst, q) in pts.iter_mut().zip(lm_face.iter()) {
            let noisy = [q[0] + lm_noise.sample(&mut rng), q[1] + lm_noise.sample(&mut rng)];
            let p = frame_pose.apply(noisy);
            *dst = [p[0] as f32, p[1] as f32];
        }
        landmarks.push(pts);
    }
    let sample = VideoSample {
        frames,
        landmarks,
        label: class,
        word_span: span,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes a complete dataset (samples, `classes.txt`, `manifest.tsv` with an
/// 80/10/10 stratified split) under `root`.
pub fn generate_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut manifest = DatasetManifest {
        classes: (0..cfg.classes).map(class_name).collect(),
        records: Vec::new(),
    };
    for class in 0..cfg.classes {
        for i in 0..cfg.per_class {
            let rel = format!("samples/c{class:03}_{i:04}");
            save_sample(&root.join(&rel), &synth_sample(cfg, class, i)?)?;
            manifest.records.push(SampleRecord {
                path: rel,
                class_id: class,
                split: Split::Train,
            });
        }
    }
    if cfg.per_class >= 3 {
        split_dataset(&mut manifest, [0.8, 0.1, 0.1], cfg.seed)?;
    }
    manifest.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(coupling: Coupling) -> SynthConfig {
        SynthConfig {
            frame_size: 32,
            frames: 10,
            ..SynthConfig::new(4, 3, 5, coupling)
        }
    }

    #[test]
    fn class_names_unique() {
        let names: std::collections::HashSet<String> = (0..100).map(class_name).collect();
        assert_eq!(names.len(), 100);
    }

    #[test]
    fn factors() {
        assert_eq!(SynthConfig::new(10, 2, 0, Coupling::Complementary).complementary_factors(), (5, 2));
        assert_eq!(SynthConfig::new(9, 2, 0, Coupling::Complementary).complementary_factors(), (3, 3));
        assert_eq!(SynthConfig::new(7, 2, 0, Coupling::Complementary).complementary_factors(), (7, 1));
    }

    #[test]
    fn template_corners_and_counts() {
        let f = face_template(0.5);
        assert_eq!(f[48], [-1.0, 0.0]);
        assert!((f[54][0] - 1.0).abs() < 1e-12 && f[54][1].abs() < 1e-12);
        assert!(f[57][1] > f[51][1]);
    }

    #[test]
    fn pure_function_of_arguments() {
        let cfg = small(Coupling::Complementary);
        assert_eq!(synth_sample(&cfg, 1, 2).unwrap(), synth_sample(&cfg, 1, 2).unwrap());
        assert_ne!(synth_sample(&cfg, 1, 2).unwrap(), synth_sample(&cfg, 1, 1).unwrap());
    }

    #[test]
    fn trajectories_are_distinct_up_to_a_hundred_classes() {
        let span = (6, 20);
        let curves: Vec<Vec<f64>> = (0..100).map(|k| (0..30).map(|t| opening(k, t, span)).collect()).collect();
        for a in 0..100 {
            for b in a + 1..100 {
                let gap = curves[a].iter().zip(&curves[b]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(gap > 0.01, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn opening_rests_outside_span() {
        assert_eq!(opening(3, 0, (5, 10)), 0.1);
        assert_eq!(opening(3, 11, (5, 10)), 0.1);
        assert!(opening(0, 8, (5, 10)) > 0.5);
    }

    #[test]
    fn pose_round_trip() {
        let pose = Pose {
            cx: 3.0,
            cy: -2.0,
            scale: 1.7,
            angle: 0.4,
        };
        let q = pose.invert(pose.apply([0.3, -1.1]));
        assert!((q[0] - 0.3).abs() < 1e-12 && (q[1] + 1.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_config() {
        assert!(synth_sample(&SynthConfig::new(1, 5, 0, Coupling::VisualOnly), 0, 0).is_err());
    }
}
