//! Landmark-driven mouth alignment, cropping, normalization and landmark
//! subset selection.
//!
//! Pixel `(x, y)` of an image is sampled at the continuous coordinate
//! `(x, y)`. An aligned canvas of side `S` places the mouth centroid at
//! `(S/2, S/2)` with the mouth corners `S/2` pixels apart on a horizontal line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::dataio::{parse_key_values, GrayImage, Landmarks, VideoSample, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MOUTH: std::ops::Range<usize> = 48..68;
const LEFT_CORNER: usize = 48;
const RIGHT_CORNER: usize = 54;

/// `p' = A p + t` with `m = [[a00, a01, t0], [a10, a11, t1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    /// Rotation by `angle` (radians, counter-clockwise in x-right/y-down
    /// image axes means clockwise on screen), uniform `scale`, then `shift`.
    pub fn similarity(scale: f64, angle: f64, shift: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        AffineTransform {
            m: [[scale * c, -scale * s, shift[0]], [scale * s, scale * c, shift[1]]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            row[2] += a[i][2];
        }
        AffineTransform { m }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::Alignment("singular transform".into()));
        }
        let m = &self.m;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(AffineTransform {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        })
    }

    pub fn scale(&self) -> f64 {
        self.determinant().abs().sqrt()
    }

    pub fn rotation(&self) -> f64 {
        self.m[1][0].atan2(self.m[0][0])
    }

    pub fn shift(&self) -> [f64; 2] {
        [self.m[0][2], self.m[1][2]]
    }

    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn point(p: [f32; 2]) -> [f64; 2] {
    [f64::from(p[0]), f64::from(p[1])]
}

/// Similarity taking the mouth centroid to the canvas centre, the mouth
/// corners to a horizontal segment of length `canvas / 2`.
pub fn estimate_alignment(landmarks: &Landmarks, canvas: usize) -> Result<AffineTransform> {
    if landmarks.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Alignment("non-finite landmark".into()));
    }
    let mut centroid = [0.0; 2];
    for &p in &landmarks[MOUTH] {
        centroid[0] += f64::from(p[0]);
        centroid[1] += f64::from(p[1]);
    }
    let n = MOUTH.len() as f64;
    centroid = [centroid[0] / n, centroid[1] / n];
    let (l, r) = (point(landmarks[LEFT_CORNER]), point(landmarks[RIGHT_CORNER]));
    let v = [r[0] - l[0], r[1] - l[1]];
    let dist = v[0].hypot(v[1]);
    if dist < 1e-9 {
        return Err(Error::Alignment("mouth corners coincide".into()));
    }
    let half = canvas as f64 / 2.0;
    let rot = AffineTransform::similarity(half / dist, -v[1].atan2(v[0]), [0.0, 0.0]);
    let moved = rot.apply(centroid);
    Ok(AffineTransform {
        m: [
            [rot.m[0][0], rot.m[0][1], half - moved[0]],
            [rot.m[1][0], rot.m[1][1], half - moved[1]],
        ],
    })
}

/// Bilinear sample with zeros outside the image.
fn bilinear(frame: &GrayImage, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= frame.width as i64 || yi >= frame.height as i64 {
            0.0
        } else {
            f64::from(frame.get(xi as usize, yi as usize))
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `frame` onto a `canvas x canvas` patch: patch pixel `q` reads
/// the source at `transform^-1 (q)`.
pub fn crop_mouth(frame: &GrayImage, transform: &AffineTransform, canvas: usize) -> Result<GrayImage> {
    let inv = transform.inverse()?;
    let mut out = GrayImage::filled(canvas, canvas, 0);
    for y in 0..canvas {
        for x in 0..canvas {
            let src = inv.apply([x as f64, y as f64]);
            let v = bilinear(frame, src[0], src[1]);
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Dataset-level grayscale statistics in `[0, 1]` units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std >= 1e-6) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Config(format!("normalization std {std} (mean {mean}) unusable")));
        }
        Ok(NormStats { mean, std })
    }

    /// Mean and population standard deviation over every pixel.
    pub fn compute<'a>(patches: impl IntoIterator<Item = &'a GrayImage>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0u64, 0.0f64, 0.0f64);
        for p in patches {
            for &v in &p.pixels {
                let x = f64::from(v) / 255.0;
                n += 1;
                sum += x;
                sq += x * x;
            }
        }
        if n == 0 {
            return Err(Error::Config("no pixels to compute statistics from".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        NormStats::new(mean, var.sqrt())
    }

    pub fn normalize(&self, patch: &GrayImage) -> Vec<f32> {
        let scale = 1.0 / (255.0 * self.std);
        let shift = self.mean / self.std;
        patch
            .pixels
            .iter()
            .map(|&v| (f64::from(v) * scale - shift) as f32)
            .collect()
    }

    pub fn to_text(&self) -> String {
        format!("mean={}\nstd={}\n", self.mean, self.std)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("stats: missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Parse(format!("stats: `{k}` is not a number")))
        };
        NormStats::new(get("mean")?, get("std")?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Train,
    Eval,
}

/// Top-left corner of a `crop` window inside a `canvas` patch: centred in
/// eval mode, uniform over all positions in train mode.
pub fn crop_offset(mode: CropMode, canvas: usize, crop: usize, rng: &mut Rng) -> (usize, usize) {
    let slack = canvas - crop;
    match mode {
        CropMode::Eval => (slack / 2, slack / 2),
        CropMode::Train => (rng.random_range(0..=slack), rng.random_range(0..=slack)),
    }
}

/// Maps landmarks into patch coordinates: `A p + t - offset`.
pub fn transform_landmarks(points: &[[f32; 2]], transform: &AffineTransform, offset: (usize, usize)) -> Vec<[f32; 2]> {
    points
        .iter()
        .map(|&p| {
            let q = transform.apply(point(p));
            [(q[0] - offset.0 as f64) as f32, (q[1] - offset.1 as f64) as f32]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LandmarkSubset {
    Mouth20,
    Lower33,
    Full68,
}

impl LandmarkSubset {
    pub fn indices(self) -> Vec<usize> {
        match self {
            LandmarkSubset::Mouth20 => MOUTH.collect(),
            LandmarkSubset::Lower33 => (3..16).chain(MOUTH).collect(),
            LandmarkSubset::Full68 => (0..NUM_LANDMARKS).collect(),
        }
    }

    pub fn len(self) -> usize {
        match self {
            LandmarkSubset::Mouth20 => 20,
            LandmarkSubset::Lower33 => 33,
            LandmarkSubset::Full68 => 68,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl fmt::Display for LandmarkSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.len())
    }
}

impl FromStr for LandmarkSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "20" | "mouth20" => Ok(LandmarkSubset::Mouth20),
            "33" | "lower33" => Ok(LandmarkSubset::Lower33),
            "68" | "full68" => Ok(LandmarkSubset::Full68),
            other => Err(Error::Config(format!("unknown landmark subset `{other}` (expected 20, 33 or 68)"))),
        }
    }
}

pub fn select_subset(points: &[[f32; 2]], subset: LandmarkSubset) -> Vec<[f32; 2]> {
    subset.indices().into_iter().map(|i| points[i]).collect()
}

/// A sample after per-frame alignment onto the canvas, before cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub patches: Vec<GrayImage>,
    /// All 68 landmarks per frame in canvas coordinates.
    pub landmarks: Vec<Landmarks>,
    pub label: usize,
    pub word_span: (usize, usize),
}

impl AlignedSample {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn align_sample(sample: &VideoSample, canvas: usize) -> Result<AlignedSample> {
    let mut patches = Vec::with_capacity(sample.len());
    let mut landmarks = Vec::with_capacity(sample.len());
    for (t, (frame, lm)) in sample.frames.iter().zip(&sample.landmarks).enumerate() {
        let tr = estimate_alignment(lm, canvas).map_err(|e| match e {
            Error::Alignment(m) => Error::Alignment(format!("frame {t}: {m}")),
            other => other,
        })?;
        patches.push(crop_mouth(frame, &tr, canvas)?);
        let moved = transform_landmarks(lm, &tr, (0, 0));
        let mut out = [[0f32; 2]; NUM_LANDMARKS];
        out.copy_from_slice(&moved);
        landmarks.push(out);
    }
    Ok(AlignedSample {
        patches,
        landmarks,
        label: sample.label,
        word_span: sample.word_span,
    })
}

/// Network-ready clip: normalized `crop x crop` frames and subset landmarks
/// in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub crop: usize,
    /// `T * crop * crop`, frame-major.
    pub frames: Vec<f32>,
    /// `T * N` points, frame-major.
    pub landmarks: Vec<[f32; 2]>,
    pub nodes: usize,
    pub label: usize,
    pub word_span: (usize, usize),
}

impl Clip {
    pub fn len(&self) -> usize {
        self.landmarks.len() / self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// Contiguous frames `[start, start + len)`; the word span is clipped
    /// and re-based.
    pub fn window(&self, start: usize, len: usize) -> Clip {
        let px = self.crop * self.crop;
        let (s, e) = self.word_span;
        let last = start + len - 1;
        Clip {
            crop: self.crop,
            frames: self.frames[start * px..(start + len) * px].to_vec(),
            landmarks: self.landmarks[start * self.nodes..(start + len) * self.nodes].to_vec(),
            nodes: self.nodes,
            label: self.label,
            word_span: (s.clamp(start, last) - start, e.clamp(start, last) - start),
        }
    }
}

/// Crop, normalize and subset-select one aligned sample. The crop offset is
/// shared by every frame of the clip.
pub fn make_clip(
    aligned: &AlignedSample,
    crop: usize,
    offset: (usize, usize),
    stats: &NormStats,
    subset: LandmarkSubset,
) -> Result<Clip> {
    let mut frames = Vec::with_capacity(aligned.len() * crop * crop);
    let mut landmarks = Vec::with_capacity(aligned.len() * subset.len());
    let identity = AffineTransform::IDENTITY;
    for (patch, lm) in aligned.patches.iter().zip(&aligned.landmarks) {
        frames.extend(stats.normalize(&patch.crop(offset.0, offset.1, crop, crop)?));
        landmarks.extend(transform_landmarks(&select_subset(lm, subset), &identity, offset));
    }
    Ok(Clip {
        crop,
        frames,
        landmarks,
        nodes: subset.len(),
        label: aligned.label,
        word_span: aligned.word_span,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn canonical() -> Landmarks {
        let mut lm = [[0f32; 2]; NUM_LANDMARKS];
        for (i, p) in lm.iter_mut().enumerate() {
            *p = [(i as f32 * 7.3) % 90.0, (i as f32 * 3.1) % 90.0];
        }
        // point-symmetric mouth around (48, 48), corners 48 apart
        lm[48] = [24.0, 48.0];
        lm[54] = [72.0, 48.0];
        for (a, b) in (49..54).zip(55..60).chain((60..64).zip(64..68)) {
            let q = [30.0 + (a as f32 * 5.7) % 36.0, 40.0 + (a as f32 * 2.3) % 16.0];
            lm[a] = q;
            lm[b] = [96.0 - q[0], 96.0 - q[1]];
        }
        lm
    }

    #[test]
    fn canonical_landmarks_give_identity() {
        let lm = canonical();
        let c: [f64; 2] = lm[48..68]
            .iter()
            .fold([0.0, 0.0], |a, p| [a[0] + f64::from(p[0]) / 20.0, a[1] + f64::from(p[1]) / 20.0]);
        assert!((c[0] - 48.0).abs() < 1e-5 && (c[1] - 48.0).abs() < 1e-5, "{c:?}");
        let tr = estimate_alignment(&lm, 96).unwrap();
        assert!(tr.max_abs_diff(&AffineTransform::IDENTITY) < 1e-5, "{tr:?}");
    }

    #[test]
    fn degenerate_corners_fail() {
        let mut lm = canonical();
        lm[54] = lm[48];
        assert!(matches!(estimate_alignment(&lm, 96), Err(Error::Alignment(_))));
    }

    #[test]
    fn compose_and_inverse() {
        let a = AffineTransform::similarity(1.3, 0.4, [2.0, -1.0]);
        let id = a.compose(&a.inverse().unwrap());
        assert!(id.max_abs_diff(&AffineTransform::IDENTITY) < 1e-12);
        assert!((a.rotation() - 0.4).abs() < 1e-12 && (a.scale() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn identity_crop_copies_image() {
        let img = GrayImage::new(96, 96, (0..96 * 96).map(|i| (i * 31 % 251) as u8).collect()).unwrap();
        assert_eq!(crop_mouth(&img, &AffineTransform::IDENTITY, 96).unwrap(), img);
        let zero = GrayImage::filled(96, 96, 0);
        assert_eq!(crop_mouth(&zero, &AffineTransform::similarity(1.7, 0.3, [5.0, 2.0]), 96).unwrap(), zero);
    }

    #[test]
    fn normalize_constants() {
        let s = NormStats::new(0.4161, 0.1688).unwrap();
        let mid = GrayImage::filled(2, 2, 128);
        let v = NormStats::new(128.0 / 255.0, 0.2).unwrap().normalize(&mid);
        assert!(v.iter().all(|x| x.abs() < 1e-6));
        let a = s.normalize(&GrayImage::filled(1, 1, 200))[0];
        let b = s.normalize(&GrayImage::filled(1, 1, 50))[0];
        assert!((f64::from(a - b) - 150.0 / (255.0 * 0.1688)).abs() < 1e-4);
        assert!(matches!(NormStats::new(0.5, 1e-7), Err(Error::Config(_))));
    }

    #[test]
    fn stats_text_round_trip() {
        let s = NormStats::new(0.25, 0.125).unwrap();
        assert_eq!(NormStats::from_text(&s.to_text()).unwrap(), s);
        assert!(NormStats::from_text("mean=0.5\nstd=0\n").is_err());
    }

    #[test]
    fn eval_offset_is_centred() {
        let mut r = rng::stream(0, "t");
        for _ in 0..10 {
            assert_eq!(crop_offset(CropMode::Eval, 96, 88, &mut r), (4, 4));
        }
    }

    #[test]
    fn subset_sizes() {
        for s in [LandmarkSubset::Mouth20, LandmarkSubset::Lower33, LandmarkSubset::Full68] {
            let idx = s.indices();
            assert_eq!(idx.len(), s.len());
            assert!(idx.windows(2).all(|w| w[0] < w[1]) && idx[idx.len() - 1] < 68);
        }
        let lm = canonical();
        assert_eq!(select_subset(&lm, LandmarkSubset::Full68), lm.to_vec());
        assert_eq!("33".parse::<LandmarkSubset>().unwrap(), LandmarkSubset::Lower33);
    }

    #[test]
    fn window_rebases_span() {
        let clip = Clip {
            crop: 1,
            frames: (0..10).map(|v| v as f32).collect(),
            landmarks: (0..10).map(|v| [v as f32, 0.0]).collect(),
            nodes: 1,
            label: 0,
            word_span: (3, 6),
        };
        let w = clip.window(2, 6);
        assert_eq!(w.frames, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(w.word_span, (1, 4));
        assert_eq!(w.len(), 6);
    }
}
