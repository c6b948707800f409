//! On-disk word samples, dataset manifests, stratified splits and the
//! synthetic two-modality generator.
//!
//! Dataset root layout:
//!
//! ```text
//! classes.txt                  one class name per line
//! manifest.tsv                 path <TAB> class_id <TAB> split
//! samples/<id>/frame_%04d.pgm  binary PGM (P5, maxval 255)
//! samples/<id>/landmarks.csv   header x0,y0,...,x67,y67 then one row per frame
//! samples/<id>/meta.txt        label=, start_frame=, end_frame=
//! ```

mod pgm;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub use pgm::{read_pgm, write_pgm, GrayImage};
pub use synth::{class_name, generate_synthetic_dataset, synth_sample, Coupling, SynthConfig};

/// Points per face in the 68-point landmark convention.
pub const NUM_LANDMARKS: usize = 68;

/// One frame's 68 landmarks as `(x, y)` pixel coordinates.
pub type Landmarks = [[f32; 2]; NUM_LANDMARKS];

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<GrayImage>,
    pub landmarks: Vec<Landmarks>,
    pub label: usize,
    /// Inclusive `(start_frame, end_frame)` of the spoken word.
    pub word_span: (usize, usize),
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::Integrity("sample has no frames".into()));
        }
        if self.landmarks.len() != t {
            return Err(Error::Integrity(format!(
                "{} landmark rows for {t} frames",
                self.landmarks.len()
            )));
        }
        let (w, h) = (self.frames[0].width, self.frames[0].height);
        if let Some(i) = self.frames.iter().position(|f| f.width != w || f.height != h) {
            return Err(Error::Integrity(format!(
                "frame {i} is {}x{} but frame 0 is {w}x{h}",
                self.frames[i].width, self.frames[i].height
            )));
        }
        let (s, e) = self.word_span;
        if s > e || e >= t {
            return Err(Error::Integrity(format!("word span ({s}, {e}) invalid for {t} frames")));
        }
        if self.landmarks.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite landmark coordinate".into()));
        }
        Ok(())
    }
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.pgm"))
}

pub fn save_sample(dir: &Path, sample: &VideoSample) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in sample.frames.iter().enumerate() {
        write_pgm(&frame_path(dir, t), frame)?;
    }

    let path = dir.join("landmarks.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let header: Vec<String> = (0..NUM_LANDMARKS)
        .flat_map(|i| [format!("x{i}"), format!("y{i}")])
        .collect();
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for row in &sample.landmarks {
        let fields: Vec<String> = row.iter().flatten().map(|v| v.to_string()).collect();
        w.write_record(&fields).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let meta = format!(
        "label={}\nstart_frame={}\nend_frame={}\n",
        sample.label, sample.word_span.0, sample.word_span.1
    );
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_field(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<usize> {
    let v = map
        .get(key)
        .ok_or_else(|| Error::Integrity(format!("{}: missing `{key}`", path.display())))?;
    v.parse()
        .map_err(|_| Error::Parse(format!("{}: `{key}={v}` is not a non-negative integer", path.display())))
}

pub fn load_sample(dir: &Path) -> Result<VideoSample> {
    let meta_path = dir.join("meta.txt");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_key_values(&text)?;
    let label = meta_field(&meta, "label", &meta_path)?;
    let word_span = (
        meta_field(&meta, "start_frame", &meta_path)?,
        meta_field(&meta, "end_frame", &meta_path)?,
    );

    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".pgm")) {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Integrity(format!("{}: bad frame file name `{name}`", dir.display())))?;
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Integrity(format!("{}: no frame_*.pgm files", dir.display())));
    }
    if let Some(gap) = (0..indices.len()).find(|&i| indices[i] != i) {
        return Err(Error::Integrity(format!(
            "{}: frame index {gap} is missing",
            dir.display()
        )));
    }
    let frames = indices
        .iter()
        .map(|&t| read_pgm(&frame_path(dir, t)))
        .collect::<Result<Vec<_>>>()?;

    let path = dir.join("landmarks.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut landmarks = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        if rec.len() != 2 * NUM_LANDMARKS {
            return Err(Error::Integrity(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                row + 1,
                rec.len(),
                2 * NUM_LANDMARKS
            )));
        }
        let mut pts = [[0f32; 2]; NUM_LANDMARKS];
        for (i, field) in rec.iter().enumerate() {
            pts[i / 2][i % 2] = field.trim().parse().map_err(|_| {
                Error::Parse(format!("{}: row {}: `{field}` is not a number", path.display(), row + 1))
            })?;
        }
        landmarks.push(pts);
    }
    let sample = VideoSample {
        frames,
        landmarks,
        label,
        word_span,
    };
    sample.validate().map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", dir.display())),
        other => other,
    })?;
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// Relative to the dataset root.
    pub path: String,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.records.iter().find(|r| r.class_id >= self.classes.len()) {
            return Err(Error::Label {
                label: r.class_id,
                classes: self.classes.len(),
            });
        }
        Ok(())
    }

    /// Reads `classes.txt` and `manifest.tsv` and checks every referenced
    /// sample directory exists.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("classes.txt");
        let classes: Vec<String> = fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();

        let path = root.join("manifest.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "{}:{}: expected 3 tab-separated fields, got {}",
                    path.display(),
                    n + 1,
                    fields.len()
                )));
            }
            let class_id = fields[1].parse().map_err(|_| {
                Error::Parse(format!("{}:{}: bad class id `{}`", path.display(), n + 1, fields[1]))
            })?;
            records.push(SampleRecord {
                path: fields[0].to_string(),
                class_id,
                split: fields[2].parse()?,
            });
        }
        let manifest = DatasetManifest { classes, records };
        manifest.validate()?;
        if let Some(r) = manifest.records.iter().find(|r| !root.join(&r.path).is_dir()) {
            return Err(Error::Integrity(format!(
                "manifest references missing sample `{}`",
                r.path
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("classes.txt");
        let mut text = self.classes.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let mut text = String::from("# path\tclass_id\tsplit\n");
        for r in &self.records {
            text.push_str(&format!("{}\t{}\t{}\n", r.path, r.class_id, r.split));
        }
        let path = root.join("manifest.tsv");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Per-class stratified assignment of split tags. Within each class the
/// records are shuffled with the `split` stream of `seed`, then the first
/// `n - round(n*val) - round(n*test)` become train, the next
/// `round(n*val)` val, and the rest test.
pub fn split_dataset(manifest: &mut DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    manifest.validate()?;
    let mut rng = rng::stream(seed, "split");
    for class in 0..manifest.classes.len() {
        let mut members: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].class_id == class)
            .collect();
        let n = members.len();
        if n < 3 {
            return Err(Error::Split(format!(
                "class {class} (`{}`) has {n} samples; at least 3 are required",
                manifest.classes[class]
            )));
        }
        let n_val = (n as f64 * ratios[1]).round() as usize;
        let n_test = ((n as f64 * ratios[2]).round() as usize).min(n - n_val);
        let n_train = n - n_val - n_test;
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            manifest.records[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(())
}

/// A manifest plus its root directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: DatasetManifest::load(root)?,
        })
    }

    pub fn load(&self, record: &SampleRecord) -> Result<VideoSample> {
        let sample = load_sample(&self.root.join(&record.path))?;
        if sample.label != record.class_id {
            return Err(Error::Integrity(format!(
                "{}: meta label {} disagrees with manifest class {}",
                record.path, sample.label, record.class_id
            )));
        }
        if sample.label >= self.manifest.num_classes() {
            return Err(Error::Label {
                label: sample.label,
                classes: self.manifest.num_classes(),
            });
        }
        Ok(sample)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VideoSample>> {
        self.manifest.records_in(split).map(|r| self.load(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sample(t: usize) -> VideoSample {
        let frames = (0..t)
            .map(|i| GrayImage::new(4, 3, (0..12).map(|p| (p * 20 + i) as u8).collect()).unwrap())
            .collect();
        let mut lm = [[0f32; 2]; NUM_LANDMARKS];
        for (i, p) in lm.iter_mut().enumerate() {
            *p = [i as f32 * 0.37 + 0.1, 1.0 / (i as f32 + 3.0)];
        }
        VideoSample {
            frames,
            landmarks: vec![lm; t],
            label: 2,
            word_span: (1, t - 1),
        }
    }

    #[test]
    fn sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny_sample(30);
        save_sample(dir.path(), &s).unwrap();
        let back = load_sample(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.len(), 30);
    }

    #[test]
    fn short_landmark_csv_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), &tiny_sample(30)).unwrap();
        let path = dir.path().join("landmarks.csv");
        let text = fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().take(30).collect();
        fs::write(&path, kept.join("\n") + "\n").unwrap();
        assert!(matches!(load_sample(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_frame_names_the_gap() {
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), &tiny_sample(5)).unwrap();
        fs::remove_file(dir.path().join("frame_0002.pgm")).unwrap();
        match load_sample(dir.path()) {
            Err(Error::Integrity(m)) => assert!(m.contains("frame index 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_span_rejected() {
        let mut s = tiny_sample(4);
        s.word_span = (2, 4);
        assert!(s.validate().is_err());
        s.word_span = (3, 2);
        assert!(s.validate().is_err());
    }

    fn manifest(per_class: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                records.push(SampleRecord {
                    path: format!("samples/{c}_{i}"),
                    class_id: c,
                    split: Split::Train,
                });
            }
        }
        DatasetManifest {
            classes: (0..per_class.len()).map(|c| format!("w{c}")).collect(),
            records,
        }
    }

    fn counts(m: &DatasetManifest, class: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for r in m.records.iter().filter(|r| r.class_id == class) {
            c[r.split as usize] += 1;
        }
        c
    }

    #[test]
    fn split_counts_per_class() {
        let mut m = manifest(&[200, 200]);
        split_dataset(&mut m, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(counts(&m, 0), [160, 20, 20]);
        assert_eq!(counts(&m, 1), [160, 20, 20]);

        let mut all_train = manifest(&[5]);
        split_dataset(&mut all_train, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(counts(&all_train, 0), [5, 0, 0]);
    }

    #[test]
    fn split_seeds_permute_but_keep_counts() {
        let mut a = manifest(&[20, 20, 20]);
        let mut b = a.clone();
        split_dataset(&mut a, [0.8, 0.1, 0.1], 1).unwrap();
        split_dataset(&mut b, [0.8, 0.1, 0.1], 2).unwrap();
        assert_ne!(a, b);
        for c in 0..3 {
            assert_eq!(counts(&a, c), counts(&b, c));
        }
        let mut again = manifest(&[20, 20, 20]);
        split_dataset(&mut again, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn tiny_class_is_split_error() {
        let mut m = manifest(&[5, 2]);
        assert!(matches!(split_dataset(&mut m, [0.8, 0.1, 0.1], 0), Err(Error::Split(_))));
    }

    #[test]
    fn manifest_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&[3, 3]);
        for r in &m.records {
            fs::create_dir_all(dir.path().join(&r.path)).unwrap();
        }
        m.save(dir.path()).unwrap();
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
        fs::remove_dir(dir.path().join("samples/1_2")).unwrap();
        assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn key_values_skip_comments() {
        let m = parse_key_values("# c\nlabel = 3\n\nend_frame=9\n").unwrap();
        assert_eq!(m["label"], "3");
        assert_eq!(m["end_frame"], "9");
        assert!(parse_key_values("oops").is_err());
    }
}
