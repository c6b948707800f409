use std::collections::BTreeSet;
use std::fs;

use lipfuse::dataio::{
    generate_synthetic_dataset, load_sample, save_sample, split_dataset, synth_sample, Coupling, Dataset,
    DatasetManifest, SampleRecord, Split, SynthConfig, VideoSample,
};
use lipfuse::preprocess::{align_sample, crop_offset, estimate_alignment, AffineTransform, CropMode, NormStats};
use lipfuse::rng;
use lipfuse::Error;
use proptest::prelude::*;

fn small(coupling: Coupling) -> SynthConfig {
    let mut cfg = SynthConfig::new(4, 5, 3, coupling);
    cfg.frames = 8;
    cfg.frame_size = 48;
    cfg
}

#[test]
fn synthetic_generation_is_a_pure_function() {
    let cfg = small(Coupling::Complementary);
    assert_eq!(synth_sample(&cfg, 2, 3).unwrap(), synth_sample(&cfg, 2, 3).unwrap());
    assert_ne!(synth_sample(&cfg, 2, 3).unwrap(), synth_sample(&cfg, 2, 4).unwrap());
    let mut other = cfg.clone();
    other.seed = 4;
    assert_ne!(synth_sample(&cfg, 2, 3).unwrap(), synth_sample(&other, 2, 3).unwrap());
}

#[test]
fn synthetic_dataset_on_disk_is_reproducible() {
    let cfg = small(Coupling::VisualOnly);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic_dataset(a.path(), &cfg).unwrap();
    let mb = generate_synthetic_dataset(b.path(), &cfg).unwrap();
    assert_eq!(ma, mb);
    for rec in &ma.records {
        for f in ["landmarks.csv", "frame_0005.pgm", "meta.txt"] {
            let x = fs::read(a.path().join(&rec.path).join(f)).unwrap();
            let y = fs::read(b.path().join(&rec.path).join(f)).unwrap();
            assert_eq!(x, y, "{} {f}", rec.path);
        }
    }
    let ds = Dataset::open(a.path()).unwrap();
    assert_eq!(ds.manifest, ma);
    let sample = ds.load(&ma.records[7]).unwrap();
    assert_eq!(sample, synth_sample(&cfg, ma.records[7].class_id, 2).unwrap());
}

#[test]
fn sample_round_trip_and_integrity_errors() {
    let cfg = small(Coupling::GeometricOnly);
    let s = synth_sample(&cfg, 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sample(dir.path(), &s).unwrap();
    let back = load_sample(dir.path()).unwrap();
    assert_eq!(back.frames, s.frames);
    assert_eq!(back.word_span, s.word_span);
    assert_eq!(back.label, s.label);
    for (x, y) in back.landmarks.iter().flatten().zip(s.landmarks.iter().flatten()) {
        assert_eq!(x, y);
    }

    fs::remove_file(dir.path().join("frame_0003.pgm")).unwrap();
    match load_sample(dir.path()) {
        Err(Error::Integrity(m)) => assert!(m.contains("frame index 3"), "{m}"),
        other => panic!("{other:?}"),
    }

    save_sample(dir.path(), &s).unwrap();
    let csv = fs::read_to_string(dir.path().join("landmarks.csv")).unwrap();
    let trimmed: Vec<&str> = csv.lines().take(csv.lines().count() - 1).collect();
    fs::write(dir.path().join("landmarks.csv"), trimmed.join("\n") + "\n").unwrap();
    assert!(matches!(load_sample(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn invalid_samples_are_rejected() {
    let cfg = small(Coupling::VisualOnly);
    let mut s: VideoSample = synth_sample(&cfg, 0, 0).unwrap();
    s.word_span = (5, 20);
    assert!(matches!(s.validate(), Err(Error::Integrity(_))));
    let mut s = synth_sample(&cfg, 0, 0).unwrap();
    s.landmarks.pop();
    assert!(matches!(s.validate(), Err(Error::Integrity(_))));
}

fn manifest(classes: usize, per_class: usize) -> DatasetManifest {
    DatasetManifest {
        classes: (0..classes).map(|c| format!("w{c}")).collect(),
        records: (0..classes * per_class)
            .map(|i| SampleRecord {
                path: format!("s{i}"),
                class_id: i % classes,
                split: Split::Train,
            })
            .collect(),
    }
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let mut m = manifest(6, 20);
    split_dataset(&mut m, [0.8, 0.1, 0.1], 11).unwrap();
    for c in 0..6 {
        let count = |s| m.records.iter().filter(|r| r.class_id == c && r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (16, 2, 2));
    }
    let paths: BTreeSet<&str> = m.records.iter().map(|r| r.path.as_str()).collect();
    assert_eq!(paths.len(), m.records.len());

    let mut again = manifest(6, 20);
    split_dataset(&mut again, [0.8, 0.1, 0.1], 11).unwrap();
    assert_eq!(again, m);
    let mut other = manifest(6, 20);
    split_dataset(&mut other, [0.8, 0.1, 0.1], 12).unwrap();
    assert_ne!(other, m);

    let mut tiny = manifest(3, 2);
    assert!(matches!(split_dataset(&mut tiny, [0.8, 0.1, 0.1], 0), Err(Error::Split(_))));
}

/// Nearest-centroid accuracy over flattened aligned frames or landmarks.
fn nearest_centroid(coupling: Coupling, use_pixels: bool) -> f64 {
    let mut cfg = SynthConfig::new(10, 12, 7, coupling);
    cfg.frame_size = 48;
    let features = |c: usize, i: usize| -> Vec<f64> {
        let s = synth_sample(&cfg, c, i).unwrap();
        let a = align_sample(&s, 24).unwrap();
        if use_pixels {
            a.patches.iter().flat_map(|p| p.pixels.iter().map(|&v| f64::from(v))).collect()
        } else {
            a.landmarks.iter().flat_map(|f| f[48..68].iter().flat_map(|p| [f64::from(p[0]), f64::from(p[1])])).collect()
        }
    };
    let train = 8;
    let centroids: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            let rows: Vec<Vec<f64>> = (0..train).map(|i| features(c, i)).collect();
            (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / train as f64).collect()
        })
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for c in 0..cfg.classes {
        for i in train..cfg.per_class {
            let f = features(c, i);
            let dist = |m: &Vec<f64>| m.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..cfg.classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            hits += usize::from(pred == c);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn complementary_coupling_starves_a_pixel_only_oracle() {
    let visual = nearest_centroid(Coupling::VisualOnly, true);
    let complementary = nearest_centroid(Coupling::Complementary, true);
    assert!(complementary < visual, "complementary {complementary} vs visual_only {visual}");
}

#[test]
fn landmark_oracle_follows_the_coupling() {
    let chance_band = 0.1 + 3.0 * (0.1f64 * 0.9 / 40.0).sqrt();
    let visual_only = nearest_centroid(Coupling::VisualOnly, false);
    assert!(visual_only < chance_band, "{visual_only}");
    let geometric_only = nearest_centroid(Coupling::GeometricOnly, false);
    assert!(geometric_only > 0.5, "{geometric_only}");
}

#[test]
fn train_crop_offsets_are_uniform() {
    let (canvas, crop) = (96, 88);
    let mut r = rng::stream(5, "crop-test");
    let cells = (canvas - crop + 1) * (canvas - crop + 1);
    let draws = cells * 1000;
    let mut counts = vec![0usize; cells];
    for _ in 0..draws {
        let (x, y) = crop_offset(CropMode::Train, canvas, crop, &mut r);
        counts[y * (canvas - crop + 1) + x] += 1;
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
    // 80 degrees of freedom, p = 0.001
    assert!(chi2 < 124.8, "chi2 {chi2}");
    assert_eq!(crop_offset(CropMode::Eval, canvas, crop, &mut r), (4, 4));
}

#[test]
fn stats_are_training_split_constants() {
    let cfg = small(Coupling::VisualOnly);
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), &cfg).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let train: Vec<_> = ds
        .load_split(Split::Train)
        .unwrap()
        .iter()
        .map(|s| align_sample(s, 28).unwrap())
        .collect();
    let stats = NormStats::compute(train.iter().flat_map(|a| a.patches.iter())).unwrap();
    let px: Vec<f64> = train
        .iter()
        .flat_map(|a| a.patches.iter().flat_map(|p| p.pixels.iter().map(|&v| f64::from(v) / 255.0)))
        .collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    assert!((stats.mean - mean).abs() < 1e-9);
    assert!(matches!(NormStats::new(0.5, 0.0), Err(Error::Config(_))));
}

fn face(seed: u64) -> [[f32; 2]; 68] {
    let cfg = small(Coupling::VisualOnly);
    synth_sample(&cfg, (seed % 4) as usize, (seed % 5) as usize).unwrap().landmarks[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_is_equivariant_to_similarities(
        seed in 0u64..20,
        angle in -0.6f64..0.6,
        scale in 0.5f64..2.0,
        dx in -20.0f64..20.0,
        dy in -20.0f64..20.0,
    ) {
        let lm = face(seed);
        let base = estimate_alignment(&lm, 96).unwrap();
        let s = AffineTransform::similarity(scale, angle, [dx, dy]);
        let mut moved = lm;
        for p in moved.iter_mut() {
            let q = s.apply([f64::from(p[0]), f64::from(p[1])]);
            *p = [q[0] as f32, q[1] as f32];
        }
        let after = estimate_alignment(&moved, 96).unwrap();
        // aligning the moved face undoes the move
        let undone = after.compose(&s);
        prop_assert!(undone.max_abs_diff(&base) < 1e-3, "{:?} vs {:?}", undone, base);
    }
}
