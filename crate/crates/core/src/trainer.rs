//! Optimizer, schedule, augmentation, training loop, evaluation and
//! ablation grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::{FusionStrategy, Modality, ModelConfig};
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{probabilities, LipModel};
use crate::preprocess::{align_sample, crop_offset, make_clip, AlignedSample, Clip, CropMode, LandmarkSubset, NormStats};
use crate::rng::{self, Rng};
use crate::tensor::{lit, save_checkpoint, Float, Gradients, Graph, Mode, ParamStore};

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `θ ← θ - lr * m̂ / (sqrt(v̂) + eps) - lr * wd * θ` for every learnable
    /// tensor; tensors without a gradient see a zero gradient.
    pub fn step<F: Float>(&mut self, ps: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        let ids: Vec<_> = ps.learnable().collect();
        for &id in &ids {
            if let Some(g) = grads.param(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!("non-finite gradient for `{}`", ps.name(id))));
                }
            }
        }
        if self.m.is_empty() {
            self.m = ids.iter().map(|&id| vec![0.0; ps.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != ids.len() {
            return Err(Error::State("optimizer state does not match the parameter set".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (slot, &id) in ids.iter().enumerate() {
            let grad = grads.param(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let data = ps.get_mut(id).data_mut();
            for i in 0..data.len() {
                let g = grad.map_or(0.0, |g| g[i].to_f64().unwrap_or(f64::NAN));
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let theta = data[i].to_f64().unwrap_or(f64::NAN);
                let next = theta - lr * mh / (vh.sqrt() + self.eps) - lr * self.weight_decay * theta;
                data[i] = lit(next);
            }
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * epoch / t_max)) / 2`, zero past `t_max`.
pub fn cosine_lr(epoch: usize, lr0: f64, t_max: usize) -> f64 {
    if epoch > t_max {
        log::warn!("epoch {epoch} beyond cosine horizon {t_max}; learning rate clamped to 0");
        return 0.0;
    }
    if t_max == 0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / t_max as f64).cos()) / 2.0
}

/// Random contiguous window of length uniform in `[ceil(min_ratio * T), T]`
/// that still covers the word span (growing the minimum if needed).
pub fn variable_length_augment(clip: &Clip, rng: &mut Rng, min_ratio: f64) -> Clip {
    let t = clip.len();
    let (s, e) = clip.word_span;
    let min_len = ((min_ratio * t as f64).ceil() as usize).clamp(1, t).max(e - s + 1);
    let len = rng.random_range(min_len..=t);
    let lo = (e + 1).saturating_sub(len);
    let hi = s.min(t - len);
    let start = rng.random_range(lo..=hi);
    clip.window(start, len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine horizon; defaults to `epochs`.
    pub t_max: Option<usize>,
    pub seed: u64,
    pub min_ratio: f64,
    pub augment: bool,
    /// Stop once an epoch's train accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    /// Put measured seconds in the metrics CSV (otherwise 0).
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            batch_size: 32,
            epochs: 200,
            lr: 3e-4,
            weight_decay: 0.01,
            t_max: None,
            seed: 0,
            min_ratio: 0.4,
            augment: true,
            stop_at_train_acc: None,
            record_wall_time: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.t_max.unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= 1.0) {
            return fail(format!("min_ratio {} outside (0, 1]", self.min_ratio));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail(format!("lr {} / weight decay {} invalid", self.lr, self.weight_decay));
        }
        Ok(())
    }

    /// Applies one `key=value` override; model keys are forwarded.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "t_max" => self.t_max = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "min_ratio" => self.min_ratio = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "stop_at_train_acc" => self.stop_at_train_acc = Some(parse(key, value)?),
            "record_wall_time" => self.record_wall_time = parse(key, value)?,
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let _ = write!(
            s,
            "batch_size={}\nepochs={}\nlr={}\nweight_decay={}\nseed={}\nmin_ratio={}\naugment={}\n",
            self.batch_size,
            self.epochs,
            self.lr,
            self.weight_decay,
            self.seed,
            self.min_ratio,
            self.augment
        );
        if let Some(t) = self.t_max {
            let _ = writeln!(s, "t_max={t}");
        }
        if let Some(a) = self.stop_at_train_acc {
            let _ = writeln!(s, "stop_at_train_acc={a}");
        }
        let _ = writeln!(s, "record_wall_time={}", self.record_wall_time);
        s
    }
}

/// A trained network restored from a checkpoint and its config echo.
pub struct Restored<F> {
    pub config: TrainConfig,
    pub stats: NormStats,
    pub model: LipModel,
    pub params: ParamStore<F>,
}

/// Rebuilds the model described by a checkpoint's config echo and loads its
/// weights.
pub fn restore<F: Float>(path: &Path) -> Result<Restored<F>> {
    let ckpt = crate::tensor::load_checkpoint(path)?;
    let text = ckpt
        .config
        .as_deref()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no config section", path.display())))?;
    let kv = crate::dataio::parse_key_values(text)?;
    let mut config = TrainConfig::new(ModelConfig::paper(2));
    for (k, v) in &kv {
        if k != "mean" && k != "std" && !config.set(k, v)? {
            return Err(Error::Checkpoint(format!("unknown config key `{k}` in {}", path.display())));
        }
    }
    config.validate()?;
    let stats = NormStats::from_text(text)?;
    let mut params = ParamStore::<F>::new(config.seed);
    let model = LipModel::new(config.model.clone(), &mut params)?;
    ckpt.apply(&mut params)?;
    Ok(Restored {
        config,
        stats,
        model,
        params,
    })
}

/// Aligned samples of every split, ready for per-epoch cropping.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub classes: Vec<String>,
    pub stats: NormStats,
    pub canvas: usize,
    pub train: Vec<AlignedSample>,
    pub val: Vec<AlignedSample>,
    pub test: Vec<AlignedSample>,
}

impl PreparedData {
    /// Aligns every sample. `stats` defaults to statistics of the aligned
    /// training canvases.
    pub fn from_dataset(ds: &Dataset, canvas: usize, stats: Option<NormStats>) -> Result<Self> {
        let align = |split| -> Result<Vec<AlignedSample>> {
            ds.manifest
                .records_in(split)
                .map(|r| align_sample(&ds.load(r)?, canvas))
                .collect()
        };
        let train = align(Split::Train)?;
        let stats = match stats {
            Some(s) => s,
            None => NormStats::compute(train.iter().flat_map(|s| s.patches.iter()))?,
        };
        Ok(PreparedData {
            classes: ds.manifest.classes.clone(),
            stats,
            canvas,
            train,
            val: align(Split::Val)?,
            test: align(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[AlignedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "lr", "train_loss", "train_acc", "val_acc", "wall_seconds"];

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.val_acc.to_string(),
            r.wall_seconds.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome<F> {
    pub model: LipModel,
    /// Parameters of the best-validation epoch.
    pub params: ParamStore<F>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Evaluation-mode clip: centred crop, no augmentation.
pub fn eval_clip(sample: &AlignedSample, cfg: &ModelConfig, stats: &NormStats) -> Result<Clip> {
    let off = (cfg.canvas - cfg.crop) / 2;
    make_clip(sample, cfg.crop, (off, off), stats, cfg.subset)
}

/// Predicted class per sample, evaluated in batches.
pub fn predict<F: Float>(
    model: &LipModel,
    ps: &mut ParamStore<F>,
    clips: &[Clip],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let batch = model.batch::<F>(&refs)?;
        let mut g = Graph::new(Mode::Eval);
        let trace = model.forward(&mut g, ps, &batch)?;
        out.extend(probabilities(g.value(trace.logits), model.config.classes));
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn accuracy<F: Float>(model: &LipModel, ps: &mut ParamStore<F>, data: &[AlignedSample], stats: &NormStats, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let clips = data
        .iter()
        .map(|s| eval_clip(s, &model.config, stats))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict(model, ps, &clips, batch)?;
    let hits = probs.iter().zip(&clips).filter(|(p, c)| argmax(p) == c.label).count();
    Ok(hits as f64 / clips.len() as f64)
}

/// Trains from scratch. With `out`, writes `metrics.csv` after every epoch
/// and `best.ckpt` (with a config echo) whenever validation accuracy
/// improves; on divergence writes `last_good.ckpt` and fails.
pub fn train<F: Float>(cfg: &TrainConfig, data: &PreparedData, out: Option<&Path>) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let mcfg = &cfg.model;
    if data.classes.len() != mcfg.classes {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            mcfg.classes,
            data.classes.len()
        )));
    }
    if data.canvas != mcfg.canvas {
        return Err(Error::Config(format!(
            "data aligned to a {} canvas but the model expects {}",
            data.canvas, mcfg.canvas
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let echo = format!("{}{}", cfg.to_text(), data.stats.to_text());
    let mut ps = ParamStore::<F>::new(cfg.seed);
    let model = LipModel::new(mcfg.clone(), &mut ps)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order_rng = rng::stream(cfg.seed, "shuffle");
    let mut aug_rng = rng::stream(cfg.seed, "augment");
    let mut dropout_seeds = rng::stream(cfg.seed, "dropout");

    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<F>)> = None;
    let started = Instant::now();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr, cfg.horizon());
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let clips = idx
                .iter()
                .map(|&i| {
                    let off = crop_offset(CropMode::Train, mcfg.canvas, mcfg.crop, &mut aug_rng);
                    let clip = make_clip(&data.train[i], mcfg.crop, off, &data.stats, mcfg.subset)?;
                    Ok(if cfg.augment {
                        variable_length_augment(&clip, &mut aug_rng, cfg.min_ratio)
                    } else {
                        clip
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Clip> = clips.iter().collect();
            let batch = model.batch::<F>(&refs)?;
            let mut g = Graph::with_seed(Mode::Train, dropout_seeds.random());
            let trace = model.forward(&mut g, &mut ps, &batch)?;
            let loss = g.cross_entropy(trace.logits, &batch.labels)?;
            let lv = g.value(loss)[0].to_f64().unwrap_or(f64::NAN);
            let probs = probabilities(g.value(trace.logits), mcfg.classes);
            let step = if lv.is_finite() {
                g.backward(loss).and_then(|grads| opt.step(&mut ps, &grads, lr))
            } else {
                Err(Error::Divergence(format!("loss {lv} at epoch {}", epoch + 1)))
            };
            if let Err(e) = step {
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("last_good.ckpt"), &ps, Some(&echo))?;
                    write_metrics(&dir.join("metrics.csv"), &metrics)?;
                }
                return Err(e);
            }
            loss_sum += lv * batch.len() as f64;
            hits += probs.iter().zip(&batch.labels).filter(|(p, &l)| argmax(p) == l).count();
            seen += batch.len();
        }
        let val_acc = accuracy(&model, &mut ps, &data.val, &data.stats, cfg.batch_size)?;
        let wall = started.elapsed().as_secs_f64();
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            val_acc,
            wall_seconds: if cfg.record_wall_time { wall } else { 0.0 },
        };
        log::info!(
            "epoch {} lr {:.3e} loss {:.4} train_acc {:.3} val_acc {:.3} ({wall:.1}s)",
            row.epoch,
            row.lr,
            row.train_loss,
            row.train_acc,
            row.val_acc
        );
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            if let Some(dir) = out {
                save_checkpoint(&dir.join("best.ckpt"), &ps, Some(&echo))?;
            }
            best = Some((epoch + 1, val_acc, ps.clone()));
        }
        let stop = cfg.stop_at_train_acc.is_some_and(|a| row.train_acc >= a);
        metrics.push(row);
        if let Some(dir) = out {
            write_metrics(&dir.join("metrics.csv"), &metrics)?;
        }
        if stop {
            break;
        }
    }
    let (best_epoch, best_val_acc, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        params,
        metrics,
        best_epoch,
        best_val_acc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Class ids in display order: shorter names first, then lexicographic.
    pub order: Vec<usize>,
    pub class_names: Vec<String>,
    /// `confusion[i][j]`: samples of class `order[i]` predicted as `order[j]`.
    pub confusion: Vec<Vec<usize>>,
    /// Indexed by class id; `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub total: usize,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], class_names: &[String]) -> Result<Self> {
        let c = class_names.len();
        if labels.len() != predictions.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        if let Some(&bad) = labels.iter().chain(predictions).find(|&&l| l >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&class_names[a], &class_names[b]);
            x.chars().count().cmp(&y.chars().count()).then_with(|| x.cmp(y))
        });
        let mut pos = vec![0; c];
        for (i, &k) in order.iter().enumerate() {
            pos[k] = i;
        }
        let mut confusion = vec![vec![0usize; c]; c];
        for (&l, &p) in labels.iter().zip(predictions) {
            confusion[pos[l]][pos[p]] += 1;
        }
        let total = labels.len();
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = (0..c)
            .map(|k| {
                let row = &confusion[pos[k]];
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[pos[k]] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            order,
            class_names: class_names.to_vec(),
            confusion,
            per_class_accuracy,
            total,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!("accuracy {:.4} ({} samples)\n", self.accuracy, self.total);
        let names: Vec<&str> = self.order.iter().map(|&k| self.class_names[k].as_str()).collect();
        let w = names.iter().map(|n| n.len()).max().unwrap_or(1).max(4);
        let _ = write!(s, "{:w$}", "");
        for n in &names {
            let _ = write!(s, " {n:>w$}");
        }
        s.push('\n');
        for (row, n) in self.confusion.iter().zip(&names) {
            let _ = write!(s, "{n:w$}");
            for v in row {
                let _ = write!(s, " {v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `model` over one split and tabulates the result.
pub fn evaluate<F: Float>(
    model: &LipModel,
    ps: &mut ParamStore<F>,
    data: &PreparedData,
    split: Split,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.classes.len() != model.config.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset has {}",
            model.config.classes,
            data.classes.len()
        )));
    }
    let samples = data.split(split);
    let clips = samples
        .iter()
        .map(|s| eval_clip(s, &model.config, &data.stats))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict(model, ps, &clips, batch_size)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    EvalReport::from_predictions(&labels, &preds, &data.classes)
}

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub modality: Modality,
    pub fusion: FusionStrategy,
    pub subset: LandmarkSubset,
    pub heads: usize,
}

impl AblationCell {
    pub fn new(modality: Modality, fusion: FusionStrategy, subset: LandmarkSubset, heads: usize) -> Self {
        let label = match modality {
            Modality::Lo => "LO".to_string(),
            Modality::Vo => "VO".to_string(),
            Modality::Vl => format!(
                "VL[{}]",
                match fusion {
                    FusionStrategy::Concat => "concat",
                    FusionStrategy::SingleAtt => "SingleAtt",
                    FusionStrategy::FusionNet => "FusionNet",
                }
            ),
        };
        AblationCell {
            label,
            modality,
            fusion,
            subset,
            heads,
        }
    }

    /// The five modality/fusion rows.
    pub fn modality_grid(subset: LandmarkSubset, heads: usize) -> Vec<AblationCell> {
        vec![
            AblationCell::new(Modality::Vo, FusionStrategy::Concat, subset, heads),
            AblationCell::new(Modality::Lo, FusionStrategy::Concat, subset, heads),
            AblationCell::new(Modality::Vl, FusionStrategy::Concat, subset, heads),
            AblationCell::new(Modality::Vl, FusionStrategy::SingleAtt, subset, heads),
            AblationCell::new(Modality::Vl, FusionStrategy::FusionNet, subset, heads),
        ]
    }

    pub fn heads_grid(heads: &[usize], subset: LandmarkSubset) -> Vec<AblationCell> {
        heads
            .iter()
            .map(|&h| {
                let mut c = AblationCell::new(Modality::Vl, FusionStrategy::FusionNet, subset, h);
                c.label = format!("VL[FusionNet] H={h}");
                c
            })
            .collect()
    }

    pub fn subset_grid(subsets: &[LandmarkSubset], heads: usize) -> Vec<AblationCell> {
        subsets
            .iter()
            .map(|&s| {
                let mut c = AblationCell::new(Modality::Vl, FusionStrategy::FusionNet, s, heads);
                c.label = format!("VL[FusionNet] {} points", s.len());
                c
            })
            .collect()
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.modality = self.modality;
        cfg.model.fusion = self.fusion;
        cfg.model.subset = self.subset;
        cfg.model.fusion_heads = self.heads;
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    /// Test accuracy per seed; `Err` holds the failure message.
    pub runs: Vec<std::result::Result<f64, String>>,
}

impl AblationRow {
    pub fn median(&self) -> Option<f64> {
        let mut ok: Vec<f64> = self.runs.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        if ok.is_empty() {
            return None;
        }
        ok.sort_by(f64::total_cmp);
        let n = ok.len();
        Some(if n % 2 == 1 { ok[n / 2] } else { (ok[n / 2 - 1] + ok[n / 2]) / 2.0 })
    }
}

/// Trains and tests every cell for every seed. Failures are recorded per
/// run and the grid continues. With `out`, each run writes into
/// `out/<cell index>_seed<seed>/`.
pub fn ablate<F: Float>(
    base: &TrainConfig,
    data: &PreparedData,
    cells: &[AblationCell],
    seeds: &[u64],
    out: Option<&Path>,
) -> Vec<AblationRow> {
    cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let mut cfg = cell.apply(base);
                    cfg.seed = seed;
                    let dir: Option<PathBuf> = out.map(|o| o.join(format!("{i:02}_seed{seed}")));
                    let res = train::<F>(&cfg, data, dir.as_deref()).and_then(|mut o| {
                        evaluate(&o.model, &mut o.params, data, Split::Test, cfg.batch_size).map(|r| r.accuracy)
                    });
                    match res {
                        Ok(acc) => {
                            log::info!("{} seed {seed}: test accuracy {acc:.4}", cell.label);
                            Ok(acc)
                        }
                        Err(e) => {
                            log::error!("{} seed {seed}: {e}", cell.label);
                            Err(format!("error[{}]: {e}", e.class()))
                        }
                    }
                })
                .collect();
            AblationRow {
                label: cell.label.clone(),
                runs,
            }
        })
        .collect()
}

pub fn render_ablation(rows: &[AblationRow], seeds: &[u64]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:w$}", "config");
    for seed in seeds {
        let _ = write!(s, " {:>9}", format!("seed {seed}"));
    }
    s.push_str("    median\n");
    for r in rows {
        let _ = write!(s, "{:w$}", r.label);
        for run in &r.runs {
            match run {
                Ok(a) => {
                    let _ = write!(s, " {:>9.4}", a);
                }
                Err(_) => {
                    let _ = write!(s, " {:>9}", "failed");
                }
            }
        }
        match r.median() {
            Some(m) => {
                let _ = writeln!(s, " {m:>9.4}");
            }
            None => s.push_str("        --\n"),
        }
    }
    s
}
