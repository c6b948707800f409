//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ModelConfig;
use crate::dataio::{generate_synthetic_dataset, load_sample, parse_key_values, Coupling, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_named_module, SUITE_MODULES, SUITE_TOLERANCE};
use crate::preprocess::{align_sample, LandmarkSubset, NormStats};
use crate::tensor::Float;
use crate::trainer::{
    ablate, eval_clip, evaluate, predict, render_ablation, restore, train, AblationCell, PreparedData, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "lipfuse", version, about = "Audio-free word-level lipreading with fused visual and landmark streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with known class structure.
    Synth(SynthArgs),
    /// Compute pixel normalisation statistics over the training split.
    Stats(StatsArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Print the top classes for one sample directory.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and test every cell of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    Modality,
    Heads,
    Subset,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// visual_only, geometric_only or complementary.
    #[arg(long, default_value = "complementary")]
    coupling: String,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 96)]
    frame_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Architecture preset whose canvas size is used for alignment.
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// Config file; its `canvas` key overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file [default: <data>/stats.txt].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run configuration. Flags override the config file, which overrides the
/// preset.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture preset [default: paper, or `preset=` from the config file].
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["lo", "vo", "vl"])]
    modality: Option<String>,
    #[arg(long, value_parser = ["concat", "single_att", "fusionnet"])]
    fusion: Option<String>,
    #[arg(long, value_parser = ["20", "33", "68"])]
    subset: Option<String>,
    /// Fusion attention heads.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    /// Compute normalisation statistics instead of reading <data>/stats.txt.
    #[arg(long, default_value_t = false)]
    compute_stats: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample directory (frames, landmarks.csv).
    #[arg(long)]
    sample: PathBuf,
    /// Dataset whose manifest supplies class names.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    dtype: Dtype,
    /// Parameters sampled per module.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check only this module.
    #[arg(long)]
    module: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Grid::Modality)]
    grid: Grid,
    /// Comma-separated seeds shared by every cell.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Head counts of the heads grid.
    #[arg(long, default_value = "1,2,4,8,16")]
    head_grid: String,
    #[command(flatten)]
    run: RunArgs,
}

/// Failure split by exit code.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

trait UsageContext<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
}

impl<T> UsageContext<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Usage)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 2 usage error, 1 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => dispatch(a.run.dtype, || train_cmd::<f32>(&a), || train_cmd::<f64>(&a)),
        Command::Eval(a) => dispatch(a.dtype, || eval_cmd::<f32>(&a), || eval_cmd::<f64>(&a)),
        Command::Infer(a) => dispatch(a.dtype, || infer_cmd::<f32>(&a), || infer_cmd::<f64>(&a)),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => dispatch(a.run.dtype, || ablate_cmd::<f32>(&a), || ablate_cmd::<f64>(&a)),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error[{}]: {e}", e.class());
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.class());
            1
        }
    }
}

fn dispatch(dtype: Dtype, single: impl FnOnce() -> Outcome, double: impl FnOnce() -> Outcome) -> Outcome {
    match dtype {
        Dtype::F32 => single(),
        Dtype::F64 => double(),
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let coupling: Coupling = a.coupling.parse().usage()?;
    let mut cfg = SynthConfig::new(a.classes, a.per_class, a.seed, coupling);
    cfg.frames = a.frames;
    cfg.frame_size = a.frame_size;
    cfg.validate().usage()?;
    println!(
        "# config\nclasses={}\nper_class={}\nseed={}\ncoupling={}\nframes={}\nframe_size={}",
        cfg.classes, cfg.per_class, cfg.seed, cfg.coupling, cfg.frames, cfg.frame_size
    );
    let manifest = generate_synthetic_dataset(&a.out, &cfg)?;
    println!(
        "wrote {} samples of {} classes to {}",
        manifest.records.len(),
        manifest.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text)
}

fn preset_config(preset: Preset, classes: usize) -> ModelConfig {
    match preset {
        Preset::Paper => ModelConfig::paper(classes),
        Preset::Desk => ModelConfig::desk(classes),
    }
}

fn parse_preset(v: &str) -> Result<Preset> {
    Preset::from_str(v, true).map_err(|_| Error::Config(format!("unknown preset `{v}` (paper or desk)")))
}

/// Preset, then config file, then flags.
fn resolve(args: &RunArgs, classes: usize) -> Result<TrainConfig> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let preset = match (args.preset, file.get("preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => parse_preset(v)?,
        (None, None) => Preset::Paper,
    };
    let mut cfg = TrainConfig::new(preset_config(preset, classes));
    for (k, v) in &file {
        if k == "preset" {
            continue;
        }
        if k == "classes" && v.parse::<usize>().ok() != Some(classes) {
            return Err(Error::Config(format!("config sets classes={v} but the dataset has {classes}")));
        }
        if !cfg.set(k, v)? {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
    }
    let overrides = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("modality", args.modality.clone()),
        ("fusion", args.fusion.clone()),
        ("subset", args.subset.clone()),
        ("heads", args.heads.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stats(a: StatsArgs) -> Outcome {
    let ds = Dataset::open(&a.data).usage()?;
    let mut model = preset_config(a.preset, ds.manifest.num_classes());
    if let Some(p) = &a.config {
        let file = read_config_file(p).usage()?;
        if let Some(preset) = file.get("preset") {
            model = preset_config(parse_preset(preset).usage()?, ds.manifest.num_classes());
        }
        if let Some(c) = file.get("canvas") {
            model.set("canvas", c).usage()?;
        }
    }
    println!("# config\ncanvas={}", model.canvas);
    let prepared = PreparedData::from_dataset(&ds, model.canvas, None)?;
    let out = a.out.unwrap_or_else(|| a.data.join("stats.txt"));
    prepared.stats.save(&out)?;
    print!("{}", prepared.stats.to_text());
    println!("wrote {}", out.display());
    Ok(())
}

fn prepare(data: &Path, run: &RunArgs, out: &Path) -> std::result::Result<(Dataset, TrainConfig, Option<NormStats>), Failure> {
    let ds = Dataset::open(data).usage()?;
    let cfg = resolve(run, ds.manifest.num_classes()).usage()?;
    let stats = if run.compute_stats {
        None
    } else {
        let p = data.join("stats.txt");
        if !p.exists() {
            return Err(Failure::Usage(Error::Config(format!(
                "{} not found; run `lipfuse stats` first or pass --compute-stats",
                p.display()
            ))));
        }
        Some(NormStats::load(&p).usage()?)
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = cfg.to_text();
    println!("# config\n{}", text.trim_end());
    std::fs::write(out.join("config.txt"), &text).map_err(|e| Error::io(out, e))?;
    Ok((ds, cfg, stats))
}

fn train_cmd<F: Float>(a: &TrainArgs) -> Outcome {
    let (ds, cfg, stats) = prepare(&a.data, &a.run, &a.out)?;
    let data = PreparedData::from_dataset(&ds, cfg.model.canvas, stats)?;
    data.stats.save(&a.out.join("stats.txt"))?;
    let outcome = train::<F>(&cfg, &data, Some(&a.out))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "epochs {} final train_acc {:.4}; best val_acc {:.4} at epoch {} -> {}",
        last.epoch,
        last.train_acc,
        outcome.best_val_acc,
        outcome.best_epoch,
        a.out.join("best.ckpt").display()
    );
    Ok(())
}

fn eval_cmd<F: Float>(a: &EvalArgs) -> Outcome {
    let split: Split = a.split.parse().usage()?;
    let ds = Dataset::open(&a.data).usage()?;
    let mut r = restore::<F>(&a.checkpoint).usage()?;
    println!("# config\n{}", r.config.to_text().trim_end());
    let data = PreparedData::from_dataset(&ds, r.config.model.canvas, Some(r.stats))?;
    let report = evaluate(&r.model, &mut r.params, &data, split, r.config.batch_size)?;
    print!("{}", report.render());
    for &k in &report.order {
        if let Some(acc) = report.per_class_accuracy[k] {
            println!("class {} accuracy {acc:.4}", report.class_names[k]);
        }
    }
    Ok(())
}

fn infer_cmd<F: Float>(a: &InferArgs) -> Outcome {
    let mut r = restore::<F>(&a.checkpoint).usage()?;
    let sample = load_sample(&a.sample).usage()?;
    let classes = r.model.config.classes;
    let names: Vec<String> = match &a.data {
        Some(d) => {
            let ds = Dataset::open(d).usage()?;
            if ds.manifest.num_classes() != classes {
                return Err(Failure::Runtime(Error::Config(format!(
                    "checkpoint has {classes} classes but the dataset has {}",
                    ds.manifest.num_classes()
                ))));
            }
            ds.manifest.classes
        }
        None => (0..classes).map(|k| k.to_string()).collect(),
    };
    let aligned = align_sample(&sample, r.model.config.canvas)?;
    let clip = eval_clip(&aligned, &r.model.config, &r.stats)?;
    let probs = predict(&r.model, &mut r.params, std::slice::from_ref(&clip), 1)?;
    let mut ranked: Vec<(usize, f64)> = probs[0].iter().copied().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for (rank, (k, p)) in ranked.iter().take(a.top).enumerate() {
        println!("{} {} {p:.6}", rank + 1, names[*k]);
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    if a.dtype != Dtype::F64 {
        return Err(Failure::Usage(Error::Config(
            "finite-difference checks need --dtype f64".into(),
        )));
    }
    let modules: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => SUITE_MODULES.to_vec(),
    };
    let mut failed = Vec::new();
    for m in modules {
        let r = check_named_module(m, a.samples, a.seed).usage()?;
        let ok = r.passes(SUITE_TOLERANCE);
        println!(
            "{:<20} checked {:>4} max_rel_err {:.3e} {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Contract(format!(
            "gradient mismatch above {SUITE_TOLERANCE:e} in {}",
            failed.join(", ")
        ))))
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--{flag}: cannot parse `{p}`")))
        })
        .collect()
}

fn ablate_cmd<F: Float>(a: &AblateArgs) -> Outcome {
    let seeds: Vec<u64> = parse_list("seeds", &a.seeds).usage()?;
    let (ds, cfg, stats) = prepare(&a.data, &a.run, &a.out)?;
    let cells = match a.grid {
        Grid::Modality => AblationCell::modality_grid(cfg.model.subset, cfg.model.fusion_heads),
        Grid::Heads => AblationCell::heads_grid(&parse_list("head-grid", &a.head_grid).usage()?, cfg.model.subset),
        Grid::Subset => AblationCell::subset_grid(
            &[LandmarkSubset::Mouth20, LandmarkSubset::Lower33, LandmarkSubset::Full68],
            cfg.model.fusion_heads,
        ),
    };
    let data = PreparedData::from_dataset(&ds, cfg.model.canvas, stats)?;
    let rows = ablate::<F>(&cfg, &data, &cells, &seeds, Some(&a.out));
    let table = render_ablation(&rows, &seeds);
    std::fs::write(a.out.join("ablation.txt"), &table).map_err(|e| Error::io(&a.out, e))?;
    print!("{table}");
    Ok(())
}
