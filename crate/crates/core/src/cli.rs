//! The `platedpm` command line: `synth`, `train`, `recognize`, `eval` and
//! `bench`.
//!
//! Exit codes: 0 success, 1 runtime error, 2 argument error, 3 failed
//! `--assert-accuracy` gate.

use std::ffi::OsString;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::dpm::{io as model_io, CharacterMixtureSet};
use crate::error::{Error, Result};
use crate::eval::{self, LatencyStats};
use crate::imaging::ImageBuffer;
use crate::pipeline::{
    self, OverlapMetric, PipelineConfig, PlateLocalizer, ProjectionConfig, ReadingRecord,
};
use crate::synth::{self, DatasetConfig, Split};
use crate::train::{self, TrainingConfig, TrainingSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GATE: i32 = 3;

/// Environment variable holding the default model path.
pub const MODEL_ENV: &str = "PLATEDPM_MODEL";

#[derive(Debug, Parser)]
#[command(
    name = "platedpm",
    version,
    about = "License plate recognition with deformable part models"
)]
pub struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
    /// Repeat for more progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an annotated synthetic plate dataset.
    Synth(SynthArgs),
    /// Train the character models on a dataset split.
    Train(TrainArgs),
    /// Read plates and write one JSON reading record per image.
    Recognize(RecognizeArgs),
    /// Score reading records against ground truth.
    Eval(EvalArgs),
    /// Time plate recognition.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LocalizerArg {
    /// Each image is a plate crop.
    Whole,
    /// Edge-density search for a plate-shaped rectangle.
    Projection,
    /// Plate boxes from `--annotations`.
    Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    MinArea,
    Iou,
}

fn existing_path(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.exists() {
        Ok(p)
    } else {
        Err(format!("'{s}' does not exist"))
    }
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(v) => Err(format!("{v} is outside [0, 1]")),
        Err(e) => Err(e.to_string()),
    }
}

fn finite(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} is not finite")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of plates.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of plates in the (augmented) train split.
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval)]
    pub train_fraction: f64,
    /// Share of plates rendered in the near-infrared style
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub nir_fraction: f64,
    /// Leave the train split clean.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long, value_parser = existing_path)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a JSON export of the model.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the per-epoch log as TSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Seed for sample order and negative mining
    #[arg(long)]
    pub seed: Option<u64>,
    /// SGD epochs per latent round; 0 keeps the initial filters.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Latent relabelling rounds
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Mixture components per class
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mixtures: Option<u64>,
    /// Cap on positives per class
    #[arg(long)]
    pub max_positives: Option<usize>,
    /// Train only these classes, e.g. `0123456789`.
    #[arg(long)]
    pub alphabet: Option<String>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Image files or directories of images.
    #[arg(value_parser = existing_path)]
    pub images: Vec<PathBuf>,
    /// Read the images of a synthetic dataset instead.
    #[arg(long, value_parser = existing_path, conflicts_with = "images")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Use at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReadingArgs {
    /// Model file; falls back to $PLATEDPM_MODEL.
    #[arg(long, env = MODEL_ENV)]
    pub model: PathBuf,
    /// Minimum detection score
    #[arg(long, default_value_t = 0.0, value_parser = finite)]
    pub threshold: f64,
    /// Cross-class overlap above which only the best detection is kept.
    #[arg(long, default_value_t = 0.7, value_parser = unit_interval)]
    pub overlap: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::MinArea)]
    pub overlap_metric: MetricArg,
}

impl ReadingArgs {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            threshold: self.threshold,
            overlap_ratio: self.overlap,
            overlap_metric: match self.overlap_metric {
                MetricArg::MinArea => OverlapMetric::MinArea,
                MetricArg::Iou => OverlapMetric::Iou,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct RecognizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub reading: ReadingArgs,
    #[arg(long, value_enum, default_value_t = LocalizerArg::Whole)]
    pub localizer: LocalizerArg,
    /// Plate boxes for the annotation localizer (JSONL with `image`, `plate_box`).
    #[arg(long, value_parser = existing_path, required_if_eq("localizer", "annotation"))]
    pub annotations: Option<PathBuf>,
    /// Readings file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for annotated copies of the inputs.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Readings file written by `recognize`.
    #[arg(long, value_parser = existing_path)]
    pub readings: PathBuf,
    /// Dataset directory, manifest, or ground-truth JSONL.
    #[arg(long, value_parser = existing_path)]
    pub truth: PathBuf,
    /// Manifest split to score; ignored for plain ground-truth files.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// A plate counts as found when IoU with the truth exceeds this.
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval)]
    pub iou: f64,
    /// Character match: overlap relative to the smaller box.
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub char_overlap: f64,
    /// Exit with code 3 when full-string accuracy is below this.
    #[arg(long, value_parser = unit_interval)]
    pub assert_accuracy: Option<f64>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub reading: ReadingArgs,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n as usize);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Recognize(a) => cmd_recognize(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

fn show<T: Serialize>(value: &T) -> Result<i32> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(EXIT_OK)
}

pub fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<i32> {
    let config = DatasetConfig {
        n: a.n as usize,
        split: (a.train_fraction, 1.0 - a.train_fraction),
        nir_fraction: a.nir_fraction,
        seed: a.seed,
        augment: if a.no_augment {
            synth::AugmentConfig::none()
        } else {
            synth::AugmentConfig::default()
        },
        ..DatasetConfig::default()
    };
    if cli.show_config {
        return show(&config);
    }
    let m = synth::generate_dataset(&config, &a.out)?;
    println!(
        "{}: {} plates ({} train, {} val)",
        a.out.join(synth::MANIFEST_FILE).display(),
        m.records.len(),
        m.header.train,
        m.header.val
    );
    Ok(EXIT_OK)
}

fn training_config(a: &TrainArgs) -> TrainingConfig {
    let mut c = TrainingConfig::default();
    if let Some(v) = a.seed {
        c.rng_seed = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.rounds {
        c.latent_rounds = v;
    }
    if let Some(v) = a.mixtures {
        c.mixtures = v as usize;
    }
    if let Some(v) = a.max_positives {
        c.max_positives_per_class = Some(v);
    }
    if let Some(v) = &a.alphabet {
        c.alphabet = v.chars().collect();
    }
    c
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let config = training_config(a);
    if cli.show_config {
        return show(&config);
    }
    if let Some(c) = config.alphabet.iter().find(|c| !crate::in_alphabet(**c)) {
        return Err(Error::Parameter(format!("'{c}' is not a plate character")));
    }
    let manifest = synth::read_manifest(&a.data)?;
    let h = config.canonical_height;
    let set = match a.split {
        SplitArg::Train => TrainingSet::from_manifest(&manifest, Split::Train, h)?,
        SplitArg::Val => TrainingSet::from_manifest(&manifest, Split::Val, h)?,
        SplitArg::All => {
            let mut set = TrainingSet::from_manifest(&manifest, Split::Train, h)?;
            let val = TrainingSet::from_manifest(&manifest, Split::Val, h)?;
            let offset = set.images.len();
            set.images.extend(val.images);
            set.samples
                .extend(val.samples.into_iter().map(|s| train::TrainingSample {
                    image: s.image + offset,
                    ..s
                }));
            set
        }
    };
    if cli.verbose > 0 {
        eprintln!(
            "training on {} images, {} samples",
            set.images.len(),
            set.samples.len()
        );
    }
    let (models, log) = train::train_with_log(&set, &config)?;
    model_io::save(&models, &a.out)?;
    if let Some(p) = &a.json {
        std::fs::write(p, model_io::to_json(&models)?).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.log {
        std::fs::write(p, log.to_string()).map_err(|e| Error::io(p, e))?;
    }
    match log.entries.last() {
        Some(e) => println!(
            "{}: class {} round {} epoch {} lr {:.6e} loss {:.6}",
            a.out.display(),
            e.class,
            e.round,
            e.epoch,
            e.lr,
            e.loss
        ),
        None => println!("{}: initial filters only", a.out.display()),
    }
    Ok(EXIT_OK)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// `(id, path)` of every input image, in a fixed order.
fn collect_inputs(input: &InputArgs) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if let Some(d) = &input.dataset {
        let m = synth::read_manifest(d)?;
        let split = input.split.split();
        for r in m
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| s == r.split))
        {
            out.push((r.image.clone(), m.image_path(r)));
        }
    } else {
        for p in &input.images {
            if p.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                    .map_err(|e| Error::io(p, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.is_file() && is_image(f))
                    .collect();
                files.sort();
                out.extend(files.into_iter().map(|f| (f.display().to_string(), f)));
            } else {
                out.push((p.display().to_string(), p.clone()));
            }
        }
    }
    if let Some(n) = input.limit {
        out.truncate(n);
    }
    if out.is_empty() {
        return Err(Error::Parameter("no input images".into()));
    }
    Ok(out)
}

fn load_models(path: &Path) -> Result<CharacterMixtureSet> {
    model_io::load(path)
}

#[derive(Serialize)]
struct RecognizeConfig<'a> {
    model: &'a Path,
    pipeline: PipelineConfig,
    localizer: &'static str,
    projection: Option<ProjectionConfig>,
    inputs: usize,
}

pub fn cmd_recognize(cli: &Cli, a: &RecognizeArgs) -> Result<i32> {
    let pipeline_config = a.reading.pipeline();
    let localizer = match a.localizer {
        LocalizerArg::Whole => PlateLocalizer::WholeImage,
        LocalizerArg::Projection => PlateLocalizer::Projection(ProjectionConfig::default()),
        LocalizerArg::Annotation => {
            let path = a
                .annotations
                .as_ref()
                .ok_or_else(|| Error::Parameter("--annotations is required".into()))?;
            PlateLocalizer::Annotation(pipeline::read_plate_annotations(path)?)
        }
    };
    let inputs = collect_inputs(&a.input)?;
    if cli.show_config {
        return show(&RecognizeConfig {
            model: &a.reading.model,
            pipeline: pipeline_config,
            localizer: match a.localizer {
                LocalizerArg::Whole => "whole",
                LocalizerArg::Projection => "projection",
                LocalizerArg::Annotation => "annotation",
            },
            projection: matches!(a.localizer, LocalizerArg::Projection)
                .then(ProjectionConfig::default),
            inputs: inputs.len(),
        });
    }
    let models = load_models(&a.reading.model)?;
    if let Some(d) = &a.overlay {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let records = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (id, path))| {
            let img = ImageBuffer::open(path)?;
            let reading =
                pipeline::recognize_image(&img, id, &localizer, &models, &pipeline_config)?;
            if let (Some(dir), Some(r)) = (&a.overlay, &reading) {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                pipeline::draw_overlay(&img, r)?
                    .save_png(dir.join(format!("{i:06}_{stem}.png")))?;
            }
            Ok(ReadingRecord {
                image: id.clone(),
                reading,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let sink = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&sink, e))?;
    }
    out.flush().map_err(|e| Error::io(&sink, e))?;
    if cli.verbose > 0 || a.out.is_some() {
        let read = records.iter().filter(|r| r.reading.is_some()).count();
        eprintln!("{} images, {read} plates read", records.len());
    }
    Ok(EXIT_OK)
}

/// Reads a readings file written by `recognize`.
pub fn read_readings(path: &Path) -> Result<Vec<ReadingRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(t)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalConfig {
    plate_iou: f64,
    char_overlap: f64,
    assert_accuracy: Option<f64>,
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    if cli.show_config {
        return show(&EvalConfig {
            plate_iou: a.iou,
            char_overlap: a.char_overlap,
            assert_accuracy: a.assert_accuracy,
        });
    }
    let readings = read_readings(&a.readings)?;
    let truth = eval::read_ground_truth(&a.truth, a.split.split())?;
    let alphabet: Vec<char> = crate::ALPHABET.chars().collect();
    let report = eval::evaluate(&readings, &truth, &alphabet, a.iou, a.char_overlap)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    if let Some(min) = a.assert_accuracy {
        if report.recog_accuracy < min {
            eprintln!(
                "assertion failed: full-string accuracy {:.4} < {min}",
                report.recog_accuracy
            );
            return Ok(EXIT_GATE);
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BenchConfig<'a> {
    model: &'a Path,
    pipeline: PipelineConfig,
    reps: u64,
    warmup: usize,
    inputs: usize,
    threads: usize,
}

pub fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<i32> {
    let inputs = collect_inputs(&a.input)?;
    let pipeline_config = a.reading.pipeline();
    if cli.show_config {
        return show(&BenchConfig {
            model: &a.reading.model,
            pipeline: pipeline_config,
            reps: a.reps,
            warmup: a.warmup,
            inputs: inputs.len(),
            threads: rayon::current_num_threads(),
        });
    }
    let models = load_models(&a.reading.model)?;
    let images = inputs
        .iter()
        .map(|(_, p)| ImageBuffer::open(p))
        .collect::<Result<Vec<_>>>()?;
    let mut failure = None;
    let stats: LatencyStats = eval::timing_benchmark(
        |img: &ImageBuffer| match pipeline::recognize_plate(img, &models, &pipeline_config) {
            Ok(r) => Some(r.text),
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        },
        &images,
        a.warmup,
        a.reps as usize,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    println!(
        "{} recognitions on {} images, {} threads",
        stats.samples,
        images.len(),
        rayon::current_num_threads()
    );
    println!(
        "latency ms: mean {:.3} p50 {:.3} p95 {:.3} max {:.3}",
        stats.mean_ms, stats.p50_ms, stats.p95_ms, stats.max_ms
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("platedpm").chain(args.iter().copied()))
    }

    #[test]
    fn definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn zero_plates_is_a_usage_error() {
        let e = parse(&["synth", "--n", "0", "--out", "x"]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
        assert_eq!(
            run(["platedpm", "synth", "--n", "0", "--out", "x"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn fractions_are_range_checked() {
        assert!(parse(&["synth", "--n", "5", "--out", "x", "--nir-fraction", "1.5"]).is_err());
        assert!(parse(&["synth", "--n", "5", "--out", "x", "--train-fraction", "0.9"]).is_ok());
    }

    #[test]
    fn missing_inputs_are_rejected_at_parse_time() {
        let e = parse(&["eval", "--readings", "/no/such/file", "--truth", "/"]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn threads_must_be_positive() {
        assert!(parse(&["--threads", "0", "synth", "--n", "1", "--out", "x"]).is_err());
    }

    #[test]
    fn train_overrides_apply() {
        let cli = parse(&[
            "train",
            "--data",
            "/",
            "--out",
            "m.bin",
            "--epochs",
            "0",
            "--alphabet",
            "01",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!("expected train");
        };
        let c = training_config(&a);
        assert_eq!(c.epochs, 0);
        assert_eq!(c.alphabet, vec!['0', '1']);
    }
}
