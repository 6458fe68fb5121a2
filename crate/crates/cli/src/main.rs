//! `hdrforge`: prepare patch stores, train, merge bracketed stacks and evaluate.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use hdrforge::align::{self, AlignOptions};
use hdrforge::dataset::{self, PatchOptions, PatchRecord, SplitSpec};
use hdrforge::infer::{self, TileOptions};
use hdrforge::io;
use hdrforge::metrics::{self, MetricsReport};
use hdrforge::net::{load_checkpoint, save_checkpoint, Variant};
use hdrforge::radiance::{linearize, DEFAULT_GAMMA, DEFAULT_MU};
use hdrforge::train::{write_log_header, write_log_row, TrainConfig, Trainer};
use hdrforge::{Error, ExposureStack, RadianceImage, TonemapParams};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "hdrforge",
    version,
    about = "Deep HDR merging of bracketed exposures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align scenes, cut and augment patches, and write a patch store.
    Prepare(PrepareArgs),
    /// Train a network on a patch store.
    Train(TrainArgs),
    /// Merge a bracketed stack into an HDR image.
    Merge(MergeArgs),
    /// Compare predicted HDR images with ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory with one sub-directory per scene.
    data_dir: PathBuf,
    /// Output patch store.
    #[arg(short, long)]
    out: PathBuf,
    /// JSON file `{"train": [...], "test": [...]}`; only training scenes are used.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    patch_size: usize,
    #[arg(long, default_value_t = 64)]
    stride: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reference frame index within each scene (defaults to the middle one).
    #[arg(long)]
    reference: Option<usize>,
    /// Motion score above which a patch is oversampled.
    #[arg(long, default_value_t = 0.2)]
    motion_threshold: f64,
    /// Total copies of each motion-flagged patch.
    #[arg(long, default_value_t = 2)]
    oversample_factor: usize,
    /// Inverse camera response CSV applied to every input frame.
    #[arg(long)]
    crf: Option<PathBuf>,
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Patch store written by `prepare`.
    store: PathBuf,
    /// JSON training configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints and the CSV log.
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    /// LDR frames (8- or 16-bit PNG/TIFF).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Exposure biases in stops, one per input, in input order.
    #[arg(short, long)]
    exposures: PathBuf,
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Output Radiance `.hdr` file.
    #[arg(short, long)]
    out: PathBuf,
    /// Reference frame, as an index into the inputs sorted by exposure.
    #[arg(long)]
    reference: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_MU)]
    mu: f64,
    /// Write a tonemapped PNG preview here.
    #[arg(long)]
    tonemap: Option<PathBuf>,
    /// Write headerless little-endian float32 RGB here.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Homography sidecar (9 numbers per frame) used instead of feature alignment.
    #[arg(long)]
    homographies: Option<PathBuf>,
    #[arg(long)]
    crf: Option<PathBuf>,
    #[arg(long)]
    no_align: bool,
    #[arg(long, default_value_t = infer::DEFAULT_TILE)]
    tile: usize,
    #[arg(long, default_value_t = infer::DEFAULT_OVERLAP)]
    overlap: usize,
    /// Pixels discarded at tile edges shared with another tile.
    #[arg(long, default_value_t = infer::DEFAULT_CONTEXT)]
    context: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted `<scene>.hdr` files.
    pred_dir: PathBuf,
    /// Directory of `<scene>.hdr` files or `<scene>/gt.hdr` scene folders.
    truth_dir: PathBuf,
    /// CSV report path; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MU)]
    mu: f64,
    /// Write side-by-side tonemapped PNGs (prediction | truth) here.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Merge(a) => merge(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("HDRFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("HDRFORGE_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Numeric { .. } => EXIT_NUMERIC,
                Error::Parameter(_) | Error::Shape(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn load_crf(path: Option<&Path>) -> anyhow::Result<Option<hdrforge::CrfTable>> {
    path.map(|p| io::read_crf_csv(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn prepare(a: PrepareArgs) -> anyhow::Result<()> {
    if a.patch_size == 0 || a.stride == 0 {
        return Err(Error::Parameter("patch size and stride must be positive".into()).into());
    }
    let crf = load_crf(a.crf.as_deref())?;
    let mut dirs = dataset::scene_dirs(&a.data_dir)
        .with_context(|| format!("listing {}", a.data_dir.display()))?;
    if let Some(split_path) = &a.split {
        let split = SplitSpec::load(split_path)
            .with_context(|| format!("reading {}", split_path.display()))?;
        let names: Vec<String> = dirs.iter().map(|d| dir_name(d)).collect();
        split.validate(&names)?;
        dirs.retain(|d| split.train.contains(&dir_name(d)));
    }
    let opts = PatchOptions {
        size: a.patch_size,
        stride: a.stride,
        gamma: a.gamma,
        motion_threshold: a.motion_threshold,
    };
    let align_opts = AlignOptions {
        gamma: a.gamma,
        ..AlignOptions::default()
    };
    let per_scene: Vec<Option<Vec<PatchRecord>>> = dirs
        .par_iter()
        .map(
            |dir| match scene_patches(dir, &a, crf.as_ref(), &opts, &align_opts) {
                Ok(p) => Some(p),
                Err(e) => {
                    warn!("skipping {}: {e:#}", dir.display());
                    None
                }
            },
        )
        .collect();
    let scenes = per_scene.iter().filter(|p| p.is_some()).count();
    let raw: Vec<PatchRecord> = per_scene.into_iter().flatten().flatten().collect();
    let raw_count = raw.len();
    let augmented: Vec<PatchRecord> = if a.no_augment {
        raw
    } else {
        raw.iter().flat_map(dataset::augment).collect()
    };
    let augmented_count = augmented.len();
    let records = dataset::oversample(augmented, a.oversample_factor, a.seed);
    println!("scenes: {scenes}");
    println!("raw patches: {raw_count}");
    println!("after augmentation: {augmented_count}");
    println!("after oversampling: {}", records.len());
    if records.is_empty() {
        return Err(Error::Data {
            path: a.data_dir.clone(),
            reason: "no patches extracted".into(),
        }
        .into());
    }
    dataset::save_store(&a.out, &records)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string()
}

fn scene_patches(
    dir: &Path,
    a: &PrepareArgs,
    crf: Option<&hdrforge::CrfTable>,
    opts: &PatchOptions,
    align_opts: &AlignOptions,
) -> anyhow::Result<Vec<PatchRecord>> {
    let mut scene = dataset::load_scene(dir, a.reference, crf)?;
    let sidecar = dir.join("homographies.txt");
    if sidecar.is_file() {
        let hs = io::read_homographies(&sidecar)?;
        scene.stack = align::apply_homographies(&scene.stack, &hs)?;
    } else if !a.no_align {
        let (stack, outcome) = align::align_stack_with(&scene.stack, align_opts);
        for (i, o) in outcome.iter().enumerate() {
            if let align::FrameAlignment::Failed(why) = o {
                warn!("{}: frame {i} left unaligned: {why}", scene.name);
            }
        }
        scene.stack = stack;
    }
    Ok(dataset::extract_patches_with(&scene, opts)?)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        config.variant = v;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(mu) = a.mu {
        config.mu = mu;
    }
    if let Some(g) = a.gamma {
        config.gamma = g;
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    config.validate()?;

    let records =
        dataset::load_store(&a.store).with_context(|| format!("reading {}", a.store.display()))?;
    let first = records.first().ok_or_else(|| Error::Data {
        path: a.store.clone(),
        reason: "store holds no records".into(),
    })?;
    if let Some(r) = records
        .iter()
        .find(|r| r.k != config.k || r.size != first.size)
    {
        return Err(Error::Data {
            path: a.store.clone(),
            reason: format!(
                "record {} has k={} size={}, expected k={} size={}",
                r.provenance, r.k, r.size, config.k, first.size
            ),
        }
        .into());
    }

    std::fs::create_dir_all(&a.out_dir)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            let spec = ckpt.network.spec();
            if spec.variant != config.variant || spec.k_inputs != config.k {
                bail!(Error::Parameter(format!(
                    "checkpoint holds a {} network with k={}, config asks for {} with k={}",
                    spec.variant, spec.k_inputs, config.variant, config.k
                )));
            }
            Trainer::from_checkpoint(ckpt, config.clone())?
        }
        None => Trainer::new(config.clone(), first.size)?,
    };
    info!(
        "training {} (k={}) on {} records from iteration {}",
        config.variant,
        config.k,
        records.len(),
        trainer.iteration()
    );

    let log_path = a.out_dir.join("train_log.csv");
    let fresh_log = a.resume.is_none() || !log_path.exists();
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh_log)
            .truncate(fresh_log)
            .open(&log_path)?,
    );
    if fresh_log {
        write_log_header(&mut log)?;
    }
    let latest = a.out_dir.join("latest.ckpt");
    let interval = config.checkpoint_interval.max(1);
    let out_dir = a.out_dir.clone();
    trainer.run(&records, |t, row| {
        write_log_row(&mut log, &row)?;
        if row.iteration % interval == 0 {
            log.flush()?;
            let state = t.optimizer.state.clone();
            save_checkpoint(
                &out_dir.join(format!("iter_{:08}.ckpt", row.iteration)),
                &mut t.network,
                Some(&state),
            )?;
            save_checkpoint(&latest, &mut t.network, Some(&state))?;
            info!("iteration {}: loss {:.6e}", row.iteration, row.loss);
        }
        Ok(())
    })?;
    log.flush()?;
    let state = trainer.optimizer.state.clone();
    save_checkpoint(&latest, &mut trainer.network, Some(&state))?;
    println!("checkpoint: {}", latest.display());
    Ok(())
}

fn merge(a: MergeArgs) -> anyhow::Result<()> {
    let params = TonemapParams::new(a.mu)?;
    let biases = io::read_exposures(&a.exposures)
        .with_context(|| format!("reading {}", a.exposures.display()))?;
    if biases.len() != a.inputs.len() {
        return Err(Error::Parameter(format!(
            "{} inputs but {} exposure values",
            a.inputs.len(),
            biases.len()
        ))
        .into());
    }
    let mut frames = a
        .inputs
        .iter()
        .zip(&biases)
        .map(|(p, &b)| {
            Ok((
                b,
                io::read_ldr(p).with_context(|| format!("reading {}", p.display()))?,
            ))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    frames.sort_by(|x, y| x.0.total_cmp(&y.0));
    let biases: Vec<f64> = frames.iter().map(|f| f.0).collect();
    let reference = a
        .reference
        .unwrap_or(ExposureStack::middle_index(frames.len()));
    let mut stack = ExposureStack::from_biases(
        frames.into_iter().map(|f| f.1).collect(),
        &biases,
        reference,
    )?;
    if let Some(crf) = load_crf(a.crf.as_deref())? {
        let lin = stack
            .frames()
            .iter()
            .map(|f| linearize(f, Some(&crf)).pixels().clone())
            .collect();
        stack = stack.with_rasters(lin)?;
    }
    if let Some(p) = &a.homographies {
        let hs = io::read_homographies(p).with_context(|| format!("reading {}", p.display()))?;
        stack = align::apply_homographies(&stack, &hs)?;
    } else if !a.no_align {
        let opts = AlignOptions {
            gamma: a.gamma,
            ..AlignOptions::default()
        };
        let (aligned, outcome) = align::align_stack_with(&stack, &opts);
        for (i, o) in outcome.iter().enumerate() {
            if let align::FrameAlignment::Failed(why) = o {
                warn!("frame {i} left unaligned: {why}");
            }
        }
        stack = aligned;
    }

    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let opts = TileOptions {
        tile: a.tile,
        overlap: a.overlap,
        context: a.context,
    };
    let hdr = infer::merge_stack(&ckpt.network, &stack, a.gamma, opts)?;
    io::write_hdr(&a.out, hdr.pixels()).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.tonemap {
        io::write_png8(p, hdrforge::radiance::tonemap(&hdr, params).pixels())?;
    }
    if let Some(p) = &a.raw {
        io::write_raw_f32(p, hdr.pixels())?;
    }
    let (h, w) = hdr.dims();
    println!("wrote {} ({w}x{h})", a.out.display());
    Ok(())
}

fn truth_path(truth_dir: &Path, stem: &str) -> Option<PathBuf> {
    [
        truth_dir.join(format!("{stem}.hdr")),
        truth_dir.join(stem).join("gt.hdr"),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let params = TonemapParams::new(a.mu)?;
    let mut preds: Vec<(String, PathBuf)> = std::fs::read_dir(&a.pred_dir)
        .with_context(|| format!("listing {}", a.pred_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("hdr")))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect();
    preds.sort();
    let mut pairs = Vec::new();
    for (stem, p) in preds {
        match truth_path(&a.truth_dir, &stem) {
            Some(t) => pairs.push((stem, p, t)),
            None => warn!("unmatched prediction skipped: {}", p.display()),
        }
    }
    if let Ok(entries) = std::fs::read_dir(&a.truth_dir) {
        let mut orphans: Vec<String> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let stem = if p.is_dir() {
                    p.join("gt.hdr").is_file().then(|| dir_name(&p))?
                } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("hdr")) {
                    p.file_stem()?.to_str()?.to_string()
                } else {
                    return None;
                };
                (!pairs.iter().any(|(s, _, _)| *s == stem)).then_some(stem)
            })
            .collect();
        orphans.sort();
        orphans.dedup();
        for s in orphans {
            warn!("ground truth without prediction skipped: {s}");
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data {
            path: a.pred_dir.clone(),
            reason: "no prediction matches a ground-truth file".into(),
        }
        .into());
    }
    if let Some(d) = &a.dump_dir {
        std::fs::create_dir_all(d)?;
    }
    let rows: Vec<(String, MetricsReport)> = pairs
        .par_iter()
        .map(|(stem, p, t)| {
            let pred = RadianceImage::clamped(io::read_hdr(p)?);
            let truth = RadianceImage::clamped(io::read_hdr(t)?);
            let report = metrics::evaluate(&pred, &truth, params)
                .with_context(|| format!("scene {stem}"))?;
            if let Some(d) = &a.dump_dir {
                dump_side_by_side(&d.join(format!("{stem}.png")), &pred, &truth, params)?;
            }
            Ok((stem.clone(), report))
        })
        .collect::<anyhow::Result<_>>()?;
    match &a.out {
        Some(path) => metrics::write_report(BufWriter::new(File::create(path)?), &rows)?,
        None => metrics::write_report(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn dump_side_by_side(
    path: &Path,
    pred: &RadianceImage,
    truth: &RadianceImage,
    params: TonemapParams,
) -> anyhow::Result<()> {
    let (pt, tt) = (
        hdrforge::radiance::tonemap(pred, params),
        hdrforge::radiance::tonemap(truth, params),
    );
    let (h, w) = pred.dims();
    let both = hdrforge::RgbImage::from_fn(2 * w, h, |r, c, ch| {
        if c < w {
            pt.pixels().get(r, c, ch)
        } else {
            tt.pixels().get(r, c - w, ch)
        }
    });
    io::write_png8(path, &both)?;
    Ok(())
}
