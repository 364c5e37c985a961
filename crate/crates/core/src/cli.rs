//! Command-line interface: dataset synthesis, training, inference,
//! evaluation, and latency benchmarking.
//!
//! Exit-code contract: 0 success, 1 runtime/I-O failure, 2 usage error.
//! Every subcommand is deterministic given its arguments and seeds.

use crate::bench;
use crate::conv;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::imageio;
use crate::metrics::{EvalReport, PsnrMode};
use crate::rawproc::{self, BayerFrame};
use crate::rng::Rng;
use crate::synth::{self, DegradeSpec, ManifestRecord, NoisePreset, SceneSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{self, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

/// Stream tags for deriving per-pair seeds from the synth master seed.
const SCENE_TAG: u64 = 11;
const ALPHA_TAG: u64 = 12;
const NOISE_TAG: u64 = 13;

#[derive(Parser)]
#[command(
    name = "lowlight",
    version,
    about = "Low-light raw image enhancement: synthesize paired data, train, infer, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset plus a manifest
    Synth(SynthArgs),
    /// Train the enhancement model over a manifest of pairs
    Train(TrainArgs),
    /// Enhance one raw frame using a trained checkpoint
    Infer(InferArgs),
    /// Score a checkpoint over a manifest, writing a CSV report
    Eval(EvalArgs),
    /// Measure single-pass inference latency
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the pairs and the manifest
    #[arg(long, default_value = "pairs")]
    out: PathBuf,
    /// Number of pairs to generate (0 writes a valid empty manifest)
    #[arg(long)]
    pairs: usize,
    /// Frame size as HxW; both sides must be even (RGGB mosaic)
    #[arg(long, default_value = "128x128")]
    size: String,
    /// Exposure-ratio range LO:HI, drawn uniformly per pair
    #[arg(long = "alpha-range", default_value = "100:300")]
    alpha_range: String,
    /// Noise preset: none, low, default, high
    #[arg(long, default_value = "default")]
    noise: String,
    /// Master seed; the output tree is a pure function of it
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of training pairs (raw<TAB>gt<TAB>alpha lines)
    #[arg(long)]
    manifest: PathBuf,
    /// `key = value` training configuration file; defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.csv
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; config must match exactly
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Switch bundle: baseline, attn, msssim, full
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Short-exposure raw frame (.llr)
    #[arg(long)]
    raw: PathBuf,
    /// Exposure ratio; falls back to the raw file's metadata when omitted
    #[arg(long)]
    alpha: Option<f32>,
    /// Output PNG path
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-level gate maps, written as attn_L{level}.png
    #[arg(long = "dump-attention")]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest of evaluation pairs
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// CSV report output path
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Run resolution: N or NxN (square only)
    #[arg(long, default_value = "256")]
    resolution: String,
    /// Untimed warm-up runs before measurement
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Timed runs
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Report format: text, csv, jsonl
    #[arg(long, default_value = "text")]
    format: String,
    /// Write the report to this file instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Op-internal thread budget (default: LLE_THREADS, else sequential)
    #[arg(long)]
    threads: Option<usize>,
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests land on stdout and are successes;
            // everything else is a usage error.
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let (h, w) = parse_size(&args.size)?;
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "size {h}x{w}: both dimensions must be positive and even so the RGGB mosaic tiles the frame"
        )));
    }
    let (lo, hi) = parse_alpha_range(&args.alpha_range)?;
    let preset = NoisePreset::parse(&args.noise)?;
    let (read_sigma, shot_scale) = preset.sigmas();

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let master = Rng::new(args.seed);
    let mut records = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let idx = i as u64;
        let scene_seed = master.derive(SCENE_TAG, idx).next_u64();
        let scene = SceneSpec::default_for(scene_seed, h, w);
        let alpha = if lo == hi { lo } else { master.derive(ALPHA_TAG, idx).next_range(lo, hi) };
        let degrade = DegradeSpec {
            alpha,
            read_noise_sigma: read_sigma,
            shot_noise_scale: shot_scale,
            seed: master.derive(NOISE_TAG, idx).next_u64(),
        };
        let stem = format!("pair_{i:04}");
        records.push(synth::make_pair(&scene, &degrade, &args.out, &stem)?);
    }
    synth::write_manifest(&args.out.join("manifest.txt"), &records)?;
    println!("wrote {} pair(s) and manifest to {}", records.len(), args.out.display());
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_kv(&text)?
        }
        None => TrainConfig::desk(),
    };
    if let Some(name) = &args.ablation {
        config.apply_ablation(name)?;
    }
    config.validate()?;
    // Read the manifest before creating anything so a bad path leaves no
    // partial output directory behind.
    let records = synth::read_manifest(&args.manifest)?;
    let outcome = trainer::train_loop(&records, &config, &args.out, args.resume.as_deref())?;
    println!(
        "trained {} step(s); final checkpoint {}; metrics {}",
        outcome.steps_run,
        outcome.final_checkpoint.display(),
        outcome.metrics_path.display()
    );
    Ok(0)
}

fn cmd_infer(args: InferArgs) -> Result<i32> {
    let (_, gen) = trainer::load_generator(&args.ckpt)?;
    let frame = BayerFrame::read_llr(&args.raw)?;
    let alpha = match args.alpha.or_else(|| frame.metadata_ratio()) {
        Some(a) if a.is_finite() && a > 0.0 => a,
        Some(a) => {
            return Err(Error::config(format!("exposure ratio must be finite and positive, got {a}")))
        }
        None => {
            return Err(Error::config(
                "raw file carries no exposure metadata; pass --alpha explicitly",
            ))
        }
    };
    check_stride(&gen, frame.height(), frame.width())?;
    let input = rawproc::amplify(&rawproc::pack(&frame), alpha, 1.0)?;

    let mut tape = Tape::new();
    let bound = gen.params.bind(&mut tape, false);
    let x = tape.leaf(&input);
    let (y, maps) = gen.forward(&mut tape, &bound, x)?;
    imageio::write_rgb8(&args.out, &clamp01(&tape.value_tensor(y))?)?;

    if let Some(dir) = &args.dump_attention {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Maps arrive in decoder order, deepest level first.
        let levels = gen.config.levels;
        for (j, &m) in maps.iter().enumerate() {
            let level = levels - 2 - j;
            let t = tape.value_tensor(m);
            let (_, _, mh, mw) = t.dims4()?;
            imageio::write_gray8(&dir.join(format!("attn_L{level}.png")), t.data(), mh, mw)?;
        }
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (_, gen) = trainer::load_generator(&args.ckpt)?;
    let records = synth::read_manifest(&args.manifest)?;
    let mut report = EvalReport::new();
    for record in &records {
        let name = record
            .raw
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| record.raw.display().to_string());
        match eval_one(&gen, record) {
            Ok((pred, gt)) => report.push_pair(&name, &pred, &gt, PsnrMode::Rgb),
            Err(e) => report.push_failure(&name, e.to_string()),
        }
    }
    std::fs::write(&args.report, report.to_csv()).map_err(|e| Error::io(&args.report, e))?;
    print!("{}", report.to_text());
    Ok(if report.failures.is_empty() { 0 } else { 1 })
}

/// Runs one pair through the generator; returns (clamped prediction, target).
fn eval_one(gen: &Generator, record: &ManifestRecord) -> Result<(Tensor, Tensor)> {
    let pair = synth::load_pair(record)?;
    let (_, _, gh, gw) = pair.gt.dims4()?;
    check_stride(gen, gh, gw)?;
    let mut tape = Tape::new();
    let bound = gen.params.bind(&mut tape, false);
    let x = tape.leaf(&pair.input);
    let (y, _) = gen.forward(&mut tape, &bound, x)?;
    Ok((clamp01(&tape.value_tensor(y))?, pair.gt))
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let resolution = parse_resolution(&args.resolution)?;
    if let Some(t) = args.threads {
        conv::set_threads(t);
    }
    let threads = conv::threads();
    let (_, gen) = trainer::load_generator(&args.ckpt)?;
    let report = bench::time_inference(&gen, resolution, args.warmup, args.iters, threads)?;
    let text = match args.format.as_str() {
        "text" => report.to_text(),
        "csv" => report.to_csv(),
        "jsonl" => report.to_jsonl(),
        other => {
            return Err(Error::config(format!(
                "unknown format '{other}' (expected text, csv, or jsonl)"
            )))
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{text}"),
    }
    Ok(0)
}

/// Rejects raw frame sizes the encoder/decoder cannot halve and restore.
fn check_stride(gen: &Generator, h: usize, w: usize) -> Result<()> {
    let m = gen.config.spatial_multiple() * 2;
    if h % m == 0 && w % m == 0 && h > 0 && w > 0 {
        return Ok(());
    }
    Err(Error::config(format!(
        "raw frame {h}x{w} is incompatible with the model stride: both sides must be \
         multiples of {m}; crop or pad the frame to e.g. {}x{}",
        h.max(1).div_ceil(m) * m,
        w.max(1).div_ceil(m) * m,
    )))
}

fn clamp01(t: &Tensor) -> Result<Tensor> {
    let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(t.shape().to_vec(), data)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let norm = s.trim().to_ascii_lowercase();
    let (a, b) = norm
        .split_once('x')
        .ok_or_else(|| Error::config(format!("size '{s}' must be HxW, e.g. 128x128")))?;
    let h = a
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::config(format!("size '{s}': height is not a whole number")))?;
    let w = b
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::config(format!("size '{s}': width is not a whole number")))?;
    Ok((h, w))
}

fn parse_alpha_range(s: &str) -> Result<(f32, f32)> {
    let (a, b) = s
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::config(format!("alpha range '{s}' must be LO:HI, e.g. 100:300")))?;
    let lo = a
        .trim()
        .parse::<f32>()
        .map_err(|_| Error::config(format!("alpha range '{s}': low bound is not a number")))?;
    let hi = b
        .trim()
        .parse::<f32>()
        .map_err(|_| Error::config(format!("alpha range '{s}': high bound is not a number")))?;
    if !lo.is_finite() || !hi.is_finite() || lo <= 1.0 || hi < lo {
        return Err(Error::config(format!(
            "alpha range {lo}:{hi} invalid: need 1 < LO <= HI (amplification ratios)"
        )));
    }
    Ok((lo, hi))
}

/// Accepts `N` or `NxN`; rectangular requests are rejected because the
/// latency harness times square frames only.
fn parse_resolution(s: &str) -> Result<usize> {
    let norm = s.trim().to_ascii_lowercase();
    if let Some((a, b)) = norm.split_once('x') {
        let h = a
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("resolution '{s}': height is not a whole number")))?;
        let w = b
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("resolution '{s}': width is not a whole number")))?;
        if h != w {
            return Err(Error::config(format!(
                "resolution {h}x{w}: the latency benchmark runs square frames only"
            )));
        }
        Ok(h)
    } else {
        norm.parse::<usize>()
            .map_err(|_| Error::config(format!("resolution '{s}' must be N or NxN")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_resolution_parsing() {
        assert_eq!(parse_size("128x128").unwrap(), (128, 128));
        assert_eq!(parse_size(" 64X32 ").unwrap(), (64, 32));
        assert!(parse_size("128").is_err());
        assert!(parse_size("axb").is_err());
        assert_eq!(parse_resolution("256").unwrap(), 256);
        assert_eq!(parse_resolution("512x512").unwrap(), 512);
        assert!(parse_resolution("512x256").is_err());
        assert!(parse_resolution("fast").is_err());
    }

    #[test]
    fn alpha_range_parsing() {
        assert_eq!(parse_alpha_range("100:300").unwrap(), (100.0, 300.0));
        assert_eq!(parse_alpha_range("250:250").unwrap(), (250.0, 250.0));
        assert!(parse_alpha_range("300:100").is_err());
        assert!(parse_alpha_range("0.5:2").is_err());
        assert!(parse_alpha_range("100").is_err());
        assert!(parse_alpha_range("a:b").is_err());
    }

    #[test]
    fn help_is_success_and_commands_documented() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        let help = cmd.render_long_help().to_string();
        for sub in ["synth", "train", "infer", "eval", "bench"] {
            assert!(help.contains(sub), "help must list {sub}");
        }
    }
}
