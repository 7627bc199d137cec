use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use sbse::datagen::{build_manifest, read_manifest, render_mix_files, synth_noise, synth_speechlike, write_manifest, NoiseKind};
use sbse::dsp::StftConfig;
use sbse::engine::{enhance_file, enhance_stream, SessionOptions};
use sbse::features::FeatureConfig;
use sbse::metrics::{clip_id, evaluate_corpus};
use sbse::model_store::{load_model_file, save_model_file};
use sbse::neural::{tiny_gradient_check, ModelBundle, NetConfig, TrainConfig};
use sbse::pipeline::{dataset_from_mixes, train_bundle, SyntheticCorpus};
use sbse::wav::{write_wav, WavFormat};

/// Streaming speech enhancement with an output-delayed subband LSTM.
#[derive(Parser, Debug)]
#[command(name = "sbse", version, arg_required_else_help = true)]
struct Cli {
    /// Model file to load (or, for `train`, to write).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Seed for initialization, shuffling and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output delay in frames; overrides the model's for enhancement.
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a manifest or on a synthetic corpus.
    Train(TrainArgs),
    /// Enhance a WAV file, or every WAV file of a directory.
    Enhance {
        input: PathBuf,
        output: PathBuf,
        /// Write 32-bit float instead of 16-bit PCM.
        #[arg(long)]
        float: bool,
    },
    /// Enhance raw 16-bit little-endian mono PCM from stdin to stdout.
    Stream {
        /// Log per-frame processing time to stderr.
        #[arg(long)]
        timing: bool,
    },
    /// Build mixture corpora.
    #[command(subcommand)]
    Mix(MixCommand),
    /// Score enhanced clips against the targets of a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<clip id>.wav` files.
        #[arg(long)]
        enhanced: PathBuf,
        /// Samples to drop from the start of each estimate (0 for `enhance` output).
        #[arg(long, default_value_t = 0)]
        shift: usize,
        /// Per-clip CSV destination; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
    },
    /// Compare BPTT gradients with finite differences on a tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Run the built-in invariant checks.
    Selfcheck,
    /// Print the model configuration and parameter count.
    Info,
}

#[derive(Subcommand, Debug)]
enum MixCommand {
    /// Write synthetic speech and noise source directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        speech_clips: usize,
        #[arg(long, default_value_t = 5)]
        noise_clips: usize,
        #[arg(long, default_value_t = 6.0)]
        seconds: f64,
    },
    /// Pair speech and noise files into a manifest.
    Plan {
        #[arg(long)]
        speech: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        /// Hours of speech to cover.
        #[arg(long)]
        hours: f64,
        #[arg(long, default_value_t = sbse::datagen::DEFAULT_REVERB_FRACTION)]
        reverb_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every manifest record to `noisy/` and `clean/` WAV files.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest of training mixtures; a synthetic corpus is used otherwise.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Synthetic corpus size in clips.
    #[arg(long, default_value_t = 120)]
    clips: usize,
    /// Synthetic clip length in seconds.
    #[arg(long, default_value_t = 10.0)]
    clip_seconds: f64,
    #[arg(long, default_value_t = 15)]
    neighbors: usize,
    #[arg(long, default_value_t = 384)]
    hidden1: usize,
    #[arg(long, default_value_t = 256)]
    hidden2: usize,
    /// Training window in frames.
    #[arg(long, default_value_t = 192)]
    seq_len: usize,
    /// Frames smoothed by the running-mean normalization.
    #[arg(long, default_value_t = 192)]
    norm_frames: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Clip the global gradient norm.
    #[arg(long)]
    clip: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")?;
    let opts = SessionOptions { threads, tau: cli.tau };
    match cli.command {
        Command::Train(args) => train(&args, cli.model.as_deref(), cli.seed, cli.tau),
        Command::Enhance { input, output, float } => {
            let model = load(cli.model.as_deref())?;
            let format = if float { WavFormat::Float32 } else { WavFormat::Pcm16 };
            enhance(&input, &output, model, &opts, format)
        }
        Command::Stream { timing } => {
            let model = load(cli.model.as_deref())?;
            let stdin = io::stdin().lock();
            let stdout = io::stdout().lock();
            let stats = enhance_stream(model, stdin, stdout, &opts, |i, dt| {
                if timing {
                    eprintln!("frame {i}: {:.3} ms", dt.as_secs_f64() * 1e3);
                }
            })?;
            if timing {
                eprintln!(
                    "{} frames, mean {:.3} ms, max {:.3} ms",
                    stats.frames,
                    stats.mean_frame_ms(),
                    stats.max_frame_time.as_secs_f64() * 1e3
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Mix(cmd) => mix(cmd, cli.seed),
        Command::Eval {
            manifest,
            enhanced,
            shift,
            csv,
            sample_rate,
        } => {
            let specs = read_manifest(&manifest)?;
            let report = evaluate_corpus(&specs, &enhanced, sample_rate, shift)?;
            match csv {
                Some(path) => {
                    fs::write(&path, report.to_csv())?;
                    print!("{}", report.to_lines());
                }
                None => print!("{}", report.to_csv()),
            }
            for (id, why) in &report.missing {
                eprintln!("missing {id}: {why}");
            }
            Ok(if report.is_complete() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Gradcheck { seeds } => {
            let mut worst = 0.0f64;
            for seed in cli.seed..cli.seed + seeds {
                let r = tiny_gradient_check(seed)?;
                println!("seed {seed}: {} coordinates, max relative error {:.3e}", r.coordinates, r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            Ok(if worst <= 1e-4 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Selfcheck => {
            let checks = sbse::selfcheck::run_all(cli.seed);
            for c in &checks {
                println!("{c}");
            }
            Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Info => {
            let model = match cli.model.as_deref() {
                Some(p) => load_model_file(p).with_context(|| format!("loading {}", p.display()))?,
                None => ModelBundle::<f32>::default_random(cli.seed),
            };
            print_info(&model, cli.model.as_deref());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load(path: Option<&Path>) -> Result<Arc<ModelBundle<f32>>> {
    let path = path.context("--model is required")?;
    let model = load_model_file(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Arc::new(model))
}

fn print_info(model: &ModelBundle<f32>, path: Option<&Path>) {
    let (n, f, s, c) = (&model.net, &model.features, &model.stft, &model.compression);
    println!("model: {}", path.map_or_else(|| "default (untrained)".into(), |p| p.display().to_string()));
    println!("network: input {} -> LSTM {} -> LSTM {} -> dense {}", n.input_dim, n.hidden1, n.hidden2, n.output_dim);
    println!("delay: {} frames", n.tau);
    println!(
        "features: N={} K={} T={} window hop={} L={}",
        f.neighbors, f.bins, f.seq_len, f.overlap_frames, f.norm_frames
    );
    println!("stft: fft={} hop={} rate={} Hz", s.fft_size, s.hop, s.sample_rate);
    println!("compression: K={} C={}", c.ceiling, c.steepness);
    println!(
        "latency: {} samples ({:.1} ms)",
        sbse::engine::algorithmic_latency(model, n.tau),
        1e3 * sbse::engine::algorithmic_latency(model, n.tau) as f64 / s.sample_rate as f64
    );
    println!("parameters: {}", model.param_count());
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn enhance(input: &Path, output: &Path, model: Arc<ModelBundle<f32>>, opts: &SessionOptions, format: WavFormat) -> Result<ExitCode> {
    if !input.is_dir() {
        let log = enhance_file(input, model, output, opts, format).with_context(|| format!("enhancing {}", input.display()))?;
        info!(
            "{}: {} samples, tau {}, {} latency samples removed, {:.2} s",
            input.display(),
            log.samples,
            log.tau,
            log.latency_removed,
            log.elapsed.as_secs_f64()
        );
        return Ok(ExitCode::SUCCESS);
    }
    fs::create_dir_all(output)?;
    let files = wav_files(input)?;
    if files.is_empty() {
        bail!("no .wav files in {}", input.display());
    }
    let session_opts = SessionOptions { threads: 1, tau: opts.tau };
    files.par_iter().try_for_each(|f| -> Result<()> {
        let dest = output.join(f.file_name().expect("file has a name"));
        let log = enhance_file(f, model.clone(), &dest, &session_opts, format).with_context(|| format!("enhancing {}", f.display()))?;
        info!("{}: {} samples, {} latency samples removed", f.display(), log.samples, log.latency_removed);
        Ok(())
    })?;
    println!("enhanced {} files into {}", files.len(), output.display());
    Ok(ExitCode::SUCCESS)
}

fn train(args: &TrainArgs, out: Option<&Path>, seed: u64, tau: Option<usize>) -> Result<ExitCode> {
    let out = out.context("--model is required: where to write the trained model")?;
    let tau = tau.unwrap_or(2);
    let stft = StftConfig::default();
    let mut features = FeatureConfig::new(args.neighbors, stft.bins(), args.seq_len, tau)?;
    features.norm_frames = args.norm_frames;
    let net = NetConfig::new(features.input_dim(), args.hidden1, args.hidden2, 2, tau)?;
    let model = ModelBundle::<f32>::init(net, features, stft, Default::default(), seed)?;
    let mixes = match &args.manifest {
        Some(path) => {
            let specs = read_manifest(path)?;
            info!("rendering {} manifest records", specs.len());
            specs
                .par_iter()
                .map(|s| render_mix_files(s, model.stft.sample_rate))
                .collect::<sbse::Result<Vec<_>>>()?
        }
        None => {
            info!("rendering {} synthetic clips of {} s", args.clips, args.clip_seconds);
            SyntheticCorpus::new(args.clips, args.clip_seconds, &[-5.0, 0.0, 5.0], seed).render()?
        }
    };
    let data = dataset_from_mixes(&model, &mixes)?;
    info!("{} training sequences", sbse::features::SampleSource::len(&data));
    let mut cfg = TrainConfig {
        batch_size: args.batch,
        epochs: args.epochs,
        seed,
        max_steps: args.steps,
        grad_clip: args.clip,
        ..TrainConfig::default()
    };
    cfg.adam.lr = args.lr;
    let (trained, outcome) = train_bundle(model, &data, &cfg, |s| {
        if s.step % 50 == 0 {
            info!("epoch {} step {} loss {:.5}", s.epoch, s.step, s.loss);
        }
    })?;
    save_model_file(&trained, out)?;
    let last = outcome.log.last().map_or(f64::NAN, |e| e.mean_loss);
    println!("{} steps, last epoch mean loss {last:.5}, wrote {}", outcome.steps, out.display());
    Ok(ExitCode::SUCCESS)
}

fn mix(cmd: MixCommand, seed: u64) -> Result<ExitCode> {
    match cmd {
        MixCommand::Synth {
            out,
            speech_clips,
            noise_clips,
            seconds,
        } => {
            let (speech_dir, noise_dir) = (out.join("speech"), out.join("noise"));
            fs::create_dir_all(&speech_dir)?;
            fs::create_dir_all(&noise_dir)?;
            let rate = 16_000;
            (0..speech_clips).into_par_iter().try_for_each(|i| {
                let x = synth_speechlike(seconds, rate, seed.wrapping_add(i as u64));
                write_wav(speech_dir.join(format!("speech{i:04}.wav")), &x, rate, WavFormat::Pcm16)
            })?;
            let len = (seconds * rate as f64).round() as usize;
            (0..noise_clips).into_par_iter().try_for_each(|i| {
                let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
                let x = synth_noise(kind, len, rate, seed.wrapping_add(1_000_003 + i as u64));
                write_wav(noise_dir.join(format!("{}{i:04}.wav", kind.name())), &x, rate, WavFormat::Pcm16)
            })?;
            println!("wrote {speech_clips} speech and {noise_clips} noise clips under {}", out.display());
        }
        MixCommand::Plan {
            speech,
            noise,
            hours,
            reverb_fraction,
            out,
        } => {
            let specs = build_manifest(&speech, &noise, hours, reverb_fraction, seed)?;
            fs::write(&out, write_manifest(&specs))?;
            println!("wrote {} records to {}", specs.len(), out.display());
        }
        MixCommand::Render {
            manifest,
            out,
            sample_rate,
        } => {
            let specs = read_manifest(&manifest)?;
            let (noisy_dir, clean_dir) = (out.join("noisy"), out.join("clean"));
            fs::create_dir_all(&noisy_dir)?;
            fs::create_dir_all(&clean_dir)?;
            specs.par_iter().enumerate().try_for_each(|(i, s)| -> Result<()> {
                let m = render_mix_files(s, sample_rate)?;
                let id = clip_id(i);
                write_wav(noisy_dir.join(format!("{id}.wav")), &m.mixture, sample_rate, WavFormat::Pcm16)?;
                write_wav(clean_dir.join(format!("{id}.wav")), &m.speech, sample_rate, WavFormat::Pcm16)?;
                Ok(())
            })?;
            println!("rendered {} records under {}", specs.len(), out.display());
        }
    }
    io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}
