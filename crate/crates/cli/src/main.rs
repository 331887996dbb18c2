use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use simdiff::io::{self, Image};
use simdiff::sampler::{self, ModelDenoiser};
use simdiff::schedule::{Interpolation, ScheduleKind, ScheduleSpec, DEFAULT_LOGSNR_MAX, DEFAULT_LOGSNR_MIN};
use simdiff::trainer::{self, RunConfig, Trainer};
use simdiff::verify::{self, Check, Suite};
use simdiff::wavelet::{self, DwtStack};

#[derive(Parser)]
#[command(name = "simdiff", version, about = "Pixel-space diffusion with a U-ViT denoiser")]
struct Cli {
    /// Seed for every random draw of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set learning_rate=2e-4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Draw images from a checkpoint's EMA parameters.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class label; omit for unconditional samples.
        #[arg(long = "class")]
        class: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale 1 + η.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        noise_param: Option<f64>,
        #[arg(long, default_value_t = 8)]
        num: usize,
        /// Use the raw rather than the EMA parameters.
        #[arg(long)]
        raw_params: bool,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Log-SNR schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// 5/3 wavelet transform of a PGM/PPM image.
    ///
    /// Forward output ending in `.sdtn` stores the packed coefficients
    /// losslessly; any other extension writes a viewable mosaic.
    Dwt {
        #[arg(long)]
        inverse: bool,
        #[arg(long, default_value_t = 1)]
        levels: usize,
        input: PathBuf,
        output: PathBuf,
    },
    /// Central-difference gradient checks.
    GradCheck {
        /// A single primitive, or `uvit` for the end-to-end network.
        #[arg(long)]
        op: Option<String>,
    },
    /// Run self-check suites; exit status 1 if any check fails.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        /// Where `pooling-law` writes its noised image pyramid.
        #[arg(long, default_value = "verify-out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScheduleAction {
    /// Write `t,logsnr,alpha,sigma` at evenly spaced t as CSV.
    Dump {
        #[arg(long, value_enum, default_value_t = Kind::Shifted)]
        kind: Kind,
        #[arg(long, default_value_t = 256)]
        image_d: u32,
        #[arg(long, default_value_t = 64)]
        noise_d: u32,
        /// Upper reference resolution of the interpolated schedule.
        #[arg(long, default_value_t = 256)]
        noise_d_high: u32,
        #[arg(long, default_value_t = DEFAULT_LOGSNR_MIN, allow_hyphen_values = true)]
        logsnr_min: f64,
        #[arg(long, default_value_t = DEFAULT_LOGSNR_MAX, allow_hyphen_values = true)]
        logsnr_max: f64,
        #[arg(long)]
        high_at_end: bool,
        #[arg(long, default_value_t = 1001)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cosine,
    Shifted,
    Interpolated,
}

/// Failure classes mapped to exit codes.
enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<simdiff::Error>(),
                    Some(simdiff::Error::Config(_) | simdiff::Error::UnknownClass { .. })
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let seed = cli.seed;
    match cli.command {
        Command::Train { config, set, out, resume, log_every } => train(config, set, &out, resume, log_every, seed),
        Command::Sample { ckpt, class, steps, guidance, noise_param, num, raw_params, out } => {
            sample(&ckpt, class, steps, guidance, noise_param, num, raw_params, &out, seed.unwrap_or(0))
        }
        Command::Schedule { action } => schedule(action),
        Command::Dwt { inverse, levels, input, output } => dwt(inverse, levels, &input, &output),
        Command::GradCheck { op } => grad_check(op, seed.unwrap_or(0)),
        Command::Verify { suite, out } => {
            let suite = Suite::parse(&suite)?;
            report(&verify::run(suite, seed.unwrap_or(0), Some(&out))?)
        }
    }
}

fn report(checks: &[Check]) -> Result<Outcome> {
    for c in checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { Outcome::Pass } else { Outcome::Fail })
}

fn train(
    config: Option<PathBuf>,
    mut set: Vec<String>,
    out: &Path,
    resume: Option<PathBuf>,
    log_every: u64,
    seed: Option<u64>,
) -> Result<Outcome> {
    let mut trainer = match resume {
        Some(ckpt) => {
            if !set.is_empty() || seed.is_some() {
                bail!("--set and --seed cannot change a resumed run");
            }
            Trainer::resume(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?
        }
        None => {
            let text = match &config {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            if let Some(s) = seed {
                set.push(format!("seed={s}"));
            }
            let run = RunConfig::parse(&text, &set)?;
            Trainer::new(run)?
        }
    };
    let model = &trainer.model;
    info!(
        "{} parameters, schedule {}, {} steps of batch {}",
        model.param_count(),
        trainer.run.schedule,
        trainer.run.train.num_train_steps,
        trainer.run.train.batch_size
    );
    let history = trainer.train(Some(out), |s| {
        if log_every > 0 && (s.step % log_every == 0) {
            info!("step {:>6}  loss {:.5}  lr {:.2e}  grad_norm {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        }
    })?;
    if let Some(last) = history.last() {
        info!("finished at step {} with loss {:.5}", last.step + 1, last.loss);
    }
    info!("checkpoint written to {}", out.join("last.sdck").display());
    Ok(Outcome::Pass)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    class: Option<usize>,
    steps: Option<usize>,
    guidance: Option<f64>,
    noise_param: Option<f64>,
    num: usize,
    raw_params: bool,
    out: &Path,
    seed: u64,
) -> Result<Outcome> {
    let (state, run) = trainer::load_checkpoint(ckpt)?;
    let model = run.build_model()?;
    let mut cfg = run.sampler.clone();
    cfg.num_steps = steps.unwrap_or(cfg.num_steps);
    cfg.guidance_scale = guidance.unwrap_or(cfg.guidance_scale);
    cfg.noise_param = noise_param.unwrap_or(cfg.noise_param);
    let params = if raw_params { &state.params } else { &state.ema };
    let den = ModelDenoiser { model: &model, params };
    let (r, c) = (run.model.image_size, run.model.in_channels);
    let classes = vec![class; num];
    let x = sampler::sample(&den, &run.schedule, &cfg, &[num, r, r, c], &classes, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    for i in 0..num {
        let img = x.slice_outer(i, 1)?.reshape(&[r, r, c])?;
        Image::from_tensor(&img)?.save(&out.join(format!("sample_{i:03}.{ext}")))?;
    }
    io::save_tensors(&out.join("samples.sdtn"), &[("samples".to_string(), x)])?;
    info!("{num} samples written to {}", out.display());
    Ok(Outcome::Pass)
}

fn schedule(action: ScheduleAction) -> Result<Outcome> {
    let ScheduleAction::Dump { kind, image_d, noise_d, noise_d_high, logsnr_min, logsnr_max, high_at_end, points, out } =
        action;
    let kind = match kind {
        Kind::Cosine => ScheduleKind::Cosine,
        Kind::Shifted => ScheduleKind::Shifted { noise_d },
        Kind::Interpolated => ScheduleKind::Interpolated { noise_d_low: noise_d, noise_d_high },
    };
    let interp = if high_at_end { Interpolation::HighAtEnd } else { Interpolation::LowAtEnd };
    let spec = ScheduleSpec::new(kind, image_d, logsnr_min, logsnr_max)?.with_interpolation(interp);
    if points < 2 {
        bail!(simdiff::Error::Config("--points must be at least 2".into()));
    }
    let mut csv = String::from("t,logsnr,alpha,sigma\n");
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let l = spec.logsnr(t)?;
        let a = spec.alpha_sigma(t)?;
        csv += &format!("{t:.16e},{l:.16e},{:.16e},{:.16e}\n", a.alpha, a.sigma);
    }
    match out {
        Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(Outcome::Pass)
}

fn is_tensor_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "sdtn")
}

fn dwt(inverse: bool, levels: usize, input: &Path, output: &Path) -> Result<Outcome> {
    if inverse {
        if !is_tensor_file(input) {
            bail!(simdiff::Error::Config("--inverse reads packed coefficients from a .sdtn file".into()));
        }
        let named = io::load_tensors(input)?;
        let packed = named
            .into_iter()
            .find(|(n, _)| n == "dwt53")
            .map(|(_, t)| t)
            .with_context(|| format!("{} has no dwt53 tensor", input.display()))?;
        let f = 1 << levels;
        let (base_h, base_w) = (packed.shape()[0] * f, packed.shape()[1] * f);
        let img = wavelet::dwt53_inverse_2d(&DwtStack { levels, base_h, base_w, packed })?;
        Image::from_tensor(&img.map(|v| v.clamp(-1.0, 1.0)))?.save(output)?;
    } else {
        let img = Image::load(input)?.to_tensor();
        let stack = wavelet::dwt53_forward_2d(&img, levels)?;
        if is_tensor_file(output) {
            io::save_tensors(output, &[("dwt53".to_string(), stack.packed)])?;
        } else {
            let m = wavelet::mosaic(&stack)?;
            let (ch, cw) = (stack.base_h >> levels, stack.base_w >> levels);
            let w = stack.base_w;
            let c = m.last_dim();
            // details are small around zero, so they are stretched for display
            let shown = simdiff::Tensor::from_fn(m.shape(), |i| {
                let (y, x) = (i / (w * c), (i / c) % w);
                let v = m.data()[i];
                if y < ch && x < cw {
                    v
                } else {
                    (4.0 * v).clamp(-1.0, 1.0)
                }
            });
            Image::from_tensor(&shown)?.save(output)?;
        }
    }
    info!("wrote {}", output.display());
    Ok(Outcome::Pass)
}

fn grad_check(op: Option<String>, seed: u64) -> Result<Outcome> {
    let mut checks = Vec::new();
    let ops: Vec<String> = match op {
        Some(o) => vec![o],
        None => verify::GRAD_OPS.iter().map(|s| s.to_string()).chain(["uvit".to_string()]).collect(),
    };
    for op in ops {
        let check = if op == "uvit" {
            let r = verify::grad_check_uvit(seed, 3)?;
            Check::at_most("uvit", r.max_rel_err(), 1e-3)
        } else {
            Check::at_most(op.as_str(), verify::grad_check_op(&op, seed)?.max_rel_err(), 1e-4)
        };
        checks.push(check);
    }
    report(&checks)
}
