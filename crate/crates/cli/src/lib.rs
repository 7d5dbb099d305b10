//! The `seasight` command line. [`run`] holds all behaviour so tests can
//! drive it in-process; the binary only forwards its arguments and exit code.
//!
//! Exit codes: [`EXIT_OK`], [`EXIT_CHECK_FAILED`], [`EXIT_USAGE`],
//! [`EXIT_DOMAIN`], [`EXIT_IO`].

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use seasight::dcp::{compute_b, estimate_background_light, estimate_transmission_dcp, recover_clear};
use seasight::gradcheck::{run_suite, DEFAULT_SEEDS, TOLERANCE};
use seasight::imaging::{synthesize_hazy, transmission_per_channel, AttenuationCoeff, BackgroundLight, ClearImage, HazyImage};
use seasight::io::{read_depth, read_run_config, save_weights, write_metrics_csv, Netpbm};
use seasight::stn::{bilinear_sample, make_grid, Homography};
use seasight::trainer::{
    train_selfsup_deblur, train_stn_classifier, ClassifierMode, Metrics, TrainConfig, LIGHT_FRACTION,
};
use seasight::{Error, Grid};

pub const EXIT_OK: i32 = 0;
/// `gradcheck` found an operation above tolerance.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Bad command line or out-of-range argument.
pub const EXIT_USAGE: i32 = 2;
/// Domain, dimension or singular-transform error.
pub const EXIT_DOMAIN: i32 = 3;
/// Unreadable, unwritable or malformed file.
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "seasight", version, about = "Underwater haze synthesis, dehazing and perspective warps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a hazy image from a clear image and a depth map.
    Synth {
        #[arg(long)]
        clear: PathBuf,
        /// 16-bit PGM with a "# depth-scale=<meters>" comment.
        #[arg(long)]
        depth: PathBuf,
        /// Attenuation per channel, comma separated.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        beta: Vec<f64>,
        /// Background light per channel, comma separated.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        bg: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dark channel prior dehazing.
    Dehaze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 15)]
        patch: usize,
        #[arg(long, default_value_t = 0.95, allow_hyphen_values = true)]
        omega: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the estimated transmission as a grey image.
        #[arg(long)]
        save_t: Option<PathBuf>,
    },
    /// Warp an image by a homography (t11,t12,t13,t21,t22,t23,t31,t32).
    Warp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        theta: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Self-supervised training of the deblurring model.
    TrainDeblur {
        /// key = value file; unspecified keys keep the desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for metrics.csv and weights.dsow.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train the shapes classifier with or without a transformer.
    StnDemo {
        #[arg(long, default_value = "perspective", value_parser = parse_mode)]
        mode: ClassifierMode,
        /// key = value file; unspecified keys keep the shapes defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<ClassifierMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Parameter(_) => EXIT_USAGE,
        Error::Dimension(_) | Error::Domain(_) | Error::SingularTransform(_) | Error::Evaluation(_) => EXIT_DOMAIN,
    }
}

/// Parse `args` (program name first), run the command, and return the exit
/// code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let help = matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion);
            if help {
                let _ = write!(out, "{}", e.render());
                return EXIT_OK;
            }
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

type CmdResult = seasight::Result<i32>;

fn execute(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Synth {
            clear,
            depth,
            beta,
            bg,
            out: dest,
        } => synth(&clear, &depth, beta, bg, &dest, out),
        Command::Dehaze {
            input,
            patch,
            omega,
            out: dest,
            save_t,
        } => dehaze(&input, patch, omega, &dest, save_t.as_deref(), out),
        Command::Warp { input, theta, out: dest } => warp(&input, &theta, &dest),
        Command::Gradcheck { seeds } => gradcheck(seeds, out),
        Command::TrainDeblur { config, out: dir } => {
            let config = load_config(config.as_deref(), TrainConfig::desk())?;
            let (model, metrics) = train_selfsup_deblur(&config)?;
            finish_training(&dir, &metrics, &model.params, out)
        }
        Command::StnDemo { mode, config, out: dir } => {
            let config = load_config(config.as_deref(), TrainConfig::shapes_desk())?;
            let (model, metrics) = train_stn_classifier(mode, &config)?;
            finish_training(&dir, &metrics, &model.params, out)
        }
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) {
    // a closed stdout must not turn a finished computation into a failure
    let _ = writeln!(out, "{line}");
}

fn fmt_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

/// Write `grid` with the bit depth of the image it came from.
fn write_like(dest: &Path, grid: &Grid, source: &Netpbm) -> seasight::Result<()> {
    Netpbm::from_grid(grid, source.maxval)?.write(dest)
}

fn synth(clear: &Path, depth: &Path, beta: Vec<f64>, bg: Vec<f64>, dest: &Path, out: &mut dyn Write) -> CmdResult {
    let src = Netpbm::read(clear)?;
    let j = ClearImage::new(src.to_grid())?;
    let d = read_depth(depth)?;
    let c = j.grid().channels();
    if beta.len() != c || bg.len() != c {
        return Err(Error::Parameter(format!(
            "--beta and --bg need {c} values for a {c}-channel image, got {} and {}",
            beta.len(),
            bg.len()
        )));
    }
    let t = transmission_per_channel(&d, &AttenuationCoeff::new(beta)?)?;
    let hazy = synthesize_hazy(&j, &t, &BackgroundLight::new(bg)?)?;
    write_like(dest, hazy.grid(), &src)?;
    say(out, format_args!("mean transmission: {}", fmt_values(&t.channel_means())));
    Ok(EXIT_OK)
}

fn dehaze(input: &Path, patch: usize, omega: f64, dest: &Path, save_t: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::Parameter(format!("--omega must lie in (0, 1], got {omega}")));
    }
    let src = Netpbm::read(input)?;
    let hazy = HazyImage::new(src.to_grid())?;
    let a = estimate_background_light(hazy.grid(), patch, LIGHT_FRACTION)?;
    let t = estimate_transmission_dcp(hazy.grid(), &a, patch, omega)?;
    let b = compute_b(&hazy, &t, &a)?;
    let j = recover_clear(b.grid(), hazy.grid())?.map(|v| v.clamp(0.0, 1.0));
    write_like(dest, &j, &src)?;
    if let Some(path) = save_t {
        Netpbm::from_grid(t.grid(), src.maxval)?.write(path)?;
    }
    say(out, format_args!("background light: {}", fmt_values(a.values())));
    say(out, format_args!("mean transmission: {}", fmt_values(&t.channel_means())));
    Ok(EXIT_OK)
}

fn warp(input: &Path, theta: &[f64], dest: &Path) -> CmdResult {
    let theta: [f64; 8] = theta
        .try_into()
        .map_err(|_| Error::Parameter(format!("--theta needs 8 values, got {}", theta.len())))?;
    let h = Homography::new(theta)?;
    let src = Netpbm::read(input)?;
    let img = src.to_grid();
    let grid = make_grid(&h, img.height(), img.width())?;
    write_like(dest, &bilinear_sample(&img, &grid)?, &src)?;
    Ok(EXIT_OK)
}

fn gradcheck(seeds: u64, out: &mut dyn Write) -> CmdResult {
    if seeds == 0 {
        return Err(Error::Parameter("--seeds must be positive".into()));
    }
    let reports = run_suite(seeds)?;
    for r in &reports {
        say(
            out,
            format_args!(
                "{:<22} max rel err {:.3e} over {} coordinates, {} seeds  {}",
                r.name,
                r.max_rel_err,
                r.coords,
                r.seeds,
                if r.passed() { "ok" } else { "FAIL" }
            ),
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        say(out, format_args!("all {} operations below {TOLERANCE:e}", reports.len()));
        Ok(EXIT_OK)
    } else {
        say(out, format_args!("{failed} operation(s) at or above {TOLERANCE:e}"));
        Ok(EXIT_CHECK_FAILED)
    }
}

fn load_config(path: Option<&Path>, base: TrainConfig) -> seasight::Result<TrainConfig> {
    match path {
        Some(p) => read_run_config(p, base),
        None => {
            base.validate()?;
            Ok(base)
        }
    }
}

fn finish_training(dir: &Path, metrics: &Metrics, params: &impl seasight::tensor::ParamSet, out: &mut dyn Write) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    let weights = dir.join("weights.dsow");
    write_metrics_csv(&csv, metrics)?;
    save_weights(&weights, params)?;
    if let Some(r) = metrics.last() {
        say(out, format_args!("epoch {} loss {:.6}", r.epoch, r.loss_total));
        if let (Some(p), Some(h)) = (r.psnr_pred, r.psnr_hazy) {
            say(out, format_args!("median psnr {p:.2} dB (hazy input {h:.2} dB)"));
        }
        if let Some(a) = r.accuracy {
            say(out, format_args!("test accuracy {a:.4}"));
        }
    }
    say(out, format_args!("wrote {} and {}", csv.display(), weights.display()));
    Ok(EXIT_OK)
}
