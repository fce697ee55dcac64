//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage, 2 parse/validation, 3 numerical check failure.
//! Failures print a single JSON object `{"error": kind, "message": ...}` on stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::caps::caps_step;
use crate::detection::BBox;
use crate::ema::{ema_step_with, WeightVector};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::io::dump::parse_labels;
use crate::io::{
    load_config, load_state, read_dump, read_tensor, save_state, write_labels, write_tensor, DType,
    RunConfig, Scenario, Tensor,
};
use crate::losses::{loss_breakdown, Domain, DEFAULT_LAMBDA_D};
use crate::par::Exec;
use crate::report::simulate;
use crate::saliency::{rasterize_weighted, reweight_features_with};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pseudoalign", version, about = "Adaptive pseudo-label selection and domain-alignment numerics")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a fresh threshold state from a run configuration.
    InitState {
        /// Run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run adaptive selection over a detection dump, one iteration per image.
    Select {
        #[arg(long)]
        dump: PathBuf,
        /// Threshold state; updated in place unless --state-out is given.
        #[arg(long)]
        state: PathBuf,
        /// Pseudo-label JSON Lines output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Rasterize pseudo labels into a saliency tensor.
    Saliency {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        stride: u32,
        /// Grid size as HxW.
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        /// Image to rasterize when the label file holds several.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DTypeArg,
    },
    /// Reweight a [C,H,W] feature tensor by a [H,W] saliency tensor.
    Reweight {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        saliency: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One teacher update: alpha * teacher + (1 - alpha) * student.
    Ema {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the adversarial loss breakdown for one image as JSON.
    Losses {
        /// One [C,H,W] tensor per scale, finest first.
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        /// One [H,W] tensor per scale.
        #[arg(long, num_args = 1.., required = true)]
        saliency: Vec<PathBuf>,
        #[arg(long, value_enum)]
        domain: DomainArg,
        /// [S, 2C+2] discriminator parameters.
        #[arg(long)]
        disc: PathBuf,
        /// Per-scale strides; defaults to 8, 16, 32, ...
        #[arg(long, value_delimiter = ',')]
        strides: Vec<u32>,
        #[arg(long, default_value_t = 0.0)]
        l_sup: f64,
        #[arg(long, default_value_t = 0.0)]
        l_unsup: f64,
        /// Run configuration supplying the loss weights.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare adaptive selection against static thresholds on a synthetic stream.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Number of images (one selection iteration each); overrides the scenario.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Threshold trajectory CSV; defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_D)]
        lambda_d: f64,
        /// Print every case, not just the summary.
        #[arg(long)]
        verbose: bool,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    Ok((h, w))
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    NumericFailure,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = writeln!(
                        stderr,
                        "{}",
                        json!({"error": "usage", "message": e.render().to_string().trim_end()})
                    );
                    EXIT_USAGE
                }
            };
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match execute(cli.command, exec, stdout) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::NumericFailure) => EXIT_NUMERIC,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json(&e));
            EXIT_INVALID
        }
    }
}

pub fn error_json(e: &Error) -> String {
    let mut v = json!({"error": e.kind(), "message": e.to_string()});
    if let Error::Parse { line: Some(l), .. } = e {
        v["line"] = json!(l);
    }
    v.to_string()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn execute(cmd: Command, exec: Exec, stdout: &mut dyn Write) -> Result<Outcome> {
    match cmd {
        Command::InitState { config, out } => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => RunConfig::default(),
            };
            save_state(out, &cfg.threshold_state())?;
        }
        Command::Select { dump, state, out, state_out } => {
            let mut st = load_state(&state)?;
            let records = read_dump(&dump)?;
            let mut sets = Vec::with_capacity(records.len());
            for rec in &records {
                let batch = rec.to_batch().validate(st.num_classes())?;
                let (set, next) = caps_step(&batch, &st);
                sets.push(set);
                st = next;
            }
            if records.is_empty() {
                // An empty dump is one iteration over an empty batch.
                st = caps_step(&crate::detection::PredictionBatch::new("", (1, 1)), &st).1;
            }
            let mut w = create(&out)?;
            write_labels(&mut w, &sets)?;
            w.flush()?;
            save_state(state_out.as_ref().unwrap_or(&state), &st)?;
            let kept: usize = sets.iter().map(|s| s.len()).sum();
            writeln!(stdout, "{}", json!({"images": sets.len(), "kept": kept, "k": st.iter, "per_class": st.per_class}))?;
        }
        Command::Saliency { labels, stride, grid, out, image_id, dtype } => {
            if stride == 0 {
                return Err(Error::Range("stride must be positive".into()));
            }
            let records = parse_labels(BufReader::new(File::open(&labels)?))?;
            let rec = match image_id {
                Some(id) => records
                    .iter()
                    .find(|r| r.image_id == id)
                    .ok_or_else(|| Error::parse(None, format!("no labels for image '{id}'")))?,
                None if records.len() <= 1 => match records.first() {
                    Some(r) => r,
                    None => {
                        let t = Tensor::new(dtype.into(), vec![grid.0 as u32, grid.1 as u32], vec![0.0; grid.0 * grid.1])?;
                        write_tensor(&out, &t)?;
                        writeln!(stdout, "{}", json!({"image_id": null, "boxes": 0, "skipped": 0}))?;
                        return Ok(Outcome::Ok);
                    }
                },
                None => {
                    return Err(Error::parse(None, "label file holds several images; pass --image-id"));
                }
            };
            let boxes: Vec<(BBox, f64)> = rec
                .labels
                .iter()
                .map(|l| (BBox::new(l.x1, l.y1, l.x2, l.y2), l.conf))
                .collect();
            let r = rasterize_weighted(&boxes, stride, grid);
            write_tensor(&out, &Tensor::from_saliency(&r.saliency, dtype.into())?)?;
            writeln!(stdout, "{}", json!({"image_id": rec.image_id, "boxes": boxes.len(), "skipped": r.skipped}))?;
        }
        Command::Reweight { features, saliency, out } => {
            let ft = read_tensor(&features)?;
            // Strides are not stored in tensors; both inputs share the same one.
            let f = ft.to_feature_map(1)?;
            let m = read_tensor(&saliency)?.to_saliency(1)?;
            let r = reweight_features_with(&f, &m, exec)?;
            write_tensor(&out, &Tensor::from_feature_map(&r, ft.dtype)?)?;
        }
        Command::Ema { teacher, student, alpha, out } => {
            let t = read_tensor(&teacher)?;
            let s = read_tensor(&student)?;
            let tw = WeightVector::new(layout_id(&t), t.values.clone())?;
            let sw = WeightVector::new(layout_id(&s), s.values)?;
            let mixed = ema_step_with(&tw, &sw, alpha, exec)?;
            write_tensor(&out, &Tensor::new(t.dtype, t.dims, mixed.values)?)?;
        }
        Command::Losses { features, saliency, domain, disc, strides, l_sup, l_unsup, config } => {
            if features.len() != saliency.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} feature tensors vs {} saliency tensors",
                    features.len(),
                    saliency.len()
                )));
            }
            let strides = if strides.is_empty() {
                (0..features.len()).map(|s| 8u32 << s).collect()
            } else if strides.len() == features.len() {
                strides
            } else {
                return Err(Error::ShapeMismatch(format!(
                    "{} strides for {} scales",
                    strides.len(),
                    features.len()
                )));
            };
            let fs = features
                .iter()
                .zip(&strides)
                .map(|(p, &s)| read_tensor(p)?.to_feature_map(s))
                .collect::<Result<Vec<_>>>()?;
            let ms = saliency
                .iter()
                .zip(&strides)
                .map(|(p, &s)| read_tensor(p)?.to_saliency(s))
                .collect::<Result<Vec<_>>>()?;
            let d = read_tensor(&disc)?.to_discriminator()?;
            let w = match config {
                Some(p) => load_config(p)?.loss_weights(),
                None => RunConfig::default().loss_weights(),
            };
            if !(l_sup.is_finite() && l_unsup.is_finite()) {
                return Err(Error::Range("detection losses must be finite".into()));
            }
            let b = loss_breakdown(&fs, &ms, &d, domain.into(), l_sup, l_unsup, &w)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&b).expect("breakdown serializes"))?;
        }
        Command::Simulate { scenario, iters, out, csv } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(n) = iters {
                sc.num_images = n;
            }
            let report = simulate(&sc, exec)?;
            let csv = csv.unwrap_or_else(|| out.with_extension("csv"));
            std::fs::write(&out, report.to_json())?;
            std::fs::write(&csv, report.trajectory_csv())?;
            writeln!(
                stdout,
                "{}",
                json!({
                    "report": out.display().to_string(),
                    "trajectory": csv.display().to_string(),
                    "caps_macro_f1": report.caps.report.macro_f1,
                    "best_static": report.best_static,
                    "caps_margin": report.caps_margin,
                    "sha256": report.digest(),
                })
            )?;
        }
        Command::Gradcheck { instances, seed, lambda_d, verbose } => {
            if !(lambda_d.is_finite() && lambda_d >= 0.0) {
                return Err(Error::Range(format!("lambda_d must be finite and >= 0, got {lambda_d}")));
            }
            let mut report = run_suite(instances, seed, lambda_d, exec);
            let passed = report.passed;
            if !verbose {
                report.cases.clear();
            }
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report).expect("report serializes"))?;
            if !passed {
                return Ok(Outcome::NumericFailure);
            }
        }
    }
    Ok(Outcome::Ok)
}

/// Weight snapshots carry no layout name; tensors are mixable when their dims agree.
fn layout_id(t: &Tensor) -> String {
    let dims: Vec<String> = t.dims.iter().map(u32::to_string).collect();
    format!("dims:{}", dims.join("x"))
}
