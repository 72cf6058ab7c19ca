use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dce_kit::backend::BackendSpec;
use dce_kit::cohort::{Split, SplitFractions};
use dce_kit::dicom::PhaseOrdering;
use dce_kit::pipeline::{self, CurateOptions, Error, RunConfig};
use dce_kit::preprocess::{FusionMode, FusionOptions, PatchOptions};

#[derive(Parser)]
#[command(name = "dce-kit", version, about = "Breast DCE-MRI lesion classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert per-patient DICOM series into the curated NIfTI layout.
    Curate {
        dicom_root: PathBuf,
        out_root: PathBuf,
        /// Fall back to numbers in SeriesDescription for phase order.
        #[arg(long)]
        parse_descriptions: bool,
        /// Explicit phase order as input series indices, e.g. 0,1,2,3,4.
        #[arg(long, value_delimiter = ',')]
        phase_order: Option<Vec<usize>>,
        /// Also write manifest.json split with these train,val,test fractions.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        fractions: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the RGB fusion of one slice as a 16-bit PNG.
    Fuse {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        z: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "per-slice")]
        fusion: FusionMode,
        #[arg(long)]
        clip_quantile: Option<f64>,
    },
    /// Render original and augmented patches for one patient.
    AugmentPreview {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        patient: String,
        /// Policy JSON; the default policy when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score lesions and write report.json, roc.csv and overlays.
    Evaluate(RunArgs),
    /// Confusion matrices at several thresholds from cached scores.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5")]
        taus: Vec<f64>,
    },
    /// Check analytic loss gradients against finite differences.
    LossCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        maps: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    /// oracle | constant:<v> | heuristic:<r|g|b>:<t> | onnx:<path>
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(b) = &self.backend {
            cfg.backend = b.parse::<BackendSpec>().map_err(|e| Error::Config(e.to_string()))?;
            cfg.resolve_relative(Path::new("."));
        }
        if let Some(s) = &self.split {
            cfg.split = match s.as_str() {
                "all" => None,
                other => Some(other.parse::<Split>().map_err(Error::Config)?),
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    print!("{}", String::from_utf8_lossy(&pipeline::to_sorted_json(value)));
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Curate {
            dicom_root,
            out_root,
            parse_descriptions,
            phase_order,
            fractions,
            seed,
        } => {
            let fractions = match fractions.as_deref() {
                None => None,
                Some(&[train, val, test]) => Some(SplitFractions { train, val, test }),
                Some(_) => return Err(Error::Config("--fractions takes train,val,test".into())),
            };
            let opts = CurateOptions {
                ordering: PhaseOrdering {
                    parse_descriptions,
                    explicit: phase_order,
                },
                fractions,
                seed,
            };
            let report = pipeline::curate(&dicom_root, &out_root, &opts)?;
            print_json(&report.summary);
        }
        Command::Fuse {
            data_root,
            patient,
            z,
            out,
            fusion,
            clip_quantile,
        } => {
            let opts = FusionOptions {
                mode: fusion,
                clip_quantile,
            };
            let img = pipeline::fuse_slice(&data_root, &patient, z, &opts)?;
            pipeline::write_fusion_png(&out, &img)?;
            println!("{}", out.display());
        }
        Command::AugmentPreview {
            data_root,
            patient,
            policy,
            out,
            seed,
            epoch,
            jobs,
        } => {
            let policy = match policy {
                Some(p) => pipeline::load_policy(&p)?,
                None => Default::default(),
            };
            let entries = pipeline::augment_preview(
                &data_root,
                &patient,
                &policy,
                &FusionOptions::default(),
                &PatchOptions::default(),
                seed,
                epoch,
                jobs,
                &out,
            )?;
            println!("{} patch(es) written to {}", entries.len(), out.display());
        }
        Command::Evaluate(args) => {
            let report = pipeline::evaluate(&args.config()?)?;
            let e = &report.eval;
            println!(
                "lesions={} tp={} tn={} fp={} fn={} accuracy={:.4} auc={} mean_dice={:.4}",
                e.lesions.len(),
                e.lesion_confusion.tp,
                e.lesion_confusion.tn,
                e.lesion_confusion.fp,
                e.lesion_confusion.fn_,
                e.lesion_accuracy,
                e.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
                e.mean_dice
            );
        }
        Command::Sweep { run, taus } => {
            let result = pipeline::sweep(&run.config()?, &taus)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", pipeline::sweep_csv(&result.rows));
        }
        Command::LossCheck { seed, maps, size } => {
            let report = pipeline::loss_check(seed, maps, size);
            print_json(&report);
            if !report.passed {
                return Err(Error::Data("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
