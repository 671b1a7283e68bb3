use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use strandcap::geom::strand::read_hair;
use strandcap::geom::TriMesh;
use strandcap::pipeline::{self, ExportFormat, PipelineConfig, Workspace};
use strandcap::synthgen::{generate_bundle, GroomSpec};
use strandcap::Error;

#[derive(Parser, Debug)]
#[command(name = "strandcap", version, about = "Strand-level hair reconstruction from calibrated multi-view captures")]
struct Cli {
    /// Capture bundle directory; stage artifacts are written here too.
    #[arg(long, global = true, default_value = ".")]
    bundle: PathBuf,
    /// Pipeline configuration (TOML). Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution; outputs are then byte-reproducible.
    #[arg(long, global = true)]
    serial: bool,
    /// Writes per-stage debug images under `debug/`.
    #[arg(long, global = true)]
    debug_images: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generates a synthetic capture bundle from a groom spec.
    Synth {
        /// Groom spec (TOML); `style` is required.
        spec: PathBuf,
    },
    /// Estimates per-view 2D orientation maps.
    Orient2d,
    /// Fits the volumetric hair field.
    Volume,
    /// Traces strands and roots them on the scalp.
    Trace,
    /// Refines strands against the images with chained Gaussians.
    Refine,
    /// Writes a strand set as OBJ polylines or binary hair.
    Export {
        #[arg(long, value_enum)]
        format: Format,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Strand file to read; defaults to the latest stage output.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compares a strand set with ground truth and audits invariants.
    Eval {
        /// Reconstructed strands; defaults to the latest stage output.
        #[arg(long)]
        reconstructed: Option<PathBuf>,
        /// Ground-truth strands; defaults to `gt.hair` in the bundle.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Prints the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Prints the effective configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Obj,
    Hair,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Obj => ExportFormat::Obj,
            Format::Hair => ExportFormat::Hair,
        }
    }
}

fn load_config(cli: &Cli) -> strandcap::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.serial {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn latest_strands(ws: &Workspace) -> strandcap::Result<PathBuf> {
    [ws.refined(), ws.traced()]
        .into_iter()
        .find(|p| p.exists())
        .ok_or(Error::MissingArtifact { path: ws.traced(), stage: "trace" })
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(cli: &Cli, spec_path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec = GroomSpec::parse(&text).map_err(|msg| Error::Parse {
        path: spec_path.display().to_string(),
        msg,
    })?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let b = generate_bundle(&spec, !cli.serial)?;
    b.write(&cli.bundle)?;
    info!("wrote {} views and {} strands to {}", b.bundle.views(), b.gt.len(), cli.bundle.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let ws = Workspace::new(&cli.bundle);
    match &cli.command {
        Command::Synth { spec } => synth(cli, spec)?,
        Command::Orient2d => print_json(&pipeline::run_orient2d(&ws, &load_config(cli)?, cli.debug_images)?)?,
        Command::Volume => print_json(&pipeline::run_volume(&ws, &load_config(cli)?, cli.debug_images)?)?,
        Command::Trace => print_json(&pipeline::run_trace(&ws, &load_config(cli)?)?)?,
        Command::Refine => print_json(&pipeline::run_refine(&ws, &load_config(cli)?, cli.debug_images)?)?,
        Command::Export { format, out, input } => {
            let src = match input {
                Some(p) => p.clone(),
                None => latest_strands(&ws)?,
            };
            let strands = read_hair(&src)?;
            pipeline::export_strands(&strands, (*format).into(), out)?;
            info!("exported {} strands to {}", strands.len(), out.display());
        }
        Command::Eval { reconstructed, gt, json } => {
            let rec_path = match reconstructed {
                Some(p) => p.clone(),
                None => latest_strands(&ws)?,
            };
            let gt_path = gt.clone().unwrap_or_else(|| ws.dir.join("gt.hair"));
            if !gt_path.exists() {
                return Err(Error::MissingArtifact { path: gt_path, stage: "synth" }.into());
            }
            let inner_path = ws.dir.join("inner.obj");
            if !inner_path.exists() {
                return Err(Error::MissingArtifact { path: inner_path, stage: "synth" }.into());
            }
            let report = pipeline::evaluate(&read_hair(&rec_path)?, &read_hair(&gt_path)?, &TriMesh::read_obj(&inner_path)?);
            if *json {
                print_json(&report)?;
            } else {
                let (m, a) = (&report.metrics, &report.audit);
                println!("mean distance        {:.6} m", m.mean_distance);
                println!("  reconstructed->gt  {:.6} m", m.reconstructed_to_gt);
                println!("  gt->reconstructed  {:.6} m", m.gt_to_reconstructed);
                println!("coverage (1 mm)      {:.4}", m.coverage);
                println!("orientation error    {:.3} deg", m.orientation_error_deg);
                println!("strands              {}", a.strands);
                println!("root on scalp        {:.4}", a.root_on_scalp_rate);
                println!("100-vertex strands   {:.4} (min {}, max {})", a.full_vertex_rate, a.min_vertices, a.max_vertices);
                println!("penetrating vertices {:.4} (max depth {:.6} m)", a.penetrating_vertex_rate, a.max_penetration);
            }
        }
        Command::Config => print!("{}", load_config(cli)?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
