//! `ctabs` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 completed with at
//! least one patch that did not meet the stopping rule.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ctabs::config::{read_psf_model, RunConfig};
use ctabs::io::ply::encode_ply;
use ctabs::io::OutputSet;
use ctabs::phantom::{synthesize_phantom, PhantomSpec};
use ctabs::pipeline::{
    compare_to_reference, diagnostics_jsonl, estimate_specimen, patch_csv, read_thickness_csv, vertex_csv,
    ComparisonReport, SpecimenSummary, ThicknessModel,
};
use ctabs::psf::{fit_mtf, fit_mtf_auto, fwhm_to_sigma, read_mtf_csv};
use ctabs::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ctabs",
    about = "Cortical thickness from clinical QCT by analysis-by-synthesis"
)]
struct Cli {
    /// Worker threads for patch estimation (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print one status line per patch to stderr.
    #[arg(long, global = true)]
    progress: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a PSF model to sampled MTF values.
    FitMtf(FitMtfArgs),
    /// Generate a synthetic phantom scan with known thickness.
    Phantom(PhantomArgs),
    /// Estimate cortical thickness for a specimen.
    Estimate(EstimateArgs),
    /// Compare two thickness tables.
    Report(ReportArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
struct FitMtfArgs {
    /// CSV with `frequency_per_mm` and `mtf` columns.
    #[arg(long)]
    input: PathBuf,
    /// PSF model JSON to write.
    #[arg(long)]
    output: PathBuf,
    /// Number of Gaussian components, or `auto`.
    #[arg(long, default_value = "auto")]
    components: String,
    /// Slice-profile FWHM (mm) stored with the model.
    #[arg(long, default_value_t = 1.0)]
    out_of_plane_fwhm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Phantom spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// PSF model JSON used for the blur.
    #[arg(long)]
    psf_model: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Base name of the written files.
    #[arg(long, default_value = "phantom")]
    stem: String,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `patches.count`.
    #[arg(long)]
    patches: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// CSV with a `thickness_mm` or `mean_mm` column.
    #[arg(long)]
    estimates: PathBuf,
    /// CSV with a `thickness_mm` or `mean_mm` column, rows matching `estimates`.
    #[arg(long)]
    reference: PathBuf,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {threads} worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    let progress = cli.progress;
    let result = pool.install(|| match cli.command {
        Command::FitMtf(a) => fit_mtf_command(&a).map(|_| EXIT_OK),
        Command::Phantom(a) => phantom_command(&a).map(|_| EXIT_OK),
        Command::Estimate(a) => estimate_command(&a, progress),
        Command::Report(a) => report_command(&a).map(|_| EXIT_OK),
        Command::Version => {
            println!("ctabs {}", env!("CARGO_PKG_VERSION"));
            Ok(EXIT_OK)
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn fit_mtf_command(a: &FitMtfArgs) -> Result<()> {
    let samples = read_mtf_csv(&a.input)?;
    let model = match a.components.as_str() {
        "auto" => fit_mtf_auto(&samples, a.seed)?,
        n => {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Invalid(format!("--components must be a count or 'auto', got '{n}'")))?;
            fit_mtf(&samples, n, a.seed)?
        }
    };
    let model = model.with_out_of_plane_sigma(fwhm_to_sigma(a.out_of_plane_fwhm))?;
    log::info!("fit RMS {:?}", model.fit_rms());
    let mut out = OutputSet::new();
    out.stage(&a.output, (serde_json::to_string_pretty(&model)? + "\n").as_bytes())?;
    out.commit()
}

fn phantom_command(a: &PhantomArgs) -> Result<()> {
    let spec: PhantomSpec = serde_json::from_str(&read_text(&a.spec)?).map_err(|e| Error::Format {
        path: a.spec.clone(),
        field: "phantom spec".into(),
        msg: e.to_string(),
    })?;
    let psf = read_psf_model(&a.psf_model)?;
    let phantom = synthesize_phantom(&spec, &psf)?;
    create_dir(&a.output_dir)?;
    phantom.write(&a.output_dir, &a.stem)
}

/// Reference comparison against thickness carried by the input mesh.
fn mesh_reference(input: &ctabs::mesh::SurfaceMesh, model: &ThicknessModel) -> Option<ComparisonReport> {
    let truth = input.thickness.as_ref()?;
    let est = model.mesh.thickness.as_ref()?;
    let region = input.region_vertices();
    let e: Vec<f64> = region.iter().map(|&v| est[v]).collect();
    let r: Vec<f64> = region.iter().map(|&v| truth[v]).collect();
    compare_to_reference(&e, &r).ok()
}

fn estimate_command(a: &EstimateArgs, progress: bool) -> Result<i32> {
    let text = read_text(&a.config)?;
    let mut cfg = RunConfig::from_json(&text, &a.config)?;
    if let Some(d) = &a.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = a.patches {
        cfg.patches.count = n;
    }
    // echo the effective config as written, before path resolution
    let echo = serde_json::to_value(&cfg)?;
    let base = a.config.parent().unwrap_or(Path::new(""));
    cfg.resolve_paths(base);
    if let Some(d) = &a.output_dir {
        // flag paths are relative to the working directory
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;

    let volume = cfg.load_volume()?;
    let mesh = cfg.load_mesh()?;
    let psf = cfg.load_psf()?;
    let report = |o: &ctabs::pipeline::PatchOutcome| {
        if progress {
            eprintln!("{}", o.status_line());
        }
    };
    let model = estimate_specimen(&volume, &mesh, &psf, &cfg.prior, &cfg.estimate_config(), &report)?;
    let summary = SpecimenSummary::new(&model, mesh_reference(&mesh, &model), echo);

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut out = OutputSet::new();
    out.stage(dir.join("thickness.ply"), encode_ply(&model.mesh).as_bytes())?;
    out.stage(dir.join("patches.csv"), patch_csv(&model)?.as_bytes())?;
    out.stage(dir.join("vertices.csv"), vertex_csv(&model)?.as_bytes())?;
    out.stage(dir.join("diagnostics.jsonl"), diagnostics_jsonl(&model).as_bytes())?;
    out.stage(dir.join("summary.json"), summary.to_json()?.as_bytes())?;
    out.commit()?;

    if model.all_converged() {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "warning: {} of {} patches stopped at max_iter without meeting the stopping rule",
            model.patch_estimates.len() - model.converged_patches(),
            model.patch_estimates.len()
        );
        Ok(EXIT_NO_CONVERGENCE)
    }
}

fn report_command(a: &ReportArgs) -> Result<()> {
    let est = read_thickness_csv(&a.estimates)?;
    let reference = read_thickness_csv(&a.reference)?;
    let report = compare_to_reference(&est, &reference)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.output {
        Some(p) => {
            let mut out = OutputSet::new();
            out.stage(p, text.as_bytes())?;
            out.commit()
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
