//! Command implementations. Each returns the JSON summary printed on stdout.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use localsdf::field::{domain_downsample, BasisField, FieldError};
use localsdf::fit::{self, FitConfig, FitError, StepInfo};
use localsdf::geom::{positive_points, sample_training_set, surface_points, SceneSpec, Sdf};
use localsdf::gradcheck::{self, GradCheckConfig};
use localsdf::io::{obj_string, ply_string, samples_from_json, samples_to_json, SAMPLES_VERSION};
use localsdf::metrics::{self, EvalProtocol, MetricError};
use localsdf::objective::Anchor;
use localsdf::surface::{marching_cubes, GridSpec, SurfaceError};
use serde_json::{json, Value};

use crate::config::{
    parse_protocol, parse_versioned, KeptList, RefineRun, RunConfig, KEPT_VERSION, REFINE_RUN_VERSION, RUN_VERSION,
    SUMMARY_VERSION,
};
use crate::{DownsampleArgs, EvalArgs, FitArgs, GradcheckArgs, MeshArgs, RefineArgs, SampleArgs};

pub enum Failure {
    /// Bad configuration, input or I/O; exit 1.
    Config(anyhow::Error),
    /// Non-finite values during optimization or extraction; exit 2.
    Numerical(anyhow::Error),
    /// A verification run did not pass; exit 3.
    Verification { message: String, summary: Value },
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self::Config(anyhow::anyhow!(message.into()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Numerical(_) => 2,
            Self::Verification { .. } => 3,
        }
    }

    pub fn summary(&self) -> Option<&Value> {
        match self {
            Self::Verification { summary, .. } => Some(summary),
            _ => None,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) | Self::Numerical(e) => write!(f, "{e:#}"),
            Self::Verification { message, .. } => f.write_str(message),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Config(e)
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Numerical { .. } => Self::Numerical(e.into()),
            FitError::Field(FieldError::NonFinite(_)) => Self::Numerical(e.into()),
            other => Self::Config(other.into()),
        }
    }
}

impl From<SurfaceError> for Failure {
    fn from(e: SurfaceError) -> Self {
        match e {
            SurfaceError::NonFinite { .. } => Self::Numerical(e.into()),
            other => Self::Config(other.into()),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Surface(s) => s.into(),
            other => Self::Config(other.into()),
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn load_scene(path: &Path) -> anyhow::Result<SceneSpec> {
    let text = read_text(path)?;
    SceneSpec::from_json(&text).with_context(|| format!("invalid scene {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<BasisField> {
    let text = read_text(path)?;
    BasisField::from_checkpoint_json(&text).with_context(|| format!("invalid checkpoint {}", path.display()))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn sample(args: SampleArgs) -> CmdResult {
    let scene = load_scene(&args.scene)?;
    let stds = [args.noise_stds[0], args.noise_stds[1]];
    let samples =
        sample_training_set(&scene, args.near, args.uniform, stds, args.seed).context("cannot draw samples")?;
    write_text(&args.out, &samples_to_json(&samples))?;
    log::info!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(json!({
        "version": SUMMARY_VERSION,
        "command": "sample",
        "out": display(&args.out),
        "samples_version": SAMPLES_VERSION,
        "n_near": args.near,
        "n_uniform": args.uniform,
        "seed": args.seed,
    }))
}

fn progress_logger(config: &FitConfig) -> impl FnMut(&StepInfo) {
    let every = (config.steps / 10).max(1);
    let last = config.steps.saturating_sub(1);
    move |info: &StepInfo| {
        if info.step.is_multiple_of(every) || info.step == last {
            log::info!("step {:>6}  loss {:.6e}", info.step, info.eval.total);
        }
    }
}

pub fn fit(args: FitArgs) -> CmdResult {
    let text = read_text(&args.config)?;
    let mut run: RunConfig = parse_versioned(&text, "run configuration", RUN_VERSION)
        .with_context(|| format!("in {}", args.config.display()))?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    run.resolve_paths(&base);
    if let Some(p) = args.checkpoint {
        run.checkpoint = p;
    }
    if let Some(p) = args.report {
        run.report = Some(p);
    }
    let config = &run.fit;
    config.validate()?;
    let scene = load_scene(&run.scene)?;
    let samples = match &run.samples {
        Some(p) => samples_from_json(&read_text(p)?).with_context(|| format!("invalid samples {}", p.display()))?,
        None => fit::training_samples(&scene, config)?,
    };
    let field = fit::init_field(&scene, config)?;
    log::info!(
        "fitting {} bases to {} samples for {} steps",
        field.len(),
        samples.len(),
        config.steps
    );
    let mut observer = progress_logger(config);
    let (phase1, report) = fit::fit_field_observed(field, &samples, config, &mut observer)?;
    let (field, kept, report) = match config.n_init {
        Some(_) => {
            log::info!("downsampling {} -> {} bases", phase1.len(), config.n_bases);
            let (field, kept, report) = fit::compact_after(&phase1, &report, &samples, config)?;
            (field, Some(kept), report)
        }
        None => (phase1, None, report),
    };
    log::info!("fit finished in {:.2?}", report.wall_time);
    write_text(&run.checkpoint, &field.to_checkpoint_json())?;
    if let Some(p) = &run.report {
        write_text(p, &report.to_json())?;
    }
    if let (Some(p), Some(kept)) = (&run.kept, &kept) {
        write_kept(p, phase1_len(config), kept)?;
    }
    Ok(json!({
        "version": SUMMARY_VERSION,
        "command": "fit",
        "checkpoint": display(&run.checkpoint),
        "report": run.report.as_deref().map(display),
        "n_bases": field.len(),
        "steps": report.trace.len(),
        "initial_loss": report.trace.total.first(),
        "final_loss": report.trace.total.last(),
        "underflow_fallbacks": report.diagnostics.underflow_fallbacks,
        "kept": kept,
    }))
}

fn phase1_len(config: &FitConfig) -> usize {
    config.n_init.unwrap_or(config.n_bases)
}

fn write_kept(path: &Path, n_before: usize, kept: &[usize]) -> anyhow::Result<()> {
    let doc = KeptList {
        version: KEPT_VERSION,
        n_before,
        kept: kept.to_vec(),
    };
    write_text(path, &serde_json::to_string_pretty(&doc)?)
}

pub fn downsample(args: DownsampleArgs) -> CmdResult {
    let field = load_checkpoint(&args.checkpoint)?;
    let kept = domain_downsample(&field, args.keep).context("cannot downsample")?;
    let reduced = field.select(&kept).context("cannot downsample")?;
    write_text(&args.out, &reduced.to_checkpoint_json())?;
    if let Some(p) = &args.kept_out {
        write_kept(p, field.len(), &kept)?;
    }
    Ok(json!({
        "version": SUMMARY_VERSION,
        "command": "downsample",
        "out": display(&args.out),
        "n_before": field.len(),
        "kept": kept,
    }))
}

pub fn refine(args: RefineArgs) -> CmdResult {
    let field = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    let run = match &args.config {
        Some(p) => parse_versioned(&read_text(p)?, "refine configuration", REFINE_RUN_VERSION)
            .with_context(|| format!("in {}", p.display()))?,
        None => RefineRun::default(),
    };
    run.refine.validate()?;
    let surface = surface_points(&scene, run.n_surface, run.sample_seed).context("cannot sample surface points")?;
    let positive = positive_points(&scene, run.n_positive, run.positive_margin, run.sample_seed.wrapping_add(1))
        .context("cannot sample free-space points")?;
    let anchor = Anchor::from_field(&field);
    log::info!(
        "refining {} bases for {} iterations",
        field.len(),
        run.refine.iterations
    );
    let (refined, report) = fit::refine(field, &surface, &positive, &anchor, &run.refine)?;
    log::info!("refine finished in {:.2?}", report.wall_time);
    write_text(&args.out, &refined.to_checkpoint_json())?;
    if let Some(p) = &args.report {
        write_text(p, &report.to_json())?;
    }
    Ok(json!({
        "version": SUMMARY_VERSION,
        "command": "refine",
        "out": display(&args.out),
        "report": args.report.as_deref().map(display),
        "iterations": report.trace.len(),
        "initial_loss": report.trace.total.first(),
        "final_loss": report.trace.total.last(),
    }))
}

fn candidate(checkpoint: &Option<PathBuf>, scene: &Option<PathBuf>) -> anyhow::Result<Box<dyn Sdf>> {
    match (checkpoint, scene) {
        (Some(c), _) => Ok(Box::new(load_checkpoint(c)?)),
        (None, Some(s)) => Ok(Box::new(load_scene(s)?)),
        (None, None) => anyhow::bail!("either a checkpoint or a scene is required"),
    }
}

pub fn mesh(args: MeshArgs) -> CmdResult {
    let grid = GridSpec::with_resolution(args.resolution);
    grid.validate()?;
    let sdf = candidate(&args.checkpoint, &args.scene)?;
    let mesh = marching_cubes(sdf.as_ref(), &grid)?;
    if mesh.triangles.is_empty() {
        log::warn!("the field has no zero crossing inside the grid; writing an empty mesh");
    }
    let ply = args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let text = if ply { ply_string(&mesh) } else { obj_string(&mesh) };
    write_text(&args.out, &text)?;
    Ok(json!({
        "version": SUMMARY_VERSION,
        "command": "mesh",
        "out": display(&args.out),
        "format": if ply { "ply" } else { "obj" },
        "resolution": args.resolution,
        "vertices": mesh.vertices.len(),
        "triangles": mesh.triangles.len(),
    }))
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let protocol = match &args.protocol {
        Some(p) => parse_protocol(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => EvalProtocol::default(),
    };
    let sdf = candidate(&args.checkpoint, &args.candidate_scene)?;
    let reference = load_scene(&args.scene)?;
    let report = metrics::evaluate(sdf.as_ref(), &reference, &protocol)?;
    let value = serde_json::to_value(&report).context("cannot serialize report")?;
    if let Some(p) = &args.out {
        write_json(p, &value)?;
    }
    Ok(value)
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let config = GradCheckConfig {
        seed: args.seed,
        fixtures: args.fixtures,
        samples: args.samples,
        corrupt: args.corrupt,
        ..Default::default()
    };
    let report = gradcheck::run(&config).context("gradient check could not run")?;
    for l in &report.losses {
        log::info!(
            "{:<13} max rel error {:.3e}  checked {:>6}  {}",
            l.loss,
            l.max_rel_error,
            l.checked,
            if l.passed { "ok" } else { "FAILED" }
        );
    }
    let value = serde_json::to_value(&report).context("cannot serialize report")?;
    if let Some(p) = &args.out {
        write_json(p, &value)?;
    }
    if report.passed {
        Ok(value)
    } else {
        let failed: Vec<&str> = report.losses.iter().filter(|l| !l.passed).map(|l| l.loss.as_str()).collect();
        Err(Failure::Verification {
            message: format!(
                "gradient check exceeded tolerance {:e} for: {}",
                report.tolerance,
                failed.join(", ")
            ),
            summary: value,
        })
    }
}
