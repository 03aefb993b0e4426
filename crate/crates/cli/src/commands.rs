//! Subcommand arguments, their resolved configs and runners.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use matdiff::backprojection::{backproject as backproject_grid, write_report, Backprojection};
use matdiff::denoiser::{load_weights, save_weights, train as train_model, weights_checksum, DenoiserConfig, Model};
use matdiff::diffusion::{Schedule, ScheduleConfig};
use matdiff::evaluation::{
    bounds_check as check_bounds, dataset_bulk_moduli, evaluate_design, histogram_svg, select_targets, summarize,
    write_csv, write_json, EvalConfig, EvalResult, ReportRow, Summary,
};
use matdiff::fem::{Fem, FemConfig, SolverKind};
use matdiff::grid::{Dims, Grid};
use matdiff::guidance::{load_samples, write_samples, GuidanceConfig, GuidanceMode, Sampler};
use matdiff::materials::{generate_synthetic_catalog, load_catalog, normalize, Catalog};
use matdiff::microstructure::{generate_dataset, load_dataset, Dataset};
use matdiff::rng::stream_rng;
use matdiff::sensitivity::{
    adjoint_gradient, compare_gradients, finite_difference_gradient, GradCheck, GradientUnits, ObjectiveKind,
    ObjectiveSpec,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load, overlay, overlay_some, prepare_out, required, Common};
use crate::{CliError, CliResult};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> matdiff::Error + '_ {
    move |e| matdiff::Error::io(path, e)
}

fn dims_of(count: usize) -> CliResult<Dims> {
    Dims::from_count(count).map_err(|e| CliError::Usage(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

// ---- gen-catalog ----

#[derive(Debug, Args)]
pub struct GenCatalogArgs {
    #[command(flatten)]
    common: Common,
    /// Number of materials.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCatalogConfig {
    pub seed: u64,
    pub count: usize,
}

impl Default for GenCatalogConfig {
    fn default() -> Self {
        GenCatalogConfig { seed: 7, count: 500 }
    }
}

pub fn gen_catalog(a: GenCatalogArgs) -> CliResult<()> {
    let mut cfg: GenCatalogConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay!(cfg, a; count);
    let catalog = generate_synthetic_catalog(cfg.seed, cfg.count)?;
    prepare_out(&a.common.out, &cfg)?;
    catalog.write_csv(&a.common.out.join("catalog.csv"))?;
    log::info!("{} materials in {} nonempty chunks", catalog.len(), catalog.nonempty_chunks());
    Ok(())
}

// ---- gen-dataset ----

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[command(flatten)]
    common: Common,
    /// Material catalog CSV.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// Spatial dimensionality (2 or 3).
    #[arg(long)]
    dims: Option<usize>,
    /// Elements per side.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDatasetConfig {
    pub seed: u64,
    pub catalog: Option<PathBuf>,
    pub samples: usize,
    pub dims: usize,
    pub side: usize,
}

impl Default for GenDatasetConfig {
    fn default() -> Self {
        GenDatasetConfig {
            seed: 0,
            catalog: None,
            samples: 1000,
            dims: 2,
            side: 32,
        }
    }
}

pub fn gen_dataset(a: GenDatasetArgs) -> CliResult<()> {
    let mut cfg: GenDatasetConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay!(cfg, a; samples, dims, side);
    overlay_some!(cfg, a; catalog);
    let catalog = load_catalog(required(&cfg.catalog, "catalog")?)?;
    let ds = generate_dataset(&catalog, cfg.samples, dims_of(cfg.dims)?, cfg.side, cfg.seed)?;
    prepare_out(&a.common.out, &cfg)?;
    ds.write(&a.common.out)?;
    log::info!("wrote {} samples", ds.len());
    Ok(())
}

// ---- train ----

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Use only the first N dataset samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub samples: Option<usize>,
    /// Defaults to the standard architecture for the dataset dimensionality.
    pub denoiser: Option<DenoiserConfig>,
    pub schedule: ScheduleConfig,
    pub train: matdiff::denoiser::TrainConfig,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainRunConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay_some!(cfg, a; dataset, samples);
    overlay!(cfg.train, a; steps, batch, warmup);
    if let Some(lr) = a.lr {
        cfg.train.peak_lr = lr;
    }
    let mut data = load_dataset(required(&cfg.dataset, "dataset")?)?;
    if let Some(n) = cfg.samples {
        data.truncate(n);
    }
    let dcfg = cfg.denoiser.get_or_insert_with(|| DenoiserConfig::for_dims(data.dims())).clone();
    let schedule = Schedule::new(cfg.schedule)?;
    let mut model = Model::init(dcfg, cfg.seed)?;
    prepare_out(&a.common.out, &cfg)?;
    let report = train_model(&mut model, &data, &schedule, &cfg.train, cfg.seed)?;
    let wpath = a.common.out.join("weights.bin");
    save_weights(&model, &wpath)?;
    let mut log_csv = String::from("step,loss,grad_norm\n");
    for (i, (l, g)) in report.losses.iter().zip(&report.grad_norms).enumerate() {
        log_csv.push_str(&format!("{},{l},{g}\n", i + 1));
    }
    write_text(&a.common.out.join("train_log.csv"), &log_csv)?;
    log::info!("weights checksum {}", weights_checksum(&model));
    Ok(())
}

// ---- sample ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    J1,
    J2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    FullVjp,
    Direct,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Weights file written by `train`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Catalog for material projection.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Target bulk modulus (GPa).
    #[arg(long)]
    target_k: Option<f64>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Density weight of J2.
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance strength; 0 samples unguided.
    #[arg(long)]
    rho_d: Option<f64>,
    /// Sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Snap x̂₀ materials to the catalog before each FEM evaluation.
    #[arg(long)]
    project_materials: bool,
    /// Number of chains.
    #[arg(long)]
    count: Option<usize>,
    /// Elements per side of the generated grids.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub side: usize,
    pub count: usize,
    pub schedule: ScheduleConfig,
    pub fem: FemConfig,
    pub guidance: GuidanceConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            seed: 0,
            weights: None,
            catalog: None,
            side: 32,
            count: 50,
            schedule: ScheduleConfig::default(),
            fem: FemConfig::default(),
            // the target has no sensible default; validation asks for one
            guidance: GuidanceConfig::new(ObjectiveSpec::j1(0.0)),
        }
    }
}

pub fn sample(a: SampleArgs) -> CliResult<()> {
    let mut cfg: SampleConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay!(cfg, a; count, side);
    overlay_some!(cfg, a; weights, catalog);
    let g = &mut cfg.guidance;
    overlay!(g, a; rho_d, steps, eta);
    if let Some(k) = a.target_k {
        g.objective.k_star = k;
    }
    if let Some(l) = a.lambda {
        g.objective.lambda = l;
    }
    if let Some(o) = a.objective {
        g.objective.kind = match o {
            ObjectiveArg::J1 => ObjectiveKind::J1,
            ObjectiveArg::J2 => ObjectiveKind::J2,
        };
    }
    if let Some(m) = a.mode {
        g.mode = match m {
            ModeArg::FullVjp => GuidanceMode::FullVjp,
            ModeArg::Direct => GuidanceMode::Direct,
        };
    }
    g.project_materials |= a.project_materials;
    if cfg.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    cfg.guidance.validate()?;
    let model = load_weights(required(&cfg.weights, "weights")?, None)?;
    let catalog = match &cfg.catalog {
        Some(p) => Some(load_catalog(p)?),
        None if cfg.guidance.project_materials => {
            return Err(CliError::Usage("--project-materials needs --catalog".into()));
        }
        None => None,
    };
    let schedule = Schedule::new(cfg.schedule)?;
    let fem = Fem::new(model.config.dims, cfg.side, cfg.fem)?;
    prepare_out(&a.common.out, &cfg)?;
    let mut sampler = Sampler::new(&model, &schedule, &fem, cfg.guidance);
    if let Some(c) = &catalog {
        sampler = sampler.with_catalog(c);
    }
    let batch = sampler.run_batch(cfg.count, cfg.seed)?;
    write_samples(&a.common.out, &batch)?;
    for f in &batch.failures {
        log::error!("chain {} failed: {}", f.chain, f.message);
    }
    if !batch.failures.is_empty() {
        return Err(CliError::Failed(format!("{} of {} chains failed", batch.failures.len(), cfg.count)));
    }
    Ok(())
}

// ---- backproject ----

#[derive(Debug, Args)]
pub struct BackprojectArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `sample`.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackprojectConfig {
    pub seed: u64,
    pub samples: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
}

fn backproject_all(samples: &Path, catalog: &Catalog) -> CliResult<(Vec<matdiff::guidance::SampleRecord>, Vec<Backprojection>)> {
    let batch = load_samples(samples)?;
    let bps = batch.records.par_iter().map(|r| backproject_grid(r.grid(), catalog)).collect();
    Ok((batch.records, bps))
}

pub fn backproject(a: BackprojectArgs) -> CliResult<()> {
    let mut cfg: BackprojectConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay_some!(cfg, a; samples, catalog);
    let catalog = load_catalog(required(&cfg.catalog, "catalog")?)?;
    let (_, bps) = backproject_all(required(&cfg.samples, "samples")?, &catalog)?;
    prepare_out(&a.common.out, &cfg)?;
    let failed = bps.iter().filter(|b| b.detection_failed()).count();
    if failed > 0 {
        log::warn!("particle detection fell back on {failed} of {} samples", bps.len());
    }
    write_report(&a.common.out.join("backprojection.json"), &bps)?;
    Ok(())
}

// ---- evaluate ----

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    target_k: Option<f64>,
    /// Microstructures per design.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub seed: u64,
    pub samples: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub target_k: Option<f64>,
    pub repeats: usize,
    pub fem: FemConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            seed: 0,
            samples: None,
            catalog: None,
            target_k: None,
            repeats: 10,
            fem: FemConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct EvaluateSummary {
    #[serde(flatten)]
    summary: Summary,
    evaluated: usize,
    failed: Vec<usize>,
    unreliable: usize,
    mean_v_m: f64,
    mean_d_m: f64,
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg: EvaluateConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay!(cfg, a; repeats);
    overlay_some!(cfg, a; samples, catalog, target_k);
    let k_star = *required(&cfg.target_k, "target-k")?;
    let catalog = load_catalog(required(&cfg.catalog, "catalog")?)?;
    let (records, bps) = backproject_all(required(&cfg.samples, "samples")?, &catalog)?;
    let first = records.first().ok_or_else(|| CliError::Usage("no samples to evaluate".into()))?;
    let fem = Fem::new(first.grid().dims(), first.grid().side(), cfg.fem)?;
    let ecfg = EvalConfig {
        repeats: cfg.repeats,
        ..EvalConfig::default()
    };
    prepare_out(&a.common.out, &cfg)?;
    let outcomes: Vec<_> = bps
        .par_iter()
        .enumerate()
        .map(|(i, bp)| evaluate_design(&fem, &bp.theta_hat, k_star, &ecfg, cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect();

    let mut rows = Vec::new();
    let mut results: Vec<EvalResult> = Vec::new();
    let mut failed = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => {
                rows.push(ReportRow::new(records[i].seed, records[i].chain, records[i].k_s, bps[i].v_m, bps[i].d_m, &r));
                results.push(r);
            }
            Err(e) => {
                log::error!("sample {i}: {e}");
                failed.push(i);
            }
        }
    }
    let out = &a.common.out;
    write_csv(&out.join("eval.csv"), &rows)?;
    write_report(&out.join("backprojection.json"), &bps)?;
    if results.is_empty() {
        return Err(CliError::Failed("no sample could be evaluated".into()));
    }
    let n = bps.len() as f64;
    let summary = EvaluateSummary {
        summary: summarize(&results, &catalog)?,
        evaluated: results.len(),
        unreliable: results.iter().filter(|r| r.unreliable).count(),
        failed: failed.clone(),
        mean_v_m: bps.iter().map(|b| b.v_m).sum::<f64>() / n,
        mean_d_m: bps.iter().map(|b| b.d_m).sum::<f64>() / n,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let k: Vec<f64> = results.iter().map(|r| r.k_theta).collect();
    let eps_r: Vec<f64> = results.iter().map(|r| r.eps_r).collect();
    write_text(&out.join("k_theta.svg"), &histogram_svg(&k, 20, "K_theta (GPa)"))?;
    write_text(&out.join("eps_r.svg"), &histogram_svg(&eps_r, 20, "relative error"))?;
    if !failed.is_empty() {
        return Err(CliError::Failed(format!("{} of {} samples failed evaluation", failed.len(), bps.len())));
    }
    Ok(())
}

// ---- targets ----

#[derive(Debug, Args)]
pub struct TargetsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub fem: FemConfig,
}

#[derive(Debug, Serialize)]
struct TargetsReport {
    samples: usize,
    targets: [f64; 5],
}

fn dataset_moduli(data: &Dataset, fem_cfg: FemConfig) -> CliResult<Vec<f64>> {
    let fem = Fem::new(data.dims(), data.side(), fem_cfg)?;
    Ok(dataset_bulk_moduli(&fem, data)?)
}

pub fn targets(a: TargetsArgs) -> CliResult<()> {
    let mut cfg: TargetsConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay_some!(cfg, a; dataset);
    let data = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let ks = dataset_moduli(&data, cfg.fem)?;
    let targets = select_targets(&ks)?;
    prepare_out(&a.common.out, &cfg)?;
    let out = &a.common.out;
    let mut csv = String::from("index,k\n");
    for (i, k) in ks.iter().enumerate() {
        csv.push_str(&format!("{i},{k}\n"));
    }
    write_text(&out.join("k_values.csv"), &csv)?;
    write_text(&out.join("k_hist.svg"), &histogram_svg(&ks, 30, "dataset K (GPa)"))?;
    write_json(&out.join("targets.json"), &TargetsReport { samples: ks.len(), targets })?;
    log::info!("targets {targets:?}");
    Ok(())
}

// ---- gradcheck ----

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dims: Option<usize>,
    /// Elements per side.
    #[arg(long)]
    shape: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    target_k: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub dims: usize,
    pub shape: usize,
    pub objective: String,
    pub target_k: f64,
    pub lambda: f64,
    /// Finite-difference step in normalized units.
    pub step: f64,
    pub rel_tol: f64,
    /// Components whose adjoint magnitude is below this are compared absolutely.
    pub small: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            dims: 2,
            shape: 4,
            objective: "j1".into(),
            target_k: 100.0,
            lambda: 1e-3,
            step: 1e-4,
            rel_tol: 1e-4,
            small: 1e-12,
            abs_tol: 1e-10,
        }
    }
}

/// Two random catalog-range materials scattered over the grid.
pub fn random_two_phase(dims: Dims, side: usize, seed: u64) -> Grid {
    let mut rng = stream_rng(seed, 0);
    let mut mat = || {
        normalize([rng.random_range(10.0..450.0), rng.random_range(0.05..0.45), rng.random_range(1.0..9.0)]).value
    };
    let (a, b) = (mat(), mat());
    let mut rng = stream_rng(seed, 1);
    let mut g = Grid::filled(dims, side, a);
    for e in 0..g.n_elements() {
        if rng.random_bool(0.5) {
            g.set_element(e, b);
        }
    }
    g
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    passed: bool,
    objective: f64,
    bulk_modulus: f64,
    #[serde(flatten)]
    check: GradCheck,
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mut cfg: GradcheckConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay!(cfg, a; dims, shape, target_k, lambda);
    if let Some(o) = a.objective {
        cfg.objective = format!("{o:?}").to_lowercase();
    }
    let spec = match cfg.objective.as_str() {
        "j1" => ObjectiveSpec::j1(cfg.target_k),
        "j2" => ObjectiveSpec::j2(cfg.target_k, cfg.lambda),
        other => return Err(CliError::Usage(format!("unknown objective {other:?}"))),
    };
    spec.validate()?;
    let fem_cfg = FemConfig {
        solver: SolverKind::Direct,
        ..FemConfig::default()
    };
    let fem = Fem::new(dims_of(cfg.dims)?, cfg.shape, fem_cfg)?;
    let grid = random_two_phase(fem.mesh().dims, cfg.shape, cfg.seed);
    let adj = adjoint_gradient(&fem, &grid, &spec, GradientUnits::Normalized)?;
    let fd = finite_difference_gradient(&fem, &grid, &spec, cfg.step, GradientUnits::Normalized)?;
    let check = compare_gradients(&adj.gradient, &fd, cfg.rel_tol, cfg.small, cfg.abs_tol);
    prepare_out(&a.common.out, &cfg)?;
    let report = GradcheckReport {
        passed: check.passed(),
        objective: adj.objective,
        bulk_modulus: adj.bulk_modulus,
        check,
    };
    write_json(&a.common.out.join("gradcheck.json"), &report)?;
    log::info!(
        "{} components, max relative error {:.3e}",
        report.check.components,
        report.check.max_relative_error
    );
    if !report.passed {
        return Err(CliError::Failed(format!("{} gradient components disagree", report.check.failures)));
    }
    Ok(())
}

// ---- bounds-check ----

#[derive(Debug, Args)]
pub struct BoundsCheckArgs {
    #[command(flatten)]
    common: Common,
    /// Catalog CSV; a synthetic catalog from the seed is used otherwise.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsCheckConfig {
    pub seed: u64,
    pub catalog: Option<PathBuf>,
    pub samples: usize,
    pub dims: usize,
    pub side: usize,
    pub max_fraction_outside: f64,
    pub max_relative_violation: f64,
    pub fem: FemConfig,
}

impl Default for BoundsCheckConfig {
    fn default() -> Self {
        BoundsCheckConfig {
            seed: 0,
            catalog: None,
            samples: 500,
            dims: 3,
            side: 16,
            max_fraction_outside: 0.10,
            max_relative_violation: 0.05,
            fem: FemConfig::default(),
        }
    }
}

pub fn bounds_check(a: BoundsCheckArgs) -> CliResult<()> {
    let mut cfg: BoundsCheckConfig = load(a.common.config.as_deref())?;
    overlay!(cfg, a.common; seed);
    overlay!(cfg, a; samples, dims, side);
    overlay_some!(cfg, a; catalog);
    let catalog = match &cfg.catalog {
        Some(p) => load_catalog(p)?,
        None => generate_synthetic_catalog(cfg.seed, 500)?,
    };
    let data = generate_dataset(&catalog, cfg.samples, dims_of(cfg.dims)?, cfg.side, cfg.seed)?;
    let fem = Fem::new(data.dims(), data.side(), cfg.fem)?;
    let ks = dataset_bulk_moduli(&fem, &data)?;
    let samples: Vec<_> = data
        .manifest
        .samples
        .iter()
        .zip(&ks)
        .map(|(s, &k)| (s.theta, s.realized_fraction, k))
        .collect();
    let report = check_bounds(&fem, &samples);
    prepare_out(&a.common.out, &cfg)?;
    write_json(&a.common.out.join("bounds.json"), &report)?;
    log::info!(
        "{} of {} outside the bounds, max relative violation {:.3e}",
        report.outside,
        report.samples,
        report.max_relative_violation
    );
    if report.fraction_outside > cfg.max_fraction_outside || report.max_relative_violation > cfg.max_relative_violation {
        return Err(CliError::Failed("bounds check exceeded its tolerances".into()));
    }
    Ok(())
}
