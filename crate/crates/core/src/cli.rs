//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a data or validation error.
//! Every file is written atomically inside `--output-dir`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::DwiDataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    displacement_rmse, interface_mask, mae, percentile, std_across_volumes, threshold_mask, BinaryMask, StdSummary,
};
use crate::gradcheck::{gradient_check, DEFAULT_STEP, TOLERANCE};
use crate::io::{read_bvals_bvecs, read_json, read_nifti, read_transform, write_bvals_bvecs, write_json, write_nifti, write_transform};
use crate::pipeline::{make_translator, run_pipeline, PipelineConfig, RmseSummary, TranslatorChoice};
use crate::registration::{correct, correct_dataset, register, LevelTrace, RegistrationConfig, RegistrationResult};
use crate::simulator::SimulationConfig;
use crate::translator::{translate, HistogramMatch, TranslatorKind, VolumeMeta, DEFAULT_B_REF, DEFAULT_QUANTILES, FOREGROUND_FRACTION};
use crate::volume::Volume3;

#[derive(Debug, Parser)]
#[command(name = "eddycorr", version, about = "Eddy-current and head-motion correction for diffusion MRI")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 picks the number of CPUs). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Phase-encoding axis (0, 1 or 2), overriding the value stored in the input or config.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=2))]
    ped_axis: Option<u8>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// JSON configuration for the subcommand (simulation, registration or pipeline settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic distorted dataset with ground truth.
    Simulate,
    /// Map every volume of a dataset to the reference contrast.
    Translate(TranslateArgs),
    /// Register one volume to a reference volume.
    Register(RegisterArgs),
    /// Correct every volume of a dataset against a b=0 reference.
    Correct(CorrectArgs),
    /// Compute interface std, MAE and displacement metrics.
    Evaluate(EvaluateArgs),
    /// Compare the analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Simulate, correct and evaluate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Identity,
    HistogramMatch,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// 4D NIfTI series.
    #[arg(long)]
    input: PathBuf,
    /// FSL bvals file.
    #[arg(long)]
    bvals: PathBuf,
    /// FSL bvecs file.
    #[arg(long)]
    bvecs: PathBuf,
}

#[derive(Debug, Args)]
struct TranslatorArgs {
    /// Contrast translator.
    #[arg(long, value_enum, default_value_t = Method::HistogramMatch)]
    translator: Method,
    /// Shell whose mean forms the histogram template.
    #[arg(long, default_value_t = DEFAULT_B_REF)]
    b_ref: f64,
    /// Number of matched quantiles.
    #[arg(long, default_value_t = DEFAULT_QUANTILES)]
    quantiles: usize,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    translator: TranslatorArgs,
    /// Template volume; defaults to the mean of the `--b-ref` shell.
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    /// Moving image (3D, or 4D with `--moving-index`).
    #[arg(long)]
    moving: PathBuf,
    #[arg(long, default_value_t = 0)]
    moving_index: usize,
    /// Reference image (3D, or 4D with `--reference-index`).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 0)]
    reference_index: usize,
    /// Match the moving histogram to the reference before registering.
    #[arg(long, value_enum, default_value_t = Method::Identity)]
    translator: Method,
    #[arg(long, default_value_t = DEFAULT_QUANTILES)]
    quantiles: usize,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    translator: TranslatorArgs,
    /// Index of the b=0 reference volume; defaults to the first b=0.
    #[arg(long)]
    reference_index: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Uncorrected 4D NIfTI series.
    #[arg(long)]
    input: PathBuf,
    /// Corrected 4D NIfTI series.
    #[arg(long)]
    corrected: Option<PathBuf>,
    #[arg(long)]
    bvals: PathBuf,
    #[arg(long)]
    bvecs: PathBuf,
    /// Brain mask NIfTI; defaults to a threshold mask of the first b=0 volume.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    dilate: usize,
    #[arg(long, default_value_t = 2)]
    erode: usize,
    /// Directory of estimated transforms (`vol_NNNN.json`).
    #[arg(long, requires = "truth")]
    transforms: Option<PathBuf>,
    /// Directory of ground-truth transforms (`vol_NNNN.json`).
    #[arg(long, requires = "transforms")]
    truth: Option<PathBuf>,
    /// Target volume for the MAE of every `--input` volume.
    #[arg(long)]
    mae_target: Option<PathBuf>,
    /// Also write per-shell std maps.
    #[arg(long)]
    std_maps: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    configs: usize,
    /// Edge length of the cubic test volumes.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Translator, overriding the configuration.
    #[arg(long, value_enum)]
    translator: Option<PipelineTranslator>,
    /// Also write the simulated, corrected and transform files.
    #[arg(long)]
    write_data: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PipelineTranslator {
    Identity,
    HistogramMatch,
    Oracle,
}

/// Parse `args` (program name first), run the subcommand and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

fn execute(cli: Cli) -> std::result::Result<i32, CliError> {
    let c = &cli.common;
    if c.config.is_some() && matches!(cli.command, Command::Translate(_) | Command::Evaluate(_) | Command::Gradcheck(_)) {
        return Err(CliError::Usage("--config is not used by this subcommand".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", c.threads)))?;
    fs::create_dir_all(&c.output_dir).map_err(|e| Error::Io {
        path: c.output_dir.clone(),
        source: e,
    })?;
    pool.install(|| -> std::result::Result<i32, CliError> {
        match &cli.command {
            Command::Simulate => simulate(c).map(|_| 0),
            Command::Translate(a) => translate_cmd(c, a).map(|_| 0),
            Command::Register(a) => register_cmd(c, a).map(|_| 0),
            Command::Correct(a) => correct_cmd(c, a).map(|_| 0),
            Command::Evaluate(a) => evaluate_cmd(c, a).map(|_| 0),
            Command::Gradcheck(a) => gradcheck_cmd(c, a),
            Command::Pipeline(a) => pipeline_cmd(c, a).map(|_| 0),
        }
        .map_err(CliError::from)
    })
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(c: &Common) -> Result<T> {
    match &c.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn out(c: &Common, name: impl AsRef<Path>) -> PathBuf {
    c.output_dir.join(name)
}

fn subdir(c: &Common, name: &str) -> Result<PathBuf> {
    let d = out(c, name);
    fs::create_dir_all(&d).map_err(|e| Error::Io { path: d.clone(), source: e })?;
    Ok(d)
}

fn volume_name(i: usize) -> String {
    format!("vol_{i:04}.json")
}

fn shell_name(b: f64) -> String {
    format!("{}", b.round())
}

fn with_ped(vols: Vec<Volume3>, ped: Option<u8>) -> Result<Vec<Volume3>> {
    match ped {
        None => Ok(vols),
        Some(a) => vols.into_iter().map(|v| v.with_ped_axis(a as usize)).collect(),
    }
}

fn load_dataset(c: &Common, d: &DatasetArgs) -> Result<DwiDataset> {
    let vols = with_ped(read_nifti(&d.input)?, c.ped_axis)?;
    DwiDataset::new(vols, read_bvals_bvecs(&d.bvals, &d.bvecs)?)
}

fn pick_volume(path: &Path, index: usize, ped: Option<u8>) -> Result<Volume3> {
    let mut vols = with_ped(read_nifti(path)?, ped)?;
    if index >= vols.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: volume index {index} out of range ({} volumes)",
            path.display(),
            vols.len()
        )));
    }
    Ok(vols.swap_remove(index))
}

fn dataset_translator(d: &DwiDataset, t: &TranslatorArgs) -> Result<TranslatorKind> {
    let choice = match t.translator {
        Method::Identity => TranslatorChoice::Identity,
        Method::HistogramMatch => TranslatorChoice::HistogramMatch,
    };
    make_translator(choice, d, None, t.b_ref, t.quantiles)
}

fn write_transforms(dir: &Path, transforms: impl Iterator<Item = crate::transform::EddyMotionTransform>) -> Result<()> {
    for (i, t) in transforms.enumerate() {
        write_transform(&dir.join(volume_name(i)), &t)?;
    }
    Ok(())
}

fn simulate(c: &Common) -> Result<()> {
    let mut config: SimulationConfig = load_config(c)?;
    if let Some(a) = c.ped_axis {
        config.acquisition.ped_axis = a as usize;
    }
    let sim = config.generate(c.seed)?;
    write_nifti(&out(c, "dwi.nii.gz"), &sim.dataset.volumes)?;
    write_nifti(&out(c, "clean.nii.gz"), &sim.clean)?;
    write_bvals_bvecs(&sim.dataset.table, &out(c, "bvals"), &out(c, "bvecs"))?;
    write_transforms(&subdir(c, "transforms")?, sim.transforms.iter().copied())?;
    for (b, v) in &sim.powder {
        write_nifti(&out(c, format!("powder_b{}.nii.gz", shell_name(*b))), std::slice::from_ref(v))?;
    }
    write_nifti(&out(c, "brain_mask.nii.gz"), &[sim.brain_mask().to_volume(sim.dataset.volumes[0].ped_axis())])?;
    write_json(&out(c, "simulation.json"), &config)
}

fn translate_cmd(c: &Common, a: &TranslateArgs) -> Result<()> {
    let d = load_dataset(c, &a.data)?;
    let kind = match (&a.template, a.translator.translator) {
        (Some(p), Method::HistogramMatch) => {
            TranslatorKind::HistogramMatch(HistogramMatch::new(&pick_volume(p, 0, None)?, a.translator.quantiles)?)
        }
        _ => dataset_translator(&d, &a.translator)?,
    };
    let vols = (0..d.len())
        .map(|i| translate(&kind, &d.volumes[i], &VolumeMeta::of(&d, i)))
        .collect::<Result<Vec<_>>>()?;
    write_nifti(&out(c, "translated.nii.gz"), &vols)
}

#[derive(Debug, Serialize)]
struct TraceEntry<'a> {
    index: usize,
    converged: bool,
    initial_loss: f64,
    final_loss: f64,
    levels: &'a [LevelTrace],
}

impl<'a> TraceEntry<'a> {
    fn of(index: usize, r: &'a RegistrationResult) -> Self {
        Self {
            index,
            converged: r.converged,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            levels: &r.trace,
        }
    }
}

fn register_cmd(c: &Common, a: &RegisterArgs) -> Result<()> {
    let config: RegistrationConfig = load_config(c)?;
    let moving = pick_volume(&a.moving, a.moving_index, c.ped_axis)?;
    let reference = pick_volume(&a.reference, a.reference_index, c.ped_axis)?;
    let translated = match a.translator {
        Method::Identity => moving.clone(),
        Method::HistogramMatch => HistogramMatch::new(&reference, a.quantiles)?.apply(&moving)?,
    };
    let result = register(&translated, &reference, &config)?;
    write_nifti(&out(c, "registered.nii.gz"), &[correct(&moving, &result.transform)?])?;
    write_transform(&out(c, "transform.json"), &result.transform)?;
    write_json(&out(c, "trace.json"), &TraceEntry::of(a.moving_index, &result))
}

fn correct_cmd(c: &Common, a: &CorrectArgs) -> Result<()> {
    let config: RegistrationConfig = load_config(c)?;
    let d = load_dataset(c, &a.data)?;
    let reference = match a.reference_index {
        Some(i) => i,
        None => *d
            .table
            .b0_indices()
            .first()
            .ok_or_else(|| Error::Missing("dataset has no b=0 volume to use as reference".into()))?,
    };
    let translator = dataset_translator(&d, &a.translator)?;
    let res = correct_dataset(&d, reference, &translator, &config)?;
    write_nifti(&out(c, "corrected.nii.gz"), &res.corrected.volumes)?;
    write_transforms(&subdir(c, "transforms")?, res.results.iter().map(|r| r.transform))?;
    let trace: Vec<TraceEntry> = res.results.iter().enumerate().map(|(i, r)| TraceEntry::of(i, r)).collect();
    write_json(&out(c, "trace.json"), &trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellMetrics {
    pub raw: StdSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected: Option<StdSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeMetrics {
    pub per_volume: Vec<f64>,
    pub median: f64,
}

/// The `evaluate` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub per_shell: BTreeMap<String, ShellMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<MaeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub displacement_rmse: Option<RmseSummary>,
}

fn evaluate_cmd(c: &Common, a: &EvaluateArgs) -> Result<()> {
    let table = read_bvals_bvecs(&a.bvals, &a.bvecs)?;
    let raw = DwiDataset::new(with_ped(read_nifti(&a.input)?, c.ped_axis)?, table.clone())?;
    let corrected = match &a.corrected {
        Some(p) => Some(DwiDataset::new(with_ped(read_nifti(p)?, c.ped_axis)?, table.clone())?),
        None => None,
    };
    let brain = match &a.mask {
        Some(p) => BinaryMask::from_volume(&pick_volume(p, 0, None)?),
        None => {
            let b0 = *table
                .b0_indices()
                .first()
                .ok_or_else(|| Error::Missing("no b=0 volume to derive a brain mask from; pass --mask".into()))?;
            threshold_mask(&raw.volumes[b0], FOREGROUND_FRACTION)?
        }
    };
    let interface = interface_mask(&brain, a.dilate, a.erode)?;

    let mut per_shell = BTreeMap::new();
    for (b, idx) in table.shells() {
        if idx.len() < 2 {
            continue;
        }
        let name = shell_name(b);
        let summarize = |d: &DwiDataset, tag: &str| -> Result<StdSummary> {
            let vols: Vec<&Volume3> = idx.iter().map(|&i| &d.volumes[i]).collect();
            let (map, s) = std_across_volumes(&vols, &interface)?;
            if a.std_maps {
                write_nifti(&out(c, format!("std_{tag}_b{name}.nii.gz")), &[map])?;
            }
            Ok(s)
        };
        let metrics = ShellMetrics {
            raw: summarize(&raw, "raw")?,
            corrected: corrected.as_ref().map(|d| summarize(d, "corrected")).transpose()?,
        };
        per_shell.insert(name, metrics);
    }

    let mae = match &a.mae_target {
        Some(p) => {
            let target = pick_volume(p, 0, None)?;
            let per_volume = raw
                .volumes
                .iter()
                .map(|v| mae(v, &target, &brain))
                .collect::<Result<Vec<_>>>()?;
            let v32: Vec<f32> = per_volume.iter().map(|&x| x as f32).collect();
            Some(MaeMetrics {
                median: percentile(&v32, 50.0),
                per_volume,
            })
        }
        None => None,
    };

    let displacement = match (&a.transforms, &a.truth) {
        (Some(est), Some(gt)) => {
            let grid = *raw.volumes[0].geometry();
            let per_volume = (0..raw.len())
                .map(|i| {
                    let e = read_transform(&est.join(volume_name(i)))?;
                    let t = read_transform(&gt.join(volume_name(i)))?;
                    displacement_rmse(&e, &t, &grid, &brain)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(RmseSummary::new(per_volume))
        }
        _ => None,
    };

    let metrics = Metrics {
        per_shell,
        mae,
        displacement_rmse: displacement,
    };
    write_json(&out(c, "metrics.json"), &metrics)
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    seed: u64,
    size: usize,
    step: f64,
    tolerance: f64,
    configs: usize,
    components: usize,
    max_rel_err: f64,
    passed: bool,
}

fn gradcheck_cmd(c: &Common, a: &GradcheckArgs) -> Result<i32> {
    if a.size < 4 || a.configs == 0 || !(a.step > 0.0) {
        return Err(Error::InvalidArgument("gradcheck needs --size >= 4, --configs >= 1 and --step > 0".into()));
    }
    let r = gradient_check(c.seed, a.configs, [a.size; 3], a.step)?;
    let passed = r.max_rel_err < TOLERANCE;
    println!(
        "max relative gradient error {:.3e} over {} components in {} configurations ({})",
        r.max_rel_err,
        r.components,
        r.configs,
        if passed { "pass" } else { "fail" }
    );
    write_json(
        &out(c, "gradcheck.json"),
        &GradcheckOutput {
            seed: c.seed,
            size: a.size,
            step: a.step,
            tolerance: TOLERANCE,
            configs: r.configs,
            components: r.components,
            max_rel_err: r.max_rel_err,
            passed,
        },
    )?;
    Ok(if passed { 0 } else { 2 })
}

fn pipeline_cmd(c: &Common, a: &PipelineArgs) -> Result<()> {
    let mut config: PipelineConfig = load_config(c)?;
    if let Some(ax) = c.ped_axis {
        config.simulation.acquisition.ped_axis = ax as usize;
    }
    if let Some(t) = a.translator {
        config.translator = match t {
            PipelineTranslator::Identity => TranslatorChoice::Identity,
            PipelineTranslator::HistogramMatch => TranslatorChoice::HistogramMatch,
            PipelineTranslator::Oracle => TranslatorChoice::Oracle,
        };
    }
    let run = run_pipeline(&config, c.seed)?;
    write_json(&out(c, "report.json"), &run.report.without_timing())?;
    write_json(&out(c, "timing.json"), &run.report.timing)?;
    if a.write_data {
        let sim = &run.simulation;
        write_nifti(&out(c, "dwi.nii.gz"), &sim.dataset.volumes)?;
        write_bvals_bvecs(&sim.dataset.table, &out(c, "bvals"), &out(c, "bvecs"))?;
        write_transforms(&subdir(c, "truth")?, sim.transforms.iter().copied())?;
        write_nifti(&out(c, "corrected.nii.gz"), &run.correction.corrected.volumes)?;
        write_transforms(&subdir(c, "transforms")?, run.correction.results.iter().map(|r| r.transform))?;
    }
    let r = &run.report;
    println!(
        "{} volumes, translator {}: DW displacement RMSE median {:.3} max {:.3} voxel, b=0 max {:.3} voxel",
        r.n_volumes, r.translator, r.dw_rmse.median, r.dw_rmse.max, r.b0_rmse.max
    );
    for (b, s) in &r.per_shell {
        println!(
            "  b={b}: interface std raw {:.4} corrected {:.4} aligned {:.4}",
            s.raw.median_std, s.corrected.median_std, s.aligned.median_std
        );
    }
    Ok(())
}
