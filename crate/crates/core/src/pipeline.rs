//! End-to-end run on synthetic data: simulate, translate, correct, evaluate.
//!
//! The report keeps wall-clock timings in their own field so that two runs with the
//! same seed can be compared for equality on everything else.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{is_b0, DwiDataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    displacement_rmse, displacement_rmse_full, interface_mask, mae, percentile, std_across_volumes, threshold_mask,
    BinaryMask, StdSummary,
};
use crate::registration::{correct, correct_dataset, CorrectionOutput, RegistrationConfig};
use crate::simulator::{SimulationConfig, SimulationOutput};
use crate::translator::{
    build_template, translate, HistogramMatch, OracleTranslator, TranslatorKind, VolumeMeta, DEFAULT_B_REF,
    DEFAULT_QUANTILES, FOREGROUND_FRACTION,
};
use crate::volume::Volume3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorChoice {
    Identity,
    HistogramMatch,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub simulation: SimulationConfig,
    pub translator: TranslatorChoice,
    pub b_ref: f64,
    pub n_quantiles: usize,
    pub registration: RegistrationConfig,
    /// Index of the b=0 volume used as the registration reference.
    pub reference_index: usize,
    pub dilate_iters: usize,
    pub erode_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            simulation: SimulationConfig::default(),
            translator: TranslatorChoice::HistogramMatch,
            b_ref: DEFAULT_B_REF,
            n_quantiles: DEFAULT_QUANTILES,
            registration: RegistrationConfig::default(),
            reference_index: 0,
            dilate_iters: 2,
            erode_iters: 2,
        }
    }
}

/// Build the configured translator for a dataset; the oracle needs simulation ground truth.
pub fn make_translator(
    choice: TranslatorChoice,
    dataset: &DwiDataset,
    sim: Option<&SimulationOutput>,
    b_ref: f64,
    n_quantiles: usize,
) -> Result<TranslatorKind> {
    Ok(match choice {
        TranslatorChoice::Identity => TranslatorKind::Identity,
        TranslatorChoice::HistogramMatch => {
            TranslatorKind::HistogramMatch(HistogramMatch::new(&build_template(dataset, b_ref)?, n_quantiles)?)
        }
        TranslatorChoice::Oracle => {
            let sim = sim.ok_or_else(|| Error::Missing("the oracle translator needs simulation ground truth".into()))?;
            TranslatorKind::Oracle(OracleTranslator::from_simulation(sim, b_ref)?)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellStd {
    pub raw: StdSummary,
    pub corrected: StdSummary,
    pub aligned: StdSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub per_volume: Vec<f64>,
    pub max: f64,
    pub median: f64,
    pub p90: f64,
    pub fraction_below_half_voxel: f64,
}

impl RmseSummary {
    pub fn new(per_volume: Vec<f64>) -> Self {
        let v32: Vec<f32> = per_volume.iter().map(|&x| x as f32).collect();
        let n = per_volume.len().max(1) as f64;
        Self {
            max: per_volume.iter().copied().fold(0.0, f64::max),
            median: if v32.is_empty() { 0.0 } else { percentile(&v32, 50.0) },
            p90: if v32.is_empty() { 0.0 } else { percentile(&v32, 90.0) },
            fraction_below_half_voxel: per_volume.iter().filter(|&&e| e < 0.5).count() as f64 / n,
            per_volume,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub simulate_s: f64,
    pub correct_s: f64,
    pub evaluate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub translator: String,
    pub n_volumes: usize,
    /// Interface-mask std summaries keyed by shell b-value.
    pub per_shell: BTreeMap<String, ShellStd>,
    /// PED displacement RMSE of diffusion-weighted volumes (voxels).
    pub dw_rmse: RmseSummary,
    /// Full-vector displacement RMSE of b=0 volumes other than the reference (voxels).
    pub b0_rmse: RmseSummary,
    /// Median MAE between translated clean volumes and the `b_ref` powder average.
    pub translation_mae: f64,
    pub converged_fraction: f64,
    pub timing: Timing,
}

impl PipelineReport {
    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

pub struct PipelineOutput {
    pub simulation: SimulationOutput,
    pub correction: CorrectionOutput,
    pub report: PipelineReport,
}

/// Interface std per shell for the raw, corrected and ground-truth-aligned volumes.
pub fn shell_std(
    raw: &DwiDataset,
    corrected: &DwiDataset,
    aligned: &[Volume3],
    interface: &BinaryMask,
) -> Result<BTreeMap<String, ShellStd>> {
    let mut out = BTreeMap::new();
    for (b, idx) in raw.table.shells() {
        if idx.len() < 2 {
            continue;
        }
        let summary = |vols: &[Volume3]| {
            let picked: Vec<&Volume3> = idx.iter().map(|&i| &vols[i]).collect();
            std_across_volumes(&picked, interface).map(|(_, s)| s)
        };
        out.insert(
            format!("{}", b.round()),
            ShellStd {
                raw: summary(&raw.volumes)?,
                corrected: summary(&corrected.volumes)?,
                aligned: summary(aligned)?,
            },
        );
    }
    Ok(out)
}

pub fn run_pipeline(config: &PipelineConfig, seed: u64) -> Result<PipelineOutput> {
    let t0 = Instant::now();
    let sim = config.simulation.generate(seed)?;
    let simulate_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let translator = make_translator(config.translator, &sim.dataset, Some(&sim), config.b_ref, config.n_quantiles)?;
    let correction = correct_dataset(&sim.dataset, config.reference_index, &translator, &config.registration)?;
    let correct_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let mut report = evaluate_simulation(&sim, &correction, &translator, config)?;
    report.seed = seed;
    report.timing = Timing {
        simulate_s,
        correct_s,
        evaluate_s: t0.elapsed().as_secs_f64(),
    };
    Ok(PipelineOutput {
        simulation: sim,
        correction,
        report,
    })
}

/// Compare a correction against simulation ground truth.
pub fn evaluate_simulation(
    sim: &SimulationOutput,
    correction: &CorrectionOutput,
    translator: &TranslatorKind,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    let dataset = &sim.dataset;
    let grid = *sim.phantom.geometry();
    let brain = sim.brain_mask();
    let aligned = dataset
        .volumes
        .iter()
        .zip(&sim.transforms)
        .map(|(v, t)| correct(v, t))
        .collect::<Result<Vec<_>>>()?;
    let eval_brain = threshold_mask(&dataset.volumes[config.reference_index], FOREGROUND_FRACTION)?;
    let interface = interface_mask(&eval_brain, config.dilate_iters, config.erode_iters)?;
    let per_shell = shell_std(dataset, &correction.corrected, &aligned, &interface)?;

    let (mut dw, mut b0) = (Vec::new(), Vec::new());
    for (i, r) in correction.results.iter().enumerate() {
        if is_b0(dataset.table.bvals()[i]) {
            if i != correction.reference_index {
                b0.push(displacement_rmse_full(&r.transform, &sim.transforms[i], &grid, &brain)?);
            }
        } else {
            dw.push(displacement_rmse(&r.transform, &sim.transforms[i], &grid, &brain)?);
        }
    }

    let mut maes = Vec::new();
    if let Some(target) = sim.powder_average(config.b_ref) {
        for (i, clean) in sim.clean.iter().enumerate() {
            let meta = VolumeMeta::of(dataset, i);
            if is_b0(meta.b) {
                continue;
            }
            // The oracle only knows distorted volumes, so it is scored on those.
            let translated = match translator {
                TranslatorKind::Oracle(_) => continue,
                _ => translate(translator, clean, &meta)?,
            };
            maes.push(mae(&translated, target, &brain)? as f32);
        }
    }
    let converged = correction.results.iter().filter(|r| r.converged).count();
    Ok(PipelineReport {
        seed: 0,
        translator: translator.name().into(),
        n_volumes: dataset.len(),
        per_shell,
        dw_rmse: RmseSummary::new(dw),
        b0_rmse: RmseSummary::new(b0),
        translation_mae: if maes.is_empty() { 0.0 } else { percentile(&maes, 50.0) },
        converged_fraction: converged as f64 / correction.results.len() as f64,
        timing: Timing::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::PhantomSpec;

    fn small() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.simulation.phantom = PhantomSpec::scaled_down();
        c.simulation.acquisition.n_b0 = 2;
        c.simulation.acquisition.shells = vec![(1000.0, 3), (2000.0, 4)];
        c.registration.levels = 2;
        c.registration.max_iters = 30;
        c
    }

    #[test]
    fn report_has_every_shell_and_is_reproducible() {
        let c = small();
        let a = run_pipeline(&c, 3).unwrap().report;
        let b = run_pipeline(&c, 3).unwrap().report;
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.per_shell.keys().cloned().collect::<Vec<_>>(), vec!["0", "1000", "2000"]);
        assert_eq!(a.dw_rmse.per_volume.len(), 7);
        assert_eq!(a.b0_rmse.per_volume.len(), 1);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<PipelineReport>(&json).unwrap(), a);
    }

    #[test]
    fn oracle_requires_ground_truth() {
        let c = small();
        let sim = c.simulation.generate(1).unwrap();
        assert!(make_translator(TranslatorChoice::Oracle, &sim.dataset, None, 2000.0, 16).is_err());
        assert!(make_translator(TranslatorChoice::Oracle, &sim.dataset, Some(&sim), 2000.0, 16).is_ok());
    }
}
