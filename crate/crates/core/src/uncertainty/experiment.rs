//! Per-sample agreement between collaboration uncertainty and ensemble maps.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::agreement::{agreement_metrics_with, AgreementReport};
use super::collab::{collaboration_map, UncertaintyConfig};
use super::ensemble::{ensemble_stats, EnsembleMaps};
use crate::data::Sample;
use crate::error::{contract, Result};
use crate::explain::PixelMap;
use crate::harness::sample_std;
use crate::models::ModelGraph;

/// Ensemble map compared against the collaboration map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMeasure {
    Entropy,
    Variance,
}

impl EnsembleMeasure {
    pub const ALL: [EnsembleMeasure; 2] = [EnsembleMeasure::Entropy, EnsembleMeasure::Variance];

    pub fn pick(self, maps: &EnsembleMaps) -> &PixelMap {
        match self {
            EnsembleMeasure::Entropy => &maps.entropy,
            EnsembleMeasure::Variance => &maps.variance,
        }
    }
}

impl fmt::Display for EnsembleMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMeasure::Entropy => "Entropy",
            EnsembleMeasure::Variance => "Variance",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub method: EnsembleMeasure,
    pub sample_id: usize,
    pub report: AgreementReport,
}

/// Maps behind the rows of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMaps {
    pub sample_id: usize,
    pub collaboration: PixelMap,
    pub ensemble: EnsembleMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub rows: Vec<ExperimentRow>,
    pub maps: Vec<SampleMaps>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        Spread {
            mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
            std: sample_std(values),
        }
    }
}

impl fmt::Display for Spread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: EnsembleMeasure,
    pub iou: Spread,
    pub dice: Spread,
    pub pearson_r: Spread,
    pub p_value: Spread,
}

impl Experiment {
    pub const CSV_HEADER: &'static str = "method,sample_id,iou,dice,pearson_r,p_value";
    pub const SUMMARY_HEADER: &'static str = "Method,IoU,Dice,Pearson Corr (p-value)";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{}",
                    r.method.to_string().to_lowercase(),
                    r.sample_id,
                    r.report.iou,
                    r.report.dice,
                    r.report.pearson_r,
                    r.report.p_value
                )
            })
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        EnsembleMeasure::ALL
            .iter()
            .map(|&method| {
                let rows: Vec<&AgreementReport> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method)
                    .map(|r| &r.report)
                    .collect();
                let col = |f: fn(&AgreementReport) -> f64| Spread::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                SummaryRow {
                    method,
                    iou: col(|r| r.iou),
                    dice: col(|r| r.dice),
                    pearson_r: col(|r| r.pearson_r),
                    p_value: col(|r| r.p_value),
                }
            })
            .collect()
    }

    /// Rows `Entropy`, `Variance`; columns IoU, Dice, Pearson with mean p.
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{}\n", Self::SUMMARY_HEADER);
        for row in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{},{} (p={:.4})",
                row.method, row.iou, row.dice, row.pearson_r, row.p_value.mean
            );
        }
        s
    }
}

/// `n` sample indices from a seeded shuffle, returned in ascending order.
pub fn select_samples(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return contract("select_samples", format!("{n} samples requested from {len}"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx)
}

/// Compares the collaboration map of `eu_model` with ensemble entropy and
/// variance on `sample_count` samples drawn with `cfg.seed`.
pub fn uncertainty_experiment(
    ensemble: &[ModelGraph],
    eu_model: &ModelGraph,
    dataset: &[Sample],
    sample_count: usize,
    cfg: &UncertaintyConfig,
) -> Result<Experiment> {
    let chosen = select_samples(dataset.len(), sample_count, cfg.seed)?;
    let mut rows = Vec::with_capacity(2 * chosen.len());
    let mut maps = Vec::with_capacity(chosen.len());
    for i in chosen {
        let sample = &dataset[i];
        let image = sample.batch_image();
        let collaboration = collaboration_map(eu_model, &image, cfg)?.map;
        let ens = ensemble_stats(ensemble, &image, cfg.exec)?;
        for method in EnsembleMeasure::ALL {
            rows.push(ExperimentRow {
                method,
                sample_id: sample.id,
                report: agreement_metrics_with(&collaboration, method.pick(&ens), cfg.seed, cfg.exec)?,
            });
        }
        maps.push(SampleMaps {
            sample_id: sample.id,
            collaboration,
            ensemble: ens,
        });
    }
    Ok(Experiment { rows, maps })
}
