//! Uncertainty from gradient collaboration between decoder stages, the
//! deep-ensemble baseline, and agreement metrics between the two.

mod agreement;
mod collab;
mod ensemble;
mod experiment;

pub use agreement::{
    agreement_metrics, agreement_metrics_with, otsu, overlap, pearson, permutation_p_value, AgreementReport, OtsuMask,
    OTSU_BINS, PERMUTATIONS,
};
pub use collab::{
    collaboration_from_gradients, collaboration_map, collaboration_map_with_labels, combine_cosines, guarded_cosine,
    CollabMap, LabelSource, UncertaintyConfig,
};
pub use ensemble::{ensemble_from_probs, ensemble_stats, member_probabilities, EnsembleMaps};
pub use experiment::{
    select_samples, uncertainty_experiment, EnsembleMeasure, Experiment, ExperimentRow, SampleMaps, Spread, SummaryRow,
};
