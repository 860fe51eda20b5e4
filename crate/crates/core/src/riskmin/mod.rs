//! Risk minimization over pairwise-comparison data with a linear head.

pub mod estimator;
pub mod features;
pub mod head;
pub mod loss;
pub mod prune;
pub mod train;

pub use estimator::{
    loss_noisy_unbiased, noise_rates_from_prior, risk_binary_biased, risk_pcomp_corrected, risk_pcomp_unbiased,
    risk_uu, Correction, EstimatorConfig, Method, NoiseRates, Objective, RatesMode, RiskEval, TeacherConfig,
};
pub use features::FeatureTable;
pub use head::{LinearHead, Mode, Params};
pub use loss::{logistic_loss, logistic_loss_grad, sigmoid};
pub use prune::{estimate_noise_rates, out_of_fold_probabilities, prune_by_rank, rank_prune, PruneReport};
pub use train::{
    predict, predict_scores, risk_and_gradient, train, write_log, DevCriterion, DevData, EpochLog, HeadMeta,
    TrainHyper, TrainOutcome, TrainedHead,
};
