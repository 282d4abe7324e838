//! Utility evaluation: Dice scoring, run statistics with Welch p-values,
//! the mini segmenter, worst-case selection and the three-arm experiment.

mod dice;
mod experiment;
mod segmenter;
pub mod stats;

pub use dice::{dice, dice_empty_policy, select_worst, DiceResult, Scored};
pub use experiment::{
    run_utility_experiment, run_utility_experiment_logged, score_cases, summary_table, Arm, ArmInputs, CaseDelta,
    CaseScore, RunEntry, RunStatistics, SubgroupDeltas, UtilityReport, PREDICTION_THRESHOLD, RUNS,
};
pub use segmenter::{
    predict_mask, predict_masks, threshold_logits, train_segmenter, train_segmenter_logged, SegCase, Segmenter,
    SegmenterConfig,
};
pub use stats::{welch_p_value, welch_test, WelchTest};
