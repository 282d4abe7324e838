use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::dice::{dice, select_worst, DiceResult, Scored};
use super::segmenter::{predict_masks, train_segmenter, SegCase, Segmenter, SegmenterConfig};
use super::stats::{mean_std, welch_test, WelchTest};
use crate::error::{Error, Result};
use crate::phantom::{LoadedCase, Split};

/// Number of independently seeded segmenter runs per arm.
pub const RUNS: usize = 5;

pub const PREDICTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Real training split only.
    Real,
    /// Synthetic images generated from the training-split masks only.
    Synthetic,
    /// Real training split plus synthetic images generated from the masks
    /// of the worst validation cases.
    Targeted,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Real => "Real",
            Arm::Synthetic => "Synthetic",
            Arm::Targeted => "Real+Synthetic",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Arm::Real => "real",
            Arm::Synthetic => "synthetic",
            Arm::Targeted => "targeted",
        }
    }

    pub const ALL: [Arm; 3] = [Arm::Real, Arm::Synthetic, Arm::Targeted];
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown arm {s:?}; expected real, synthetic or targeted")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub mean_test_dsc: f64,
    pub mean_val_dsc: f64,
    pub params_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub runs: Vec<RunEntry>,
    /// Mean of the per-run mean test DSCs.
    pub mean: f64,
    /// Sample standard deviation of the per-run means.
    pub std: f64,
}

impl RunStatistics {
    pub fn from_runs(runs: Vec<RunEntry>) -> Result<Self> {
        if runs.len() != RUNS {
            return Err(Error::InvalidArgument(format!("expected {RUNS} runs, got {}", runs.len())));
        }
        let (mean, std) = mean_std(&runs.iter().map(|r| r.mean_test_dsc).collect::<Vec<_>>());
        Ok(Self { runs, mean, std })
    }
}

/// One evaluation case scored in every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub split: Split,
    pub per_run: Vec<f64>,
    pub mean: f64,
}

impl Scored for CaseScore {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn dsc(&self) -> f64 {
        self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDelta {
    pub case_id: String,
    /// This arm's mean DSC minus the real arm's.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubgroupDeltas {
    pub worst_val: Vec<CaseDelta>,
    pub other_val: Vec<CaseDelta>,
    pub test: Vec<CaseDelta>,
}

impl SubgroupDeltas {
    pub fn means(&self) -> [f64; 3] {
        let m = |v: &[CaseDelta]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().map(|d| d.delta).sum::<f64>() / v.len() as f64
            }
        };
        [m(&self.worst_val), m(&self.other_val), m(&self.test)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub arm: Arm,
    pub config_hash: String,
    /// Ids of the cases the segmenters were trained on.
    pub training_cases: Vec<String>,
    pub stats: RunStatistics,
    /// Welch test against the real arm (trivially p = 1 for the real arm).
    pub vs_real: WelchTest,
    pub cases: Vec<CaseScore>,
    /// Real-arm mean test DSC used as the selection threshold.
    pub selection_threshold: f64,
    /// Validation cases whose mean DSC lies strictly below the threshold,
    /// worst first.
    pub worst_val: Vec<String>,
    pub subgroup_deltas: SubgroupDeltas,
}

impl UtilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn case(&self, id: &str) -> Option<&CaseScore> {
        self.cases.iter().find(|c| c.case_id == id)
    }
}

/// Score every case with the same prediction and Dice path, whatever split
/// it belongs to.
pub fn score_cases(seg: &Segmenter, cases: &[LoadedCase]) -> Result<Vec<DiceResult>> {
    let images: Vec<_> = cases.iter().map(|c| &c.image).collect();
    let preds = predict_masks(seg, &images, PREDICTION_THRESHOLD)?;
    cases.iter().zip(&preds).map(|(c, p)| dice(&c.case_id, p, &c.mask)).collect()
}

fn check_leakage(train: &[LoadedCase], test: &[LoadedCase]) -> Result<()> {
    let test_ids: BTreeSet<&str> = test.iter().map(|c| c.case_id.as_str()).collect();
    for c in train {
        for id in std::iter::once(c.case_id.as_str()).chain(c.source_case.as_deref()) {
            if test_ids.contains(id) {
                return Err(Error::SplitLeakage(format!(
                    "training case {:?} derives from test case {id:?}",
                    c.case_id
                )));
            }
        }
    }
    Ok(())
}

/// Inputs of one utility experiment. `val` and `test` must be the same
/// pinned real splits for every arm.
pub struct ArmInputs<'a> {
    pub train: &'a [LoadedCase],
    pub val: &'a [LoadedCase],
    pub test: &'a [LoadedCase],
}

/// Train one segmenter per seed on `inputs.train`, score the validation and
/// test splits, and compare against `baseline` (the real arm's report; pass
/// `None` when running the real arm itself).
pub fn run_utility_experiment(
    arm: Arm,
    inputs: &ArmInputs<'_>,
    seeds: &[u64; RUNS],
    cfg: &SegmenterConfig,
    baseline: Option<&UtilityReport>,
    config_hash: &str,
) -> Result<UtilityReport> {
    run_utility_experiment_logged(arm, inputs, seeds, cfg, baseline, config_hash, |_, _| {})
}

/// As [`run_utility_experiment`], calling `on_run(run_index, entry)` after
/// each seed finishes.
pub fn run_utility_experiment_logged(
    arm: Arm,
    inputs: &ArmInputs<'_>,
    seeds: &[u64; RUNS],
    cfg: &SegmenterConfig,
    baseline: Option<&UtilityReport>,
    config_hash: &str,
    mut on_run: impl FnMut(usize, &RunEntry),
) -> Result<UtilityReport> {
    check_leakage(inputs.train, inputs.test)?;
    check_leakage(inputs.val, inputs.test)?;
    if inputs.val.is_empty() || inputs.test.is_empty() {
        return Err(Error::InvalidArgument("validation and test splits must be non-empty".into()));
    }
    match (arm, baseline) {
        (Arm::Real, Some(_)) => return Err(Error::InvalidArgument("the real arm is its own baseline".into())),
        (Arm::Synthetic | Arm::Targeted, None) => {
            return Err(Error::MissingPrerequisite {
                what: format!("{} arm needs the real-arm report", arm.key()),
                hint: "run-experiment --arm real".into(),
            })
        }
        _ => {}
    }
    let seg_cases: Vec<SegCase<'_>> = inputs.train.iter().map(|c| SegCase { image: &c.image, mask: &c.mask }).collect();

    let mut per_case: BTreeMap<(Split, String), Vec<f64>> = BTreeMap::new();
    let mut runs = Vec::with_capacity(RUNS);
    for (i, &seed) in seeds.iter().enumerate() {
        let seg = train_segmenter(&seg_cases, seed, cfg)?;
        let mut means = [0.0; 2];
        for (k, (split, cases)) in [(Split::Val, inputs.val), (Split::Test, inputs.test)].into_iter().enumerate() {
            let results = score_cases(&seg, cases)?;
            means[k] = results.iter().map(|r| r.dsc).sum::<f64>() / results.len() as f64;
            for r in results {
                per_case.entry((split, r.case_id)).or_default().push(r.dsc);
            }
        }
        let entry =
            RunEntry { seed, mean_val_dsc: means[0], mean_test_dsc: means[1], params_digest: seg.params.digest() };
        on_run(i, &entry);
        runs.push(entry);
    }
    let stats = RunStatistics::from_runs(runs)?;

    // Keep the input order of each split in the report.
    let order = inputs
        .val
        .iter()
        .map(|c| (Split::Val, &c.case_id))
        .chain(inputs.test.iter().map(|c| (Split::Test, &c.case_id)));
    let cases: Vec<CaseScore> = order
        .map(|(split, id)| {
            let per_run = per_case[&(split, id.clone())].clone();
            let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
            CaseScore { case_id: id.clone(), split, per_run, mean }
        })
        .collect();

    let (vs_real, selection_threshold, worst_val, subgroup_deltas) = match baseline {
        None => {
            let val: Vec<&CaseScore> = cases.iter().filter(|c| c.split == Split::Val).collect();
            let val: Vec<CaseScore> = val.into_iter().cloned().collect();
            let worst = select_worst(&val, stats.mean);
            let same = welch_test(stats.mean, stats.std, RUNS, stats.mean, stats.std, RUNS)?;
            (same, stats.mean, worst, SubgroupDeltas::default())
        }
        Some(base) => {
            let w = welch_test(base.stats.mean, base.stats.std, RUNS, stats.mean, stats.std, RUNS)?;
            let deltas = subgroup_deltas(&cases, base)?;
            (w, base.selection_threshold, base.worst_val.clone(), deltas)
        }
    };

    Ok(UtilityReport {
        arm,
        config_hash: config_hash.to_string(),
        training_cases: inputs.train.iter().map(|c| c.case_id.clone()).collect(),
        stats,
        vs_real,
        cases,
        selection_threshold,
        worst_val,
        subgroup_deltas,
    })
}

fn subgroup_deltas(cases: &[CaseScore], base: &UtilityReport) -> Result<SubgroupDeltas> {
    let worst: BTreeSet<&str> = base.worst_val.iter().map(String::as_str).collect();
    let mut out = SubgroupDeltas::default();
    for c in cases {
        let b = base.case(&c.case_id).filter(|b| b.split == c.split).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "case {:?} is missing from the real-arm report; evaluation splits must be identical across arms",
                c.case_id
            ))
        })?;
        let d = CaseDelta { case_id: c.case_id.clone(), delta: c.mean - b.mean };
        match c.split {
            Split::Val if worst.contains(c.case_id.as_str()) => out.worst_val.push(d),
            Split::Val => out.other_val.push(d),
            _ => out.test.push(d),
        }
    }
    Ok(out)
}

/// Plain-text table: one row per arm with mean DSC, std and p-value against
/// the real arm, followed by the mean subgroup deltas.
pub fn summary_table(reports: &[UtilityReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>10}", "Training data", "Mean DSC", "Std", "p-value");
    for r in reports {
        let p = if r.arm == Arm::Real { "-".to_string() } else { format!("{:.6}", r.vs_real.p) };
        let _ = writeln!(s, "{:<16} {:>9.4} {:>9.5} {:>10}", r.arm.label(), r.stats.mean, r.stats.std, p);
    }
    let others: Vec<&UtilityReport> = reports.iter().filter(|r| r.arm != Arm::Real).collect();
    if !others.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>11} {:>11} {:>11}", "Delta vs Real", "worst-val", "other-val", "test");
        for r in others {
            let [a, b, c] = r.subgroup_deltas.means();
            let _ = writeln!(s, "{:<16} {:>+11.4} {:>+11.4} {:>+11.4}", r.arm.label(), a, b, c);
        }
        if let Some(r) = reports.first() {
            let _ = writeln!(
                s,
                "worst-val: {} validation cases below the real-arm mean {:.4}",
                r.worst_val.len(),
                r.selection_threshold
            );
        }
    }
    s
}
