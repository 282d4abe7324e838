use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Confusion counts and Dice score for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub case_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub dsc: f64,
}

/// Dice when both masks are empty: agreement on absence counts as perfect.
pub fn dice_empty_policy() -> f64 {
    1.0
}

/// `2TP / (2TP + FP + FN)`; true negatives do not enter the score.
pub fn dice(case_id: &str, pred: &Volume, gt: &Volume) -> Result<DiceResult> {
    if pred.extents() != gt.extents() || pred.channels() != gt.channels() {
        return Err(Error::shape(
            "dice",
            format!("prediction {:?} vs ground truth {:?}", pred.extents(), gt.extents()),
        ));
    }
    for (what, v) in [("prediction", pred), ("ground truth", gt)] {
        if !v.is_binary() {
            return Err(Error::InvalidArgument(format!("{case_id}: {what} mask is not binary")));
        }
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let denom = 2 * tp + fp + fn_;
    let dsc = if denom == 0 { dice_empty_policy() } else { 2.0 * tp as f64 / denom as f64 };
    Ok(DiceResult { case_id: case_id.to_string(), tp, fp, fn_, tn, dsc })
}

/// Anything carrying a per-case Dice score.
pub trait Scored {
    fn case_id(&self) -> &str;
    fn dsc(&self) -> f64;
}

impl Scored for DiceResult {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn dsc(&self) -> f64 {
        self.dsc
    }
}

/// Cases scoring strictly below `baseline_mean`, worst first. Ties keep
/// input order.
pub fn select_worst<S: Scored>(results: &[S], baseline_mean: f64) -> Vec<String> {
    let mut below: Vec<&S> = results.iter().filter(|r| r.dsc() < baseline_mean).collect();
    below.sort_by(|a, b| a.dsc().total_cmp(&b.dsc()));
    below.into_iter().map(|r| r.case_id().to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(bits: &[usize], n: usize) -> Volume {
        let mut d = vec![0.0; n * n];
        for &i in bits {
            d[i] = 1.0;
        }
        Volume::new(1, vec![n, n], d).unwrap()
    }

    #[test]
    fn shifted_square_scores_half() {
        // gt: rows 1-2, cols 1-2. pred: rows 1-2, cols 2-3.
        let gt = grid(&[5, 6, 9, 10], 4);
        let pred = grid(&[6, 7, 10, 11], 4);
        let r = dice("c", &pred, &gt).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 2, 2, 10));
        assert_eq!(r.dsc, 0.5);
    }

    #[test]
    fn identity_empty_and_disjoint() {
        let gt = grid(&[0, 1], 3);
        assert_eq!(dice("c", &gt, &gt).unwrap().dsc, 1.0);
        assert_eq!(dice("c", &grid(&[], 3), &gt).unwrap().dsc, 0.0);
        assert_eq!(dice("c", &grid(&[], 3), &grid(&[], 3)).unwrap().dsc, 1.0);
        assert_eq!(dice("c", &grid(&[4], 3), &grid(&[], 3)).unwrap().dsc, 0.0);
    }

    #[test]
    fn rejects_non_binary_and_mismatch() {
        let mut soft = grid(&[0], 3);
        soft.data_mut()[1] = 0.5;
        assert!(dice("c", &soft, &grid(&[0], 3)).is_err());
        assert!(dice("c", &grid(&[0], 3), &grid(&[0], 4)).is_err());
    }

    #[test]
    fn select_worst_is_strict() {
        let r = |id: &str, dsc| DiceResult { case_id: id.into(), tp: 0, fp: 0, fn_: 0, tn: 0, dsc };
        let rs = [r("a", 0.8), r("b", 0.2), r("c", 0.5)];
        assert_eq!(select_worst(&rs, 0.5), vec!["b"]);
        assert!(select_worst(&rs, 0.1).is_empty());
        assert_eq!(select_worst(&rs, 0.9), vec!["b", "c", "a"]);
    }
}
