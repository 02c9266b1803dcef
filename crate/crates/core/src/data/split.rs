use std::collections::HashSet;

use rand::Rng;

use super::sampling::sample_eval_negatives;
use super::{CheckIn, Dataset};
use crate::error::Result;
use crate::geocode::SpatialIndex;

/// Longest history or training window fed to the encoder.
pub const MAX_SEQUENCE_LEN: usize = 100;

/// A held-out target with its history, before negatives are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    /// Up to `MAX_SEQUENCE_LEN` check-ins immediately preceding the target.
    pub history: Vec<CheckIn>,
    pub target: CheckIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub user: usize,
    pub history: Vec<CheckIn>,
    pub target: CheckIn,
    pub negatives: Vec<usize>,
}

impl EvalInstance {
    /// Target first, then the negatives.
    pub fn candidates(&self) -> Vec<usize> {
        let mut c = Vec::with_capacity(1 + self.negatives.len());
        c.push(self.target.poi);
        c.extend_from_slice(&self.negatives);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    /// Training windows of length 2..=`MAX_SEQUENCE_LEN`.
    pub train: Vec<Vec<CheckIn>>,
    pub eval: Vec<EvalCase>,
}

/// Index of the last check-in whose POI does not occur earlier.
fn last_novel_visit(seq: &[CheckIn]) -> Option<usize> {
    let mut seen = HashSet::new();
    let mut last = None;
    for (i, c) in seq.iter().enumerate() {
        if seen.insert(c.poi) {
            last = Some(i);
        }
    }
    last
}

/// Splits each user's sequence at their last visit to a new POI.
///
/// The target's preceding check-ins become training data, cut into
/// consecutive windows of at most `MAX_SEQUENCE_LEN` aligned to the end.
/// Users whose target has fewer than two preceding check-ins get no
/// evaluation case and contribute their whole sequence to training.
pub fn split_train_eval(ds: &Dataset) -> Split {
    let mut split = Split::default();
    for (user, seq) in ds.sequences.iter().enumerate() {
        let cut = match last_novel_visit(seq) {
            Some(t) if t >= 2 => {
                split.eval.push(EvalCase {
                    user,
                    history: seq[t.saturating_sub(MAX_SEQUENCE_LEN)..t].to_vec(),
                    target: seq[t],
                });
                t
            }
            _ => seq.len(),
        };
        let mut end = cut;
        while end >= 2 {
            let start = end.saturating_sub(MAX_SEQUENCE_LEN);
            split.train.push(seq[start..end].to_vec());
            end = start;
        }
    }
    split
}

/// Attaches evaluation negatives sampled around each case's last history
/// position.
pub fn build_eval_instances(
    ds: &Dataset,
    cases: &[EvalCase],
    index: &SpatialIndex,
    rng: &mut impl Rng,
) -> Result<Vec<EvalInstance>> {
    cases
        .iter()
        .map(|c| {
            let prev = ds.point(c.history.last().expect("history has at least two entries").poi);
            Ok(EvalInstance {
                user: c.user,
                history: c.history.clone(),
                target: c.target,
                negatives: sample_eval_negatives(index, prev, c.target.poi, rng)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocode::GeoPoint;

    fn dataset(pois: &[usize]) -> Dataset {
        let n = pois.iter().max().map_or(0, |m| m + 1);
        Dataset {
            user_ids: vec!["u".into()],
            poi_ids: (0..n).map(|p| p.to_string()).collect(),
            pois: vec![GeoPoint::new(0.0, 0.0).unwrap(); n],
            sequences: vec![pois
                .iter()
                .enumerate()
                .map(|(i, &poi)| CheckIn { user: 0, time: i as i64, poi })
                .collect()],
            malformed: 0,
        }
    }

    #[test]
    fn target_is_last_novel_visit() {
        let split = split_train_eval(&dataset(&[0, 1, 0, 2]));
        let case = &split.eval[0];
        assert_eq!(case.target.poi, 2);
        assert_eq!(case.history.iter().map(|c| c.poi).collect::<Vec<_>>(), [0, 1, 0]);
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.train[0].len(), 3);
    }

    #[test]
    fn no_novel_target() {
        let split = split_train_eval(&dataset(&[0, 0, 0]));
        assert!(split.eval.is_empty());
        assert_eq!(split.train, vec![dataset(&[0, 0, 0]).sequences[0].clone()]);
    }

    #[test]
    fn long_history_truncated() {
        let mut pois = vec![0; 149];
        pois.push(1);
        let split = split_train_eval(&dataset(&pois));
        assert_eq!(split.eval[0].history.len(), 100);
        let lens: Vec<usize> = split.train.iter().map(Vec::len).collect();
        assert_eq!(lens, [100, 49]);
    }
}
