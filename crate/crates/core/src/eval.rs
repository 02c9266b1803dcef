//! Ranking metrics and the next-visit and interval evaluation protocols.

use std::fmt::Write as _;

use log::warn;

use crate::data::{CheckIn, EvalInstance};
use crate::error::{Error, Result};
use crate::model::Predictor;

/// 1-based rank of `scores[target]` in descending order. Ties count
/// against the target: every other score `>=` the target's ranks above it.
pub fn rank(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&t) = scores.get(target) else {
        return Err(Error::Index {
            what: "target",
            index: target,
            len: scores.len(),
        });
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let above = scores.iter().enumerate().filter(|&(j, &s)| j != target && s >= t).count();
    Ok(above + 1)
}

fn check(ranks: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("cutoff k must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("no ranked instances".into()));
    }
    Ok(())
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over hits within `k`; one relevant item
/// per instance, so the ideal gain is 1.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(gain / ranks.len() as f64)
}

/// Anything that can score candidates for a user's history at a prompt time.
pub trait Scorer: Sync {
    fn score(&self, user: usize, history: &[CheckIn], prompt: i64, candidates: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Predictor<'_> {
    fn score(&self, user: usize, history: &[CheckIn], prompt: i64, candidates: &[usize]) -> Result<Vec<f64>> {
        let out = self.outputs(user, history, &[prompt])?;
        self.scores(out.row_slice(0), candidates)
    }
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub evaluated: usize,
    /// Instances left out: history too short or a per-instance error.
    pub excluded: usize,
}

impl MetricRow {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["variant".to_string()];
        if let Some(r) = self.rows.first() {
            for k in &r.ks {
                h.push(format!("R@{k}"));
                h.push(format!("N@{k}"));
            }
        }
        h.push("evaluated".into());
        h.push("excluded".into());
        h
    }

    fn cells(row: &MetricRow) -> Vec<String> {
        let mut c = vec![row.label.clone()];
        for (r, n) in row.recall.iter().zip(&row.ndcg) {
            c.push(format!("{r:.4}"));
            c.push(format!("{n:.4}"));
        }
        c.push(row.evaluated.to_string());
        c.push(row.excluded.to_string());
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&Self::cells(row).join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let lines: Vec<Vec<String>> = std::iter::once(self.header())
            .chain(self.rows.iter().map(Self::cells))
            .collect();
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l.get(i).map_or(0, String::len)).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for line in &lines {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(s, "{}", padded.join("  ").trim_end()).expect("writing to a string");
        }
        s
    }
}

/// Report label for `m` masked check-ins.
pub fn interval_label(m: usize) -> String {
    if m == 0 {
        "next".into()
    } else {
        format!("int.{m}")
    }
}

fn rank_instance(scorer: &dyn Scorer, inst: &EvalInstance, m: usize) -> Option<Result<usize>> {
    let keep = inst.history.len().checked_sub(m).filter(|&k| k >= 1)?;
    let history = &inst.history[..keep];
    Some(
        scorer
            .score(inst.user, history, inst.target.time, &inst.candidates())
            .and_then(|s| rank(&s, 0)),
    )
}

/// Ranks of the target among `[target] + negatives` with the last `m`
/// history check-ins dropped, as `(ranks, excluded)`. Instances whose
/// history has at most `m` check-ins or whose scoring fails are excluded.
pub fn interval_ranks(scorer: &dyn Scorer, instances: &[EvalInstance], m: usize, threads: usize) -> (Vec<usize>, usize) {
    let threads = threads.max(1).min(instances.len().max(1));
    let chunk = instances.len().div_ceil(threads).max(1);
    let results: Vec<Option<Result<usize>>> = if threads == 1 {
        instances.iter().map(|i| rank_instance(scorer, i, m)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = instances
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|i| rank_instance(scorer, i, m)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut ranks = Vec::with_capacity(results.len());
    let mut excluded = 0;
    for (inst, r) in instances.iter().zip(results) {
        match r {
            Some(Ok(r)) => ranks.push(r),
            Some(Err(e)) => {
                warn!("excluding instance of user {}: {e}", inst.user);
                excluded += 1;
            }
            None => excluded += 1,
        }
    }
    (ranks, excluded)
}

/// Metrics with the last `m` history check-ins masked; `m = 0` is plain
/// next-visit evaluation.
pub fn evaluate_interval(
    scorer: &dyn Scorer,
    instances: &[EvalInstance],
    m: usize,
    ks: &[usize],
    threads: usize,
) -> Result<MetricRow> {
    if instances.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation instances".into()));
    }
    let (ranks, excluded) = interval_ranks(scorer, instances, m, threads);
    if excluded > 0 {
        warn!("{excluded} of {} instances excluded at interval {m}", instances.len());
    }
    Ok(MetricRow {
        label: interval_label(m),
        ks: ks.to_vec(),
        recall: ks.iter().map(|&k| recall_at_k(&ranks, k)).collect::<Result<_>>()?,
        ndcg: ks.iter().map(|&k| ndcg_at_k(&ranks, k)).collect::<Result<_>>()?,
        evaluated: ranks.len(),
        excluded,
    })
}

pub fn evaluate_next(scorer: &dyn Scorer, instances: &[EvalInstance], ks: &[usize], threads: usize) -> Result<MetricRow> {
    evaluate_interval(scorer, instances, 0, ks, threads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[3.0, 1.0, 2.0], 0).unwrap(), 1);
        assert_eq!(rank(&[0.5; 101], 0).unwrap(), 101);
        assert_eq!(rank(&[1.0, 2.0, 1.0], 2).unwrap(), 3);
        assert!(matches!(rank(&[1.0], 1), Err(Error::Index { .. })));
        assert!(rank(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[6], 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[1, 7, 4, 11], 10).unwrap(), 0.75);
        assert_eq!(ndcg_at_k(&[1], 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[3], 5).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[6], 5).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&[], 5), Err(Error::UndefinedMetric(_))));
        assert!(matches!(ndcg_at_k(&[], 5), Err(Error::UndefinedMetric(_))));
        assert!(recall_at_k(&[1], 0).is_err());
    }

    struct Constant;

    impl Scorer for Constant {
        fn score(&self, _: usize, _: &[CheckIn], _: i64, c: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![0.0; c.len()])
        }
    }

    struct Perfect;

    impl Scorer for Perfect {
        fn score(&self, _: usize, _: &[CheckIn], _: i64, c: &[usize]) -> Result<Vec<f64>> {
            Ok(c.iter().enumerate().map(|(i, _)| if i == 0 { 1.0 } else { 0.0 }).collect())
        }
    }

    fn instances() -> Vec<EvalInstance> {
        (0..7)
            .map(|u| EvalInstance {
                user: u,
                history: (0..u + 1).map(|i| CheckIn { user: u, time: i as i64, poi: i % 3 }).collect(),
                target: CheckIn { user: u, time: 99, poi: 3 },
                negatives: (4..104).collect(),
            })
            .collect()
    }

    #[test]
    fn constant_and_perfect_scorers() {
        let inst = instances();
        let zero = evaluate_next(&Constant, &inst, &[1, 5, 10], 1).unwrap();
        assert_eq!(zero.recall, vec![0.0; 3]);
        assert_eq!(zero.ndcg, vec![0.0; 3]);
        for m in 0..4 {
            let row = evaluate_interval(&Perfect, &inst, m, &[1, 5, 10], 3).unwrap();
            assert_eq!(row.recall, vec![1.0; 3]);
            assert_eq!(row.ndcg, vec![1.0; 3]);
            assert_eq!(row.excluded, m.min(7));
            assert_eq!(row.label, interval_label(m));
        }
    }

    #[test]
    fn threads_do_not_change_results() {
        let inst = instances();
        let one = evaluate_interval(&Perfect, &inst, 2, &[5], 1).unwrap();
        assert_eq!(one, evaluate_interval(&Perfect, &inst, 2, &[5], 4).unwrap());
        assert_eq!(one, evaluate_interval(&Perfect, &inst, 2, &[5], 64).unwrap());
    }

    #[test]
    fn table_layout() {
        let table = MetricTable {
            rows: vec![MetricRow {
                label: "int.1".into(),
                ks: vec![5, 10],
                recall: vec![0.5, 0.75],
                ndcg: vec![0.25, 0.3],
                evaluated: 4,
                excluded: 0,
            }],
        };
        assert_eq!(table.to_csv(), "variant,R@5,N@5,R@10,N@10,evaluated,excluded\nint.1,0.5000,0.2500,0.7500,0.3000,4,0\n");
        let text = table.to_text();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("variant  "));
    }
}
