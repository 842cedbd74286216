//! Full-ranking top-K evaluation.
//!
//! Every item is scored for every user; the user's train items (and, for the
//! test target, the validation item) are excluded from the ranking. Equal
//! scores rank the lower item index first.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::data::Split;
use crate::model::Propagated;
use crate::par;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cutoffs must be non-empty and positive")]
    Cutoffs,
    #[error("embeddings cover {emb} users / {emb_items} items, split has {split} / {split_items}")]
    Shape {
        emb: usize,
        emb_items: usize,
        split: usize,
        split_items: usize,
    },
    #[error("report invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Rank the test item; train and validation items are masked.
    Test,
    /// Rank the validation item; only train items are masked.
    Validation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: usize,
    pub item: usize,
    /// 1-based position of the held-out item among unmasked items.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_users: usize,
    /// Users without a held-out item.
    pub skipped: usize,
    pub cutoffs: Vec<usize>,
    #[serde(serialize_with = "sig6_vec")]
    pub recall: Vec<f64>,
    #[serde(serialize_with = "sig6_vec")]
    pub ndcg: Vec<f64>,
    pub per_user: Vec<UserRank>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn sig6_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&x| round_sig6(x)))
}

/// `1 / log2(rank + 1)` if `rank <= k`, else 0.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

impl EvalReport {
    pub fn empty(cutoffs: &[usize]) -> Self {
        Self {
            n_users: 0,
            skipped: 0,
            cutoffs: cutoffs.to_vec(),
            recall: vec![0.0; cutoffs.len()],
            ndcg: vec![0.0; cutoffs.len()],
            per_user: Vec::new(),
        }
    }

    fn from_ranks(cutoffs: Vec<usize>, per_user: Vec<UserRank>, skipped: usize) -> Self {
        let n = per_user.len();
        let mut recall = vec![0.0; cutoffs.len()];
        let mut ndcg = vec![0.0; cutoffs.len()];
        if n > 0 {
            for (c, &k) in cutoffs.iter().enumerate() {
                let hits = per_user.iter().filter(|r| r.rank <= k).count();
                recall[c] = hits as f64 / n as f64;
                ndcg[c] = per_user.iter().map(|r| ndcg_at(r.rank, k)).sum::<f64>() / n as f64;
            }
        }
        Self {
            n_users: n,
            skipped,
            cutoffs,
            recall,
            ndcg,
            per_user,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|p| self.ndcg[p])
    }

    /// Range, ordering and monotonicity checks on the aggregates.
    pub fn check_invariants(&self) -> Result<(), EvalError> {
        let fail = |m: String| Err(EvalError::Invariant(m));
        if self.recall.len() != self.cutoffs.len() || self.ndcg.len() != self.cutoffs.len() {
            return fail("metric vectors do not match cutoffs".into());
        }
        if self.per_user.len() != self.n_users {
            return fail(format!(
                "{} per-user rows for {} users",
                self.per_user.len(),
                self.n_users
            ));
        }
        const SLACK: f64 = 1e-12;
        for (c, &k) in self.cutoffs.iter().enumerate() {
            let (r, n) = (self.recall[c], self.ndcg[c]);
            if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&n) {
                return fail(format!("@{k}: recall {r} / ndcg {n} outside [0, 1]"));
            }
            if n > r + SLACK {
                return fail(format!("@{k}: ndcg {n} exceeds recall {r}"));
            }
            if c > 0 && self.cutoffs[c - 1] < k && (r + SLACK < self.recall[c - 1] || n + SLACK < self.ndcg[c - 1]) {
                return fail(format!("metrics decrease from @{} to @{k}", self.cutoffs[c - 1]));
            }
        }
        if self.per_user.iter().any(|r| r.rank == 0) {
            return fail("rank 0 in per-user records".into());
        }
        Ok(())
    }
}

/// Sorted items to exclude from each user's ranking.
pub fn ranking_masks(split: &Split, target: Target) -> Vec<Vec<usize>> {
    let mut masks = split.train_items_by_user();
    if target == Target::Test {
        for e in &split.validation {
            masks[e.user].push(e.item);
        }
        for m in &mut masks {
            m.sort_unstable();
            m.dedup();
        }
    }
    masks
}

/// 1-based rank of `target` among unmasked items: one plus the number of
/// unmasked items scoring higher, or equal with a lower index.
pub fn rank_of(scores: &[f64], target: usize, mask: &[usize]) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && (s > t || (s == t && j < target)) && mask.binary_search(&j).is_err())
        .count()
}

fn normalized_cutoffs(cutoffs: &[usize]) -> Result<Vec<usize>, EvalError> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(EvalError::Cutoffs);
    }
    let mut c = cutoffs.to_vec();
    c.sort_unstable();
    c.dedup();
    Ok(c)
}

/// Ranks each user's held-out item against all items.
pub fn evaluate(emb: &Propagated, split: &Split, target: Target, cutoffs: &[usize]) -> Result<EvalReport, EvalError> {
    let cutoffs = normalized_cutoffs(cutoffs)?;
    if emb.users.nrows() != split.n_users || emb.items.nrows() != split.n_items {
        return Err(EvalError::Shape {
            emb: emb.users.nrows(),
            emb_items: emb.items.nrows(),
            split: split.n_users,
            split_items: split.n_items,
        });
    }
    let held = match target {
        Target::Test => split.test_items(),
        Target::Validation => split.validation_items(),
    };
    let masks = ranking_masks(split, target);
    let k = emb.items.ncols();
    let items = emb.items.as_slice().expect("standard layout");
    let ranks: Vec<Option<UserRank>> = par::map_range(split.n_users, |user| {
        let item = held[user]?;
        let u = emb.users.row(user);
        let scores: Vec<f64> = items
            .chunks_exact(k.max(1))
            .map(|row| row.iter().zip(u.iter()).map(|(a, b)| a * b).sum())
            .collect();
        Some(UserRank {
            user,
            item,
            rank: rank_of(&scores, item, &masks[user]),
        })
    });
    let skipped = ranks.iter().filter(|r| r.is_none()).count();
    let per_user: Vec<UserRank> = ranks.into_iter().flatten().collect();
    Ok(EvalReport::from_ranks(cutoffs, per_user, skipped))
}

/// Test-item evaluation with train and validation items masked.
pub fn full_rank_eval(emb: &Propagated, split: &Split, cutoffs: &[usize]) -> Result<EvalReport, EvalError> {
    evaluate(emb, split, Target::Test, cutoffs)
}

/// Writes the report as JSON (all fields) or CSV (one row per cutoff).
/// Metrics carry 6 significant digits.
pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let bytes = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| EvalError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Csv => {
            let mut out = Vec::new();
            writeln!(out, "cutoff,recall,ndcg,n_users").map_err(io)?;
            for (c, &k) in report.cutoffs.iter().enumerate() {
                writeln!(
                    out,
                    "{k},{},{},{}",
                    round_sig6(report.recall[c]),
                    round_sig6(report.ndcg[c]),
                    report.n_users
                )
                .map_err(io)?;
            }
            out
        }
    };
    fs::write(path, bytes).map_err(io)
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let err = |message: String| EvalError::Io {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use ndarray::Array2;

    fn single_user_split(n_items: usize, train: &[usize], val: usize, test: usize) -> Split {
        Split {
            n_users: 1,
            n_items,
            train: train.iter().map(|&i| Edge::new(0, i, 0)).collect(),
            validation: vec![Edge::new(0, val, 1)],
            test: vec![Edge::new(0, test, 2)],
        }
    }

    fn emb(user: Vec<f64>, items: Vec<f64>) -> Propagated {
        let n = items.len();
        Propagated {
            users: Array2::from_shape_vec((1, 1), user).unwrap(),
            items: Array2::from_shape_vec((n, 1), items).unwrap(),
        }
    }

    #[test]
    fn rank_one_is_perfect() {
        let split = single_user_split(4, &[0], 1, 2);
        let r = full_rank_eval(&emb(vec![1.0], vec![9.0, 8.0, 5.0, 1.0]), &split, &[10]).unwrap();
        assert_eq!(r.per_user[0].rank, 1);
        assert_eq!(r.ndcg, vec![1.0]);
        assert_eq!(r.recall, vec![1.0]);
    }

    #[test]
    fn rank_three_is_half() {
        let split = single_user_split(6, &[0], 1, 4);
        let r = full_rank_eval(&emb(vec![1.0], vec![9.0, 8.0, 7.0, 6.0, 5.0, 1.0]), &split, &[2, 10]).unwrap();
        assert_eq!(r.per_user[0].rank, 3);
        assert_eq!(r.ndcg_at(10), Some(0.5));
        assert_eq!(r.recall_at(2), Some(0.0));
        r.check_invariants().unwrap();
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 1, &[]), 2);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 1, &[0]), 1);
    }

    #[test]
    fn validation_target_masks_train_only() {
        let split = single_user_split(4, &[0], 1, 2);
        let r = evaluate(
            &emb(vec![1.0], vec![9.0, 5.0, 8.0, 1.0]),
            &split,
            Target::Validation,
            &[1],
        )
        .unwrap();
        assert_eq!(r.per_user[0].rank, 2);
    }

    #[test]
    fn missing_test_item_is_skipped() {
        let mut split = single_user_split(4, &[0], 1, 2);
        split.test.clear();
        let r = full_rank_eval(&emb(vec![1.0], vec![1.0; 4]), &split, &[5]).unwrap();
        assert_eq!((r.n_users, r.skipped), (0, 1));
        r.check_invariants().unwrap();
    }

    #[test]
    fn bad_cutoffs() {
        let split = single_user_split(4, &[0], 1, 2);
        assert!(full_rank_eval(&emb(vec![1.0], vec![1.0; 4]), &split, &[]).is_err());
        assert!(full_rank_eval(&emb(vec![1.0], vec![1.0; 4]), &split, &[0]).is_err());
    }

    #[test]
    fn invariant_violations_are_reported() {
        let mut r = EvalReport::from_ranks(
            vec![5],
            vec![UserRank {
                user: 0,
                item: 0,
                rank: 2,
            }],
            0,
        );
        r.check_invariants().unwrap();
        r.recall[0] = 0.5;
        assert!(r.check_invariants().is_err());
    }

    #[test]
    fn empty_report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::empty(&[10, 20]);
        let path = dir.path().join("r.json");
        emit_report(&r, &path, ReportFormat::Json).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back.n_users, 0);
        let csv = dir.path().join("r.csv");
        emit_report(&r, &csv, ReportFormat::Csv).unwrap();
        assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn json_round_trip_keeps_aggregates() {
        let per_user = (0..7)
            .map(|u| UserRank {
                user: u,
                item: 0,
                rank: 1 + u * 3,
            })
            .collect();
        let r = EvalReport::from_ranks(vec![1, 5, 10, 20], per_user, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&r, &path, ReportFormat::Json).unwrap();
        let back = read_report(&path).unwrap();
        let rounded: Vec<f64> = r.ndcg.iter().map(|&x| round_sig6(x)).collect();
        assert_eq!(back.ndcg, rounded);
        assert_eq!(back.recall, r.recall.iter().map(|&x| round_sig6(x)).collect::<Vec<_>>());
        assert_eq!(back.per_user, r.per_user);
        let again = dir.path().join("again.json");
        emit_report(&back, &again, ReportFormat::Json).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig6(0.123456789), 0.123457);
        assert_eq!(round_sig6(1.0 / 3.0), 0.333333);
        assert_eq!(round_sig6(0.0), 0.0);
    }
}
