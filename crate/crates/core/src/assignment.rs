//! Optimal one-to-one assignment (Hungarian / Kuhn-Munkres) and IoU-gated box matching.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, DetectionSet, IouMode};

/// Solves the linear assignment problem on a dense `rows x cols` cost matrix
/// given in row-major order.
///
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row. Among assignments
/// with equal optimal cost the lexicographically smallest row-to-column map is
/// returned. An empty matrix yields an empty assignment.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize, maximize: bool) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix has {} entries, expected {rows}x{cols}", cost.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|c| c.is_finite()), "cost entries must be finite");

    let n = rows.max(cols);
    let sign = if maximize { -1.0 } else { 1.0 };
    // Square padding with zero-cost dummy rows/columns.
    let mut square = vec![0.0; n * n];
    for r in 0..rows {
        for c in 0..cols {
            square[r * n + c] = sign * cost[r * cols + c];
        }
    }

    let (row_to_col, u, v) = solve_square(&square, n);
    let scale = square.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-11 * scale;
    let tight = |r: usize, c: usize| square[r * n + c] - u[r] - v[c] <= tol;
    let row_to_col = lexicographic_tight_matching(n, row_to_col, &tight);

    (0..rows)
        .filter_map(|r| {
            let c = row_to_col[r];
            (c < cols).then_some((r, c))
        })
        .collect()
}

/// Shortest-augmenting-path Hungarian method on an `n x n` matrix.
/// Returns the row-to-column assignment and optimal dual potentials.
fn solve_square(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based with a virtual column 0, after the classic O(n^3) formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Every optimal assignment is a perfect matching on tight edges (zero reduced
/// cost under optimal duals). Walk rows in order and pin each to its smallest
/// tight column that still admits a perfect matching of the remaining rows.
fn lexicographic_tight_matching(n: usize, mut row_to_col: Vec<usize>, tight: &dyn Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut col_to_row = vec![0usize; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut col_fixed = vec![false; n];
    for r in 0..n {
        let current = row_to_col[r];
        for c in 0..n {
            if col_fixed[c] || !tight(r, c) {
                continue;
            }
            if c >= current {
                break;
            }
            // Row currently owning `c` must re-route to the column `r` frees up.
            let displaced = col_to_row[c];
            let mut trial_r2c = row_to_col.clone();
            let mut trial_c2r = col_to_row.clone();
            trial_r2c[r] = c;
            trial_c2r[c] = r;
            let mut blocked = col_fixed.clone();
            blocked[c] = true;
            let mut visited = vec![false; n];
            // `current` is now free; search an alternating path from `displaced` to it.
            trial_c2r[current] = usize::MAX;
            if augment(displaced, n, tight, &blocked, &mut visited, &mut trial_r2c, &mut trial_c2r) {
                row_to_col = trial_r2c;
                col_to_row = trial_c2r;
                break;
            }
        }
        col_fixed[row_to_col[r]] = true;
    }
    row_to_col
}

fn augment(
    row: usize,
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    blocked: &[bool],
    visited: &mut [bool],
    r2c: &mut [usize],
    c2r: &mut [usize],
) -> bool {
    for c in 0..n {
        if blocked[c] || visited[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        let owner = c2r[c];
        if owner == usize::MAX || augment(owner, n, tight, blocked, visited, r2c, c2r) {
            r2c[row] = c;
            c2r[c] = row;
            return true;
        }
    }
    false
}

/// Sum of the selected entries of a row-major matrix.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    /// Index into the reference (pseudo-ground-truth) set.
    pub gt: usize,
    /// Index into the prediction set.
    pub pred: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl MatchSet {
    /// Matched IoU for prediction `k`, if any.
    pub fn pred_iou(&self, k: usize) -> Option<f64> {
        self.pairs.iter().find(|p| p.pred == k).map(|p| p.iou)
    }
}

/// Row-major IoU matrix `gt x pred`; class mismatches score 0.
pub fn iou_matrix(gt: &DetectionSet, pred: &DetectionSet, mode: IouMode) -> Vec<f64> {
    let mut m = Vec::with_capacity(gt.len() * pred.len());
    for g in gt.iter() {
        for p in pred.iter() {
            m.push(if g.class == p.class { iou(g, p, mode) } else { 0.0 });
        }
    }
    m
}

/// Maximum-IoU one-to-one matching; pairs below `min_iou` (or with no overlap) are dropped.
pub fn match_by_iou(gt: &DetectionSet, pred: &DetectionSet, min_iou: f64, mode: IouMode) -> MatchSet {
    assert_eq!(gt.frame, pred.frame, "matching sets in different frames");
    let ious = iou_matrix(gt, pred, mode);
    let cols = pred.len();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (r, c) in hungarian(&ious, gt.len(), cols, true) {
        let v = ious[r * cols + c];
        if v > 0.0 && v >= min_iou {
            gt_used[r] = true;
            pred_used[c] = true;
            pairs.push(MatchPair { gt: r, pred: c, iou: v });
        }
    }
    MatchSet {
        pairs,
        unmatched_gt: (0..gt.len()).filter(|&i| !gt_used[i]).collect(),
        unmatched_pred: (0..pred.len()).filter(|&k| !pred_used[k]).collect(),
    }
}
