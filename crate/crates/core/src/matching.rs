// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bipartite matching between edit targets and prediction slots.
//!
//! Targets are workers, slots are jobs. Real targets cost the negated
//! probability of being produced at a slot; padding targets (`∅`) cost zero
//! everywhere, so they absorb whichever slots the real targets leave over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 9;

/// A target row: a real object or the `∅` padding placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Object(String),
    Empty,
}

impl Target {
    pub fn is_empty(&self) -> bool {
        matches!(self, Target::Empty)
    }
}

/// Padded cost matrix between targets and slots.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchProblem {
    pub targets: Vec<Target>,
    pub cost: Matrix,
}

impl MatchProblem {
    /// Pads `objects` with `∅` up to `slots` rows and builds the cost matrix
    /// from a `objects.len() × slots` probability grid.
    pub fn new(objects: &[String], slot_probabilities: &Matrix) -> Result<Self> {
        let slots = slot_probabilities.cols();
        let mut targets: Vec<Target> = objects.iter().cloned().map(Target::Object).collect();
        if targets.len() > slots {
            return Err(Error::Invalid(format!(
                "{} targets cannot be matched to {slots} slots",
                targets.len()
            )));
        }
        targets.resize(slots, Target::Empty);
        let cost = build_cost_matrix(&targets, slot_probabilities)?;
        Ok(Self { targets, cost })
    }

    pub fn solve(&self) -> Result<Assignment> {
        hungarian_solve(&self.cost)
    }
}

/// A bijection from rows (targets) to columns (slots).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `permutation[row] = column`
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn identity(cost: &Matrix) -> Result<Self> {
        let n = check_square(cost)?;
        let permutation: Vec<usize> = (0..n).collect();
        Ok(Self {
            total_cost: total_cost(cost, &permutation),
            permutation,
        })
    }

    pub fn is_bijection(&self) -> bool {
        let n = self.permutation.len();
        let mut seen = vec![false; n];
        self.permutation.iter().all(|&c| {
            c < n && !std::mem::replace(&mut seen[c], true)
        })
    }
}

/// `A[j][k] = −P_k(y_j)` for real targets and `0` for `∅` rows.
///
/// `grid` has one row per real target (in order of appearance in `targets`)
/// and one column per slot; the returned matrix is `slots × slots`.
pub fn build_cost_matrix(targets: &[Target], grid: &Matrix) -> Result<Matrix> {
    let n = grid.cols();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} padded targets for {n} slots",
            targets.len()
        )));
    }
    let real = targets.iter().filter(|t| !t.is_empty()).count();
    if grid.rows() != real {
        return Err(Error::Shape(format!(
            "probability grid has {} rows for {real} real targets",
            grid.rows()
        )));
    }
    if let Some(p) = grid.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("probability {p} outside [0, 1]")));
    }
    let mut cost = Matrix::zeros(n, n);
    let mut next = 0;
    for (j, target) in targets.iter().enumerate() {
        if target.is_empty() {
            continue;
        }
        for k in 0..n {
            cost.set(j, k, -grid.get(next, k));
        }
        next += 1;
    }
    Ok(cost)
}

fn check_square(cost: &Matrix) -> Result<usize> {
    if !cost.is_square() {
        return Err(Error::Shape(format!(
            "cost matrix must be square, got {:?}",
            cost.shape()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(cost.rows())
}

fn total_cost(cost: &Matrix, permutation: &[usize]) -> f64 {
    permutation
        .iter()
        .enumerate()
        .map(|(row, &col)| cost.get(row, col))
        .sum()
}

/// Optimal assignment by the Hungarian method, `O(N³)`.
///
/// Rows and columns are first reduced by their minima to obtain feasible dual
/// potentials. Rows are then inserted one at a time along shortest
/// augmenting paths, each pass lowering the uncovered reduced costs by their
/// minimum, until every row is assigned. Finally the lexicographically
/// smallest permutation among all zero reduced-cost assignments is extracted
/// by depth-first search, so equally optimal answers are reported
/// deterministically.
pub fn hungarian_solve(cost: &Matrix) -> Result<Assignment> {
    let n = check_square(cost)?;
    if n == 0 {
        return Ok(Assignment {
            permutation: Vec::new(),
            total_cost: 0.0,
        });
    }
    let a = |i: usize, j: usize| cost.get(i - 1, j - 1);

    // Potentials are 1-indexed; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // Row reduction.
    for i in 1..=n {
        u[i] = (1..=n).map(|j| a(i, j)).fold(f64::INFINITY, f64::min);
    }
    // Column reduction.
    for j in 1..=n {
        v[j] = (1..=n).map(|i| a(i, j) - u[i]).fold(f64::INFINITY, f64::min);
    }

    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut found = vec![0usize; n];
    for j in 1..=n {
        found[owner[j] - 1] = j - 1;
    }

    // Zero reduced-cost edges; every optimal assignment lives on these.
    let scale = cost.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let eps = 1e-10 * scale;
    let tight: Vec<Vec<bool>> = (1..=n)
        .map(|i| (1..=n).map(|j| a(i, j) - u[i] - v[j] <= eps).collect())
        .collect();
    let permutation = lexicographic_matching(&tight).unwrap_or(found);

    Ok(Assignment {
        total_cost: total_cost(cost, &permutation),
        permutation,
    })
}

/// Lexicographically smallest perfect matching in a bipartite graph.
fn lexicographic_matching(adj: &[Vec<bool>]) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut col_taken = vec![false; n];
    for row in 0..n {
        let mut chosen = None;
        for col in 0..n {
            if !adj[row][col] || col_taken[col] {
                continue;
            }
            col_taken[col] = true;
            if has_perfect_matching(adj, row + 1, &col_taken) {
                chosen = Some(col);
                break;
            }
            col_taken[col] = false;
        }
        fixed.push(chosen?);
    }
    Some(fixed)
}

/// Whether rows `first..n` can be matched into the free columns (Kuhn).
fn has_perfect_matching(adj: &[Vec<bool>], first: usize, col_taken: &[bool]) -> bool {
    let n = adj.len();
    let mut match_col: Vec<Option<usize>> = vec![None; n];

    fn augment(
        row: usize,
        adj: &[Vec<bool>],
        col_taken: &[bool],
        seen: &mut [bool],
        match_col: &mut [Option<usize>],
    ) -> bool {
        for col in 0..adj.len() {
            if !adj[row][col] || col_taken[col] || seen[col] {
                continue;
            }
            seen[col] = true;
            let free = match match_col[col] {
                None => true,
                Some(other) => augment(other, adj, col_taken, seen, match_col),
            };
            if free {
                match_col[col] = Some(row);
                return true;
            }
        }
        false
    }

    (first..n).all(|row| {
        let mut seen = vec![false; n];
        augment(row, adj, col_taken, &mut seen, &mut match_col)
    })
}

/// Exhaustive minimum over all `N!` permutations in lexicographic order; the
/// first strictly smallest total wins, matching the Hungarian tie-break.
pub fn brute_force_assignment(cost: &Matrix) -> Result<Assignment> {
    let n = check_square(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Invalid(format!(
            "brute force limited to N ≤ {BRUTE_FORCE_MAX}, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = total_cost(cost, &perm);
    while next_permutation(&mut perm) {
        let c = total_cost(cost, &perm);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment {
        permutation: best,
        total_cost: best_cost,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
