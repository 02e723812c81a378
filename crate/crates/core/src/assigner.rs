//! Interim label assignment that matches a prescribed class histogram.
//!
//! Every example first joins its most probable class. While some class holds
//! more examples than its budget, the lowest-index surplus class gives up its
//! weakest member (smallest `P(y=c|x)`), which moves to the deficit class it
//! scores highest on. Each move lowers the total surplus by exactly one, so the
//! loop runs `Σ_c max(0, |S_c| − n_c)` times and ends with every class at its
//! budget.
//!
//! Ties always break toward the lower class index and the lower example index.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::PROB_FLOOR;

/// Tolerance on score-row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `N × k` matrix of class membership scores `P(y=c|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if rows * classes != data.len() {
            return Err(Error::Dimension {
                op: "score matrix",
                left: vec![rows, classes],
                right: vec![data.len()],
            });
        }
        if classes < 2 {
            return Err(Error::contract(format!("need k >= 2 classes, got {classes}")));
        }
        if rows == 0 {
            return Err(Error::contract("score matrix has no rows"));
        }
        for (i, row) in data.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::contract(format!("row {i} has a score outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::contract(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self {
            rows,
            classes,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.as_ref().len() != k {
                return Err(Error::contract("ragged score rows"));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), k, data)
    }

    /// Wraps a `[N×k]` probability tensor (e.g. a softmax output).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, k) = t.dims2()?;
        Self::new(n, k, t.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn score(&self, example: usize, class: usize) -> f64 {
        self.data[example * self.classes + class]
    }

    pub fn row(&self, example: usize) -> &[f64] {
        &self.data[example * self.classes..(example + 1) * self.classes]
    }

    /// Most probable class of each row, ties to the lowest index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.rows).map(|j| argmax(self.row(j))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    best
}

/// Target number of examples per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassBudget(pub Vec<usize>);

impl ClassBudget {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// Where the class distribution comes from.
#[derive(Debug, Clone, Copy)]
pub enum PriorSource<'a> {
    /// Known class probabilities.
    Priors(&'a [f64]),
    /// Empirical distribution of these labels over `classes` classes.
    Labels { labels: &'a [usize], classes: usize },
}

/// Class priors from a label list.
pub fn priors_from_labels(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::contract("cannot estimate priors from zero labels"));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::contract(format!("label {y} out of range 0..{classes}")))? += 1;
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / labels.len() as f64)
        .collect())
}

/// Largest-remainder apportionment of `total` over `weights` (which sum to 1).
/// Residual units go to the largest fractional parts, ties to the lower index.
pub(crate) fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let residue = total.saturating_sub(assigned);
    // Fractions are compared at 1e-9 resolution so float noise cannot break ties.
    let mut order: Vec<(i64, usize)> = quotas
        .iter()
        .enumerate()
        .map(|(c, q)| (-((q - q.floor()) * 1e9).round() as i64, c))
        .collect();
    order.sort();
    for &(_, c) in order.iter().take(residue) {
        counts[c] += 1;
    }
    counts
}

/// `n_c` by largest-remainder apportionment of `N·P(y=c)`; always sums to `N`.
pub fn estimate_class_budget(source: PriorSource<'_>, n: usize) -> Result<ClassBudget> {
    if n == 0 {
        return Err(Error::contract("class budget needs N > 0"));
    }
    let priors = match source {
        PriorSource::Priors(p) => {
            if p.len() < 2 {
                return Err(Error::contract("need priors for at least 2 classes"));
            }
            if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::contract("priors must be finite and non-negative"));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::contract(format!("priors sum to {sum}, not 1")));
            }
            p.to_vec()
        }
        PriorSource::Labels { labels, classes } => priors_from_labels(labels, classes)?,
    };
    Ok(ClassBudget(apportion(&priors, n)))
}

/// One executed surplus→deficit move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub example: usize,
    pub from: usize,
    pub to: usize,
}

/// Per-class membership plus surplus/deficit tracking.
#[derive(Debug, Clone)]
pub struct AssignmentState {
    /// Example ids per class, ascending.
    members: Vec<Vec<usize>>,
    budget: Vec<usize>,
    surplus: Vec<bool>,
    deficit: Vec<bool>,
}

impl AssignmentState {
    fn new(scores: &ScoreMatrix, budget: &ClassBudget) -> Self {
        let mut members = vec![Vec::new(); scores.classes()];
        for (j, c) in scores.argmax_labels().into_iter().enumerate() {
            members[c].push(j);
        }
        let mut state = Self {
            members,
            budget: budget.0.clone(),
            surplus: vec![false; scores.classes()],
            deficit: vec![false; scores.classes()],
        };
        for c in 0..scores.classes() {
            state.refresh(c);
        }
        state
    }

    fn refresh(&mut self, c: usize) {
        let size = self.members[c].len();
        self.surplus[c] = size > self.budget[c];
        self.deficit[c] = size < self.budget[c];
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn surplus_classes(&self) -> Vec<usize> {
        (0..self.surplus.len()).filter(|&c| self.surplus[c]).collect()
    }

    pub fn deficit_classes(&self) -> Vec<usize> {
        (0..self.deficit.len()).filter(|&c| self.deficit[c]).collect()
    }

    /// `Σ_c max(0, |S_c| − n_c)`.
    pub fn total_surplus(&self) -> usize {
        self.members
            .iter()
            .zip(&self.budget)
            .map(|(m, &n)| m.len().saturating_sub(n))
            .sum()
    }

    fn step(&mut self, scores: &ScoreMatrix) -> Option<Move> {
        let from = self.surplus.iter().position(|&s| s)?;
        // weakest member of `from`; members are ascending so strict `<` keeps the lowest id
        let (pos, &example) = self.members[from]
            .iter()
            .enumerate()
            .reduce(|best, cand| {
                if scores.score(*cand.1, from) < scores.score(*best.1, from) {
                    cand
                } else {
                    best
                }
            })
            .expect("surplus class is nonempty");
        let to = (0..self.deficit.len())
            .filter(|&c| self.deficit[c])
            .reduce(|best, c| {
                if scores.score(example, c) > scores.score(example, best) {
                    c
                } else {
                    best
                }
            })
            .expect("a surplus implies a deficit when budgets sum to N");
        self.members[from].remove(pos);
        let dest = &mut self.members[to];
        let at = dest.partition_point(|&e| e < example);
        dest.insert(at, example);
        self.refresh(from);
        self.refresh(to);
        Some(Move { example, from, to })
    }

    fn labels(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for (c, m) in self.members.iter().enumerate() {
            for &j in m {
                out[j] = c;
            }
        }
        out
    }
}

/// Balanced interim labels for every row of `scores`.
pub fn assign_interim_labels(scores: &ScoreMatrix, budget: &ClassBudget) -> Result<Vec<usize>> {
    assign_with_moves(scores, budget).map(|(labels, _)| labels)
}

/// Like [`assign_interim_labels`], also returning the executed moves in order.
pub fn assign_with_moves(
    scores: &ScoreMatrix,
    budget: &ClassBudget,
) -> Result<(Vec<usize>, Vec<Move>)> {
    if budget.classes() != scores.classes() {
        return Err(Error::contract(format!(
            "budget has {} classes, scores have {}",
            budget.classes(),
            scores.classes()
        )));
    }
    if budget.total() != scores.rows() {
        return Err(Error::contract(format!(
            "budget sums to {} but there are {} examples",
            budget.total(),
            scores.rows()
        )));
    }
    let mut state = AssignmentState::new(scores, budget);
    let mut moves = Vec::with_capacity(state.total_surplus());
    while let Some(m) = state.step(scores) {
        moves.push(m);
    }
    debug_assert_eq!(state.class_sizes(), budget.0);
    Ok((state.labels(scores.rows()), moves))
}

/// `Σ_j ln P(y=ŷ_j | x_j)` with the usual probability clamp.
pub fn assignment_log_likelihood(scores: &ScoreMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != scores.rows() {
        return Err(Error::contract(format!(
            "{} labels for {} examples",
            labels.len(),
            scores.rows()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            if y >= scores.classes() {
                Err(Error::contract(format!("label {y} out of range")))
            } else {
                Ok(scores.score(j, y).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln())
            }
        })
        .sum()
}
