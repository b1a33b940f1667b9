//! Capacity-constrained assignment of datapoints to experts.
//!
//! Solves `max_z sum_i s_{i,z_i}` over assignments with exactly `c = n/k`
//! datapoints per expert, where `s_ij = a_ij / tau + g_ij` are
//! Gumbel-perturbed logits. The solver warm-starts with an auction pass and
//! then repairs it by cancelling negative-cost cycles in the k-expert move
//! graph, found with Floyd-Warshall. The all-pairs shortest-path matrix of
//! the optimal solution also yields, in closed form, the value of the best
//! assignment subject to pinning any single datapoint to any expert, and
//! from those the per-datapoint conditional assignment distributions.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{Assignment, GumbelNoise, LogitMatrix, ProbMatrix};

/// A cycle counts as negative only below this threshold, so floating-point
/// noise on a genuinely optimal assignment cannot trigger an endless
/// cancelling loop.
pub const NEG_CYCLE_TOL: f64 = 1e-9;
/// Auction bid increment. Large enough to terminate quickly; the cycle
/// cancelling phase repairs the resulting suboptimality.
pub const AUCTION_EPSILON: f64 = 1.0;
/// Bid rounds allowed per datapoint before falling back to greedy completion.
const AUCTION_ROUND_FACTOR: usize = 50;
/// Hard cap on cycle-cancelling rounds; each round strictly improves the
/// objective, so this is a defensive bound, not an expected path.
const MAX_CANCEL_ROUNDS: usize = 100_000;

/// Perturbed score matrix `s_ij = a_ij / tau + g_ij`.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    s: Array2<f64>,
}

impl ScoreMatrix {
    /// Combines logits and noise at temperature `tau`.
    pub fn build(logits: &LogitMatrix, noise: &GumbelNoise, tau: f64) -> Result<Self> {
        if logits.n() != noise.n() || logits.k() != noise.k() {
            return Err(Error::Dimension(format!(
                "logits are {}x{} but noise is {}x{}",
                logits.n(),
                logits.k(),
                noise.n(),
                noise.k()
            )));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Dimension(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        let s = Array2::from_shape_fn((logits.n(), logits.k()), |(i, j)| {
            logits.get(i, j) / tau + noise.get(i, j)
        });
        Self::from_raw(s)
    }

    /// Wraps an explicit score matrix (used by tests and oracles).
    pub fn from_raw(s: Array2<f64>) -> Result<Self> {
        if s.nrows() == 0 || s.ncols() == 0 {
            return Err(Error::Dimension("score matrix must be non-empty".into()));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "score matrix" });
        }
        Ok(Self { s })
    }

    /// Number of datapoints (rows).
    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    /// Number of experts (columns).
    pub fn k(&self) -> usize {
        self.s.ncols()
    }

    /// Score of assigning datapoint `i` to expert `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[[i, j]]
    }

    /// Total score of an assignment.
    pub fn assignment_value(&self, z: &Assignment) -> f64 {
        z.experts().iter().enumerate().map(|(i, &j)| self.s[[i, j]]).sum()
    }
}

/// Cheapest single-datapoint move between every ordered pair of experts.
#[derive(Clone, Debug)]
pub struct MoveCostMatrix {
    d: Array2<f64>,
    /// Datapoint attaining each minimum; `usize::MAX` on the diagonal.
    arg: Array2<usize>,
}

impl MoveCostMatrix {
    /// Wraps a raw cost matrix with no recorded movers (Floyd-Warshall tests).
    pub fn from_raw(d: Array2<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() || d.nrows() == 0 {
            return Err(Error::Dimension("move cost matrix must be square and non-empty".into()));
        }
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "move cost matrix" });
        }
        let arg = Array2::from_elem(d.dim(), usize::MAX);
        Ok(Self { d, arg })
    }

    /// Number of experts.
    pub fn k(&self) -> usize {
        self.d.nrows()
    }

    /// Cost of moving the cheapest datapoint from `j` to `j2`.
    pub fn cost(&self, j: usize, j2: usize) -> f64 {
        self.d[[j, j2]]
    }

    /// Datapoint realizing `cost(j, j2)`.
    pub fn mover(&self, j: usize, j2: usize) -> usize {
        self.arg[[j, j2]]
    }

    /// Underlying cost matrix.
    pub fn raw(&self) -> &Array2<f64> {
        &self.d
    }

    /// Total cost around a cycle of experts (closing edge included).
    pub fn cycle_cost(&self, cycle: &[usize]) -> f64 {
        if cycle.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for t in 0..cycle.len() {
            total += self.d[[cycle[t], cycle[(t + 1) % cycle.len()]]];
        }
        total
    }
}

/// All-pairs shortest distances over the expert move graph, or one negative
/// cycle if the current assignment is improvable.
#[derive(Clone, Debug)]
pub struct ShortestPaths {
    /// Shortest distance from expert `j` to `j2` (valid when no negative cycle).
    pub dstar: Array2<f64>,
    /// Expert vertices of a negative cycle, in traversal order, if one exists.
    pub negative_cycle: Option<Vec<usize>>,
}

impl ShortestPaths {
    /// Shortest distance from expert `j` to `j2`.
    pub fn distance(&self, j: usize, j2: usize) -> f64 {
        self.dstar[[j, j2]]
    }
}

/// An optimal balanced assignment together with its value and the final
/// shortest-path matrix used for conditional values.
#[derive(Clone, Debug)]
pub struct MatchingSolution {
    pub assignment: Assignment,
    /// Optimal value `v* = sum_i s_{i, z_i}`.
    pub value: f64,
    /// Shortest paths of the final (optimal) iteration; no negative cycle.
    pub dstar: ShortestPaths,
    /// Cycle-cancelling rounds used, counting the final no-cycle check.
    pub iterations: usize,
}

/// Finds a feasible balanced assignment by an epsilon-auction.
///
/// Datapoints bid for their best expert net of prices; a full expert evicts
/// its lowest-scoring member and raises its price by at least `epsilon`.
/// After `50 * n` bid rounds any stragglers are placed greedily (best-scoring
/// datapoints first) into remaining slots, so the result is always feasible.
pub fn auction_init(scores: &ScoreMatrix, capacity: usize, epsilon: f64) -> Result<Assignment> {
    let (n, k) = (scores.n(), scores.k());
    if capacity == 0 || n != k * capacity {
        return Err(Error::CapacityMismatch { n, k });
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Dimension(format!("auction epsilon must be positive, got {epsilon}")));
    }

    let mut prices = vec![0.0f64; k];
    let mut members: Vec<Vec<usize>> = vec![Vec::with_capacity(capacity + 1); k];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut queue: VecDeque<usize> = (0..n).collect();
    let max_rounds = AUCTION_ROUND_FACTOR * n;
    let mut rounds = 0usize;

    while let Some(i) = queue.pop_front() {
        if rounds >= max_rounds {
            queue.push_front(i);
            break;
        }
        rounds += 1;

        let mut best_j = 0usize;
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for j in 0..k {
            let benefit = scores.get(i, j) - prices[j];
            if benefit > best {
                second = best;
                best = benefit;
                best_j = j;
            } else if benefit > second {
                second = benefit;
            }
        }
        if k == 1 {
            second = best;
        }
        let bid = best - second + epsilon;

        members[best_j].push(i);
        owner[i] = Some(best_j);
        if members[best_j].len() > capacity {
            prices[best_j] += bid;
            let mut evict_pos = 0usize;
            for (pos, &m) in members[best_j].iter().enumerate() {
                if scores.get(m, best_j) < scores.get(members[best_j][evict_pos], best_j) {
                    evict_pos = pos;
                }
            }
            let evicted = members[best_j].remove(evict_pos);
            owner[evicted] = None;
            queue.push_back(evicted);
        }
    }

    if !queue.is_empty() {
        let mut remaining: Vec<usize> = queue.into_iter().collect();
        let row_max = |i: usize| (0..k).map(|j| scores.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        remaining.sort_by(|&a, &b| {
            row_max(b).partial_cmp(&row_max(a)).expect("scores are finite").then(a.cmp(&b))
        });
        for i in remaining {
            let mut best_j: Option<usize> = None;
            for j in 0..k {
                if members[j].len() < capacity
                    && best_j.map_or(true, |bj| scores.get(i, j) > scores.get(i, bj))
                {
                    best_j = Some(j);
                }
            }
            let j = best_j.expect("n = k * capacity guarantees a free slot");
            members[j].push(i);
            owner[i] = Some(j);
        }
    }

    let z: Vec<usize> = owner
        .into_iter()
        .map(|o| o.expect("every datapoint is placed by auction or fallback"))
        .collect();
    Assignment::new(z, k)
}

/// Cheapest move `d_{jj'} = min over i assigned to j of (s_ij - s_ij')` for
/// every ordered expert pair, with the minimizing datapoint recorded.
pub fn move_costs(scores: &ScoreMatrix, z: &Assignment) -> Result<MoveCostMatrix> {
    let (n, k) = (scores.n(), scores.k());
    if z.n() != n || z.k() != k {
        return Err(Error::Dimension(format!(
            "assignment covers {} datapoints over {} experts; scores are {n}x{k}",
            z.n(),
            z.k()
        )));
    }
    if z.counts().iter().any(|&c| c == 0) {
        return Err(Error::Dimension("every expert needs at least one assigned datapoint".into()));
    }

    let mut by_expert: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &j) in z.experts().iter().enumerate() {
        by_expert[j].push(i);
    }

    let mut d = Array2::zeros((k, k));
    let mut arg = Array2::from_elem((k, k), usize::MAX);
    for j in 0..k {
        for j2 in 0..k {
            if j == j2 {
                continue;
            }
            let mut best = f64::INFINITY;
            let mut best_i = usize::MAX;
            for &i in &by_expert[j] {
                let c = scores.get(i, j) - scores.get(i, j2);
                if c < best {
                    best = c;
                    best_i = i;
                }
            }
            d[[j, j2]] = best;
            arg[[j, j2]] = best_i;
        }
    }
    Ok(MoveCostMatrix { d, arg })
}

/// Splits a closed walk into simple cycles (stack-based decomposition).
fn decompose_walk(walk: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut stack: Vec<usize> = Vec::new();
    let mut pos: Vec<Option<usize>> = vec![None; k];
    let mut cycles = Vec::new();
    for &v in walk {
        if let Some(p) = pos[v] {
            let cycle: Vec<usize> = stack[p..].to_vec();
            for &u in &stack[p + 1..] {
                pos[u] = None;
            }
            stack.truncate(p + 1);
            if cycle.len() >= 2 {
                cycles.push(cycle);
            }
        } else {
            pos[v] = Some(stack.len());
            stack.push(v);
        }
    }
    cycles
}

/// Walks the successor matrix from a vertex with a negative self-distance
/// and extracts the most negative simple cycle on the walk.
fn extract_negative_cycle(
    start: usize,
    next: &Array2<usize>,
    costs: &Array2<f64>,
) -> Option<Vec<usize>> {
    let k = next.nrows();
    let mut walk = vec![start];
    let mut cur = next[[start, start]];
    // The walk either closes at `start` or must repeat a vertex within 2k
    // hops; either way the decomposition below finds every simple cycle on it.
    while cur != start && walk.len() <= 2 * k + 2 {
        walk.push(cur);
        cur = next[[cur, start]];
    }
    walk.push(cur);

    let cycles = decompose_walk(&walk, k);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for cycle in cycles {
        let mut total = 0.0;
        for t in 0..cycle.len() {
            total += costs[[cycle[t], cycle[(t + 1) % cycle.len()]]];
        }
        if total < -NEG_CYCLE_TOL && best.as_ref().map_or(true, |(bc, _)| total < *bc) {
            best = Some((total, cycle));
        }
    }
    best.map(|(_, c)| c)
}

/// All-pairs shortest paths over the expert move graph with early exit on
/// the first negative cycle (negative self-distance on the diagonal).
pub fn floyd_warshall(costs: &MoveCostMatrix) -> ShortestPaths {
    let k = costs.k();
    let mut dstar = costs.d.clone();
    let mut next = Array2::from_shape_fn((k, k), |(_, j2)| j2);

    let check = |dstar: &Array2<f64>, next: &Array2<usize>| -> Option<Vec<usize>> {
        for j in 0..k {
            if dstar[[j, j]] < -NEG_CYCLE_TOL {
                if let Some(cycle) = extract_negative_cycle(j, next, &costs.d) {
                    return Some(cycle);
                }
            }
        }
        None
    };

    if let Some(cycle) = check(&dstar, &next) {
        return ShortestPaths { dstar, negative_cycle: Some(cycle) };
    }
    for m in 0..k {
        for j in 0..k {
            for l in 0..k {
                let via = dstar[[j, m]] + dstar[[m, l]];
                if via < dstar[[j, l]] {
                    dstar[[j, l]] = via;
                    next[[j, l]] = next[[j, m]];
                }
            }
        }
        if let Some(cycle) = check(&dstar, &next) {
            return ShortestPaths { dstar, negative_cycle: Some(cycle) };
        }
    }
    ShortestPaths { dstar, negative_cycle: None }
}

/// Applies one negative cycle: for each edge `(j, j')` the recorded arg-min
/// datapoint moves from `j` to `j'`. All movers are taken from the pre-move
/// assignment, so the moves are simultaneous and cannot collide: a simple
/// cycle visits each source expert once.
pub fn cancel_cycle(z: &Assignment, cycle: &[usize], costs: &MoveCostMatrix) -> Result<Assignment> {
    if cycle.is_empty() {
        return Ok(z.clone());
    }
    let mut seen = vec![false; z.k()];
    for &j in cycle {
        if j >= z.k() {
            return Err(Error::Dimension(format!("cycle vertex {j} out of range")));
        }
        if seen[j] {
            return Err(Error::Dimension("cycle visits an expert twice".into()));
        }
        seen[j] = true;
    }

    let mut moved = z.experts().to_vec();
    let m = cycle.len();
    for t in 0..m {
        let from = cycle[t];
        let to = cycle[(t + 1) % m];
        if from == to {
            continue;
        }
        let i = costs.mover(from, to);
        if i == usize::MAX || z.expert(i) != from {
            return Err(Error::Dimension(format!(
                "recorded mover for edge {from}->{to} does not belong to expert {from}"
            )));
        }
        moved[i] = to;
    }
    Assignment::new(moved, z.k())
}

/// Solves the balanced assignment problem on a raw score matrix.
pub fn solve_score_matrix(scores: &ScoreMatrix, capacity: usize) -> Result<MatchingSolution> {
    let (n, k) = (scores.n(), scores.k());
    if capacity == 0 || n != k * capacity {
        return Err(Error::CapacityMismatch { n, k });
    }
    let mut z = auction_init(scores, capacity, AUCTION_EPSILON)?;
    let mut value = scores.assignment_value(&z);
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > MAX_CANCEL_ROUNDS {
            return Err(Error::SolverStuck(format!(
                "no optimum after {MAX_CANCEL_ROUNDS} cycle-cancelling rounds"
            )));
        }
        let costs = move_costs(scores, &z)?;
        let paths = floyd_warshall(&costs);
        match paths.negative_cycle {
            None => {
                return Ok(MatchingSolution { assignment: z, value, dstar: paths, iterations });
            }
            Some(ref cycle) => {
                let improved = cancel_cycle(&z, cycle, &costs)?;
                let new_value = scores.assignment_value(&improved);
                if new_value <= value {
                    return Err(Error::SolverStuck(format!(
                        "cancelling a cycle of cost {} did not improve the objective",
                        costs.cycle_cost(cycle)
                    )));
                }
                z = improved;
                value = new_value;
            }
        }
    }
}

/// Maximizes `sum_i (a_{i,z_i} / tau + g_{i,z_i})` over balanced assignments.
pub fn solve_gumbel_matching(
    logits: &LogitMatrix,
    noise: &GumbelNoise,
    tau: f64,
    capacity: usize,
) -> Result<MatchingSolution> {
    let scores = ScoreMatrix::build(logits, noise, tau)?;
    solve_score_matrix(&scores, capacity)
}

/// Value of the best balanced assignment subject to `z_i = j`, for every
/// `(i, j)`: pinning datapoint `i` to expert `j` costs its score difference
/// plus the cheapest chain of moves sending one datapoint from `j` back to
/// `i`'s optimal expert `j*`, i.e. `v* - s_{ij*} + s_ij - dstar_{j j*}`.
/// The pinned expert's own column is `v*` by definition.
pub fn conditional_values(solution: &MatchingSolution, scores: &ScoreMatrix) -> Result<Array2<f64>> {
    if solution.dstar.negative_cycle.is_some() {
        return Err(Error::SolverStuck(
            "conditional values require an optimal solution, but a negative cycle remains".into(),
        ));
    }
    let (n, k) = (scores.n(), scores.k());
    if solution.assignment.n() != n || solution.assignment.k() != k {
        return Err(Error::Dimension("solution shape does not match scores".into()));
    }
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let jstar = solution.assignment.expert(i);
        for j in 0..k {
            out[[i, j]] = if j == jstar {
                solution.value
            } else {
                solution.value - scores.get(i, jstar) + scores.get(i, j)
                    - solution.dstar.distance(j, jstar)
            };
        }
    }
    Ok(out)
}

/// Conditional assignment distributions given an already-solved matching.
///
/// Row `i` is `softmax_j(v*_{pinned}(i,j) - g_ij)`, which is the distribution
/// of datapoint `i`'s assignment when only its own noise row is resampled.
/// Substituting `v*_{pinned} = v* - s_{ij*} + s_ij - dstar_{j j*}` and
/// `s_ij = a_ij/tau + g_ij`, the noise and the row constant `v* - s_{ij*}`
/// cancel, leaving `softmax_j(a_ij / tau - dstar_{j j*})`: the result is
/// exactly independent of noise row `i`.
pub fn conditionals_from_solution(
    logits: &LogitMatrix,
    tau: f64,
    solution: &MatchingSolution,
) -> Result<ProbMatrix> {
    if solution.dstar.negative_cycle.is_some() {
        return Err(Error::SolverStuck(
            "conditionals require an optimal solution, but a negative cycle remains".into(),
        ));
    }
    let (n, k) = (logits.n(), logits.k());
    if solution.assignment.n() != n || solution.assignment.k() != k {
        return Err(Error::Dimension("solution shape does not match logits".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Dimension(format!("temperature must be positive, got {tau}")));
    }
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let jstar = solution.assignment.expert(i);
        let mut row: Vec<f64> =
            (0..k).map(|j| logits.get(i, j) / tau - solution.dstar.distance(j, jstar)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = v / total;
        }
    }
    ProbMatrix::new(out)
}

/// Conditional assignment distributions `q(z_i = j | logits, noise without row i)`.
pub fn conditionals(
    logits: &LogitMatrix,
    noise: &GumbelNoise,
    tau: f64,
    capacity: usize,
) -> Result<ProbMatrix> {
    let solution = solve_gumbel_matching(logits, noise, tau, capacity)?;
    conditionals_from_solution(logits, tau, &solution)
}
