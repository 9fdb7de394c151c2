//! Markov model of dynamic HARQ and the fixed/conventional baselines.
//!
//! The chain state is the credit `J` a packet starts with (`0..=m`), plus the
//! error state `e` entered when the previous packet was dropped. A packet in
//! state `i` may use up to `L + i` transmissions; decoding after `w` of them
//! leaves `min(L + i - w, m)` credit for the next packet, and a drop leaves
//! none. The error row therefore equals row `0`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbl::CodeSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Slots between consecutive deadlines.
    pub l: u32,
    /// Maximum banked credit, `0 <= m < l`.
    pub m: u32,
}

impl ProtocolParams {
    pub fn new(l: u32, m: u32) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidParams("deadline interval L must be >= 1".into()));
        }
        if m >= l {
            return Err(Error::InvalidParams(format!("credit cap m must satisfy 0 <= m < L, got m={m}, L={l}")));
        }
        Ok(Self { l, m })
    }

    /// Number of chain states, `m + 2`.
    pub fn state_count(&self) -> usize {
        self.m as usize + 2
    }

    /// Smallest transmission count the D-HARQ chain needs.
    pub fn min_w(&self) -> u32 {
        self.l - self.m
    }

    /// Largest transmission budget, `L + m`.
    pub fn max_w(&self) -> u32 {
        self.l + self.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChainState {
    Credit(u32),
    Error,
}

impl fmt::Display for ChainState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Credit(j) => write!(f, "J={j}"),
            Self::Error => f.write_str("J=e"),
        }
    }
}

fn state_of(index: usize, m: u32) -> ChainState {
    if index == m as usize + 1 {
        ChainState::Error
    } else {
        ChainState::Credit(index as u32)
    }
}

/// Fading-averaged error probabilities `eps_w` over a contiguous range of
/// `w`, plus `eps_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    first: u32,
    values: Vec<f64>,
}

impl ErrorTable {
    /// `values[i]` is `eps_{first + i}`. Values must lie in `[0, 1]` and be
    /// nonincreasing.
    pub fn new(first: u32, values: Vec<f64>) -> Result<Self> {
        if first == 0 {
            return Err(Error::Domain("eps_0 is fixed to 1; tables start at w >= 1".into()));
        }
        if values.is_empty() {
            return Err(Error::Domain("error table must not be empty".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("eps_{} = {v} is not a probability", first + i as u32)));
            }
        }
        for (i, pair) in values.windows(2).enumerate() {
            if pair[1] > pair[0] {
                return Err(Error::NonMonotoneTable {
                    w: first + i as u32,
                    upper: pair[0],
                    lower: pair[1],
                });
            }
        }
        Ok(Self { first, values })
    }

    /// Table for `w = 1 ..= values.len()`.
    pub fn from_one(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn first(&self) -> u32 {
        self.first
    }

    pub fn last(&self) -> u32 {
        self.first + self.values.len() as u32 - 1
    }

    pub fn covers(&self, lo: u32, hi: u32) -> bool {
        (lo == 0 || lo >= self.first) && hi <= self.last()
    }

    pub fn get(&self, w: u32) -> Result<f64> {
        if w == 0 {
            return Ok(1.0);
        }
        if w < self.first || w > self.last() {
            return Err(Error::MissingEntry(w));
        }
        Ok(self.values[(w - self.first) as usize])
    }

    fn require(&self, lo: u32, hi: u32) -> Result<()> {
        if !self.covers(lo, hi) {
            let missing = if lo != 0 && lo < self.first { lo } else { hi };
            return Err(Error::MissingEntry(missing));
        }
        Ok(())
    }
}

/// Row-stochastic `(m + 2) x (m + 2)` matrix, states ordered
/// `[J=0, ..., J=m, J=e]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionMatrix {
    m: u32,
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Wraps an arbitrary row-stochastic matrix; used for solver checks.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if dim < 2 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Domain("transition matrix must be square with at least 2 states".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Domain(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self {
            m: dim as u32 - 2,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn state(&self, index: usize) -> ChainState {
        state_of(index, self.m)
    }
}

/// Builds the transition matrix from a raw `eps` lookup, without checks.
fn transition_rows(params: ProtocolParams, eps: impl Fn(u32) -> f64) -> Vec<Vec<f64>> {
    let (l, m) = (params.l, params.m);
    let dim = params.state_count();
    let credit_row = |i: u32| {
        let mut row = vec![0.0; dim];
        for j in 0..m {
            // success after exactly L + i - j transmissions
            let w = l + i - j;
            row[j as usize] = eps(w - 1) - eps(w);
        }
        row[m as usize] = 1.0 - eps(l + i - m);
        row[dim - 1] = eps(l + i);
        row
    };
    let mut rows: Vec<Vec<f64>> = (0..=m).map(credit_row).collect();
    rows.push(credit_row(0));
    rows
}

pub fn build_transition_matrix(params: ProtocolParams, table: &ErrorTable) -> Result<TransitionMatrix> {
    table.require(params.min_w(), params.max_w())?;
    let rows = transition_rows(params, |w| table.get(w).expect("coverage checked"));
    for (i, row) in rows.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::Numerical(format!("row {} of the transition matrix is not stochastic", state_of(i, params.m))));
        }
    }
    Ok(TransitionMatrix { m: params.m, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDistribution {
    /// `[p_0, ..., p_m, p_e]`.
    pub p: Vec<f64>,
    /// `max_j |(p^T Pi - p^T)_j|` of the returned vector.
    pub residual: f64,
}

impl StationaryDistribution {
    pub fn error_probability(&self) -> f64 {
        *self.p.last().expect("at least two states")
    }
}

/// States that are transient or belong to a second closed class. Empty iff
/// the chain is irreducible.
fn reducibility_witness(pi: &TransitionMatrix) -> Vec<usize> {
    let n = pi.dim();
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
        for (j, r) in row.iter_mut().enumerate() {
            if pi.get(i, j) > 0.0 {
                *r = true;
            }
        }
    }
    for via in 0..n {
        for i in 0..n {
            if reach[i][via] {
                for j in 0..n {
                    if reach[via][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // A state is recurrent iff everything it reaches reaches it back.
    let recurrent: Vec<bool> = (0..n).map(|i| (0..n).all(|j| !reach[i][j] || reach[j][i])).collect();
    let Some(anchor) = (0..n).find(|&i| recurrent[i]) else {
        return (0..n).collect();
    };
    (0..n).filter(|&i| !(recurrent[i] && reach[anchor][i])).collect()
}

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Numerical("singular balance system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// Stationary distribution of an irreducible chain.
///
/// Solves the balance equations `p^T (Pi - I) = 0` with the last one replaced
/// by `sum(p) = 1`.
pub fn stationary_distribution(pi: &TransitionMatrix) -> Result<StationaryDistribution> {
    let bad = reducibility_witness(pi);
    if !bad.is_empty() {
        return Err(Error::DegenerateChain {
            states: bad.into_iter().map(|i| pi.state(i)).collect(),
        });
    }
    let n = pi.dim();
    // Row j of the system is column j of (Pi - I).
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| pi.get(i, j) - if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    a[n - 1] = vec![1.0; n];
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    let mut p = solve_dense(a, b)?;
    for v in &mut p {
        // round-off only; an irreducible chain has a strictly positive solution
        if *v < 0.0 && *v > -1e-14 {
            *v = 0.0;
        }
    }
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Numerical(format!("stationary solve produced {p:?}")));
    }
    let residual = (0..n)
        .map(|j| ((0..n).map(|i| p[i] * pi.get(i, j)).sum::<f64>() - p[j]).abs())
        .fold(0.0, f64::max);
    if residual > 1e-10 {
        return Err(Error::Numerical(format!("stationary residual {residual:e} exceeds 1e-10")));
    }
    Ok(StationaryDistribution { p, residual })
}

/// Rejects tables whose D-HARQ entries sit exactly on 0 or 1.
fn degenerate_guard(params: ProtocolParams, table: &ErrorTable) -> Result<()> {
    let mut states = Vec::new();
    for i in 0..=params.m {
        let touches = (params.l + i - params.m..=params.l + i).any(|w| {
            let e = table.get(w).unwrap_or(0.5);
            e == 0.0 || e == 1.0
        });
        if touches {
            states.push(ChainState::Credit(i));
            if i == 0 {
                states.push(ChainState::Error);
            }
        }
    }
    if states.is_empty() {
        Ok(())
    } else {
        Err(Error::DegenerateChain { states })
    }
}

/// Packet error rate of D-HARQ: the stationary probability of the error state.
pub fn dharq_per(params: ProtocolParams, table: &ErrorTable) -> Result<f64> {
    table.require(params.min_w(), params.max_w())?;
    degenerate_guard(params, table)?;
    let pi = build_transition_matrix(params, table)?;
    Ok(stationary_distribution(&pi)?.error_probability())
}

/// Closed-form D-HARQ error rate for `m = 1`.
pub fn dharq_per_m1_closed_form(eps_lm1: f64, eps_l: f64, eps_lp1: f64) -> Result<f64> {
    for v in [eps_lm1, eps_l, eps_lp1] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{v} is not a probability")));
        }
    }
    if eps_l > eps_lm1 || eps_lp1 > eps_l {
        return Err(Error::Domain(format!(
            "closed form needs eps_(L-1) >= eps_L >= eps_(L+1), got {eps_lm1}, {eps_l}, {eps_lp1}"
        )));
    }
    let (a, b, c) = (eps_lm1, eps_l, eps_lp1);
    Ok((c - a * c + b * b) / (1.0 - a + b))
}

/// Transmission counts attached to each transition by the throughput formula.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LambdaMatrix {
    pub rows: Vec<Vec<u32>>,
}

pub fn build_lambda(params: ProtocolParams) -> LambdaMatrix {
    let (l, m) = (params.l, params.m);
    let row = |i: u32| {
        let mut r: Vec<u32> = (0..=m).map(|j| l + i - j).collect();
        r.push(l + i);
        r
    };
    let mut rows: Vec<Vec<u32>> = (0..=m).map(row).collect();
    rows.push(row(0));
    LambdaMatrix { rows }
}

/// Full analytical result for one D-HARQ operating point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DharqAnalysis {
    pub params: ProtocolParams,
    pub per: f64,
    /// `k (1 - per) / (2n p^T (Pi o Lambda) 1)`.
    pub throughput: f64,
    /// Same, with the exact expected transmission count per state in place
    /// of `Lambda`. Present when the table starts at `w = 1`.
    pub throughput_exact: Option<f64>,
    /// `p^T (Pi o Lambda) 1`.
    pub mean_transmissions_lambda: f64,
    pub mean_transmissions_exact: Option<f64>,
    pub stationary: StationaryDistribution,
    pub transition: TransitionMatrix,
    pub lambda: LambdaMatrix,
}

pub fn analyze_dharq(params: ProtocolParams, table: &ErrorTable, spec: &CodeSpec) -> Result<DharqAnalysis> {
    table.require(params.min_w(), params.max_w())?;
    degenerate_guard(params, table)?;
    let transition = build_transition_matrix(params, table)?;
    let stationary = stationary_distribution(&transition)?;
    let lambda = build_lambda(params);
    let per = stationary.error_probability();

    let mean_lambda: f64 = stationary
        .p
        .iter()
        .zip(transition.rows())
        .zip(&lambda.rows)
        .map(|((p, pi_row), lam_row)| p * pi_row.iter().zip(lam_row).map(|(x, l)| x * f64::from(*l)).sum::<f64>())
        .sum();
    let symbols = 2.0 * f64::from(spec.n);
    let k = f64::from(spec.k);
    let throughput = k * (1.0 - per) / (symbols * mean_lambda);

    let mean_exact = if table.covers(1, params.max_w()) {
        let mut total = 0.0;
        for (idx, p) in stationary.p.iter().enumerate() {
            let credit = if idx == params.m as usize + 1 { 0 } else { idx as u32 };
            total += p * expected_transmissions(params.l + credit, table)?;
        }
        Some(total)
    } else {
        None
    };

    Ok(DharqAnalysis {
        params,
        per,
        throughput,
        throughput_exact: mean_exact.map(|t| k * (1.0 - per) / (symbols * t)),
        mean_transmissions_lambda: mean_lambda,
        mean_transmissions_exact: mean_exact,
        stationary,
        transition,
        lambda,
    })
}

pub fn dharq_throughput(params: ProtocolParams, table: &ErrorTable, spec: &CodeSpec) -> Result<f64> {
    analyze_dharq(params, table, spec).map(|a| a.throughput)
}

/// Throughput counting the transmissions a packet actually uses; needs
/// `eps_1 ..= eps_(L+m)`.
pub fn dharq_throughput_exact(params: ProtocolParams, table: &ErrorTable, spec: &CodeSpec) -> Result<f64> {
    table.require(1, params.max_w())?;
    let a = analyze_dharq(params, table, spec)?;
    Ok(a.throughput_exact.expect("coverage checked"))
}

/// Expected transmissions of a packet with budget `budget`:
/// `budget * eps_B + sum_{i=1..B} i (eps_{i-1} - eps_i)`.
pub fn expected_transmissions(budget: u32, table: &ErrorTable) -> Result<f64> {
    table.require(1, budget)?;
    let b = f64::from(budget);
    let mut total = b * table.get(budget)?;
    for i in 1..=budget {
        total += f64::from(i) * (table.get(i - 1)? - table.get(i)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineAnalysis {
    pub per: f64,
    pub throughput: f64,
    pub mean_transmissions: f64,
}

/// Fixed transmission from `eps_L(k, 2n)`.
pub fn fixed_tx_from_epsilon(spec: &CodeSpec, params: ProtocolParams, eps_l_fixed: f64) -> Result<BaselineAnalysis> {
    if !(0.0..=1.0).contains(&eps_l_fixed) {
        return Err(Error::Domain(format!("{eps_l_fixed} is not a probability")));
    }
    let l = f64::from(params.l);
    Ok(BaselineAnalysis {
        per: eps_l_fixed,
        throughput: f64::from(spec.k) * (1.0 - eps_l_fixed) / (2.0 * f64::from(spec.n) * l),
        mean_transmissions: l,
    })
}

/// Conventional HARQ with at most `L` transmissions from `eps_1 ..= eps_L`.
pub fn harq_from_table(spec: &CodeSpec, params: ProtocolParams, table: &ErrorTable) -> Result<BaselineAnalysis> {
    let eps_l = table.get(params.l)?;
    let mean = expected_transmissions(params.l, table)?;
    Ok(BaselineAnalysis {
        per: eps_l,
        throughput: f64::from(spec.k) * (1.0 - eps_l) / (2.0 * f64::from(spec.n) * mean),
        mean_transmissions: mean,
    })
}

/// `d p_j / d eps_w` for `w` in `[L - m, L + m]`, by central differences on
/// the unchecked chain. Rows are indexed by `w - (L - m)`.
pub fn stationary_sensitivity(params: ProtocolParams, table: &ErrorTable) -> Result<Vec<Vec<f64>>> {
    table.require(params.min_w(), params.max_w())?;
    degenerate_guard(params, table)?;
    let lo = params.min_w();
    let solve = |bumped: u32, delta: f64| -> Result<Vec<f64>> {
        let rows = transition_rows(params, |w| {
            let e = table.get(w).expect("coverage checked");
            if w == bumped {
                e + delta
            } else {
                e
            }
        });
        let pi = TransitionMatrix { m: params.m, rows };
        let n = pi.dim();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|i| pi.get(i, j) - if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        a[n - 1] = vec![1.0; n];
        let mut b = vec![0.0; n];
        b[n - 1] = 1.0;
        solve_dense(a, b)
    };
    (lo..=params.max_w())
        .map(|w| {
            let e = table.get(w)?;
            let h = 1e-4 * e.min(1.0 - e).max(1e-300);
            let up = solve(w, h)?;
            let down = solve(w, -h)?;
            Ok(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect())
        })
        .collect()
}

/// Delta-method standard error of each stationary probability, given the
/// covariance of the `eps` estimators. `covariance[a][b]` belongs to
/// `eps_(a+1)` and `eps_(b+1)`.
pub fn stationary_stderr(params: ProtocolParams, table: &ErrorTable, covariance: &[Vec<f64>]) -> Result<Vec<f64>> {
    if covariance.len() < params.max_w() as usize {
        return Err(Error::MissingEntry(params.max_w()));
    }
    let grad = stationary_sensitivity(params, table)?;
    let lo = params.min_w() as usize;
    let states = params.state_count();
    Ok((0..states)
        .map(|j| {
            let mut var = 0.0;
            for (a, ga) in grad.iter().enumerate() {
                for (b, gb) in grad.iter().enumerate() {
                    var += ga[j] * gb[j] * covariance[lo + a - 1][lo + b - 1];
                }
            }
            var.max(0.0).sqrt()
        })
        .collect())
}
