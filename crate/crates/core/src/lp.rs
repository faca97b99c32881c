//! Dense bounded-variable primal simplex.
//!
//! Solves `max c·x  s.t.  A x <= b,  l <= x <= u` where every `l` is finite
//! and `u` may be `+inf`. Box constraints are handled by bound flips rather
//! than extra rows, so the basis stays `rows x rows` no matter how many
//! variables there are. Bland's rule is used throughout.

use serde::{Deserialize, Serialize};

pub const PIVOT_TOL: f64 = 1e-9;
pub const FEAS_TOL: f64 = 1e-7;
pub const OPT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LpError {
    #[error("iteration limit reached after {0} pivots")]
    IterationLimit(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
    #[error("variable {0} has lower bound above upper bound")]
    BadBounds(usize),
    #[error("basis became numerically singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    /// Row-major; one inner vector per `<=` row.
    pub constraint_matrix: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub var_lower: Vec<f64>,
    /// `null` in JSON means unbounded above.
    #[serde(with = "inf_as_null")]
    pub var_upper: Vec<f64>,
    /// Variables to start at their upper bound. Only changes the path the
    /// solver takes, never the optimal value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_at_upper: Option<Vec<bool>>,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub objective_value: f64,
    pub primal: Vec<f64>,
    /// Row multipliers, nonnegative.
    pub dual: Vec<f64>,
    /// `c_j - y·A_j` for each structural variable.
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
}

impl LpSolution {
    fn non_optimal(status: LpStatus, n: usize, rows: usize, iterations: usize) -> Self {
        LpSolution {
            status,
            objective_value: match status {
                LpStatus::Unbounded => f64::INFINITY,
                _ => f64::NEG_INFINITY,
            },
            primal: vec![0.0; n],
            dual: vec![0.0; rows],
            reduced_costs: vec![0.0; n],
            iterations,
        }
    }

    /// `y·b + Σ d_j x_j`, which equals the objective at an optimum.
    pub fn dual_objective(&self, p: &LpProblem) -> f64 {
        let yb: f64 = self.dual.iter().zip(&p.rhs).map(|(y, b)| y * b).sum();
        let bound: f64 = self
            .reduced_costs
            .iter()
            .zip(&self.primal)
            .map(|(d, x)| d * x)
            .sum();
        yb + bound
    }
}

impl LpProblem {
    /// `max c·x, A x <= b, 0 <= x <= u`.
    pub fn boxed(objective: Vec<f64>, rows: Vec<Vec<f64>>, rhs: Vec<f64>, upper: Vec<f64>) -> Self {
        LpProblem {
            var_lower: vec![0.0; objective.len()],
            objective,
            constraint_matrix: rows,
            rhs,
            var_upper: upper,
            start_at_upper: None,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rhs.len()
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.var_lower.len() != n || self.var_upper.len() != n {
            return Err(LpError::Dimension(format!(
                "{n} objective entries, {} lower, {} upper bounds",
                self.var_lower.len(),
                self.var_upper.len()
            )));
        }
        if self.constraint_matrix.len() != self.rhs.len() {
            return Err(LpError::Dimension(format!(
                "{} rows but {} right-hand sides",
                self.constraint_matrix.len(),
                self.rhs.len()
            )));
        }
        if let Some(row) = self.constraint_matrix.iter().find(|r| r.len() != n) {
            return Err(LpError::Dimension(format!(
                "row of length {} for {n} variables",
                row.len()
            )));
        }
        if let Some(h) = &self.start_at_upper {
            if h.len() != n {
                return Err(LpError::Dimension("start_at_upper length".into()));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective"));
        }
        if self.rhs.iter().any(|b| !b.is_finite()) {
            return Err(LpError::NonFinite("rhs"));
        }
        if self.constraint_matrix.iter().flatten().any(|a| !a.is_finite()) {
            return Err(LpError::NonFinite("constraint matrix"));
        }
        if self.var_lower.iter().any(|l| !l.is_finite()) {
            return Err(LpError::NonFinite("lower bounds"));
        }
        if self.var_upper.iter().any(|u| u.is_nan()) {
            return Err(LpError::NonFinite("upper bounds"));
        }
        for j in 0..n {
            if self.var_lower[j] > self.var_upper[j] {
                return Err(LpError::BadBounds(j));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Lower,
    Upper,
    Basic(usize),
}

/// Working tableau in shifted coordinates: every variable has lower bound 0.
/// Columns are ordered structural, slack (one per row), artificial.
struct Simplex {
    rows: usize,
    n: usize,
    /// Column-major structural coefficients.
    a: Vec<f64>,
    b: Vec<f64>,
    upper: Vec<f64>,
    /// Row of each artificial column; its coefficient there is -1.
    art_row: Vec<usize>,
    state: Vec<VarState>,
    x: Vec<f64>,
    basis: Vec<usize>,
    binv: Vec<f64>,
    since_refactor: usize,
    iterations: usize,
    max_iterations: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    fn total(&self) -> usize {
        self.n + self.rows + self.art_row.len()
    }

    /// Dot product of `v` (length rows) with column `j`.
    fn dot_col(&self, v: &[f64], j: usize) -> f64 {
        if j < self.n {
            let col = &self.a[j * self.rows..(j + 1) * self.rows];
            col.iter().zip(v).map(|(a, y)| a * y).sum()
        } else if j < self.n + self.rows {
            v[j - self.n]
        } else {
            -v[self.art_row[j - self.n - self.rows]]
        }
    }

    /// `out += scale * A_j`.
    fn axpy_col(&self, j: usize, scale: f64, out: &mut [f64]) {
        if j < self.n {
            let col = &self.a[j * self.rows..(j + 1) * self.rows];
            for (o, a) in out.iter_mut().zip(col) {
                *o += scale * a;
            }
        } else if j < self.n + self.rows {
            out[j - self.n] += scale;
        } else {
            out[self.art_row[j - self.n - self.rows]] -= scale;
        }
    }

    /// `B^{-1} A_j`.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let r = self.rows;
        let mut w = vec![0.0; r];
        if j < self.n {
            let col = &self.a[j * r..(j + 1) * r];
            for (i, wi) in w.iter_mut().enumerate() {
                let row = &self.binv[i * r..(i + 1) * r];
                *wi = row.iter().zip(col).map(|(b, a)| b * a).sum();
            }
        } else {
            let (k, sign) = if j < self.n + r {
                (j - self.n, 1.0)
            } else {
                (self.art_row[j - self.n - r], -1.0)
            };
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = sign * self.binv[i * r + k];
            }
        }
        w
    }

    /// `c_B B^{-1}`.
    fn btran(&self, cost: &[f64]) -> Vec<f64> {
        let r = self.rows;
        let mut y = vec![0.0; r];
        for (i, &bj) in self.basis.iter().enumerate() {
            let cb = cost[bj];
            if cb != 0.0 {
                let row = &self.binv[i * r..(i + 1) * r];
                for (yk, b) in y.iter_mut().zip(row) {
                    *yk += cb * b;
                }
            }
        }
        y
    }

    fn refactor(&mut self) -> Result<(), LpError> {
        let r = self.rows;
        // Gauss-Jordan on [B | I] with partial pivoting.
        let mut m = vec![0.0; r * r];
        for (i, &bj) in self.basis.iter().enumerate() {
            let mut col = vec![0.0; r];
            self.axpy_col(bj, 1.0, &mut col);
            for k in 0..r {
                m[k * r + i] = col[k];
            }
        }
        let mut inv = vec![0.0; r * r];
        for i in 0..r {
            inv[i * r + i] = 1.0;
        }
        for c in 0..r {
            let p = (c..r)
                .max_by(|&i, &k| m[i * r + c].abs().total_cmp(&m[k * r + c].abs()))
                .expect("nonempty range");
            if m[p * r + c].abs() < 1e-12 {
                return Err(LpError::Singular);
            }
            if p != c {
                for k in 0..r {
                    m.swap(p * r + k, c * r + k);
                    inv.swap(p * r + k, c * r + k);
                }
            }
            let piv = m[c * r + c];
            for k in 0..r {
                m[c * r + k] /= piv;
                inv[c * r + k] /= piv;
            }
            for i in 0..r {
                if i != c {
                    let f = m[i * r + c];
                    if f != 0.0 {
                        for k in 0..r {
                            m[i * r + k] -= f * m[c * r + k];
                            inv[i * r + k] -= f * inv[c * r + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.since_refactor = 0;
        self.recompute_basic_values();
        Ok(())
    }

    fn recompute_basic_values(&mut self) {
        let r = self.rows;
        let mut resid = self.b.clone();
        for j in 0..self.total() {
            if matches!(self.state[j], VarState::Upper) && self.x[j] != 0.0 {
                self.axpy_col(j, -self.x[j], &mut resid);
            }
        }
        for i in 0..r {
            let row = &self.binv[i * r..(i + 1) * r];
            let v: f64 = row.iter().zip(&resid).map(|(b, z)| b * z).sum();
            self.x[self.basis[i]] = v;
        }
    }

    fn pivot(&mut self, leave_row: usize, w: &[f64]) {
        let r = self.rows;
        let piv = w[leave_row];
        for k in 0..r {
            self.binv[leave_row * r + k] /= piv;
        }
        for i in 0..r {
            if i != leave_row && w[i] != 0.0 {
                let f = w[i];
                for k in 0..r {
                    self.binv[i * r + k] -= f * self.binv[leave_row * r + k];
                }
            }
        }
        self.since_refactor += 1;
    }

    /// Primal simplex on `cost` from the current basic feasible point.
    fn optimize(&mut self, cost: &[f64]) -> Result<Outcome, LpError> {
        loop {
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
            let y = self.btran(cost);

            // Bland: lowest-index improving column.
            let mut entering = None;
            for j in 0..self.total() {
                let dir = match self.state[j] {
                    VarState::Basic(_) => continue,
                    VarState::Lower if self.upper[j] > 0.0 => 1.0,
                    VarState::Upper => -1.0,
                    VarState::Lower => continue,
                };
                let d = cost[j] - self.dot_col(&y, j);
                if d * dir > OPT_TOL {
                    entering = Some((j, dir));
                    break;
                }
            }
            let Some((q, dir)) = entering else {
                return Ok(Outcome::Optimal);
            };

            if self.iterations >= self.max_iterations {
                return Err(LpError::IterationLimit(self.iterations));
            }
            self.iterations += 1;

            let w = self.ftran(q);
            // Step length limited by the entering range, then by basics.
            let mut step = self.upper[q];
            let mut leave: Option<(usize, bool)> = None;
            for i in 0..self.rows {
                let rate = w[i] * dir;
                let bj = self.basis[i];
                let (limit, to_upper) = if rate > PIVOT_TOL {
                    ((self.x[bj] / rate).max(0.0), false)
                } else if rate < -PIVOT_TOL && self.upper[bj].is_finite() {
                    (((self.upper[bj] - self.x[bj]) / -rate).max(0.0), true)
                } else {
                    continue;
                };
                let better = match leave {
                    _ if limit < step => true,
                    Some((k, _)) if limit == step => bj < self.basis[k],
                    _ => false,
                };
                if better {
                    step = limit;
                    leave = Some((i, to_upper));
                }
            }
            if !step.is_finite() {
                return Ok(Outcome::Unbounded);
            }

            for i in 0..self.rows {
                let bj = self.basis[i];
                self.x[bj] -= dir * step * w[i];
            }
            match leave {
                None => {
                    // Bound flip.
                    let (state, val) = if dir > 0.0 {
                        (VarState::Upper, self.upper[q])
                    } else {
                        (VarState::Lower, 0.0)
                    };
                    self.state[q] = state;
                    self.x[q] = val;
                }
                Some((row, to_upper)) => {
                    let out = self.basis[row];
                    self.x[q] += dir * step;
                    if to_upper {
                        self.state[out] = VarState::Upper;
                        self.x[out] = self.upper[out];
                    } else {
                        self.state[out] = VarState::Lower;
                        self.x[out] = 0.0;
                    }
                    self.state[q] = VarState::Basic(row);
                    self.basis[row] = q;
                    self.pivot(row, &w);
                }
            }
        }
    }
}

/// Solves `p`. Infeasible and unbounded problems are results, not errors.
pub fn lp_solve(p: &LpProblem) -> Result<LpSolution, LpError> {
    p.check()?;
    let n = p.num_vars();
    let rows = p.num_rows();

    let upper_shift: Vec<f64> = (0..n).map(|j| p.var_upper[j] - p.var_lower[j]).collect();
    let mut b = p.rhs.clone();
    for (i, row) in p.constraint_matrix.iter().enumerate() {
        b[i] -= row.iter().zip(&p.var_lower).map(|(a, l)| a * l).sum::<f64>();
    }

    let mut a = vec![0.0; n * rows];
    for (i, row) in p.constraint_matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            a[j * rows + i] = *v;
        }
    }

    let mut state = vec![VarState::Lower; n];
    let mut x = vec![0.0; n];
    let mut resid = b.clone();
    if let Some(hint) = &p.start_at_upper {
        for j in 0..n {
            if hint[j] && upper_shift[j].is_finite() && upper_shift[j] > 0.0 {
                state[j] = VarState::Upper;
                x[j] = upper_shift[j];
                for i in 0..rows {
                    resid[i] -= a[j * rows + i] * x[j];
                }
            }
        }
    }

    let art_row: Vec<usize> = (0..rows).filter(|&i| resid[i] < 0.0).collect();
    let total = n + rows + art_row.len();
    let mut upper = upper_shift;
    upper.extend(std::iter::repeat_n(f64::INFINITY, rows + art_row.len()));
    state.extend(std::iter::repeat_n(VarState::Lower, rows + art_row.len()));
    x.extend(std::iter::repeat_n(0.0, rows + art_row.len()));

    let mut basis = vec![0; rows];
    let mut binv = vec![0.0; rows * rows];
    let mut art_of_row = vec![None; rows];
    for (k, &i) in art_row.iter().enumerate() {
        art_of_row[i] = Some(n + rows + k);
    }
    for i in 0..rows {
        match art_of_row[i] {
            Some(j) => {
                basis[i] = j;
                binv[i * rows + i] = -1.0;
                x[j] = -resid[i];
                state[j] = VarState::Basic(i);
            }
            None => {
                basis[i] = n + i;
                binv[i * rows + i] = 1.0;
                x[n + i] = resid[i];
                state[n + i] = VarState::Basic(i);
            }
        }
    }

    let mut s = Simplex {
        rows,
        n,
        a,
        b,
        upper,
        art_row,
        state,
        x,
        basis,
        binv,
        since_refactor: 0,
        iterations: 0,
        max_iterations: 50 * (rows + n).max(1),
    };

    if !s.art_row.is_empty() {
        let mut cost = vec![0.0; total];
        for c in cost.iter_mut().skip(n + rows) {
            *c = -1.0;
        }
        s.optimize(&cost)?;
        s.refactor()?;
        let infeas: f64 = (n + rows..total).map(|j| s.x[j].max(0.0)).sum();
        let scale = 1.0 + s.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if infeas > FEAS_TOL * scale {
            return Ok(LpSolution::non_optimal(LpStatus::Infeasible, n, rows, s.iterations));
        }
        // Artificials are pinned at zero from here on.
        for j in n + rows..total {
            s.upper[j] = 0.0;
            if let VarState::Basic(_) = s.state[j] {
                s.x[j] = 0.0;
            } else {
                s.state[j] = VarState::Lower;
                s.x[j] = 0.0;
            }
        }
    }

    let mut cost = vec![0.0; total];
    cost[..n].copy_from_slice(&p.objective);
    if let Outcome::Unbounded = s.optimize(&cost)? {
        return Ok(LpSolution::non_optimal(LpStatus::Unbounded, n, rows, s.iterations));
    }
    if s.since_refactor > 0 {
        s.refactor()?;
    }

    let y: Vec<f64> = s
        .btran(&cost)
        .into_iter()
        .map(|v| if v < 0.0 && v > -1e-9 { 0.0 } else { v })
        .collect();
    let primal: Vec<f64> = (0..n)
        .map(|j| {
            let v = s.x[j].clamp(0.0, s.upper[j]);
            v + p.var_lower[j]
        })
        .collect();
    let reduced_costs = (0..n).map(|j| p.objective[j] - s.dot_col(&y, j)).collect();
    let objective_value = p.objective.iter().zip(&primal).map(|(c, x)| c * x).sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective_value,
        primal,
        dual: y,
        reduced_costs,
        iterations: s.iterations,
    })
}
