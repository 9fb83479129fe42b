//! Exact solver for the per-step safety QP
//!
//! ```text
//! minimize ‖u − u_ref‖²  subject to  aᵢ·u + bᵢ ≥ 0,  u_min ≤ u ≤ u_max
//! ```
//!
//! by enumerating active sets. With two inputs and a handful of barrier
//! constraints there are only a few dozen candidate sets, and checking the
//! KKT conditions on each one is exact. Candidate sets are visited in
//! lexicographic order (by size, then by index), which makes tie-breaking
//! deterministic.

use crate::error::{Error, Result};
use crate::numerics::{CholeskyFactor, Matrix};

/// Default penalty on squared slack in [`solve_relaxed`].
pub const DEFAULT_SLACK_PENALTY: f64 = 1e6;

const FEAS_TOL: f64 = 1e-9;
const MULT_TOL: f64 = 1e-10;
const SLACK_TOL: f64 = 1e-9;

/// `a·u + b ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Halfspace {
    pub fn new(a: Vec<f64>, b: f64) -> Self {
        Self { a, b }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        dot(&self.a, u) + self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub u_ref: Vec<f64>,
    pub constraints: Vec<Halfspace>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl QpProblem {
    pub fn new(u_ref: Vec<f64>, constraints: Vec<Halfspace>, u_min: Vec<f64>, u_max: Vec<f64>) -> Result<Self> {
        let m = u_ref.len();
        if m == 0 || u_min.len() != m || u_max.len() != m || constraints.iter().any(|c| c.a.len() != m) {
            return Err(Error::Shape("QP dimensions disagree".into()));
        }
        if u_min.iter().zip(&u_max).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Domain("QP box with u_min > u_max".into()));
        }
        Ok(Self {
            u_ref,
            constraints,
            u_min,
            u_max,
        })
    }

    /// Symmetric box `[-bound, bound]^m`.
    pub fn with_box(u_ref: Vec<f64>, constraints: Vec<Halfspace>, bound: f64) -> Result<Self> {
        let m = u_ref.len();
        Self::new(u_ref, constraints, vec![-bound; m], vec![bound; m])
    }

    pub fn dim(&self) -> usize {
        self.u_ref.len()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.u_ref).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Barrier constraints first, then `u_i ≥ u_min_i`, then `u_i ≤ u_max_i`.
    pub fn all_rows(&self) -> Vec<Halfspace> {
        let m = self.dim();
        let mut rows = self.constraints.clone();
        for i in 0..m {
            let mut a = vec![0.0; m];
            a[i] = 1.0;
            rows.push(Halfspace::new(a, -self.u_min[i]));
        }
        for i in 0..m {
            let mut a = vec![0.0; m];
            a[i] = -1.0;
            rows.push(Halfspace::new(a, self.u_max[i]));
        }
        rows
    }

    pub fn is_feasible(&self, u: &[f64], tol: f64) -> bool {
        self.all_rows().iter().all(|r| r.value(u) >= -tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    RelaxedFeasible,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::RelaxedFeasible => "relaxed",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub status: QpStatus,
    /// Indices into [`QpProblem::all_rows`].
    pub active: Vec<usize>,
    /// One multiplier per row of [`QpProblem::all_rows`] (zero when inactive),
    /// for the objective `‖u − u_ref‖²`.
    pub multipliers: Vec<f64>,
    /// Slack per barrier constraint (all zero unless relaxed).
    pub slacks: Vec<f64>,
}

/// Strictly convex QP `min ½ zᵀ diag(h) z + cᵀ z  s.t.  G z + g ≥ 0`.
struct DiagQp {
    hdiag: Vec<f64>,
    c: Vec<f64>,
    rows: Vec<Halfspace>,
}

struct Candidate {
    z: Vec<f64>,
    active: Vec<usize>,
    lambda: Vec<f64>,
    objective: f64,
}

impl DiagQp {
    fn objective(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.hdiag)
            .zip(&self.c)
            .map(|((z, h), c)| 0.5 * h * z * z + c * z)
            .sum()
    }

    /// KKT point for the active set `set`, if it is one.
    fn try_active_set(&self, set: &[usize]) -> Option<Candidate> {
        let n = self.hdiag.len();
        let k = set.len();
        // z = H⁻¹ (G_Sᵀ λ − c); solve (G_S H⁻¹ G_Sᵀ) λ = G_S H⁻¹ c − g_S.
        let lambda: Vec<f64> = if k == 0 {
            Vec::new()
        } else {
            let mut m = Matrix::zeros(k, k);
            let mut rhs = Matrix::zeros(k, 1);
            for (p, &i) in set.iter().enumerate() {
                let ri = &self.rows[i];
                for (q, &j) in set.iter().enumerate() {
                    let rj = &self.rows[j];
                    m[(p, q)] = (0..n).map(|t| ri.a[t] * rj.a[t] / self.hdiag[t]).sum();
                }
                rhs[(p, 0)] = (0..n).map(|t| ri.a[t] * self.c[t] / self.hdiag[t]).sum::<f64>() - ri.b;
            }
            let scale = (0..k).map(|p| m[(p, p)]).fold(0.0, f64::max);
            let factor = CholeskyFactor::new(&m).ok()?;
            // Reject numerically dependent rows.
            if factor.l().diagonal().iter().any(|d| d * d <= 1e-12 * scale) {
                return None;
            }
            factor.solve(&rhs).as_slice().to_vec()
        };
        if lambda.iter().any(|&l| l < -MULT_TOL) {
            return None;
        }
        let mut z: Vec<f64> = (0..n).map(|t| -self.c[t] / self.hdiag[t]).collect();
        for (p, &i) in set.iter().enumerate() {
            for t in 0..n {
                z[t] += lambda[p] * self.rows[i].a[t] / self.hdiag[t];
            }
        }
        // Snap coordinates held by an active single-variable row (box or slack
        // bound) onto the bound exactly.
        for &i in set {
            let r = &self.rows[i];
            let nz: Vec<usize> = (0..n).filter(|&t| r.a[t] != 0.0).collect();
            if let [t] = nz[..] {
                z[t] = -r.b / r.a[t];
            }
        }
        let feasible = self.rows.iter().all(|r| {
            let scale = 1.0 + r.b.abs() + r.a.iter().map(|a| a.abs()).sum::<f64>();
            r.value(&z) >= -FEAS_TOL * scale
        });
        if !feasible {
            return None;
        }
        Some(Candidate {
            objective: self.objective(&z),
            z,
            active: set.to_vec(),
            lambda,
        })
    }

    fn solve(&self) -> Option<Candidate> {
        let n = self.hdiag.len();
        let r = self.rows.len();
        let mut best: Option<Candidate> = None;
        for size in 0..=n.min(r) {
            for_each_subset(r, size, |set| {
                if let Some(c) = self.try_active_set(set) {
                    let better = match &best {
                        None => true,
                        Some(b) => c.objective < b.objective - 1e-12 * (1.0 + b.objective.abs()),
                    };
                    if better {
                        best = Some(c);
                    }
                }
            });
        }
        best
    }
}

/// Calls `f` on every `size`-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, size: usize, mut f: impl FnMut(&[usize])) {
    if size > n {
        return;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        f(&idx);
        // Rightmost position that can still advance.
        let mut i = size;
        while i > 0 && idx[i - 1] == i - 1 + n - size {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Global optimum of the hard-constrained QP, or `Infeasible`.
pub fn solve(p: &QpProblem) -> QpSolution {
    let m = p.dim();
    let rows = p.all_rows();
    let qp = DiagQp {
        hdiag: vec![2.0; m],
        c: p.u_ref.iter().map(|r| -2.0 * r).collect(),
        rows,
    };
    match qp.solve() {
        Some(c) => {
            let mut multipliers = vec![0.0; qp.rows.len()];
            for (p_, &i) in c.active.iter().enumerate() {
                multipliers[i] = c.lambda[p_];
            }
            QpSolution {
                u: c.z,
                status: QpStatus::Optimal,
                active: c.active,
                multipliers,
                slacks: vec![0.0; p.constraints.len()],
            }
        }
        None => QpSolution {
            u: p.u_ref
                .iter()
                .zip(p.u_min.iter().zip(&p.u_max))
                .map(|(r, (lo, hi))| r.clamp(*lo, *hi))
                .collect(),
            status: QpStatus::Infeasible,
            active: Vec::new(),
            multipliers: vec![0.0; qp.rows.len()],
            slacks: vec![0.0; p.constraints.len()],
        },
    }
}

/// Soft version: `min ‖u − u_ref‖² + ρ Σ sᵢ²` with `aᵢ·u + bᵢ + sᵢ ≥ 0`,
/// `sᵢ ≥ 0` and the box kept hard.
///
/// A quadratic penalty would otherwise trade a tiny violation for objective
/// even on feasible problems, so feasible problems return the hard optimum.
pub fn solve_relaxed(p: &QpProblem, penalty: f64) -> QpSolution {
    let hard = solve(p);
    if hard.status == QpStatus::Optimal {
        return hard;
    }
    solve_penalized(p, penalty)
}

/// The penalized problem itself, without the feasibility short-cut.
pub fn solve_penalized(p: &QpProblem, penalty: f64) -> QpSolution {
    let m = p.dim();
    let k = p.constraints.len();
    let n = m + k;
    let mut rows = Vec::with_capacity(2 * k + 2 * m);
    for (i, c) in p.constraints.iter().enumerate() {
        let mut a = c.a.clone();
        a.resize(n, 0.0);
        a[m + i] = 1.0;
        rows.push(Halfspace::new(a, c.b));
    }
    for i in 0..k {
        let mut a = vec![0.0; n];
        a[m + i] = 1.0;
        rows.push(Halfspace::new(a, 0.0));
    }
    for r in p.all_rows().into_iter().skip(k) {
        let mut a = r.a;
        a.resize(n, 0.0);
        rows.push(Halfspace::new(a, r.b));
    }
    let mut hdiag = vec![2.0; m];
    hdiag.extend(std::iter::repeat_n(2.0 * penalty, k));
    let mut c: Vec<f64> = p.u_ref.iter().map(|r| -2.0 * r).collect();
    c.extend(std::iter::repeat_n(0.0, k));
    let qp = DiagQp { hdiag, c, rows };
    match qp.solve() {
        Some(cand) => {
            let slacks: Vec<f64> = cand.z[m..]
                .iter()
                .map(|&s| if s > SLACK_TOL { s } else { 0.0 })
                .collect();
            let status = if slacks.iter().any(|&s| s > 0.0) {
                QpStatus::RelaxedFeasible
            } else {
                QpStatus::Optimal
            };
            // Report multipliers against the original rows (barrier, then box).
            let mut multipliers = vec![0.0; k + 2 * m];
            let mut active = Vec::new();
            for (pi, &i) in cand.active.iter().enumerate() {
                let orig = if i < k {
                    Some(i)
                } else if i >= 2 * k {
                    Some(i - k)
                } else {
                    None
                };
                if let Some(o) = orig {
                    multipliers[o] = cand.lambda[pi];
                    active.push(o);
                }
            }
            QpSolution {
                u: cand.z[..m].to_vec(),
                status,
                active,
                multipliers,
                slacks,
            }
        }
        None => solve_infeasible_box(p),
    }
}

fn solve_infeasible_box(p: &QpProblem) -> QpSolution {
    QpSolution {
        u: p.u_ref.clone(),
        status: QpStatus::Infeasible,
        active: Vec::new(),
        multipliers: vec![0.0; p.constraints.len() + 2 * p.dim()],
        slacks: vec![0.0; p.constraints.len()],
    }
}

/// Hard solve, falling back to the slack relaxation when infeasible.
pub fn solve_with_fallback(p: &QpProblem, penalty: f64) -> QpSolution {
    solve_relaxed(p, penalty)
}

/// Largest violation of stationarity and complementary slackness for a
/// hard-constrained solution.
pub fn kkt_residual(p: &QpProblem, sol: &QpSolution) -> f64 {
    let rows = p.all_rows();
    let m = p.dim();
    let mut stationarity = vec![0.0; m];
    for t in 0..m {
        stationarity[t] = 2.0 * (sol.u[t] - p.u_ref[t]);
    }
    for (r, lam) in rows.iter().zip(&sol.multipliers) {
        for t in 0..m {
            stationarity[t] -= lam * r.a[t];
        }
    }
    let stat = stationarity.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let comp = rows
        .iter()
        .zip(&sol.multipliers)
        .fold(0.0f64, |acc, (r, lam)| acc.max((lam * r.value(&sol.u)).abs()));
    stat.max(comp)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
