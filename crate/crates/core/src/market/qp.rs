//! Dense convex quadratic programming by a primal-dual interior-point method
//! with Mehrotra predictor-corrector steps.
//!
//! ```text
//!     minimize    1/2 x' Q x + c' x
//!     subject to  A x  = b      (duals y, free)
//!                 G x <= h      (duals z >= 0, slacks s >= 0)
//! ```
//!
//! The Lagrangian is `f(x) + y'(Ax - b) + z'(Gx - h)`, so stationarity reads
//! `Qx + c + A'y + G'z = 0`.

use nalgebra::{DMatrix, DVector};

/// `(dx, dy, dz, ds)` of one Newton step.
type Step = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpOptions {
    /// Stop once the average complementarity `s'z/m` falls below this.
    pub mu_tol: f64,
    /// Primal and dual residual tolerance (infinity norm).
    pub residual_tol: f64,
    pub max_iter: usize,
    /// Replace interior duals by an exact active-set solve when possible.
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            mu_tol: 1e-8,
            residual_tol: 1e-8,
            max_iter: 200,
            polish: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    /// Most negative inequality dual, reported as a positive violation.
    pub dual_feasibility: f64,
    /// Largest `|z_i (h - Gx)_i|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
    pub residuals: KktResiduals,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn kkt_residuals(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> KktResiduals {
        let grad = &self.q * x + &self.c + self.a.transpose() * y + self.g.transpose() * z;
        let eq = &self.a * x - &self.b;
        let slack = &self.h - &self.g * x;
        KktResiduals {
            stationarity: grad.amax(),
            primal_eq: eq.amax(),
            primal_ineq: slack.iter().fold(0.0, |m, &v| m.max(-v)),
            dual_feasibility: z.iter().fold(0.0, |m, &v| m.max(-v)),
            complementarity: z
                .iter()
                .zip(slack.iter())
                .fold(0.0, |m, (zi, si)| m.max((zi * si).abs())),
        }
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0, |a, (vi, di)| a.min(-vi / di))
}

/// Solves the reduced system `[H A'; A 0] [dx; dy] = [r1; r2]`.
fn solve_reduced(
    h: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r1: &DVector<f64>,
    r2: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let p = a.nrows();
    let mut k = DMatrix::zeros(n + p, n + p);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((0, n), (n, p)).copy_from(&a.transpose());
    k.view_mut((n, 0), (p, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + p);
    rhs.rows_mut(0, n).copy_from(r1);
    rhs.rows_mut(n, p).copy_from(r2);
    let sol = k.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, p).into_owned()))
}

pub fn solve_qp(problem: &QpProblem, opts: &QpOptions) -> QpSolution {
    let n = problem.n();
    let p = problem.a.nrows();
    let m = problem.g.nrows();
    let (q, c, a, b, g, h) = (
        &problem.q,
        &problem.c,
        &problem.a,
        &problem.b,
        &problem.g,
        &problem.h,
    );
    let gt = g.transpose();

    // Starting point from the regularized equality-constrained problem.
    let h0 = q + &gt * g;
    let (mut x, mut y) = solve_reduced(&h0, a, &(&gt * h - c), b)
        .unwrap_or_else(|| (DVector::zeros(n), DVector::zeros(p)));
    let mut s = h - g * &x;
    let shift = s.iter().fold(0.0f64, |acc, &v| acc.max(-v));
    s.add_scalar_mut(shift + 1.0);
    let mut z = DVector::from_element(m, 1.0);

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it;
        let r_d = q * &x + c + a.transpose() * &y + &gt * &z;
        let r_p = a * &x - b;
        let r_i = g * &x + &s - h;
        let mu = if m > 0 { s.dot(&z) / m as f64 } else { 0.0 };
        let scale = 1.0 + c.amax().max(h.amax()).max(b.amax());
        if mu <= opts.mu_tol
            && r_d.amax() <= opts.residual_tol * scale
            && r_p.amax() <= opts.residual_tol * scale
            && r_i.amax() <= opts.residual_tol * scale
        {
            status = QpStatus::Optimal;
            break;
        }
        if z.amax() > 1e12 || s.amax() > 1e14 {
            status = QpStatus::Infeasible;
            break;
        }

        let w = z.component_div(&s);
        let mut hmat = q.clone();
        for i in 0..m {
            let row = g.row(i);
            hmat += row.transpose() * row * w[i];
        }
        let step = |r_c: &DVector<f64>| -> Option<Step> {
            // dz = S^-1 (Z r_i - r_c) + W G dx ; ds = -r_i - G dx
            let t = (z.component_mul(&r_i) - r_c).component_div(&s);
            let r1 = -&r_d - &gt * &t;
            let r2 = -&r_p;
            let (dx, dy) = solve_reduced(&hmat, a, &r1, &r2)?;
            let gdx = g * &dx;
            let dz = t + w.component_mul(&gdx);
            let ds = -&r_i - gdx;
            Some((dx, dy, dz, ds))
        };

        let sz = s.component_mul(&z);
        let Some((_, _, dz_aff, ds_aff)) = step(&sz) else {
            status = QpStatus::MaxIter;
            break;
        };
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&z, &dz_aff));
        let mu_aff = if m > 0 {
            (&s + &ds_aff * alpha_aff).dot(&(&z + &dz_aff * alpha_aff)) / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };
        let r_c = sz + ds_aff.component_mul(&dz_aff) - DVector::from_element(m, sigma * mu);
        let Some((dx, dy, dz, ds)) = step(&r_c) else {
            status = QpStatus::MaxIter;
            break;
        };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        iterations = it + 1;
    }

    if status == QpStatus::MaxIter {
        // Persistent primal residual signals an empty feasible set.
        let viol = (g * &x - h).iter().fold(0.0f64, |acc, &v| acc.max(v));
        let eq = (a * &x - b).amax();
        if viol > 1e-4 || eq > 1e-4 {
            status = QpStatus::Infeasible;
        }
    }

    let mut sol = QpSolution {
        residuals: problem.kkt_residuals(&x, &y, &z),
        x,
        y,
        z,
        status,
        iterations,
        polished: false,
    };
    if opts.polish && status == QpStatus::Optimal {
        if let Some(polished) = polish(problem, &sol, &s) {
            sol = polished;
        }
    }
    sol
}

/// Re-solves the KKT system with the identified active set as equalities,
/// yielding exact duals (zero on inactive constraints). When the active set
/// is rank deficient, the least-binding active constraints are released one
/// at a time.
fn polish(problem: &QpProblem, sol: &QpSolution, slack: &DVector<f64>) -> Option<QpSolution> {
    let active: Vec<usize> = (0..problem.g.nrows())
        .filter(|&i| sol.z[i] > slack[i])
        .collect();
    if let Some(found) = try_active_set(problem, &active, sol) {
        return Some(found);
    }
    let mut order = active.clone();
    order.sort_by(|&i, &j| sol.z[i].total_cmp(&sol.z[j]).then(i.cmp(&j)));
    for drop in order {
        let candidate: Vec<usize> = active.iter().copied().filter(|&i| i != drop).collect();
        if let Some(found) = try_active_set(problem, &candidate, sol) {
            return Some(found);
        }
    }
    None
}

fn try_active_set(problem: &QpProblem, active: &[usize], sol: &QpSolution) -> Option<QpSolution> {
    let n = problem.n();
    let p = problem.a.nrows();
    let k = active.len();
    let mut ga = DMatrix::zeros(k, n);
    let mut ha = DVector::zeros(k);
    for (r, &i) in active.iter().enumerate() {
        ga.row_mut(r).copy_from(&problem.g.row(i));
        ha[r] = problem.h[i];
    }
    let mut eq = DMatrix::zeros(p + k, n);
    eq.view_mut((0, 0), (p, n)).copy_from(&problem.a);
    eq.view_mut((p, 0), (k, n)).copy_from(&ga);
    let mut rhs = DVector::zeros(p + k);
    rhs.rows_mut(0, p).copy_from(&problem.b);
    rhs.rows_mut(p, k).copy_from(&ha);

    // Reject rank-deficient active sets up front; LU on a nearly singular
    // KKT matrix returns garbage instead of failing.
    if p + k > n || eq.clone().svd(false, false).rank(1e-9 * (1.0 + eq.amax())) < p + k {
        return None;
    }
    let (x, duals) = solve_reduced(&problem.q, &eq, &(-&problem.c), &rhs)?;
    let y = duals.rows(0, p).into_owned();
    let mut z = DVector::zeros(problem.g.nrows());
    for (r, &i) in active.iter().enumerate() {
        if duals[p + r] < -1e-9 {
            return None;
        }
        z[i] = duals[p + r].max(0.0);
    }
    let residuals = problem.kkt_residuals(&x, &y, &z);
    if residuals.max() > 1e-7 * (1.0 + problem.c.amax()) {
        return None;
    }
    Some(QpSolution {
        x,
        y,
        z,
        status: QpStatus::Optimal,
        iterations: sol.iterations,
        polished: true,
        residuals,
    })
}
