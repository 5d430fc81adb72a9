//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min ½ xᵀHx + gᵀx` s.t. `E x = e` and `C x ≤ d`. The dual method
//! starts from the unconstrained minimum and adds violated constraints one
//! at a time, so it needs no feasible starting point and reports
//! infeasibility when a violated constraint cannot be satisfied.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("hessian is not positive definite")]
    NotConvex,
    #[error("iteration limit reached")]
    IterationLimit,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Largest of stationarity, primal and dual-sign violations.
    pub kkt_residual: f64,
    /// Indices of inequality rows active at the solution.
    pub active_inequalities: Vec<usize>,
}

const VIOLATION_TOL: f64 = 1e-10;
const DEPENDENT_TOL: f64 = 1e-14;

/// Row-normalized constraint `n·x + c0 ≥ 0` (or `= 0`).
struct Row {
    n: DVector<f64>,
    c0: f64,
}

fn normalize_rows(a: &DMatrix<f64>, b: &DVector<f64>, flip: bool) -> Result<Vec<Row>, QpError> {
    let mut rows = Vec::with_capacity(a.nrows());
    for i in 0..a.nrows() {
        let n = a.row(i).transpose();
        let norm = n.norm();
        if norm == 0.0 {
            // Constant row: 0 ≤ d (inequality) or 0 = e (equality).
            let ok = if flip { b[i] >= -1e-9 } else { b[i].abs() <= 1e-9 };
            if !ok {
                return Err(QpError::Infeasible);
            }
            continue;
        }
        if flip {
            rows.push(Row { n: -n / norm, c0: b[i] / norm });
        } else {
            rows.push(Row { n: n / norm, c0: -b[i] / norm });
        }
    }
    Ok(rows)
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
}

impl Factor {
    fn d_of(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    /// Primal step direction `J₂ d₂`.
    fn z_of(&self, d: &DVector<f64>, iq: usize) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for j in iq..self.n {
            z.axpy(d[j], &self.j.column(j), 1.0);
        }
        z
    }

    /// Dual step direction `R⁻¹ d₁`.
    fn r_of(&self, d: &DVector<f64>, iq: usize) -> Vec<f64> {
        let mut r = vec![0.0; iq];
        for i in (0..iq).rev() {
            let mut s = d[i];
            for k in i + 1..iq {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }

    /// Appends the constraint whose transformed normal is `d`.
    fn add(&mut self, d: &mut DVector<f64>, iq: &mut usize) -> bool {
        let n = self.n;
        for j in (*iq + 1..n).rev() {
            let mut cc = d[j - 1];
            let mut ss = d[j];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[j] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[j - 1] = -h;
            } else {
                d[j - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, j - 1)];
                let t2 = self.j[(k, j)];
                self.j[(k, j - 1)] = t1 * cc + t2 * ss;
                self.j[(k, j)] = xny * (t1 + self.j[(k, j - 1)]) - t2;
            }
        }
        *iq += 1;
        for i in 0..*iq {
            self.r[(i, *iq - 1)] = d[i];
        }
        if d[*iq - 1].abs() <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(d[*iq - 1].abs());
        true
    }

    /// Removes the active constraint at position `qq`, shifting the
    /// bookkeeping arrays (including the pending entry at `iq`).
    fn delete(&mut self, active: &mut [usize], u: &mut [f64], iq: &mut usize, qq: usize) {
        let n = self.n;
        for i in qq..*iq - 1 {
            active[i] = active[i + 1];
            u[i] = u[i + 1];
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        active[*iq - 1] = active[*iq];
        u[*iq - 1] = u[*iq];
        active[*iq] = 0;
        u[*iq] = 0.0;
        for k in 0..*iq {
            self.r[(k, *iq - 1)] = 0.0;
        }
        *iq -= 1;
        if *iq == 0 {
            return;
        }
        for j in qq..*iq {
            let mut cc = self.r[(j, j)];
            let mut ss = self.r[(j + 1, j)];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(j + 1, j)] = 0.0;
            if cc < 0.0 {
                self.r[(j, j)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(j, j)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in j + 1..*iq {
                let t1 = self.r[(j, k)];
                let t2 = self.r[(j + 1, k)];
                self.r[(j, k)] = t1 * cc + t2 * ss;
                self.r[(j + 1, k)] = xny * (t1 + self.r[(j, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, j)];
                let t2 = self.j[(k, j + 1)];
                self.j[(k, j)] = t1 * cc + t2 * ss;
                self.j[(k, j + 1)] = xny * (self.j[(k, j)] + t1) - t2;
            }
        }
    }
}

/// Solves the QP. `eq_a`/`ineq_a` may have zero rows.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq_a: &DMatrix<f64>,
    eq_b: &DVector<f64>,
    ineq_a: &DMatrix<f64>,
    ineq_b: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = h.nrows();
    let chol = h.clone().cholesky().ok_or(QpError::NotConvex)?;
    let l = chol.l();
    let j = l
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotConvex)?;
    let mut x = -chol.solve(g);

    let eq = normalize_rows(eq_a, eq_b, false)?;
    let ineq = normalize_rows(ineq_a, ineq_b, true)?;
    let p = eq.len();
    let m = ineq.len();

    let mut fac = Factor { n, j, r: DMatrix::zeros(n, n), r_norm: 1.0 };
    // Active constraint ids: equality i is i, inequality i is p + i.
    let mut active = vec![0usize; n + 1];
    let mut u = vec![0.0; n + 1];
    let mut iq = 0usize;
    let mut eq_kept: Vec<usize> = Vec::with_capacity(p);

    for (i, row) in eq.iter().enumerate() {
        let mut d = fac.d_of(&row.n);
        let z = fac.z_of(&d, iq);
        let r = fac.r_of(&d, iq);
        let dn2: f64 = (iq..n).map(|k| d[k] * d[k]).sum();
        let resid = row.n.dot(&x) + row.c0;
        if dn2 <= DEPENDENT_TOL {
            // Dependent equality: consistent only if already satisfied.
            if resid.abs() > 1e-8 {
                return Err(QpError::Infeasible);
            }
            continue;
        }
        let t2 = -resid / dn2;
        x.axpy(t2, &z, 1.0);
        u[iq] = t2;
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        active[iq] = i;
        if !fac.add(&mut d, &mut iq) {
            return Err(QpError::Infeasible);
        }
        eq_kept.push(i);
    }
    let p_active = iq;

    let max_iter = 50 * (n + m + p) + 100;
    let mut iter = 0;
    let mut slack = vec![0.0; m];
    'outer: loop {
        iter += 1;
        if iter > max_iter {
            return Err(QpError::IterationLimit);
        }
        let mut is_active = vec![false; m];
        for k in p_active..iq {
            is_active[active[k] - p] = true;
        }
        let mut ip = None;
        let mut worst = -VIOLATION_TOL;
        for (i, row) in ineq.iter().enumerate() {
            slack[i] = row.n.dot(&x) + row.c0;
            if !is_active[i] && slack[i] < worst {
                worst = slack[i];
                ip = Some(i);
            }
        }
        let Some(ip) = ip else { break };
        let np = &ineq[ip].n;
        let mut ss = slack[ip];
        u[iq] = 0.0;
        active[iq] = p + ip;
        loop {
            let mut d = fac.d_of(np);
            let z = fac.z_of(&d, iq);
            let r = fac.r_of(&d, iq);
            let mut t1 = f64::INFINITY;
            let mut drop_pos = None;
            for k in p_active..iq {
                if r[k] > 0.0 {
                    let tt = u[k] / r[k];
                    if tt < t1 {
                        t1 = tt;
                        drop_pos = Some(k);
                    }
                }
            }
            let dn2: f64 = (iq..n).map(|k| d[k] * d[k]).sum();
            let t2 = if dn2 > DEPENDENT_TOL { -ss / dn2 } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u[iq] += t;
                fac.delete(&mut active, &mut u, &mut iq, drop_pos.expect("finite dual step"));
                continue;
            }
            x.axpy(t, &z, 1.0);
            for k in 0..iq {
                u[k] -= t * r[k];
            }
            u[iq] += t;
            if t == t2 {
                if !fac.add(&mut d, &mut iq) {
                    return Err(QpError::IterationLimit);
                }
                continue 'outer;
            }
            fac.delete(&mut active, &mut u, &mut iq, drop_pos.expect("partial step drops a row"));
            ss = np.dot(&x) + ineq[ip].c0;
            iter += 1;
            if iter > max_iter {
                return Err(QpError::IterationLimit);
            }
        }
    }

    // KKT residual in the original (unnormalized) scaling of H and g.
    let mut grad = h * &x + g;
    let mut dual_sign: f64 = 0.0;
    let mut active_ineq = Vec::new();
    for k in 0..iq {
        let id = active[k];
        let row = if id < p { &eq[id] } else { &ineq[id - p] };
        grad.axpy(-u[k], &row.n, 1.0);
        if id >= p {
            dual_sign = dual_sign.max(-u[k]);
            active_ineq.push(id - p);
        }
    }
    let primal_eq = eq.iter().map(|r| (r.n.dot(&x) + r.c0).abs()).fold(0.0, f64::max);
    let primal_in = ineq.iter().map(|r| (-(r.n.dot(&x) + r.c0)).max(0.0)).fold(0.0, f64::max);
    let kkt_residual = grad.amax().max(dual_sign).max(primal_eq).max(primal_in);
    let objective = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
    // Map normalized inequality ids back to input rows.
    let input_rows: Vec<usize> = (0..ineq_a.nrows()).filter(|&i| ineq_a.row(i).norm() > 0.0).collect();
    let active_inequalities = active_ineq.into_iter().map(|k| input_rows[k]).collect();
    Ok(QpSolution { x, objective, kkt_residual, active_inequalities })
}
