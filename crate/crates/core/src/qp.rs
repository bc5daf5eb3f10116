//! Dense strictly convex QP solver.
//!
//! Solves `min ½ xᵀHx + gᵀx  s.t.  A_eq x = b_eq,  A_in x ≥ b_in` with the
//! Goldfarb-Idnani dual active-set method. The method starts from the
//! unconstrained minimizer, so no feasible initial point is needed, and an
//! empty step direction with no blocking constraint proves infeasibility.
//!
//! With `H = L Lᵀ` the solver maintains `J` with `Jᵀ H J = I` and the active
//! normals factorized as `Jᵀ N = [R; 0]`, updated by Givens rotations.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxPivots,
    /// `H` is not numerically positive definite.
    NotConvex,
}

#[derive(Clone, Copy, Debug)]
pub struct QpOptions {
    pub max_pivots: usize,
    /// Relative violation below which a constraint counts as satisfied.
    pub feas_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_pivots: 500,
            feas_tol: 1e-11,
        }
    }
}

/// Borrowed problem data. Constraints are rows of `a_eq` / `a_in`.
#[derive(Clone, Copy, Debug)]
pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers with `Hx + g = A_eqᵀ λ + A_inᵀ μ`.
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub objective: f64,
    pub pivots: usize,
    pub status: QpStatus,
}

struct Active {
    /// Constraint index: `< m_eq` for equalities, `m_eq + i` for inequality `i`.
    id: usize,
    sign: f64,
    u: f64,
}

struct Solver<'a> {
    p: QpProblem<'a>,
    n: usize,
    m_eq: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<Active>,
    x: DVector<f64>,
    pivots: usize,
    opts: QpOptions,
}

enum AddOutcome {
    Added,
    Redundant,
    Infeasible,
    MaxPivots,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let rho = libm::hypot(a, b);
    (a / rho, b / rho, rho)
}

impl<'a> Solver<'a> {
    fn normal(&self, id: usize) -> (DVector<f64>, f64) {
        if id < self.m_eq {
            (self.p.a_eq.row(id).transpose(), self.p.b_eq[id])
        } else {
            let i = id - self.m_eq;
            (self.p.a_in.row(i).transpose(), self.p.b_in[i])
        }
    }

    fn q(&self) -> usize {
        self.active.len()
    }

    fn rotate_j(&mut self, a: usize, b: usize, c: f64, s: f64) {
        for row in 0..self.n {
            let (ja, jb) = (self.j[(row, a)], self.j[(row, b)]);
            self.j[(row, a)] = c * ja + s * jb;
            self.j[(row, b)] = -s * ja + c * jb;
        }
    }

    fn drop_active(&mut self, k: usize) {
        let q = self.q();
        self.active.remove(k);
        for col in k..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for i in k..q - 1 {
            let (a, b) = (self.r[(i, i)], self.r[(i + 1, i)]);
            if b == 0.0 {
                continue;
            }
            let (c, s, rho) = givens(a, b);
            self.r[(i, i)] = rho;
            self.r[(i + 1, i)] = 0.0;
            for col in i + 1..q - 1 {
                let (ri, rj) = (self.r[(i, col)], self.r[(i + 1, col)]);
                self.r[(i, col)] = c * ri + s * rj;
                self.r[(i + 1, col)] = -s * ri + c * rj;
            }
            self.rotate_j(i, i + 1, c, s);
        }
    }

    fn push_active(&mut self, mut d: DVector<f64>, id: usize, sign: f64, u: f64) {
        let q = self.q();
        for i in (q + 1..self.n).rev() {
            let (a, b) = (d[i - 1], d[i]);
            if b == 0.0 {
                continue;
            }
            let (c, s, rho) = givens(a, b);
            d[i - 1] = rho;
            d[i] = 0.0;
            self.rotate_j(i - 1, i, c, s);
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.active.push(Active { id, sign, u });
    }

    /// Dual direction `R⁻¹ d₁` over the active set.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn add_constraint(&mut self, id: usize, sign: f64) -> AddOutcome {
        let (normal, rhs) = self.normal(id);
        let np = normal * sign;
        let bp = rhs * sign;
        let tol = self.opts.feas_tol * (1.0 + libm::fabs(bp));
        let mut up = 0.0;
        loop {
            if self.pivots >= self.opts.max_pivots {
                return AddOutcome::MaxPivots;
            }
            self.pivots += 1;
            let q = self.q();
            let slack = np.dot(&self.x) - bp;
            let d = self.j.tr_mul(&np);
            let tail = d.rows(q, self.n - q);
            let dependent = tail.norm_squared() <= 1e-24 * d.norm_squared().max(f64::MIN_POSITIVE);
            let z = if dependent {
                DVector::zeros(self.n)
            } else {
                self.j.columns(q, self.n - q) * tail
            };
            let r = self.dual_direction(&d);

            let zn = z.dot(&np);
            let t2 = if dependent || zn <= 0.0 {
                f64::INFINITY
            } else {
                (-slack / zn).max(0.0)
            };
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for (k, (a, rk)) in self.active.iter().zip(&r).enumerate() {
                if a.id >= self.m_eq && *rk > 0.0 {
                    let t = a.u / rk;
                    if t < t1 {
                        t1 = t;
                        block = Some(k);
                    }
                }
            }

            if t1.is_infinite() && t2.is_infinite() {
                // No primal move and no blocking multiplier: the new
                // constraint is dependent on equalities already active.
                return if slack.abs() <= tol {
                    AddOutcome::Redundant
                } else {
                    AddOutcome::Infeasible
                };
            }
            if t2.is_infinite() {
                for (a, rk) in self.active.iter_mut().zip(&r) {
                    a.u -= t1 * rk;
                }
                up += t1;
                self.drop_active(block.unwrap());
                continue;
            }
            let t = t1.min(t2);
            self.x.axpy(t, &z, 1.0);
            for (a, rk) in self.active.iter_mut().zip(&r) {
                a.u -= t * rk;
            }
            up += t;
            if t2 <= t1 {
                self.push_active(d, id, sign, up);
                return AddOutcome::Added;
            }
            self.drop_active(block.unwrap());
        }
    }

    fn most_violated(&self) -> Option<usize> {
        let mut worst = None;
        let mut worst_rel = 0.0;
        for i in 0..self.p.a_in.nrows() {
            let id = self.m_eq + i;
            if self.active.iter().any(|a| a.id == id) {
                continue;
            }
            let b = self.p.b_in[i];
            let s = self.p.a_in.row(i).transpose().dot(&self.x) - b;
            let rel = s / (1.0 + libm::fabs(b));
            if rel < -self.opts.feas_tol && rel < worst_rel {
                worst_rel = rel;
                worst = Some(id);
            }
        }
        worst
    }

    fn finish(self, status: QpStatus) -> QpSolution {
        let mut lambda_eq = DVector::zeros(self.m_eq);
        let mut mu_in = DVector::zeros(self.p.a_in.nrows());
        for a in &self.active {
            if a.id < self.m_eq {
                lambda_eq[a.id] = a.sign * a.u;
            } else {
                mu_in[a.id - self.m_eq] = a.u;
            }
        }
        let objective = 0.5 * (self.p.h * &self.x).dot(&self.x) + self.p.g.dot(&self.x);
        QpSolution {
            x: self.x,
            lambda_eq,
            mu_in,
            objective,
            pivots: self.pivots,
            status,
        }
    }
}

pub fn solve_qp(p: QpProblem<'_>, opts: &QpOptions) -> QpSolution {
    let n = p.h.nrows();
    let m_eq = p.a_eq.nrows();
    debug_assert_eq!(p.a_eq.ncols(), n);
    debug_assert_eq!(p.a_in.ncols(), n);
    let Some(chol) = p.h.clone().cholesky() else {
        return QpSolution {
            x: DVector::zeros(n),
            lambda_eq: DVector::zeros(m_eq),
            mu_in: DVector::zeros(p.a_in.nrows()),
            objective: f64::NAN,
            pivots: 0,
            status: QpStatus::NotConvex,
        };
    };
    let l = chol.l();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("Cholesky factor has a positive diagonal");
    let x = chol.solve(&(-p.g));
    let mut s = Solver {
        p,
        n,
        m_eq,
        j: linv.transpose(),
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        x,
        pivots: 0,
        opts: *opts,
    };

    for id in 0..m_eq {
        let (normal, rhs) = s.normal(id);
        let sign = if normal.dot(&s.x) - rhs > 0.0 { -1.0 } else { 1.0 };
        match s.add_constraint(id, sign) {
            AddOutcome::Added | AddOutcome::Redundant => {}
            AddOutcome::Infeasible => return s.finish(QpStatus::Infeasible),
            AddOutcome::MaxPivots => return s.finish(QpStatus::MaxPivots),
        }
    }
    while let Some(id) = s.most_violated() {
        match s.add_constraint(id, 1.0) {
            AddOutcome::Added => {}
            AddOutcome::Redundant | AddOutcome::Infeasible => return s.finish(QpStatus::Infeasible),
            AddOutcome::MaxPivots => return s.finish(QpStatus::MaxPivots),
        }
    }
    s.finish(QpStatus::Optimal)
}
