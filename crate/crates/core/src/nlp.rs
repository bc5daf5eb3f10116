//! SQP solver for smooth NLPs
//! `min f(z)  s.t.  c_eq(z) = 0,  c_in(z) ≥ 0,  lo ≤ z ≤ hi`.
//!
//! Damped BFGS approximates the Lagrangian Hessian. Steps come from
//! [`crate::qp`] and are globalized by an ℓ1 merit function with Armijo
//! backtracking and one second-order correction per iteration. When the
//! linearized constraints are inconsistent, an elastic QP with a single
//! ℓ∞ slack is solved instead.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpSolution, QpStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NlpDims {
    pub n: usize,
    pub m_eq: usize,
    pub m_in: usize,
}

/// Callbacks of a smooth NLP. Jacobians are dense `m × n` row-major-by-constraint
/// matrices, zeroed by the caller before each fill.
pub trait NlpProblem {
    fn dims(&self) -> NlpDims;

    /// Objective value, writing the gradient when requested.
    fn objective(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64;

    fn eq_constraints(&self, z: &[f64], c: &mut [f64], jac: Option<&mut DMatrix<f64>>);

    /// Inequalities in the convention `c(z) ≥ 0`.
    fn ineq_constraints(&self, z: &[f64], c: &mut [f64], jac: Option<&mut DMatrix<f64>>);

    /// Variable bounds; infinite entries are ignored.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dims().n;
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    /// Initial Hessian approximation. Must be symmetric positive semidefinite.
    fn hessian_guess(&self) -> DMatrix<f64> {
        let n = self.dims().n;
        DMatrix::identity(n, n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SolveOptions {
    /// Bound on every KKT residual component.
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Active-set pivots allowed per QP subproblem.
    pub max_qp_pivots: usize,
    /// Consecutive damped BFGS updates before resetting to the initial guess.
    pub bfgs_reset_after: usize,
    pub armijo: f64,
    /// Diagonal shift added to the initial Hessian guess.
    pub hessian_shift: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_iter: 200,
            max_qp_pivots: 500,
            bfgs_reset_after: 5,
            armijo: 1e-4,
            hessian_shift: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleDetected,
}

/// Lagrange multipliers with `∇f = J_eqᵀλ + J_inᵀμ + μ_lo − μ_hi`.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(d: NlpDims) -> Self {
        Self {
            eq: vec![0.0; d.m_eq],
            ineq: vec![0.0; d.m_in],
            lower: vec![0.0; d.n],
            upper: vec![0.0; d.n],
        }
    }

    fn inf_norm(&self) -> f64 {
        self.eq
            .iter()
            .chain(&self.ineq)
            .chain(&self.lower)
            .chain(&self.upper)
            .fold(0.0, |m, v| m.max(libm::fabs(*v)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
///
/// Stationarity and complementarity are divided by multiplier-size factors
/// `max(100, mean|y|) / 100` as in IPOPT, so a near-degenerate active
/// constraint with a huge multiplier does not stall termination.
pub struct KktResidual {
    /// `‖∇f − J_eqᵀλ − J_inᵀμ − μ_lo + μ_hi‖∞`, scaled.
    pub stationarity: f64,
    /// Largest equality, inequality or bound violation.
    pub feasibility: f64,
    /// Largest `|μ_i c_i|`, scaled, and the most negative multiplier (negated).
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.feasibility <= tol && self.complementarity <= tol
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub z_star: Vec<f64>,
    pub objective_value: f64,
    pub kkt_residual: KktResidual,
    pub status: SolveStatus,
    pub iterations: usize,
    pub multipliers: Multipliers,
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
    ce: DVector<f64>,
    je: DMatrix<f64>,
    ci: DVector<f64>,
    ji: DMatrix<f64>,
}

fn evaluate<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> Eval {
    let d = p.dims();
    let zs = z.as_slice();
    let mut grad = DVector::zeros(d.n);
    let f = p.objective(zs, Some(grad.as_mut_slice()));
    let mut ce = DVector::zeros(d.m_eq);
    let mut je = DMatrix::zeros(d.m_eq, d.n);
    p.eq_constraints(zs, ce.as_mut_slice(), Some(&mut je));
    let mut ci = DVector::zeros(d.m_in);
    let mut ji = DMatrix::zeros(d.m_in, d.n);
    p.ineq_constraints(zs, ci.as_mut_slice(), Some(&mut ji));
    Eval {
        f,
        grad,
        ce,
        je,
        ci,
        ji,
    }
}

/// Objective and ℓ1 constraint violation (bounds excluded; iterates keep them).
fn merit_parts<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> (f64, f64) {
    let d = p.dims();
    let zs = z.as_slice();
    let f = p.objective(zs, None);
    let mut ce = vec![0.0; d.m_eq];
    p.eq_constraints(zs, &mut ce, None);
    let mut ci = vec![0.0; d.m_in];
    p.ineq_constraints(zs, &mut ci, None);
    (f, l1_violation(&ce, &ci))
}

fn l1_violation(ce: &[f64], ci: &[f64]) -> f64 {
    ce.iter().map(|v| libm::fabs(*v)).sum::<f64>() + ci.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

/// KKT residual recomputed from the problem callbacks.
pub fn kkt_residual<P: NlpProblem + ?Sized>(p: &P, z: &[f64], m: &Multipliers) -> KktResidual {
    let zv = DVector::from_column_slice(z);
    let e = evaluate(p, &zv);
    let (lo, hi) = p.bounds();
    kkt_from_eval(&e, z, &lo, &hi, m)
}

const KKT_SCALE_MAX: f64 = 100.0;

fn kkt_from_eval(e: &Eval, z: &[f64], lo: &[f64], hi: &[f64], m: &Multipliers) -> KktResidual {
    let lam = DVector::from_column_slice(&m.eq);
    let mu = DVector::from_column_slice(&m.ineq);
    let mut r = &e.grad - e.je.tr_mul(&lam) - e.ji.tr_mul(&mu);
    for i in 0..z.len() {
        r[i] -= m.lower[i] - m.upper[i];
    }
    let stationarity = r.amax();

    let mut feasibility: f64 = e.ce.amax();
    let mut complementarity: f64 = 0.0;
    for (c, u) in e.ci.iter().zip(&m.ineq) {
        feasibility = feasibility.max(-c);
        complementarity = complementarity.max(libm::fabs(u * c)).max(-u);
    }
    for i in 0..z.len() {
        if lo[i].is_finite() {
            feasibility = feasibility.max(lo[i] - z[i]);
            complementarity = complementarity.max(libm::fabs(m.lower[i] * (z[i] - lo[i])));
        }
        if hi[i].is_finite() {
            feasibility = feasibility.max(z[i] - hi[i]);
            complementarity = complementarity.max(libm::fabs(m.upper[i] * (hi[i] - z[i])));
        }
        complementarity = complementarity.max(-m.lower[i]).max(-m.upper[i]);
    }
    let mut count_all = m.eq.len() + m.ineq.len();
    let mut sum_in: f64 = m.ineq.iter().map(|v| libm::fabs(*v)).sum();
    for i in 0..z.len() {
        if lo[i].is_finite() {
            count_all += 1;
            sum_in += libm::fabs(m.lower[i]);
        }
        if hi[i].is_finite() {
            count_all += 1;
            sum_in += libm::fabs(m.upper[i]);
        }
    }
    let count_in = count_all - m.eq.len();
    let sum_all = sum_in + m.eq.iter().map(|v| libm::fabs(*v)).sum::<f64>();
    let scale = |sum: f64, count: usize| {
        if count == 0 {
            1.0
        } else {
            (sum / count as f64).max(KKT_SCALE_MAX) / KKT_SCALE_MAX
        }
    };
    KktResidual {
        stationarity: stationarity / scale(sum_all, count_all),
        feasibility: feasibility.max(0.0),
        complementarity: complementarity / scale(sum_in, count_in),
    }
}

struct BoundRow {
    index: usize,
    lower: bool,
    value: f64,
}

struct QpStep {
    d: DVector<f64>,
    mult: Multipliers,
    /// ℓ1 violation of the linearized constraints at `z + d`.
    lin_violation: f64,
    elastic: bool,
}

struct Sqp {
    dims: NlpDims,
    bounds: Vec<BoundRow>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    qp_opts: QpOptions,
}

impl Sqp {
    /// Builds and solves the QP subproblem. `shift` replaces the constraint
    /// constants for second-order corrections.
    fn qp(
        &self,
        e: &Eval,
        b: &DMatrix<f64>,
        z: &DVector<f64>,
        consts: Option<(&DVector<f64>, &DVector<f64>)>,
        elastic: Option<f64>,
    ) -> Option<QpStep> {
        let n = self.dims.n;
        let (ce, ci) = consts.unwrap_or((&e.ce, &e.ci));
        let nb = self.bounds.len();
        let nv = if elastic.is_some() { n + 1 } else { n };

        let mut h = DMatrix::zeros(nv, nv);
        h.view_mut((0, 0), (n, n)).copy_from(b);
        let mut g = DVector::zeros(nv);
        g.rows_mut(0, n).copy_from(&e.grad);

        let (a_eq, b_eq, a_in, b_in);
        match elastic {
            None => {
                a_eq = e.je.clone();
                b_eq = -ce;
                let mut ai = DMatrix::zeros(self.dims.m_in + nb, n);
                ai.view_mut((0, 0), (self.dims.m_in, n)).copy_from(&e.ji);
                let mut bi = DVector::zeros(self.dims.m_in + nb);
                bi.rows_mut(0, self.dims.m_in).copy_from(&(-ci));
                self.fill_bounds(&mut ai, &mut bi, self.dims.m_in, z);
                a_in = ai;
                b_in = bi;
            }
            Some(rho) => {
                h[(n, n)] = 1e-8 * rho.max(1.0);
                g[n] = rho;
                let (me, mi) = (self.dims.m_eq, self.dims.m_in);
                let rows = 2 * me + mi + nb + 1;
                let mut ai = DMatrix::zeros(rows, nv);
                let mut bi = DVector::zeros(rows);
                for r in 0..me {
                    for c in 0..n {
                        ai[(2 * r, c)] = e.je[(r, c)];
                        ai[(2 * r + 1, c)] = -e.je[(r, c)];
                    }
                    ai[(2 * r, n)] = 1.0;
                    ai[(2 * r + 1, n)] = 1.0;
                    bi[2 * r] = -ce[r];
                    bi[2 * r + 1] = ce[r];
                }
                for r in 0..mi {
                    for c in 0..n {
                        ai[(2 * me + r, c)] = e.ji[(r, c)];
                    }
                    ai[(2 * me + r, n)] = 1.0;
                    bi[2 * me + r] = -ci[r];
                }
                self.fill_bounds(&mut ai, &mut bi, 2 * me + mi, z);
                ai[(rows - 1, n)] = 1.0;
                a_eq = DMatrix::zeros(0, nv);
                b_eq = DVector::zeros(0);
                a_in = ai;
                b_in = bi;
            }
        }
        let sol = solve_qp(
            QpProblem {
                h: &h,
                g: &g,
                a_eq: &a_eq,
                b_eq: &b_eq,
                a_in: &a_in,
                b_in: &b_in,
            },
            &self.qp_opts,
        );
        if sol.status != QpStatus::Optimal {
            return None;
        }
        Some(self.unpack(sol, e, ce, ci, elastic.is_some()))
    }

    fn fill_bounds(&self, ai: &mut DMatrix<f64>, bi: &mut DVector<f64>, offset: usize, z: &DVector<f64>) {
        for (k, row) in self.bounds.iter().enumerate() {
            if row.lower {
                ai[(offset + k, row.index)] = 1.0;
                bi[offset + k] = row.value - z[row.index];
            } else {
                ai[(offset + k, row.index)] = -1.0;
                bi[offset + k] = z[row.index] - row.value;
            }
        }
    }

    fn unpack(&self, sol: QpSolution, e: &Eval, ce: &DVector<f64>, ci: &DVector<f64>, elastic: bool) -> QpStep {
        let n = self.dims.n;
        let (me, mi) = (self.dims.m_eq, self.dims.m_in);
        let d = sol.x.rows(0, n).into_owned();
        let mut mult = Multipliers::zeros(self.dims);
        let bound_offset;
        if elastic {
            for r in 0..me {
                mult.eq[r] = sol.mu_in[2 * r] - sol.mu_in[2 * r + 1];
            }
            for r in 0..mi {
                mult.ineq[r] = sol.mu_in[2 * me + r];
            }
            bound_offset = 2 * me + mi;
        } else {
            mult.eq.copy_from_slice(sol.lambda_eq.as_slice());
            mult.ineq.copy_from_slice(&sol.mu_in.as_slice()[..mi]);
            bound_offset = mi;
        }
        for (k, row) in self.bounds.iter().enumerate() {
            let u = sol.mu_in[bound_offset + k];
            if row.lower {
                mult.lower[row.index] += u;
            } else {
                mult.upper[row.index] += u;
            }
        }
        let lce = ce + &e.je * &d;
        let lci = ci + &e.ji * &d;
        QpStep {
            lin_violation: l1_violation(lce.as_slice(), lci.as_slice()),
            d,
            mult,
            elastic,
        }
    }

    fn clip(&self, z: &mut DVector<f64>) {
        for i in 0..self.dims.n {
            z[i] = z[i].max(self.lo[i]).min(self.hi[i]);
        }
    }
}

fn initial_hessian<P: NlpProblem + ?Sized>(p: &P, shift: f64) -> DMatrix<f64> {
    let mut b = p.hessian_guess();
    let n = b.nrows();
    for i in 0..n {
        b[(i, i)] += shift;
    }
    b
}

fn lagrangian_gradient(e: &Eval, m: &Multipliers) -> DVector<f64> {
    let lam = DVector::from_column_slice(&m.eq);
    let mu = DVector::from_column_slice(&m.ineq);
    &e.grad - e.je.tr_mul(&lam) - e.ji.tr_mul(&mu)
}

/// Runs SQP from `z0`. Warm multipliers only seed the merit penalty.
pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    z0: &[f64],
    warm: Option<&Multipliers>,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let dims = problem.dims();
    if z0.len() != dims.n {
        return Err(Error::Dimension {
            expected: dims.n,
            got: z0.len(),
        });
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("initial guess must be finite"));
    }
    let (lo, hi) = problem.bounds();
    let mut bounds = Vec::new();
    for i in 0..dims.n {
        if lo[i].is_finite() {
            bounds.push(BoundRow {
                index: i,
                lower: true,
                value: lo[i],
            });
        }
        if hi[i].is_finite() {
            bounds.push(BoundRow {
                index: i,
                lower: false,
                value: hi[i],
            });
        }
    }
    let sqp = Sqp {
        dims,
        bounds,
        lo,
        hi,
        qp_opts: QpOptions {
            max_pivots: opts.max_qp_pivots,
            ..QpOptions::default()
        },
    };

    let mut z = DVector::from_column_slice(z0);
    sqp.clip(&mut z);
    let b0 = initial_hessian(problem, opts.hessian_shift);
    let mut b = b0.clone();
    let mut damped_run = 0usize;
    let mut penalty = warm.map_or(1.0, |m| m.inf_norm() * 1.1 + 1.0);
    let mut mult = warm.cloned().unwrap_or_else(|| Multipliers::zeros(dims));
    let mut e = evaluate(problem, &z);
    let mut stuck_elastic = 0usize;
    let mut failed_searches = 0usize;
    // Iterations since the constraint violation last dropped by 1%.
    let mut best_violation = f64::INFINITY;
    let mut stalled = 0usize;

    let finish = |z: &DVector<f64>, e: &Eval, mult: Multipliers, status, iterations| {
        let kkt = kkt_from_eval(e, z.as_slice(), &sqp.lo, &sqp.hi, &mult);
        SolveResult {
            z_star: z.as_slice().to_vec(),
            objective_value: e.f,
            kkt_residual: kkt,
            status,
            iterations,
            multipliers: mult,
        }
    };

    for iter in 0..opts.max_iter {
        let step = match sqp.qp(&e, &b, &z, None, None) {
            Some(s) => s,
            None => {
                let rho = (penalty * 10.0).max(1e4);
                match sqp.qp(&e, &b, &z, None, Some(rho)) {
                    Some(s) => s,
                    None => {
                        // The QP failed for numerical reasons; restart the
                        // curvature model and try once more.
                        b = b0.clone();
                        match sqp.qp(&e, &b, &z, None, Some(rho)) {
                            Some(s) => s,
                            None => return Ok(finish(&z, &e, mult, SolveStatus::MaxIter, iter)),
                        }
                    }
                }
            }
        };

        let viol = l1_violation(e.ce.as_slice(), e.ci.as_slice());
        if viol < 0.99 * best_violation {
            best_violation = viol;
            stalled = 0;
        } else if viol > opts.kkt_tol {
            stalled += 1;
            if stalled >= 25 {
                return Ok(finish(&z, &e, step.mult, SolveStatus::InfeasibleDetected, iter));
            }
        }
        if step.elastic {
            let reduction = viol - step.lin_violation;
            if viol > opts.kkt_tol && reduction <= 1e-8 * viol.max(1.0) {
                stuck_elastic += 1;
            } else {
                stuck_elastic = 0;
            }
            if stuck_elastic >= 3 {
                return Ok(finish(&z, &e, step.mult, SolveStatus::InfeasibleDetected, iter));
            }
        } else {
            stuck_elastic = 0;
            let kkt = kkt_from_eval(&e, z.as_slice(), &sqp.lo, &sqp.hi, &step.mult);
            if kkt.within(opts.kkt_tol) {
                return Ok(SolveResult {
                    z_star: z.as_slice().to_vec(),
                    objective_value: e.f,
                    kkt_residual: kkt,
                    status: SolveStatus::Converged,
                    iterations: iter,
                    multipliers: step.mult,
                });
            }
        }

        let required = step.mult.inf_norm() * 1.1 + 1e-3;
        if penalty < required {
            penalty = required.max(1.5 * penalty);
        }
        let d = &step.d;
        let descent = e.grad.dot(d) - penalty * (viol - step.lin_violation);
        let descent = descent.min(-0.5 * (&b * d).dot(d)).min(0.0);
        let phi0 = e.f + penalty * viol;
        let merit = |zt: &DVector<f64>| {
            let (f, v) = merit_parts(problem, zt);
            f + penalty * v
        };

        let mut accepted: Option<DVector<f64>> = None;
        let full = &z + d;
        let phi_full = merit(&full);
        if phi_full <= phi0 + opts.armijo * descent {
            accepted = Some(full);
        } else if !step.elastic {
            // Second-order correction against the Maratos effect.
            let ef = evaluate(problem, &full);
            let ce_soc = &ef.ce - &e.je * d;
            let ci_soc = &ef.ci - &e.ji * d;
            if let Some(soc) = sqp.qp(&e, &b, &z, Some((&ce_soc, &ci_soc)), None) {
                let mut zc = &z + &soc.d;
                sqp.clip(&mut zc);
                if merit(&zc) <= phi0 + opts.armijo * descent {
                    accepted = Some(zc);
                }
            }
        }
        if accepted.is_none() {
            let mut alpha = 0.5;
            while alpha > 1e-10 {
                let zt = &z + d * alpha;
                if merit(&zt) <= phi0 + opts.armijo * alpha * descent {
                    accepted = Some(zt);
                    break;
                }
                alpha *= 0.5;
            }
        }
        let Some(mut z_new) = accepted else {
            failed_searches += 1;
            if failed_searches >= 3 {
                let status = if viol > opts.kkt_tol {
                    SolveStatus::InfeasibleDetected
                } else {
                    SolveStatus::MaxIter
                };
                return Ok(finish(&z, &e, step.mult, status, iter + 1));
            }
            b = b0.clone();
            damped_run = 0;
            mult = step.mult;
            continue;
        };
        failed_searches = 0;
        sqp.clip(&mut z_new);
        let e_new = evaluate(problem, &z_new);

        let s = &z_new - &z;
        let y = lagrangian_gradient(&e_new, &step.mult) - lagrangian_gradient(&e, &step.mult);
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        let sy = s.dot(&y);
        if sbs > 1e-300 {
            let (y, sy) = if sy < 0.2 * sbs {
                damped_run += 1;
                let theta = 0.8 * sbs / (sbs - sy);
                let yd = &y * theta + &bs * (1.0 - theta);
                let syd = s.dot(&yd);
                (yd, syd)
            } else {
                damped_run = 0;
                (y, sy)
            };
            if damped_run >= opts.bfgs_reset_after {
                b = b0.clone();
                damped_run = 0;
            } else if sy > 1e-300 {
                b.ger(1.0 / sy, &y, &y, 1.0);
                b.ger(-1.0 / sbs, &bs, &bs, 1.0);
                // Keep exact symmetry against rounding drift.
                b = (&b + b.transpose()) * 0.5;
            }
        }

        z = z_new;
        e = e_new;
        mult = step.mult;
    }
    let kkt = kkt_from_eval(&e, z.as_slice(), &sqp.lo, &sqp.hi, &mult);
    Ok(SolveResult {
        z_star: z.as_slice().to_vec(),
        objective_value: e.f,
        kkt_residual: kkt,
        status: SolveStatus::MaxIter,
        iterations: opts.max_iter,
        multipliers: mult,
    })
}
