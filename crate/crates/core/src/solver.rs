//! Per-client scalar coefficients for factor-wise aggregation.
//!
//! Given client factors `(B_u, A_u)` and weights `w_u`, find scalars `p`, `q`
//! minimizing
//!
//! ```text
//! f(p, q) = ‖M·N − T‖²_F,   M = Σ p_u·B_u,   N = Σ q_u·A_u,   T = Σ w_u·B_u·A_u
//! ```
//!
//! [`na_objective`] and [`na_gradients`] evaluate `f` directly on `k×d`
//! matrices. The solver itself works on a reduced form that never builds
//! `M·N`: with `Cᵤ = B_uᵀ·T` and `Dᵤ = T·A_uᵀ` precomputed,
//!
//! ```text
//! f     = tr(MᵀM · NNᵀ) − 2⟨Σ p_u·Cᵤ, N⟩ + ‖T‖²
//! ∂f/∂p_u = 2⟨B_u, M·NNᵀ − Σ q_v·D_v⟩
//! ∂f/∂q_u = 2⟨A_u, MᵀM·N − Σ p_v·C_v⟩
//! ```
//!
//! so a step costs `O(U·r·(k+d))` instead of `O(k·d·r)`.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Constant starting value for every `p_u` and `q_u`. `None` starts from
    /// `p = q = w`, which reproduces the plain weighted-average aggregate.
    pub init_scale: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_scale: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::ConfigValidation {
                field: format!("solver.{field}"),
                message: message.to_string(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad("beta1", "must lie in (0, 1)");
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2", "must lie in (0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon", "must be positive");
        }
        if let Some(c) = self.init_scale {
            if !c.is_finite() {
                return bad("init_scale", "must be finite");
            }
        }
        Ok(())
    }
}

/// Solved coefficients plus the objective trace. `trace[0]` is the objective
/// at the starting point, `trace[t]` the objective after step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientPair {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Objective of the returned `(p, q)`, evaluated directly.
    pub objective: f64,
    pub initial_objective: f64,
    pub trace: Vec<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl CoefficientPair {
    /// Writes `step,objective` rows.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "objective"])?;
        for (step, obj) in self.trace.iter().enumerate() {
            w.write_record([step.to_string(), format!("{obj:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The factors of one layer across `U` clients, scale already removed.
#[derive(Debug, Clone)]
pub struct NaProblem<'a> {
    b: Vec<&'a DenseMatrix>,
    a: Vec<&'a DenseMatrix>,
    weights: Vec<f64>,
}

impl<'a> NaProblem<'a> {
    pub fn new(b: Vec<&'a DenseMatrix>, a: Vec<&'a DenseMatrix>, weights: &[f64]) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::EmptyUpdates);
        }
        if b.len() != a.len() || b.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} B factors, {} A factors, {} weights",
                b.len(),
                a.len(),
                weights.len()
            )));
        }
        let (k, r) = b[0].shape();
        let d = a[0].cols();
        for (bu, au) in b.iter().zip(&a) {
            if bu.shape() != (k, r) || au.shape() != (r, d) {
                return Err(Error::ShapeMismatch(format!(
                    "client factors {:?}·{:?} differ from {:?}·{:?}",
                    bu.shape(),
                    au.shape(),
                    (k, r),
                    (r, d)
                )));
            }
        }
        Ok(Self {
            b,
            a,
            weights: weights.to_vec(),
        })
    }

    /// Uses the raw factors of each pair; the `α/r` scale is left out.
    pub fn from_pairs(pairs: &[&'a LoraPair], weights: &[f64]) -> Result<Self> {
        Self::new(
            pairs.iter().map(|p| p.b()).collect(),
            pairs.iter().map(|p| p.a()).collect(),
            weights,
        )
    }

    pub fn clients(&self) -> usize {
        self.b.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn b_factors(&self) -> &[&'a DenseMatrix] {
        &self.b
    }

    pub fn a_factors(&self) -> &[&'a DenseMatrix] {
        &self.a
    }

    /// `T = Σ w_u·B_u·A_u`
    pub fn target(&self) -> DenseMatrix {
        let (k, d) = (self.b[0].rows(), self.a[0].cols());
        let mut t = DenseMatrix::zeros(k, d);
        for ((bu, au), &w) in self.b.iter().zip(&self.a).zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            t.axpy(w, &bu.matmul(au).expect("shapes checked in new"))
                .expect("shapes checked in new");
        }
        t
    }

    /// `(Σ p_u·B_u, Σ q_u·A_u)`
    pub fn combine(&self, p: &[f64], q: &[f64]) -> (DenseMatrix, DenseMatrix) {
        (
            linear_combination(&self.b, p),
            linear_combination(&self.a, q),
        )
    }

    fn check_coeffs(&self, p: &[f64], q: &[f64]) {
        assert_eq!(p.len(), self.clients(), "p has wrong length");
        assert_eq!(q.len(), self.clients(), "q has wrong length");
    }
}

fn linear_combination(mats: &[&DenseMatrix], coeffs: &[f64]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(mats[0].rows(), mats[0].cols());
    for (m, &c) in mats.iter().zip(coeffs) {
        out.axpy(c, m).expect("uniform shapes");
    }
    out
}

fn linear_combination_into<'m>(
    out: &mut DenseMatrix,
    mats: impl IntoIterator<Item = &'m DenseMatrix>,
    coeffs: &[f64],
) {
    out.as_mut_slice().fill(0.0);
    for (m, &c) in mats.into_iter().zip(coeffs) {
        out.axpy(c, m).expect("uniform shapes");
    }
}

/// `‖M·N − T‖²_F`, evaluated on dense `k×d` matrices.
pub fn na_objective(p: &[f64], q: &[f64], problem: &NaProblem<'_>) -> f64 {
    problem.check_coeffs(p, q);
    let (m, n) = problem.combine(p, q);
    let mn = m.matmul(&n).expect("uniform shapes");
    mn.sub(&problem.target())
        .expect("uniform shapes")
        .frobenius_norm_sq()
}

/// `(∂f/∂p, ∂f/∂q)` with `E = M·N − T`: `gp_u = 2⟨E, B_u·N⟩`, `gq_u = 2⟨E, M·A_u⟩`.
pub fn na_gradients(p: &[f64], q: &[f64], problem: &NaProblem<'_>) -> (Vec<f64>, Vec<f64>) {
    problem.check_coeffs(p, q);
    let (m, n) = problem.combine(p, q);
    let e = m
        .matmul(&n)
        .and_then(|mn| mn.sub(&problem.target()))
        .expect("uniform shapes");
    let gp = problem
        .b
        .iter()
        .map(|bu| 2.0 * e.frobenius_dot(&bu.matmul(&n).unwrap()).unwrap())
        .collect();
    let gq = problem
        .a
        .iter()
        .map(|au| 2.0 * e.frobenius_dot(&m.matmul(au).unwrap()).unwrap())
        .collect();
    (gp, gq)
}

/// Reduced-form evaluator used by the solver.
struct Reduced<'p, 'a> {
    problem: &'p NaProblem<'a>,
    /// `B_uᵀ·T`, each `r×d`
    bt_t: Vec<DenseMatrix>,
    /// `T·A_uᵀ`, each `k×r`
    t_at: Vec<DenseMatrix>,
    t_norm_sq: f64,
    m: DenseMatrix,
    n: DenseMatrix,
    mt_t: DenseMatrix,
    t_nt: DenseMatrix,
}

impl<'p, 'a> Reduced<'p, 'a> {
    fn new(problem: &'p NaProblem<'a>) -> Self {
        let t = problem.target();
        let bt_t: Vec<_> = problem
            .b
            .iter()
            .map(|bu| bu.matmul_tn(&t).unwrap())
            .collect();
        let t_at: Vec<_> = problem
            .a
            .iter()
            .map(|au| t.matmul_nt(au).unwrap())
            .collect();
        let (k, r) = problem.b[0].shape();
        let d = problem.a[0].cols();
        Self {
            problem,
            bt_t,
            t_at,
            t_norm_sq: t.frobenius_norm_sq(),
            m: DenseMatrix::zeros(k, r),
            n: DenseMatrix::zeros(r, d),
            mt_t: DenseMatrix::zeros(r, d),
            t_nt: DenseMatrix::zeros(k, r),
        }
    }

    /// Objective and gradients at `(p, q)`, written into `gp`, `gq`.
    fn eval(&mut self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> f64 {
        linear_combination_into(&mut self.m, self.problem.b.iter().copied(), p);
        linear_combination_into(&mut self.n, self.problem.a.iter().copied(), q);
        linear_combination_into(&mut self.mt_t, &self.bt_t, p);
        linear_combination_into(&mut self.t_nt, &self.t_at, q);
        let mtm = self.m.matmul_tn(&self.m).unwrap();
        let nnt = self.n.matmul_nt(&self.n).unwrap();
        let quad = mtm.frobenius_dot(&nnt).unwrap();
        let cross = self.mt_t.frobenius_dot(&self.n).unwrap();
        let obj = quad - 2.0 * cross + self.t_norm_sq;

        // M·NNᵀ − T·Nᵀ  (k×r) and MᵀM·N − MᵀT  (r×d)
        let left = self.m.matmul(&nnt).unwrap().sub(&self.t_nt).unwrap();
        let right = mtm.matmul(&self.n).unwrap().sub(&self.mt_t).unwrap();
        for (g, bu) in gp.iter_mut().zip(&self.problem.b) {
            *g = 2.0 * left.frobenius_dot(bu).unwrap();
        }
        for (g, au) in gq.iter_mut().zip(&self.problem.a) {
            *g = 2.0 * right.frobenius_dot(au).unwrap();
        }
        obj.max(0.0)
    }
}

/// Adam on `(p, q)` for `config.steps` steps, no weight decay. Returns the
/// best iterate seen, so the final objective never exceeds the initial one.
pub fn solve_coefficients(
    problem: &NaProblem<'_>,
    config: &SolverConfig,
) -> Result<CoefficientPair> {
    config.validate()?;
    let start = Instant::now();
    let u = problem.clients();
    let (mut p, mut q) = match config.init_scale {
        Some(c) => (vec![c; u], vec![c; u]),
        None => (problem.weights.to_vec(), problem.weights.to_vec()),
    };
    let init_p = p.clone();
    let init_q = q.clone();

    let mut reduced = Reduced::new(problem);
    let mut gp = vec![0.0; u];
    let mut gq = vec![0.0; u];
    let mut m1 = vec![0.0; 2 * u];
    let mut m2 = vec![0.0; 2 * u];

    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut obj = reduced.eval(&p, &q, &mut gp, &mut gq);
    if !obj.is_finite() {
        return Err(Error::SolverDiverged { step: 0 });
    }
    trace.push(obj);
    let mut best = (obj, p.clone(), q.clone());

    for step in 1..=config.steps {
        let bc1 = 1.0 - config.beta1.powi(step as i32);
        let bc2 = 1.0 - config.beta2.powi(step as i32);
        for (i, theta) in p.iter_mut().chain(q.iter_mut()).enumerate() {
            let g = if i < u { gp[i] } else { gq[i - u] };
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g;
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m1[i] / bc1;
            let v_hat = m2[i] / bc2;
            *theta -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        obj = reduced.eval(&p, &q, &mut gp, &mut gq);
        if !obj.is_finite() || p.iter().chain(&q).any(|v| !v.is_finite()) {
            return Err(Error::SolverDiverged { step });
        }
        trace.push(obj);
        if obj < best.0 {
            best = (obj, p.clone(), q.clone());
        }
    }

    let initial_objective = na_objective(&init_p, &init_q, problem);
    let (_, mut p, mut q) = best;
    let mut objective = na_objective(&p, &q, problem);
    if !objective.is_finite() {
        return Err(Error::SolverDiverged { step: config.steps });
    }
    if objective > initial_objective {
        // reduced-form rounding picked a point the direct form ranks worse
        p = init_p;
        q = init_q;
        objective = initial_objective;
    }
    Ok(CoefficientPair {
        p,
        q,
        objective,
        initial_objective,
        trace,
        elapsed: start.elapsed(),
    })
}

/// Exhaustive grid search over `[−range, range]^(2U)` with `steps` points per
/// axis, scoring each point on dense matrices. Only for tiny fixtures.
pub fn brute_force_coefficients(
    problem: &NaProblem<'_>,
    grid_range: f64,
    grid_steps: usize,
) -> Result<CoefficientPair> {
    let u = problem.clients();
    let evaluations = (grid_steps as f64).powi(2 * u as i32);
    if u > 3 || evaluations > 1e8 || grid_steps < 2 {
        return Err(Error::IntractableInstance { evaluations });
    }
    let start = Instant::now();
    let axis: Vec<f64> = (0..grid_steps)
        .map(|i| grid_range * (2.0 * i as f64 / (grid_steps - 1) as f64 - 1.0))
        .collect();
    let target = problem.target();
    let (k, r) = problem.b[0].shape();
    let d = problem.a[0].cols();
    let mut m = DenseMatrix::zeros(k, r);
    let mut n = DenseMatrix::zeros(r, d);

    let mut best = (f64::INFINITY, vec![0.0; u], vec![0.0; u]);
    let mut p_idx = vec![0usize; u];
    let mut q_idx = vec![0usize; u];
    let mut p = vec![0.0; u];
    let mut q = vec![0.0; u];
    loop {
        for (pi, &i) in p.iter_mut().zip(&p_idx) {
            *pi = axis[i];
        }
        m.as_mut_slice().fill(0.0);
        for (bu, &c) in problem.b.iter().zip(&p) {
            m.axpy(c, bu).unwrap();
        }
        q_idx.fill(0);
        loop {
            for (qi, &i) in q.iter_mut().zip(&q_idx) {
                *qi = axis[i];
            }
            n.as_mut_slice().fill(0.0);
            for (au, &c) in problem.a.iter().zip(&q) {
                n.axpy(c, au).unwrap();
            }
            let mut obj = 0.0;
            for i in 0..k {
                let m_row = m.row(i);
                let t_row = target.row(i);
                for j in 0..d {
                    let mut v = -t_row[j];
                    for (l, &ml) in m_row.iter().enumerate() {
                        v += ml * n[(l, j)];
                    }
                    obj += v * v;
                }
            }
            if obj < best.0 {
                best = (obj, p.clone(), q.clone());
            }
            if !advance(&mut q_idx, grid_steps) {
                break;
            }
        }
        if !advance(&mut p_idx, grid_steps) {
            break;
        }
    }
    let (objective, p, q) = best;
    Ok(CoefficientPair {
        p,
        q,
        objective,
        initial_objective: objective,
        trace: vec![objective],
        elapsed: start.elapsed(),
    })
}

/// Odometer increment; false once every index has wrapped.
fn advance(idx: &mut [usize], base: usize) -> bool {
    for i in idx.iter_mut() {
        *i += 1;
        if *i < base {
            return true;
        }
        *i = 0;
    }
    false
}
