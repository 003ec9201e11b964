//! Rank-`r` factorization baselines for the ideal aggregate: truncated SVD
//! (one-sided Jacobi) and column-pivoted Gram–Schmidt, plus a timing
//! comparison against the coefficient solver.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::solver::{solve_coefficients, NaProblem, SolverConfig};

const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Svd,
    GramSchmidt,
    FloraNa,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Svd => "SVD",
            Method::GramSchmidt => "GRAM_SCHMIDT",
            Method::FloraNa => "FLORA_NA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub method: Method,
    pub b: DenseMatrix,
    pub a: DenseMatrix,
    /// `‖B·A − T‖_F / ‖T‖_F`, zero for a zero target.
    pub frobenius_gap: f64,
    pub wall_clock_s: f64,
}

/// Thin SVD `T = U·diag(σ)·Vᵀ` with `σ` sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m×p`, `p = min(m, n)`
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    /// `n×p`
    pub v: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(t: &DenseMatrix) -> Result<Svd> {
    let (m, n) = t.shape();
    if m < n {
        let s = jacobi_svd(&t.transpose())?;
        return Ok(Svd {
            u: s.v,
            sigma: s.sigma,
            v: s.u,
        });
    }
    // Rows of `x` are the columns of `t`; rows of `vt` the columns of `V`.
    let mut x = t.transpose();
    let mut vt = DenseMatrix::identity(n);
    let eps = f64::EPSILON;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (xi, xj) = (x.row(i), x.row(j));
                    (dot(xi, xi), dot(xj, xj), dot(xi, xj))
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let tan = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cos = 1.0 / (1.0 + tan * tan).sqrt();
                let sin = cos * tan;
                rotate_rows(&mut x, i, j, cos, sin);
                rotate_rows(&mut vt, i, j, cos, sin);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = (0..n).map(|i| dot(x.row(i), x.row(i)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut u = DenseMatrix::zeros(m, n);
    let mut v = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for (row, &val) in x.row(src).iter().enumerate() {
                u[(row, col)] = val / s;
            }
        }
        for (row, &val) in vt.row(src).iter().enumerate() {
            v[(row, col)] = val;
        }
    }
    Ok(Svd { u, sigma, v })
}

fn rotate_rows(m: &mut DenseMatrix, i: usize, j: usize, cos: f64, sin: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let (xa, xb) = (*a, *b);
        *a = cos * xa - sin * xb;
        *b = sin * xa + cos * xb;
    }
}

fn check_rank(t: &DenseMatrix, r: usize) -> Result<()> {
    if r == 0 || r > t.rows().min(t.cols()) {
        return Err(Error::InvalidDimensions(format!(
            "rank {r} must lie in 1..={} for a {}x{} target",
            t.rows().min(t.cols()),
            t.rows(),
            t.cols()
        )));
    }
    Ok(())
}

pub fn normalized_gap(approx: &DenseMatrix, target: &DenseMatrix) -> Result<f64> {
    let norm = target.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok(approx.distance(target)? / norm)
}

/// Balanced truncated SVD: `B = U_r·Σ_r^{1/2}`, `A = Σ_r^{1/2}·V_rᵀ`.
pub fn factorize_svd(target: &DenseMatrix, r: usize) -> Result<FactorizationReport> {
    check_rank(target, r)?;
    let start = Instant::now();
    let svd = jacobi_svd(target)?;
    let (k, d) = target.shape();
    let root: Vec<f64> = svd.sigma[..r].iter().map(|s| s.sqrt()).collect();
    let b = DenseMatrix::from_fn(k, r, |i, j| svd.u[(i, j)] * root[j]);
    let a = DenseMatrix::from_fn(r, d, |i, j| root[i] * svd.v[(j, i)]);
    let wall_clock_s = start.elapsed().as_secs_f64();
    let frobenius_gap = normalized_gap(&b.matmul(&a)?, target)?;
    Ok(FactorizationReport {
        method: Method::Svd,
        b,
        a,
        frobenius_gap,
        wall_clock_s,
    })
}

/// Column-pivoted modified Gram–Schmidt stopped after `r` columns:
/// `B = Q_r` (orthonormal), `A = R_r` in the original column order.
pub fn factorize_gram_schmidt(target: &DenseMatrix, r: usize) -> Result<FactorizationReport> {
    check_rank(target, r)?;
    let start = Instant::now();
    let (k, d) = target.shape();
    // rows of `cols` are the (shrinking) residual columns of the target
    let mut cols = target.transpose();
    let mut norms: Vec<f64> = (0..d).map(|j| dot(cols.row(j), cols.row(j))).collect();
    let mut used = vec![false; d];
    let mut q = DenseMatrix::zeros(r, k); // rows are the basis vectors
    let mut a = DenseMatrix::zeros(r, d);
    for step in 0..r {
        let pivot = (0..d)
            .filter(|&j| !used[j])
            .max_by(|&x, &y| norms[x].total_cmp(&norms[y]).then(y.cmp(&x)))
            .expect("r ≤ d");
        used[pivot] = true;
        let norm = dot(cols.row(pivot), cols.row(pivot)).sqrt();
        if norm == 0.0 {
            break;
        }
        let basis: Vec<f64> = cols.row(pivot).iter().map(|v| v / norm).collect();
        for j in 0..d {
            let coef = dot(&basis, cols.row(j));
            a[(step, j)] = coef;
            for (c, &bv) in cols.row_mut(j).iter_mut().zip(&basis) {
                *c -= coef * bv;
            }
            norms[j] = dot(cols.row(j), cols.row(j));
        }
        q.row_mut(step).copy_from_slice(&basis);
    }
    let b = q.transpose();
    let wall_clock_s = start.elapsed().as_secs_f64();
    let frobenius_gap = normalized_gap(&b.matmul(&a)?, target)?;
    Ok(FactorizationReport {
        method: Method::GramSchmidt,
        b,
        a,
        frobenius_gap,
        wall_clock_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub wall_clock_s: f64,
    pub normalized_gap: f64,
}

/// SVD, Gram–Schmidt, and the coefficient solver on the same ideal
/// aggregate `T = Σ w_u·B_u·A_u`. The solver's time includes forming its
/// own view of `T`; the factorizations are timed on a precomputed `T`.
pub fn compare_execution(
    problem: &NaProblem<'_>,
    r: usize,
    config: &SolverConfig,
) -> Result<Vec<ComparisonRow>> {
    let target = problem.target();
    let svd = factorize_svd(&target, r)?;
    let gs = factorize_gram_schmidt(&target, r)?;
    let start = Instant::now();
    let sol = solve_coefficients(problem, config)?;
    let na_time = start.elapsed().as_secs_f64();
    let norm = target.frobenius_norm();
    let na_gap = if norm == 0.0 {
        0.0
    } else {
        sol.objective.sqrt() / norm
    };
    Ok(vec![
        ComparisonRow {
            method: Method::Svd,
            wall_clock_s: svd.wall_clock_s,
            normalized_gap: svd.frobenius_gap,
        },
        ComparisonRow {
            method: Method::GramSchmidt,
            wall_clock_s: gs.wall_clock_s,
            normalized_gap: gs.frobenius_gap,
        },
        ComparisonRow {
            method: Method::FloraNa,
            wall_clock_s: na_time,
            normalized_gap: na_gap,
        },
    ])
}

/// `method,wall_clock_s,normalized_gap`
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "wall_clock_s", "normalized_gap"])?;
    for row in rows {
        w.write_record([
            row.method.to_string(),
            format!("{:e}", row.wall_clock_s),
            format!("{:e}", row.normalized_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}
