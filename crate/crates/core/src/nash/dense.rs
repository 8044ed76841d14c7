//! Direct solve of the stacked space-time optimality system.

use super::{AffineData, LinearModel, NashSolution};
use crate::error::{Error, Result};
use crate::linalg::{BandLu, SparseMatrix};
use crate::mesh::SpaceTimeField;
use crate::operators::{assemble_operators, step_matrix};

/// Largest stacked system the dense oracles accept.
pub const DENSE_LIMIT: usize = 20_000;

/// Unknowns per step `k`: `[w^k, phi_1^{k-1}, phi_2^{k-1}]`.
struct Layout {
    n: usize,
}

impl Layout {
    fn w(&self, k: usize, p: usize) -> usize {
        3 * self.n * (k - 1) + p
    }
    fn phi(&self, i: usize, k: usize, p: usize) -> usize {
        3 * self.n * k + (1 + i) * self.n + p
    }
}

/// Sparse matrix and right-hand side of the stepped optimality system.
pub fn dense_system_nash(model: &LinearModel, data: &AffineData, f: &SpaceTimeField) -> Result<(SparseMatrix, Vec<f64>)> {
    let g = &model.grid;
    let n = g.n_interior();
    let nt = g.nt();
    let dt = g.dt();
    let size = 3 * n * nt;
    if size > DENSE_LIMIT {
        return Err(Error::TooLarge {
            unknowns: size,
            limit: DENSE_LIMIT,
        });
    }
    data.check(g)?;
    let lay = Layout { n };
    let mut t = Vec::new();
    let mut b = vec![0.0; size];
    let mut src = f.masked(&model.leader);
    if let Some(forcing) = &data.forcing {
        src.axpy(1.0, forcing);
    }
    for k in 1..=nt {
        let ms = step_matrix(g, &assemble_operators(g, &model.state_coeffs, k)?.forward);
        let mf = step_matrix(g, &assemble_operators(g, &model.follower_coeffs, k)?.forward);
        // state: M_k w^k - w^{k-1} + dt sum chi_i phi_i^{k-1} / mu_i = dt s^{k-1}
        for (r, c, v) in ms.triplets() {
            t.push((lay.w(k, r), lay.w(k, c), v));
        }
        for p in 0..n {
            let row = lay.w(k, p);
            b[row] = dt * src.level(k - 1)[p];
            if k == 1 {
                b[row] += data.w0[p];
            } else {
                t.push((row, lay.w(k - 1, p), -1.0));
            }
            for i in 0..2 {
                if model.control[i].contains(p) {
                    t.push((row, lay.phi(i, k - 1, p), dt / model.mu[i]));
                }
            }
        }
        // followers: M_k^T phi_i^{k-1} - phi_i^k - dt alpha_i chi_id w^k = -dt alpha_i chi_id w_id^k
        for i in 0..2 {
            for (r, c, v) in mf.triplets() {
                t.push((lay.phi(i, k - 1, c), lay.phi(i, k - 1, r), v));
            }
            for p in 0..n {
                let row = lay.phi(i, k - 1, p);
                if k < nt {
                    t.push((row, lay.phi(i, k, p), -1.0));
                }
                if model.observe[i].contains(p) {
                    let c = dt * model.alpha[i];
                    t.push((row, lay.w(k, p), -c));
                    b[row] = -c * data.targets[i].level(k)[p];
                }
            }
        }
    }
    Ok((SparseMatrix::from_triplets(size, t)?, b))
}

fn stack(model: &LinearModel, sol: &NashSolution) -> Vec<f64> {
    let n = model.grid.n_interior();
    let nt = model.grid.nt();
    let lay = Layout { n };
    let mut x = vec![0.0; 3 * n * nt];
    for k in 1..=nt {
        for p in 0..n {
            x[lay.w(k, p)] = sol.w.level(k)[p];
            for i in 0..2 {
                x[lay.phi(i, k - 1, p)] = sol.phi[i].level(k - 1)[p];
            }
        }
    }
    x
}

/// Direct solution of the stepped optimality system.
pub fn dense_oracle_nash(model: &LinearModel, data: &AffineData, f: &SpaceTimeField) -> Result<NashSolution> {
    let (a, b) = dense_system_nash(model, data, f)?;
    let x = BandLu::factorize(&a)?.solve(&b);
    let g = &model.grid;
    let n = g.n_interior();
    let lay = Layout { n };
    let mut w = SpaceTimeField::zeros(g);
    let mut phi = [SpaceTimeField::zeros(g), SpaceTimeField::zeros(g)];
    w.level_mut(0).copy_from_slice(&data.w0);
    for k in 1..=g.nt() {
        for p in 0..n {
            w.level_mut(k)[p] = x[lay.w(k, p)];
            for (i, ph) in phi.iter_mut().enumerate() {
                ph.level_mut(k - 1)[p] = x[lay.phi(i, k - 1, p)];
            }
        }
    }
    let v = [model.control_from_adjoint(0, &phi[0]), model.control_from_adjoint(1, &phi[1])];
    let residuals = model.verify_first_order(data, f, &v)?;
    Ok(NashSolution {
        w,
        phi,
        v,
        iterations: 0,
        history: Vec::new(),
        residuals,
    })
}

/// Normwise residual `||Ax - b|| / (||A|| ||x|| + ||b||)` of a solution plugged
/// into the stepped system.
pub fn stepped_residual(model: &LinearModel, data: &AffineData, f: &SpaceTimeField, sol: &NashSolution) -> Result<f64> {
    let (a, b) = dense_system_nash(model, data, f)?;
    let x = stack(model, sol);
    let ax = a.mul_vec(&x);
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let r: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
    let denom = a.norm_inf() * inf(&x) + inf(&b);
    Ok(if denom == 0.0 { inf(&r) } else { inf(&r) / denom })
}
