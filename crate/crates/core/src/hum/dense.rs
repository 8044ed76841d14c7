use super::CoupledAdjointState;
use crate::error::{Error, Result};
use crate::linalg::{BandLu, SparseMatrix};
use crate::mesh::SpaceTimeField;
use crate::nash::{LinearModel, DENSE_LIMIT};
use crate::operators::{assemble_operators, step_matrix};

/// Unknowns per step `k`: `[psi^{k-1}, eta_1^k, eta_2^k]`.
struct Layout {
    n: usize,
}

impl Layout {
    fn psi(&self, k: usize, p: usize) -> usize {
        3 * self.n * (k - 1) + p
    }
    fn eta(&self, i: usize, k: usize, p: usize) -> usize {
        3 * self.n * (k - 1) + (1 + i) * self.n + p
    }
}

/// Direct solve of the stacked coupled adjoint system.
pub fn dense_coupled_adjoint(model: &LinearModel, psi0: &[f64]) -> Result<CoupledAdjointState> {
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
    if psi0.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            found: psi0.len(),
        });
    }
    let lay = Layout { n };
    let mut t = Vec::new();
    let mut b = vec![0.0; size];
    for k in 1..=nt {
        let ms = step_matrix(g, &assemble_operators(g, &model.state_coeffs, k)?.forward);
        let mf = step_matrix(g, &assemble_operators(g, &model.follower_coeffs, k)?.forward);
        // M_k^T psi^{k-1} - psi^k - dt sum alpha_i chi_id eta_i^k = 0
        for (r, c, v) in ms.triplets() {
            t.push((lay.psi(k, c), lay.psi(k, r), v));
        }
        for p in 0..n {
            let row = lay.psi(k, p);
            if k == nt {
                b[row] = psi0[p];
            } else {
                t.push((row, lay.psi(k + 1, p), -1.0));
            }
            for i in 0..2 {
                if model.observe[i].contains(p) {
                    t.push((row, lay.eta(i, k, p), -dt * model.alpha[i]));
                }
            }
        }
        // M_k eta_i^k - eta_i^{k-1} + dt chi_i psi^{k-1} / mu_i = 0
        for i in 0..2 {
            for (r, c, v) in mf.triplets() {
                t.push((lay.eta(i, k, r), lay.eta(i, k, c), v));
            }
            for p in 0..n {
                let row = lay.eta(i, k, p);
                if k > 1 {
                    t.push((row, lay.eta(i, k - 1, p), -1.0));
                }
                if model.control[i].contains(p) {
                    t.push((row, lay.psi(k, p), dt / model.mu[i]));
                }
            }
        }
    }
    let a = SparseMatrix::from_triplets(size, t)?;
    let x = BandLu::factorize(&a)?.solve(&b);
    let mut psi = SpaceTimeField::zeros(g);
    let mut eta = [SpaceTimeField::zeros(g), SpaceTimeField::zeros(g)];
    psi.level_mut(nt).copy_from_slice(psi0);
    for k in 1..=nt {
        for p in 0..n {
            psi.level_mut(k - 1)[p] = x[lay.psi(k, p)];
            for (i, e) in eta.iter_mut().enumerate() {
                e.level_mut(k)[p] = x[lay.eta(i, k, p)];
            }
        }
    }
    Ok(CoupledAdjointState { psi, eta, iterations: 0 })
}
