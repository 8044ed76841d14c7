//! Reference problem setups used by the test suites and the CLI defaults.

use crate::error::Result;
use crate::mesh::{Grid, SpaceTimeField, SubdomainMask};
use crate::operators::{Coefficients, ProblemSpec};

/// Domain length of the reference 1D problems.
pub const REF_LENGTH: f64 = 4.0;

/// Clamped bump `16 x^2 (L - x)^2 / L^4` with unit peak.
pub fn clamped_bump(grid: &Grid) -> Vec<f64> {
    let l = grid.lengths()[0];
    grid.sample(|x| 16.0 * x[0] * x[0] * (l - x[0]) * (l - x[0]) / l.powi(4))
}

/// 1D problem on `[0, 4] x (0, T)` with a shared observation region.
///
/// Leader on `[1.0, 2.6]`, followers on `[0.4, 1.6]` and `[2.4, 3.6]`, both
/// observing `[1.4, 3.0]`; zero coefficients, zero targets, bump initial data.
pub fn reference_1d(nx: usize, nt: usize, t_final: f64, alpha: f64, mu: f64) -> Result<ProblemSpec> {
    let grid = Grid::new(1, &[REF_LENGTH], &[nx], t_final, nt)?;
    let mask = |lo: f64, hi: f64| SubdomainMask::from_box(&grid, &[(lo, hi)]);
    let od = mask(1.4, 3.0)?;
    Ok(ProblemSpec {
        coeffs: Coefficients::zeros(&grid),
        leader: mask(1.0, 2.6)?,
        control: [mask(0.4, 1.6)?, mask(2.4, 3.6)?],
        observe: [od.clone(), od],
        alpha: [alpha, alpha],
        mu: [mu, mu],
        targets: [SpaceTimeField::zeros(&grid), SpaceTimeField::zeros(&grid)],
        u0: clamped_bump(&grid),
        ubar0: None,
        grid,
    })
}

/// [`reference_1d`] with mild variable coefficients and nonzero targets.
pub fn reference_1d_variable(nx: usize, nt: usize, t_final: f64, alpha: f64, mu: f64) -> Result<ProblemSpec> {
    let mut spec = reference_1d(nx, nt, t_final, alpha, mu)?;
    let g = spec.grid.clone();
    spec.coeffs = Coefficients {
        a: SpaceTimeField::from_fn(&g, |x, t| -1.2 + 0.25 * (x[0] - t).sin()),
        b: vec![SpaceTimeField::from_fn(&g, |x, t| 0.3 * (0.5 * x[0] + t).cos())],
    };
    spec.targets = [
        SpaceTimeField::from_fn(&g, |x, t| 0.2 * (x[0] * t).sin()),
        SpaceTimeField::from_fn(&g, |x, _| -0.1 * x[0]),
    ];
    Ok(spec)
}

/// Distinct observation regions `[1.2, 2.0]` and `[2.0, 2.8]`.
pub fn reference_1d_distinct(nx: usize, nt: usize, t_final: f64, alpha: f64, mu: f64) -> Result<ProblemSpec> {
    let mut spec = reference_1d(nx, nt, t_final, alpha, mu)?;
    let g = spec.grid.clone();
    spec.observe = [
        SubdomainMask::from_box(&g, &[(1.2, 2.0)])?,
        SubdomainMask::from_box(&g, &[(2.0, 2.8)])?,
    ];
    Ok(spec)
}

/// Small 2D problem on `[0, 2]^2`.
pub fn reference_2d(nx: usize, nt: usize, alpha: f64, mu: f64) -> Result<ProblemSpec> {
    let grid = Grid::new(2, &[2.0, 2.0], &[nx, nx], 0.5, nt)?;
    let mask = |b: [(f64, f64); 2]| SubdomainMask::from_box(&grid, &b);
    let od = mask([(0.6, 1.5), (0.5, 1.5)])?;
    let u0 = grid.sample(|x| {
        let bx = x[0] * x[0] * (2.0 - x[0]) * (2.0 - x[0]);
        let by = x[1] * x[1] * (2.0 - x[1]) * (2.0 - x[1]);
        bx * by
    });
    Ok(ProblemSpec {
        coeffs: Coefficients::zeros(&grid),
        leader: mask([(0.5, 1.3), (0.4, 1.6)])?,
        control: [mask([(0.2, 0.8), (0.2, 1.8)])?, mask([(1.2, 1.8), (0.2, 1.8)])?],
        observe: [od.clone(), od],
        alpha: [alpha, alpha],
        mu: [mu, mu],
        targets: [SpaceTimeField::zeros(&grid), SpaceTimeField::zeros(&grid)],
        u0,
        ubar0: None,
        grid,
    })
}
