use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{parse_with_vars, Expression, STATE_VARS};

/// Second derivatives of `F(u, p)` at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SecondDerivatives {
    pub uu: f64,
    /// `grad_p F_u`
    pub up: [f64; 2],
    /// `grad_p^2 F`
    pub pp: [[f64; 2]; 2],
}

/// Nonlinearity `F(u, p)` with `p` standing for `grad u`.
pub trait Nonlinearity: Send + Sync + std::fmt::Debug {
    fn value(&self, u: f64, p: [f64; 2]) -> f64;
    fn d_u(&self, u: f64, p: [f64; 2]) -> f64;
    fn d_p(&self, u: f64, p: [f64; 2]) -> [f64; 2];
    /// `None` when honest second derivatives are not available.
    fn second(&self, u: f64, p: [f64; 2]) -> Option<SecondDerivatives>;
    /// Bound `M` on `|F_u| + |grad_p F|`.
    fn bound(&self) -> f64;
    fn name(&self) -> String;
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Zero;

impl Nonlinearity for Zero {
    fn value(&self, _: f64, _: [f64; 2]) -> f64 {
        0.0
    }
    fn d_u(&self, _: f64, _: [f64; 2]) -> f64 {
        0.0
    }
    fn d_p(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
        [0.0; 2]
    }
    fn second(&self, _: f64, _: [f64; 2]) -> Option<SecondDerivatives> {
        Some(SecondDerivatives::default())
    }
    fn bound(&self) -> f64 {
        0.0
    }
    fn name(&self) -> String {
        "zero".into()
    }
    fn is_zero(&self) -> bool {
        true
    }
}

fn sech2(v: f64) -> f64 {
    1.0 / v.cosh().powi(2)
}

/// `c tanh(u)`
#[derive(Clone, Copy, Debug)]
pub struct Tanh {
    pub c: f64,
}

impl Nonlinearity for Tanh {
    fn value(&self, u: f64, _: [f64; 2]) -> f64 {
        self.c * u.tanh()
    }
    fn d_u(&self, u: f64, _: [f64; 2]) -> f64 {
        self.c * sech2(u)
    }
    fn d_p(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
        [0.0; 2]
    }
    fn second(&self, u: f64, _: [f64; 2]) -> Option<SecondDerivatives> {
        Some(SecondDerivatives {
            uu: -2.0 * self.c * u.tanh() * sech2(u),
            ..Default::default()
        })
    }
    fn bound(&self) -> f64 {
        self.c.abs()
    }
    fn name(&self) -> String {
        format!("tanh(c={})", self.c)
    }
    fn is_zero(&self) -> bool {
        self.c == 0.0
    }
}

/// `c1 tanh(u) + c2 tanh(p_1)`
#[derive(Clone, Copy, Debug)]
pub struct GradTanh {
    pub c1: f64,
    pub c2: f64,
}

impl Nonlinearity for GradTanh {
    fn value(&self, u: f64, p: [f64; 2]) -> f64 {
        self.c1 * u.tanh() + self.c2 * p[0].tanh()
    }
    fn d_u(&self, u: f64, _: [f64; 2]) -> f64 {
        self.c1 * sech2(u)
    }
    fn d_p(&self, _: f64, p: [f64; 2]) -> [f64; 2] {
        [self.c2 * sech2(p[0]), 0.0]
    }
    fn second(&self, u: f64, p: [f64; 2]) -> Option<SecondDerivatives> {
        Some(SecondDerivatives {
            uu: -2.0 * self.c1 * u.tanh() * sech2(u),
            up: [0.0; 2],
            pp: [[-2.0 * self.c2 * p[0].tanh() * sech2(p[0]), 0.0], [0.0, 0.0]],
        })
    }
    fn bound(&self) -> f64 {
        self.c1.abs() + self.c2.abs()
    }
    fn name(&self) -> String {
        format!("grad-tanh(c1={}, c2={})", self.c1, self.c2)
    }
    fn is_zero(&self) -> bool {
        self.c1 == 0.0 && self.c2 == 0.0
    }
}

/// User expression in `u`, `px`, `py`; first derivatives by central differences.
#[derive(Clone, Debug)]
pub struct ExprNonlinearity {
    pub expr: Expression,
    pub bound: f64,
}

impl ExprNonlinearity {
    /// Parses `text`; without an explicit bound one is estimated by sampling.
    pub fn parse(text: &str, bound: Option<f64>) -> Result<Self> {
        let expr = parse_with_vars(text, &STATE_VARS)?;
        let mut nl = Self { expr, bound: f64::INFINITY };
        nl.bound = match bound {
            Some(b) => b,
            None => sample_bounds(&nl, 8.0, 41).max_total,
        };
        Ok(nl)
    }

    fn eval(&self, u: f64, p: [f64; 2]) -> f64 {
        self.expr.eval(&[u, p[0], p[1]])
    }

    fn diff(&self, u: f64, p: [f64; 2], axis: usize) -> f64 {
        let mut a = [u, p[0], p[1]];
        let h = 1e-6 * a[axis].abs().max(1.0);
        a[axis] += h;
        let fp = self.expr.eval(&a);
        a[axis] -= 2.0 * h;
        let fm = self.expr.eval(&a);
        (fp - fm) / (2.0 * h)
    }
}

impl Nonlinearity for ExprNonlinearity {
    fn value(&self, u: f64, p: [f64; 2]) -> f64 {
        self.eval(u, p)
    }
    fn d_u(&self, u: f64, p: [f64; 2]) -> f64 {
        self.diff(u, p, 0)
    }
    fn d_p(&self, u: f64, p: [f64; 2]) -> [f64; 2] {
        [self.diff(u, p, 1), self.diff(u, p, 2)]
    }
    fn second(&self, _: f64, _: [f64; 2]) -> Option<SecondDerivatives> {
        None
    }
    fn bound(&self) -> f64 {
        self.bound
    }
    fn name(&self) -> String {
        format!("expr({})", self.expr.source)
    }
}

/// Builds a nonlinearity from a preset name or an expression.
pub fn nonlinearity_from_spec(kind: &str, c1: f64, c2: f64, expr: Option<&str>) -> Result<Box<dyn Nonlinearity>> {
    Ok(match kind {
        "zero" => Box::new(Zero),
        "tanh" => Box::new(Tanh { c: c1 }),
        "grad-tanh" => Box::new(GradTanh { c1, c2 }),
        "expr" => {
            let text = expr.ok_or_else(|| Error::InvalidSpec("expression nonlinearity needs an expression".into()))?;
            Box::new(ExprNonlinearity::parse(text, None)?)
        }
        other => return Err(Error::InvalidSpec(format!("unknown nonlinearity '{other}'"))),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub samples: usize,
    pub max_du: f64,
    pub max_dp: f64,
    pub max_total: f64,
    pub bound: f64,
    pub within_bound: bool,
    pub value_at_origin: f64,
}

/// Scans `|F_u|` and `|grad_p F|` on a tensor grid of `(u, p1, p2)` in `[-range, range]^3`.
pub fn sample_bounds(nl: &dyn Nonlinearity, range: f64, per_axis: usize) -> BoundReport {
    let n = per_axis.max(2);
    let tick = |i: usize| -range + 2.0 * range * i as f64 / (n - 1) as f64;
    let (mut du, mut dp, mut total) = (0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let (u, p) = (tick(i), [tick(j), tick(k)]);
                let a = nl.d_u(u, p).abs();
                let g = nl.d_p(u, p);
                let b = (g[0] * g[0] + g[1] * g[1]).sqrt();
                du = du.max(a);
                dp = dp.max(b);
                total = total.max(a + b);
            }
        }
    }
    let bound = nl.bound();
    BoundReport {
        samples: n * n * n,
        max_du: du,
        max_dp: dp,
        max_total: total,
        bound,
        within_bound: total <= bound * (1.0 + 1e-12),
        value_at_origin: nl.value(0.0, [0.0; 2]),
    }
}

/// Random `(u, p)` samples for spot checks.
pub fn random_points(n: usize, range: f64, seed: u64) -> Vec<(f64, [f64; 2])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                rng.random_range(-range..range),
                [rng.random_range(-range..range), rng.random_range(-range..range)],
            )
        })
        .collect()
}
