//! Shared numerical kernels: Gauss–Hermite rules, a BFGS minimizer,
//! the normal quantile, and compensated summation.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Gauss–Hermite quadrature rule for the weight `exp(-t^2)` on the real line.
///
/// Nodes are symmetric about zero and weights are positive. For a density
/// integral against `N(mu, sigma^2)`, substitute `b = mu + sqrt(2) * sigma * t`
/// and scale by `1/sqrt(pi)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an order-`q` rule from the symmetric tridiagonal Jacobi matrix
    /// of the Hermite recurrence (Golub–Welsch).
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::Domain("quadrature order must be at least 1".into()));
        }
        if q == 1 {
            return Ok(Self {
                nodes: vec![0.0],
                weights: vec![std::f64::consts::PI.sqrt()],
            });
        }
        let mut jacobi = DMatrix::<f64>::zeros(q, q);
        for i in 1..q {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..q)
            .map(|j| {
                let node = eig.eigenvalues[j];
                let v0 = eig.eigenvectors[(0, j)];
                (node, std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Outcome of a quasi-Newton minimization.
#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// BFGS with backtracking (Armijo) line search.
///
/// Minimizes `f`, where `f` returns the objective and writes the gradient.
/// Convergence is declared when the gradient infinity norm drops to `tol`.
pub fn bfgs<F>(x0: &[f64], tol: f64, max_iter: usize, mut f: F) -> Result<OptimOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut grad = vec![0.0; n];
    let mut value = f(x.as_slice(), &mut grad)?;
    let mut g = DVector::from_column_slice(&grad);
    let mut h_inv = DMatrix::<f64>::identity(n, n);

    for iter in 0..max_iter {
        let gnorm = g.amax();
        if gnorm <= tol {
            return Ok(OptimOutcome {
                x: x.as_slice().to_vec(),
                value,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            });
        }

        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if !slope.is_finite() || slope >= 0.0 {
            // Reset a corrupted curvature estimate and fall back to steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }

        let mut step = 1.0;
        let mut x_new = DVector::zeros(n);
        let mut accepted = false;
        let mut value_new = value;
        for _ in 0..60 {
            x_new = &x + step * &dir;
            match f(x_new.as_slice(), &mut grad) {
                Ok(v) if v.is_finite() && v <= value + 1e-4 * step * slope => {
                    value_new = v;
                    accepted = true;
                    break;
                }
                // Near the optimum the Armijo decrease can fall below f64
                // resolution of the objective; a step that does not increase
                // the value materially but shrinks the gradient still makes
                // progress toward the stationarity tolerance.
                Ok(v)
                    if v.is_finite()
                        && v <= value + 1e-12 * value.abs().max(1.0)
                        && DVector::from_column_slice(&grad).amax() < 0.999 * gnorm =>
                {
                    value_new = v;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            return Err(Error::NonConvergence {
                what: "line search".into(),
                iterations: iter,
                grad_norm: gnorm,
            });
        }

        let g_new = DVector::from_column_slice(&grad);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            h_inv = &left * &h_inv * &right + rho * &s * s.transpose();
        }
        x = x_new;
        g = g_new;
        value = value_new;
    }

    let gnorm = g.amax();
    if gnorm <= tol {
        return Ok(OptimOutcome {
            x: x.as_slice().to_vec(),
            value,
            grad_norm: gnorm,
            iterations: max_iter,
            converged: true,
        });
    }
    Err(Error::NonConvergence {
        what: "BFGS".into(),
        iterations: max_iter,
        grad_norm: gnorm,
    })
}

/// Quantile of the standard normal distribution (Wichura's algorithm AS 241).
///
/// Absolute accuracy is far below 1e-9 over the full open unit interval.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("quantile probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    let q = p - 0.5;
    let r;
    if q.abs() <= 0.425 {
        r = 0.180625 - q * q;
        return Ok(q * poly(r, &A_CENTRAL) / poly(r, &B_CENTRAL));
    }
    let mut rr = if q < 0.0 { p } else { 1.0 - p };
    rr = (-rr.ln()).sqrt();
    let value = if rr <= 5.0 {
        r = rr - 1.6;
        poly(r, &A_MID) / poly(r, &B_MID)
    } else {
        r = rr - 5.0;
        poly(r, &A_TAIL) / poly(r, &B_TAIL)
    };
    Ok(if q < 0.0 { -value } else { value })
}

fn poly(x: f64, c: &[f64; 8]) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

#[allow(clippy::excessive_precision)]
const A_CENTRAL: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
#[allow(clippy::excessive_precision)]
const B_CENTRAL: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
#[allow(clippy::excessive_precision)]
const A_MID: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
#[allow(clippy::excessive_precision)]
const B_MID: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
#[allow(clippy::excessive_precision)]
const A_TAIL: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
#[allow(clippy::excessive_precision)]
const B_TAIL: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

/// Kahan-compensated accumulator. Keeps Monte-Carlo aggregation independent
/// of summation order at f64 precision.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Central finite difference of a scalar function, used by the gradient
/// self-checks and observed-information estimates.
pub fn central_diff<F>(x: &[f64], i: usize, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[i] += h;
    lo[i] -= h;
    Ok((f(&hi)? - f(&lo)?) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_hermite_integrates_low_moments() {
        let rule = GaussHermite::new(20).unwrap();
        // moments of exp(-t^2): integral 1 -> sqrt(pi), t^2 -> sqrt(pi)/2, t^4 -> 3 sqrt(pi)/4
        let m0: f64 = rule.weights.iter().sum();
        let m2: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(t, w)| w * t * t)
            .sum();
        let m4: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(t, w)| w * t.powi(4))
            .sum();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert_relative_eq!(m0, sqrt_pi, epsilon = 1e-12);
        assert_relative_eq!(m2, sqrt_pi / 2.0, epsilon = 1e-12);
        assert_relative_eq!(m4, 3.0 * sqrt_pi / 4.0, epsilon = 1e-11);
    }

    #[test]
    fn gauss_hermite_nodes_symmetric() {
        let rule = GaussHermite::new(31).unwrap();
        for i in 0..rule.order() {
            let j = rule.order() - 1 - i;
            assert_relative_eq!(rule.nodes[i], -rule.nodes[j], epsilon = 1e-12);
            assert_relative_eq!(rule.weights[i], rule.weights[j], epsilon = 1e-12);
            assert!(rule.weights[i] > 0.0);
        }
    }

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let out = bfgs(&[-1.2, 1.0], 1e-10, 500, |x, g| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        })
        .unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn normal_quantile_reference_points() {
        // reference values to 1e-9 (Wichura 1988, standard tables)
        assert_relative_eq!(normal_quantile(0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            normal_quantile(0.975).unwrap(),
            1.959_963_984_540_054,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            normal_quantile(0.995).unwrap(),
            2.575_829_303_548_901,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            normal_quantile(1e-10).unwrap(),
            -6.361_340_902_404_056,
            epsilon = 1e-7
        );
        let z = normal_quantile(0.31).unwrap();
        assert_relative_eq!(normal_quantile(0.69).unwrap(), -z, epsilon = 1e-12);
    }

    #[test]
    fn kahan_sum_handles_small_increments() {
        let mut acc = KahanSum::default();
        acc.add(1.0);
        for _ in 0..1_000_000 {
            acc.add(1e-16);
        }
        assert_relative_eq!(acc.value(), 1.0 + 1e-10, epsilon = 1e-14);
    }
}
