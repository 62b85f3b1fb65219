//! Small numerical kernels shared by the estimators: monotone root finding,
//! one-dimensional maximization, adaptive quadrature, empirical quantiles and
//! a damped Newton-Raphson loop for concave log-likelihoods.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Finds `t >= 0` with `f(t) = target` for a continuous non-decreasing `f`
/// with `f(0) <= target`. The upper bracket doubles until it covers the
/// target; bisection stops when `|f(t) - target| <= tol` or the bracket
/// collapses to machine precision.
pub fn invert_monotone<F: Fn(f64) -> f64>(f: F, target: f64, tol: f64, max_iter: usize) -> f64 {
    if target <= f(0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < target {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if (v - target).abs() <= tol {
            return mid;
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Brent's method for the maximum of `f` on `[a, b]`.
pub fn brent_maximize<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105;
    let g = |x: f64| -f(x);
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = g(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = g(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx)
}

// 7-point Gauss / 15-point Kronrod nodes and weights on [-1, 1].
const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_KRONROD: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GK_GAUSS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = GK_KRONROD[7] * fc;
    let mut gauss = GK_GAUSS[3] * fc;
    for k in 0..7 {
        let x = h * GK_NODES[k];
        let s = f(c - x) + f(c + x);
        kron += GK_KRONROD[k] * s;
        if k % 2 == 1 {
            gauss += GK_GAUSS[k / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (val, err) = gk15(f, a, b);
        if err <= tol || depth == 0 {
            return val;
        }
        let m = 0.5 * (a + b);
        recurse(f, a, m, 0.5 * tol, depth - 1) + recurse(f, m, b, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    recurse(&f, a, b, tol, 40)
}

/// Empirical quantile of sorted data with linear interpolation between
/// order statistics (position `p * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let p = p.clamp(0.0, 1.0);
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Value, gradient and negative Hessian of a concave objective.
pub struct Quadratic {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub information: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Coefficients beyond this magnitude signal a likelihood without a
    /// finite maximizer.
    pub divergence_bound: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            gradient_tol: 1e-8,
            step_tol: 1e-9,
            max_iter: 50,
            divergence_bound: 30.0,
        }
    }
}

pub struct NewtonOutcome {
    pub beta: DVector<f64>,
    pub at: Quadratic,
    pub iterations: usize,
    pub converged: bool,
}

/// Newton-Raphson with step halving on objective decrease, started at
/// `init`. Converged means the gradient max-norm fell below
/// `gradient_tol`, or the step below `step_tol` with a gradient that is
/// still small relative to the information scale.
pub fn newton_maximize<F>(eval: F, init: DVector<f64>, opts: NewtonOptions) -> Result<NewtonOutcome>
where
    F: Fn(&DVector<f64>) -> Quadratic,
{
    let mut beta = init;
    let mut at = eval(&beta);
    let mut iterations = 0;
    let mut converged = at.gradient.amax() < opts.gradient_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let chol = at.information.clone().cholesky().ok_or_else(|| {
            Error::Singular(format!(
                "information is not positive definite at beta = {:?}",
                beta.as_slice()
            ))
        })?;
        let mut step = chol.solve(&at.gradient);
        let mut next = &beta + &step;
        let mut next_at = eval(&next);
        let mut halvings = 0;
        while !(next_at.value >= at.value - 1e-12 * at.value.abs().max(1.0)) && halvings < 30 {
            step *= 0.5;
            next = &beta + &step;
            next_at = eval(&next);
            halvings += 1;
        }
        let step_norm = step.amax();
        beta = next;
        at = next_at;
        if at.gradient.amax() < opts.gradient_tol {
            converged = true;
        } else if step_norm < opts.step_tol {
            converged = at.gradient.amax() < opts.gradient_tol.sqrt();
            break;
        }
        if beta.amax() > opts.divergence_bound {
            converged = false;
            break;
        }
    }
    if converged {
        // one polishing step past the stopping rule; kept only if it helps
        if let Some(chol) = at.information.clone().cholesky() {
            let next = &beta + chol.solve(&at.gradient);
            let next_at = eval(&next);
            if next_at.gradient.amax() < at.gradient.amax() && next_at.value.is_finite() {
                beta = next;
                at = next_at;
            }
        }
    }
    if beta.amax() > opts.divergence_bound || beta.iter().any(|b| !b.is_finite()) {
        converged = false;
    }
    Ok(NewtonOutcome {
        beta,
        at,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_monotone_function() {
        let t = invert_monotone(|t| t * t * t, 27.0, 1e-12, 200);
        assert!((t - 3.0).abs() < 1e-10);
        assert_eq!(invert_monotone(|t| t, 0.0, 1e-12, 200), 0.0);
    }

    #[test]
    fn brent_finds_interior_max() {
        let (x, fx) = brent_maximize(|x| -(x - 1.3).powi(2) + 2.0, -5.0, 5.0, 1e-10);
        assert!((x - 1.3).abs() < 1e-7);
        assert!((fx - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let v = integrate(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-11);
        let v = integrate(|x| (-x * x).exp(), -6.0, 6.0, 1e-12);
        assert!((v - std::f64::consts::PI.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&xs, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile_sorted(&xs, 0.975) - 97.525).abs() < 1e-12);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 100.0);
    }
}
