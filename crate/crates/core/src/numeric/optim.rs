//! Unconstrained local optimizers: BFGS for smooth objectives and
//! Levenberg–Marquardt for nonlinear least squares.
//!
//! Constraints (simplex, positivity) are handled by the callers through
//! reparametrization, so both routines work on all of `R^d`.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective change falls below this.
    pub f_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            f_tol: 1e-14,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Minimizes `f` given `fg` returning `(value, gradient)`.
pub fn bfgs<F>(fg: F, x0: DVector<f64>, opts: &OptimOptions) -> OptimResult
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let d = x0.len();
    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut converged = false;
    let mut iterations = 0;
    let mut stalls = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let gnorm = g.amax();
        if !f.is_finite() {
            break;
        }
        if gnorm < opts.grad_tol {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h_inv = DMatrix::identity(d, d);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * step;
            let (fn_, gn) = fg(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // line search failure: at a numerical minimum along this direction
            if h_inv != DMatrix::identity(d, d) {
                h_inv = DMatrix::identity(d, d);
                continue;
            }
            converged = gnorm < opts.grad_tol.sqrt();
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yhy + rho) s s'
            h_inv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        let rel = (f - fn_).abs() / f.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn;
        if rel < opts.f_tol {
            stalls += 1;
            if stalls >= 3 {
                converged = g.amax() < opts.grad_tol.sqrt();
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let grad_norm = g.amax();
    OptimResult {
        x,
        f,
        iterations,
        converged: converged || grad_norm < opts.grad_tol,
        grad_norm,
    }
}

/// Central finite-difference gradient, used for checks and derivative-free callers.
pub fn numeric_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        let step = h * xi.abs().max(1.0);
        xp[i] = xi + step;
        let fp = f(&xp);
        xp[i] = xi - step;
        let fm = f(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

#[derive(Clone, Debug)]
pub struct LeastSquaresResult {
    pub x: DVector<f64>,
    /// Sum of squared residuals.
    pub ssr: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg–Marquardt. `rj` returns residuals and their Jacobian (rows = residuals).
pub fn levenberg_marquardt<F>(rj: F, x0: DVector<f64>, opts: &OptimOptions) -> LeastSquaresResult
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let d = x0.len();
    let mut x = x0;
    let (mut r, mut j) = rj(&x);
    let mut ssr = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let jt = j.transpose();
        let jtj = &jt * &j;
        let grad = &jt * &r;
        if grad.amax() < opts.grad_tol * ssr.max(1e-300).sqrt().max(1e-12) || ssr < 1e-30 {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..d {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            let xn = &x + &step;
            let (rn, jn) = rj(&xn);
            let ssr_n = rn.norm_squared();
            if ssr_n.is_finite() && ssr_n < ssr {
                let rel = (ssr - ssr_n) / ssr.max(1e-300);
                let step_small = step.amax() < 1e-13 * (1.0 + x.amax());
                x = xn;
                r = rn;
                j = jn;
                ssr = ssr_n;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < opts.f_tol || step_small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // no descent possible: stationary to working precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LeastSquaresResult {
        x,
        ssr,
        iterations,
        converged,
    }
}
