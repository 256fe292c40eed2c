//! Limited-memory BFGS minimizer with a strong-Wolfe line search.

/// Objective: fills `grad` and returns the function value. Non-finite
/// values are treated as out-of-domain and rejected by the line search.
pub(crate) trait Objective {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective for F {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Status {
    GradConverged,
    /// Objective improvement stayed below `f_rel_tol` for `f_stall_iters`
    /// consecutive iterations; the iterate is at the optimizer's numeric
    /// floor.
    FtolConverged,
    MaxIters,
    LineSearchFailed,
}

pub(crate) struct Options {
    pub memory: usize,
    pub max_iters: usize,
    /// Convergence when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Relative objective improvement counting as progress.
    pub f_rel_tol: f64,
    /// Consecutive no-progress iterations before stopping.
    pub f_stall_iters: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 1000,
            grad_tol: 1e-8,
            f_rel_tol: 1e-14,
            f_stall_iters: 20,
        }
    }
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub status: Status,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

pub(crate) fn minimize(obj: &mut dyn Objective, x0: Vec<f64>, opts: &Options) -> Outcome {
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = obj.eval(&x, &mut grad);

    let mut s_list: Vec<Vec<f64>> = Vec::with_capacity(opts.memory);
    let mut y_list: Vec<Vec<f64>> = Vec::with_capacity(opts.memory);
    let mut rho_list: Vec<f64> = Vec::with_capacity(opts.memory);
    let mut gamma = 1.0;

    let mut iterations = 0;
    let mut status = Status::MaxIters;
    let mut stall = 0usize;

    for _ in 0..opts.max_iters {
        let g_inf = inf_norm(&grad);
        if g_inf <= opts.grad_tol {
            status = Status::GradConverged;
            break;
        }
        if stall >= opts.f_stall_iters {
            status = Status::FtolConverged;
            break;
        }
        iterations += 1;

        // Two-loop recursion for the search direction.
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = vec![0.0; s_list.len()];
        for idx in (0..s_list.len()).rev() {
            let a = rho_list[idx] * dot(&s_list[idx], &dir);
            alphas[idx] = a;
            axpy(-a, &y_list[idx], &mut dir);
        }
        dir.iter_mut().for_each(|d| *d *= gamma);
        for idx in 0..s_list.len() {
            let b = rho_list[idx] * dot(&y_list[idx], &dir);
            axpy(alphas[idx] - b, &s_list[idx], &mut dir);
        }

        let mut dg = dot(&dir, &grad);
        if dg >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            s_list.clear();
            y_list.clear();
            rho_list.clear();
            gamma = 1.0;
            dir = grad.iter().map(|g| -g).collect();
            dg = dot(&dir, &grad);
        }

        match line_search(obj, &x, value, &dir, dg) {
            Some(ls) => {
                let improvement = value - ls.value;
                if improvement <= opts.f_rel_tol * value.abs().max(1.0) {
                    stall += 1;
                } else {
                    stall = 0;
                }
                let mut s = vec![0.0; n];
                let mut y = vec![0.0; n];
                for k in 0..n {
                    s[k] = ls.x[k] - x[k];
                    y[k] = ls.grad[k] - grad[k];
                }
                let sy = dot(&s, &y);
                if sy > 1e-10 * norm2(&s) * norm2(&y) {
                    if s_list.len() == opts.memory {
                        s_list.remove(0);
                        y_list.remove(0);
                        rho_list.remove(0);
                    }
                    gamma = sy / dot(&y, &y);
                    rho_list.push(1.0 / sy);
                    s_list.push(s);
                    y_list.push(y);
                }
                x = ls.x;
                grad = ls.grad;
                value = ls.value;
            }
            None => {
                status = Status::LineSearchFailed;
                break;
            }
        }
    }

    if status == Status::MaxIters && inf_norm(&grad) <= opts.grad_tol {
        status = Status::GradConverged;
    }
    Outcome {
        grad_inf_norm: inf_norm(&grad),
        x,
        iterations,
        status,
    }
}

struct LineSearchResult {
    x: Vec<f64>,
    grad: Vec<f64>,
    value: f64,
}

/// Strong Wolfe line search (bracket then zoom).
fn line_search(
    obj: &mut dyn Objective,
    x0: &[f64],
    f0: f64,
    dir: &[f64],
    dg0: f64,
) -> Option<LineSearchResult> {
    debug_assert!(dg0 < 0.0);
    let n = x0.len();
    let mut grad = vec![0.0; n];
    let mut eval_at = |t: f64, grad: &mut Vec<f64>| -> (Vec<f64>, f64, f64) {
        let xt: Vec<f64> = x0.iter().zip(dir).map(|(xi, di)| xi + t * di).collect();
        let ft = obj.eval(&xt, grad);
        let dgt = dot(grad, dir);
        (xt, ft, dgt)
    };

    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut t = 1.0;

    for iter in 0..30 {
        let (xt, ft, dgt) = eval_at(t, &mut grad);
        if !ft.is_finite() {
            // Out of domain; shrink toward the last good point.
            t = t_prev + 0.25 * (t - t_prev);
            continue;
        }
        if ft > f0 + C1 * t * dg0 || (iter > 0 && ft >= f_prev) {
            return zoom(obj, x0, f0, dg0, dir, t_prev, f_prev, dg_prev, t, ft);
        }
        if dgt.abs() <= C2 * dg0.abs() {
            return Some(LineSearchResult {
                x: xt,
                grad,
                value: ft,
            });
        }
        if dgt >= 0.0 {
            return zoom(obj, x0, f0, dg0, dir, t, ft, dgt, t_prev, f_prev);
        }
        t_prev = t;
        f_prev = ft;
        dg_prev = dgt;
        t *= 2.0;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    obj: &mut dyn Objective,
    x0: &[f64],
    f0: f64,
    dg0: f64,
    dir: &[f64],
    mut t_lo: f64,
    mut f_lo: f64,
    mut dg_lo: f64,
    mut t_hi: f64,
    mut f_hi: f64,
) -> Option<LineSearchResult> {
    let n = x0.len();
    let mut grad = vec![0.0; n];
    for _ in 0..30 {
        // Quadratic interpolation, safeguarded by bisection.
        let mut t = interpolate(t_lo, f_lo, dg_lo, t_hi, f_hi);
        let lo = t_lo.min(t_hi);
        let hi = t_lo.max(t_hi);
        let margin = 0.1 * (hi - lo);
        if !(t.is_finite()) || t < lo + margin || t > hi - margin {
            t = 0.5 * (t_lo + t_hi);
        }

        let xt: Vec<f64> = x0.iter().zip(dir).map(|(xi, di)| xi + t * di).collect();
        let ft = obj.eval(&xt, &mut grad);
        let dgt = dot(&grad, dir);

        if !ft.is_finite() || ft > f0 + C1 * t * dg0 || ft >= f_lo {
            t_hi = t;
            f_hi = if ft.is_finite() { ft } else { f64::MAX };
        } else {
            if dgt.abs() <= C2 * dg0.abs() {
                return Some(LineSearchResult {
                    x: xt,
                    grad,
                    value: ft,
                });
            }
            if dgt * (t_hi - t_lo) >= 0.0 {
                t_hi = t_lo;
                f_hi = f_lo;
            }
            t_lo = t;
            f_lo = ft;
            dg_lo = dgt;
        }
        if (t_hi - t_lo).abs() * inf_norm(dir) < 1e-16 {
            break;
        }
    }
    // Accept the best point found when it improves on the start.
    if f_lo < f0 && t_lo > 0.0 {
        let xt: Vec<f64> = x0.iter().zip(dir).map(|(xi, di)| xi + t_lo * di).collect();
        let ft = obj.eval(&xt, &mut grad);
        if ft.is_finite() && ft < f0 {
            return Some(LineSearchResult {
                x: xt,
                grad,
                value: ft,
            });
        }
    }
    None
}

fn interpolate(t_lo: f64, f_lo: f64, dg_lo: f64, t_hi: f64, f_hi: f64) -> f64 {
    // Minimizer of the quadratic through (t_lo, f_lo, dg_lo) and (t_hi, f_hi).
    let dt = t_hi - t_lo;
    let denom = 2.0 * (f_hi - f_lo - dg_lo * dt);
    if denom.abs() < 1e-300 {
        return f64::NAN;
    }
    t_lo - dg_lo * dt * dt / denom
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let mut f = |x: &[f64], g: &mut [f64]| -> f64 {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let out = minimize(&mut f, vec![-1.2, 1.0], &Options::default());
        assert_eq!(out.status, Status::GradConverged);
        assert!((out.x[0] - 1.0).abs() < 1e-6);
        assert!((out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic_with_flat_direction() {
        // f(x) = (x0 + x1 - 1)^2 has a flat valley; the optimizer should
        // stop at some point on it with a tiny gradient.
        let mut f = |x: &[f64], g: &mut [f64]| -> f64 {
            let r = x[0] + x[1] - 1.0;
            g[0] = 2.0 * r;
            g[1] = 2.0 * r;
            r * r
        };
        let out = minimize(&mut f, vec![5.0, -2.0], &Options::default());
        assert_eq!(out.status, Status::GradConverged);
        assert!((out.x[0] + out.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_out_of_domain_steps() {
        // f = -ln(x) + x is defined for x > 0 with minimum at x = 1.
        let mut f = |x: &[f64], g: &mut [f64]| -> f64 {
            if x[0] <= 0.0 {
                g[0] = f64::NAN;
                return f64::INFINITY;
            }
            g[0] = -1.0 / x[0] + 1.0;
            -x[0].ln() + x[0]
        };
        let out = minimize(&mut f, vec![3.0], &Options::default());
        assert_eq!(out.status, Status::GradConverged);
        assert!((out.x[0] - 1.0).abs() < 1e-7);
    }
}
