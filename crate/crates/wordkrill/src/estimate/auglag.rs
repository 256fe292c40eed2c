//! Joint constrained maximum likelihood via an augmented Lagrangian.
//!
//! All parameters are optimized simultaneously; the identification
//! constraints |mean theta_k| <= eps, |var theta_k - 1| <= eps and
//! |cov(theta_k, theta_l)| <= eps enter as one-sided inequalities with
//! multiplier estimates, and each outer iteration solves the smoothed
//! problem with L-BFGS. alpha of the first document is pinned to 0 and
//! excluded from the free vector.

use ndarray::{Array1, Array2};

use crate::dfm::DocumentFeatureMatrix;
use crate::model::{ll_and_gradients, FitConfig, ModelParams};
use crate::stats;

use super::lbfgs;

pub(crate) struct JointOutcome {
    pub params: ModelParams,
    pub converged: bool,
    pub iterations: usize,
    pub core_ll: f64,
}

struct Packing {
    n_docs: usize,
    n_features: usize,
    k_dims: usize,
}

impl Packing {
    fn len(&self) -> usize {
        (self.n_docs - 1)
            + self.n_features
            + self.n_features * self.k_dims
            + self.n_docs * self.k_dims
    }

    fn theta_offset(&self) -> usize {
        (self.n_docs - 1) + self.n_features + self.n_features * self.k_dims
    }

    fn pack(&self, p: &ModelParams) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend(p.alpha.iter().skip(1));
        x.extend(p.psi.iter());
        x.extend(p.beta.iter());
        x.extend(p.theta.iter());
        x
    }

    fn unpack(&self, x: &[f64]) -> ModelParams {
        let (i, j, k) = (self.n_docs, self.n_features, self.k_dims);
        let mut alpha = Array1::zeros(i);
        for d in 1..i {
            alpha[d] = x[d - 1];
        }
        let psi = Array1::from_iter(x[i - 1..i - 1 + j].iter().cloned());
        let beta = Array2::from_shape_vec(
            (j, k),
            x[i - 1 + j..i - 1 + j + j * k].to_vec(),
        )
        .expect("packed beta shape");
        let theta = Array2::from_shape_vec((i, k), x[self.theta_offset()..].to_vec())
            .expect("packed theta shape");
        ModelParams {
            alpha,
            psi,
            beta,
            theta,
        }
    }
}

/// One-sided constraint values g <= 0 in a fixed order:
/// mean+, mean-, var+, var- per dimension, then cov+, cov- per pair.
fn constraint_values(theta: &Array2<f64>, eps: f64) -> Vec<f64> {
    let k = theta.ncols();
    let mut g = Vec::with_capacity(2 * (2 * k + k * (k - 1) / 2));
    for d in 0..k {
        let m = stats::mean(theta.column(d));
        g.push(m - eps);
        g.push(-m - eps);
    }
    for d in 0..k {
        let v = stats::sample_var(theta.column(d));
        g.push(v - 1.0 - eps);
        g.push(-(v - 1.0) - eps);
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let c = stats::sample_cov(theta.column(a), theta.column(b));
            g.push(c - eps);
            g.push(-c - eps);
        }
    }
    g
}

pub(crate) fn fit_joint(
    matrix: &DocumentFeatureMatrix,
    start: ModelParams,
    config: &FitConfig,
    eps: f64,
) -> JointOutcome {
    let packing = Packing {
        n_docs: matrix.n_docs(),
        n_features: matrix.n_features(),
        k_dims: start.k_dims(),
    };
    let k = packing.k_dims;

    // Pin alpha_1 = 0 with the compensating shift into psi.
    let mut start = start;
    let shift = start.alpha[0];
    if shift != 0.0 {
        start.alpha.mapv_inplace(|v| v - shift);
        start.psi.mapv_inplace(|v| v + shift);
    }
    // Repair an infeasible start by re-standardizing theta. A start that
    // cannot be standardized is left as-is and surfaces as converged=false.
    if start.constraint_residuals().max_abs() > eps {
        let _ = stats::standardize_orthogonalize(start.theta.view_mut());
    }

    let n_constraints = 2 * (2 * k + k * (k - 1) / 2);
    let mut mu = vec![0.0f64; n_constraints];
    let mut rho = 10.0f64;
    let mut x = packing.pack(&start);

    // The inner problem is solved in curvature-scaled coordinates, where
    // gradient components approximate per-coordinate Newton decrements.
    // The tolerances below are therefore scale-free: the tight bound is
    // the convergence target, the loose bound qualifies optimizer-floor
    // terminations as stationary.
    let inner_tol = 1e-5;
    let loose_tol = 1e-2;

    let mut converged = false;
    let mut stationary = false;
    let mut total_inner = 0usize;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut prev_violation = f64::INFINITY;
    let mut stalled_outers = 0usize;

    for outer in 0..config.max_iters.max(1) {
        let scale = curvature_scale(&packing.unpack(&x), &packing);
        let x_scaled: Vec<f64> = x.iter().zip(&scale).map(|(v, s)| v / s).collect();
        let mut objective = ScaledObjective {
            inner: ALObjective {
                matrix,
                packing: &packing,
                eps,
                mu: mu.clone(),
                rho,
            },
            scale: &scale,
            buffer: vec![0.0; packing.len()],
        };
        let result = lbfgs::minimize(
            &mut objective,
            x_scaled,
            &lbfgs::Options {
                memory: 12,
                max_iters: 2000,
                grad_tol: inner_tol,
                f_rel_tol: 1e-13,
                f_stall_iters: 12,
            },
        );
        total_inner += result.iterations;
        x = result.x.iter().zip(&scale).map(|(v, s)| v * s).collect();

        let params = packing.unpack(&x);
        let residuals = params.constraint_residuals();
        let feasible = residuals.max_abs() <= eps;
        stationary = result.status == lbfgs::Status::GradConverged
            || result.grad_inf_norm <= loose_tol;
        let (core_ll, _) = ll_and_gradients(matrix, &params);
        let rel_change = (core_ll - prev_ll).abs() / (1.0 + prev_ll.abs());

        // With zero multipliers and an interior solution the smoothed
        // objective equals the plain likelihood, so a stationary feasible
        // point is already the constrained optimum.
        let multipliers_idle = mu.iter().all(|&m| m == 0.0)
            && constraint_values(&params.theta, eps).iter().all(|&g| g <= 0.0);
        if feasible && stationary && (multipliers_idle || rel_change < config.grad_tol) {
            converged = true;
            break;
        }
        // A line-search stall with no inner progress cannot be fixed by
        // multiplier updates when the iterate is already feasible.
        if result.iterations == 0 {
            stalled_outers += 1;
            if stalled_outers >= 2 {
                break;
            }
        } else {
            stalled_outers = 0;
        }
        if outer + 1 == config.max_iters.max(1) {
            break;
        }
        prev_ll = core_ll;

        let g = constraint_values(&params.theta, eps);
        let violation = g.iter().map(|&v| v.max(0.0)).fold(0.0f64, f64::max);
        for (m, &gv) in mu.iter_mut().zip(&g) {
            *m = (*m + rho * gv).max(0.0);
        }
        if violation > 0.25 * prev_violation {
            rho = (rho * 10.0).min(1e8);
        }
        prev_violation = violation;
    }

    let params = packing.unpack(&x);
    let (core_ll, _) = ll_and_gradients(matrix, &params);
    JointOutcome {
        converged: converged && stationary,
        iterations: total_inner,
        core_ll,
        params,
    }
}

/// Per-coordinate scale factors 1/sqrt(diagonal curvature) of the
/// likelihood at the given parameters. Optimizing in these coordinates
/// makes the inner problem approximately isotropic.
fn curvature_scale(params: &ModelParams, packing: &Packing) -> Vec<f64> {
    let (i_n, j_n, k) = (packing.n_docs, packing.n_features, packing.k_dims);
    let mut d_alpha = vec![0.0f64; i_n];
    let mut d_psi = vec![0.0f64; j_n];
    let mut d_beta = vec![0.0f64; j_n * k];
    let mut d_theta = vec![0.0f64; i_n * k];
    for i in 0..i_n {
        for j in 0..j_n {
            let lambda = crate::model::log_rate(params, i, j).exp();
            let lambda = if lambda.is_finite() { lambda } else { f64::MAX / 1e10 };
            d_alpha[i] += lambda;
            d_psi[j] += lambda;
            for d in 0..k {
                d_beta[j * k + d] += params.theta[[i, d]] * params.theta[[i, d]] * lambda;
                d_theta[i * k + d] += params.beta[[j, d]] * params.beta[[j, d]] * lambda;
            }
        }
    }
    let mut scale = Vec::with_capacity(packing.len());
    let to_scale = |d: f64| 1.0 / d.max(1e-6).sqrt();
    scale.extend(d_alpha.iter().skip(1).map(|&d| to_scale(d)));
    scale.extend(d_psi.iter().map(|&d| to_scale(d)));
    scale.extend(d_beta.iter().map(|&d| to_scale(d)));
    scale.extend(d_theta.iter().map(|&d| to_scale(d)));
    scale
}

/// Adapter optimizing in scaled coordinates x_scaled = x / scale.
struct ScaledObjective<'a> {
    inner: ALObjective<'a>,
    scale: &'a [f64],
    buffer: Vec<f64>,
}

impl lbfgs::Objective for ScaledObjective<'_> {
    fn eval(&mut self, x_scaled: &[f64], grad: &mut [f64]) -> f64 {
        for ((b, v), s) in self.buffer.iter_mut().zip(x_scaled).zip(self.scale) {
            *b = v * s;
        }
        let buffer = std::mem::take(&mut self.buffer);
        let f = lbfgs::Objective::eval(&mut self.inner, &buffer, grad);
        self.buffer = buffer;
        for (g, s) in grad.iter_mut().zip(self.scale) {
            *g *= s;
        }
        f
    }
}

struct ALObjective<'a> {
    matrix: &'a DocumentFeatureMatrix,
    packing: &'a Packing,
    eps: f64,
    mu: Vec<f64>,
    rho: f64,
}

impl lbfgs::Objective for ALObjective<'_> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let params = self.packing.unpack(x);
        let (core_ll, g) = ll_and_gradients(self.matrix, &params);
        if !core_ll.is_finite() {
            grad.fill(f64::NAN);
            return f64::INFINITY;
        }

        // Negative likelihood and its gradient (alpha_1 excluded).
        let mut value = -core_ll;
        let (i, j, k) = (
            self.packing.n_docs,
            self.packing.n_features,
            self.packing.k_dims,
        );
        for d in 1..i {
            grad[d - 1] = -g.alpha[d];
        }
        for (slot, v) in grad[i - 1..i - 1 + j].iter_mut().zip(g.psi.iter()) {
            *slot = -v;
        }
        for (slot, v) in grad[i - 1 + j..i - 1 + j + j * k]
            .iter_mut()
            .zip(g.beta.iter())
        {
            *slot = -v;
        }
        let t_off = self.packing.theta_offset();
        for (slot, v) in grad[t_off..].iter_mut().zip(g.theta.iter()) {
            *slot = -v;
        }

        // Augmented Lagrangian terms for the one-sided constraints.
        let theta = &params.theta;
        let n = i as f64;
        let gvals = constraint_values(theta, self.eps);
        let mut active = Vec::with_capacity(gvals.len());
        for (idx, &gv) in gvals.iter().enumerate() {
            let t = self.mu[idx] + self.rho * gv;
            let t_pos = t.max(0.0);
            value += (t_pos * t_pos - self.mu[idx] * self.mu[idx]) / (2.0 * self.rho);
            active.push(t_pos);
        }

        // Gradient contributions: d/dtheta of mean, variance, covariance.
        let mut idx = 0;
        let means: Vec<f64> = (0..k).map(|d| stats::mean(theta.column(d))).collect();
        for d in 0..k {
            let w = active[idx] - active[idx + 1];
            idx += 2;
            if w != 0.0 {
                for row in 0..i {
                    grad[t_off + row * k + d] += w / n;
                }
            }
        }
        for d in 0..k {
            let w = active[idx] - active[idx + 1];
            idx += 2;
            if w != 0.0 {
                for row in 0..i {
                    grad[t_off + row * k + d] +=
                        w * 2.0 * (theta[[row, d]] - means[d]) / (n - 1.0);
                }
            }
        }
        for a in 0..k {
            for b in (a + 1)..k {
                let w = active[idx] - active[idx + 1];
                idx += 2;
                if w != 0.0 {
                    for row in 0..i {
                        grad[t_off + row * k + a] +=
                            w * (theta[[row, b]] - means[b]) / (n - 1.0);
                        grad[t_off + row * k + b] +=
                            w * (theta[[row, a]] - means[a]) / (n - 1.0);
                    }
                }
            }
        }
        value
    }
}
