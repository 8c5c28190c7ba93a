// SPDX-License-Identifier: MIT OR Apache-2.0

//! Limited-memory BFGS for smooth unconstrained minimisation.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    /// History length.
    pub memory: usize,
    /// Stop when `max |g_i| <= gtol`.
    pub gtol: f64,
    /// Stop when the relative decrease of f falls below this.
    pub ftol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            memory: 10,
            gtol: 1e-6,
            ftol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimises `f` starting from `x0`. `fg(x, grad)` returns f(x) and writes
/// the gradient into `grad`.
pub fn minimize<F>(mut fg: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];

    for iter in 0..opts.max_iter {
        if inf_norm(&g) <= opts.gtol {
            return LbfgsResult {
                x,
                f,
                iterations: iter,
                converged: true,
            };
        }

        // Two-loop recursion: d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        for (i, (s, y, rho)) in hist.iter().enumerate().rev() {
            alpha[i] = rho * dot(s, &d);
            for (dj, yj) in d.iter_mut().zip(y) {
                *dj -= alpha[i] * yj;
            }
        }
        let gamma = hist
            .back()
            .map_or(1.0 / inf_norm(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        d.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, y, rho)) in hist.iter().enumerate() {
            let beta = rho * dot(y, &d);
            for (dj, sj) in d.iter_mut().zip(s) {
                *dj += (alpha[i] - beta) * sj;
            }
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            hist.clear();
            d = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        // Backtracking line search with the Armijo condition.
        let mut step = 1.0;
        let mut f_new;
        loop {
            for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&d) {
                *xn = xi + step * di;
            }
            f_new = fg(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return LbfgsResult {
                    x,
                    f,
                    iterations: iter,
                    converged: inf_norm(&g) <= opts.gtol,
                };
            }
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(1e-300) {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        if decrease <= opts.ftol * f.abs().max(1.0) {
            return LbfgsResult {
                x,
                f,
                iterations: iter + 1,
                converged: true,
            };
        }
    }
    let converged = inf_norm(&g) <= opts.gtol;
    LbfgsResult {
        x,
        f,
        iterations: opts.max_iter,
        converged,
    }
}
