//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Every accepted step strictly lowers the objective, so the returned point
//! is never worse than the starting point.

use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq)]
pub struct Lbfgs {
    /// Number of `(s, y)` correction pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once `(f_old − f_new) / max(|f_old|, 1e-300)` drops below this.
    pub rel_tolerance: f64,
    pub max_backtracks: usize,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Lbfgs {
            memory: 10,
            max_iters: 1000,
            rel_tolerance: 1e-6,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step along the search or steepest-descent direction lowered the
    /// objective; the point is stationary to working precision.
    LineSearchExhausted,
    ZeroGradient,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

/// The objective (or its gradient) was not finite at the starting point.
/// Holds the first offending coordinate, if the gradient identified one.
#[derive(Clone, Debug, PartialEq)]
pub struct NonFinite {
    pub coordinate: Option<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    /// Minimizes `f`, which returns the value and writes the gradient.
    pub fn minimize<F>(&self, x0: Vec<f64>, mut f: F) -> Result<Minimum, NonFinite>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let n = x0.len();
        let mut x = x0;
        let mut g = vec![0.0; n];
        let mut fx = f(&x, &mut g);
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(NonFinite {
                coordinate: g
                    .iter()
                    .position(|v| !v.is_finite())
                    .or_else(|| x.iter().position(|v| !v.is_finite())),
            });
        }
        let mut trace = vec![fx];
        let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(self.memory);
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut iterations = 0;

        let termination = loop {
            if iterations >= self.max_iters {
                break Termination::MaxIterations;
            }
            if g.iter().all(|v| *v == 0.0) {
                break Termination::ZeroGradient;
            }

            let mut dir = self.direction(&g, &pairs);
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) {
                pairs.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = dot(&g, &dir);
            }

            let accepted = match self.line_search(&mut f, &x, fx, &dir, slope, &mut x_new, &mut g_new) {
                Some(v) => Some(v),
                None if !pairs.is_empty() => {
                    // retry once along steepest descent with fresh memory
                    pairs.clear();
                    dir = g.iter().map(|v| -v).collect();
                    slope = dot(&g, &dir);
                    self.line_search(&mut f, &x, fx, &dir, slope, &mut x_new, &mut g_new)
                }
                None => None,
            };
            let Some(f_new) = accepted else {
                break Termination::LineSearchExhausted;
            };
            iterations += 1;

            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                if pairs.len() == self.memory {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }

            let decrease = (fx - f_new) / fx.abs().max(1e-300);
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut g, &mut g_new);
            fx = f_new;
            trace.push(fx);
            if decrease < self.rel_tolerance {
                break Termination::Converged;
            }
        };

        Ok(Minimum {
            x,
            value: fx,
            iterations,
            trace,
            termination,
        })
    }

    /// Two-loop recursion: `−H·g` for the implicit inverse Hessian `H`.
    fn direction(&self, g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let scale = match pairs.back() {
            Some((_, y, rho)) => 1.0 / (rho * dot(y, y)),
            None => 1.0 / dot(g, g).sqrt().max(1.0),
        };
        for qi in q.iter_mut() {
            *qi *= scale;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    #[allow(clippy::too_many_arguments)]
    fn line_search<F>(
        &self,
        f: &mut F,
        x: &[f64],
        fx: f64,
        dir: &[f64],
        slope: f64,
        x_new: &mut [f64],
        g_new: &mut [f64],
    ) -> Option<f64>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        const ARMIJO: f64 = 1e-4;
        let mut step = 1.0;
        for _ in 0..self.max_backtracks {
            for ((xn, xi), di) in x_new.iter_mut().zip(x).zip(dir) {
                *xn = xi + step * di;
            }
            let value = f(x_new, g_new);
            if value.is_finite()
                && value < fx
                && value <= fx + ARMIJO * step * slope
                && g_new.iter().all(|v| v.is_finite())
            {
                return Some(value);
            }
            step *= 0.5;
        }
        None
    }
}
