//! Limited-memory BFGS with backtracking Armijo line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    /// Stop once `|grad| <= grad_tol` (times `max(1, |loss|)` when `relative_tol`).
    pub grad_tol: f64,
    pub relative_tol: bool,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iters: 500,
            grad_tol: 1e-5,
            relative_tol: true,
            memory: 10,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.memory == 0 {
            return Err(Error::InvalidConfig("memory must be at least 1".into()));
        }
        Ok(())
    }

    pub fn tolerance_at(&self, loss: f64) -> f64 {
        if self.relative_tol {
            self.grad_tol * loss.abs().max(1.0)
        } else {
            self.grad_tol
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub clamp_events: usize,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub grad_tol: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failures: usize,
    pub clamp_events: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn direction(history: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        q.iter_mut()
            .zip(&p.s)
            .for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes a smooth objective from `x0`. The iterate returned is always the
/// best accepted point; accepted losses are nonincreasing.
pub fn minimize<F>(mut objective: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    cfg.validate()?;
    let mut x = x0;
    let first = objective(&x)?;
    if !first.value.is_finite() || first.gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    let mut f = first.value;
    let mut g = first.gradient;
    let mut clamp_events = first.clamp_events;
    let mut evaluations = 1;
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut trace = vec![TraceRow {
        iteration: 0,
        loss: f,
        grad_norm: norm(&g),
    }];
    let mut failures = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        let gnorm = norm(&g);
        if gnorm <= cfg.tolerance_at(f) {
            converged = true;
            break;
        }
        let mut d = direction(&history, &g);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if history.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let eval = objective(&trial)?;
            evaluations += 1;
            if eval.value.is_finite()
                && eval.gradient.iter().all(|v| v.is_finite())
                && eval.value <= f + ARMIJO_C1 * step * slope
            {
                accepted = Some((trial, eval));
                break;
            }
            step *= 0.5;
        }

        let Some((x_new, eval)) = accepted else {
            failures += 1;
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        iterations += 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = eval.gradient.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }
        x = x_new;
        f = eval.value;
        g = eval.gradient;
        clamp_events = eval.clamp_events;
        trace.push(TraceRow {
            iteration: iterations,
            loss: f,
            grad_norm: norm(&g),
        });
    }

    let grad_norm = norm(&g);
    let grad_tol = cfg.tolerance_at(f);
    if !converged && grad_norm <= grad_tol {
        converged = true;
    }
    Ok(Minimum {
        x,
        value: f,
        grad_norm,
        grad_tol,
        iterations,
        converged,
        line_search_failures: failures,
        clamp_events,
        evaluations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let value = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let gradient = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok(Evaluation {
            value,
            gradient,
            clamp_events: 0,
        })
    }

    #[test]
    fn solves_rosenbrock() {
        let cfg = LbfgsConfig {
            max_iters: 1000,
            grad_tol: 1e-8,
            relative_tol: false,
            memory: 7,
        };
        let m = minimize(rosenbrock, vec![-1.2, 1.0], &cfg).unwrap();
        assert!(m.converged);
        assert!(
            (m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6,
            "{:?}",
            m.x
        );
        for w in m.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn quadratic_in_few_steps() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let f = |x: &[f64]| {
            Ok(Evaluation {
                value: x.iter().zip(&diag).map(|(v, d)| 0.5 * d * v * v).sum(),
                gradient: x.iter().zip(&diag).map(|(v, d)| d * v).collect(),
                clamp_events: 0,
            })
        };
        let cfg = LbfgsConfig {
            grad_tol: 1e-10,
            relative_tol: false,
            ..Default::default()
        };
        let m = minimize(f, vec![1.0; 4], &cfg).unwrap();
        assert!(m.converged);
        assert!(m.iterations < 50);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64]| {
            Ok(Evaluation {
                value: f64::NAN,
                gradient: vec![0.0],
                clamp_events: 0,
            })
        };
        assert!(matches!(
            minimize(f, vec![0.0], &LbfgsConfig::default()),
            Err(Error::NonFiniteLoss)
        ));
    }
}
