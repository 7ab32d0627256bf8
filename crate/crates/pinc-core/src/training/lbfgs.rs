//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The implementation follows the classical bracket-and-zoom scheme with
//! safeguarded cubic interpolation. Accepted steps satisfy both the Armijo
//! and the strong curvature condition, so the objective strictly decreases
//! along accepted iterations; a search that exhausts its evaluation budget
//! reports failure and leaves the iterate untouched, letting the caller end
//! the phase gracefully.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    /// Number of curvature pairs retained.
    pub memory: usize,
    /// Armijo (sufficient decrease) constant.
    pub c1: f64,
    /// Strong curvature constant.
    pub c2: f64,
    /// Total objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.memory == 0 {
            return Err("lbfgs memory must be at least 1".into());
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(format!(
                "wolfe constants must satisfy 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            ));
        }
        if self.max_line_search == 0 {
            return Err("lbfgs line search needs at least one trial".into());
        }
        Ok(())
    }
}

/// Result of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsOutcome {
    /// Moved to a strong-Wolfe point.
    Stepped { evals: usize },
    /// No acceptable step within the evaluation budget; iterate unchanged.
    LineSearchFailed { evals: usize },
    /// Gradient is exactly zero; nothing to do.
    Stationary,
}

struct Probe {
    alpha: f64,
    x: Array1<f64>,
    f: f64,
    g: Array1<f64>,
    dphi: f64,
}

/// Optimizer state: current iterate plus the curvature-pair history.
pub struct Lbfgs {
    config: LbfgsConfig,
    /// (s, y, 1/(s.y)) pairs, oldest first.
    pairs: VecDeque<(Array1<f64>, Array1<f64>, f64)>,
    x: Array1<f64>,
    f: f64,
    g: Array1<f64>,
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig, x: Array1<f64>, f: f64, g: Array1<f64>) -> Self {
        Lbfgs {
            config,
            pairs: VecDeque::new(),
            x,
            f,
            g,
        }
    }

    pub fn x(&self) -> &Array1<f64> {
        &self.x
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn grad(&self) -> &Array1<f64> {
        &self.g
    }

    fn direction(&self) -> Array1<f64> {
        two_loop_direction(&self.pairs, &self.g)
    }

    /// One outer iteration against `objective`, which returns the value and
    /// gradient at a trial point.
    pub fn iterate<E, F>(&mut self, objective: &mut F) -> Result<LbfgsOutcome, E>
    where
        F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>), E>,
    {
        let mut d = self.direction();
        let mut d0 = d.dot(&self.g);
        if d0 >= 0.0 {
            // Curvature history is stale; restart from steepest descent.
            self.pairs.clear();
            d = -&self.g;
            d0 = d.dot(&self.g);
            if d0 == 0.0 {
                return Ok(LbfgsOutcome::Stationary);
            }
        }

        match self.strong_wolfe(objective, &d, d0)? {
            Some((probe, evals)) => {
                let s = &probe.x - &self.x;
                let yv = &probe.g - &self.g;
                let sy = s.dot(&yv);
                let s_norm = s.dot(&s).sqrt();
                let y_norm = yv.dot(&yv).sqrt();
                if sy > 1e-10 * s_norm * y_norm {
                    if self.pairs.len() == self.config.memory {
                        self.pairs.pop_front();
                    }
                    self.pairs.push_back((s, yv, 1.0 / sy));
                }
                self.x = probe.x;
                self.f = probe.f;
                self.g = probe.g;
                Ok(LbfgsOutcome::Stepped { evals })
            }
            None => Ok(LbfgsOutcome::LineSearchFailed {
                evals: self.config.max_line_search,
            }),
        }
    }

    fn probe<E, F>(
        &self,
        objective: &mut F,
        d: &Array1<f64>,
        alpha: f64,
    ) -> Result<Probe, E>
    where
        F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>), E>,
    {
        let x = &self.x + &(d * alpha);
        let (f, g) = objective(&x)?;
        let dphi = g.dot(d);
        Ok(Probe {
            alpha,
            x,
            f,
            g,
            dphi,
        })
    }

    /// Bracketing phase of the strong-Wolfe search.
    fn strong_wolfe<E, F>(
        &self,
        objective: &mut F,
        d: &Array1<f64>,
        d0: f64,
    ) -> Result<Option<(Probe, usize)>, E>
    where
        F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>), E>,
    {
        let LbfgsConfig {
            c1,
            c2,
            max_line_search,
            ..
        } = self.config;
        let f0 = self.f;
        let mut evals = 0;

        let mut prev = Probe {
            alpha: 0.0,
            x: self.x.clone(),
            f: f0,
            g: self.g.clone(),
            dphi: d0,
        };
        let mut alpha = 1.0;
        let mut first = true;
        loop {
            if evals >= max_line_search {
                return Ok(None);
            }
            let cur = self.probe(objective, d, alpha)?;
            evals += 1;
            if !cur.f.is_finite() {
                // Overshot into a bad region; treat as an upper bracket.
                return self.zoom(objective, d, d0, prev, cur, evals);
            }
            if cur.f > f0 + c1 * cur.alpha * d0 || (!first && cur.f >= prev.f) {
                return self.zoom(objective, d, d0, prev, cur, evals);
            }
            if cur.dphi.abs() <= -c2 * d0 {
                return Ok(Some((cur, evals)));
            }
            if cur.dphi >= 0.0 {
                return self.zoom(objective, d, d0, cur, prev, evals);
            }
            alpha = cur.alpha * 2.0;
            prev = cur;
            first = false;
        }
    }

    /// Interval refinement (zoom) phase; `lo` always satisfies the Armijo
    /// condition with the lowest value seen.
    fn zoom<E, F>(
        &self,
        objective: &mut F,
        d: &Array1<f64>,
        d0: f64,
        mut lo: Probe,
        mut hi: Probe,
        mut evals: usize,
    ) -> Result<Option<(Probe, usize)>, E>
    where
        F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>), E>,
    {
        let LbfgsConfig {
            c1,
            c2,
            max_line_search,
            ..
        } = self.config;
        let f0 = self.f;
        while evals < max_line_search {
            let width = (hi.alpha - lo.alpha).abs();
            if width < 1e-16 * lo.alpha.abs().max(1.0) {
                return Ok(None);
            }
            let alpha = safeguarded_cubic(&lo, &hi);
            let cand = self.probe(objective, d, alpha)?;
            evals += 1;
            if !cand.f.is_finite() || cand.f > f0 + c1 * cand.alpha * d0 || cand.f >= lo.f {
                hi = cand;
            } else {
                if cand.dphi.abs() <= -c2 * d0 {
                    return Ok(Some((cand, evals)));
                }
                if cand.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cand;
            }
        }
        Ok(None)
    }
}

/// Two-loop recursion: the quasi-Newton direction -H.g from (s, y, 1/(s.y))
/// pairs ordered oldest first, with the gamma-scaled initial Hessian
/// approximation. Shared by the unconstrained optimizer here and the
/// projected variant in the controller.
pub(crate) fn two_loop_direction(
    pairs: &VecDeque<(Array1<f64>, Array1<f64>, f64)>,
    g: &Array1<f64>,
) -> Array1<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = s.dot(y) / y.dot(y);
        q *= gamma;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.scaled_add(a - b, s);
    }
    -q
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), pulled back
/// to bisection when the fit is degenerate or lands outside the safe
/// interior of the bracket.
fn safeguarded_cubic(lo: &Probe, hi: &Probe) -> f64 {
    let (a, fa, da) = (lo.alpha, lo.f, lo.dphi);
    let (b, fb, db) = (hi.alpha, hi.f, hi.dphi);
    let bisect = 0.5 * (a + b);
    if !(fa.is_finite() && fb.is_finite() && da.is_finite() && db.is_finite()) {
        return bisect;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return bisect;
    }
    let d2 = disc.sqrt() * (b - a).signum();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return bisect;
    }
    let x = b - (b - a) * (db + d2 - d1) / denom;
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if !x.is_finite() || x < left + margin || x > right - margin {
        return bisect;
    }
    x
}
