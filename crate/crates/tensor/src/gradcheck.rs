//! Central finite-difference checking of analytic gradients.
//!
//! Used by the test suites of this crate and of the network crate: the
//! numeric side never touches a backward closure.

use crate::error::Result;
use crate::rng::SeedRng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so exact zeros compare sanely.
    pub floor: f64,
    /// At most this many elements per leaf are probed (chosen at random).
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            floor: 1e-6,
            max_probes: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, element, analytic, numeric)` of the worst probe.
    pub worst: (usize, usize, f64, f64),
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the backward pass of `f` at `leaves` with central differences.
///
/// `f` must return a scalar. Each leaf is re-created as a trainable leaf for
/// the analytic pass, and as a plain tensor for each numeric evaluation.
pub fn check_gradients<F>(leaves: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tracked: Vec<Tensor<f64>> = leaves.iter().map(|t| t.with_requires_grad(true)).collect();
    let loss = f(&tracked)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(loss);

    let mut rng = SeedRng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        probes: 0,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > opts.max_probes {
            rng.shuffle(&mut idx);
            idx.truncate(opts.max_probes);
            idx.sort_unstable();
        }
        for &e in &idx {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[e] += delta;
                let moved = Tensor::from_vec(leaf.shape(), data)?;
                let args: Vec<Tensor<f64>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == li { moved.clone() } else { t.clone() })
                    .collect();
                no_grad(|| f(&args).map(|l| l.item()))
            };
            let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            let a = analytic[li][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.probes += 1;
            if rel > report.max_rel_error || report.probes == 1 {
                report.max_rel_error = rel;
                report.worst = (li, e, a, numeric);
            }
        }
    }
    Ok(report)
}
