//! Central finite-difference oracle for analytic gradients.
//!
//! The checked function is rebuilt on a fresh branch-tracking [`Graph`] for
//! every perturbation. When a perturbation flips a discrete decision (a relu
//! sign, a pooling winner, a rank bucket) the step is shrunk; if the branch
//! still moves, the coordinate sits on a kink and is reported as skipped
//! rather than compared.

pub mod suite;

use std::cmp::Ordering;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::parallel::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// How many times the step may shrink by 10x when a branch flips.
    pub step_refinements: u32,
    pub exec: Exec,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            step_refinements: 3,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates whose perturbation kept crossing a kink.
    pub skipped: usize,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error <= tol
    }

    fn absorb(&mut self, c: Coordinate) {
        self.checked += 1;
        if !c.rel_error.is_finite() {
            self.non_finite = true;
        }
        let worse = match &self.worst {
            None => true,
            // NaN counts as worse than anything
            Some(w) => !matches!(
                c.rel_error.partial_cmp(&w.rel_error),
                Some(Ordering::Less | Ordering::Equal)
            ),
        };
        if worse {
            self.max_rel_error = if c.rel_error.is_finite() {
                c.rel_error
            } else {
                f64::INFINITY
            };
            self.worst = Some(c);
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.skipped += other.skipped;
        let checked = self.checked + other.checked;
        self.non_finite |= other.non_finite;
        if let Some(w) = other.worst {
            self.absorb(w);
        }
        self.checked = checked;
        self
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel error {:.3e} over {} coords ({} skipped at kinks)",
            self.max_rel_error, self.checked, self.skipped
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst input {} index {}: analytic {:.6e} vs numeric {:.6e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        if self.non_finite {
            write!(f, "; NON-FINITE values encountered")?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&g, &vars)?;
    let value = g.value(root).item();
    Ok((value, g.branch_digest()))
}

/// Max relative gradient error of `f` at `inputs` with central step `h`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    finite_diff_check_with(
        f,
        inputs,
        &CheckOptions {
            step: h,
            ..CheckOptions::default()
        },
    )
}

pub fn finite_diff_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);
    check_analytic(f, inputs, &analytic, opts)
}

/// Compares externally computed gradients (e.g. from a 32-bit graph) with
/// central differences of `f`.
pub fn check_analytic<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: &CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let (_, base_digest) = evaluate(&f, inputs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        match opts.max_coords_per_input {
            Some(cap) if cap < n => {
                let mut picked = sample(&mut rng, n, cap).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|j| (i, j)));
            }
            _ => coords.extend((0..n).map(|j| (i, j))),
        }
    }

    let results = opts.exec.map(coords.len(), |c| -> Result<Option<Coordinate>> {
        let (input, index) = coords[c];
        let mut h = opts.step;
        for _ in 0..=opts.step_refinements {
            let mut plus = inputs.to_vec();
            plus[input].data_mut()[index] += h;
            let mut minus = inputs.to_vec();
            minus[input].data_mut()[index] -= h;
            let (fp, dp) = evaluate(&f, &plus)?;
            let (fm, dm) = evaluate(&f, &minus)?;
            if dp == base_digest && dm == base_digest {
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[input].data()[index];
                let rel_error = (a - numeric).abs() / numeric.abs().max(1.0);
                return Ok(Some(Coordinate {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: if rel_error.is_nan() { f64::INFINITY } else { rel_error },
                }));
            }
            h /= 10.0;
        }
        Ok(None)
    });

    let mut report = GradCheckReport::default();
    for r in results {
        match r? {
            Some(c) => report.absorb(c),
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_closed_form() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report}");
    }

    #[test]
    fn wrong_gradient_names_worst_coordinate() {
        // detach hides the second factor from autodiff, so analytic = x while numeric = 2x
        let x = Tensor::from_f64(&[3], &[0.2, 0.9, 0.4]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let d = g.detach(v[0]);
                let sq = g.mul(v[0], d)?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(!report.passes(1e-4));
        let worst = report.worst.clone().unwrap();
        assert_eq!((worst.input, worst.index), (0, 1));
        assert!(report.to_string().contains("index 1"));
    }

    #[test]
    fn nan_is_reported() {
        let x = Tensor::from_f64(&[1], &[-1.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                // 0 * inf
                let big = g.scale(v[0], f64::INFINITY);
                let z = g.scale(big, 0.0);
                Ok(g.sum(z))
            },
            &[x],
            1e-5,
        );
        let report = report.unwrap();
        assert!(report.non_finite);
        assert!(!report.passes(1.0));
    }

    #[test]
    fn kinks_are_refined_or_skipped() {
        // relu exactly at its kink: every step crosses, so the coordinate is skipped
        let x = Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap();
        let report = finite_diff_check(|g, v| Ok(g.sum(g.relu(v[0]))), &[x], 1e-5).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passes(1e-8));
    }
}
