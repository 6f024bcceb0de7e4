//! Finite-sum objectives `f(x) = (1/n) Σᵢ fᵢ(x)` and their gradient oracles.
//!
//! A stochastic gradient is expressed through a [`SamplingVector`] `v` with
//! `E[vᵢ] = 1`, giving the unbiased estimator `g(x) = (1/n) Σᵢ vᵢ ∇fᵢ(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Exact metadata attached to a problem instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemStats {
    /// Per-component smoothness constants `Lᵢ`.
    pub l_i: Vec<f64>,
    /// `max_i Lᵢ`.
    pub l_max: f64,
    /// Smoothness constant of the full objective `f` (never larger than `l_max`).
    pub l_full: Option<f64>,
    /// PL constant of `f`.
    pub mu: Option<f64>,
    pub x_star: Option<Vec<f64>>,
    pub f_star: Option<f64>,
    /// `(1/n) Σᵢ (fᵢ(x*) − fᵢ*)`.
    pub sigma_star: Option<f64>,
    /// `(1/n) Σᵢ ‖∇fᵢ(x*)‖²`.
    pub sigma_one: Option<f64>,
    /// Infimum of `f`.
    pub f_inf: Option<f64>,
    /// Set when the regularized Hessian was singular and `x*`, `mu` were omitted.
    #[serde(default)]
    pub singular_hessian: bool,
}

impl ProblemStats {
    pub fn from_smoothness(l_i: Vec<f64>) -> Self {
        let l_max = l_i.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ProblemStats {
            l_i,
            l_max,
            ..Default::default()
        }
    }

    /// Reference value for suboptimality: `f*` when known, else `f^inf`.
    pub fn f_ref(&self) -> Option<f64> {
        self.f_star.or(self.f_inf)
    }
}

/// A realized sampling vector.
///
/// Stored sparse: components not listed have `vᵢ = 0`. The full batch (all
/// `vᵢ = 1`) has its own variant so that an `n`-long index list is never
/// mistaken for a sparse draw.
#[derive(Clone, Debug, PartialEq)]
pub enum SamplingVector {
    Full,
    Sparse { indices: Vec<usize>, weights: Vec<f64> },
}

impl SamplingVector {
    pub fn single(index: usize, weight: f64) -> Self {
        SamplingVector::Sparse {
            indices: vec![index],
            weights: vec![weight],
        }
    }

    pub fn sparse(indices: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if indices.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(
                "sampling weight",
                format!("weights must be finite and strictly positive, got {w}"),
            ));
        }
        Ok(SamplingVector::Sparse { indices, weights })
    }

    /// Dense form `v ∈ ℝⁿ`.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        match self {
            SamplingVector::Full => vec![1.0; n],
            SamplingVector::Sparse { indices, weights } => {
                let mut v = vec![0.0; n];
                for (&i, &w) in indices.iter().zip(weights) {
                    v[i] += w;
                }
                v
            }
        }
    }
}

/// A finite-sum objective with per-component value and gradient oracles.
///
/// Implementations are immutable after construction and shared freely across
/// threads.
pub trait FiniteSum: Send + Sync {
    fn n(&self) -> usize;
    fn dim(&self) -> usize;
    fn component_value(&self, i: usize, x: &[f64]) -> f64;
    /// `out += scale * ∇fᵢ(x)`.
    fn add_component_grad(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]);
    fn stats(&self) -> &ProblemStats;

    fn component_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_component_grad(i, x, 1.0, &mut out);
        out
    }
}

fn check_dim<P: FiniteSum + ?Sized>(problem: &P, x: &[f64]) -> Result<()> {
    if x.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `f(x) = (1/n) Σᵢ fᵢ(x)`.
pub fn eval_loss<P: FiniteSum + ?Sized>(problem: &P, x: &[f64]) -> Result<f64> {
    check_dim(problem, x)?;
    let mut sum = 0.0;
    for i in 0..problem.n() {
        let v = problem.component_value(i, x);
        if !v.is_finite() {
            return Err(Error::NumericOverflow { component: i });
        }
        sum += v;
    }
    let f = sum / problem.n() as f64;
    if !f.is_finite() {
        return Err(Error::NumericOverflow { component: problem.n() - 1 });
    }
    Ok(f)
}

/// `∇f(x) = (1/n) Σᵢ ∇fᵢ(x)`.
pub fn grad_full<P: FiniteSum + ?Sized>(problem: &P, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; problem.dim()];
    grad_full_into(problem, x, &mut out)?;
    Ok(out)
}

pub fn grad_full_into<P: FiniteSum + ?Sized>(problem: &P, x: &[f64], out: &mut [f64]) -> Result<()> {
    check_dim(problem, x)?;
    out.fill(0.0);
    for i in 0..problem.n() {
        problem.add_component_grad(i, x, 1.0, out);
    }
    let inv_n = 1.0 / problem.n() as f64;
    out.iter_mut().for_each(|g| *g *= inv_n);
    if !linalg::all_finite(out) {
        return Err(offending_component(problem, x, 0..problem.n()));
    }
    Ok(())
}

/// `g(x) = (1/n) Σ_{i ∈ v} vᵢ ∇fᵢ(x)`; the full batch is exactly [`grad_full`].
pub fn grad_stoch<P: FiniteSum + ?Sized>(
    problem: &P,
    x: &[f64],
    v: &SamplingVector,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; problem.dim()];
    grad_stoch_into(problem, x, v, &mut out)?;
    Ok(out)
}

pub fn grad_stoch_into<P: FiniteSum + ?Sized>(
    problem: &P,
    x: &[f64],
    v: &SamplingVector,
    out: &mut [f64],
) -> Result<()> {
    match v {
        SamplingVector::Full => grad_full_into(problem, x, out),
        SamplingVector::Sparse { indices, weights } => {
            check_dim(problem, x)?;
            let n = problem.n();
            if let Some(&index) = indices.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { index, n });
            }
            out.fill(0.0);
            let nf = n as f64;
            for (&i, &w) in indices.iter().zip(weights) {
                problem.add_component_grad(i, x, w / nf, out);
            }
            if !linalg::all_finite(out) {
                return Err(offending_component(problem, x, indices.iter().copied()));
            }
            Ok(())
        }
    }
}

fn offending_component<P: FiniteSum + ?Sized>(
    problem: &P,
    x: &[f64],
    candidates: impl IntoIterator<Item = usize>,
) -> Error {
    let mut last = 0;
    for i in candidates {
        last = i;
        if !linalg::all_finite(&problem.component_grad(i, x)) {
            return Error::NumericOverflow { component: i };
        }
    }
    // Every component finite on its own: the overflow happened while summing.
    Error::NumericOverflow { component: last }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// fᵢ(x) = ½ cᵢ ‖x − zᵢ‖², a tiny hand-rolled problem.
    struct Quad {
        c: Vec<f64>,
        z: Vec<Vec<f64>>,
        stats: ProblemStats,
    }

    impl Quad {
        fn new(c: Vec<f64>, z: Vec<Vec<f64>>) -> Self {
            let stats = ProblemStats::from_smoothness(c.clone());
            Quad { c, z, stats }
        }
    }

    impl FiniteSum for Quad {
        fn n(&self) -> usize {
            self.c.len()
        }
        fn dim(&self) -> usize {
            self.z[0].len()
        }
        fn component_value(&self, i: usize, x: &[f64]) -> f64 {
            let d: f64 = x.iter().zip(&self.z[i]).map(|(a, b)| (a - b) * (a - b)).sum();
            0.5 * self.c[i] * d
        }
        fn add_component_grad(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
            for ((o, a), b) in out.iter_mut().zip(x).zip(&self.z[i]) {
                *o += scale * self.c[i] * (a - b);
            }
        }
        fn stats(&self) -> &ProblemStats {
            &self.stats
        }
    }

    fn quad() -> Quad {
        Quad::new(
            vec![1.0, 2.0, 4.0],
            vec![vec![1.0, 0.0], vec![0.0, -1.0], vec![2.0, 3.0]],
        )
    }

    #[test]
    fn full_batch_stochastic_gradient_is_the_full_gradient() {
        let p = quad();
        let x = [0.3, -0.7];
        assert_eq!(grad_stoch(&p, &x, &SamplingVector::Full).unwrap(), grad_full(&p, &x).unwrap());
    }

    #[test]
    fn uniform_single_element_recovers_component_gradient() {
        let p = quad();
        let x = [0.3, -0.7];
        let v = SamplingVector::single(2, 3.0);
        assert_eq!(grad_stoch(&p, &x, &v).unwrap(), p.component_grad(2, &x));
    }

    #[test]
    fn importance_single_element_scales_by_inverse_probability() {
        let p = quad();
        let x = [0.3, -0.7];
        let prob = 0.2;
        let v = SamplingVector::single(1, 1.0 / prob);
        let g = grad_stoch(&p, &x, &v).unwrap();
        let expect: Vec<f64> = p.component_grad(1, &x).iter().map(|g| g / (3.0 * prob)).collect();
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let p = quad();
        let v = SamplingVector::single(3, 3.0);
        assert!(matches!(
            grad_stoch(&p, &[0.0, 0.0], &v),
            Err(Error::IndexOutOfRange { index: 3, n: 3 })
        ));
    }

    #[test]
    fn non_finite_loss_names_component() {
        let p = Quad::new(vec![1.0, f64::INFINITY], vec![vec![0.0], vec![1.0]]);
        assert!(matches!(eval_loss(&p, &[0.5]), Err(Error::NumericOverflow { component: 1 })));
        assert!(matches!(grad_full(&p, &[0.5]), Err(Error::NumericOverflow { component: 1 })));
    }

    #[test]
    fn sparse_vector_rejects_nonpositive_weights() {
        assert!(SamplingVector::sparse(vec![0, 1], vec![1.0, 0.0]).is_err());
        assert!(SamplingVector::sparse(vec![0], vec![1.0, 2.0]).is_err());
        let v = SamplingVector::sparse(vec![0, 2], vec![1.5, 1.5]).unwrap();
        assert_eq!(v.to_dense(3), vec![1.5, 0.0, 1.5]);
    }

    #[test]
    fn dimension_is_checked() {
        let p = quad();
        assert!(matches!(
            eval_loss(&p, &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }
}
