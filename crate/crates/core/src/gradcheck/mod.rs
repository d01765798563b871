//! Central finite-difference verification of analytic gradients.

pub mod suite;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Which parameter elements to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Elements {
    All,
    /// Every element of tensors with at most `per_tensor` values; a seeded
    /// random subset of `per_tensor` elements otherwise.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a non-differentiable point
    /// (a ReLU kink or a max-pool winner change) and were left out.
    pub skipped: usize,
    /// `(parameter index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Vec<f64>, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).data().to_vec(), tape.activation_pattern()))
}

/// Cotangent for a given output shape.
type SeedFn<'a> = &'a dyn Fn(&[usize]) -> Vec<f64>;

/// Output values, the cotangent used and one gradient per parameter.
type Evaluation = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output values of `f` and the gradients of `<seed, f>` at `params`, using
/// `prepare` to configure the tape (for example to inject a fault). A `None`
/// seed requires a scalar output.
fn analytic<F>(
    f: &F,
    params: &[Tensor<f64>],
    seed: Option<SeedFn>,
    prepare: impl FnOnce(&mut Tape<f64>),
) -> Result<Evaluation>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).data().to_vec();
    let cotangent = match seed {
        Some(make) => make(tape.shape(out)),
        None if value.len() == 1 => vec![1.0],
        None => return Err(Error::NonScalarLoss(tape.shape(out).to_vec())),
    };
    tape.backward_with(out, &cotangent)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, cotangent, grads))
}

/// Analytic gradients of the scalar `f` at `params`.
pub fn analytic_gradients<F>(
    f: &F,
    params: &[Tensor<f64>],
    prepare: impl FnOnce(&mut Tape<f64>),
) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (value, _, grads) = analytic(f, params, None, prepare)?;
    Ok((value[0], grads))
}

/// Compares analytic gradients of the scalar `f` against
/// `(f(θ + h) - f(θ - h)) / 2h` for the selected parameter elements.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, elements: Elements) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, h, elements, |_| {})
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    elements: Elements,
    prepare: impl FnOnce(&mut Tape<f64>),
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check(&f, params, h, elements, None, prepare)
}

/// Checks the vector-Jacobian product of a tensor-valued `f` against finite
/// differences of `<r, f>`, where `r` is a seeded random upstream gradient.
/// Only the ops inside `f` are exercised.
pub fn vjp_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    elements: Elements,
    cotangent_seed: u64,
    prepare: impl FnOnce(&mut Tape<f64>),
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let make = move |shape: &[usize]| {
        let mut rng = ChaCha8Rng::seed_from_u64(cotangent_seed);
        let n: usize = shape.iter().product();
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    check(&f, params, h, elements, Some(&make), prepare)
}

fn check<F>(
    f: &F,
    params: &[Tensor<f64>],
    h: f64,
    elements: Elements,
    seed: Option<SeedFn>,
    prepare: impl FnOnce(&mut Tape<f64>),
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (base, cotangent, grads) = analytic(f, params, seed, prepare)?;
    let (again, pattern) = evaluate(f, params)?;
    let same_bits = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let (third, third_pattern) = evaluate(f, params)?;
    if !same_bits(&base, &again) || !same_bits(&again, &third) || pattern != third_pattern {
        return Err(Error::NonDeterministic("repeated evaluations differ".into()));
    }

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        let numel = params[pi].numel();
        let picks: Vec<usize> = match elements {
            Elements::Sampled { per_tensor, seed } if numel > per_tensor => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e37_79b9));
                let mut idx = sample(&mut rng, numel, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        for e in picks {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let (plus, p_plus) = evaluate(f, &work)?;
            work[pi].data_mut()[e] = orig - h;
            let (minus, p_minus) = evaluate(f, &work)?;
            work[pi].data_mut()[e] = orig;
            if p_plus != pattern || p_minus != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (dot(&cotangent, &plus) - dot(&cotangent, &minus)) / (2.0 * h);
            let err = relative_error(grad[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let params = vec![Tensor::from_f64([3], &[0.3, -1.2, 2.5]).unwrap()];
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.scale(sq, 1.7);
                Ok(tape.sum(s))
            },
            &params,
            DEFAULT_STEP,
            Elements::All,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn kinks_are_skipped_not_counted() {
        let params = vec![Tensor::from_f64([2], &[1e-7, 0.5]).unwrap()];
        let report = grad_check(
            |tape, v| {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
            &params,
            DEFAULT_STEP,
            Elements::All,
        )
        .unwrap();
        assert_eq!((report.checked, report.skipped), (1, 1));
    }

    #[test]
    fn unseeded_randomness_is_rejected() {
        let counter = std::cell::Cell::new(0.0);
        let params = vec![Tensor::from_f64([1], &[1.0]).unwrap()];
        let err = grad_check(
            |tape, v| {
                counter.set(counter.get() + 1.0);
                let s = tape.scale(v[0], counter.get());
                Ok(tape.sum(s))
            },
            &params,
            DEFAULT_STEP,
            Elements::All,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn injected_fault_is_detected() {
        let params = vec![Tensor::from_f64([2], &[0.4, -0.7]).unwrap()];
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let s = tape.sigmoid(v[0]);
            Ok(tape.sum(s))
        };
        let report = grad_check_with(f, &params, DEFAULT_STEP, Elements::All, |t| {
            t.inject_fault(crate::OpKind::Sigmoid)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
