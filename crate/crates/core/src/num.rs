//! Scalar abstraction for probabilities and masses.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type used for probabilities, log masses and coverage sums.
///
/// Implemented for `f32` and `f64`. Tolerances scale with the precision of
/// the type: a distribution over `f32` cannot be expected to sum to one
/// within `1e-9`.
pub trait Probability:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Absolute tolerance for "sums to one" checks.
    const SUM_TOLERANCE: f64;
    /// Slack used when comparing a running cumulative mass to a threshold.
    const CUMULATIVE_SLACK: f64;

    fn sum_tolerance() -> Self {
        Self::from_f64(Self::SUM_TOLERANCE).unwrap()
    }

    fn cumulative_slack() -> Self {
        Self::from_f64(Self::CUMULATIVE_SLACK).unwrap()
    }

    fn of(value: f64) -> Self {
        Self::from_f64(value).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Probability for f64 {
    const SUM_TOLERANCE: f64 = 1e-9;
    const CUMULATIVE_SLACK: f64 = 1e-12;
}

impl Probability for f32 {
    const SUM_TOLERANCE: f64 = 1e-5;
    const CUMULATIVE_SLACK: f64 = 1e-6;
}

/// Neumaier-compensated sum that also tracks a bound on the rounding error.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum<P> {
    sum: P,
    compensation: P,
    abs_total: P,
    terms: usize,
}

impl<P: Probability> CompensatedSum<P> {
    pub fn new() -> Self {
        Self {
            sum: P::zero(),
            compensation: P::zero(),
            abs_total: P::zero(),
            terms: 0,
        }
    }

    pub fn add(&mut self, value: P) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation = self.compensation + ((self.sum - t) + value);
        } else {
            self.compensation = self.compensation + ((value - t) + self.sum);
        }
        self.sum = t;
        self.abs_total = self.abs_total + value.abs();
        self.terms += 1;
    }

    pub fn value(&self) -> P {
        self.sum + self.compensation
    }

    /// Bound on the absolute error of [`value`](Self::value): `2u * Σ|x|`
    /// plus a term quadratic in the number of summands.
    pub fn error_bound(&self) -> P {
        let u = P::epsilon() / P::of(2.0);
        let n = P::of(self.terms as f64);
        (P::of(2.0) * u + n * u * u) * self.abs_total
    }
}

impl<P: Probability> FromIterator<P> for CompensatedSum<P> {
    fn from_iter<I: IntoIterator<Item = P>>(iter: I) -> Self {
        let mut acc = Self::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// `ln(Σ exp(x_i))` without overflow.
pub fn log_sum_exp<P: Probability>(values: &[P]) -> P {
    let max = values
        .iter()
        .copied()
        .fold(P::neg_infinity(), |a, b| if b > a { b } else { a });
    if max == P::neg_infinity() {
        return max;
    }
    let s: P = values.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::<f64>::new();
        acc.add(1.0);
        for _ in 0..10 {
            acc.add(1e-17);
        }
        acc.add(-1.0);
        assert!((acc.value() - 1e-16).abs() < 1e-30);
        assert!(acc.error_bound() > 0.0);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()];
        assert!(log_sum_exp(&xs).abs() < 1e-15);
        assert_eq!(log_sum_exp::<f32>(&[]), f32::NEG_INFINITY);
    }
}
