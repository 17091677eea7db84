//! Flat dense coordinate vectors used for parameters, gradients and moments.

use crate::error::CoreError;

/// Dense vector of `f64` coordinates with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

/// Coordinate-wise binary operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Divisor choice for [`coordinatewise_variance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceDivisor {
    /// Biased estimator, divides by the collection size.
    Count,
    /// Unbiased estimator, divides by size - 1.
    CountMinusOne,
}

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self { data: vec![value; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_dims(&self, other: &Self) -> Result<(), CoreError> {
        if self.dim() != other.dim() {
            return Err(CoreError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    /// Coordinate-wise binary operation; `Div` rejects any zero divisor coordinate.
    pub fn elementwise(&self, other: &Self, op: ElementwiseOp) -> Result<Self, CoreError> {
        self.check_dims(other)?;
        if op == ElementwiseOp::Div {
            if let Some(i) = other.data.iter().position(|&x| x == 0.0) {
                return Err(CoreError::DivisionByZero { coordinate: i });
            }
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                ElementwiseOp::Add => a + b,
                ElementwiseOp::Sub => a - b,
                ElementwiseOp::Mul => a * b,
                ElementwiseOp::Div => a / b,
            })
            .collect();
        Ok(Self { data })
    }

    pub fn add(&self, other: &Self) -> Result<Self, CoreError> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, CoreError> {
        self.elementwise(other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, CoreError> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<(), CoreError> {
        self.check_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_squared().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&x| x.abs()).sum()
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Coordinate-wise mean of a nonempty collection, summed in iteration order.
pub fn mean_vector(vectors: &[ParamVector]) -> Result<ParamVector, CoreError> {
    let first = vectors.first().ok_or(CoreError::EmptyCollection {
        context: "mean_vector",
    })?;
    let mut acc = first.clone();
    for v in &vectors[1..] {
        acc.axpy(1.0, v)?;
    }
    Ok(acc.scale(1.0 / vectors.len() as f64))
}

/// Coordinate-wise variance around the coordinate-wise mean.
pub fn coordinatewise_variance(
    vectors: &[ParamVector],
    divisor: VarianceDivisor,
) -> Result<ParamVector, CoreError> {
    let count = vectors.len();
    let min = match divisor {
        VarianceDivisor::Count => 1,
        VarianceDivisor::CountMinusOne => 2,
    };
    if count < min {
        return Err(CoreError::EmptyCollection {
            context: "coordinatewise_variance",
        });
    }
    let mean = mean_vector(vectors)?;
    let mut acc = ParamVector::zeros(mean.dim());
    for v in vectors {
        let dev = v.sub(&mean)?;
        acc.axpy(1.0, &dev.mul(&dev)?)?;
    }
    let div = match divisor {
        VarianceDivisor::Count => count as f64,
        VarianceDivisor::CountMinusOne => (count - 1) as f64,
    };
    Ok(acc.scale(1.0 / div))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(xs: &[f64]) -> ParamVector {
        ParamVector::new(xs.to_vec())
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(
            pv(&[1.0, 2.0]).elementwise(&pv(&[3.0, 4.0]), ElementwiseOp::Mul).unwrap(),
            pv(&[3.0, 8.0])
        );
        assert_eq!(
            pv(&[5.0, 5.0]).elementwise(&pv(&[5.0, 5.0]), ElementwiseOp::Sub).unwrap(),
            pv(&[0.0, 0.0])
        );
        assert_eq!(
            pv(&[1.0, 4.0]).elementwise(&pv(&[2.0, 8.0]), ElementwiseOp::Div).unwrap(),
            pv(&[0.5, 0.5])
        );
    }

    #[test]
    fn elementwise_rejects_dim_mismatch_and_zero_division() {
        assert!(matches!(
            pv(&[1.0]).elementwise(&pv(&[1.0, 2.0]), ElementwiseOp::Add),
            Err(CoreError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            pv(&[1.0, 1.0]).elementwise(&pv(&[2.0, 0.0]), ElementwiseOp::Div),
            Err(CoreError::DivisionByZero { coordinate: 1 })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(pv(&[0.0, 0.0, 0.0]).l2_norm_squared(), 0.0);
        assert_eq!(pv(&[3.0, 4.0]).l2_norm_squared(), 25.0);
        assert_eq!(pv(&[1.0, 1.0, 1.0, 1.0]).l2_norm_squared(), 4.0);
        assert_eq!(pv(&[0.0, 0.0]).l1_norm(), 0.0);
        assert_eq!(pv(&[-1.0, 2.0]).l1_norm(), 3.0);
        assert_eq!(pv(&[0.5, 0.5, 0.5]).l1_norm(), 1.5);
    }

    #[test]
    fn variance_examples() {
        let vs = [pv(&[1.0, 0.0]), pv(&[3.0, 0.0])];
        assert_eq!(
            coordinatewise_variance(&vs, VarianceDivisor::Count).unwrap(),
            pv(&[1.0, 0.0])
        );
        assert_eq!(
            coordinatewise_variance(&vs, VarianceDivisor::CountMinusOne).unwrap(),
            pv(&[2.0, 0.0])
        );
        let same = [pv(&[5.0, 5.0]), pv(&[5.0, 5.0]), pv(&[5.0, 5.0])];
        assert_eq!(
            coordinatewise_variance(&same, VarianceDivisor::Count).unwrap(),
            pv(&[0.0, 0.0])
        );
        assert!(coordinatewise_variance(&[], VarianceDivisor::Count).is_err());
        assert!(coordinatewise_variance(&[pv(&[1.0])], VarianceDivisor::CountMinusOne).is_err());
    }

    proptest! {
        #[test]
        fn l2_norm_squared_matches_self_hadamard(xs in prop::collection::vec(-1e3f64..1e3, 1..32)) {
            let v = pv(&xs);
            let sq: f64 = v.elementwise(&v, ElementwiseOp::Mul).unwrap().as_slice().iter().sum();
            prop_assert!((v.l2_norm_squared() - sq).abs() <= 1e-9 * (1.0 + sq.abs()));
        }

        #[test]
        fn variance_divisors_scale_by_j_over_j_minus_one(
            rows in prop::collection::vec(prop::collection::vec(-10f64..10.0, 3), 2..8)
        ) {
            let vs: Vec<ParamVector> = rows.iter().map(|r| pv(r)).collect();
            let j = vs.len() as f64;
            let biased = coordinatewise_variance(&vs, VarianceDivisor::Count).unwrap();
            let unbiased = coordinatewise_variance(&vs, VarianceDivisor::CountMinusOne).unwrap();
            for i in 0..3 {
                prop_assert!((unbiased[i] - biased[i] * j / (j - 1.0)).abs() <= 1e-12 * (1.0 + unbiased[i].abs()));
            }
        }
    }
}
