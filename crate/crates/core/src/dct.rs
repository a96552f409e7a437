//! Orthonormal DCT-II trajectory encoding with replicate padding.
//!
//! A window of `L = N + T` frames for `K` joints is mapped row-wise to `M ≤ L`
//! frequency coefficients. The basis row for frequency `l` (0-based) is
//! `sqrt(2/L) · w_l · cos(π (2n + 1) l / 2L)` with `w_0 = 1/√2`, `w_l = 1`
//! otherwise; the inverse is the transpose, so with `M = L` the round trip is
//! exact up to rounding.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K × (N + T)` trajectory: observed frames followed by the future.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    observed: usize,
    future: usize,
    data: Tensor,
}

impl TrajectoryWindow {
    pub fn new(data: Tensor, observed: usize) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::shape("TrajectoryWindow", format!("{:?} is not K×L", data.shape())));
        }
        if observed == 0 || observed > data.cols() {
            return Err(Error::invalid(format!(
                "observed length {observed} outside 1..={}",
                data.cols()
            )));
        }
        let future = data.cols() - observed;
        Ok(TrajectoryWindow { observed, future, data })
    }

    pub fn joints(&self) -> usize {
        self.data.rows()
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn future(&self) -> usize {
        self.future
    }

    pub fn len(&self) -> usize {
        self.observed + self.future
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    /// The first `N` columns.
    pub fn observed_part(&self) -> Tensor {
        columns(&self.data, 0, self.observed)
    }

    /// The last `T` columns.
    pub fn future_part(&self) -> Tensor {
        columns(&self.data, self.observed, self.future)
    }
}

pub(crate) fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (k, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(k * len);
    for r in 0..k {
        out.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
    }
    Tensor::new(vec![k, len], out).expect("column slice shape")
}

/// Frequency-domain encoding of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct DctCoefficients {
    /// Transform length the coefficients were computed over.
    pub length: usize,
    /// `K × M`.
    pub coeffs: Tensor,
}

impl DctCoefficients {
    pub fn retained(&self) -> usize {
        self.coeffs.cols()
    }
}

/// Extends a `K × N` observation by repeating its last frame `T` times.
pub fn pad_replicate(observed: &Tensor, future: usize) -> Result<TrajectoryWindow> {
    if observed.rank() != 2 || observed.cols() == 0 || observed.rows() == 0 {
        return Err(Error::invalid(format!(
            "pad_replicate needs a non-empty K×N observation, got {:?}",
            observed.shape()
        )));
    }
    let (k, n) = (observed.rows(), observed.cols());
    let mut out = Vec::with_capacity(k * (n + future));
    for row in observed.data().chunks(n) {
        out.extend_from_slice(row);
        let last = row[n - 1];
        out.extend(std::iter::repeat_n(last, future));
    }
    TrajectoryWindow::new(Tensor::new(vec![k, n + future], out)?, n)
}

/// `M × L` transform matrix; row `l` is the `l`-th basis vector.
pub fn dct_matrix(retained: usize, length: usize) -> Result<Tensor> {
    if length == 0 || retained == 0 || retained > length {
        return Err(Error::invalid(format!(
            "need 1 <= M <= L, got M={retained}, L={length}"
        )));
    }
    let lf = length as f64;
    let norm = (2.0 / lf).sqrt();
    Ok(Tensor::from_fn(&[retained, length], |idx| {
        let (l, n) = (idx / length, idx % length);
        let w = if l == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        norm * w * (PI * (2 * n + 1) as f64 * l as f64 / (2.0 * lf)).cos()
    }))
}

/// Precomputed forward/inverse pair for a fixed `(M, L)`.
#[derive(Clone, Debug)]
pub struct DctBasis {
    /// `M × L` basis rows.
    basis: Tensor,
    /// `L × M` transpose.
    basis_t: Tensor,
}

impl DctBasis {
    pub fn new(retained: usize, length: usize) -> Result<Self> {
        let basis = dct_matrix(retained, length)?;
        let basis_t = basis.transpose2();
        Ok(DctBasis { basis, basis_t })
    }

    pub fn retained(&self) -> usize {
        self.basis.rows()
    }

    pub fn length(&self) -> usize {
        self.basis.cols()
    }

    /// `M × L` matrix mapping coefficients back to time (`x = C · D`).
    pub fn inverse_matrix(&self) -> &Tensor {
        &self.basis
    }

    /// `L × M` matrix mapping time to coefficients (`C = x · Dᵀ`).
    pub fn forward_matrix(&self) -> &Tensor {
        &self.basis_t
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.length() {
            return Err(Error::shape(
                "dct_forward",
                format!("trajectory {:?}, transform length {}", x.shape(), self.length()),
            ));
        }
        x.matmul(&self.basis_t)
    }

    pub fn decode(&self, c: &Tensor) -> Result<Tensor> {
        if c.rank() != 2 || c.cols() != self.retained() {
            return Err(Error::shape(
                "dct_inverse",
                format!("coefficients {:?}, retained {}", c.shape(), self.retained()),
            ));
        }
        c.matmul(&self.basis)
    }
}

/// DCT of every row of the window, keeping the lowest `retained` frequencies.
pub fn dct_forward(window: &TrajectoryWindow, retained: usize) -> Result<DctCoefficients> {
    let basis = DctBasis::new(retained, window.len())?;
    Ok(DctCoefficients { length: window.len(), coeffs: basis.encode(window.data())? })
}

/// Inverse transform to `length` frames; coefficients beyond `M` are zero.
pub fn dct_inverse(coeffs: &DctCoefficients, length: usize) -> Result<Tensor> {
    if length == 0 {
        return Err(Error::invalid("inverse DCT length must be at least 1"));
    }
    let m = coeffs.retained();
    if m > length {
        return Err(Error::invalid(format!("{m} coefficients exceed output length {length}")));
    }
    DctBasis::new(m, length)?.decode(&coeffs.coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct summation of the 1-based textbook formula.
    fn naive_dct_row(x: &[f64]) -> Vec<f64> {
        let big_n = x.len() as f64;
        (1..=x.len())
            .map(|l| {
                let delta = if l == 1 { 1.0 } else { 0.0 };
                (2.0 / big_n).sqrt()
                    * (1..=x.len())
                        .map(|n| {
                            x[n - 1] / (1.0 + delta as f64).sqrt()
                                * (PI / (2.0 * big_n) * (2 * n - 1) as f64 * (l - 1) as f64).cos()
                        })
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn pad_replicate_repeats_last_frame() {
        let obs = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = pad_replicate(&obs, 2).unwrap();
        assert_eq!(w.data().data(), &[1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(pad_replicate(&obs, 0).unwrap().data(), &obs);
    }

    #[test]
    fn pad_replicate_h36m_shape() {
        let obs = Tensor::from_fn(&[48, 10], |i| (i as f64).sin());
        let w = pad_replicate(&obs, 10).unwrap();
        assert_eq!(w.data().shape(), &[48, 20]);
        for k in 0..48 {
            for n in 10..20 {
                assert_eq!(w.data().at2(k, n), obs.at2(k, 9));
            }
        }
    }

    #[test]
    fn pad_replicate_rejects_empty() {
        assert!(pad_replicate(&Tensor::zeros(&[3, 0]), 2).is_err());
    }

    #[test]
    fn constant_row_has_only_dc() {
        let w = TrajectoryWindow::new(Tensor::full(&[1, 4], 2.0), 4).unwrap();
        let c = dct_forward(&w, 4).unwrap();
        assert!((c.coeffs.data()[0] - 4.0).abs() < 1e-14);
        for v in &c.coeffs.data()[1..] {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn matches_direct_summation() {
        let row: Vec<f64> = (0..7).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let w = TrajectoryWindow::new(Tensor::new(vec![1, 7], row.clone()).unwrap(), 7).unwrap();
        let c = dct_forward(&w, 7).unwrap();
        for (a, b) in c.coeffs.data().iter().zip(naive_dct_row(&row)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn h36m_short_term_shape() {
        let w = TrajectoryWindow::new(Tensor::zeros(&[48, 20]), 10).unwrap();
        assert_eq!(dct_forward(&w, 20).unwrap().coeffs.shape(), &[48, 20]);
    }

    #[test]
    fn retained_out_of_range() {
        let w = TrajectoryWindow::new(Tensor::zeros(&[2, 5]), 3).unwrap();
        assert!(dct_forward(&w, 0).is_err());
        assert!(dct_forward(&w, 6).is_err());
    }

    #[test]
    fn round_trip_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[6, 13], |_| rng.random_range(-3.0..3.0));
        let w = TrajectoryWindow::new(x.clone(), 6).unwrap();
        let back = dct_inverse(&dct_forward(&w, 13).unwrap(), 13).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);

        let zero = DctCoefficients { length: 13, coeffs: Tensor::zeros(&[6, 13]) };
        assert_eq!(dct_inverse(&zero, 13).unwrap(), Tensor::zeros(&[6, 13]));
        assert!(dct_inverse(&zero, 0).is_err());
    }

    #[test]
    fn cropped_round_trip_of_two_component_signal() {
        // Built in coefficient space: only the DC and first harmonic are non-zero.
        let l = 12;
        let coeffs = Tensor::new(vec![1, 2], vec![1.3, -0.4]).unwrap();
        let x = dct_inverse(&DctCoefficients { length: l, coeffs: coeffs.clone() }, l).unwrap();
        let w = TrajectoryWindow::new(x.clone(), l).unwrap();
        let c = dct_forward(&w, 2).unwrap();
        assert!(c.coeffs.max_abs_diff(&coeffs) < 1e-10);
        assert!(dct_inverse(&c, l).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn basis_is_orthonormal() {
        for l in [1, 2, 5, 20, 35, 60] {
            let g = dct_matrix(l, l).unwrap();
            let ggt = g.matmul(&g.transpose2()).unwrap();
            assert!(ggt.max_abs_diff(&Tensor::eye(l)) < 1e-10, "L={l}");
        }
    }
}
