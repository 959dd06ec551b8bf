//! Reference computations the suites check the solvers against.

use nalgebra::DMatrix;

/// Matrix exponential by scaling and squaring with a Taylor tail summed to
/// machine precision. Independent of the Runge-Kutta sweep it validates.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix exponential needs a square matrix");
    let norm = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())) * n as f64;
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = m * scale;
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..64 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.abs().max() < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn exponential_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exp(&z), DMatrix::identity(3, 3));
    }

    #[test]
    fn scalar_case_matches_exp() {
        let m = dmatrix![2.5];
        assert!((matrix_exp(&m)[(0, 0)] - 2.5_f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn two_state_generator_matches_closed_form() {
        // exp(t A) for A = [[-1, 1], [1, -1]] has entries (1 +- e^{-2t})/2
        let a = dmatrix![-1.0, 1.0; 1.0, -1.0];
        let e = matrix_exp(&a);
        let decay = (-2.0_f64).exp();
        assert!((e[(0, 0)] - 0.5 * (1.0 + decay)).abs() < 1e-14);
        assert!((e[(1, 0)] - 0.5 * (1.0 - decay)).abs() < 1e-14);
    }
}
