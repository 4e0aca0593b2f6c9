//! Small dense helpers over nalgebra shared by the fitters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Linalg(format!("{what} is not positive definite")))
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = cholesky(m, what)?.inverse();
    Ok(symmetrize(&inv))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Names of columns that are (numerically) linear combinations of the
/// preceding columns, found by a Gram-Schmidt sweep over `XᵀX`.
pub fn collinear_columns(xtx: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let q = xtx.nrows();
    let mut l = DMatrix::<f64>::zeros(q, q);
    let mut active = vec![false; q];
    let mut out = Vec::new();
    for j in 0..q {
        let mut d = xtx[(j, j)];
        for k in 0..j {
            if active[k] {
                d -= l[(j, k)] * l[(j, k)];
            }
        }
        if d <= 1e-10 * xtx[(j, j)].max(f64::MIN_POSITIVE) {
            out.push(names[j].clone());
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        active[j] = true;
        for i in (j + 1)..q {
            let mut s = xtx[(i, j)];
            for k in 0..j {
                if active[k] {
                    s -= l[(i, k)] * l[(j, k)];
                }
            }
            l[(i, j)] = s / djj;
        }
    }
    out
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_duplicated_column() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 1., 1., 2., 1., 0., 1., 1., 1., 2.]);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let got = collinear_columns(&(x.transpose() * &x), &names);
        assert_eq!(got, vec!["c".to_string()]);
    }

    #[test]
    fn stable_logistic_helpers() {
        assert!((log1p_exp(800.0) - 800.0).abs() < 1e-12);
        assert!(log1p_exp(-800.0) >= 0.0);
        assert_eq!(inv_logit(0.0), 0.5);
        assert!(inv_logit(-800.0) >= 0.0 && inv_logit(800.0) <= 1.0);
    }
}
