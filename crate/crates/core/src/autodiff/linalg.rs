use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative pivot threshold below which a matrix is reported as singular.
const PIVOT_TOL: f64 = 1e-13;

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("invert", format!("{:?} is not square", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("invert input"));
    }
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Singular("invert"));
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::identity(n).into_data();

    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= PIVOT_TOL * scale {
            return Err(Error::Singular("invert"));
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap(col * n + j, pivot_row * n + j);
                inv.swap(col * n + j, pivot_row * n + j);
            }
        }
        let p = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Tensor::matrix(n, n, inv)
}

/// `K = B A⁺` for `A`, `B` of shape `D×m`, computed as the ridge-regularized
/// minimum-norm least-squares solution of `min ‖K A − B‖_F`.
pub fn least_squares_min_norm(a: &Tensor, b: &Tensor, ridge: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant_ref(a), g.constant_ref(b));
    let k = g.least_squares_min_norm(va, vb, ridge)?;
    Ok(g.value(k).clone())
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &Tensor) -> Result<f64> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(
            "spectral_radius",
            format!("{:?} is not square", a.shape()),
        ));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("spectral_radius input"));
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.data());
    Ok(m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_recovers_identity() {
        let a = Tensor::from_rows(&[&[4.0, 7.0, 2.0], &[3.0, 6.0, 1.0], &[2.0, 5.0, 3.0]]);
        let inv = invert(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(3)) < 1e-12);
    }

    #[test]
    fn invert_rejects_singular() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(invert(&a), Err(Error::Singular(_))));
        assert!(matches!(invert(&Tensor::zeros(2, 2)), Err(Error::Singular(_))));
    }

    #[test]
    fn least_squares_identity_cases() {
        let eye = Tensor::identity(2);
        let k = least_squares_min_norm(&eye, &eye, 0.0).unwrap();
        assert_eq!(k.data(), eye.data());

        let rot = Tensor::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let k = least_squares_min_norm(&eye, &rot, 0.0).unwrap();
        assert!(k.max_abs_diff(&rot) < 1e-15);
    }

    #[test]
    fn least_squares_rejects_bad_input() {
        let a = Tensor::from_rows(&[&[1.0, f64::NAN]]);
        let b = Tensor::from_rows(&[&[1.0, 1.0]]);
        assert!(matches!(
            least_squares_min_norm(&a, &b, 1e-6),
            Err(Error::NonFinite(_))
        ));
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            least_squares_min_norm(&a, &a, 0.0),
            Err(Error::Singular(_))
        ));
        let c = Tensor::zeros(2, 3);
        assert!(least_squares_min_norm(&a, &c, 0.0).is_err());
    }

    #[test]
    fn spectral_radius_of_rotation_and_scaling() {
        let r = Tensor::from_rows(&[&[0.0, -0.5], &[0.5, 0.0]]);
        assert!((spectral_radius(&r).unwrap() - 0.5).abs() < 1e-12);
        let d = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, -3.0]]);
        assert!((spectral_radius(&d).unwrap() - 3.0).abs() < 1e-12);
    }
}
