use super::Mat;
use crate::error::{Error, Result};

/// Sweep cap of the cyclic Jacobi solver.
pub const JACOBI_MAX_SWEEPS: usize = 100;

const SYMMETRY_TOL: f64 = 1e-10;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns.
pub fn jacobi_eigh(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("jacobi_eigh", format!("{}x{} is not square", n, a.cols())));
    }
    a.ensure_finite("jacobi_eigh")?;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::contract(format!(
                    "jacobi_eigh needs a symmetric matrix; entries ({i},{j}) and ({j},{i}) differ by {:e}",
                    (a[(i, j)] - a[(j, i)]).abs()
                )));
            }
        }
    }

    let mut m = a.clone();
    // Symmetrize exactly so rotations see one value per pair.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let mut v = Mat::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    let mut converged = false;
    let mut off = off_diag_norm(&m);
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off <= OFF_DIAG_TOL * scale || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
        off = off_diag_norm(&m);
    }
    if !converged && off > OFF_DIAG_TOL * scale {
        return Err(Error::Convergence {
            what: "jacobi_eigh",
            iterations: JACOBI_MAX_SWEEPS,
            residual: off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = v.select_cols(&order)?;
    Ok((values, vectors))
}

fn off_diag_norm(m: &Mat) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

fn rotate(m: &mut Mat, v: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    // M <- J^T M J with J the (p, q) Givens rotation.
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_mat, seeded};
    use rand::Rng;

    fn reconstruct(values: &[f64], v: &Mat) -> Mat {
        v.diag_right(values).unwrap().matmul(&v.transpose()).unwrap()
    }

    fn random_symmetric(rng: &mut impl Rng, n: usize) -> Mat {
        let b = normal_mat(rng, n, n, 1.0);
        b.add(&b.transpose()).unwrap().scale(0.5)
    }

    #[test]
    fn diagonal_input() {
        let (vals, vecs) = jacobi_eigh(&Mat::diag(&[3.0, 7.0])).unwrap();
        assert_eq!(vals, vec![3.0, 7.0]);
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(vecs[(i, j)].abs(), expected);
            }
        }
    }

    #[test]
    fn two_by_two_characteristic_roots() {
        // det([[2-l, 1], [1, 2-l]]) = (2-l)^2 - 1 = 0 gives l = 1, 3.
        let (vals, _) = jacobi_eigh(&Mat::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn descending_diagonal_is_sorted() {
        let (vals, vecs) = jacobi_eigh(&Mat::diag(&[5.0, -1.0, 2.0])).unwrap();
        assert_eq!(vals, vec![-1.0, 2.0, 5.0]);
        assert_eq!(vecs[(1, 0)].abs(), 1.0);
    }

    #[test]
    fn asymmetric_is_rejected() {
        let a = Mat::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(jacobi_eigh(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let mut rng = seeded(2024);
        for trial in 0..1000 {
            let n = 1 + trial % 16;
            let a = random_symmetric(&mut rng, n);
            let (vals, v) = jacobi_eigh(&a).unwrap();
            assert!(reconstruct(&vals, &v).max_abs_diff(&a).unwrap() <= 1e-10);
            let vtv = v.transpose().matmul(&v).unwrap();
            assert!(vtv.max_abs_diff(&Mat::identity(n)).unwrap() <= 1e-10);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn desk_scale_64() {
        let a = random_symmetric(&mut seeded(9), 64);
        let (vals, v) = jacobi_eigh(&a).unwrap();
        assert!(reconstruct(&vals, &v).max_abs_diff(&a).unwrap() <= 1e-10);
    }
}
