//! Singular value decomposition of 3×3 matrices by cyclic one-sided Jacobi.
//!
//! The sweep orthogonalizes the columns of `H` with plane rotations, which is
//! Jacobi diagonalization of `HᵀH` carried out without forming the product.
//! The accumulated rotations give `V`; the normalized columns give `U`.

use nalgebra::{Matrix3, Vector3};

const MAX_SWEEPS: usize = 64;
const OFF_DIAGONAL_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    /// Singular values in non-increasing order.
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn recompose(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.sigma) * self.v.transpose()
    }

    pub fn sigma_array(&self) -> [f64; 3] {
        [self.sigma[0], self.sigma[1], self.sigma[2]]
    }
}

pub fn svd3(h: &Matrix3<f64>) -> Svd3 {
    let mut a = *h;
    let mut v = Matrix3::<f64>::identity();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let cp = a.column(p).into_owned();
            let cq = a.column(q).into_owned();
            let alpha = cp.norm_squared();
            let beta = cq.norm_squared();
            let gamma = cp.dot(&cq);
            if gamma == 0.0 || gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            rotate_columns(&mut a, p, q, c, s);
            rotate_columns(&mut v, p, q, c, s);
        }
        if !rotated {
            break;
        }
    }

    let mut norms = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let a = Matrix3::from_columns(&[a.column(order[0]), a.column(order[1]), a.column(order[2])]);
    let v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    norms = [norms[order[0]], norms[order[1]], norms[order[2]]];

    let sigma_max = norms[0];
    let tiny = f64::MIN_POSITIVE.max(1e-14 * sigma_max);
    let mut cols = [Vector3::zeros(); 3];
    if sigma_max == 0.0 {
        cols = [Vector3::x(), Vector3::y(), Vector3::z()];
    } else {
        cols[0] = a.column(0) / norms[0];
        cols[1] = if norms[1] > tiny {
            a.column(1) / norms[1]
        } else {
            any_orthogonal(&cols[0])
        };
        cols[2] = if norms[2] > tiny {
            a.column(2) / norms[2]
        } else {
            let c = cols[0].cross(&cols[1]);
            if c.dot(&a.column(2)) < 0.0 {
                -c
            } else {
                c
            }
        };
    }

    Svd3 {
        u: Matrix3::from_columns(&cols),
        sigma: Vector3::new(norms[0], norms[1], norms[2]),
        v,
    }
}

fn rotate_columns(m: &mut Matrix3<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..3 {
        let mp = m[(r, p)];
        let mq = m[(r, q)];
        m[(r, p)] = c * mp - s * mq;
        m[(r, q)] = s * mp + c * mq;
    }
}

fn any_orthogonal(u: &Vector3<f64>) -> Vector3<f64> {
    let pick = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vector3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    (pick - u * u.dot(&pick)).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn check(h: &Matrix3<f64>) {
        let d = svd3(h);
        let scale = h.amax().max(1.0);
        assert!((d.recompose() - h).amax() < 1e-12 * scale, "{h}");
        assert!((d.u.transpose() * d.u - Matrix3::identity()).amax() < 1e-12);
        assert!((d.v.transpose() * d.v - Matrix3::identity()).amax() < 1e-12);
        assert!(d.sigma[0] >= d.sigma[1] && d.sigma[1] >= d.sigma[2] && d.sigma[2] >= 0.0);
    }

    #[test]
    fn agrees_with_nalgebra_singular_values() {
        let h = Matrix3::new(2.0, -1.0, 0.3, 0.5, 4.0, 1.0, -0.7, 0.2, 1.5);
        let d = svd3(&h);
        let mut reference: Vec<f64> = h.svd(false, false).singular_values.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (s, r) in d.sigma.iter().zip(&reference) {
            assert!((s - r).abs() < 1e-12);
        }
        check(&h);
    }

    #[test]
    fn rank_deficient_inputs() {
        check(&Matrix3::zeros());
        let u = Vector3::new(1.0, 2.0, 3.0);
        let w = Vector3::new(-1.0, 0.5, 2.0);
        check(&(u * w.transpose()));
        let x = Vector3::new(0.0, 1.0, -1.0);
        check(&(u * w.transpose() + x * u.transpose()));
        check(&Matrix3::from_diagonal(&Vector3::new(0.0, 3.0, 0.0)));
    }

    #[test]
    fn repeated_singular_values() {
        check(&Matrix3::identity());
        check(&Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, -1.0)));
    }

    proptest! {
        #[test]
        fn reconstructs_random_matrices(vals in proptest::array::uniform9(-10.0f64..10.0)) {
            check(&Matrix3::from_row_slice(&vals));
        }
    }
}
