//! Unit-length director constraint `psi(d) = d.d - alpha^2` at a node and the
//! operators built on it: Jacobian rows, nullspace bases and penalty terms.

use crate::rodcore::{M3, V3};
use serde::{Deserialize, Serialize};

/// Constraint value for a scaled director `d = alpha * unit`.
#[inline]
pub fn director_constraint(d: &V3, alpha: f64) -> f64 {
    d.dot(d) - alpha * alpha
}

/// Row of the constraint Jacobian in the director columns of its node.
#[inline]
pub fn jacobian_row(d: &V3) -> V3 {
    2.0 * d
}

/// Dual vectors `d x E_j` for `j = 0, 1, 2`.
pub fn dual_vectors(d: &V3) -> [V3; 3] {
    [d.cross(&V3::x()), d.cross(&V3::y()), d.cross(&V3::z())]
}

/// The two duals with the largest norms, ties broken by the lower index.
/// Returns the selected indices in increasing order and the vectors.
pub fn nullspace_pair(d: &V3) -> ([usize; 2], [V3; 2]) {
    let duals = dual_vectors(d);
    // The dropped dual is the one with the smallest norm; on ties drop the highest index.
    let norms = [duals[0].norm_squared(), duals[1].norm_squared(), duals[2].norm_squared()];
    let mut drop = 2;
    for j in (0..3).rev() {
        if norms[j] < norms[drop] {
            drop = j;
        }
    }
    let sel: Vec<usize> = (0..3).filter(|&j| j != drop).collect();
    ([sel[0], sel[1]], [duals[sel[0]], duals[sel[1]]])
}

/// Rows of `(dD/dd)^T r` for the selected pair, scaled by `chain`:
/// row `k` is `chain * (E_k x r)`.
pub fn reduced_tangent_rows(pair: [usize; 2], r_director: &V3, chain: f64) -> [V3; 2] {
    let basis = [V3::x(), V3::y(), V3::z()];
    [chain * basis[pair[0]].cross(r_director), chain * basis[pair[1]].cross(r_director)]
}

/// Linearization of `J^T lambda` in the director block: `2 chain lambda I`.
#[inline]
pub fn multiplier_tangent(lambda: f64, chain: f64) -> M3 {
    2.0 * chain * lambda * M3::identity()
}

/// Penalty stiffness scale `beta * 2 EI / L`.
pub fn penalty_scale(beta: f64, bending_stiffness: f64, length: f64) -> f64 {
    beta * 2.0 * bending_stiffness / length
}

/// Penalty force `c J^T psi` and its tangent `c (J^T J + 2 psi I)`.
pub fn penalty_terms(d: &V3, alpha: f64, c: f64) -> (V3, M3) {
    let psi = director_constraint(d, alpha);
    let j = jacobian_row(d);
    (c * psi * j, c * (j * j.transpose() + 2.0 * psi * M3::identity()))
}

/// How the nodal director length is controlled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintTreatment {
    None,
    Multiplier,
    Nullspace,
    Penalty { beta: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn pair_for_axis_director() {
        let (pair, cols) = nullspace_pair(&V3::z());
        assert_eq!(pair, [0, 1]);
        assert_eq!(cols[0], V3::new(0.0, 1.0, 0.0));
        assert_eq!(cols[1], V3::new(-1.0, 0.0, 0.0));
        let (pair, _) = nullspace_pair(&V3::x());
        assert_eq!(pair, [1, 2]);
        // Equal norms everywhere: keep the two lowest indices.
        let (pair, _) = nullspace_pair(&V3::new(1.0, 1.0, 1.0).normalize());
        assert_eq!(pair, [0, 1]);
    }

    #[test]
    fn multiplier_tangent_for_unit_multiplier() {
        assert_eq!(multiplier_tangent(2.0, 0.5), 2.0 * M3::identity());
    }

    #[test]
    fn reduced_rows_match_difference_of_projected_residual() {
        let d = V3::new(0.3, -0.5, 0.8);
        let r = V3::new(1.2, 0.4, -0.9);
        let (pair, _) = nullspace_pair(&d);
        let rows = reduced_tangent_rows(pair, &r, 1.0);
        let h = 1e-6;
        for c in 0..3 {
            let mut e = V3::zeros();
            e[c] = h;
            let dp = dual_vectors(&(d + e));
            let dm = dual_vectors(&(d - e));
            for k in 0..2 {
                let fd = (dp[pair[k]].dot(&r) - dm[pair[k]].dot(&r)) / (2.0 * h);
                assert_relative_eq!(rows[k][c], fd, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn penalty_tangent_matches_differences() {
        let d = V3::new(0.9, 0.2, -0.3);
        let (_, t) = penalty_terms(&d, 1.0, 3.0);
        let h = 1e-6;
        for c in 0..3 {
            let mut e = V3::zeros();
            e[c] = h;
            let col = (penalty_terms(&(d + e), 1.0, 3.0).0 - penalty_terms(&(d - e), 1.0, 3.0).0) / (2.0 * h);
            for r in 0..3 {
                assert_relative_eq!(t[(r, c)], col[r], epsilon = 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn jacobian_annihilates_nullspace(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, a in 0.1f64..10.0) {
            let d = V3::new(x, y, z);
            prop_assume!(d.norm() > 1e-3);
            let d = a * d.normalize();
            let (_, cols) = nullspace_pair(&d);
            let j = jacobian_row(&d);
            for c in cols.iter() {
                prop_assert!(j.dot(c).abs() <= 1e-12 * a * a);
            }
            // The pair spans the plane normal to d.
            prop_assert!(cols[0].cross(&cols[1]).norm() >= 0.5 * a * a);
        }
    }
}
