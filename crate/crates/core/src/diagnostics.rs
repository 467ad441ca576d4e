//! Energies, momenta, stress resultants, error norms, condition estimates and
//! per-run iteration statistics.

use crate::assembly::{block, AssemblyError, Formulation, Regime, RodIterate, RodModel};
use crate::constraints;
use crate::rodcore::{kinematics, rotary_mass, stresses, strain_energy_density, V3};
use crate::solvers::{BandedLu, NewtonReport};
use crate::sparse::CsrMatrix;
use crate::splinekit::gauss_legendre;
use serde::{Deserialize, Serialize};

/// Dense SVD threshold for condition numbers; larger systems use inverse iteration.
pub const DENSE_CONDITION_LIMIT: usize = 700;

/// Spectral condition number. Dense SVD below the size limit, otherwise power and
/// inverse power iteration on `A^T A` with a banded LU.
pub fn condition_estimate(a: &CsrMatrix) -> f64 {
    if a.nrows <= DENSE_CONDITION_LIMIT {
        condition_dense(a)
    } else {
        condition_iterative(a, 200, 1e-6)
    }
}

pub fn condition_dense(a: &CsrMatrix) -> f64 {
    let sv = a.to_dense().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn condition_iterative(a: &CsrMatrix, max_iter: usize, rtol: f64) -> f64 {
    let n = a.nrows;
    let at = a.transpose();
    let start = |k: usize| -> Vec<f64> { (0..n).map(|i| 1.0 + ((i * 7 + k) % 13) as f64 / 13.0).collect() };
    let mut x = start(0);
    normalize(&mut x);
    let mut smax = 0.0;
    for _ in 0..max_iter {
        let mut y = at.mul_vec(&a.mul_vec(&x));
        let lam = normalize(&mut y);
        x = y;
        if (lam - smax).abs() <= rtol * lam {
            smax = lam;
            break;
        }
        smax = lam;
    }
    let Ok(lu) = BandedLu::factor(a) else { return f64::INFINITY };
    let mut x = start(3);
    normalize(&mut x);
    let mut inv = 0.0;
    for _ in 0..max_iter {
        let mut y = lu.solve(&lu.solve_transpose(&x));
        let lam = normalize(&mut y);
        x = y;
        if !lam.is_finite() {
            return f64::INFINITY;
        }
        if (lam - inv).abs() <= rtol * lam {
            inv = lam;
            break;
        }
        inv = lam;
    }
    (smax * inv).sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    pub kinetic: f64,
    pub strain: f64,
    pub weight: f64,
    pub barrier: f64,
    pub point_loads: f64,
    pub penalty: f64,
}

impl Energies {
    pub fn total(&self) -> f64 {
        self.kinetic + self.strain + self.weight + self.barrier + self.point_loads + self.penalty
    }
}

/// Energy parts of a state; `v` may be omitted for statics.
pub fn energies(model: &RodModel, q: &[f64], v: Option<&[f64]>, load_factor: f64) -> Energies {
    let p = &model.props;
    let mut e = Energies::default();
    for el in &model.mesh.elements {
        for qp in &el.points {
            let (mut x, mut g, mut k, mut xd, mut gd) = (V3::zeros(), V3::zeros(), V3::zeros(), V3::zeros(), V3::zeros());
            for (a, &b) in el.blocks.iter().enumerate() {
                let c = block(q, b);
                x += qp.n[a] * c;
                g += qp.d1[a] * c;
                k += qp.d2[a] * c;
                if let Some(v) = v {
                    let vb = block(v, b);
                    xd += qp.n[a] * vb;
                    gd += qp.d1[a] * vb;
                }
            }
            if let Ok(kin) = kinematics(&g, &k, 0.0) {
                e.strain += qp.weight * strain_energy_density(p, &kin);
            }
            if v.is_some() {
                e.kinetic += 0.5 * qp.weight * (p.line_density * xd.norm_squared() + gd.dot(&(rotary_mass(p, &g) * gd)));
            }
            e.weight += qp.weight * model.loading.distributed.weight_potential(&x, load_factor);
            if let Some(bar) = &model.loading.barrier {
                e.barrier += qp.weight * bar.evaluate(x.z).map(|r| r.0).unwrap_or(f64::INFINITY);
            }
        }
    }
    for pl in &model.loading.point_loads {
        if let Ok((x, _, _)) = model.mesh.evaluate(q, pl.s) {
            e.point_loads -= load_factor * V3::from(pl.force).dot(&x);
        }
    }
    if let Formulation::NodalPenalty { beta, .. } = model.formulation {
        let c = constraints::penalty_scale(beta, p.bending_stiffness, p.length);
        let alpha = model.mesh.director_scale();
        for j in model.constrained_nodes() {
            let psi = constraints::director_constraint(&block(q, 2 * j + 1), alpha);
            e.penalty += 0.5 * c * psi * psi;
        }
    }
    e
}

/// Linear and angular momentum about the origin.
pub fn momenta(model: &RodModel, q: &[f64], v: &[f64]) -> (V3, V3) {
    let p = &model.props;
    let (mut lin, mut ang) = (V3::zeros(), V3::zeros());
    for el in &model.mesh.elements {
        for qp in &el.points {
            let (mut x, mut g, mut xd, mut gd) = (V3::zeros(), V3::zeros(), V3::zeros(), V3::zeros());
            for (a, &b) in el.blocks.iter().enumerate() {
                let c = block(q, b);
                let vb = block(v, b);
                x += qp.n[a] * c;
                g += qp.d1[a] * c;
                xd += qp.n[a] * vb;
                gd += qp.d1[a] * vb;
            }
            lin += qp.weight * p.line_density * xd;
            ang += qp.weight * (p.line_density * x.cross(&xd) + g.cross(&(rotary_mass(p, &g) * gd)));
        }
    }
    (lin, ang)
}

/// Signed axial stress `EA (|phi'| - 1)` and bending moment magnitude at `s`.
pub fn stress_resultants(model: &RodModel, q: &[f64], s: f64) -> Option<(f64, f64)> {
    let (_, g, k) = model.mesh.evaluate(q, s).ok()?;
    let kin = kinematics(&g, &k, 0.0).ok()?;
    let (n, m) = stresses(&model.props, &kin);
    Some((n.dot(&kin.director), m.norm()))
}

/// Node coordinates of the mesh breakpoints.
pub fn breakpoints(model: &RodModel) -> Vec<f64> {
    let h = model.props.length / model.mesh.n_elements as f64;
    (0..=model.mesh.n_elements).map(|j| h * j as f64).collect()
}

/// Relative errors against a reference centerline with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub l2: f64,
    pub h1: f64,
    pub h2: f64,
}

pub fn error_norms(model: &RodModel, q: &[f64], reference: &dyn Fn(f64) -> (V3, V3, V3)) -> ErrorNorms {
    let (gx, gw) = gauss_legendre(10);
    let h = model.props.length / model.mesh.n_elements as f64;
    let (mut e0, mut e1, mut e2, mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for e in 0..model.mesh.n_elements {
        let (a, b) = (h * e as f64, h * (e + 1) as f64);
        for (x, w) in gx.iter().zip(&gw) {
            let s = 0.5 * (a + b) + 0.5 * (b - a) * x;
            let wt = 0.5 * (b - a) * w;
            let (p, g, k) = model.mesh.evaluate(q, s).expect("inside domain");
            let (pr, gr, kr) = reference(s);
            e0 += wt * (p - pr).norm_squared();
            e1 += wt * (g - gr).norm_squared();
            e2 += wt * (k - kr).norm_squared();
            r0 += wt * pr.norm_squared();
            r1 += wt * gr.norm_squared();
            r2 += wt * kr.norm_squared();
        }
    }
    ErrorNorms {
        l2: (e0 / r0).sqrt(),
        h1: ((e0 + e1) / (r0 + r1)).sqrt(),
        h2: ((e0 + e1 + e2) / (r0 + r1 + r2)).sqrt(),
    }
}

/// Observed convergence order between successive refinements by a factor of two.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Relative Frobenius distance between the assembled matrix and a central
/// difference of the assembled residual, column by column in system unknowns.
pub fn tangent_fd_error(model: &RodModel, it: &RodIterate, regime: &Regime, step: f64) -> Result<f64, AssemblyError> {
    let sys = model.assemble_system(it, regime)?;
    let a = sys.matrix.to_dense();
    let n = a.ncols();
    let mut err = 0.0;
    let mut unit = vec![0.0; n];
    for k in 0..n {
        unit[k] = 1.0;
        let mut plus = it.clone();
        model.apply_increment(&mut plus, &unit, step);
        let mut minus = it.clone();
        model.apply_increment(&mut minus, &unit, -step);
        unit[k] = 0.0;
        let rp = model.assemble_system(&plus, regime)?.rhs;
        let rm = model.assemble_system(&minus, regime)?.rhs;
        for i in 0..n {
            let fd = -(rp[i] - rm[i]) / (2.0 * step);
            err += (fd - a[(i, k)]).powi(2);
        }
    }
    Ok(err.sqrt() / a.norm())
}

/// Iteration statistics of a run, one row of the stats table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub formulation: String,
    pub n_e: usize,
    pub max_iters: usize,
    pub mean_time_per_iter_s: f64,
    pub total_iterations: usize,
    pub steps: usize,
    pub halvings: usize,
    pub converged: bool,
    pub failure: String,
}

impl RunStats {
    pub fn new(formulation: &str, n_e: usize) -> Self {
        Self { formulation: formulation.to_string(), n_e, converged: true, ..Default::default() }
    }

    pub fn record(&mut self, reports: &[NewtonReport], halvings: usize) {
        let t_sum: f64 = self.mean_time_per_iter_s * self.total_iterations as f64;
        let mut t = t_sum;
        for r in reports {
            self.max_iters = self.max_iters.max(r.iterations);
            self.total_iterations += r.iterations;
            t += r.iteration_seconds.iter().sum::<f64>();
        }
        self.steps += 1;
        self.halvings += halvings;
        if self.total_iterations > 0 {
            self.mean_time_per_iter_s = t / self.total_iterations as f64;
        }
    }

    pub fn fail(&mut self, why: String) {
        self.converged = false;
        self.failure = why;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn iterative_condition_matches_dense_on_small_system() {
        let n = 60;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 2.0 + i as f64 * 0.1;
            if i + 1 < n {
                m[(i, i + 1)] = -1.0;
                m[(i + 1, i)] = -0.5;
            }
        }
        let a = CsrMatrix::from_dense(&m);
        let dense = condition_dense(&a);
        let it = condition_iterative(&a, 500, 1e-10);
        assert!((it / dense - 1.0).abs() < 1e-3, "{it} vs {dense}");
    }

    #[test]
    fn orders_of_exact_halving() {
        let o = observed_orders(&[1.0, 0.25, 0.0625]);
        assert!((o[0] - 2.0).abs() < 1e-12 && (o[1] - 2.0).abs() < 1e-12);
    }
}
