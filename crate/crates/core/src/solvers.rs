//! Banded direct solvers, Newton iteration, static load stepping and the
//! midpoint time step.

use crate::assembly::{AssembledSystem, AssemblyError, Regime, RodIterate, RodModel};
use crate::rodcore::RodError;
use crate::sparse::CsrMatrix;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("matrix is numerically singular at pivot {pivot} (condition estimate {condition:e})")]
    Singular { pivot: usize, condition: f64 },
    #[error("matrix is ill-conditioned: solve residual {residual:e}, condition estimate {condition:e}")]
    IllConditioned { residual: f64, condition: f64 },
    #[error("matrix is not square or does not match the right-hand side")]
    Shape,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Linear(#[from] SolveError),
    #[error("Newton did not converge in {iterations} iterations (last increment {increment:e})")]
    NotConverged { iterations: usize, increment: f64 },
    #[error("Newton update produced an inadmissible state after {halvings} halvings: {cause}")]
    Inadmissible { halvings: usize, cause: String },
    #[error("step failed after {halvings} halvings: {cause}")]
    StepFailed { halvings: usize, cause: Box<SolverError> },
}

impl SolverError {
    /// True when the root cause is a singular or ill-conditioned linear system.
    pub fn is_ill_conditioned(&self) -> bool {
        match self {
            SolverError::Linear(_) => true,
            SolverError::StepFailed { cause, .. } => cause.is_ill_conditioned(),
            _ => false,
        }
    }
}

/// LU factors with partial pivoting of a banded matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    /// Row `i` holds columns `i - kl ..= i + ku + kl` at offsets `j + kl - i`.
    band: Vec<f64>,
    perm: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, SolveError> {
        if a.nrows != a.ncols {
            return Err(SolveError::Shape);
        }
        let n = a.nrows;
        let (kl, ku) = a.bandwidth();
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for i in 0..n {
            for (j, v) in a.row(i) {
                band[i * width + (j + kl - i)] += v;
            }
        }
        let amax = a.max_abs();
        // Only numerically vanishing pivots are singular; poor scaling is left to the residual check.
        let tiny = amax * f64::EPSILON * f64::EPSILON;
        let mut perm = vec![0; n];
        let at = |i: usize, j: usize| i * width + (j + kl - i);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = band[at(k, k)].abs();
            for i in k + 1..=last {
                let v = band[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > tiny) {
                return Err(SolveError::Singular { pivot: k, condition: f64::INFINITY });
            }
            perm[k] = p;
            let jmax = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    band.swap(at(k, j), at(p, j));
                }
            }
            let piv = band[at(k, k)];
            for i in k + 1..=last {
                let l = band[at(i, k)] / piv;
                band[at(i, k)] = l;
                if l != 0.0 {
                    for j in k + 1..=jmax {
                        band[at(i, j)] -= l * band[at(k, j)];
                    }
                }
            }
        }
        Ok(Self { n, kl, ku, width, band, perm })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.perm[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    x[i] -= self.band[self.at(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + self.ku + self.kl).min(n - 1) {
                s -= self.band[self.at(k, j)] * x[j];
            }
            x[k] = s / self.band[self.at(k, k)];
        }
        x
    }

    /// Solve with the transposed matrix.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for k in 0..n {
            let mut s = y[k];
            for j in k.saturating_sub(self.ku + self.kl)..k {
                s -= self.band[self.at(j, k)] * y[j];
            }
            y[k] = s / self.band[self.at(k, k)];
        }
        for k in (0..n).rev() {
            let mut s = y[k];
            for i in k + 1..=(k + self.kl).min(n - 1) {
                s -= self.band[self.at(i, k)] * y[i];
            }
            y[k] = s;
            y.swap(k, self.perm[k]);
        }
        y
    }
}

/// `L D L^T` factors without pivoting of a symmetric banded matrix.
#[derive(Debug, Clone)]
pub struct BandedLdlt {
    n: usize,
    kl: usize,
    /// Row `i` holds `L[i, i - kl ..= i - 1]` at offsets `j + kl - i`, diagonal holds `D`.
    band: Vec<f64>,
}

impl BandedLdlt {
    pub fn factor(a: &CsrMatrix) -> Result<Self, SolveError> {
        if a.nrows != a.ncols {
            return Err(SolveError::Shape);
        }
        let n = a.nrows;
        let (kl, _) = a.bandwidth();
        let w = kl + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    band[i * w + (j + kl - i)] += v;
                }
            }
        }
        // Same singular verdict as the LU; accuracy is judged by the caller's residual check.
        let tiny = a.max_abs() * f64::EPSILON * f64::EPSILON;
        let mut tmp = vec![0.0; w];
        for i in 0..n {
            let j0 = i.saturating_sub(kl);
            // Row i: L[i,j] = (A[i,j] - sum_k L[i,k] D[k] L[j,k]) / D[j]
            for j in j0..i {
                let mut s = band[i * w + (j + kl - i)];
                for k in j0.max(j.saturating_sub(kl))..j {
                    s -= tmp[k - j0] * band[j * w + (k + kl - j)];
                }
                tmp[j - j0] = s;
                let dj = band[j * w + kl];
                band[i * w + (j + kl - i)] = s / dj;
            }
            let mut d = band[i * w + kl];
            for j in j0..i {
                d -= tmp[j - j0] * band[i * w + (j + kl - i)];
            }
            if !(d.abs() > tiny) {
                return Err(SolveError::Singular { pivot: i, condition: f64::INFINITY });
            }
            band[i * w + kl] = d;
        }
        Ok(Self { n, kl, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, w) = (self.n, self.kl, self.kl + 1);
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(kl)..i {
                s -= self.band[i * w + (j + kl - i)] * x[j];
            }
            x[i] = s;
        }
        for i in 0..n {
            x[i] /= self.band[i * w + kl];
        }
        for i in (0..n).rev() {
            let xi = x[i];
            for j in i.saturating_sub(kl)..i {
                x[j] -= self.band[i * w + (j + kl - i)] * xi;
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    SymmetricLdlt,
    GeneralLu,
}

fn residual_ratio(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let num = ax.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let xn = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bn = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let den = a.max_abs() * xn * a.nrows as f64 + bn;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One step of iterative refinement with an existing factorization.
fn refine(a: &CsrMatrix, b: &[f64], x: &mut [f64], solve: impl Fn(&[f64]) -> Vec<f64>) {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    for (xi, d) in x.iter_mut().zip(solve(&r)) {
        *xi += d;
    }
}

/// Direct solve; symmetric systems try `L D L^T` first and fall back to pivoted LU.
pub fn linear_solve(a: &CsrMatrix, b: &[f64], symmetric: bool) -> Result<(Vec<f64>, SolvePath), SolveError> {
    if a.nrows != a.ncols || b.len() != a.nrows {
        return Err(SolveError::Shape);
    }
    if symmetric {
        if let Ok(f) = BandedLdlt::factor(a) {
            let mut x = f.solve(b);
            if residual_ratio(a, &x, b) > 1e-12 {
                refine(a, b, &mut x, |r| f.solve(r));
            }
            if x.iter().all(|v| v.is_finite()) && residual_ratio(a, &x, b) < 1e-10 {
                return Ok((x, SolvePath::SymmetricLdlt));
            }
        }
    }
    let lu = match BandedLu::factor(a) {
        Ok(f) => f,
        Err(SolveError::Singular { pivot, .. }) => {
            return Err(SolveError::Singular { pivot, condition: crate::diagnostics::condition_estimate(a) })
        }
        Err(e) => return Err(e),
    };
    let mut x = lu.solve(b);
    let mut res = residual_ratio(a, &x, b);
    if res > 1e-12 {
        refine(a, b, &mut x, |r| lu.solve(r));
        res = residual_ratio(a, &x, b);
    }
    if !(res < 1e-8) {
        return Err(SolveError::IllConditioned { residual: res, condition: crate::diagnostics::condition_estimate(a) });
    }
    Ok((x, SolvePath::GeneralLu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    /// Increment tolerance relative to `max(1, |q|_inf)`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Step halvings on failure (load or time increment) and update halvings on inadmissible states.
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 50, max_halvings: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub iterations: usize,
    pub increment_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
    /// Wall time of assembly plus solve, per iteration.
    pub iteration_seconds: Vec<f64>,
    pub constraint_norm: f64,
    pub clamped_flow_points: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn admissible_error(e: &AssemblyError) -> bool {
    matches!(e, AssemblyError::Rod(RodError::Singular { .. }) | AssemblyError::Rod(RodError::GapViolation { .. }))
}

/// Newton iteration on the formulation's global system from the current iterate.
pub fn newton_solve(
    model: &RodModel,
    regime: &Regime,
    it: &mut RodIterate,
    cfg: &NewtonConfig,
) -> Result<NewtonReport, SolverError> {
    newton_solve_prescribed(model, regime, it, &[], cfg)
}

/// Newton iteration that moves fixed dofs to `prescribed` values. The first
/// iteration is the tangent predictor at the current state: the prescribed jump
/// enters the right-hand side through the coupling stiffness, as in standard
/// Dirichlet increments, and the jumped dofs are then set exactly.
pub fn newton_solve_prescribed(
    model: &RodModel,
    regime: &Regime,
    it: &mut RodIterate,
    prescribed: &[(usize, f64)],
    cfg: &NewtonConfig,
) -> Result<NewtonReport, SolverError> {
    let mut report = NewtonReport::default();
    let mut jump = vec![0.0; it.q.len()];
    for &(i, v) in prescribed {
        jump[i] = v - it.q[i];
    }
    let jumped = jump.iter().any(|&d| d != 0.0);
    let jump = model.lift_fixed_jump(&jump);
    // Only the predictor carries the jump; later iterates already hold the prescribed values.
    let set_prescribed = |q: &mut [f64], with_jump: bool| {
        if with_jump {
            q.iter_mut().zip(&jump).for_each(|(x, d)| *x += d);
        }
        prescribed.iter().for_each(|&(i, v)| q[i] = v);
    };
    let mut sys: AssembledSystem = model.assemble_system_shifted(it, regime, jumped.then_some(jump.as_slice()))?;
    let mut last_inc = f64::INFINITY;
    for iter in 1..=cfg.max_iterations {
        let t0 = Instant::now();
        report.residual_norms.push(inf_norm(&sys.rhs));
        let (dx, _) = linear_solve(&sys.matrix, &sys.rhs, sys.symmetric)?;
        let kin_inc = kinematic_increment_norm(model, &dx);
        let mut step = 1.0;
        let mut trial = it.clone();
        model.apply_increment(&mut trial, &dx, step);
        set_prescribed(&mut trial.q, jumped && iter == 1);
        let mut halvings = 0;
        let next = loop {
            match model.assemble_system(&trial, regime) {
                Ok(s) => break s,
                Err(e) if admissible_error(&e) && halvings < cfg.max_halvings => {
                    halvings += 1;
                    step *= 0.5;
                    trial = it.clone();
                    model.apply_increment(&mut trial, &dx, step);
                    set_prescribed(&mut trial.q, jumped && iter == 1);
                }
                Err(e) if admissible_error(&e) => {
                    return Err(SolverError::Inadmissible { halvings, cause: e.to_string() });
                }
                Err(e) => return Err(e.into()),
            }
        };
        *it = trial;
        sys = next;
        report.iteration_seconds.push(t0.elapsed().as_secs_f64());
        report.iterations = iter;
        report.increment_norms.push(kin_inc);
        report.constraint_norm = sys.constraint_norm;
        report.clamped_flow_points += sys.clamped_flow_points;
        last_inc = kin_inc;
        if !kin_inc.is_finite() {
            break;
        }
        let scale = inf_norm(&it.q).max(1.0);
        let predictor = iter == 1 && jumped;
        if kin_inc <= cfg.tolerance * scale && step == 1.0 && !predictor {
            return Ok(report);
        }
    }
    Err(SolverError::NotConverged { iterations: report.iterations, increment: last_inc })
}

fn kinematic_increment_norm(model: &RodModel, dx: &[f64]) -> f64 {
    if let Some(z) = &model.extraction {
        return inf_norm(&z.mul_vec(dx));
    }
    let layout = model.layout();
    dx.iter().zip(&layout.kin_of).filter(|(_, k)| k.is_some()).fold(0.0f64, |m, (v, _)| m.max(v.abs()))
}

/// Target of one static load step: load factor and prescribed dof values.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticTarget {
    pub load_factor: f64,
    pub prescribed: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Newton iterations of every sub-step actually solved.
    pub newton: Vec<NewtonReport>,
    pub halvings: usize,
}

impl StepReport {
    pub fn max_iterations(&self) -> usize {
        self.newton.iter().map(|r| r.iterations).max().unwrap_or(0)
    }

    pub fn total_iterations(&self) -> usize {
        self.newton.iter().map(|r| r.iterations).sum()
    }
}

fn interpolate(a: &StaticTarget, b: &StaticTarget, t: f64) -> StaticTarget {
    StaticTarget {
        load_factor: a.load_factor + t * (b.load_factor - a.load_factor),
        prescribed: b
            .prescribed
            .iter()
            .map(|&(i, vb)| {
                let va = a.prescribed.iter().find(|(j, _)| *j == i).map_or(vb, |&(_, v)| v);
                (i, va + t * (vb - va))
            })
            .collect(),
    }
}

/// Solve one static load step from the converged state at `from`; on failure the
/// increment is halved recursively up to `max_halvings` levels.
pub fn static_step(
    model: &RodModel,
    it: &mut RodIterate,
    from: &StaticTarget,
    to: &StaticTarget,
    cfg: &NewtonConfig,
) -> Result<StepReport, SolverError> {
    fn attempt(
        model: &RodModel,
        it: &mut RodIterate,
        from: &StaticTarget,
        to: &StaticTarget,
        cfg: &NewtonConfig,
        level: usize,
        report: &mut StepReport,
    ) -> Result<(), SolverError> {
        let saved = it.clone();
        let regime = Regime::Static { load_factor: to.load_factor };
        match newton_solve_prescribed(model, &regime, it, &to.prescribed, cfg) {
            Ok(r) => {
                report.newton.push(r);
                Ok(())
            }
            Err(e) => {
                *it = saved;
                if level >= cfg.max_halvings {
                    return Err(SolverError::StepFailed { halvings: level, cause: Box::new(e) });
                }
                report.halvings += 1;
                let mid = interpolate(from, to, 0.5);
                attempt(model, it, from, &mid, cfg, level + 1, report)?;
                attempt(model, it, &mid, to, cfg, level + 1, report)
            }
        }
    }
    let mut report = StepReport::default();
    attempt(model, it, from, to, cfg, 0, &mut report)?;
    Ok(report)
}

/// State of a dynamic simulation at a time level.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    pub t: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// One midpoint step of size `dt`; `load_factor(t)` gives the load factor at time `t`
/// and `prescribed(t)` the prescribed dof values. Failed steps are split in halves.
pub fn dynamic_step(
    model: &RodModel,
    state: &DynamicState,
    dt: f64,
    load_factor: &dyn Fn(f64) -> f64,
    prescribed: &dyn Fn(f64) -> Vec<(usize, f64)>,
    cfg: &NewtonConfig,
) -> Result<(DynamicState, StepReport), SolverError> {
    fn attempt(
        model: &RodModel,
        state: &DynamicState,
        dt: f64,
        load_factor: &dyn Fn(f64) -> f64,
        prescribed: &dyn Fn(f64) -> Vec<(usize, f64)>,
        cfg: &NewtonConfig,
        level: usize,
        report: &mut StepReport,
    ) -> Result<DynamicState, SolverError> {
        let mut it = RodIterate { q: state.q.clone(), lambda: state.lambda.clone() };
        let regime = Regime::Dynamic { dt, q_prev: &state.q, v_prev: &state.v, load_factor: load_factor(state.t + 0.5 * dt) };
        match newton_solve_prescribed(model, &regime, &mut it, &prescribed(state.t + dt), cfg) {
            Ok(r) => {
                report.newton.push(r);
                let v = regime.velocity(&it.q).unwrap();
                Ok(DynamicState { t: state.t + dt, q: it.q, v, lambda: it.lambda })
            }
            Err(e) => {
                if level >= cfg.max_halvings {
                    return Err(SolverError::StepFailed { halvings: level, cause: Box::new(e) });
                }
                report.halvings += 1;
                let half = attempt(model, state, 0.5 * dt, load_factor, prescribed, cfg, level + 1, report)?;
                attempt(model, &half, 0.5 * dt, load_factor, prescribed, cfg, level + 1, report)
            }
        }
    }
    let mut report = StepReport::default();
    let next = attempt(model, state, dt, load_factor, prescribed, cfg, 0, &mut report)?;
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletBuilder;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    fn random_banded(n: usize, kl: usize, ku: usize, sym: bool, seed: u64) -> CsrMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                if sym && j < i {
                    continue;
                }
                let v: f64 = rng.gen_range(-1.0..1.0) + if i == j { 0.1 } else { 0.0 };
                t.push(i, j, v);
                if sym && j > i {
                    t.push(j, i, v);
                }
            }
        }
        t.build()
    }

    #[test]
    fn banded_lu_matches_dense_solution() {
        for seed in 0..5 {
            let a = random_banded(40, 3, 5, false, seed);
            let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
            let lu = BandedLu::factor(&a).unwrap();
            let x = lu.solve(&b);
            let dense = a.to_dense().lu().solve(&DVector::from_vec(b.clone())).unwrap();
            for i in 0..40 {
                assert!((x[i] - dense[i]).abs() < 1e-8 * (1.0 + dense[i].abs()));
            }
            let xt = lu.solve_transpose(&b);
            let dt = a.to_dense().transpose().lu().solve(&DVector::from_vec(b.clone())).unwrap();
            for i in 0..40 {
                assert!((xt[i] - dt[i]).abs() < 1e-8 * (1.0 + dt[i].abs()));
            }
        }
    }

    #[test]
    fn ldlt_solves_symmetric_indefinite_systems() {
        let a = random_banded(30, 4, 4, true, 11);
        let b: Vec<f64> = (0..30).map(|i| 1.0 + i as f64).collect();
        let f = BandedLdlt::factor(&a).unwrap();
        let x = f.solve(&b);
        let r = a.mul_vec(&x);
        for i in 0..30 {
            assert!((r[i] - b[i]).abs() < 1e-8 * (1.0 + b[i].abs()));
        }
    }

    #[test]
    fn saddle_point_falls_back_or_solves() {
        // [[2, 1], [1, 0]] has a zero diagonal entry but is nonsingular.
        let a = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let (x, path) = linear_solve(&a, &[2.0, 3.0], true).unwrap();
        assert_eq!(path, SolvePath::GeneralLu);
        assert!((x[0] - 3.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert!(matches!(linear_solve(&a, &[1.0, 1.0], false), Err(SolveError::Singular { .. })));
    }
}
