//! Element loops, boundary handling and the global systems of every formulation.
//!
//! All discretizations share one kinematic layer: a list of coefficient blocks
//! (three dofs each) with scalar basis functions per block. Spline blocks are
//! control points; Hermite blocks alternate node position and node director.

use crate::constraints::{self, nullspace_pair, reduced_tangent_rows};
use crate::rodcore::{
    rotary_mass, rotary_mass_derivative, section_response, DistributedLoad, EndMoment, RodError, RodProperties,
    SeabedBarrier, M3, V3,
};
use crate::sparse::{CsrMatrix, TripletBuilder};
use crate::splinekit::{
    build_outlier_extraction, gauss_legendre, BoundaryKind, ExtractionOperator, HermiteSpace, SplineError, SplineSpace,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error(transparent)]
    Rod(#[from] RodError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("director of node {0} is only partially prescribed")]
    PartialDirector(usize),
    #[error("formulation {0} does not support {1}")]
    Unsupported(String, &'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Formulation {
    Iga { degree: usize, continuity: usize, outlier_removal: bool },
    NodalR3 { director_scale: f64 },
    NodalSpp { director_scale: f64 },
    NodalSppReduced { director_scale: f64 },
    NodalPenalty { beta: f64, director_scale: f64 },
}

impl Formulation {
    pub fn iga_cubic(continuity: usize) -> Self {
        Formulation::Iga { degree: 3, continuity, outlier_removal: false }
    }

    pub fn label(&self) -> String {
        match self {
            Formulation::Iga { degree, continuity, outlier_removal } => {
                let base = match (degree, continuity) {
                    (3, 1) => "iga".to_string(),
                    (3, 2) => "iga-c2".to_string(),
                    _ => format!("iga-p{degree}c{continuity}"),
                };
                if *outlier_removal {
                    format!("{base}-outlier")
                } else {
                    base
                }
            }
            Formulation::NodalR3 { .. } => "nodal-r3".into(),
            Formulation::NodalSpp { .. } => "spp".into(),
            Formulation::NodalSppReduced { .. } => "spp-reduced".into(),
            Formulation::NodalPenalty { beta, .. } => format!("penalty-{beta:e}"),
        }
    }

    /// Inverse of `label`, with defaults for bare names: `iga` is cubic C1,
    /// `penalty` uses beta = 1e5, nodal director scales are 1.
    pub fn from_label(label: &str) -> Option<Self> {
        let nodal = |f: fn(f64) -> Formulation| Some(f(1.0));
        match label {
            "iga" => Some(Self::iga_cubic(1)),
            "iga-outlier" => Some(Formulation::Iga { degree: 3, continuity: 1, outlier_removal: true }),
            "iga-c2" => Some(Self::iga_cubic(2)),
            "iga-c2-outlier" => Some(Formulation::Iga { degree: 3, continuity: 2, outlier_removal: true }),
            "nodal-r3" => nodal(|a| Formulation::NodalR3 { director_scale: a }),
            "spp" => nodal(|a| Formulation::NodalSpp { director_scale: a }),
            "spp-reduced" => nodal(|a| Formulation::NodalSppReduced { director_scale: a }),
            "penalty" => Some(Formulation::NodalPenalty { beta: 1e5, director_scale: 1.0 }),
            _ => {
                if let Some(b) = label.strip_prefix("penalty-") {
                    let beta: f64 = b.parse().ok()?;
                    return (beta > 0.0).then_some(Formulation::NodalPenalty { beta, director_scale: 1.0 });
                }
                let rest = label.strip_prefix("iga-p")?;
                let (body, outlier) = match rest.strip_suffix("-outlier") {
                    Some(b) => (b, true),
                    None => (rest, false),
                };
                let (p, r) = body.split_once('c')?;
                let (degree, continuity) = (p.parse().ok()?, r.parse().ok()?);
                (continuity >= 1 && continuity < degree).then_some(Formulation::Iga { degree, continuity, outlier_removal: outlier })
            }
        }
    }

    pub fn is_nodal(&self) -> bool {
        !matches!(self, Formulation::Iga { .. })
    }

    pub fn director_scale(&self) -> f64 {
        match *self {
            Formulation::Iga { .. } => 1.0,
            Formulation::NodalR3 { director_scale }
            | Formulation::NodalSpp { director_scale }
            | Formulation::NodalSppReduced { director_scale }
            | Formulation::NodalPenalty { director_scale, .. } => director_scale,
        }
    }

    /// Whether the assembled matrix is symmetric for conservative loads.
    pub fn symmetric(&self, dynamic: bool) -> bool {
        match self {
            Formulation::Iga { .. } | Formulation::NodalR3 { .. } | Formulation::NodalPenalty { .. } => true,
            Formulation::NodalSpp { .. } => !dynamic,
            Formulation::NodalSppReduced { .. } => false,
        }
    }
}

/// Unknown count of the unconstrained system.
pub fn dof_count(formulation: &Formulation, n_elements: usize) -> usize {
    match *formulation {
        Formulation::Iga { degree, continuity, .. } => 3 * (n_elements * (degree - continuity) + continuity + 1),
        Formulation::NodalSpp { .. } => 7 * (n_elements + 1),
        _ => 6 * (n_elements + 1),
    }
}

/// Basis data at one quadrature point: weights already include the Jacobian.
#[derive(Debug, Clone)]
pub struct QuadPoint {
    pub s: f64,
    pub weight: f64,
    pub n: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ElementCache {
    pub blocks: Vec<usize>,
    pub points: Vec<QuadPoint>,
}

#[derive(Debug, Clone)]
pub enum MeshKind {
    Spline(SplineSpace),
    /// Director blocks use slope functions divided by the director scale.
    Hermite { space: HermiteSpace, director_scale: f64 },
}

/// Discretized reference line with cached basis values.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub kind: MeshKind,
    pub n_blocks: usize,
    pub elements: Vec<ElementCache>,
    pub length: f64,
    pub n_elements: usize,
}

impl Mesh {
    pub fn new(formulation: &Formulation, n_elements: usize, length: f64) -> Result<Self, AssemblyError> {
        let kind = match *formulation {
            Formulation::Iga { degree, continuity, .. } => MeshKind::Spline(SplineSpace::new(degree, continuity, n_elements, length)?),
            _ => {
                let alpha = formulation.director_scale();
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(AssemblyError::Unsupported(formulation.label(), "non-positive director scale"));
                }
                MeshKind::Hermite { space: HermiteSpace::new(n_elements, length)?, director_scale: alpha }
            }
        };
        Self::from_kind(kind)
    }

    pub fn from_kind(kind: MeshKind) -> Result<Self, AssemblyError> {
        let (n_elements, length, n_blocks, nq) = match &kind {
            MeshKind::Spline(sp) => (sp.n_elements, sp.length, sp.num_basis(), sp.degree + 1),
            MeshKind::Hermite { space, .. } => (space.n_elements, space.length, 2 * space.num_nodes(), 4),
        };
        let (gx, gw) = gauss_legendre(nq);
        let h = length / n_elements as f64;
        let mut elements = Vec::with_capacity(n_elements);
        for e in 0..n_elements {
            let (a, b) = (h * e as f64, h * (e + 1) as f64);
            let mut points = Vec::with_capacity(nq);
            let blocks = match &kind {
                MeshKind::Spline(sp) => {
                    let span = sp.element_span(e);
                    (span - sp.degree..=span).collect()
                }
                MeshKind::Hermite { .. } => vec![2 * e, 2 * e + 1, 2 * e + 2, 2 * e + 3],
            };
            for (x, w) in gx.iter().zip(&gw) {
                let s = 0.5 * (a + b) + 0.5 * (b - a) * x;
                let (n, d1, d2) = Self::local_basis(&kind, e, s);
                points.push(QuadPoint { s, weight: 0.5 * (b - a) * w, n, d1, d2 });
            }
            elements.push(ElementCache { blocks, points });
        }
        Ok(Self { kind, n_blocks, elements, length, n_elements })
    }

    fn local_basis(kind: &MeshKind, e: usize, s: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match kind {
            MeshKind::Spline(sp) => {
                let ders = sp.basis_ders(sp.element_span(e), s, 2);
                (ders[0].clone(), ders[1].clone(), ders[2].clone())
            }
            MeshKind::Hermite { space, director_scale } => {
                let xi = (s - space.node_coordinate(e)) / space.element_length();
                let b = space.basis(xi);
                let sc = [1.0, 1.0 / director_scale, 1.0, 1.0 / director_scale];
                let f = |row: [f64; 4]| (0..4).map(|i| row[i] * sc[i]).collect::<Vec<_>>();
                (f(b[0]), f(b[1]), f(b[2]))
            }
        }
    }

    /// Blocks and basis values/derivatives at an arbitrary `s`.
    pub fn basis_at(&self, s: f64) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>), AssemblyError> {
        if !(s >= -1e-12 * self.length && s <= self.length * (1.0 + 1e-12)) {
            return Err(SplineError::OutOfDomain(s).into());
        }
        let h = self.length / self.n_elements as f64;
        let e = ((s / h).floor().max(0.0) as usize).min(self.n_elements - 1);
        let (n, d1, d2) = Self::local_basis(&self.kind, e, s.clamp(0.0, self.length));
        Ok((self.elements[e].blocks.clone(), n, d1, d2))
    }

    /// Centerline position and its first two derivatives.
    pub fn evaluate(&self, q: &[f64], s: f64) -> Result<(V3, V3, V3), AssemblyError> {
        let (blocks, n, d1, d2) = self.basis_at(s)?;
        let (mut x, mut g, mut k) = (V3::zeros(), V3::zeros(), V3::zeros());
        for (a, &b) in blocks.iter().enumerate() {
            let c = block(q, b);
            x += n[a] * c;
            g += d1[a] * c;
            k += d2[a] * c;
        }
        Ok((x, g, k))
    }

    pub fn is_nodal(&self) -> bool {
        matches!(self.kind, MeshKind::Hermite { .. })
    }

    pub fn num_nodes(&self) -> usize {
        match &self.kind {
            MeshKind::Hermite { space, .. } => space.num_nodes(),
            MeshKind::Spline(_) => 0,
        }
    }

    pub fn director_scale(&self) -> f64 {
        match &self.kind {
            MeshKind::Hermite { director_scale, .. } => *director_scale,
            MeshKind::Spline(_) => 1.0,
        }
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.n_blocks
    }

    /// Straight reference configuration along `axis` starting at `origin`.
    pub fn straight(&self, origin: V3, axis: V3) -> Vec<f64> {
        let axis = axis.normalize();
        let mut q = vec![0.0; self.n_dofs()];
        match &self.kind {
            MeshKind::Spline(sp) => {
                for (i, gi) in sp.greville().iter().enumerate() {
                    set_block(&mut q, i, &(origin + *gi * axis));
                }
            }
            MeshKind::Hermite { space, director_scale } => {
                for j in 0..space.num_nodes() {
                    set_block(&mut q, 2 * j, &(origin + space.node_coordinate(j) * axis));
                    set_block(&mut q, 2 * j + 1, &(*director_scale * axis));
                }
            }
        }
        q
    }

    /// Blocks whose coefficients fix the end position, and additionally the end tangent.
    pub fn end_blocks(&self, right: bool) -> (usize, usize) {
        let m = self.n_blocks;
        match &self.kind {
            MeshKind::Spline(_) => {
                if right {
                    (m - 1, m - 2)
                } else {
                    (0, 1)
                }
            }
            MeshKind::Hermite { .. } => {
                if right {
                    (m - 2, m - 1)
                } else {
                    (0, 1)
                }
            }
        }
    }
}

#[inline]
pub fn block(q: &[f64], b: usize) -> V3 {
    V3::new(q[3 * b], q[3 * b + 1], q[3 * b + 2])
}

#[inline]
pub fn set_block(q: &mut [f64], b: usize, v: &V3) {
    q[3 * b] = v.x;
    q[3 * b + 1] = v.y;
    q[3 * b + 2] = v.z;
}

/// Kinematic support at one end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Free,
    /// Position prescribed, rotation free.
    Pinned,
    /// Position and tangent prescribed.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supports {
    pub left: Support,
    pub right: Support,
}

impl Supports {
    pub fn boundary_kind(&self) -> Option<BoundaryKind> {
        match (self.left, self.right) {
            (Support::Clamped, Support::Free) => Some(BoundaryKind::ClampedFree),
            (Support::Pinned, Support::Pinned) => Some(BoundaryKind::FixedFixed),
            (Support::Clamped, Support::Clamped) => Some(BoundaryKind::ClampedClamped),
            (Support::Pinned, Support::Free) => Some(BoundaryKind::FixedFree),
            _ => None,
        }
    }

    /// Fixed dof indices of the full kinematic vector.
    pub fn fixed_dofs(&self, mesh: &Mesh) -> Vec<usize> {
        let mut out = Vec::new();
        for (support, right) in [(self.left, false), (self.right, true)] {
            let (pos, tan) = mesh.end_blocks(right);
            let mut blocks = vec![];
            match support {
                Support::Free => {}
                Support::Pinned => blocks.push(pos),
                Support::Clamped => {
                    blocks.push(pos);
                    blocks.push(tan);
                }
            }
            for b in blocks {
                out.extend(3 * b..3 * b + 3);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLoad {
    pub s: f64,
    pub force: [f64; 3],
}

/// External actions; everything except the barrier is scaled by the load factor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Loading {
    pub distributed: DistributedLoad,
    pub point_loads: Vec<PointLoad>,
    pub end_moment: Option<EndMoment>,
    pub barrier: Option<SeabedBarrier>,
}

impl Loading {
    /// True when every load is derivable from a potential.
    pub fn conservative(&self) -> bool {
        self.distributed.drag_coefficient == 0.0 || matches!(self.distributed.flow, crate::rodcore::FlowProfile::None)
    }
}

/// Treatment of the configuration dependence of the rotary mass in the dynamic tangent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InertiaLinearization {
    /// Mass frozen at the midpoint configuration; keeps the tangent symmetric.
    #[default]
    FrozenMass,
    /// Includes the derivative of the rotary mass with respect to the configuration.
    Full,
}

/// Time-discrete evaluation mode.
#[derive(Debug, Clone, Copy)]
pub enum Regime<'a> {
    Static { load_factor: f64 },
    /// Midpoint rule from `(q_prev, v_prev)`; loads use the factor at the midpoint time.
    Dynamic { dt: f64, q_prev: &'a [f64], v_prev: &'a [f64], load_factor: f64 },
}

impl Regime<'_> {
    pub fn is_dynamic(&self) -> bool {
        matches!(self, Regime::Dynamic { .. })
    }

    /// Derivative of the evaluation configuration with respect to the unknown end state.
    pub fn chain(&self) -> f64 {
        if self.is_dynamic() {
            0.5
        } else {
            1.0
        }
    }

    pub fn load_factor(&self) -> f64 {
        match *self {
            Regime::Static { load_factor } => load_factor,
            Regime::Dynamic { load_factor, .. } => load_factor,
        }
    }

    /// Configuration at which forces are evaluated.
    pub fn evaluation_point(&self, q: &[f64]) -> Vec<f64> {
        match *self {
            Regime::Static { .. } => q.to_vec(),
            Regime::Dynamic { q_prev, .. } => q.iter().zip(q_prev).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }

    /// End velocity implied by the trapezoidal rule.
    pub fn velocity(&self, q: &[f64]) -> Option<Vec<f64>> {
        match *self {
            Regime::Static { .. } => None,
            Regime::Dynamic { dt, q_prev, v_prev, .. } => {
                Some(q.iter().zip(q_prev).zip(v_prev).map(|((a, b), v)| 2.0 * (a - b) / dt - v).collect())
            }
        }
    }
}

/// Residual and tangent on the full kinematic vector, before constraints and supports.
#[derive(Debug, Clone)]
pub struct KinematicSystem {
    pub residual: Vec<f64>,
    pub tangent: CsrMatrix,
    /// Number of flow evaluations clamped to the profile domain.
    pub clamped_flow_points: usize,
}

/// Everything needed to evaluate a rod problem.
#[derive(Debug, Clone)]
pub struct RodModel {
    pub props: RodProperties,
    pub formulation: Formulation,
    pub mesh: Mesh,
    pub supports: Supports,
    pub loading: Loading,
    pub fixed: Vec<usize>,
    pub inertia: InertiaLinearization,
    pub singular_tol: f64,
    /// Vector-valued reduction `dq = Z du` for spline meshes assembled by extraction.
    pub extraction: Option<CsrMatrix>,
    /// Kinematic response to a jump of fixed dofs: identity on fixed dofs plus the
    /// dependent controls of the extraction, so jumps keep extraction constraints exact.
    pub fixed_lift: Option<CsrMatrix>,
}

impl RodModel {
    pub fn new(
        props: RodProperties,
        formulation: Formulation,
        n_elements: usize,
        supports: Supports,
        loading: Loading,
    ) -> Result<Self, AssemblyError> {
        props.validate()?;
        let mesh = Mesh::new(&formulation, n_elements, props.length)?;
        let fixed = supports.fixed_dofs(&mesh);
        let extraction = match formulation {
            Formulation::Iga { outlier_removal: true, .. } => {
                let MeshKind::Spline(sp) = &mesh.kind else { unreachable!() };
                let kind = supports
                    .boundary_kind()
                    .ok_or_else(|| AssemblyError::Unsupported(formulation.label(), "these supports"))?;
                let c = build_outlier_extraction(sp, kind)?;
                Some((vector_extraction(&c, &fixed), fixed_lift(&c, &fixed)))
            }
            _ => None,
        };
        let (extraction, fixed_lift) = extraction.unzip();
        if mesh.is_nodal() {
            for j in 0..mesh.num_nodes() {
                let n = (3 * (2 * j + 1)..3 * (2 * j + 2)).filter(|i| fixed.contains(i)).count();
                if n != 0 && n != 3 {
                    return Err(AssemblyError::PartialDirector(j));
                }
            }
        }
        Ok(Self {
            singular_tol: 1e-10 * props.length / n_elements as f64,
            props,
            formulation,
            mesh,
            supports,
            loading,
            fixed,
            inertia: InertiaLinearization::default(),
            extraction,
            fixed_lift,
        })
    }

    pub fn n_kinematic(&self) -> usize {
        self.mesh.n_dofs()
    }

    pub fn free_dofs(&self) -> Vec<usize> {
        let mut is_fixed = vec![false; self.n_kinematic()];
        for &i in &self.fixed {
            is_fixed[i] = true;
        }
        (0..self.n_kinematic()).filter(|&i| !is_fixed[i]).collect()
    }

    /// Nodes whose director is free and therefore carries a constraint.
    pub fn constrained_nodes(&self) -> Vec<usize> {
        if !self.mesh.is_nodal() {
            return vec![];
        }
        (0..self.mesh.num_nodes()).filter(|&j| !self.fixed.contains(&(6 * j + 3))).collect()
    }

    pub fn initial_configuration(&self, origin: V3, axis: V3) -> Vec<f64> {
        self.mesh.straight(origin, axis)
    }

    /// Assemble residual and tangent of the kinematic layer.
    pub fn assemble_kinematic(&self, q: &[f64], regime: &Regime) -> Result<KinematicSystem, AssemblyError> {
        let n = self.n_kinematic();
        if q.len() != n {
            return Err(AssemblyError::Dimension(format!("q has {} entries, expected {n}", q.len())));
        }
        let chain = regime.chain();
        let factor = regime.load_factor();
        let qe = regime.evaluation_point(q);
        let accel: Option<(Vec<f64>, f64)> = match *regime {
            Regime::Static { .. } => None,
            Regime::Dynamic { dt, v_prev, .. } => {
                let v = regime.velocity(q).unwrap();
                Some((v.iter().zip(v_prev).map(|(a, b)| (a - b) / dt).collect(), dt))
            }
        };
        let p = &self.props;
        let mut residual = vec![0.0; n];
        let nloc = self.mesh.elements.first().map_or(0, |e| e.blocks.len());
        let mut trip = TripletBuilder::with_capacity(n, n, self.mesh.n_elements * nloc * nloc * 9 + 64);
        let mut ksym = vec![M3::zeros(); nloc * nloc];
        let mut kgen = vec![M3::zeros(); nloc * nloc];
        let mut clamped_flow_points = 0;
        let ez = V3::z();
        for el in &self.mesh.elements {
            let nb = el.blocks.len();
            ksym.iter_mut().for_each(|m| *m = M3::zeros());
            kgen.iter_mut().for_each(|m| *m = M3::zeros());
            let coeffs: Vec<V3> = el.blocks.iter().map(|&b| block(&qe, b)).collect();
            for qp in &el.points {
                let (mut x, mut g, mut k) = (V3::zeros(), V3::zeros(), V3::zeros());
                for a in 0..nb {
                    x += qp.n[a] * coeffs[a];
                    g += qp.d1[a] * coeffs[a];
                    k += qp.d2[a] * coeffs[a];
                }
                let w = qp.weight;
                let sec = section_response(p, &g, &k, self.singular_tol)?;
                let (fl, dfl, clamped) = self.loading.distributed.density(&x, factor);
                if clamped {
                    clamped_flow_points += 1;
                }
                let (mut fz, mut dfz) = (0.0, 0.0);
                if let Some(bar) = &self.loading.barrier {
                    let (_, f, df) = bar.evaluate(x.z)?;
                    fz = f;
                    dfz = df;
                }
                let ext = fl + fz * ez;
                let (mut acc, mut acc_d, mut mrot) = (V3::zeros(), V3::zeros(), M3::zeros());
                let mut inertia_scale = 0.0;
                if let Some((a_vec, dt)) = &accel {
                    for a in 0..nb {
                        let ab = block(a_vec, el.blocks[a]);
                        acc += qp.n[a] * ab;
                        acc_d += qp.d1[a] * ab;
                    }
                    mrot = rotary_mass(p, &g);
                    inertia_scale = 2.0 / (dt * dt);
                }
                let mass_deriv = if accel.is_some() && self.inertia == InertiaLinearization::Full {
                    Some(rotary_mass_derivative(p, &g, &acc_d))
                } else {
                    None
                };
                for a in 0..nb {
                    let ra = w
                        * (qp.d1[a] * sec.force_g + qp.d2[a] * sec.force_k - qp.n[a] * ext
                            + p.line_density * qp.n[a] * acc
                            + qp.d1[a] * (mrot * acc_d));
                    let ia = 3 * el.blocks[a];
                    residual[ia] += ra.x;
                    residual[ia + 1] += ra.y;
                    residual[ia + 2] += ra.z;
                    for b in a..nb {
                        let (na, nb_) = (qp.n[a], qp.n[b]);
                        let (ga, gb) = (qp.d1[a], qp.d1[b]);
                        let (ka, kb) = (qp.d2[a], qp.d2[b]);
                        let mut m = chain
                            * (ga * gb * sec.t_gg + ga * kb * sec.t_gk + ka * gb * sec.t_kg() + ka * kb * sec.t_kk);
                        m[(2, 2)] -= chain * na * nb_ * dfz;
                        if inertia_scale != 0.0 {
                            m += inertia_scale * (p.line_density * na * nb_ * M3::identity() + ga * gb * mrot);
                        }
                        ksym[a * nb + b] += w * m;
                    }
                    if dfl != M3::zeros() || mass_deriv.is_some() {
                        for b in 0..nb {
                            let mut m = -chain * qp.n[a] * qp.n[b] * dfl;
                            if let Some(md) = &mass_deriv {
                                m += chain * qp.d1[a] * qp.d1[b] * md;
                            }
                            kgen[a * nb + b] += w * m;
                        }
                    }
                }
            }
            for a in 0..nb {
                for b in 0..nb {
                    let m = if b >= a { ksym[a * nb + b] } else { ksym[b * nb + a].transpose() } + kgen[a * nb + b];
                    trip.push_block3(3 * el.blocks[a], 3 * el.blocks[b], &m);
                }
            }
        }
        for pl in &self.loading.point_loads {
            let (blocks, nv, _, _) = self.mesh.basis_at(pl.s)?;
            let f = factor * V3::from(pl.force);
            for (a, &b) in blocks.iter().enumerate() {
                for c in 0..3 {
                    residual[3 * b + c] -= nv[a] * f[c];
                }
            }
        }
        if let Some(em) = &self.loading.end_moment {
            let (blocks, _, d1, _) = self.mesh.basis_at(self.mesh.length)?;
            let mut g = V3::zeros();
            for (a, &b) in blocks.iter().enumerate() {
                g += d1[a] * block(&qe, b);
            }
            let (f, df) = em.force(&g, factor);
            for (a, &ba) in blocks.iter().enumerate() {
                if d1[a] == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    residual[3 * ba + c] -= d1[a] * f[c];
                }
                for (b, &bb) in blocks.iter().enumerate() {
                    if d1[b] != 0.0 {
                        trip.push_block3(3 * ba, 3 * bb, &(-chain * d1[a] * d1[b] * df));
                    }
                }
            }
        }
        Ok(KinematicSystem { residual, tangent: trip.build(), clamped_flow_points })
    }
}

/// Columns of the vector extraction that belong to fixed dofs, indexed by those dofs.
fn fixed_lift(c: &ExtractionOperator, fixed: &[usize]) -> CsrMatrix {
    let mut t = TripletBuilder::new(3 * c.n_full, 3 * c.n_full);
    for (i, row) in c.rows.iter().enumerate() {
        for &(k, w) in row {
            for comp in 0..3 {
                let origin = 3 * c.column_origin[k] + comp;
                if fixed.contains(&origin) {
                    t.push(3 * i + comp, origin, w);
                }
            }
        }
    }
    t.build()
}

/// Lift a scalar extraction to vector coefficients and drop fixed columns.
pub fn vector_extraction(c: &ExtractionOperator, fixed: &[usize]) -> CsrMatrix {
    let mut keep = Vec::new();
    for k in 0..c.n_reduced {
        for comp in 0..3 {
            let origin_dof = 3 * c.column_origin[k] + comp;
            if !fixed.contains(&origin_dof) {
                keep.push(3 * k + comp);
            }
        }
    }
    let mut col_map = vec![usize::MAX; 3 * c.n_reduced];
    for (new, &old) in keep.iter().enumerate() {
        col_map[old] = new;
    }
    let mut t = TripletBuilder::new(3 * c.n_full, keep.len());
    for (i, row) in c.rows.iter().enumerate() {
        for &(k, w) in row {
            for comp in 0..3 {
                let col = col_map[3 * k + comp];
                if col != usize::MAX {
                    t.push(3 * i + comp, col, w);
                }
            }
        }
    }
    t.build()
}

/// Unknowns of the global system: kinematic dofs and, for multiplier treatments, one
/// multiplier per constrained node.
#[derive(Debug, Clone, PartialEq)]
pub struct RodIterate {
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Linear system for the Newton increment, `matrix * dx = rhs`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub symmetric: bool,
    /// Norm of the constraint residual part (zero when no constraint rows exist).
    pub constraint_norm: f64,
    pub clamped_flow_points: usize,
}

/// Maps between global system indices and model unknowns.
#[derive(Debug, Clone)]
pub struct SystemLayout {
    pub n: usize,
    /// For each system column: kinematic dof (`Some`) or multiplier node (`None`, node index in `lambda_node`).
    pub kin_of: Vec<Option<usize>>,
    pub lambda_node: Vec<Option<usize>>,
}

impl RodModel {
    pub fn layout(&self) -> SystemLayout {
        let free = self.free_dofs();
        match self.formulation {
            Formulation::Iga { .. } if self.extraction.is_some() => {
                let n = self.extraction.as_ref().unwrap().ncols;
                SystemLayout { n, kin_of: vec![None; n], lambda_node: vec![None; n] }
            }
            Formulation::NodalSpp { .. } => {
                let cn = self.constrained_nodes();
                let mut kin_of = Vec::new();
                let mut lambda_node = Vec::new();
                let mut fi = 0;
                for j in 0..self.mesh.num_nodes() {
                    while fi < free.len() && free[fi] < 6 * (j + 1) {
                        kin_of.push(Some(free[fi]));
                        lambda_node.push(None);
                        fi += 1;
                    }
                    if cn.contains(&j) {
                        kin_of.push(None);
                        lambda_node.push(Some(j));
                    }
                }
                SystemLayout { n: kin_of.len(), kin_of, lambda_node }
            }
            _ => SystemLayout { n: free.len(), kin_of: free.iter().map(|&i| Some(i)).collect(), lambda_node: vec![None; free.len()] },
        }
    }

    /// Apply a Newton increment to the iterate.
    pub fn apply_increment(&self, it: &mut RodIterate, dx: &[f64], step: f64) {
        if let Some(z) = &self.extraction {
            let dq = z.mul_vec(dx);
            for (q, d) in it.q.iter_mut().zip(dq) {
                *q += step * d;
            }
            return;
        }
        let layout = self.layout();
        for (k, &d) in dx.iter().enumerate() {
            if let Some(i) = layout.kin_of[k] {
                it.q[i] += step * d;
            } else if let Some(j) = layout.lambda_node[k] {
                it.lambda[j] += step * d;
            }
        }
    }

    /// Kinematic change caused by `jump`, a vector nonzero only on fixed dofs.
    pub fn lift_fixed_jump(&self, jump: &[f64]) -> Vec<f64> {
        match &self.fixed_lift {
            Some(l) => l.mul_vec(jump),
            None => jump.to_vec(),
        }
    }

    pub fn new_iterate(&self, q: Vec<f64>) -> RodIterate {
        RodIterate { q, lambda: vec![0.0; self.mesh.num_nodes()] }
    }

    /// Global Newton system of the configured formulation.
    pub fn assemble_system(&self, it: &RodIterate, regime: &Regime) -> Result<AssembledSystem, AssemblyError> {
        self.assemble_system_shifted(it, regime, None)
    }

    /// Global system with the kinematic residual advanced linearly by `shift`, a
    /// kinematic vector that is nonzero only on fixed dofs. Its solution is the
    /// tangent predictor for a prescribed jump of those dofs.
    pub fn assemble_system_shifted(
        &self,
        it: &RodIterate,
        regime: &Regime,
        shift: Option<&[f64]>,
    ) -> Result<AssembledSystem, AssemblyError> {
        let mut ks = self.assemble_kinematic(&it.q, regime)?;
        if let Some(dq) = shift {
            for (r, k) in ks.residual.iter_mut().zip(ks.tangent.mul_vec(dq)) {
                *r += k;
            }
        }
        let dynamic = regime.is_dynamic();
        let conservative = self.loading.conservative() && (!dynamic || self.inertia == InertiaLinearization::FrozenMass);
        let symmetric = self.formulation.symmetric(dynamic) && conservative;
        let clamped = ks.clamped_flow_points;
        let free = self.free_dofs();
        let alpha = self.mesh.director_scale();
        let chain = regime.chain();
        // Directors at which multiplier forces and nullspace bases are evaluated.
        let qe = regime.evaluation_point(&it.q);
        let director = |v: &[f64], j: usize| block(v, 2 * j + 1);
        match self.formulation {
            Formulation::Iga { .. } | Formulation::NodalR3 { .. } => {
                let (matrix, rhs) = self.reduce(&ks.tangent, &ks.residual, &free);
                Ok(AssembledSystem { matrix, rhs, symmetric, constraint_norm: 0.0, clamped_flow_points: clamped })
            }
            Formulation::NodalPenalty { beta, .. } => {
                let c = constraints::penalty_scale(beta, self.props.bending_stiffness, self.props.length);
                let mut r = ks.residual.clone();
                let mut t = TripletBuilder::new(self.n_kinematic(), self.n_kinematic());
                let mut cn = 0.0f64;
                for j in self.constrained_nodes() {
                    let d = director(&it.q, j);
                    let (f, a) = constraints::penalty_terms(&d, alpha, c);
                    cn = cn.max(constraints::director_constraint(&d, alpha).abs());
                    for comp in 0..3 {
                        r[6 * j + 3 + comp] += f[comp];
                    }
                    t.push_block3(6 * j + 3, 6 * j + 3, &a);
                }
                let k = add_csr(&ks.tangent, &t.build());
                let (matrix, rhs) = self.reduce(&k, &r, &free);
                Ok(AssembledSystem { matrix, rhs, symmetric, constraint_norm: cn, clamped_flow_points: clamped })
            }
            Formulation::NodalSpp { .. } => {
                let layout = self.layout();
                let mut sys_of_kin = vec![usize::MAX; self.n_kinematic()];
                let mut sys_of_node = vec![usize::MAX; self.mesh.num_nodes()];
                for k in 0..layout.n {
                    if let Some(i) = layout.kin_of[k] {
                        sys_of_kin[i] = k;
                    }
                    if let Some(j) = layout.lambda_node[k] {
                        sys_of_node[j] = k;
                    }
                }
                let mut r = ks.residual.clone();
                let mut extra = TripletBuilder::new(self.n_kinematic(), self.n_kinematic());
                let mut t = TripletBuilder::with_capacity(layout.n, layout.n, ks.tangent.nnz() + 8 * layout.n);
                let mut rhs = vec![0.0; layout.n];
                let mut cn = 0.0f64;
                for j in self.constrained_nodes() {
                    let lam = it.lambda[j];
                    let d_force = director(&qe, j);
                    let d_end = director(&it.q, j);
                    let jf = constraints::jacobian_row(&d_force);
                    let je = constraints::jacobian_row(&d_end);
                    for comp in 0..3 {
                        r[6 * j + 3 + comp] += lam * jf[comp];
                    }
                    extra.push_block3(6 * j + 3, 6 * j + 3, &constraints::multiplier_tangent(lam, chain));
                    let row = sys_of_node[j];
                    let psi = constraints::director_constraint(&d_end, alpha);
                    cn = cn.max(psi.abs());
                    rhs[row] = -psi;
                    for comp in 0..3 {
                        let col = sys_of_kin[6 * j + 3 + comp];
                        t.push(col, row, jf[comp]);
                        t.push(row, col, je[comp]);
                    }
                }
                let k = add_csr(&ks.tangent, &extra.build());
                for i in 0..self.n_kinematic() {
                    let si = sys_of_kin[i];
                    if si == usize::MAX {
                        continue;
                    }
                    rhs[si] = -r[i];
                    for (jc, v) in k.row(i) {
                        let sj = sys_of_kin[jc];
                        if sj != usize::MAX {
                            t.push(si, sj, v);
                        }
                    }
                }
                Ok(AssembledSystem { matrix: t.build(), rhs, symmetric, constraint_norm: cn, clamped_flow_points: clamped })
            }
            Formulation::NodalSppReduced { .. } => {
                self.assemble_reduced(&ks, it, &qe, &free, chain, alpha, clamped)
            }
        }
    }

    fn reduce(&self, k: &CsrMatrix, r: &[f64], free: &[usize]) -> (CsrMatrix, Vec<f64>) {
        if let Some(z) = &self.extraction {
            let zt = z.transpose();
            let m = zt.matmul(&k.matmul(z));
            let rhs = zt.mul_vec(r).into_iter().map(|v| -v).collect();
            (m, rhs)
        } else {
            (k.select(free, free), free.iter().map(|&i| -r[i]).collect())
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_reduced(
        &self,
        ks: &KinematicSystem,
        it: &RodIterate,
        qe: &[f64],
        free: &[usize],
        chain: f64,
        alpha: f64,
        clamped: usize,
    ) -> Result<AssembledSystem, AssemblyError> {
        let nf = free.len();
        let mut free_idx = vec![usize::MAX; self.n_kinematic()];
        for (k, &i) in free.iter().enumerate() {
            free_idx[i] = k;
        }
        let cn_nodes = self.constrained_nodes();
        // Columns of D per node: free positions, then two duals; rows of the final system
        // follow the same per-node order with the constraint row appended.
        let mut dtrip = TripletBuilder::new(nf, nf);
        let mut dcol = 0usize;
        let mut sys_row_of_dcol = Vec::with_capacity(nf);
        let mut sys_row = 0usize;
        let mut constraint_rows: Vec<(usize, usize)> = Vec::new();
        let mut dual_rows: Vec<(usize, usize, [usize; 2])> = Vec::new();
        for j in 0..self.mesh.num_nodes() {
            for comp in 0..3 {
                let fi = free_idx[6 * j + comp];
                if fi != usize::MAX {
                    dtrip.push(fi, dcol, 1.0);
                    sys_row_of_dcol.push(sys_row);
                    dcol += 1;
                    sys_row += 1;
                }
            }
            if cn_nodes.contains(&j) {
                let d = block(qe, 2 * j + 1);
                let (pair, cols) = nullspace_pair(&d);
                for c in cols.iter() {
                    for comp in 0..3 {
                        dtrip.push(free_idx[6 * j + 3 + comp], dcol, c[comp]);
                    }
                    sys_row_of_dcol.push(sys_row);
                    dcol += 1;
                    sys_row += 1;
                }
                dual_rows.push((j, sys_row - 2, pair));
                constraint_rows.push((j, sys_row));
                sys_row += 1;
            }
        }
        if sys_row != nf {
            return Err(AssemblyError::Dimension(format!("reduced system has {sys_row} rows for {nf} unknowns")));
        }
        let dmat = {
            let mut t = dtrip;
            t.ncols = dcol;
            t.build()
        };
        let kf = ks.tangent.select(free, free);
        let rf: Vec<f64> = free.iter().map(|&i| ks.residual[i]).collect();
        let dt = dmat.transpose();
        let dtk = dt.matmul(&kf);
        let dtr = dt.mul_vec(&rf);
        let mut t = TripletBuilder::with_capacity(nf, nf, dtk.nnz() + 6 * nf);
        let mut rhs = vec![0.0; nf];
        for c in 0..dcol {
            let row = sys_row_of_dcol[c];
            rhs[row] = -dtr[c];
            for (col, v) in dtk.row(c) {
                t.push(row, col, v);
            }
        }
        for &(j, row0, pair) in &dual_rows {
            let rd = block(&ks.residual, 2 * j + 1);
            let rows = reduced_tangent_rows(pair, &rd, chain);
            for (k, rv) in rows.iter().enumerate() {
                for comp in 0..3 {
                    t.push(row0 + k, free_idx[6 * j + 3 + comp], rv[comp]);
                }
            }
        }
        let mut cn = 0.0f64;
        for &(j, row) in &constraint_rows {
            let d = block(&it.q, 2 * j + 1);
            let jr = constraints::jacobian_row(&d);
            let psi = constraints::director_constraint(&d, alpha);
            cn = cn.max(psi.abs());
            rhs[row] = -psi;
            for comp in 0..3 {
                t.push(row, free_idx[6 * j + 3 + comp], jr[comp]);
            }
        }
        Ok(AssembledSystem { matrix: t.build(), rhs, symmetric: false, constraint_norm: cn, clamped_flow_points: clamped })
    }
}

pub fn add_csr(a: &CsrMatrix, b: &CsrMatrix) -> CsrMatrix {
    let mut t = TripletBuilder::with_capacity(a.nrows, a.ncols, a.nnz() + b.nnz());
    for m in [a, b] {
        for i in 0..m.nrows {
            for (j, v) in m.row(i) {
                t.push(i, j, v);
            }
        }
    }
    t.build()
}
