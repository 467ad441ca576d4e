//! Pointwise Kirchhoff rod mechanics in terms of the centerline derivatives
//! `g = phi'` and `k = phi''`, plus distributed loads, end loads and the seabed barrier.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type V3 = Vector3<f64>;
pub type M3 = Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RodError {
    #[error("singular configuration: |phi'| = {norm:e} below tolerance {tol:e}")]
    Singular { norm: f64, tol: f64 },
    #[error("barrier gap {gap:e} is not positive at height {z}")]
    GapViolation { gap: f64, z: f64 },
    #[error("invalid rod property {name} = {value}")]
    Property { name: &'static str, value: f64 },
}

/// Section stiffness and inertia per unit reference length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RodProperties {
    pub length: f64,
    /// Axial stiffness `EA`.
    pub axial_stiffness: f64,
    /// Bending stiffness `EI`.
    pub bending_stiffness: f64,
    /// Mass per unit length `rho A`.
    pub line_density: f64,
    /// Rotary inertia per unit length `rho I`.
    pub rotary_inertia: f64,
}

impl RodProperties {
    /// Solid circular section of diameter `diameter`.
    pub fn circular(young: f64, density: f64, diameter: f64, length: f64) -> Self {
        let area = std::f64::consts::PI * diameter * diameter / 4.0;
        let inertia = std::f64::consts::PI * diameter.powi(4) / 64.0;
        Self {
            length,
            axial_stiffness: young * area,
            bending_stiffness: young * inertia,
            line_density: density * area,
            rotary_inertia: density * inertia,
        }
    }

    pub fn validate(&self) -> Result<(), RodError> {
        let checks = [
            ("length", self.length, self.length > 0.0),
            ("axial_stiffness", self.axial_stiffness, self.axial_stiffness > 0.0),
            ("bending_stiffness", self.bending_stiffness, self.bending_stiffness > 0.0),
            ("line_density", self.line_density, self.line_density >= 0.0),
            ("rotary_inertia", self.rotary_inertia, self.rotary_inertia >= 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(RodError::Property { name, value });
            }
        }
        Ok(())
    }
}

pub fn skew(a: &V3) -> M3 {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Director, stretch and curvature at a point.
#[derive(Debug, Clone, Copy)]
pub struct Kinematics {
    pub g: V3,
    pub k: V3,
    pub norm: f64,
    pub director: V3,
    /// `g - d`.
    pub stretch: V3,
    /// `d x d'`.
    pub curvature: V3,
}

pub fn kinematics(g: &V3, k: &V3, singular_tol: f64) -> Result<Kinematics, RodError> {
    let norm = g.norm();
    if !(norm >= singular_tol) || !norm.is_finite() {
        return Err(RodError::Singular { norm, tol: singular_tol });
    }
    let director = g / norm;
    Ok(Kinematics {
        g: *g,
        k: *k,
        norm,
        director,
        stretch: g - director,
        curvature: g.cross(k) / (norm * norm),
    })
}

/// Axial and bending stress resultants.
pub fn stresses(p: &RodProperties, kin: &Kinematics) -> (V3, V3) {
    (p.axial_stiffness * kin.stretch, p.bending_stiffness * kin.curvature)
}

pub fn strain_energy_density(p: &RodProperties, kin: &Kinematics) -> f64 {
    0.5 * p.axial_stiffness * kin.stretch.norm_squared() + 0.5 * p.bending_stiffness * kin.curvature.norm_squared()
}

/// Blocks of the strain operator: `d(stretch) = E dg`, `d(curvature) = Kg dg + Kk dk`.
pub fn strain_operator(kin: &Kinematics) -> (M3, M3, M3) {
    let d = kin.director;
    let ddt = d * d.transpose();
    let proj = M3::identity() - ddt;
    let householder = M3::identity() - 2.0 * ddt;
    let n2 = kin.norm * kin.norm;
    let e = M3::identity() - proj / kin.norm;
    let kg = -skew(&kin.k) * householder / n2;
    let kk = skew(&d) / kin.norm;
    (e, kg, kk)
}

/// Energy density, its gradient with respect to `(g, k)` and the 6x6 Hessian in 3x3 blocks.
#[derive(Debug, Clone, Copy)]
pub struct SectionResponse {
    pub energy: f64,
    pub force_g: V3,
    pub force_k: V3,
    pub t_gg: M3,
    pub t_gk: M3,
    pub t_kk: M3,
}

impl SectionResponse {
    pub fn t_kg(&self) -> M3 {
        self.t_gk.transpose()
    }
}

pub fn section_response(p: &RodProperties, g: &V3, k: &V3, singular_tol: f64) -> Result<SectionResponse, RodError> {
    let kin = kinematics(g, k, singular_tol)?;
    let (n, m) = stresses(p, &kin);
    let (e, kg, kk) = strain_operator(&kin);
    let (ea, ei) = (p.axial_stiffness, p.bending_stiffness);
    let force_g = e.transpose() * n + kg.transpose() * m;
    let force_k = kk.transpose() * m;

    let ng = kin.norm;
    let (n2, n3) = (ng * ng, ng * ng * ng);
    let n4 = n2 * n2;
    let ggt = g * g.transpose();
    let ngd = n.dot(g);
    let geo_axial = (n * g.transpose() + g * n.transpose() + ngd * M3::identity() - 3.0 * ngd * ggt / n2) / n3;

    let c = g.cross(k);
    let mc = m.dot(&c);
    let km = k.cross(&m);
    let mg = m.cross(g);
    let geo_bend_gg =
        -2.0 * (km * g.transpose() + g * km.transpose()) / n4 - 2.0 * mc * M3::identity() / n4 + 8.0 * mc * ggt / (n4 * n2);
    let geo_bend_gk = -skew(&m) / n2 - 2.0 * g * mg.transpose() / n4;

    let t_gg = ea * e.transpose() * e + ei * kg.transpose() * kg + geo_axial + geo_bend_gg;
    let t_gk = ei * kg.transpose() * kk + geo_bend_gk;
    let t_kk = ei * kk.transpose() * kk;
    Ok(SectionResponse {
        energy: strain_energy_density(p, &kin),
        force_g,
        force_k,
        t_gg: 0.5 * (t_gg + t_gg.transpose()),
        t_gk,
        t_kk: 0.5 * (t_kk + t_kk.transpose()),
    })
}

/// Rotary part of the mass density, `rho I P_d / |g|^2`.
pub fn rotary_mass(p: &RodProperties, g: &V3) -> M3 {
    let n2 = g.norm_squared();
    p.rotary_inertia * (M3::identity() / n2 - g * g.transpose() / (n2 * n2))
}

/// Derivative with respect to `g` of `rotary_mass(g) * y`.
pub fn rotary_mass_derivative(p: &RodProperties, g: &V3, y: &V3) -> M3 {
    let n2 = g.norm_squared();
    let n4 = n2 * n2;
    let gy = g.dot(y);
    p.rotary_inertia
        * (-2.0 * y * g.transpose() / n4 - (gy * M3::identity() + g * y.transpose()) / n4
            + 4.0 * gy * g * g.transpose() / (n4 * n2))
}

/// Horizontal flow speed as a function of height, clamped to `[z_min, z_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowProfile {
    None,
    /// `v = speed_ref * z / z_ref`.
    Linear { speed_ref: f64, z_ref: f64, z_min: f64, z_max: f64 },
    /// `v = amplitude * ln(1 + shape * z / z_ref)`.
    Logarithmic { amplitude: f64, shape: f64, z_ref: f64, z_min: f64, z_max: f64 },
}

impl FlowProfile {
    /// Speed, its height derivative, and whether `z` was clamped.
    pub fn speed(&self, z: f64) -> (f64, f64, bool) {
        match *self {
            FlowProfile::None => (0.0, 0.0, false),
            FlowProfile::Linear { speed_ref, z_ref, z_min, z_max } => {
                let zc = z.clamp(z_min, z_max);
                let inside = zc == z;
                (speed_ref * zc / z_ref, if inside { speed_ref / z_ref } else { 0.0 }, !inside)
            }
            FlowProfile::Logarithmic { amplitude, shape, z_ref, z_min, z_max } => {
                let zc = z.clamp(z_min, z_max);
                let inside = zc == z;
                let arg = 1.0 + shape * zc / z_ref;
                (amplitude * arg.ln(), if inside { amplitude * shape / (z_ref * arg) } else { 0.0 }, !inside)
            }
        }
    }
}

/// Dead weight plus quadratic drag from a height-dependent flow, per unit reference length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributedLoad {
    pub weight: [f64; 3],
    pub flow: FlowProfile,
    pub drag_coefficient: f64,
    pub flow_direction: [f64; 3],
}

impl Default for DistributedLoad {
    fn default() -> Self {
        Self { weight: [0.0; 3], flow: FlowProfile::None, drag_coefficient: 0.0, flow_direction: [1.0, 0.0, 0.0] }
    }
}

impl DistributedLoad {
    /// Load density at position `x` scaled by `factor`, with its derivative in `x`.
    pub fn density(&self, x: &V3, factor: f64) -> (V3, M3, bool) {
        let w = V3::from(self.weight) * factor;
        let (v, dv, clamped) = self.flow.speed(x.z);
        let dir = V3::from(self.flow_direction);
        let f = w + factor * self.drag_coefficient * v * v * dir;
        let mut df = M3::zeros();
        let col = factor * self.drag_coefficient * 2.0 * v * dv * dir;
        df.set_column(2, &col);
        (f, df, clamped)
    }

    /// Potential of the conservative (weight) part.
    pub fn weight_potential(&self, x: &V3, factor: f64) -> f64 {
        -factor * V3::from(self.weight).dot(x)
    }
}

/// Reciprocal barrier below the rod: potential `strength / (z - z_barrier)` per unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeabedBarrier {
    pub z_barrier: f64,
    pub strength: f64,
}

impl SeabedBarrier {
    /// Potential, upward force and `d(force_z)/dz`.
    pub fn evaluate(&self, z: f64) -> Result<(f64, f64, f64), RodError> {
        let gap = z - self.z_barrier;
        if !(gap > 0.0) {
            return Err(RodError::GapViolation { gap, z });
        }
        let e = self.strength;
        Ok((e / gap, e / (gap * gap), -2.0 * e / (gap * gap * gap)))
    }
}

/// Moment about a fixed `axis` applied to the end tangent: potential `-M theta(g)` where
/// `theta` is the angle of `g` projected on the plane normal to `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndMoment {
    pub magnitude: f64,
    pub axis: [f64; 3],
}

impl EndMoment {
    /// Generalized force conjugate to `g` and its derivative.
    pub fn force(&self, g: &V3, factor: f64) -> (V3, M3) {
        let e = V3::from(self.axis).normalize();
        let gp = g - e * e.dot(g);
        let q = gp.norm_squared();
        let eg = e.cross(g);
        let mag = self.magnitude * factor;
        let f = mag * eg / q;
        let df = mag * (skew(&e) / q - 2.0 * eg * gp.transpose() / (q * q));
        (f, df)
    }
}
