//! Univariate B-spline and cubic Hermite spaces on a uniform mesh of `[0, L]`.
//!
//! Splines are parametrised directly in arc length so that basis derivatives
//! are derivatives with respect to the reference coordinate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("degree must be at least 1, got {0}")]
    Degree(usize),
    #[error("continuity {continuity} must satisfy 0 <= r < p = {degree}")]
    Continuity { degree: usize, continuity: usize },
    #[error("mesh needs at least one element")]
    NoElements,
    #[error("rod length must be positive and finite, got {0}")]
    Length(f64),
    #[error("evaluation point {0} outside the parametric domain")]
    OutOfDomain(f64),
    #[error("derivative order {order} exceeds degree {degree}")]
    DerivativeOrder { order: usize, degree: usize },
    #[error("constraint rows are linearly dependent (row {0})")]
    DependentConstraints(usize),
}

/// Gauss-Legendre rule on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(z), p0 = P_{n-1}(z)
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Open B-spline space with uniform breakpoints and interior knots repeated `p - r` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpace {
    pub degree: usize,
    pub continuity: usize,
    pub n_elements: usize,
    pub length: f64,
    pub knots: Vec<f64>,
}

impl SplineSpace {
    pub fn new(degree: usize, continuity: usize, n_elements: usize, length: f64) -> Result<Self, SplineError> {
        if degree < 1 {
            return Err(SplineError::Degree(degree));
        }
        if continuity >= degree {
            return Err(SplineError::Continuity { degree, continuity });
        }
        if n_elements == 0 {
            return Err(SplineError::NoElements);
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(SplineError::Length(length));
        }
        let mult = degree - continuity;
        let mut knots = vec![0.0; degree + 1];
        for e in 1..n_elements {
            let b = length * e as f64 / n_elements as f64;
            knots.extend(std::iter::repeat(b).take(mult));
        }
        knots.extend(std::iter::repeat(length).take(degree + 1));
        Ok(Self { degree, continuity, n_elements, length, knots })
    }

    /// Number of basis functions `n_e (p - r) + r + 1`.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn element_bounds(&self, e: usize) -> (f64, f64) {
        let h = self.length / self.n_elements as f64;
        (h * e as f64, if e + 1 == self.n_elements { self.length } else { h * (e + 1) as f64 })
    }

    /// Knot span index of element `e`; active functions are `span - p ..= span`.
    pub fn element_span(&self, e: usize) -> usize {
        self.degree + e * (self.degree - self.continuity)
    }

    pub fn element_of(&self, s: f64) -> Result<usize, SplineError> {
        if !(s >= -1e-12 * self.length && s <= self.length * (1.0 + 1e-12)) {
            return Err(SplineError::OutOfDomain(s));
        }
        let h = self.length / self.n_elements as f64;
        Ok(((s / h).floor().max(0.0) as usize).min(self.n_elements - 1))
    }

    /// Values and derivatives up to `nders` of the `p + 1` functions active on the span.
    /// Row `k` holds the `k`-th derivative.
    pub fn basis_ders(&self, span: usize, s: f64, nders: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let u = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = s - u[span + 1 - j];
            right[j] = u[span + j] - s;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nders + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nders.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for k in 1..=nders.min(p) {
            for v in ders[k].iter_mut() {
                *v *= fac;
            }
            fac *= (p - k) as f64;
        }
        ders
    }

    /// Derivative of order `order` of every basis function at `s`, as a dense row.
    pub fn derivative_row(&self, s: f64, order: usize) -> Result<Vec<f64>, SplineError> {
        if order > self.degree {
            return Err(SplineError::DerivativeOrder { order, degree: self.degree });
        }
        let e = self.element_of(s)?;
        let span = self.element_span(e);
        let ders = self.basis_ders(span, s, order);
        let mut row = vec![0.0; self.num_basis()];
        for (j, v) in ders[order].iter().enumerate() {
            row[span - self.degree + j] = *v;
        }
        Ok(row)
    }

    /// Greville abscissae; placing control points there reproduces the identity map.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.num_basis())
            .map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64)
            .collect()
    }
}

/// Cubic Hermite space: per node a value and a slope, slope functions scaled by
/// the element length so that slope coefficients are arc-length derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteSpace {
    pub n_elements: usize,
    pub length: f64,
}

impl HermiteSpace {
    pub fn new(n_elements: usize, length: f64) -> Result<Self, SplineError> {
        if n_elements == 0 {
            return Err(SplineError::NoElements);
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(SplineError::Length(length));
        }
        Ok(Self { n_elements, length })
    }

    pub fn num_nodes(&self) -> usize {
        self.n_elements + 1
    }

    pub fn element_length(&self) -> f64 {
        self.length / self.n_elements as f64
    }

    pub fn node_coordinate(&self, j: usize) -> f64 {
        self.element_length() * j as f64
    }

    /// `[value, first, second, third]` derivatives in `s` of `H1..H4` at local `xi`.
    /// Order of functions: left value, left slope, right value, right slope.
    pub fn basis(&self, xi: f64) -> [[f64; 4]; 4] {
        let h = self.element_length();
        let (x2, x3) = (xi * xi, xi * xi * xi);
        let v = [1.0 - 3.0 * x2 + 2.0 * x3, h * (xi - 2.0 * x2 + x3), 3.0 * x2 - 2.0 * x3, h * (-x2 + x3)];
        let d1 = [(-6.0 * xi + 6.0 * x2) / h, 1.0 - 4.0 * xi + 3.0 * x2, (6.0 * xi - 6.0 * x2) / h, -2.0 * xi + 3.0 * x2];
        let d2 = [(-6.0 + 12.0 * xi) / (h * h), (-4.0 + 6.0 * xi) / h, (6.0 - 12.0 * xi) / (h * h), (-2.0 + 6.0 * xi) / h];
        let d3 = [12.0 / (h * h * h), 6.0 / (h * h), -12.0 / (h * h * h), 6.0 / (h * h)];
        [v, d1, d2, d3]
    }
}

/// End condition types that decide which higher boundary derivatives are suppressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    ClampedFree,
    FixedFixed,
    ClampedClamped,
    FixedFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndType {
    Clamped,
    Pinned,
    Free,
}

impl BoundaryKind {
    pub fn ends(self) -> (EndType, EndType) {
        match self {
            BoundaryKind::ClampedFree => (EndType::Clamped, EndType::Free),
            BoundaryKind::FixedFixed => (EndType::Pinned, EndType::Pinned),
            BoundaryKind::ClampedClamped => (EndType::Clamped, EndType::Clamped),
            BoundaryKind::FixedFree => (EndType::Pinned, EndType::Free),
        }
    }
}

/// Derivative orders suppressed at an end: even orders in `[2, p-1]` where the
/// moment vanishes naturally, odd orders in `[3, p-1]` at a clamp.
pub fn suppressed_orders(end: EndType, degree: usize) -> Vec<usize> {
    let start = match end {
        EndType::Clamped => 3,
        EndType::Pinned | EndType::Free => 2,
    };
    (start..degree).step_by(2).collect()
}

/// Dense constraint rows `G` with `G c = 0` on the scalar control coefficients.
pub type ConstraintRowBuilder = fn(&SplineSpace, BoundaryKind) -> Result<Vec<Vec<f64>>, SplineError>;

pub fn higher_derivative_rows(space: &SplineSpace, kind: BoundaryKind) -> Result<Vec<Vec<f64>>, SplineError> {
    let (left, right) = kind.ends();
    let mut rows = Vec::new();
    for k in suppressed_orders(left, space.degree) {
        rows.push(space.derivative_row(0.0, k)?);
    }
    for k in suppressed_orders(right, space.degree) {
        rows.push(space.derivative_row(space.length, k)?);
    }
    Ok(rows)
}

/// Sparse scalar extraction operator `C` (m x m_red): full coefficients `c = C c_red`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionOperator {
    pub n_full: usize,
    pub n_reduced: usize,
    /// Per full index, list of `(reduced column, weight)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Reduced column -> the full index it is the identity on.
    pub column_origin: Vec<usize>,
}

impl ExtractionOperator {
    pub fn identity(n: usize) -> Self {
        Self {
            n_full: n,
            n_reduced: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
            column_origin: (0..n).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_reduced]; self.n_full];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[i][j] += w;
            }
        }
        out
    }

    /// Reduced column of a full index that was kept as a free coefficient.
    pub fn reduced_index_of(&self, full: usize) -> Option<usize> {
        self.column_origin.iter().position(|&o| o == full)
    }

    /// Nullspace basis of `rows` by Gauss-Jordan elimination. Pivots are taken
    /// from columns not listed in `protected`, so protected coefficients stay free.
    pub fn from_constraints(n: usize, rows: &[Vec<f64>], protected: &[usize]) -> Result<Self, SplineError> {
        let mut g: Vec<Vec<f64>> = rows.to_vec();
        let mut pivots: Vec<usize> = Vec::new();
        for r in 0..g.len() {
            let scale = g[r].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut best: Option<(usize, f64)> = None;
            for (c, &v) in g[r].iter().enumerate() {
                if protected.contains(&c) || pivots.contains(&c) {
                    continue;
                }
                if v.abs() > 1e-10 * scale && best.map_or(true, |(_, b)| v.abs() > b) {
                    best = Some((c, v.abs()));
                }
            }
            let (pc, _) = best.ok_or(SplineError::DependentConstraints(r))?;
            let pv = g[r][pc];
            for v in g[r].iter_mut() {
                *v /= pv;
            }
            for o in 0..g.len() {
                if o != r {
                    let f = g[o][pc];
                    if f != 0.0 {
                        for c in 0..n {
                            g[o][c] -= f * g[r][c];
                        }
                    }
                }
            }
            pivots.push(pc);
        }
        let column_origin: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
        let mut col_of = vec![usize::MAX; n];
        for (k, &c) in column_origin.iter().enumerate() {
            col_of[c] = k;
        }
        let mut out_rows = vec![Vec::new(); n];
        for &c in &column_origin {
            out_rows[c].push((col_of[c], 1.0));
        }
        for (r, &pc) in pivots.iter().enumerate() {
            for &c in &column_origin {
                let v = -g[r][c];
                if v.abs() > 1e-14 {
                    out_rows[pc].push((col_of[c], v));
                }
            }
        }
        Ok(Self { n_full: n, n_reduced: column_origin.len(), rows: out_rows, column_origin })
    }
}

/// Outlier-removal extraction for the given end conditions using `builder` rows.
pub fn build_outlier_extraction_with(
    space: &SplineSpace,
    kind: BoundaryKind,
    builder: ConstraintRowBuilder,
    protected: &[usize],
) -> Result<ExtractionOperator, SplineError> {
    let rows = builder(space, kind)?;
    ExtractionOperator::from_constraints(space.num_basis(), &rows, protected)
}

pub fn build_outlier_extraction(space: &SplineSpace, kind: BoundaryKind) -> Result<ExtractionOperator, SplineError> {
    let m = space.num_basis();
    let (left, right) = kind.ends();
    let mut protected = Vec::new();
    for (end, base) in [(left, 0usize), (right, m - 1)] {
        match end {
            EndType::Clamped => {
                protected.push(base);
                protected.push(if base == 0 { 1 } else { m - 2 });
            }
            EndType::Pinned => protected.push(base),
            EndType::Free => {}
        }
    }
    build_outlier_extraction_with(space, kind, higher_derivative_rows, &protected)
}
