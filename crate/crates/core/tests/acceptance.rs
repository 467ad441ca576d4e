//! Acceptance suite: one test per benchmark criterion, each printing a single
//! PASS/FAIL line (written to stderr directly so it survives output capture).

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rodlab_core::assembly::{
    block, dof_count, set_block, Formulation, InertiaLinearization, Mesh, Regime, RodIterate, RodModel, Support, Supports,
};
use rodlab_core::constraints::{jacobian_row, nullspace_pair};
use rodlab_core::diagnostics::{observed_orders, tangent_fd_error};
use rodlab_core::rodcore::V3;
use rodlab_core::scenarios::{
    centerline_distance, first_iterate, iterations_at_step, run_catenary, run_condition_sweep, run_free_rod, run_mooring,
    run_rollup, RunOutput, ScenarioConfig, ScenarioKind,
};
use rodlab_core::splinekit::SplineSpace;

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "criterion not met: {name}");
}

// ---------------------------------------------------------------------------
// Tangent consistency

/// Straight state through `origin` with every free entry perturbed by up to 5% of an
/// element length; nodal directors get lengths near the target and nonzero multipliers.
fn random_admissible(model: &RodModel, origin: V3, rng: &mut ChaCha8Rng) -> RodIterate {
    let mut q = model.initial_configuration(origin, V3::x());
    let h = model.props.length / model.mesh.n_elements as f64;
    for i in model.free_dofs() {
        q[i] += rng.gen_range(-0.05..0.05) * h;
    }
    let mut it = model.new_iterate(q);
    let alpha = model.mesh.director_scale();
    for j in model.constrained_nodes() {
        let d = block(&it.q, 2 * j + 1);
        set_block(&mut it.q, 2 * j + 1, &(d.normalize() * alpha * rng.gen_range(0.95..1.05)));
        it.lambda[j] = rng.gen_range(-1.0..1.0) * model.props.bending_stiffness / h;
    }
    it
}

/// The five formulations on a scenario geometry; the spline variant is the one the preset uses.
fn five(cfg: &ScenarioConfig) -> Vec<Formulation> {
    let iga = cfg.formulations.iter().copied().find(|f| !f.is_nodal()).expect("preset has a spline variant");
    let beta = cfg
        .formulations
        .iter()
        .find_map(|f| match f {
            Formulation::NodalPenalty { beta, .. } => Some(*beta),
            _ => None,
        })
        .unwrap_or(1e5);
    vec![
        iga,
        Formulation::NodalR3 { director_scale: 1.0 },
        Formulation::NodalSpp { director_scale: 1.0 },
        Formulation::NodalSppReduced { director_scale: 1.0 },
        Formulation::NodalPenalty { beta, director_scale: 1.0 },
    ]
}

#[test]
fn tangent_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut failures = Vec::new();
    let geometries = [
        (ScenarioKind::Rollup, V3::zeros(), 0.05),
        (ScenarioKind::Catenary, V3::zeros(), 0.01),
        // Lifted clear of the seabed barrier so perturbed states stay admissible.
        (ScenarioKind::Mooring2d, V3::new(0.0, 0.0, 20.0), 0.01),
        (ScenarioKind::FreeRod, V3::zeros(), 0.02),
    ];
    for (kind, origin, dt) in geometries {
        let cfg = ScenarioConfig::preset(kind);
        for f in five(&cfg) {
            let mut model = RodModel::new(cfg.rod, f, 6, cfg.supports, cfg.loading.clone()).unwrap();
            model.inertia = InertiaLinearization::Full;
            let h = model.props.length / 6.0;
            for _ in 0..5 {
                let it = random_admissible(&model, origin, &mut rng);
                let prev = random_admissible(&model, origin, &mut rng);
                let v_prev: Vec<f64> = (0..prev.q.len()).map(|_| rng.gen_range(-0.1..0.1) * h).collect();
                let regimes = [
                    ("static", Regime::Static { load_factor: 0.8 }),
                    ("dynamic", Regime::Dynamic { dt, q_prev: &prev.q, v_prev: &v_prev, load_factor: 0.8 }),
                ];
                for (name, regime) in &regimes {
                    let err = tangent_fd_error(&model, &it, regime, 1e-6 * h).unwrap();
                    worst = worst.max(err);
                    checked += 1;
                    if !(err < 1e-6) {
                        failures.push(format!("{} {} {name}: {err:.2e}", kind.id(), f.label()));
                    }
                }
            }
        }
    }
    let detail = format!("{checked} states, worst relative error {worst:.2e} (limit 1e-6) {failures:?}");
    verdict("tangent consistency", failures.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// Roll-up

fn rollup() -> &'static RunOutput {
    static OUT: OnceLock<RunOutput> = OnceLock::new();
    OUT.get_or_init(|| run_rollup(&ScenarioConfig::preset(ScenarioKind::Rollup)))
}

#[test]
fn rollup_iteration_bounds() {
    let out = rollup();
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &out.runs {
        let good = match r.formulation {
            Formulation::Iga { .. } | Formulation::NodalSpp { .. } | Formulation::NodalSppReduced { .. } => {
                r.converged() && r.stats.max_iters <= 6
            }
            Formulation::NodalPenalty { .. } => r.converged() && r.stats.max_iters <= 8,
            Formulation::NodalR3 { .. } => r.failure.as_ref().is_some_and(|f| f.ill_conditioned),
        };
        ok &= good;
        let state = match &r.failure {
            Some(f) => format!("failed at step {} (ill-conditioned: {})", f.step, f.ill_conditioned),
            None => format!("max {} iterations", r.stats.max_iters),
        };
        parts.push(format!("{} {state}", r.label));
    }
    verdict("roll-up iteration bounds", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Zero nodal axial stress

fn max_nodal_axial(stresses: &[rodlab_core::scenarios::StressSample]) -> f64 {
    stresses.iter().filter(|s| s.nodal).map(|s| s.axial.abs()).fold(0.0, f64::max)
}

#[test]
fn zero_nodal_axial_stress() {
    let mut ok = true;
    let mut parts = Vec::new();
    let sources: [(&str, &RunOutput); 2] = [("roll-up", rollup()), ("catenary", catenary())];
    for (name, out) in sources {
        let ea = out.config.rod.axial_stiffness;
        for r in out.runs.iter().filter(|r| r.converged()) {
            let m = max_nodal_axial(&r.stresses) / ea;
            let good = match r.formulation {
                Formulation::NodalSpp { .. } | Formulation::NodalSppReduced { .. } => m <= 1e-8,
                // Unconstrained nodal lengths carry the cable tension; pure bending has none to show.
                Formulation::Iga { .. } | Formulation::NodalR3 { .. } => name == "roll-up" || m > 1e-8,
                Formulation::NodalPenalty { .. } => true,
            };
            ok &= good;
            if !matches!(r.formulation, Formulation::NodalPenalty { .. }) && (!good || r.n_e == out.config.meshes[0]) {
                parts.push(format!("{name} {} n_e={} max|N|/EA={m:.1e}", r.label, r.n_e));
            }
        }
    }
    verdict("zero nodal axial stress", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Nullspace exactness

#[test]
fn nullspace_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let mut d = V3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        // Every fourth state is nearly aligned with an axis, where one dual almost vanishes.
        if k % 4 == 0 {
            let axis = rng.gen_range(0..3);
            for c in 0..3 {
                if c != axis {
                    d[c] *= 10f64.powi(-rng.gen_range(6..14));
                }
            }
        }
        d *= 10f64.powf(rng.gen_range(-2.0..3.0));
        let row = jacobian_row(&d);
        let (_, cols) = nullspace_pair(&d);
        for c in cols {
            worst = worst.max(row.dot(&c).abs() / (row.norm() * c.norm()).max(f64::MIN_POSITIVE));
        }
    }
    verdict("nullspace exactness", worst <= 4.0 * f64::EPSILON, &format!("1000 states, max |J D|/(|J||D|) = {worst:.1e}"));
}

// ---------------------------------------------------------------------------
// DOF accounting

#[test]
fn dof_accounting() {
    let mut mismatches = Vec::new();
    let length = 1.0;
    for n_e in 1..=256usize {
        for p in 2..=5usize {
            for r in 1..p {
                let expect = 3 * (n_e * (p - r) + r + 1);
                let f = Formulation::Iga { degree: p, continuity: r, outlier_removal: false };
                let space = 3 * SplineSpace::new(p, r, n_e, length).unwrap().num_basis();
                let mesh = Mesh::new(&f, n_e, length).unwrap().n_dofs();
                if dof_count(&f, n_e) != expect || space != expect || mesh != expect {
                    mismatches.push(format!("p{p}c{r} n_e={n_e}"));
                }
            }
        }
        for (f, expect) in [
            (Formulation::NodalR3 { director_scale: 1.0 }, 6 * (n_e + 1)),
            (Formulation::NodalSppReduced { director_scale: 1.0 }, 6 * (n_e + 1)),
            (Formulation::NodalPenalty { beta: 1.0, director_scale: 1.0 }, 6 * (n_e + 1)),
            (Formulation::NodalSpp { director_scale: 1.0 }, 7 * (n_e + 1)),
        ] {
            let kinematic = Mesh::new(&f, n_e, length).unwrap().n_dofs();
            let multipliers = if matches!(f, Formulation::NodalSpp { .. }) { n_e + 1 } else { 0 };
            if dof_count(&f, n_e) != expect || kinematic + multipliers != expect {
                mismatches.push(format!("{} n_e={n_e}", f.label()));
            }
        }
    }
    verdict("dof accounting", mismatches.is_empty(), &format!("n_e 1..256, p 2..5, all r; mismatches {mismatches:?}"));
}

// ---------------------------------------------------------------------------
// Symmetry regime

#[test]
fn symmetry_regime() {
    let cfg = ScenarioConfig::preset(ScenarioKind::ConditionSweep);
    let sweep = cfg.sweep.clone().unwrap();
    let forms = [
        Formulation::iga_cubic(1),
        Formulation::NodalR3 { director_scale: 1.0 },
        Formulation::NodalSpp { director_scale: 1.0 },
        Formulation::NodalSppReduced { director_scale: 1.0 },
        Formulation::NodalPenalty { beta: 1e5, director_scale: 1.0 },
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for f in forms {
        let model = RodModel::new(cfg.rod, f, 20, cfg.supports, cfg.loading.clone()).unwrap();
        let q0 = model.initial_configuration(V3::zeros(), V3::x());
        let v0 = vec![0.0; q0.len()];
        for dynamic in [false, true] {
            let regime = if dynamic {
                Regime::Dynamic { dt: sweep.dt, q_prev: &q0, v_prev: &v0, load_factor: sweep.load_factor }
            } else {
                Regime::Static { load_factor: sweep.load_factor }
            };
            let it = first_iterate(&model, &regime).unwrap();
            let sys = model.assemble_system(&it, &regime).unwrap();
            let asym = sys.matrix.asymmetry(1e-14);
            let measured = asym < 1e-10;
            let expected = f.symmetric(dynamic);
            let good = measured == expected && sys.symmetric == expected;
            ok &= good;
            parts.push(format!(
                "{} {}: {} (asymmetry {asym:.1e})",
                f.label(),
                if dynamic { "dynamic" } else { "static" },
                if measured { "symmetric" } else { "non-symmetric" }
            ));
        }
    }
    verdict("symmetry regime", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Roll-up convergence

#[test]
fn rollup_convergence() {
    let mut cfg = ScenarioConfig::preset(ScenarioKind::Rollup);
    cfg.meshes = vec![8, 16, 32, 64];
    cfg.formulations = vec![Formulation::iga_cubic(1), Formulation::iga_cubic(2), Formulation::NodalSpp { director_scale: 1.0 }];
    let out = run_rollup(&cfg);
    let series = |label: &str| -> Option<Vec<[f64; 3]>> {
        cfg.meshes.iter().map(|&n| out.run(label, n).and_then(|r| r.norms).map(|e| [e.l2, e.h1, e.h2])).collect()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    let (c1, c2, spp) = (series("iga"), series("iga-c2"), series("spp"));
    for (label, s) in [("iga", &c1), ("spp", &spp)] {
        match s {
            Some(s) => {
                let monotone = (0..3).all(|k| s.windows(2).all(|w| w[1][k] < w[0][k]));
                ok &= monotone;
                parts.push(format!("{label} monotone {monotone}"));
            }
            None => {
                ok = false;
                parts.push(format!("{label} did not converge on every mesh"));
            }
        }
    }
    if let Some(s) = &spp {
        let l2: Vec<f64> = s.iter().map(|e| e[0]).collect();
        let orders = observed_orders(&l2);
        let good = orders.iter().all(|&o| o >= 2.9);
        ok &= good;
        parts.push(format!("spp L2 orders {:?}", orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>()));
    }
    match (&c1, &c2) {
        (Some(a), Some(b)) => {
            let good = a.iter().zip(b).all(|(x, y)| (0..3).all(|k| y[k] <= x[k]));
            ok &= good;
            parts.push(format!("C2 <= C1 everywhere {good}"));
        }
        _ => {
            ok = false;
            parts.push("iga or iga-c2 did not converge on every mesh".into());
        }
    }
    verdict("roll-up convergence", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Function-space equivalence

/// Hermite dofs of a C1 cubic spline curve: nodal positions and scaled nodal derivatives.
fn hermite_from_spline(iga: &RodModel, herm: &RodModel) -> Vec<Vec<(usize, f64)>> {
    let alpha = herm.mesh.director_scale();
    let h = iga.props.length / iga.mesh.n_elements as f64;
    let mut rows = Vec::new();
    for j in 0..herm.mesh.num_nodes() {
        let (blocks, n, d1, _) = iga.mesh.basis_at(h * j as f64).unwrap();
        rows.push(blocks.iter().zip(&n).map(|(&b, &v)| (b, v)).collect());
        rows.push(blocks.iter().zip(&d1).map(|(&b, &v)| (b, alpha * v)).collect());
    }
    rows
}

fn apply_blocks(rows: &[Vec<(usize, f64)>], c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 3 * rows.len()];
    for (i, row) in rows.iter().enumerate() {
        let v = row.iter().fold(V3::zeros(), |acc, &(b, w)| acc + w * block(c, b));
        set_block(&mut out, i, &v);
    }
    out
}

fn apply_blocks_transposed(rows: &[Vec<(usize, f64)>], r: &[f64], n_blocks: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * n_blocks];
    for (i, row) in rows.iter().enumerate() {
        let ri = block(r, i);
        for &(b, w) in row {
            let acc = block(&out, b) + w * ri;
            set_block(&mut out, b, &acc);
        }
    }
    out
}

#[test]
fn function_space_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let free = Supports { left: Support::Free, right: Support::Free };
    for kind in [ScenarioKind::Rollup, ScenarioKind::Catenary, ScenarioKind::Mooring2d, ScenarioKind::FreeRod] {
        let cfg = ScenarioConfig::preset(kind);
        let n_e = 7;
        let iga = RodModel::new(cfg.rod, Formulation::iga_cubic(1), n_e, free, cfg.loading.clone()).unwrap();
        let herm = RodModel::new(cfg.rod, Formulation::NodalR3 { director_scale: 0.5 }, n_e, free, cfg.loading.clone()).unwrap();
        let t = hermite_from_spline(&iga, &herm);
        let nb = iga.mesh.n_blocks;
        let h = cfg.rod.length / n_e as f64;
        let lift = if kind == ScenarioKind::Mooring2d { V3::new(0.0, 0.0, 20.0) } else { V3::zeros() };
        for _ in 0..5 {
            let mut perturbed = || -> Vec<f64> {
                let mut c = iga.initial_configuration(lift, V3::x());
                c.iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05) * h);
                c
            };
            let c = perturbed();
            let c_prev = perturbed();
            let v_prev: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-0.1..0.1) * h).collect();
            let (hq, hq_prev, hv_prev) = (apply_blocks(&t, &c), apply_blocks(&t, &c_prev), apply_blocks(&t, &v_prev));
            let regimes = [
                (Regime::Static { load_factor: 0.7 }, Regime::Static { load_factor: 0.7 }),
                (
                    Regime::Dynamic { dt: 0.01, q_prev: &c_prev, v_prev: &v_prev, load_factor: 0.7 },
                    Regime::Dynamic { dt: 0.01, q_prev: &hq_prev, v_prev: &hv_prev, load_factor: 0.7 },
                ),
            ];
            for (ri, rh) in &regimes {
                let r_iga = iga.assemble_kinematic(&c, ri).unwrap().residual;
                let r_herm = herm.assemble_kinematic(&hq, rh).unwrap().residual;
                let pulled = apply_blocks_transposed(&t, &r_herm, nb);
                let diff = r_iga.iter().zip(&pulled).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm = r_iga.iter().map(|a| a * a).sum::<f64>().sqrt();
                worst = worst.max(diff / norm);
            }
        }
    }
    verdict("function-space equivalence", worst <= 1e-10, &format!("4 geometries x 5 states x 2 regimes, worst relative gap {worst:.1e}"));
}

// ---------------------------------------------------------------------------
// Condition-number trends

#[test]
fn condition_trends() {
    let out = run_condition_sweep(&ScenarioConfig::preset(ScenarioKind::ConditionSweep));
    let rows = |label_prefix: &str, parameter: &str, regime: &str| -> Vec<(f64, f64)> {
        out.conditions
            .iter()
            .filter(|c| c.formulation.starts_with(label_prefix) && c.parameter == parameter && c.regime == regime)
            .map(|c| (c.value, c.condition))
            .collect()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for regime in ["static", "dynamic"] {
        let r3 = rows("nodal-r3", "none", regime)[0].1;
        let pen = rows("penalty", "beta", regime);
        let high: Vec<f64> = pen.iter().filter(|(b, _)| *b >= 1e6).map(|p| p.1).collect();
        let rising = high.windows(2).all(|w| w[1] >= w[0]);
        let flat = pen.iter().filter(|(b, _)| *b <= 1e3).all(|(_, k)| (k / r3 - 1.0).abs() <= 0.05);
        let red = rows("spp-reduced", "director_scale", regime);
        let argmin = red.iter().fold((f64::NAN, f64::INFINITY), |best, &(a, k)| if k < best.1 { (a, k) } else { best }).0;
        let good = rising && flat && argmin == 1.0;
        ok &= good;
        parts.push(format!("{regime}: penalty rising above 1e6 {rising}, flat below 1e3 {flat}, spp-reduced argmin alpha {argmin}"));
    }
    let iga_s = rows("iga", "none", "static").into_iter().find(|_| true).unwrap().1;
    let iga_d = rows("iga", "none", "dynamic").into_iter().find(|_| true).unwrap().1;
    let ratio = iga_d / iga_s;
    ok &= ratio < 1e-2;
    parts.push(format!("iga dynamic/static {ratio:.1e}"));
    verdict("condition-number trends", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Catenary

fn catenary() -> &'static RunOutput {
    static OUT: OnceLock<RunOutput> = OnceLock::new();
    OUT.get_or_init(|| run_catenary(&ScenarioConfig::preset(ScenarioKind::Catenary)))
}

/// Reference maximum iterations at the first fairlead step, per mesh exponent 3..=8.
fn reference_table() -> BTreeMap<&'static str, [Option<usize>; 6]> {
    BTreeMap::from([
        ("iga", [Some(21), Some(13), Some(21), Some(18), Some(17), Some(23)]),
        ("iga-outlier", [Some(21), Some(13), Some(21), Some(18), Some(17), Some(23)]),
        ("nodal-r3", [Some(21), Some(13), Some(21), None, Some(17), Some(23)]),
        ("spp", [Some(12), Some(13), Some(17), Some(18), Some(26), Some(39)]),
        ("spp-reduced", [Some(24), Some(13), Some(15), Some(18), Some(22), Some(25)]),
        ("penalty-1e8", [Some(20), Some(13), Some(13), Some(20), Some(31), Some(21)]),
    ])
}

#[test]
fn catenary_agreement() {
    let out = catenary();
    let length = out.config.rod.length;
    let mut ok = true;
    let mut parts = Vec::new();
    let group = ["iga", "spp", "spp-reduced", "penalty-1e5"];
    for &n_e in &out.config.meshes {
        let mut worst: f64 = 0.0;
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                match (out.run(a, n_e), out.run(b, n_e)) {
                    (Some(ra), Some(rb)) if ra.converged() && rb.converged() => {
                        worst = worst.max(centerline_distance(&ra.centerline, &rb.centerline) / length);
                    }
                    _ => {
                        ok = false;
                        parts.push(format!("n_e={n_e}: {a} or {b} did not converge"));
                    }
                }
            }
        }
        let spp_pair = match (out.run("spp", n_e), out.run("spp-reduced", n_e)) {
            (Some(a), Some(b)) if a.converged() && b.converged() => centerline_distance(&a.centerline, &b.centerline) / length,
            _ => f64::INFINITY,
        };
        ok &= worst <= 1e-3 && spp_pair <= 1e-8;
        parts.push(format!("n_e={n_e}: pairwise {worst:.1e} (1e-3), spp vs reduced {spp_pair:.1e} (1e-8)"));
    }

    let measured = iterations_at_step(out, 52);
    let mut cells = Vec::new();
    for (label, reference) in reference_table() {
        for (k, expect) in reference.iter().enumerate() {
            let n_e = 1usize << (k + 3);
            let Some(run) = out.run(label, n_e) else {
                ok = false;
                cells.push(format!("{label}@{n_e}: missing"));
                continue;
            };
            let got = measured.iter().find(|(l, n, _)| l == label && *n == n_e).and_then(|m| m.2);
            let good = match expect {
                None => run.failure.as_ref().is_some_and(|f| f.ill_conditioned),
                Some(e) => run.converged() && got.is_some_and(|g| g.abs_diff(*e) <= 3),
            };
            ok &= good;
            let shown = if run.converged() { got.map_or("-".into(), |g| g.to_string()) } else { "failed".into() };
            let reference = expect.map_or("failed".into(), |e| e.to_string());
            cells.push(format!("{label}@{n_e}: {shown} vs {reference}{}", if good { "" } else { " x" }));
        }
    }
    parts.push(format!("step-52 table [{}]", cells.join(", ")));
    verdict("catenary cross-formulation agreement", ok, &parts.join("; "));
}

#[test]
fn timing_ordering() {
    let out = catenary();
    let nodal = ["nodal-r3", "spp", "penalty-1e8"];
    let mut ok = true;
    let mut parts = Vec::new();
    for &n_e in &out.config.meshes {
        let time = |label: &str| out.run(label, n_e).map(|r| r.stats.mean_time_per_iter_s).unwrap_or(f64::NAN);
        let reduced = time("spp-reduced");
        let reduced_slowest = nodal.iter().all(|l| reduced > time(l));
        let all = ["iga", "iga-outlier", "nodal-r3", "spp", "spp-reduced", "penalty-1e8"];
        let slowest = all.iter().copied().max_by(|a, b| time(a).total_cmp(&time(b))).unwrap();
        let iga_not_slowest = !slowest.starts_with("iga");
        if n_e >= 128 {
            ok &= reduced_slowest && iga_not_slowest;
        }
        let times: Vec<String> = all.iter().map(|l| format!("{l} {:.2e}", time(l))).collect();
        parts.push(format!("n_e={n_e}: slowest {slowest} [{}]", times.join(", ")));
    }
    verdict("timing ordering", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Mooring

#[test]
fn mooring_dynamics() {
    let mut cfg = ScenarioConfig::preset(ScenarioKind::Mooring2d);
    cfg.stepping.horizon = 10.0;
    let out = run_mooring(&cfg);
    let length = cfg.rod.length;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &out.runs {
        let (lo, hi) = r.steps.iter().fold((usize::MAX, 0), |(lo, hi), s| (lo.min(s.max_iterations), hi.max(s.max_iterations)));
        let outside = r.steps.iter().filter(|s| !(3..=5).contains(&s.max_iterations)).count();
        let good = r.converged() && outside == 0;
        ok &= good;
        parts.push(format!("{} iterations {lo}..{hi} ({outside} steps outside 3..5)", r.label));
        // The resting segment: the anchor-side 40% of the line, well inside the touchdown point.
        let rest: Vec<f64> = r.centerline.iter().take(r.centerline.len() * 2 / 5).map(|p| p[2]).collect();
        let (zmin, zmax) = rest.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
        let resting = r.converged() && zmin >= -0.5 && zmax <= 0.5;
        ok &= resting;
        parts.push(format!("{} resting z in [{zmin:.3}, {zmax:.3}]", r.label));
    }
    let nodal: Vec<&str> = out.runs.iter().filter(|r| r.formulation.is_nodal()).map(|r| r.label.as_str()).collect();
    let mut worst: f64 = 0.0;
    for (i, a) in nodal.iter().enumerate() {
        for b in &nodal[i + 1..] {
            let (ra, rb) = (out.run(a, 40).unwrap(), out.run(b, 40).unwrap());
            for (sa, sb) in ra.fairlead.iter().zip(&rb.fairlead) {
                let d = (0..3).map(|c| (sa.displacement[c] - sb.displacement[c]).powi(2)).sum::<f64>().sqrt();
                worst = worst.max(d / length);
            }
            ok &= ra.fairlead.len() == rb.fairlead.len();
        }
    }
    ok &= worst < 5e-3;
    parts.push(format!("nodal fairlead histories max gap {worst:.1e} of L0 (5e-3)"));
    verdict("mooring dynamics", ok, &parts.join("; "));
}

// ---------------------------------------------------------------------------
// Conservation

#[test]
fn conservation() {
    let base = ScenarioConfig::preset(ScenarioKind::FreeRod);
    let mut ok = true;
    let mut parts = Vec::new();

    let out = run_free_rod(&base);
    for r in &out.runs {
        let first = &r.energy[0];
        let rel = |a: [f64; 3], b: [f64; 3]| {
            let d = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
            d / b.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let lin = r.energy.iter().map(|e| rel(e.linear_momentum, first.linear_momentum)).fold(0.0, f64::max);
        let ang = r.energy.iter().map(|e| rel(e.angular_momentum, first.angular_momentum)).fold(0.0, f64::max);
        let good = r.converged() && r.energy.len() == 101 && lin <= 1e-8 && ang <= 1e-8;
        ok &= good;
        parts.push(format!("{} momentum drift linear {lin:.1e} angular {ang:.1e}", r.label));
    }

    // Per-step energy change over a fixed 2 s horizon at three step sizes.
    let horizon = 2.0;
    let mut drifts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for dt in [2e-2, 1e-2, 5e-3] {
        let mut cfg = base.clone();
        cfg.stepping.dt = dt;
        cfg.initial_motion.as_mut().unwrap().steps = (horizon / dt).round() as usize;
        for r in &run_free_rod(&cfg).runs {
            let e0 = r.energy[0].parts.total().abs();
            let step = r.energy.windows(2).map(|w| (w[1].parts.total() - w[0].parts.total()).abs()).fold(0.0, f64::max);
            let drift = if r.converged() { step / e0 } else { f64::NAN };
            drifts.entry(r.label.clone()).or_default().push(drift);
        }
    }
    for (label, d) in &drifts {
        let orders = observed_orders(d);
        let good = orders.iter().all(|&o| o >= 1.8);
        ok &= good;
        parts.push(format!(
            "{label} per-step energy drift {:?} orders {:?}",
            d.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>(),
            orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>()
        ));
    }
    verdict("conservation", ok, &parts.join("; "));
}

#[test]
fn suite_covers_every_preset_formulation() {
    // Guards the catenary criteria against a preset that silently drops a column.
    let cat = ScenarioConfig::preset(ScenarioKind::Catenary);
    let names: Vec<String> = cat.formulations.iter().map(Formulation::label).collect();
    for label in reference_table().keys().chain(["penalty-1e5"].iter()) {
        assert!(names.iter().any(|n| n == label), "catenary preset lacks {label}");
    }
}
