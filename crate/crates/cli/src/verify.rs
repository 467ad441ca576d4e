//! Fast self-checks of an installed build, one PASS/FAIL line each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rodlab_core::assembly::{block, dof_count, set_block, Formulation, InertiaLinearization, Mesh, Regime, RodModel};
use rodlab_core::constraints::{jacobian_row, nullspace_pair};
use rodlab_core::diagnostics::tangent_fd_error;
use rodlab_core::rodcore::V3;
use rodlab_core::scenarios::{first_iterate, ScenarioConfig, ScenarioKind};

fn report(name: &str, pass: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn five() -> [Formulation; 5] {
    [
        Formulation::iga_cubic(1),
        Formulation::NodalR3 { director_scale: 1.0 },
        Formulation::NodalSpp { director_scale: 1.0 },
        Formulation::NodalSppReduced { director_scale: 1.0 },
        Formulation::NodalPenalty { beta: 1e5, director_scale: 1.0 },
    ]
}

fn tangents(rng: &mut ChaCha8Rng) -> bool {
    let mut worst: f64 = 0.0;
    for kind in [ScenarioKind::Rollup, ScenarioKind::Catenary, ScenarioKind::FreeRod] {
        let cfg = ScenarioConfig::preset(kind);
        for f in five() {
            let Ok(mut model) = RodModel::new(cfg.rod, f, 4, cfg.supports, cfg.loading.clone()) else {
                return report("tangent consistency", false, format!("{} cannot be built on {}", f.label(), kind.id()));
            };
            model.inertia = InertiaLinearization::Full;
            let h = cfg.rod.length / 4.0;
            let mut state = || {
                let mut q = model.initial_configuration(V3::zeros(), V3::x());
                for i in model.free_dofs() {
                    q[i] += rng.gen_range(-0.05..0.05) * h;
                }
                let mut it = model.new_iterate(q);
                for j in model.constrained_nodes() {
                    let d = block(&it.q, 2 * j + 1).normalize() * rng.gen_range(0.95..1.05);
                    set_block(&mut it.q, 2 * j + 1, &d);
                    it.lambda[j] = rng.gen_range(-1.0..1.0) * model.props.bending_stiffness / h;
                }
                it
            };
            let (it, prev) = (state(), state());
            let v_prev = vec![0.01 * h; prev.q.len()];
            for regime in [
                Regime::Static { load_factor: 0.5 },
                Regime::Dynamic { dt: 0.01, q_prev: &prev.q, v_prev: &v_prev, load_factor: 0.5 },
            ] {
                match tangent_fd_error(&model, &it, &regime, 1e-6 * h) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => return report("tangent consistency", false, format!("{}: {e}", f.label())),
                }
            }
        }
    }
    report("tangent consistency", worst < 1e-6, format!("worst relative error {worst:.1e}"))
}

fn nullspace(rng: &mut ChaCha8Rng) -> bool {
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let mut d = V3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if k % 4 == 0 {
            d[k % 3] *= 1e-12;
            d[(k + 1) % 3] *= 1e-9;
        }
        let (_, cols) = nullspace_pair(&d);
        for c in cols {
            worst = worst.max(jacobian_row(&d).dot(&c).abs() / (2.0 * d.norm() * c.norm()));
        }
    }
    report("nullspace exactness", worst <= 4.0 * f64::EPSILON, format!("max relative |J D| {worst:.1e}"))
}

fn dofs() -> bool {
    let mut bad = 0;
    for n_e in [1, 2, 7, 64, 256] {
        for p in 2..=5 {
            for r in 1..p {
                let f = Formulation::Iga { degree: p, continuity: r, outlier_removal: false };
                let expect = 3 * (n_e * (p - r) + r + 1);
                if dof_count(&f, n_e) != expect || Mesh::new(&f, n_e, 1.0).map(|m| m.n_dofs()) != Ok(expect) {
                    bad += 1;
                }
            }
        }
        for (f, per_node) in [
            (Formulation::NodalR3 { director_scale: 1.0 }, 6),
            (Formulation::NodalSppReduced { director_scale: 1.0 }, 6),
            (Formulation::NodalPenalty { beta: 1.0, director_scale: 1.0 }, 6),
            (Formulation::NodalSpp { director_scale: 1.0 }, 7),
        ] {
            bad += usize::from(dof_count(&f, n_e) != per_node * (n_e + 1));
        }
    }
    report("dof accounting", bad == 0, format!("{bad} mismatches"))
}

fn symmetry() -> bool {
    let cfg = ScenarioConfig::preset(ScenarioKind::ConditionSweep);
    let Some(sweep) = cfg.sweep.clone() else {
        return report("symmetry regime", false, "condition preset has no sweep table".into());
    };
    let mut ok = true;
    for f in five() {
        let Ok(model) = RodModel::new(cfg.rod, f, 20, cfg.supports, cfg.loading.clone()) else {
            return report("symmetry regime", false, format!("{} cannot be built", f.label()));
        };
        let q0 = model.initial_configuration(V3::zeros(), V3::x());
        let v0 = vec![0.0; q0.len()];
        for dynamic in [false, true] {
            let regime = if dynamic {
                Regime::Dynamic { dt: sweep.dt, q_prev: &q0, v_prev: &v0, load_factor: sweep.load_factor }
            } else {
                Regime::Static { load_factor: sweep.load_factor }
            };
            let measured = first_iterate(&model, &regime)
                .ok()
                .and_then(|it| model.assemble_system(&it, &regime).ok())
                .map(|s| (s.matrix.asymmetry(1e-14) < 1e-10, s.symmetric));
            let expected = f.symmetric(dynamic);
            ok &= measured == Some((expected, expected));
        }
    }
    report("symmetry regime", ok, "20-element cable, second-iteration matrices".into())
}

fn config_round_trip() -> bool {
    let ok = ScenarioKind::ALL.iter().all(|&k| {
        let cfg = ScenarioConfig::preset(k);
        cfg.to_toml().ok().and_then(|t| ScenarioConfig::from_toml(&t).ok()).as_ref() == Some(&cfg)
    });
    report("config round trip", ok, "all presets".into())
}

/// Runs every check; true when all pass.
pub fn run_all(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results = [tangents(&mut rng), nullspace(&mut rng), dofs(), symmetry(), config_round_trip()];
    results.iter().all(|&r| r)
}
