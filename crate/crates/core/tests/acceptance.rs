//! Acceptance suite: one line per criterion.
//!
//! Criteria 1 to 6 run the full experiment recipes and judge them with
//! [`harness::check`]. Criterion 7 is a suite of exact properties.
//!
//! Run a subset with `cargo test -p spare-core --test acceptance -- 5 7`.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spare_core::baseline::{train_baseline, BaselineConfig};
use spare_core::density::{log_normal, StateDistribution};
use spare_core::em::{e_step, reweight_by_votes, run_em, EmConfig, Membership, ShellDistribution};
use spare_core::harness::{self, Experiment, ExperimentConfig};
use spare_core::kmeans::kmeans;
use spare_core::nn::{Activation, Mlp};
use spare_core::predictor::{self, GaussianPredictor, Standardizer, TrainConfig, TrainData};
use spare_core::relational::{DeicticStep, Domain, Experience, ReferenceList};
use spare_core::rule::{fit_default_variance, learn_dist, score, train_single, GreedyConfig, ShellRecord, SpareModel};
use spare_core::sim::{self, blocks_domain, generate_dataset, pushed_stack, refs, SceneConfig, StackMix};

type Check = std::result::Result<String, String>;

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![12, 12],
        epochs: 6,
        block_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn stacks(d: &Domain, height: usize, extras: usize, n: usize, seed: u64) -> Vec<Experience> {
    let cfg = SceneConfig {
        extras,
        ..SceneConfig::default()
    };
    generate_dataset(d, &cfg, &StackMix::single(height), n, seed).expect("dataset")
}

fn list(d: &Domain, steps: &[(usize, usize)]) -> ReferenceList {
    let steps = steps.iter().map(|&(f, a)| DeicticStep::new(f, vec![a])).collect();
    ReferenceList::new(d, 1, steps).expect("valid list")
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (i, o, n) = (4, 3, 9);
    let mut nets: Vec<Mlp> = (0..2).map(|_| Mlp::new(&[i, 6, 5, o], Activation::Tanh, &mut rng)).collect();
    for net in &mut nets {
        for l in &mut net.layers {
            l.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }
    let var_net = nets.pop().unwrap();
    let mean_net = nets.pop().unwrap();
    let p = GaussianPredictor::from_parts(mean_net, var_net, Standardizer::identity(i), Standardizer::identity(o), 1e-2)
        .map_err(|e| e.to_string())?;
    let data = TrainData::new(
        Array2::from_shape_fn((n, i), |_| rng.random_range(-1.5..1.5)),
        Array2::from_shape_fn((n, o), |_| rng.random_range(-1.0..1.0)),
        (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let (gm, gv) = p.nll_gradients(&data).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (net_id, grads) in [gm, gv].iter().enumerate() {
        for (l, g) in grads.iter().enumerate() {
            let analytic: Vec<f64> = g.w.iter().chain(g.b.iter()).copied().collect();
            for (idx, an) in analytic.iter().enumerate() {
                let at = |delta: f64| {
                    let mut q = p.clone();
                    let layer = if net_id == 0 {
                        &mut q.mean_net.layers[l]
                    } else {
                        &mut q.var_net.layers[l]
                    };
                    let nw = layer.w.len();
                    if idx < nw {
                        let c = layer.w.ncols();
                        layer.w[[idx / c, idx % c]] += delta;
                    } else {
                        layer.b[idx - nw] += delta;
                    }
                    q.nll(&data).expect("nll")
                };
                let fd = (at(eps) - at(-eps)) / (2.0 * eps);
                let scale = fd.abs().max(an.abs());
                if scale > 1e-7 {
                    worst = worst.max((fd - an).abs() / scale);
                }
            }
        }
    }
    if worst < 1e-4 {
        Ok(format!("gradient rel err {worst:.1e}"))
    } else {
        Err(format!("gradient rel err {worst:.1e} >= 1e-4"))
    }
}

fn default_variance_brute_force(d: &Domain) -> Check {
    let exps = stacks(d, 3, 3, 40, 2);
    let w: Vec<f64> = (0..exps.len()).map(|i| 0.25 + (i % 5) as f64).collect();
    let fit = fit_default_variance(d, &exps, &w, 1e-9);
    let mut worst = 0.0f64;
    for (p, v) in fit.iter().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (e, wi) in exps.iter().zip(&w) {
            for o in 0..e.state.n_objects() {
                let r = e.next_state.get(o, p) - e.state.get(o, p);
                num += wi * r * r;
                den += wi;
            }
        }
        let brute = (num / den).max(1e-9);
        worst = worst.max((brute - v).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("default variance diff {worst:.1e}"))
    } else {
        Err(format!("default variance differs from brute force by {worst:.1e}"))
    }
}

/// Trapezoid integral of every cell's marginal density over a grid wide
/// enough for its widest component and fine enough for its narrowest.
fn max_cell_mass_error(dist: &StateDistribution, n_objects: usize, n_props: usize) -> f64 {
    let mut worst = 0.0f64;
    for o in 0..n_objects {
        for p in 0..n_props {
            let normals: Vec<_> = dist
                .components()
                .iter()
                .flat_map(|(_, c)| c.cell(o, p).0.iter().copied())
                .collect();
            let lo = normals.iter().map(|n| n.mean - 12.0 * n.var.sqrt()).fold(f64::INFINITY, f64::min);
            let hi = normals.iter().map(|n| n.mean + 12.0 * n.var.sqrt()).fold(f64::NEG_INFINITY, f64::max);
            let h = normals.iter().map(|n| n.var.sqrt()).fold(f64::INFINITY, f64::min) / 20.0;
            let steps = ((hi - lo) / h).ceil() as usize;
            let h = (hi - lo) / steps as f64;
            let mut mass = 0.5 * (dist.cell_pdf(o, p, lo) + dist.cell_pdf(o, p, hi));
            for k in 1..steps {
                mass += dist.cell_pdf(o, p, lo + k as f64 * h);
            }
            worst = worst.max((mass * h - 1.0).abs());
        }
    }
    worst
}

fn densities_integrate(d: &Domain) -> Check {
    let exps = stacks(d, 3, 1, 60, 3);
    let template = d.template_id(sim::PUSH).unwrap();
    let w = vec![1.0; exps.len()];
    let gamma = list(d, &[(refs::ABOVE, 0), (refs::BELOW, 1)]);
    let rule = learn_dist(d, &exps, &w, template, &gamma, &gamma, &tiny_train(1))
        .map_err(|e| e.to_string())?
        .ok_or("rule did not apply")?;
    let model = SpareModel {
        rules: vec![rule],
        default_variance: fit_default_variance(d, &exps, &w, 1e-5),
    };
    let mut worst = 0.0f64;
    for e in exps.iter().take(4) {
        let dist = model.predict(d, &e.state, &e.action).map_err(|e| e.to_string())?;
        worst = worst.max(max_cell_mass_error(&dist, e.state.n_objects(), d.n_props()));
    }
    if worst <= 1e-3 {
        Ok(format!("cell mass err {worst:.1e}"))
    } else {
        Err(format!("a cell density integrates to 1 +- {worst:.1e}"))
    }
}

fn fallback_is_exact(d: &Domain) -> Check {
    let template = d.template_id(sim::PUSH).unwrap();
    let train = stacks(d, 2, 0, 30, 4);
    let gamma = list(d, &[(refs::ABOVE, 0)]);
    let rule = learn_dist(d, &train, &vec![1.0; train.len()], template, &gamma, &gamma, &tiny_train(2))
        .map_err(|e| e.to_string())?
        .ok_or("rule did not apply")?;
    let var = vec![1e-4, 2e-4, 3e-4, 4e-4, 5e-4, 6e-4];
    let model = SpareModel {
        rules: vec![rule],
        default_variance: var.clone(),
    };
    // single blocks: nothing above the target, so no rule applies
    let lone = stacks(d, 1, 2, 10, 5);
    for e in &lone {
        let got = model
            .log_densities(d, std::slice::from_ref(e), spare_core::density::Scope::AllObjects)
            .map_err(|e| e.to_string())?[0];
        let mut want = 0.0;
        for o in 0..e.state.n_objects() {
            for (p, v) in var.iter().enumerate() {
                want += log_normal(e.next_state.get(o, p), e.state.get(o, p), *v);
            }
        }
        if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(format!("fallback log-density {got} vs closed form {want}"));
        }
    }
    Ok("fallback exact".into())
}

fn masses() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, k) = (50, 4);
    let mut raw = Array2::from_shape_fn((n, k), |_| rng.random_range(0.01..1.0));
    for mut r in raw.rows_mut() {
        let s = r.sum();
        r.mapv_inplace(|v| v / s);
    }
    let z = Membership::new(raw).map_err(|e| e.to_string())?;
    let ll = Array2::from_shape_fn((n, k), |_| rng.random_range(-400.0..50.0));
    let next = e_step(&z, &ll).map_err(|e| e.to_string())?;
    let row_err = next
        .matrix()
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let d = blocks_domain();
    let shells: Vec<ReferenceList> = vec![
        ReferenceList::empty(),
        list(&d, &[(refs::ABOVE, 0)]),
        list(&d, &[(refs::NEAREST, 0)]),
        list(&d, &[(refs::ABOVE, 0), (refs::ABOVE, 1)]),
    ];
    let records: Vec<ShellRecord> = shells
        .iter()
        .enumerate()
        .map(|(i, s)| ShellRecord {
            shell: s.clone(),
            val_loss: -70.0 + 3.0 * i as f64,
        })
        .collect();
    let mut pi = ShellDistribution::from_losses(&records, 0.05, 500.0).map_err(|e| e.to_string())?;
    let pi_err = (pi.total_mass() - 1.0).abs();
    let top = pi.top(3);
    let before: f64 = top.iter().map(|&i| pi.weights[i]).sum();
    reweight_by_votes(&mut pi.weights, &top, &[3.0, 0.5, 7.25]);
    let after: f64 = top.iter().map(|&i| pi.weights[i]).sum();
    let vote_err = (after - before).abs();
    let total_err = (pi.total_mass() - 1.0).abs();
    let worst = row_err.max(pi_err).max(vote_err).max(total_err);
    if worst <= 1e-9 {
        Ok(format!("Z rows, pi and top-kappa masses within {worst:.1e}"))
    } else {
        Err(format!(
            "mass errors: Z rows {row_err:.1e}, pi {pi_err:.1e}, top-kappa {vote_err:.1e}, after vote {total_err:.1e}"
        ))
    }
}

fn simulator_locality(d: &Domain) -> Check {
    let l = d.layout();
    let exps: Vec<Experience> = [0, 3, 6]
        .iter()
        .flat_map(|&extras| stacks(d, 3, extras, 200, 7 + extras as u64))
        .collect();
    for (i, e) in exps.iter().enumerate() {
        let stack = pushed_stack(d, e);
        let disp = |o: usize| {
            [
                e.next_state.get(o, l.x) - e.state.get(o, l.x),
                e.next_state.get(o, l.y) - e.state.get(o, l.y),
            ]
        };
        for o in 0..e.state.n_objects() {
            for p in [l.width, l.length, l.height, l.z] {
                if e.next_state.get(o, p) != e.state.get(o, p) {
                    return Err(format!("sample {i}: object {o} changed shape or elevation"));
                }
            }
        }
        let t = disp(stack[0]);
        for &o in &stack[1..] {
            let u = disp(o);
            if (u[0] - t[0]).abs() > 1e-12 || (u[1] - t[1]).abs() > 1e-12 {
                return Err(format!("sample {i}: stack member {o} moved apart from the target"));
            }
        }
        let moved_others = (0..e.state.n_objects()).filter(|o| !stack.contains(o) && disp(*o) != [0.0, 0.0]);
        for o in moved_others {
            // a struck block moves along the push direction
            let u = disp(o);
            let cross = u[0] * t[1] - u[1] * t[0];
            if cross.abs() > 1e-12 || u[0] * t[0] + u[1] * t[1] < 0.0 {
                return Err(format!("sample {i}: object {o} moved without being struck"));
            }
        }
    }
    Ok(format!("{} pushes local and shape-preserving", exps.len()))
}

fn score_values(d: &Domain) -> Check {
    let template = d.template_id(sim::PUSH).unwrap();
    let e = &stacks(d, 2, 1, 1, 8)[0];
    let cases = [
        (vec![], 1),
        (vec![(refs::ABOVE, 0)], 3),
        (vec![(refs::ABOVE, 0), (refs::BELOW, 1)], 5),
        (vec![(refs::ABOVE, 0), (refs::ABOVE, 1)], 0),
        (vec![(refs::BELOW, 0)], 0),
    ];
    for (steps, want) in cases {
        let g = list(d, &steps);
        let got = score(d, template, &g, &g, &e.state, &e.action);
        if got != want {
            return Err(format!("score of {} is {got}, expected {want}", g.display(d)));
        }
    }
    let mut other = e.action.clone();
    other.template = template + 1;
    let g = ReferenceList::empty();
    if score(d, template, &g, &g, &e.state, &other) != 0 {
        return Err("a rule scored an action of another template".into());
    }
    Ok("scores exact".into())
}

fn kmeans_monotone() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let pts = Array2::from_shape_fn((120, 3), |_| rng.random_range(-2.0..2.0));
        let km = kmeans(&pts, 2 + trial % 5, 50, &mut rng).map_err(|e| e.to_string())?;
        if km.inertia.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("trial {trial}: inertia rose: {:?}", km.inertia));
        }
    }
    Ok("inertia non-increasing".into())
}

fn reproducible(d: &Domain) -> Check {
    let template = d.template_id(sim::PUSH).unwrap();
    let exps = stacks(d, 3, 1, 40, 10);
    let mut failed = Vec::new();
    let mut twice = |name: &str, f: &dyn Fn() -> String| {
        if f() != f() {
            failed.push(name.to_string());
        }
    };
    twice("predictor", &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
        let y = x.mapv(|v| v * v);
        let data = TrainData::new(x, y, vec![1.0; 30]).unwrap();
        serde_json::to_string(&predictor::train(&data, &tiny_train(4)).unwrap()).unwrap()
    });
    let greedy = GreedyConfig {
        max_refs: 2,
        train: tiny_train(5),
        ..GreedyConfig::default()
    };
    twice("train-single", &|| {
        serde_json::to_string(&train_single(d, &exps, template, &greedy).unwrap().model()).unwrap()
    });
    twice("train-em", &|| {
        let cfg = EmConfig {
            k: 2,
            kappa: 2,
            iters: 1,
            greedy: greedy.clone(),
            ..EmConfig::default()
        };
        let out = run_em(d, &exps, template, &cfg, None, None).unwrap();
        serde_json::to_string(&(&out.rules, &out.membership.matrix().iter().collect::<Vec<_>>())).unwrap()
    });
    twice("train-baseline", &|| {
        let cfg = BaselineConfig {
            train: tiny_train(6),
            ..BaselineConfig::default()
        };
        serde_json::to_string(&train_baseline(d, &exps, &cfg).unwrap()).unwrap()
    });
    if failed.is_empty() {
        Ok("every training entry point bit-exact".into())
    } else {
        Err(format!("not reproducible: {}", failed.join(", ")))
    }
}

fn property_suite() -> (bool, String) {
    let d = blocks_domain();
    let start = Instant::now();
    let results = [
        ("gradient", gradient_check()),
        ("default-variance", default_variance_brute_force(&d)),
        ("density-mass", densities_integrate(&d)),
        ("fallback", fallback_is_exact(&d)),
        ("masses", masses()),
        ("simulator", simulator_locality(&d)),
        ("score", score_values(&d)),
        ("kmeans", kmeans_monotone()),
        ("reproducibility", reproducible(&d)),
    ];
    let elapsed = start.elapsed().as_secs_f64();
    let mut ok = elapsed < 60.0;
    let mut parts = Vec::new();
    for (name, r) in results {
        match r {
            Ok(msg) => parts.push(format!("{name} ok ({msg})")),
            Err(msg) => {
                ok = false;
                parts.push(format!("{name} FAILED ({msg})"));
            }
        }
    }
    parts.push(format!("{elapsed:.1}s (< 60s)"));
    (ok, parts.join("; "))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |c: usize| wanted.is_empty() || wanted.contains(&c);
    let out_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out_dir).expect("output directory");
    let mut all_ok = true;
    let mut experiments = Experiment::ALL.to_vec();
    experiments.sort_by_key(|e| e.criterion());
    for e in experiments {
        if !selected(e.criterion()) {
            continue;
        }
        let start = Instant::now();
        let cfg = ExperimentConfig::defaults(e);
        let line = match harness::run_experiment(&cfg).and_then(|rows| {
            let f = std::fs::File::create(out_dir.join(format!("{e}.csv")))?;
            harness::write_csv(f, &rows)?;
            harness::check(e, &rows)
        }) {
            Ok(v) => {
                all_ok &= v.passed;
                format!("{v} ({:.0}s)", start.elapsed().as_secs_f64())
            }
            Err(err) => {
                all_ok = false;
                format!("criterion {} [{e}] FAIL: {err}", e.criterion())
            }
        };
        println!("{line}");
    }
    if selected(7) {
        let (ok, detail) = property_suite();
        all_ok &= ok;
        println!("criterion 7 [property-suite] {}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
