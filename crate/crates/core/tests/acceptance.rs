//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. An optional argument filters criteria by substring.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use difmaml::autodiff::{gradient, hvp, ParamVector};
use difmaml::config::Config;
use difmaml::graph::{
    build_topology, metropolis_weights, mixing_rate, validate_combination, CombinationMatrix, Topology, TopologyKind,
};
use difmaml::meta::{meta_gradient_and_loss, MetaConfig};
use difmaml::metrics::{centroid, meta_test};
use difmaml::model::{init_params, mse_loss, ModelSpec, MseLoss};
use difmaml::netsim::{
    eval_set, initial_states, run, Network, OuterOptimizer, RunConfig, RunResult, Strategy,
};
use difmaml::probe::{
    lemma1_probe, perturbation_grid, theorem1_probe, theorem2_probe, unbiasedness_probe, ScalingSettings,
};
use difmaml::report::strip_wall_clock;
use difmaml::rng::substream;
use difmaml::tasks::{sample_tasks, QuadMixture, QuadTask, SineTask, TaskDistribution};

struct Outcome {
    pass: bool,
    detail: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> Config {
    Config::load(&configs_dir().join(name)).expect("bundled config parses")
}

fn eigen_lambda2(a: &CombinationMatrix) -> f64 {
    let k = a.agents();
    let mut m = DMatrix::from_fn(k, k, |i, j| a.get(i, j));
    m.add_scalar_mut(-1.0 / k as f64);
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|x| x.abs()).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev[0]
}

/// Fourth-order central difference of a scalar function along one axis.
fn central_diff(f: &dyn Fn(&ParamVector) -> f64, w: &ParamVector, i: usize, h: f64) -> f64 {
    let at = |s: f64| {
        let mut p = w.clone();
        p[i] += s * h;
        f(&p)
    };
    (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h)
}

fn c1_autodiff() -> Outcome {
    let spec = ModelSpec::sine_regressor();
    let w = init_params(&spec, 11);
    let task = SineTask {
        amplitude: 2.7,
        phase: 0.9,
    };
    let mut rng = substream(11, 0);
    let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| task.target(*x)).collect();
    let loss = MseLoss {
        spec: &spec,
        xs: &xs,
        ys: &ys,
    };
    let g = gradient(&loss, &w).unwrap();
    let plain = |p: &ParamVector| mse_loss(&spec, p, &xs, &ys).unwrap();
    // Coordinates whose derivative is below the finite-difference noise
    // floor are compared against that floor.
    let floor = 1e-6;
    let mut grad_err: f64 = 0.0;
    for i in 0..w.dim() {
        let fd = central_diff(&plain, &w, i, 1e-5);
        grad_err = grad_err.max((g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(floor));
    }

    let v: ParamVector = {
        let raw: Vec<f64> = (0..w.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.into_iter().map(|x| x / n).collect::<Vec<_>>().into()
    };
    let hv = hvp(&loss, &w, &v).unwrap();
    let eps = 1e-4;
    let gp = gradient(&loss, &w.add(&v.scaled(eps))).unwrap();
    let gm = gradient(&loss, &w.sub(&v.scaled(eps))).unwrap();
    let fd_hv = gp.sub(&gm).scaled(1.0 / (2.0 * eps));
    let hvp_err = hv.sub(&fd_hv).norm_sq().sqrt() / fd_hv.norm_sq().sqrt();
    Outcome {
        pass: grad_err <= 1e-5 && hvp_err <= 1e-4,
        detail: format!(
            "{} params, max relative gradient error {grad_err:.2e} (<= 1e-5), HVP relative error {hvp_err:.2e} (<= 1e-4)",
            w.dim()
        ),
    }
}

fn c2_unbiased() -> Outcome {
    let task = QuadTask::isotropic(2.0, vec![0.0].into(), 1.0).unwrap();
    let dist = TaskDistribution::quad_shared(QuadMixture::single(task), 1);
    let cfg = MetaConfig {
        alpha: 0.1,
        inner_batch: 10,
        outer_batch: 10,
        ..MetaConfig::default()
    };
    let r = unbiasedness_probe(&dist, &vec![1.0].into(), &cfg, 100_000, 2).unwrap();
    let row = &r.rows[0];
    Outcome {
        pass: r.passed() && (row[2] - 1.28).abs() < 1e-14,
        detail: format!(
            "mean {:.5} vs exact {:.5}, standard error {:.2e}, z = {:.2}",
            row[1], row[2], row[3], row[4]
        ),
    }
}

fn c3_lemma1() -> Outcome {
    let dist = TaskDistribution::quad_builtin(3, 2, 0.5, 1.0).unwrap();
    let grid = perturbation_grid(0.1, 10);
    let r = lemma1_probe(&dist, &grid).unwrap();
    let worst = r.rows.iter().map(|row| row[4] / row[6]).fold(0.0, f64::max);
    let closed_err = r.rows.iter().map(|row| (row[3] - row[5]).abs() / row[5]).fold(0.0, f64::max);
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    Outcome {
        pass: r.passed() && grid.len() == 9 && closed_err <= 1e-12,
        detail: format!(
            "{} agents x {} grid points; closed-form relative error {closed_err:.1e} (<= 1e-12); largest gap/bound ratio {worst:.3e}{}",
            dist.agents(),
            grid.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    }
}

fn scaling_base() -> RunConfig {
    let cfg = load_config("quad_path5.cfg");
    cfg.run_config(Strategy::Diffusion).unwrap()
}

fn c4_theorem1() -> Outcome {
    let base = scaling_base();
    let a = base.combination_matrix().unwrap();
    let lam = mixing_rate(&a).unwrap();
    let oracle = eigen_lambda2(&a);
    let r = theorem1_probe(&base, &ScalingSettings::disagreement()).unwrap();
    let ratio = r.rows.iter().map(|row| row[4] / row[5]).fold(0.0, f64::max);
    let checks: Vec<String> = r.checks.iter().map(|c| c.0.clone()).collect();
    Outcome {
        pass: r.passed() && (lam - oracle).abs() < 1e-9,
        detail: format!(
            "lambda2 {lam:.6} (eigen oracle {oracle:.6}); {}; largest plateau/bound {ratio:.2e}",
            checks[0]
        ),
    }
}

fn c5_theorem2() -> Outcome {
    let r = theorem2_probe(&scaling_base(), &ScalingSettings::stationarity()).unwrap();
    let checks: Vec<String> = r.checks.iter().map(|c| c.0.clone()).collect();
    Outcome {
        pass: r.passed(),
        detail: checks.join("; "),
    }
}

fn c6_combination() -> Outcome {
    let mut rng = substream(6, 0);
    let mut bad = 0;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..=12);
        let p = rng.random_range(0.15..0.9);
        let t = build_topology(&TopologyKind::ErdosRenyi { p }, k, Some(&mut rng)).unwrap();
        let a = metropolis_weights(&t);
        let rep = validate_combination(&a);
        let lam = mixing_rate(&a).unwrap();
        worst_gap = worst_gap.max((lam - eigen_lambda2(&a)).abs());
        if !(rep.all_pass() && a.is_symmetric() && lam < 1.0) {
            bad += 1;
        }
    }
    let path3 = metropolis_weights(&Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap());
    let third = 1.0 / 3.0;
    let expected = [[2.0 * third, third, 0.0], [third, third, third], [0.0, third, 2.0 * third]];
    let mut entry_err: f64 = 0.0;
    for (i, row) in expected.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            entry_err = entry_err.max((path3.get(i, j) - e).abs());
        }
    }
    let lam3 = mixing_rate(&path3).unwrap();
    Outcome {
        pass: bad == 0 && entry_err <= f64::EPSILON && (lam3 - 2.0 / 3.0).abs() <= 1e-9,
        detail: format!(
            "{bad}/100 random graphs failed; power-iteration vs eigen lambda2 within {worst_gap:.1e}; \
             path-3 entries within {entry_err:.1e}, lambda2 {lam3:.12}"
        ),
    }
}

fn c7_centralized() -> Outcome {
    let k = 4;
    let cfg = RunConfig {
        strategy: Strategy::Diffusion,
        topology: TopologyKind::Ring,
        tasks: TaskDistribution::quad_builtin(k, 3, 0.3, 1.5).unwrap(),
        meta: MetaConfig {
            alpha: 0.1,
            task_batch: 2,
            ..MetaConfig::default()
        },
        optimizer: OuterOptimizer::Sgd { mu: 0.05 },
        per_agent_init: false,
        threads: Some(1),
        ..RunConfig::sine_default(k).unwrap()
    };
    let mu = cfg.optimizer.mu();

    let mut diffusion = Network::with_matrix(cfg.clone(), CombinationMatrix::uniform(k)).unwrap();
    diffusion.step().unwrap();
    let mut central = Network::new(RunConfig {
        strategy: Strategy::Centralized,
        ..cfg.clone()
    })
    .unwrap();
    central.step().unwrap();

    // Centralized SGD on the aggregate risk: average the agents' stochastic
    // meta-gradients (same draws) and take one step from the shared model.
    let mut states = initial_states(&cfg);
    let w0 = states[0].w.clone();
    let mut grads = Vec::new();
    for s in states.iter_mut() {
        let tasks = sample_tasks(&cfg.tasks, s.id, cfg.meta.task_batch, &mut s.rng).unwrap();
        grads.push(meta_gradient_and_loss(&cfg.model, &s.w, &tasks, &cfg.meta, &mut s.rng).unwrap().0);
    }
    let mut agg = w0.clone();
    agg.axpy(-mu, &centroid(&grads).unwrap());

    let dm = diffusion.models();
    let bit_identical = dm
        .iter()
        .zip(central.models())
        .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let mut max_ulps = 0u64;
    for w in &dm {
        for (x, y) in w.iter().zip(agg.iter()) {
            max_ulps = max_ulps.max((x.to_bits() as i64 - y.to_bits() as i64).unsigned_abs());
        }
    }

    let mut rng = substream(7, 0);
    let mut preserve: f64 = 0.0;
    for _ in 0..50 {
        let kk = rng.random_range(2..=10);
        let t = build_topology(&TopologyKind::ErdosRenyi { p: 0.5 }, kk, Some(&mut rng)).unwrap();
        let a = metropolis_weights(&t);
        let phi: Vec<ParamVector> = (0..kk)
            .map(|_| (0..5).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>().into())
            .collect();
        let out = difmaml::netsim::combine_step(&phi, &a).unwrap();
        let d = centroid(&out).unwrap().sub(&centroid(&phi).unwrap());
        preserve = preserve.max(d.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    Outcome {
        pass: bit_identical && max_ulps <= 4 && preserve <= 1e-12,
        detail: format!(
            "uniform-matrix diffusion vs centralized network bit-identical: {bit_identical}; \
             vs aggregate SGD formula within {max_ulps} ulp; centroid drift {preserve:.1e}"
        ),
    }
}

struct SineRuns {
    /// `[seed][strategy]`
    results: Vec<Vec<RunResult>>,
    configs: Vec<Vec<RunConfig>>,
}

fn train_sine() -> SineRuns {
    let cfg = load_config("sine_desk.cfg");
    let mut results = Vec::new();
    let mut configs = Vec::new();
    for seed in 0..3u64 {
        let mut rs = Vec::new();
        let mut cs = Vec::new();
        for s in Strategy::ALL {
            let rc = RunConfig {
                seed,
                ..cfg.run_config(s).unwrap()
            };
            rs.push(run(&rc).unwrap());
            cs.push(rc);
        }
        results.push(rs);
        configs.push(cs);
    }
    SineRuns { results, configs }
}

fn c8_ordering(runs: &SineRuns) -> Outcome {
    let mut mean = [0.0; 3];
    for per_seed in &runs.results {
        for (i, r) in per_seed.iter().enumerate() {
            mean[i] += r.rows.last().map_or(f64::NAN, |row| row.mean_test_loss) / runs.results.len() as f64;
        }
    }
    let [diff, cent, nonc] = mean;
    let margin = (nonc - diff) / nonc;
    let gap = (diff - cent).abs() / cent;
    let iters = runs.configs[0][0].iterations;
    Outcome {
        pass: margin >= 0.2 && gap <= 0.15 && iters == 3000,
        detail: format!(
            "final test MSE over 3 seeds: diffusion {diff:.4}, centralized {cent:.4}, non-cooperative {nonc:.4}; \
             margin over non-cooperative {:.1}% (>= 20%), gap to centralized {:.1}% (<= 15%)",
            100.0 * margin,
            100.0 * gap
        ),
    }
}

fn c9_metatest(runs: &SineRuns) -> Outcome {
    let steps = 10;
    let mut curves = vec![vec![0.0; steps + 1]; 3];
    let mut tasks_used = 0;
    for (per_seed, cfgs) in runs.results.iter().zip(&runs.configs) {
        for (i, (r, rc)) in per_seed.iter().zip(cfgs).enumerate() {
            let tasks = eval_set(rc).unwrap();
            tasks_used = tasks.len();
            for w in &r.models {
                let c = meta_test(&rc.model, w, &tasks, rc.meta.alpha, steps).unwrap();
                let scale = 1.0 / (r.models.len() * runs.results.len()) as f64;
                for (acc, v) in curves[i].iter_mut().zip(c) {
                    *acc += scale * v;
                }
            }
        }
    }
    let ordered = curves[0].iter().zip(&curves[2]).all(|(d, n)| d <= n);
    let fmt = |c: &[f64]| c.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Outcome {
        pass: ordered && tasks_used == 200 && curves.iter().all(|c| c.iter().all(|x| x.is_finite())),
        detail: format!(
            "{tasks_used} test tasks, steps 0..{steps}; diffusion [{}]; centralized [{}]; non-cooperative [{}]",
            fmt(&curves[0]),
            fmt(&curves[1]),
            fmt(&curves[2])
        ),
    }
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_difmaml");
    let mut details = Vec::new();
    let mut pass = true;
    let cases = [
        (
            "sine",
            "strategy = diffusion,centralized,non_cooperative\nrun.iterations = 200\nrun.eval_every = 50\n\
             run.eval_tasks = 20\nmeta.task_batch = 2\n",
        ),
        (
            "quad",
            "strategy = diffusion,centralized,non_cooperative\ntasks.family = quad\ntopology.kind = ring\n\
             tasks.k_agents = 8\ntasks.sigma = 0.3\nopt.kind = sgd\nopt.mu = 0.02\nmeta.alpha = 0.1\n\
             run.iterations = 400\nrun.eval_every = 20\nrun.eval_tasks = 20\nrun.per_agent_init = true\n",
        ),
    ];
    for (name, body) in cases {
        let mut outputs = Vec::new();
        for threads in ["1", "8"] {
            let csv = dir.path().join(format!("{name}_{threads}.csv"));
            let cfg = dir.path().join(format!("{name}_{threads}.cfg"));
            std::fs::write(&cfg, format!("{body}out.csv = {}\n", csv.display())).unwrap();
            let status = Command::new(bin)
                .arg("run")
                .arg(&cfg)
                .env("DIFMAML_THREADS", threads)
                .output()
                .unwrap();
            pass &= status.status.success();
            outputs.push(strip_wall_clock(&std::fs::read_to_string(&csv).unwrap_or_default()));
        }
        let same = outputs[0] == outputs[1] && outputs[0].lines().count() > 1;
        pass &= same;
        details.push(format!("{name}: {} rows identical {same}", outputs[0].lines().count() - 1));
    }
    Outcome {
        pass,
        detail: format!("DIFMAML_THREADS=1 vs 8; {}", details.join("; ")),
    }
}

fn report(id: u32, name: &str, limit: Duration, started: Instant, o: Outcome) -> bool {
    let elapsed = started.elapsed();
    let in_time = elapsed <= limit;
    let pass = o.pass && in_time;
    println!(
        "{} {id:>2} {name}: {} [{:.1}s, limit {}s{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));
    let secs = Duration::from_secs;
    let mut all = true;

    type Check = (u32, &'static str, u64, fn() -> Outcome);
    let quick: [Check; 7] = [
        (1, "autodiff_finite_differences", 5, c1_autodiff),
        (2, "meta_gradient_unbiased", 30, c2_unbiased),
        (3, "lemma1_objective_gap", 5, c3_lemma1),
        (4, "theorem1_disagreement_scaling", 120, c4_theorem1),
        (5, "theorem2_stationarity_scaling", 120, c5_theorem2),
        (6, "combination_matrices", 10, c6_combination),
        (7, "centralized_equivalence", 5, c7_centralized),
    ];
    for (id, name, limit, f) in quick {
        if wanted(name) {
            let t = Instant::now();
            all &= report(id, name, secs(limit), t, f());
        }
    }
    if wanted("sine_ordering") || wanted("metatest_curves") {
        let t = Instant::now();
        let runs = train_sine();
        all &= report(8, "sine_ordering", secs(900), t, c8_ordering(&runs));
        let t = Instant::now();
        all &= report(9, "metatest_curves", secs(120), t, c9_metatest(&runs));
    }
    if wanted("determinism") {
        let t = Instant::now();
        all &= report(10, "determinism", secs(600), t, c10_determinism());
    }
    if !all {
        std::process::exit(1);
    }
}
