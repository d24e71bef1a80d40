//! Numerical checks of the perturbation lemmas, the unbiasedness of the
//! stochastic meta-gradient, and the step-size scaling of the disagreement
//! and stationarity bounds, all on the quadratic family.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::graph::CombinationMatrix;
use crate::meta::{
    aggregate_adjusted_gradient, exact_meta_gradient_quad, maml_objective_quad, stochastic_meta_gradient, MetaConfig,
};
use crate::metrics::{
    centroid, disagreement_bound, maml_stationarity_floor, measure_quad_constants, network_disagreement,
    perturbation_probe, probe_points, theory_constants, PerturbationRow, PROBE_RADIUS,
};
use crate::netsim::{initial_models, Network, OuterOptimizer, RunConfig};
use crate::rng::{substream, PROBE_STREAM};
use crate::tasks::{sample_tasks, QuadMixture, TaskDistribution};

/// A table of probe measurements plus named pass/fail checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
    pub checks: Vec<(String, bool)>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (what, ok) in &self.checks {
            let _ = writeln!(out, "{} {}: {}", if *ok { "PASS" } else { "FAIL" }, self.name, what);
        }
        let _ = write!(out, "{} {}", if self.passed() { "PASS" } else { "FAIL" }, self.name);
        out
    }
}

pub const PROBE_NAMES: [&str; 5] = ["lemma1", "lemma2", "theorem1", "theorem2", "unbiased"];

/// Step-size grid used by the scaling probes.
pub const MU_GRID: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

fn quad_agents(dist: &TaskDistribution) -> Result<&[crate::tasks::QuadMixture]> {
    match dist {
        TaskDistribution::Quad { agents } => Ok(agents),
        TaskDistribution::Sine { .. } => Err(Error::UnsupportedFamily { expected: "quad" }),
    }
}

/// `(α, |D_in|)` grid for the perturbation probes.
pub fn perturbation_grid(alpha: f64, inner_batch: usize) -> Vec<(f64, usize)> {
    let mut grid = Vec::new();
    for a in [alpha / 2.0, alpha, 2.0 * alpha] {
        for d in [inner_batch, 2 * inner_batch, 4 * inner_batch] {
            grid.push((a, d));
        }
    }
    grid
}

/// Objective-gap probe over every agent's mixture: the gap matches the
/// closed form `α²σ²𝔼tr(H³)/(2|D_in|)`, halves when `|D_in|` doubles, and
/// stays below the perturbation bound.
pub fn lemma1_probe(dist: &TaskDistribution, grid: &[(f64, usize)]) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    let mut within = true;
    let mut closed = true;
    let mut halves = true;
    for (k, mix) in quad_agents(dist)?.iter().enumerate() {
        let points = probe_points(mix, PROBE_RADIUS);
        let res = perturbation_probe(mix, grid, &points)?;
        // Per task the gap does not depend on w, so evaluating each task at its
        // own optimum avoids cancellation against large objective values.
        let mut centre = perturbation_probe(mix, grid, &points[..1])?;
        for c in centre.iter_mut() {
            c.objective_gap = 0.0;
        }
        // Rounding in the two objective values bounds how closely the gap can
        // match the closed form.
        let mut rounding = vec![0.0; grid.len()];
        for (p, t) in mix.entries() {
            let single = QuadMixture::single(t.clone());
            let at_opt = perturbation_probe(&single, grid, std::slice::from_ref(t.theta()))?;
            for (((c, o), slack), &(alpha, _)) in centre.iter_mut().zip(at_opt).zip(rounding.iter_mut()).zip(grid) {
                c.objective_gap += p * o.objective_gap;
                *slack += p * 8.0 * f64::EPSILON * maml_objective_quad(t.theta(), &single, alpha)?.abs();
            }
        }
        let tr3: f64 = mix
            .entries()
            .iter()
            .map(|(p, t)| p * t.sigma() * t.sigma() * t.trace_pow(3))
            .sum();
        for ((r, c), slack) in res.iter().zip(&centre).zip(&rounding) {
            let expected = r.alpha * r.alpha * tr3 / (2.0 * r.inner_batch as f64);
            closed &= (c.objective_gap - expected).abs() <= 1e-12 * expected + slack;
            within &= r.objective_gap <= r.objective_bound;
            if let Some(twice) = centre.iter().find(|o| o.alpha == r.alpha && o.inner_batch == 2 * r.inner_batch) {
                if c.objective_gap > 0.0 {
                    halves &= ((c.objective_gap / twice.objective_gap) - 2.0).abs() <= 1e-9;
                } else {
                    halves &= twice.objective_gap == 0.0;
                }
            }
            rows.push(vec![
                k as f64,
                r.alpha,
                r.inner_batch as f64,
                c.objective_gap,
                r.objective_gap,
                expected,
                r.objective_bound,
            ]);
        }
    }
    Ok(ProbeReport {
        name: "lemma1",
        columns: vec![
            "agent",
            "alpha",
            "inner_batch",
            "gap_at_centre",
            "max_gap",
            "closed_form",
            "bound",
        ],
        rows,
        checks: vec![
            ("gap equals closed form to 1e-12 relative, up to rounding".into(), closed),
            ("gap halves when inner batch doubles".into(), halves),
            ("gap never exceeds bound".into(), within),
        ],
    })
}

/// Gradient-gap probe: `‖∇J̄ − ∇Ĵ‖` stays below its perturbation bound.
pub fn lemma2_probe(dist: &TaskDistribution, grid: &[(f64, usize)]) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    let mut within = true;
    for (k, mix) in quad_agents(dist)?.iter().enumerate() {
        let res: Vec<PerturbationRow> = perturbation_probe(mix, grid, &probe_points(mix, PROBE_RADIUS))?;
        for r in &res {
            within &= r.gradient_gap <= r.gradient_bound;
            rows.push(vec![k as f64, r.alpha, r.inner_batch as f64, r.gradient_gap, r.gradient_bound]);
        }
    }
    Ok(ProbeReport {
        name: "lemma2",
        columns: vec!["agent", "alpha", "inner_batch", "gradient_gap", "bound"],
        rows,
        checks: vec![("gradient gap never exceeds bound".into(), within)],
    })
}

/// Mean of `samples` single-task stochastic meta-gradients at `w`, with
/// tasks drawn from the union of the agents' distributions, against the
/// exact aggregate gradient. Passes when every coordinate is within 3
/// standard errors.
pub fn unbiasedness_probe(
    dist: &TaskDistribution,
    w: &ParamVector,
    cfg: &MetaConfig,
    samples: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let union = dist.union()?;
    let mix = union.quad_mixture(0)?;
    let exact = exact_meta_gradient_quad(w, mix, cfg.alpha)?;
    let single = MetaConfig {
        task_batch: 1,
        ..cfg.clone()
    };
    let model = crate::model::ModelSpec::sine_regressor();
    let m = w.dim();
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut rng = substream(seed, PROBE_STREAM);
    for _ in 0..samples {
        let tasks = sample_tasks(&union, 0, 1, &mut rng)?;
        let g = stochastic_meta_gradient(&model, w, &tasks, &single, &mut rng)?;
        for i in 0..m {
            sum[i] += g[i];
            sum_sq[i] += g[i] * g[i];
        }
    }
    let n = samples as f64;
    let mut rows = Vec::new();
    let mut ok = true;
    for i in 0..m {
        let mean = sum[i] / n;
        let var = (sum_sq[i] - n * mean * mean) / (n - 1.0);
        let se = (var.max(0.0) / n).sqrt();
        let z = if se > 0.0 {
            (mean - exact[i]) / se
        } else if mean == exact[i] {
            0.0
        } else {
            f64::INFINITY
        };
        ok &= z.abs() <= 3.0;
        rows.push(vec![i as f64, mean, exact[i], se, z]);
    }
    Ok(ProbeReport {
        name: "unbiased",
        columns: vec!["coordinate", "mc_mean", "exact", "std_error", "z"],
        rows,
        checks: vec![(format!("mean of {samples} samples within 3 standard errors"), ok)],
    })
}

/// Knobs of the step-size scaling probes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSettings {
    pub mu_grid: Vec<f64>,
    pub replicas: usize,
    /// Iterations spent settling, in units of `1/μ` (at least the consensus
    /// transient `3 ln μ / ln λ₂`).
    pub settle: f64,
    /// Iterations averaged after settling, in units of `1/μ`.
    pub window: f64,
    /// Sub-windows for the min-over-time statistic.
    pub windows: usize,
    pub slack: f64,
}

impl ScalingSettings {
    pub fn disagreement() -> Self {
        ScalingSettings {
            mu_grid: MU_GRID.to_vec(),
            replicas: 8,
            settle: 4.0,
            window: 4.0,
            windows: 1,
            slack: 1.5,
        }
    }

    /// The centroid decorrelates on a `1/μ` time scale, so the stationarity
    /// statistic needs longer windows and more replicas.
    pub fn stationarity() -> Self {
        ScalingSettings {
            replicas: 16,
            window: 8.0,
            windows: 4,
            ..Self::disagreement()
        }
    }
}

/// Per-step-size outcome of a scaling run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub mu: f64,
    pub lambda2: f64,
    pub transient: usize,
    pub averaged: usize,
    /// Time- and replica-averaged network disagreement.
    pub plateau_disagreement: f64,
    /// Replica-averaged `‖∇Ĵ(w_c)‖²`, minimised over sub-windows.
    pub min_grad_norm_sq: f64,
}

/// Runs SGD diffusion at each step size in the grid with per-agent initial
/// models and records the plateau disagreement and stationarity measure.
pub fn scaling_runs(base: &RunConfig, settings: &ScalingSettings) -> Result<Vec<ScalingPoint>> {
    quad_agents(&base.tasks)?;
    if settings.replicas == 0 || settings.windows == 0 {
        return Err(Error::InvalidArgument("replicas and windows must be >= 1".into()));
    }
    let a: CombinationMatrix = base.combination_matrix()?;
    settings
        .mu_grid
        .iter()
        .map(|&mu| {
            let cfg = RunConfig {
                optimizer: OuterOptimizer::Sgd { mu },
                per_agent_init: true,
                threads: Some(1),
                ..base.clone()
            };
            let lambda2 = crate::graph::mixing_rate(&a)?;
            let consensus = if lambda2 > 0.0 {
                (3.0 * mu.ln() / lambda2.ln()).ceil() as usize
            } else {
                0
            };
            let transient = consensus.max((settings.settle / mu).ceil() as usize);
            let averaged = (settings.window / mu).ceil() as usize;
            let per_window = averaged.div_ceil(settings.windows);
            let averaged = per_window * settings.windows;

            let traces: Vec<(f64, Vec<f64>)> = (0..settings.replicas)
                .into_par_iter()
                .map(|r| -> Result<(f64, Vec<f64>)> {
                    let rcfg = RunConfig {
                        seed: base.seed.wrapping_add(r as u64),
                        ..cfg.clone()
                    };
                    let mut net = Network::with_matrix(rcfg, a.clone())?;
                    for _ in 0..transient {
                        net.step()?;
                    }
                    let mut dis = 0.0;
                    let mut win = vec![0.0; settings.windows];
                    for t in 0..averaged {
                        net.step()?;
                        let models = net.models();
                        dis += network_disagreement(&models)?;
                        let c = centroid(&models)?;
                        win[t / per_window] += aggregate_adjusted_gradient(&cfg.tasks, &c, cfg.meta.alpha)?.norm_sq();
                    }
                    Ok((dis / averaged as f64, win.into_iter().map(|s| s / per_window as f64).collect()))
                })
                .collect::<Result<_>>()?;

            let n = traces.len() as f64;
            let plateau = traces.iter().map(|(d, _)| d).sum::<f64>() / n;
            let min_grad = (0..settings.windows)
                .map(|w| traces.iter().map(|(_, v)| v[w]).sum::<f64>() / n)
                .fold(f64::INFINITY, f64::min);
            Ok(ScalingPoint {
                mu,
                lambda2,
                transient,
                averaged,
                plateau_disagreement: plateau,
                min_grad_norm_sq: min_grad,
            })
        })
        .collect()
}

/// Plateau disagreement scales as `μ²` (slope 2 ± 0.3) and stays below the
/// steady-state bound times the slack.
pub fn theorem1_probe(base: &RunConfig, settings: &ScalingSettings) -> Result<ProbeReport> {
    let consts = measure_quad_constants(&base.tasks, PROBE_RADIUS)?;
    let theory = theory_constants(&consts.theory_inputs(&base.meta))?;
    let points = scaling_runs(base, settings)?;
    let mut rows = Vec::new();
    let mut within = true;
    for p in &points {
        let bound = disagreement_bound(p.mu, p.lambda2, theory.b_hat, theory.c_sq)?;
        within &= p.plateau_disagreement <= settings.slack * bound;
        rows.push(vec![
            p.mu,
            p.lambda2,
            p.transient as f64,
            p.averaged as f64,
            p.plateau_disagreement,
            bound,
        ]);
    }
    let mus: Vec<f64> = points.iter().map(|p| p.mu).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.plateau_disagreement).collect();
    let slope = log_log_slope(&mus, &ys)?;
    Ok(ProbeReport {
        name: "theorem1",
        columns: vec!["mu", "lambda2", "transient", "averaged", "plateau_disagreement", "bound"],
        rows,
        checks: vec![
            (format!("log-log slope {slope:.3} in [1.7, 2.3]"), (1.7..=2.3).contains(&slope)),
            (format!("plateau <= {} x bound", settings.slack), within),
        ],
    })
}

/// The stationarity measure at the centroid scales as `μ` (slope 1 ± 0.3),
/// with the MAML-versus-adjusted floor under 10% of the smallest value.
pub fn theorem2_probe(base: &RunConfig, settings: &ScalingSettings) -> Result<ProbeReport> {
    let consts = measure_quad_constants(&base.tasks, PROBE_RADIUS)?;
    let inputs = consts.theory_inputs(&base.meta);
    let theory = theory_constants(&inputs)?;
    let floor = maml_stationarity_floor(&inputs);
    let points = scaling_runs(base, settings)?;
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|p| vec![p.mu, p.min_grad_norm_sq, 2.0 * p.mu * theory.l_hat * theory.c_sq, floor])
        .collect();
    let mus: Vec<f64> = points.iter().map(|p| p.mu).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.min_grad_norm_sq).collect();
    let slope = log_log_slope(&mus, &ys)?;
    let smallest = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        name: "theorem2",
        columns: vec!["mu", "min_grad_norm_sq", "noise_term", "maml_floor"],
        rows,
        checks: vec![
            (format!("log-log slope {slope:.3} in [0.7, 1.3]"), (0.7..=1.3).contains(&slope)),
            (
                format!("floor {floor:.3e} below 10% of smallest value {smallest:.3e}"),
                floor < 0.1 * smallest,
            ),
        ],
    })
}

/// Samples used by the unbiasedness probe when driven from a config.
pub const UNBIASED_SAMPLES: usize = 100_000;

/// Runs a named probe against a quadratic-family run configuration.
pub fn run_probe(name: &str, cfg: &RunConfig) -> Result<ProbeReport> {
    quad_agents(&cfg.tasks)?;
    match name {
        "lemma1" => lemma1_probe(&cfg.tasks, &perturbation_grid(cfg.meta.alpha, cfg.meta.inner_batch)),
        "lemma2" => lemma2_probe(&cfg.tasks, &perturbation_grid(cfg.meta.alpha, cfg.meta.inner_batch)),
        "theorem1" => theorem1_probe(cfg, &ScalingSettings::disagreement()),
        "theorem2" => theorem2_probe(cfg, &ScalingSettings::stationarity()),
        "unbiased" => {
            let w = centroid(&initial_models(cfg))?;
            unbiasedness_probe(&cfg.tasks, &w, &cfg.meta, UNBIASED_SAMPLES, cfg.seed)
        }
        other => Err(Error::Config(format!(
            "unknown probe '{other}', expected one of {}",
            PROBE_NAMES.join(", ")
        ))),
    }
}
