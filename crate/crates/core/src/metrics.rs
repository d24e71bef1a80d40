//! Convergence diagnostics and the constants of the convergence theory.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{self, ParamVector};
use crate::error::{Error, Result};
use crate::meta::{
    adjusted_gradient_quad, adjusted_objective_quad, aggregate_adjusted_gradient, exact_meta_gradient_quad,
    maml_objective_quad, stochastic_meta_gradient, MetaConfig,
};
use crate::model::ModelSpec;
use crate::rng::Stream;
use crate::tasks::{sample_data, sample_tasks, DataBatch, QuadMixture, Task, TaskDistribution, TaskLoss};

/// Radius of the ball around the task optima on which bounded-gradient
/// constants are measured for quadratic tasks.
pub const PROBE_RADIUS: f64 = 10.0;

/// Coordinate-wise mean of the agents' models.
pub fn centroid(states: &[ParamVector]) -> Result<ParamVector> {
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidArgument("centroid of zero agents".into()))?;
    let mut acc = ParamVector::zeros(first.dim());
    for s in states {
        if s.dim() != first.dim() {
            return Err(Error::dims(first.dim(), s.dim()));
        }
        acc.axpy(1.0, s);
    }
    Ok(acc.scaled(1.0 / states.len() as f64))
}

/// `(1/K) Σ ‖w_k − w_c‖²`.
pub fn network_disagreement(states: &[ParamVector]) -> Result<f64> {
    let c = centroid(states)?;
    Ok(states.iter().map(|s| s.sub(&c).norm_sq()).sum::<f64>() / states.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradNormEstimate {
    pub value: f64,
    /// Variance term subtracted from the plug-in estimate; zero when exact.
    pub correction: f64,
}

/// Estimate of `‖∇Ĵ(w_c)‖²` for the aggregate objective over all agents.
///
/// Exact on the quadratic family. Otherwise the squared norm of the mean of
/// `n_mc` single-task stochastic meta-gradients drawn from the union of the
/// agents' distributions, minus the sample variance of that mean.
pub fn centroid_grad_norm_sq(
    model: &ModelSpec,
    w_c: &ParamVector,
    dist: &TaskDistribution,
    cfg: &MetaConfig,
    n_mc: usize,
    rng: &mut Stream,
) -> Result<GradNormEstimate> {
    if let TaskDistribution::Quad { .. } = dist {
        let g = aggregate_adjusted_gradient(dist, w_c, cfg.alpha)?;
        return Ok(GradNormEstimate {
            value: g.norm_sq(),
            correction: 0.0,
        });
    }
    monte_carlo_grad_norm_sq(model, w_c, dist, cfg, n_mc, rng)
}

/// The bias-corrected plug-in estimator, usable on any family.
pub fn monte_carlo_grad_norm_sq(
    model: &ModelSpec,
    w_c: &ParamVector,
    dist: &TaskDistribution,
    cfg: &MetaConfig,
    n_mc: usize,
    rng: &mut Stream,
) -> Result<GradNormEstimate> {
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    let union = dist.union()?;
    let single = MetaConfig {
        task_batch: 1,
        ..cfg.clone()
    };
    let mut samples = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let tasks = sample_tasks(&union, 0, 1, rng)?;
        samples.push(stochastic_meta_gradient(model, w_c, &tasks, &single, rng)?);
    }
    let mean = centroid(&samples)?;
    let plug_in = mean.norm_sq();
    let correction = if n_mc > 1 {
        let ss: f64 = samples.iter().map(|g| g.sub(&mean).norm_sq()).sum();
        ss / (n_mc - 1) as f64 / n_mc as f64
    } else {
        0.0
    };
    Ok(GradNormEstimate {
        value: plug_in - correction,
        correction,
    })
}

/// Assumption constants: smoothness `l`, Hessian Lipschitz `rho`, gradient
/// bound `b`, data noise `sigma_g`/`sigma_h`, task variability
/// `gamma_g`/`gamma_h`, plus the step size and batch sizes.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TheoryInputs {
    pub l: f64,
    pub rho: f64,
    pub b: f64,
    pub sigma_g: f64,
    pub sigma_h: f64,
    pub gamma_g: f64,
    pub gamma_h: f64,
    pub alpha: f64,
    pub inner_batch: usize,
    pub outer_batch: usize,
    pub task_batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryConstants {
    pub inputs: TheoryInputs,
    /// Gradient bound of the adjusted objective.
    pub b_hat: f64,
    /// Lipschitz constant of the adjusted objective's gradient.
    pub l_hat: f64,
    pub c1_sq: f64,
    pub c2_sq: f64,
    pub c3: f64,
    /// Gradient-noise bound of the stochastic meta-gradient.
    pub c_sq: f64,
}

pub fn theory_constants(inputs: &TheoryInputs) -> Result<TheoryConstants> {
    let TheoryInputs {
        l,
        rho,
        b,
        sigma_g: sg,
        sigma_h: sh,
        gamma_g: gg,
        gamma_h: gh,
        alpha: a,
        ..
    } = *inputs;
    if [l, rho, b, sg, sh, gg, gh, a].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument("theory inputs must be finite and >= 0".into()));
    }
    if inputs.inner_batch == 0 || inputs.outer_batch == 0 || inputs.task_batch == 0 {
        return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
    }
    let din = inputs.inner_batch as f64;
    let dout = inputs.outer_batch as f64;
    let s = inputs.task_batch as f64;
    let al = a * l;

    let b_hat = (1.0 + al) * b;
    let l_hat = l * (1.0 + al).powi(2) + a * rho * b;

    let c1_sq = 6.0 * (1.0 + al).powi(2) * sg * sg * (1.0 / dout + l * l * a * a / din)
        + 6.0 * a * a * sh * sh / din * (b * b + sg * sg / dout)
        + 9.0 * a.powi(4) / (din * din) * (sh.powi(4) + l.powi(4) * sg.powi(4));

    let c2_sq = 8.0 * (1.0 + al).powi(2) * (1.0 + al * al) * gg * gg
        + 4.0 * b * b * a * a * gh * gh
        + 2.0 * a.powi(4) * gh.powi(4)
        + 16.0 * (1.0 + al.powi(4)) * gg.powi(4);

    let c3 = (1.0 + al) * al * sg / din.sqrt()
        + (1.0 + al).powi(2) * gg
        + b * a * sh / din.sqrt()
        + b * a * gh
        + a * a * sh * sh / din
        + a * a * gh * gh
        + al * al * sg * sg / din
        + 2.0 * (1.0 + al * al) * gg * gg;

    let c_sq = 3.0 / s * (c1_sq + c2_sq + c3 * c3);

    Ok(TheoryConstants {
        inputs: *inputs,
        b_hat,
        l_hat,
        c1_sq,
        c2_sq,
        c3,
        c_sq,
    })
}

/// Steady-state disagreement bound `μ²λ₂²(B̂²+C²)/(1−λ₂)²`.
pub fn disagreement_bound(mu: f64, lambda2: f64, b_hat: f64, c_sq: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda2) {
        return Err(Error::LambdaOutOfRange(lambda2));
    }
    Ok(mu * mu * lambda2 * lambda2 * (b_hat * b_hat + c_sq) / (1.0 - lambda2).powi(2))
}

/// Stationarity floor of the MAML objective relative to the adjusted one:
/// `2((1+αL)αLσ_G/√|D_in| + Bασ_H/√|D_in|)²`.
pub fn maml_stationarity_floor(inputs: &TheoryInputs) -> f64 {
    let g = lemma2_bound(inputs);
    2.0 * g * g
}

/// `α²Lσ_G²/(2|D_in|) + Bασ_G/√|D_in|`.
pub fn lemma1_bound(inputs: &TheoryInputs) -> f64 {
    let din = inputs.inner_batch as f64;
    let a = inputs.alpha;
    a * a * inputs.l * inputs.sigma_g * inputs.sigma_g / (2.0 * din) + inputs.b * a * inputs.sigma_g / din.sqrt()
}

/// `(1+αL)αLσ_G/√|D_in| + Bασ_H/√|D_in|`.
pub fn lemma2_bound(inputs: &TheoryInputs) -> f64 {
    let din = inputs.inner_batch as f64;
    let a = inputs.alpha;
    let al = a * inputs.l;
    (1.0 + al) * al * inputs.sigma_g / din.sqrt() + inputs.b * a * inputs.sigma_h / din.sqrt()
}

/// Assumption constants measured on a quadratic family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadConstants {
    pub l: f64,
    pub rho: f64,
    pub b: f64,
    /// Fourth-root of the fourth central moment of single-sample gradient
    /// noise, `σ(tr(H²)² + 2tr(H⁴))^¼`, maximised over tasks.
    pub sigma_g: f64,
    /// `max_t σ_t √tr(H_t²)`, the second-moment counterpart.
    pub sigma_g_second_moment: f64,
    pub sigma_h: f64,
    pub gamma_g: f64,
    pub gamma_h: f64,
}

impl QuadConstants {
    pub fn theory_inputs(&self, cfg: &MetaConfig) -> TheoryInputs {
        TheoryInputs {
            l: self.l,
            rho: self.rho,
            b: self.b,
            sigma_g: self.sigma_g,
            sigma_h: self.sigma_h,
            gamma_g: self.gamma_g,
            gamma_h: self.gamma_h,
            alpha: cfg.alpha,
            inner_batch: cfg.inner_batch,
            outer_batch: cfg.outer_batch,
            task_batch: cfg.task_batch,
        }
    }
}

fn spectral_norm_sym(m: usize, a: &[f64]) -> f64 {
    SymmetricEigen::new(DMatrix::from_row_slice(m, m, a))
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Measures the assumption constants of a quadratic family on the ball of
/// radius `radius` around the mean task optimum (over all agents).
///
/// Gradients are bounded there by `λ_max(R + ‖θ_t − c‖) + σ√tr(H²)`; the
/// Hessian is constant so `ρ = σ_H = 0`. Task variability is bounded per
/// agent through `‖(H_t − H̄)(w − c)‖ ≤ ‖H_t − H̄‖₂R`.
pub fn measure_quad_constants(dist: &TaskDistribution, radius: f64) -> Result<QuadConstants> {
    let TaskDistribution::Quad { agents } = dist else {
        return Err(Error::UnsupportedFamily { expected: "quad" });
    };
    let m = agents[0].dim();
    let all = QuadMixture::union(agents)?;
    let mut centre = ParamVector::zeros(m);
    for (p, t) in all.entries() {
        centre.axpy(*p, t.theta());
    }

    let mut l: f64 = 0.0;
    let mut b: f64 = 0.0;
    let mut sigma_g: f64 = 0.0;
    let mut sigma_g2: f64 = 0.0;
    for (_, t) in all.entries() {
        let lam = t.lambda_max();
        l = l.max(lam);
        let tr2 = t.trace_pow(2);
        let noise = t.sigma() * tr2.sqrt();
        b = b.max(lam * (radius + t.theta().sub(&centre).norm_sq().sqrt()) + noise);
        sigma_g2 = sigma_g2.max(noise);
        let fourth = t.sigma().powi(4) * (tr2 * tr2 + 2.0 * t.trace_pow(4));
        sigma_g = sigma_g.max(fourth.powf(0.25));
    }

    let mut gamma_g: f64 = 0.0;
    let mut gamma_h: f64 = 0.0;
    for mix in agents {
        let mut h_bar = vec![0.0; m * m];
        for (p, t) in mix.entries() {
            for (hb, h) in h_bar.iter_mut().zip(t.hessian()) {
                *hb += p * h;
            }
        }
        // e_t = ∇J_t(c) − 𝔼∇J_t(c)
        let grads: Vec<ParamVector> = mix
            .entries()
            .iter()
            .map(|(_, t)| t.risk_gradient(&centre))
            .collect::<Result<_>>()?;
        let mut mean_grad = ParamVector::zeros(m);
        for ((p, _), g) in mix.entries().iter().zip(&grads) {
            mean_grad.axpy(*p, g);
        }
        let mut g4 = 0.0;
        let mut h4 = 0.0;
        for ((p, t), g) in mix.entries().iter().zip(&grads) {
            let diff: Vec<f64> = t.hessian().iter().zip(&h_bar).map(|(a, b)| a - b).collect();
            let dn = spectral_norm_sym(m, &diff);
            let e = g.sub(&mean_grad).norm_sq().sqrt();
            g4 += p * (dn * radius + e).powi(4);
            h4 += p * dn.powi(4);
        }
        gamma_g = gamma_g.max(g4.powf(0.25));
        gamma_h = gamma_h.max(h4.powf(0.25));
    }

    Ok(QuadConstants {
        l,
        rho: 0.0,
        b,
        sigma_g,
        sigma_g_second_moment: sigma_g2,
        sigma_h: 0.0,
        gamma_g,
        gamma_h,
    })
}

/// A held-out task with one fixed support batch and a disjoint query batch.
#[derive(Clone, Debug)]
pub struct EvalTask {
    pub task: Task,
    pub support: DataBatch,
    pub query: DataBatch,
}

/// Draws `n` evaluation tasks from the union of all agents' distributions.
pub fn sample_eval_tasks(
    dist: &TaskDistribution,
    n: usize,
    shots: usize,
    query: usize,
    rng: &mut Stream,
) -> Result<Vec<EvalTask>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let union = dist.union()?;
    sample_tasks(&union, 0, n, rng)?
        .into_iter()
        .map(|task| {
            let support = sample_data(&task, shots, rng)?;
            let query = sample_data(&task, query, rng)?;
            Ok(EvalTask { task, support, query })
        })
        .collect()
}

/// Mean query loss over `tasks` after `0..=grad_steps` adaptation steps of
/// size `alpha` on each task's support batch.
pub fn meta_test(
    model: &ModelSpec,
    launch: &ParamVector,
    tasks: &[EvalTask],
    alpha: f64,
    grad_steps: usize,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; grad_steps + 1];
    for t in tasks {
        let support = TaskLoss {
            model,
            task: &t.task,
            batch: &t.support,
        };
        let query = TaskLoss {
            model,
            task: &t.task,
            batch: &t.query,
        };
        let mut w = launch.clone();
        sums[0] += autodiff::value(&query, &w)?;
        for s in 1..=grad_steps {
            let g = autodiff::gradient(&support, &w)?;
            w.axpy(-alpha, &g);
            sums[s] += autodiff::value(&query, &w)?;
        }
    }
    let n = tasks.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationRow {
    pub alpha: f64,
    pub inner_batch: usize,
    /// `max_w |J̄(w) − Ĵ(w)|` over the probe points.
    pub objective_gap: f64,
    pub objective_bound: f64,
    /// `max_w ‖∇J̄(w) − ∇Ĵ(w)‖`.
    pub gradient_gap: f64,
    pub gradient_bound: f64,
}

/// Objective and gradient gaps between the MAML and adjusted objectives of
/// one agent's quadratic mixture, with the perturbation bounds evaluated from
/// the measured constants (`σ_G² = σ²tr(H²)` for the objective bound).
pub fn perturbation_probe(
    mix: &QuadMixture,
    grid: &[(f64, usize)],
    probe_points: &[ParamVector],
) -> Result<Vec<PerturbationRow>> {
    let dist = TaskDistribution::Quad {
        agents: vec![mix.clone()],
    };
    let consts = measure_quad_constants(&dist, PROBE_RADIUS)?;
    grid.iter()
        .map(|&(alpha, inner_batch)| {
            let cfg = MetaConfig {
                alpha,
                inner_batch,
                inner_steps: 1,
                ..MetaConfig::default()
            };
            let mut objective_gap: f64 = 0.0;
            let mut gradient_gap: f64 = 0.0;
            for w in probe_points {
                let gap = (adjusted_objective_quad(w, mix, &cfg)? - maml_objective_quad(w, mix, alpha)?).abs();
                objective_gap = objective_gap.max(gap);
                let gg = exact_meta_gradient_quad(w, mix, alpha)?
                    .sub(&adjusted_gradient_quad(w, mix, alpha)?)
                    .norm_sq()
                    .sqrt();
                gradient_gap = gradient_gap.max(gg);
            }
            let base = TheoryInputs {
                l: consts.l,
                b: consts.b,
                sigma_h: consts.sigma_h,
                alpha,
                inner_batch,
                outer_batch: 1,
                task_batch: 1,
                ..TheoryInputs::default()
            };
            let objective_bound = lemma1_bound(&TheoryInputs {
                sigma_g: consts.sigma_g_second_moment,
                ..base
            });
            let gradient_bound = lemma2_bound(&TheoryInputs {
                sigma_g: consts.sigma_g,
                ..base
            });
            Ok(PerturbationRow {
                alpha,
                inner_batch,
                objective_gap,
                objective_bound,
                gradient_gap,
                gradient_bound,
            })
        })
        .collect()
}

/// Probe points: the mean optimum and its displacements by `±radius/2`
/// along each axis.
pub fn probe_points(mix: &QuadMixture, radius: f64) -> Vec<ParamVector> {
    let m = mix.dim();
    let mut c = ParamVector::zeros(m);
    for (p, t) in mix.entries() {
        c.axpy(*p, t.theta());
    }
    let mut out = vec![c.clone()];
    for i in 0..m {
        for s in [-0.5, 0.5] {
            let mut w = c.clone();
            w[i] += s * radius;
            out.push(w);
        }
    }
    out
}
