//! MAML inner adaptation and meta-gradients.
//!
//! The stochastic estimator for one task is
//! `(I − α∇²Q(w; D_in)) ∇Q(w − α∇Q(w; D_in); D_o)`, evaluated with one
//! Hessian-vector product per inner step. On the quadratic family the
//! exact MAML gradient, the adjusted objective and its gradient have closed
//! forms, which serve as oracles for the estimator.

use crate::autodiff::{self, ParamVector};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::Stream;
use crate::tasks::{quad_exact_risk, sample_data, DataBatch, QuadMixture, QuadTask, Task, TaskDistribution, TaskLoss};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub alpha: f64,
    pub inner_steps: usize,
    pub inner_batch: usize,
    pub outer_batch: usize,
    pub task_batch: usize,
    /// Drop the Hessian terms (first-order MAML).
    pub first_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.01,
            inner_steps: 1,
            inner_batch: 10,
            outer_batch: 10,
            task_batch: 1,
            first_order: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.inner_steps == 0 || self.inner_batch == 0 || self.outer_batch == 0 || self.task_batch == 0 {
            return Err(Error::InvalidArgument(
                "inner steps and all batch sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One inner gradient step: where it was taken and on which batch.
#[derive(Clone, Debug)]
pub struct InnerStep {
    pub point: ParamVector,
    pub batch: DataBatch,
}

#[derive(Clone, Debug)]
pub struct Adaptation {
    pub adapted: ParamVector,
    pub steps: Vec<InnerStep>,
}

/// `inner_steps` SGD steps of size `α`, each on a fresh batch of
/// `inner_batch` points.
pub fn inner_adapt(
    model: &ModelSpec,
    w: &ParamVector,
    task: &Task,
    cfg: &MetaConfig,
    rng: &mut Stream,
) -> Result<Adaptation> {
    let mut point = w.clone();
    let mut steps = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let batch = sample_data(task, cfg.inner_batch, rng)?;
        let g = autodiff::gradient(&TaskLoss { model, task, batch: &batch }, &point)?;
        let mut next = point.clone();
        next.axpy(-cfg.alpha, &g);
        steps.push(InnerStep { point, batch });
        point = next;
    }
    Ok(Adaptation {
        adapted: point,
        steps,
    })
}

/// Per-task meta-gradient and the post-adaptation outer loss.
fn task_meta_gradient(
    model: &ModelSpec,
    w: &ParamVector,
    task: &Task,
    cfg: &MetaConfig,
    rng: &mut Stream,
) -> Result<(ParamVector, f64)> {
    let adaptation = inner_adapt(model, w, task, cfg, rng)?;
    let outer = sample_data(task, cfg.outer_batch, rng)?;
    let (loss, mut g) = autodiff::value_and_gradient(
        &TaskLoss {
            model,
            task,
            batch: &outer,
        },
        &adaptation.adapted,
    )?;
    if !cfg.first_order && cfg.alpha != 0.0 {
        // g ← (I − α∇²Q(w_j; D_j)) g, innermost step last
        for step in adaptation.steps.iter().rev() {
            let hg = autodiff::hvp(
                &TaskLoss {
                    model,
                    task,
                    batch: &step.batch,
                },
                &step.point,
                &g,
            )?;
            g.axpy(-cfg.alpha, &hg);
        }
    }
    Ok((g, loss))
}

/// Meta-gradient averaged over `tasks`, with the mean outer-batch loss of the
/// adapted models.
pub fn meta_gradient_and_loss(
    model: &ModelSpec,
    w: &ParamVector,
    tasks: &[Task],
    cfg: &MetaConfig,
    rng: &mut Stream,
) -> Result<(ParamVector, f64)> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("empty task batch".into()));
    }
    let mut total = ParamVector::zeros(w.dim());
    let mut loss = 0.0;
    for task in tasks {
        let (g, l) = task_meta_gradient(model, w, task, cfg, rng)?;
        total.axpy(1.0, &g);
        loss += l;
    }
    let n = tasks.len() as f64;
    let total = total.scaled(1.0 / n);
    if !total.is_finite() {
        return Err(Error::non_finite("meta-gradient"));
    }
    Ok((total, loss / n))
}

/// The stochastic MAML gradient over a batch of tasks.
pub fn stochastic_meta_gradient(
    model: &ModelSpec,
    w: &ParamVector,
    tasks: &[Task],
    cfg: &MetaConfig,
    rng: &mut Stream,
) -> Result<ParamVector> {
    meta_gradient_and_loss(model, w, tasks, cfg, rng).map(|(g, _)| g)
}

fn check_quad_dim(w: &ParamVector, mix: &QuadMixture) -> Result<()> {
    if w.dim() != mix.dim() {
        return Err(Error::dims(mix.dim(), w.dim()));
    }
    Ok(())
}

/// `(I − αH)v`.
fn damp(task: &QuadTask, alpha: f64, v: &[f64]) -> Vec<f64> {
    let hv = task.apply(v);
    v.iter().zip(&hv).map(|(x, y)| x - alpha * y).collect()
}

/// Exact MAML gradient `𝔼_t (I−αH_t)H_t(I−αH_t)(w−θ_t)`.
pub fn exact_meta_gradient_quad(w: &ParamVector, mix: &QuadMixture, alpha: f64) -> Result<ParamVector> {
    check_quad_dim(w, mix)?;
    let mut acc = ParamVector::zeros(w.dim());
    for (p, t) in mix.entries() {
        let d = w.sub(t.theta());
        let v = damp(t, alpha, &d);
        let hv = t.apply(&v);
        acc.axpy(*p, &ParamVector::new(damp(t, alpha, &hv)));
    }
    Ok(acc)
}

/// MAML objective `J̄(w) = 𝔼_t J_t(w − α∇J_t(w))` including the constant
/// noise floor `½σ²tr(H)` of each task risk.
pub fn maml_objective_quad(w: &ParamVector, mix: &QuadMixture, alpha: f64) -> Result<f64> {
    check_quad_dim(w, mix)?;
    let mut acc = 0.0;
    for (p, t) in mix.entries() {
        let step = t.risk_gradient(w)?;
        let mut moved = w.clone();
        moved.axpy(-alpha, &step);
        acc += p * quad_exact_risk(t, &moved)?;
    }
    Ok(acc)
}

/// Adjusted objective `Ĵ(w) = 𝔼_t 𝔼 J_t(w − α∇Q_t(w; D_in))`.
///
/// The adapted point is Gaussian with mean `w − αH(w−θ)` and covariance
/// `(α²σ²/|D_in|)H²`, so its expected risk is the risk at the mean plus
/// `½tr(H·Cov)`.
pub fn adjusted_objective_quad(w: &ParamVector, mix: &QuadMixture, cfg: &MetaConfig) -> Result<f64> {
    check_quad_dim(w, mix)?;
    if cfg.inner_steps != 1 {
        return Err(Error::InvalidArgument(
            "the adjusted objective is defined for a single inner step".into(),
        ));
    }
    let m = mix.dim();
    let mut acc = 0.0;
    for (p, t) in mix.entries() {
        let step = t.risk_gradient(w)?;
        let mut mean = w.clone();
        mean.axpy(-cfg.alpha, &step);
        let at_mean = quad_exact_risk(t, &mean)?;
        let c = cfg.alpha * cfg.alpha * t.sigma() * t.sigma() / cfg.inner_batch as f64;
        // tr(H·H²) column by column
        let mut tr = 0.0;
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let h3e = t.apply(&t.apply(&t.apply(&e)));
            tr += h3e[j];
        }
        acc += p * (at_mean + 0.5 * c * tr);
    }
    Ok(acc)
}

/// `∇Ĵ(w) = 𝔼_t (I−αH_t)∇J_t(w − αH_t(w−θ_t))`. The noise term of `Ĵ`
/// is constant in `w`, so this coincides with the exact MAML gradient.
pub fn adjusted_gradient_quad(w: &ParamVector, mix: &QuadMixture, alpha: f64) -> Result<ParamVector> {
    check_quad_dim(w, mix)?;
    let mut acc = ParamVector::zeros(w.dim());
    for (p, t) in mix.entries() {
        let step = t.risk_gradient(w)?;
        let mut mean = w.clone();
        mean.axpy(-alpha, &step);
        let outer = t.risk_gradient(&mean)?;
        acc.axpy(*p, &ParamVector::new(damp(t, alpha, &outer)));
    }
    Ok(acc)
}

/// `(1/K) Σ_k ∇Ĵ_k(w)` over all agents of a quadratic distribution.
pub fn aggregate_adjusted_gradient(dist: &TaskDistribution, w: &ParamVector, alpha: f64) -> Result<ParamVector> {
    let TaskDistribution::Quad { agents } = dist else {
        return Err(Error::UnsupportedFamily { expected: "quad" });
    };
    let mut acc = ParamVector::zeros(w.dim());
    for mix in agents {
        acc.axpy(1.0, &adjusted_gradient_quad(w, mix, alpha)?);
    }
    Ok(acc.scaled(1.0 / agents.len() as f64))
}

/// `(1/K) Σ_k Ĵ_k(w)`.
pub fn aggregate_adjusted_objective(dist: &TaskDistribution, w: &ParamVector, cfg: &MetaConfig) -> Result<f64> {
    let TaskDistribution::Quad { agents } = dist else {
        return Err(Error::UnsupportedFamily { expected: "quad" });
    };
    let mut acc = 0.0;
    for mix in agents {
        acc += adjusted_objective_quad(w, mix, cfg)?;
    }
    Ok(acc / agents.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tasks::sample_tasks;

    fn scalar(h: f64, theta: f64, sigma: f64) -> QuadTask {
        QuadTask::isotropic(h, vec![theta].into(), sigma).unwrap()
    }

    fn cfg(alpha: f64, din: usize, dout: usize) -> MetaConfig {
        MetaConfig {
            alpha,
            inner_steps: 1,
            inner_batch: din,
            outer_batch: dout,
            task_batch: 1,
            first_order: false,
        }
    }

    fn model() -> ModelSpec {
        ModelSpec::sine_regressor()
    }

    #[test]
    fn zero_step_size_leaves_parameters() {
        let task = Task::Quad(scalar(2.0, 0.0, 1.0));
        let w: ParamVector = vec![1.0].into();
        let mut rng = substream(1, 0);
        let a = inner_adapt(&model(), &w, &task, &cfg(0.0, 5, 5), &mut rng).unwrap();
        assert_eq!(a.adapted, w);
    }

    #[test]
    fn one_step_on_scalar_quadratic() {
        let task = Task::Quad(scalar(2.0, 0.0, 0.0));
        let mut rng = substream(1, 0);
        let a = inner_adapt(&model(), &vec![1.0].into(), &task, &cfg(0.1, 1, 1), &mut rng).unwrap();
        assert!((a.adapted[0] - 0.8).abs() < 1e-15);
        assert_eq!(a.steps.len(), 1);
    }

    #[test]
    fn newton_step_on_isotropic_quadratic() {
        let theta: ParamVector = vec![0.5, -1.5, 2.0].into();
        let task = Task::Quad(QuadTask::isotropic(4.0, theta.clone(), 0.0).unwrap());
        let mut rng = substream(1, 0);
        let a = inner_adapt(&model(), &vec![3.0, 3.0, 3.0].into(), &task, &cfg(0.25, 2, 2), &mut rng).unwrap();
        assert_eq!(a.adapted, theta);
    }

    #[test]
    fn scalar_meta_gradient_closed_form() {
        let t = scalar(2.0, 0.0, 0.0);
        let mut rng = substream(2, 0);
        let g = stochastic_meta_gradient(&model(), &vec![1.0].into(), &[Task::Quad(t.clone())], &cfg(0.1, 1, 1), &mut rng).unwrap();
        assert!((g[0] - 1.28).abs() < 1e-14);
        let mix = QuadMixture::single(t);
        assert!((exact_meta_gradient_quad(&vec![1.0].into(), &mix, 0.1).unwrap()[0] - 1.28).abs() < 1e-14);
        assert!((adjusted_gradient_quad(&vec![1.0].into(), &mix, 0.1).unwrap()[0] - 1.28).abs() < 1e-14);
    }

    #[test]
    fn zero_alpha_is_plain_outer_gradient() {
        let tasks: Vec<Task> = [(1.0, 0.3), (3.0, -0.2)]
            .iter()
            .map(|&(h, th)| Task::Quad(scalar(h, th, 0.5)))
            .collect();
        let w: ParamVector = vec![0.7].into();
        let c = cfg(0.0, 3, 4);
        let mut r1 = substream(3, 0);
        let g = stochastic_meta_gradient(&model(), &w, &tasks, &c, &mut r1).unwrap();
        // replay the same draws: inner batch (unused at α=0), then outer batch
        let mut r2 = substream(3, 0);
        let mut expected = 0.0;
        for t in &tasks {
            let _ = sample_data(t, 3, &mut r2).unwrap();
            let outer = sample_data(t, 4, &mut r2).unwrap();
            expected += autodiff::gradient(&TaskLoss { model: &model(), task: t, batch: &outer }, &w).unwrap()[0];
        }
        assert!((g[0] - expected / 2.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_estimator_matches_exact_gradient() {
        let dist = TaskDistribution::quad_builtin(1, 3, 0.0, 0.0).unwrap();
        let mix = dist.quad_mixture(0).unwrap();
        let w: ParamVector = vec![0.4, -0.3, 1.1].into();
        for (_, t) in mix.entries() {
            let mut rng = substream(4, 0);
            let g = stochastic_meta_gradient(&model(), &w, &[Task::Quad(t.clone())], &cfg(0.1, 1, 1), &mut rng).unwrap();
            let exact = exact_meta_gradient_quad(&w, &QuadMixture::single(t.clone()), 0.1).unwrap();
            for i in 0..3 {
                assert!((g[i] - exact[i]).abs() <= 1e-14 * exact[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn two_task_mixture_gradient() {
        let mix = QuadMixture::uniform(vec![scalar(1.0, 0.0, 0.0), scalar(3.0, 0.0, 0.0)]).unwrap();
        let w: ParamVector = vec![1.0].into();
        let g = exact_meta_gradient_quad(&w, &mix, 0.1).unwrap();
        assert!((g[0] - 1.14).abs() < 1e-14);
        let ga = adjusted_gradient_quad(&w, &mix, 0.1).unwrap();
        assert!((ga[0] - 1.14).abs() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_at_single_task_optimum() {
        let t = QuadTask::diagonal(&[1.0, 2.0], vec![0.3, -0.4].into(), 0.2).unwrap();
        let mix = QuadMixture::single(t);
        let w: ParamVector = vec![0.3, -0.4].into();
        assert!(exact_meta_gradient_quad(&w, &mix, 0.1).unwrap().iter().all(|&x| x == 0.0));
        assert!(adjusted_gradient_quad(&w, &mix, 0.1).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adjusted_objective_examples() {
        let noiseless = QuadMixture::single(scalar(2.0, 0.0, 0.0));
        let c = cfg(0.1, 10, 10);
        let j = adjusted_objective_quad(&vec![1.0].into(), &noiseless, &c).unwrap();
        assert!((j - 0.64).abs() < 1e-15);
        assert_eq!(j, maml_objective_quad(&vec![1.0].into(), &noiseless, 0.1).unwrap());

        let noisy = QuadMixture::single(scalar(2.0, 0.0, 1.0));
        let w: ParamVector = vec![0.0].into();
        let gap = adjusted_objective_quad(&w, &noisy, &c).unwrap() - maml_objective_quad(&w, &noisy, 0.1).unwrap();
        assert!((gap - 0.004).abs() < 1e-15);

        let multi = MetaConfig { inner_steps: 2, ..c };
        assert!(adjusted_objective_quad(&w, &noisy, &multi).is_err());
    }

    #[test]
    fn aggregate_helpers_reject_sine() {
        let dist = TaskDistribution::sine(2).unwrap();
        assert!(matches!(
            aggregate_adjusted_gradient(&dist, &vec![0.0].into(), 0.1),
            Err(Error::UnsupportedFamily { .. })
        ));
    }

    #[test]
    fn first_order_mode_skips_hessian_terms() {
        let t = Task::Quad(scalar(2.0, 0.0, 0.0));
        let c = MetaConfig { first_order: true, ..cfg(0.1, 1, 1) };
        let mut rng = substream(5, 0);
        let g = stochastic_meta_gradient(&model(), &vec![1.0].into(), &[t], &c, &mut rng).unwrap();
        // H·(1 − αH)·w = 2·0.8
        assert!((g[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn multi_step_matches_chain_rule() {
        // Two noiseless steps: w₂ = (1−αH)²w, d/dw = (1−αH)²·H·w₂
        let t = Task::Quad(scalar(2.0, 0.0, 0.0));
        let c = MetaConfig { inner_steps: 2, ..cfg(0.1, 1, 1) };
        let mut rng = substream(6, 0);
        let g = stochastic_meta_gradient(&model(), &vec![1.0].into(), &[t], &c, &mut rng).unwrap();
        let expected = 0.8f64.powi(2) * 2.0 * 0.8f64.powi(2);
        assert!((g[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn sine_meta_gradient_matches_finite_differences_of_maml_loss() {
        // With batches fixed, the per-task MAML loss L(w) = Q(w − α∇Q(w; D_in); D_o)
        // is differentiable and its derivative is the estimator.
        let spec = ModelSpec::new(vec![1, 8, 1], crate::model::Activation::Relu).unwrap();
        let w = crate::model::init_params(&spec, 11);
        let dist = TaskDistribution::sine(1).unwrap();
        let mut rng = substream(7, 0);
        let task = sample_tasks(&dist, 0, 1, &mut rng).unwrap().remove(0);
        let c = cfg(0.05, 5, 5);
        let mut r1 = substream(8, 0);
        let g = stochastic_meta_gradient(&spec, &w, std::slice::from_ref(&task), &c, &mut r1).unwrap();

        let maml_loss = |w: &ParamVector| {
            let mut r = substream(8, 0);
            let a = inner_adapt(&spec, w, &task, &c, &mut r).unwrap();
            let outer = sample_data(&task, c.outer_batch, &mut r).unwrap();
            autodiff::value(&TaskLoss { model: &spec, task: &task, batch: &outer }, &a.adapted).unwrap()
        };
        let eps = 1e-6;
        for i in 0..w.dim() {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (maml_loss(&wp) - maml_loss(&wm)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "coord {i}: fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn estimator_variance_scales_inversely_with_task_batch() {
        let dist = TaskDistribution::quad_builtin(1, 2, 0.3, 0.0).unwrap();
        let mix = dist.quad_mixture(0).unwrap().clone();
        let w: ParamVector = vec![1.0, -0.5].into();
        let exact = adjusted_gradient_quad(&w, &mix, 0.1).unwrap();
        let spec = model();
        let mut rng = substream(9, 0);
        let sizes = [1usize, 2, 4, 8, 16];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &s in &sizes {
            let c = MetaConfig { task_batch: s, ..cfg(0.1, 5, 5) };
            let reps = 4000;
            let mut acc = 0.0;
            for _ in 0..reps {
                let tasks = sample_tasks(&dist, 0, s, &mut rng).unwrap();
                let g = stochastic_meta_gradient(&spec, &w, &tasks, &c, &mut rng).unwrap();
                acc += g.sub(&exact).norm_sq();
            }
            xs.push((s as f64).ln());
            ys.push((acc / reps as f64).ln());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() <= 0.1, "slope {slope}");
    }
}
