//! Adapt-then-combine training loop over a network of agents, with the
//! centralized and non-cooperative baselines.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::graph::{build_topology, metropolis_weights, mixing_rate, CombinationMatrix, TopologyKind};
use crate::meta::{meta_gradient_and_loss, MetaConfig};
use crate::metrics::{centroid, centroid_grad_norm_sq, meta_test, network_disagreement, sample_eval_tasks, EvalTask};
use crate::model::{init_params, ModelSpec};
use crate::rng::{agent_stream, substream, Stream, EVAL_STREAM, GRAD_NORM_STREAM, GRAPH_STREAM, INIT_STREAM};
use crate::tasks::{sample_tasks, TaskDistribution};

/// Query points per evaluation task.
pub const EVAL_QUERY: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Diffusion,
    Centralized,
    NonCooperative,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Diffusion, Strategy::Centralized, Strategy::NonCooperative];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Diffusion => "diffusion",
            Strategy::Centralized => "centralized",
            Strategy::NonCooperative => "non_cooperative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "diffusion" => Ok(Strategy::Diffusion),
            "centralized" => Ok(Strategy::Centralized),
            "non_cooperative" | "noncooperative" => Ok(Strategy::NonCooperative),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OuterOptimizer {
    Sgd { mu: f64 },
    Adam { mu: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OuterOptimizer {
    pub fn adam(mu: f64) -> Self {
        OuterOptimizer::Adam {
            mu,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn mu(&self) -> f64 {
        match *self {
            OuterOptimizer::Sgd { mu } | OuterOptimizer::Adam { mu, .. } => mu,
        }
    }

    pub fn initial_state(&self, dim: usize) -> OptimizerState {
        match self {
            OuterOptimizer::Sgd { .. } => OptimizerState::Sgd,
            OuterOptimizer::Adam { .. } => OptimizerState::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }

    /// One outer update of `w` along `g`, advancing `state`.
    pub fn step(&self, state: &mut OptimizerState, w: &ParamVector, g: &ParamVector) -> Result<ParamVector> {
        if w.dim() != g.dim() {
            return Err(Error::dims(w.dim(), g.dim()));
        }
        match (self, state) {
            (OuterOptimizer::Sgd { mu }, OptimizerState::Sgd) => {
                let mut out = w.clone();
                out.axpy(-mu, g);
                Ok(out)
            }
            (OuterOptimizer::Adam { mu, beta1, beta2, eps }, OptimizerState::Adam { m, v, t }) => {
                if m.len() != w.dim() {
                    return Err(Error::dims(m.len(), w.dim()));
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                let mut out = w.clone();
                for i in 0..w.dim() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    out[i] -= mu * m_hat / (v_hat.sqrt() + eps);
                }
                Ok(out)
            }
            _ => Err(Error::InvalidArgument("optimizer state does not match optimizer".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u32 },
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    pub w: ParamVector,
    pub rng: Stream,
    pub opt: OptimizerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub topology: TopologyKind,
    /// Seed of the random-graph draw, kept apart from `seed` so that runs
    /// with different seeds share one graph.
    pub graph_seed: u64,
    pub tasks: TaskDistribution,
    /// Ignored by the quadratic family, whose parameter is the task point.
    pub model: ModelSpec,
    pub meta: MetaConfig,
    pub optimizer: OuterOptimizer,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub eval_grad_steps: usize,
    /// Monte-Carlo samples for the centroid gradient norm on non-quadratic
    /// families.
    pub grad_norm_samples: usize,
    pub seed: u64,
    pub per_agent_init: bool,
    /// Half-width of the uniform initialisation for quadratic tasks.
    pub init_scale: f64,
    /// Worker threads for per-agent work; `None` reads `DIFMAML_THREADS`.
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Desk-scale sine experiment defaults.
    pub fn sine_default(agents: usize) -> Result<Self> {
        Ok(RunConfig {
            strategy: Strategy::Diffusion,
            topology: TopologyKind::ErdosRenyi { p: 0.5 },
            graph_seed: 0,
            tasks: TaskDistribution::sine(agents)?,
            model: ModelSpec::sine_regressor(),
            // 3000 iterations of 8 tasks see as many tasks per agent as
            // 24000 single-task iterations.
            meta: MetaConfig {
                task_batch: 8,
                ..MetaConfig::default()
            },
            optimizer: OuterOptimizer::adam(0.001),
            iterations: 3000,
            eval_every: 200,
            eval_tasks: 200,
            eval_grad_steps: 1,
            grad_norm_samples: 20,
            seed: 0,
            per_agent_init: false,
            init_scale: 1.0,
            threads: None,
        })
    }

    pub fn agents(&self) -> usize {
        self.tasks.agents()
    }

    pub fn param_dim(&self) -> usize {
        self.tasks.quad_dim().unwrap_or_else(|| self.model.param_count())
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.agents() == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        let mu = self.optimizer.mu();
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {mu}")));
        }
        if let OuterOptimizer::Adam { beta1, beta2, eps, .. } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("adam needs beta1, beta2 in [0,1) and eps > 0".into()));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.grad_norm_samples == 0 {
            return Err(Error::Config("grad_norm_samples must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Combination matrix implied by the strategy.
    pub fn combination_matrix(&self) -> Result<CombinationMatrix> {
        let k = self.agents();
        match self.strategy {
            Strategy::Centralized => Ok(CombinationMatrix::uniform(k)),
            Strategy::NonCooperative => Ok(CombinationMatrix::identity(k)),
            Strategy::Diffusion => {
                let mut rng = substream(self.graph_seed, GRAPH_STREAM);
                let t = build_topology(&self.topology, k, Some(&mut rng))?;
                Ok(metropolis_weights(&t))
            }
        }
    }

    fn worker_threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var("DIFMAML_THREADS").ok().and_then(|s| s.trim().parse().ok()))
            .unwrap_or_else(rayon::current_num_threads)
            .max(1)
    }
}

/// Launch models at iteration 0.
pub fn initial_models(cfg: &RunConfig) -> Vec<ParamVector> {
    let k = cfg.agents();
    let draw = |id: u64| -> ParamVector {
        let mut rng = substream(cfg.seed, INIT_STREAM + id);
        match cfg.tasks.quad_dim() {
            Some(m) => {
                let s = cfg.init_scale;
                ParamVector::new((0..m).map(|_| s * (2.0 * rng.random::<f64>() - 1.0)).collect())
            }
            None => init_params(&cfg.model, rng.random()),
        }
    };
    if cfg.per_agent_init {
        (0..k).map(|i| draw(1 + i as u64)).collect()
    } else {
        vec![draw(0); k]
    }
}

pub fn initial_states(cfg: &RunConfig) -> Vec<AgentState> {
    initial_models(cfg)
        .into_iter()
        .enumerate()
        .map(|(id, w)| AgentState {
            id,
            opt: cfg.optimizer.initial_state(w.dim()),
            w,
            rng: agent_stream(cfg.seed, id),
        })
        .collect()
}

/// Local adaptation: samples a task batch, forms the stochastic
/// meta-gradient and applies the outer optimizer. Returns the intermediate
/// model and the mean post-adaptation training loss.
pub fn adapt_step(state: &mut AgentState, cfg: &RunConfig) -> Result<(ParamVector, f64)> {
    let tasks = sample_tasks(&cfg.tasks, state.id, cfg.meta.task_batch, &mut state.rng)?;
    let (g, loss) = meta_gradient_and_loss(&cfg.model, &state.w, &tasks, &cfg.meta, &mut state.rng)?;
    let phi = cfg.optimizer.step(&mut state.opt, &state.w, &g)?;
    if !phi.is_finite() {
        return Err(Error::non_finite(format!("intermediate model of agent {}", state.id)));
    }
    Ok((phi, loss))
}

/// `w_k = Σ_ℓ a_{ℓk} φ_ℓ`, summed in increasing `ℓ`.
pub fn combine_step(intermediates: &[ParamVector], a: &CombinationMatrix) -> Result<Vec<ParamVector>> {
    let k = a.agents();
    if intermediates.len() != k {
        return Err(Error::dims(k, intermediates.len()));
    }
    let m = intermediates[0].dim();
    if let Some(bad) = intermediates.iter().find(|p| p.dim() != m) {
        return Err(Error::dims(m, bad.dim()));
    }
    Ok((0..k)
        .map(|dst| {
            let mut w = ParamVector::zeros(m);
            for (src, phi) in intermediates.iter().enumerate() {
                w.axpy(a.get(src, dst), phi);
            }
            w
        })
        .collect())
}

/// Metrics at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub strategy: Strategy,
    /// Post-adaptation outer loss of each agent at this iteration.
    pub train_loss: Vec<f64>,
    /// Query loss after `eval_grad_steps` adaptation steps, per agent.
    pub test_loss: Vec<f64>,
    pub mean_test_loss: f64,
    /// `‖w_k − w_c‖²` per agent.
    pub agent_disagreement: Vec<f64>,
    pub disagreement: f64,
    pub centroid_grad_norm_sq: f64,
    pub grad_norm_correction: f64,
    pub lambda2: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub models: Vec<ParamVector>,
    pub rows: Vec<MetricsRow>,
    pub lambda2: f64,
}

/// A network mid-run; advance it with [`Network::step`].
pub struct Network {
    cfg: RunConfig,
    a: CombinationMatrix,
    lambda2: f64,
    agents: Vec<AgentState>,
    last_train: Vec<f64>,
    iteration: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Network {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.combination_matrix()?;
        Self::with_matrix(cfg, a)
    }

    /// Runs with an explicit combination matrix regardless of strategy.
    pub fn with_matrix(cfg: RunConfig, a: CombinationMatrix) -> Result<Self> {
        cfg.validate()?;
        if a.agents() != cfg.agents() {
            return Err(Error::dims(cfg.agents(), a.agents()));
        }
        let lambda2 = if a.agents() == 1 { 0.0 } else { mixing_rate(&a)? };
        let threads = cfg.worker_threads();
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            )
        } else {
            None
        };
        let agents = initial_states(&cfg);
        Ok(Network {
            last_train: vec![f64::NAN; agents.len()],
            cfg,
            a,
            lambda2,
            agents,
            iteration: 0,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn combination(&self) -> &CombinationMatrix {
        &self.a
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn models(&self) -> Vec<ParamVector> {
        self.agents.iter().map(|a| a.w.clone()).collect()
    }

    pub fn train_losses(&self) -> &[f64] {
        &self.last_train
    }

    fn per_agent<T, F>(&self, agents: &mut [AgentState], f: F) -> Vec<Result<T>>
    where
        T: Send,
        F: Fn(&mut AgentState) -> Result<T> + Sync,
    {
        match &self.pool {
            Some(pool) => pool.install(|| agents.par_iter_mut().map(|a| f(a)).collect()),
            None => agents.iter_mut().map(f).collect(),
        }
    }

    /// One synchronous round: every agent adapts, then all combine.
    pub fn step(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let mut agents = std::mem::take(&mut self.agents);
        let results = self.per_agent(&mut agents, |a| adapt_step(a, cfg));
        let outcome = results.into_iter().collect::<Result<Vec<_>>>();
        let (phis, losses): (Vec<_>, Vec<_>) = match outcome {
            Ok(v) => v.into_iter().unzip(),
            Err(e) => {
                self.agents = agents;
                return Err(e);
            }
        };
        let combined = combine_step(&phis, &self.a);
        let combined = match combined {
            Ok(c) => c,
            Err(e) => {
                self.agents = agents;
                return Err(e);
            }
        };
        for (agent, w) in agents.iter_mut().zip(combined) {
            agent.w = w;
        }
        self.agents = agents;
        self.last_train = losses;
        self.iteration += 1;
        Ok(())
    }

    /// Metrics of the current models against a fixed evaluation set.
    pub fn evaluate(&self, eval: &[EvalTask], started: Instant) -> Result<MetricsRow> {
        let cfg = &self.cfg;
        let models = self.models();
        let test = |w: &ParamVector| -> Result<f64> {
            if eval.is_empty() {
                return Ok(f64::NAN);
            }
            let curve = meta_test(&cfg.model, w, eval, cfg.meta.alpha, cfg.eval_grad_steps)?;
            Ok(curve[curve.len() - 1])
        };
        let test_loss: Vec<f64> = match &self.pool {
            Some(pool) => pool.install(|| models.par_iter().map(test).collect::<Result<_>>())?,
            None => models.iter().map(test).collect::<Result<_>>()?,
        };
        let c = centroid(&models)?;
        let agent_disagreement: Vec<f64> = models.iter().map(|w| w.sub(&c).norm_sq()).collect();
        let disagreement = network_disagreement(&models)?;
        let mut rng = substream(cfg.seed, GRAD_NORM_STREAM + self.iteration as u64);
        let gn = centroid_grad_norm_sq(&cfg.model, &c, &cfg.tasks, &cfg.meta, cfg.grad_norm_samples, &mut rng)?;
        let mean_test_loss = test_loss.iter().sum::<f64>() / test_loss.len() as f64;
        let row = MetricsRow {
            iteration: self.iteration,
            strategy: cfg.strategy,
            train_loss: self.last_train.clone(),
            mean_test_loss,
            test_loss,
            agent_disagreement,
            disagreement,
            centroid_grad_norm_sq: gn.value,
            grad_norm_correction: gn.correction,
            lambda2: self.lambda2,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if !(row.disagreement.is_finite() && row.train_loss.iter().all(|x| x.is_finite())) {
            return Err(Error::non_finite(format!("metrics at iteration {}", self.iteration)));
        }
        Ok(row)
    }
}

/// The fixed held-out task set of a run.
pub fn eval_set(cfg: &RunConfig) -> Result<Vec<EvalTask>> {
    let mut rng = substream(cfg.seed, EVAL_STREAM);
    sample_eval_tasks(&cfg.tasks, cfg.eval_tasks, cfg.meta.inner_batch, EVAL_QUERY, &mut rng)
}

/// Runs to completion, handing each metrics row to `sink` as soon as it is
/// computed so that a numerical abort leaves the earlier rows behind.
pub fn run_with_sink(cfg: &RunConfig, sink: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<RunResult> {
    run_network(Network::new(cfg.clone())?, sink)
}

pub fn run_network(mut net: Network, sink: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<RunResult> {
    let started = Instant::now();
    let eval = eval_set(&net.cfg)?;
    let mut rows = Vec::new();
    for i in 1..=net.cfg.iterations {
        net.step()?;
        if i % net.cfg.eval_every == 0 {
            let row = net.evaluate(&eval, started)?;
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(RunResult {
        models: net.models(),
        rows,
        lambda2: net.lambda2,
    })
}

pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    run_with_sink(cfg, &mut |_| Ok(()))
}

/// Single agent drawing `K·|S_k|` tasks per iteration from the union of all
/// agents' distributions.
pub fn centralized_reference_config(cfg: &RunConfig) -> Result<RunConfig> {
    let k = cfg.agents();
    Ok(RunConfig {
        strategy: Strategy::Diffusion,
        topology: TopologyKind::Complete,
        tasks: cfg.tasks.union()?,
        meta: MetaConfig {
            task_batch: k * cfg.meta.task_batch,
            ..cfg.meta.clone()
        },
        per_agent_init: false,
        ..cfg.clone()
    })
}

pub fn centralized_reference(cfg: &RunConfig) -> Result<RunResult> {
    run(&centralized_reference_config(cfg)?)
}
