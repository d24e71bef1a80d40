//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! Every key is optional; defaults reproduce the desk-scale sine experiment.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `strategy` | `diffusion` | comma list of `diffusion`, `centralized`, `non_cooperative`; each runs in turn |
//! | `topology.kind` | `erdos_renyi` | `ring`, `path`, `complete`, `erdos_renyi`, `explicit`, `identity` |
//! | `topology.k` | `6` | number of agents; must agree with `tasks.k_agents` |
//! | `topology.p` | `0.5` | edge probability for `erdos_renyi` |
//! | `topology.edges_path` | (none) | edge list for `explicit`, one `u v` pair per line |
//! | `topology.seed` | `0` | seed of the random graph draw |
//! | `tasks.family` | `sine` | `sine` or `quad` |
//! | `tasks.sigma` | `0.1` | data noise of the quadratic family |
//! | `tasks.k_agents` | `6` | number of agents |
//! | `tasks.dim` | `2` | dimension of the quadratic family |
//! | `tasks.heterogeneity` | `1.0` | distance of each agent's task centre from the origin (quad) |
//! | `model.layers` | `1,40,40,1` | layer widths of the regressor |
//! | `model.activation` | `relu` | `relu` or `identity` |
//! | `meta.alpha` | `0.01` | inner step size |
//! | `meta.inner_steps` | `1` | inner adaptation steps |
//! | `meta.inner_batch` | `10` | inner batch size |
//! | `meta.outer_batch` | `10` | outer batch size |
//! | `meta.task_batch` | `8` | tasks per agent per iteration |
//! | `meta.first_order` | `false` | drop second-order terms |
//! | `opt.kind` | `adam` | `adam` or `sgd` |
//! | `opt.mu` | `0.001` | outer step size |
//! | `opt.beta1`, `opt.beta2`, `opt.eps` | `0.9`, `0.999`, `1e-8` | Adam constants |
//! | `run.iterations` | `3000` | training iterations |
//! | `run.eval_every` | `200` | evaluation period |
//! | `run.eval_tasks` | `200` | held-out tasks per evaluation |
//! | `run.eval_grad_steps` | `1` | adaptation steps before scoring a held-out task |
//! | `run.seed` | `0` | master seed |
//! | `run.per_agent_init` | `false` | independent initial model per agent |
//! | `run.init_scale` | `1.0` | half-width of the uniform quad initialisation |
//! | `run.grad_norm_samples` | `20` | Monte-Carlo samples for the gradient norm (sine) |
//! | `run.metatest_steps` | `10` | steps of the post-training meta-test curve |
//! | `out.csv` | `metrics.csv` | training metrics |
//! | `out.ckpt_dir` | (none) | final per-agent checkpoints |
//! | `out.metatest_csv` | (none) | post-training meta-test curves |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{read_edge_list, TopologyKind};
use crate::meta::MetaConfig;
use crate::model::{Activation, ModelSpec};
use crate::netsim::{OuterOptimizer, RunConfig, Strategy};
use crate::tasks::TaskDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Sine,
    Quad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub strategies: Vec<Strategy>,
    pub topology_kind: String,
    pub topology_k: usize,
    pub topology_p: f64,
    pub edges_path: Option<PathBuf>,
    pub topology_seed: u64,
    pub family: Family,
    pub sigma: f64,
    pub k_agents: usize,
    pub dim: usize,
    pub heterogeneity: f64,
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub meta: MetaConfig,
    pub opt_kind: OptKind,
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub eval_grad_steps: usize,
    pub seed: u64,
    pub per_agent_init: bool,
    pub init_scale: f64,
    pub grad_norm_samples: usize,
    pub metatest_steps: usize,
    pub csv: PathBuf,
    pub ckpt_dir: Option<PathBuf>,
    pub metatest_csv: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            strategies: vec![Strategy::Diffusion],
            topology_kind: "erdos_renyi".into(),
            topology_k: 6,
            topology_p: 0.5,
            edges_path: None,
            topology_seed: 0,
            family: Family::Sine,
            sigma: 0.1,
            k_agents: 6,
            dim: 2,
            heterogeneity: 1.0,
            layers: vec![1, 40, 40, 1],
            activation: Activation::Relu,
            meta: MetaConfig {
                task_batch: 8,
                ..MetaConfig::default()
            },
            opt_kind: OptKind::Adam,
            mu: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 3000,
            eval_every: 200,
            eval_tasks: 200,
            eval_grad_steps: 1,
            seed: 0,
            per_agent_init: false,
            init_scale: 1.0,
            grad_norm_samples: 20,
            metatest_steps: 10,
            csv: PathBuf::from("metrics.csv"),
            ckpt_dir: None,
            metatest_csv: None,
        }
    }
}

pub const KEYS: [&str; 36] = [
    "strategy",
    "topology.kind",
    "topology.k",
    "topology.p",
    "topology.edges_path",
    "topology.seed",
    "tasks.family",
    "tasks.sigma",
    "tasks.k_agents",
    "tasks.dim",
    "tasks.heterogeneity",
    "model.layers",
    "model.activation",
    "meta.alpha",
    "meta.inner_steps",
    "meta.inner_batch",
    "meta.outer_batch",
    "meta.task_batch",
    "meta.first_order",
    "opt.kind",
    "opt.mu",
    "opt.beta1",
    "opt.beta2",
    "opt.eps",
    "run.iterations",
    "run.eval_every",
    "run.eval_tasks",
    "run.eval_grad_steps",
    "run.seed",
    "run.per_agent_init",
    "run.init_scale",
    "run.grad_norm_samples",
    "run.metatest_steps",
    "out.csv",
    "out.ckpt_dir",
    "out.metatest_csv",
];

const TOPOLOGY_KINDS: [&str; 6] = ["ring", "path", "complete", "erdos_renyi", "explicit", "identity"];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        let (mut k_set, mut agents_set) = (false, false);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            k_set |= key == "topology.k";
            agents_set |= key == "tasks.k_agents";
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        match (k_set, agents_set) {
            (true, false) => cfg.k_agents = cfg.topology_k,
            (false, true) => cfg.topology_k = cfg.k_agents,
            _ => {}
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "strategy" => {
                self.strategies = v.split(',').map(Strategy::parse).collect::<Result<_>>()?;
            }
            "topology.kind" => {
                if !TOPOLOGY_KINDS.contains(&v) {
                    return Err(Error::Config(format!(
                        "topology.kind must be one of {}, got '{v}'",
                        TOPOLOGY_KINDS.join(", ")
                    )));
                }
                self.topology_kind = v.to_string();
            }
            "topology.k" => self.topology_k = num(key, v)?,
            "topology.p" => self.topology_p = num(key, v)?,
            "topology.edges_path" => self.edges_path = opt_path(v),
            "topology.seed" => self.topology_seed = num(key, v)?,
            "tasks.family" => {
                self.family = match v {
                    "sine" => Family::Sine,
                    "quad" => Family::Quad,
                    _ => return Err(Error::Config(format!("tasks.family must be sine or quad, got '{v}'"))),
                }
            }
            "tasks.sigma" => self.sigma = num(key, v)?,
            "tasks.k_agents" => self.k_agents = num(key, v)?,
            "tasks.dim" => self.dim = num(key, v)?,
            "tasks.heterogeneity" => self.heterogeneity = num(key, v)?,
            "model.layers" => {
                self.layers = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
            }
            "model.activation" => {
                self.activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::Config(format!("model.activation must be relu or identity, got '{v}'"))),
                }
            }
            "meta.alpha" => self.meta.alpha = num(key, v)?,
            "meta.inner_steps" => self.meta.inner_steps = num(key, v)?,
            "meta.inner_batch" => self.meta.inner_batch = num(key, v)?,
            "meta.outer_batch" => self.meta.outer_batch = num(key, v)?,
            "meta.task_batch" => self.meta.task_batch = num(key, v)?,
            "meta.first_order" => self.meta.first_order = boolean(key, v)?,
            "opt.kind" => {
                self.opt_kind = match v {
                    "sgd" => OptKind::Sgd,
                    "adam" => OptKind::Adam,
                    _ => return Err(Error::Config(format!("opt.kind must be sgd or adam, got '{v}'"))),
                }
            }
            "opt.mu" => self.mu = num(key, v)?,
            "opt.beta1" => self.beta1 = num(key, v)?,
            "opt.beta2" => self.beta2 = num(key, v)?,
            "opt.eps" => self.eps = num(key, v)?,
            "run.iterations" => self.iterations = num(key, v)?,
            "run.eval_every" => self.eval_every = num(key, v)?,
            "run.eval_tasks" => self.eval_tasks = num(key, v)?,
            "run.eval_grad_steps" => self.eval_grad_steps = num(key, v)?,
            "run.seed" => self.seed = num(key, v)?,
            "run.per_agent_init" => self.per_agent_init = boolean(key, v)?,
            "run.init_scale" => self.init_scale = num(key, v)?,
            "run.grad_norm_samples" => self.grad_norm_samples = num(key, v)?,
            "run.metatest_steps" => self.metatest_steps = num(key, v)?,
            "out.csv" => {
                self.csv = opt_path(v).ok_or_else(|| Error::Config("out.csv must not be empty".into()))?;
            }
            "out.ckpt_dir" => self.ckpt_dir = opt_path(v),
            "out.metatest_csv" => self.metatest_csv = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if self.topology_k != self.k_agents {
            return Err(Error::Config(format!(
                "topology.k = {} disagrees with tasks.k_agents = {}",
                self.topology_k, self.k_agents
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        if self.topology_kind == "explicit" && self.edges_path.is_none() {
            return Err(Error::Config("topology.kind = explicit needs topology.edges_path".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("tasks.sigma must be finite and >= 0".into()));
        }
        ModelSpec::new(self.layers.clone(), self.activation).map_err(|e| Error::Config(strip(e)))?;
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal `Config`.
    pub fn to_text(&self) -> String {
        let strategies: Vec<&str> = self.strategies.iter().map(|s| s.name()).collect();
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        let values: [String; 36] = [
            strategies.join(","),
            self.topology_kind.clone(),
            self.topology_k.to_string(),
            self.topology_p.to_string(),
            show_path(&self.edges_path),
            self.topology_seed.to_string(),
            match self.family {
                Family::Sine => "sine".into(),
                Family::Quad => "quad".into(),
            },
            self.sigma.to_string(),
            self.k_agents.to_string(),
            self.dim.to_string(),
            self.heterogeneity.to_string(),
            layers.join(","),
            self.activation.name().to_string(),
            self.meta.alpha.to_string(),
            self.meta.inner_steps.to_string(),
            self.meta.inner_batch.to_string(),
            self.meta.outer_batch.to_string(),
            self.meta.task_batch.to_string(),
            self.meta.first_order.to_string(),
            match self.opt_kind {
                OptKind::Sgd => "sgd".into(),
                OptKind::Adam => "adam".into(),
            },
            self.mu.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.eps.to_string(),
            self.iterations.to_string(),
            self.eval_every.to_string(),
            self.eval_tasks.to_string(),
            self.eval_grad_steps.to_string(),
            self.seed.to_string(),
            self.per_agent_init.to_string(),
            self.init_scale.to_string(),
            self.grad_norm_samples.to_string(),
            self.metatest_steps.to_string(),
            self.csv.display().to_string(),
            show_path(&self.ckpt_dir),
            show_path(&self.metatest_csv),
        ];
        let mut out = String::new();
        for (key, value) in KEYS.iter().zip(values.iter()) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn topology(&self) -> Result<TopologyKind> {
        Ok(match self.topology_kind.as_str() {
            "ring" => TopologyKind::Ring,
            "path" => TopologyKind::Path,
            "complete" => TopologyKind::Complete,
            "erdos_renyi" => TopologyKind::ErdosRenyi { p: self.topology_p },
            "identity" => TopologyKind::Isolated,
            "explicit" => {
                let path = self
                    .edges_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("explicit topology needs topology.edges_path".into()))?;
                TopologyKind::Explicit(read_edge_list(path)?)
            }
            other => return Err(Error::Config(format!("unknown topology kind '{other}'"))),
        })
    }

    pub fn tasks(&self) -> Result<TaskDistribution> {
        match self.family {
            Family::Sine => TaskDistribution::sine(self.k_agents),
            Family::Quad => TaskDistribution::quad_builtin(self.k_agents, self.dim, self.sigma, self.heterogeneity),
        }
    }

    pub fn optimizer(&self) -> OuterOptimizer {
        match self.opt_kind {
            OptKind::Sgd => OuterOptimizer::Sgd { mu: self.mu },
            OptKind::Adam => OuterOptimizer::Adam {
                mu: self.mu,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        }
    }

    /// The run configuration for one strategy.
    pub fn run_config(&self, strategy: Strategy) -> Result<RunConfig> {
        let cfg = RunConfig {
            strategy,
            topology: self.topology()?,
            graph_seed: self.topology_seed,
            tasks: self.tasks()?,
            model: ModelSpec::new(self.layers.clone(), self.activation)?,
            meta: self.meta.clone(),
            optimizer: self.optimizer(),
            iterations: self.iterations,
            eval_every: self.eval_every,
            eval_tasks: self.eval_tasks,
            eval_grad_steps: self.eval_grad_steps,
            grad_norm_samples: self.grad_norm_samples,
            seed: self.seed,
            per_agent_init: self.per_agent_init,
            init_scale: self.init_scale,
            threads: None,
        };
        cfg.validate().map_err(|e| Error::Config(strip(e)))?;
        Ok(cfg)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}
