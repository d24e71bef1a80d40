//! Agent task distributions and data sampling.
//!
//! Two families are supported. The sine family is the few-shot regression
//! benchmark: amplitudes in `[0.1, 5.0)` are split evenly across agents and
//! phases range over `[0, π]`. The quadratic family has losses
//! `Q(w; x) = ½(w−θ−x)ᵀH(w−θ−x)` with `x ~ N(0, σ²I)`, whose risks,
//! meta-gradients and adjusted objectives are all available in closed form.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Loss, ParamVector, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, MseLoss};
use crate::rng::Stream;

pub const AMPLITUDE_MIN: f64 = 0.1;
pub const AMPLITUDE_MAX: f64 = 5.0;
pub const SINE_INPUT_RANGE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn target(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

/// Quadratic task with Hessian `h` (row-major, symmetric positive definite),
/// optimum `theta` and additive Gaussian noise scale `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadTask {
    h: Vec<f64>,
    theta: ParamVector,
    sigma: f64,
    eigenvalues: Vec<f64>,
}

impl QuadTask {
    pub fn new(h: Vec<f64>, theta: ParamVector, sigma: f64) -> Result<Self> {
        let m = theta.dim();
        if m == 0 || h.len() != m * m {
            return Err(Error::dims(m * m, h.len()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let scale = h.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        for i in 0..m {
            for j in 0..i {
                if (h[i * m + j] - h[j * m + i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument("task Hessian is not symmetric".into()));
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, &h));
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| a.total_cmp(b));
        if eigenvalues[0] <= 0.0 {
            return Err(Error::InvalidArgument(
                "task Hessian is not positive definite".into(),
            ));
        }
        Ok(QuadTask {
            h,
            theta,
            sigma,
            eigenvalues,
        })
    }

    /// `H = diag(d)`.
    pub fn diagonal(d: &[f64], theta: ParamVector, sigma: f64) -> Result<Self> {
        let m = d.len();
        let mut h = vec![0.0; m * m];
        for (i, &x) in d.iter().enumerate() {
            h[i * m + i] = x;
        }
        QuadTask::new(h, theta, sigma)
    }

    /// `H = λI`.
    pub fn isotropic(lambda: f64, theta: ParamVector, sigma: f64) -> Result<Self> {
        QuadTask::diagonal(&vec![lambda; theta.dim()], theta, sigma)
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    pub fn hessian(&self) -> &[f64] {
        &self.h
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Ascending eigenvalues of `H`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    /// `tr(Hᵖ)`.
    pub fn trace_pow(&self, p: i32) -> f64 {
        self.eigenvalues.iter().map(|l| l.powi(p)).sum()
    }

    /// `H·v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.dim();
        (0..m)
            .map(|i| (0..m).map(|j| self.h[i * m + j] * v[j]).sum())
            .collect()
    }

    /// `∇J(w) = H(w−θ)`.
    pub fn risk_gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        if w.dim() != self.dim() {
            return Err(Error::dims(self.dim(), w.dim()));
        }
        Ok(ParamVector::new(self.apply(&w.sub(&self.theta))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Sine(SineTask),
    Quad(QuadTask),
}

/// Finite-support distribution over quadratic tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadMixture {
    entries: Vec<(f64, QuadTask)>,
    cumulative: Vec<f64>,
}

impl QuadMixture {
    /// Weights must be nonnegative and are normalised to sum to one.
    pub fn new(entries: Vec<(f64, QuadTask)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty task mixture".into()));
        }
        let dim = entries[0].1.dim();
        if let Some((_, t)) = entries.iter().find(|(_, t)| t.dim() != dim) {
            return Err(Error::dims(dim, t.dim()));
        }
        if entries.iter().any(|(p, _)| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("mixture weights must be >= 0".into()));
        }
        let total: f64 = entries.iter().map(|(p, _)| p).sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("mixture weights sum to zero".into()));
        }
        let entries: Vec<(f64, QuadTask)> =
            entries.into_iter().map(|(p, t)| (p / total, t)).collect();
        let mut acc = 0.0;
        let cumulative = entries
            .iter()
            .map(|(p, _)| {
                acc += p;
                acc
            })
            .collect();
        Ok(QuadMixture {
            entries,
            cumulative,
        })
    }

    pub fn single(task: QuadTask) -> Self {
        QuadMixture::new(vec![(1.0, task)]).expect("single task mixture")
    }

    /// Uniform over the given tasks.
    pub fn uniform(tasks: Vec<QuadTask>) -> Result<Self> {
        QuadMixture::new(tasks.into_iter().map(|t| (1.0, t)).collect())
    }

    /// Equal-weight mixture of mixtures.
    pub fn union(parts: &[QuadMixture]) -> Result<Self> {
        let k = parts.len() as f64;
        QuadMixture::new(
            parts
                .iter()
                .flat_map(|m| m.entries.iter().map(move |(p, t)| (p / k, t.clone())))
                .collect(),
        )
    }

    pub fn entries(&self) -> &[(f64, QuadTask)] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.dim()
    }

    pub fn sample(&self, rng: &mut Stream) -> &QuadTask {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.entries.len() - 1);
        &self.entries[idx].1
    }
}

/// Per-agent task distributions `π_k`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskDistribution {
    /// Agent `k` draws amplitudes from the `k`-th of `agents` equal slices
    /// of `[0.1, 5.0)`.
    Sine { agents: usize },
    Quad { agents: Vec<QuadMixture> },
}

impl TaskDistribution {
    pub fn sine(agents: usize) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidArgument("need at least one agent".into()));
        }
        Ok(TaskDistribution::Sine { agents })
    }

    /// Every agent shares the same quadratic mixture.
    pub fn quad_shared(mixture: QuadMixture, agents: usize) -> Self {
        TaskDistribution::Quad {
            agents: vec![mixture; agents],
        }
    }

    /// Built-in heterogeneous quadratic family: four diagonal tasks per
    /// agent with curvatures in `{1, 1.5, 2}` and optima spread `±0.5`
    /// around an agent centre at distance `heterogeneity` from the origin.
    pub fn quad_builtin(agents: usize, dim: usize, sigma: f64, heterogeneity: f64) -> Result<Self> {
        if agents == 0 || dim == 0 {
            return Err(Error::InvalidArgument("agents and dim must be positive".into()));
        }
        let mut mixtures = Vec::with_capacity(agents);
        for k in 0..agents {
            let angle = 2.0 * PI * k as f64 / agents as f64;
            let mut centre = vec![0.0; dim];
            centre[0] = heterogeneity * angle.cos();
            if dim > 1 {
                centre[1] = heterogeneity * angle.sin();
            }
            let mut tasks = Vec::with_capacity(4);
            for j in 0..4usize {
                let diag: Vec<f64> = (0..dim).map(|m| 1.0 + 0.5 * ((j + m) % 3) as f64).collect();
                let mut theta = centre.clone();
                theta[j % dim] += if j < 2 { 0.5 } else { -0.5 };
                tasks.push(QuadTask::diagonal(&diag, theta.into(), sigma)?);
            }
            mixtures.push(QuadMixture::uniform(tasks)?);
        }
        Ok(TaskDistribution::Quad { agents: mixtures })
    }

    pub fn agents(&self) -> usize {
        match self {
            TaskDistribution::Sine { agents } => *agents,
            TaskDistribution::Quad { agents } => agents.len(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            TaskDistribution::Sine { .. } => "sine",
            TaskDistribution::Quad { .. } => "quad",
        }
    }

    /// Half-open amplitude interval owned by `agent`.
    pub fn amplitude_range(&self, agent: usize) -> Result<(f64, f64)> {
        match self {
            TaskDistribution::Sine { agents } => {
                if agent >= *agents {
                    return Err(Error::BadAgentIndex {
                        agent,
                        agents: *agents,
                    });
                }
                let width = (AMPLITUDE_MAX - AMPLITUDE_MIN) / *agents as f64;
                Ok((
                    AMPLITUDE_MIN + agent as f64 * width,
                    AMPLITUDE_MIN + (agent + 1) as f64 * width,
                ))
            }
            TaskDistribution::Quad { .. } => Err(Error::UnsupportedFamily { expected: "sine" }),
        }
    }

    pub fn quad_mixture(&self, agent: usize) -> Result<&QuadMixture> {
        match self {
            TaskDistribution::Quad { agents } => agents.get(agent).ok_or(Error::BadAgentIndex {
                agent,
                agents: agents.len(),
            }),
            TaskDistribution::Sine { .. } => Err(Error::UnsupportedFamily { expected: "quad" }),
        }
    }

    /// Single-agent distribution equal to the equal-weight union of all
    /// agents' distributions.
    pub fn union(&self) -> Result<TaskDistribution> {
        match self {
            TaskDistribution::Sine { .. } => Ok(TaskDistribution::Sine { agents: 1 }),
            TaskDistribution::Quad { agents } => Ok(TaskDistribution::Quad {
                agents: vec![QuadMixture::union(agents)?],
            }),
        }
    }

    /// Parameter dimension implied by the family, if fixed.
    pub fn quad_dim(&self) -> Option<usize> {
        match self {
            TaskDistribution::Quad { agents } => agents.first().map(QuadMixture::dim),
            TaskDistribution::Sine { .. } => None,
        }
    }
}

/// Draws `n` i.i.d. tasks from agent `agent`'s distribution.
pub fn sample_tasks(
    dist: &TaskDistribution,
    agent: usize,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<Task>> {
    if agent >= dist.agents() {
        return Err(Error::BadAgentIndex {
            agent,
            agents: dist.agents(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("task batch must be >= 1".into()));
    }
    match dist {
        TaskDistribution::Sine { .. } => {
            let (lo, hi) = dist.amplitude_range(agent)?;
            Ok((0..n)
                .map(|_| {
                    let amplitude = rng.random_range(lo..hi);
                    let phase = rng.random_range(0.0..=PI);
                    Task::Sine(SineTask { amplitude, phase })
                })
                .collect())
        }
        TaskDistribution::Quad { agents } => Ok((0..n)
            .map(|_| Task::Quad(agents[agent].sample(rng).clone()))
            .collect()),
    }
}

/// A batch of data points for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum DataBatch {
    /// Scalar regression pairs.
    Regression { xs: Vec<f64>, ys: Vec<f64> },
    /// `n` row-major noise vectors of dimension `dim`.
    Shift { noise: Vec<f64>, dim: usize },
}

impl DataBatch {
    pub fn len(&self) -> usize {
        match self {
            DataBatch::Regression { xs, .. } => xs.len(),
            DataBatch::Shift { noise, dim } => noise.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `n` data points for `task`: sine inputs uniform on `[−5, 5]`,
/// quadratic noise vectors from `N(0, σ²I)`.
pub fn sample_data(task: &Task, n: usize, rng: &mut Stream) -> Result<DataBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("data batch must be >= 1".into()));
    }
    Ok(match task {
        Task::Sine(s) => {
            let xs: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-SINE_INPUT_RANGE..=SINE_INPUT_RANGE))
                .collect();
            let ys = xs.iter().map(|&x| s.target(x)).collect();
            DataBatch::Regression { xs, ys }
        }
        Task::Quad(q) => {
            let dim = q.dim();
            let noise = (0..n * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    q.sigma * z
                })
                .collect();
            DataBatch::Shift { noise, dim }
        }
    })
}

/// Sine data at given inputs.
pub fn sine_data_at(task: &SineTask, xs: &[f64]) -> DataBatch {
    DataBatch::Regression {
        xs: xs.to_vec(),
        ys: xs.iter().map(|&x| task.target(x)).collect(),
    }
}

/// `J(w) = ½(w−θ)ᵀH(w−θ) + ½σ²·tr(H)`.
pub fn quad_exact_risk(task: &QuadTask, w: &ParamVector) -> Result<f64> {
    if w.dim() != task.dim() {
        return Err(Error::dims(task.dim(), w.dim()));
    }
    let d = w.sub(&task.theta);
    let hd = task.apply(&d);
    let quad: f64 = d.iter().zip(&hd).map(|(a, b)| a * b).sum();
    Ok(0.5 * quad + 0.5 * task.sigma * task.sigma * task.trace_pow(1))
}

/// Batch-mean quadratic loss `(1/N) Σ ½(w−θ−x_n)ᵀH(w−θ−x_n)`.
#[derive(Clone, Copy, Debug)]
pub struct QuadLoss<'a> {
    pub task: &'a QuadTask,
    pub noise: &'a [f64],
}

impl Loss for QuadLoss<'_> {
    fn dim(&self) -> usize {
        self.task.dim()
    }

    fn record<S: Scalar>(&self, tape: &mut Tape<S>, w: Var) -> Result<Var> {
        let m = self.task.dim();
        if self.noise.is_empty() || self.noise.len() % m != 0 {
            return Err(Error::dims(m, self.noise.len()));
        }
        let n = self.noise.len() / m;
        let shift: Vec<f64> = self
            .noise
            .chunks(m)
            .flat_map(|x| x.iter().zip(self.task.theta.iter()).map(|(xi, ti)| -(xi + ti)))
            .collect();
        let c = tape.constant(&shift, n, m)?;
        let d = tape.add_row(c, w)?;
        let h = tape.constant(&self.task.h, m, m)?;
        let hd = tape.matmul(d, h)?;
        let p = tape.mul(d, hd)?;
        let s = tape.sum(p)?;
        tape.scale(s, 0.5 / n as f64)
    }
}

/// The loss of a model on one task's batch.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss<'a> {
    pub model: &'a ModelSpec,
    pub task: &'a Task,
    pub batch: &'a DataBatch,
}

impl Loss for TaskLoss<'_> {
    fn dim(&self) -> usize {
        match self.task {
            Task::Sine(_) => self.model.param_count(),
            Task::Quad(q) => q.dim(),
        }
    }

    fn record<S: Scalar>(&self, tape: &mut Tape<S>, w: Var) -> Result<Var> {
        match (self.task, self.batch) {
            (Task::Sine(_), DataBatch::Regression { xs, ys }) => MseLoss {
                spec: self.model,
                xs,
                ys,
            }
            .record(tape, w),
            (Task::Quad(q), DataBatch::Shift { noise, .. }) => {
                QuadLoss { task: q, noise }.record(tape, w)
            }
            (Task::Sine(_), _) => Err(Error::UnsupportedFamily { expected: "sine" }),
            (Task::Quad(_), _) => Err(Error::UnsupportedFamily { expected: "quad" }),
        }
    }
}
