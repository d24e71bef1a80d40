//! Reverse-mode differentiation over small dense computations.
//!
//! A [`Loss`] records its computation on a [`Tape`]; [`gradient`] replays it
//! in `f64`, and [`hvp`] replays it over [`Dual`] numbers seeded with the
//! direction `v`, which yields `∇²f(w)·v` exactly without forming the Hessian.

mod scalar;
mod tape;

use std::ops::{Deref, DerefMut};

pub use scalar::{Dual, Scalar};
pub use tape::{Adjoints, Tape, Var};

use crate::error::{Error, Result};

/// Flat model parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += a·x`
    pub fn axpy(&mut self, a: f64, x: &ParamVector) {
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += a * xi;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| a * x).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A scalar loss of the parameters, with its data already bound.
pub trait Loss {
    /// Expected parameter dimension.
    fn dim(&self) -> usize;

    /// Records the loss on `tape`, where `w` is a `1×dim` node.
    fn record<S: Scalar>(&self, tape: &mut Tape<S>, w: Var) -> Result<Var>;
}

fn check_dim<L: Loss>(loss: &L, w: &ParamVector) -> Result<()> {
    if w.dim() != loss.dim() {
        return Err(Error::dims(loss.dim(), w.dim()));
    }
    if !w.is_finite() {
        return Err(Error::non_finite("parameters"));
    }
    Ok(())
}

pub fn value<L: Loss>(loss: &L, w: &ParamVector) -> Result<f64> {
    check_dim(loss, w)?;
    let mut tape = Tape::<f64>::new();
    let wv = tape.leaf(w.to_vec(), 1, w.dim())?;
    let out = loss.record(&mut tape, wv)?;
    Ok(tape.scalar(out))
}

pub fn value_and_gradient<L: Loss>(loss: &L, w: &ParamVector) -> Result<(f64, ParamVector)> {
    check_dim(loss, w)?;
    let mut tape = Tape::<f64>::new();
    let wv = tape.leaf(w.to_vec(), 1, w.dim())?;
    let out = loss.record(&mut tape, wv)?;
    let adj = tape.backward(out)?;
    Ok((tape.scalar(out), ParamVector(adj.of(wv).to_vec())))
}

/// `∇f(w)`.
pub fn gradient<L: Loss>(loss: &L, w: &ParamVector) -> Result<ParamVector> {
    value_and_gradient(loss, w).map(|(_, g)| g)
}

/// `∇²f(w)·v` by forward-over-reverse: the reverse sweep runs over dual
/// numbers whose tangent is seeded with `v`.
pub fn hvp<L: Loss>(loss: &L, w: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    check_dim(loss, w)?;
    if v.dim() != w.dim() {
        return Err(Error::dims(w.dim(), v.dim()));
    }
    let mut tape = Tape::<Dual>::new();
    let seeded = w.iter().zip(v.iter()).map(|(&x, &d)| Dual::new(x, d)).collect();
    let wv = tape.leaf(seeded, 1, w.dim())?;
    let out = loss.record(&mut tape, wv)?;
    let adj = tape.backward(out)?;
    Ok(ParamVector(adj.of(wv).iter().map(|d| d.du).collect()))
}

/// Gradient and Hessian-vector product from a single dual sweep.
pub fn gradient_and_hvp<L: Loss>(
    loss: &L,
    w: &ParamVector,
    v: &ParamVector,
) -> Result<(ParamVector, ParamVector)> {
    check_dim(loss, w)?;
    if v.dim() != w.dim() {
        return Err(Error::dims(w.dim(), v.dim()));
    }
    let mut tape = Tape::<Dual>::new();
    let seeded = w.iter().zip(v.iter()).map(|(&x, &d)| Dual::new(x, d)).collect();
    let wv = tape.leaf(seeded, 1, w.dim())?;
    let out = loss.record(&mut tape, wv)?;
    let adj = tape.backward(out)?;
    let (g, h) = adj.of(wv).iter().map(|d| (d.re, d.du)).unzip();
    Ok((ParamVector(g), ParamVector(h)))
}
