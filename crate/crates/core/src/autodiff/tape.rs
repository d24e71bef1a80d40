use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    /// Row-major `(n×m)·(m×p)`.
    MatMul(Var, Var),
    /// Matrix plus a `1×cols` row broadcast over every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    /// Contiguous block of another node, reshaped.
    Slice(Var, usize),
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<S>,
}

/// Reverse-mode tape over small dense row-major matrices.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. Every recorded value is checked for finiteness.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<S>) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!("tape node {op:?}")));
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf holding `values` as a `rows×cols` matrix.
    pub fn leaf(&mut self, values: Vec<S>, rows: usize, cols: usize) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::dims(rows * cols, values.len()));
        }
        self.push(Op::Leaf, rows, cols, values)
    }

    pub fn constant(&mut self, values: &[f64], rows: usize, cols: usize) -> Result<Var> {
        self.leaf(values.iter().map(|&x| S::from_f64(x)).collect(), rows, cols)
    }

    /// View `rows×cols` entries of `src` starting at `offset` as a new node.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let len = self.nodes[src.0].value.len();
        if offset + rows * cols > len {
            return Err(Error::dims(len, offset + rows * cols));
        }
        let value = self.nodes[src.0].value[offset..offset + rows * cols].to_vec();
        self.push(Op::Slice(src, offset), rows, cols, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let (m2, p) = self.shape(b);
        if m != m2 {
            return Err(Error::dims(m, m2));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![S::zero(); n * p];
        for i in 0..n {
            let row = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let aik = av[i * m + k];
                let brow = &bv[k * p..(k + 1) * p];
                for (o, &bkj) in row.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        self.push(Op::MatMul(a, b), n, p, out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, p) = self.shape(a);
        let (r, c) = self.shape(row);
        if r * c != p {
            return Err(Error::dims(p, r * c));
        }
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let out = (0..n * p).map(|idx| av[idx] + rv[idx % p]).collect();
        self.push(Op::AddRow(a, row), n, p, out)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (n, p) = self.shape(a);
        let shape_b = self.shape(b);
        if (n, p) != shape_b {
            return Err(Error::dims(n * p, shape_b.0 * shape_b.1));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, n, p, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0 and the second
    /// derivative is 0 everywhere.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (n, p) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x.value() > 0.0 { x } else { S::zero() })
            .collect();
        self.push(Op::Relu(a), n, p, out)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let (n, p) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x * x).collect();
        self.push(Op::Square(a), n, p, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (n, p) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x.scale(c)).collect();
        self.push(Op::Scale(a, c), n, p, out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &x in &self.nodes[a.0].value {
            acc += x;
        }
        self.push(Op::Sum(a), 1, 1, vec![acc])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from the scalar node `output`. Returns one adjoint
    /// buffer per node; nodes recorded after `output` keep zero adjoints.
    pub fn backward(&self, output: Var) -> Result<Adjoints<S>> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::dims(1, self.nodes[output.0].value.len()));
        }
        let mut adj: Vec<Vec<S>> = self
            .nodes
            .iter()
            .map(|n| vec![S::zero(); n.value.len()])
            .collect();
        adj[output.0][0] = S::from_f64(1.0);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            if g.iter().all(|x| *x == S::zero()) {
                adj[idx] = g;
                continue;
            }
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (n, m) = self.shape(a);
                    let p = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA = G·Bᵀ
                    {
                        let da = &mut adj[a.0];
                        for i in 0..n {
                            for k in 0..m {
                                let mut acc = S::zero();
                                for j in 0..p {
                                    acc += g[i * p + j] * bv[k * p + j];
                                }
                                da[i * m + k] += acc;
                            }
                        }
                    }
                    // dB = Aᵀ·G
                    {
                        let db = &mut adj[b.0];
                        for i in 0..n {
                            for k in 0..m {
                                let aik = av[i * m + k];
                                for j in 0..p {
                                    db[k * p + j] += aik * g[i * p + j];
                                }
                            }
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let p = node.cols;
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[row.0][i % p] += gi;
                    }
                }
                Op::Add(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] += -gi;
                    }
                }
                Op::Mul(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        let x = self.nodes[a.0].value[i];
                        let y = self.nodes[b.0].value[i];
                        adj[a.0][i] += gi * y;
                        adj[b.0][i] += gi * x;
                    }
                }
                Op::Relu(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        if self.nodes[a.0].value[i].value() > 0.0 {
                            adj[a.0][i] += gi;
                        }
                    }
                }
                Op::Square(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        let x = self.nodes[a.0].value[i];
                        adj[a.0][i] += gi * x.scale(2.0);
                    }
                }
                Op::Scale(a, c) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi.scale(c);
                    }
                }
                Op::Sum(a) => {
                    let gi = g[0];
                    for x in adj[a.0].iter_mut() {
                        *x += gi;
                    }
                }
                Op::Slice(src, offset) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[src.0][offset + i] += gi;
                    }
                }
            }
            adj[idx] = g;
        }

        for (i, a) in adj.iter().enumerate().take(output.0 + 1) {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::non_finite(format!("adjoint of node {i}")));
            }
        }
        Ok(Adjoints { adj })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Adjoints<S> {
    adj: Vec<Vec<S>>,
}

impl<S: Scalar> Adjoints<S> {
    pub fn of(&self, v: Var) -> &[S] {
        &self.adj[v.0]
    }
}
