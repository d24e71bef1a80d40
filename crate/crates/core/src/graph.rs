//! Network topologies, combination matrices and their spectral diagnostics.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Tolerance on row and column sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const MIXING_TOL: f64 = 1e-10;
pub const MIXING_MAX_ITERS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum TopologyKind {
    Ring,
    Path,
    Complete,
    /// Resampled until connected.
    ErdosRenyi { p: f64 },
    Explicit(Vec<(usize, usize)>),
    /// No edges; the non-cooperative network.
    Isolated,
}

impl TopologyKind {
    pub fn name(&self) -> &'static str {
        match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Path => "path",
            TopologyKind::Complete => "complete",
            TopologyKind::ErdosRenyi { .. } => "erdos_renyi",
            TopologyKind::Explicit(_) => "explicit",
            TopologyKind::Isolated => "identity",
        }
    }
}

/// Undirected graph over `k` agents. Self-loops are implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    k: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    /// Builds a topology from an edge list. Duplicate and reversed pairs are
    /// merged, self-pairs dropped.
    pub fn from_edges(k: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("topology needs at least one agent".into()));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= k || v >= k {
                return Err(Error::BadAgentIndex {
                    agent: u.max(v),
                    agents: k,
                });
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        Ok(Topology { k, edges: set })
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    /// Neighbour count including the node itself.
    pub fn closed_degrees(&self) -> Vec<usize> {
        let mut deg = vec![1; self.k];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.k];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; self.k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_topology(kind: &TopologyKind, k: usize, rng: Option<&mut Stream>) -> Result<Topology> {
    if k == 0 {
        return Err(Error::InvalidArgument("topology needs at least one agent".into()));
    }
    let mut edges = Vec::new();
    match kind {
        TopologyKind::Path => edges.extend((1..k).map(|i| (i - 1, i))),
        TopologyKind::Ring => {
            edges.extend((1..k).map(|i| (i - 1, i)));
            if k > 2 {
                edges.push((k - 1, 0));
            }
        }
        TopologyKind::Complete => {
            for u in 0..k {
                edges.extend((u + 1..k).map(|v| (u, v)));
            }
        }
        TopologyKind::Isolated => {}
        TopologyKind::Explicit(list) => {
            let t = Topology::from_edges(k, list)?;
            if !t.is_connected() {
                return Err(Error::Disconnected);
            }
            return Ok(t);
        }
        TopologyKind::ErdosRenyi { p } => {
            if !(*p > 0.0 && *p <= 1.0) && k > 1 {
                return Err(Error::InvalidArgument(format!(
                    "edge probability must be in (0, 1], got {p}"
                )));
            }
            let mut fallback;
            let rng = match rng {
                Some(r) => r,
                None => {
                    fallback = substream(0, crate::rng::GRAPH_STREAM);
                    &mut fallback
                }
            };
            loop {
                let mut list = Vec::new();
                for u in 0..k {
                    for v in u + 1..k {
                        if rng.random::<f64>() < *p {
                            list.push((u, v));
                        }
                    }
                }
                let t = Topology::from_edges(k, &list)?;
                if t.is_connected() {
                    return Ok(t);
                }
            }
        }
    }
    Topology::from_edges(k, &edges)
}

/// Parses `u v` pairs, one per line, 0-based. Blank lines and `#` comments
/// are ignored.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(u), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!(
                "edge list line {}: expected two indices",
                lineno + 1
            )));
        };
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::Config(format!("edge list line {}: bad index {s:?}", lineno + 1))
            })
        };
        out.push((parse(u)?, parse(v)?));
    }
    Ok(out)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_edge_list(&std::fs::read_to_string(path)?)
}

/// `K×K` weights with `get(l, k) = a_{ℓk}`, the weight agent `k` places on
/// neighbour `ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationMatrix {
    k: usize,
    a: Vec<f64>,
}

impl CombinationMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::InvalidArgument("empty combination matrix".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::dims(k, r.len()));
        }
        Ok(CombinationMatrix {
            k,
            a: rows.into_iter().flatten().collect(),
        })
    }

    pub fn identity(k: usize) -> Self {
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            a[i * k + i] = 1.0;
        }
        CombinationMatrix { k, a }
    }

    /// Every entry exactly `1/K`.
    pub fn uniform(k: usize) -> Self {
        CombinationMatrix {
            k,
            a: vec![1.0 / k as f64; k * k],
        }
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.a[l * self.k + k]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.a.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.k).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

impl fmt::Display for CombinationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.a.chunks(self.k) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Metropolis rule: `a_{ℓk} = 1/max(n_k, n_ℓ)` for neighbours, where `n`
/// counts the node itself, and the diagonal absorbs the remainder.
pub fn metropolis_weights(t: &Topology) -> CombinationMatrix {
    let k = t.agents();
    let deg = t.closed_degrees();
    let mut a = vec![0.0; k * k];
    for (u, v) in t.edges() {
        let w = 1.0 / deg[u].max(deg[v]) as f64;
        a[u * k + v] = w;
        a[v * k + u] = w;
    }
    for i in 0..k {
        let off: f64 = (0..k).filter(|&j| j != i).map(|j| a[j * k + i]).sum();
        a[i * k + i] = 1.0 - off;
    }
    CombinationMatrix { k, a }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub nonnegative: bool,
    pub doubly_stochastic: bool,
    pub primitive: bool,
    pub has_self_loop: bool,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.nonnegative && self.doubly_stochastic && self.primitive && self.has_self_loop
    }
}

type Pattern = Vec<bool>;

fn pattern_mul(a: &Pattern, b: &Pattern, k: usize) -> Pattern {
    let mut out = vec![false; k * k];
    for i in 0..k {
        for l in 0..k {
            if a[i * k + l] {
                for j in 0..k {
                    out[i * k + j] |= b[l * k + j];
                }
            }
        }
    }
    out
}

fn pattern_pow(base: &Pattern, mut e: usize, k: usize) -> Pattern {
    let mut result: Pattern = (0..k * k).map(|idx| idx / k == idx % k).collect();
    let mut b = base.clone();
    while e > 0 {
        if e & 1 == 1 {
            result = pattern_mul(&result, &b, k);
        }
        b = pattern_mul(&b, &b, k);
        e >>= 1;
    }
    result
}

pub fn validate_combination(a: &CombinationMatrix) -> ValidationReport {
    let k = a.k;
    let nonnegative = a.a.iter().all(|&x| x >= 0.0);
    let rows_ok = (0..k).all(|i| ((0..k).map(|j| a.get(i, j)).sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL);
    let cols_ok = (0..k).all(|j| ((0..k).map(|i| a.get(i, j)).sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL);
    let has_self_loop = (0..k).any(|i| a.get(i, i) > 0.0);

    let support: Pattern = a.a.iter().map(|&x| x > 0.0).collect();
    // irreducible iff (A+I)^(K-1) has full support
    let mut with_loops = support.clone();
    for i in 0..k {
        with_loops[i * k + i] = true;
    }
    let irreducible = pattern_pow(&with_loops, k.saturating_sub(1), k).iter().all(|&x| x);
    // Wielandt: a primitive matrix has A^((K-1)²+1) > 0
    let primitive = nonnegative
        && irreducible
        && pattern_pow(&support, (k - 1) * (k - 1) + 1, k).iter().all(|&x| x);

    ValidationReport {
        nonnegative,
        doubly_stochastic: nonnegative && rows_ok && cols_ok,
        primitive,
        has_self_loop,
    }
}

/// Spectral radius of `Aᵀ − (1/K)𝟙𝟙ᵀ`.
///
/// Power iteration on the square of that operator restricted to `𝟙⊥`, which
/// removes sign ambiguity between `±λ` pairs. Stops when the residual of the
/// eigen-equation drops below [`MIXING_TOL`].
pub fn mixing_rate(a: &CombinationMatrix) -> Result<f64> {
    let k = a.k;
    if k == 1 {
        return Ok(0.0);
    }
    let apply = |x: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / k as f64;
        // y = Aᵀx − 𝟙 mean(x)
        (0..k)
            .map(|i| (0..k).map(|l| a.get(l, i) * x[l]).sum::<f64>() - mean)
            .collect()
    };
    let deflate = |x: &mut [f64]| {
        let mean = x.iter().sum::<f64>() / k as f64;
        x.iter_mut().for_each(|v| *v -= mean);
    };
    let normalize = |x: &mut [f64]| -> f64 {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            x.iter_mut().for_each(|v| *v /= n);
        }
        n
    };

    let mut rng = substream(0x5eed, 0);
    let mut x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    deflate(&mut x);
    normalize(&mut x);

    for _ in 0..MIXING_MAX_ITERS {
        let mut y = apply(&apply(&x));
        deflate(&mut y);
        let mu: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - mu * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= MIXING_TOL * 1e-2 {
            return Ok(mu.max(0.0).sqrt());
        }
        if normalize(&mut y) == 0.0 {
            return Ok(0.0);
        }
        x = y;
    }
    Err(Error::NoConvergence {
        iterations: MIXING_MAX_ITERS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;

    fn path3() -> CombinationMatrix {
        metropolis_weights(&build_topology(&TopologyKind::Path, 3, None).unwrap())
    }

    /// Second-largest |eigenvalue| of a symmetric doubly-stochastic matrix.
    fn eigen_lambda2(a: &CombinationMatrix) -> f64 {
        let k = a.agents();
        let m = DMatrix::from_row_slice(k, k, &a.rows().concat())
            - DMatrix::from_element(k, k, 1.0 / k as f64);
        SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn topology_shapes() {
        assert_eq!(build_topology(&TopologyKind::Complete, 6, None).unwrap().edge_count(), 15);
        assert_eq!(
            build_topology(&TopologyKind::Ring, 3, None).unwrap(),
            build_topology(&TopologyKind::Complete, 3, None).unwrap()
        );
        let p = build_topology(&TopologyKind::Path, 3, None).unwrap();
        assert_eq!(p.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn explicit_disconnected_is_rejected() {
        let r = build_topology(&TopologyKind::Explicit(vec![(0, 1), (2, 3)]), 4, None);
        assert_eq!(r, Err(Error::Disconnected));
        assert!(build_topology(&TopologyKind::Explicit(vec![(0, 4)]), 4, None).is_err());
    }

    #[test]
    fn erdos_renyi_is_connected_and_seeded() {
        let mut r1 = substream(3, 0);
        let mut r2 = substream(3, 0);
        let a = build_topology(&TopologyKind::ErdosRenyi { p: 0.3 }, 10, Some(&mut r1)).unwrap();
        let b = build_topology(&TopologyKind::ErdosRenyi { p: 0.3 }, 10, Some(&mut r2)).unwrap();
        assert!(a.is_connected());
        assert_eq!(a, b);
    }

    #[test]
    fn edge_list_parsing() {
        let edges = parse_edge_list("# fig\n0 1\n1 2  # tail\n\n2 0\n").unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 0)]);
        assert!(parse_edge_list("0 1 2\n").is_err());
        assert!(parse_edge_list("0 x\n").is_err());
    }

    #[test]
    fn metropolis_path3_exact() {
        let a = path3();
        let third = 1.0 / 3.0;
        let expected = [
            [1.0 - third, third, 0.0],
            [third, 1.0 - 2.0 * third, third],
            [0.0, third, 1.0 - third],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.get(i, j), expected[i][j]);
            }
        }
        assert!((a.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metropolis_complete_is_uniform() {
        let a = metropolis_weights(&build_topology(&TopologyKind::Complete, 6, None).unwrap());
        for i in 0..6 {
            for j in 0..6 {
                assert!((a.get(i, j) - 1.0 / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_agent_matrix() {
        let a = metropolis_weights(&build_topology(&TopologyKind::Complete, 1, None).unwrap());
        assert_eq!(a.rows(), vec![vec![1.0]]);
        assert_eq!(mixing_rate(&a).unwrap(), 0.0);
        assert!(validate_combination(&a).all_pass());
    }

    #[test]
    fn validation_examples() {
        let id = validate_combination(&CombinationMatrix::identity(3));
        assert!(id.doubly_stochastic);
        assert!(!id.primitive);

        assert!(validate_combination(&path3()).all_pass());

        let swap = CombinationMatrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = validate_combination(&swap);
        assert!(r.doubly_stochastic);
        assert!(!r.primitive);
        assert!(!r.has_self_loop);

        let bad = CombinationMatrix::from_rows(vec![vec![0.6, 0.5], vec![0.4, 0.5]]).unwrap();
        assert!(!validate_combination(&bad).doubly_stochastic);
    }

    #[test]
    fn mixing_rate_examples() {
        assert!(mixing_rate(&CombinationMatrix::uniform(6)).unwrap() < 1e-12);
        assert!((mixing_rate(&CombinationMatrix::identity(6)).unwrap() - 1.0).abs() < 1e-10);
        assert!((mixing_rate(&path3()).unwrap() - 2.0 / 3.0).abs() < 1e-10);
        assert!((eigen_lambda2(&path3()) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_rate_of_bipartite_swap_is_one() {
        let swap = CombinationMatrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!((mixing_rate(&swap).unwrap() - 1.0).abs() < 1e-10);
    }

    fn random_connected(seed: u64, k: usize, p: f64) -> Topology {
        let mut rng = substream(seed, 9);
        build_topology(&TopologyKind::ErdosRenyi { p }, k, Some(&mut rng)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metropolis_is_valid_symmetric_and_mixing(seed in 0u64..10_000, k in 1usize..=12, p in 0.15f64..1.0) {
            let t = random_connected(seed, k, p);
            let a = metropolis_weights(&t);
            prop_assert!(a.is_symmetric());
            let r = validate_combination(&a);
            prop_assert!(r.all_pass());
            let lam = mixing_rate(&a).unwrap();
            prop_assert!(lam < 1.0);
            prop_assert!((lam - eigen_lambda2(&a)).abs() < 1e-9);
        }

        #[test]
        fn mixing_below_one_iff_primitive(seed in 0u64..10_000, k in 2usize..=12, drop in 0usize..3) {
            // Metropolis on a connected graph, or a block-diagonal splice of two
            // such graphs (reducible), or the identity.
            let a = match drop {
                0 => metropolis_weights(&random_connected(seed, k, 0.4)),
                1 => {
                    let t = random_connected(seed, k, 0.4);
                    let split = k / 2;
                    let kept: Vec<_> = t.edges().filter(|&(u, v)| (u < split) == (v < split)).collect();
                    metropolis_weights(&Topology::from_edges(k, &kept).unwrap())
                }
                _ => CombinationMatrix::identity(k),
            };
            let r = validate_combination(&a);
            let lam = mixing_rate(&a).unwrap();
            prop_assert_eq!(lam < 1.0 - 1e-9, r.primitive);
        }
    }
}
