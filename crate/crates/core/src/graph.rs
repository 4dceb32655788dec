//! k-NN graph over node descriptors and its self-loop normalized adjacency.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CSR_MAGIC: u32 = u32::from_le_bytes(*b"GMCS");

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("k = {k} must be below the node count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("feature row {0} is not finite")]
    NonFinite(usize),
    #[error("edge set is empty")]
    NoEdges,
    #[error("rho must be positive, got {0}")]
    BadRho(f64),
    #[error("invalid graph file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectedEdge {
    pub src: usize,
    pub dst: usize,
    pub dist: f64,
}

/// Undirected edge with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UndirectedEdge {
    pub i: usize,
    pub j: usize,
    pub dist: f64,
}

/// Compressed sparse rows; columns within a row are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from unsorted `(row, col, value)` triplets without duplicates.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_offsets = vec![0usize; n + 1];
        for &(r, _, _) in &triplets {
            row_offsets[r + 1] += 1;
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        Self {
            n,
            row_offsets,
            col_indices: triplets.iter().map(|t| t.1).collect(),
            values: triplets.iter().map(|t| t.2).collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        match self.col_indices[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[[i, j]] = v;
            }
        }
        d
    }

    /// `self * dense`. Each output row accumulates in column order, so the
    /// result does not depend on thread scheduling.
    pub fn matmul(&self, dense: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(dense.nrows(), self.n, "sparse-dense shape mismatch");
        let cols = dense.ncols();
        let mut out = Array2::zeros((self.n, cols));
        if cols == 0 {
            return out;
        }
        out.as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| {
                for (j, w) in self.row(i) {
                    for (o, &d) in row.iter_mut().zip(dense.row(j)) {
                        *o += w * d;
                    }
                }
            });
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }
}

/// Symmetric Gaussian-weighted k-NN adjacency, no self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    pub n: usize,
    pub edges: Vec<UndirectedEdge>,
    pub weights: Vec<f64>,
    pub rho: f64,
    pub adjacency: Csr,
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub csr: Csr,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.csr.n
    }

    pub fn matmul(&self, dense: ArrayView2<f64>) -> Array2<f64> {
        self.csr.matmul(dense)
    }

    /// Builds from a dense matrix; used for hand-made and permuted operators.
    pub fn from_dense(m: &Array2<f64>) -> Self {
        let n = m.nrows();
        let triplets = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| m[[i, j]] != 0.0)
            .map(|(i, j)| (i, j, m[[i, j]]))
            .collect();
        Self {
            csr: Csr::from_triplets(n, triplets),
        }
    }
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact k nearest neighbors of every row by Euclidean distance, self
/// excluded, ties broken toward the smaller node index. Output is grouped
/// by source, nearest first.
pub fn knn(x: ArrayView2<f64>, k: usize) -> Result<Vec<DirectedEdge>> {
    let n = x.nrows();
    if k == 0 {
        return Err(GraphError::KZero);
    }
    if k >= n {
        return Err(GraphError::KTooLarge { k, n });
    }
    if let Some(bad) = (0..n).find(|&i| x.row(i).iter().any(|v| !v.is_finite())) {
        return Err(GraphError::NonFinite(bad));
    }
    let per_node: Vec<Vec<DirectedEdge>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(xi, x.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.sort_unstable_by(cmp);
            cand.into_iter()
                .map(|(d2, j)| DirectedEdge {
                    src: i,
                    dst: j,
                    dist: d2.sqrt(),
                })
                .collect()
        })
        .collect();
    Ok(per_node.into_iter().flatten().collect())
}

/// Union of directed edges as undirected pairs `i < j`, sorted.
pub fn symmetrize(edges: &[DirectedEdge]) -> Vec<UndirectedEdge> {
    let mut out: Vec<UndirectedEdge> = edges
        .iter()
        .filter(|e| e.src != e.dst)
        .map(|e| UndirectedEdge {
            i: e.src.min(e.dst),
            j: e.src.max(e.dst),
            dist: e.dist,
        })
        .collect();
    out.sort_by_key(|a| (a.i, a.j));
    out.dedup_by(|a, b| a.i == b.i && a.j == b.j);
    out
}

/// Kernel width: sum of edge distances over `|E| + N`, each undirected
/// edge counted once. Falls back to 1 when every distance is zero.
pub fn compute_rho(edges: &[UndirectedEdge], n: usize) -> Result<f64> {
    if edges.is_empty() {
        return Err(GraphError::NoEdges);
    }
    let total: f64 = edges.iter().map(|e| e.dist).sum();
    let rho = total / (edges.len() + n) as f64;
    Ok(if rho > 0.0 { rho } else { 1.0 })
}

pub fn gaussian_weight(d: f64, rho: f64) -> f64 {
    (-(d * d) / (rho * rho)).exp()
}

/// k-NN graph symmetrized by union with Gaussian edge weights.
pub fn build_graph(x: ArrayView2<f64>, k: usize) -> Result<SparseGraph> {
    let n = x.nrows();
    let edges = symmetrize(&knn(x, k)?);
    let rho = compute_rho(&edges, n)?;
    Ok(graph_from_edges(n, edges, rho))
}

fn graph_from_edges(n: usize, edges: Vec<UndirectedEdge>, rho: f64) -> SparseGraph {
    let weights: Vec<f64> = edges.iter().map(|e| gaussian_weight(e.dist, rho)).collect();
    let triplets = edges
        .iter()
        .zip(&weights)
        .flat_map(|(e, &w)| [(e.i, e.j, w), (e.j, e.i, w)])
        .collect();
    SparseGraph {
        n,
        adjacency: Csr::from_triplets(n, triplets),
        edges,
        weights,
        rho,
    }
}

impl SparseGraph {
    /// Unit-weight graph from undirected pairs; used for tests and
    /// hand-built topologies.
    pub fn unweighted(n: usize, pairs: &[(usize, usize)]) -> Self {
        let edges: Vec<UndirectedEdge> = pairs
            .iter()
            .map(|&(a, b)| UndirectedEdge {
                i: a.min(b),
                j: a.max(b),
                dist: 0.0,
            })
            .collect();
        graph_from_edges(n, symmetrize_undirected(edges), 1.0)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge list export, one `i j w` line per undirected edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (e, w) in self.edges.iter().zip(&self.weights) {
            let _ = writeln!(s, "{} {} {}", e.i, e.j, w);
        }
        s
    }
}

fn symmetrize_undirected(mut edges: Vec<UndirectedEdge>) -> Vec<UndirectedEdge> {
    edges.retain(|e| e.i != e.j);
    edges.sort_by_key(|a| (a.i, a.j));
    edges.dedup_by(|a, b| a.i == b.i && a.j == b.j);
    edges
}

/// `D^-1/2 (A + I) D^-1/2`.
pub fn normalize(graph: &SparseGraph) -> NormalizedAdjacency {
    normalize_adjacency(&graph.adjacency)
}

/// Same as [`normalize`] for a bare symmetric adjacency without self-loops.
pub fn normalize_adjacency(a: &Csr) -> NormalizedAdjacency {
    let degree: Vec<f64> = (0..a.n).map(|i| 1.0 + a.row(i).map(|(_, w)| w).sum::<f64>()).collect();
    let mut triplets = Vec::with_capacity(a.nnz() + a.n);
    for i in 0..a.n {
        triplets.push((i, i, 1.0 / degree[i]));
        for (j, w) in a.row(i) {
            triplets.push((i, j, w / (degree[i] * degree[j]).sqrt()));
        }
    }
    NormalizedAdjacency {
        csr: Csr::from_triplets(a.n, triplets),
    }
}

/// Binary CSR: magic, N, nnz (u32), row offsets (u32, N+1), column
/// indices (u32, nnz), weights (f64, nnz). Little-endian.
pub fn csr_to_bytes(csr: &Csr) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * (csr.n + 1) + 12 * csr.nnz());
    for h in [CSR_MAGIC, csr.n as u32, csr.nnz() as u32] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for &o in &csr.row_offsets {
        out.extend_from_slice(&(o as u32).to_le_bytes());
    }
    for &c in &csr.col_indices {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for &v in &csr.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn csr_from_bytes(bytes: &[u8]) -> Result<Csr> {
    let bad = |m: &str| GraphError::Format(m.to_owned());
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated"))
    };
    if u32_at(0)? as u32 != CSR_MAGIC {
        return Err(bad("bad magic"));
    }
    let (n, nnz) = (u32_at(4)?, u32_at(8)?);
    let expected = 12 + 4 * (n + 1) + 4 * nnz + 8 * nnz;
    if bytes.len() != expected {
        return Err(bad("length disagrees with header"));
    }
    let mut off = 12;
    let mut row_offsets = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        row_offsets.push(u32_at(off)?);
        off += 4;
    }
    let mut col_indices = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        col_indices.push(u32_at(off)?);
        off += 4;
    }
    let values: Vec<f64> = bytes[off..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if row_offsets[0] != 0
        || row_offsets[n] != nnz
        || row_offsets.windows(2).any(|w| w[0] > w[1])
        || col_indices.iter().any(|&c| c >= n)
    {
        return Err(bad("inconsistent offsets or indices"));
    }
    Ok(Csr {
        n,
        row_offsets,
        col_indices,
        values,
    })
}

/// Metadata written next to a persisted graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub nodes: usize,
    pub undirected_edges: usize,
    pub k: usize,
    pub rho: f64,
    pub symmetrization: String,
    pub rho_edge_count: String,
}

impl GraphMeta {
    pub fn new(graph: &SparseGraph, k: usize) -> Self {
        Self {
            nodes: graph.n,
            undirected_edges: graph.edge_count(),
            k,
            rho: graph.rho,
            symmetrization: "union".into(),
            rho_edge_count: "undirected, each edge once".into(),
        }
    }
}

pub fn save_graph(graph: &SparseGraph, dir: &Path, k: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("graph.csr"), csr_to_bytes(&graph.adjacency))?;
    fs::write(dir.join("edges.txt"), graph.to_edge_list())?;
    let meta = serde_json::to_string_pretty(&GraphMeta::new(graph, k))
        .map_err(|e| GraphError::Format(e.to_string()))?;
    fs::write(dir.join("graph.json"), meta)?;
    Ok(())
}

/// Reads the adjacency back from `graph.csr`.
pub fn load_adjacency(dir: &Path) -> Result<Csr> {
    let csr = csr_from_bytes(&fs::read(dir.join("graph.csr"))?)?;
    if !csr.is_symmetric() || (0..csr.n).any(|i| csr.get(i, i) != 0.0) {
        return Err(GraphError::Format("adjacency must be symmetric without self-loops".into()));
    }
    Ok(csr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, c: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn collinear_knn() {
        let x = array![[0.0], [1.0], [3.0]];
        let e: Vec<(usize, usize)> = knn(x.view(), 1).unwrap().iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(e, vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn duplicate_rows_and_ties() {
        let x = array![[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [2.0, 2.0]];
        let e = knn(x.view(), 1).unwrap();
        assert_eq!((e[0].dst, e[0].dist), (1, 0.0));
        // node 2 is equidistant from 0 and 1: smaller index wins
        assert_eq!(e[2].dst, 0);
        let e = knn(x.view(), 3).unwrap();
        assert_eq!(e.iter().filter(|e| e.src == 3).map(|e| e.dst).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn knn_errors() {
        let x = random_points(1, 4, 2);
        assert!(matches!(knn(x.view(), 4), Err(GraphError::KTooLarge { .. })));
        assert!(matches!(knn(x.view(), 0), Err(GraphError::KZero)));
        let mut y = x.clone();
        y[[2, 1]] = f64::NAN;
        assert!(matches!(knn(y.view(), 1), Err(GraphError::NonFinite(2))));
    }

    #[test]
    fn knn_matches_all_pairs_sort() {
        let x = random_points(7, 50, 6);
        let got = knn(x.view(), 5).unwrap();
        for i in 0..50 {
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..6).map(|c| (x[[i, c]] - x[[j, c]]).powi(2)).sum::<f64>().sqrt();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            let have: Vec<usize> = got.iter().filter(|e| e.src == i).map(|e| e.dst).collect();
            assert_eq!(have, want);
        }
    }

    #[test]
    fn rho_cases() {
        let one = [UndirectedEdge { i: 0, j: 1, dist: 1.0 }];
        assert!((compute_rho(&one, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let zeros = [UndirectedEdge { i: 0, j: 1, dist: 0.0 }, UndirectedEdge { i: 1, j: 2, dist: 0.0 }];
        assert_eq!(compute_rho(&zeros, 3).unwrap(), 1.0);
        assert!(matches!(compute_rho(&[], 3), Err(GraphError::NoEdges)));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let edges: Vec<UndirectedEdge> = (0..20)
            .map(|k| UndirectedEdge { i: k, j: k + 1, dist: rng.random_range(0.0..3.0) })
            .collect();
        let mut total = 0.0;
        for e in &edges {
            total += e.dist;
        }
        assert!((compute_rho(&edges, 21).unwrap() - total / 41.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_values() {
        assert_eq!(gaussian_weight(0.0, 0.7), 1.0);
        assert!((gaussian_weight(0.7, 0.7) - 0.367879441171).abs() < 1e-10);
        assert!((gaussian_weight(1.4, 0.7) - 0.018315638889).abs() < 1e-10);
    }

    #[test]
    fn union_symmetrization() {
        // 0,1 mutual; 2 -> 1 only
        let x = array![[0.0], [1.0], [3.0]];
        let g = build_graph(x.view(), 1).unwrap();
        let pairs: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert!((g.rho - 3.0 / 5.0).abs() < 1e-15);
        assert!(g.adjacency.get(2, 1) > 0.0 && g.adjacency.get(1, 2) == g.adjacency.get(2, 1));
        assert_eq!(g.adjacency.get(0, 2), 0.0);
    }

    #[test]
    fn random_graph_is_symmetric() {
        let g = build_graph(random_points(3, 60, 4).view(), 4).unwrap();
        assert!(g.adjacency.is_symmetric());
        let d = g.adjacency.to_dense();
        assert_eq!(d.t(), d);
        assert!(g.weights.iter().all(|w| *w > 0.0 && *w <= 1.0));
        assert!((0..60).all(|i| g.adjacency.get(i, i) == 0.0));
    }

    #[test]
    fn two_node_normalization() {
        let ahat = normalize(&SparseGraph::unweighted(2, &[(0, 1)]));
        assert_eq!(ahat.csr.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn isolated_node_normalization() {
        let ahat = normalize(&SparseGraph::unweighted(3, &[(0, 1)]));
        let d = ahat.csr.to_dense();
        assert_eq!(d.row(2).to_vec(), vec![0.0, 0.0, 1.0]);
    }

    fn dense_oracle(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let at = a + &Array2::<f64>::eye(n);
        let deg: Vec<f64> = (0..n).map(|i| at.row(i).sum()).collect();
        Array2::from_shape_fn((n, n), |(i, j)| at[[i, j]] / (deg[i].sqrt() * deg[j].sqrt()))
    }

    #[test]
    fn normalization_matches_dense_oracle() {
        let g = build_graph(random_points(11, 10, 3).view(), 3).unwrap();
        let got = normalize(&g).csr.to_dense();
        let want = dense_oracle(&g.adjacency.to_dense());
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn complete_graph_rows_sum_to_one() {
        let pairs: Vec<(usize, usize)> = (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j))).collect();
        let ahat = normalize(&SparseGraph::unweighted(5, &pairs)).csr.to_dense();
        for row in ahat.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_radius_at_most_one() {
        for seed in 0..5 {
            let g = build_graph(random_points(seed, 9, 2).view(), 2).unwrap();
            let ahat = normalize(&g);
            let dense = ahat.csr.to_dense();
            let mut v = Array2::from_elem((9, 1), 1.0);
            v[[0, 0]] = -0.5;
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = dense.dot(&v);
                lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt() / v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.mapv(|x| x / lambda);
            }
            assert!(lambda <= 1.0 + 1e-9, "lambda {lambda}");
            // the sparse product agrees with the dense one
            let sparse = ahat.matmul(v.view());
            let dense_prod = dense.dot(&v);
            for (a, b) in sparse.iter().zip(dense_prod.iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn csr_file_round_trip() {
        let g = build_graph(random_points(2, 30, 3).view(), 4).unwrap();
        let bytes = csr_to_bytes(&g.adjacency);
        assert_eq!(&bytes[..4], b"GMCS");
        let back = csr_from_bytes(&bytes).unwrap();
        assert_eq!(back, g.adjacency);
        assert!(csr_from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        save_graph(&g, dir.path(), 4).unwrap();
        let adj = load_adjacency(dir.path()).unwrap();
        assert_eq!(normalize_adjacency(&adj), normalize(&g));
        let text = fs::read_to_string(dir.path().join("edges.txt")).unwrap();
        assert_eq!(text.lines().count(), g.edge_count());
    }

    proptest! {
        #[test]
        fn knn_out_degree_is_k(seed in any::<u64>(), n in 3usize..25, k in 1usize..3) {
            let x = random_points(seed, n, 3);
            let e = knn(x.view(), k).unwrap();
            prop_assert_eq!(e.len(), n * k);
            for i in 0..n {
                prop_assert_eq!(e.iter().filter(|e| e.src == i).count(), k);
            }
            prop_assert!(e.iter().all(|e| e.src != e.dst));
        }

        #[test]
        fn weights_are_scale_invariant(seed in any::<u64>(), scale in 0.5f64..8.0) {
            // powers of two keep the scaled arithmetic exact
            let s = scale.log2().round().exp2();
            let x = random_points(seed, 15, 3);
            let g1 = build_graph(x.view(), 3).unwrap();
            let g2 = build_graph((&x * s).view(), 3).unwrap();
            prop_assert_eq!(&g1.edges.iter().map(|e| (e.i, e.j)).collect::<Vec<_>>(),
                            &g2.edges.iter().map(|e| (e.i, e.j)).collect::<Vec<_>>());
            prop_assert!((g2.rho - s * g1.rho).abs() < 1e-12 * g2.rho.max(1.0));
            for (a, b) in g1.weights.iter().zip(&g2.weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
