use crate::numerics::Tensor;

/// Symmetric agent adjacency with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityGraph {
    n: usize,
    adj: Vec<bool>,
}

impl VisibilityGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge(&self, u: usize, v: usize) -> bool {
        self.adj[u * self.n + v]
    }

    pub fn adjacency(&self) -> Tensor {
        let data = self.adj.iter().map(|&e| e as u8 as f64).collect();
        Tensor::matrix(self.n, self.n, data).expect("n x n")
    }
}

/// `sees[u * n + v]` says whether agent `u` observes agent `v`. An edge joins
/// `u` and `v` when either observes the other.
pub fn build_adjacency(n: usize, sees: &[bool]) -> VisibilityGraph {
    assert_eq!(sees.len(), n * n, "visibility relation must be n x n");
    let mut adj = vec![false; n * n];
    for u in 0..n {
        for v in 0..n {
            adj[u * n + v] = u != v && (sees[u * n + v] || sees[v * n + u]);
        }
    }
    VisibilityGraph { n, adj }
}

/// `D^-1/2 (A + I) D^-1/2` where `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(g: &VisibilityGraph) -> Tensor {
    let n = g.n;
    let mut out = vec![0.0; n * n];
    write_normalized(g, &mut out);
    Tensor::matrix(n, n, out).expect("n x n")
}

fn write_normalized(g: &VisibilityGraph, out: &mut [f64]) {
    let n = g.n;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|u| {
            let degree = 1 + (0..n).filter(|&v| g.edge(u, v)).count();
            1.0 / (degree as f64).sqrt()
        })
        .collect();
    for u in 0..n {
        for v in 0..n {
            out[u * n + v] = if u == v || g.edge(u, v) {
                inv_sqrt[u] * inv_sqrt[v]
            } else {
                0.0
            };
        }
    }
}

/// Normalised adjacency of many graphs of the same size, back to back.
pub fn normalized_blocks<'a>(n: usize, relations: impl Iterator<Item = &'a [bool]>) -> Vec<f64> {
    let mut out = Vec::new();
    for sees in relations {
        let g = build_adjacency(n, sees);
        let start = out.len();
        out.resize(start + n * n, 0.0);
        write_normalized(&g, &mut out[start..]);
    }
    out
}
