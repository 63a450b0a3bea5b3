//! Patient lesion graphs: symmetric kNN connectivity over lesion positions
//! with Gaussian distance-decay edge weights, plus the renormalized
//! adjacency used by graph convolution.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Anatomical region of a lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Periventricular,
    Subcortical,
    Juxtacortical,
    Infratentorial,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Periventricular,
        Region::Subcortical,
        Region::Juxtacortical,
        Region::Infratentorial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Periventricular => "periventricular",
            Region::Subcortical => "subcortical",
            Region::Juxtacortical => "juxtacortical",
            Region::Infratentorial => "infratentorial",
        }
    }
}

/// One lesion: normalized spatial position, feature vector, region tag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lesion {
    pub position: [f64; 3],
    pub features: Vec<f64>,
    pub region: Region,
}

/// One patient's graph: lesions as nodes, weighted undirected edges, and the
/// binary disease-activity label.
#[derive(Clone, Debug)]
pub struct LesionGraph {
    pub lesions: Vec<Lesion>,
    /// Undirected edges stored once with i < j; weights in (0, 1].
    pub edges: Vec<(usize, usize, f64)>,
    pub label: u8,
    pub patient_id: String,
}

impl LesionGraph {
    pub fn node_count(&self) -> usize {
        self.lesions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.lesions.first().map_or(0, |l| l.features.len())
    }

    /// Node features stacked into an NxF tensor.
    pub fn feature_matrix(&self) -> Tensor {
        let n = self.lesions.len();
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(n * f);
        for l in &self.lesions {
            data.extend_from_slice(&l.features);
        }
        Tensor::new(n, f, data).expect("consistent lesion feature dims")
    }
}

/// Graph construction hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Neighbor count for the kNN search.
    pub k: usize,
    /// Distance-decay scale tau in exp(-d^2 / tau^2).
    pub tau: f64,
    /// Lower clamp applied to edge weights (0 disables it).
    pub distance_floor: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { k: 5, tau: 0.01, distance_floor: 0.0 }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Param("k must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Param(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Gaussian distance-decay weight exp(-||si - sj||^2 / tau^2), clamped below
/// by `floor`.
pub fn edge_weight(si: &[f64; 3], sj: &[f64; 3], tau: f64, floor: f64) -> f64 {
    (-sq_dist(si, sj) / (tau * tau)).exp().max(floor)
}

/// Union-symmetric kNN edges: (i, j) is an edge iff j is among i's k nearest
/// or i is among j's k nearest (Euclidean position distance). Ties are broken
/// by ascending node index. Returned edges are (i, j, weight) with i < j.
pub fn build_knn_edges(lesions: &[Lesion], cfg: &GraphConfig) -> Result<Vec<(usize, usize, f64)>> {
    cfg.validate()?;
    if lesions.is_empty() {
        return Err(Error::Input("cannot build a graph from zero lesions".into()));
    }
    let n = lesions.len();
    let mut connected = vec![false; n * n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            sq_dist(&lesions[i].position, &lesions[a].position)
                .partial_cmp(&sq_dist(&lesions[i].position, &lesions[b].position))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(cfg.k) {
            connected[i * n + j] = true;
            connected[j * n + i] = true;
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if connected[i * n + j] {
                let w = edge_weight(&lesions[i].position, &lesions[j].position, cfg.tau, cfg.distance_floor);
                edges.push((i, j, w));
            }
        }
    }
    Ok(edges)
}

/// Assemble a full patient graph.
pub fn build_graph(
    lesions: Vec<Lesion>,
    label: u8,
    patient_id: String,
    cfg: &GraphConfig,
) -> Result<LesionGraph> {
    let edges = build_knn_edges(&lesions, cfg)?;
    Ok(LesionGraph { lesions, edges, label, patient_id })
}

/// Symmetric renormalized adjacency D^{-1/2} (A_w + I) D^{-1/2}, with D the
/// degree matrix of A_w + I. Self-loops exist only here, not in the stored
/// edge list.
pub fn normalized_adjacency(graph: &LesionGraph) -> Tensor {
    let n = graph.node_count();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    for &(i, j, w) in &graph.edges {
        a.set(i, j, w);
        a.set(j, i, w);
    }
    let deg_inv_sqrt: Vec<f64> =
        (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum::<f64>().sqrt().recip()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) * deg_inv_sqrt[i] * deg_inv_sqrt[j];
            a.set(i, j, v);
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lesion_at(pos: [f64; 3]) -> Lesion {
        Lesion { position: pos, features: vec![0.0; 4], region: Region::Subcortical }
    }

    fn random_lesions(rng: &mut impl Rng, n: usize) -> Vec<Lesion> {
        (0..n)
            .map(|_| lesion_at([rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]))
            .collect()
    }

    #[test]
    fn single_lesion_has_no_edges() {
        let edges = build_knn_edges(&[lesion_at([0.1, 0.2, 0.3])], &GraphConfig::default()).unwrap();
        assert!(edges.is_empty());
    }

    #[test]
    fn empty_lesion_list_is_an_error() {
        assert!(matches!(
            build_knn_edges(&[], &GraphConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn small_graph_is_complete_when_k_exceeds_n() {
        let lesions = vec![
            lesion_at([0.0, 0.0, 0.0]),
            lesion_at([0.5, 0.0, 0.0]),
            lesion_at([1.0, 0.0, 0.0]),
        ];
        let edges = build_knn_edges(&lesions, &GraphConfig::default()).unwrap();
        assert_eq!(edges.len(), 3);
    }

    /// Exhaustive O(n^2) oracle for union-symmetric kNN.
    fn knn_oracle(lesions: &[Lesion], k: usize) -> Vec<(usize, usize)> {
        let n = lesions.len();
        let mut nearest = vec![vec![]; n];
        for i in 0..n {
            let mut ds: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&lesions[i].position, &lesions[j].position), j))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            nearest[i] = ds.into_iter().take(k).map(|(_, j)| j).collect();
        }
        let mut out = vec![];
        for i in 0..n {
            for j in (i + 1)..n {
                if nearest[i].contains(&j) || nearest[j].contains(&i) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let n = rng.gen_range(2..15);
            let k = rng.gen_range(1..6);
            let lesions = random_lesions(&mut rng, n);
            let cfg = GraphConfig { k, ..GraphConfig::default() };
            let got: Vec<(usize, usize)> =
                build_knn_edges(&lesions, &cfg).unwrap().iter().map(|&(i, j, _)| (i, j)).collect();
            assert_eq!(got, knn_oracle(&lesions, k));
        }
    }

    #[test]
    fn knn_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lesions = random_lesions(&mut rng, 12);
        let cfg = GraphConfig { k: 3, ..GraphConfig::default() };
        let base: std::collections::BTreeSet<(usize, usize)> =
            build_knn_edges(&lesions, &cfg).unwrap().iter().map(|&(i, j, _)| (i, j)).collect();

        // relabel via a fixed permutation, build, then map back
        let perm: Vec<usize> = vec![5, 2, 9, 0, 11, 7, 1, 10, 3, 8, 6, 4];
        let permuted: Vec<Lesion> = perm.iter().map(|&p| lesions[p].clone()).collect();
        let mapped: std::collections::BTreeSet<(usize, usize)> =
            build_knn_edges(&permuted, &cfg)
                .unwrap()
                .iter()
                .map(|&(i, j, _)| {
                    let (a, b) = (perm[i], perm[j]);
                    (a.min(b), a.max(b))
                })
                .collect();
        assert_eq!(base, mapped);
    }

    #[test]
    fn edge_weight_values() {
        let zero = [0.0, 0.0, 0.0];
        assert_eq!(edge_weight(&zero, &zero, 0.01, 0.0), 1.0);
        // distance == tau -> e^-1
        let tau = 0.25;
        let at_tau = [tau, 0.0, 0.0];
        assert!((edge_weight(&zero, &at_tau, tau, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
        // defaults: tau=0.01, d=0.1 -> exp(-100)
        let far = [0.1, 0.0, 0.0];
        let w = edge_weight(&zero, &far, 0.01, 0.0);
        assert!((w - (-100.0f64).exp()).abs() < 1e-50);
        assert!((w - 3.72e-44).abs() < 1e-45);
    }

    #[test]
    fn edge_weight_monotone_in_distance() {
        let zero = [0.0, 0.0, 0.0];
        let mut prev = 1.0;
        for step in 1..20 {
            let d = step as f64 * 0.01;
            let w = edge_weight(&zero, &[d, 0.0, 0.0], 0.1, 0.0);
            assert!(w < prev);
            assert!(w > 0.0 && w <= 1.0);
            prev = w;
        }
    }

    #[test]
    fn distance_floor_clamps() {
        let zero = [0.0, 0.0, 0.0];
        let far = [1.0, 1.0, 1.0];
        assert_eq!(edge_weight(&zero, &far, 0.01, 1e-6), 1e-6);
    }

    #[test]
    fn normalized_adjacency_isolated_node() {
        let g = LesionGraph {
            lesions: vec![lesion_at([0.0, 0.0, 0.0])],
            edges: vec![],
            label: 0,
            patient_id: "p".into(),
        };
        assert_eq!(normalized_adjacency(&g).data(), &[1.0]);
    }

    #[test]
    fn normalized_adjacency_two_nodes_unit_weight() {
        let g = LesionGraph {
            lesions: vec![lesion_at([0.0, 0.0, 0.0]), lesion_at([0.0, 0.0, 0.0])],
            edges: vec![(0, 1, 1.0)],
            label: 0,
            patient_id: "p".into(),
        };
        let a = normalized_adjacency(&g);
        for &v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_adjacency_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let lesions = random_lesions(&mut rng, 6);
        let mut edges = vec![];
        for i in 0..6 {
            for j in (i + 1)..6 {
                if rng.gen::<f64>() < 0.5 {
                    edges.push((i, j, rng.gen::<f64>().max(0.05)));
                }
            }
        }
        let g = LesionGraph { lesions, edges: edges.clone(), label: 0, patient_id: "p".into() };
        let got = normalized_adjacency(&g);

        // dense linear-algebra oracle
        let n = 6;
        let mut aw = vec![vec![0.0; n]; n];
        for i in 0..n {
            aw[i][i] = 1.0;
        }
        for &(i, j, w) in &edges {
            aw[i][j] = w;
            aw[j][i] = w;
        }
        let deg: Vec<f64> = (0..n).map(|i| aw[i].iter().sum()).collect();
        for i in 0..n {
            for j in 0..n {
                let expect = aw[i][j] / (deg[i].sqrt() * deg[j].sqrt());
                assert!((got.get(i, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn normalized_adjacency_spectral_radius_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let n = rng.gen_range(2..12);
            let lesions = random_lesions(&mut rng, n);
            let cfg = GraphConfig { k: 3, tau: 0.5, ..GraphConfig::default() };
            let g = build_graph(lesions, 0, "p".into(), &cfg).unwrap();
            let a = normalized_adjacency(&g);
            // power iteration
            let mut v = vec![1.0 / (n as f64).sqrt(); n];
            let mut lambda = 0.0;
            for _ in 0..500 {
                let mut next = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        next[i] += a.get(i, j) * v[j];
                    }
                }
                lambda = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                if lambda == 0.0 {
                    break;
                }
                for x in &mut next {
                    *x /= lambda;
                }
                v = next;
            }
            assert!(lambda <= 1.0 + 1e-6, "spectral radius {lambda}");
        }
    }
}
