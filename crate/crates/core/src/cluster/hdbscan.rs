use rayon::prelude::*;

use super::{ClusterError, ClusterModel};

/// Smallest merge distance used when converting to density `1 / d`, so that
/// duplicate points keep stabilities finite.
const MIN_DISTANCE: f64 = 1e-150;
/// When the whole data set forms one cluster, points whose density `1 / d`
/// is this many times below the median point's are labelled noise.
const OUTLIER_DENSITY_RATIO: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from each point to its `k`-th nearest other point, with `k`
/// clamped to `n - 1`.
pub fn core_distances(features: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = features.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let k = min_samples.clamp(1, n - 1);
    features
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut d: Vec<f64> = features
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, g)| euclidean(f, g))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

pub fn mutual_reachability(features: &[Vec<f64>], core: &[f64], a: usize, b: usize) -> f64 {
    euclidean(&features[a], &features[b]).max(core[a]).max(core[b])
}

/// Exact minimum spanning tree of the mutual-reachability graph (Prim,
/// quadratic). Ties go to the lowest vertex index.
pub fn minimum_spanning_tree(features: &[Vec<f64>], core: &[f64]) -> Vec<MstEdge> {
    let n = features.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_dist = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = mutual_reachability(features, core, current, j);
            if d < best[j] {
                best[j] = d;
                parent[j] = current;
            }
            if next == usize::MAX || best[j] < next_dist {
                next = j;
                next_dist = best[j];
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge { a: parent[next], b: next, weight: next_dist });
        current = next;
    }
    edges
}

struct Dendrogram {
    /// `(left, right, distance, size)` for internal node `n + i`.
    merges: Vec<(usize, usize, f64, usize)>,
    n: usize,
}

impl Dendrogram {
    fn from_mst(n: usize, mst: &[MstEdge]) -> Self {
        let mut edges = mst.to_vec();
        edges.sort_by(|x, y| x.weight.total_cmp(&y.weight));
        let mut uf_parent: Vec<usize> = (0..2 * n).collect();
        let mut size = vec![1usize; 2 * n];
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut merges = Vec::with_capacity(n.saturating_sub(1));
        for (i, e) in edges.iter().enumerate() {
            let ra = find(&mut uf_parent, e.a);
            let rb = find(&mut uf_parent, e.b);
            let node = n + i;
            let s = size[ra] + size[rb];
            uf_parent[ra] = node;
            uf_parent[rb] = node;
            size[node] = s;
            merges.push((ra, rb, e.weight, s));
        }
        Dendrogram { merges, n }
    }

    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.merges[node - self.n].3
        }
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < self.n {
                out.push(x);
            } else {
                let (l, r, _, _) = self.merges[x - self.n];
                stack.push(r);
                stack.push(l);
            }
        }
    }
}

struct CondensedCluster {
    parent: Option<usize>,
    birth: f64,
    size: usize,
    children: Vec<usize>,
}

struct CondensedTree {
    clusters: Vec<CondensedCluster>,
    /// Cluster each point falls out of, and the density at which it does.
    point_cluster: Vec<usize>,
    point_lambda: Vec<f64>,
}

fn condense(dendrogram: &Dendrogram, min_cluster_size: usize) -> CondensedTree {
    let n = dendrogram.n;
    let mut clusters = vec![CondensedCluster { parent: None, birth: 0.0, size: n, children: Vec::new() }];
    let mut point_cluster = vec![0usize; n];
    let mut point_lambda = vec![0.0; n];
    let mut leaves = Vec::new();
    let mut stack = vec![(2 * n - 2, 0usize)];
    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            // only reachable when a single point is the whole tree
            point_cluster[node] = cluster;
            continue;
        }
        let (l, r, d, _) = dendrogram.merges[node - n];
        let lambda = 1.0 / d.max(MIN_DISTANCE);
        let (sl, sr) = (dendrogram.size(l), dendrogram.size(r));
        let mut fall_out = |child: usize, out: &mut Vec<usize>| {
            out.clear();
            dendrogram.leaves(child, out);
            for &p in out.iter() {
                point_cluster[p] = cluster;
                point_lambda[p] = lambda;
            }
        };
        match (sl >= min_cluster_size, sr >= min_cluster_size) {
            (true, true) => {
                let mut ids = [0usize; 2];
                for (slot, size) in ids.iter_mut().zip([sl, sr]) {
                    *slot = clusters.len();
                    clusters.push(CondensedCluster { parent: Some(cluster), birth: lambda, size, children: Vec::new() });
                    clusters[cluster].children.push(*slot);
                }
                stack.push((r, ids[1]));
                stack.push((l, ids[0]));
            }
            (true, false) => {
                fall_out(r, &mut leaves);
                stack.push((l, cluster));
            }
            (false, true) => {
                fall_out(l, &mut leaves);
                stack.push((r, cluster));
            }
            (false, false) => {
                fall_out(l, &mut leaves);
                fall_out(r, &mut leaves);
            }
        }
    }
    CondensedTree { clusters, point_cluster, point_lambda }
}

/// Excess-of-mass selection over the condensed tree; the root is eligible.
fn select_clusters(tree: &CondensedTree) -> Vec<bool> {
    let k = tree.clusters.len();
    let mut stability: Vec<f64> = tree
        .clusters
        .iter()
        .map(|c| c.children.iter().map(|&ch| (tree.clusters[ch].birth - c.birth) * tree.clusters[ch].size as f64).sum())
        .collect();
    for (p, &c) in tree.point_cluster.iter().enumerate() {
        stability[c] += tree.point_lambda[p] - tree.clusters[c].birth;
    }
    let mut selected = vec![true; k];
    for c in (0..k).rev() {
        let children = &tree.clusters[c].children;
        if children.is_empty() {
            continue;
        }
        let subtree: f64 = children.iter().map(|&ch| stability[ch]).sum();
        if subtree > stability[c] {
            selected[c] = false;
            stability[c] = subtree;
        } else {
            let mut stack = children.clone();
            while let Some(x) = stack.pop() {
                selected[x] = false;
                stack.extend(&tree.clusters[x].children);
            }
        }
    }
    selected
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Labels points from a precomputed mutual-reachability MST.
pub fn labels_from_mst(n: usize, mst: &[MstEdge], min_cluster_size: usize) -> Vec<i64> {
    if n < 2 {
        return vec![-1; n];
    }
    let dendrogram = Dendrogram::from_mst(n, mst);
    let tree = condense(&dendrogram, min_cluster_size);
    let selected = select_clusters(&tree);

    let mut raw: Vec<Option<usize>> = (0..n)
        .map(|p| {
            let mut c = tree.point_cluster[p];
            loop {
                if selected[c] {
                    return Some(c);
                }
                c = tree.clusters[c].parent?;
            }
        })
        .collect();

    if selected[0] {
        let mut sorted = tree.point_lambda.clone();
        sorted.sort_by(f64::total_cmp);
        let fence = quantile(&sorted, 0.5) / OUTLIER_DENSITY_RATIO;
        let kept = tree.point_lambda.iter().filter(|&&l| l >= fence).count();
        if kept >= min_cluster_size {
            for (p, &l) in tree.point_lambda.iter().enumerate() {
                if l < fence {
                    raw[p] = None;
                }
            }
        }
    }

    // dense labels ordered by each cluster's smallest member
    let mut mapping: Vec<Option<i64>> = vec![None; tree.clusters.len()];
    let mut next = 0;
    raw.iter()
        .map(|c| match c {
            None => -1,
            Some(c) => *mapping[*c].get_or_insert_with(|| {
                next += 1;
                next - 1
            }),
        })
        .collect()
}

/// Density-based clustering with excess-of-mass selection.
pub fn hdbscan(features: &[Vec<f64>], min_cluster_size: usize, min_samples: usize) -> Result<ClusterModel, ClusterError> {
    if min_cluster_size < 2 {
        return Err(ClusterError::InvalidParameter("min_cluster_size must be at least 2"));
    }
    if min_samples < 1 {
        return Err(ClusterError::InvalidParameter("min_samples must be at least 1"));
    }
    if features.len() < min_cluster_size {
        return Err(ClusterError::TooFewPoints { found: features.len(), required: min_cluster_size });
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(ClusterError::DimensionMismatch { expected: dim, found: bad.len() });
    }
    let core = core_distances(features, min_samples);
    let mst = minimum_spanning_tree(features, &core);
    let labels = labels_from_mst(features.len(), &mst, min_cluster_size);
    Ok(ClusterModel::new(min_cluster_size, min_samples, features.to_vec(), labels))
}
