//! Seeded synthetic data: a calibration set with cluster-specific
//! miscalibration, and complete generation traces for exercising the pipeline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::local::Dataset;
use crate::platt::sigmoid;
use crate::trace::GenerationTrace;

/// Per-cluster `(slope, intercept, score_low, score_high)` of the true
/// correctness curve `P(y | s) = sigmoid(slope * s + intercept)`.
pub const HETEROGENEOUS_CLUSTERS: [(f64, f64, f64, f64); 3] = [
    (2.0, -2.5, 0.0, 0.5),
    (6.0, -1.0, 0.25, 0.75),
    (-4.0, 3.0, 0.5, 1.0),
];

/// Embedding centres for the three clusters: an equilateral triangle of side 10.
const TRIANGLE: [[f64; 2]; 3] = [[0.0, 0.0], [10.0, 0.0], [5.0, 8.660_254_037_844_386]];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub embeddings: Vec<Vec<f64>>,
    pub cluster: Vec<usize>,
}

impl SynthSplit {
    pub fn dataset(&self) -> Dataset {
        Dataset {
            scores: self.scores.clone(),
            labels: self.labels.clone(),
            embeddings: self.embeddings.clone(),
        }
    }

    fn draw(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut split = SynthSplit { scores: Vec::new(), labels: Vec::new(), embeddings: Vec::new(), cluster: Vec::new() };
        for i in 0..n {
            let c = i % 3;
            let (w, b, lo, hi) = HETEROGENEOUS_CLUSTERS[c];
            let s = rng.random_range(lo..hi);
            let y = rng.random::<f64>() < sigmoid(w * s + b);
            let e = vec![TRIANGLE[c][0] + noise.sample(rng), TRIANGLE[c][1] + noise.sample(rng)];
            split.scores.push(s);
            split.labels.push(y);
            split.embeddings.push(e);
            split.cluster.push(c);
        }
        split
    }
}

/// Train and test draws from three embedding clusters whose true
/// score-to-correctness curves differ, including one inverted cluster.
pub fn heterogeneous_split(seed: u64, n_train: usize, n_test: usize) -> (SynthSplit, SynthSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = SynthSplit::draw(&mut rng, n_train);
    let test = SynthSplit::draw(&mut rng, n_test);
    (train, test)
}

/// Regular-tetrahedron embedding centres scaled to edge length about 11.
const TETRAHEDRON: [[f64; 3]; 4] = [[4.0, 4.0, 4.0], [4.0, -4.0, -4.0], [-4.0, 4.0, -4.0], [-4.0, -4.0, 4.0]];
const CLUSTER_SKILL: [f64; 4] = [0.3, 0.5, 0.65, 0.4];

fn causal_attention(rng: &mut ChaCha8Rng, t: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|i| {
            let raw: Vec<f64> = (0..=i).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
            row.resize(t, 0.0);
            row
        })
        .collect()
}

/// Complete traces with token probabilities, two causal attention layers,
/// 3-d embeddings, code texts and a `cp` label. Correct revisions tend to
/// have more confident tokens.
pub fn synthetic_traces(seed: u64, n: usize) -> Vec<GenerationTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = rng.random_range(0..4);
        let correct = rng.random::<f64>() < CLUSTER_SKILL[cluster];
        let t = rng.random_range(4..=24);
        let centre = if correct { 2.8 } else { 1.2 };
        let token_probs: Vec<f64> = (0..t)
            .map(|_| sigmoid(centre + 1.5 * noise.sample(&mut rng)))
            .collect();
        let attention = vec![causal_attention(&mut rng, t), causal_attention(&mut rng, t)];
        let embedding: Vec<f64> = TETRAHEDRON[cluster].iter().map(|c| c + noise.sample(&mut rng)).collect();

        let a = rng.random_range(10..100);
        let b = rng.random_range(100..1000);
        let ground_truth = format!("int v{i} = {a};\nreturn v{i};");
        let submitted = if rng.random::<f64>() < 0.02 {
            ground_truth.clone()
        } else {
            format!("int v{i} = {b};\nreturn 0;")
        };
        let generated = if correct {
            if rng.random::<bool>() {
                ground_truth.clone()
            } else {
                format!("int v{i}  =  {a};\n  return v{i};")
            }
        } else {
            match rng.random_range(0..3) {
                0 => submitted.clone(),
                1 => format!("int v{i} = {a};\nreturn 0;"),
                _ => format!("long w{i} = {};\nreturn -1;", rng.random_range(1000..10000)),
            }
        };
        let cp = rng.random::<f64>() < if correct { 0.9 } else { 0.3 };

        traces.push(GenerationTrace {
            id: format!("t{i:05}"),
            submitted_code: submitted,
            ground_truth_code: Some(ground_truth),
            generated_code: generated,
            token_probs,
            attention: Some(attention),
            embedding: Some(embedding),
            labels: BTreeMap::from([("cp".to_string(), cp)]),
        });
    }
    traces
}
