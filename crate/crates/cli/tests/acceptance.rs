//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::panic;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use num_bigint::{BigInt, Sign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use recal::cluster::{core_distances, hdbscan, minimum_spanning_tree, mutual_reachability, MstEdge};
use recal::confidence::{attention_weights, rollout, score_trace, ScoreKind, SquareMatrix};
use recal::correctness::{edit_progress, levenshtein, CorrectnessError};
use recal::kneedle::{kneedle_concave_increasing, kneedle_convex_decreasing};
use recal::local::{fit_local, grid_search, BackoffPolicy, Grid, LocalHyper};
use recal::metrics::{bin_coverage, bin_index, ece, reliability_table};
use recal::platt::{fit_global, fit_global_from, objective, sigmoid};
use recal::stats::{kendall_tau_b, kendall_tau_b_pairs, median_skewness, sample_skewness, wasserstein1};
use recal::synth::heterogeneous_split;
use recal::trace::GenerationTrace;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

const CRITERIA: [Criterion; 12] = [
    Criterion { name: "confidence scores match exact references", budget: secs(5), run: c01_formula_oracles },
    Criterion { name: "kneedle matches brute-force argmax", budget: secs(5), run: c02_kneedle },
    Criterion { name: "attention rollout", budget: None, run: c03_rollout },
    Criterion { name: "correctness metrics", budget: None, run: c04_correctness },
    Criterion { name: "descriptive statistics", budget: None, run: c05_stats },
    Criterion { name: "global Platt scaling", budget: secs(10), run: c06_platt },
    Criterion { name: "density clustering", budget: None, run: c07_clustering },
    Criterion { name: "local beats global on heterogeneous data", budget: secs(60), run: c08_local_vs_global },
    Criterion { name: "single-bin collapse handling", budget: None, run: c09_single_bin },
    Criterion { name: "ECE sanity and bin boundaries", budget: None, run: c10_ece_sanity },
    Criterion { name: "grid search", budget: None, run: c11_grid_search },
    Criterion { name: "end-to-end determinism", budget: None, run: c12_determinism },
];

fn main() {
    let mut failed = 0;
    for (i, c) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(detail), Some(budget)) if elapsed > budget => Err(format!(
                "{detail}; took {:.2}s, budget {}s",
                elapsed.as_secs_f64(),
                budget.as_secs()
            )),
            (r, _) => r,
        };
        let (status, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {:>2}. {}: {detail} [{:.2}s]", i + 1, c.name, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

/// Exact value `m * 2^e`. Every finite `f64` is one, and sums and products
/// stay dyadic, so the oracles below never round.
#[derive(Debug, Clone)]
struct Dyadic {
    m: BigInt,
    e: i64,
}

impl Dyadic {
    fn of(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite value {x}");
        let bits = x.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (m, e) = if exp == 0 { (frac, -1074) } else { (frac | 1 << 52, exp - 1075) };
        let m = BigInt::from(m);
        Dyadic { m: if x.is_sign_negative() { -m } else { m }, e }
    }

    fn int(k: i64) -> Self {
        Dyadic { m: BigInt::from(k), e: 0 }
    }

    fn is_zero(&self) -> bool {
        self.m.sign() == Sign::NoSign
    }

    fn abs(&self) -> Self {
        Dyadic { m: self.m.magnitude().clone().into(), e: self.e }
    }

    fn signum(&self) -> Self {
        Dyadic::int(match self.m.sign() {
            Sign::Minus => -1,
            Sign::NoSign => 0,
            Sign::Plus => 1,
        })
    }

    fn pow(&self, k: usize) -> Self {
        (0..k).fold(Dyadic::int(1), |acc, _| &acc * self)
    }

    fn aligned(&self, other: &Self) -> (BigInt, BigInt, i64) {
        let e = self.e.min(other.e);
        (&self.m << (self.e - e) as usize, &other.m << (other.e - e) as usize, e)
    }
}

impl std::ops::Add for &Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: &Dyadic) -> Dyadic {
        let (a, b, e) = self.aligned(rhs);
        Dyadic { m: a + b, e }
    }
}

impl std::ops::Sub for &Dyadic {
    type Output = Dyadic;
    fn sub(self, rhs: &Dyadic) -> Dyadic {
        let (a, b, e) = self.aligned(rhs);
        Dyadic { m: a - b, e }
    }
}

impl std::ops::Mul for &Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: &Dyadic) -> Dyadic {
        Dyadic { m: &self.m * &rhs.m, e: self.e + rhs.e }
    }
}

impl PartialEq for Dyadic {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Dyadic {}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b, _) = self.aligned(other);
        a.cmp(&b)
    }
}

fn exact_sum<'a>(values: impl IntoIterator<Item = &'a Dyadic>) -> Dyadic {
    values.into_iter().fold(Dyadic::int(0), |acc, v| &acc + v)
}

/// `|got - exact| <= tol * |exact|`, evaluated exactly.
fn rel_close(got: f64, exact: &Dyadic, tol: f64) -> bool {
    (&Dyadic::of(got) - exact).abs() <= &Dyadic::of(tol) * &exact.abs()
}

/// Relative check of `got` against the mean `sum / count`, scaled by `count`.
fn mean_close(got: f64, sum: &Dyadic, count: usize, tol: f64) -> bool {
    let scaled = &Dyadic::of(got) * &Dyadic::int(count as i64);
    (&scaled - sum).abs() <= &Dyadic::of(tol) * &sum.abs()
}

/// Brute-force knee in exact arithmetic: first index of the largest
/// normalized deviation from the diagonal, as a 1-based count. Deviations
/// are compared after scaling by `(n - 1) * (max - min)`.
fn exact_knee(y: &[Dyadic], concave_increasing: bool) -> usize {
    let n = y.len();
    if n <= 2 {
        return 1;
    }
    let lo = y.iter().min().unwrap();
    let hi = y.iter().max().unwrap();
    if lo == hi {
        return 1;
    }
    let range = hi - lo;
    let span = Dyadic::int(n as i64 - 1);
    let mut best: Option<(usize, Dyadic)> = None;
    for (i, v) in y.iter().enumerate() {
        let rise = &(v - lo) * &span;
        let d = if concave_increasing {
            &rise - &(&Dyadic::int(i as i64) * &range)
        } else {
            &(&Dyadic::int((n - 1 - i) as i64) * &range) - &rise
        };
        if best.as_ref().is_none_or(|(_, b)| d > *b) {
            best = Some((i, d));
        }
    }
    best.unwrap().0 + 1
}

fn random_probs(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let style = rng.random_range(0..4);
    let mut p: Vec<f64> = (0..t)
        .map(|_| match style {
            0 => rng.random::<f64>(),
            1 => 1.0 - 0.4 * rng.random::<f64>().powi(3),
            2 => {
                if rng.random_bool(0.15) {
                    rng.random_range(0.01..0.5)
                } else {
                    rng.random_range(0.85..1.0)
                }
            }
            _ => rng.random_range(1..=20) as f64 / 20.0,
        })
        .collect();
    if rng.random_bool(0.02) {
        let i = rng.random_range(0..t);
        p[i] = 0.0;
    }
    p
}

/// Causal layer whose rows are random compositions of 256, so every entry is
/// a multiple of 1/256 and each row sums to exactly one.
fn dyadic_layer(rng: &mut ChaCha8Rng, t: usize) -> Vec<Vec<i64>> {
    (0..t)
        .map(|i| {
            let mut cuts: Vec<i64> = (0..i).map(|_| rng.random_range(0..=256)).collect();
            cuts.sort_unstable();
            let mut row = vec![0; t];
            let mut prev = 0;
            for (j, c) in cuts.iter().enumerate() {
                row[j] = c - prev;
                prev = *c;
            }
            row[i] = 256 - prev;
            row
        })
        .collect()
}

fn trace_with(id: String, probs: Vec<f64>, attention: Option<Vec<Vec<Vec<f64>>>>) -> GenerationTrace {
    GenerationTrace {
        id,
        submitted_code: String::new(),
        ground_truth_code: None,
        generated_code: String::new(),
        token_probs: probs,
        attention,
        embedding: None,
        labels: BTreeMap::new(),
    }
}

fn sorted_f64(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn recal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recal"))
        .args(args)
        .env_remove("RECAL_LOG")
        .output()
        .expect("cannot launch recal")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn write_jsonl(path: &Path, records: &[Value]) {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

// ------------------------------------------------------------ criterion 1

fn c01_formula_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tol = 1e-12;
    let mut max_t = 0;
    for case in 0..1000 {
        let t = rng.random_range(1..=64);
        max_t = max_t.max(t);
        let probs = random_probs(&mut rng, t);
        let n_layers = rng.random_range(1..=3);
        let layers: Vec<Vec<Vec<i64>>> = (0..n_layers).map(|_| dyadic_layer(&mut rng, t)).collect();
        let attention: Vec<Vec<Vec<f64>>> = layers
            .iter()
            .map(|l| l.iter().map(|r| r.iter().map(|&c| c as f64 / 256.0).collect()).collect())
            .collect();
        let trace = trace_with(format!("c{case}"), probs.clone(), Some(attention));
        trace.validate().map_err(|e| e.to_string())?;

        let got = |kind| score_trace(&trace, kind).map_err(|e| format!("case {case}: {e}"));
        let (sl, avg, min, low_k, attn) = (
            got(ScoreKind::SlNorm)?,
            got(ScoreKind::Avg)?,
            got(ScoreKind::Min)?,
            got(ScoreKind::LowK)?,
            got(ScoreKind::AttnW)?,
        );

        let p: Vec<Dyadic> = probs.iter().map(|&x| Dyadic::of(x)).collect();

        ensure!(mean_close(avg, &exact_sum(&p), t, tol), "case {case}: avg {avg} vs exact");

        let exact_min = p.iter().min().unwrap();
        ensure!(rel_close(min, exact_min, tol), "case {case}: min {min} vs exact");

        // geometric mean g: check (g(1-tol))^T <= prod p <= (g(1+tol))^T
        let product = p.iter().fold(Dyadic::int(1), |acc, v| &acc * v);
        if product.is_zero() {
            ensure!(sl == 0.0, "case {case}: sl_norm {sl} for a zero-probability token");
        } else {
            let g = Dyadic::of(sl);
            let lo = (&g * &(&Dyadic::int(1) - &Dyadic::of(tol))).pow(t);
            let hi = (&g * &(&Dyadic::int(1) + &Dyadic::of(tol))).pow(t);
            ensure!(lo <= product && product <= hi, "case {case}: sl_norm {sl} outside tolerance");
        }

        let mut ascending = p.clone();
        ascending.sort();
        let k = exact_knee(&ascending, true);
        ensure!(
            mean_close(low_k, &exact_sum(&ascending[..k]), k, tol),
            "case {case}: low_k {low_k} vs exact (K = {k})"
        );

        // rollout over integers: residual-mixed layers are (c + 256 [i = j]) / 512
        let mixed: Vec<Vec<Vec<i128>>> = layers
            .iter()
            .map(|l| {
                l.iter()
                    .enumerate()
                    .map(|(i, r)| r.iter().enumerate().map(|(j, &c)| c as i128 + if i == j { 256 } else { 0 }).collect())
                    .collect()
            })
            .collect();
        for l in &mixed {
            ensure!(l.iter().all(|r| r.iter().sum::<i128>() == 512), "case {case}: mixed row does not sum to 1");
        }
        let mut acc = mixed[0].clone();
        for l in &mixed[1..] {
            let mut next = vec![vec![0i128; t]; t];
            for i in 0..t {
                for j in 0..=i {
                    next[i][j] = (j..=i).map(|m| l[i][m] * acc[m][j]).sum();
                }
            }
            acc = next;
        }
        let scale = 512i128.pow(n_layers as u32);
        let weights: Vec<Dyadic> = (0..t)
            .map(|c| Dyadic { m: BigInt::from(scale + (c..t).map(|r| acc[r][c]).sum::<i128>()), e: -9 * n_layers as i64 })
            .collect();
        let u: Vec<Dyadic> = (0..t).map(|i| &weights[i] * &(&Dyadic::int(1) - &p[i])).collect();
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| u[b].cmp(&u[a]));
        let ranked: Vec<Dyadic> = order.iter().map(|&i| u[i].clone()).collect();
        let k = exact_knee(&ranked, false);
        ensure!(
            mean_close(attn, &exact_sum(order[..k].iter().map(|&i| &p[i])), k, tol),
            "case {case}: attn_w {attn} vs exact (K = {k})"
        );

        ensure!(min <= low_k && low_k <= avg, "case {case}: min {min} <= low_k {low_k} <= avg {avg} violated");
        ensure!(sl <= avg, "case {case}: sl_norm {sl} > avg {avg}");
    }
    Ok(format!("1000 traces, T up to {max_t}, 5 scores within {tol:e}; orderings hold"))
}

// ------------------------------------------------------------ criterion 2

fn monotone_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = match rng.random_range(0..4) {
        0 => (0..n).map(|_| rng.random::<f64>()).collect(),
        1 => {
            let c = rng.random_range(1.0..12.0);
            (0..n).map(|i| 1.0 - (-c * i as f64 / n as f64).exp() + 0.01 * rng.random::<f64>()).collect()
        }
        2 => (0..n).map(|_| rng.random_range(0..6) as f64).collect(),
        _ => (0..n).map(|_| rng.random::<f64>().powi(4) * 100.0 - 50.0).collect(),
    };
    sorted_f64(v)
}

fn c02_kneedle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10_000 {
        let n = rng.random_range(1..=60);
        let ascending = monotone_values(&mut rng, n);
        let descending: Vec<f64> = ascending.iter().rev().copied().collect();
        let up: Vec<Dyadic> = ascending.iter().map(|&x| Dyadic::of(x)).collect();
        let down: Vec<Dyadic> = descending.iter().map(|&x| Dyadic::of(x)).collect();
        let (a, b) = (kneedle_concave_increasing(&ascending).k, exact_knee(&up, true));
        ensure!(a == b, "case {case}: concave-increasing knee {a}, brute force {b}");
        let (a, b) = (kneedle_convex_decreasing(&descending).k, exact_knee(&down, false));
        ensure!(a == b, "case {case}: convex-decreasing knee {a}, brute force {b}");
    }

    // power-of-two scales and integer shifts of grid values are exact in f64
    let mut transforms = 0;
    for case in 0..2000 {
        let n = rng.random_range(1..=60);
        let y = sorted_f64((0..n).map(|_| rng.random_range(0..=1024) as f64 / 1024.0).collect());
        let a = 2f64.powi(rng.random_range(-4..=4));
        let b = rng.random_range(-64..=64) as f64;
        let z: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let (ky, kz) = (kneedle_concave_increasing(&y), kneedle_concave_increasing(&z));
        ensure!(ky == kz, "case {case}: concave knee changed under {a}*y + {b}: {ky:?} vs {kz:?}");
        let yd: Vec<f64> = y.iter().rev().copied().collect();
        let zd: Vec<f64> = z.iter().rev().copied().collect();
        let (ky, kz) = (kneedle_convex_decreasing(&yd), kneedle_convex_decreasing(&zd));
        ensure!(ky == kz, "case {case}: convex knee changed under {a}*y + {b}: {ky:?} vs {kz:?}");
        transforms += 1;
    }
    Ok(format!("10000 sequences x 2 orientations agree; {transforms} affine transforms leave knee and deviation bit-identical"))
}

// ------------------------------------------------------------ criterion 3

fn c03_rollout() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_row = 0.0f64;
    let mut min_weight = f64::INFINITY;
    for case in 0..500 {
        let t = rng.random_range(1..=48);
        let n_layers = rng.random_range(1..=6);
        let layers: Vec<Vec<Vec<f64>>> = (0..n_layers)
            .map(|_| {
                (0..t)
                    .map(|i| {
                        let mut row: Vec<f64> = (0..t)
                            .map(|j| if j <= i && rng.random_bool(0.8) { rng.random::<f64>() } else { 0.0 })
                            .collect();
                        row[i] += 1e-3;
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= s);
                        row
                    })
                    .collect()
            })
            .collect();
        let r = rollout(&layers).map_err(|e| format!("case {case}: {e}"))?;
        for i in 0..t {
            let row = r.row(i);
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            ensure!(row[i + 1..].iter().all(|&v| v == 0.0), "case {case}: row {i} has mass above the diagonal");
        }
        let w = attention_weights(&r);
        ensure!(w.len() == t, "case {case}: {} weights for {t} tokens", w.len());
        min_weight = w.iter().copied().fold(min_weight, f64::min);
    }
    ensure!(worst_row <= 1e-6, "row sum error {worst_row:e} exceeds 1e-6");
    ensure!(min_weight >= 1.0, "weight {min_weight} below 1");

    for t in 1..=16 {
        let identity: Vec<Vec<f64>> = (0..t).map(|i| (0..t).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        for n_layers in 1..=4 {
            let r = rollout(&vec![identity.clone(); n_layers]).map_err(|e| e.to_string())?;
            ensure!(r == SquareMatrix::identity(t), "identity stack T={t} L={n_layers} is not a fixed point");
        }
    }
    Ok(format!("500 stacks: max row-sum error {worst_row:.1e}, causal, min w_t {min_weight:.3}; identity fixed point exact"))
}

// ------------------------------------------------------------ criterion 4

fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn c04_correctness() -> Check {
    const ALPHABET: &[u8] = b"abc";
    const MAX_LEN: usize = 6;
    let strings = all_strings(ALPHABET, MAX_LEN);
    let index: HashMap<&[u8], usize> = strings.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();

    // single-edit neighbours; an optimal path never needs a string longer
    // than both endpoints (deletions first, insertions last)
    let neighbours: Vec<Vec<usize>> = strings
        .iter()
        .map(|s| {
            let mut out = Vec::new();
            for i in 0..s.len() {
                let mut d = s.clone();
                d.remove(i);
                out.push(index[d.as_slice()]);
                for &c in ALPHABET {
                    if c != s[i] {
                        let mut r = s.clone();
                        r[i] = c;
                        out.push(index[r.as_slice()]);
                    }
                }
            }
            if s.len() < MAX_LEN {
                for i in 0..=s.len() {
                    for &c in ALPHABET {
                        let mut r = s.clone();
                        r.insert(i, c);
                        out.push(index[r.as_slice()]);
                    }
                }
            }
            out
        })
        .collect();

    let texts: Vec<String> = strings.iter().map(|s| String::from_utf8(s.clone()).unwrap()).collect();
    let mut pairs = 0usize;
    for (src, a) in texts.iter().enumerate() {
        let mut dist = vec![u8::MAX; strings.len()];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            for &w in &neighbours[v] {
                if dist[w] == u8::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        for (dst, b) in texts.iter().enumerate() {
            let got = levenshtein(a, b);
            ensure!(got == dist[dst] as usize, "levenshtein({a:?}, {b:?}) = {got}, shortest edit path {}", dist[dst]);
            pairs += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random_text = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(0..=12);
        (0..len).map(|_| ['a', 'b', 'c', ' ', '\n', '{', '}'][rng.random_range(0..7)]).collect()
    };
    let mut triples = 0;
    while triples < 1000 {
        let submitted = random_text(&mut rng);
        let truth = random_text(&mut rng);
        if submitted == truth {
            ensure!(
                edit_progress(&submitted, &truth, &truth) == Err(CorrectnessError::SubmittedEqualsTruth),
                "EP defined although submitted equals truth"
            );
            continue;
        }
        let full = edit_progress(&submitted, &truth, &truth).map_err(|e| e.to_string())?;
        let none = edit_progress(&submitted, &submitted, &truth).map_err(|e| e.to_string())?;
        ensure!(full == 1.0, "EP({submitted:?}, gt, gt) = {full}");
        ensure!(none == 0.0, "EP({submitted:?}, sub, gt) = {none}");
        triples += 1;
    }
    Ok(format!("{pairs} string pairs match breadth-first edit distances; EP identities hold on {triples} triples"))
}

// ------------------------------------------------------------ criterion 5

fn count_vectors(max_total: usize) -> Vec<[usize; 5]> {
    let mut out = Vec::new();
    for a in 0..=max_total {
        for b in 0..=max_total - a {
            for c in 0..=max_total - a - b {
                for d in 0..=max_total - a - b - c {
                    for e in 0..=max_total - a - b - c - d {
                        if a + b + c + d + e > 0 {
                            out.push([a, b, c, d, e]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Optimal-transport value by exhaustive search over the extreme points of
/// the dual: 1-Lipschitz potentials on the grid step by +-1/4 between
/// neighbours, so all 16 sign patterns are tried.
fn w1_dual_bruteforce(a: &[usize; 5], b: &[usize; 5]) -> f64 {
    let m: i64 = a.iter().sum::<usize>() as i64;
    let n: i64 = b.iter().sum::<usize>() as i64;
    let mut best = i64::MIN;
    for signs in 0..16u32 {
        let mut f = 0i64;
        let mut total = 0i64;
        for i in 0..5 {
            if i > 0 {
                f += if signs >> (i - 1) & 1 == 1 { 1 } else { -1 };
            }
            total += f * (a[i] as i64 * n - b[i] as i64 * m);
        }
        best = best.max(total);
    }
    best as f64 / (4 * m * n) as f64
}

fn tau_b_bruteforce(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as i64;
    let (mut nc, mut nd, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].partial_cmp(&x[j]).unwrap();
            let dy = y[i].partial_cmp(&y[j]).unwrap();
            use std::cmp::Ordering::Equal;
            if dx == Equal {
                tx += 1;
            }
            if dy == Equal {
                ty += 1;
            }
            if dx != Equal && dy != Equal {
                if dx == dy {
                    nc += 1;
                } else {
                    nd += 1;
                }
            }
        }
    }
    let n0 = n * (n - 1) / 2;
    if tx == n0 || ty == n0 {
        return None;
    }
    Some((nc - nd) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
}

fn c05_stats() -> Check {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let multisets = count_vectors(6);
    let expand = |c: &[usize; 5]| -> Vec<f64> { (0..5).flat_map(|i| std::iter::repeat_n(grid[i], c[i])).collect() };
    let expanded: Vec<Vec<f64>> = multisets.iter().map(expand).collect();
    let mut worst_w1 = 0.0f64;
    for (i, a) in multisets.iter().enumerate() {
        for (j, b) in multisets.iter().enumerate() {
            let got = wasserstein1(&expanded[i], &expanded[j]).map_err(|e| e.to_string())?;
            let want = w1_dual_bruteforce(a, b);
            worst_w1 = worst_w1.max((got - want).abs());
            ensure!((got - want).abs() <= 1e-9, "W1({:?}, {:?}) = {got}, brute force {want}", expanded[i], expanded[j]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tau_cases = 0;
    while tau_cases < 300 {
        let n = if tau_cases % 10 == 0 { 500 } else { rng.random_range(2..=500) };
        let levels = rng.random_range(1..=30);
        let x: Vec<f64> = (0..n)
            .map(|_| if levels == 30 { rng.random::<f64>() } else { rng.random_range(0..levels) as f64 / 4.0 })
            .collect();
        let binary = rng.random_bool(0.5);
        let y: Vec<f64> = (0..n)
            .map(|_| if binary { f64::from(u8::from(rng.random_bool(0.6))) } else { rng.random_range(0..7) as f64 })
            .collect();
        let got = if binary {
            let labels: Vec<bool> = y.iter().map(|&v| v == 1.0).collect();
            kendall_tau_b(&x, &labels).ok()
        } else {
            kendall_tau_b_pairs(&x, &y).ok()
        };
        let want = tau_b_bruteforce(&x, &y);
        ensure!(
            got.map(f64::to_bits) == want.map(f64::to_bits),
            "tau_b mismatch at n={n}: {got:?} vs brute force {want:?}"
        );
        tau_cases += 1;
    }

    let tol = 1e-12;
    let mut sequences = Vec::new();
    for case in 0..1000 {
        let t = rng.random_range(1..=64);
        let v = random_probs(&mut rng, t);
        let got = sample_skewness(&v).map_err(|e| e.to_string())?;
        // with D_i = T p_i - sum p: skewness = sqrt(T) B / A^(3/2), where
        // A = sum D_i^2 and B = sum D_i^3
        let p: Vec<Dyadic> = v.iter().map(|&x| Dyadic::of(x)).collect();
        let total = exact_sum(&p);
        let tn = Dyadic::int(t as i64);
        let d: Vec<Dyadic> = p.iter().map(|x| &(&tn * x) - &total).collect();
        let a = exact_sum(&d.iter().map(|x| x.pow(2)).collect::<Vec<_>>());
        let b = exact_sum(&d.iter().map(|x| x.pow(3)).collect::<Vec<_>>());
        if a.is_zero() || b.is_zero() {
            ensure!(got.abs() <= tol, "case {case}: skewness {got}, exact 0");
        } else {
            // s in [g - tol, g + tol] compared through the increasing map x |x|:
            // s |s| = sign(B) T B^2 / A^3
            let signed_square = |x: &Dyadic| x * &x.abs();
            let target = &(&b.signum() * &tn) * &b.pow(2);
            let a3 = a.pow(3);
            let lower = &signed_square(&(&Dyadic::of(got) - &Dyadic::of(tol))) * &a3;
            let upper = &signed_square(&(&Dyadic::of(got) + &Dyadic::of(tol))) * &a3;
            ensure!(lower <= target && target <= upper, "case {case}: skewness {got} is not within {tol:e} of the exact value");
        }
        sequences.push((got, v));
    }
    let median = median_skewness(sequences.iter().map(|(_, v)| v.as_slice())).map_err(|e| e.to_string())?;
    let skews = sorted_f64(sequences.iter().map(|(g, _)| *g).collect());
    ensure!(median == skews[(skews.len() - 1) / 2], "median skewness {median} is not the lower median");

    Ok(format!(
        "W1 on {} multiset pairs (max error {worst_w1:.1e}); tau_b bit-exact on {tau_cases} cases; skewness on 1000 sequences",
        multisets.len() * multisets.len()
    ))
}

// ------------------------------------------------------------ criterion 6

fn logistic_data(rng: &mut ChaCha8Rng, n: usize, w: f64, beta: f64) -> (Vec<f64>, Vec<bool>) {
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let labels = scores.iter().map(|&s| rng.random::<f64>() < sigmoid(w * s + beta)).collect();
    (scores, labels)
}

fn c06_platt() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (scores, labels) = logistic_data(&mut rng, 300, 4.0, -2.0);
    let mut worst_grad = 0.0f64;
    for point in 0..100 {
        let w = rng.random_range(-8.0..8.0);
        let beta = rng.random_range(-5.0..5.0);
        let l2 = [0.0, 0.01, 1.0, 10.0][point % 4];
        let (_, g) = objective(&scores, &labels, l2, w, beta);
        let h = 1e-5;
        let f = |w, b| objective(&scores, &labels, l2, w, b).0;
        let fd = [(f(w + h, beta) - f(w - h, beta)) / (2.0 * h), (f(w, beta + h) - f(w, beta - h)) / (2.0 * h)];
        let err = ((fd[0] - g[0]).powi(2) + (fd[1] - g[1]).powi(2)).sqrt() / (g[0].powi(2) + g[1].powi(2)).sqrt();
        worst_grad = worst_grad.max(err);
        ensure!(err <= 1e-6, "point {point} (w={w}, beta={beta}, l2={l2}): relative gradient error {err:e}");
    }

    let (scores, labels) = logistic_data(&mut rng, 1000, 3.0, -1.0);
    let mut fits = vec![fit_global(&scores, &labels, 1.0).map_err(|e| e.to_string())?];
    for _ in 0..10 {
        let init = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        fits.push(fit_global_from(&scores, &labels, 1.0, init).map_err(|e| e.to_string())?);
    }
    let mut spread = 0.0f64;
    for a in &fits {
        for b in &fits {
            spread = spread.max((a.w - b.w).abs()).max((a.beta - b.beta).abs());
        }
    }
    ensure!(spread <= 1e-5, "refits from random initializations differ by {spread:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (scores, labels) = logistic_data(&mut rng, 2000, 6.0, -3.0);
    let cal = fit_global(&scores, &labels, 1e-6).map_err(|e| e.to_string())?;
    ensure!(
        (cal.w - 6.0).abs() <= 0.3 && (cal.beta + 3.0).abs() <= 0.3,
        "recovered w = {:.3}, beta = {:.3} (target 6, -3)",
        cal.w,
        cal.beta
    );
    Ok(format!(
        "max gradient error {worst_grad:.1e}; 11 fits agree within {spread:.1e}; recovered w = {:.3}, beta = {:.3}",
        cal.w, cal.beta
    ))
}

// ------------------------------------------------------------ criterion 7

fn blob(rng: &mut ChaCha8Rng, center: [f64; 2], sd: f64, count: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, sd).unwrap();
    (0..count).map(|_| vec![center[0] + normal.sample(rng), center[1] + normal.sample(rng)]).collect()
}

fn kruskal_weights(features: &[Vec<f64>], core: &[f64]) -> Vec<f64> {
    let n = features.len();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            edges.push((mutual_reachability(features, core, a, b), a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut out = Vec::new();
    for (w, a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            out.push(w);
        }
    }
    out
}

fn c07_clustering() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut two = blob(&mut rng, [0.0, 0.0], 0.5, 60);
    two.extend(blob(&mut rng, [10.0, 0.0], 0.5, 60));
    let model = hdbscan(&two, 50, 5).map_err(|e| e.to_string())?;
    let noise = model.labels.iter().filter(|&&l| l < 0).count();
    ensure!(model.n_clusters == 2 && noise == 0, "two blobs: {} clusters, {noise} noise", model.n_clusters);
    ensure!(
        model.labels[..60].iter().all(|&l| l == model.labels[0]) && model.labels[60..].iter().all(|&l| l == model.labels[60]),
        "two blobs are not separated"
    );

    let mut one = blob(&mut rng, [0.0, 0.0], 0.5, 120);
    for k in 0..5 {
        let angle = k as f64 * std::f64::consts::TAU / 5.0;
        one.push(vec![50.0 * angle.cos(), 50.0 * angle.sin()]);
    }
    let model = hdbscan(&one, 50, 5).map_err(|e| e.to_string())?;
    let noise: Vec<usize> = (0..one.len()).filter(|&i| model.labels[i] < 0).collect();
    ensure!(
        model.n_clusters == 1 && noise == (120..125).collect::<Vec<_>>(),
        "blob with outliers: {} clusters, noise at {noise:?}",
        model.n_clusters
    );

    let mut checked = 0;
    for case in 0..40 {
        let n = if case == 0 { 200 } else { rng.random_range(2..=200) };
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let ms = rng.random_range(1..=20);
        let core = core_distances(&points, ms);
        let mst = minimum_spanning_tree(&points, &core);
        ensure!(mst.len() == n - 1, "case {case}: MST has {} edges for {n} points", mst.len());
        let prim = sorted_f64(mst.iter().map(|e: &MstEdge| e.weight).collect());
        let kruskal = sorted_f64(kruskal_weights(&points, &core));
        ensure!(prim == kruskal, "case {case}: MST edge weights differ from Kruskal (n={n}, min_samples={ms})");
        checked += 1;
    }

    let reference = hdbscan(&one, 50, 5).map_err(|e| e.to_string())?;
    for threads in [1, 2, 3, 8, 1] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let again = pool.install(|| hdbscan(&one, 50, 5)).map_err(|e| e.to_string())?;
        ensure!(again == reference, "rerun with {threads} threads differs");
        let core = pool.install(|| core_distances(&one, 5));
        let mst = pool.install(|| minimum_spanning_tree(&one, &core));
        ensure!(mst == minimum_spanning_tree(&one, &core_distances(&one, 5)), "MST differs with {threads} threads");
    }
    Ok(format!("2 clusters / 0 noise; 1 cluster / 5 noise; {checked} MSTs equal Kruskal; 5 reruns identical"))
}

// ------------------------------------------------------------ criterion 8

fn c08_local_vs_global() -> Check {
    let hyper = LocalHyper { min_cluster_size: 100, min_samples: 20, backoff: BackoffPolicy::Global, n: 20, l2: 1.0 };
    let mut lines = Vec::new();
    for seed in 0..5 {
        let (train, test) = heterogeneous_split(seed, 1800, 600);
        let ens = fit_local(&train.dataset(), hyper).map_err(|e| e.to_string())?;
        let local = ens.predict_many(&test.scores, &test.embeddings).map_err(|e| e.to_string())?;
        let cal = fit_global(&train.scores, &train.labels, 1.0).map_err(|e| e.to_string())?;
        let global: Vec<f64> = test.scores.iter().map(|&s| cal.predict(s)).collect();
        let (el, eg) = (ece(&local, &test.labels, 10).unwrap(), ece(&global, &test.labels, 10).unwrap());
        let (bl, bg) = (bin_coverage(&local, 10).unwrap(), bin_coverage(&global, 10).unwrap());
        ensure!(eg - el >= 0.05, "seed {seed}: local ECE {el:.4}, global ECE {eg:.4}");
        ensure!(bl >= bg, "seed {seed}: local BC {bl} < global BC {bg}");
        lines.push(format!("{el:.3}/{eg:.3}"));
    }
    Ok(format!("local/global ECE per seed: {}", lines.join(", ")))
}

// ------------------------------------------------------------ criterion 9

fn c09_single_bin() -> Check {
    let predictions = vec![0.55; 200];
    let labels: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
    let report = reliability_table(&predictions, &labels, 10).map_err(|e| e.to_string())?;
    ensure!(report.bin_coverage == 1 && report.degenerate, "library report: BC {}, degenerate {}", report.bin_coverage, report.degenerate);

    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    let scores: Vec<Value> = (0..200).map(|i| json!({"id": format!("s{i}"), "kind": "avg", "score": 0.55})).collect();
    let label_rows: Vec<Value> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| json!({"id": format!("s{i}"), "metric": "em", "correct": c}))
        .collect();
    write_jsonl(&path("scores.jsonl"), &scores);
    write_jsonl(&path("labels.jsonl"), &label_rows);
    let (s, l, m, c, r) = (path("scores.jsonl"), path("labels.jsonl"), path("model.json"), path("cal.jsonl"), path("report.json"));

    let out = recal(&["fit-global", "--scores", path_str(&s), "--labels", path_str(&l), "--out", path_str(&m)]);
    ensure!(out.status.code() == Some(0), "fit-global exited with {:?}", out.status.code());
    let out = recal(&["apply", "--model", path_str(&m), "--scores", path_str(&s), "--out", path_str(&c)]);
    ensure!(out.status.code() == Some(0), "apply exited with {:?}", out.status.code());
    let out = recal(&["eval", "--calibrated", path_str(&c), "--labels", path_str(&l), "--out", path_str(&r)]);
    ensure!(out.status.code() == Some(3), "eval exited with {:?}, expected 3", out.status.code());
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&r).map_err(|e| format!("report not written: {e}"))?)
        .map_err(|e| e.to_string())?;
    ensure!(
        written["bin_coverage"] == json!(1) && written["degenerate"] == json!(true),
        "written report: bin_coverage {}, degenerate {}",
        written["bin_coverage"],
        written["degenerate"]
    );
    Ok("BC = 1, degenerate flag set, CLI exit 3, report written".into())
}

// ----------------------------------------------------------- criterion 10

fn c10_ece_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let predictions: Vec<f64> = (0..10_000).map(|i| (1 + i % 9) as f64 / 10.0).collect();
    let labels: Vec<bool> = predictions.iter().map(|&p| rng.random::<f64>() < p).collect();
    let value = ece(&predictions, &labels, 10).map_err(|e| e.to_string())?;
    ensure!(value < 0.02, "ECE {value} on Bernoulli-labelled predictions");

    for k in 0..=10 {
        let p = k as f64 / 10.0;
        let expected = k.min(9);
        ensure!(bin_index(p, 10) == expected, "bin_index({p}) = {}, expected {expected}", bin_index(p, 10));
        let report = reliability_table(&[p], &[true], 10).map_err(|e| e.to_string())?;
        ensure!(report.bins[expected].count == 1, "prediction {p} not counted in bin {expected}");
    }
    Ok(format!("ECE {value:.4} < 0.02; every k/10 lands in bin min(k, 9)"))
}

// ----------------------------------------------------------- criterion 11

fn c11_grid_search() -> Check {
    let grid = Grid::default();
    let combos = grid.combinations();
    ensure!(combos.len() == 60, "default grid has {} combinations", combos.len());
    let mut expected = Vec::new();
    for mcs in [50, 75, 100, 125, 150] {
        for ms in [5, 20, 35, 50, 65, 80] {
            for b in [BackoffPolicy::Global, BackoffPolicy::Uncalibrated] {
                expected.push((mcs, ms, b));
            }
        }
    }
    let got: Vec<_> = combos.iter().map(|h| (h.min_cluster_size, h.min_samples, h.backoff)).collect();
    ensure!(got == expected, "default grid values differ");

    let (train, valid) = heterogeneous_split(11, 1800, 600);
    let first = grid_search(&train.dataset(), &valid.dataset(), &grid).map_err(|e| e.to_string())?;
    let second = grid_search(&train.dataset(), &valid.dataset(), &grid).map_err(|e| e.to_string())?;
    ensure!(first == second, "grid search is not reproducible");
    let best = first.best_report.ece;
    let evaluated: Vec<f64> = first.table.iter().filter_map(|e| e.ece).collect();
    ensure!(evaluated.iter().all(|&e| best <= e), "winner ECE {best} exceeds another combination's");
    ensure!(first.table[first.best_index].ece == Some(best), "winner row does not carry the winning ECE");
    Ok(format!("60 combinations; winner #{} reproducible with ECE {best:.4} over {} evaluated", first.best_index, evaluated.len()))
}

// ----------------------------------------------------------- criterion 12

fn pipeline(dir: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = [
        vec!["synth", "--n", "500", "--seed", "12", "--out", &p("traces.jsonl")],
        vec!["score", "--traces", &p("traces.jsonl"), "--score", "attn_w", "--out", &p("scores.jsonl")],
        vec!["score", "--traces", &p("traces.jsonl"), "--score", "low_k", "--out", &p("low_k.jsonl")],
        vec!["labels", "--traces", &p("traces.jsonl"), "--metric", "em", "--out", &p("labels.jsonl")],
        vec!["fit-global", "--scores", &p("scores.jsonl"), "--labels", &p("labels.jsonl"), "--out", &p("global.json")],
        vec![
            "fit-local", "--traces", &p("traces.jsonl"), "--scores", &p("scores.jsonl"), "--labels", &p("labels.jsonl"),
            "--min-cluster-size", "50", "--min-samples", "5", "--out", &p("local.json"),
        ],
        vec![
            "grid-search", "--traces", &p("traces.jsonl"), "--scores", &p("scores.jsonl"), "--labels", &p("labels.jsonl"),
            "--out", &p("grid.json"), "--model-out", &p("grid_model.json"),
        ],
        vec!["apply", "--model", &p("global.json"), "--scores", &p("scores.jsonl"), "--out", &p("cal_global.jsonl")],
        vec![
            "apply", "--model", &p("local.json"), "--scores", &p("scores.jsonl"), "--traces", &p("traces.jsonl"),
            "--out", &p("cal_local.jsonl"),
        ],
        vec![
            "eval", "--calibrated", &p("cal_local.jsonl"), "--labels", &p("labels.jsonl"), "--out", &p("eval.json"),
            "--csv", &p("eval.csv"),
        ],
        vec![
            "stats", "--scores", &p("low_k.jsonl"), "--labels", &p("labels.jsonl"), "--traces", &p("traces.jsonl"),
            "--out", &p("stats.json"),
        ],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(str::to_string).collect())
    .collect();

    for step in &steps {
        let mut args = vec!["--threads", threads];
        args.extend(step.iter().map(String::as_str));
        let out = recal(&args);
        ensure!(
            out.status.code() == Some(0),
            "`recal {}` exited with {:?}: {}",
            step[0],
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn c12_determinism() -> Check {
    let runs = [("1", "first"), ("8", "second"), ("8", "third")];
    let mut outputs = Vec::new();
    for (threads, _) in runs {
        let dir = tempfile::tempdir().unwrap();
        outputs.push(pipeline(dir.path(), threads)?);
    }
    let reference = &outputs[0];
    ensure!(reference.len() == 13, "pipeline wrote {} files", reference.len());
    for (run, files) in runs.iter().zip(&outputs).skip(1) {
        let names: Vec<&String> = files.iter().map(|f| &f.0).collect();
        ensure!(names == reference.iter().map(|f| &f.0).collect::<Vec<_>>(), "{} run wrote different files", run.1);
        for ((name, bytes), (_, want)) in files.iter().zip(reference) {
            ensure!(bytes == want, "{name} differs between the first run (1 thread) and the {} run ({} threads)", run.1, run.0);
        }
    }
    let total: usize = reference.iter().map(|f| f.1.len()).sum();
    Ok(format!("{} files ({total} bytes) identical across 1, 8 and 8 threads", reference.len()))
}
