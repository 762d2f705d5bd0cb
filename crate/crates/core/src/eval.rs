//! Autoregressive path generation, validity checks and degree-bucketed
//! accuracy.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{DegreeLabel, PathDataset};
use crate::error::{Error, Result};
use crate::graph::PathGraph;
use crate::model::MtpModel;
use crate::parallel;
use crate::rng::{derive_seed, rng_from_seed};

/// Sequences decoded together in one forward pass.
const DECODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    /// Categorical sampling from `softmax(logits / temperature)`.
    Sample {
        temperature: f64,
        seed: u64,
    },
}

impl Decode {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Decode::Greedy => None,
            Decode::Sample { seed, .. } => Some(*seed),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Decode::Sample { temperature, .. } if !(*temperature > 0.0 && temperature.is_finite()) => Err(
                Error::InvalidArgument(format!("temperature must be positive, got {temperature}")),
            ),
            _ => Ok(()),
        }
    }
}

/// A generated token sequence, prefix included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// `max_len` was reached before the terminator.
    pub truncated: bool,
}

/// Default generation budget for an `n`-node graph.
pub fn default_max_len(n: usize) -> usize {
    n + 4
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn sample_index(row: &[f64], temperature: f64, rng: &mut impl rand::Rng) -> usize {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|v| ((v - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    argmax(row)
}

/// One decoding job: prefix `[s, t]` and the seed index for sampling.
#[derive(Clone, Copy, Debug)]
struct Job {
    s: usize,
    t: usize,
    stream: u64,
}

/// Decode `jobs` in lockstep; every live sequence has the same length, so
/// no padding enters the forward pass.
fn generate_chunk(model: &MtpModel, jobs: &[Job], decode: Decode, max_len: usize) -> Result<Vec<Generation>> {
    let term = model.config.vocab_size - 1;
    let max_len = max_len.min(model.config.max_seq_len);
    let mut seqs: Vec<Vec<usize>> = jobs.iter().map(|j| vec![j.s, j.t]).collect();
    let mut done = vec![false; jobs.len()];
    let mut rngs: Vec<_> = match decode {
        Decode::Greedy => Vec::new(),
        Decode::Sample { seed, .. } => jobs
            .iter()
            .map(|j| rng_from_seed(derive_seed(seed, "sample", j.stream)))
            .collect(),
    };
    loop {
        let live: Vec<usize> = (0..jobs.len())
            .filter(|&b| !done[b] && seqs[b].len() < max_len)
            .collect();
        if live.is_empty() {
            break;
        }
        let batch: Vec<Vec<usize>> = live.iter().map(|&b| seqs[b].clone()).collect();
        let logits = model.next_token_logits(&batch)?;
        for (row, &b) in logits.iter().zip(&live) {
            let next = match decode {
                Decode::Greedy => argmax(row),
                Decode::Sample { temperature, .. } => sample_index(row, temperature, &mut rngs[b]),
            };
            seqs[b].push(next);
            done[b] = next == term;
        }
    }
    Ok(seqs
        .into_iter()
        .zip(done)
        .map(|(tokens, d)| Generation { tokens, truncated: !d })
        .collect())
}

fn check_pair(model: &MtpModel, s: usize, t: usize) -> Result<()> {
    let nodes = model.config.vocab_size - 1;
    if let Some(&id) = [s, t].iter().find(|&&x| x >= nodes) {
        return Err(Error::TokenOutOfRange { id, vocab: nodes });
    }
    Ok(())
}

fn generate_jobs(model: &MtpModel, jobs: &[Job], decode: Decode, max_len: usize) -> Result<Vec<Generation>> {
    decode.validate()?;
    for j in jobs {
        check_pair(model, j.s, j.t)?;
    }
    let chunks: Vec<&[Job]> = jobs.chunks(DECODE_CHUNK).collect();
    let parts = parallel::map(&chunks, |c| generate_chunk(model, c, decode, max_len));
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Complete `[s, t]` until the terminator or `max_len` tokens. Only the
/// next-token head is used.
pub fn generate_path(model: &MtpModel, s: usize, t: usize, decode: Decode, max_len: usize) -> Result<Generation> {
    let job = Job { s, t, stream: 0 };
    Ok(generate_jobs(model, &[job], decode, max_len)?.remove(0))
}

/// Generate for many pairs; sampling streams are keyed by position in
/// `pairs`, so results do not depend on batching.
pub fn generate_paths(
    model: &MtpModel,
    pairs: &[(usize, usize)],
    decode: Decode,
    max_len: usize,
) -> Result<Vec<Generation>> {
    let jobs: Vec<Job> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, t))| Job { s, t, stream: i as u64 })
        .collect();
    generate_jobs(model, &jobs, decode, max_len)
}

/// True iff `tokens = [s, t, s, v2, .., t, TERM]` walks edges of `g`, with
/// `TERM = n` appearing once at the end.
pub fn validate_path<G: PathGraph>(g: &G, tokens: &[usize], s: usize, t: usize) -> bool {
    let n = g.node_count();
    let Some((&last, body)) = tokens.split_last() else {
        return false;
    };
    if last != n || body.len() < 4 || body[0] != s || body[1] != t || body[2] != s {
        return false;
    }
    let walk = &body[2..];
    if walk.iter().any(|&v| v >= n) || *walk.last().unwrap() != t {
        return false;
    }
    walk.windows(2).all(|w| g.has_edge(w[0], w[1]))
}

/// Correct and total test paths per bucket for one graph.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOutcome {
    /// Keyed by `degree0..degree3` and `overall`.
    pub buckets: BTreeMap<String, (usize, usize)>,
}

impl GraphOutcome {
    fn record(&mut self, key: &str, ok: bool) {
        let e = self.buckets.entry(key.to_string()).or_insert((0, 0));
        e.0 += ok as usize;
        e.1 += 1;
    }

    pub fn accuracy(&self, key: &str) -> Option<f64> {
        self.buckets
            .get(key)
            .filter(|e| e.1 > 0)
            .map(|&(c, n)| c as f64 / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    /// Test paths across all graphs.
    pub n: usize,
    /// Pooled fraction of valid generations.
    pub path_acc: f64,
    /// Mean of per-graph accuracies.
    pub graph_acc: f64,
    /// Sample standard deviation of per-graph accuracies over `sqrt(#graphs)`;
    /// absent with a single graph.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decode: Decode,
    pub seed: Option<u64>,
    pub graphs: usize,
    /// Buckets with no test paths are omitted.
    pub buckets: BTreeMap<String, BucketStats>,
}

impl EvalReport {
    pub fn from_outcomes(decode: Decode, outcomes: &[GraphOutcome]) -> Self {
        let mut keys: Vec<&String> = outcomes.iter().flat_map(|o| o.buckets.keys()).collect();
        keys.sort();
        keys.dedup();
        let buckets = keys
            .into_iter()
            .map(|key| {
                let (mut correct, mut n) = (0, 0);
                let mut per_graph = Vec::new();
                for o in outcomes {
                    if let Some(&(c, m)) = o.buckets.get(key).filter(|e| e.1 > 0) {
                        correct += c;
                        n += m;
                        per_graph.push(c as f64 / m as f64);
                    }
                }
                let k = per_graph.len() as f64;
                let mean = per_graph.iter().sum::<f64>() / k;
                let stderr = (per_graph.len() > 1).then(|| {
                    let var = per_graph.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0);
                    var.sqrt() / k.sqrt()
                });
                let stats = BucketStats {
                    n,
                    path_acc: correct as f64 / n as f64,
                    graph_acc: mean,
                    stderr,
                };
                (key.clone(), stats)
            })
            .collect();
        Self {
            decode,
            seed: decode.seed(),
            graphs: outcomes.len(),
            buckets,
        }
    }

    pub fn bucket(&self, label: DegreeLabel) -> Option<&BucketStats> {
        self.buckets.get(label.key())
    }

    pub fn overall(&self) -> Option<&BucketStats> {
        self.buckets.get("overall")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One test case: pair plus optional degree bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestCase {
    pub source: usize,
    pub target: usize,
    pub degree: Option<DegreeLabel>,
}

/// Score `cases` on one graph. Greedy decoding is deterministic per pair, so
/// each distinct pair is generated once and its verdict reused.
pub fn evaluate_cases<G: PathGraph + Sync>(
    model: &MtpModel,
    g: &G,
    cases: &[TestCase],
    decode: Decode,
) -> Result<GraphOutcome> {
    if model.config.vocab_size != g.node_count() + 1 {
        return Err(Error::InvalidArgument(format!(
            "model vocabulary {} does not fit a {}-node graph",
            model.config.vocab_size,
            g.node_count()
        )));
    }
    let max_len = default_max_len(g.node_count());
    let verdicts: Vec<bool> = match decode {
        Decode::Greedy => {
            let mut index: HashMap<(usize, usize), usize> = HashMap::new();
            let mut pairs = Vec::new();
            for c in cases {
                index.entry((c.source, c.target)).or_insert_with(|| {
                    pairs.push((c.source, c.target));
                    pairs.len() - 1
                });
            }
            let gens = generate_paths(model, &pairs, decode, max_len)?;
            let ok: Vec<bool> = pairs
                .iter()
                .zip(&gens)
                .map(|(&(s, t), gen)| validate_path(g, &gen.tokens, s, t))
                .collect();
            cases.iter().map(|c| ok[index[&(c.source, c.target)]]).collect()
        }
        Decode::Sample { .. } => {
            let pairs: Vec<(usize, usize)> = cases.iter().map(|c| (c.source, c.target)).collect();
            let gens = generate_paths(model, &pairs, decode, max_len)?;
            pairs
                .iter()
                .zip(&gens)
                .map(|(&(s, t), gen)| validate_path(g, &gen.tokens, s, t))
                .collect()
        }
    };
    let mut out = GraphOutcome::default();
    for (c, ok) in cases.iter().zip(verdicts) {
        if let Some(d) = c.degree {
            out.record(d.key(), ok);
        }
        out.record("overall", ok);
    }
    Ok(out)
}

/// Test cases of a path dataset, one per test path.
pub fn dataset_cases(ds: &PathDataset) -> Result<Vec<TestCase>> {
    ds.test
        .iter()
        .map(|p| {
            let degree = ds
                .degree_of(p.source, p.target)
                .ok_or_else(|| Error::Schema(format!("test pair ({}, {}) has no degree label", p.source, p.target)))?;
            Ok(TestCase {
                source: p.source,
                target: p.target,
                degree: Some(degree),
            })
        })
        .collect()
}

/// Evaluate on the dataset's test paths against the true graph `g`.
pub fn evaluate<G: PathGraph + Sync>(model: &MtpModel, ds: &PathDataset, g: &G, decode: Decode) -> Result<EvalReport> {
    let outcome = evaluate_cases(model, g, &dataset_cases(ds)?, decode)?;
    Ok(EvalReport::from_outcomes(decode, &[outcome]))
}
