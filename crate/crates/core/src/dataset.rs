//! Path datasets: sampling, tokenization, observed matrices and degree labels.
//!
//! A path from `s` to `t` through nodes `s = v1, ..., vL = t` is encoded as the
//! token sequence `s t v1 ... vL TERM`, where `TERM` is token id `n` for an
//! `n`-node graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{pairs_from_reachability, DirectedGraph, PathGraph};
use crate::matrix::BinaryMatrix;
use crate::rng::{derive_seed, rng_from_seed};

/// Node tokens `0..n` plus one terminator token `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    nodes: usize,
}

impl Vocabulary {
    pub fn new(nodes: usize) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `M = n + 1`.
    pub fn size(&self) -> usize {
        self.nodes + 1
    }

    pub fn term(&self) -> usize {
        self.nodes
    }

    pub fn is_node(&self, token: usize) -> bool {
        token < self.nodes
    }
}

/// One sampled path with its source/target prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathSample {
    pub source: usize,
    pub target: usize,
    /// `v1 .. vL` with `v1 = source`, `vL = target`.
    pub nodes: Vec<usize>,
}

impl PathSample {
    pub fn new(source: usize, target: usize, nodes: Vec<usize>) -> Self {
        Self { source, target, nodes }
    }

    /// The direct path `s t s t`.
    pub fn direct(s: usize, t: usize) -> Self {
        Self::new(s, t, vec![s, t])
    }

    /// Node tokens without the terminator: `s t v1 .. vL`.
    pub fn node_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len() + 2);
        out.push(self.source);
        out.push(self.target);
        out.extend_from_slice(&self.nodes);
        out
    }

    /// Full token sequence including the terminator.
    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut out = self.node_tokens();
        out.push(vocab.term());
        out
    }

    /// Checks the sequence invariants against `g`.
    pub fn is_valid_in<G: PathGraph>(&self, g: &G) -> bool {
        self.nodes.len() >= 2
            && self.nodes[0] == self.source
            && *self.nodes.last().unwrap() == self.target
            && self.nodes.windows(2).all(|w| g.has_edge(w[0], w[1]))
    }

    fn to_line(&self) -> String {
        self.node_tokens()
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn from_line(line: &str) -> Result<Self> {
        let ids = line
            .split_ascii_whitespace()
            .map(|w| {
                w.parse::<usize>()
                    .map_err(|e| Error::Schema(format!("bad token {w:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() < 4 {
            return Err(Error::Schema(format!("sequence too short: {line:?}")));
        }
        Ok(Self::new(ids[0], ids[1], ids[2..].to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DegreeLabel {
    Degree0,
    Degree1,
    Degree2,
    Degree3,
}

impl DegreeLabel {
    pub const ALL: [DegreeLabel; 4] = [
        DegreeLabel::Degree0,
        DegreeLabel::Degree1,
        DegreeLabel::Degree2,
        DegreeLabel::Degree3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn key(self) -> &'static str {
        match self {
            DegreeLabel::Degree0 => "degree0",
            DegreeLabel::Degree1 => "degree1",
            DegreeLabel::Degree2 => "degree2",
            DegreeLabel::Degree3 => "degree3",
        }
    }
}

impl fmt::Display for DegreeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Observed adjacency and reachability of a training set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observed {
    pub adjacency: BinaryMatrix,
    pub reachability: BinaryMatrix,
}

/// `A_obs[(i, k)]` from adjacent node tokens at 1-based positions `[3, N-1]`;
/// `R_obs[(t, k)]` from node `k` at positions `[4, N]` of a sequence with
/// `u2 = t`. `N` counts node tokens only.
pub fn build_observed(train: &[PathSample], n: usize) -> Observed {
    let mut a = BinaryMatrix::zeros(n);
    let mut r = BinaryMatrix::zeros(n);
    for sample in train {
        let u = sample.node_tokens();
        let t = u[1];
        // 0-based index p corresponds to position p + 1.
        for p in 2..u.len() - 1 {
            a.set(u[p], u[p + 1], true);
        }
        for &k in &u[3..] {
            r.set(t, k, true);
        }
    }
    Observed {
        adjacency: a,
        reachability: r,
    }
}

/// Degree classifier with the degree-1 relation precomputed.
pub struct DegreeClassifier<'a> {
    obs: &'a Observed,
    degree_le1: BinaryMatrix,
}

impl<'a> DegreeClassifier<'a> {
    pub fn new(obs: &'a Observed) -> Self {
        let n = obs.adjacency.size();
        // degree_le1[(s, t)]: (s, t) is degree-0 or degree-1.
        let mut degree_le1 = BinaryMatrix::zeros(n);
        for s in 0..n {
            let succ: Vec<usize> = (0..n).filter(|&u| obs.adjacency.get(s, u)).collect();
            for t in 0..n {
                let d0 = obs.reachability.get(t, s);
                let d1 = succ.iter().any(|&u| obs.reachability.get(t, u));
                degree_le1.set(s, t, d0 || d1);
            }
        }
        Self { obs, degree_le1 }
    }

    pub fn classify(&self, s: usize, t: usize) -> DegreeLabel {
        let n = self.obs.adjacency.size();
        if self.obs.reachability.get(t, s) {
            return DegreeLabel::Degree0;
        }
        if self.degree_le1.get(s, t) {
            return DegreeLabel::Degree1;
        }
        // Any u with (u, t) of degree <= 1 qualifies: a degree-0 (u, t)
        // would already have made (s, t) degree-1.
        if (0..n).any(|u| self.obs.adjacency.get(s, u) && self.degree_le1.get(u, t)) {
            return DegreeLabel::Degree2;
        }
        DegreeLabel::Degree3
    }
}

pub fn classify_degree(s: usize, t: usize, obs: &Observed) -> DegreeLabel {
    DegreeClassifier::new(obs).classify(s, t)
}

/// Uniform random walk from `s` over out-neighbours that can still reach `t`.
pub fn sample_path(
    g: &DirectedGraph,
    reach: &BinaryMatrix,
    s: usize,
    t: usize,
    rng: &mut crate::rng::Rng,
) -> Result<PathSample> {
    if s >= g.node_count() || t >= g.node_count() || !reach.get(t, s) {
        return Err(Error::Unreachable { s, t });
    }
    let mut nodes = vec![s];
    let mut cur = s;
    let mut options = Vec::new();
    while cur != t {
        options.clear();
        options.extend(g.successors(cur).iter().copied().filter(|&w| w == t || reach.get(t, w)));
        // Non-empty: cur reaches t, so some successor is t or reaches t.
        cur = options[rng.random_range(0..options.len())];
        nodes.push(cur);
        if nodes.len() > g.node_count() {
            unreachable!("a DAG walk cannot exceed n nodes");
        }
    }
    Ok(PathSample::new(s, t, nodes))
}

/// `m` paths per pair, pairs in the given order.
pub fn sample_paths(
    g: &DirectedGraph,
    reach: &BinaryMatrix,
    pairs: &[(usize, usize)],
    m: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    if m == 0 {
        return Err(Error::InvalidArgument("paths per pair must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(pairs.len() * m);
    for &(s, t) in pairs {
        for _ in 0..m {
            out.push(sample_path(g, reach, s, t, &mut rng)?);
        }
    }
    Ok(out)
}

/// Result of splitting reachable pairs into train and test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSplit {
    /// Pairs drawn for training; each gets `m` sampled paths.
    pub sampled: Vec<(usize, usize)>,
    /// Every edge of the graph, trained as a direct path.
    pub forced_edges: Vec<(usize, usize)>,
    /// Reachable pairs absent from training.
    pub test: Vec<(usize, usize)>,
}

impl PairSplit {
    /// `sampled ∪ forced_edges`, ascending.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<_> = self.sampled.iter().chain(&self.forced_edges).copied().collect();
        set.into_iter().collect()
    }
}

pub fn split_pairs(pairs: &[(usize, usize)], train_fraction: f64, g: &DirectedGraph, seed: u64) -> Result<PairSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut rng_from_seed(seed));
    let k = (train_fraction * pairs.len() as f64).round() as usize;
    let mut sampled = shuffled[..k].to_vec();
    sampled.sort_unstable();
    let forced_edges = g.edges().to_vec();
    let train: BTreeSet<_> = sampled.iter().chain(&forced_edges).copied().collect();
    let test = pairs.iter().copied().filter(|p| !train.contains(p)).collect();
    Ok(PairSplit {
        sampled,
        forced_edges,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub source: usize,
    pub target: usize,
    pub degree: DegreeLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathDataset {
    pub vocab: Vocabulary,
    pub train: Vec<PathSample>,
    pub test: Vec<PathSample>,
    pub observed: Observed,
    /// Degree per distinct test pair, ascending by pair.
    pub test_pairs: Vec<LabeledPair>,
}

impl PathDataset {
    /// Assemble a dataset, computing observed matrices and test-pair degrees.
    pub fn assemble(n: usize, train: Vec<PathSample>, test: Vec<PathSample>) -> Self {
        let observed = build_observed(&train, n);
        let classifier = DegreeClassifier::new(&observed);
        let pairs: BTreeSet<(usize, usize)> = test.iter().map(|p| (p.source, p.target)).collect();
        let test_pairs = pairs
            .into_iter()
            .map(|(s, t)| LabeledPair {
                source: s,
                target: t,
                degree: classifier.classify(s, t),
            })
            .collect();
        Self {
            vocab: Vocabulary::new(n),
            train,
            test,
            observed,
            test_pairs,
        }
    }

    pub fn degree_of(&self, s: usize, t: usize) -> Option<DegreeLabel> {
        self.test_pairs
            .binary_search_by(|p| (p.source, p.target).cmp(&(s, t)))
            .ok()
            .map(|i| self.test_pairs[i].degree)
    }

    pub fn train_tokens(&self) -> Vec<Vec<usize>> {
        self.train.iter().map(|p| p.tokens(&self.vocab)).collect()
    }
}

/// Settings of the random-DAG dataset protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub paths_per_pair: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            paths_per_pair: 20,
            train_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Split pairs, sample `m` train paths per sampled pair plus a direct path per
/// edge, and `m` test paths per test pair.
pub fn build_path_dataset(g: &DirectedGraph, cfg: &DatasetConfig) -> Result<PathDataset> {
    let reach = g.reachability();
    let pairs = pairs_from_reachability(&reach);
    let split = split_pairs(&pairs, cfg.train_fraction, g, derive_seed(cfg.seed, "split", 0))?;
    let mut train = sample_paths(
        g,
        &reach,
        &split.sampled,
        cfg.paths_per_pair,
        derive_seed(cfg.seed, "train-paths", 0),
    )?;
    train.extend(split.forced_edges.iter().map(|&(s, t)| PathSample::direct(s, t)));
    let test = if split.test.is_empty() {
        Vec::new()
    } else {
        sample_paths(
            g,
            &reach,
            &split.test,
            cfg.paths_per_pair,
            derive_seed(cfg.seed, "test-paths", 0),
        )?
    };
    Ok(PathDataset::assemble(g.node_count(), train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub graph: PathBuf,
    pub nodes: usize,
    pub seed: u64,
    pub paths_per_pair: Option<usize>,
    pub train_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
    pub degrees: Vec<LabeledPair>,
}

fn write_lines(path: &Path, samples: &[PathSample]) -> Result<()> {
    let mut s = String::new();
    for p in samples {
        s.push_str(&p.to_line());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<PathSample>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(PathSample::from_line)
        .collect()
}

impl PathDataset {
    /// Write `train.txt`, `test.txt` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path, meta: &DatasetMeta) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("train.txt"), &self.train)?;
        write_lines(&dir.join("test.txt"), &self.test)?;
        let mut meta = meta.clone();
        meta.nodes = self.vocab.nodes();
        meta.degrees = self.test_pairs.clone();
        let path = dir.join("meta.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Load a dataset directory; degrees are recomputed and checked against
    /// the stored labels.
    pub fn load(dir: &Path) -> Result<(Self, DatasetMeta)> {
        let path = dir.join("meta.json");
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let train = read_lines(&dir.join("train.txt"))?;
        let test = read_lines(&dir.join("test.txt"))?;
        for p in train.iter().chain(&test) {
            if let Some(&bad) = p.node_tokens().iter().find(|&&v| v >= meta.nodes) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    vocab: meta.nodes,
                });
            }
        }
        let ds = PathDataset::assemble(meta.nodes, train, test);
        if ds.test_pairs != meta.degrees {
            return Err(Error::Schema("stored degree labels disagree with the dataset".into()));
        }
        Ok((ds, meta))
    }
}
