//! Blocksworld state spaces and their path datasets.
//!
//! A state is a set of towers listed bottom to top. The canonical form sorts
//! towers by their bottom block, so every configuration has one spelling.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PathDataset, PathSample};
use crate::error::{Error, Result};
use crate::graph::Digraph;
use crate::rng::{derive_seed, rng_from_seed};

pub const MAX_BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockState {
    pub towers: Vec<Vec<usize>>,
}

impl BlockState {
    /// Sorts towers by bottom block; rejects empty towers and blocks that
    /// are missing or repeated.
    pub fn new(towers: Vec<Vec<usize>>, blocks: usize) -> Result<Self> {
        let mut seen = vec![false; blocks];
        for t in &towers {
            if t.is_empty() {
                return Err(Error::InvalidArgument("empty tower".into()));
            }
            for &b in t {
                if b >= blocks || std::mem::replace(&mut seen[b], true) {
                    return Err(Error::InvalidArgument(format!("block {b} is out of range or repeated")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("every block must appear".into()));
        }
        Ok(Self::canonical(towers))
    }

    fn canonical(mut towers: Vec<Vec<usize>>) -> Self {
        towers.sort_by_key(|t| t[0]);
        Self { towers }
    }

    pub fn blocks(&self) -> usize {
        self.towers.iter().map(Vec::len).sum()
    }

    /// States reachable by moving one clear block onto the table or onto
    /// another clear block.
    pub fn successors(&self) -> Vec<BlockState> {
        let mut out = Vec::new();
        for from in 0..self.towers.len() {
            let mut rest = self.towers.clone();
            let block = rest[from].pop().expect("towers are nonempty");
            let emptied = rest[from].is_empty();
            if !emptied {
                let mut next = rest.clone();
                next.push(vec![block]);
                out.push(Self::canonical(next));
            }
            for to in (0..rest.len()).filter(|&to| to != from) {
                let mut next = rest.clone();
                next[to].push(block);
                if emptied {
                    next.remove(from);
                }
                out.push(Self::canonical(next));
            }
        }
        out
    }
}

fn check_blocks(blocks: usize) -> Result<()> {
    if !(1..=MAX_BLOCKS).contains(&blocks) {
        return Err(Error::InvalidArgument(format!(
            "block count must be in 1..={MAX_BLOCKS}, got {blocks}"
        )));
    }
    Ok(())
}

/// Every configuration of `blocks` blocks, canonical and sorted.
pub fn enumerate_states(blocks: usize) -> Result<Vec<BlockState>> {
    check_blocks(blocks)?;
    // Add blocks one at a time: on a new tower, at the bottom of a tower, or
    // directly above an existing block. Each configuration arises once.
    let mut states: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for b in 0..blocks {
        let mut next = Vec::new();
        for towers in &states {
            let mut alone = towers.clone();
            alone.push(vec![b]);
            next.push(alone);
            for t in 0..towers.len() {
                for pos in 0..=towers[t].len() {
                    let mut placed = towers.clone();
                    placed[t].insert(pos, b);
                    next.push(placed);
                }
            }
        }
        states = next;
    }
    let set: BTreeSet<BlockState> = states.into_iter().map(BlockState::canonical).collect();
    Ok(set.into_iter().collect())
}

/// Transition graph over the sorted states; node `i` is `states[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateGraph {
    pub blocks: usize,
    pub states: Vec<BlockState>,
    pub graph: Digraph,
}

#[derive(Serialize, Deserialize)]
struct StatesFile {
    blocks: usize,
    states: Vec<Vec<Vec<usize>>>,
}

impl StateGraph {
    pub fn index_of(&self, s: &BlockState) -> Option<usize> {
        self.states.binary_search(s).ok()
    }

    /// `states.json`: canonical towers per node index.
    pub fn states_json(&self) -> String {
        serde_json::to_string_pretty(&StatesFile {
            blocks: self.blocks,
            states: self.states.iter().map(|s| s.towers.clone()).collect(),
        })
        .expect("states serialize")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("states.json", self.states_json()),
            ("graph.json", self.graph.to_json()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn build_state_graph(blocks: usize) -> Result<StateGraph> {
    let states = enumerate_states(blocks)?;
    let index: HashMap<&BlockState, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let mut edges = Vec::new();
    for (u, s) in states.iter().enumerate() {
        for next in s.successors() {
            edges.push((u, index[&next]));
        }
    }
    let graph = Digraph::new(states.len(), edges)?;
    Ok(StateGraph { blocks, states, graph })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlocksworldConfig {
    /// Sampled training paths per length.
    pub n_per_length: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub test_paths: usize,
    pub seed: u64,
}

impl Default for BlocksworldConfig {
    fn default() -> Self {
        Self {
            n_per_length: 500,
            min_len: 2,
            max_len: 6,
            test_paths: 5000,
            seed: 0,
        }
    }
}

/// Give up on a path after this many dead ends.
const MAX_RETRIES: usize = 10_000;

/// Random walk of `len` edges from a uniform start that never revisits a
/// node; restarts on dead ends.
pub fn sample_acyclic_path(g: &Digraph, len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = g.node_count();
    'retry: for _ in 0..MAX_RETRIES {
        let mut path = vec![rng.random_range(0..n)];
        let mut visited = vec![false; n];
        visited[path[0]] = true;
        while path.len() <= len {
            let here = *path.last().unwrap();
            let options: Vec<usize> = g.successors(here).iter().copied().filter(|&v| !visited[v]).collect();
            let Some(&next) = options.choose(rng) else {
                continue 'retry;
            };
            visited[next] = true;
            path.push(next);
        }
        return Ok(path);
    }
    Err(Error::InvalidArgument(format!("no acyclic path of length {len} found")))
}

fn sample_set(g: &Digraph, lengths: impl Iterator<Item = usize>, rng: &mut impl Rng) -> Result<Vec<PathSample>> {
    lengths
        .map(|len| {
            let nodes = sample_acyclic_path(g, len, rng)?;
            Ok(PathSample::new(nodes[0], *nodes.last().unwrap(), nodes))
        })
        .collect()
}

/// Train: every edge as a direct path plus `n_per_length` acyclic paths per
/// length. Test: `test_paths` acyclic paths with lengths drawn uniformly
/// from the same range, seeded independently of the train size.
pub fn build_blocksworld_dataset(g: &Digraph, cfg: &BlocksworldConfig) -> Result<PathDataset> {
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::InvalidArgument(format!(
            "path lengths {}..={} must start at 2 or more",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut train: Vec<PathSample> = g.edges().iter().map(|&(s, t)| PathSample::direct(s, t)).collect();
    for len in cfg.min_len..=cfg.max_len {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "blocksworld-train", len as u64));
        train.extend(sample_set(g, std::iter::repeat_n(len, cfg.n_per_length), &mut rng)?);
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "blocksworld-test", 0));
    let lengths: Vec<usize> = (0..cfg.test_paths)
        .map(|_| rng.random_range(cfg.min_len..=cfg.max_len))
        .collect();
    let test = sample_set(g, lengths.into_iter(), &mut rng)?;
    Ok(PathDataset::assemble(g.node_count(), train, test))
}
