//! Seeded experiment runs and multi-graph sweeps.
//!
//! A master seed fans out into per-stage seeds with [`derive_seed`]:
//! `graph` and `dataset` are keyed by graph index, `model`, `train` and
//! `decode` by graph index and replicate. Architectures in one sweep share
//! every seed, so they see the same graphs, data and initial backbone
//! draws.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{entry_stats, EntryStats};
use crate::dataset::{build_observed, build_path_dataset, DatasetConfig, DegreeLabel, PathDataset};
use crate::error::{Error, Result};
use crate::eval::{dataset_cases, evaluate_cases, Decode, EvalReport, GraphOutcome};
use crate::graph::{generate_random_dag, DirectedGraph};
use crate::model::{ModelConfig, MtpModel, TransferKind};
use crate::parallel;
use crate::rng::derive_seed;
use crate::simplified::{
    learnable_masks, train_simplified, LearnableMasks, SimplifiedParams, SimplifiedTrainConfig, TrainingCounts,
};
use crate::trainer::{history_csv, train_model, EpochStats, TrainConfig};

/// Model families compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    NextToken,
    /// Shared head with transfer layers; `transformer_depth = 0` is linear.
    SharedHead {
        steps: usize,
        transformer_depth: usize,
        nti: bool,
    },
    /// One output head per offset.
    Independent {
        steps: usize,
    },
}

impl Architecture {
    pub fn apply(&self, base: ModelConfig) -> ModelConfig {
        match *self {
            Architecture::NextToken => base,
            Architecture::SharedHead {
                steps,
                transformer_depth,
                nti,
            } => {
                let transfer = if transformer_depth == 0 {
                    TransferKind::Linear
                } else {
                    TransferKind::Transformer {
                        depth: transformer_depth,
                    }
                };
                base.with_mtp(steps, transfer, nti)
            }
            Architecture::Independent { steps } => base.independent(steps),
        }
    }
}

/// Short names: `1tok`, `{K}tok-lin`, `{K}tok-nti-lin`, `{K}tok-nti-tf{L}`,
/// `{K}tok-tf{L}`, `{K}tok-indep`.
impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Architecture::NextToken => write!(f, "1tok"),
            Architecture::SharedHead {
                steps,
                transformer_depth,
                nti,
            } => {
                write!(f, "{steps}tok")?;
                if nti {
                    write!(f, "-nti")?;
                }
                if transformer_depth == 0 {
                    write!(f, "-lin")
                } else {
                    write!(f, "-tf{transformer_depth}")
                }
            }
            Architecture::Independent { steps } => write!(f, "{steps}tok-indep"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown architecture {s:?}"));
        if s == "1tok" {
            return Ok(Architecture::NextToken);
        }
        let (head, rest) = s.split_once("tok-").ok_or_else(bad)?;
        let steps: usize = head.parse().map_err(|_| bad())?;
        if steps < 2 {
            return Err(bad());
        }
        if rest == "indep" {
            return Ok(Architecture::Independent { steps });
        }
        let (nti, transfer) = match rest.strip_prefix("nti-") {
            Some(t) => (true, t),
            None => (false, rest),
        };
        let transformer_depth = match transfer {
            "lin" => 0,
            t => t
                .strip_prefix("tf")
                .and_then(|d| d.parse().ok())
                .filter(|&d| d > 0)
                .ok_or_else(bad)?,
        };
        Ok(Architecture::SharedHead {
            steps,
            transformer_depth,
            nti,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    Random { nodes: usize, edge_prob: f64 },
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            dim: 120,
            depth: 1,
            heads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub master_seed: u64,
    pub graph: GraphSpec,
    pub paths_per_pair: usize,
    pub train_fraction: f64,
    pub architecture: Architecture,
    pub model: ModelShape,
    /// `seed` is replaced by the derived train seed.
    pub train: TrainConfig,
    pub decode: Decode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            master_seed: 0,
            graph: GraphSpec::Random {
                nodes: 100,
                edge_prob: 0.1,
            },
            paths_per_pair: 20,
            train_fraction: 0.1,
            architecture: Architecture::NextToken,
            model: ModelShape::default(),
            train: TrainConfig::default(),
            decode: Decode::Greedy,
        }
    }
}

/// Seeds of every stage of one (graph, replicate) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub graph: u64,
    pub dataset: u64,
    pub model: u64,
    pub train: u64,
    pub decode: u64,
}

impl StageSeeds {
    pub fn new(master: u64, graph_index: u64, replicate: u64) -> Self {
        let cell = graph_index | (replicate << 32);
        Self {
            graph: derive_seed(master, "graph", graph_index),
            dataset: derive_seed(master, "dataset", graph_index),
            model: derive_seed(master, "model", cell),
            train: derive_seed(master, "train", cell),
            decode: derive_seed(master, "decode", cell),
        }
    }
}

/// Graph and dataset of one cell.
pub fn build_task(cfg: &ExperimentConfig, seeds: &StageSeeds) -> Result<(DirectedGraph, PathDataset)> {
    let g = match &cfg.graph {
        GraphSpec::Random { nodes, edge_prob } => generate_random_dag(*nodes, *edge_prob, seeds.graph)?,
        GraphSpec::File { path } => DirectedGraph::load(path)?,
    };
    let ds = build_path_dataset(
        &g,
        &DatasetConfig {
            paths_per_pair: cfg.paths_per_pair,
            train_fraction: cfg.train_fraction,
            seed: seeds.dataset,
        },
    )?;
    Ok((g, ds))
}

pub fn model_config(cfg: &ExperimentConfig, nodes: usize) -> ModelConfig {
    let mut base = ModelConfig::next_token(nodes + 1, cfg.model.dim, crate::eval::default_max_len(nodes));
    base.depth = cfg.model.depth;
    base.heads = cfg.model.heads;
    cfg.architecture.apply(base)
}

/// Give a sampling decode its derived seed; greedy stays as is.
fn seeded_decode(decode: Decode, seeds: &StageSeeds) -> Decode {
    match decode {
        Decode::Greedy => Decode::Greedy,
        Decode::Sample { temperature, .. } => Decode::Sample {
            temperature,
            seed: seeds.decode,
        },
    }
}

pub struct RunOutput {
    pub seeds: StageSeeds,
    pub graph: DirectedGraph,
    pub dataset: PathDataset,
    pub model: MtpModel,
    pub history: Vec<EpochStats>,
    pub outcome: GraphOutcome,
    pub report: EvalReport,
}

/// Build the task, train and evaluate one cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    graph_index: u64,
    replicate: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<RunOutput> {
    let seeds = StageSeeds::new(cfg.master_seed, graph_index, replicate);
    let (graph, dataset) = build_task(cfg, &seeds)?;
    let model = MtpModel::new(model_config(cfg, graph.node_count()), seeds.model)?;
    let train_cfg = TrainConfig {
        seed: seeds.train,
        ..cfg.train
    };
    let out = train_model(model, &dataset.train_tokens(), &train_cfg, on_epoch)?;
    let decode = seeded_decode(cfg.decode, &seeds);
    let outcome = evaluate_cases(&out.model, &graph, &dataset_cases(&dataset)?, decode)?;
    let report = EvalReport::from_outcomes(decode, std::slice::from_ref(&outcome));
    Ok(RunOutput {
        seeds,
        graph,
        dataset,
        model: out.model,
        history: out.history,
        outcome,
        report,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'a str,
    config: &'a ExperimentConfig,
    seeds: &'a StageSeeds,
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

impl RunOutput {
    /// `config.json`, `graph.json`, `checkpoint.json`, `history.csv`,
    /// `report.json` under `dir`.
    pub fn save(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            crate_version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            seeds: &self.seeds,
        };
        write(&dir.join("config.json"), &serde_json::to_string_pretty(&manifest)?)?;
        write(&dir.join("graph.json"), &self.graph.to_json())?;
        write(&dir.join("checkpoint.json"), &self.model.to_json())?;
        write(&dir.join("history.csv"), &history_csv(&self.history))?;
        write(&dir.join("report.json"), &self.report.to_json())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Shared settings; `architecture` is overridden per row.
    pub base: ExperimentConfig,
    pub architectures: Vec<Architecture>,
    pub graphs: usize,
    pub replicates: usize,
}

pub struct SweepResult {
    /// One report per architecture, in input order.
    pub reports: Vec<(Architecture, EvalReport)>,
}

impl SweepResult {
    /// Columns `model,degree,graph_acc,stderr,path_acc`; empty stderr when
    /// only one graph contributed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,degree,graph_acc,stderr,path_acc\n");
        let keys = DegreeLabel::ALL.iter().map(|d| d.key()).chain(["overall"]);
        for key in keys {
            for (arch, report) in &self.reports {
                if let Some(b) = report.buckets.get(key) {
                    let se = b.stderr.map_or(String::new(), |v| v.to_string());
                    s.push_str(&format!("{arch},{key},{},{se},{}\n", b.graph_acc, b.path_acc));
                }
            }
        }
        s
    }
}

/// Every (architecture, graph, replicate) cell; cells run in parallel.
pub fn sweep(cfg: &SweepConfig, out_dir: Option<&Path>) -> Result<SweepResult> {
    if cfg.graphs == 0 || cfg.replicates == 0 || cfg.architectures.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs graphs, replicates and architectures".into(),
        ));
    }
    let cells: Vec<(usize, u64, u64)> = (0..cfg.architectures.len())
        .flat_map(|a| (0..cfg.graphs as u64).flat_map(move |g| (0..cfg.replicates as u64).map(move |r| (a, g, r))))
        .collect();
    let results = parallel::map(&cells, |&(a, g, r)| -> Result<GraphOutcome> {
        let arch = cfg.architectures[a];
        let run_cfg = ExperimentConfig {
            architecture: arch,
            run_id: format!("{}-{arch}-g{g}-r{r}", cfg.base.run_id),
            ..cfg.base.clone()
        };
        let out = run_cell(&run_cfg, g, r, |_| {})?;
        if let Some(dir) = out_dir {
            out.save(&run_cfg, &dir.join(&run_cfg.run_id))?;
        }
        Ok(out.outcome)
    });
    let mut per_arch: Vec<Vec<GraphOutcome>> = vec![Vec::new(); cfg.architectures.len()];
    for (&(a, _, _), r) in cells.iter().zip(results) {
        per_arch[a].push(r?);
    }
    let reports = cfg
        .architectures
        .iter()
        .zip(per_arch)
        .map(|(&arch, outcomes)| (arch, EvalReport::from_outcomes(cfg.base.decode, &outcomes)))
        .collect();
    Ok(SweepResult { reports })
}

/// Simplified-model run on a random graph: `W^T` fixed to the true
/// adjacency, or learned from zero when `learn_transfer` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedExperiment {
    pub master_seed: u64,
    pub nodes: usize,
    pub edge_prob: f64,
    pub paths_per_pair: usize,
    pub train_fraction: f64,
    pub learn_transfer: bool,
    pub train: SimplifiedTrainConfig,
}

impl Default for SimplifiedExperiment {
    fn default() -> Self {
        Self {
            master_seed: 0,
            nodes: 20,
            edge_prob: 0.2,
            paths_per_pair: 20,
            train_fraction: 0.1,
            learn_transfer: false,
            train: SimplifiedTrainConfig::default(),
        }
    }
}

pub struct SimplifiedOutcome {
    pub graph: DirectedGraph,
    pub dataset: PathDataset,
    pub params: SimplifiedParams,
    pub history: Vec<f64>,
    pub masks: LearnableMasks,
    /// Categories `observed_reach`, `learnable`, `other`.
    pub wv: EntryStats,
    /// Categories `adjacency`, `learnable`, `other`.
    pub wm: EntryStats,
    /// Categories `adjacency`, `other`.
    pub wt: EntryStats,
}

pub fn run_simplified(cfg: &SimplifiedExperiment) -> Result<SimplifiedOutcome> {
    let seeds = StageSeeds::new(cfg.master_seed, 0, 0);
    let graph = generate_random_dag(cfg.nodes, cfg.edge_prob, seeds.graph)?;
    let dataset = build_path_dataset(
        &graph,
        &DatasetConfig {
            paths_per_pair: cfg.paths_per_pair,
            train_fraction: cfg.train_fraction,
            seed: seeds.dataset,
        },
    )?;
    let n = cfg.nodes;
    let adj = graph.as_digraph().adjacency();
    let obs = build_observed(&dataset.train, n);
    let counts = TrainingCounts::new(n + 1, &dataset.train_tokens())?;
    let init = if cfg.learn_transfer {
        SimplifiedParams::zeros(n + 1)
    } else {
        SimplifiedParams::with_fixed_transfer(&adj, n + 1)
    };
    let (params, history) = train_simplified(init, &counts, &cfg.train)?;
    let masks = learnable_masks(&counts.second, &adj, &obs.reachability);
    let wv = entry_stats(
        &params.wv,
        &[("observed_reach", &obs.reachability), ("learnable", &masks.wv)],
    )?;
    let wm = entry_stats(&params.wm, &[("adjacency", &adj), ("learnable", &masks.wm)])?;
    let wt = entry_stats(&params.wt, &[("adjacency", &adj)])?;
    Ok(SimplifiedOutcome {
        graph,
        dataset,
        params,
        history,
        masks,
        wv,
        wm,
        wt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_names_round_trip() {
        for name in [
            "1tok",
            "2tok-lin",
            "2tok-nti-lin",
            "2tok-nti-tf1",
            "3tok-tf2",
            "3tok-indep",
        ] {
            let arch: Architecture = name.parse().unwrap();
            assert_eq!(arch.to_string(), name);
        }
        for bad in ["", "tok", "1tok-lin", "2tok-tf0", "2tok-nti", "xtok-lin"] {
            assert!(bad.parse::<Architecture>().is_err(), "{bad}");
        }
    }

    #[test]
    fn stage_seeds_are_distinct_and_shared_across_replicates() {
        let a = StageSeeds::new(5, 0, 0);
        let b = StageSeeds::new(5, 0, 1);
        let c = StageSeeds::new(5, 1, 0);
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.model, b.model);
        assert_ne!(a.graph, c.graph);
        let all = [a.graph, a.dataset, a.model, a.train, a.decode];
        let distinct: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 5);
    }
}
