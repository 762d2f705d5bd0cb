use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtplan_core::analysis::{average_attention, entry_stats, export_csv, export_json, project_transfer, Projection};
use mtplan_core::blocksworld::{build_blocksworld_dataset, build_state_graph, BlocksworldConfig};
use mtplan_core::dataset::{build_path_dataset, DatasetConfig, DatasetMeta, PathDataset};
use mtplan_core::eval::{default_max_len, evaluate, Decode};
use mtplan_core::experiment::{
    model_config, run_cell, run_simplified, sweep, Architecture, ExperimentConfig, GraphSpec, ModelShape,
    SimplifiedExperiment, SweepConfig,
};
use mtplan_core::graph::{generate_random_dag, Digraph, DirectedGraph};
use mtplan_core::model::MtpModel;
use mtplan_core::rng::rng_from_seed;
use mtplan_core::simplified::{gradcheck, random_instance, verify_theorems, SimplifiedTrainConfig};
use mtplan_core::trainer::{history_csv, train_model, TrainConfig};
use mtplan_core::Error;
use serde::Serialize;

use crate::{
    AnalyzeCommand, BlocksworldCommand, Command, DecodeArgs, DecodeMode, ProjectionArg, ShapeArgs, SimplifiedCommand,
    SweepArgs, TrainArgs, TrainFlags,
};

pub const OUTPUT_ROOT_VAR: &str = "MTPLAN_OUTPUT_ROOT";

/// Exit code and error kind for the JSON error line.
pub fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<Error>() {
            return match core {
                Error::Io { .. } => (3, "io"),
                Error::Schema(_) | Error::Json(_) => (4, "schema"),
                Error::Diverged { .. } => (5, "diverged"),
                _ => (6, "invalid"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (3, "io");
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (4, "schema");
        }
    }
    (6, "invalid")
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn decode_of(d: DecodeArgs) -> Decode {
    match d.decode {
        DecodeMode::Greedy => Decode::Greedy,
        DecodeMode::Sample => Decode::Sample {
            temperature: d.temperature,
            seed: d.decode_seed,
        },
    }
}

fn train_config(t: TrainFlags) -> TrainConfig {
    TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        weight_decay: t.weight_decay,
        seed: t.train_seed,
        ..TrainConfig::default()
    }
}

fn shape_of(s: ShapeArgs) -> ModelShape {
    ModelShape {
        dim: s.dim,
        depth: s.depth,
        heads: s.heads,
    }
}

/// The graph of a dataset: explicit path, else the one in meta.json
/// (relative to the dataset directory).
fn load_graph(explicit: Option<&Path>, dataset_dir: &Path, meta: &DatasetMeta) -> Result<Digraph> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None if meta.graph.is_relative() => dataset_dir.join(&meta.graph),
        None => meta.graph.clone(),
    };
    Ok(Digraph::from_json(&read(&path)?)?)
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenGraph {
            nodes,
            edge_prob,
            seed,
            out,
        } => {
            let g = generate_random_dag(nodes, edge_prob, seed)?;
            write(&out_path(&out), &g.to_json())
        }
        Command::GenDataset {
            graph,
            paths_per_pair,
            train_fraction,
            seed,
            out,
        } => {
            let g = DirectedGraph::from_json(&read(&graph)?)?;
            let ds = build_path_dataset(
                &g,
                &DatasetConfig {
                    paths_per_pair,
                    train_fraction,
                    seed,
                },
            )?;
            let dir = out_path(&out);
            let graph_file = PathBuf::from("graph.json");
            write(&dir.join(&graph_file), &g.to_json())?;
            let meta = DatasetMeta {
                graph: graph_file,
                nodes: g.node_count(),
                seed,
                paths_per_pair: Some(paths_per_pair),
                train_fraction: Some(train_fraction),
                extra: Default::default(),
                degrees: Vec::new(),
            };
            Ok(ds.save(&dir, &meta)?)
        }
        Command::Train(args) => train(args),
        Command::Eval {
            checkpoint,
            dataset,
            graph,
            decode,
            out,
        } => {
            let model = MtpModel::load(&checkpoint)?;
            let (ds, meta) = PathDataset::load(&dataset)?;
            let g = load_graph(graph.as_deref(), &dataset, &meta)?;
            let report = evaluate(&model, &ds, &g, decode_of(decode))?;
            write(&out_path(&out), &report.to_json())?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Analyze { what } => analyze(what),
        Command::Simplified { what } => simplified(what),
        Command::Blocksworld { what } => blocksworld(what),
        Command::Run { config, out } => {
            let cfg: ExperimentConfig = serde_json::from_str(&read(&config)?)?;
            let run = run_cell(&cfg, 0, 0, |e| eprintln!("epoch {} loss {:.4}", e.epoch, e.total))?;
            run.save(&cfg, &out_path(&out).join(&cfg.run_id))?;
            println!("{}", run.report.to_json());
            Ok(())
        }
        Command::DefaultConfig => {
            println!("{}", to_json(&ExperimentConfig::default())?);
            Ok(())
        }
        Command::Sweep(args) => run_sweep(args),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let (ds, _) = PathDataset::load(&args.dataset)?;
    let arch: Architecture = args.arch.parse()?;
    let n = ds.vocab.nodes();
    let exp = ExperimentConfig {
        architecture: arch,
        model: shape_of(args.shape),
        ..ExperimentConfig::default()
    };
    let mut config = model_config(&exp, n);
    config.max_seq_len = args.max_seq_len.unwrap_or_else(|| default_max_len(n));
    let model = MtpModel::new(config, args.model_seed)?;
    let cfg = train_config(args.train);
    let out = train_model(model, &ds.train_tokens(), &cfg, |e| {
        eprintln!("epoch {} loss {:.4}", e.epoch, e.total);
    })?;
    let dir = out_path(&args.out);
    let manifest = serde_json::json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "dataset": args.dataset,
        "architecture": arch.to_string(),
        "model": out.model.config,
        "model_seed": args.model_seed,
        "train": cfg,
    });
    write(&dir.join("config.json"), &to_json(&manifest)?)?;
    out.model.save(&dir.join("checkpoint.json"))?;
    write(&dir.join("history.csv"), &history_csv(&out.history))
}

fn analyze(what: AnalyzeCommand) -> Result<()> {
    match what {
        AnalyzeCommand::Transfer {
            checkpoint,
            dataset,
            graph,
            step,
            projection,
            out_root,
            run_id,
        } => {
            let model = MtpModel::load(&checkpoint)?;
            let (_, meta) = PathDataset::load(&dataset)?;
            let g = load_graph(graph.as_deref(), &dataset, &meta)?;
            let projection = match projection {
                ProjectionArg::Raw => Projection::Raw,
                ProjectionArg::Composed => Projection::Composed,
            };
            let t = project_transfer(&model, step, projection)?;
            let adj = g.adjacency();
            let stats = entry_stats(&t, &[("adjacency", &adj)])?;
            let root = out_path(&out_root);
            export_csv(&root, &run_id, &format!("transfer{step}"), &t.to_csv())?;
            export_csv(&root, &run_id, "adjacency", &adj.to_csv())?;
            export_json(&root, &run_id, &format!("transfer{step}_stats"), &stats)?;
            println!("{}", to_json(&stats)?);
            Ok(())
        }
        AnalyzeCommand::Attention {
            checkpoint,
            dataset,
            out_root,
            run_id,
        } => {
            let model = MtpModel::load(&checkpoint)?;
            let (ds, _) = PathDataset::load(&dataset)?;
            let seqs: Vec<Vec<usize>> = ds.test.iter().map(|p| p.tokens(&ds.vocab)).collect();
            let maps = average_attention(&model, &seqs)?;
            let root = out_path(&out_root);
            for (l, layer) in maps.maps.iter().enumerate() {
                for (h, m) in layer.iter().enumerate() {
                    export_csv(&root, &run_id, &format!("attention_l{l}_h{h}"), &m.to_csv())?;
                }
            }
            let argmax: Vec<Vec<Vec<usize>>> = (0..maps.maps.len())
                .map(|l| (0..maps.maps[l].len()).map(|h| maps.row_argmax(l, h)).collect())
                .collect();
            let summary = serde_json::json!({
                "length": maps.length,
                "sequences": maps.sequences,
                "row_argmax": argmax,
            });
            export_json(&root, &run_id, "attention", &summary)?;
            println!("{}", to_json(&summary)?);
            Ok(())
        }
    }
}

fn simplified(what: SimplifiedCommand) -> Result<()> {
    match what {
        SimplifiedCommand::Train {
            nodes,
            edge_prob,
            seed,
            learn_transfer,
            steps,
            lr,
            one_token,
            out_root,
            run_id,
        } => {
            let cfg = SimplifiedExperiment {
                master_seed: seed,
                nodes,
                edge_prob,
                learn_transfer,
                train: SimplifiedTrainConfig {
                    steps,
                    lr,
                    two_token: !one_token,
                },
                ..SimplifiedExperiment::default()
            };
            let o = run_simplified(&cfg)?;
            let root = out_path(&out_root);
            for (name, m) in [("wm", &o.params.wm), ("wv", &o.params.wv), ("wt", &o.params.wt)] {
                export_csv(&root, &run_id, name, &m.to_csv())?;
            }
            for (name, m) in [("mask_wm", &o.masks.wm), ("mask_wv", &o.masks.wv)] {
                export_csv(&root, &run_id, name, &m.to_csv())?;
            }
            let obs = &o.dataset.observed;
            export_csv(&root, &run_id, "adjacency", &o.graph.adjacency().to_csv())?;
            export_csv(&root, &run_id, "observed_reach", &obs.reachability.to_csv())?;
            let summary = serde_json::json!({
                "config": cfg,
                "final_loss": o.history.last(),
                "wv": o.wv,
                "wm": o.wm,
                "wt": o.wt,
            });
            export_json(&root, &run_id, "summary", &summary)?;
            println!("{}", to_json(&summary)?);
            Ok(())
        }
        SimplifiedCommand::Verify { instances, vocab, seed } => {
            if vocab < 2 {
                bail!(Error::InvalidArgument("vocab must be at least 2".into()));
            }
            let mut rng = rng_from_seed(seed);
            let (mut violations, mut max_sum_error) = (0, 0.0f64);
            for _ in 0..instances {
                let (p, c) = random_instance(vocab, &mut rng);
                let r = verify_theorems(&p, &c)?;
                violations += r.violations;
                max_sum_error = max_sum_error.max(r.max_sum_error);
            }
            println!(
                "{}",
                serde_json::json!({"instances": instances, "violations": violations, "max_sum_error": max_sum_error})
            );
            if violations > 0 {
                bail!(Error::InvalidArgument(format!("{violations} sign violations")));
            }
            Ok(())
        }
        SimplifiedCommand::Gradcheck {
            instances,
            max_vocab,
            seed,
        } => {
            if max_vocab < 3 {
                bail!(Error::InvalidArgument("max vocab must be at least 3".into()));
            }
            let mut rng = rng_from_seed(seed);
            let mut worst = 0.0f64;
            for i in 0..instances {
                let (p, c) = random_instance(3 + i % (max_vocab - 2), &mut rng);
                worst = gradcheck(&p, &c, 1e-5)?.into_iter().fold(worst, f64::max);
            }
            println!(
                "{}",
                serde_json::json!({"instances": instances, "max_relative_error": worst})
            );
            Ok(())
        }
    }
}

fn blocksworld(what: BlocksworldCommand) -> Result<()> {
    match what {
        BlocksworldCommand::Enumerate { blocks, out } => {
            let sg = build_state_graph(blocks)?;
            sg.save(&out_path(&out))?;
            println!("{} states, {} edges", sg.states.len(), sg.graph.edge_count());
            Ok(())
        }
        BlocksworldCommand::Dataset {
            blocks,
            n_per_length,
            test_paths,
            seed,
            out,
        } => {
            let sg = build_state_graph(blocks)?;
            let cfg = BlocksworldConfig {
                n_per_length,
                test_paths,
                seed,
                ..BlocksworldConfig::default()
            };
            let ds = build_blocksworld_dataset(&sg.graph, &cfg)?;
            let dir = out_path(&out);
            sg.save(&dir)?;
            let mut extra = std::collections::BTreeMap::new();
            extra.insert("blocks".to_string(), serde_json::json!(blocks));
            extra.insert("n_per_length".to_string(), serde_json::json!(n_per_length));
            let meta = DatasetMeta {
                graph: "graph.json".into(),
                nodes: sg.states.len(),
                seed,
                paths_per_pair: None,
                train_fraction: None,
                extra,
                degrees: Vec::new(),
            };
            Ok(ds.save(&dir, &meta)?)
        }
    }
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg: SweepConfig = match &args.config {
        Some(path) => serde_json::from_str(&read(path)?)?,
        None => SweepConfig {
            base: ExperimentConfig {
                run_id: args.run_id.clone(),
                master_seed: args.seed,
                graph: GraphSpec::Random {
                    nodes: args.nodes,
                    edge_prob: args.edge_prob,
                },
                model: shape_of(args.shape),
                train: train_config(args.train),
                decode: decode_of(args.decode),
                ..ExperimentConfig::default()
            },
            architectures: args
                .archs
                .iter()
                .map(|a| a.parse())
                .collect::<std::result::Result<_, _>>()?,
            graphs: args.graphs,
            replicates: args.replicates,
        },
    };
    let dir = out_path(&args.out);
    let result = sweep(&cfg, Some(&dir))?;
    write(&dir.join("sweep.json"), &to_json(&cfg)?)?;
    let csv = result.to_csv();
    write(&dir.join("results.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
