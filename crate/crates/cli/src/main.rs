//! `shelfnet`: inspect ShelfNet graphs, count their cost and paths, and
//! train, evaluate or time toy models.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use shelfnet::analysis::{count_flops, enumerate_paths, format_count, PathMode, PathReport, DEFAULT_PATH_CAP};
use shelfnet::arch::{BlockGraph, ExecutableNet, InitPolicy, Variant};
use shelfnet::tensor::{kernels, Sgd};
use shelfnet::train::{
    bench_forward, evaluate, load_checkpoint, multi_scale_predict, save_checkpoint, synth_dataset, train_loop, Checkpoint,
    ConfusionMatrix, SynthConfig, IGNORE_INDEX,
};

use config::{DataSection, ExperimentConfig};

#[derive(Parser)]
#[command(name = "shelfnet", version, about = "ShelfNet architecture workbench")]
struct Cli {
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Output directory for runs, checkpoints and datasets.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ArchArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    /// Separate kernels for the two convolutions of every S-block.
    #[arg(long)]
    unshared: bool,
    /// Architecture JSON to use instead of building one from the config.
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Block table with parameter and MAC counts.
    Summarize {
        #[command(flatten)]
        arch: ArchArgs,
        /// `HxW`; the config's input size by default.
        #[arg(long)]
        input: Option<String>,
        /// Also write the architecture JSON here.
        #[arg(long)]
        emit_arch: Option<PathBuf>,
    },
    /// Source-to-sink path count, listing and longest path.
    Paths {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        sink: Option<String>,
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = DEFAULT_PATH_CAP)]
        cap: usize,
        #[arg(long)]
        longest: bool,
    },
    /// SGD on the configured dataset; writes a trace and checkpoints.
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        /// Steps to run; by default up to the end of the schedule.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class IoU and mIoU of a checkpoint on the validation set.
    Eval {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated scales, e.g. `0.5,0.75,1,1.25,1.5,1.75,2`.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Also average over horizontally mirrored inputs.
        #[arg(long)]
        flip: bool,
    },
    /// Single-image forward latency.
    Bench {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthetic dataset files.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Writes NNNN.ppm / NNNN.pgm pairs.
    Gen {
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Index of the first image in the seed's stream.
        #[arg(long, default_value_t = 0)]
        first: usize,
        /// Target directory; `<out>/dataset` by default.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let json = cli.json;
    match cli.cmd {
        Cmd::Summarize { arch, input, emit_arch } => summarize(&mut cfg, &arch, input.as_deref(), emit_arch.as_deref(), json),
        Cmd::Paths {
            arch,
            source,
            sink,
            list,
            cap,
            longest,
        } => paths(&mut cfg, &arch, source.as_deref(), sink.as_deref(), list.then_some(cap), longest, json),
        Cmd::Train { arch, steps, resume } => train(&mut cfg, &arch, steps, resume.as_deref(), json),
        Cmd::Eval {
            arch,
            checkpoint,
            scales,
            flip,
        } => eval(&mut cfg, &arch, &checkpoint, scales, flip, json),
        Cmd::Bench {
            arch,
            input,
            reps,
            checkpoint,
        } => bench(&mut cfg, &arch, input.as_deref(), reps, checkpoint.as_deref(), json),
        Cmd::Dataset {
            cmd: DatasetCmd::Gen { count, first, dir },
        } => dataset_gen(&cfg, count, first, dir, json),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).with_context(|| format!("size {s:?} is not HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

/// Applies the architecture flags to `cfg` and returns the graph.
fn resolve_graph(cfg: &mut ExperimentConfig, a: &ArchArgs) -> Result<BlockGraph> {
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(b) = &a.backbone {
        cfg.backbone = b.clone();
    }
    if let Some(k) = a.classes {
        cfg.num_classes = k;
    }
    if a.unshared {
        cfg.shared_weights = false;
    }
    match &a.arch {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading architecture {}", p.display()))?;
            Ok(BlockGraph::from_json(&text).with_context(|| format!("architecture {}", p.display()))?)
        }
        None => cfg.graph(),
    }
}

fn emit<S: Serialize>(json: bool, value: &S, text: impl FnOnce() -> String) {
    let body = if json {
        serde_json::to_string_pretty(value).expect("report serializes") + "\n"
    } else {
        text()
    };
    // A closed pipe (`| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(body.as_bytes());
}

fn summarize(cfg: &mut ExperimentConfig, a: &ArchArgs, input: Option<&str>, emit_arch: Option<&Path>, json: bool) -> Result<()> {
    let graph = resolve_graph(cfg, a)?;
    let (h, w) = match input {
        Some(s) => parse_size(s)?,
        None => cfg.input(),
    };
    let report = count_flops(&graph, h, w)?;
    if let Some(p) = emit_arch {
        fs::write(p, graph.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(json, &report, || {
        let name = match (graph.variant, &graph.backbone) {
            (Some(v), Some(b)) => format!("{v} / {}", b.name()),
            (Some(v), None) => v.to_string(),
            (None, Some(b)) => b.name(),
            (None, None) => "graph".into(),
        };
        format!(
            "{name}: {} blocks, {} edges, {} params, {} MACs\n{}",
            graph.nodes.len(),
            graph.edges.len(),
            format_count(report.total_params),
            format_count(report.total_macs),
            report.to_table()
        )
    });
    Ok(())
}

#[derive(Serialize)]
struct PathsOutput {
    graph_hash: String,
    report: PathReport,
}

fn paths(
    cfg: &mut ExperimentConfig,
    a: &ArchArgs,
    source: Option<&str>,
    sink: Option<&str>,
    list_cap: Option<usize>,
    longest: bool,
    json: bool,
) -> Result<()> {
    let graph = resolve_graph(cfg, a)?;
    let s = source.map_or(Ok(graph.source), |n| graph.resolve(n))?;
    let t = sink.map_or(Ok(graph.sink), |n| graph.resolve(n))?;
    let mode = list_cap.map_or(PathMode::Count, |cap| PathMode::List { cap });
    let report = enumerate_paths(&graph, s, t, mode)?;
    let join = |p: &[shelfnet::arch::BlockId]| p.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" -> ");
    let out = PathsOutput {
        graph_hash: graph.hash(),
        report,
    };
    emit(json, &out, || {
        let r = &out.report;
        let mut text = format!("paths {} -> {}: {}\n", r.source, r.sink, r.path_count);
        if let Some(ps) = &r.paths {
            for p in ps {
                text += &format!("  {}\n", join(p));
            }
        }
        if longest {
            text += &format!("longest: {} blocks\n  {}\n", r.longest_path_length, join(&r.longest_path));
        }
        text
    });
    Ok(())
}

fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("ckpt-{iter:06}.shlf"))
}

fn train(cfg: &mut ExperimentConfig, a: &ArchArgs, steps: Option<usize>, resume: Option<&Path>, json: bool) -> Result<()> {
    let graph = resolve_graph(cfg, a)?;
    cfg.validate()?;
    let mut net = ExecutableNet::<f32>::instantiate(graph, InitPolicy::default(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.train_config(0).sgd);
    let mut start = 0;
    if let Some(p) = resume {
        let ckpt = load_checkpoint::<f32>(p).with_context(|| format!("checkpoint {}", p.display()))?;
        ckpt.restore(&mut net, &mut opt)?;
        start = ckpt.iteration as usize;
    }
    let total = cfg.train.total_iter;
    let steps = steps.unwrap_or(total.saturating_sub(start));
    if steps == 0 || start + steps > total {
        bail!("cannot run {steps} steps from iteration {start} with total_iter {total}");
    }
    let (train_set, val_set) = cfg.datasets()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(dir.join("arch.json"), net.graph().to_json())?;
    let trace_path = dir.join("trace.jsonl");
    let trace_file = if resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&trace_path)
    } else {
        File::create(&trace_path)
    }
    .with_context(|| format!("opening {}", trace_path.display()))?;
    let mut trace = BufWriter::new(trace_file);

    let every = match cfg.train.checkpoint_every {
        0 => steps,
        n => n,
    };
    let mut records = Vec::new();
    let mut iter = start;
    let end = start + steps;
    let mut seconds = 0.0;
    while iter < end {
        // Chunks end on multiples of `every`, so checkpoints land on the
        // same iterations whether or not the run was resumed.
        let chunk = (every - iter % every).min(end - iter);
        let report = train_loop(&mut net, &mut opt, &train_set, Some(&val_set), &cfg.train_config(chunk), iter, Some(&mut trace))?;
        trace.flush()?;
        iter = report.end_iter;
        seconds += report.seconds;
        let ckpt = Checkpoint::capture(&net, &opt, iter as u64);
        save_checkpoint(&checkpoint_path(&dir, iter), &ckpt)?;
        save_checkpoint(&dir.join("last.shlf"), &ckpt)?;
        if !json {
            let r = report.records.last().expect("at least one step");
            let miou = r.miou.map_or(String::new(), |m| format!(" miou {m:.4}"));
            println!("iter {iter:>6}  lr {:.5}  loss {:.4}{miou}", r.lr, r.loss);
        }
        records.extend(report.records);
    }
    let last = records.last().expect("at least one step");
    let summary = serde_json::json!({
        "graph_hash": net.graph().hash(),
        "start_iter": start,
        "end_iter": end,
        "final_loss": last.loss,
        "final_miou": last.miou,
        "seconds": seconds,
        "checkpoint": dir.join("last.shlf"),
        "trace": trace_path,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    emit(json, &summary, || {
        format!(
            "trained {start}..{end} in {seconds:.1}s; final loss {:.4}, val mIoU {}\ncheckpoint {}\n",
            last.loss,
            last.miou.map_or("-".into(), |m| format!("{m:.4}")),
            dir.join("last.shlf").display()
        )
    });
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    graph_hash: String,
    iteration: u64,
    scales: Vec<f64>,
    flip: bool,
    iou: Vec<Option<f64>>,
    miou: f64,
    pixel_accuracy: f64,
}

fn eval(cfg: &mut ExperimentConfig, a: &ArchArgs, checkpoint: &Path, scales: Option<Vec<f64>>, flip: bool, json: bool) -> Result<()> {
    let graph = resolve_graph(cfg, a)?;
    cfg.validate()?;
    let ckpt = load_checkpoint::<f32>(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let mut net = ExecutableNet::<f32>::instantiate(graph, InitPolicy::default(), cfg.seed)?;
    let mut opt = Sgd::new(ckpt.sgd);
    ckpt.restore(&mut net, &mut opt)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (_, val) = cfg.datasets()?;
    let scales = scales.unwrap_or_else(|| vec![1.0]);
    let chunk = cfg.train.batch_size.max(1);
    let cm = if scales == [1.0] && !flip {
        evaluate(&mut net, &val, chunk)?
    } else {
        let mut cm = ConfusionMatrix::new(val.num_classes, IGNORE_INDEX);
        let idx: Vec<usize> = (0..val.len()).collect();
        for part in idx.chunks(chunk) {
            let sub = val.select(part);
            let probs = multi_scale_predict(&mut net, &sub.images, &scales, flip)?;
            cm.update(&kernels::argmax_channels(&probs), &sub.labels)?;
        }
        cm
    };
    let out = EvalOutput {
        graph_hash: net.graph().hash(),
        iteration: ckpt.iteration,
        scales,
        flip,
        iou: cm.iou(),
        miou: cm.miou(),
        pixel_accuracy: cm.pixel_accuracy(),
    };
    emit(json, &out, || {
        let mut text = String::new();
        for (k, iou) in out.iou.iter().enumerate() {
            text += &format!("class {k:>3}  IoU {}\n", iou.map_or("-".into(), |v| format!("{v:.4}")));
        }
        text + &format!("mIoU {:.4}  pixel accuracy {:.4}\n", out.miou, out.pixel_accuracy)
    });
    Ok(())
}

fn bench(cfg: &mut ExperimentConfig, a: &ArchArgs, input: Option<&str>, reps: usize, checkpoint: Option<&Path>, json: bool) -> Result<()> {
    let graph = resolve_graph(cfg, a)?;
    let size = match input {
        Some(s) => parse_size(s)?,
        None => cfg.input(),
    };
    let mut net = ExecutableNet::<f32>::instantiate(graph, InitPolicy::default(), cfg.seed)?;
    if let Some(p) = checkpoint {
        let ckpt = load_checkpoint::<f32>(p)?;
        let mut opt = Sgd::new(ckpt.sgd);
        ckpt.restore(&mut net, &mut opt)?;
    }
    let stats = bench_forward(&mut net, size, reps)?;
    let out = serde_json::json!({ "graph_hash": net.graph().hash(), "stats": stats });
    emit(json, &out, || {
        format!(
            "{}x{}  {} reps  mean {:.3} ms  median {:.3} ms  std {:.3} ms  min {:.3} ms\n{} MACs  {:.2} GMAC/s\n",
            size.0,
            size.1,
            stats.repetitions,
            stats.mean * 1e3,
            stats.median * 1e3,
            stats.stddev * 1e3,
            stats.min * 1e3,
            format_count(stats.macs),
            stats.macs_per_second / 1e9
        )
    });
    Ok(())
}

fn dataset_gen(cfg: &ExperimentConfig, count: usize, first: usize, dir: Option<PathBuf>, json: bool) -> Result<()> {
    let generator = match &cfg.data {
        DataSection::Synthetic { generator, .. } => generator.clone(),
        DataSection::Directory { .. } => SynthConfig::default(),
    };
    let dir = dir.unwrap_or_else(|| cfg.out_dir.join("dataset"));
    let batch = synth_dataset::<f32>(cfg.seed, first, count, cfg.input(), cfg.num_classes, &generator)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    shelfnet::train::save_dataset(&dir, &batch)?;
    let out = serde_json::json!({ "dir": dir, "count": count, "provenance": batch.provenance });
    emit(json, &out, || format!("wrote {count} image/label pairs to {}\n", dir.display()));
    Ok(())
}
