//! Command-line entry point: train / eval / probe / prune / theory.
//!
//! Every run writes a resolved `config.toml` (train) and a machine-readable
//! `summary.json` under `--out`. Exit codes: 0 success (all requested
//! assertions passed), 1 assertion failure, 2 config error, 3 data error,
//! 4 numeric error, 5 io/checkpoint error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use layerwise::config::{CacheMode, DatasetKind, TrainConfig};
use layerwise::data::{load_cifar10, load_mnist, LabeledDataset};
use layerwise::error::{Error, Result};
use layerwise::metrics::{MetricsWriter, Record};
use layerwise::probe::{cnn_probe, linear_probe, ProbeConfig};
use layerwise::theory::{
    check_progressive_improvement, fit_growth_exponent, simulate_error_propagation,
    CascadeSimConfig,
};
use layerwise::trainer::{ensemble_evaluate, evaluate, train_greedy, train_greedy_pruned};

#[derive(Parser)]
#[command(name = "layerwise", about = "Greedy layer-by-layer CNN training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network layer by layer.
    Train(TrainArgs),
    /// Evaluate a checkpoint (per-layer or ensemble accuracy).
    Eval(EvalArgs),
    /// Linear or CNN separability probe over a checkpoint's representations.
    Probe(ProbeArgs),
    /// Prune the last trained layer of a checkpoint and fine-tune its head.
    Prune(PruneArgs),
    /// Structural verification: risk chain replay and cascade simulation.
    #[command(subcommand)]
    Theory(TheoryCommand),
}

#[derive(Args)]
struct TrainArgs {
    /// Named preset (e.g. cifar-k1, cifar-k1-reduced, mnist-prop31).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Full config file (TOML), alternative to --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for config snapshot, metrics, checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the auxiliary-problem depth k.
    #[arg(long)]
    k: Option<usize>,
    /// Override the block count J.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long = "epochs-per-layer")]
    epochs_per_layer: Option<usize>,
    /// Downsampling operator: invertible|stride|avg|max.
    #[arg(long)]
    downsample: Option<String>,
    /// Activation cache placement: mem|disk.
    #[arg(long)]
    cache: Option<String>,
    /// Extra dotted-key overrides, e.g. --set optim.lr0=0.05 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Prune each layer to this width right after it trains.
    #[arg(long = "prune-width")]
    prune_width: Option<usize>,
    /// Auxiliary fine-tune epochs after each prune (with --prune-width).
    #[arg(long = "finetune-epochs", default_value_t = 10)]
    finetune_epochs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based layer to evaluate; defaults to the deepest trained layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Evaluate the 2^j-weighted ensemble over all layers instead.
    #[arg(long)]
    ensemble: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based layer whose representation is probed.
    #[arg(long)]
    layer: usize,
    /// linear | cnn
    #[arg(long)]
    kind: String,
    /// Hidden layers of the CNN probe (1 or 2).
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// CNN probe width.
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on probe samples from each split (desk-scale control).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Layer to prune; must be the deepest trained layer.
    #[arg(long)]
    layer: usize,
    #[arg(long = "target-width")]
    target_width: usize,
    #[arg(long = "finetune-epochs", default_value_t = 20)]
    finetune_epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Replay a checkpoint's recorded risks and assert the non-increasing chain.
    Prop1 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the per-layer-error cascade and check the closed-form bound.
    Prop2 {
        /// Cascade depths, comma separated.
        #[arg(long = "J", value_delimiter = ',', default_value = "2,4,8,16,32")]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long = "bias-bound", default_value_t = 1.0)]
        bias_bound: f64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Align perturbations with the current deviation.
        #[arg(long = "worst-case")]
        worst_case: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_data(kind: DatasetKind, dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    match kind {
        DatasetKind::Cifar10 => load_cifar10(dir),
        DatasetKind::Mnist => load_mnist(dir),
        DatasetKind::ImageNet => Err(Error::Data(
            "no ImageNet ingestion pipeline; this preset provides architecture shapes only".into(),
        )),
    }
}

fn write_summary(dir: &Path, summary: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(summary)
            .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?,
    )?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<bool> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => TrainConfig::preset(name)?,
        (None, Some(path)) => TrainConfig::load_toml(path)?,
        (None, None) => {
            return Err(Error::Config("one of --preset or --config is required".into()))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.k {
        cfg.apply_override("net.k", &k.to_string())?;
    }
    if let Some(layers) = args.layers {
        cfg.apply_override("net.layers", &layers.to_string())?;
    }
    if let Some(e) = args.epochs_per_layer {
        cfg.apply_override("optim.epochs_per_layer", &e.to_string())?;
    }
    if let Some(ds) = &args.downsample {
        cfg.apply_override("net.downsample_kind", ds)?;
    }
    if let Some(cache) = &args.cache {
        cfg.apply_override("cache_mode", cache)?;
    }
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply_override(key, value)?;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&args.out)?;
    cfg.save_toml(&args.out.join("config.toml"))?;
    let (train, test) = load_data(cfg.dataset, &args.data)?;
    let mut metrics = MetricsWriter::create(&args.out.join("metrics.jsonl"))?;

    let (net, prune_records) = match args.prune_width {
        Some(width) => {
            let (net, records) = train_greedy_pruned(
                &cfg,
                &train,
                &test,
                width,
                args.finetune_epochs,
                &mut metrics,
                Some(&args.out),
            )?;
            (net, records)
        }
        None => (
            train_greedy(&cfg, &train, &test, &mut metrics, Some(&args.out))?,
            vec![],
        ),
    };

    let layers: Vec<serde_json::Value> = net
        .results
        .iter()
        .map(|r| {
            json!({
                "layer": r.layer,
                "train_risk": r.train_risk,
                "train_acc": r.train_acc,
                "test_top1": r.test_top1,
                "test_top5": r.test_top5,
                "best_epoch": r.best_epoch,
                "identity_init": r.identity_init,
            })
        })
        .collect();
    let (ens_top1, ens_top5) = ensemble_evaluate(&net, &test, cfg.optim.batch_size);
    let summary = json!({
        "command": "train",
        "run_id": cfg.run_id(),
        "layers": layers,
        "ensemble_top1": ens_top1,
        "ensemble_top5": ens_top5,
        "prune_records": prune_records,
        "checkpoint": args.out.join("checkpoint.glwc"),
    });
    write_summary(&args.out, &summary)?;
    for r in &net.results {
        println!(
            "layer {}: train risk {:.4}, train acc {:.2}%, test top1 {:.2}%",
            r.layer, r.train_risk, r.train_acc, r.test_top1
        );
    }
    println!("ensemble: top1 {ens_top1:.2}%, top5 {ens_top5:.2}%");
    Ok(true)
}

fn cmd_eval(args: &EvalArgs) -> Result<bool> {
    let net = layerwise::checkpoint::load(&args.checkpoint)?;
    let (_, test) = load_data(net.config.dataset, &args.data)?;
    let batch = net.config.optim.batch_size;
    let summary = if args.ensemble {
        let (top1, top5) = ensemble_evaluate(&net, &test, batch);
        println!("ensemble: top1 {top1:.2}%, top5 {top5:.2}%");
        json!({"command": "eval", "ensemble": true, "top1": top1, "top5": top5})
    } else {
        let layer = args.layer.unwrap_or(net.trained_layers() - 1);
        if layer >= net.trained_layers() {
            return Err(Error::Config(format!(
                "layer {layer} not trained (checkpoint has {})",
                net.trained_layers()
            )));
        }
        let (top1, top5) = evaluate(&net, &test, layer, batch);
        println!("layer {layer}: top1 {top1:.2}%, top5 {top5:.2}%");
        json!({"command": "eval", "layer": layer, "top1": top1, "top5": top5})
    };
    if let Some(out) = &args.out {
        write_summary(out, &summary)?;
    }
    Ok(true)
}

/// Advance depth-0 caches through the frozen prefix to the probed layer.
fn caches_at_depth(
    net: &layerwise::trainer::GreedyNet,
    train: &LabeledDataset,
    test: &LabeledDataset,
    depth: usize,
) -> Result<(layerwise::cache::ActivationCache, layerwise::cache::ActivationCache)> {
    let mode = CacheMode::Mem;
    let mut ctr = layerwise::cache::ActivationCache::from_inputs(
        &train.images,
        net.spec.input_downsample,
        mode,
        None,
    )?;
    let mut cte = layerwise::cache::ActivationCache::from_inputs(
        &test.images,
        net.spec.input_downsample,
        mode,
        None,
    )?;
    for _ in 0..depth {
        ctr = ctr.advance(&net.blocks, &net.spec.blocks, mode, None)?;
        cte = cte.advance(&net.blocks, &net.spec.blocks, mode, None)?;
    }
    Ok((ctr, cte))
}

fn cmd_probe(args: &ProbeArgs) -> Result<bool> {
    let net = layerwise::checkpoint::load(&args.checkpoint)?;
    if args.layer >= net.trained_layers() {
        return Err(Error::Config(format!(
            "layer {} not trained (checkpoint has {})",
            args.layer,
            net.trained_layers()
        )));
    }
    let (train, test) = load_data(net.config.dataset, &args.data)?;
    let train = match args.subset {
        Some(n) => train.subset(n),
        None => train,
    };
    let test = match args.subset {
        Some(n) => test.subset(n),
        None => test,
    };
    let (cache_train, cache_test) = caches_at_depth(&net, &train, &test, args.layer + 1)?;
    let cfg = ProbeConfig {
        width: args.width,
        epochs: args.epochs,
        seed: args.seed,
        ..ProbeConfig::default()
    };
    let report = match args.kind.as_str() {
        "linear" => linear_probe(
            args.layer,
            &cache_train,
            &train.labels,
            &cache_test,
            &test.labels,
            net.spec.class_count,
            &cfg,
        )?,
        "cnn" => cnn_probe(
            args.layer,
            &cache_train,
            &train.labels,
            &cache_test,
            &test.labels,
            net.spec.class_count,
            args.p,
            &cfg,
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown probe kind '{other}' (expected linear|cnn)"
            )))
        }
    };
    println!(
        "probe layer {} kind {:?} p {}: train {:.2}%, test {:.2}%",
        report.layer, report.kind, report.p, report.train_acc, report.test_acc
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let mut metrics = MetricsWriter::append_to(&out.join("metrics.jsonl"))?;
        metrics.append(&Record::Probe(report.clone()))?;
        metrics.flush()?;
        write_summary(
            out,
            &json!({"command": "probe", "report": report}),
        )?;
    }
    Ok(true)
}

fn cmd_prune(args: &PruneArgs) -> Result<bool> {
    let mut net = layerwise::checkpoint::load(&args.checkpoint)?;
    let last = net.trained_layers() - 1;
    if args.layer != last {
        return Err(Error::Config(format!(
            "only the deepest trained layer ({last}) can be pruned post hoc; \
             later layers would hold stale input widths"
        )));
    }
    let (train, test) = load_data(net.config.dataset, &args.data)?;
    let train = match net.config.train_subset {
        Some(n) => train.subset(n),
        None => train,
    };
    let (cache_train, cache_test) = caches_at_depth(&net, &train, &test, args.layer)?;
    let (block, aux, bspec, aspec, record) = layerwise::prune::prune_and_finetune(
        &net.blocks[args.layer],
        &net.aux[args.layer],
        &net.spec.blocks[args.layer],
        &net.spec.aux[args.layer],
        &cache_train,
        &train.labels,
        &cache_test,
        &test.labels,
        args.target_width,
        args.finetune_epochs,
        &net.config.optim,
        net.config.seed,
    )?;
    net.blocks[args.layer] = block;
    net.aux[args.layer] = aux;
    net.spec.blocks[args.layer] = bspec;
    net.spec.aux[args.layer] = aspec;

    std::fs::create_dir_all(&args.out)?;
    layerwise::checkpoint::save(&net, &args.out.join("checkpoint.glwc"))?;
    let mut metrics = MetricsWriter::append_to(&args.out.join("metrics.jsonl"))?;
    metrics.append(&Record::Prune(record.clone()))?;
    metrics.flush()?;
    println!(
        "pruned layer {} from {} to {} filters: test acc {:.2}% -> {:.2}% (after fine-tune {:.2}%)",
        record.layer,
        record.width_before,
        record.width_after,
        record.acc_before,
        record.acc_after_prune,
        record.acc_after
    );
    write_summary(&args.out, &json!({"command": "prune", "record": record}))?;
    Ok(true)
}

fn cmd_theory(cmd: &TheoryCommand) -> Result<bool> {
    match cmd {
        TheoryCommand::Prop1 { checkpoint, out } => {
            let net = layerwise::checkpoint::load(checkpoint)?;
            let report = check_progressive_improvement(&net);
            for e in &report.entries {
                println!(
                    "layer {}: train risk {:.6} [{}]",
                    e.layer,
                    e.train_risk,
                    if !e.applicable {
                        "not applicable"
                    } else if e.violation {
                        "VIOLATION"
                    } else {
                        "ok"
                    }
                );
            }
            if let Some(out) = out {
                write_summary(out, &json!({"command": "theory-prop1", "report": report}))?;
            }
            Ok(report.pass())
        }
        TheoryCommand::Prop2 {
            depths,
            eps,
            trials,
            bias_bound,
            dim,
            seed,
            worst_case,
            out,
        } => {
            let mut rows = Vec::new();
            let mut all_pass = true;
            let mut curve = Vec::new();
            for &depth in depths {
                let cfg = CascadeSimConfig {
                    depth,
                    dim: *dim,
                    bias_bound: *bias_bound,
                    eps: *eps,
                    trials: *trials,
                    seed: *seed,
                    worst_case: *worst_case,
                };
                let report = simulate_error_propagation(&cfg)?;
                all_pass &= report.pass();
                curve.push((depth as f64, report.mean_final_deviation));
                println!(
                    "J={depth}: mean final deviation {:.3e}, violations {}",
                    report.mean_final_deviation, report.violations
                );
                rows.push(json!({
                    "depth": depth,
                    "mean_final_deviation": report.mean_final_deviation,
                    "violations": report.violations,
                }));
            }
            let slope = if depths.len() >= 2 && *eps > 0.0 {
                let s = fit_growth_exponent(&curve);
                println!("fitted growth exponent: {s:.3}");
                if s > 2.2 {
                    all_pass = false;
                }
                Some(s)
            } else {
                None
            };
            if let Some(out) = out {
                write_summary(
                    out,
                    &json!({"command": "theory-prop2", "rows": rows, "growth_exponent": slope}),
                )?;
            }
            Ok(all_pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Prune(args) => cmd_prune(args),
        Command::Theory(cmd) => cmd_theory(cmd),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("requested assertions failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
