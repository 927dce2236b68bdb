//! The `distortbench` command line.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use distortbench::classifier::{
    read_toy_weights, serve, write_toy_weights, Classifier, ClassifierHandle, RemoteClassifier,
};
use distortbench::filters::{calibrate, mean_application_l2, DistortionLedger, FilterBank};
use distortbench::generator::{
    build_bank, build_env, filter_sets, generate_split, goal_from_config, manifest_path, new_agent, read_manifest,
    train_agent, Dataset, RunConfig, SplitManifest,
};
use distortbench::metrics::{
    aggregate, attack_stats, error_plot_svg, error_rates, l2_match_check, mean_corruption_error, mean_l2_by_severity,
    transfer_matrix, write_error_tables_csv, write_transfer_csv, ErrorTable, VictimSplits,
};
use distortbench::sensitivity::{scan, write_heatmap_csv, ScanInput};
use distortbench::tensor::{partition_patches, Shape};
use distortbench::toy::{toy_dataset, toy_model, ToySpec};

pub use config::resolve_config;

pub const ENDPOINT_ENV: &str = "DISTORTBENCH_ENDPOINT";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "agent.dbagt";

#[derive(Debug, Parser)]
#[command(name = "distortbench", version, about = "Generate and evaluate natural-filter adversarial benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// host:port of a classifier server; falls back to the config, then $DISTORTBENCH_ENDPOINT.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// `toy:<weights-file>` or `remote`.
    #[arg(long)]
    pub victim: Option<String>,
    /// Directory holding labels.csv and the images.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train agents and write one benchmark split per filter set.
    Generate(Common),
    /// Train agents and save their checkpoints.
    TrainAgent(Common),
    /// Fit every configured filter to the common per-application L2.
    Calibrate(Common),
    /// Corruption error of a model on generated splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Split manifest or its directory; repeatable.
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Model to evaluate (default: the configured victim).
        #[arg(long)]
        model: Option<String>,
        /// Reference mean L2 per severity, comma separated.
        #[arg(long, value_delimiter = ',')]
        reference_l2: Vec<f64>,
    },
    /// Accuracy of several models on splits generated against each other.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// `victim=path/to/split`; repeat a victim to average over its filters.
        #[arg(long = "split", required = true)]
        splits: Vec<String>,
        /// `name=toy:<file>` or `name=remote[:host:port]`; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
    /// Per-patch sensitivity of one clean sample, as CSV.
    SensitivityMap {
        #[command(flatten)]
        common: Common,
        /// Sample index in the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Serve a toy linear classifier over the wire protocol.
    ServeToy {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long, default_value_t = distortbench::classifier::DEFAULT_MAX_BATCH)]
        max_batch: usize,
    },
    /// Write a random toy victim and an attackable dataset for it.
    MakeToy {
        #[arg(long, default_value = "toy")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        // A second call in the same process keeps the first pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialized");
        }
    }
    Ok(())
}

/// Config from file and overrides, with the dedicated flags applied last.
pub fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &common.victim {
        cfg.victim = Some(v.clone());
    }
    if let Some(e) = &common.endpoint {
        cfg.endpoint = Some(e.clone());
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn endpoint(cfg: &RunConfig) -> Result<String> {
    cfg.endpoint
        .clone()
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()))
        .ok_or_else(|| anyhow!("remote victim needs --endpoint, `endpoint` in the config or ${ENDPOINT_ENV}"))
}

/// Opens a classifier from `toy:<file>`, `remote` or `remote:<host:port>`.
pub fn open_classifier(spec: &str, id: Option<&str>, cfg: &RunConfig, shape: Shape) -> Result<ClassifierHandle> {
    let (default_id, backend): (String, Arc<dyn Classifier>) = if let Some(path) = spec.strip_prefix("toy:") {
        let path = Path::new(path);
        let model = read_toy_weights(path)
            .with_context(|| format!("loading toy weights {}", path.display()))?
            .with_shape(shape)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "toy".into());
        (id, Arc::new(model))
    } else if spec == "remote" || spec.starts_with("remote:") {
        let ep = match spec.strip_prefix("remote:") {
            Some(ep) => ep.to_string(),
            None => endpoint(cfg)?,
        };
        let remote = RemoteClassifier::connect(&ep, shape).with_context(|| format!("connecting to {ep}"))?;
        ("remote".to_string(), Arc::new(remote))
    } else {
        bail!("unknown victim `{spec}`; expected toy:<weights-file> or remote");
    };
    let id = id.map(str::to_string).unwrap_or(default_id);
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        bail!("victim id `{id}` cannot name a directory");
    }
    Ok(ClassifierHandle::new(id, backend).with_max_batch(cfg.max_batch))
}

fn victim(cfg: &RunConfig, dataset: &Dataset) -> Result<ClassifierHandle> {
    let spec = cfg.victim.as_deref().ok_or_else(|| anyhow!("no victim; pass --victim or set `victim`"))?;
    open_classifier(spec, cfg.victim_id.as_deref(), cfg, dataset.shape)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dataset.as_deref().ok_or_else(|| anyhow!("no dataset; pass --dataset or set `dataset`"))?;
    Dataset::load(Path::new(dir)).with_context(|| format!("loading dataset {dir}"))
}

/// Writes the resolved config (with its hash) into `out`.
fn record_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = format!("# config hash {}\n{}", cfg.hash(), config::render_config(cfg)?);
    fs::write(out.join(CONFIG_FILE), text)?;
    Ok(())
}

fn write_summary(out: &Path, summary: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => generate(&common),
        Command::TrainAgent(common) => train(&common),
        Command::Calibrate(common) => calibrate_filters(&common),
        Command::Evaluate { common, manifests, model, reference_l2 } => {
            evaluate(&common, &manifests, model.as_deref(), &reference_l2)
        }
        Command::Transfer { common, splits, models } => transfer(&common, &splits, &models),
        Command::SensitivityMap { common, index } => sensitivity_map(&common, index),
        Command::ServeToy { weights, listen, max_batch } => serve_toy(&weights, &listen, max_batch),
        Command::MakeToy { out, samples, size, channels, classes, seed } => {
            let spec = ToySpec { shape: Shape::new(channels, size, size), num_classes: classes, ..ToySpec::default() };
            make_toy(&out, &spec, samples, seed)
        }
    }
}

fn generate(common: &Common) -> Result<()> {
    init_workers(common.workers)?;
    let cfg = run_config(common)?;
    record_config(&common.out, &cfg)?;
    let data = dataset(&cfg)?;
    let classifier = victim(&cfg, &data)?;
    let bank = build_bank(&cfg, &data)?;
    let mut splits = Vec::new();
    for (name, filters) in filter_sets(&cfg, &bank)? {
        log::info!("generating {} / {name}", classifier.id());
        let (_, summary, agent) = generate_split(&cfg, &classifier, &bank, &data, &name, filters, &common.out)?;
        let ckpt = common.out.join(classifier.id()).join(&name).join(CHECKPOINT_FILE);
        agent.net().write_checkpoint(fs::File::create(&ckpt)?, cfg.hash_u64())?;
        println!(
            "{}/{name}: {}/{} successes, mean L2 {:.4}, mean queries {:.1}",
            summary.victim, summary.successes, summary.attempted, summary.mean_l2, summary.mean_queries
        );
        splits.push(summary);
    }
    write_summary(&common.out, &json!({ "command": "generate", "config_hash": cfg.hash(), "splits": splits }))
}

fn train(common: &Common) -> Result<()> {
    init_workers(common.workers)?;
    let cfg = run_config(common)?;
    record_config(&common.out, &cfg)?;
    let data = dataset(&cfg)?;
    let classifier = victim(&cfg, &data)?;
    let bank = build_bank(&cfg, &data)?;
    let mut agents = Vec::new();
    for (name, filters) in filter_sets(&cfg, &bank)? {
        let env = build_env(&cfg, &classifier, &bank, filters, &data)?;
        let mut agent = new_agent(&cfg, &env)?;
        let report = train_agent(&env, &data, cfg.train_epochs, &mut agent, cfg.seed)?;
        let dir = common.out.join(classifier.id()).join(&name);
        fs::create_dir_all(&dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        agent.net().write_checkpoint(fs::File::create(&ckpt)?, cfg.hash_u64())?;
        println!("{name}: {} episodes, {} successes -> {}", report.episodes, report.successes, ckpt.display());
        agents.push(json!({ "filter": name, "checkpoint": ckpt.display().to_string(), "report": report }));
    }
    write_summary(&common.out, &json!({ "command": "train-agent", "config_hash": cfg.hash(), "agents": agents }))
}

fn calibrate_filters(common: &Common) -> Result<()> {
    init_workers(common.workers)?;
    let cfg = run_config(common)?;
    record_config(&common.out, &cfg)?;
    let data = dataset(&cfg)?;
    let grid = partition_patches(data.shape, cfg.patch_size)?;
    let images: Vec<_> = data.samples.iter().map(|s| (*s.image).clone()).collect();
    let base = cfg.filter_params();
    let mut fitted = base;
    let mut rows = Vec::new();
    for name in &cfg.filters {
        let filter = FilterBank::new(base)?.resolve(name)?;
        let before = mean_application_l2(&FilterBank::new(base)?, filter, &images, &grid, cfg.seed)?;
        let params = calibrate(filter, &fitted, &images, &grid, cfg.epsilon0, cfg.seed)?;
        let after = mean_application_l2(&FilterBank::new(params)?, filter, &images, &grid, cfg.seed)?;
        fitted = params;
        println!("{name}: per-application L2 {before:.5} -> {after:.5}");
        rows.push(json!({ "filter": name, "mean_l2_before": before, "mean_l2_after": after }));
    }
    let snippet = format!(
        "noise_sigma = {}\nblur_sigma = {}\nbrightness_delta = {}\ndeadpixel_fraction = {}\nepsilon0 = {}\n",
        fitted.noise_sigma, fitted.blur_sigma, fitted.brightness_delta, fitted.deadpixel_fraction, fitted.epsilon0
    );
    fs::write(common.out.join("calibrated.toml"), snippet)?;
    write_summary(
        &common.out,
        &json!({ "command": "calibrate", "config_hash": cfg.hash(), "target": cfg.epsilon0, "filters": rows, "params": fitted }),
    )
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<(SplitManifest, PathBuf)>> {
    paths
        .iter()
        .map(|p| {
            let file = manifest_path(p);
            let m = read_manifest(&file).with_context(|| format!("reading {}", file.display()))?;
            Ok((m, file))
        })
        .collect()
}

fn evaluate(common: &Common, manifests: &[PathBuf], model: Option<&str>, reference_l2: &[f64]) -> Result<()> {
    init_workers(common.workers)?;
    let cfg = run_config(common)?;
    record_config(&common.out, &cfg)?;
    let data = dataset(&cfg)?;
    let classifier = match model {
        Some(spec) => open_classifier(spec, None, &cfg, data.shape)?,
        None => victim(&cfg, &data)?,
    };
    let loaded = load_manifests(manifests)?;
    let shared = distortbench::generator::intersect_indices(loaded.iter().map(|(m, _)| m));
    let mut tables: Vec<(String, ErrorTable)> = Vec::new();
    let mut rows = Vec::new();
    for (m, file) in &loaded {
        let name = if loaded.iter().all(|(o, _)| o.header.victim == m.header.victim) {
            m.header.filter.clone()
        } else {
            format!("{}/{}", m.header.victim, m.header.filter)
        };
        let table = error_rates(m, file, &data, &classifier, Some(&shared))?;
        let score = aggregate(&table)?;
        let mut row = json!({
            "corruption": name,
            "victim": m.header.victim,
            "score": score,
            "table": table,
            "attack": attack_stats(m),
            "mean_l2_by_severity": mean_l2_by_severity(m),
        });
        if !reference_l2.is_empty() {
            row["l2_match"] = json!(l2_match_check(&mean_l2_by_severity(m), reference_l2)?);
        }
        println!("{name}: CE {:.4}, accuracy {:.4}, degradation {:+.4}", score.ce, score.accuracy, score.degradation);
        rows.push(row);
        tables.push((name, table));
    }
    let owned: Vec<ErrorTable> = tables.iter().map(|t| t.1.clone()).collect();
    let mce = mean_corruption_error(&owned)?;
    println!("mCE {mce:.4} over {} samples", shared.len());
    let refs: Vec<(String, &ErrorTable)> = tables.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_error_tables_csv(&refs, fs::File::create(common.out.join("errors.csv"))?)?;
    fs::write(common.out.join("errors.svg"), error_plot_svg(&refs))?;
    write_summary(
        &common.out,
        &json!({
            "command": "evaluate",
            "config_hash": cfg.hash(),
            "model": classifier.id(),
            "samples": shared.len(),
            "mce": mce,
            "corruptions": rows,
        }),
    )
}

fn split_pair(item: &str, what: &str) -> Result<(String, String)> {
    let (a, b) = item.split_once('=').ok_or_else(|| anyhow!("{what} `{item}` is not of the form name=value"))?;
    Ok((a.to_string(), b.to_string()))
}

fn transfer(common: &Common, splits: &[String], models: &[String]) -> Result<()> {
    init_workers(common.workers)?;
    let cfg = run_config(common)?;
    record_config(&common.out, &cfg)?;
    let data = dataset(&cfg)?;

    let mut by_victim: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let mut order = Vec::new();
    for item in splits {
        let (victim, path) = split_pair(item, "split")?;
        if !by_victim.contains_key(&victim) {
            order.push(victim.clone());
        }
        by_victim.entry(victim).or_default().push(PathBuf::from(path));
    }
    let loaded: Vec<(String, Vec<(SplitManifest, PathBuf)>)> =
        order.iter().map(|v| Ok((v.clone(), load_manifests(&by_victim[v])?))).collect::<Result<_>>()?;
    let handles: Vec<(String, ClassifierHandle)> = models
        .iter()
        .map(|item| {
            let (name, spec) = split_pair(item, "model")?;
            let h = open_classifier(&spec, Some(&name), &cfg, data.shape)?;
            Ok((name, h))
        })
        .collect::<Result<_>>()?;
    let model_refs: Vec<(String, &ClassifierHandle)> = handles.iter().map(|(n, h)| (n.clone(), h)).collect();
    let victims: Vec<VictimSplits<'_>> = loaded
        .iter()
        .map(|(v, ms)| VictimSplits { victim: v.clone(), splits: ms.iter().map(|(m, p)| (m, p.as_path())).collect() })
        .collect();
    let severities =
        loaded.iter().flat_map(|(_, ms)| ms.iter().map(|(m, _)| m.header.severities.len())).min().unwrap_or(0);
    if severities == 0 {
        bail!("splits carry no severity levels");
    }

    let mut matrices = Vec::new();
    for sev in 1..=severities {
        let m = transfer_matrix(&victims, &model_refs, &data, sev)?;
        write_transfer_csv(&m, fs::File::create(common.out.join(format!("transfer_sev{sev}.csv")))?)?;
        matrices.push(m);
    }
    // Error against severity per model, averaged over the victims.
    let per_model: Vec<(String, ErrorTable)> = handles
        .iter()
        .enumerate()
        .map(|(j, (name, _))| {
            let corrupt: Vec<f64> = matrices
                .iter()
                .map(|m| 1.0 - m.accuracy.iter().map(|row| row[j]).sum::<f64>() / m.accuracy.len() as f64)
                .collect();
            let table = ErrorTable {
                severities: (1..=severities).map(|s| s as f64).collect(),
                clean: vec![0.0; severities],
                corrupt,
                indices: matrices[0].indices.clone(),
            };
            (name.clone(), table)
        })
        .collect();
    let refs: Vec<(String, &ErrorTable)> = per_model.iter().map(|(n, t)| (n.clone(), t)).collect();
    fs::write(common.out.join("transfer.svg"), error_plot_svg(&refs))?;
    for (i, v) in matrices[0].victims.iter().enumerate() {
        let cells: Vec<String> =
            matrices[0].models.iter().zip(&matrices[0].accuracy[i]).map(|(m, a)| format!("{m} {a:.3}")).collect();
        println!("severity 1, generated on {v}: {}", cells.join(", "));
    }
    write_summary(&common.out, &json!({ "command": "transfer", "config_hash": cfg.hash(), "matrices": matrices }))
}

fn sensitivity_map(common: &Common, index: usize) -> Result<()> {
    init_workers(common.workers)?;
    let cfg = run_config(common)?;
    record_config(&common.out, &cfg)?;
    let data = dataset(&cfg)?;
    let classifier = victim(&cfg, &data)?;
    let bank = build_bank(&cfg, &data)?;
    let sample = data.get(index).ok_or_else(|| anyhow!("dataset has no sample {index}"))?;
    let filters = cfg.filters.iter().map(|n| bank.resolve(n)).collect::<distortbench::Result<Vec<_>>>()?;
    let grid = partition_patches(data.shape, cfg.patch_size)?;
    let ledger = DistortionLedger::new(sample.image.clone(), grid, cfg.seed)?;
    let probs = classifier.predict_one(&sample.image)?;
    let goal = goal_from_config(&cfg);
    let tracked = goal.tracked_class(&probs, sample.label);
    let lists = scan(
        ScanInput {
            ledger: &ledger,
            bank: &bank,
            current: &sample.image,
            current_probs: &probs,
            filters: &filters,
            tracked_class: tracked,
            mode: goal.mode(),
        },
        &classifier,
        None,
    )?;
    let path = common.out.join(format!("sensitivity_{index}.csv"));
    write_heatmap_csv(&lists, &ledger, &bank, fs::File::create(&path)?)?;
    println!("{} candidates -> {}", lists.plus.len() + lists.minus.len(), path.display());
    write_summary(
        &common.out,
        &json!({
            "command": "sensitivity-map",
            "config_hash": cfg.hash(),
            "index": index,
            "label": sample.label,
            "tracked_class": tracked,
            "candidates": lists.plus.len() + lists.minus.len(),
            "heatmap": path.display().to_string(),
            "queries": classifier.queries().evaluations,
        }),
    )
}

fn serve_toy(weights: &Path, listen: &str, max_batch: usize) -> Result<()> {
    let model = read_toy_weights(weights).with_context(|| format!("loading {}", weights.display()))?;
    let listener = std::net::TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    // Scripts read the bound address from the first line.
    println!("listening on {}", listener.local_addr()?);
    use std::io::Write;
    std::io::stdout().flush()?;
    serve(listener, Arc::new(model), max_batch, Arc::new(AtomicBool::new(false)))?;
    Ok(())
}

/// Writes `<out>/victim.dbtoy` and `<out>/dataset/`.
pub fn make_toy(out: &Path, spec: &ToySpec, samples: usize, seed: u64) -> Result<()> {
    let model = toy_model(spec, seed)?;
    let data = toy_dataset(spec, &model, samples, seed.wrapping_add(1))?;
    fs::create_dir_all(out)?;
    let weights = out.join("victim.dbtoy");
    write_toy_weights(&weights, &model)?;
    data.save(&out.join("dataset"))?;
    println!("wrote {} and {} samples", weights.display(), data.samples.len());
    write_summary(
        out,
        &json!({
            "command": "make-toy",
            "weights": weights.display().to_string(),
            "dataset": out.join("dataset").display().to_string(),
            "samples": data.samples.len(),
            "shape": [spec.shape.channels, spec.shape.height, spec.shape.width],
            "classes": spec.num_classes,
        }),
    )
}
