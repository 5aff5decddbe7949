//! `datapath`: batch front end for fixtures, attacks, extraction, statistics,
//! layouts and discrepancy maps, plus the HTTP service.

mod svg;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use datapath_core::attacks::{error_rate, fgsm_batch, successful_pairs, AttackConfig};
use datapath_core::extraction::{extract_datapath, Datapath, ExtractionConfig, LayerSelector};
use datapath_core::fixture::{build_fixture, FixtureConfig};
use datapath_core::layout::{
    euler_layout, layer_view, EulerGroup, EulerOptions, LayerViewOptions, DEFAULT_BUDGET, DEFAULT_LINE_WIDTH,
    DEFAULT_SEGMENT_LAMBDA,
};
use datapath_core::neuronview::{
    activation_heatmap, dataset_mean, default_patch_size, dimmed_preview, discrepancy_map, heatmap_ppm, pgm,
    DiscrepancyTarget, DEFAULT_THRESHOLD,
};
use datapath_core::nnet::io::{read_examples, read_model, write_examples, write_model};
use datapath_core::nnet::{ActivationTrace, Example, ExampleSet, ModelGraph};
use datapath_core::stats::{comparison_statistics, StatisticKind};
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "datapath", version, about = "Extract and compare CNN datapaths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the bundled residual CNN on the synthetic two-motif dataset.
    Fixture(FixtureArgs),
    /// FGSM-attack an example file.
    Attack(AttackArgs),
    /// Extract the datapath of an example group.
    Extract(ExtractArgs),
    /// Per-layer statistics between a normal and an adversarial group.
    Stats(StatsArgs),
    /// Layer-level and feature-map-level layout documents.
    Layout(LayoutArgs),
    /// Occlusion discrepancy map and activation heat map for one image.
    Discrepancy(DiscrepancyArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct FixtureArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Targeted attack toward this class.
    #[arg(long)]
    target: Option<usize>,
    /// Keep only examples of this class that are classified correctly and flipped by the attack.
    #[arg(long)]
    successful_class: Option<usize>,
    /// With --successful-class: where to write the matching normal examples.
    #[arg(long, requires = "successful_class")]
    normal_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExtractionFlags {
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Comma-separated layer ids; defaults to every post-activation layer.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    /// Class to explain; defaults to the group's shared class.
    #[arg(long)]
    target: Option<usize>,
}

impl ExtractionFlags {
    fn config(&self) -> ExtractionConfig {
        ExtractionConfig {
            threshold: self.threshold,
            top_k: self.top_k,
            lambda: self.lambda,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            layers: if self.layers.is_empty() {
                LayerSelector::PostActivation
            } else {
                LayerSelector::Explicit {
                    layers: self.layers.clone(),
                }
            },
            target: self.target,
        }
    }
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    /// Group name; defaults to the example file's stem.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    flags: ExtractionFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PairArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    normal: PathBuf,
    #[arg(long)]
    adversarial: PathBuf,
    #[arg(long)]
    normal_datapath: PathBuf,
    #[arg(long)]
    adversarial_datapath: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LayoutArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Statistic shown by the dot plots.
    #[arg(long, default_value = "activation_similarity")]
    stat: String,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = DEFAULT_LINE_WIDTH)]
    line_width: f64,
    #[arg(long, default_value_t = DEFAULT_SEGMENT_LAMBDA)]
    lambda_seg: f64,
    /// Feature-map layouts to write; defaults to every layer in either datapath.
    #[arg(long, value_delimiter = ',')]
    feature_layers: Vec<String>,
    /// Clusters per Euler cell.
    #[arg(long)]
    k: Option<usize>,
    /// Seed of the k-means initialization.
    #[arg(long, default_value_t = datapath_core::layout::DEFAULT_SEED)]
    seed: u64,
    /// Also write SVG drawings.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DiscrepancyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    image: usize,
    #[arg(long)]
    layer: String,
    #[arg(long)]
    feature_map: usize,
    /// `y,x` of a single neuron; the feature-map mean is used otherwise.
    #[arg(long, value_delimiter = ',')]
    neuron: Option<Vec<usize>>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Example file whose per-channel mean fills occluded patches; defaults to --examples.
    #[arg(long)]
    mean_from: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "DATAPATH_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "DATAPATH_CACHE_DIR", default_value = "datapath-cache")]
    cache_dir: PathBuf,
    #[arg(long, env = "DATAPATH_WORKERS", default_value_t = 2)]
    workers: usize,
    #[arg(long, env = "DATAPATH_THRESHOLD", default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, env = "DATAPATH_LAMBDA_SEG", default_value_t = DEFAULT_SEGMENT_LAMBDA)]
    lambda_seg: f64,
}

#[derive(Debug)]
struct Failure {
    kind: String,
    message: String,
}

impl Failure {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<datapath_core::Error> for Failure {
    fn from(e: datapath_core::Error) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn with_path<T>(path: &Path, r: datapath_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new("json", e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

fn load_model(path: &Path) -> CliResult<ModelGraph> {
    with_path(path, read_model(path))
}

fn load_examples(path: &Path) -> CliResult<Vec<Example>> {
    with_path(path, read_examples(path))
}

fn load_datapath(path: &Path) -> CliResult<Datapath> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
    with_path(path, Datapath::from_json(&text))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("group")
        .to_string()
}

fn forward_all(model: &ModelGraph, examples: &[Example]) -> CliResult<Vec<ActivationTrace>> {
    Ok(examples
        .iter()
        .map(|e| model.forward(e, None))
        .collect::<datapath_core::Result<Vec<_>>>()?)
}

fn run_fixture(a: FixtureArgs) -> CliResult<()> {
    let mut cfg = FixtureConfig {
        seed: a.seed,
        ..FixtureConfig::default()
    };
    if let Some(v) = a.train_size {
        cfg.train_size = v;
    }
    if let Some(v) = a.test_size {
        cfg.test_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    let f = build_fixture(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let model_path = a.out_dir.join("model.json");
    write_model(&f.model, &model_path)?;
    // the file stores f32 weights; report what readers of the file will see
    let stored = load_model(&model_path)?;
    write_examples(&a.out_dir.join("train.examples"), &f.train)?;
    write_examples(&a.out_dir.join("test.examples"), &f.test)?;
    let test_error = error_rate(&stored, &f.test)?;
    write_json(
        &a.out_dir.join("report.json"),
        &json!({
            "config": cfg,
            "model_hash": stored.hash(),
            "epoch_loss": f.report.epoch_loss,
            "train_error": f.report.train_error,
            "test_error": test_error,
        }),
    )
}

fn run_attack(a: AttackArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let examples = load_examples(&a.examples)?;
    let cfg = AttackConfig {
        epsilon: a.epsilon,
        target: a.target,
    };
    match a.successful_class {
        Some(class) => {
            let (normal, adv) = successful_pairs(&model, &examples, class, &cfg)?;
            if adv.is_empty() {
                return Err(Failure::new("no_examples", format!("no successful attacks on class {class}")));
            }
            write_examples(&a.out, &adv)?;
            if let Some(p) = &a.normal_out {
                write_examples(p, &normal)?;
            }
        }
        None => write_examples(&a.out, &fgsm_batch(&model, &examples, &cfg)?)?,
    }
    Ok(())
}

fn run_extract(a: ExtractArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let examples = load_examples(&a.examples)?;
    let set = ExampleSet::new(a.name.unwrap_or_else(|| stem(&a.examples)), examples);
    let dp = extract_datapath(&model, &set, &a.flags.config())?;
    write_file(&a.out, dp.to_json())
}

struct Pair {
    model: ModelGraph,
    normal: (String, Vec<ActivationTrace>, Datapath),
    adversarial: (String, Vec<ActivationTrace>, Datapath),
}

fn load_pair(p: &PairArgs) -> CliResult<Pair> {
    let model = load_model(&p.model)?;
    let load = |examples: &Path, dp: &Path| -> CliResult<(String, Vec<ActivationTrace>, Datapath)> {
        let traces = forward_all(&model, &load_examples(examples)?)?;
        let dp = load_datapath(dp)?;
        if dp.model_hash != model.hash() {
            return Err(Failure::new(
                "model_mismatch",
                format!("{} was extracted from a different model", dp.group.name),
            ));
        }
        Ok((dp.group.name.clone(), traces, dp))
    };
    let normal = load(&p.normal, &p.normal_datapath)?;
    let adversarial = load(&p.adversarial, &p.adversarial_datapath)?;
    Ok(Pair {
        model,
        normal,
        adversarial,
    })
}

fn run_stats(a: StatsArgs) -> CliResult<()> {
    let p = load_pair(&a.pair)?;
    let stats = comparison_statistics(&p.model, &p.normal.1, &p.adversarial.1, &p.normal.2, &p.adversarial.2)?;
    let candidates: Vec<&str> = p.normal.2.layers.iter().map(|l| l.layer.as_str()).collect();
    write_json(
        &a.out,
        &json!({
            "normal": p.normal.0,
            "adversarial": p.adversarial.0,
            "candidate_layers": candidates,
            "statistics": stats,
        }),
    )
}

fn run_layout(a: LayoutArgs) -> CliResult<()> {
    let kind = StatisticKind::parse(&a.stat).ok_or_else(|| Failure::new("unknown_statistic", format!("no statistic `{}`", a.stat)))?;
    let p = load_pair(&a.pair)?;
    let stats = comparison_statistics(&p.model, &p.normal.1, &p.adversarial.1, &p.normal.2, &p.adversarial.2)?;
    let opts = LayerViewOptions {
        budget: a.budget,
        line_width: a.line_width,
        lambda: a.lambda_seg,
        ..LayerViewOptions::default()
    };
    let view = layer_view(&p.model, kind, &stats, &opts)?;
    fs::create_dir_all(&a.out_dir)?;
    write_json(
        &a.out_dir.join("layers.json"),
        &json!({ "groups": [&p.normal.0, &p.adversarial.0], "layout": view }),
    )?;
    if a.svg {
        write_file(&a.out_dir.join("layers.svg"), svg::layer_view(&view))?;
    }

    let layers: Vec<String> = if a.feature_layers.is_empty() {
        let mut v: Vec<String> = p.normal.2.layers.iter().map(|l| l.layer.clone()).collect();
        for l in &p.adversarial.2.layers {
            if !v.contains(&l.layer) {
                v.push(l.layer.clone());
            }
        }
        v
    } else {
        a.feature_layers.clone()
    };
    let groups = [
        EulerGroup {
            name: &p.normal.0,
            datapath: &p.normal.2,
            traces: &p.normal.1,
        },
        EulerGroup {
            name: &p.adversarial.0,
            datapath: &p.adversarial.2,
            traces: &p.adversarial.1,
        },
    ];
    let eopts = EulerOptions {
        k: a.k,
        seed: a.seed,
        difference: Some((0, 1)),
        ..EulerOptions::default()
    };
    for layer in &layers {
        let layout = euler_layout(&p.model, layer, &groups, &eopts)?;
        let colors: Vec<Vec<f64>> = layout
            .cells
            .iter()
            .map(|c| c.clusters.iter().map(|k| k.activation_difference.unwrap_or(0.0)).collect())
            .collect();
        write_json(&a.out_dir.join(format!("featuremaps-{layer}.json")), &layout)?;
        if a.svg {
            write_file(&a.out_dir.join(format!("featuremaps-{layer}.svg")), svg::euler(&layout, &colors))?;
        }
    }
    Ok(())
}

fn run_discrepancy(a: DiscrepancyArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let examples = load_examples(&a.examples)?;
    let example = examples.get(a.image).ok_or_else(|| {
        Failure::new(
            "out_of_range",
            format!("image {} out of range ({} examples)", a.image, examples.len()),
        )
    })?;
    let fill = match &a.mean_from {
        Some(p) => dataset_mean(&load_examples(p)?)?,
        None => dataset_mean(&examples)?,
    };
    let shape = model.input_shape();
    let neuron = match a.neuron.as_deref() {
        None => None,
        Some(&[y, x]) => Some((y, x)),
        Some(_) => return Err(Failure::new("invalid_argument", "--neuron takes exactly two values: y,x")),
    };
    let target = DiscrepancyTarget {
        layer: a.layer.clone(),
        feature_map: a.feature_map,
        neuron,
    };
    let patch = a.patch_size.unwrap_or(default_patch_size(shape.height.max(shape.width)));
    let map = discrepancy_map(&model, example, a.image, &target, patch, a.threshold, &fill)?;
    let trace = model.forward(example, None)?;
    let heat = activation_heatmap(&model, &trace, &a.layer, a.feature_map)?;

    fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("discrepancy.json"), &map)?;
    write_json(&a.out_dir.join("heatmap.json"), &heat)?;
    let mask: Vec<f64> = map.important.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_file(&a.out_dir.join("mask.pgm"), pgm(map.cols, map.rows, &mask))?;
    let preview_ext = if shape.channels == 3 { "ppm" } else { "pgm" };
    write_file(
        &a.out_dir.join(format!("preview.{preview_ext}")),
        dimmed_preview(example, &map),
    )?;
    write_file(&a.out_dir.join("heatmap.ppm"), heatmap_ppm(&heat))
}

fn run_serve(a: ServeArgs) -> CliResult<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Failure::new("invalid_argument", "threshold must lie in (0, 1)"));
    }
    let config = datapath_service::Config {
        listen: a.listen,
        cache_dir: a.cache_dir,
        workers: a.workers.max(1),
        threshold: a.threshold,
        segment_lambda: a.lambda_seg,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(datapath_service::serve(config))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let message = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let message = message.trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": message } }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Fixture(a) => run_fixture(a),
        Command::Attack(a) => run_attack(a),
        Command::Extract(a) => run_extract(a),
        Command::Stats(a) => run_stats(a),
        Command::Layout(a) => run_layout(a),
        Command::Discrepancy(a) => run_discrepancy(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
            ExitCode::FAILURE
        }
    }
}
