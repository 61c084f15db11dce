//! Command-line front end for the hegh toolkit.
//!
//! Subcommands cover the whole retrieval pipeline: `synth` generates a
//! labeled dataset, `train` fits a network from a run config, `encode`
//! turns a dataset into a code database, `query` and `evaluate` search and
//! score it, and `gradcheck` validates the autodiff engine on demand.
//!
//! Machine-readable results go to standard output as JSON; progress and
//! errors go to standard error. Exit status: 0 success, 1 usage error,
//! 2 data or file error, 3 numeric error.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use hegh::data::{generate_synthetic, load_manifest, save_manifest, SyntheticSpec};
use hegh::eval::{evaluate, round_sig6, EvalConfig};
use hegh::hash::{CodeDatabase, HashCode, Index};
use hegh::loss::{build_total_loss, LossConfig, PairIndices, Similarity};
use hegh::network::{Binding, CbamConfig, LayerConfig, Network, NetworkConfig};
use hegh::tensor::{grad_check_resampling, OpKind, Tape, Tensor, Var};
use hegh::trainer::{encode_dataset, run_training_with, DatasetSource, RunConfig};
use hegh::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(name = "hegh", version, about = "Deep-hashing toolkit: train, encode, and search binary image codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network as described by a JSON run config.
    Train {
        /// Run config file; relative paths inside it resolve against its directory.
        #[arg(long)]
        config: PathBuf,
    },
    /// Encode a dataset into a code database using a trained checkpoint.
    Encode {
        /// Parameter checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Network architecture as JSON.
        #[arg(long)]
        network: PathBuf,
        /// Dataset source as JSON (cifar files, a manifest, or a synthetic spec).
        #[arg(long)]
        dataset: PathBuf,
        /// Destination code database file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the database entries nearest to one query code or image.
    Query {
        /// Code database to search.
        #[arg(long)]
        codes: PathBuf,
        /// Query code as a hex literal, e.g. 0xA3F.
        #[arg(long)]
        code: Option<String>,
        /// Single-entry manifest whose image becomes the query; needs
        /// --checkpoint and --network to encode it.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
        /// Return the k nearest entries.
        #[arg(long)]
        topk: Option<usize>,
        /// Return every entry within this Hamming distance.
        #[arg(long)]
        radius: Option<u32>,
    },
    /// Score a query set against a database and print the metric report.
    Evaluate {
        /// Database code file.
        #[arg(long)]
        codes: PathBuf,
        /// Query code file.
        #[arg(long)]
        queries: PathBuf,
        /// Comma-separated metrics: map, p@k:<k>, p@h:<radius>.
        #[arg(long, default_value = "map,p@h:2")]
        metrics: String,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
    },
    /// Generate a synthetic labeled dataset and write it as a manifest.
    Synth {
        /// Generator spec as JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Destination manifest file with embedded images.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    /// Every tensor primitive in isolation.
    Primitives,
    /// The full network, attention and shortcuts included.
    Network,
    /// The training objective end to end.
    Loss,
}

fn main() {
    hegh::parallel::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let status = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(status);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_status(&e));
    }
}

fn exit_status(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric { .. } | Error::NonDifferentiable { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => cmd_train(&config),
        Command::Encode { checkpoint, network, dataset, out } => {
            cmd_encode(&checkpoint, &network, &dataset, &out)
        }
        Command::Query { codes, code, image, checkpoint, network, topk, radius } => {
            cmd_query(&codes, code.as_deref(), image.as_deref(), checkpoint.as_deref(), network.as_deref(), topk, radius)
        }
        Command::Evaluate { codes, queries, metrics, out } => {
            cmd_evaluate(&codes, &queries, &metrics, out.as_deref())
        }
        Command::Gradcheck { scope } => cmd_gradcheck(scope),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    loss_log: String,
    epochs: usize,
    final_mean_loss: Option<f64>,
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg: RunConfig = parse_json(config_path, &read_text(config_path)?)?;
    let total = cfg.train.epochs;
    let outputs = run_training_with::<f32, _>(&cfg, parent_dir(config_path), |stats| {
        eprintln!("epoch {}/{total}: mean loss {:.6}", stats.epoch + 1, stats.mean_total);
    })?;
    emit(&TrainSummary {
        checkpoint: outputs.checkpoint.display().to_string(),
        loss_log: outputs.loss_log.display().to_string(),
        epochs: outputs.epochs.len(),
        final_mean_loss: outputs.epochs.last().map(|s| round_sig6(s.mean_total)),
    })
}

fn load_network(network_path: &Path, checkpoint: &Path) -> Result<Network<f32>> {
    let config = NetworkConfig::from_json(&read_text(network_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", network_path.display())))?;
    let mut network = Network::new(config, 0)?;
    network.load_params(checkpoint)?;
    Ok(network)
}

#[derive(Serialize)]
struct EncodeSummary {
    out: String,
    entries: usize,
    bits: usize,
    classes: usize,
}

fn cmd_encode(checkpoint: &Path, network_path: &Path, dataset_path: &Path, out: &Path) -> Result<()> {
    let network = load_network(network_path, checkpoint)?;
    let source: DatasetSource = parse_json(dataset_path, &read_text(dataset_path)?)?;
    let dataset = source.load(parent_dir(dataset_path))?;
    let db = encode_dataset(&network, &dataset)?;
    db.save(out)?;
    eprintln!("encoded {} images into {}-bit codes", db.len(), db.bits());
    emit(&EncodeSummary {
        out: out.display().to_string(),
        entries: db.len(),
        bits: db.bits(),
        classes: db.num_classes(),
    })
}

#[derive(Serialize)]
struct Hit {
    id: u64,
    distance: u32,
}

#[derive(Serialize)]
struct QueryResult {
    code: String,
    hits: Vec<Hit>,
}

fn cmd_query(
    codes: &Path,
    code: Option<&str>,
    image: Option<&Path>,
    checkpoint: Option<&Path>,
    network_path: Option<&Path>,
    topk: Option<usize>,
    radius: Option<u32>,
) -> Result<()> {
    let db = CodeDatabase::load(codes)?;
    let index = Index::build(&db)?;

    let query = match (code, image) {
        (Some(hex), None) => HashCode::from_hex(db.bits(), hex)
            .map_err(|e| Error::Usage(format!("--code {hex}: {e}")))?,
        (None, Some(manifest)) => {
            let (Some(ckpt), Some(net)) = (checkpoint, network_path) else {
                return Err(Error::Usage(
                    "querying by image needs --checkpoint and --network".into(),
                ));
            };
            let network = load_network(net, ckpt)?;
            let dataset = load_manifest(manifest)?;
            if dataset.len() != 1 {
                return Err(Error::Data(format!(
                    "{}: query manifest lists {} images, expected exactly one",
                    manifest.display(),
                    dataset.len()
                )));
            }
            let out = network.output(&dataset.batch(&[0])?)?;
            HashCode::quantize(out.binary_like.data())?
        }
        _ => return Err(Error::Usage("give exactly one of --code or --image".into())),
    };

    let hits = match (topk, radius) {
        (Some(k), None) => index.topk(&query, k)?,
        (None, Some(r)) => index.radius(&query, r)?,
        _ => return Err(Error::Usage("give exactly one of --topk or --radius".into())),
    };
    eprintln!("{} hits in a database of {}", hits.len(), db.len());
    emit(&QueryResult {
        code: query.to_hex(),
        hits: hits.into_iter().map(|(id, distance)| Hit { id, distance }).collect(),
    })
}

fn parse_metrics(text: &str) -> Result<EvalConfig> {
    let mut cfg = EvalConfig::default();
    for token in text.split(',') {
        let token = token.trim();
        if token == "map" {
            continue;
        }
        if let Some(k) = token.strip_prefix("p@k:") {
            cfg.precision_ks.push(k.parse().map_err(|_| {
                Error::Usage(format!("bad precision cutoff '{k}' in --metrics"))
            })?);
        } else if let Some(r) = token.strip_prefix("p@h:") {
            cfg.radius = r
                .parse()
                .map_err(|_| Error::Usage(format!("bad radius '{r}' in --metrics")))?;
        } else {
            return Err(Error::Usage(format!(
                "unknown metric '{token}'; expected map, p@k:<k>, or p@h:<radius>"
            )));
        }
    }
    Ok(cfg)
}

fn cmd_evaluate(codes: &Path, queries: &Path, metrics: &str, out: Option<&Path>) -> Result<()> {
    let cfg = parse_metrics(metrics)?;
    let db = CodeDatabase::load(codes)?;
    let query_db = CodeDatabase::load(queries)?;
    let index = Index::build(&db)?;
    let report = evaluate(&query_db, &index, &cfg)?;
    eprintln!("map {:.4} over {} queries", report.map, report.queries);
    let json = report.to_json_string()?;
    match out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        }),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SynthSummary {
    out: String,
    images: usize,
    classes: usize,
    image_size: usize,
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = parse_json(spec_path, &read_text(spec_path)?)?;
    let dataset = generate_synthetic(&spec)?;
    save_manifest(&dataset, out)?;
    eprintln!("wrote {} images to {}", dataset.len(), out.display());
    emit(&SynthSummary {
        out: out.display().to_string(),
        images: dataset.len(),
        classes: dataset.num_classes(),
        image_size: spec.image_size,
    })
}

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_EPSILON: f64 = 1e-5;
const RESAMPLE_ATTEMPTS: usize = 60;

#[derive(Serialize)]
struct ComponentReport {
    name: String,
    max_rel_err: f64,
}

#[derive(Serialize)]
struct GradcheckReport {
    scope: String,
    tolerance: f64,
    components: Vec<ComponentReport>,
    pass: bool,
}

fn random_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.2..1.2)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data sizes agree")
}

/// One gradient check of `sum(sigmoid(op(...)))` at `points` random inputs,
/// reporting the worst relative error seen.
fn check_op(op: &OpKind, shapes: &[&[usize]], seed: u64, points: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for point_idx in 0..points {
        let err = grad_check_resampling(
            |attempt| {
                let mut rng = ChaCha20Rng::seed_from_u64(
                    seed ^ (point_idx as u64) << 16 ^ (attempt as u64) << 40,
                );
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (format!("arg{i}"), random_tensor(&mut rng, s)))
                    .collect()
            },
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let y = tape.apply(op.clone(), vars)?;
                let s = tape.apply(OpKind::Sigmoid, &[y])?;
                tape.apply(OpKind::Sum, &[s])
            },
            GRAD_EPSILON,
            RESAMPLE_ATTEMPTS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn primitive_component_list() -> Vec<(&'static str, OpKind, Vec<Vec<usize>>)> {
    vec![
        ("conv2d_s1_p1", OpKind::Conv2d { stride: 1, padding: 1 }, vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3], vec![2]]),
        ("conv2d_s2_p0", OpKind::Conv2d { stride: 2, padding: 0 }, vec![vec![1, 2, 5, 5], vec![2, 2, 2, 2], vec![2]]),
        ("max_pool2d", OpKind::MaxPool2d { window: 2, stride: 2 }, vec![vec![1, 2, 4, 4]]),
        ("avg_pool2d", OpKind::AvgPool2d { window: 2, stride: 2 }, vec![vec![1, 2, 4, 4]]),
        ("global_max_pool", OpKind::GlobalMaxPool, vec![vec![1, 2, 3, 3]]),
        ("global_avg_pool", OpKind::GlobalAvgPool, vec![vec![1, 2, 3, 3]]),
        ("channel_max", OpKind::ChannelMax, vec![vec![1, 3, 2, 2]]),
        ("channel_mean", OpKind::ChannelMean, vec![vec![1, 3, 2, 2]]),
        ("dense", OpKind::Dense, vec![vec![2, 5], vec![5, 3], vec![3]]),
        ("relu", OpKind::Relu, vec![vec![9]]),
        ("sigmoid", OpKind::Sigmoid, vec![vec![9]]),
        ("add_broadcast", OpKind::Add, vec![vec![1, 2, 1, 1], vec![2, 2, 2, 2]]),
        ("sub", OpKind::Sub, vec![vec![2, 3], vec![2, 3]]),
        ("mul_broadcast", OpKind::Mul, vec![vec![1, 1, 2, 2], vec![1, 3, 2, 2]]),
        ("channel_concat", OpKind::ChannelConcat, vec![vec![1, 2, 2, 2], vec![1, 3, 2, 2]]),
        ("gather_rows", OpKind::GatherRows { indices: vec![0, 2, 1, 2] }, vec![vec![3, 3]]),
        ("reshape", OpKind::Reshape { shape: vec![2, 6] }, vec![vec![3, 4]]),
        ("sum", OpKind::Sum, vec![vec![3, 4]]),
        ("mean", OpKind::Mean, vec![vec![3, 4]]),
        ("row_sum", OpKind::RowSum, vec![vec![4, 5]]),
        ("abs", OpKind::Abs, vec![vec![9]]),
        ("max_const", OpKind::MaxConst { threshold: 0.3 }, vec![vec![9]]),
        ("pow_square", OpKind::Pow { exponent: 2 }, vec![vec![7]]),
        ("affine", OpKind::Affine { scale: 1.7, offset: -0.3 }, vec![vec![9]]),
    ]
}

fn check_primitives() -> Result<Vec<ComponentReport>> {
    let mut reports = Vec::new();
    for (i, (name, op, shapes)) in primitive_component_list().into_iter().enumerate() {
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let err = check_op(&op, &shape_refs, 0x6C1 + i as u64, 2)?;
        eprintln!("{name}: max relative error {err:.3e}");
        reports.push(ComponentReport { name: name.into(), max_rel_err: err });
    }
    Ok(reports)
}

/// A network small enough that sweeping finite differences over every
/// parameter finishes in seconds, yet exercising attention stacks and both
/// shortcut kinds.
fn small_probe_config() -> NetworkConfig {
    let mut config = NetworkConfig::default();
    config.layers = vec![
        LayerConfig::new(2, 1),
        LayerConfig::new(2, 2),
        LayerConfig::new(4, 2),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
    ];
    config.cbam = CbamConfig { reduction_ratio: 2, spatial_kernel: 3, stack_count: 1 };
    config.input_size = [16, 16];
    config.hash_bits = 3;
    config.num_classes = 2;
    config
}

fn check_network() -> Result<Vec<ComponentReport>> {
    let config = small_probe_config();
    let net: Network<f64> = Network::new(config.clone(), 42)?;
    let images = RefCell::new(Tensor::<f64>::zeros(&[1, 3, 16, 16]));

    let err = grad_check_resampling(
        |attempt| {
            let mut rng = ChaCha20Rng::seed_from_u64(0x2E70 + attempt as u64);
            *images.borrow_mut() = random_tensor(&mut rng, &[1, 3, 16, 16]);
            Network::<f64>::new(config.clone(), 0xB0B0 + attempt as u64)
                .expect("validated config constructs")
                .params()
                .to_vec()
        },
        |tape, vars| {
            let binding = Binding::from_vars(vars.to_vec());
            let input = tape.leaf(images.borrow().clone());
            let out = net.forward(tape, &binding, input)?;
            let sum_b = tape.apply(OpKind::Sum, &[out.binary_like])?;
            let sum_p = tape.apply(OpKind::Sum, &[out.class_probs])?;
            tape.apply(OpKind::Add, &[sum_b, sum_p])
        },
        GRAD_EPSILON,
        RESAMPLE_ATTEMPTS,
    )?;
    eprintln!("network: max relative error {err:.3e}");
    Ok(vec![ComponentReport { name: "network".into(), max_rel_err: err }])
}

fn check_loss() -> Result<Vec<ComponentReport>> {
    // Pair weights enter the graph as constants read off the current class
    // probabilities, so checks that differentiate the classifier output must
    // run with gamma 0; the weighted variants hold the probabilities fixed
    // and differentiate the codes alone.
    let variants = [
        ("pairwise_hinge", 1.0_f64, 0.0_f64, 0.0_f64, false),
        ("with_quantization", 1.0, 0.5, 0.0, false),
        ("classification", 0.0, 0.0, 1.0, true),
        ("full_objective", 0.0, 0.01, 1.0, true),
    ];
    let labels = Tensor::<f64>::from_vec(
        &[4, 2],
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    )?;
    let fixed_probs = Tensor::<f64>::from_vec(
        &[4, 2],
        vec![0.8, 0.3, 0.6, 0.4, 0.2, 0.7, 0.35, 0.9],
    )?;
    let pairs = vec![
        PairIndices { first: 0, second: 1, similarity: Similarity::Similar },
        PairIndices { first: 2, second: 3, similarity: Similarity::Similar },
        PairIndices { first: 0, second: 2, similarity: Similarity::Dissimilar },
    ];

    let mut reports = Vec::new();
    for (i, (name, gamma, lambda, mu, through_classifier)) in variants.into_iter().enumerate() {
        let cfg = LossConfig { margin: Some(6.0), gamma, lambda, mu };
        let labels = labels.clone();
        let fixed_probs = fixed_probs.clone();
        let pairs = pairs.clone();
        let mut worst = 0.0f64;
        for point_idx in 0..3 {
            let err = grad_check_resampling(
                |attempt| {
                    let mut rng = ChaCha20Rng::seed_from_u64(
                        (0x105_5 + i as u64) ^ (point_idx as u64) << 16 ^ (attempt as u64) << 40,
                    );
                    let mut point = vec![("codes".into(), random_tensor(&mut rng, &[4, 3]))];
                    if through_classifier {
                        point.push(("logits".into(), random_tensor(&mut rng, &[4, 2])));
                    }
                    point
                },
                |tape, vars| {
                    let probs = if through_classifier {
                        tape.apply(OpKind::Sigmoid, &[vars[1]])?
                    } else {
                        tape.leaf(fixed_probs.clone())
                    };
                    let terms = build_total_loss(tape, vars[0], probs, &labels, &pairs, &cfg)?;
                    Ok(terms.total)
                },
                GRAD_EPSILON,
                RESAMPLE_ATTEMPTS,
            )?;
            worst = worst.max(err);
        }
        eprintln!("{name}: max relative error {worst:.3e}");
        reports.push(ComponentReport { name: name.into(), max_rel_err: worst });
    }
    Ok(reports)
}

fn cmd_gradcheck(scope: Scope) -> Result<()> {
    let (scope_name, components) = match scope {
        Scope::Primitives => ("primitives", check_primitives()?),
        Scope::Network => ("network", check_network()?),
        Scope::Loss => ("loss", check_loss()?),
    };
    let failed = components.iter().filter(|c| c.max_rel_err >= GRAD_TOLERANCE).count();
    let report = GradcheckReport {
        scope: scope_name.into(),
        tolerance: GRAD_TOLERANCE,
        pass: failed == 0,
        components,
    };
    emit(&report)?;
    if failed > 0 {
        return Err(Error::numeric(
            "grad_check",
            format!("{failed} component(s) exceed tolerance {GRAD_TOLERANCE:e}"),
        ));
    }
    Ok(())
}
