//! Mini-batch training: pair sampling, the optimization loop, and encoding
//! a dataset into a code database with the trained network.
//!
//! One [`Trainer`] owns the network, a persistent tape with the parameters
//! bound once, the optimizer state, and the sampling stream. Every step
//! forwards a batch, scores sampled pairs together with the classification
//! and binarization terms, normalizes by the number of pairs, and applies
//! one SGD update. All randomness (shuffling, pair choice) comes from one
//! seeded stream, so a seed fixes the whole run.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_cifar10_bin, load_manifest, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hash::{CodeDatabase, HashCode};
use crate::labels::LabelSet;
use crate::loss::{build_total_loss, pair_similarity, LossConfig, PairIndices};
use crate::network::{Binding, Network, NetworkConfig};
use crate::tensor::{OpKind, Scalar, Sgd, SgdConfig, Tape, Tensor};

/// Knobs for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Pairs scored per batch.
    pub pairs_per_batch: usize,
    /// Fixes initialization, shuffling, and pair sampling.
    pub seed: u64,
    /// Per-epoch multiplier on the learning rate; 1 keeps it constant.
    pub lr_decay: f64,
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            pairs_per_batch: 128,
            seed: 0,
            lr_decay: 1.0,
            sgd: SgdConfig::default(),
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 to form pairs, got {}",
                self.batch_size
            )));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        self.sgd.validate()?;
        self.loss.validate()
    }
}

/// Draws `count` unordered index pairs uniformly from a batch, each with
/// its similarity label. The two members of a pair always differ; distinct
/// draws may repeat a pair.
pub fn sample_pairs(
    labels: &[&LabelSet],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairIndices>> {
    if labels.len() < 2 {
        return Err(Error::Usage(format!(
            "pair sampling needs a batch of at least 2 examples, got {}",
            labels.len()
        )));
    }
    if count == 0 {
        return Err(Error::Usage("pair count must be at least 1".into()));
    }
    (0..count)
        .map(|_| {
            let i = rng.gen_range(0..labels.len());
            let mut j = rng.gen_range(0..labels.len() - 1);
            if j >= i {
                j += 1;
            }
            let (first, second) = (i.min(j), i.max(j));
            Ok(PairIndices {
                first,
                second,
                similarity: pair_similarity(labels[first], labels[second])?,
            })
        })
        .collect()
}

/// Loss recorded for one optimizer step. Every column is per sampled pair:
/// the raw terms are divided by the pair count, with the binarization and
/// classification weights folded in, so `total` is the sum of the other
/// three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub total: f64,
    pub hard_pairwise: f64,
    pub classification: f64,
    pub quantization: f64,
}

/// Mean step loss over one epoch, column for column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_hard_pairwise: f64,
    pub mean_class: f64,
    pub mean_reg: f64,
}

/// Renders the per-epoch loss log as CSV.
pub fn loss_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_total,mean_hard_pairwise,mean_class,mean_reg\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch,
            crate::eval::round_sig6(row.mean_total),
            crate::eval::round_sig6(row.mean_hard_pairwise),
            crate::eval::round_sig6(row.mean_class),
            crate::eval::round_sig6(row.mean_reg),
        ));
    }
    out
}

/// Copies a stored f32 image batch into the training scalar type.
pub fn batch_tensor<T: Scalar>(dataset: &LabeledDataset, indices: &[usize]) -> Result<Tensor<T>> {
    let batch = dataset.batch(indices)?;
    Ok(Tensor::from_vec(
        batch.shape(),
        batch.data().iter().map(|&x| T::from_f64(f64::from(x))).collect(),
    )
    .expect("shape taken from an existing tensor"))
}

/// Tags overflow-style failures with the batch that produced them, so a
/// diverging run points at its data.
fn with_batch_context(e: Error, batch: &[usize]) -> Error {
    match e {
        Error::Numeric { context, detail } => {
            Error::numeric(context, format!("batch {batch:?}: {detail}"))
        }
        other => other,
    }
}

/// Multi-hot target rows for the classification term.
fn label_targets<T: Scalar>(labels: &[&LabelSet], num_classes: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[labels.len(), num_classes]);
    for (row, set) in labels.iter().enumerate() {
        for class in set.iter() {
            out.data_mut()[row * num_classes + class] = T::from_f64(1.0);
        }
    }
    out
}

/// Drives the optimization of one network.
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    network: Network<T>,
    tape: Tape<T>,
    binding: Binding,
    optimizer: Sgd<T>,
    rng: ChaCha20Rng,
    epochs_run: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Builds a freshly initialized network from the config and prepares
    /// it for training.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let network = Network::new(cfg.network.clone(), cfg.seed)?;
        Self::from_network(network, cfg)
    }

    /// Wraps an existing network (resumed from a checkpoint, or prepared
    /// by a test) in a training loop.
    pub fn from_network(network: Network<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tape = Tape::new();
        let binding = network.bind(&mut tape, true);
        let optimizer = Sgd::new(cfg.sgd)?;
        let rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { cfg, network, tape, binding, optimizer, rng, epochs_run: 0 })
    }

    /// The network with its parameters at their current trained values.
    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    pub fn into_network(self) -> Network<T> {
        self.network
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    fn check_dataset(&self, dataset: &LabeledDataset) -> Result<()> {
        if dataset.num_classes() != self.cfg.network.num_classes {
            return Err(Error::Data(format!(
                "dataset has {} classes, network head expects {}",
                dataset.num_classes(),
                self.cfg.network.num_classes
            )));
        }
        Ok(())
    }

    /// One optimizer step on the given batch: forward, sample and score
    /// pairs, backward, update. Fails before touching any parameter if the
    /// loss comes out non-finite.
    pub fn step(&mut self, dataset: &LabeledDataset, batch: &[usize]) -> Result<StepStats> {
        self.check_dataset(dataset)?;
        let images = batch_tensor::<T>(dataset, batch)?;
        let labels: Vec<&LabelSet> = batch.iter().map(|&i| &dataset.labels()[i]).collect();
        let targets = label_targets::<T>(&labels, self.cfg.network.num_classes);
        let pairs = sample_pairs(&labels, self.cfg.pairs_per_batch, &mut self.rng)?;

        self.tape.reset();
        let images = self.tape.leaf(images);
        let out = self
            .network
            .forward(&mut self.tape, &self.binding, images)
            .map_err(|e| with_batch_context(e, batch))?;
        let terms = build_total_loss(
            &mut self.tape,
            out.binary_like,
            out.class_probs,
            &targets,
            &pairs,
            &self.cfg.loss,
        )
        .map_err(|e| with_batch_context(e, batch))?;
        let per_pair = 1.0 / self.cfg.pairs_per_batch as f64;
        let objective = self
            .tape
            .apply(OpKind::Affine { scale: per_pair, offset: 0.0 }, &[terms.total])?;

        let scalar = |v| self.tape.value(v).data()[0].as_f64();
        let stats = StepStats {
            total: scalar(objective),
            hard_pairwise: scalar(terms.hard_pairwise) * per_pair,
            classification: scalar(terms.classification) * self.cfg.loss.mu * per_pair,
            quantization: scalar(terms.quantization) * self.cfg.loss.lambda * per_pair,
        };
        if !stats.total.is_finite() {
            return Err(Error::numeric(
                "train_step",
                format!(
                    "non-finite loss {} on batch {:?} (pairwise {}, classification {}, \
                     binarization {})",
                    stats.total, batch, stats.hard_pairwise, stats.classification,
                    stats.quantization
                ),
            ));
        }

        self.tape.backward(objective)?;
        self.optimizer.step(&mut self.tape)?;
        self.network.sync_from_tape(&self.tape, &self.binding);
        Ok(stats)
    }

    /// One pass over the dataset in shuffled mini-batches. A trailing
    /// chunk of fewer than two examples cannot form a pair and is skipped.
    pub fn run_epoch(&mut self, dataset: &LabeledDataset) -> Result<EpochStats> {
        self.check_dataset(dataset)?;
        let epoch = self.epochs_run;
        let lr = self.cfg.sgd.learning_rate * self.cfg.lr_decay.powi(epoch as i32);
        self.optimizer.set_learning_rate(lr)?;

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let stats = self.step(dataset, chunk)?;
            sums.0 += stats.total;
            sums.1 += stats.hard_pairwise;
            sums.2 += stats.classification;
            sums.3 += stats.quantization;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Data(format!(
                "dataset of {} image(s) yields no trainable batch",
                dataset.len()
            )));
        }
        self.epochs_run += 1;
        let n = batches as f64;
        Ok(EpochStats {
            epoch,
            mean_total: sums.0 / n,
            mean_hard_pairwise: sums.1 / n,
            mean_class: sums.2 / n,
            mean_reg: sums.3 / n,
        })
    }

    /// Runs the configured number of epochs and returns one log row per
    /// epoch. With `epochs = 0` the network is left exactly as built.
    pub fn train(&mut self, dataset: &LabeledDataset) -> Result<Vec<EpochStats>> {
        (0..self.cfg.epochs).map(|_| self.run_epoch(dataset)).collect()
    }
}

/// Forwards every image and quantizes the binary-like outputs into a code
/// database. Entry ids are the dataset positions, so row `i` of the
/// dataset is entry id `i`.
pub fn encode_dataset<T: Scalar>(
    network: &Network<T>,
    dataset: &LabeledDataset,
) -> Result<CodeDatabase> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot encode an empty dataset".into()));
    }
    let bits = network.config().hash_bits;
    let mut db = CodeDatabase::new(bits, dataset.num_classes())?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(64) {
        let images = batch_tensor::<T>(dataset, chunk)?;
        let out = network.output(&images)?;
        for (row, &i) in chunk.iter().enumerate() {
            let values = &out.binary_like.data()[row * bits..(row + 1) * bits];
            db.push(i as u64, HashCode::quantize(values)?, dataset.labels()[i].clone())?;
        }
    }
    Ok(db)
}

/// Where a run's images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// CIFAR-10 binary batch files.
    Cifar { files: Vec<String> },
    /// A JSON manifest of labeled raw RGB images.
    Manifest { path: String },
    /// Generated on the fly.
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    /// Loads the dataset, resolving relative paths against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Cifar { files } => {
                let paths: Vec<PathBuf> = files.iter().map(|f| base_dir.join(f)).collect();
                if paths.is_empty() {
                    return Err(Error::Data("no CIFAR batch files listed".into()));
                }
                load_cifar10_bin(&paths)
            }
            DatasetSource::Manifest { path } => load_manifest(base_dir.join(path)),
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

/// A whole training run as declared in a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    /// Directory receiving the checkpoint and the loss log.
    pub output_dir: String,
    /// When set, tells the run to train on this fraction and hold out the
    /// rest; the holdout is not touched by training.
    #[serde(default)]
    pub train_fraction: Option<f64>,
    #[serde(default)]
    pub split_seed: u64,
    /// Also write `epoch_<n>.ckpt` after every epoch.
    #[serde(default)]
    pub checkpoint_every_epoch: bool,
}

/// Files produced by [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub epochs: Vec<EpochStats>,
}

/// Executes a configured run: loads the data, trains, and writes the final
/// checkpoint plus the loss CSV into the output directory. Nothing is
/// written until the dataset has loaded, so a bad data path leaves no
/// partial outputs behind.
pub fn run_training<T: Scalar>(cfg: &RunConfig, base_dir: &Path) -> Result<TrainOutputs> {
    run_training_with::<T, _>(cfg, base_dir, |_| {})
}

/// [`run_training`] with a per-epoch callback, for progress reporting.
pub fn run_training_with<T: Scalar, F: FnMut(&EpochStats)>(
    cfg: &RunConfig,
    base_dir: &Path,
    mut progress: F,
) -> Result<TrainOutputs> {
    let full = cfg.dataset.load(base_dir)?;
    let dataset = match cfg.train_fraction {
        Some(f) => full.split(f, cfg.split_seed)?.0,
        None => full,
    };

    let out_dir = base_dir.join(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| crate::data::file_err(&out_dir, e))?;

    let mut trainer = Trainer::<T>::new(cfg.train.clone())?;
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let stats = trainer.run_epoch(&dataset)?;
        progress(&stats);
        log.push(stats);
        if cfg.checkpoint_every_epoch {
            trainer.network().save_params(&out_dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
    }

    let checkpoint = out_dir.join("network.ckpt");
    trainer.network().save_params(&checkpoint)?;
    let loss_log = out_dir.join("loss_log.csv");
    std::fs::write(&loss_log, loss_csv(&log)).map_err(|e| crate::data::file_err(&loss_log, e))?;
    Ok(TrainOutputs { checkpoint, loss_log, epochs: log })
}
