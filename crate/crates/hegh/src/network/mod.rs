//! The attention-augmented CNN producing hash values and class
//! probabilities.
//!
//! [`Network`] owns named parameter tensors; it has no tape of its own.
//! Callers bind the parameters onto a [`Tape`] (trainable for training,
//! constant for inference) and assemble the forward graph with
//! [`Network::forward`]. This keeps a constructed network immutable, so
//! inference on separate tapes can run concurrently.

mod cbam;
mod config;

pub use cbam::{cbam_block, channel_attention, spatial_attention, CbamBlockVars};
pub use config::{
    stage_name, CbamConfig, LayerConfig, NetworkConfig, NetworkPlan, ShortcutKind, StagePlan,
    STAGE_COUNT,
};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, OpKind, Scalar, Tape, Tensor, Var};
use std::path::Path;

/// One forward pass's results.
#[derive(Debug, Clone)]
pub struct NetworkOutput<T: Scalar> {
    /// Binary-like hash values, `[B, k]`, unbounded.
    pub binary_like: Tensor<T>,
    /// Per-class probabilities, `[B, num_classes]`, each strictly in (0,1).
    pub class_probs: Tensor<T>,
}

/// Tape handles of the two outputs while the graph is still being built.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub binary_like: Var,
    pub class_probs: Var,
}

#[derive(Debug, Clone, Copy)]
struct CbamSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    spatial_w: usize,
    spatial_b: usize,
}

#[derive(Debug, Clone)]
struct StageSlots {
    conv_w: usize,
    conv_b: usize,
    shortcut: Option<(usize, usize)>,
    cbam: Vec<CbamSlots>,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<StageSlots>,
    hash_w: usize,
    hash_b: usize,
    class_w: usize,
    class_b: usize,
}

/// Parameter handles after binding onto a tape, index-aligned with
/// [`Network::params`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps parameter handles that were registered on the tape by other
    /// means, such as a gradient-check harness. Order must match
    /// [`Network::params`].
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct Network<T: Scalar> {
    config: NetworkConfig,
    plan: NetworkPlan,
    layout: Layout,
    params: Vec<(String, Tensor<T>)>,
}

/// Accumulates Kaiming-initialized parameters with stable names.
struct ParamBuilder<T: Scalar> {
    rng: ChaCha20Rng,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamBuilder<T> {
    fn new(seed: u64) -> Self {
        ParamBuilder { rng: ChaCha20Rng::seed_from_u64(seed), params: Vec::new() }
    }

    /// Weight drawn from N(0, sqrt(2 / fan_in)); values are sampled in f64
    /// and narrowed, so f32 and f64 networks built from one seed agree.
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let numel: usize = shape.iter().product();
        let data: Vec<T> =
            (0..numel).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect();
        self.params.push((name, Tensor::new(shape.to_vec(), data).expect("static shape")));
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.push((name, Tensor::zeros(shape)));
        self.params.len() - 1
    }
}

impl<T: Scalar> Network<T> {
    /// Validates the architecture and initializes all parameters from the
    /// seed: Kaiming fan-in normals for weights, zeros for biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut b = ParamBuilder::new(seed);
        let mut stages = Vec::with_capacity(plan.stages.len());
        for (i, stage) in plan.stages.iter().enumerate() {
            let name = stage_name(i);
            let k = stage.kernel;
            let conv_w = b.weight(
                format!("{name}.conv.weight"),
                &[stage.out_channels, stage.in_channels, k, k],
                stage.in_channels * k * k,
            );
            let conv_b = b.zeros(format!("{name}.conv.bias"), &[stage.out_channels]);
            let shortcut = match stage.shortcut {
                Some(ShortcutKind::Projection) => Some((
                    b.weight(
                        format!("{name}.shortcut.weight"),
                        &[stage.out_channels, stage.in_channels, 1, 1],
                        stage.in_channels,
                    ),
                    b.zeros(format!("{name}.shortcut.bias"), &[stage.out_channels]),
                )),
                _ => None,
            };
            let mut cbam = Vec::with_capacity(stage.cbam_blocks);
            let channels = stage.out_channels;
            let hidden = channels / config.cbam.reduction_ratio;
            let sk = config.cbam.spatial_kernel;
            for s in 0..stage.cbam_blocks {
                let prefix = format!("{name}.cbam{s}");
                cbam.push(CbamSlots {
                    w1: b.weight(format!("{prefix}.channel.w1"), &[channels, hidden], channels),
                    b1: b.zeros(format!("{prefix}.channel.b1"), &[hidden]),
                    w2: b.weight(format!("{prefix}.channel.w2"), &[hidden, channels], hidden),
                    b2: b.zeros(format!("{prefix}.channel.b2"), &[channels]),
                    spatial_w: b.weight(
                        format!("{prefix}.spatial.weight"),
                        &[1, 2, sk, sk],
                        2 * sk * sk,
                    ),
                    spatial_b: b.zeros(format!("{prefix}.spatial.bias"), &[1]),
                });
            }
            stages.push(StageSlots { conv_w, conv_b, shortcut, cbam });
        }
        let feats = plan.feature_channels;
        let layout = Layout {
            stages,
            hash_w: b.weight("head.hash.weight".into(), &[feats, plan.hash_bits], feats),
            hash_b: b.zeros("head.hash.bias".into(), &[plan.hash_bits]),
            class_w: b.weight("head.class.weight".into(), &[feats, plan.num_classes], feats),
            class_b: b.zeros("head.class.bias".into(), &[plan.num_classes]),
        };
        Ok(Network { config, plan, layout, params: b.params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    /// Named parameter tensors in forward order.
    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    /// Total number of trainable values.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on a fresh tape. With `trainable`, the
    /// tape must be empty (parameters precede all other nodes).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| {
                if trainable {
                    tape.param(name.clone(), tensor.clone())
                } else {
                    tape.leaf(tensor.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Copies parameter values back from a tape, after training updated
    /// them in place.
    pub fn sync_from_tape(&mut self, tape: &Tape<T>, binding: &Binding) {
        for ((_, tensor), &var) in self.params.iter_mut().zip(&binding.vars) {
            tensor.data_mut().copy_from_slice(tape.value(var).data());
        }
    }

    /// Assembles the forward graph for a batch already on the tape.
    /// `images` must be `[B, in_channels, H, W]` matching the configured
    /// input size.
    pub fn forward(&self, tape: &mut Tape<T>, binding: &Binding, images: Var) -> Result<ForwardVars> {
        let shape = tape.value(images).shape().to_vec();
        let want =
            [self.config.in_channels, self.config.input_size[0], self.config.input_size[1]];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "network_forward",
                format!(
                    "expected images [B, {}, {}, {}], got {shape:?}",
                    want[0], want[1], want[2]
                ),
            ));
        }
        let v = |slot: usize| binding.vars[slot];
        let mut x = images;
        for (stage, slots) in self.plan.stages.iter().zip(&self.layout.stages) {
            let conv = tape.apply(
                OpKind::Conv2d { stride: stage.stride, padding: stage.padding },
                &[x, v(slots.conv_w), v(slots.conv_b)],
            )?;
            let pre_act = match (stage.shortcut, slots.shortcut) {
                (None, _) => conv,
                (Some(ShortcutKind::Identity), _) => tape.apply(OpKind::Add, &[conv, x])?,
                (Some(ShortcutKind::Projection), Some((pw, pb))) => {
                    let projected = tape.apply(
                        OpKind::Conv2d { stride: stage.stride, padding: 0 },
                        &[x, v(pw), v(pb)],
                    )?;
                    tape.apply(OpKind::Add, &[conv, projected])?
                }
                (Some(ShortcutKind::Projection), None) => unreachable!("layout mirrors plan"),
            };
            x = tape.apply(OpKind::Relu, &[pre_act])?;
            for block in &slots.cbam {
                let vars = CbamBlockVars {
                    w1: v(block.w1),
                    b1: v(block.b1),
                    w2: v(block.w2),
                    b2: v(block.b2),
                    spatial_w: v(block.spatial_w),
                    spatial_b: v(block.spatial_b),
                };
                x = cbam_block(tape, x, &vars)?;
            }
        }
        let pooled = tape.apply(OpKind::GlobalAvgPool, &[x])?;
        let binary_like =
            tape.apply(OpKind::Dense, &[pooled, v(self.layout.hash_w), v(self.layout.hash_b)])?;
        let logits =
            tape.apply(OpKind::Dense, &[pooled, v(self.layout.class_w), v(self.layout.class_b)])?;
        let class_probs = tape.apply(OpKind::Sigmoid, &[logits])?;
        Ok(ForwardVars { binary_like, class_probs })
    }

    /// Convenience inference on a private tape.
    pub fn output(&self, images: &Tensor<T>) -> Result<NetworkOutput<T>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let input = tape.leaf(images.clone());
        let out = self.forward(&mut tape, &binding, input)?;
        Ok(NetworkOutput {
            binary_like: tape.value(out.binary_like).clone(),
            class_probs: tape.value(out.class_probs).clone(),
        })
    }

    /// Writes all parameters to a checkpoint file (values as f32).
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        save_checkpoint(path, &entries)
    }

    /// Restores parameters from a checkpoint. Every parameter must be
    /// present with its exact shape; extra entries are rejected.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        if entries.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} entries, network has {} parameters",
                entries.len(),
                self.params.len()
            )));
        }
        for ((name, tensor), (ck_name, ck_tensor)) in self.params.iter_mut().zip(&entries) {
            if name != ck_name {
                return Err(Error::Data(format!(
                    "checkpoint entry '{ck_name}' does not match parameter '{name}'"
                )));
            }
            if tensor.shape() != ck_tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter '{name}': checkpoint shape {:?} does not match {:?}",
                    ck_tensor.shape(),
                    tensor.shape()
                )));
            }
            *tensor = ck_tensor.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetworkConfig {
        let mut config = NetworkConfig::default();
        config.layers = vec![
            LayerConfig::new(4, 1),
            LayerConfig::new(4, 2),
            LayerConfig::new(8, 2),
            LayerConfig::new(8, 1),
            LayerConfig::new(8, 1),
            LayerConfig::new(8, 1),
            LayerConfig::new(8, 1),
            LayerConfig::new(8, 1),
        ];
        config.cbam = CbamConfig { reduction_ratio: 2, spatial_kernel: 3, stack_count: 1 };
        config.input_size = [16, 16];
        config.hash_bits = 3;
        config.num_classes = 2;
        config
    }

    fn ramp_images(batch: usize, config: &NetworkConfig) -> Tensor<f32> {
        let [h, w] = config.input_size;
        let n = batch * config.in_channels * h * w;
        Tensor::new(
            vec![batch, config.in_channels, h, w],
            (0..n).map(|i| ((i as f32) * 0.7).sin() * 0.5 + 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_architecture_produces_contract_shapes() {
        let config = NetworkConfig::default();
        let net: Network<f32> = Network::new(config.clone(), 7).unwrap();
        let images = ramp_images(4, &config);
        let out = net.output(&images).unwrap();
        assert_eq!(out.binary_like.shape(), &[4, 12]);
        assert_eq!(out.class_probs.shape(), &[4, 10]);
        for &p in out.class_probs.data() {
            assert!(p > 0.0 && p < 1.0, "probability {p} out of (0,1)");
        }
    }

    #[test]
    fn identical_images_produce_identical_rows() {
        let config = tiny_config();
        let net: Network<f32> = Network::new(config.clone(), 3).unwrap();
        let one = ramp_images(1, &config);
        let mut batch = Tensor::zeros(&[3, 3, 16, 16]);
        for chunk in batch.data_mut().chunks_mut(one.numel()) {
            chunk.copy_from_slice(one.data());
        }
        let out = net.output(&batch).unwrap();
        let k = out.binary_like.shape()[1];
        let first = &out.binary_like.data()[..k];
        for row in out.binary_like.data().chunks(k) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn forward_rejects_wrong_image_geometry() {
        let net: Network<f32> = Network::new(tiny_config(), 1).unwrap();
        let images = Tensor::zeros(&[2, 3, 8, 8]);
        let err = net.output(&images).unwrap_err();
        assert!(err.to_string().contains("network_forward"), "{err}");
    }

    #[test]
    fn zeroed_residual_stage_passes_features_through() {
        // layer4 wraps an identity shortcut. With its conv parameters set
        // to zero and non-negative incoming features, relu(0 + x) = x, so
        // layers 4..8 (all zeroed, all identity-wrapped) preserve the
        // layer3 output and the pooled features equal the layer3 pool.
        let mut config = tiny_config();
        config.cbam_after = vec![];
        config.shortcut_at =
            ["layer4", "layer5", "layer6", "layer7", "layer8"].map(String::from).into();
        let mut net: Network<f64> = Network::new(config.clone(), 5).unwrap();
        for (name, tensor) in &mut net.params {
            if name
                .strip_prefix("layer")
                .and_then(|r| r.split('.').next())
                .and_then(|n| n.parse::<usize>().ok())
                .is_some_and(|n| n >= 4)
                && name.contains(".conv.")
            {
                for v in tensor.data_mut().iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let images = ramp_images(2, &config).cast::<f64>();

        // Reference: truncate the network to three stages by reading the
        // features after layer3 via a hand-built graph.
        let mut tape = Tape::new();
        let binding = net.bind(&mut tape, false);
        let input = tape.leaf(images.clone());
        let out = net.forward(&mut tape, &binding, input).unwrap();

        let mut ref_tape = Tape::new();
        let ref_binding = net.bind(&mut ref_tape, false);
        let ref_input = ref_tape.leaf(images);
        let mut x = ref_input;
        for (stage, slots) in net.plan.stages.iter().take(3).zip(&net.layout.stages) {
            let conv = ref_tape
                .apply(
                    OpKind::Conv2d { stride: stage.stride, padding: stage.padding },
                    &[x, ref_binding.vars[slots.conv_w], ref_binding.vars[slots.conv_b]],
                )
                .unwrap();
            let pre = match (stage.shortcut, slots.shortcut) {
                (None, _) => conv,
                (Some(ShortcutKind::Identity), _) => {
                    ref_tape.apply(OpKind::Add, &[conv, x]).unwrap()
                }
                (Some(ShortcutKind::Projection), Some((pw, pb))) => {
                    let p = ref_tape
                        .apply(
                            OpKind::Conv2d { stride: stage.stride, padding: 0 },
                            &[x, ref_binding.vars[pw], ref_binding.vars[pb]],
                        )
                        .unwrap();
                    ref_tape.apply(OpKind::Add, &[conv, p]).unwrap()
                }
                _ => unreachable!(),
            };
            x = ref_tape.apply(OpKind::Relu, &[pre]).unwrap();
        }
        let pooled = ref_tape.apply(OpKind::GlobalAvgPool, &[x]).unwrap();
        let b_ref = ref_tape
            .apply(
                OpKind::Dense,
                &[pooled, ref_binding.vars[net.layout.hash_w], ref_binding.vars[net.layout.hash_b]],
            )
            .unwrap();

        let full = tape.value(out.binary_like).data();
        let truncated = ref_tape.value(b_ref).data();
        for (a, b) in full.iter().zip(truncated) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn all_thirteen_study_variants_construct() {
        let placements: &[&[&str]] = &[
            &["layer2"],
            &["layer4"],
            &["layer8"],
            &["layer2", "layer4"],
            &["layer4", "layer8"],
            &["layer2", "layer4", "layer8"],
        ];
        let mut variants = Vec::new();
        for p in placements {
            let mut config = NetworkConfig::default();
            config.cbam_after = p.iter().map(|s| s.to_string()).collect();
            config.cbam.spatial_kernel = 3; // fits the 4x4 map at layer8
            config.cbam.stack_count = 1;
            variants.push(config);
        }
        for stacks in 2..=4 {
            let mut config = NetworkConfig::default();
            config.cbam.stack_count = stacks;
            variants.push(config);
        }
        for removed in ["layer3", "layer4", "layer7", "layer8"] {
            let mut config = NetworkConfig::default();
            config.shortcut_at.remove(removed);
            variants.push(config);
        }
        assert_eq!(variants.len(), 13);
        for (i, config) in variants.iter().enumerate() {
            let net = Network::<f32>::new(config.clone(), 11).unwrap_or_else(|e| {
                panic!("variant {i} failed to construct: {e}");
            });
            assert!(net.param_count() > 0);
            let json = config.to_json().unwrap();
            assert_eq!(&NetworkConfig::from_json(&json).unwrap(), config);
        }
    }

    #[test]
    fn parameters_round_trip_through_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.hegh");
        let net: Network<f32> = Network::new(tiny_config(), 21).unwrap();
        net.save_params(&path).unwrap();
        let mut other: Network<f32> = Network::new(tiny_config(), 99).unwrap();
        assert_ne!(net.params[0].1, other.params[0].1, "different seeds, different weights");
        other.load_params(&path).unwrap();
        for ((n0, t0), (n1, t1)) in net.params.iter().zip(&other.params) {
            assert_eq!(n0, n1);
            assert_eq!(t0, t1);
        }
        let images = ramp_images(2, net.config());
        let a = net.output(&images).unwrap();
        let b = other.output(&images).unwrap();
        assert_eq!(a.binary_like.data(), b.binary_like.data());
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.hegh");
        let net: Network<f32> = Network::new(tiny_config(), 21).unwrap();
        net.save_params(&path).unwrap();
        let mut bigger = tiny_config();
        bigger.hash_bits = 5;
        let mut other: Network<f32> = Network::new(bigger, 21).unwrap();
        let err = other.load_params(&path).unwrap_err();
        assert!(err.to_string().contains("head.hash.weight"), "{err}");
    }
}
