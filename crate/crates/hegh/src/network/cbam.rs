//! Channel and spatial attention, composed into one block.
//!
//! The builders append ops to a tape and return the attended feature map's
//! handle. Parameters arrive as tape handles so the same functions serve
//! training (parameters registered with gradients) and inference
//! (parameters bound as constants).

use crate::error::Result;
use crate::tensor::{OpKind, Scalar, Tape, Var};

/// Tape handles of one block's parameters:
/// the shared channel MLP (`w1`, `b1`, `w2`, `b2`) and the spatial
/// convolution (`spatial_w` `[1, 2, k, k]`, `spatial_b` `[1]`).
#[derive(Debug, Clone, Copy)]
pub struct CbamBlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
}

/// Per-channel gate `sigmoid(MLP(maxpool(F)) + MLP(avgpool(F)))`, shape
/// `[B, C, 1, 1]`. The two pooled paths share the MLP parameters.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    block: &CbamBlockVars,
) -> Result<Var> {
    let shape = tape.value(features).shape();
    let (batch, channels) = (shape[0], shape[1]);

    let mlp = |tape: &mut Tape<T>, pooled: Var| -> Result<Var> {
        let h = tape.apply(OpKind::Dense, &[pooled, block.w1, block.b1])?;
        let h = tape.apply(OpKind::Relu, &[h])?;
        tape.apply(OpKind::Dense, &[h, block.w2, block.b2])
    };

    let max_pooled = tape.apply(OpKind::GlobalMaxPool, &[features])?;
    let avg_pooled = tape.apply(OpKind::GlobalAvgPool, &[features])?;
    let from_max = mlp(tape, max_pooled)?;
    let from_avg = mlp(tape, avg_pooled)?;
    let summed = tape.apply(OpKind::Add, &[from_max, from_avg])?;
    let gate = tape.apply(OpKind::Sigmoid, &[summed])?;
    tape.apply(OpKind::Reshape { shape: vec![batch, channels, 1, 1] }, &[gate])
}

/// Per-position gate `sigmoid(conv_k(concat(channel_max, channel_mean)))`,
/// shape `[B, 1, H, W]`. Same-size padding keeps the spatial extents.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    block: &CbamBlockVars,
) -> Result<Var> {
    let kernel = tape.value(block.spatial_w).shape()[2];
    let ch_max = tape.apply(OpKind::ChannelMax, &[features])?;
    let ch_mean = tape.apply(OpKind::ChannelMean, &[features])?;
    let stacked = tape.apply(OpKind::ChannelConcat, &[ch_max, ch_mean])?;
    let conv = tape.apply(
        OpKind::Conv2d { stride: 1, padding: (kernel - 1) / 2 },
        &[stacked, block.spatial_w, block.spatial_b],
    )?;
    tape.apply(OpKind::Sigmoid, &[conv])
}

/// Full block: `F' = Mc(F) * F`, then `F'' = Ms(F') * F'`. Output shape
/// equals input shape.
pub fn cbam_block<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    block: &CbamBlockVars,
) -> Result<Var> {
    let channel_gate = channel_attention(tape, features, block)?;
    let refined = tape.apply(OpKind::Mul, &[channel_gate, features])?;
    let spatial_gate = spatial_attention(tape, refined, block)?;
    tape.apply(OpKind::Mul, &[spatial_gate, refined])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Registers an all-zero parameter set for `channels` with reduction
    /// `r` and spatial kernel `k`.
    fn zero_block(tape: &mut Tape<f64>, channels: usize, r: usize, k: usize) -> CbamBlockVars {
        let hidden = channels / r;
        CbamBlockVars {
            w1: tape.param("w1", Tensor::zeros(&[channels, hidden])),
            b1: tape.param("b1", Tensor::zeros(&[hidden])),
            w2: tape.param("w2", Tensor::zeros(&[hidden, channels])),
            b2: tape.param("b2", Tensor::zeros(&[channels])),
            spatial_w: tape.param("sw", Tensor::zeros(&[1, 2, k, k])),
            spatial_b: tape.param("sb", Tensor::zeros(&[1])),
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_half_attention() {
        let mut tape = Tape::new();
        let block = zero_block(&mut tape, 4, 2, 3);
        let f = tape.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        let mc = channel_attention(&mut tape, f, &block).unwrap();
        let ms = spatial_attention(&mut tape, f, &block).unwrap();
        assert_eq!(tape.value(mc).shape(), &[2, 4, 1, 1]);
        assert_eq!(tape.value(ms).shape(), &[2, 1, 3, 3]);
        for &v in tape.value(mc).data() {
            assert_eq!(v, 0.5);
        }
        for &v in tape.value(ms).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn constant_map_makes_both_pooled_paths_agree() {
        // On a spatially constant input, max pool equals avg pool, so the
        // gate is sigmoid(2 * MLP(v)).
        let mut tape: Tape<f64> = Tape::new();
        let block = CbamBlockVars {
            w1: tape.param("w1", Tensor::from_vec(&[2, 1], vec![0.3, -0.2]).unwrap()),
            b1: tape.param("b1", Tensor::from_vec(&[1], vec![0.1]).unwrap()),
            w2: tape.param("w2", Tensor::from_vec(&[1, 2], vec![0.5, 0.7]).unwrap()),
            b2: tape.param("b2", Tensor::from_vec(&[2], vec![0.0, -0.1]).unwrap()),
            spatial_w: tape.param("sw", Tensor::zeros(&[1, 2, 3, 3])),
            spatial_b: tape.param("sb", Tensor::zeros(&[1])),
        };
        let mut per_channel = Tensor::zeros(&[1, 2, 2, 2]);
        for (i, v) in per_channel.data_mut().iter_mut().enumerate() {
            *v = if i < 4 { 0.8 } else { -0.4 };
        }
        let f = tape.leaf(per_channel);
        let mc = channel_attention(&mut tape, f, &block).unwrap();

        // Hand evaluation: h = relu(w1 . v + b1), m = w2 . h + b2.
        let v = [0.8f64, -0.4];
        let h = (0.3 * v[0] - 0.2 * v[1] + 0.1).max(0.0);
        let m = [0.5 * h, 0.7 * h - 0.1];
        for (got, m1) in tape.value(mc).data().iter().zip(m) {
            let want = 1.0 / (1.0 + (-2.0 * m1).exp());
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_channel_input_degenerates_cleanly() {
        // With C = 1, channel max and channel mean are both the input
        // plane, so the concatenated map is just the plane twice.
        let mut tape = Tape::new();
        let block = zero_block(&mut tape, 1, 1, 3);
        let f = tape.leaf(ramp(&[1, 1, 4, 4]));
        let mx = tape.apply(OpKind::ChannelMax, &[f]).unwrap();
        let mn = tape.apply(OpKind::ChannelMean, &[f]).unwrap();
        assert_eq!(tape.value(mx).data(), tape.value(mn).data());
        let ms = spatial_attention(&mut tape, f, &block).unwrap();
        assert_eq!(tape.value(ms).shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn zero_initialized_block_scales_input_by_a_quarter() {
        let mut tape = Tape::new();
        let block = zero_block(&mut tape, 4, 2, 3);
        let input = ramp(&[2, 4, 3, 3]);
        let f = tape.leaf(input.clone());
        let out = cbam_block(&mut tape, f, &block).unwrap();
        assert_eq!(tape.value(out).shape(), input.shape());
        for (&got, &x) in tape.value(out).data().iter().zip(input.data()) {
            assert!((got - 0.25 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn stacked_zero_blocks_shrink_geometrically() {
        let mut tape = Tape::new();
        let block = zero_block(&mut tape, 2, 2, 3);
        let input = ramp(&[1, 2, 4, 4]);
        let mut x = tape.leaf(input.clone());
        for _ in 0..3 {
            x = cbam_block(&mut tape, x, &block).unwrap();
        }
        let scale = 0.25f64.powi(3);
        for (&got, &v) in tape.value(x).data().iter().zip(input.data()) {
            assert!((got - scale * v).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_values_stay_strictly_inside_the_unit_interval() {
        let mut tape = Tape::new();
        let hidden = 2;
        let block = CbamBlockVars {
            w1: tape.param("w1", ramp(&[4, hidden])),
            b1: tape.param("b1", ramp(&[hidden])),
            w2: tape.param("w2", ramp(&[hidden, 4])),
            b2: tape.param("b2", ramp(&[4])),
            spatial_w: tape.param("sw", ramp(&[1, 2, 5, 5])),
            spatial_b: tape.param("sb", ramp(&[1])),
        };
        let f = tape.leaf(ramp(&[3, 4, 6, 6]));
        let mc = channel_attention(&mut tape, f, &block).unwrap();
        let ms = spatial_attention(&mut tape, f, &block).unwrap();
        for &v in tape.value(mc).data().iter().chain(tape.value(ms).data()) {
            assert!(v > 0.0 && v < 1.0, "attention value {v} out of range");
        }
    }
}
