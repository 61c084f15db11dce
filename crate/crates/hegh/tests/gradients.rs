//! Finite-difference validation of every primitive's adjoint rule.
//!
//! Each op is wrapped as `sum(sigmoid(op(...)))` so that every output
//! element reaches the loss through a nonlinearity; a permuted or
//! rescaled gradient cannot cancel out. Points near a kink are resampled.

use hegh::tensor::{grad_check_resampling, OpKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const EPSILON: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const POINTS: usize = 20;
const RESAMPLE_ATTEMPTS: usize = 60;

fn random_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.2..1.2)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs `POINTS` gradient checks of `sum(sigmoid(op(inputs)))` with fresh
/// random tensors of the given shapes each time.
fn check_op(op: OpKind, shapes: &[&[usize]], seed: u64) {
    for point_idx in 0..POINTS {
        let op = op.clone();
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
            EPSILON,
            RESAMPLE_ATTEMPTS,
        )
        .unwrap_or_else(|e| panic!("{}: point {point_idx}: {e}", op.name()));
        assert!(
            err < TOLERANCE,
            "{}: point {point_idx}: max relative error {err:e}",
            op.name()
        );
    }
}

#[test]
fn conv2d_stride1_padded() {
    check_op(
        OpKind::Conv2d { stride: 1, padding: 1 },
        &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
        0xC0111,
    );
}

#[test]
fn conv2d_stride2_unpadded() {
    check_op(
        OpKind::Conv2d { stride: 2, padding: 0 },
        &[&[2, 2, 6, 6], &[3, 2, 2, 2], &[3]],
        0xC0112,
    );
}

#[test]
fn conv2d_1x1_kernel() {
    check_op(
        OpKind::Conv2d { stride: 1, padding: 0 },
        &[&[2, 4, 3, 3], &[2, 4, 1, 1], &[2]],
        0xC0113,
    );
}

#[test]
fn max_pool2d() {
    check_op(OpKind::MaxPool2d { window: 2, stride: 2 }, &[&[2, 3, 4, 4]], 0x9001);
}

#[test]
fn max_pool2d_overlapping() {
    check_op(OpKind::MaxPool2d { window: 3, stride: 1 }, &[&[1, 2, 5, 5]], 0x9002);
}

#[test]
fn avg_pool2d() {
    check_op(OpKind::AvgPool2d { window: 2, stride: 2 }, &[&[2, 3, 4, 4]], 0x9003);
}

#[test]
fn global_max_pool() {
    check_op(OpKind::GlobalMaxPool, &[&[2, 3, 3, 3]], 0x9004);
}

#[test]
fn global_avg_pool() {
    check_op(OpKind::GlobalAvgPool, &[&[2, 3, 3, 3]], 0x9005);
}

#[test]
fn channel_max() {
    check_op(OpKind::ChannelMax, &[&[2, 4, 3, 3]], 0x9006);
}

#[test]
fn channel_mean() {
    check_op(OpKind::ChannelMean, &[&[2, 4, 3, 3]], 0x9007);
}

#[test]
fn dense_flat_input() {
    check_op(OpKind::Dense, &[&[3, 7], &[7, 4], &[4]], 0xD001);
}

#[test]
fn dense_flattens_feature_maps() {
    check_op(OpKind::Dense, &[&[2, 2, 2, 2], &[8, 3], &[3]], 0xD002);
}

#[test]
fn relu() {
    check_op(OpKind::Relu, &[&[17]], 0xA001);
}

#[test]
fn sigmoid() {
    check_op(OpKind::Sigmoid, &[&[17]], 0xA002);
}

#[test]
fn add_equal_shapes() {
    check_op(OpKind::Add, &[&[2, 3, 2, 2], &[2, 3, 2, 2]], 0xB001);
}

#[test]
fn add_broadcast_channel() {
    check_op(OpKind::Add, &[&[1, 3, 1, 1], &[2, 3, 2, 2]], 0xB002);
}

#[test]
fn sub_broadcast_spatial() {
    check_op(OpKind::Sub, &[&[2, 3, 2, 2], &[2, 1, 2, 2]], 0xB003);
}

#[test]
fn mul_equal_shapes() {
    check_op(OpKind::Mul, &[&[3, 4], &[3, 4]], 0xB004);
}

#[test]
fn mul_broadcast_attention_shapes() {
    // Channel attention: [B, C, 1, 1] against [B, C, H, W].
    check_op(OpKind::Mul, &[&[2, 3, 1, 1], &[2, 3, 2, 2]], 0xB005);
    // Spatial attention: [B, 1, H, W] against [B, C, H, W].
    check_op(OpKind::Mul, &[&[2, 1, 2, 2], &[2, 3, 2, 2]], 0xB006);
}

#[test]
fn channel_concat() {
    check_op(OpKind::ChannelConcat, &[&[2, 2, 3, 3], &[2, 3, 3, 3]], 0xCC01);
}

#[test]
fn gather_rows_with_repeats() {
    check_op(OpKind::GatherRows { indices: vec![0, 2, 2, 1] }, &[&[3, 4]], 0x6001);
}

#[test]
fn reshape() {
    check_op(OpKind::Reshape { shape: vec![3, 4] }, &[&[2, 6]], 0x6002);
}

#[test]
fn sum() {
    check_op(OpKind::Sum, &[&[3, 4]], 0x5001);
}

#[test]
fn mean() {
    check_op(OpKind::Mean, &[&[3, 4]], 0x5002);
}

#[test]
fn row_sum() {
    check_op(OpKind::RowSum, &[&[4, 5]], 0x5003);
}

#[test]
fn abs() {
    check_op(OpKind::Abs, &[&[9]], 0x4001);
}

#[test]
fn max_const() {
    check_op(OpKind::MaxConst { threshold: 0.3 }, &[&[9]], 0x4002);
}

#[test]
fn pow_square_and_cube() {
    check_op(OpKind::Pow { exponent: 2 }, &[&[7]], 0x4003);
    check_op(OpKind::Pow { exponent: 3 }, &[&[7]], 0x4004);
}

#[test]
fn affine() {
    check_op(OpKind::Affine { scale: 1.7, offset: -0.3 }, &[&[9]], 0x4005);
}

/// Gradient of `sum(b) + sum(p)` through the whole network, attention
/// blocks and shortcuts included. The architecture is shrunk so the
/// finite-difference sweep over every parameter stays fast.
#[test]
fn full_network_end_to_end() {
    use hegh::network::{Binding, CbamConfig, LayerConfig, Network, NetworkConfig};
    use std::cell::RefCell;

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

    // Forward only reads the plan and the tape-bound values, so one
    // instance serves every resampled parameter set.
    let net: Network<f64> = Network::new(config.clone(), 42).unwrap();
    let images = RefCell::new(Tensor::<f64>::zeros(&[1, 3, 16, 16]));

    let err = grad_check_resampling(
        |attempt| {
            let mut rng = ChaCha20Rng::seed_from_u64(0x2E70 + attempt as u64);
            *images.borrow_mut() = random_tensor(&mut rng, &[1, 3, 16, 16]);
            Network::<f64>::new(config.clone(), 0xB0B0 + attempt as u64)
                .unwrap()
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
        EPSILON,
        RESAMPLE_ATTEMPTS,
    )
    .unwrap();
    assert!(err < TOLERANCE, "max relative error {err:e}");
}
