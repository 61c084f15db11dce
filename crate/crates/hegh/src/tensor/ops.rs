//! The primitive operations the tape can record.
//!
//! Each op knows three things: how to validate input shapes, how to compute
//! its forward value, and how to push a gradient back to its inputs. Forward
//! additionally reports a *kink distance*: how far (in input space) the op
//! sits from the nearest non-differentiable point of its rule. Smooth ops
//! report infinity; `Relu`, `Abs`, `MaxConst` and the max-style poolings
//! report the distance to their nearest kink so that finite-difference
//! checks can reject evaluation points where the central difference
//! straddles a corner.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;
use super::linalg;

/// Identifies a primitive operation together with its static attributes.
///
/// Attribute floats are stored as `f64` so the enum stays independent of
/// the scalar type the tape runs in; they are converted on use.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// 2-d convolution over `[B, Cin, H, W]` with weights `[Cout, Cin, KH, KW]`
    /// and a per-channel bias `[Cout]`.
    Conv2d { stride: usize, padding: usize },
    /// Square-window max pooling over the spatial axes, no padding.
    MaxPool2d { window: usize, stride: usize },
    /// Square-window average pooling over the spatial axes, no padding.
    AvgPool2d { window: usize, stride: usize },
    /// Max over all spatial positions, producing `[B, C, 1, 1]`.
    GlobalMaxPool,
    /// Mean over all spatial positions, producing `[B, C, 1, 1]`.
    GlobalAvgPool,
    /// Max over the channel axis, producing `[B, 1, H, W]`.
    ChannelMax,
    /// Mean over the channel axis, producing `[B, 1, H, W]`.
    ChannelMean,
    /// Fully connected layer: flattens trailing axes of `x` to match the
    /// weight's input extent. Inputs are `x [B, ...]`, `w [In, Out]`, `b [Out]`.
    Dense,
    Relu,
    Sigmoid,
    /// Elementwise with broadcasting over axes of extent 1 (equal ranks).
    Add,
    /// Elementwise with broadcasting over axes of extent 1 (equal ranks).
    Sub,
    /// Elementwise with broadcasting over axes of extent 1 (equal ranks).
    Mul,
    /// Concatenates `[B, Ci, H, W]` inputs along the channel axis.
    ChannelConcat,
    /// Selects rows of a rank-2 tensor; rows may repeat.
    GatherRows { indices: Vec<usize> },
    /// Reinterprets the data with a new shape of equal element count.
    Reshape { shape: Vec<usize> },
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Mean of all elements, producing a scalar.
    Mean,
    /// Sums each row of a rank >= 2 tensor over all trailing axes,
    /// producing `[rows, 1]`.
    RowSum,
    Abs,
    /// `max(x, threshold)` elementwise against a fixed threshold.
    MaxConst { threshold: f64 },
    /// Integer power `x^exponent` elementwise.
    Pow { exponent: i32 },
    /// `scale * x + offset` elementwise.
    Affine { scale: f64, offset: f64 },
}

impl OpKind {
    /// Stable name used in error messages and parameter-less debugging.
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::AvgPool2d { .. } => "avg_pool2d",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::ChannelMax => "channel_max",
            OpKind::ChannelMean => "channel_mean",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ChannelConcat => "channel_concat",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowSum => "row_sum",
            OpKind::Abs => "abs",
            OpKind::MaxConst { .. } => "max_const",
            OpKind::Pow { .. } => "pow",
            OpKind::Affine { .. } => "affine",
        }
    }

    fn expect_arity<T: Scalar>(&self, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::shape(
                self.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }
}

/// Forward value plus the distance to the nearest kink of the op at the
/// evaluated point (`f64::INFINITY` for smooth ops).
#[derive(Debug)]
pub(super) struct ForwardResult<T: Scalar> {
    pub value: Tensor<T>,
    pub kink_distance: f64,
}

impl<T: Scalar> ForwardResult<T> {
    fn smooth(value: Tensor<T>) -> Self {
        ForwardResult { value, kink_distance: f64::INFINITY }
    }
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

// ---------------------------------------------------------------------------
// Convolution geometry and im2col
// ---------------------------------------------------------------------------

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geom<T: Scalar>(
    op: &OpKind,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let name = op.name();
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            name,
            format!(
                "needs rank-4 input and weight, got input {} and weight {}",
                shape_str(xs),
                shape_str(ws)
            ),
        ));
    }
    let (batch, cin, h, w_ext) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::shape(
            name,
            format!(
                "input has {cin} channels but weight {} expects {wcin}",
                shape_str(ws)
            ),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(
            name,
            format!("bias {} must be [{cout}]", shape_str(b.shape())),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(name, "stride must be at least 1"));
    }
    let hp = h + 2 * padding;
    let wp = w_ext + 2 * padding;
    if kh == 0 || kw == 0 || kh > hp || kw > wp {
        return Err(Error::shape(
            name,
            format!(
                "kernel {kh}x{kw} does not fit padded input {hp}x{wp} \
                 (input {}, padding {padding})",
                shape_str(xs)
            ),
        ));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    Ok(ConvGeom { batch, cin, h, w: w_ext, cout, kh, kw, stride, padding, oh, ow })
}

/// Unfolds one image `[Cin, H, W]` into a patch matrix of shape
/// `[Cin*KH*KW, OH*OW]` (patch axis rows, output positions columns).
/// Positions outside the padded border contribute zero.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let n = g.out_spatial();
    debug_assert_eq!(col.len(), g.patch() * n);
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[r * n..(r + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        for v in out_row.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one image, the inverse
/// of [`im2col`] with accumulation at overlapping positions.
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.out_spatial();
    debug_assert_eq!(col.len(), g.patch() * n);
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[r * n..(r + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting for elementwise binary ops
// ---------------------------------------------------------------------------

fn broadcast_shape(op: &OpKind, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op.name(),
            format!(
                "broadcast requires equal ranks, got {} and {}",
                shape_str(a),
                shape_str(b)
            ),
        ));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&ea, &eb) in a.iter().zip(b) {
        if ea == eb || ea == 1 || eb == 1 {
            out.push(ea.max(eb));
        } else {
            return Err(Error::shape(
                op.name(),
                format!(
                    "axis extents {ea} and {eb} are incompatible between {} and {}",
                    shape_str(a),
                    shape_str(b)
                ),
            ));
        }
    }
    Ok(out)
}

/// Walks every element of `out_shape` in row-major order, calling
/// `f(out_flat, a_flat, b_flat)` with the flat offsets into the two
/// (possibly broadcast) operands. Scalars (shape `[]`) pin both offsets
/// at zero.
fn for_each_broadcast<F: FnMut(usize, usize, usize)>(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: F,
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    // Row-major strides, zeroed on broadcast axes.
    let mut sa = vec![0usize; rank];
    let mut sb = vec![0usize; rank];
    let mut run_a = 1;
    let mut run_b = 1;
    for ax in (0..rank).rev() {
        sa[ax] = if a_shape[ax] == 1 { 0 } else { run_a };
        sb[ax] = if b_shape[ax] == 1 { 0 } else { run_b };
        run_a *= a_shape[ax];
        run_b *= b_shape[ax];
    }
    let mut idx = vec![0usize; rank];
    let mut ia = 0;
    let mut ib = 0;
    for flat in 0..numel {
        f(flat, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
}

fn binary_forward<T: Scalar>(
    op: &OpKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let mut out = Tensor::zeros(&out_shape);
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *o = f(x, y);
        }
    } else {
        let (ad, bd) = (a.data(), b.data());
        let out_data = out.data_mut();
        for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
            out_data[o] = f(ad[ia], bd[ib]);
        });
    }
    Ok(out)
}

/// Accumulates `per_element(out_flat)` into the gradient of operand `a`
/// (reducing over broadcast axes as it goes).
fn binary_backward_into<T: Scalar>(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    da: &mut [T],
    per_element: impl Fn(usize, usize) -> T,
) {
    for_each_broadcast(out_shape, a_shape, b_shape, |o, ia, ib| {
        let _ = ib;
        da[ia] += per_element(o, ib);
    });
}

// ---------------------------------------------------------------------------
// Pooling helpers
// ---------------------------------------------------------------------------

fn pool_geom<T: Scalar>(
    op: &OpKind,
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape(
            op.name(),
            format!("needs a rank-4 input, got {}", shape_str(xs)),
        ));
    }
    let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if window == 0 || stride == 0 {
        return Err(Error::shape(op.name(), "window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            op.name(),
            format!("window {window} exceeds spatial extent of {}", shape_str(xs)),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    Ok((batch, ch, h, w, oh, ow))
}

/// Index of the first maximum and the gap between the two largest values
/// (`f64::INFINITY` when the iterator yields a single element).
fn argmax_and_gap<T: Scalar>(values: impl Iterator<Item = (usize, T)>) -> (usize, T, f64) {
    let mut best_idx = 0;
    let mut best = T::neg_infinity();
    let mut second = T::neg_infinity();
    for (idx, v) in values {
        if v > best {
            second = best;
            best = v;
            best_idx = idx;
        } else if v > second {
            second = v;
        }
    }
    let gap = if second == T::neg_infinity() {
        // A single candidate has no competing branch.
        f64::INFINITY
    } else if best == T::zero() && second == T::zero() {
        // A tie at exactly zero comes from clamped values (relu outputs,
        // or products with them). Those stay zero under small
        // perturbations and carry zero derivative on both sides, so the
        // selection ambiguity never reaches the loss. A clamp sitting on
        // its own kink is reported by the op that produced it.
        f64::INFINITY
    } else {
        (best - second).as_f64()
    };
    (best_idx, best, gap)
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

pub(super) fn forward<T: Scalar>(op: &OpKind, inputs: &[&Tensor<T>]) -> Result<ForwardResult<T>> {
    match op {
        OpKind::Conv2d { stride, padding } => {
            op.expect_arity(inputs, 3)?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let g = conv_geom(op, x, w, b, *stride, *padding)?;
            let patch = g.patch();
            let n = g.out_spatial();
            let plane_in = g.cin * g.h * g.w;
            let plane_out = g.cout * n;
            let mut out = Tensor::zeros(&[g.batch, g.cout, g.oh, g.ow]);
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            parallel::for_chunks_mut(out.data_mut(), plane_out, |bi, y| {
                let mut col = vec![T::zero(); patch * n];
                im2col(&xd[bi * plane_in..(bi + 1) * plane_in], &g, &mut col);
                linalg::matmul_seq(wd, &col, g.cout, patch, n, y, false);
                for co in 0..g.cout {
                    let bias = bd[co];
                    for v in &mut y[co * n..(co + 1) * n] {
                        *v += bias;
                    }
                }
            });
            Ok(ForwardResult::smooth(out))
        }
        OpKind::MaxPool2d { window, stride } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let (batch, ch, h, w, oh, ow) = pool_geom(op, x, *window, *stride)?;
            let mut out = Tensor::zeros(&[batch, ch, oh, ow]);
            let xd = x.data();
            let mut kink = f64::INFINITY;
            let out_data = out.data_mut();
            for p in 0..batch * ch {
                let plane = &xd[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (_, best, gap) = argmax_and_gap(window_iter(
                            plane, w, oy * stride, ox * stride, *window,
                        ));
                        out_data[(p * oh + oy) * ow + ox] = best;
                        if gap < kink {
                            kink = gap;
                        }
                    }
                }
            }
            Ok(ForwardResult { value: out, kink_distance: kink })
        }
        OpKind::AvgPool2d { window, stride } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let (batch, ch, h, w, oh, ow) = pool_geom(op, x, *window, *stride)?;
            let mut out = Tensor::zeros(&[batch, ch, oh, ow]);
            let inv = T::one() / T::from_f64((window * window) as f64);
            let xd = x.data();
            let out_data = out.data_mut();
            for p in 0..batch * ch {
                let plane = &xd[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for (_, v) in window_iter(plane, w, oy * stride, ox * stride, *window) {
                            acc += v;
                        }
                        out_data[(p * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::GlobalMaxPool => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 4 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs a rank-4 input, got {}", shape_str(xs)),
                ));
            }
            let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let mut out = Tensor::zeros(&[batch, ch, 1, 1]);
            let xd = x.data();
            let mut kink = f64::INFINITY;
            let out_data = out.data_mut();
            for p in 0..batch * ch {
                let plane = &xd[p * hw..(p + 1) * hw];
                let (_, best, gap) =
                    argmax_and_gap(plane.iter().copied().enumerate());
                out_data[p] = best;
                if gap < kink {
                    kink = gap;
                }
            }
            Ok(ForwardResult { value: out, kink_distance: kink })
        }
        OpKind::GlobalAvgPool => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 4 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs a rank-4 input, got {}", shape_str(xs)),
                ));
            }
            let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let mut out = Tensor::zeros(&[batch, ch, 1, 1]);
            let inv = T::one() / T::from_f64(hw as f64);
            let xd = x.data();
            let out_data = out.data_mut();
            for p in 0..batch * ch {
                let mut acc = T::zero();
                for &v in &xd[p * hw..(p + 1) * hw] {
                    acc += v;
                }
                out_data[p] = acc * inv;
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::ChannelMax => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 4 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs a rank-4 input, got {}", shape_str(xs)),
                ));
            }
            let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let mut out = Tensor::zeros(&[batch, 1, xs[2], xs[3]]);
            let xd = x.data();
            let mut kink = f64::INFINITY;
            let out_data = out.data_mut();
            for bi in 0..batch {
                let img = &xd[bi * ch * hw..(bi + 1) * ch * hw];
                for s in 0..hw {
                    let (_, best, gap) =
                        argmax_and_gap((0..ch).map(|c| (c, img[c * hw + s])));
                    out_data[bi * hw + s] = best;
                    if gap < kink {
                        kink = gap;
                    }
                }
            }
            Ok(ForwardResult { value: out, kink_distance: kink })
        }
        OpKind::ChannelMean => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 4 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs a rank-4 input, got {}", shape_str(xs)),
                ));
            }
            let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let mut out = Tensor::zeros(&[batch, 1, xs[2], xs[3]]);
            let inv = T::one() / T::from_f64(ch as f64);
            let xd = x.data();
            let out_data = out.data_mut();
            for bi in 0..batch {
                let img = &xd[bi * ch * hw..(bi + 1) * ch * hw];
                for s in 0..hw {
                    let mut acc = T::zero();
                    for c in 0..ch {
                        acc += img[c * hw + s];
                    }
                    out_data[bi * hw + s] = acc * inv;
                }
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Dense => {
            op.expect_arity(inputs, 3)?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let ws = w.shape();
            if ws.len() != 2 {
                return Err(Error::shape(
                    op.name(),
                    format!("weight must be rank 2, got {}", shape_str(ws)),
                ));
            }
            let (fan_in, fan_out) = (ws[0], ws[1]);
            let xs = x.shape();
            if xs.is_empty() {
                return Err(Error::shape(op.name(), "input must not be a scalar"));
            }
            let batch = xs[0];
            let flat: usize = xs[1..].iter().product();
            if flat != fan_in {
                return Err(Error::shape(
                    op.name(),
                    format!(
                        "input {} flattens to {flat} features but weight {} expects {fan_in}",
                        shape_str(xs),
                        shape_str(ws)
                    ),
                ));
            }
            if b.shape() != [fan_out] {
                return Err(Error::shape(
                    op.name(),
                    format!("bias {} must be [{fan_out}]", shape_str(b.shape())),
                ));
            }
            let mut out = Tensor::zeros(&[batch, fan_out]);
            linalg::matmul(x.data(), w.data(), batch, fan_in, fan_out, out.data_mut());
            let bd = b.data();
            for row in out.data_mut().chunks_mut(fan_out) {
                for (v, &bias) in row.iter_mut().zip(bd) {
                    *v += bias;
                }
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Relu => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let mut out = Tensor::zeros(x.shape());
            let mut kink = f64::INFINITY;
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = if v > T::zero() { v } else { T::zero() };
                let d = v.abs().as_f64();
                if d < kink {
                    kink = d;
                }
            }
            Ok(ForwardResult { value: out, kink_distance: kink })
        }
        OpKind::Sigmoid => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let mut out = Tensor::zeros(x.shape());
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = sigmoid(v);
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Add => {
            op.expect_arity(inputs, 2)?;
            Ok(ForwardResult::smooth(binary_forward(op, inputs[0], inputs[1], |a, b| a + b)?))
        }
        OpKind::Sub => {
            op.expect_arity(inputs, 2)?;
            Ok(ForwardResult::smooth(binary_forward(op, inputs[0], inputs[1], |a, b| a - b)?))
        }
        OpKind::Mul => {
            op.expect_arity(inputs, 2)?;
            Ok(ForwardResult::smooth(binary_forward(op, inputs[0], inputs[1], |a, b| a * b)?))
        }
        OpKind::ChannelConcat => {
            if inputs.len() < 2 {
                return Err(Error::shape(
                    op.name(),
                    format!("expected at least 2 inputs, got {}", inputs.len()),
                ));
            }
            let first = inputs[0].shape();
            if first.len() != 4 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs rank-4 inputs, got {}", shape_str(first)),
                ));
            }
            let (batch, h, w) = (first[0], first[2], first[3]);
            let mut total_ch = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != 4 || s[0] != batch || s[2] != h || s[3] != w {
                    return Err(Error::shape(
                        op.name(),
                        format!(
                            "inputs must agree outside the channel axis, got {} and {}",
                            shape_str(first),
                            shape_str(s)
                        ),
                    ));
                }
                total_ch += s[1];
            }
            let hw = h * w;
            let mut out = Tensor::zeros(&[batch, total_ch, h, w]);
            let out_data = out.data_mut();
            for bi in 0..batch {
                let mut dst = bi * total_ch * hw;
                for t in inputs {
                    let ci = t.shape()[1];
                    let src = &t.data()[bi * ci * hw..(bi + 1) * ci * hw];
                    out_data[dst..dst + ci * hw].copy_from_slice(src);
                    dst += ci * hw;
                }
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::GatherRows { indices } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 2 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs a rank-2 input, got {}", shape_str(xs)),
                ));
            }
            if indices.is_empty() {
                return Err(Error::shape(op.name(), "index list must not be empty"));
            }
            let (rows, cols) = (xs[0], xs[1]);
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::shape(
                    op.name(),
                    format!("row index {bad} out of range for input {}", shape_str(xs)),
                ));
            }
            let mut out = Tensor::zeros(&[indices.len(), cols]);
            let xd = x.data();
            for (dst, &src) in out.data_mut().chunks_mut(cols).zip(indices) {
                dst.copy_from_slice(&xd[src * cols..(src + 1) * cols]);
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Reshape { shape } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let numel: usize = shape.iter().product();
            if shape.iter().any(|&e| e == 0) || numel != x.numel() {
                return Err(Error::shape(
                    op.name(),
                    format!(
                        "cannot view {} ({} elements) as {}",
                        shape_str(x.shape()),
                        x.numel(),
                        shape_str(shape)
                    ),
                ));
            }
            let mut out = Tensor::zeros(shape);
            out.data_mut().copy_from_slice(x.data());
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Sum => {
            op.expect_arity(inputs, 1)?;
            let mut acc = T::zero();
            for &v in inputs[0].data() {
                acc += v;
            }
            Ok(ForwardResult::smooth(Tensor::scalar(acc)))
        }
        OpKind::Mean => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let mut acc = T::zero();
            for &v in x.data() {
                acc += v;
            }
            let value = acc / T::from_f64(x.numel() as f64);
            Ok(ForwardResult::smooth(Tensor::scalar(value)))
        }
        OpKind::RowSum => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() < 2 {
                return Err(Error::shape(
                    op.name(),
                    format!("needs rank >= 2, got {}", shape_str(xs)),
                ));
            }
            let rows = xs[0];
            let cols = x.numel() / rows;
            let mut out = Tensor::zeros(&[rows, 1]);
            let xd = x.data();
            for (o, row) in out.data_mut().iter_mut().zip(xd.chunks(cols)) {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                *o = acc;
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Abs => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let mut out = Tensor::zeros(x.shape());
            let mut kink = f64::INFINITY;
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = v.abs();
                let d = v.abs().as_f64();
                if d < kink {
                    kink = d;
                }
            }
            Ok(ForwardResult { value: out, kink_distance: kink })
        }
        OpKind::MaxConst { threshold } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let t = T::from_f64(*threshold);
            let mut out = Tensor::zeros(x.shape());
            let mut kink = f64::INFINITY;
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = if v > t { v } else { t };
                let d = (v - t).abs().as_f64();
                if d < kink {
                    kink = d;
                }
            }
            Ok(ForwardResult { value: out, kink_distance: kink })
        }
        OpKind::Pow { exponent } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let mut out = Tensor::zeros(x.shape());
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = v.powi(*exponent);
            }
            Ok(ForwardResult::smooth(out))
        }
        OpKind::Affine { scale, offset } => {
            op.expect_arity(inputs, 1)?;
            let x = inputs[0];
            let (s, c) = (T::from_f64(*scale), T::from_f64(*offset));
            let mut out = Tensor::zeros(x.shape());
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = s * v + c;
            }
            Ok(ForwardResult::smooth(out))
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn window_iter<'a, T: Scalar>(
    plane: &'a [T],
    width: usize,
    y0: usize,
    x0: usize,
    window: usize,
) -> impl Iterator<Item = (usize, T)> + 'a {
    (0..window * window).map(move |i| {
        let (dy, dx) = (i / window, i % window);
        (i, plane[(y0 + dy) * width + x0 + dx])
    })
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Pushes `grad_out` (same element count as `output`) back through `op`,
/// returning one gradient buffer per input. Entries whose `needs` flag is
/// false come back as `None` and are not computed.
pub(super) fn backward<T: Scalar>(
    op: &OpKind,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad_out: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    debug_assert_eq!(needs.len(), inputs.len());
    debug_assert_eq!(grad_out.len(), output.numel());
    let mut grads: Vec<Option<Vec<T>>> = inputs
        .iter()
        .zip(needs)
        .map(|(t, &need)| need.then(|| vec![T::zero(); t.numel()]))
        .collect();

    match op {
        OpKind::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let g = conv_geom(op, x, w, b, *stride, *padding)?;
            let patch = g.patch();
            let n = g.out_spatial();
            let plane_in = g.cin * g.h * g.w;
            let plane_out = g.cout * n;
            let xd = x.data();
            let wd = w.data();

            if let Some(db) = grads.get_mut(2).and_then(|g| g.as_mut()) {
                for bi in 0..g.batch {
                    let gy = &grad_out[bi * plane_out..(bi + 1) * plane_out];
                    for co in 0..g.cout {
                        let mut acc = T::zero();
                        for &v in &gy[co * n..(co + 1) * n] {
                            acc += v;
                        }
                        db[co] += acc;
                    }
                }
            }
            if needs[1] {
                // dW accumulates image by image in batch order; the matmul
                // inside is parallel over disjoint rows of dW, so the sum
                // order per element never changes.
                let mut col = vec![T::zero(); patch * n];
                let mut col_t = vec![T::zero(); n * patch];
                for bi in 0..g.batch {
                    im2col(&xd[bi * plane_in..(bi + 1) * plane_in], &g, &mut col);
                    linalg::transpose(&col, patch, n, &mut col_t);
                    let gy = &grad_out[bi * plane_out..(bi + 1) * plane_out];
                    let dw = grads[1].as_mut().expect("dW buffer");
                    linalg::matmul_acc(gy, &col_t, g.cout, n, patch, dw, true);
                }
            }
            if let Some(dx) = grads.get_mut(0).and_then(|g| g.as_mut()) {
                let mut wt = vec![T::zero(); patch * g.cout];
                linalg::transpose(wd, g.cout, patch, &mut wt);
                parallel::for_chunks_mut(dx, plane_in, |bi, dxb| {
                    let gy = &grad_out[bi * plane_out..(bi + 1) * plane_out];
                    let mut dcol = vec![T::zero(); patch * n];
                    linalg::matmul_seq(&wt, gy, patch, g.cout, n, &mut dcol, false);
                    col2im_add(&dcol, &g, dxb);
                });
            }
        }
        OpKind::MaxPool2d { window, stride } => {
            if let Some(dx) = grads[0].as_mut() {
                let x = inputs[0];
                let (batch, ch, h, w, oh, ow) = pool_geom(op, x, *window, *stride)?;
                let xd = x.data();
                for p in 0..batch * ch {
                    let plane = &xd[p * h * w..(p + 1) * h * w];
                    let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (idx, _, _) = argmax_and_gap(window_iter(
                                plane, w, oy * stride, ox * stride, *window,
                            ));
                            let (dy, dxo) = (idx / window, idx % window);
                            dplane[(oy * stride + dy) * w + ox * stride + dxo] +=
                                grad_out[(p * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
        OpKind::AvgPool2d { window, stride } => {
            if let Some(dx) = grads[0].as_mut() {
                let x = inputs[0];
                let (batch, ch, h, w, oh, ow) = pool_geom(op, x, *window, *stride)?;
                let inv = T::one() / T::from_f64((window * window) as f64);
                for p in 0..batch * ch {
                    let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let share = grad_out[(p * oh + oy) * ow + ox] * inv;
                            for dy in 0..*window {
                                for dxo in 0..*window {
                                    dplane[(oy * stride + dy) * w + ox * stride + dxo] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
        OpKind::GlobalMaxPool => {
            if let Some(dx) = grads[0].as_mut() {
                let x = inputs[0];
                let xs = x.shape();
                let hw = xs[2] * xs[3];
                let xd = x.data();
                for p in 0..xs[0] * xs[1] {
                    let plane = &xd[p * hw..(p + 1) * hw];
                    let (idx, _, _) = argmax_and_gap(plane.iter().copied().enumerate());
                    dx[p * hw + idx] += grad_out[p];
                }
            }
        }
        OpKind::GlobalAvgPool => {
            if let Some(dx) = grads[0].as_mut() {
                let xs = inputs[0].shape();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::from_f64(hw as f64);
                for p in 0..xs[0] * xs[1] {
                    let share = grad_out[p] * inv;
                    for v in &mut dx[p * hw..(p + 1) * hw] {
                        *v += share;
                    }
                }
            }
        }
        OpKind::ChannelMax => {
            if let Some(dx) = grads[0].as_mut() {
                let x = inputs[0];
                let xs = x.shape();
                let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let xd = x.data();
                for bi in 0..batch {
                    let img = &xd[bi * ch * hw..(bi + 1) * ch * hw];
                    for s in 0..hw {
                        let (c, _, _) = argmax_and_gap((0..ch).map(|c| (c, img[c * hw + s])));
                        dx[bi * ch * hw + c * hw + s] += grad_out[bi * hw + s];
                    }
                }
            }
        }
        OpKind::ChannelMean => {
            if let Some(dx) = grads[0].as_mut() {
                let xs = inputs[0].shape();
                let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let inv = T::one() / T::from_f64(ch as f64);
                for bi in 0..batch {
                    for s in 0..hw {
                        let share = grad_out[bi * hw + s] * inv;
                        for c in 0..ch {
                            dx[bi * ch * hw + c * hw + s] += share;
                        }
                    }
                }
            }
        }
        OpKind::Dense => {
            let (x, w) = (inputs[0], inputs[1]);
            let ws = w.shape();
            let (fan_in, fan_out) = (ws[0], ws[1]);
            let batch = x.shape()[0];
            if let Some(dx) = grads[0].as_mut() {
                let mut wt = vec![T::zero(); fan_out * fan_in];
                linalg::transpose(w.data(), fan_in, fan_out, &mut wt);
                linalg::matmul(grad_out, &wt, batch, fan_out, fan_in, dx);
            }
            if let Some(dw) = grads[1].as_mut() {
                let mut xt = vec![T::zero(); fan_in * batch];
                linalg::transpose(x.data(), batch, fan_in, &mut xt);
                linalg::matmul(&xt, grad_out, fan_in, batch, fan_out, dw);
            }
            if let Some(db) = grads[2].as_mut() {
                for row in grad_out.chunks(fan_out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        OpKind::Relu => {
            if let Some(dx) = grads[0].as_mut() {
                for ((d, &v), &g) in dx.iter_mut().zip(inputs[0].data()).zip(grad_out) {
                    if v > T::zero() {
                        *d = g;
                    }
                }
            }
        }
        OpKind::Sigmoid => {
            if let Some(dx) = grads[0].as_mut() {
                for ((d, &y), &g) in dx.iter_mut().zip(output.data()).zip(grad_out) {
                    *d = g * y * (T::one() - y);
                }
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let out_shape = output.shape().to_vec();
            let (ad, bd) = (a.data(), b.data());
            if grads[0].is_some() {
                let da = grads[0].as_mut().expect("da buffer");
                match op {
                    OpKind::Add | OpKind::Sub => binary_backward_into(
                        &out_shape,
                        a.shape(),
                        b.shape(),
                        da,
                        |o, _| grad_out[o],
                    ),
                    _ => binary_backward_into(
                        &out_shape,
                        a.shape(),
                        b.shape(),
                        da,
                        |o, ib| grad_out[o] * bd[ib],
                    ),
                }
            }
            if grads[1].is_some() {
                let db = grads[1].as_mut().expect("db buffer");
                // Swap operands so the accumulation target is the first
                // shape argument of the walker.
                match op {
                    OpKind::Add => binary_backward_into(
                        &out_shape,
                        b.shape(),
                        a.shape(),
                        db,
                        |o, _| grad_out[o],
                    ),
                    OpKind::Sub => binary_backward_into(
                        &out_shape,
                        b.shape(),
                        a.shape(),
                        db,
                        |o, _| -grad_out[o],
                    ),
                    _ => binary_backward_into(
                        &out_shape,
                        b.shape(),
                        a.shape(),
                        db,
                        |o, ia| grad_out[o] * ad[ia],
                    ),
                }
            }
        }
        OpKind::ChannelConcat => {
            let first = inputs[0].shape();
            let (batch, h, w) = (first[0], first[2], first[3]);
            let hw = h * w;
            let total_ch: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            for bi in 0..batch {
                let mut src = bi * total_ch * hw;
                for (t, grad) in inputs.iter().zip(grads.iter_mut()) {
                    let ci = t.shape()[1];
                    if let Some(d) = grad.as_mut() {
                        d[bi * ci * hw..(bi + 1) * ci * hw]
                            .copy_from_slice(&grad_out[src..src + ci * hw]);
                    }
                    src += ci * hw;
                }
            }
        }
        OpKind::GatherRows { indices } => {
            if let Some(dx) = grads[0].as_mut() {
                let cols = inputs[0].shape()[1];
                for (j, &src) in indices.iter().enumerate() {
                    let row = &grad_out[j * cols..(j + 1) * cols];
                    let dst = &mut dx[src * cols..(src + 1) * cols];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        OpKind::Reshape { .. } => {
            if let Some(dx) = grads[0].as_mut() {
                dx.copy_from_slice(grad_out);
            }
        }
        OpKind::Sum => {
            if let Some(dx) = grads[0].as_mut() {
                let g = grad_out[0];
                for v in dx.iter_mut() {
                    *v = g;
                }
            }
        }
        OpKind::Mean => {
            if let Some(dx) = grads[0].as_mut() {
                let g = grad_out[0] / T::from_f64(inputs[0].numel() as f64);
                for v in dx.iter_mut() {
                    *v = g;
                }
            }
        }
        OpKind::RowSum => {
            if let Some(dx) = grads[0].as_mut() {
                let rows = inputs[0].shape()[0];
                let cols = inputs[0].numel() / rows;
                for (r, chunk) in dx.chunks_mut(cols).enumerate() {
                    let g = grad_out[r];
                    for v in chunk.iter_mut() {
                        *v = g;
                    }
                }
            }
        }
        OpKind::Abs => {
            if let Some(dx) = grads[0].as_mut() {
                for ((d, &v), &g) in dx.iter_mut().zip(inputs[0].data()).zip(grad_out) {
                    *d = if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    };
                }
            }
        }
        OpKind::MaxConst { threshold } => {
            if let Some(dx) = grads[0].as_mut() {
                let t = T::from_f64(*threshold);
                for ((d, &v), &g) in dx.iter_mut().zip(inputs[0].data()).zip(grad_out) {
                    if v > t {
                        *d = g;
                    }
                }
            }
        }
        OpKind::Pow { exponent } => {
            if let Some(dx) = grads[0].as_mut() {
                let p = T::from_f64(*exponent as f64);
                for ((d, &v), &g) in dx.iter_mut().zip(inputs[0].data()).zip(grad_out) {
                    *d = g * p * v.powi(exponent - 1);
                }
            }
        }
        OpKind::Affine { scale, .. } => {
            if let Some(dx) = grads[0].as_mut() {
                let s = T::from_f64(*scale);
                for (d, &g) in dx.iter_mut().zip(grad_out) {
                    *d = g * s;
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn run(op: &OpKind, inputs: &[&Tensor<f64>]) -> Tensor<f64> {
        forward(op, inputs).unwrap().value
    }

    #[test]
    fn conv_identity_kernel_restores_input() {
        // A single 1x1 kernel with weight 1 and zero bias copies the plane.
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = run(&OpKind::Conv2d { stride: 1, padding: 0 }, &[&x, &w, &b]);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_padding_and_stride_geometry() {
        let x = Tensor::<f64>::filled(&[2, 3, 5, 5], 1.0);
        let w = Tensor::<f64>::filled(&[4, 3, 3, 3], 0.5);
        let b = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let y = run(&OpKind::Conv2d { stride: 2, padding: 1 }, &[&x, &w, &b]);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        // Centre output position sees the full 3x3x3 window of ones.
        let n = 9;
        let centre = y.data()[0 * n + 4];
        assert!((centre - (27.0 * 0.5 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::filled(&[1, 3, 4, 4], 0.0);
        let w = Tensor::<f64>::filled(&[2, 4, 3, 3], 0.0);
        let b = Tensor::<f64>::filled(&[2], 0.0);
        let err = forward(&OpKind::Conv2d { stride: 1, padding: 1 }, &[&x, &w, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = t(&[1, 1, 4, 4], &[
            1.0, 2.0, 5.0, 3.0,
            4.0, 0.0, 1.0, 2.0,
            7.0, 1.0, 0.0, 1.0,
            2.0, 3.0, 4.0, 9.0,
        ]);
        let y = run(&OpKind::MaxPool2d { window: 2, stride: 2 }, &[&x]);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        // Tied maxima: gradient goes to the earliest element in row-major
        // window order.
        let x = t(&[1, 1, 2, 2], &[3.0, 3.0, 1.0, 3.0]);
        let op = OpKind::MaxPool2d { window: 2, stride: 2 };
        let fwd = forward(&op, &[&x]).unwrap();
        let grads = backward(&op, &[&x], &fwd.value, &[1.0], &[true]).unwrap();
        assert_eq!(grads[0].as_deref().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(fwd.kink_distance, 0.0);
    }

    #[test]
    fn avg_pool_averages_each_window() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]);
        let y = run(&OpKind::AvgPool2d { window: 2, stride: 2 }, &[&x]);
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn global_pools_reduce_spatial_axes() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]);
        let mx = run(&OpKind::GlobalMaxPool, &[&x]);
        let av = run(&OpKind::GlobalAvgPool, &[&x]);
        assert_eq!(mx.shape(), &[1, 2, 1, 1]);
        assert_eq!(mx.data(), &[4.0, -1.0]);
        assert_eq!(av.data(), &[2.5, -2.5]);
    }

    #[test]
    fn channel_reductions_work_per_position() {
        let x = t(&[1, 2, 1, 2], &[1.0, 5.0, 3.0, 2.0]);
        let mx = run(&OpKind::ChannelMax, &[&x]);
        let mn = run(&OpKind::ChannelMean, &[&x]);
        assert_eq!(mx.shape(), &[1, 1, 1, 2]);
        assert_eq!(mx.data(), &[3.0, 5.0]);
        assert_eq!(mn.data(), &[2.0, 3.5]);
    }

    #[test]
    fn dense_flattens_trailing_axes() {
        let x = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 1], &[10.0, 100.0]);
        let b = t(&[1], &[0.5]);
        let y = run(&OpKind::Dense, &[&x, &w, &b]);
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[210.5, 430.5]);
    }

    #[test]
    fn broadcast_mul_matches_manual_expansion() {
        // [1, 2, 1, 1] spread over [2, 2, 1, 2].
        let a = t(&[1, 2, 1, 1], &[2.0, 3.0]);
        let b = t(&[2, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = run(&OpKind::Mul, &[&a, &b]);
        assert_eq!(y.shape(), &[2, 2, 1, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 9.0, 12.0, 10.0, 12.0, 21.0, 24.0]);
    }

    #[test]
    fn broadcast_backward_reduces_over_expanded_axes() {
        let a = t(&[1, 2, 1, 1], &[2.0, 3.0]);
        let b = t(&[2, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let op = OpKind::Mul;
        let fwd = forward(&op, &[&a, &b]).unwrap();
        let ones = vec![1.0; 8];
        let grads = backward(&op, &[&a, &b], &fwd.value, &ones, &[true, true]).unwrap();
        // da[c] = sum over positions of b in that channel.
        assert_eq!(grads[0].as_deref().unwrap(), &[1.0 + 2.0 + 5.0 + 6.0, 3.0 + 4.0 + 7.0 + 8.0]);
        assert_eq!(grads[1].as_deref().unwrap(), &[2.0, 2.0, 3.0, 3.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn broadcast_rejects_mismatched_extents() {
        let a = Tensor::<f64>::filled(&[2, 3], 0.0);
        let b = Tensor::<f64>::filled(&[2, 4], 0.0);
        let err = forward(&OpKind::Add, &[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn channel_concat_stacks_in_input_order() {
        let a = t(&[1, 1, 1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = run(&OpKind::ChannelConcat, &[&a, &b]);
        assert_eq!(y.shape(), &[1, 3, 1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices_on_backward() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let op = OpKind::GatherRows { indices: vec![1, 1, 0] };
        let fwd = forward(&op, &[&x]).unwrap();
        assert_eq!(fwd.value.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = vec![1.0; 6];
        let grads = backward(&op, &[&x], &fwd.value, &g, &[true]).unwrap();
        assert_eq!(grads[0].as_deref().unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_reductions() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(run(&OpKind::Sum, &[&x]).item().unwrap(), 10.0);
        assert_eq!(run(&OpKind::Mean, &[&x]).item().unwrap(), 2.5);
        let rs = run(&OpKind::RowSum, &[&x]);
        assert_eq!(rs.shape(), &[2, 1]);
        assert_eq!(rs.data(), &[3.0, 7.0]);
    }

    #[test]
    fn max_const_kink_tracks_distance_to_threshold() {
        let x = t(&[3], &[-1.0, 2.05, 7.0]);
        let fwd = forward(&OpKind::MaxConst { threshold: 2.0 }, &[&x]).unwrap();
        assert_eq!(fwd.value.data(), &[2.0, 2.05, 7.0]);
        assert!((fwd.kink_distance - 0.05).abs() < 1e-12);
    }

    #[test]
    fn abs_gradient_is_sign() {
        let x = t(&[3], &[-2.0, 0.0, 5.0]);
        let op = OpKind::Abs;
        let fwd = forward(&op, &[&x]).unwrap();
        let grads = backward(&op, &[&x], &fwd.value, &[1.0, 1.0, 1.0], &[true]).unwrap();
        assert_eq!(grads[0].as_deref().unwrap(), &[-1.0, 0.0, 1.0]);
        assert_eq!(fwd.kink_distance, 0.0);
    }

    #[test]
    fn affine_and_pow_compose() {
        let x = t(&[2], &[2.0, -3.0]);
        let y = run(&OpKind::Affine { scale: 2.0, offset: 1.0 }, &[&x]);
        assert_eq!(y.data(), &[5.0, -5.0]);
        let z = run(&OpKind::Pow { exponent: 2 }, &[&y]);
        assert_eq!(z.data(), &[25.0, 25.0]);
    }

    #[test]
    fn reshape_rejects_element_count_change() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let err = forward(&OpKind::Reshape { shape: vec![3] }, &[&x]).unwrap_err();
        assert!(err.to_string().contains("reshape"), "{err}");
    }
}
