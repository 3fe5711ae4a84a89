//! The desk-scale convolutional backbone and its hand-written gradients.
//!
//! Three blocks of [3x3 same-padding conv, ReLU, 2x2 max-pool] with output
//! channels 8, 16 and 64, followed by global average pooling into a
//! 64-dimensional feature vector. On the 64 px desk inputs the spatial path
//! is 64 -> 32 -> 16 -> 8. Weights are stored as [kh, kw, cin, cout] so the
//! innermost loops run contiguously over output channels.

use std::any::Any;

use super::tensor::{Tensor, TensorMap};
use super::{Backbone, ModelError};
use crate::pixelpipe::PixelTensor;

/// Output channels of the three conv blocks; the last equals the feature dim.
pub const DESK_CHANNELS: [usize; 3] = [8, 16, 64];
pub const DESK_FEATURE_DIM: usize = 64;

const MAX_COUT: usize = 64;

/// 3x3 same-padding convolution with fused ReLU.
/// `weight` is [3,3,cin,cout] flattened, `out` is HWC with `cout` channels.
fn conv3x3_relu(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), h * w * cin);
    debug_assert_eq!(weight.len(), 9 * cin * cout);
    debug_assert_eq!(out.len(), h * w * cout);
    let mut acc = [0.0f64; MAX_COUT];
    for y in 0..h {
        let dy_lo = usize::from(y == 0);
        let dy_hi = if y + 1 == h { 1 } else { 2 };
        for x in 0..w {
            let dx_lo = usize::from(x == 0);
            let dx_hi = if x + 1 == w { 1 } else { 2 };
            acc[..cout].copy_from_slice(&bias[..cout]);
            for dy in dy_lo..=dy_hi {
                let sy = y + dy - 1;
                for dx in dx_lo..=dx_hi {
                    let sx = x + dx - 1;
                    let px = &input[(sy * w + sx) * cin..][..cin];
                    let wk = &weight[(dy * 3 + dx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        let wrow = &wk[ci * cout..][..cout];
                        for (a, &wv) in acc[..cout].iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
            let dst = &mut out[(y * w + x) * cout..][..cout];
            for (d, &a) in dst.iter_mut().zip(&acc[..cout]) {
                *d = a.max(0.0);
            }
        }
    }
}

/// Gradients of the convolution. `dout` must already be masked by the ReLU
/// derivative. Accumulates into `dweight`/`dbias` and, when given, `dinput`.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    for y in 0..h {
        let dy_lo = usize::from(y == 0);
        let dy_hi = if y + 1 == h { 1 } else { 2 };
        for x in 0..w {
            let dx_lo = usize::from(x == 0);
            let dx_hi = if x + 1 == w { 1 } else { 2 };
            let drow = &dout[(y * w + x) * cout..][..cout];
            for (db, &d) in dbias[..cout].iter_mut().zip(drow) {
                *db += d;
            }
            for dy in dy_lo..=dy_hi {
                let sy = y + dy - 1;
                for dx in dx_lo..=dx_hi {
                    let sx = x + dx - 1;
                    let px = &input[(sy * w + sx) * cin..][..cin];
                    let dwk = &mut dweight[(dy * 3 + dx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        let dwrow = &mut dwk[ci * cout..][..cout];
                        for (dw, &d) in dwrow.iter_mut().zip(drow) {
                            *dw += v * d;
                        }
                    }
                    if let Some(din) = dinput.as_deref_mut() {
                        let wk = &weight[(dy * 3 + dx) * cin * cout..][..cin * cout];
                        let din_px = &mut din[(sy * w + sx) * cin..][..cin];
                        for (ci, dv) in din_px.iter_mut().enumerate() {
                            let wrow = &wk[ci * cout..][..cout];
                            let mut s = 0.0;
                            for (wv, d) in wrow.iter().zip(drow) {
                                s += wv * d;
                            }
                            *dv += s;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool with stride 2 (trailing odd row/column dropped). Returns the
/// pooled map and the flat input index of each winner; ties go to the first
/// element in scan order.
fn maxpool2(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<u32>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2 * c];
    let mut idx = vec![0u32; h2 * w2 * c];
    for oy in 0..h2 {
        for ox in 0..w2 {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if input[i] > best {
                            best = input[i];
                            best_i = i as u32;
                        }
                    }
                }
                let o = (oy * w2 + ox) * c + ch;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (out, idx, h2, w2)
}

fn maxpool2_backward(idx: &[u32], dout: &[f64], dinput: &mut [f64]) {
    for (&i, &d) in idx.iter().zip(dout) {
        dinput[i as usize] += d;
    }
}

/// Global average pool over the spatial grid.
fn gap(input: &[f64], hw: usize, c: usize) -> Vec<f64> {
    let mut feat = vec![0.0; c];
    for px in input.chunks_exact(c) {
        for (f, &v) in feat.iter_mut().zip(px) {
            *f += v;
        }
    }
    let inv = 1.0 / hw as f64;
    for f in &mut feat {
        *f *= inv;
    }
    feat
}

fn gap_backward(dfeat: &[f64], hw: usize, c: usize, dinput: &mut [f64]) {
    let inv = 1.0 / hw as f64;
    for px in dinput.chunks_exact_mut(c) {
        for (d, &g) in px.iter_mut().zip(dfeat) {
            *d += g * inv;
        }
    }
}

/// Zeroes gradient entries where the forward activation was clipped by ReLU.
fn relu_mask(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

struct Stage {
    /// post-ReLU conv output
    act: Vec<f64>,
    /// pooled map
    pooled: Vec<f64>,
    pool_idx: Vec<u32>,
    h: usize,
    w: usize,
    cout: usize,
}

pub(super) struct DeskCache {
    input: PixelTensor,
    stages: [Stage; 3],
}

/// The desk backbone. Stateless; all parameters live in the [`TensorMap`].
#[derive(Debug, Clone, Copy, Default)]
pub struct DeskCnn;

impl DeskCnn {
    fn weight_names() -> [(&'static str, &'static str); 3] {
        [
            ("conv1.weight", "conv1.bias"),
            ("conv2.weight", "conv2.bias"),
            ("conv3.weight", "conv3.bias"),
        ]
    }

    /// Human-readable layer list for the fixed desk architecture.
    pub fn layer_summary(input_channels: usize) -> Vec<String> {
        let mut cin = input_channels;
        let mut out = Vec::new();
        for (i, &cout) in DESK_CHANNELS.iter().enumerate() {
            out.push(format!(
                "block{}: conv3x3 {}->{} (same padding) + relu + maxpool2x2",
                i + 1,
                cin,
                cout
            ));
            cin = cout;
        }
        out.push(format!("global average pool -> {DESK_FEATURE_DIM} features"));
        out
    }
}

impl Backbone for DeskCnn {
    fn kind_name(&self) -> &'static str {
        "desk_cnn"
    }

    fn feature_dim(&self) -> usize {
        DESK_FEATURE_DIM
    }

    fn param_specs(&self, input_channels: usize) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = input_channels;
        for ((wname, bname), &cout) in Self::weight_names().iter().zip(&DESK_CHANNELS) {
            specs.push((wname.to_string(), vec![3, 3, cin, cout]));
            specs.push((bname.to_string(), vec![cout]));
            cin = cout;
        }
        specs
    }

    fn forward(
        &self,
        params: &TensorMap,
        input: &PixelTensor,
    ) -> Result<(Vec<f64>, Box<dyn Any + Send + Sync>), ModelError> {
        let mut stages: Vec<Stage> = Vec::with_capacity(3);
        let (mut h, mut w) = (input.height, input.width);
        let mut cin = input.channels;
        let mut cur: &[f64] = &input.data;

        for ((wname, bname), &cout) in DeskCnn::weight_names().iter().zip(&DESK_CHANNELS) {
            let weight = get(params, wname)?;
            let bias = get(params, bname)?;
            if weight.dims() != [3, 3, cin, cout] {
                return Err(ModelError::ShapeMismatch(format!(
                    "{wname} has dims {:?}, expected [3, 3, {cin}, {cout}]",
                    weight.dims()
                )));
            }
            let mut act = vec![0.0; h * w * cout];
            conv3x3_relu(cur, h, w, cin, weight.data(), bias.data(), cout, &mut act);
            let (pooled, pool_idx, h2, w2) = maxpool2(&act, h, w, cout);
            stages.push(Stage {
                act,
                pooled,
                pool_idx,
                h,
                w,
                cout,
            });
            h = h2;
            w = w2;
            cin = cout;
            cur = &stages.last().expect("just pushed").pooled;
        }

        let feat = gap(&stages[2].pooled, h * w, cin);
        let stages: [Stage; 3] = stages
            .try_into()
            .unwrap_or_else(|_| unreachable!("exactly three stages"));
        Ok((
            feat,
            Box::new(DeskCache {
                input: input.clone(),
                stages,
            }),
        ))
    }

    fn backward(
        &self,
        params: &TensorMap,
        cache: &dyn Any,
        dfeature: &[f64],
        grads: &mut TensorMap,
    ) -> Result<(), ModelError> {
        let cache: &DeskCache = cache
            .downcast_ref()
            .ok_or_else(|| ModelError::StaleCache("cache is not a desk backbone cache".into()))?;
        let names = DeskCnn::weight_names();

        // gradient w.r.t. the pooled output of stage 3
        let s3 = &cache.stages[2];
        let (h3, w3) = (s3.h / 2, s3.w / 2);
        let mut dpool = vec![0.0; h3 * w3 * s3.cout];
        gap_backward(dfeature, h3 * w3, s3.cout, &mut dpool);

        for i in (0..3).rev() {
            let stage = &cache.stages[i];
            let (h, w, cout) = (stage.h, stage.w, stage.cout);
            let mut dact = vec![0.0; h * w * cout];
            maxpool2_backward(&stage.pool_idx, &dpool, &mut dact);
            relu_mask(&stage.act, &mut dact);

            let (input, cin): (&[f64], usize) = if i == 0 {
                (&cache.input.data, cache.input.channels)
            } else {
                (&cache.stages[i - 1].pooled, cache.stages[i - 1].cout)
            };

            let weight = get(params, names[i].0)?;
            let mut dinput = if i > 0 {
                Some(vec![0.0; input.len()])
            } else {
                None // the image is not a parameter
            };
            let (dweight, dbias) = grads.get_two_mut(names[i].0, names[i].1).ok_or_else(|| {
                ModelError::ShapeMismatch(format!("missing gradient tensors for block {i}"))
            })?;
            conv3x3_backward(
                input,
                h,
                w,
                cin,
                weight.data(),
                cout,
                &dact,
                dweight.data_mut(),
                dbias.data_mut(),
                dinput.as_deref_mut(),
            );
            if let Some(d) = dinput {
                dpool = d;
            }
        }
        Ok(())
    }
}

fn get<'a>(params: &'a TensorMap, name: &str) -> Result<&'a Tensor, ModelError> {
    params
        .get(name)
        .ok_or_else(|| ModelError::ShapeMismatch(format!("missing tensor '{name}'")))
}
