//! Layer descriptors, shape resolution, and per-layer forward/backward kernels.
//!
//! Activations are stored batch-major as flat slices. Dense weights are
//! `[outputs, inputs]`, conv weights `[filters, channels, k, k]`; convolution
//! uses stride one with symmetric zero padding, pooling is non-overlapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::Layout;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    BatchNorm,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm; running statistics are updated.
    Train,
    /// Running statistics for batch norm; samples are independent.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Kernel {
    Dense {
        inputs: usize,
        outputs: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        w: usize,
        b: usize,
    },
    Relu,
    BatchNorm {
        channels: usize,
        spatial: usize,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    MaxPool {
        size: usize,
        ch: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub(crate) kernel: Kernel,
}

impl ResolvedLayer {
    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

fn shape_err(layer: usize, spec: &LayerSpec, detail: String) -> Error {
    Error::Shape {
        layer,
        kind: spec.kind(),
        detail,
    }
}

/// Resolves one layer against its input shape, registering its parameters.
pub(crate) fn resolve(
    index: usize,
    spec: &LayerSpec,
    in_shape: &[usize],
    layout: &mut Layout,
) -> Result<ResolvedLayer> {
    let (kernel, out_shape) = match *spec {
        LayerSpec::Dense { units } => {
            if in_shape.len() != 1 {
                return Err(shape_err(
                    index,
                    spec,
                    format!("dense expects a flat input, got {in_shape:?} (add a flatten layer)"),
                ));
            }
            if units == 0 {
                return Err(shape_err(index, spec, "dense needs units > 0".into()));
            }
            let inputs = in_shape[0];
            let w = layout.push(index, "weight", units * inputs, true);
            let b = layout.push(index, "bias", units, true);
            (
                Kernel::Dense {
                    inputs,
                    outputs: units,
                    w,
                    b,
                },
                vec![units],
            )
        }
        LayerSpec::Conv2d {
            filters,
            kernel,
            padding,
        } => {
            if in_shape.len() != 3 {
                return Err(shape_err(
                    index,
                    spec,
                    format!("conv2d expects [channels, height, width], got {in_shape:?}"),
                ));
            }
            let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
            if filters == 0 || kernel == 0 || h + 2 * padding < kernel || wd + 2 * padding < kernel
            {
                return Err(shape_err(
                    index,
                    spec,
                    format!("kernel {kernel} with padding {padding} does not fit {in_shape:?}"),
                ));
            }
            let out_h = h + 2 * padding - kernel + 1;
            let out_w = wd + 2 * padding - kernel + 1;
            let w = layout.push(index, "weight", filters * c * kernel * kernel, true);
            let b = layout.push(index, "bias", filters, true);
            (
                Kernel::Conv2d {
                    in_ch: c,
                    out_ch: filters,
                    k: kernel,
                    pad: padding,
                    in_h: h,
                    in_w: wd,
                    out_h,
                    out_w,
                    w,
                    b,
                },
                vec![filters, out_h, out_w],
            )
        }
        LayerSpec::Relu => (Kernel::Relu, in_shape.to_vec()),
        LayerSpec::BatchNorm => {
            let (channels, spatial) = match in_shape.len() {
                1 => (in_shape[0], 1),
                3 => (in_shape[0], in_shape[1] * in_shape[2]),
                _ => {
                    return Err(shape_err(
                        index,
                        spec,
                        format!("batch norm expects a 1-D or 3-D input, got {in_shape:?}"),
                    ))
                }
            };
            let gamma = layout.push(index, "gamma", channels, true);
            let beta = layout.push(index, "beta", channels, true);
            let mean = layout.push(index, "running_mean", channels, false);
            let var = layout.push(index, "running_var", channels, false);
            (
                Kernel::BatchNorm {
                    channels,
                    spatial,
                    gamma,
                    beta,
                    mean,
                    var,
                },
                in_shape.to_vec(),
            )
        }
        LayerSpec::MaxPool { size } => {
            if in_shape.len() != 3 || size == 0 || in_shape[1] < size || in_shape[2] < size {
                return Err(shape_err(
                    index,
                    spec,
                    format!("max pool {size} does not fit {in_shape:?}"),
                ));
            }
            let (ch, in_h, in_w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (out_h, out_w) = (in_h / size, in_w / size);
            (
                Kernel::MaxPool {
                    size,
                    ch,
                    in_h,
                    in_w,
                    out_h,
                    out_w,
                },
                vec![ch, out_h, out_w],
            )
        }
        LayerSpec::Flatten => (Kernel::Flatten, vec![in_shape.iter().product()]),
    };
    Ok(ResolvedLayer {
        spec: spec.clone(),
        in_shape: in_shape.to_vec(),
        out_shape,
        kernel,
    })
}

/// Values a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    None,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
}

/// Running-statistic values produced by a training-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub offset: usize,
    pub values: Vec<f64>,
}

pub(crate) fn forward(
    layer: &ResolvedLayer,
    params: &[f64],
    input: &[f64],
    batch: usize,
    mode: Mode,
    stats: &mut Vec<StatUpdate>,
) -> (Vec<f64>, Cache) {
    match layer.kernel {
        Kernel::Dense {
            inputs,
            outputs,
            w,
            b,
        } => {
            let wt = &params[w..w + inputs * outputs];
            let bias = &params[b..b + outputs];
            let mut out = vec![0.0; batch * outputs];
            for n in 0..batch {
                let x = &input[n * inputs..(n + 1) * inputs];
                let y = &mut out[n * outputs..(n + 1) * outputs];
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &wt[o * inputs..(o + 1) * inputs];
                    *yo = bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            (out, Cache::None)
        }
        Kernel::Conv2d {
            in_ch,
            out_ch,
            k,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
            w,
            b,
        } => {
            let in_len = in_ch * in_h * in_w;
            let out_len = out_ch * out_h * out_w;
            let mut out = vec![0.0; batch * out_len];
            for n in 0..batch {
                let x = &input[n * in_len..(n + 1) * in_len];
                let y = &mut out[n * out_len..(n + 1) * out_len];
                for o in 0..out_ch {
                    for i in 0..out_h {
                        for j in 0..out_w {
                            let mut acc = params[b + o];
                            for c in 0..in_ch {
                                for u in 0..k {
                                    let r = i + u;
                                    if r < pad || r - pad >= in_h {
                                        continue;
                                    }
                                    let r = r - pad;
                                    for v in 0..k {
                                        let s = j + v;
                                        if s < pad || s - pad >= in_w {
                                            continue;
                                        }
                                        let s = s - pad;
                                        acc += params[w + ((o * in_ch + c) * k + u) * k + v]
                                            * x[(c * in_h + r) * in_w + s];
                                    }
                                }
                            }
                            y[(o * out_h + i) * out_w + j] = acc;
                        }
                    }
                }
            }
            (out, Cache::None)
        }
        Kernel::Relu => (input.iter().map(|&v| v.max(0.0)).collect(), Cache::None),
        Kernel::BatchNorm {
            channels,
            spatial,
            gamma,
            beta,
            mean,
            var,
        } => {
            let per = channels * spatial;
            let count = (batch * spatial) as f64;
            let mut xhat = vec![0.0; input.len()];
            let mut inv_std = vec![0.0; channels];
            let mut out = vec![0.0; input.len()];
            let mut new_mean = params[mean..mean + channels].to_vec();
            let mut new_var = params[var..var + channels].to_vec();
            for c in 0..channels {
                let idx = |n: usize, s: usize| n * per + c * spatial + s;
                let (mu, sigma2) = match mode {
                    Mode::Train => {
                        let mut m = 0.0;
                        for n in 0..batch {
                            for s in 0..spatial {
                                m += input[idx(n, s)];
                            }
                        }
                        m /= count;
                        let mut v = 0.0;
                        for n in 0..batch {
                            for s in 0..spatial {
                                let d = input[idx(n, s)] - m;
                                v += d * d;
                            }
                        }
                        v /= count;
                        let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                        new_mean[c] = (1.0 - BN_MOMENTUM) * new_mean[c] + BN_MOMENTUM * m;
                        new_var[c] = (1.0 - BN_MOMENTUM) * new_var[c] + BN_MOMENTUM * unbiased;
                        (m, v)
                    }
                    Mode::Eval => (params[mean + c], params[var + c]),
                };
                let is = 1.0 / (sigma2 + BN_EPS).sqrt();
                inv_std[c] = is;
                for n in 0..batch {
                    for s in 0..spatial {
                        let i = idx(n, s);
                        let h = (input[i] - mu) * is;
                        xhat[i] = h;
                        out[i] = params[gamma + c] * h + params[beta + c];
                    }
                }
            }
            if mode == Mode::Train {
                stats.push(StatUpdate {
                    offset: mean,
                    values: new_mean,
                });
                stats.push(StatUpdate {
                    offset: var,
                    values: new_var,
                });
            }
            (out, Cache::BatchNorm { xhat, inv_std })
        }
        Kernel::MaxPool {
            size,
            ch,
            in_h,
            in_w,
            out_h,
            out_w,
        } => {
            let in_len = ch * in_h * in_w;
            let out_len = ch * out_h * out_w;
            let mut out = vec![0.0; batch * out_len];
            let mut argmax = vec![0; batch * out_len];
            for n in 0..batch {
                for c in 0..ch {
                    for i in 0..out_h {
                        for j in 0..out_w {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for u in 0..size {
                                for v in 0..size {
                                    let src = n * in_len + (c * in_h + i * size + u) * in_w
                                        + j * size
                                        + v;
                                    if best == usize::MAX || input[src] > best_v {
                                        best = src;
                                        best_v = input[src];
                                    }
                                }
                            }
                            let dst = n * out_len + (c * out_h + i) * out_w + j;
                            out[dst] = best_v;
                            argmax[dst] = best;
                        }
                    }
                }
            }
            (out, Cache::MaxPool { argmax })
        }
        Kernel::Flatten => (input.to_vec(), Cache::None),
    }
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
pub(crate) fn backward(
    layer: &ResolvedLayer,
    params: &[f64],
    input: &[f64],
    cache: &Cache,
    dout: &[f64],
    batch: usize,
    mode: Mode,
    grad: &mut [f64],
) -> Vec<f64> {
    match layer.kernel {
        Kernel::Dense {
            inputs,
            outputs,
            w,
            b,
        } => {
            let mut din = vec![0.0; batch * inputs];
            for n in 0..batch {
                let x = &input[n * inputs..(n + 1) * inputs];
                let dy = &dout[n * outputs..(n + 1) * outputs];
                let dx = &mut din[n * inputs..(n + 1) * inputs];
                for (o, &g) in dy.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad[b + o] += g;
                    let row = w + o * inputs;
                    for i in 0..inputs {
                        grad[row + i] += g * x[i];
                        dx[i] += g * params[row + i];
                    }
                }
            }
            din
        }
        Kernel::Conv2d {
            in_ch,
            out_ch,
            k,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
            w,
            b,
        } => {
            let in_len = in_ch * in_h * in_w;
            let out_len = out_ch * out_h * out_w;
            let mut din = vec![0.0; batch * in_len];
            for n in 0..batch {
                let x = &input[n * in_len..(n + 1) * in_len];
                let dy = &dout[n * out_len..(n + 1) * out_len];
                let dx = &mut din[n * in_len..(n + 1) * in_len];
                for o in 0..out_ch {
                    for i in 0..out_h {
                        for j in 0..out_w {
                            let g = dy[(o * out_h + i) * out_w + j];
                            if g == 0.0 {
                                continue;
                            }
                            grad[b + o] += g;
                            for c in 0..in_ch {
                                for u in 0..k {
                                    let r = i + u;
                                    if r < pad || r - pad >= in_h {
                                        continue;
                                    }
                                    let r = r - pad;
                                    for v in 0..k {
                                        let s = j + v;
                                        if s < pad || s - pad >= in_w {
                                            continue;
                                        }
                                        let s = s - pad;
                                        let wi = w + ((o * in_ch + c) * k + u) * k + v;
                                        let xi = (c * in_h + r) * in_w + s;
                                        grad[wi] += g * x[xi];
                                        dx[xi] += g * params[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            din
        }
        Kernel::Relu => input
            .iter()
            .zip(dout)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Kernel::BatchNorm {
            channels,
            spatial,
            gamma,
            beta,
            ..
        } => {
            let Cache::BatchNorm { xhat, inv_std } = cache else {
                unreachable!("batch norm cache")
            };
            let per = channels * spatial;
            let count = (batch * spatial) as f64;
            let mut din = vec![0.0; input.len()];
            for c in 0..channels {
                let idx = |n: usize, s: usize| n * per + c * spatial + s;
                let g = params[gamma + c];
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for n in 0..batch {
                    for s in 0..spatial {
                        let i = idx(n, s);
                        sum_dy += dout[i];
                        sum_dy_xhat += dout[i] * xhat[i];
                    }
                }
                grad[gamma + c] += sum_dy_xhat;
                grad[beta + c] += sum_dy;
                let is = inv_std[c];
                for n in 0..batch {
                    for s in 0..spatial {
                        let i = idx(n, s);
                        din[i] = match mode {
                            Mode::Eval => dout[i] * g * is,
                            Mode::Train => {
                                g * is / count
                                    * (count * dout[i] - sum_dy - xhat[i] * sum_dy_xhat)
                            }
                        };
                    }
                }
            }
            din
        }
        Kernel::MaxPool { .. } => {
            let Cache::MaxPool { argmax } = cache else {
                unreachable!("max pool cache")
            };
            let mut din = vec![0.0; input.len()];
            for (dst, &src) in argmax.iter().enumerate() {
                din[src] += dout[dst];
            }
            din
        }
        Kernel::Flatten => dout.to_vec(),
    }
}
