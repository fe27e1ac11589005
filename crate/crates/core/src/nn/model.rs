use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::label::{argmax, SoftLabel};
use crate::nn::layers::{self, Cache, Kernel, LayerSpec, Mode, ResolvedLayer, StatUpdate};
use crate::nn::loss::{sample_cross_entropy, softmax};
use crate::nn::params::{Layout, ParamVector};
use crate::nn::tensor::Tensor;
use crate::seed;

/// A resolved layer stack: shapes chained from the input to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<ResolvedLayer>,
    layout: Arc<Layout>,
    num_classes: usize,
}

impl Architecture {
    pub fn new(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Arc<Self>> {
        if specs.is_empty() {
            return Err(Error::invalid("architecture needs at least one layer"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::invalid(format!("bad input shape {input_shape:?}")));
        }
        let mut layout = Layout::new();
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let l = layers::resolve(i, spec, &shape, &mut layout)?;
            shape = l.out_shape.clone();
            layers.push(l);
        }
        if shape.len() != 1 {
            return Err(Error::Shape {
                layer: specs.len() - 1,
                kind: specs[specs.len() - 1].kind(),
                detail: format!("final layer must emit a logits vector, got {shape:?}"),
            });
        }
        Ok(Arc::new(Architecture {
            input_shape: input_shape.to_vec(),
            layers,
            layout: Arc::new(layout),
            num_classes: shape[0],
        }))
    }

    /// Dense stack `input -> hidden... -> classes` with ReLU between layers.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Arc<Self>> {
        let mut specs = Vec::new();
        for &h in hidden {
            specs.push(LayerSpec::Dense { units: h });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense { units: classes });
        Self::new(&[inputs], &specs)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[ResolvedLayer] {
        &self.layers
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Gradient {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grad: ParamVector,
    /// Running statistics a training-mode pass wants written back.
    pub stats: Vec<StatUpdate>,
}

struct Trace {
    activations: Vec<Vec<f64>>,
    caches: Vec<Cache>,
    stats: Vec<StatUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arc<Architecture>,
    params: ParamVector,
}

impl Model {
    /// He-uniform weights, zero biases, identity batch norm.
    pub fn init(arch: Arc<Architecture>, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, &[seed::stream::INIT]);
        let mut params = ParamVector::zeros(arch.layout.clone());
        let values = params.values_mut();
        for layer in &arch.layers {
            match layer.kernel {
                Kernel::Dense {
                    inputs,
                    outputs,
                    w,
                    ..
                } => {
                    let a = (6.0 / inputs as f64).sqrt();
                    for v in &mut values[w..w + inputs * outputs] {
                        *v = rng.random_range(-a..a);
                    }
                }
                Kernel::Conv2d {
                    in_ch, out_ch, k, w, ..
                } => {
                    let fan_in = in_ch * k * k;
                    let a = (6.0 / fan_in as f64).sqrt();
                    for v in &mut values[w..w + out_ch * fan_in] {
                        *v = rng.random_range(-a..a);
                    }
                }
                Kernel::BatchNorm {
                    channels,
                    gamma,
                    var,
                    ..
                } => {
                    values[gamma..gamma + channels].fill(1.0);
                    values[var..var + channels].fill(1.0);
                }
                _ => {}
            }
        }
        Model { arch, params }
    }

    pub fn from_params(arch: Arc<Architecture>, params: ParamVector) -> Result<Self> {
        if params.layout().as_ref() != arch.layout.as_ref() {
            return Err(Error::Layout {
                expected: arch.num_params(),
                actual: params.len(),
            });
        }
        Ok(Model { arch, params })
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_same_layout(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn apply_stats(&mut self, stats: &[StatUpdate]) {
        let values = self.params.values_mut();
        for s in stats {
            values[s.offset..s.offset + s.values.len()].copy_from_slice(&s.values);
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let want = &self.arch.input_shape;
        if batch.shape().len() != want.len() + 1 || &batch.shape()[1..] != want.as_slice() {
            let first = &self.arch.layers[0];
            return Err(Error::Shape {
                layer: 0,
                kind: first.spec.kind(),
                detail: format!(
                    "batch shape {:?} does not match model input [n, {:?}]",
                    batch.shape(),
                    want
                ),
            });
        }
        Ok(())
    }

    fn trace(&self, input: &[f64], batch: usize, mode: Mode) -> Trace {
        let params = self.params.values();
        let mut activations = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut stats = Vec::new();
        activations.push(input.to_vec());
        for layer in &self.arch.layers {
            let x = activations.last().expect("input pushed");
            let (y, cache) = layers::forward(layer, params, x, batch, mode, &mut stats);
            activations.push(y);
            caches.push(cache);
        }
        Trace {
            activations,
            caches,
            stats,
        }
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<Forward> {
        self.forward_mode(batch, Mode::Eval)
    }

    pub fn forward_mode(&self, batch: &Tensor, mode: Mode) -> Result<Forward> {
        self.check_input(batch)?;
        let n = batch.rows();
        let c = self.num_classes();
        let trace = self.trace(batch.data(), n, mode);
        let logits = trace.activations.last().cloned().unwrap_or_default();
        let mut probs = Vec::with_capacity(logits.len());
        for r in 0..n {
            probs.extend(softmax(&logits[r * c..(r + 1) * c]));
        }
        Ok(Forward {
            logits: Tensor::new(vec![n, c], logits)?,
            probs: Tensor::new(vec![n, c], probs)?,
        })
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradient(
        &self,
        batch: &Tensor,
        labels: &[SoftLabel],
        mode: Mode,
    ) -> Result<Gradient> {
        self.check_input(batch)?;
        let n = batch.rows();
        if n != labels.len() {
            return Err(Error::Length(format!(
                "{n} samples but {} labels",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("gradient of an empty batch"));
        }
        let c = self.num_classes();
        let trace = self.trace(batch.data(), n, mode);
        let logits = trace.activations.last().expect("logits");
        let mut loss = 0.0;
        let mut dout = vec![0.0; n * c];
        for (r, label) in labels.iter().enumerate() {
            if label.num_classes() != c {
                return Err(Error::Length(format!(
                    "label {r} has {} classes, model emits {c}",
                    label.num_classes()
                )));
            }
            let p = softmax(&logits[r * c..(r + 1) * c]);
            loss += sample_cross_entropy(&p, label.probs());
            for k in 0..c {
                dout[r * c + k] = (p[k] - label.probs()[k]) / n as f64;
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {loss}")));
        }

        let params = self.params.values();
        let mut grad = vec![0.0; params.len()];
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            dout = layers::backward(
                layer,
                params,
                &trace.activations[i],
                &trace.caches[i],
                &dout,
                n,
                mode,
                &mut grad,
            );
        }
        Ok(Gradient {
            loss,
            grad: ParamVector::from_values(self.arch.layout.clone(), grad)?,
            stats: trace.stats,
        })
    }

    /// Training-mode gradient of the mean cross-entropy.
    pub fn backward(&self, batch: &Tensor, labels: &[SoftLabel]) -> Result<ParamVector> {
        Ok(self.loss_and_gradient(batch, labels, Mode::Train)?.grad)
    }

    /// Gradient of one sample's cross-entropy, with batch norm in inference mode.
    pub fn per_sample_loss_gradient(&self, x: &[f64], label: &SoftLabel) -> Result<ParamVector> {
        let batch = self.single(x)?;
        Ok(self
            .loss_and_gradient(&batch, std::slice::from_ref(label), Mode::Eval)?
            .grad)
    }

    /// Pre-softmax output for one sample.
    pub fn logits_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = self.single(x)?;
        Ok(self.forward(&batch)?.logits.into_data())
    }

    /// Argmax class per row, inference mode.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?.logits;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    fn single(&self, x: &[f64]) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.arch.input_shape);
        Tensor::new(shape, x.to_vec())
    }
}
