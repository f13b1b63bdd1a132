//! The convolutional classifier: a shallow first block whose output feeds
//! the task identifier, deeper downsampling blocks, and a linear head.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NormKind {
    Batch,
    Group { groups: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ModelConfig {
    /// `(channels, height, width)`.
    pub input_size: [usize; 3],
    pub num_classes: usize,
    /// Channel width of each block; the first entry is block 1.
    pub widths: Vec<usize>,
    pub norm: NormKind,
    pub eps: f64,
    /// Weight of the current batch in the running-statistics average.
    pub norm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: [3, 32, 32],
            num_classes: 4,
            widths: vec![16, 32, 64, 128],
            norm: NormKind::Batch,
            eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Number of stride-2 convolutions in the network.
    pub fn downsamplings(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("channel width list is empty".into()));
        }
        if self.widths.contains(&0) || self.num_classes == 0 || self.input_size[0] == 0 {
            return Err(Error::Config(
                "widths, classes and channels must be positive".into(),
            ));
        }
        let min = 1usize << self.downsamplings();
        if self.input_size[1] < min || self.input_size[2] < min {
            return Err(Error::Config(format!(
                "input {}x{} is smaller than the {min}x{min} minimum for {} downsamplings",
                self.input_size[1],
                self.input_size[2],
                self.downsamplings()
            )));
        }
        if let NormKind::Group { groups } = self.norm {
            if let Some(w) = self
                .widths
                .iter()
                .find(|&&w| groups == 0 || w % groups != 0)
            {
                return Err(Error::Config(format!(
                    "{groups} groups do not divide width {w}"
                )));
            }
        }
        if !(self.eps > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config(
                "eps must be positive and norm momentum in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Which norm layers an affine snapshot covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapScope {
    /// Only norm layers after the task-identifier cut.
    AfterCut,
    /// Every norm layer, including block 1.
    AllLayers,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Norm(usize),
    Relu,
    GlobalAvgPool,
    Linear {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug)]
pub struct NormLayer<T: Real = f32> {
    pub name: String,
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    layer: usize,
}

/// Whether norm layers use batch statistics (and update running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Train,
    Eval,
}

#[derive(Debug, Default)]
pub struct PassCounter {
    shallow: AtomicUsize,
    deep: AtomicUsize,
}

impl PassCounter {
    pub fn shallow(&self) -> usize {
        self.shallow.load(Ordering::Relaxed)
    }

    pub fn deep(&self) -> usize {
        self.deep.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.shallow.store(0, Ordering::Relaxed);
        self.deep.store(0, Ordering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        PassCounter::default()
    }
}

/// One recorded forward computation through (part of) a model.
pub struct Pass<T: Real = f32> {
    pub tape: Tape<T>,
    regime: Regime,
    track_grads: bool,
    bound: Vec<Option<Var>>,
    norm_outputs: Vec<(usize, Var)>,
}

impl<T: Real> Pass<T> {
    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// Output of every norm layer evaluated so far, by norm index.
    pub fn norm_outputs(&self) -> &[(usize, Var)] {
        &self.norm_outputs
    }

    pub fn norm_output(&self, norm: usize) -> Option<Var> {
        self.norm_outputs
            .iter()
            .find(|(i, _)| *i == norm)
            .map(|&(_, v)| v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    layers: Vec<Layer>,
    layer_names: Vec<String>,
    norms: Vec<NormLayer<T>>,
    cut: usize,
    counter: PassCounter,
}

struct Builder<'r, T: Real> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<Parameter<T>>,
    layers: Vec<Layer>,
    names: Vec<String>,
    norms: Vec<NormLayer<T>>,
}

impl<T: Real> Builder<'_, T> {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect();
        self.push_param(name, Tensor::new(shape, data).expect("shape"))
    }

    fn push_param(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, tensor));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, bias: bool) {
        let weight = self.he(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9);
        let bias = bias.then(|| self.push_param(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        self.layers.push(Layer::Conv {
            weight,
            bias,
            stride,
            pad: 1,
        });
        self.names.push(name.to_string());
    }

    fn norm(&mut self, name: &str, channels: usize) {
        let gamma = self.push_param(
            format!("{name}.gamma"),
            Tensor::full(vec![channels], T::one()),
        );
        let beta = self.push_param(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        self.norms.push(NormLayer {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            layer: self.layers.len(),
        });
        self.layers.push(Layer::Norm(self.norms.len() - 1));
        self.names.push(name.to_string());
    }

    fn relu(&mut self, name: &str) {
        self.layers.push(Layer::Relu);
        self.names.push(format!("{name}.relu"));
    }
}

/// Builds a freshly initialized model. Convolution and linear weights use
/// fan-in scaled normal draws; norm layers start at `γ = 1, β = 0`.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        params: Vec::new(),
        layers: Vec::new(),
        names: Vec::new(),
        norms: Vec::new(),
    };

    let w0 = config.widths[0];
    b.conv("block1.conv1", config.input_size[0], w0, 1, false);
    b.norm("block1.norm1", w0);
    b.relu("block1.norm1");
    b.conv("block1.conv2", w0, w0, 2, false);
    b.norm("block1.norm2", w0);
    b.relu("block1.norm2");
    b.conv("block1.conv3", w0, w0, 1, true);
    b.relu("block1.conv3");
    let cut = b.layers.len() - 1;

    let mut cin = w0;
    for (i, &w) in config.widths.iter().enumerate().skip(1) {
        let block = format!("block{}", i + 1);
        b.conv(&format!("{block}.conv1"), cin, w, 2, false);
        b.norm(&format!("{block}.norm1"), w);
        b.relu(&format!("{block}.norm1"));
        b.conv(&format!("{block}.conv2"), w, w, 1, false);
        b.norm(&format!("{block}.norm2"), w);
        b.relu(&format!("{block}.norm2"));
        cin = w;
    }
    b.layers.push(Layer::GlobalAvgPool);
    b.names.push("pool".into());
    let weight = b.he("head.weight".into(), vec![config.num_classes, cin], cin);
    let bias = b.push_param("head.bias".into(), Tensor::zeros(vec![config.num_classes]));
    b.layers.push(Layer::Linear { weight, bias });
    b.names.push("head".into());

    Ok(Model {
        config: config.clone(),
        params: b.params,
        layers: b.layers,
        layer_names: b.names,
        norms: b.norms,
        cut,
        counter: PassCounter::default(),
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn norms(&self) -> &[NormLayer<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer<T>] {
        &mut self.norms
    }

    pub fn norm_index(&self, name: &str) -> Option<usize> {
        self.norms.iter().position(|n| n.name == name)
    }

    /// Index of the last layer of block 1 (the task-identifier tap).
    pub fn cut_index(&self) -> usize {
        self.cut
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    /// Norm layers whose affine parameters are swapped for `scope`, in
    /// network order.
    pub fn bankable_norms(&self, scope: SwapScope) -> Vec<usize> {
        (0..self.norms.len())
            .filter(|&i| scope == SwapScope::AllLayers || self.norms[i].layer > self.cut)
            .collect()
    }

    pub fn is_affine(&self, param: usize) -> bool {
        self.norms
            .iter()
            .any(|n| n.gamma == param || n.beta == param)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_affine_parameters(&self) -> usize {
        self.norms.iter().map(|n| 2 * n.channels).sum()
    }

    pub fn affine(&self, norm: usize) -> (&[T], &[T]) {
        let n = &self.norms[norm];
        (
            self.params[n.gamma].tensor.data(),
            self.params[n.beta].tensor.data(),
        )
    }

    pub fn set_affine(&mut self, norm: usize, gamma: &[T], beta: &[T]) -> Result<()> {
        let (g, b, c) = {
            let n = &self.norms[norm];
            (n.gamma, n.beta, n.channels)
        };
        if gamma.len() != c || beta.len() != c {
            return Err(Error::shape("set_affine", &[c], &[gamma.len(), beta.len()]));
        }
        self.params[g].tensor.data_mut().copy_from_slice(gamma);
        self.params[b].tensor.data_mut().copy_from_slice(beta);
        Ok(())
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.trainable).collect()
    }

    pub fn set_trainable_mask(&mut self, mask: &[bool]) {
        for (p, &t) in self.params.iter_mut().zip(mask) {
            p.trainable = t;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Freezes everything except the affine parameters of `norms`.
    pub fn train_only_affine(&mut self, norms: &[usize]) {
        self.set_all_trainable(false);
        for &i in norms {
            let (g, b) = (self.norms[i].gamma, self.norms[i].beta);
            self.params[g].trainable = true;
            self.params[b].trainable = true;
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Hash of everything that must stay fixed across adaptation: the
    /// configuration, every non-affine parameter and the running norm
    /// statistics.
    pub fn backbone_checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (i, p) in self.params.iter().enumerate() {
            if self.is_affine(i) {
                continue;
            }
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        for n in &self.norms {
            h.update(n.name.as_bytes());
            for v in n.running_mean.iter().chain(&n.running_var) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Hash of every parameter and statistic, affine ones included.
    pub fn full_checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.backbone_checksum().to_le_bytes());
        for n in &self.norms {
            let (g, b) = self.affine(self.norm_index(&n.name).expect("own norm"));
            for v in g.iter().chain(b) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    grad: None,
                })
                .collect(),
            layers: self.layers.clone(),
            layer_names: self.layer_names.clone(),
            norms: self
                .norms
                .iter()
                .map(|n| NormLayer {
                    name: n.name.clone(),
                    channels: n.channels,
                    gamma: n.gamma,
                    beta: n.beta,
                    running_mean: n
                        .running_mean
                        .iter()
                        .map(|v| U::from_f64(v.as_f64()))
                        .collect(),
                    running_var: n
                        .running_var
                        .iter()
                        .map(|v| U::from_f64(v.as_f64()))
                        .collect(),
                    layer: n.layer,
                })
                .collect(),
            cut: self.cut,
            counter: PassCounter::default(),
        }
    }

    // -- forward ---------------------------------------------------------

    pub fn pass(&self, regime: Regime, track_grads: bool) -> Pass<T> {
        Pass {
            tape: Tape::new(),
            regime,
            track_grads,
            bound: vec![None; self.params.len()],
            norm_outputs: Vec::new(),
        }
    }

    /// Records an image batch, checking it against the configured input size.
    pub fn input(&self, pass: &mut Pass<T>, images: Tensor<T>) -> Result<Var> {
        let [c, h, w] = self.config.input_size;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "model input",
                s,
                &[s.first().copied().unwrap_or(0), c, h, w],
            ));
        }
        if s[0] == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(pass.tape.constant(images))
    }

    fn bind(&self, pass: &mut Pass<T>, idx: usize) -> Var {
        if let Some(v) = pass.bound[idx] {
            return v;
        }
        let p = &self.params[idx];
        let v = pass
            .tape
            .leaf(p.tensor.clone(), pass.track_grads && p.trainable);
        pass.bound[idx] = Some(v);
        v
    }

    fn run(&self, pass: &mut Pass<T>, mut x: Var, range: Range<usize>) -> Result<Var> {
        for li in range {
            x = match &self.layers[li] {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let w = self.bind(pass, *weight);
                    let b = bias.map(|b| self.bind(pass, b));
                    pass.tape.conv2d(x, w, b, *stride, *pad)?
                }
                Layer::Norm(ni) => {
                    let n = &self.norms[*ni];
                    let g = self.bind(pass, n.gamma);
                    let b = self.bind(pass, n.beta);
                    let mode = match (self.config.norm, pass.regime) {
                        (NormKind::Group { groups }, _) => NormMode::Group { groups },
                        (NormKind::Batch, Regime::Train) => NormMode::BatchStats,
                        (NormKind::Batch, Regime::Eval) => NormMode::Frozen {
                            mean: &n.running_mean,
                            var: &n.running_var,
                        },
                    };
                    let eps = T::from_f64(self.config.eps);
                    let y = pass.tape.norm(x, g, b, mode, eps).map_err(|e| match e {
                        Error::NonFinite(_) => Error::NonFinite(n.name.clone()),
                        e => e,
                    })?;
                    pass.norm_outputs.push((*ni, y));
                    y
                }
                Layer::Relu => pass.tape.relu(x)?,
                Layer::GlobalAvgPool => pass.tape.global_avg_pool(x)?,
                Layer::Linear { weight, bias } => {
                    let w = self.bind(pass, *weight);
                    let b = self.bind(pass, *bias);
                    pass.tape.linear(x, w, Some(b))?
                }
            };
        }
        Ok(x)
    }

    /// Block-1 features.
    pub fn forward_shallow(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        self.counter.shallow.fetch_add(1, Ordering::Relaxed);
        self.run(pass, x, 0..self.cut + 1)
    }

    /// Logits from block-1 features.
    pub fn forward_deep(&self, pass: &mut Pass<T>, features: Var) -> Result<Var> {
        let s = pass.tape.shape(features);
        let expected = self.feature_shape();
        if s.len() != 4 || s[1..] != expected[..] {
            return Err(Error::shape("forward_deep", s, &expected));
        }
        self.counter.deep.fetch_add(1, Ordering::Relaxed);
        self.run(pass, features, self.cut + 1..self.layers.len())
    }

    pub fn forward(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let f = self.forward_shallow(pass, x)?;
        self.forward_deep(pass, f)
    }

    /// `(C, H, W)` of block-1 features.
    pub fn feature_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.config.input_size;
        [self.config.widths[0], h.div_ceil(2), w.div_ceil(2)]
    }

    /// Inference logits with frozen statistics.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = self.pass(Regime::Eval, false);
        let x = self.input(&mut pass, images.clone())?;
        let y = self.forward(&mut pass, x)?;
        Ok(pass.tape.value(y).clone())
    }

    pub fn shallow_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = self.pass(Regime::Eval, false);
        let x = self.input(&mut pass, images.clone())?;
        let y = self.forward_shallow(&mut pass, x)?;
        Ok(pass.tape.value(y).clone())
    }

    pub fn deep_logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = self.pass(Regime::Eval, false);
        let x = pass.tape.constant(features.clone());
        let y = self.forward_deep(&mut pass, x)?;
        Ok(pass.tape.value(y).clone())
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.logits(images)?.argmax_rows())
    }

    // -- training hooks ---------------------------------------------------

    /// Adds the gradients of bound, trainable parameters into their buffers.
    pub fn accumulate_grads(&mut self, pass: &Pass<T>, grads: &Gradients<T>) {
        for (idx, var) in pass.bound.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                self.params[idx].accumulate_grad(g);
            }
        }
    }

    /// Folds the batch statistics recorded by a training pass into the
    /// running statistics. Running variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, pass: &Pass<T>) {
        if pass.regime != Regime::Train {
            return;
        }
        let m = T::from_f64(self.config.norm_momentum);
        for &(ni, var) in &pass.norm_outputs {
            let Some((mean, bvar)) = pass.tape.batch_stats(var) else {
                continue;
            };
            let s = pass.tape.shape(var);
            let count: usize = s[0] * s[2..].iter().product::<usize>();
            let unbias = if count > 1 {
                T::from_usize(count) / T::from_usize(count - 1)
            } else {
                T::one()
            };
            let n = &mut self.norms[ni];
            for c in 0..n.channels {
                n.running_mean[c] = (T::one() - m) * n.running_mean[c] + m * mean[c];
                n.running_var[c] = (T::one() - m) * n.running_var[c] + m * bvar[c] * unbias;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        let a: Model = build_model(&cfg, 7).unwrap();
        let b: Model = build_model(&cfg, 7).unwrap();
        let c: Model = build_model(&cfg, 8).unwrap();
        assert_eq!(a.full_checksum(), b.full_checksum());
        assert_ne!(a.full_checksum(), c.full_checksum());
        for (p, q) in a.params().iter().zip(b.params()) {
            assert!(p.tensor.bitwise_eq(&q.tensor));
        }
    }

    #[test]
    fn block_one_layout() {
        let m: Model = build_model(&ModelConfig::default(), 0).unwrap();
        let block1 = &m.layer_names()[..=m.cut_index()];
        let convs = block1
            .iter()
            .filter(|n| n.contains(".conv") && !n.ends_with("relu"))
            .count();
        let norms = m
            .norms()
            .iter()
            .filter(|n| n.name.starts_with("block1."))
            .count();
        assert_eq!(convs, 3);
        assert_eq!(norms, 2);
        assert_eq!(m.bankable_norms(SwapScope::AfterCut).len(), 6);
        assert_eq!(m.bankable_norms(SwapScope::AllLayers).len(), 8);
    }

    #[test]
    fn affine_fraction_below_two_percent() {
        let m: Model = build_model(&ModelConfig::default(), 0).unwrap();
        // Independent count straight from the layout: convs without bias
        // are followed by a norm, conv3 of block 1 and the head carry bias.
        let w = [16usize, 32, 64, 128];
        let mut total = 3 * 16 * 9 + 16 * 16 * 9 + (16 * 16 * 9 + 16);
        let mut cin = 16;
        for &c in &w[1..] {
            total += cin * c * 9 + c * c * 9;
            cin = c;
        }
        total += 128 * 4 + 4;
        let affine = 2 * (16 + 16 + 2 * (32 + 64 + 128));
        total += affine;
        assert_eq!(m.num_parameters(), total);
        assert_eq!(m.num_affine_parameters(), affine);
        let fraction = affine as f64 / total as f64;
        assert!(fraction < 0.02, "{fraction}");
    }

    #[test]
    fn zero_input_through_fresh_norm_gives_beta() {
        let mut tape = Tape::<f32>::new();
        let m: Model = build_model(&ModelConfig::default(), 3).unwrap();
        let n = &m.norms()[0];
        let x = tape.constant(Tensor::zeros(vec![2, n.channels, 4, 4]));
        let (g, b) = m.affine(0);
        let gv = tape.constant(Tensor::new(vec![n.channels], g.to_vec()).unwrap());
        let bv = tape.constant(Tensor::new(vec![n.channels], b.to_vec()).unwrap());
        let y = tape
            .norm(
                x,
                gv,
                bv,
                NormMode::Frozen {
                    mean: &n.running_mean,
                    var: &n.running_var,
                },
                1e-5,
            )
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig {
            widths: vec![],
            ..Default::default()
        };
        assert!(build_model::<f32>(&cfg, 0).is_err());
        cfg.widths = vec![8, 8, 8, 8];
        cfg.input_size = [3, 8, 8];
        assert!(build_model::<f32>(&cfg, 0).is_err());
        cfg.input_size = [3, 16, 16];
        assert!(build_model::<f32>(&cfg, 0).is_ok());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m: Model = build_model(&ModelConfig::default(), 0).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(vec![1, 3, 16, 16])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn logits_shape() {
        let m: Model = build_model(&ModelConfig::default(), 0).unwrap();
        let y = m.logits(&Tensor::full(vec![5, 3, 32, 32], 0.5)).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
    }

    #[test]
    fn composition_is_bitwise() {
        let m: Model = build_model(&ModelConfig::default(), 11).unwrap();
        let x: Vec<f32> = (0..2 * 3 * 32 * 32)
            .map(|i| ((i * 37) % 101) as f32 / 101.0)
            .collect();
        let x = Tensor::new(vec![2, 3, 32, 32], x).unwrap();
        let full = m.logits(&x).unwrap();
        let split = m.deep_logits(&m.shallow_features(&x).unwrap()).unwrap();
        assert!(full.bitwise_eq(&split));
    }

    #[test]
    fn backbone_checksum_ignores_affine() {
        let mut m: Model = build_model(&ModelConfig::default(), 1).unwrap();
        let before = (m.backbone_checksum(), m.full_checksum());
        let c = m.norms()[3].channels;
        m.set_affine(3, &vec![2.0; c], &vec![0.5; c]).unwrap();
        assert_eq!(m.backbone_checksum(), before.0);
        assert_ne!(m.full_checksum(), before.1);
    }
}
