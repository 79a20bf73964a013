use hsib_tensor::{BatchStats, Real, RngState, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};

use crate::arch::{ArchSpec, ModelKind, POOL};
use crate::error::{ModelError, Result};

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![c], T::one()).with_grad(),
            beta: Tensor::zeros(vec![c]).with_grad(),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics into the running estimates, using the
    /// unbiased variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let n = stats.count as f64;
        let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub name: String,
    /// `[out, in, k, k]` for 2-D, `[out, in, k]` for 1-D.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BatchNorm<T>>,
    pub pool: bool,
}

impl<T: Real> Conv<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn is_2d(&self) -> bool {
        self.weight.shape().len() == 4
    }

    /// Weights per output filter.
    pub fn filter_len(&self) -> usize {
        self.weight.len() / self.out_channels()
    }
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub name: String,
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub relu: bool,
}

impl<T: Real> Dense<T> {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Flatten,
    Dense(Dense<T>),
}

/// Intermediate activations exposed for distillation and pruning.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    /// conv1 after ReLU (and before any pooling).
    pub conv1: Option<Var>,
    /// conv2 after ReLU, before pooling.
    pub conv2: Option<Var>,
    /// Output of the last pooling stage.
    pub pool: Option<Var>,
    /// fc1 after ReLU.
    pub hidden: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub taps: Taps,
}

/// Ordered layer list with named parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph<T = f32> {
    pub spec: ArchSpec,
    pub layers: Vec<Layer<T>>,
    training: bool,
}

fn init_uniform<T: Real>(rng: &mut RngState, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    rng.uniform_tensor(shape, 1.0 / (fan_in as f64).sqrt()).with_grad()
}

impl<T: Real> ModelGraph<T> {
    /// Builds and randomly initializes a model. Weights and biases are drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn build(spec: &ArchSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let [f1, f2] = spec.filters;
        let [k1, k2] = spec.kernels;
        let conv = |name: &str, shape: Vec<usize>, bn: bool, pool: bool, rng: &mut RngState| {
            let fan_in: usize = shape[1..].iter().product();
            let out = shape[0];
            Layer::Conv(Conv {
                name: name.into(),
                weight: init_uniform(rng, shape, fan_in),
                bias: init_uniform(rng, vec![out], fan_in),
                bn: bn.then(|| BatchNorm::new(out)),
                pool,
            })
        };
        match spec.kind {
            ModelKind::Mlp => {}
            ModelKind::Cnn1d => {
                layers.push(conv("conv1", vec![f1, 1, k1], false, true, rng));
                layers.push(conv("conv2", vec![f2, f1, k2], false, true, rng));
                layers.push(Layer::Flatten);
            }
            ModelKind::Cnn2d => {
                let c = spec.in_channels;
                layers.push(conv("conv1", vec![f1, c, k1, k1], true, false, rng));
                layers.push(conv("conv2", vec![f2, f1, k2, k2], true, true, rng));
                layers.push(Layer::Flatten);
            }
        }
        let flat = spec.flatten_len()?;
        let dense = |name: &str, din: usize, dout: usize, relu: bool, rng: &mut RngState| {
            Layer::Dense(Dense {
                name: name.into(),
                weight: init_uniform(rng, vec![dout, din], din),
                bias: init_uniform(rng, vec![dout], din),
                relu,
            })
        };
        layers.push(dense("fc1", flat, spec.hidden, true, rng));
        layers.push(dense("fc2", spec.hidden, spec.classes, false, rng));
        Ok(Self {
            spec: spec.clone(),
            layers,
            training: true,
        })
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Input shape for a batch of `n`.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        match self.spec.kind {
            ModelKind::Mlp => vec![n, self.spec.in_channels],
            ModelKind::Cnn1d => vec![n, 1, self.spec.in_channels],
            ModelKind::Cnn2d => vec![n, self.spec.in_channels, self.spec.patch, self.spec.patch],
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn denses(&self) -> impl Iterator<Item = &Dense<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    pub fn denses_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    pub fn conv(&self, i: usize) -> &Conv<T> {
        self.convs().nth(i).expect("conv layer index")
    }

    pub fn conv_mut(&mut self, i: usize) -> &mut Conv<T> {
        self.convs_mut().nth(i).expect("conv layer index")
    }

    pub fn dense(&self, i: usize) -> &Dense<T> {
        self.denses().nth(i).expect("dense layer index")
    }

    pub fn dense_mut(&mut self, i: usize) -> &mut Dense<T> {
        self.denses_mut().nth(i).expect("dense layer index")
    }

    /// Every tensor, trainable or not, with its qualified name. BN running
    /// statistics are not included.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let mut bn_idx = 0;
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("{}.weight", c.name), &c.weight));
                    out.push((format!("{}.bias", c.name), &c.bias));
                    if let Some(bn) = &c.bn {
                        bn_idx += 1;
                        out.push((format!("bn{bn_idx}.gamma"), &bn.gamma));
                        out.push((format!("bn{bn_idx}.beta"), &bn.beta));
                    }
                }
                Layer::Dense(d) => {
                    out.push((format!("{}.weight", d.name), &d.weight));
                    out.push((format!("{}.bias", d.name), &d.bias));
                }
                Layer::Flatten => {}
            }
        }
        out
    }

    /// Mutable handles in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                    if let Some(bn) = &mut c.bn {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::Flatten => {}
            }
        }
        out
    }

    /// Marks every parameter trainable or frozen. Frozen parameters enter a
    /// tape as constants, so no gradient flows into them.
    pub fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Runs the network on `x`. In training mode batch norm uses batch
    /// statistics and updates its running estimates.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let training = self.training;
        let mut h = x;
        let mut taps = Taps::default();
        let mut conv_idx = 0;
        let mut dense_idx = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    let w = tape.param(&c.weight);
                    let b = tape.param(&c.bias);
                    h = if c.is_2d() {
                        tape.conv2d(h, w, Some(b))?
                    } else {
                        tape.conv1d(h, w, Some(b))?
                    };
                    if let Some(bn) = &mut c.bn {
                        let g = tape.param(&bn.gamma);
                        let be = tape.param(&bn.beta);
                        h = if training {
                            let (y, stats) = tape.batch_norm_train(h, g, be, T::lit(bn.eps))?;
                            bn.update_running(&stats);
                            y
                        } else {
                            tape.batch_norm_eval(h, g, be, &bn.running_mean, &bn.running_var, T::lit(bn.eps))?
                        };
                    }
                    h = tape.relu(h)?;
                    if conv_idx == 0 {
                        taps.conv1 = Some(h);
                    } else {
                        taps.conv2 = Some(h);
                    }
                    if c.pool {
                        h = if c.is_2d() {
                            tape.max_pool2d(h, POOL, POOL)?
                        } else {
                            tape.max_pool1d(h, POOL)?
                        };
                        taps.pool = Some(h);
                    }
                    conv_idx += 1;
                }
                Layer::Flatten => h = tape.flatten(h)?,
                Layer::Dense(d) => {
                    let w = tape.param(&d.weight);
                    let b = tape.param(&d.bias);
                    h = tape.linear(h, w, Some(b))?;
                    if d.relu {
                        h = tape.relu(h)?;
                        if dense_idx == 0 {
                            taps.hidden = Some(h);
                        }
                    }
                    dense_idx += 1;
                }
            }
        }
        Ok(Forward { logits: h, taps })
    }

    /// Logits for a flat input batch of `n` samples, without gradients.
    pub fn logits(&mut self, input: &[T], n: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let x = tape.input(self.input_shape(n), input.to_vec())?;
        let f = self.forward(&mut tape, x)?;
        Ok(tape.value(f.logits).to_vec())
    }

    /// Copy of the model in another element type.
    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv {
                    name: c.name.clone(),
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                    bn: c.bn.as_ref().map(|bn| BatchNorm {
                        gamma: bn.gamma.cast(),
                        beta: bn.beta.cast(),
                        running_mean: cv(&bn.running_mean),
                        running_var: cv(&bn.running_var),
                        eps: bn.eps,
                        momentum: bn.momentum,
                    }),
                    pool: c.pool,
                }),
                Layer::Flatten => Layer::Flatten,
                Layer::Dense(d) => Layer::Dense(Dense {
                    name: d.name.clone(),
                    weight: d.weight.cast(),
                    bias: d.bias.cast(),
                    relu: d.relu,
                }),
            })
            .collect();
        ModelGraph {
            spec: self.spec.clone(),
            layers,
            training: self.training,
        }
    }

    /// Checks that layer tensors agree with `spec`; used after surgery.
    pub fn check_consistency(&self) -> Result<()> {
        let built = self.spec.layer_params()?;
        let actual = self.layer_params();
        if built != actual {
            return Err(ModelError::Spec(format!(
                "layers {actual:?} do not match spec {built:?}"
            )));
        }
        Ok(())
    }

    /// Weight plus bias counts per conv/FC layer, taken from the tensors.
    pub fn layer_params(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some((c.name.clone(), c.weight.len() + c.bias.len())),
                Layer::Dense(d) => Some((d.name.clone(), d.weight.len() + d.bias.len())),
                Layer::Flatten => None,
            })
            .collect()
    }
}
