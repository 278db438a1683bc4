use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    bce_logit_grad, conv2d_backward, conv2d_linear, dense_backward, dense_forward, flatten, logistic, mrelu,
    mrelu_backward, pool_backward, pool_forward_routed, BatchNorm, BnCache, Mode, Padding, PoolKind,
};
use super::{NetError, Tensor};

/// Pooling window used between convolution blocks.
pub const POOL_WINDOW: (usize, usize) = (2, 2);
/// Convolution stride; not a tunable.
pub const STRIDE: usize = 1;

/// Structural hyperparameters of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Square kernel side; odd and at least 3.
    pub kernel_size: usize,
    pub feature_maps: usize,
    pub pooling: PoolKind,
    pub conv_blocks: usize,
    /// Width of the hidden fully connected layer; 0 connects the flattened
    /// features straight to the output layer.
    pub dense_units: usize,
    pub num_classes: usize,
    pub padding: Padding,
}

impl NetworkSpec {
    pub fn new(input: (usize, usize, usize), num_classes: usize) -> Self {
        Self {
            input_channels: input.0,
            input_height: input.1,
            input_width: input.2,
            kernel_size: 3,
            feature_maps: 8,
            pooling: PoolKind::Max,
            conv_blocks: 2,
            dense_units: 32,
            num_classes,
            padding: Padding::Valid,
        }
    }

    /// Spatial size entering each block, plus the final pooled size.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>, NetError> {
        self.check_fields()?;
        let pad = self.padding.amount(self.kernel_size);
        let mut sizes = vec![(self.input_height, self.input_width)];
        let (mut h, mut w) = (self.input_height, self.input_width);
        for block in 0..self.conv_blocks {
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            if hp < self.kernel_size || wp < self.kernel_size {
                return Err(NetError::at_layer(
                    block,
                    NetError::KernelTooLarge {
                        kernel: (self.kernel_size, self.kernel_size),
                        input: (h, w),
                    },
                ));
            }
            let (ch, cw) = (hp - self.kernel_size + 1, wp - self.kernel_size + 1);
            if ch < POOL_WINDOW.0 || cw < POOL_WINDOW.1 {
                return Err(NetError::at_layer(
                    block,
                    NetError::WindowTooLarge {
                        window: POOL_WINDOW,
                        input: (ch, cw),
                    },
                ));
            }
            h = ch / POOL_WINDOW.0;
            w = cw / POOL_WINDOW.1;
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    fn check_fields(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::InvalidSpec(msg));
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd and >= 3, got {}", self.kernel_size));
        }
        if self.feature_maps == 0 {
            return bad("feature_maps must be positive".into());
        }
        if self.conv_blocks == 0 {
            return bad("conv_blocks must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.spatial_sizes().map(|_| ())
    }

    pub fn flat_features(&self) -> Result<usize, NetError> {
        let &(h, w) = self.spatial_sizes()?.last().expect("at least the input size");
        Ok(h * w * self.feature_maps)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Learnable parameters and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub blocks: Vec<ConvBlock>,
    pub hidden: Option<DenseLayer>,
    pub output: DenseLayer,
}

impl LayerParams {
    /// Learnable tensors in declaration order: per block conv weight, conv
    /// bias, scale, shift; then hidden weight and bias; then output weight
    /// and bias.
    pub fn learnable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.norm.gamma, &b.norm.beta]);
        }
        if let Some(h) = &self.hidden {
            out.extend([&h.weight, &h.bias]);
        }
        out.extend([&self.output.weight, &self.output.bias]);
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        if let Some(h) = &mut self.hidden {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    /// Every stored tensor, including running statistics, in checkpoint order.
    pub fn all_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                &b.weight,
                &b.bias,
                &b.norm.gamma,
                &b.norm.beta,
                &b.norm.running_mean,
                &b.norm.running_var,
            ]);
        }
        if let Some(h) = &self.hidden {
            out.extend([&h.weight, &h.bias]);
        }
        out.extend([&self.output.weight, &self.output.bias]);
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
            out.push(&mut b.norm.running_mean);
            out.push(&mut b.norm.running_var);
        }
        if let Some(h) = &mut self.hidden {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }
}

/// Gradients aligned with [`LayerParams::learnable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

struct BlockCache {
    input: Tensor,
    bn: BnCache,
    activated_pre: Tensor,
    pool_input_shape: Vec<usize>,
    route: Vec<usize>,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pooled_shape: Vec<usize>,
    flat: Tensor,
    hidden_pre: Option<Tensor>,
    hidden_out: Option<Tensor>,
    pub probabilities: Tensor,
}

/// Which side of every non-smooth point the forward pass landed on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub positive: Vec<bool>,
    pub routes: Vec<usize>,
    pub clipped: Vec<bool>,
    pub floored: Vec<bool>,
}

impl ForwardCache {
    pub fn pattern(&self) -> ActivationPattern {
        let mut positive = Vec::new();
        let mut routes = Vec::new();
        let mut floored = Vec::new();
        for b in &self.blocks {
            positive.extend(b.activated_pre.data().iter().map(|&v| v > 0.0));
            routes.extend_from_slice(&b.route);
            floored.extend_from_slice(&b.bn.floored);
        }
        if let Some(h) = &self.hidden_pre {
            positive.extend(h.data().iter().map(|&v| v > 0.0));
        }
        let clipped = self
            .probabilities
            .data()
            .iter()
            .map(|&p| !(super::layers::PROB_CLIP..=1.0 - super::layers::PROB_CLIP).contains(&p))
            .collect();
        ActivationPattern {
            positive,
            routes,
            clipped,
            floored,
        }
    }
}

/// A classifier: structure plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: LayerParams,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_raw(
        shape.to_vec(),
        (0..len).map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound).collect(),
    )
}

impl Network {
    /// Weights uniform in `+-scale / sqrt(fan_in)`, biases and shifts zero,
    /// scales one.
    pub fn init_with_rng(spec: NetworkSpec, scale: f64, rng: &mut impl Rng) -> Result<Self, NetError> {
        spec.validate()?;
        let k = spec.kernel_size;
        let mut blocks = Vec::with_capacity(spec.conv_blocks);
        let mut cin = spec.input_channels;
        for _ in 0..spec.conv_blocks {
            let fan_in = (cin * k * k) as f64;
            blocks.push(ConvBlock {
                weight: uniform_tensor(&[spec.feature_maps, cin, k, k], scale / fan_in.sqrt(), rng),
                bias: Tensor::zeros(&[spec.feature_maps]),
                norm: BatchNorm::new(spec.feature_maps),
            });
            cin = spec.feature_maps;
        }
        let flat = spec.flat_features()?;
        let (hidden, out_in) = if spec.dense_units > 0 {
            let layer = DenseLayer {
                weight: uniform_tensor(&[spec.dense_units, flat], scale / (flat as f64).sqrt(), rng),
                bias: Tensor::zeros(&[spec.dense_units]),
            };
            (Some(layer), spec.dense_units)
        } else {
            (None, flat)
        };
        let output = DenseLayer {
            weight: uniform_tensor(&[spec.num_classes, out_in], scale / (out_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[spec.num_classes]),
        };
        Ok(Self {
            spec,
            params: LayerParams { blocks, hidden, output },
        })
    }

    pub fn init(spec: NetworkSpec, seed: u64, scale: f64) -> Result<Self, NetError> {
        Self::init_with_rng(spec, scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(), NetError> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.spec.input_shape() {
            return Err(NetError::Shape(format!(
                "batch must be [n, {}, {}, {}], got {:?}",
                self.spec.input_channels, self.spec.input_height, self.spec.input_width, shape
            )));
        }
        Ok(())
    }

    /// Forward pass that records what backward needs. Pure: train mode
    /// uses batch statistics but does not update running statistics.
    pub fn forward_cached(&self, batch: &Tensor, mode: Mode) -> Result<ForwardCache, NetError> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut blocks = Vec::with_capacity(self.params.blocks.len());
        for (i, block) in self.params.blocks.iter().enumerate() {
            let conv = conv2d_linear(&x, &block.weight, &block.bias, self.spec.padding)
                .map_err(|e| NetError::at_layer(i, e))?;
            let (normed, bn) = block
                .norm
                .normalize(&conv, mode)
                .map_err(|e| NetError::at_layer(i, e))?;
            let act = mrelu(&normed);
            let (pooled, route) =
                pool_forward_routed(&act, POOL_WINDOW, self.spec.pooling).map_err(|e| NetError::at_layer(i, e))?;
            blocks.push(BlockCache {
                input: x,
                bn,
                activated_pre: normed,
                pool_input_shape: act.shape().to_vec(),
                route,
            });
            x = pooled;
        }
        let pooled_shape = x.shape().to_vec();
        let flat = flatten(&x);
        let n_blocks = self.params.blocks.len();
        let (hidden_pre, hidden_out, head_in) = match &self.params.hidden {
            Some(h) => {
                let pre = dense_forward(&flat, &h.weight, &h.bias).map_err(|e| NetError::at_layer(n_blocks, e))?;
                let out = mrelu(&pre);
                (Some(pre), Some(out.clone()), out)
            }
            None => (None, None, flat.clone()),
        };
        let logits = dense_forward(&head_in, &self.params.output.weight, &self.params.output.bias)
            .map_err(|e| NetError::at_layer(n_blocks + 1, e))?;
        Ok(ForwardCache {
            blocks,
            pooled_shape,
            flat,
            hidden_pre,
            hidden_out,
            probabilities: logistic(&logits),
        })
    }

    /// Per-class probabilities, shape `[n, classes]`.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor, NetError> {
        Ok(self.forward_cached(batch, mode)?.probabilities)
    }

    /// Exact gradients of the mean binary cross-entropy.
    pub fn backward(&self, cache: &ForwardCache, targets: &Tensor) -> Result<Gradients, NetError> {
        if targets.shape() != cache.probabilities.shape() {
            return Err(NetError::Shape(format!(
                "targets {:?} do not match predictions {:?}",
                targets.shape(),
                cache.probabilities.shape()
            )));
        }
        let dz = bce_logit_grad(&cache.probabilities, targets);
        let head_in = cache.hidden_out.as_ref().unwrap_or(&cache.flat);
        let (mut dflat, dw_out, db_out) = dense_backward(head_in, &self.params.output.weight, &dz);

        let mut tail = Vec::new();
        if let (Some(h), Some(pre)) = (&self.params.hidden, &cache.hidden_pre) {
            let dpre = mrelu_backward(pre, &dflat);
            let (dx, dw, db) = dense_backward(&cache.flat, &h.weight, &dpre);
            dflat = dx;
            tail.extend([dw, db]);
        }
        tail.extend([dw_out, db_out]);

        let mut dx = dflat.reshape(cache.pooled_shape.clone())?;
        let mut block_grads = Vec::with_capacity(cache.blocks.len());
        for (i, (block, bc)) in self.params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let dact = pool_backward(&bc.pool_input_shape, &dx, POOL_WINDOW, self.spec.pooling, &bc.route);
            let dnorm = mrelu_backward(&bc.activated_pre, &dact);
            let (dconv, dgamma, dbeta) = block.norm.backward(&bc.bn, &dnorm);
            let grads = conv2d_backward(&bc.input, &block.weight, &dconv, self.spec.padding, i > 0)?;
            if let Some(d) = grads.input {
                dx = d;
            }
            block_grads.push([grads.weight, grads.bias, dgamma, dbeta]);
        }
        block_grads.reverse();

        let mut tensors: Vec<Tensor> = block_grads.into_iter().flatten().collect();
        tensors.extend(tail);
        Ok(Gradients { tensors })
    }

    /// Train-mode loss and gradients for one batch, plus the cache (for
    /// running-statistic updates).
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor,
        targets: &Tensor,
    ) -> Result<(f64, Gradients, ForwardCache), NetError> {
        let cache = self.forward_cached(batch, Mode::Train)?;
        let loss = super::layers::bce_loss(&cache.probabilities, targets)?;
        let grads = self.backward(&cache, targets)?;
        Ok((loss, grads, cache))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (block, bc) in self.params.blocks.iter_mut().zip(&cache.blocks) {
            block.norm.update_running(&bc.bn);
        }
    }

    /// Eval-mode probabilities for many inputs of shape `[c, h, w]`.
    pub fn predict(&self, inputs: &[&Tensor]) -> Result<Tensor, NetError> {
        const CHUNK: usize = 64;
        let mut data = Vec::with_capacity(inputs.len() * self.spec.num_classes);
        for chunk in inputs.chunks(CHUNK) {
            let batch = Tensor::stack(chunk)?;
            data.extend(self.forward(&batch, Mode::Eval)?.into_data());
        }
        Tensor::new(vec![inputs.len(), self.spec.num_classes], data)
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
