//! The merge captioning network.
//!
//! Language branch: embedding, valid 1D convolution with ReLU, global max
//! pooling. Image branch: the precomputed feature vector, optionally passed
//! through a ReLU projection. The two are concatenated, fed to a ReLU dense
//! layer and then to a vocabulary-sized output layer with softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ConvCache, LayerGrads, Matrix, Real};
use crate::par::Exec;
use crate::text::{EncodedCaption, PAD_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub image_projection: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub const DEFAULT_EMBEDDING_DIM: usize = 256;
    pub const DEFAULT_CONV_FILTERS: usize = 512;
    pub const DEFAULT_KERNEL: usize = 3;
    pub const DEFAULT_FEATURE_DIM: usize = 2048;
    pub const DEFAULT_HIDDEN_DIM: usize = 512;

    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            embedding_dim: Self::DEFAULT_EMBEDDING_DIM,
            conv_filters: Self::DEFAULT_CONV_FILTERS,
            kernel: Self::DEFAULT_KERNEL,
            feature_dim: Self::DEFAULT_FEATURE_DIM,
            hidden_dim: Self::DEFAULT_HIDDEN_DIM,
            max_len,
            image_projection: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("conv_filters", self.conv_filters),
            ("kernel", self.kernel),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.kernel > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "kernel {} exceeds max_len {}",
                self.kernel, self.max_len
            )));
        }
        Ok(())
    }

    /// Width of the concatenated language and image vectors.
    pub fn merge_width(&self) -> usize {
        self.conv_filters
            + if self.image_projection {
                self.hidden_dim
            } else {
                self.feature_dim
            }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut v = vec![
            ("embedding", vec![self.vocab_size, self.embedding_dim]),
            (
                "conv.weight",
                vec![self.conv_filters, self.kernel, self.embedding_dim],
            ),
            ("conv.bias", vec![self.conv_filters]),
        ];
        if self.image_projection {
            v.push(("proj.weight", vec![self.hidden_dim, self.feature_dim]));
            v.push(("proj.bias", vec![self.hidden_dim]));
        }
        v.extend([
            ("merge.weight", vec![self.hidden_dim, self.merge_width()]),
            ("merge.bias", vec![self.hidden_dim]),
            ("out.weight", vec![self.vocab_size, self.hidden_dim]),
            ("out.bias", vec![self.vocab_size]),
        ]);
        v
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub conv: LayerGrads<T>,
    pub projection: Option<LayerGrads<T>>,
    pub merge: LayerGrads<T>,
    pub output: LayerGrads<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        ModelParams {
            config: c.clone(),
            embedding: Matrix::zeros(c.vocab_size, c.embedding_dim),
            conv: LayerGrads::zeros(c.conv_filters, c.kernel * c.embedding_dim),
            projection: c
                .image_projection
                .then(|| LayerGrads::zeros(c.hidden_dim, c.feature_dim)),
            merge: LayerGrads::zeros(c.hidden_dim, c.merge_width()),
            output: LayerGrads::zeros(c.vocab_size, c.hidden_dim),
        }
    }

    /// Flat views in the order of [`ModelConfig::tensor_shapes`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.embedding.data, &self.conv.weight.data, &self.conv.bias];
        if let Some(p) = &self.projection {
            v.push(&p.weight.data);
            v.push(&p.bias);
        }
        v.extend([
            &self.merge.weight.data[..],
            &self.merge.bias,
            &self.output.weight.data,
            &self.output.bias,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![
            &mut self.embedding.data,
            &mut self.conv.weight.data,
            &mut self.conv.bias,
        ];
        if let Some(p) = &mut self.projection {
            v.push(&mut p.weight.data);
            v.push(&mut p.bias);
        }
        v.extend([
            &mut self.merge.weight.data[..],
            &mut self.merge.bias,
            &mut self.output.weight.data,
            &mut self.output.bias,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::of(s.as_f64());
            }
        }
        out
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn l2_norm(&self) -> T {
        let sq: f64 = self
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&v| {
                let v = v.as_f64();
                v * v
            })
            .sum();
        T::of(sq.sqrt())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Per-tensor Glorot bound, `None` for biases.
pub fn init_bounds(config: &ModelConfig) -> Vec<Option<f64>> {
    let c = config;
    let mut v = vec![
        Some(glorot_bound(c.vocab_size, c.embedding_dim)),
        Some(glorot_bound(
            c.kernel * c.embedding_dim,
            c.kernel * c.conv_filters,
        )),
        None,
    ];
    if c.image_projection {
        v.push(Some(glorot_bound(c.feature_dim, c.hidden_dim)));
        v.push(None);
    }
    v.extend([
        Some(glorot_bound(c.merge_width(), c.hidden_dim)),
        None,
        Some(glorot_bound(c.hidden_dim, c.vocab_size)),
        None,
    ]);
    v
}

/// Glorot-uniform weights and zero biases, drawn from `config.seed`.
pub fn init_params<T: Real>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bounds = init_bounds(config);
    for (tensor, bound) in params.tensors_mut().into_iter().zip(bounds) {
        if let Some(b) = bound {
            for v in tensor.iter_mut() {
                *v = T::of(rng.gen_range(-b..=b));
            }
        }
    }
    Ok(params)
}

/// One training item: an image feature and one of its encoded captions.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, T> {
    pub feature: &'a [T],
    pub caption: &'a EncodedCaption,
}

struct ImageBranch<T> {
    out: Vec<T>,
    pre: Option<Vec<T>>,
}

fn image_branch<T: Real>(params: &ModelParams<T>, feature: &[T]) -> Result<ImageBranch<T>> {
    if feature.len() != params.config.feature_dim {
        return Err(Error::shape(format!(
            "image feature has length {}, model expects {}",
            feature.len(),
            params.config.feature_dim
        )));
    }
    match &params.projection {
        Some(p) => {
            let (out, pre) = nn::dense_forward(feature, &p.weight, &p.bias, Activation::Relu)?;
            Ok(ImageBranch {
                out,
                pre: Some(pre),
            })
        }
        None => Ok(ImageBranch {
            out: feature.to_vec(),
            pre: None,
        }),
    }
}

struct StepCache<T> {
    ids: Vec<u32>,
    emb: Matrix<T>,
    conv: ConvCache<T>,
    argmax: Vec<usize>,
    concat: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

fn pad_prefix(prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if prefix.len() > max_len {
        return Err(Error::shape(format!(
            "prefix of length {} exceeds max_len {max_len}",
            prefix.len()
        )));
    }
    let mut ids = prefix.to_vec();
    ids.resize(max_len, PAD_ID);
    Ok(ids)
}

fn step_forward<T: Real>(
    params: &ModelParams<T>,
    image: &[T],
    prefix: &[u32],
) -> Result<StepCache<T>> {
    let cfg = &params.config;
    let ids = pad_prefix(prefix, cfg.max_len)?;
    let emb = nn::embedding_forward(&ids, &params.embedding)?;
    let (act, conv) = nn::conv1d_forward(&emb, &params.conv.weight, &params.conv.bias, cfg.kernel)?;
    let (pooled, argmax) = nn::global_max_pool(&act)?;
    let mut concat = pooled;
    concat.extend_from_slice(image);
    let (hidden, hidden_pre) = nn::dense_forward(
        &concat,
        &params.merge.weight,
        &params.merge.bias,
        Activation::Relu,
    )?;
    let (logits, _) = nn::dense_forward(
        &hidden,
        &params.output.weight,
        &params.output.bias,
        Activation::None,
    )?;
    Ok(StepCache {
        ids,
        emb,
        conv,
        argmax,
        concat,
        hidden_pre,
        hidden,
        logits,
    })
}

/// Backpropagates one supervised step into `grads`, returning the gradient
/// with respect to the image-branch output.
fn step_backward<T: Real>(
    params: &ModelParams<T>,
    cache: &StepCache<T>,
    probs: &[T],
    target: usize,
    grads: &mut ModelParams<T>,
) -> Result<Vec<T>> {
    let filters = params.config.conv_filters;
    let d_logits = nn::softmax_cross_entropy_grad(probs, target)?;
    let d_hidden = nn::dense_backward_into(
        &cache.hidden,
        &params.output.weight,
        &cache.logits,
        Activation::None,
        &d_logits,
        &mut grads.output,
    )?;
    let d_concat = nn::dense_backward_into(
        &cache.concat,
        &params.merge.weight,
        &cache.hidden_pre,
        Activation::Relu,
        &d_hidden,
        &mut grads.merge,
    )?;
    let (d_pooled, d_image) = d_concat.split_at(filters);
    let d_act = nn::global_max_pool_backward(d_pooled, &cache.argmax, cache.conv.pre.rows)?;
    let d_emb = nn::conv1d_backward_into(
        &cache.emb,
        &params.conv.weight,
        &cache.conv,
        &d_act,
        &mut grads.conv,
    )?;
    nn::embedding_backward(&cache.ids, &d_emb, &mut grads.embedding)?;
    Ok(d_image.to_vec())
}

/// Next-word logits for `prefix` (unpadded or padded to `max_len`).
pub fn logits<T: Real>(params: &ModelParams<T>, feature: &[T], prefix: &[u32]) -> Result<Vec<T>> {
    let image = image_branch(params, feature)?;
    Ok(step_forward(params, &image.out, prefix)?.logits)
}

/// Next-word distribution over the vocabulary.
pub fn forward<T: Real>(params: &ModelParams<T>, feature: &[T], prefix: &[u32]) -> Result<Vec<T>> {
    nn::softmax(&logits(params, feature, prefix)?)
}

pub fn log_probs<T: Real>(
    params: &ModelParams<T>,
    feature: &[T],
    prefix: &[u32],
) -> Result<Vec<T>> {
    nn::log_softmax(&logits(params, feature, prefix)?)
}

fn check_caption(params: &ModelParams<impl Real>, caption: &EncodedCaption) -> Result<()> {
    let max_len = params.config.max_len;
    if caption.ids.len() != max_len || caption.true_length > max_len || caption.true_length < 2 {
        return Err(Error::shape(format!(
            "caption of length {} (true length {}) for max_len {max_len}",
            caption.ids.len(),
            caption.true_length
        )));
    }
    Ok(())
}

/// Teacher-forced steps of one caption: prefix `ids[..=t]` predicts `ids[t+1]`.
fn steps(caption: &EncodedCaption) -> impl Iterator<Item = (&[u32], usize)> {
    let body = caption.body();
    (0..body.len().saturating_sub(1)).map(move |t| (&body[..=t], body[t + 1] as usize))
}

/// Loss sum and example count over a slice of samples.
fn loss_sum<T: Real>(params: &ModelParams<T>, samples: &[Sample<'_, T>]) -> Result<(T, usize)> {
    let mut total = T::zero();
    let mut count = 0;
    for s in samples {
        check_caption(params, s.caption)?;
        let image = image_branch(params, s.feature)?;
        for (prefix, target) in steps(s.caption) {
            let cache = step_forward(params, &image.out, prefix)?;
            let probs = nn::softmax(&cache.logits)?;
            total += nn::cross_entropy(&probs, target)?;
            count += 1;
        }
    }
    Ok((total, count))
}

fn grad_sum<T: Real>(
    params: &ModelParams<T>,
    samples: &[Sample<'_, T>],
) -> Result<(T, usize, ModelParams<T>)> {
    let mut grads = ModelParams::zeros(&params.config);
    let mut total = T::zero();
    let mut count = 0;
    for s in samples {
        check_caption(params, s.caption)?;
        let image = image_branch(params, s.feature)?;
        let mut d_image = vec![T::zero(); image.out.len()];
        for (prefix, target) in steps(s.caption) {
            let cache = step_forward(params, &image.out, prefix)?;
            let probs = nn::softmax(&cache.logits)?;
            total += nn::cross_entropy(&probs, target)?;
            count += 1;
            let d = step_backward(params, &cache, &probs, target, &mut grads)?;
            for (a, b) in d_image.iter_mut().zip(d) {
                *a += b;
            }
        }
        if let (Some(p), Some(pre), Some(gp)) =
            (&params.projection, &image.pre, grads.projection.as_mut())
        {
            nn::dense_backward_into(s.feature, &p.weight, pre, Activation::Relu, &d_image, gp)?;
        }
    }
    Ok((total, count, grads))
}

/// Samples per work unit in batched loss and gradient computation. Partial
/// results are reduced in chunk order, so the outcome does not depend on
/// the execution mode or thread count.
pub const CHUNK: usize = 8;

/// Mean teacher-forced cross-entropy over every expanded step of `batch`.
pub fn mean_loss<T: Real>(params: &ModelParams<T>, batch: &[Sample<'_, T>]) -> Result<T> {
    mean_loss_with(params, batch, Exec::default())
}

pub fn mean_loss_with<T: Real>(
    params: &ModelParams<T>,
    batch: &[Sample<'_, T>],
    exec: Exec,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts = exec.map_chunks(batch, CHUNK, |c| loss_sum(params, c));
    let mut total = T::zero();
    let mut count = 0;
    for part in parts {
        let (t, n) = part?;
        total += t;
        count += n;
    }
    Ok(total / T::of(count as f64))
}

/// Mean loss and its exact gradient with respect to every parameter.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    batch: &[Sample<'_, T>],
) -> Result<(T, ModelParams<T>)> {
    loss_and_grads_with(params, batch, Exec::default())
}

pub fn loss_and_grads_with<T: Real>(
    params: &ModelParams<T>,
    batch: &[Sample<'_, T>],
    exec: Exec,
) -> Result<(T, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts = exec.map_chunks(batch, CHUNK, |c| grad_sum(params, c));
    let mut total = T::zero();
    let mut count = 0;
    let mut grads: Option<ModelParams<T>> = None;
    for part in parts {
        let (t, n, g) = part?;
        total += t;
        count += n;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    let mut grads = grads.expect("non-empty batch yields a chunk");
    let inv = T::one() / T::of(count as f64);
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Smallest distance of any ReLU pre-activation from zero, or of any
/// pooling winner from a runner-up with a different input window, over
/// all steps of `batch`. Finite differences are only meaningful when this
/// is comfortably larger than the probe step.
pub fn smoothness_margin<T: Real>(params: &ModelParams<T>, batch: &[Sample<'_, T>]) -> Result<f64> {
    let kernel = params.config.kernel;
    let mut margin = f64::INFINITY;
    let mut see = |v: T| margin = margin.min(v.as_f64().abs());
    for s in batch {
        let image = image_branch(params, s.feature)?;
        if let Some(pre) = &image.pre {
            pre.iter().for_each(|&v| see(v));
        }
        for (prefix, _) in steps(s.caption) {
            let c = step_forward(params, &image.out, prefix)?;
            c.conv.pre.data.iter().for_each(|&v| see(v));
            c.hidden_pre.iter().for_each(|&v| see(v));
            let pre = &c.conv.pre;
            for f in 0..pre.cols {
                let best = c.argmax[f];
                let top = pre.get(best, f);
                if top <= T::zero() {
                    continue;
                }
                let window = &c.ids[best..best + kernel];
                for t in 0..pre.rows {
                    if c.ids[t..t + kernel] != *window {
                        see(top - pre.get(t, f).max(T::zero()));
                    }
                }
            }
        }
    }
    Ok(margin)
}
