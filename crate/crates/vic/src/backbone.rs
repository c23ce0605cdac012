//! Trainable backbone: feature encoder, style-token layer, decoder, and a
//! deterministic rate head standing in for a stochastic duration
//! predictor. Pre-trained by reconstruction on the synthetic corpus, then
//! frozen; fine-tuning stages may only touch the rate head, and only when
//! a variant explicitly unfreezes it.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VicError};
use crate::nnet::{
    mse_loss, softmax, stream, streams, tanh_backward, tanh_vec, visit_prefixed, zero_grads,
    AdamW, AdamWConfig, LinearLayer, ParamView, Parameterized, Tensor2D,
};
use crate::synthworld::{Corpus, CorpusItem, WorldParams};
use crate::types::{Dims, FeatureSeq};

/// Pooling MLP from mean-pooled features to the intermediate vector `x`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
}

/// Saved intermediates of one encoder forward pass.
pub struct EncoderTrace {
    pub pooled: Vec<f64>,
    h: Vec<f64>,
    pub x: Vec<f64>,
}

impl EncoderParams {
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let mut rng = stream(seed, &[streams::INIT, 1]);
        Self {
            l1: LinearLayer::init(dims.enc_hidden, dims.feat, &mut rng),
            l2: LinearLayer::init(dims.x, dims.enc_hidden, &mut rng),
        }
    }

    /// Encodes a feature sequence through its mean-pooled statistics only.
    pub fn encode(&self, f: &FeatureSeq) -> Result<Vec<f64>> {
        if f.is_empty() {
            return Err(VicError::Usage("cannot encode an empty sequence".into()));
        }
        Ok(self.forward_pooled(&f.mean_pooled())?.x)
    }

    pub fn forward_pooled(&self, pooled: &[f64]) -> Result<EncoderTrace> {
        let h = tanh_vec(&self.l1.forward(pooled)?);
        let x = self.l2.forward(&h)?;
        Ok(EncoderTrace {
            pooled: pooled.to_vec(),
            h,
            x,
        })
    }

    /// Accumulates gradients for one sample; returns nothing because the
    /// pooled statistics are data, not parameters.
    pub fn backward(&mut self, trace: &EncoderTrace, grad_x: &[f64]) -> Result<()> {
        let grad_h = self.l2.backward(&trace.h, grad_x)?;
        let grad_pre = tanh_backward(&trace.h, &grad_h);
        self.l1.backward(&trace.pooled, &grad_pre)?;
        Ok(())
    }
}

impl Parameterized for EncoderParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        visit_prefixed("l1", &mut self.l1, f);
        visit_prefixed("l2", &mut self.l2, f);
    }
}

/// Style-token attention: `g = sum_m softmax(x . key_m / temperature) value_m`.
///
/// No output projection; `g` is always a convex combination of the value
/// tokens.
#[derive(Debug, Clone)]
pub struct StyleTokenBank {
    pub keys: Tensor2D,
    pub values: Tensor2D,
    pub temperature: f64,
    grad_keys: Tensor2D,
    grad_values: Tensor2D,
}

pub struct StlTrace {
    x: Vec<f64>,
    pub attn: Vec<f64>,
    pub g: Vec<f64>,
}

impl StyleTokenBank {
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let mut rng = stream(seed, &[streams::INIT, 2]);
        let keys = Tensor2D::from_fn(dims.style_tokens, dims.x, |_, _| {
            use rand_distr::{Distribution, StandardNormal};
            StandardNormal.sample(&mut rng)
        });
        let values = Tensor2D::from_fn(dims.style_tokens, dims.g, |_, _| {
            use rand_distr::{Distribution, StandardNormal};
            StandardNormal.sample(&mut rng)
        });
        Self {
            grad_keys: Tensor2D::zeros(keys.rows(), keys.cols()),
            grad_values: Tensor2D::zeros(values.rows(), values.cols()),
            keys,
            values,
            temperature: (dims.x as f64).sqrt(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.keys.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<StlTrace> {
        if x.len() != self.keys.cols() {
            return Err(VicError::Shape(format!(
                "style tokens expect x of {}, got {}",
                self.keys.cols(),
                x.len()
            )));
        }
        let mut scores = self.keys.matvec(x)?;
        for s in scores.iter_mut() {
            *s /= self.temperature;
        }
        let attn = softmax(&scores);
        let g = self.values.matvec_t(&attn)?;
        Ok(StlTrace {
            x: x.to_vec(),
            attn,
            g,
        })
    }

    /// Convenience forward returning only `g`.
    pub fn stl(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.g)
    }

    /// Accumulates token gradients and returns the gradient on `x`.
    pub fn backward(&mut self, trace: &StlTrace, grad_g: &[f64]) -> Result<Vec<f64>> {
        if grad_g.len() != self.values.cols() {
            return Err(VicError::Shape("stl backward: bad gradient length".into()));
        }
        let m = self.tokens();
        // d values: rank-one per token; d attn_m = value_m . grad_g.
        let mut grad_attn = vec![0.0; m];
        for t in 0..m {
            let a = trace.attn[t];
            for (gv, g) in self.grad_values.row_mut(t).iter_mut().zip(grad_g.iter()) {
                *gv += a * g;
            }
            grad_attn[t] = self
                .values
                .row(t)
                .iter()
                .zip(grad_g.iter())
                .map(|(v, g)| v * g)
                .sum();
        }
        // Softmax backward.
        let dot: f64 = trace
            .attn
            .iter()
            .zip(grad_attn.iter())
            .map(|(a, g)| a * g)
            .sum();
        let grad_scores: Vec<f64> = trace
            .attn
            .iter()
            .zip(grad_attn.iter())
            .map(|(a, g)| a * (g - dot))
            .collect();
        // Through the scaled dot products.
        let mut grad_x = vec![0.0; trace.x.len()];
        for t in 0..m {
            let gs = grad_scores[t] / self.temperature;
            let key = self.keys.row(t);
            for (gx, k) in grad_x.iter_mut().zip(key.iter()) {
                *gx += gs * k;
            }
            let grad_key = self.grad_keys.row_mut(t);
            for (gk, xi) in grad_key.iter_mut().zip(trace.x.iter()) {
                *gk += gs * xi;
            }
        }
        Ok(grad_x)
    }
}

impl Parameterized for StyleTokenBank {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        let (r, c) = (self.keys.rows(), self.keys.cols());
        f(
            "keys",
            ParamView {
                value: self.keys.data_mut(),
                grad: self.grad_keys.data_mut(),
                rows: r,
                cols: c,
            },
        );
        let (r, c) = (self.values.rows(), self.values.cols());
        f(
            "values",
            ParamView {
                value: self.values.data_mut(),
                grad: self.grad_values.data_mut(),
                rows: r,
                cols: c,
            },
        );
    }
}

/// Frame decoder plus the log-frame-count rate head.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
    pub rate_head: LinearLayer,
    /// Hard ceiling on generated frame counts (4 * T0).
    pub max_frames: usize,
}

impl DecoderParams {
    pub fn init(dims: &Dims, t0: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[streams::INIT, 3]);
        Self {
            l1: LinearLayer::init(dims.dec_hidden, dims.g + dims.content, &mut rng),
            l2: LinearLayer::init(dims.feat, dims.dec_hidden, &mut rng),
            rate_head: LinearLayer::init(1, dims.g, &mut rng),
            max_frames: 4 * t0,
        }
    }

    fn frame_forward(&self, g: &[f64], content: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut input = Vec::with_capacity(g.len() + content.len());
        input.extend_from_slice(g);
        input.extend_from_slice(content);
        let h = tanh_vec(&self.l1.forward(&input)?);
        let y = tanh_vec(&self.l2.forward(&h)?);
        Ok((input, h, y))
    }

    /// Teacher-forced reconstruction: one output frame per content frame.
    pub fn reconstruct(&self, g: &[f64], content: &Tensor2D) -> Result<FeatureSeq> {
        let mut frames = Tensor2D::zeros(content.rows(), self.l2.out_dim());
        for t in 0..content.rows() {
            let (_, _, y) = self.frame_forward(g, content.row(t))?;
            frames.row_mut(t).copy_from_slice(&y);
        }
        FeatureSeq::new(frames)
    }

    /// Predicted log frame count for a speaker embedding.
    pub fn predicted_log_frames(&self, g: &[f64]) -> Result<f64> {
        Ok(self.rate_head.forward(g)?[0])
    }

    /// Generates a sequence whose frame count comes from the rate head:
    /// `clamp(round(exp(rate_head(g))), 1, max_frames)`.
    pub fn decode(&self, g: &[f64], world: &WorldParams, content_seed: u64) -> Result<FeatureSeq> {
        let log_t = self.predicted_log_frames(g)?;
        if !log_t.is_finite() {
            return Err(VicError::Numeric("rate head produced non-finite output".into()));
        }
        let t = log_t.exp().round().clamp(1.0, self.max_frames as f64) as usize;
        let content = world.content_frames(content_seed, t);
        self.reconstruct(g, &content)
    }

    /// Reconstruction MSE against `target` with gradients accumulated into
    /// the decoder; returns `(loss, grad_g)`. `scale` multiplies the loss's
    /// contribution (e.g. `1/batch`).
    pub fn reconstruct_backward(
        &mut self,
        g: &[f64],
        content: &Tensor2D,
        target: &FeatureSeq,
        scale: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if content.rows() != target.len() {
            return Err(VicError::Shape(format!(
                "reconstruction target has {} frames, content {}",
                target.len(),
                content.rows()
            )));
        }
        let t_frames = content.rows();
        let n_total = (t_frames * target.dim()) as f64;
        let mut loss = 0.0;
        let mut grad_g = vec![0.0; g.len()];
        for t in 0..t_frames {
            let (input, h, y) = self.frame_forward(g, content.row(t))?;
            let tgt = target.frame(t);
            let mut grad_y = vec![0.0; y.len()];
            for i in 0..y.len() {
                let d = y[i] - tgt[i];
                loss += d * d;
                grad_y[i] = 2.0 * d / n_total * scale;
            }
            let grad_pre2 = tanh_backward(&y, &grad_y);
            let grad_h = self.l2.backward(&h, &grad_pre2)?;
            let grad_pre1 = tanh_backward(&h, &grad_h);
            let grad_in = self.l1.backward(&input, &grad_pre1)?;
            for (gg, gi) in grad_g.iter_mut().zip(grad_in.iter()) {
                *gg += gi;
            }
        }
        Ok((loss / n_total, grad_g))
    }

    /// Squared error on the predicted log frame count; returns
    /// `(loss, grad_g)` and accumulates into the rate head.
    pub fn rate_backward(&mut self, g: &[f64], target_log_t: f64, scale: f64) -> Result<(f64, Vec<f64>)> {
        let pred = self.predicted_log_frames(g)?;
        let d = pred - target_log_t;
        let grad = vec![2.0 * d * scale];
        let grad_g = self.rate_head.backward(g, &grad)?;
        Ok((d * d, grad_g))
    }
}

impl Parameterized for DecoderParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        visit_prefixed("l1", &mut self.l1, f);
        visit_prefixed("l2", &mut self.l2, f);
        visit_prefixed("rate_head", &mut self.rate_head, f);
    }
}

/// The complete backbone. After pre-training `frozen` is set and the
/// fine-tuning stages treat the whole struct as read-only.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub enc: EncoderParams,
    pub stl: StyleTokenBank,
    pub dec: DecoderParams,
    pub dims: Dims,
    pub frozen: bool,
}

impl Backbone {
    pub fn init(dims: Dims, t0: usize, seed: u64) -> Self {
        Self {
            enc: EncoderParams::init(&dims, seed),
            stl: StyleTokenBank::init(&dims, seed),
            dec: DecoderParams::init(&dims, t0, seed),
            dims,
            frozen: false,
        }
    }

    /// Reference speaker embedding: `g = STL(encode(f))`.
    pub fn speaker_embedding(&self, f: &FeatureSeq) -> Result<Vec<f64>> {
        let x = self.enc.encode(f)?;
        self.stl.stl(&x)
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        visit_prefixed("enc", &mut self.enc, f);
        visit_prefixed("stl", &mut self.stl, f);
        visit_prefixed("dec", &mut self.dec, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub rate_loss_weight: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 3e-3,
            weight_decay: 1e-2,
            rate_loss_weight: 1.0,
            log_every: 50,
        }
    }
}

/// One row of the pretraining curve CSV.
#[derive(Debug, Clone, Copy)]
pub struct PretrainPoint {
    pub step: usize,
    pub recon_loss: f64,
    pub rate_loss: f64,
}

struct CachedItem {
    pooled: Vec<f64>,
    content: Tensor2D,
    log_t: f64,
}

/// Pre-trains the backbone by feature reconstruction plus rate
/// prediction, returning the frozen backbone and its loss curve.
pub fn pretrain(
    world: &WorldParams,
    corpus: &Corpus,
    dims: Dims,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Backbone, Vec<PretrainPoint>)> {
    let train = corpus.train_items();
    if train.is_empty() {
        return Err(VicError::Data("no training items in corpus".into()));
    }
    let mut backbone = Backbone::init(dims, world.cfg.t0, seed);
    let cache: Vec<CachedItem> = train
        .iter()
        .map(|it| CachedItem {
            pooled: it.features.mean_pooled(),
            content: world.content_frames(it.spec.content_seed, it.features.len()),
            log_t: (it.features.len() as f64).ln(),
        })
        .collect();

    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut curve = Vec::new();
    let scale = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let mut rng = stream(seed, &[streams::SAMPLING, step as u64]);
        zero_grads(&mut backbone);
        let mut recon_sum = 0.0;
        let mut rate_sum = 0.0;
        for _ in 0..cfg.batch {
            use rand::Rng;
            let idx = rng.gen_range(0..train.len());
            let item = train[idx];
            let cached = &cache[idx];

            let enc_trace = backbone.enc.forward_pooled(&cached.pooled)?;
            let stl_trace = backbone.stl.forward(&enc_trace.x)?;
            let (recon, mut grad_g) = backbone.dec.reconstruct_backward(
                &stl_trace.g,
                &cached.content,
                &item.features,
                scale,
            )?;
            let (rate, grad_g_rate) = backbone.dec.rate_backward(
                &stl_trace.g,
                cached.log_t,
                scale * cfg.rate_loss_weight,
            )?;
            for (a, b) in grad_g.iter_mut().zip(grad_g_rate.iter()) {
                *a += b;
            }
            let grad_x = backbone.stl.backward(&stl_trace, &grad_g)?;
            backbone.enc.backward(&enc_trace, &grad_x)?;

            recon_sum += recon;
            rate_sum += rate;
        }
        let recon_mean = recon_sum * scale;
        let rate_mean = rate_sum * scale;
        let total = recon_mean + cfg.rate_loss_weight * rate_mean;
        if !total.is_finite() {
            return Err(VicError::Numeric(format!(
                "pretraining diverged at step {step}: loss {total}"
            )));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(PretrainPoint {
                step,
                recon_loss: recon_mean,
                rate_loss: rate_mean,
            });
        }
        opt.step(&mut backbone)?;
    }
    backbone.frozen = true;
    Ok((backbone, curve))
}

/// Held-out reconstruction MSE and rate-head mean absolute error on log
/// frame count.
pub fn evaluate_reconstruction(
    backbone: &Backbone,
    world: &WorldParams,
    items: &[&CorpusItem],
) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(VicError::Usage("empty evaluation set".into()));
    }
    let mut recon_sum = 0.0;
    let mut rate_abs_sum = 0.0;
    for it in items {
        let x = backbone.enc.encode(&it.features)?;
        let g = backbone.stl.stl(&x)?;
        let content = world.content_frames(it.spec.content_seed, it.features.len());
        let recon = backbone.dec.reconstruct(&g, &content)?;
        let (loss, _) = mse_loss(recon.frames().data(), it.features.frames().data())?;
        recon_sum += loss;
        let log_t = backbone.dec.predicted_log_frames(&g)?;
        rate_abs_sum += (log_t - (it.features.len() as f64).ln()).abs();
    }
    let n = items.len() as f64;
    Ok((recon_sum / n, rate_abs_sum / n))
}
