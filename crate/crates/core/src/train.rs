//! Adam, the training loop, RD evaluation and the λ sweep.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attention::ShiftPolicy;
use crate::codec::Codec;
use crate::data::crop_patch;
use crate::error::{Error, Result};
use crate::metrics::{db_transform, mse, ms_ssim, psnr, RdPoint};
use crate::model::{train_forward, CodecModel};
use crate::params::{Binder, ParamStore};
use crate::rng::{rng_for, tag};
use crate::tensor::{Graph, Tensor};
use crate::transforms::StageConfig;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of applied steps.
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update. Returns `false` and leaves everything untouched
    /// when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<bool> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
            if p.shape != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {name} {:?}", g.shape(), p.shape)));
            }
        }
        if !grads.values().all(Tensor::is_finite) {
            return Ok(false);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p.data[k] = (p.data[k] as f64 - update) as f32;
            }
        }
        Ok(true)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

/// Cosine decay from `init` at step 0 to `last` at step `total - 1`.
pub fn cosine_lr(step: usize, total: usize, init: f64, last: f64) -> f64 {
    if total <= 1 {
        return init;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    last + 0.5 * (init - last) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: StageConfig,
    pub lambda: f64,
    pub epochs: usize,
    /// Stops early after this many steps when set.
    pub max_steps: Option<usize>,
    pub batch: usize,
    pub patch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub seed: u64,
    /// Token-aggregation blocks replaced by fixed half-window shifted pairs.
    pub swin_baseline: bool,
    /// Uniform instead of peaked shift law.
    pub uniform_shift: bool,
}

impl TrainConfig {
    pub fn desk(spectral: usize, lambda: f64) -> Self {
        Self {
            model: StageConfig::desk(spectral),
            lambda,
            epochs: 20,
            max_steps: None,
            batch: 8,
            patch: 64,
            lr_init: 1e-4,
            lr_final: 1e-5,
            seed: 0,
            swin_baseline: false,
            uniform_shift: false,
        }
    }

    /// Model config with the ablation flags applied.
    pub fn effective_model(&self) -> StageConfig {
        let mut m = self.model.clone();
        if self.swin_baseline {
            m = m.without_token_aggregation();
        }
        if self.uniform_shift {
            m = m.with_uniform_shifts();
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model().validate()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Usage(format!("lambda {} must be positive", self.lambda)));
        }
        if self.batch == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Usage("batch, epochs and steps must be positive".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Usage("learning rates must be positive".into()));
        }
        self.effective_model().check_extent(self.patch, self.patch)
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_train);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
    /// The update was dropped for non-finite gradients.
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Effective model config, as stored in checkpoints.
    pub config_text: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<(usize, RdPoint)>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in self.config_text.lines() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("step,epoch,lr,loss,bpp,mse,skipped,seconds\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{:.6e},{:.6},{:.6},{:.8},{},{:.3}",
                s.step, s.epoch, s.lr, s.loss, s.bpp, s.mse, s.skipped as u8, s.seconds
            );
        }
        out
    }
}

/// Trailing moving averages over `window` values (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Where training starts from.
pub enum Start<'a> {
    Fresh,
    From(&'a CodecModel),
}

/// Trains on `images` (each `[H, W, S]`). Per step it crops one patch per
/// batch entry, runs the noisy forward pass with sampled shifts, averages
/// the gradients and applies Adam. `on_epoch` sees the model after every
/// epoch. All draws derive from `(seed, step, entry)`.
pub fn train(
    cfg: &TrainConfig,
    images: &[Tensor],
    start: Start<'_>,
    mut on_epoch: impl FnMut(usize, &CodecModel) -> Result<()>,
) -> Result<(CodecModel, TrainLog)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Usage("no training images".into()));
    }
    let model_cfg = cfg.effective_model();
    let mut model = match start {
        Start::Fresh => CodecModel::new(model_cfg.clone(), cfg.seed)?,
        Start::From(m) => {
            let specs = CodecModel::specs(&model_cfg);
            let fits = specs.len() == m.params.len()
                && specs.iter().all(|s| m.params.get(&s.name).is_some_and(|p| p.shape == s.shape));
            if !fits {
                return Err(Error::Usage("starting checkpoint does not match the model config".into()));
            }
            CodecModel {
                config: model_cfg.clone(),
                params: m.params.clone(),
            }
        }
    };
    let mut adam = Adam::default();
    let per_epoch = cfg.steps_per_epoch(images.len());
    let total = cfg.total_steps(images.len());
    let mut log = TrainLog {
        config_text: model_cfg.to_text(),
        ..TrainLog::default()
    };
    let clock = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = (0..images.len()).collect();
            order.shuffle(&mut rng_for(cfg.seed, &[tag::BATCH, epoch as u64]));
        }
        let first = (step % per_epoch) * cfg.batch;
        let lr = cosine_lr(step, total, cfg.lr_init, cfg.lr_final);
        let (mut loss, mut bpp, mut dist) = (0.0, 0.0, 0.0);
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for k in 0..cfg.batch {
            let img = &images[order[(first + k) % order.len()]];
            let tags = [step as u64, k as u64];
            let patch = crop_patch(img, cfg.patch, &mut rng_for(cfg.seed, &[tag::CROP, tags[0], tags[1]]))?;
            let g = Graph::new();
            let b = Binder::new(&g, &model.params, true);
            let x = g.constant(patch.pixels);
            let fwd = train_forward(
                &b,
                &model.config,
                x,
                cfg.lambda,
                &mut rng_for(cfg.seed, &[tag::NOISE, tags[0], tags[1]]),
                &mut ShiftPolicy::Sample(rng_for(cfg.seed, &[tag::SHIFT, tags[0], tags[1]])),
            )
            .map_err(|e| Error::Numeric(format!("forward pass failed at step {step}: {e}")))?;
            let l = fwd.loss.value().data()[0];
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss is {l} at step {step}")));
            }
            loss += l;
            bpp += fwd.rate.total()?.value().data()[0] / (cfg.patch * cfg.patch) as f64;
            dist += mse(&x.value(), &fwd.x_hat.value())?;
            let gr = g.backward(fwd.loss)?;
            for (name, t) in b.gradients(&gr) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, v)| *a += v),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let applied = adam.step(&mut model.params, &grads, lr)?;
        log.steps.push(StepRecord {
            step,
            epoch,
            lr,
            loss: loss * scale,
            bpp: bpp * scale,
            mse: dist * scale,
            skipped: !applied,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if (step + 1) % per_epoch == 0 || step + 1 == total {
            on_epoch(epoch, &model)?;
        }
    }
    Ok((model, log))
}

/// Per-image results of [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageEval {
    /// From the complete file.
    pub bpp: f64,
    pub file_bytes: usize,
    /// Entropy-coded payload only.
    pub stream_bytes: usize,
    pub estimated_bits: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Compresses, decompresses and scores every image. Fails if a decoded
/// reconstruction differs from the encoder's.
pub fn evaluate(codec: &Codec, lambda: f64, images: &[Tensor]) -> Result<(RdPoint, Vec<ImageEval>)> {
    if images.is_empty() {
        return Err(Error::Usage("no evaluation images".into()));
    }
    let mut per = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        let enc = codec.compress(x)?;
        let dec = codec.decompress(&enc.bytes)?;
        if dec.x_hat != enc.x_hat || dec.yhat != enc.yhat {
            return Err(Error::Numeric(format!("image {i}: decoder disagrees with encoder")));
        }
        per.push(ImageEval {
            bpp: enc.bpp(),
            file_bytes: enc.bytes.len(),
            stream_bytes: enc.file.stream_bytes(),
            estimated_bits: enc.estimated_bits,
            psnr: psnr(x, &dec.x_hat)?,
            ms_ssim: ms_ssim(x, &dec.x_hat)?,
        });
    }
    let n = per.len() as f64;
    let mean = |f: fn(&ImageEval) -> f64| per.iter().map(f).sum::<f64>() / n;
    let m = mean(|e| e.ms_ssim);
    Ok((
        RdPoint {
            lambda,
            bpp: mean(|e| e.bpp),
            psnr: mean(|e| e.psnr),
            ms_ssim: m,
            ms_ssim_db: db_transform(m),
            n_images: per.len(),
        },
        per,
    ))
}

/// Number of adjacent pairs, ordered by λ, whose PSNR or bpp decreases as
/// λ grows.
pub fn monotonicity_inversions(points: &[RdPoint]) -> usize {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    p.windows(2).filter(|w| w[1].psnr < w[0].psnr || w[1].bpp < w[0].bpp).count()
}

/// One trained point of a sweep.
pub struct SweepPoint {
    pub lambda: f64,
    pub model: CodecModel,
    pub log: TrainLog,
}

/// Trains one model per λ by fine-tuning `base` for `steps` steps each
/// with the schedule of `cfg`.
pub fn sweep(cfg: &TrainConfig, base: &CodecModel, lambdas: &[f64], steps: usize, images: &[Tensor]) -> Result<Vec<SweepPoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let c = TrainConfig {
                lambda,
                max_steps: Some(steps),
                epochs: steps.div_ceil(cfg.steps_per_epoch(images.len())).max(1),
                ..cfg.clone()
            };
            let (model, log) = train(&c, images, Start::From(base), |_, _| Ok(()))?;
            Ok(SweepPoint { lambda, model, log })
        })
        .collect()
}

/// Writes `model` to `path`; convenience for `on_epoch` callbacks.
pub fn save_checkpoint(path: &Path) -> impl FnMut(usize, &CodecModel) -> Result<()> + '_ {
    move |_, m| m.save(path)
}
