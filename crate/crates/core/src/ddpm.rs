//! Denoising diffusion training with the noise-prediction objective,
//! ancestral sampling and synthetic dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::datakit::{save_png, to_image};
use crate::denoiser::{DenoiserModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::numeric::{AdamW, AdamWConfig, Tape, Tensor};
use crate::rng::{derive_seed, rng_for, tag, StageRng};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Largest magnitude accepted as a `[-1, 1]`-normalized pixel.
const NORMALIZED_LIMIT: f64 = 1.0 + 1e-3;

/// Reverse-process variance. Only the fixed choice `sigma_t^2 = beta_t` is
/// provided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variance {
    #[default]
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub variance: Variance,
    /// Add no noise on the final step `t = 1`.
    pub deterministic_final_step: bool,
    /// Form the step mean from the implied `x_0` estimate clamped to
    /// `[-1, 1]`. Without the clamp this mean equals the noise-prediction
    /// form exactly; with it, an imperfect noise estimate can no longer
    /// push the chain outside the data range.
    pub clip_denoised: bool,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            variance: Variance::Beta,
            deterministic_final_step: true,
            clip_denoised: false,
        }
    }

    pub fn clipped(mut self) -> Self {
        self.clip_denoised = true;
        self
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        match self.variance {
            Variance::Beta => self.schedule.beta(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the weights, which then
    /// replaces them in checkpoints and in the returned model. 0 disables
    /// it. The effective decay ramps up as `min(decay, (1 + n) / (10 + n))`
    /// after `n` updates.
    pub ema_decay: f64,
}

impl Default for DmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            ema_decay: 0.0,
        }
    }
}

impl DmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!("ema_decay {} must lie in [0, 1)", self.ema_decay)));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DmTrainHistory {
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Directory of the most recent checkpoint, if any was written.
    pub last_checkpoint: Option<PathBuf>,
}

fn check_normalized<S: Scalar>(x0: &Tensor<S>) -> Result<()> {
    let m = x0.max_abs().to_f64_lossy();
    if m > NORMALIZED_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "input not normalized to [-1, 1] (max |x| = {m})"
        )));
    }
    Ok(())
}

/// Per-sample timesteps uniform in `1..=T` and standard normal noise.
fn draw_t_eps<S: Scalar, R: Rng + ?Sized>(shape: &[usize], steps: usize, rng: &mut R) -> (Vec<usize>, Tensor<S>) {
    let t = (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect();
    (t, Tensor::randn(shape.to_vec(), rng))
}

/// `x_t` for a batch with per-sample timesteps.
pub fn q_sample_batch<S: Scalar>(sched: &NoiseSchedule, x0: &Tensor<S>, t: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
    if x0.shape() != eps.shape() || x0.shape()[0] != t.len() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), t.len()),
        ));
    }
    let per = x0.len() / t.len();
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        sched.check_t(ti)?;
        let a = S::from_f64_lossy(sched.alpha_bar(ti).sqrt());
        let b = S::from_f64_lossy((1.0 - sched.alpha_bar(ti)).sqrt());
        let e = &eps.data()[i * per..(i + 1) * per];
        for (o, &ev) in out.data_mut()[i * per..(i + 1) * per].iter_mut().zip(e) {
            *o = a * *o + b * ev;
        }
    }
    Ok(out)
}

/// Monte-Carlo estimate of the simplified objective on one batch:
/// `mean ||eps - eps_theta(x_t, t)||^2` with `t` and `eps` drawn from `rng`.
pub fn simple_loss<S: Scalar, M: NoisePredictor<S> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Tensor<S>,
    sched: &NoiseSchedule,
    rng: &mut R,
    labels: Option<&[usize]>,
) -> Result<f64> {
    check_normalized(x0)?;
    let (t, eps) = draw_t_eps::<S, R>(x0.shape(), sched.steps(), rng);
    let xt = q_sample_batch(sched, x0, &t, &eps)?;
    let pred = model.predict_noise(&xt, &t, labels)?;
    if pred.shape() != eps.shape() {
        return Err(Error::shape("simple_loss", "prediction shape differs from input"));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| (p - e).to_f64_lossy().powi(2))
        .sum();
    Ok(sq / eps.len() as f64)
}

/// Optimizes `model` with AdamW on shuffled minibatches of `images`
/// (each `(C, H, W)` in `[-1, 1]`). `labels` are required for a
/// conditional model. A non-finite loss or gradient stops training with
/// [`Error::TrainingAborted`] naming the last checkpoint written.
pub fn train_dm<S: Scalar>(
    model: &mut DenoiserModel<S>,
    images: &[Tensor<S>],
    labels: Option<&[usize]>,
    sched: &NoiseSchedule,
    cfg: &DmTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<DmTrainHistory> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("diffusion training set is empty".into()));
    }
    let [c, h, w] = model.image_shape();
    for img in images {
        if img.shape() != [c, h, w] {
            return Err(Error::shape(
                "train_dm",
                format!("image {:?} does not match model geometry {:?}", img.shape(), [c, h, w]),
            ));
        }
        check_normalized(img)?;
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(Error::InvalidArgument(format!("{} labels for {} images", l.len(), images.len())));
        }
    }
    let mut history = DmTrainHistory::default();
    let mut opt = AdamW::new(cfg.optimizer, &model.params)?;
    let mut rng = rng_for(cfg.seed, &[tag("train_dm")]);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut ema = (cfg.ema_decay > 0.0).then(|| model.params.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x0 = Tensor::stack(&batch.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
            let bl: Option<Vec<usize>> = labels.map(|l| batch.iter().map(|&i| l[i]).collect());
            let (t, eps) = draw_t_eps::<S, _>(x0.shape(), sched.steps(), &mut rng);
            let abort = |reason: String, history: &DmTrainHistory| Error::TrainingAborted {
                epoch,
                reason,
                last_checkpoint: history.last_checkpoint.clone(),
            };
            let step = (|| {
                let xt = q_sample_batch(sched, &x0, &t, &eps)?;
                let mut tape = Tape::new();
                let xi = tape.constant(xt);
                let pred = model.forward(&mut tape, xi, &t, bl.as_deref())?;
                let target = tape.constant(eps.clone());
                let loss = tape.mse_loss(pred, target)?;
                let value = tape.value(loss).item().to_f64_lossy();
                let grads = tape.backward_scalar(loss)?;
                Ok::<_, Error>((value, grads.into_map()))
            })();
            let (value, grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { op }) => return Err(abort(format!("non-finite value in {op}"), &history)),
                Err(e) => return Err(e),
            };
            match opt.step(&mut model.params, &grads) {
                Ok(()) => {}
                Err(Error::NonFinite { op }) => return Err(abort(format!("non-finite value in {op}"), &history)),
                Err(e) => return Err(e),
            }
            total += value * batch.len() as f64;
            history.steps += 1;
            if let Some(avg) = ema.as_mut() {
                let n = history.steps as f64;
                let d = S::from_f64_lossy(cfg.ema_decay.min((n) / (9.0 + n)));
                let keep = S::one() - d;
                for (name, p) in model.params.iter() {
                    let a = avg.get_mut(name).expect("average per parameter");
                    for (av, &pv) in a.data_mut().iter_mut().zip(p.data()) {
                        *av = d * *av + keep * pv;
                    }
                }
            }
        }
        let mean = total / images.len() as f64;
        log::info!("dm epoch {epoch}/{}: loss {mean:.5}", cfg.epochs);
        history.epoch_losses.push(mean);
        if let Some(dir) = checkpoint_dir {
            if epoch == cfg.epochs || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
                let path = if epoch == cfg.epochs {
                    dir.join("final")
                } else {
                    dir.join(format!("epoch-{epoch:04}"))
                };
                if let Some(avg) = ema.as_mut() {
                    std::mem::swap(&mut model.params, avg);
                }
                let saved = model.save(&path, sched, &[("epoch".into(), epoch.to_string())]);
                if let Some(avg) = ema.as_mut() {
                    std::mem::swap(&mut model.params, avg);
                }
                saved?;
                history.last_checkpoint = Some(path);
            }
        }
    }
    if let Some(avg) = ema {
        model.params = avg;
    }
    Ok(history)
}

/// Noise for the reverse chain, one image at a time.
pub trait NoiseSource<S> {
    /// Fills `out` with the noise of batch image `index`.
    fn fill(&mut self, index: usize, out: &mut [S]);
}

/// All-zero noise.
pub struct ZeroNoise;

impl<S: Scalar> NoiseSource<S> for ZeroNoise {
    fn fill(&mut self, _index: usize, out: &mut [S]) {
        out.fill(S::zero());
    }
}

/// One independent standard-normal stream per image, seeded by that
/// image's seed, so an image's bytes do not depend on its batch.
pub struct ImageStreams {
    streams: Vec<StageRng>,
}

impl ImageStreams {
    pub fn new(seeds: &[u64]) -> Self {
        Self {
            streams: seeds.iter().map(|&s| StageRng::seed_from_u64(s)).collect(),
        }
    }
}

impl<S: Scalar> NoiseSource<S> for ImageStreams {
    fn fill(&mut self, index: usize, out: &mut [S]) {
        let rng = &mut self.streams[index];
        for v in out {
            *v = S::from_f64_lossy(rng.sample(StandardNormal));
        }
    }
}

fn batch_noise<S: Scalar>(shape: &[usize], noise: &mut dyn NoiseSource<S>) -> Tensor<S> {
    let mut z = Tensor::zeros(shape.to_vec());
    let per = z.len() / shape[0];
    for (i, chunk) in z.data_mut().chunks_mut(per).enumerate() {
        noise.fill(i, chunk);
    }
    z
}

/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`,
/// with `z` ignored at `t = 1` when the final step is deterministic.
///
/// With [`SamplerConfig::clip_denoised`] the mean is instead
/// `c0 * clamp(x0_hat) + c1 * x_t`, where
/// `x0_hat = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`,
/// `c0 = beta_t sqrt(abar_{t-1}) / (1 - abar_t)` and
/// `c1 = (1 - abar_{t-1}) sqrt(alpha_t) / (1 - abar_t)`.
pub fn reverse_step<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    x_t: &Tensor<S>,
    t: usize,
    labels: Option<&[usize]>,
    cfg: &SamplerConfig,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let sched = &cfg.schedule;
    sched.check_t(t)?;
    if z.shape() != x_t.shape() {
        return Err(Error::shape("reverse_step", "noise shape differs from x_t"));
    }
    let n = x_t.shape()[0];
    let eps = model.predict_noise(x_t, &vec![t; n], labels)?;
    let inv_sqrt_alpha = S::from_f64_lossy(1.0 / sched.alpha(t).sqrt());
    let coef = S::from_f64_lossy(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let sigma = if t == 1 && cfg.deterministic_final_step {
        S::zero()
    } else {
        S::from_f64_lossy(cfg.sigma2(t).sqrt())
    };
    let mut out = x_t.clone();
    if cfg.clip_denoised {
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let inv_sqrt_ab = S::from_f64_lossy(1.0 / ab.sqrt());
        let sqrt_one_minus_ab = S::from_f64_lossy((1.0 - ab).sqrt());
        let c0 = S::from_f64_lossy(sched.beta(t) * ab_prev.sqrt() / (1.0 - ab));
        let c1 = S::from_f64_lossy((1.0 - ab_prev) * sched.alpha(t).sqrt() / (1.0 - ab));
        let one = S::one();
        for ((o, &e), &zv) in out.data_mut().iter_mut().zip(eps.data()).zip(z.data()) {
            let x0 = ((*o - sqrt_one_minus_ab * e) * inv_sqrt_ab).max(-one).min(one);
            *o = c0 * x0 + c1 * *o + sigma * zv;
        }
    } else {
        for ((o, &e), &zv) in out.data_mut().iter_mut().zip(eps.data()).zip(z.data()) {
            *o = inv_sqrt_alpha * (*o - coef * e) + sigma * zv;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "reverse_step" });
    }
    Ok(out)
}

/// Runs the reverse chain `t = T..1` from `x_T` (batch `(N, C, H, W)`)
/// without the final clamp.
pub fn sample_chain<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    x_t: Tensor<S>,
    labels: Option<&[usize]>,
    cfg: &SamplerConfig,
    noise: &mut dyn NoiseSource<S>,
) -> Result<Tensor<S>> {
    let mut x = x_t;
    for t in (1..=cfg.schedule.steps()).rev() {
        let z = if t == 1 && cfg.deterministic_final_step {
            Tensor::zeros(x.shape().to_vec())
        } else {
            batch_noise(x.shape(), noise)
        };
        x = reverse_step(model, &x, t, labels, cfg, &z)?;
    }
    Ok(x)
}

/// One image per seed, each `(C, H, W)` clamped to `[-1, 1]`. The image for
/// a seed is identical whatever the batching; batches run in parallel.
pub fn sample<S: Scalar, M: NoisePredictor<S> + Sync + ?Sized>(
    model: &M,
    seeds: &[u64],
    cfg: &SamplerConfig,
    label: Option<usize>,
    batch_size: usize,
) -> Result<Vec<Tensor<S>>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let [c, h, w] = model.image_shape();
    let batches: Vec<Vec<Tensor<S>>> = seeds
        .par_chunks(batch_size)
        .map(|chunk| {
            let mut noise = ImageStreams::new(chunk);
            let xt = batch_noise(&[chunk.len(), c, h, w], &mut noise);
            let labels = label.map(|l| vec![l; chunk.len()]);
            let x0 = sample_chain(model, xt, labels.as_deref(), cfg, &mut noise)?;
            Ok(x0.clamp(-S::one(), S::one()).unstack())
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// A trained generator and the identifier recorded in the manifest.
pub struct Generator<'a, M: ?Sized> {
    pub model: &'a M,
    pub checkpoint_id: String,
}

pub enum Generators<'a, M: ?Sized> {
    /// One unconditional model per class, in class order.
    PerClass(Vec<Generator<'a, M>>),
    /// One model conditioned on class index.
    Conditional(Generator<'a, M>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedRecord {
    pub relative_path: String,
    pub class_label: String,
    pub seed: u64,
    pub model_checkpoint_id: String,
}

pub const GENERATED_MANIFEST: &str = "manifest.csv";

/// Per-image seed of image `index` of class `class`.
pub fn image_seed(seed: u64, class: usize, index: usize) -> u64 {
    derive_seed(seed, &[tag("generate"), class as u64, index as u64])
}

/// Samples `counts[c]` images for every class into `out_dir/<class>/` as
/// PNG and writes `manifest.csv` with `relative_path, class_label, seed,
/// model_checkpoint_id`.
pub fn generate_dataset<S: Scalar, M: NoisePredictor<S> + Sync + ?Sized>(
    generators: &Generators<'_, M>,
    classes: &[String],
    counts: &[usize],
    cfg: &SamplerConfig,
    out_dir: &Path,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<GeneratedRecord>> {
    if classes.len() != counts.len() || classes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} classes but {} counts",
            classes.len(),
            counts.len()
        )));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("count for class `{}` must be positive", classes[c])));
    }
    match generators {
        Generators::PerClass(models) if models.len() != classes.len() => {
            return Err(Error::InvalidArgument(format!(
                "{} per-class models for {} classes",
                models.len(),
                classes.len()
            )));
        }
        Generators::Conditional(g) if g.model.num_classes() != classes.len() => {
            return Err(Error::InvalidArgument(format!(
                "conditional model knows {} classes, {} requested",
                g.model.num_classes(),
                classes.len()
            )));
        }
        _ => {}
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let (gen, label) = match generators {
            Generators::PerClass(models) => (&models[c], None),
            Generators::Conditional(g) => (g, Some(c)),
        };
        let seeds: Vec<u64> = (0..counts[c]).map(|j| image_seed(seed, c, j)).collect();
        log::info!("generating {} images of class `{class}`", seeds.len());
        let images = sample(gen.model, &seeds, cfg, label, batch_size)?;
        let class_records: Vec<GeneratedRecord> = images
            .par_iter()
            .zip(seeds.par_iter())
            .enumerate()
            .map(|(j, (img, &s))| {
                let rel = format!("{class}/{class}_{j:05}.png");
                save_png(&to_image(img)?, &out_dir.join(&rel))?;
                Ok(GeneratedRecord {
                    relative_path: rel,
                    class_label: class.clone(),
                    seed: s,
                    model_checkpoint_id: gen.checkpoint_id.clone(),
                })
            })
            .collect::<Result<_>>()?;
        records.extend(class_records);
    }
    let path = out_dir.join(GENERATED_MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["relative_path", "class_label", "seed", "model_checkpoint_id"])?;
    for r in &records {
        w.write_record([
            r.relative_path.as_str(),
            r.class_label.as_str(),
            r.seed.to_string().as_str(),
            r.model_checkpoint_id.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(records)
}
