//! Small convolutional image classifiers, their training loop with early
//! stopping, and stratified k-fold cross-validation.
//!
//! Five architecture families share one building block vocabulary: plain
//! stacked convolutions, residual blocks, densely connected blocks,
//! depthwise-separable convolutions and inception-style parallel branches.
//! Every family ends in global average pooling and a linear head. Group
//! norm is used throughout, so a sample's logits never depend on the rest of
//! its batch and training and inference behave identically.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::datakit::kfold_indices;
use crate::error::{Error, Result};
use crate::numeric::{AdamW, AdamWConfig, Conv2d, GroupNorm, Init, Linear, NodeId, ParamStore, PoolOpts, Tape, Tensor};
use crate::rng::{derive_seed, rng_for, tag};
use crate::scalar::Scalar;

/// Largest number of validation epochs a run may take.
pub const MAX_EPOCHS: usize = 50;

const NORM_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    PlainConv,
    Residual,
    Dense,
    Separable,
    Inception,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::PlainConv,
        Family::Residual,
        Family::Dense,
        Family::Separable,
        Family::Inception,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::PlainConv => "plain_conv",
            Family::Residual => "residual",
            Family::Dense => "dense",
            Family::Separable => "separable",
            Family::Inception => "inception",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown classifier family `{s}`")))
    }
}

/// Width and repetition preset shared by all families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Depth {
    Tiny,
    Small,
    Medium,
}

impl Depth {
    pub fn as_str(self) -> &'static str {
        match self {
            Depth::Tiny => "tiny",
            Depth::Small => "small",
            Depth::Medium => "medium",
        }
    }

    /// `(base width, blocks per stage)`.
    fn shape(self) -> (usize, usize) {
        match self {
            Depth::Tiny => (8, 1),
            Depth::Small => (16, 1),
            Depth::Medium => (16, 2),
        }
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Depth::Tiny, Depth::Small, Depth::Medium]
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown depth preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub family: Family,
    pub depth: Depth,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Extra epochs tolerated after the best validation loss before stopping.
    pub patience: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            family: Family::Residual,
            depth: Depth::Small,
            image_size: 32,
            in_channels: 1,
            num_classes: 2,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 1e-4,
            max_epochs: MAX_EPOCHS,
            patience: 5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if self.max_epochs == 0 || self.max_epochs > MAX_EPOCHS {
            return bad(format!("max_epochs {} must be in 1..={MAX_EPOCHS}", self.max_epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        self.optimizer().validate()?;
        let down = downsamplings(self.family);
        let factor = 1usize << down;
        if self.image_size < 16 || !self.image_size.is_multiple_of(factor) {
            return bad(format!(
                "image_size {} must be at least 16 and divisible by {factor} for the {} family",
                self.image_size, self.family
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("family".into(), self.family.as_str().into()),
            ("depth".into(), self.depth.as_str().into()),
            ("image_size".into(), self.image_size.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
        ]
    }

    pub fn from_metadata(meta: &IndexMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
        };
        fn parse<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` malformed: `{v}`")))
        }
        let cfg = Self {
            family: get("family")?.parse()?,
            depth: get("depth")?.parse()?,
            image_size: parse("image_size", get("image_size")?)?,
            in_channels: parse("in_channels", get("in_channels")?)?,
            num_classes: parse("num_classes", get("num_classes")?)?,
            lr: parse("lr", get("lr")?)?,
            batch_size: parse("batch_size", get("batch_size")?)?,
            weight_decay: parse("weight_decay", get("weight_decay")?)?,
            max_epochs: parse("max_epochs", get("max_epochs")?)?,
            patience: parse("patience", get("patience")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn downsamplings(family: Family) -> usize {
    match family {
        Family::PlainConv | Family::Separable => 3,
        Family::Residual | Family::Dense | Family::Inception => 2,
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(name: &str, conv: Conv2d) -> Self {
        let norm = GroupNorm::new(format!("{name}.norm"), conv.out_channels, NORM_GROUPS);
        Self { conv, norm }
    }

    fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<S>, rng: &mut R) {
        self.conv.init(p, Init::He, rng);
        self.norm.init(p);
    }

    /// conv, then group norm, then relu unless `act` is false.
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: NodeId, act: bool) -> Result<NodeId> {
        let h = self.conv.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h)?;
        if act {
            tape.relu(h)
        } else {
            Ok(h)
        }
    }
}

#[derive(Clone, Debug)]
enum Unit {
    Conv(ConvBlock),
    MaxPool(PoolOpts),
    Residual {
        a: ConvBlock,
        b: ConvBlock,
        proj: Option<ConvBlock>,
    },
    /// Each layer sees the concatenation of the block input and every
    /// earlier layer's output.
    Dense(Vec<(GroupNorm, Conv2d)>),
    Inception {
        one: ConvBlock,
        reduce: ConvBlock,
        three: ConvBlock,
        pool_proj: ConvBlock,
    },
    NormRelu(GroupNorm),
}

impl Unit {
    fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<S>, rng: &mut R) {
        match self {
            Unit::Conv(c) => c.init(p, rng),
            Unit::MaxPool(_) => {}
            Unit::Residual { a, b, proj } => {
                a.init(p, rng);
                b.init(p, rng);
                if let Some(pr) = proj {
                    pr.init(p, rng);
                }
            }
            Unit::Dense(layers) => {
                for (norm, conv) in layers {
                    norm.init(p);
                    conv.init(p, Init::He, rng);
                }
            }
            Unit::Inception {
                one,
                reduce,
                three,
                pool_proj,
            } => {
                for c in [one, reduce, three, pool_proj] {
                    c.init(p, rng);
                }
            }
            Unit::NormRelu(n) => n.init(p),
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        match self {
            Unit::Conv(c) => c.forward(tape, p, x, true),
            Unit::MaxPool(opts) => tape.max_pool2d(x, *opts),
            Unit::Residual { a, b, proj } => {
                let h = a.forward(tape, p, x, true)?;
                let h = b.forward(tape, p, h, false)?;
                let skip = match proj {
                    Some(pr) => pr.forward(tape, p, x, false)?,
                    None => x,
                };
                let sum = tape.add(h, skip)?;
                tape.relu(sum)
            }
            Unit::Dense(layers) => {
                let mut feats = vec![x];
                let mut cur = x;
                for (norm, conv) in layers {
                    let h = norm.forward(tape, p, cur)?;
                    let h = tape.relu(h)?;
                    let h = conv.forward(tape, p, h)?;
                    feats.push(h);
                    cur = tape.concat(&feats)?;
                }
                Ok(cur)
            }
            Unit::Inception {
                one,
                reduce,
                three,
                pool_proj,
            } => {
                let b1 = one.forward(tape, p, x, true)?;
                let r = reduce.forward(tape, p, x, true)?;
                let b3 = three.forward(tape, p, r, true)?;
                let pooled = tape.max_pool2d(
                    x,
                    PoolOpts {
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                )?;
                let bp = pool_proj.forward(tape, p, pooled, true)?;
                tape.concat(&[b1, b3, bp])
            }
            Unit::NormRelu(n) => {
                let h = n.forward(tape, p, x)?;
                tape.relu(h)
            }
        }
    }
}

const POOL2: PoolOpts = PoolOpts {
    kernel: 2,
    stride: 2,
    padding: 0,
};

struct Builder {
    units: Vec<Unit>,
    channels: usize,
}

impl Builder {
    fn name(&self) -> String {
        format!("u{}", self.units.len())
    }

    fn conv(&mut self, out: usize, kernel: usize, stride: usize) {
        let n = self.name();
        let conv = Conv2d::new(format!("{n}.conv"), self.channels, out, kernel).stride(stride);
        self.units.push(Unit::Conv(ConvBlock::new(&n, conv)));
        self.channels = out;
    }

    fn separable(&mut self, out: usize, stride: usize) {
        let n = self.name();
        let c = self.channels;
        let dw = Conv2d::new(format!("{n}.dw"), c, c, 3).stride(stride).groups(c);
        self.units.push(Unit::Conv(ConvBlock::new(&format!("{n}.dw"), dw)));
        let n = self.name();
        let pw = Conv2d::new(format!("{n}.pw"), c, out, 1);
        self.units.push(Unit::Conv(ConvBlock::new(&format!("{n}.pw"), pw)));
        self.channels = out;
    }

    fn pool(&mut self) {
        self.units.push(Unit::MaxPool(POOL2));
    }

    fn residual(&mut self, out: usize, stride: usize) {
        let n = self.name();
        let c = self.channels;
        let a = ConvBlock::new(&format!("{n}.a"), Conv2d::new(format!("{n}.a.conv"), c, out, 3).stride(stride));
        let b = ConvBlock::new(&format!("{n}.b"), Conv2d::new(format!("{n}.b.conv"), out, out, 3));
        let proj = (stride != 1 || c != out).then(|| {
            ConvBlock::new(
                &format!("{n}.proj"),
                Conv2d::new(format!("{n}.proj.conv"), c, out, 1).stride(stride).without_bias(),
            )
        });
        self.units.push(Unit::Residual { a, b, proj });
        self.channels = out;
    }

    fn dense(&mut self, layers: usize, growth: usize) {
        let n = self.name();
        let mut c = self.channels;
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            ls.push((
                GroupNorm::new(format!("{n}.l{i}.norm"), c, NORM_GROUPS),
                Conv2d::new(format!("{n}.l{i}.conv"), c, growth, 3),
            ));
            c += growth;
        }
        self.units.push(Unit::Dense(ls));
        self.channels = c;
    }

    fn inception(&mut self, out: usize) {
        let n = self.name();
        let c = self.channels;
        let quarter = (out / 4).max(1);
        let half = out - 2 * quarter;
        let block = |suffix: &str, cin: usize, cout: usize, k: usize| {
            ConvBlock::new(
                &format!("{n}.{suffix}"),
                Conv2d::new(format!("{n}.{suffix}.conv"), cin, cout, k),
            )
        };
        self.units.push(Unit::Inception {
            one: block("one", c, quarter, 1),
            reduce: block("reduce", c, quarter, 1),
            three: block("three", quarter, half, 3),
            pool_proj: block("pool", c, quarter, 1),
        });
        self.channels = out;
    }

    fn norm_relu(&mut self) {
        let n = self.name();
        self.units.push(Unit::NormRelu(GroupNorm::new(format!("{n}.norm"), self.channels, NORM_GROUPS)));
    }
}

#[derive(Clone, Debug)]
struct Net {
    units: Vec<Unit>,
    head: Linear,
}

impl Net {
    fn new(cfg: &ClassifierConfig) -> Self {
        let (w, reps) = cfg.depth.shape();
        let mut b = Builder {
            units: Vec::new(),
            channels: cfg.in_channels,
        };
        match cfg.family {
            Family::PlainConv => {
                for stage in 0..3 {
                    for _ in 0..reps {
                        b.conv(w << stage, 3, 1);
                    }
                    b.pool();
                }
            }
            Family::Residual => {
                b.conv(w, 3, 1);
                for stage in 0..3 {
                    for r in 0..reps {
                        let stride = if stage > 0 && r == 0 { 2 } else { 1 };
                        b.residual(w << stage, stride);
                    }
                }
            }
            Family::Dense => {
                b.conv(w, 3, 1);
                b.pool();
                b.dense(3 * reps, w / 2);
                b.norm_relu();
                b.conv(w, 1, 1);
                b.pool();
                b.dense(3 * reps, w / 2);
                b.norm_relu();
            }
            Family::Separable => {
                b.conv(w, 3, 2);
                b.separable(2 * w, 1);
                b.separable(2 * w, 2);
                b.separable(4 * w, 2);
                for _ in 1..reps {
                    b.separable(4 * w, 1);
                }
            }
            Family::Inception => {
                b.conv(w, 3, 1);
                b.pool();
                for _ in 0..reps {
                    b.inception(2 * w);
                }
                b.pool();
                for _ in 0..reps {
                    b.inception(4 * w);
                }
            }
        }
        let head = Linear::new("head", b.channels, cfg.num_classes);
        Self { units: b.units, head }
    }

    fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<S> {
        let mut p = ParamStore::new();
        for u in &self.units {
            u.init(&mut p, rng);
        }
        self.head.init(&mut p, Init::He, rng);
        p
    }
}

/// Architecture plus weights.
#[derive(Clone, Debug)]
pub struct Classifier<S> {
    config: ClassifierConfig,
    net: Net,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Classifier<S> {
    pub fn build<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let net = Net::new(&config);
        let params = net.init(rng);
        Ok(Self { config, net, params })
    }

    pub fn from_params(config: ClassifierConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let net = Net::new(&config);
        let expected = net.init::<f32, _>(&mut rng_for(0, &[]));
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors, architecture has {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, net, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.config.image_size;
        [self.config.in_channels, s, s]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Records the logits `(N, num_classes)` for input node `x` of shape
    /// `(N, C, H, W)` using `params` for the weights.
    pub fn forward_with(&self, tape: &mut Tape<S>, params: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = tape.value(x).dims4("classifier")?;
        let [ec, eh, ew] = self.input_shape();
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::shape(
                "classifier",
                format!("input {:?}, model expects (N, {ec}, {eh}, {ew})", [n, c, h, w]),
            ));
        }
        let mut cur = x;
        for u in &self.net.units {
            cur = u.forward(tape, params, cur)?;
        }
        let pooled = tape.global_avg_pool(cur)?;
        self.net.head.forward(tape, params, pooled)
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
        self.forward_with(tape, &self.params, x)
    }

    /// Logits for a stacked batch.
    pub fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Class probabilities, one softmax row per image, evaluated in
    /// batches of the configured size.
    pub fn predict(&self, images: &[Tensor<S>]) -> Result<Tensor<S>> {
        let k = self.config.num_classes;
        let mut rows = Vec::with_capacity(images.len() * k);
        for chunk in images.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(chunk)?);
            let logits = self.forward(&mut tape, x)?;
            let probs = tape.softmax(logits)?;
            rows.extend_from_slice(tape.value(probs).data());
        }
        Tensor::new(vec![images.len(), k], rows)
    }

    pub fn save(&self, dir: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut meta = vec![("model".to_owned(), "classifier".to_owned())];
        meta.extend(self.config.metadata());
        meta.extend_from_slice(extra);
        self.params.save(dir, &meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, IndexMap<String, String>)> {
        let (params, meta) = ParamStore::load(dir)?;
        if meta.get("model").map(String::as_str) != Some("classifier") {
            return Err(Error::Checkpoint(format!("{} is not a classifier checkpoint", dir.display())));
        }
        let config = ClassifierConfig::from_metadata(&meta)?;
        Ok((Self::from_params(config, params)?, meta))
    }
}

/// Index of the largest entry of each row.
pub fn argmax_rows<S: Scalar>(probs: &Tensor<S>) -> Result<Vec<usize>> {
    let (_, k) = probs.dims2("argmax_rows")?;
    Ok(probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Images and their class ids, addressed by index.
#[derive(Clone, Copy, Debug)]
pub struct Examples<'a, S> {
    pub images: &'a [Tensor<S>],
    pub labels: &'a [usize],
}

impl<'a, S: Scalar> Examples<'a, S> {
    pub fn new(images: &'a [Tensor<S>], labels: &'a [usize]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Mean cross-entropy and accuracy of `model` with weights `params` over the
/// items `idx`.
pub fn evaluate_indices<S: Scalar>(
    model: &Classifier<S>,
    params: &ParamStore<S>,
    data: Examples<'_, S>,
    idx: &[usize],
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(model.config.batch_size) {
        let (l, c) = batch_loss(model, params, data, chunk)?;
        loss += l * chunk.len() as f64;
        correct += c;
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

fn batch_tensors<S: Scalar>(data: Examples<'_, S>, chunk: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
    let imgs: Vec<Tensor<S>> = chunk.iter().map(|&i| data.images[i].clone()).collect();
    Ok((Tensor::stack(&imgs)?, chunk.iter().map(|&i| data.labels[i]).collect()))
}

fn batch_loss<S: Scalar>(
    model: &Classifier<S>,
    params: &ParamStore<S>,
    data: Examples<'_, S>,
    chunk: &[usize],
) -> Result<(f64, usize)> {
    let (x, y) = batch_tensors(data, chunk)?;
    let mut tape = Tape::new();
    let xi = tape.constant(x);
    let logits = model.forward_with(&mut tape, params, xi)?;
    let correct = count_correct(tape.value(logits), &y)?;
    let loss = tape.cross_entropy(logits, &y)?;
    let value = tape.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((value, correct))
}

fn count_correct<S: Scalar>(logits: &Tensor<S>, y: &[usize]) -> Result<usize> {
    Ok(argmax_rows(logits)?.iter().zip(y).filter(|(p, t)| p == t).count())
}

/// Patience-based stopping rule on a validation loss sequence.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's validation loss. Returns `true` when the
    /// loss has now failed to improve on the best for more than `patience`
    /// epochs in a row.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.epoch += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = self.epoch;
        }
        self.epoch - self.best_epoch > self.patience
    }

    /// 1-based epoch of the lowest loss seen, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn improved_last(&self) -> bool {
        self.epoch > 0 && self.best_epoch == self.epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun<S> {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub early_stopped: bool,
    pub params: ParamStore<S>,
}

impl<S> TrainRun<S> {
    pub fn best(&self) -> &EpochMetrics {
        &self.history[self.best_epoch - 1]
    }

    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    /// Per-epoch history as CSV text.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for m in &self.history {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc
            ));
        }
        s
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.history_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Minibatch AdamW on cross-entropy over `train_idx`, validating on
/// `val_idx` after every epoch. Returns the parameters of the epoch with
/// the lowest validation loss.
pub fn train_classifier<S: Scalar>(
    model: &Classifier<S>,
    data: Examples<'_, S>,
    train_idx: &[usize],
    val_idx: &[usize],
    seed: u64,
) -> Result<TrainRun<S>> {
    let cfg = &model.config;
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Dataset("training and validation sets must both be non-empty".into()));
    }
    let mut seen = vec![false; data.len()];
    for &i in train_idx {
        *seen
            .get_mut(i)
            .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside {} examples", data.len())))? = true;
    }
    for &i in val_idx {
        match seen.get(i) {
            None => return Err(Error::InvalidArgument(format!("index {i} outside {} examples", data.len()))),
            Some(true) => return Err(Error::InvalidArgument(format!("example {i} is in both training and validation"))),
            Some(false) => {}
        }
    }
    let shape = model.input_shape();
    for &i in train_idx.iter().chain(val_idx) {
        if data.images[i].shape() != shape {
            return Err(Error::shape(
                "train_classifier",
                format!("image {i} is {:?}, model expects {shape:?}", data.images[i].shape()),
            ));
        }
        if data.labels[i] >= cfg.num_classes {
            return Err(Error::LabelOutOfRange {
                label: data.labels[i],
                classes: cfg.num_classes,
            });
        }
    }

    let mut params = model.params.clone();
    let mut opt = AdamW::new(cfg.optimizer(), &params)?;
    let mut rng = rng_for(seed, &[tag("train_classifier")]);
    let mut order = train_idx.to_vec();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut early_stopped = false;
    for epoch in 1..=cfg.max_epochs {
        let abort = |reason: String| Error::TrainingAborted {
            epoch,
            reason,
            last_checkpoint: None,
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = batch_tensors(data, chunk)?;
            let step = (|| {
                let mut tape = Tape::new();
                let xi = tape.constant(x);
                let logits = model.forward_with(&mut tape, &params, xi)?;
                let c = count_correct(tape.value(logits), &y)?;
                let loss = tape.cross_entropy(logits, &y)?;
                let value = tape.value(loss).item().to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "cross_entropy" });
                }
                let grads = tape.backward_scalar(loss)?.into_map();
                opt.step(&mut params, &grads)?;
                Ok::<_, Error>((value, c))
            })();
            let (value, c) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { op }) => return Err(abort(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            loss_sum += value * chunk.len() as f64;
            correct += c;
        }
        let (val_loss, val_acc) = match evaluate_indices(model, &params, data, val_idx) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(abort(format!("non-finite value in {op}"))),
            Err(e) => return Err(e),
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "{} epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            cfg.family,
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc
        );
        history.push(m);
        let stop = stopper.observe(val_loss);
        if stopper.improved_last() {
            best_params = params.clone();
        }
        if stop {
            early_stopped = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainRun {
        history,
        best_epoch: stopper.best_epoch(),
        early_stopped,
        params: best_params,
    })
}

/// Mean and population standard deviation of one metric across folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Fold statistics taken at each fold's best epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvAggregate {
    pub train_loss: MeanStd,
    pub train_acc: MeanStd,
    pub val_loss: MeanStd,
    pub val_acc: MeanStd,
}

#[derive(Clone, Debug)]
pub struct Fold<S> {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub run: TrainRun<S>,
}

#[derive(Clone, Debug)]
pub struct CrossValidation<S> {
    pub folds: Vec<Fold<S>>,
    pub aggregate: CvAggregate,
}

impl<S: Scalar> CrossValidation<S> {
    /// Index of the fold with the lowest best-epoch validation loss (the
    /// earliest one on ties).
    pub fn best_fold(&self) -> usize {
        self.folds
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bl), (i, f)| {
                let l = f.run.best().val_loss;
                if l < bl {
                    (i, l)
                } else {
                    (bi, bl)
                }
            })
            .0
    }

    pub fn fold_model(&self, config: &ClassifierConfig, fold: usize) -> Result<Classifier<S>> {
        Classifier::from_params(config.clone(), self.folds[fold].run.params.clone())
    }
}

/// Stratified `k`-fold cross-validation. Every fold trains from its own
/// fresh initialization; folds run in parallel and each result depends only
/// on `(config, data, k, seed, fold index)`.
pub fn cross_validate<S: Scalar>(
    config: &ClassifierConfig,
    data: Examples<'_, S>,
    k: usize,
    seed: u64,
) -> Result<CrossValidation<S>> {
    config.validate()?;
    let splits = kfold_indices(data.labels, config.num_classes, k, seed)?;
    let folds = splits
        .into_par_iter()
        .enumerate()
        .map(|(f, (train_idx, val_idx))| {
            let model = Classifier::build(config.clone(), &mut rng_for(seed, &[tag("classifier_init"), f as u64]))?;
            let run = train_classifier(&model, data, &train_idx, &val_idx, derive_seed(seed, &[tag("fold"), f as u64]))?;
            Ok(Fold {
                train_idx,
                val_idx,
                run,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&EpochMetrics) -> f64| MeanStd::of(&folds.iter().map(|x| f(x.run.best())).collect::<Vec<_>>());
    let aggregate = CvAggregate {
        train_loss: pick(|m| m.train_loss),
        train_acc: pick(|m| m.train_acc),
        val_loss: pick(|m| m.val_loss),
        val_acc: pick(|m| m.val_acc),
    };
    Ok(CrossValidation { folds, aggregate })
}
