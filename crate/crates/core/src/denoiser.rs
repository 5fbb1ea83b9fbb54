//! Noise-prediction network: a small U-Net with sinusoidal timestep
//! embedding and an optional class embedding added to it.
//!
//! Layout per resolution level: `res_blocks` residual blocks, then a stride-2
//! convolution (all but the lowest level). The decoder mirrors it with one
//! extra residual block per level consuming the concatenated skip
//! activations, and upsamples by nearest-neighbour repetition followed by a
//! 3x3 convolution. Normalization is group norm throughout, so a sample's
//! output never depends on the rest of its batch.

use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Conv2d, GroupNorm, Init, Linear, NodeId, ParamStore, Tape, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub time_embed_dim: usize,
    /// 0 for an unconditional model.
    pub num_classes: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            time_embed_dim: 256,
            num_classes: 0,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return bad(format!("image_size {} must be a power of two >= 16", self.image_size));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!("in_channels {} must be 1 or 3", self.in_channels));
        }
        if self.base_channels == 0
            || self.time_embed_dim == 0
            || self.res_blocks == 0
            || self.norm_groups == 0
            || self.channel_mults.is_empty()
            || self.channel_mults.contains(&0)
        {
            return bad("denoiser dimensions must be positive".into());
        }
        if !self.base_channels.is_multiple_of(2) {
            return bad("base_channels must be even (sinusoidal embedding width)".into());
        }
        let levels = self.channel_mults.len();
        if !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return bad(format!("image_size {} not divisible by 2^{}", self.image_size, levels - 1));
        }
        Ok(())
    }

    pub fn conditional(&self) -> bool {
        self.num_classes > 0
    }

    pub fn metadata(&self) -> Vec<(String, String)> {
        let mults: Vec<String> = self.channel_mults.iter().map(usize::to_string).collect();
        vec![
            ("image_size".into(), self.image_size.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("channel_mults".into(), mults.join(",")),
            ("res_blocks".into(), self.res_blocks.to_string()),
            ("time_embed_dim".into(), self.time_embed_dim.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("norm_groups".into(), self.norm_groups.to_string()),
        ]
    }

    pub fn from_metadata(meta: &IndexMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        let channel_mults = get("channel_mults")?
            .split(',')
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint("metadata `channel_mults` malformed".into()))?;
        let cfg = Self {
            image_size: num("image_size")?,
            in_channels: num("in_channels")?,
            base_channels: num("base_channels")?,
            channel_mults,
            res_blocks: num("res_blocks")?,
            time_embed_dim: num("time_embed_dim")?,
            num_classes: num("num_classes")?,
            norm_groups: num("norm_groups")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sinusoidal embedding of timestep `t`: `dim / 2` sines followed by
/// `dim / 2` cosines at frequencies `10000^(-i / (dim / 2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding width {dim} must be even and positive")));
    }
    if t == 0 {
        return Err(Error::TimestepOutOfRange { t, max: usize::MAX });
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-(i as f64) / half as f64)).collect();
    let tf = t as f64;
    Ok(freqs
        .iter()
        .map(|f| (tf * f).sin())
        .chain(freqs.iter().map(|f| (tf * f).cos()))
        .collect())
}

/// Anything that predicts the noise in a batch of noised images.
pub trait NoisePredictor<S: Scalar> {
    /// `(channels, height, width)` of one image.
    fn image_shape(&self) -> [usize; 3];

    /// Number of classes the prediction can be conditioned on (0: none).
    fn num_classes(&self) -> usize {
        0
    }

    fn predict_noise(&self, x_t: &Tensor<S>, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor<S>>;
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, temb_dim: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3),
            temb: Linear::new(format!("{name}.temb"), temb_dim, cout),
            norm2: GroupNorm::new(format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<S>, rng: &mut R) {
        self.norm1.init(p);
        self.conv1.init(p, Init::He, rng);
        self.temb.init(p, Init::He, rng);
        self.norm2.init(p);
        self.conv2.init(p, Init::He, rng);
        if let Some(s) = &self.skip {
            s.init(p, Init::He, rng);
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h)?;
        let h = self.conv1.forward(tape, p, h)?;
        let t = self.temb.forward(tape, p, temb)?;
        let h = tape.add_channel_bias(h, t)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Res(Box<ResBlock>),
    /// Stride-2 convolution.
    Down(Conv2d),
    /// Nearest-neighbour 2x, then convolution.
    Up(Conv2d),
}

#[derive(Clone, Debug)]
struct UNet {
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Stage>,
    mid: Vec<ResBlock>,
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

const CLASS_TABLE: &str = "class_embed.table";

impl UNet {
    fn new(cfg: &DenoiserConfig) -> Self {
        let base = cfg.base_channels;
        let temb = cfg.time_embed_dim;
        let groups = cfg.norm_groups;
        let levels = cfg.channel_mults.len();
        let mut down = Vec::new();
        let mut skips = vec![base];
        let mut ch = base;
        for (l, &mult) in cfg.channel_mults.iter().enumerate() {
            let out = base * mult;
            for r in 0..cfg.res_blocks {
                down.push(Stage::Res(Box::new(ResBlock::new(&format!("down.{l}.res.{r}"), ch, out, temb, groups))));
                ch = out;
                skips.push(ch);
            }
            if l + 1 < levels {
                down.push(Stage::Down(Conv2d::new(format!("down.{l}.downsample"), ch, ch, 3).stride(2)));
                skips.push(ch);
            }
        }
        let mid = vec![
            ResBlock::new("mid.0", ch, ch, temb, groups),
            ResBlock::new("mid.1", ch, ch, temb, groups),
        ];
        let mut up = Vec::new();
        for (l, &mult) in cfg.channel_mults.iter().enumerate().rev() {
            let out = base * mult;
            for r in 0..=cfg.res_blocks {
                let skip = skips.pop().expect("one skip per encoder stage");
                up.push(Stage::Res(Box::new(ResBlock::new(&format!("up.{l}.res.{r}"), ch + skip, out, temb, groups))));
                ch = out;
            }
            if l > 0 {
                up.push(Stage::Up(Conv2d::new(format!("up.{l}.upsample"), ch, ch, 3)));
            }
        }
        debug_assert!(skips.is_empty());
        Self {
            time_in: Linear::new("time.in", base, temb),
            time_out: Linear::new("time.out", temb, temb),
            conv_in: Conv2d::new("conv_in", cfg.in_channels, base, 3),
            down,
            mid,
            up,
            norm_out: GroupNorm::new("norm_out", ch, groups),
            conv_out: Conv2d::new("conv_out", ch, cfg.in_channels, 3),
        }
    }

    fn init<S: Scalar, R: Rng + ?Sized>(&self, cfg: &DenoiserConfig, rng: &mut R) -> ParamStore<S> {
        let mut p = ParamStore::new();
        self.time_in.init(&mut p, Init::He, rng);
        self.time_out.init(&mut p, Init::He, rng);
        if cfg.conditional() {
            p.insert(
                CLASS_TABLE,
                Tensor::randn(vec![cfg.num_classes, cfg.time_embed_dim], rng),
            );
        }
        self.conv_in.init(&mut p, Init::He, rng);
        for s in self.down.iter().chain(&self.up) {
            match s {
                Stage::Res(b) => b.init(&mut p, rng),
                Stage::Down(c) | Stage::Up(c) => c.init(&mut p, Init::He, rng),
            }
        }
        for b in &self.mid {
            b.init(&mut p, rng);
        }
        self.norm_out.init(&mut p);
        self.conv_out.init(&mut p, Init::Zeros, rng);
        p
    }
}

/// U-Net weights plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct DenoiserModel<S> {
    config: DenoiserConfig,
    net: UNet,
    pub params: ParamStore<S>,
}

impl<S: Scalar> DenoiserModel<S> {
    /// Fresh model: He-normal weights, zero output convolution, so the
    /// initial prediction is exactly zero.
    pub fn build<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(&config);
        let params = net.init(&config, rng);
        Ok(Self { config, net, params })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(&config);
        let expected = net.init::<f32, _>(&config, &mut crate::rng::rng_for(0, &[]));
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

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Records the network on `tape` for input node `x` of shape
    /// `(N, C, H, W)`, using `params` in place of the model's own weights.
    pub fn forward_with(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        x: NodeId,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<NodeId> {
        let (n, c, h, w) = tape.value(x).dims4("predict_noise")?;
        let size = self.config.image_size;
        if c != self.config.in_channels || h != size || w != size {
            return Err(Error::shape(
                "predict_noise",
                format!("input {:?}, model expects (N, {}, {size}, {size})", [n, c, h, w], self.config.in_channels),
            ));
        }
        if t.len() != n {
            return Err(Error::shape("predict_noise", format!("{} timesteps for batch of {n}", t.len())));
        }
        let base = self.config.base_channels;
        let mut emb = Vec::with_capacity(n * base);
        for &ti in t {
            emb.extend(time_embedding(ti, base)?.into_iter().map(S::from_f64_lossy));
        }
        let emb = tape.constant(Tensor::new(vec![n, base], emb)?);
        let temb = self.net.time_in.forward(tape, params, emb)?;
        let temb = tape.silu(temb)?;
        let mut temb = self.net.time_out.forward(tape, params, temb)?;
        if self.config.conditional() {
            let labels = labels.ok_or_else(|| {
                Error::InvalidArgument("conditional denoiser requires class labels".into())
            })?;
            if labels.len() != n {
                return Err(Error::shape("predict_noise", format!("{} labels for batch of {n}", labels.len())));
            }
            let table = tape.param(CLASS_TABLE, params.get(CLASS_TABLE)?);
            let cls = tape.gather_rows(table, labels)?;
            temb = tape.add(temb, cls)?;
        }
        let temb = tape.silu(temb)?;

        let mut hcur = self.net.conv_in.forward(tape, params, x)?;
        let mut skips = vec![hcur];
        for stage in &self.net.down {
            hcur = match stage {
                Stage::Res(b) => b.forward(tape, params, hcur, temb)?,
                Stage::Down(conv) => conv.forward(tape, params, hcur)?,
                Stage::Up(_) => unreachable!("encoder has no upsampling"),
            };
            skips.push(hcur);
        }
        for b in &self.net.mid {
            hcur = b.forward(tape, params, hcur, temb)?;
        }
        for stage in &self.net.up {
            hcur = match stage {
                Stage::Res(b) => {
                    let skip = skips.pop().expect("skip per decoder block");
                    let joined = tape.concat(&[hcur, skip])?;
                    b.forward(tape, params, joined, temb)?
                }
                Stage::Up(conv) => {
                    let up = tape.upsample_nearest(hcur, 2)?;
                    conv.forward(tape, params, up)?
                }
                Stage::Down(_) => unreachable!("decoder has no downsampling"),
            };
        }
        let hn = self.net.norm_out.forward(tape, params, hcur)?;
        let hn = tape.silu(hn)?;
        self.net.conv_out.forward(tape, params, hn)
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: NodeId, t: &[usize], labels: Option<&[usize]>) -> Result<NodeId> {
        self.forward_with(tape, &self.params, x, t, labels)
    }

    pub fn save(&self, dir: &Path, schedule: &NoiseSchedule, extra: &[(String, String)]) -> Result<()> {
        let mut meta = vec![("model".to_owned(), "denoiser".to_owned())];
        meta.extend(self.config.metadata());
        meta.extend(schedule.metadata());
        meta.extend_from_slice(extra);
        self.params.save(dir, &meta)
    }

    /// Loads a model and the schedule it was trained with.
    pub fn load(dir: &Path) -> Result<(Self, NoiseSchedule, IndexMap<String, String>)> {
        let (params, meta) = ParamStore::load(dir)?;
        if meta.get("model").map(String::as_str) != Some("denoiser") {
            return Err(Error::Checkpoint(format!("{} is not a denoiser checkpoint", dir.display())));
        }
        let config = DenoiserConfig::from_metadata(&meta)?;
        let num = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("metadata `{k}` missing or malformed")))
        };
        let schedule = NoiseSchedule::linear(num("timesteps")? as usize, num("beta_start")?, num("beta_end")?)?;
        Ok((Self::from_params(config, params)?, schedule, meta))
    }
}

impl<S: Scalar> NoisePredictor<S> for DenoiserModel<S> {
    fn image_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.image_size, self.config.image_size]
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_noise(&self, x_t: &Tensor<S>, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, x, t, labels)?;
        Ok(tape.value(out).clone())
    }
}
