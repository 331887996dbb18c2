//! The U-ViT denoiser.
//!
//! A convolutional U-Net whose coarsest level is a stack of transformer
//! blocks. Down path ResBlocks push skip tensors, the up path pops them in
//! reverse. Every branch that feeds a residual (ResBlock second conv, MLP
//! output, attention output) and the output projection start at zero, so a
//! fresh network predicts `v̂ ≡ 0`.
//!
//! Feature maps are NHWC. Conditioning is a single `[B, emb_channels]` vector:
//! the log-SNR embedding plus a class embedding (with a learned null row for
//! unconditional passes).

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::tensor::{ConvGeom, Graph, Scalar, Tensor, Var};

/// Number of sin/cos pairs of the log-SNR featurization.
pub const FOURIER_PAIRS: usize = 32;

/// Resolution-reducing front end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Patching {
    None,
    /// Packed 5/3 DWT with this many levels.
    Dwt(usize),
    SpaceToDepth(usize),
    /// Learned `p×p` stride-`p` conv in, transposed conv out.
    ConvPatch(usize),
}

impl Patching {
    /// Spatial reduction factor.
    pub fn factor(self) -> usize {
        match self {
            Patching::None => 1,
            Patching::Dwt(l) => 1 << l,
            Patching::SpaceToDepth(p) | Patching::ConvPatch(p) => p,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let num = |t: &str| t.parse::<usize>().map_err(|_| Error::Config(format!("bad patching {s:?}")));
        let s = s.trim();
        if s == "none" {
            return Ok(Patching::None);
        }
        if let Some(rest) = s.strip_prefix("dwt_5/3_").or_else(|| s.strip_prefix("dwt_")) {
            return Ok(Patching::Dwt(num(rest)?));
        }
        if let Some(rest) = s.strip_prefix("s2d_") {
            return Ok(Patching::SpaceToDepth(num(rest)?));
        }
        if let Some(rest) = s.strip_prefix("conv_") {
            return Ok(Patching::ConvPatch(num(rest)?));
        }
        Err(Error::Config(format!("unknown patching {s:?} (none, dwt_L, s2d_p, conv_p)")))
    }
}

impl std::fmt::Display for Patching {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Patching::None => write!(f, "none"),
            Patching::Dwt(l) => write!(f, "dwt_{l}"),
            Patching::SpaceToDepth(p) => write!(f, "s2d_{p}"),
            Patching::ConvPatch(p) => write!(f, "conv_{p}"),
        }
    }
}

/// Order of the two residual branches inside a transformer block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockOrder {
    #[default]
    MlpFirst,
    AttentionFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UViTConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub emb_channels: usize,
    pub channel_multiplier: Vec<usize>,
    pub num_res_blocks: Vec<usize>,
    pub num_transformer_blocks: usize,
    pub num_heads: usize,
    pub expansion_factor: usize,
    pub transformer_dropout: f64,
    /// ResBlock dropout.
    pub dropout: f64,
    pub dropout_from_resolution: usize,
    pub patching: Patching,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub block_order: BlockOrder,
}

impl Default for UViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            in_channels: 3,
            base_channels: 32,
            emb_channels: 128,
            channel_multiplier: vec![1, 2, 4],
            num_res_blocks: vec![1, 1],
            num_transformer_blocks: 1,
            num_heads: 4,
            expansion_factor: 4,
            transformer_dropout: 0.2,
            dropout: 0.1,
            dropout_from_resolution: 16,
            patching: Patching::None,
            num_classes: 0,
            block_order: BlockOrder::MlpFirst,
        }
    }
}

impl UViTConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let order = match kv.raw("block_order").unwrap_or("mlp_first") {
            "mlp_first" => BlockOrder::MlpFirst,
            "attention_first" => BlockOrder::AttentionFirst,
            other => return Err(Error::Config(format!("block_order {other:?} (mlp_first, attention_first)"))),
        };
        if let Some(t) = kv.raw("logsnr_input_type") {
            if t != "linear" {
                return Err(Error::Config(format!("logsnr_input_type {t:?}: only linear is supported")));
            }
        }
        let cfg = Self {
            image_size: kv.get("image_size", d.image_size)?,
            in_channels: kv.get("in_channels", d.in_channels)?,
            base_channels: kv.get("base_channels", d.base_channels)?,
            emb_channels: kv.get("emb_channels", d.emb_channels)?,
            channel_multiplier: kv.get_list("channel_multiplier", &d.channel_multiplier)?,
            num_res_blocks: kv.get_list("num_res_blocks", &d.num_res_blocks)?,
            num_transformer_blocks: kv.get("num_transformer_blocks", d.num_transformer_blocks)?,
            num_heads: kv.get("num_heads", d.num_heads)?,
            expansion_factor: kv.get("expansion_factor", d.expansion_factor)?,
            transformer_dropout: kv.get("transformer_dropout", d.transformer_dropout)?,
            dropout: kv.get("dropout", d.dropout)?,
            dropout_from_resolution: kv.get("dropout_from_resolution", d.dropout_from_resolution)?,
            patching: kv.raw("patching_type").map(Patching::parse).transpose()?.unwrap_or(d.patching),
            num_classes: kv.get("num_classes", d.num_classes)?,
            block_order: order,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let order = match self.block_order {
            BlockOrder::MlpFirst => "mlp_first",
            BlockOrder::AttentionFirst => "attention_first",
        };
        format!(
            "image_size = {}\nin_channels = {}\nbase_channels = {}\nemb_channels = {}\nchannel_multiplier = {}\n\
             num_res_blocks = {}\nnum_transformer_blocks = {}\nnum_heads = {}\nexpansion_factor = {}\n\
             transformer_dropout = {:?}\ndropout = {:?}\ndropout_from_resolution = {}\npatching_type = {}\n\
             num_classes = {}\nblock_order = {order}\nlogsnr_input_type = linear\n",
            self.image_size,
            self.in_channels,
            self.base_channels,
            self.emb_channels,
            join_list(&self.channel_multiplier),
            join_list(&self.num_res_blocks),
            self.num_transformer_blocks,
            self.num_heads,
            self.expansion_factor,
            self.transformer_dropout,
            self.dropout,
            self.dropout_from_resolution,
            self.patching,
            self.num_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channel_multiplier.len() != self.num_res_blocks.len() + 1 {
            return err(format!(
                "channel_multiplier needs one more entry than num_res_blocks ({} vs {})",
                self.channel_multiplier.len(),
                self.num_res_blocks.len()
            ));
        }
        if [self.image_size, self.in_channels, self.base_channels, self.emb_channels, self.num_heads, self.expansion_factor]
            .contains(&0)
            || self.channel_multiplier.contains(&0)
        {
            return err("sizes and multipliers must be positive".into());
        }
        for (name, r) in [("transformer_dropout", self.transformer_dropout), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&r) {
                return err(format!("{name} = {r} outside [0, 1)"));
            }
        }
        let f = self.patching.factor();
        match self.patching {
            Patching::Dwt(0) => return err("dwt patching needs at least one level".into()),
            Patching::ConvPatch(p) if !(1..=4).contains(&p) => return err(format!("conv patch size {p} outside 1..=4")),
            Patching::SpaceToDepth(0) => return err("s2d patch size must be positive".into()),
            _ => {}
        }
        let total = f << self.num_res_blocks.len();
        if self.image_size % total != 0 {
            return err(format!(
                "image_size {} is not divisible by patching×2^levels = {total}",
                self.image_size
            ));
        }
        let width = self.transformer_channels();
        if width % self.num_heads != 0 {
            return err(format!("transformer width {width} not divisible by {} heads", self.num_heads));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.num_res_blocks.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier[level]
    }

    pub fn transformer_channels(&self) -> usize {
        self.level_channels(self.levels())
    }

    /// Feature-map side length at `level` (the transformer sits at `levels()`).
    pub fn resolution(&self, level: usize) -> usize {
        self.image_size / self.patching.factor() >> level
    }

    /// Channels of the patched input.
    pub fn patched_channels(&self) -> usize {
        match self.patching {
            Patching::None | Patching::ConvPatch(_) => self.in_channels,
            Patching::Dwt(l) => self.in_channels << (2 * l),
            Patching::SpaceToDepth(p) => self.in_channels * p * p,
        }
    }

    fn dropout_at(&self, resolution: usize, rate: f64) -> f64 {
        if resolution <= self.dropout_from_resolution {
            rate
        } else {
            0.0
        }
    }
}

/// Initializer of one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(−√(6/fan_in), √(6/fan_in))`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// A place where dropout may fire.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutSite {
    pub name: String,
    pub resolution: usize,
    pub rate: f64,
}

fn res_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, e: usize, skip: bool) {
    let mut add = |n: &str, shape: Vec<usize>, init| out.push(ParamSpec { name: format!("{prefix}/{n}"), shape, init });
    add("norm_in/scale", vec![c], Init::Ones);
    add("norm_in/bias", vec![c], Init::Zeros);
    if skip {
        add("norm_skip/scale", vec![c], Init::Ones);
        add("norm_skip/bias", vec![c], Init::Zeros);
    }
    add("conv1/kernel", vec![3, 3, c, c], Init::FanIn(9 * c));
    add("conv1/bias", vec![c], Init::Zeros);
    add("film/kernel", vec![e, 2 * c], Init::FanIn(e));
    add("film/bias", vec![2 * c], Init::Zeros);
    add("norm_mid/scale", vec![c], Init::Ones);
    add("norm_mid/bias", vec![c], Init::Zeros);
    add("conv2/kernel", vec![3, 3, c, c], Init::Zeros);
    add("conv2/bias", vec![c], Init::Zeros);
}

fn transformer_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, e: usize, heads: usize, expansion: usize) {
    let d = c / heads;
    let h = expansion * c;
    let mut add = |n: &str, shape: Vec<usize>, init| out.push(ParamSpec { name: format!("{prefix}/{n}"), shape, init });
    add("mlp/norm/scale", vec![c], Init::Ones);
    add("mlp/dense1/kernel", vec![c, h], Init::FanIn(c));
    add("mlp/dense1/bias", vec![h], Init::Zeros);
    add("mlp/film_scale/kernel", vec![e, h], Init::FanIn(e));
    add("mlp/film_scale/bias", vec![h], Init::Zeros);
    add("mlp/film_shift/kernel", vec![e, h], Init::FanIn(e));
    add("mlp/film_shift/bias", vec![h], Init::Zeros);
    add("mlp/dense2/kernel", vec![h, c], Init::Zeros);
    add("mlp/dense2/bias", vec![c], Init::Zeros);
    add("attn/norm/scale", vec![c], Init::Ones);
    for qkv in ["q", "k", "v"] {
        add(&format!("attn/{qkv}/kernel"), vec![c, c], Init::FanIn(c));
        add(&format!("attn/{qkv}/bias"), vec![c], Init::Zeros);
    }
    for qk in ["q_norm", "k_norm"] {
        add(&format!("attn/{qk}/scale"), vec![d], Init::Ones);
        add(&format!("attn/{qk}/bias"), vec![d], Init::Zeros);
    }
    add("attn/out/kernel", vec![c, c], Init::Zeros);
    add("attn/out/bias", vec![c], Init::Zeros);
}

fn level_name(path: &str, level: usize, block: usize) -> String {
    format!("{path}{level}/res{block}")
}

/// The network: configuration plus the log-SNR range its embedding spans.
#[derive(Clone, Debug, PartialEq)]
pub struct UViT {
    pub cfg: UViTConfig,
    /// `(min, max)` attained by the schedule the model is trained with.
    pub logsnr_range: (f64, f64),
}

/// Structural record of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub skips_pushed: usize,
    pub skips_popped: usize,
    /// Sites where dropout with a positive rate was requested.
    pub dropout_applied: Vec<DropoutSite>,
}

/// Per-example conditioning of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Cond<'a> {
    pub logsnr: &'a [f64],
    /// `None` selects the null class row.
    pub classes: &'a [Option<usize>],
}

impl UViT {
    pub fn new(cfg: UViTConfig, logsnr_range: (f64, f64)) -> Result<Self> {
        cfg.validate()?;
        let (lo, hi) = logsnr_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "linear log-SNR input needs finite schedule endpoints with min < max, got ({lo}, {hi})"
            )));
        }
        Ok(Self { cfg, logsnr_range })
    }

    /// Every parameter in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.cfg;
        let e = cfg.emb_channels;
        let mut out = Vec::new();
        let spec = |name: &str, shape: Vec<usize>, init| ParamSpec { name: name.into(), shape, init };

        out.push(spec("cond/logsnr/dense1/kernel", vec![2 * FOURIER_PAIRS, e], Init::FanIn(2 * FOURIER_PAIRS)));
        out.push(spec("cond/logsnr/dense1/bias", vec![e], Init::Zeros));
        out.push(spec("cond/logsnr/dense2/kernel", vec![e, e], Init::FanIn(e)));
        out.push(spec("cond/logsnr/dense2/bias", vec![e], Init::Zeros));
        if cfg.num_classes > 0 {
            out.push(spec("cond/class_table", vec![cfg.num_classes + 1, e], Init::Normal(1.0)));
        }

        let c0 = cfg.level_channels(0);
        let cp = cfg.patched_channels();
        let ek = match cfg.patching {
            Patching::ConvPatch(q) => q,
            _ => 3,
        };
        let ok = 3;
        out.push(spec("embed/kernel", vec![ek, ek, cp, c0], Init::FanIn(ek * ek * cp)));
        out.push(spec("embed/bias", vec![c0], Init::Zeros));

        for level in 0..cfg.levels() {
            let c = cfg.level_channels(level);
            for block in 0..cfg.num_res_blocks[level] {
                res_block_specs(&mut out, &level_name("down", level, block), c, e, false);
            }
            let cn = cfg.level_channels(level + 1);
            out.push(spec(&format!("down{level}/sample/kernel"), vec![2, 2, c, cn], Init::FanIn(4 * c)));
            out.push(spec(&format!("down{level}/sample/bias"), vec![cn], Init::Zeros));
        }

        let ct = cfg.transformer_channels();
        let tokens = cfg.resolution(cfg.levels()).pow(2);
        out.push(spec("pos_emb", vec![tokens, ct], Init::Normal(0.01)));
        for b in 0..cfg.num_transformer_blocks {
            transformer_specs(&mut out, &format!("transformer{b}"), ct, e, cfg.num_heads, cfg.expansion_factor);
        }

        for level in (0..cfg.levels()).rev() {
            let c = cfg.level_channels(level);
            let cn = cfg.level_channels(level + 1);
            // transposed-conv kernel layout is [kh, kw, out, in]; each output
            // pixel sees exactly one tap per input channel
            out.push(spec(&format!("up{level}/sample/kernel"), vec![2, 2, c, cn], Init::FanIn(cn)));
            out.push(spec(&format!("up{level}/sample/bias"), vec![c], Init::Zeros));
            for block in 0..cfg.num_res_blocks[level] {
                res_block_specs(&mut out, &level_name("up", level, block), c, e, true);
            }
        }

        let out_kernel = match cfg.patching {
            Patching::ConvPatch(q) => vec![q, q, cp, c0],
            _ => vec![ok, ok, c0, cp],
        };
        out.push(spec("out/kernel", out_kernel, Init::Zeros));
        out.push(spec("out/bias", vec![cp], Init::Zeros));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Every dropout site with its resolution and effective rate.
    pub fn dropout_sites(&self) -> Vec<DropoutSite> {
        let cfg = &self.cfg;
        let mut out = Vec::new();
        for level in 0..cfg.levels() {
            let r = cfg.resolution(level);
            for block in 0..cfg.num_res_blocks[level] {
                out.push(DropoutSite {
                    name: level_name("down", level, block),
                    resolution: r,
                    rate: cfg.dropout_at(r, cfg.dropout),
                });
            }
        }
        let r = cfg.resolution(cfg.levels());
        for b in 0..cfg.num_transformer_blocks {
            out.push(DropoutSite {
                name: format!("transformer{b}"),
                resolution: r,
                rate: cfg.dropout_at(r, cfg.transformer_dropout),
            });
        }
        for level in (0..cfg.levels()).rev() {
            let r = cfg.resolution(level);
            for block in 0..cfg.num_res_blocks[level] {
                out.push(DropoutSite {
                    name: level_name("up", level, block),
                    resolution: r,
                    rate: cfg.dropout_at(r, cfg.dropout),
                });
            }
        }
        out
    }

    /// Fresh parameters; each tensor draws from its own named stream.
    pub fn init(&self, seed: u64) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        for s in self.param_specs() {
            let mut r = rng::stream(seed, &format!("init/{}", s.name), 0);
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::FanIn(fan_in) => {
                    let lim = (6.0 / fan_in as f64).sqrt();
                    let u = Uniform::new_inclusive(-lim, lim).expect("finite limit");
                    Tensor::from_fn(&s.shape, |_| u.sample(&mut r) as f32)
                }
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&s.shape, |_| n.sample(&mut r) as f32)
                }
            };
            p.insert(s.name, t);
        }
        p
    }

    /// Maps log-SNR onto `[0, 1]` over the attained range.
    pub fn logsnr_to_unit(&self, logsnr: f64) -> Result<f64> {
        let (lo, hi) = self.logsnr_range;
        let slack = 1e-6;
        if !(logsnr >= lo - slack && logsnr <= hi + slack) {
            return Err(Error::Domain(format!("log-SNR {logsnr} outside the schedule range [{lo}, {hi}]")));
        }
        Ok(((logsnr - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    /// Interleaved `sin, cos` of `2π·2^(k/4)·u` for `k < 32`.
    pub fn fourier_features(&self, logsnr: &[f64]) -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(logsnr.len() * 2 * FOURIER_PAIRS);
        for &l in logsnr {
            let u = self.logsnr_to_unit(l)?;
            for k in 0..FOURIER_PAIRS {
                let a = 2.0 * PI * 2f64.powf(k as f64 / 4.0) * u;
                data.push(a.sin());
                data.push(a.cos());
            }
        }
        Tensor::from_vec(&[logsnr.len(), 2 * FOURIER_PAIRS], data)
    }

    /// `[B, emb_channels]` log-SNR embedding.
    pub fn logsnr_embedding<T: Scalar>(&self, g: &Graph<T>, p: &Bound, logsnr: &[f64]) -> Result<Var> {
        let feats = g.constant(self.fourier_features(logsnr)?.cast());
        let h = g.dense(feats, p.get("cond/logsnr/dense1/kernel")?, Some(p.get("cond/logsnr/dense1/bias")?))?;
        let h = g.swish(h);
        g.dense(h, p.get("cond/logsnr/dense2/kernel")?, Some(p.get("cond/logsnr/dense2/bias")?))
    }

    /// Full conditioning vector: log-SNR embedding plus class embedding.
    pub fn conditioning<T: Scalar>(&self, g: &Graph<T>, p: &Bound, cond: Cond<'_>) -> Result<Var> {
        if cond.logsnr.len() != cond.classes.len() {
            return Err(Error::Shape(format!("{} log-SNRs for {} classes", cond.logsnr.len(), cond.classes.len())));
        }
        let emb = self.logsnr_embedding(g, p, cond.logsnr)?;
        if self.cfg.num_classes == 0 {
            if let Some(id) = cond.classes.iter().flatten().next() {
                return Err(Error::UnknownClass { id: *id, num_classes: 0 });
            }
            return Ok(emb);
        }
        let k = self.cfg.num_classes;
        let ids = cond
            .classes
            .iter()
            .map(|c| match *c {
                None => Ok(k),
                Some(id) if id < k => Ok(id),
                Some(id) => Err(Error::UnknownClass { id, num_classes: k }),
            })
            .collect::<Result<Vec<_>>>()?;
        let class_emb = g.gather(p.get("cond/class_table")?, &ids)?;
        g.add(emb, class_emb)
    }

    /// `v̂` for a batch `x[B, H, W, C]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var, cond: Cond<'_>) -> Result<Var> {
        Ok(self.forward_traced(g, p, x, cond)?.0)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var, cond: Cond<'_>) -> Result<(Var, Trace)> {
        let cfg = &self.cfg;
        let shape = g.shape(x);
        let &[b, h, w, c] = shape.as_slice() else {
            return Err(Error::Shape(format!("input must be [B, H, W, C], got {shape:?}")));
        };
        if h != cfg.image_size || w != cfg.image_size || c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "input {h}×{w}×{c} does not match the configured {0}×{0}×{1}",
                cfg.image_size, cfg.in_channels
            )));
        }
        if cond.logsnr.len() != b {
            return Err(Error::Shape(format!("{} conditioning rows for batch {b}", cond.logsnr.len())));
        }
        let mut trace = Trace::default();
        let emb = self.conditioning(g, p, cond)?;

        let (front, embed_geom) = match cfg.patching {
            Patching::None => (x, ConvGeom::same(1)),
            Patching::Dwt(l) => (g.dwt53(x, l)?, ConvGeom::same(1)),
            Patching::SpaceToDepth(q) => (g.space_to_depth(x, q)?, ConvGeom::same(1)),
            Patching::ConvPatch(q) => (x, ConvGeom::valid(q)),
        };
        let mut hcur = g.conv2d(front, p.get("embed/kernel")?, Some(p.get("embed/bias")?), embed_geom)?;

        let mut skips = Vec::new();
        for level in 0..cfg.levels() {
            let r = cfg.resolution(level);
            for block in 0..cfg.num_res_blocks[level] {
                let name = level_name("down", level, block);
                let rate = cfg.dropout_at(r, cfg.dropout);
                hcur = resnet_block(g, p, &name, hcur, emb, None, rate, &mut trace, r)?;
                skips.push(hcur);
                trace.skips_pushed += 1;
            }
            hcur = g.conv2d(
                hcur,
                p.get(&format!("down{level}/sample/kernel"))?,
                Some(p.get(&format!("down{level}/sample/bias"))?),
                ConvGeom::valid(2),
            )?;
        }

        let r = cfg.resolution(cfg.levels());
        let ct = cfg.transformer_channels();
        let mut tokens = g.reshape(hcur, &[b, r * r, ct])?;
        tokens = g.add(tokens, p.get("pos_emb")?)?;
        let rate = cfg.dropout_at(r, cfg.transformer_dropout);
        for blk in 0..cfg.num_transformer_blocks {
            let name = format!("transformer{blk}");
            if rate > 0.0 {
                trace.dropout_applied.push(DropoutSite { name: name.clone(), resolution: r, rate });
            }
            tokens = transformer_block(g, p, &name, tokens, emb, cfg.num_heads, rate, cfg.block_order)?;
        }
        hcur = g.reshape(tokens, &[b, r, r, ct])?;

        for level in (0..cfg.levels()).rev() {
            hcur = g.conv2d_transpose(
                hcur,
                p.get(&format!("up{level}/sample/kernel"))?,
                Some(p.get(&format!("up{level}/sample/bias"))?),
                ConvGeom::valid(2),
            )?;
            let r = cfg.resolution(level);
            for block in 0..cfg.num_res_blocks[level] {
                let skip = skips.pop().ok_or_else(|| Error::Shape("skip stack exhausted".into()))?;
                trace.skips_popped += 1;
                let name = level_name("up", level, block);
                let rate = cfg.dropout_at(r, cfg.dropout);
                hcur = resnet_block(g, p, &name, hcur, emb, Some(skip), rate, &mut trace, r)?;
            }
        }
        if !skips.is_empty() {
            return Err(Error::Shape(format!("{} skip tensors left unconsumed", skips.len())));
        }

        let (kernel, bias) = (p.get("out/kernel")?, Some(p.get("out/bias")?));
        let out = match cfg.patching {
            Patching::None => g.conv2d(hcur, kernel, bias, ConvGeom::same(1))?,
            Patching::Dwt(l) => {
                let y = g.conv2d(hcur, kernel, bias, ConvGeom::same(1))?;
                g.inverse_dwt53(y, l)?
            }
            Patching::SpaceToDepth(q) => {
                let y = g.conv2d(hcur, kernel, bias, ConvGeom::same(1))?;
                g.depth_to_space(y, q)?
            }
            Patching::ConvPatch(q) => g.conv2d_transpose(hcur, kernel, bias, ConvGeom::valid(q))?,
        };
        Ok((out, trace))
    }

    /// Inference convenience: `v̂` with parameters held constant.
    pub fn predict(&self, params: &ParamSet<f32>, x: &Tensor<f32>, cond: Cond<'_>) -> Result<Tensor<f32>> {
        let g = Graph::<f32>::new();
        let p = params.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&g, &p, xv, cond)?;
        let v = g.value(out).clone();
        Ok(v)
    }
}

/// `[B, 2C]` FiLM projection split into `[B, 1, 1, C]`-style scale and shift
/// broadcastable against a tensor of `rank`.
fn film<T: Scalar>(g: &Graph<T>, emb: Var, kernel: Var, bias: Var, c: usize, rank: usize) -> Result<(Var, Var)> {
    let e = g.dense(emb, kernel, Some(bias))?;
    let b = g.shape(emb)[0];
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, rank - 2));
    shape.push(c);
    let scale = g.reshape(g.slice_last(e, 0, c)?, &shape)?;
    let shift = g.reshape(g.slice_last(e, c, c)?, &shape)?;
    Ok((scale, shift))
}

/// ResBlock with optional skip merge and FiLM conditioning.
#[allow(clippy::too_many_arguments)]
pub fn resnet_block<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    emb: Var,
    skip: Option<Var>,
    dropout: f64,
    trace: &mut Trace,
    resolution: usize,
) -> Result<Var> {
    let get = |n: &str| p.get(&format!("{prefix}/{n}"));
    let c = *g.shape(x).last().unwrap();
    let mut h = g.normalize(x, get("norm_in/scale")?, Some(get("norm_in/bias")?))?;
    if let Some(s) = skip {
        if g.shape(s) != g.shape(x) {
            return Err(Error::Shape(format!("{prefix}: skip {:?} vs input {:?}", g.shape(s), g.shape(x))));
        }
        let s = g.normalize(s, get("norm_skip/scale")?, Some(get("norm_skip/bias")?))?;
        h = g.scale(g.add(h, s)?, T::of(std::f64::consts::FRAC_1_SQRT_2));
    }
    h = g.swish(h);
    h = g.conv2d(h, get("conv1/kernel")?, Some(get("conv1/bias")?), ConvGeom::same(1))?;
    let (scale, shift) = film(g, emb, get("film/kernel")?, get("film/bias")?, c, 4)?;
    h = g.normalize(h, get("norm_mid/scale")?, Some(get("norm_mid/bias")?))?;
    h = g.scale_shift(h, scale, shift)?;
    h = g.swish(h);
    if dropout > 0.0 {
        trace.dropout_applied.push(DropoutSite { name: prefix.to_string(), resolution, rate: dropout });
    }
    h = g.dropout(h, dropout)?;
    h = g.conv2d(h, get("conv2/kernel")?, Some(get("conv2/bias")?), ConvGeom::same(1))?;
    g.add(x, h)
}

/// MLP branch of a transformer block (the caller adds the residual).
pub fn mlp_block<T: Scalar>(g: &Graph<T>, p: &Bound, prefix: &str, x: Var, emb: Var, dropout: f64) -> Result<Var> {
    let get = |n: &str| p.get(&format!("{prefix}/mlp/{n}"));
    let xn = g.normalize(x, get("norm/scale")?, None)?;
    let h = g.dense(xn, get("dense1/kernel")?, Some(get("dense1/bias")?))?;
    let hidden = *g.shape(h).last().unwrap();
    let b = g.shape(emb)[0];
    let scale = g.reshape(g.dense(emb, get("film_scale/kernel")?, Some(get("film_scale/bias")?))?, &[b, 1, hidden])?;
    let shift = g.reshape(g.dense(emb, get("film_shift/kernel")?, Some(get("film_shift/bias")?))?, &[b, 1, hidden])?;
    let h = g.swish(h);
    let h = g.scale_shift(h, scale, shift)?;
    let h = g.dropout(h, dropout)?;
    g.dense(h, get("dense2/kernel")?, Some(get("dense2/bias")?))
}

/// Multi-head self-attention branch (the caller adds the residual).
pub fn self_attention<T: Scalar>(g: &Graph<T>, p: &Bound, prefix: &str, x: Var, num_heads: usize) -> Result<Var> {
    let get = |n: &str| p.get(&format!("{prefix}/attn/{n}"));
    let shape = g.shape(x);
    let &[b, n, c] = shape.as_slice() else {
        return Err(Error::Shape(format!("attention input must be [B, N, C], got {shape:?}")));
    };
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::Divisibility(format!("{c} channels over {num_heads} heads")));
    }
    let d = c / num_heads;
    let xn = g.normalize(x, get("norm/scale")?, None)?;
    let proj = |name: &str| -> Result<Var> {
        let y = g.dense(xn, get(&format!("{name}/kernel"))?, Some(get(&format!("{name}/bias"))?))?;
        g.reshape(y, &[b, n, num_heads, d])
    };
    let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
    let q = g.normalize(q, get("q_norm/scale")?, Some(get("q_norm/bias")?))?;
    let k = g.normalize(k, get("k_norm/scale")?, Some(get("k_norm/bias")?))?;
    let q = g.scale(q, T::of((d as f64).powf(-0.5)));
    let weights = g.softmax(g.attn_scores(q, k)?);
    let vals = g.reshape(g.attn_apply(weights, v)?, &[b, n, c])?;
    g.dense(vals, get("out/kernel")?, Some(get("out/bias")?))
}

/// Residual MLP and residual attention, in the configured order.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    emb: Var,
    num_heads: usize,
    dropout: f64,
    order: BlockOrder,
) -> Result<Var> {
    let mlp = |x: Var| -> Result<Var> { g.add(x, mlp_block(g, p, prefix, x, emb, dropout)?) };
    let attn = |x: Var| -> Result<Var> { g.add(x, self_attention(g, p, prefix, x, num_heads)?) };
    match order {
        BlockOrder::MlpFirst => attn(mlp(x)?),
        BlockOrder::AttentionFirst => mlp(attn(x)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(patching: Patching) -> UViT {
        let cfg = UViTConfig {
            image_size: 8,
            in_channels: 1,
            base_channels: 4,
            emb_channels: 8,
            channel_multiplier: vec![1, 2],
            num_res_blocks: vec![1],
            num_transformer_blocks: 1,
            num_heads: 2,
            num_classes: 2,
            patching,
            ..UViTConfig::default()
        };
        UViT::new(cfg, (-15.0, 15.0)).unwrap()
    }

    #[test]
    fn init_predicts_zero() {
        let m = tiny(Patching::None);
        let p = m.init(0);
        let x = rng::normal(&mut rng::stream(0, "x", 0), &[2, 8, 8, 1]);
        let v = m.predict(&p, &x, Cond { logsnr: &[0.0, 3.0], classes: &[Some(1), None] }).unwrap();
        assert_eq!(v.shape(), &[2, 8, 8, 1]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Patching::None).cfg;
        c.channel_multiplier = vec![1];
        assert!(c.validate().is_err());
        let mut c = tiny(Patching::None).cfg;
        c.image_size = 9;
        assert!(c.validate().is_err());
        assert!(UViT::new(tiny(Patching::None).cfg, (f64::NEG_INFINITY, f64::INFINITY)).is_err());
    }

    #[test]
    fn embedding_endpoints() {
        let m = tiny(Patching::None);
        assert_eq!(m.logsnr_to_unit(-15.0).unwrap(), 0.0);
        assert_eq!(m.logsnr_to_unit(15.0).unwrap(), 1.0);
        assert!(m.logsnr_to_unit(15.1).is_err());
        let f = m.fourier_features(&[-15.0]).unwrap();
        assert_eq!(f.shape(), &[1, 64]);
        assert_eq!(f.data()[0], 0.0);
        assert_eq!(f.data()[1], 1.0);
    }

    #[test]
    fn unknown_class() {
        let m = tiny(Patching::None);
        let p = m.init(0);
        let x = Tensor::zeros(&[1, 8, 8, 1]);
        let r = m.predict(&p, &x, Cond { logsnr: &[0.0], classes: &[Some(2)] });
        assert!(matches!(r, Err(Error::UnknownClass { id: 2, num_classes: 2 })));
    }

    #[test]
    fn patching_parse() {
        assert_eq!(Patching::parse("dwt_5/3_2").unwrap(), Patching::Dwt(2));
        assert_eq!(Patching::parse("dwt_1").unwrap(), Patching::Dwt(1));
        assert_eq!(Patching::parse("s2d_2").unwrap(), Patching::SpaceToDepth(2));
        assert_eq!(Patching::parse("none").unwrap(), Patching::None);
        assert!(Patching::parse("fft").is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = tiny(Patching::Dwt(1)).cfg;
        let kv = KeyValues::parse(&cfg.to_kv_text()).unwrap();
        assert_eq!(UViTConfig::from_kv(&kv).unwrap(), cfg);
        kv.ensure_consumed().unwrap();
    }
}
