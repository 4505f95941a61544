//! Training configuration as flat `key = value` text.
//!
//! `#` starts a comment; blank lines are skipped. Every key is optional and
//! falls back to its default, but unknown or repeated keys are errors.
//! [`TrainConfig::to_text`] writes every key in a fixed order, so the text
//! form is canonical and parses back to an equal value.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mesh::TemplateConfig;
use crate::model::{AlignmentMode, FusionVariant, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Smoothness weight, applied only when `smooth_loss` is on.
    pub mu: f64,
    pub lambda: [f64; 4],
    pub eta: [f64; 3],
    pub smooth_loss: bool,

    /// Views in the dataset rig (`N`).
    pub max_views: usize,
    /// Views used for training and evaluation (the first `n_views`).
    pub n_views: usize,
    pub image_size: usize,
    pub backbone_channels: [usize; 4],
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub fusion_decoder_layers: usize,
    pub dropout: f64,
    pub decoder_heads: usize,
    pub decoder_dropout: f64,
    pub m_full: usize,
    pub m_sub1: usize,
    pub m_sub2: usize,

    pub fusion_variant: FusionVariant,
    pub alignment: AlignmentMode,
    pub template_replacement: bool,
    pub mask_fraction_max: f64,
    pub learnable_upsampling: bool,
    /// Fraction of a dataset held out for testing by `ablate` when no
    /// separate test set is given.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 100,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            mu: 0.1,
            lambda: [1.0; 4],
            eta: [1.0; 3],
            smooth_loss: false,
            max_views: 4,
            n_views: 4,
            image_size: 112,
            backbone_channels: [16, 32, 64, 128],
            d: 64,
            heads: 8,
            encoder_layers: 1,
            fusion_decoder_layers: 1,
            dropout: 0.1,
            decoder_heads: 1,
            decoder_dropout: 0.1,
            m_full: 400,
            m_sub1: 100,
            m_sub2: 25,
            fusion_variant: FusionVariant::Mmt,
            alignment: AlignmentMode::ThreeD2D,
            template_replacement: false,
            mask_fraction_max: 0.3,
            learnable_upsampling: false,
            holdout: 0.2,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<const N: usize, T: std::str::FromStr + Copy + Default>(key: &str, value: &str) -> Result<[T; N]> {
    let items: Vec<&str> = value.split(',').map(str::trim).collect();
    if items.len() != N {
        return Err(Error::Config(format!("{key}: expected {N} comma-separated values, got {value:?}")));
    }
    let mut out = [T::default(); N];
    for (o, s) in out.iter_mut().zip(items) {
        *o = parse(key, s)?;
    }
    Ok(out)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// One table drives the parser, the serializer and the key list.
macro_rules! keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => keys!(@parse self, $key, $kind, value),)*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical text form: every key, one per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), keys!(@show self, $key, $kind));)*
                s
            }
        }
    };
    (@parse $s:ident, $key:ident, scalar, $v:ident) => { $s.$key = parse(stringify!($key), $v)? };
    (@parse $s:ident, $key:ident, flag, $v:ident) => { $s.$key = parse_bool(stringify!($key), $v)? };
    (@parse $s:ident, $key:ident, list, $v:ident) => { $s.$key = parse_list(stringify!($key), $v)? };
    (@show $s:ident, $key:ident, list) => { join(&$s.$key) };
    (@show $s:ident, $key:ident, $kind:ident) => { $s.$key };
}

keys! {
    lr: scalar,
    lr_decay_factor: scalar,
    lr_decay_every: scalar,
    epochs: scalar,
    batch_size: scalar,
    seed: scalar,
    adam_beta1: scalar,
    adam_beta2: scalar,
    adam_eps: scalar,
    alpha: scalar,
    beta: scalar,
    gamma: scalar,
    mu: scalar,
    lambda: list,
    eta: list,
    smooth_loss: flag,
    max_views: scalar,
    n_views: scalar,
    image_size: scalar,
    backbone_channels: list,
    d: scalar,
    heads: scalar,
    encoder_layers: scalar,
    fusion_decoder_layers: scalar,
    dropout: scalar,
    decoder_heads: scalar,
    decoder_dropout: scalar,
    m_full: scalar,
    m_sub1: scalar,
    m_sub2: scalar,
    fusion_variant: scalar,
    alignment: scalar,
    template_replacement: flag,
    mask_fraction_max: scalar,
    learnable_upsampling: flag,
    holdout: scalar,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        for (k, v) in [
            ("lr_decay_every", self.lr_decay_every),
            ("batch_size", self.batch_size),
            ("max_views", self.max_views),
            ("n_views", self.n_views),
            ("d", self.d),
            ("heads", self.heads),
            ("decoder_heads", self.decoder_heads),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.n_views > self.max_views {
            return bad(format!("n_views {} exceeds max_views {}", self.n_views, self.max_views));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.image_size != 16 * (self.image_size / 16) || self.image_size == 0 {
            return bad(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        for (k, v) in [("dropout", self.dropout), ("decoder_dropout", self.decoder_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        for (k, v) in [("mask_fraction_max", self.mask_fraction_max), ("holdout", self.holdout)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1], got {v}"));
            }
        }
        if self.backbone_channels.contains(&0) {
            return bad("backbone_channels must be positive".into());
        }
        self.template().validate()?;
        self.weights().validate()?;
        self.decoder_config().widths.iter().try_for_each(|&w| {
            if w == 0 || w % self.decoder_heads != 0 {
                bad(format!("decoder width {w} is not a positive multiple of decoder_heads"))
            } else {
                Ok(())
            }
        })
    }

    /// Loss weights with `mu` zeroed unless the smoothness loss is on.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            mu: if self.smooth_loss { self.mu } else { 0.0 },
            lambda: self.lambda,
            eta: self.eta,
        }
    }

    pub fn template(&self) -> TemplateConfig {
        TemplateConfig {
            m_full: self.m_full,
            m_sub1: self.m_sub1,
            m_sub2: self.m_sub2,
        }
    }

    fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            heads: self.decoder_heads,
            dropout: self.decoder_dropout,
            mask_fraction_max: self.mask_fraction_max,
            learnable_upsampling: self.learnable_upsampling,
            ..DecoderConfig::progressive(self.d)
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: self.image_size,
                channels: self.backbone_channels.to_vec(),
                ..BackboneConfig::default()
            },
            d: self.d,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.fusion_decoder_layers,
            dropout: self.dropout,
            max_views: self.max_views,
            fusion: self.fusion_variant,
            template_replacement: self.template_replacement,
            decoder: self.decoder_config(),
        }
    }

    /// `lr₀ · decay^⌊epoch / every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}
