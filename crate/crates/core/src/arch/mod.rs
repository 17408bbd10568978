//! The segmentation network: CofRes encoder, channel attention on skip
//! features, attention-recovery decoder, 1×1 head with a sigmoid.

mod attention;
mod baseline;
mod cofres;
mod recovery;

pub use attention::{ca_forward, channel_dependency, AttentionOutput, ChannelAttention};
pub use baseline::{DoubleConv, UNetUp};
pub use cofres::CofRes;
pub use recovery::{ArLstm, ArUpsample, ResidualBlock};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Initializer, ParamStore};
use crate::tensor::Real;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    CofRes,
    /// Two conv/BN/ReLU layers, no residual.
    Plain,
    /// Two conv/BN/ReLU layers plus a residual sum.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    AttentionRecovery,
    UNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSites {
    None,
    Bottom,
    AllSkips,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
            fn code(self) -> u8 {
                [$($ty::$variant),*].iter().position(|v| *v == self).unwrap() as u8
            }
            fn from_code(code: u8) -> Option<Self> {
                [$($ty::$variant),*].get(code as usize).copied()
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        "unknown {} '{s}', expected one of: {}",
                        stringify!($ty),
                        [$($name),*].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(EncoderKind { CofRes => "cofres", Plain => "plain", Residual => "residual" });
named_enum!(DecoderKind { AttentionRecovery => "ar", UNet => "unet" });
named_enum!(AttentionSites { None => "none", Bottom => "bottom", AllSkips => "all" });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub attention: AttentionSites,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 4,
            base_channels: 64,
            in_channels: 1,
            out_channels: 1,
            encoder: EncoderKind::CofRes,
            decoder: DecoderKind::AttentionRecovery,
            attention: AttentionSites::Bottom,
        }
    }
}

impl NetworkConfig {
    /// Two levels, eight base channels.
    pub fn desk() -> Self {
        NetworkConfig {
            levels: 2,
            base_channels: 8,
            ..Default::default()
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("in/out channels must be positive".into()));
        }
        if self.levels > 16 {
            return Err(Error::Config(format!(
                "levels {} is unreasonably deep",
                self.levels
            )));
        }
        Ok(())
    }

    /// Checks that every level sees even spatial dims.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        for level in 0..self.levels {
            let (lh, lw) = (h >> level, w >> level);
            if lh % 2 != 0 || lw % 2 != 0 || lh == 0 || lw == 0 {
                return Err(Error::shape(format!(
                    "input {h}x{w} is not divisible by 2^{}: level {level} would see {lh}x{lw}",
                    self.levels
                )));
            }
        }
        Ok(())
    }

    /// Compact numeric encoding, stored alongside checkpoints.
    pub fn to_codes(&self) -> Vec<u32> {
        vec![
            self.levels as u32,
            self.base_channels as u32,
            self.in_channels as u32,
            self.out_channels as u32,
            self.encoder.code() as u32,
            self.decoder.code() as u32,
            self.attention.code() as u32,
        ]
    }

    pub fn from_codes(codes: &[u32]) -> Result<Self> {
        let bad = || Error::Config(format!("invalid network description {codes:?}"));
        if codes.len() != 7 {
            return Err(bad());
        }
        let kind = |i: usize| u8::try_from(codes[i]).map_err(|_| bad());
        let cfg = NetworkConfig {
            levels: codes[0] as usize,
            base_channels: codes[1] as usize,
            in_channels: codes[2] as usize,
            out_channels: codes[3] as usize,
            encoder: EncoderKind::from_code(kind(4)?).ok_or_else(bad)?,
            decoder: DecoderKind::from_code(kind(5)?).ok_or_else(bad)?,
            attention: AttentionSites::from_code(kind(6)?).ok_or_else(bad)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    CofRes(CofRes),
    Double(DoubleConv),
}

impl EncoderBlock {
    fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        match self {
            EncoderBlock::CofRes(b) => b.forward(ctx, x),
            EncoderBlock::Double(b) => b.forward(ctx, x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum DecoderBlock {
    Recovery { up: ArUpsample, lstm: ArLstm },
    UNet(UNetUp),
}

impl DecoderBlock {
    fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        deep: Var<'t, T>,
        skip: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            DecoderBlock::Recovery { up, lstm } => {
                let up = up.forward(ctx, deep)?;
                lstm.forward(ctx, skip, up)
            }
            DecoderBlock::UNet(b) => b.forward(ctx, deep, skip),
        }
    }
}

/// A built network. Holds parameter names only; values live in the
/// [`ParamStore`] created alongside it.
#[derive(Clone, Debug)]
pub struct RaVNet {
    pub cfg: NetworkConfig,
    pub encoders: Vec<EncoderBlock>,
    /// One entry per level, `Some` where attention is applied to the skip.
    pub attention: Vec<Option<ChannelAttention>>,
    /// Indexed by level; run from the deepest level up.
    pub decoders: Vec<DecoderBlock>,
    pub head: Conv2d,
}

impl RaVNet {
    /// Builds the network and a freshly initialized parameter store.
    /// Identical `(cfg, seed)` give bit-identical parameters.
    pub fn init<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::build(cfg, &mut store, &mut Initializer::new(seed))?;
        Ok((net, store))
    }

    pub fn build<T: Real>(
        cfg: &NetworkConfig,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut encoders = Vec::with_capacity(cfg.levels);
        let mut attention = Vec::with_capacity(cfg.levels);
        let mut c_in = cfg.in_channels;
        for level in 0..cfg.levels {
            let target = cfg.channels_at(level);
            let name = format!("enc{level}");
            encoders.push(match cfg.encoder {
                EncoderKind::CofRes => {
                    EncoderBlock::CofRes(CofRes::new(store, init, &name, c_in, target)?)
                }
                EncoderKind::Plain => {
                    EncoderBlock::Double(DoubleConv::new(store, init, &name, c_in, target, false)?)
                }
                EncoderKind::Residual => {
                    EncoderBlock::Double(DoubleConv::new(store, init, &name, c_in, target, true)?)
                }
            });
            let attend = match cfg.attention {
                AttentionSites::None => false,
                AttentionSites::Bottom => level + 1 == cfg.levels,
                AttentionSites::AllSkips => true,
            };
            attention.push(
                attend
                    .then(|| ChannelAttention::new(store, &format!("ca{level}")))
                    .transpose()?,
            );
            c_in = target;
        }
        let mut decoders = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let channels = cfg.channels_at(level);
            let name = format!("dec{level}");
            decoders.push(match cfg.decoder {
                DecoderKind::AttentionRecovery => DecoderBlock::Recovery {
                    up: ArUpsample::new(store, init, &format!("{name}.up"), channels)?,
                    lstm: ArLstm::new(store, init, &format!("{name}.lstm"), channels)?,
                },
                DecoderKind::UNet => DecoderBlock::UNet(UNetUp::new(store, init, &name, channels)?),
            });
        }
        let head = Conv2d::new(
            store,
            init,
            "head",
            cfg.base_channels / 2,
            cfg.out_channels,
            1,
            true,
        )?;
        Ok(RaVNet {
            cfg: cfg.clone(),
            encoders,
            attention,
            decoders,
            head,
        })
    }

    /// Pre-sigmoid output, `(n, out_channels, H, W)`.
    pub fn logits<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = x.dims();
        if d.c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {d}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(d.h, d.w)?;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut h = x;
        for (enc, ca) in self.encoders.iter().zip(&self.attention) {
            let (skip, pooled) = enc.forward(ctx, h)?;
            let skip = match ca {
                Some(ca) => ca.forward(ctx, skip)?.e,
                None => skip,
            };
            skips.push(skip);
            h = pooled;
        }
        for (dec, &skip) in self.decoders.iter().zip(&skips).rev() {
            h = dec.forward(ctx, h, skip)?;
        }
        self.head.forward(ctx, h)
    }

    /// Probability map in `(0, 1)`, same spatial size as the input.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.logits(ctx, x)?.sigmoid())
    }
}
