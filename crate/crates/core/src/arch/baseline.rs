//! Comparison blocks for ablations: plain and residual double-conv encoders
//! and a concatenating U-Net decoder stage.

use crate::autodiff::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::nn::{maxpool2, upsample2_nearest, Conv2d, ConvBnRelu, Ctx, Initializer, ParamStore};
use crate::tensor::Real;

/// Two 3×3 conv/BN/ReLU layers, optionally summed with the (projected)
/// input.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
    pub residual: bool,
    pub proj: Option<Conv2d>,
}

impl DoubleConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        target: usize,
        residual: bool,
    ) -> Result<Self> {
        let first = ConvBnRelu::new(store, init, &format!("{name}.conv1"), c_in, target, 3)?;
        let second = ConvBnRelu::new(store, init, &format!("{name}.conv2"), target, target, 3)?;
        let proj = (residual && c_in != target)
            .then(|| Conv2d::new(store, init, &format!("{name}.proj"), c_in, target, 1, true))
            .transpose()?;
        Ok(DoubleConv {
            first,
            second,
            residual,
            proj,
        })
    }

    /// Same `(skip, pooled)` contract as the CofRes block.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let d = x.dims();
        if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "encoder input {d} needs even spatial dims"
            )));
        }
        let h = self.second.forward(ctx, self.first.forward(ctx, x)?)?;
        let skip = if self.residual {
            let identity = match &self.proj {
                Some(p) => p.forward(ctx, x)?,
                None => x,
            };
            h.add(identity)?
        } else {
            h
        };
        Ok((skip, maxpool2(skip)?))
    }
}

/// Upsample the deep feature, concatenate with the skip, then two
/// conv/BN/ReLU layers down to half the skip width.
#[derive(Clone, Debug)]
pub struct UNetUp {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
    pub channels: usize,
}

impl UNetUp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: decoder stage needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(UNetUp {
            first: ConvBnRelu::new(store, init, &format!("{name}.conv1"), 2 * channels, half, 3)?,
            second: ConvBnRelu::new(store, init, &format!("{name}.conv2"), half, half, 3)?,
            channels,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        deep: Var<'t, T>,
        skip: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let up = upsample2_nearest(deep)?;
        if up.dims() != skip.dims() {
            return Err(Error::shape(format!(
                "decoder stage: upsampled {} does not match skip {}",
                up.dims(),
                skip.dims()
            )));
        }
        let h = self.first.forward(ctx, concat_channels(&[skip, up])?)?;
        self.second.forward(ctx, h)
    }
}
