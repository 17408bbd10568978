//! Attention-recovery decoder blocks: an upsampling block that works at a
//! quarter of the channel width, and a ConvLSTM block that fuses the skip
//! feature with the upsampled one.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    upsample2_nearest, Conv2d, ConvBnRelu, ConvLstmCell, Ctx, Initializer, ParamStore,
};
use crate::tensor::Real;

/// `y = x + cbr2(cbr1(x))` with two 3×3 conv/BN/ReLU layers.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(ResidualBlock {
            first: ConvBnRelu::new(store, init, &format!("{name}.a"), channels, channels, 3)?,
            second: ConvBnRelu::new(store, init, &format!("{name}.b"), channels, channels, 3)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.first.forward(ctx, x)?;
        self.second.forward(ctx, h)?.add(x)
    }
}

/// `(n, C, H, W) → (n, C, 2H, 2W)`: 1×1 reduce to `C/4`, nearest ×2,
/// residual block, 1×1 expand back to `C`.
#[derive(Clone, Debug)]
pub struct ArUpsample {
    pub reduce: Conv2d,
    pub residual: ResidualBlock,
    pub expand: Conv2d,
    pub channels: usize,
}

impl ArUpsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "{name}: upsampling block needs channels divisible by 4, got {channels}"
            )));
        }
        let quarter = channels / 4;
        Ok(ArUpsample {
            reduce: Conv2d::new(
                store,
                init,
                &format!("{name}.reduce"),
                channels,
                quarter,
                1,
                true,
            )?,
            residual: ResidualBlock::new(store, init, &format!("{name}.res"), quarter)?,
            expand: Conv2d::new(
                store,
                init,
                &format!("{name}.expand"),
                quarter,
                channels,
                1,
                true,
            )?,
            channels,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.reduce.forward(ctx, x)?;
        let h = upsample2_nearest(h)?;
        let h = self.residual.forward(ctx, h)?;
        self.expand.forward(ctx, h)
    }
}

/// Treats `[skip, up]` as a two-step sequence for a ConvLSTM whose hidden
/// width equals the input width, then halves the channels with a 3×3 conv.
#[derive(Clone, Debug)]
pub struct ArLstm {
    pub cell: ConvLstmCell,
    pub out: Conv2d,
    pub channels: usize,
}

impl ArLstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: LSTM block needs an even channel count, got {channels}"
            )));
        }
        Ok(ArLstm {
            cell: ConvLstmCell::new(store, init, &format!("{name}.lstm"), channels, channels)?,
            out: Conv2d::new(
                store,
                init,
                &format!("{name}.out"),
                channels,
                channels / 2,
                3,
                true,
            )?,
            channels,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        skip: Var<'t, T>,
        up: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if skip.dims() != up.dims() {
            return Err(Error::shape(format!(
                "LSTM block inputs differ: skip {} vs upsampled {}",
                skip.dims(),
                up.dims()
            )));
        }
        let h = self.cell.run(ctx, &[skip, up])?;
        self.out.forward(ctx, h)
    }
}
