//! Composite original-feature residual encoder block.
//!
//! Four chained 3×3 conv/BN/ReLU stages at a quarter of the target width
//! are stacked back to the target width, fused by a 1×1 conv/BN/ReLU and
//! summed with the (projected, if needed) input.

use crate::autodiff::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::nn::{maxpool2, Conv2d, ConvBnRelu, Ctx, Initializer, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct CofRes {
    pub stages: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
    /// 1×1 projection on the identity path when the widths differ.
    pub proj: Option<Conv2d>,
    pub c_in: usize,
    pub target: usize,
}

impl CofRes {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        target: usize,
    ) -> Result<Self> {
        if target == 0 || !target.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "{name}: CofRes target channels {target} must be a positive multiple of 4"
            )));
        }
        let quarter = target / 4;
        let stages = (0..4)
            .map(|i| {
                let from = if i == 0 { c_in } else { quarter };
                ConvBnRelu::new(
                    store,
                    init,
                    &format!("{name}.conv{}", i + 1),
                    from,
                    quarter,
                    3,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::new(store, init, &format!("{name}.conv5"), target, target, 1)?;
        let proj = (c_in != target)
            .then(|| Conv2d::new(store, init, &format!("{name}.proj"), c_in, target, 1, true))
            .transpose()?;
        Ok(CofRes {
            stages,
            fuse,
            proj,
            c_in,
            target,
        })
    }

    /// Returns `(skip, pooled)`; `skip` keeps the input's spatial size and
    /// `pooled` halves it.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let d = x.dims();
        if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "CofRes input {d} needs even spatial dims"
            )));
        }
        let mut outs = Vec::with_capacity(4);
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(ctx, h)?;
            outs.push(h);
        }
        let fused = self.fuse.forward(ctx, concat_channels(&outs)?)?;
        let identity = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let skip = fused.add(identity)?;
        let pooled = maxpool2(skip)?;
        Ok((skip, pooled))
    }
}
