//! Stride-1, same-padded 2-D cross-correlation.

use rayon::prelude::*;

use super::{BatchNorm, Ctx, Initializer, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

/// Valid output range along one axis for a kernel tap offset `d`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn forward_kernel<T: Real>(
    x: &[T],
    xd: Dims,
    w: &[T],
    c_out: usize,
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (c_in, h, wd) = (xd.c, xd.h, xd.w);
    let plane = h * wd;
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); xd.n * c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (n, co) = (idx / c_out, idx % c_out);
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..c_in {
            let xp = &x[(n * c_in + ci) * plane..][..plane];
            for kh in 0..k {
                let dy = kh as isize - pad;
                let (oy0, oy1) = valid_range(h, dy);
                for kw in 0..k {
                    let dx = kw as isize - pad;
                    let (ox0, ox1) = valid_range(wd, dx);
                    let wv = w[((co * c_in + ci) * k + kh) * k + kw];
                    for oy in oy0..oy1 {
                        let iy = (oy as isize + dy) as usize;
                        let orow = &mut o[oy * wd + ox0..oy * wd + ox1];
                        let start = (iy * wd + ox0) as isize + dx;
                        let irow = &xp[start as usize..start as usize + (ox1 - ox0)];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a = *a + wv * b;
                        }
                    }
                }
            }
        }
    });
    out
}

fn input_grad_kernel<T: Real>(g: &[T], xd: Dims, w: &[T], c_out: usize, k: usize) -> Vec<T> {
    let (c_in, h, wd) = (xd.c, xd.h, xd.w);
    let plane = h * wd;
    let pad = (k / 2) as isize;
    let mut dx_all = vec![T::zero(); xd.numel()];
    dx_all
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dxp)| {
            let (n, ci) = (idx / c_in, idx % c_in);
            for co in 0..c_out {
                let gp = &g[(n * c_out + co) * plane..][..plane];
                for kh in 0..k {
                    let dy = kh as isize - pad;
                    let (oy0, oy1) = valid_range(h, dy);
                    for kw in 0..k {
                        let dxo = kw as isize - pad;
                        let (ox0, ox1) = valid_range(wd, dxo);
                        let wv = w[((co * c_in + ci) * k + kh) * k + kw];
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + dy) as usize;
                            let start = ((iy * wd + ox0) as isize + dxo) as usize;
                            let drow = &mut dxp[start..start + (ox1 - ox0)];
                            let grow = &gp[oy * wd + ox0..oy * wd + ox1];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + wv * gv;
                            }
                        }
                    }
                }
            }
        });
    dx_all
}

fn weight_grad_kernel<T: Real>(g: &[T], x: &[T], xd: Dims, c_out: usize, k: usize) -> Vec<T> {
    let (c_in, h, wd) = (xd.c, xd.h, xd.w);
    let plane = h * wd;
    let pad = (k / 2) as isize;
    let mut dw = vec![T::zero(); c_out * c_in * k * k];
    dw.par_chunks_mut(c_in * k * k)
        .enumerate()
        .for_each(|(co, dwc)| {
            for n in 0..xd.n {
                let gp = &g[(n * c_out + co) * plane..][..plane];
                for ci in 0..c_in {
                    let xp = &x[(n * c_in + ci) * plane..][..plane];
                    for kh in 0..k {
                        let dy = kh as isize - pad;
                        let (oy0, oy1) = valid_range(h, dy);
                        for kw in 0..k {
                            let dxo = kw as isize - pad;
                            let (ox0, ox1) = valid_range(wd, dxo);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let start = ((iy * wd + ox0) as isize + dxo) as usize;
                                let xrow = &xp[start..start + (ox1 - ox0)];
                                let grow = &gp[oy * wd + ox0..oy * wd + ox1];
                                for (&a, &b) in grow.iter().zip(xrow) {
                                    acc = acc + a * b;
                                }
                            }
                            let slot = &mut dwc[(ci * k + kh) * k + kw];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });
    dw
}

/// `x: (n, c_in, h, w)`, `weight: (c_out, c_in, k, k)` with odd `k`,
/// `bias: (1, c_out, 1, 1)`. Zero padding keeps `h × w`.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let (out, xd, c_out, k) = {
        let xv = x.value_ref();
        let wv = weight.value_ref();
        let (xd, wd) = (xv.dims(), wv.dims());
        if wd.h != wd.w || wd.h % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel {wd} must be square and odd"
            )));
        }
        if wd.c != xd.c {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels, weight {wd} expects {}",
                xd.c, wd.c
            )));
        }
        let bv = bias.map(|b| b.value_ref());
        if let Some(b) = &bv {
            if b.numel() != wd.n {
                return Err(Error::shape(format!(
                    "conv2d: bias has {} entries for {} output channels",
                    b.numel(),
                    wd.n
                )));
            }
        }
        let data = forward_kernel(
            xv.data(),
            xd,
            wv.data(),
            wd.n,
            wd.h,
            bv.as_ref().map(|b| b.data()),
        );
        let od = Dims::new(xd.n, wd.n, xd.h, xd.w)?;
        (Tensor::from_vec(od, data)?, xd, wd.n, wd.h)
    };
    let mut parents = vec![x, weight];
    parents.extend(bias);
    tape.record("conv2d", &parents, out, move |args| {
        let g = args.grad;
        let mut grads = vec![
            args.needs[0].then(|| input_grad_kernel(g, xd, args.inputs[1].data(), c_out, k)),
            args.needs[1].then(|| weight_grad_kernel(g, args.inputs[0].data(), xd, c_out, k)),
        ];
        if args.inputs.len() == 3 {
            grads.push(args.needs[2].then(|| {
                let plane = xd.h * xd.w;
                (0..c_out)
                    .map(|co| {
                        (0..xd.n)
                            .map(|n| {
                                g[(n * c_out + co) * plane..][..plane]
                                    .iter()
                                    .copied()
                                    .sum::<T>()
                            })
                            .sum()
                    })
                    .collect()
            }));
        }
        grads
    })
}

/// Convolution layer; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    /// Registers He-normal weights and a zero bias under `name.weight` /
    /// `name.bias`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: kernel size {k} must be odd"
            )));
        }
        let weight = format!("{name}.weight");
        let wdims = Dims::new(c_out, c_in, k, k)?;
        store.insert(
            weight.clone(),
            vec![c_out, c_in, k, k],
            init.he_normal(wdims, c_in * k * k),
            true,
        )?;
        let bias = if with_bias {
            let b = format!("{name}.bias");
            store.insert(
                b.clone(),
                vec![c_out],
                Tensor::zeros([1, c_out, 1, 1]),
                true,
            )?;
            Some(b)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| ctx.param(b)).transpose()?;
        conv2d(x, w, b)
    }
}

/// `relu(bn(conv(x)))`; the convolution has no bias since batch norm's
/// shift absorbs it.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), c_in, c_out, k, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.bn.forward(ctx, y)?.relu())
    }
}
