use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

/// 2×2 max pooling with stride 2.
///
/// The gradient goes to the window's maximum; among equal values the first
/// in row-major window order wins.
pub fn maxpool2<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (out, argmax) = {
        let xv = x.value_ref();
        let d = xv.dims();
        if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "maxpool2: spatial dims of {d} must be even"
            )));
        }
        let od = Dims::new(d.n, d.c, d.h / 2, d.w / 2)?;
        let data = xv.data();
        let mut out = Vec::with_capacity(od.numel());
        let mut argmax = Vec::with_capacity(od.numel());
        for nc in 0..d.n * d.c {
            let base = nc * d.plane();
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut best = base + 2 * oy * d.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * d.w + 2 * ox + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        (Tensor::from_vec(od, out)?, argmax)
    };
    x.tape().record("maxpool2", &[x], out, move |args| {
        let mut g = vec![T::zero(); args.inputs[0].numel()];
        for (&src, &gv) in argmax.iter().zip(args.grad) {
            g[src] = g[src] + gv;
        }
        vec![Some(g)]
    })
}

/// Nearest-neighbour ×2 upsampling: each pixel becomes a 2×2 block.
pub fn upsample2_nearest<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let out = {
        let xv = x.value_ref();
        let d = xv.dims();
        let od = Dims::new(d.n, d.c, d.h * 2, d.w * 2)?;
        let data = xv.data();
        let mut out = Vec::with_capacity(od.numel());
        for nc in 0..d.n * d.c {
            for oy in 0..od.h {
                let row = &data[nc * d.plane() + (oy / 2) * d.w..][..d.w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        Tensor::from_vec(od, out)?
    };
    x.tape().record("upsample2_nearest", &[x], out, |args| {
        let d = args.inputs[0].dims();
        let ow = d.w * 2;
        let mut g = vec![T::zero(); d.numel()];
        for nc in 0..d.n * d.c {
            let gbase = nc * d.plane() * 4;
            for iy in 0..d.h {
                for ix in 0..d.w {
                    let top = gbase + 2 * iy * ow + 2 * ix;
                    let bottom = top + ow;
                    g[nc * d.plane() + iy * d.w + ix] = args.grad[top]
                        + args.grad[top + 1]
                        + args.grad[bottom]
                        + args.grad[bottom + 1];
                }
            }
        }
        vec![Some(g)]
    })
}
