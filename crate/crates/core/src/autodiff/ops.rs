//! Primitive differentiable operations on [`Var`].

use super::{BackwardArgs, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

/// Which trailing axis a softmax normalizes over, viewing the last two
/// dims as a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Over rows (the `h` axis): every column sums to one.
    Rows,
    /// Over columns (the `w` axis): every row sums to one.
    Cols,
}

fn same_dims(op: &str, a: Dims, b: Dims) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("{op}: dims {a} and {b} differ")))
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<'t, T: Real> Var<'t, T> {
    fn unary<F>(self, op: &'static str, f: impl Fn(T) -> T, backward: F) -> Var<'t, T>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        let out = self.value_ref().map(f);
        self.tape
            .record(op, &[self], out, backward)
            .expect("unary op stays on its own tape")
    }

    fn binary<F>(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: F,
    ) -> Result<Var<'t, T>>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        self.tape.check_owned(other)?;
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            same_dims(op, a.dims(), b.dims())?;
            Tensor::from_vec(a.dims(), zip_map(a.data(), b.data(), f))?
        };
        self.tape.record(op, &[self, other], out, backward)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            |args| vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())],
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |args| {
                vec![
                    Some(args.grad.to_vec()),
                    Some(args.grad.iter().map(|&g| -g).collect()),
                ]
            },
        )
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            |args| {
                let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                vec![
                    args.needs[0].then(|| zip_map(args.grad, b, |g, y| g * y)),
                    args.needs[1].then(|| zip_map(args.grad, a, |g, x| g * x)),
                ]
            },
        )
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if other.value_ref().data().iter().any(|v| v.is_zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |args| {
                let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                vec![
                    args.needs[0].then(|| zip_map(args.grad, b, |g, y| g / y)),
                    args.needs[1].then(|| {
                        args.grad
                            .iter()
                            .zip(a.iter().zip(b))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect()
                    }),
                ]
            },
        )
    }

    pub fn scale(self, k: f64) -> Var<'t, T> {
        let k = T::of(k);
        self.unary(
            "scale",
            move |x| x * k,
            move |args| vec![Some(args.grad.iter().map(|&g| g * k).collect())],
        )
    }

    /// `k·x + c`, elementwise.
    pub fn affine(self, k: f64, c: f64) -> Var<'t, T> {
        let (k, c) = (T::of(k), T::of(c));
        self.unary(
            "affine",
            move |x| k * x + c,
            move |args| vec![Some(args.grad.iter().map(|&g| g * k).collect())],
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            "relu",
            |x| x.max(T::zero()),
            |args| {
                let x = args.inputs[0].data();
                vec![Some(zip_map(args.grad, x, |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary("sigmoid", sigmoid, |args| {
            let y = args.output.data();
            vec![Some(zip_map(args.grad, y, |g, y| g * y * (T::one() - y)))]
        })
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(
            "tanh",
            |x| x.tanh(),
            |args| {
                let y = args.output.data();
                vec![Some(zip_map(args.grad, y, |g, y| g * (T::one() - y * y)))]
            },
        )
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(
            "log",
            |x| x.ln(),
            |args| {
                let x = args.inputs[0].data();
                vec![Some(zip_map(args.grad, x, |g, x| g / x))]
            },
        ))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input is
    /// inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |args| {
                let x = args.inputs[0].data();
                vec![Some(zip_map(args.grad, x, |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            },
        )
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_owned(s)?;
        let out = {
            let sv = s.value_ref();
            if !sv.dims().is_scalar() {
                return Err(Error::shape(format!(
                    "mul_scalar: {} is not a scalar",
                    sv.dims()
                )));
            }
            let k = sv.item();
            self.value_ref().map(|x| x * k)
        };
        self.tape.record("mul_scalar", &[self, s], out, |args| {
            let x = args.inputs[0].data();
            let k = args.inputs[1].item();
            vec![
                args.needs[0].then(|| args.grad.iter().map(|&g| g * k).collect()),
                args.needs[1].then(|| vec![args.grad.iter().zip(x).map(|(&g, &x)| g * x).sum()]),
            ]
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value_ref().data().iter().copied().sum());
        self.tape
            .record("sum", &[self], out, |args| {
                vec![Some(vec![args.grad[0]; args.inputs[0].numel()])]
            })
            .expect("own tape")
    }

    pub fn mean(self) -> Var<'t, T> {
        let (total, count) = {
            let v = self.value_ref();
            (v.data().iter().copied().sum::<T>(), v.numel())
        };
        let inv = T::one() / T::of(count as f64);
        self.tape
            .record("mean", &[self], Tensor::scalar(total * inv), move |args| {
                vec![Some(vec![args.grad[0] * inv; args.inputs[0].numel()])]
            })
            .expect("own tape")
    }

    /// Batched matrix product over the trailing two dims:
    /// `(n, c, m, k) · (n, c, k, p) → (n, c, m, p)`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_owned(other)?;
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            let (da, db) = (a.dims(), b.dims());
            if da.n != db.n || da.c != db.c || da.w != db.h {
                return Err(Error::shape(format!(
                    "matmul: cannot multiply {da} by {db}"
                )));
            }
            let dims = Dims::new(da.n, da.c, da.h, db.w)?;
            let mut out = vec![T::zero(); dims.numel()];
            for batch in 0..da.n * da.c {
                matmul_acc(
                    &a.data()[batch * da.plane()..][..da.plane()],
                    &b.data()[batch * db.plane()..][..db.plane()],
                    &mut out[batch * dims.plane()..][..dims.plane()],
                    da.h,
                    da.w,
                    db.w,
                );
            }
            Tensor::from_vec(dims, out)?
        };
        self.tape.record("matmul", &[self, other], out, |args| {
            let (a, b) = (args.inputs[0], args.inputs[1]);
            let (da, db) = (a.dims(), b.dims());
            let (m, k, p) = (da.h, da.w, db.w);
            let batches = da.n * da.c;
            let ga = args.needs[0].then(|| {
                // dA = G · Bᵀ
                let mut ga = vec![T::zero(); a.numel()];
                for batch in 0..batches {
                    let g = &args.grad[batch * m * p..][..m * p];
                    let bm = &b.data()[batch * k * p..][..k * p];
                    let out = &mut ga[batch * m * k..][..m * k];
                    for i in 0..m {
                        for j in 0..k {
                            out[i * k + j] = (0..p).map(|q| g[i * p + q] * bm[j * p + q]).sum();
                        }
                    }
                }
                ga
            });
            let gb = args.needs[1].then(|| {
                // dB = Aᵀ · G
                let mut gb = vec![T::zero(); b.numel()];
                for batch in 0..batches {
                    let g = &args.grad[batch * m * p..][..m * p];
                    let am = &a.data()[batch * m * k..][..m * k];
                    let out = &mut gb[batch * k * p..][..k * p];
                    for i in 0..m {
                        for j in 0..k {
                            let aij = am[i * k + j];
                            for q in 0..p {
                                out[j * p + q] = out[j * p + q] + aij * g[i * p + q];
                            }
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Reinterprets the data under new dims; flat order is unchanged.
    pub fn reshape(self, dims: impl Into<Dims>) -> Result<Var<'t, T>> {
        let dims = dims.into();
        let out = {
            let v = self.value_ref();
            if v.numel() != dims.numel() {
                return Err(Error::shape(format!(
                    "reshape: cannot view {} as {dims}",
                    v.dims()
                )));
            }
            v.reshaped(dims)?
        };
        self.tape.record("reshape", &[self], out, |args| {
            vec![Some(args.grad.to_vec())]
        })
    }

    /// Swaps the `h` and `w` axes.
    pub fn transpose_last2(self) -> Var<'t, T> {
        let out = {
            let v = self.value_ref();
            let d = v.dims();
            let td = Dims::from([d.n, d.c, d.w, d.h]);
            Tensor::from_vec(td, transpose_planes(v.data(), d)).expect("transposed dims")
        };
        self.tape
            .record("transpose_last2", &[self], out, |args| {
                // The output dims are the transposed ones.
                vec![Some(transpose_planes(args.grad, args.output.dims()))]
            })
            .expect("own tape")
    }

    /// Copies channels `start..start + len`.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = {
            let v = self.value_ref();
            let d = v.dims();
            if len == 0 || start + len > d.c {
                return Err(Error::shape(format!(
                    "narrow_channels: range {start}..{} out of {} channels",
                    start + len,
                    d.c
                )));
            }
            let od = Dims::new(d.n, len, d.h, d.w)?;
            let mut data = Vec::with_capacity(od.numel());
            for n in 0..d.n {
                let from = d.index(n, start, 0, 0);
                data.extend_from_slice(&v.data()[from..from + len * d.plane()]);
            }
            Tensor::from_vec(od, data)?
        };
        self.tape
            .record("narrow_channels", &[self], out, move |args| {
                let d = args.inputs[0].dims();
                let mut g = vec![T::zero(); d.numel()];
                let chunk = len * d.plane();
                for n in 0..d.n {
                    let to = d.index(n, start, 0, 0);
                    g[to..to + chunk].copy_from_slice(&args.grad[n * chunk..][..chunk]);
                }
                vec![Some(g)]
            })
    }

    /// Softmax along one trailing axis, with the per-slice max subtracted
    /// before exponentiation.
    pub fn softmax(self, axis: SoftmaxAxis) -> Result<Var<'t, T>> {
        let out = {
            let v = self.value_ref();
            if v.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("softmax of non-finite input".into()));
            }
            let d = v.dims();
            let mut data = v.data().to_vec();
            for_each_lane(d, axis, |idx| {
                let max = idx.clone().map(|i| data[i]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in idx.clone() {
                    data[i] = (data[i] - max).exp();
                    total = total + data[i];
                }
                for i in idx {
                    data[i] = data[i] / total;
                }
            });
            Tensor::from_vec(d, data)?
        };
        self.tape.record("softmax", &[self], out, move |args| {
            let y = args.output.data();
            let g = args.grad;
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane(args.output.dims(), axis, |idx| {
                let dot: T = idx.clone().map(|i| g[i] * y[i]).sum();
                for i in idx {
                    dx[i] = y[i] * (g[i] - dot);
                }
            });
            vec![Some(dx)]
        })
    }
}

/// Stacks tensors along the channel axis.
pub fn concat_channels<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("concat_channels of zero tensors".into()))?;
    let tape = first.tape;
    let (out, channels) = {
        let values: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
        let d0 = values[0].dims();
        for v in &values {
            let d = v.dims();
            if (d.n, d.h, d.w) != (d0.n, d0.h, d0.w) {
                return Err(Error::shape(format!(
                    "concat_channels: {d} does not match {d0} outside the channel axis"
                )));
            }
        }
        let channels: Vec<usize> = values.iter().map(|v| v.dims().c).collect();
        let od = Dims::new(d0.n, channels.iter().sum(), d0.h, d0.w)?;
        let mut data = Vec::with_capacity(od.numel());
        for n in 0..d0.n {
            for v in &values {
                let chunk = v.dims().c * d0.plane();
                data.extend_from_slice(&v.data()[n * chunk..][..chunk]);
            }
        }
        (Tensor::from_vec(od, data)?, channels)
    };
    tape.record("concat_channels", parts, out, move |args| {
        let d = args.output.dims();
        let plane = d.plane();
        let mut offset = 0;
        channels
            .iter()
            .zip(args.needs)
            .map(|(&c, &need)| {
                let start = offset;
                offset += c;
                need.then(|| {
                    let mut g = Vec::with_capacity(d.n * c * plane);
                    for n in 0..d.n {
                        let from = d.index(n, start, 0, 0);
                        g.extend_from_slice(&args.grad[from..from + c * plane]);
                    }
                    g
                })
            })
            .collect()
    })
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `out += a · b` for row-major `m×k` and `k×p` blocks.
fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for j in 0..k {
            let aij = a[i * k + j];
            for (o, &bv) in row.iter_mut().zip(&b[j * p..(j + 1) * p]) {
                *o = *o + aij * bv;
            }
        }
    }
}

fn transpose_planes<T: Real>(data: &[T], d: Dims) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for batch in 0..d.n * d.c {
        let base = batch * d.plane();
        for i in 0..d.h {
            for j in 0..d.w {
                out[base + j * d.h + i] = data[base + i * d.w + j];
            }
        }
    }
    out
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(
    d: Dims,
    axis: SoftmaxAxis,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for batch in 0..d.n * d.c {
        let base = batch * d.plane();
        match axis {
            SoftmaxAxis::Rows => {
                for col in 0..d.w {
                    let start = base + col;
                    f((start..start + d.h * d.w).step_by(d.w));
                }
            }
            SoftmaxAxis::Cols => {
                for row in 0..d.h {
                    let start = base + row * d.w;
                    f((start..start + d.w).step_by(1));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::zeros([1, 2, 3, 3])).sigmoid();
        assert!(y.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn add_zeros_is_identity() {
        let tape = Tape::<f64>::new();
        let x = random([1, 2, 3, 3], 1);
        let y = tape
            .constant(x.clone())
            .add(tape.constant(Tensor::zeros([1, 2, 3, 3])))
            .unwrap();
        assert_eq!(y.value(), x);
    }

    #[test]
    fn binary_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([1, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros([1, 2, 3, 2]));
        assert!(matches!(a.mul(b), Err(Error::Shape(_))));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(a.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn tanh_gradcheck_tight() {
        for seed in 0..5 {
            let x = random([1, 2, 3, 3], seed);
            let report = gradcheck(&[x], 1e-4, 1e-5, |_, v| Ok(v[0].tanh().sum())).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[1.0], &[1.0]]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let mm = random([1, 1, 3, 3], 4);
        let eye = tape.constant(m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]));
        let out = eye.matmul(tape.constant(mm.clone())).unwrap();
        assert_eq!(out.value(), mm);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([1, 1, 3, 4]));
        let b = tape.leaf(Tensor::zeros([1, 1, 3, 2]));
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradcheck() {
        for seed in 0..5 {
            let inputs = [random([1, 1, 3, 4], seed), random([1, 1, 4, 2], seed + 100)];
            let report = gradcheck(&inputs, 1e-4, 1e-5, |_, v| {
                Ok(v[0].matmul(v[1])?.tanh().sum())
            })
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn reshape_preserves_flat_order() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec([1, 4, 2, 2], (0..16).map(f64::from).collect()).unwrap();
        let r = tape.constant(x.clone()).reshape([1, 1, 4, 4]).unwrap();
        assert_eq!(r.value().data()[5], 5.0);
        let back = r.reshape([1, 4, 2, 2]).unwrap();
        assert_eq!(back.value(), x);
    }

    #[test]
    fn reshape_count_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 4, 2, 2]));
        assert!(matches!(x.reshape([1, 1, 3, 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_by_hand() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let t = x.transpose_last2();
        assert_eq!(t.dims(), Dims::from([1, 1, 3, 2]));
        assert_eq!(t.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(t.transpose_last2().value(), x.value());
    }

    #[test]
    fn transpose_gradcheck() {
        let x = random([2, 1, 3, 2], 9);
        let w = random([2, 1, 2, 3], 10);
        let report = gradcheck(&[x], 1e-4, 1e-4, move |tape, v| {
            let w = tape.constant(w.clone());
            Ok(v[0].transpose_last2().mul(w)?.tanh().sum())
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn concat_four_quarter_blocks() {
        let tape = Tape::<f64>::new();
        let parts: Vec<_> = (0..4)
            .map(|i| tape.constant(random([1, 4, 8, 8], i)))
            .collect();
        let out = concat_channels(&parts).unwrap();
        assert_eq!(out.dims(), Dims::from([1, 16, 8, 8]));
        assert_eq!(out.value().at(0, 5, 2, 3), parts[1].value().at(0, 1, 2, 3));
    }

    #[test]
    fn concat_single_is_identity() {
        let tape = Tape::<f64>::new();
        let x = random([2, 3, 2, 2], 3);
        let out = concat_channels(&[tape.constant(x.clone())]).unwrap();
        assert_eq!(out.value(), x);
    }

    #[test]
    fn concat_errors() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            concat_channels::<f64>(&[]),
            Err(Error::EmptyInput(_))
        ));
        let a = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(matches!(concat_channels(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_gradcheck() {
        for seed in 0..5 {
            let inputs = [random([2, 1, 2, 3], seed), random([2, 2, 2, 3], seed + 7)];
            let w = random([2, 3, 2, 3], seed + 11);
            let report = gradcheck(&inputs, 1e-4, 1e-4, move |tape, v| {
                let w = tape.constant(w.clone());
                Ok(concat_channels(&[v[0], v[1]])?.mul(w)?.sum())
            })
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn narrow_gradcheck() {
        let x = random([2, 4, 2, 2], 5);
        let report = gradcheck(&[x], 1e-4, 1e-4, |_, v| {
            Ok(v[0].narrow_channels(1, 2)?.tanh().sum())
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        assert_eq!(
            tape.constant(Tensor::ones([1, 1, 2, 2]))
                .sum()
                .value()
                .item(),
            4.0
        );
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]).unwrap());
        assert_eq!(x.mean().value().item(), 3.0);
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        let g = tape.backward(x.mean()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_uniform_and_hand_values() {
        let tape = Tape::<f64>::new();
        let uniform = tape
            .constant(Tensor::full([1, 1, 1, 4], 3.0))
            .softmax(SoftmaxAxis::Cols);
        assert!(uniform
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let y = x.softmax(SoftmaxAxis::Cols).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_axis_normalizes_columns() {
        let tape = Tape::<f64>::new();
        let y = tape
            .constant(random([1, 1, 3, 4], 2))
            .softmax(SoftmaxAxis::Rows)
            .unwrap()
            .value();
        for col in 0..4 {
            let s: f64 = (0..3).map(|r| y.at(0, 0, r, col)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![1000.0, 1000.0]).unwrap());
        let y = x.softmax(SoftmaxAxis::Cols).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            x.softmax(SoftmaxAxis::Cols),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_gradcheck() {
        for seed in 0..5 {
            for axis in [SoftmaxAxis::Rows, SoftmaxAxis::Cols] {
                let x = random([1, 1, 3, 3], seed);
                let w = random([1, 1, 3, 3], seed + 50);
                let report = gradcheck(&[x], 1e-4, 1e-5, move |tape, v| {
                    Ok(v[0].softmax(axis)?.mul(tape.constant(w.clone()))?.sum())
                })
                .unwrap();
                assert!(report.passed(), "{axis:?} {report:?}");
            }
        }
    }

    #[test]
    fn mul_scalar_gradcheck() {
        let inputs = [random([1, 2, 2, 2], 1), Tensor::scalar(0.3)];
        let report = gradcheck(&inputs, 1e-4, 1e-4, |_, v| {
            Ok(v[0].mul_scalar(v[1])?.tanh().sum())
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn div_gradcheck() {
        let a = random([1, 1, 2, 2], 1);
        let b = random([1, 1, 2, 2], 2).map(|v| v.abs() + 0.5);
        let report = gradcheck(&[a, b], 1e-4, 1e-4, |_, v| Ok(v[0].div(v[1])?.sum())).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
