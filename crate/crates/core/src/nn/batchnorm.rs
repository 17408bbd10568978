use super::{Ctx, Mode, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over `(n, h, w)`.
///
/// In [`Mode::Train`] the biased batch variance normalizes the input and the
/// batch `(mean, variance)` is returned so the caller can fold it into the
/// running statistics. In [`Mode::Infer`] `running` is used instead.
pub fn batch_norm<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    mode: Mode,
    running: (&[T], &[T]),
    eps: f64,
) -> Result<(Var<'t, T>, Option<(Vec<T>, Vec<T>)>)> {
    let eps = T::of(eps);
    let (out, mean, inv_std, batch_stats) = {
        let xv = x.value_ref();
        let d = xv.dims();
        let (gv, bv) = (gamma.value_ref(), beta.value_ref());
        if gv.numel() != d.c
            || bv.numel() != d.c
            || running.0.len() != d.c
            || running.1.len() != d.c
        {
            return Err(Error::shape(format!(
                "batch_norm: input {d} has {} channels, parameters have {}",
                d.c,
                gv.numel()
            )));
        }
        let count = T::of((d.n * d.plane()) as f64);
        let lanes =
            |c: usize| (0..d.n).map(move |n| d.index(n, c, 0, 0)..d.index(n, c, 0, 0) + d.plane());
        let data = xv.data();
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => (0..d.c)
                .map(|c| {
                    let m = lanes(c).flat_map(|r| data[r].iter().copied()).sum::<T>() / count;
                    let v = lanes(c)
                        .flat_map(|r| data[r].iter().map(move |&x| (x - m) * (x - m)))
                        .sum::<T>()
                        / count;
                    (m, v)
                })
                .unzip(),
            Mode::Infer => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); d.numel()];
        for c in 0..d.c {
            let (g, b) = (gv.data()[c], bv.data()[c]);
            for r in lanes(c) {
                for (o, &xv) in out[r.clone()].iter_mut().zip(&data[r]) {
                    *o = g * (xv - mean[c]) * inv_std[c] + b;
                }
            }
        }
        let stats = (mode == Mode::Train).then(|| (mean.clone(), var));
        (Tensor::from_vec(d, out)?, mean, inv_std, stats)
    };

    let y = x
        .tape()
        .record("batch_norm", &[x, gamma, beta], out, move |args| {
            let xt = args.inputs[0];
            let d = xt.dims();
            let gamma = args.inputs[1].data();
            let g = args.grad;
            let count = T::of((d.n * d.plane()) as f64);
            let mut dx = args.needs[0].then(|| vec![T::zero(); d.numel()]);
            let mut dgamma = vec![T::zero(); d.c];
            let mut dbeta = vec![T::zero(); d.c];
            for c in 0..d.c {
                let lanes =
                    || (0..d.n).map(|n| d.index(n, c, 0, 0)..d.index(n, c, 0, 0) + d.plane());
                let xhat = |i: usize| (xt.data()[i] - mean[c]) * inv_std[c];
                let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                for r in lanes() {
                    for i in r {
                        sum_g = sum_g + g[i];
                        sum_gx = sum_gx + g[i] * xhat(i);
                    }
                }
                dgamma[c] = sum_gx;
                dbeta[c] = sum_g;
                if let Some(dx) = dx.as_mut() {
                    let scale = gamma[c] * inv_std[c];
                    for r in lanes() {
                        for i in r {
                            dx[i] = match mode {
                                Mode::Infer => scale * g[i],
                                Mode::Train => {
                                    scale * (g[i] - sum_g / count - xhat(i) * sum_gx / count)
                                }
                            };
                        }
                    }
                }
            }
            vec![
                dx,
                args.needs[1].then_some(dgamma),
                args.needs[2].then_some(dbeta),
            ]
        })?;
    Ok((y, batch_stats))
}

/// Batch-norm layer: trainable `gamma`/`beta`, running statistics stored
/// as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let dims = [1, channels, 1, 1];
        let shape = vec![channels];
        let bn = BatchNorm {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        };
        store.insert(bn.gamma.clone(), shape.clone(), Tensor::ones(dims), true)?;
        store.insert(bn.beta.clone(), shape.clone(), Tensor::zeros(dims), true)?;
        store.insert(
            bn.running_mean.clone(),
            shape.clone(),
            Tensor::zeros(dims),
            false,
        )?;
        store.insert(bn.running_var.clone(), shape, Tensor::ones(dims), false)?;
        Ok(bn)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let store = ctx.store();
        let rm = store.value(&self.running_mean)?;
        let rv = store.value(&self.running_var)?;
        let (y, stats) = batch_norm(
            x,
            ctx.param(&self.gamma)?,
            ctx.param(&self.beta)?,
            ctx.mode(),
            (rm.data(), rv.data()),
            self.eps,
        )?;
        if let Some((mean, var)) = stats {
            let mom = T::of(self.momentum);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| mom * o + (T::one() - mom) * n)
                    .collect();
                Tensor::from_vec(old.dims(), data).expect("same dims")
            };
            ctx.push_buffer_update(&self.running_mean, blend(rm, &mean));
            ctx.push_buffer_update(&self.running_var, blend(rv, &var));
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64, scale: f64, shift: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * scale + shift)
            .collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random([2, 3, 4, 5], 1, 3.0, 2.0));
        let (y, stats) = batch_norm(
            x,
            tape.constant(Tensor::ones([1, 3, 1, 1])),
            tape.constant(Tensor::zeros([1, 3, 1, 1])),
            Mode::Train,
            (&[0.0; 3], &[1.0; 3]),
            BN_EPS,
        )
        .unwrap();
        assert!(stats.is_some());
        let y = y.value();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..4).flat_map(move |h| (0..5).map(move |w| (n, h, w))))
                .map(|(n, h, w)| y.at(n, c, h, w))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn infer_mode_with_unit_stats_is_near_identity() {
        let tape = Tape::<f64>::new();
        let x = random([1, 2, 3, 3], 2, 1.0, 0.0);
        let (y, stats) = batch_norm(
            tape.constant(x.clone()),
            tape.constant(Tensor::ones([1, 2, 1, 1])),
            tape.constant(Tensor::zeros([1, 2, 1, 1])),
            Mode::Infer,
            (&[0.0; 2], &[1.0; 2]),
            BN_EPS,
        )
        .unwrap();
        assert!(stats.is_none());
        assert!(y.value().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn channel_mismatch() {
        let tape = Tape::<f64>::new();
        let r = batch_norm(
            tape.constant(Tensor::zeros([1, 2, 2, 2])),
            tape.constant(Tensor::ones([1, 3, 1, 1])),
            tape.constant(Tensor::zeros([1, 3, 1, 1])),
            Mode::Train,
            (&[0.0; 3], &[1.0; 3]),
            BN_EPS,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn gradcheck_train_batch_of_two() {
        for seed in 0..5 {
            let inputs = [
                random([2, 3, 3, 3], seed, 1.5, 0.3),
                random([1, 3, 1, 1], seed + 10, 0.5, 1.0),
                random([1, 3, 1, 1], seed + 20, 0.5, 0.0),
            ];
            let w = random([2, 3, 3, 3], seed + 30, 1.0, 0.0);
            let report = gradcheck(&inputs, 1e-4, 1e-3, move |tape, v| {
                let (y, _) = batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    Mode::Train,
                    (&[0.0; 3], &[1.0; 3]),
                    BN_EPS,
                )?;
                Ok(y.mul(tape.constant(w.clone()))?.tanh().sum())
            })
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn gradcheck_infer() {
        let inputs = [
            random([1, 2, 3, 3], 4, 1.0, 0.0),
            random([1, 2, 1, 1], 5, 0.5, 1.0),
            random([1, 2, 1, 1], 6, 0.5, 0.0),
        ];
        let report = gradcheck(&inputs, 1e-4, 1e-4, |_, v| {
            let (y, _) = batch_norm(
                v[0],
                v[1],
                v[2],
                Mode::Infer,
                (&[0.1, -0.2], &[0.5, 2.0]),
                BN_EPS,
            )?;
            Ok(y.tanh().sum())
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn layer_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&ctx, x).unwrap();
        let updates = ctx.take_buffer_updates();
        store.apply_buffer_updates(updates).unwrap();
        // batch mean 2.5, biased var 1.25
        assert!((store.value("bn.running_mean").unwrap().item() - 0.25).abs() < 1e-12);
        assert!((store.value("bn.running_var").unwrap().item() - (0.9 + 0.125)).abs() < 1e-12);
    }
}
