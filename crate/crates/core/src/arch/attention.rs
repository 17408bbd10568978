//! Channel attention.
//!
//! For a feature map `A` of `C` channels, each channel is flattened into a
//! row `W_x` of length `H·W`. The channel dependency matrix is
//!
//! ```text
//! G[x][y] = exp(W_x · W_y) / Σ_x' exp(W_x' · W_y)
//! ```
//!
//! i.e. a softmax down every column. The output is
//! `E = β · reshape(G · A_flat) + A`, with the scalar `β` starting at zero.

use crate::autodiff::{SoftmaxAxis, Var};
use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Dims, Real, Tensor};

/// `a: (n, C, H, W)` to `G: (n, 1, C, C)`, one matrix per sample.
pub fn channel_dependency<'t, T: Real>(a: Var<'t, T>) -> Result<Var<'t, T>> {
    let d = a.dims();
    let flat = a.reshape(Dims::new(d.n, 1, d.c, d.plane())?)?;
    let logits = flat.matmul(flat.transpose_last2())?;
    logits.softmax(SoftmaxAxis::Rows)
}

pub struct AttentionOutput<'t, T> {
    pub e: Var<'t, T>,
    /// The dependency matrix, kept for diagnostics.
    pub g: Var<'t, T>,
}

/// `E = β · reshape(G · A_flat) + A`. With `β = 0` this returns `A`
/// unchanged, bit for bit.
pub fn ca_forward<'t, T: Real>(a: Var<'t, T>, beta: Var<'t, T>) -> Result<AttentionOutput<'t, T>> {
    let d = a.dims();
    let g = channel_dependency(a)?;
    let flat = a.reshape(Dims::new(d.n, 1, d.c, d.plane())?)?;
    let weighted = g.matmul(flat)?.reshape(d)?;
    let e = weighted.mul_scalar(beta)?.add(a)?;
    Ok(AttentionOutput { e, g })
}

/// The learnable `β` of one attention site.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub beta: String,
}

impl ChannelAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        let beta = format!("{name}.beta");
        store.insert(beta.clone(), vec![], Tensor::scalar(T::zero()), true)?;
        Ok(ChannelAttention { beta })
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        a: Var<'t, T>,
    ) -> Result<AttentionOutput<'t, T>> {
        ca_forward(a, ctx.param(&self.beta)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_channel_gives_unit_matrix() {
        let tape = Tape::<f64>::new();
        let g = channel_dependency(tape.constant(random([1, 1, 3, 3], 0))).unwrap();
        assert_eq!(g.value().data(), &[1.0]);
    }

    #[test]
    fn identical_channels_give_uniform_columns() {
        let tape = Tape::<f64>::new();
        let one = random([1, 1, 2, 3], 1);
        let a: Vec<f64> = (0..4).flat_map(|_| one.data().to_vec()).collect();
        let a = Tensor::from_vec([1, 4, 2, 3], a).unwrap();
        let g = channel_dependency(tape.constant(a)).unwrap().value();
        assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn orthogonal_channels_by_hand() {
        // channel 0 = [1, 0, 0, 1], channel 1 = [0, 2, 2, 0] on a 2×2 map
        let a =
            Tensor::from_vec([1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 2.0, 2.0, 0.0]).unwrap();
        let tape = Tape::<f64>::new();
        let g = channel_dependency(tape.constant(a)).unwrap().value();
        // dots: W0·W0 = 2, W1·W1 = 8, cross terms 0
        let e2 = 2f64.exp();
        let e8 = 8f64.exp();
        let expected = [
            e2 / (e2 + 1.0),
            1.0 / (1.0 + e8),
            1.0 / (e2 + 1.0),
            e8 / (1.0 + e8),
        ];
        for (got, want) in g.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_beta_is_exact_identity() {
        let tape = Tape::<f32>::new();
        let a = random([2, 3, 4, 4], 3).cast::<f32>().map(|v| v * 50.0);
        let out = ca_forward(tape.constant(a.clone()), tape.constant(Tensor::scalar(0.0))).unwrap();
        assert_eq!(out.e.value(), a);
    }

    #[test]
    fn unit_beta_identical_channels_adds_channel_mean() {
        let tape = Tape::<f64>::new();
        let one = random([1, 1, 2, 2], 4);
        let a = Tensor::from_vec(
            [1, 3, 2, 2],
            (0..3).flat_map(|_| one.data().to_vec()).collect(),
        )
        .unwrap();
        let out = ca_forward(tape.constant(a.clone()), tape.constant(Tensor::scalar(1.0))).unwrap();
        // every channel equals the channel mean, so e = 2a
        let expected = a.map(|v| 2.0 * v);
        assert!(out.e.value().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn batch_is_handled_per_sample() {
        let tape = Tape::<f64>::new();
        let a = random([2, 3, 2, 2], 5);
        let g = channel_dependency(tape.constant(a.clone()))
            .unwrap()
            .value();
        let second = Tensor::from_vec([1, 3, 2, 2], a.data()[12..].to_vec()).unwrap();
        let g2 = channel_dependency(tape.constant(second)).unwrap().value();
        assert_eq!(&g.data()[9..], g2.data());
    }

    #[test]
    fn non_finite_input_is_domain_error() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec([1, 2, 1, 1], vec![f64::INFINITY, 1.0]).unwrap();
        let r = channel_dependency(tape.constant(a));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn gradcheck_input_and_beta() {
        for seed in 0..5 {
            let inputs = [
                random([1, 3, 4, 4], seed).map(|v| v * 0.5),
                Tensor::scalar(0.7),
            ];
            let report = gradcheck(&inputs, 1e-4, 1e-4, |_, v| {
                Ok(ca_forward(v[0], v[1])?.e.tanh().mean())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
