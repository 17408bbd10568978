//! Training losses on probability maps.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::fmt;
use std::str::FromStr;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_dims<T: Real>(pred: &Var<'_, T>, truth: &Tensor<T>) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction {} and truth {} differ",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 Σ xy + 1) / (Σ x + Σ y + 1)`, summed over every
/// element of the batch.
pub fn dice_loss<'t, T: Real>(pred: Var<'t, T>, truth: &Tensor<T>) -> Result<Var<'t, T>> {
    check_dims(&pred, truth)?;
    let tape = pred.tape();
    let inter = pred.mul(tape.constant(truth.clone()))?.sum();
    let truth_sum: f64 = truth.data().iter().map(|v| v.as_f64()).sum();
    let num = inter.affine(2.0, 1.0);
    let den = pred.sum().affine(1.0, truth_sum + 1.0);
    Ok(num.div(den)?.affine(-1.0, 1.0))
}

/// Mean binary cross-entropy.
pub fn bce_loss<'t, T: Real>(pred: Var<'t, T>, truth: &Tensor<T>) -> Result<Var<'t, T>> {
    check_dims(&pred, truth)?;
    let tape = pred.tape();
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = p.log()?.mul(tape.constant(truth.clone()))?;
    let neg_truth = truth.map(|y| T::one() - y);
    let neg = p.affine(-1.0, 1.0).log()?.mul(tape.constant(neg_truth))?;
    Ok(pos.add(neg)?.mean().scale(-1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    Bce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Bce => "bce",
        }
    }

    pub fn apply<'t, T: Real>(self, pred: Var<'t, T>, truth: &Tensor<T>) -> Result<Var<'t, T>> {
        match self {
            LossKind::Dice => dice_loss(pred, truth),
            LossKind::Bce => bce_loss(pred, truth),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "bce" => Ok(LossKind::Bce),
            _ => Err(Error::Config(format!(
                "unknown loss '{s}', expected dice or bce"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dice_value(pred: Tensor<f64>, truth: &Tensor<f64>) -> f64 {
        let tape = Tape::new();
        dice_loss(tape.constant(pred), truth)
            .unwrap()
            .value()
            .item()
    }

    #[test]
    fn dice_perfect_and_empty_matches_are_exactly_zero() {
        let ones = Tensor::<f64>::ones([1, 1, 4, 4]);
        assert_eq!(dice_value(ones.clone(), &ones), 0.0);
        let zeros = Tensor::<f64>::zeros([1, 1, 4, 4]);
        assert_eq!(dice_value(zeros.clone(), &zeros), 0.0);
    }

    #[test]
    fn dice_all_wrong_on_two_by_two() {
        let v = dice_value(Tensor::ones([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 2]));
        assert_eq!(v, 0.8);
    }

    #[test]
    fn dice_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let r = dice_loss(
            tape.constant(Tensor::zeros([1, 1, 2, 2])),
            &Tensor::zeros([1, 1, 2, 3]),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn bce_half_probability() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::full([1, 1, 1, 1], 0.5));
        let loss = bce_loss(p, &Tensor::ones([1, 1, 1, 1])).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-6);
        let g = tape.backward(loss).unwrap();
        assert!((g.get(p).unwrap().item() + 2.0).abs() < 1e-5);
    }

    #[test]
    fn bce_confident_correct() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([1, 1, 2, 2], 1.0 - 1e-7));
        let loss = bce_loss(p, &Tensor::ones([1, 1, 2, 2]))
            .unwrap()
            .value()
            .item();
        assert!((0.0..=1e-6).contains(&loss));
    }

    fn random(seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            [1, 1, 4, 4],
            (0..16).map(|_| rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gradchecks() {
        for seed in 0..5 {
            let truth = random(seed + 50, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            for kind in [LossKind::Dice, LossKind::Bce] {
                let report = gradcheck(&[random(seed, 0.1, 0.9)], 1e-4, 1e-4, |_, v| {
                    kind.apply(v[0], &truth)
                })
                .unwrap();
                assert!(report.passed(), "{kind} seed {seed}: {report:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn dice_complements_soft_dsc(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..64)
        ) {
            let n = pairs.len();
            let pred = Tensor::from_vec([1, 1, 1, n], pairs.iter().map(|p| p.0).collect()).unwrap();
            let truth = Tensor::from_vec([1, 1, 1, n], pairs.iter().map(|p| p.1 as u8 as f64).collect()).unwrap();
            let inter: f64 = pairs.iter().map(|&(x, y)| if y { x } else { 0.0 }).sum();
            let sx: f64 = pairs.iter().map(|p| p.0).sum();
            let sy = pairs.iter().filter(|p| p.1).count() as f64;
            let soft_dsc = (2.0 * inter + 1.0) / (sx + sy + 1.0);
            let loss = dice_value(pred, &truth);
            prop_assert!((loss + soft_dsc - 1.0).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&loss));
        }

        #[test]
        fn bce_is_non_negative(p in 0.0f64..=1.0, y in any::<bool>()) {
            let tape = Tape::<f64>::new();
            let loss = bce_loss(tape.constant(Tensor::scalar(p)), &Tensor::scalar(y as u8 as f64)).unwrap();
            prop_assert!(loss.value().item() >= 0.0);
        }
    }
}
