//! Binary segmentation metrics computed on thresholded masks.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::fmt::Write as _;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `2tp / (2tp + fp + fn)` as `(numerator, denominator)`.
    pub fn dsc_ratio(&self) -> (u64, u64) {
        (2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `tp / (tp + fp + fn)` as `(numerator, denominator)`.
    pub fn jsc_ratio(&self) -> (u64, u64) {
        (self.tp, self.tp + self.fp + self.fn_)
    }

    /// Metrics from these counts. Precision, DSC and JSC are 1 when their
    /// denominator is zero.
    pub fn report(&self) -> MetricsReport {
        let ratio = |(n, d): (u64, u64)| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        MetricsReport {
            accuracy: ratio((self.tp + self.tn, self.total())),
            precision: ratio((self.tp, self.tp + self.fp)),
            dsc: ratio(self.dsc_ratio()),
            jsc: ratio(self.jsc_ratio()),
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Thresholds `pred` (values `>= threshold` are positive) and counts
/// against a binary `truth`.
pub fn confusion_counts<T: Real>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction {} and truth {} differ",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(truth.data()) {
        let y = y.as_f64();
        if y != 0.0 && y != 1.0 {
            return Err(Error::Domain(format!("truth mask value {y} is not 0 or 1")));
        }
        match (p.as_f64() >= threshold, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// All four metrics for one prediction, thresholded at 0.5.
pub fn evaluate_pair<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<MetricsReport> {
    Ok(confusion_counts(pred, truth, DEFAULT_THRESHOLD)?.report())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub dsc: f64,
    pub jsc: f64,
}

pub const CSV_HEADER: &str = "sample_id,accuracy,precision,dsc,jsc";

impl MetricsReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad number in '{line}'")))?;
            let slot = match k.trim() {
                "accuracy" => &mut r.accuracy,
                "precision" => &mut r.precision,
                "dsc" => &mut r.dsc,
                "jsc" => &mut r.jsc,
                other => return Err(Error::Config(format!("unknown metric '{other}'"))),
            };
            *slot = v;
            seen += 1;
        }
        if seen != 4 {
            return Err(Error::Config(format!("expected 4 metrics, got {seen}")));
        }
        Ok(r)
    }

    pub fn csv_row(&self, sample_id: &str) -> String {
        format!(
            "{sample_id},{},{},{},{}",
            self.accuracy, self.precision, self.dsc, self.jsc
        )
    }

    fn fields(&self) -> [(&'static str, f64); 4] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("dsc", self.dsc),
            ("jsc", self.jsc),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean of the per-slice metrics.
    #[default]
    PerSliceMean,
    /// Metrics on the pooled counts of all slices.
    GlobalPool,
}

pub fn aggregate(counts: &[ConfusionCounts], how: Aggregation) -> Result<MetricsReport> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("no samples to aggregate".into()));
    }
    Ok(match how {
        Aggregation::GlobalPool => counts
            .iter()
            .copied()
            .fold(ConfusionCounts::default(), |a, b| a + b)
            .report(),
        Aggregation::PerSliceMean => {
            let n = counts.len() as f64;
            let mut m = MetricsReport::default();
            for r in counts.iter().map(ConfusionCounts::report) {
                m.accuracy += r.accuracy / n;
                m.precision += r.precision / n;
                m.dsc += r.dsc / n;
                m.jsc += r.jsc / n;
            }
            m
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8], h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec([1, 1, h, w], bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn all_ones_against_half() {
        let pred = Tensor::<f64>::ones([1, 1, 4, 4]);
        let truth = mask(&[[1u8; 8], [0u8; 8]].concat(), 4, 4);
        let c = confusion_counts(&pred, &truth, 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 8,
                fp: 8,
                tn: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn tie_counts_positive() {
        let c = confusion_counts(
            &Tensor::<f64>::full([1, 1, 1, 1], 0.5),
            &Tensor::ones([1, 1, 1, 1]),
            0.5,
        )
        .unwrap();
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn hand_counted_overlap() {
        let pred = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 2, 4);
        let truth = mask(&[0, 0, 1, 1, 1, 1, 0, 0], 2, 4);
        let r = evaluate_pair(&pred, &truth).unwrap();
        assert_eq!(r.dsc, 0.5);
        assert!((r.jsc - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_disjoint_and_empty() {
        let m = mask(&[1, 0, 0, 1], 2, 2);
        let r = evaluate_pair(&m, &m).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.dsc, r.jsc),
            (1.0, 1.0, 1.0, 1.0)
        );
        let r = evaluate_pair(&m, &mask(&[0, 1, 1, 0], 2, 2)).unwrap();
        assert_eq!((r.dsc, r.jsc), (0.0, 0.0));
        let z = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let r = evaluate_pair(&z, &z).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.dsc, r.jsc),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Tensor::<f64>::zeros([1, 1, 2, 2]);
        assert!(matches!(
            evaluate_pair(&a, &Tensor::zeros([1, 1, 2, 3])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            evaluate_pair(&a, &Tensor::full([1, 1, 2, 2], 0.5)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kv_and_csv() {
        let r = MetricsReport {
            accuracy: 0.75,
            precision: 0.5,
            dsc: 0.25,
            jsc: 1.0 / 7.0,
        };
        assert_eq!(MetricsReport::from_kv(&r.to_kv()).unwrap(), r);
        assert_eq!(r.csv_row("s1"), format!("s1,0.75,0.5,0.25,{}", 1.0 / 7.0));
        assert!(MetricsReport::from_kv("accuracy=1").is_err());
    }

    #[test]
    fn aggregation_modes() {
        let a = ConfusionCounts {
            tp: 1,
            tn: 0,
            fp: 1,
            fn_: 0,
        };
        let b = ConfusionCounts {
            tp: 0,
            tn: 2,
            fp: 0,
            fn_: 0,
        };
        let per = aggregate(&[a, b], Aggregation::PerSliceMean).unwrap();
        assert_eq!(per.precision, 0.75);
        let pooled = aggregate(&[a, b], Aggregation::GlobalPool).unwrap();
        assert_eq!(pooled.precision, 0.5);
        assert!(aggregate(&[], Aggregation::GlobalPool).is_err());
    }

    fn pair() -> impl Strategy<Value = Vec<(f64, u8)>> {
        proptest::collection::vec((0.0f64..=1.0, 0u8..=1), 1..100)
    }

    proptest! {
        #[test]
        fn counts_cover_every_pixel(px in pair()) {
            let n = px.len();
            let pred = Tensor::from_vec([1, 1, 1, n], px.iter().map(|p| p.0).collect()).unwrap();
            let truth = Tensor::from_vec([1, 1, 1, n], px.iter().map(|p| p.1 as f64).collect()).unwrap();
            prop_assert_eq!(confusion_counts(&pred, &truth, 0.5).unwrap().total(), n as u64);
        }

        #[test]
        fn dsc_jsc_identity_on_counts(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            prop_assume!(tp + fp + fn_ > 0);
            let c = ConfusionCounts { tp, tn: 0, fp, fn_ };
            // dsc = 2j / (1 + j) with j = jn / jd is 2jn / (jd + jn)
            let (dn, dd) = c.dsc_ratio();
            let (jn, jd) = c.jsc_ratio();
            prop_assert_eq!(dn as u128 * (jd + jn) as u128, 2 * jn as u128 * dd as u128);
        }

        #[test]
        fn metrics_ignore_pixel_order(px in pair(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = px.len();
            let build = |v: &[(f64, u8)]| {
                (
                    Tensor::from_vec([1, 1, 1, n], v.iter().map(|p| p.0).collect()).unwrap(),
                    Tensor::from_vec([1, 1, 1, n], v.iter().map(|p| p.1 as f64).collect()).unwrap(),
                )
            };
            let (p, t) = build(&px);
            let mut shuffled = px.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (ps, ts) = build(&shuffled);
            prop_assert_eq!(evaluate_pair(&p, &t).unwrap(), evaluate_pair(&ps, &ts).unwrap());
        }
    }
}
