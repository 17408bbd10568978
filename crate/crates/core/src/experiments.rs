//! Comparison runs on a fixed dataset: the two losses, and encoder/decoder
//! ablations. Every row trains from scratch with the same seed and is
//! scored on the test set with its best-by-validation checkpoint.

use crate::arch::{AttentionSites, DecoderKind, EncoderKind, NetworkConfig};
use crate::data::SliceSample;
use crate::error::Result;
use crate::loss::LossKind;
use crate::metrics::MetricsReport;
use crate::train::{evaluate_checkpoint, train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub name: String,
    pub report: MetricsReport,
}

/// Train, validation and test samples.
#[derive(Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [SliceSample],
    pub val: &'a [SliceSample],
    pub test: &'a [SliceSample],
}

pub fn run_variant(name: &str, cfg: &TrainConfig, data: Splits<'_>) -> Result<ExperimentRow> {
    log::info!("training variant {name}");
    let run = train(cfg, data.train, data.val, None)?;
    let eval = evaluate_checkpoint(&run.best, data.test, None)?;
    Ok(ExperimentRow {
        name: name.to_string(),
        report: eval.report,
    })
}

/// The same model trained once with each loss.
pub fn loss_compare_experiment(cfg: &TrainConfig, data: Splits<'_>) -> Result<Vec<ExperimentRow>> {
    [LossKind::Dice, LossKind::Bce]
        .into_iter()
        .map(|loss| {
            run_variant(
                loss.name(),
                &TrainConfig {
                    loss,
                    ..cfg.clone()
                },
                data,
            )
        })
        .collect()
}

/// Named network variants at the depth and width of `base`.
pub fn ablation_variants(base: &NetworkConfig) -> Vec<(&'static str, NetworkConfig)> {
    let v = |encoder, decoder, attention| NetworkConfig {
        encoder,
        decoder,
        attention,
        ..base.clone()
    };
    vec![
        (
            "unet",
            v(EncoderKind::Plain, DecoderKind::UNet, AttentionSites::None),
        ),
        (
            "res-unet",
            v(
                EncoderKind::Residual,
                DecoderKind::UNet,
                AttentionSites::None,
            ),
        ),
        (
            "cofres-unet",
            v(EncoderKind::CofRes, DecoderKind::UNet, AttentionSites::None),
        ),
        (
            "ca-ar (plain encoder)",
            v(
                EncoderKind::Plain,
                DecoderKind::AttentionRecovery,
                AttentionSites::Bottom,
            ),
        ),
        (
            "full",
            v(
                EncoderKind::CofRes,
                DecoderKind::AttentionRecovery,
                AttentionSites::Bottom,
            ),
        ),
    ]
}

/// Runs the variants of [`ablation_variants`] whose names are in `names`
/// (all of them when `names` is empty).
pub fn ablation_experiment(
    cfg: &TrainConfig,
    data: Splits<'_>,
    names: &[&str],
) -> Result<Vec<ExperimentRow>> {
    ablation_variants(&cfg.net)
        .into_iter()
        .filter(|(n, _)| names.is_empty() || names.contains(n))
        .map(|(n, net)| run_variant(n, &TrainConfig { net, ..cfg.clone() }, data))
        .collect()
}

/// Plain-text table with the columns Method, Acc, Pre, DSC, JSC.
pub fn format_table(rows: &[ExperimentRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.name.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "Method", "Acc", "Pre", "DSC", "JSC"
    );
    for r in rows {
        let m = &r.report;
        s.push_str(&format!(
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}\n",
            r.name, m.accuracy, m.precision, m.dsc, m.jsc
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_phantoms;

    #[test]
    fn loss_table_is_deterministic() {
        let s: Vec<_> = synth_phantoms(4, 16, 3)
            .unwrap()
            .into_iter()
            .map(|p| p.sample)
            .collect();
        let data = Splits {
            train: &s[..2],
            val: &s[2..3],
            test: &s[3..],
        };
        let cfg = TrainConfig {
            lr: 1e-3,
            max_epochs: 2,
            net: NetworkConfig {
                levels: 2,
                base_channels: 4,
                ..NetworkConfig::desk()
            },
            ..Default::default()
        };
        let a = loss_compare_experiment(&cfg, data).unwrap();
        assert_eq!(a, loss_compare_experiment(&cfg, data).unwrap());
        assert_eq!(
            a.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(),
            ["dice", "bce"]
        );
        for r in &a {
            assert!((0.0..=1.0).contains(&r.report.dsc));
        }
        let table = format_table(&a);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("Method"));
    }

    #[test]
    fn variant_selection() {
        let all = ablation_variants(&NetworkConfig::desk());
        assert_eq!(all.len(), 5);
        for (_, c) in &all {
            assert_eq!((c.levels, c.base_channels), (2, 8));
            c.validate().unwrap();
        }
    }
}
