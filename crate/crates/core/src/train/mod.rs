//! Optimization, evaluation and checkpoints.

mod adam;
mod checkpoint;
mod config;

pub use adam::Adam;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{TrainConfig, CONFIG_KEYS};

use crate::arch::RaVNet;
use crate::autodiff::Tape;
use crate::data::{write_atomic, HuImage, Mask, SliceSample, WindowSpec};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metrics::{
    aggregate, confusion_counts, Aggregation, ConfusionCounts, MetricsReport, CSV_HEADER,
    DEFAULT_THRESHOLD,
};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::{Real, Tensor};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

type StepResult<T> = (f64, IndexMap<String, Tensor<T>>, Vec<(String, Tensor<T>)>);

fn forward_backward<T: Real>(
    net: &RaVNet,
    store: &ParamStore<T>,
    loss: LossKind,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<StepResult<T>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Train);
    let pred = net.forward(&ctx, tape.constant(input.clone()))?;
    let l = loss.apply(pred, target)?;
    let value = l.value().item().as_f64();
    let grads = tape.backward(l)?;
    Ok((value, ctx.param_grads(&grads), ctx.take_buffer_updates()))
}

/// Forward, loss, backward and one Adam update on a single batch. Returns
/// the loss before the update.
pub fn train_step<T: Real>(
    net: &RaVNet,
    store: &mut ParamStore<T>,
    adam: &Adam,
    loss: LossKind,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<f64> {
    let (value, grads, updates) = forward_backward(net, store, loss, input, target)?;
    adam.step(store, &grads)?;
    store.apply_buffer_updates(updates)?;
    Ok(value)
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    pub val_dsc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_dsc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_dsc));
    }
    s
}

/// Where `train` writes its files. The most recent epoch goes to
/// `<checkpoint>.last`, the best one by validation DSC to `checkpoint`.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

impl TrainOutputs {
    /// History next to the checkpoint, as `<checkpoint>.history.csv`.
    pub fn beside(checkpoint: impl Into<PathBuf>) -> Self {
        let checkpoint = checkpoint.into();
        let history = with_suffix(&checkpoint, ".history.csv");
        TrainOutputs {
            checkpoint,
            history,
        }
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        with_suffix(&self.checkpoint, ".last")
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

pub struct TrainRun {
    pub net: RaVNet,
    /// State after the final epoch.
    pub store: ParamStore<f32>,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, before its update.
    pub step_losses: Vec<f64>,
}

/// Stacks `(1, c, h, w)` tensors along the batch axis.
fn stack<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let d = parts[0].dims();
    let [_, c, h, w] = d.as_array();
    let mut data = Vec::with_capacity(parts.len() * d.numel());
    for p in parts {
        if p.dims() != d {
            return Err(Error::shape(format!(
                "cannot batch {} with {}",
                p.dims(),
                d
            )));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec([parts.len(), c, h, w], data)
}

fn prepare(
    samples: &[SliceSample],
    cfg: &TrainConfig,
    what: &str,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("{what} set is empty")));
    }
    samples
        .iter()
        .map(|s| {
            cfg.net.check_input(s.image.h, s.image.w)?;
            Ok((s.input(cfg.window)?, s.target()?))
        })
        .collect()
}

/// Trains a freshly initialized network.
///
/// Each epoch shuffles the training set with a generator seeded from the
/// stored rng state, steps through it in batches, scores the validation
/// set and, if `out` is given, writes checkpoints and the history.
/// Stops after `max_epochs` or once the epoch's mean loss falls below
/// `early_stop_loss`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SliceSample],
    val_set: &[SliceSample],
    out: Option<&TrainOutputs>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let train_data = prepare(train_set, cfg, "training")?;
    prepare(val_set, cfg, "validation")?;
    let (net, mut store) = RaVNet::init::<f32>(&cfg.net, cfg.seed)?;
    let adam = Adam::new(cfg.lr);
    let mut rng_state = cfg.seed;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut last = Checkpoint::capture(&cfg.net, cfg.window, &store, 0, rng_state);

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_state);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);
        rng_state = rng.next_u64();

        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<_> = batch.iter().map(|&i| &train_data[i].0).collect();
            let targets: Vec<_> = batch.iter().map(|&i| &train_data[i].1).collect();
            let (x, y) = (stack(&inputs)?, stack(&targets)?);
            // windowed inputs are finite, so non-finite activations mean the
            // parameters have blown up
            let (loss, grads, updates) = match forward_backward(&net, &store, cfg.loss, &x, &y) {
                Err(Error::Domain(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                r => r?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            adam.step(&mut store, &grads)?;
            store.apply_buffer_updates(updates)?;
            step_losses.push(loss);
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_data.len() as f64;
        let val_dsc = evaluate(&net, &store, val_set, cfg.window)?.report.dsc;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_dsc,
        });
        log::info!("epoch {epoch}: train loss {train_loss:.6}, val dsc {val_dsc:.4}");

        last = Checkpoint::capture(&cfg.net, cfg.window, &store, epoch as u64, rng_state);
        let improved = best.as_ref().is_none_or(|(d, _, _)| val_dsc > *d);
        if let Some(out) = out {
            save_checkpoint(&out.last_checkpoint(), &last)?;
            if improved {
                save_checkpoint(&out.checkpoint, &last)?;
            }
            write_atomic(&out.history, history_csv(&history).as_bytes())?;
        }
        if improved {
            best = Some((val_dsc, epoch, last.clone()));
        }
        if train_loss < cfg.early_stop_loss {
            break;
        }
    }

    let (best_epoch, best) = match best {
        Some((_, e, ck)) => (e, ck),
        None => {
            // max_epochs = 0: the untrained network is both best and last
            if let Some(out) = out {
                save_checkpoint(&out.last_checkpoint(), &last)?;
                save_checkpoint(&out.checkpoint, &last)?;
                write_atomic(&out.history, history_csv(&history).as_bytes())?;
            }
            (0, last.clone())
        }
    };
    Ok(TrainRun {
        net,
        store,
        last,
        best,
        best_epoch,
        history,
        step_losses,
    })
}

/// Aggregated and per-sample metrics of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_sample: Vec<(String, MetricsReport)>,
    pub counts: Vec<ConfusionCounts>,
}

impl Evaluation {
    /// Header plus one row per sample.
    pub fn per_sample_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (id, r) in &self.per_sample {
            s.push_str(&r.csv_row(id));
            s.push('\n');
        }
        s
    }
}

/// Probability map `(1, 1, h, w)` for one image, batch norm in inference
/// mode.
pub fn predict<T: Real>(
    net: &RaVNet,
    store: &ParamStore<T>,
    image: &HuImage,
    window: WindowSpec,
) -> Result<Tensor<T>> {
    net.cfg.check_input(image.h, image.w)?;
    let blank = Mask::new(image.h, image.w, vec![0; image.h * image.w])?;
    let x = SliceSample::new(image.clone(), blank, "")?.input::<T>(window)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Infer);
    Ok(net.forward(&ctx, tape.constant(x))?.value())
}

/// Binary mask at the default threshold.
pub fn predict_mask<T: Real>(
    net: &RaVNet,
    store: &ParamStore<T>,
    image: &HuImage,
    window: WindowSpec,
) -> Result<Mask> {
    let p = predict(net, store, image, window)?;
    let t = T::of(DEFAULT_THRESHOLD);
    Mask::new(
        image.h,
        image.w,
        p.data().iter().map(|&v| (v >= t) as u8).collect(),
    )
}

/// Scores every sample independently (in parallel) and averages per slice.
pub fn evaluate<T: Real>(
    net: &RaVNet,
    store: &ParamStore<T>,
    samples: &[SliceSample],
    window: WindowSpec,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate".into()));
    }
    let counts = samples
        .par_iter()
        .map(|s| {
            let p = predict(net, store, &s.image, window)?;
            confusion_counts(&p, &s.target::<T>()?, DEFAULT_THRESHOLD)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&counts, Aggregation::PerSliceMean)?;
    let per_sample = samples
        .iter()
        .zip(&counts)
        .map(|(s, c)| (s.id.clone(), c.report()))
        .collect();
    Ok(Evaluation {
        report,
        per_sample,
        counts,
    })
}

/// Evaluates a checkpoint with its stored window unless one is given.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    samples: &[SliceSample],
    window: Option<WindowSpec>,
) -> Result<Evaluation> {
    let (net, store) = ckpt.restore::<f32>()?;
    evaluate(&net, &store, samples, window.unwrap_or(ckpt.window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::NetworkConfig;
    use crate::data::synth_phantoms;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 3,
            seed: 4,
            net: NetworkConfig {
                levels: 2,
                base_channels: 4,
                ..NetworkConfig::desk()
            },
            ..Default::default()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<SliceSample> {
        synth_phantoms(n, 16, seed)
            .unwrap()
            .into_iter()
            .map(|p| p.sample)
            .collect()
    }

    #[test]
    fn runs_max_epochs_when_threshold_unreachable() {
        let cfg = TrainConfig {
            early_stop_loss: 1e-30,
            ..tiny_cfg()
        };
        let run = train(&cfg, &samples(3, 1), &samples(2, 2), None).unwrap();
        assert_eq!(run.history.len(), 3);
        assert_eq!(run.step_losses.len(), 9);
        assert_eq!(run.store.step, 9);
        assert_eq!(run.last.epoch, 3);
    }

    #[test]
    fn large_threshold_stops_after_one_epoch() {
        let cfg = TrainConfig {
            early_stop_loss: 1e9,
            ..tiny_cfg()
        };
        let run = train(&cfg, &samples(3, 1), &samples(2, 2), None).unwrap();
        assert_eq!(run.history.len(), 1);
    }

    #[test]
    fn batches_cover_the_epoch() {
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 2,
            ..tiny_cfg()
        };
        let run = train(&cfg, &samples(5, 1), &samples(1, 2), None).unwrap();
        // 5 samples in batches of 2: 3 steps per epoch
        assert_eq!(run.step_losses.len(), 6);
    }

    #[test]
    fn writes_best_last_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs::beside(dir.path().join("model.ravn"));
        let run = train(&tiny_cfg(), &samples(2, 1), &samples(2, 2), Some(&out)).unwrap();
        assert_eq!(load_checkpoint(&out.checkpoint).unwrap(), run.best);
        assert_eq!(load_checkpoint(&out.last_checkpoint()).unwrap(), run.last);
        let csv = std::fs::read_to_string(&out.history).unwrap();
        assert_eq!(csv, history_csv(&run.history));
        assert_eq!(csv.lines().count(), 4);
        let best = run
            .history
            .iter()
            .map(|r| r.val_dsc)
            .fold(f64::MIN, f64::max);
        assert_eq!(run.history[run.best_epoch - 1].val_dsc, best);
    }

    #[test]
    fn rejects_empty_and_misfit_inputs() {
        let cfg = tiny_cfg();
        assert!(matches!(
            train(&cfg, &[], &samples(1, 2), None),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            train(&cfg, &samples(1, 2), &[], None),
            Err(Error::EmptyInput(_))
        ));
        let odd: Vec<_> = synth_phantoms(1, 10, 0)
            .unwrap()
            .into_iter()
            .map(|p| p.sample)
            .collect();
        assert!(matches!(
            train(&cfg, &odd, &odd, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let cfg = TrainConfig {
            lr: 1e30,
            loss: LossKind::Bce,
            max_epochs: 20,
            ..tiny_cfg()
        };
        match train(&cfg, &samples(2, 1), &samples(1, 2), None) {
            Err(Error::Divergence { epoch, loss }) => {
                assert!(epoch >= 1);
                assert!(!loss.is_finite());
            }
            Ok(run) => panic!("no divergence: {:?}", run.history),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs::beside(dir.path().join("missing").join("model.ravn"));
        assert!(matches!(
            train(&tiny_cfg(), &samples(1, 1), &samples(1, 2), Some(&out)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn evaluation_is_deterministic_and_csv_shaped() {
        let cfg = tiny_cfg();
        let (net, store) = RaVNet::init::<f32>(&cfg.net, 1).unwrap();
        let s = samples(3, 5);
        let a = evaluate(&net, &store, &s, cfg.window).unwrap();
        assert_eq!(a, evaluate(&net, &store, &s, cfg.window).unwrap());
        let csv = a.per_sample_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("phantom_0002,"));
        let mean = a.per_sample.iter().map(|(_, r)| r.dsc).sum::<f64>() / 3.0;
        assert!((a.report.dsc - mean).abs() < 1e-12);
        assert!(matches!(
            evaluate(&net, &store, &[], cfg.window),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn predicted_mask_thresholds_probabilities() {
        let cfg = tiny_cfg();
        let (net, store) = RaVNet::init::<f32>(&cfg.net, 1).unwrap();
        let s = &samples(1, 5)[0];
        let p = predict(&net, &store, &s.image, cfg.window).unwrap();
        let m = predict_mask(&net, &store, &s.image, cfg.window).unwrap();
        for (&v, &b) in p.data().iter().zip(&m.data) {
            assert_eq!(b == 1, v >= 0.5);
        }
    }
}
