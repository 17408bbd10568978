//! Finite-difference gradient suites over the primitive ops, the layers and
//! the network blocks, run at double precision over several seeds.

use crate::arch::{ca_forward, ArLstm, ArUpsample, CofRes, NetworkConfig, RaVNet};
use crate::autodiff::{concat_channels, gradcheck, GradcheckReport, SoftmaxAxis, Var};
use crate::error::{Error, Result};
use crate::loss::{bce_loss, dice_loss};
use crate::nn::{
    batch_norm, conv2d, maxpool2, upsample2_nearest, ConvLstmCell, Ctx, Initializer, Mode,
    ParamStore, BN_EPS,
};
use crate::tensor::{Dims, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Seeds per check; check `k` of a run with base seed `s` uses
/// `s, s + 1, …, s + SEEDS_PER_CHECK - 1`.
pub const SEEDS_PER_CHECK: u64 = 5;

const PRIMITIVE: (f64, f64) = (1e-4, 1e-4);
const COMPOSITE: (f64, f64) = (1e-6, 1e-3);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Layers,
    Arch,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Tensor => "tensor",
            Suite::Layers => "layers",
            Suite::Arch => "arch",
        }
    }

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "tensor" => Ok(Suite::Tensor),
            "layers" => Ok(Suite::Layers),
            "arch" => Ok(Suite::Arch),
            _ => Err(Error::Config(format!(
                "unknown module '{s}', expected all, tensor, layers or arch"
            ))),
        }
    }
}

/// Worst result of one check over all its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: &'static str,
    pub eps: f64,
    pub tol: f64,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

type CheckFn = fn(u64, f64, f64) -> Result<GradcheckReport>;

struct Check {
    suite: Suite,
    name: &'static str,
    eps_tol: (f64, f64),
    run: CheckFn,
}

fn uniform(dims: impl Into<Dims>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let dims = dims.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.numel())
        .map(|_| rng.random_range(lo..hi))
        .collect();
    Tensor::from_vec(dims, data).expect("dims match data")
}

fn signed(dims: impl Into<Dims>, seed: u64) -> Tensor<f64> {
    uniform(dims, seed, -1.0, 1.0)
}

/// Random values at least `gap` away from every point in `kinks`.
fn away_from(dims: impl Into<Dims>, seed: u64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    signed(dims, seed).map(|mut v| {
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v >= k { k + gap } else { k - gap };
            }
        }
        v
    })
}

fn binary(dims: impl Into<Dims>, seed: u64) -> Tensor<f64> {
    uniform(dims, seed, 0.0, 1.0).map(|v| if v < 0.5 { 0.0 } else { 1.0 })
}

fn unary(
    eps: f64,
    tol: f64,
    x: Tensor<f64>,
    f: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<GradcheckReport> {
    gradcheck(&[x], eps, tol, move |_, v| f(v[0]))
}

fn binary_op(
    a: Tensor<f64>,
    b: Tensor<f64>,
    eps: f64,
    tol: f64,
    f: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<GradcheckReport> {
    gradcheck(&[a, b], eps, tol, move |_, v| f(v[0], v[1]))
}

const SMALL: [usize; 4] = [1, 2, 3, 3];

fn checks() -> Vec<Check> {
    let (tensor, layers, arch) = (Suite::Tensor, Suite::Layers, Suite::Arch);
    let c = |suite, name, eps_tol, run: CheckFn| Check {
        suite,
        name,
        eps_tol,
        run,
    };
    vec![
        c(tensor, "add", PRIMITIVE, |s, e, t| {
            binary_op(signed(SMALL, s), signed(SMALL, s + 50), e, t, |a, b| {
                Ok(a.add(b)?.tanh().sum())
            })
        }),
        c(tensor, "sub", PRIMITIVE, |s, e, t| {
            binary_op(signed(SMALL, s), signed(SMALL, s + 50), e, t, |a, b| {
                Ok(a.sub(b)?.tanh().sum())
            })
        }),
        c(tensor, "mul", PRIMITIVE, |s, e, t| {
            binary_op(signed(SMALL, s), signed(SMALL, s + 50), e, t, |a, b| {
                Ok(a.mul(b)?.sum())
            })
        }),
        c(tensor, "div", PRIMITIVE, |s, e, t| {
            binary_op(
                signed(SMALL, s),
                uniform(SMALL, s + 50, 0.5, 2.0),
                e,
                t,
                |a, b| Ok(a.div(b)?.sum()),
            )
        }),
        c(tensor, "scale", PRIMITIVE, |s, e, t| {
            unary(e, t, signed(SMALL, s), |x| Ok(x.scale(-2.5).tanh().sum()))
        }),
        c(tensor, "affine", PRIMITIVE, |s, e, t| {
            unary(e, t, signed(SMALL, s), |x| {
                Ok(x.affine(1.5, 0.3).tanh().sum())
            })
        }),
        c(tensor, "relu", PRIMITIVE, |s, e, t| {
            unary(e, t, away_from(SMALL, s, &[0.0], 0.05), |x| {
                Ok(x.relu().tanh().sum())
            })
        }),
        c(tensor, "sigmoid", PRIMITIVE, |s, e, t| {
            unary(e, t, signed(SMALL, s).map(|v| 3.0 * v), |x| {
                Ok(x.sigmoid().sum())
            })
        }),
        c(tensor, "tanh", PRIMITIVE, |s, e, t| {
            unary(e, t, signed(SMALL, s).map(|v| 2.0 * v), |x| {
                Ok(x.tanh().sum())
            })
        }),
        c(tensor, "log", PRIMITIVE, |s, e, t| {
            unary(e, t, uniform(SMALL, s, 0.2, 3.0), |x| Ok(x.log()?.sum()))
        }),
        c(tensor, "clamp", PRIMITIVE, |s, e, t| {
            unary(e, t, away_from(SMALL, s, &[-0.5, 0.5], 0.05), |x| {
                Ok(x.clamp(-0.5, 0.5).tanh().sum())
            })
        }),
        c(tensor, "sum", PRIMITIVE, |s, e, t| {
            unary(e, t, signed(SMALL, s), |x| Ok(x.sum()))
        }),
        c(tensor, "mean", PRIMITIVE, |s, e, t| {
            unary(e, t, signed(SMALL, s), |x| Ok(x.tanh().mean()))
        }),
        c(tensor, "mean_sigmoid", PRIMITIVE, |s, e, t| {
            unary(e, t, signed([1, 2, 4, 4], s), |x| Ok(x.sigmoid().mean()))
        }),
        c(tensor, "matmul", PRIMITIVE, |s, e, t| {
            binary_op(
                signed([1, 1, 3, 4], s),
                signed([1, 1, 4, 2], s + 50),
                e,
                t,
                |a, b| Ok(a.matmul(b)?.tanh().sum()),
            )
        }),
        c(tensor, "reshape", PRIMITIVE, |s, e, t| {
            let w = signed([1, 1, 4, 4], s + 50);
            gradcheck(&[signed([1, 4, 2, 2], s)], e, t, move |tape, v| {
                Ok(v[0]
                    .reshape([1, 1, 4, 4])?
                    .mul(tape.constant(w.clone()))?
                    .sum())
            })
        }),
        c(tensor, "transpose_last2", PRIMITIVE, |s, e, t| {
            let w = signed([1, 1, 3, 2], s + 50);
            gradcheck(&[signed([1, 1, 2, 3], s)], e, t, move |tape, v| {
                Ok(v[0].transpose_last2().mul(tape.constant(w.clone()))?.sum())
            })
        }),
        c(tensor, "concat_channels", PRIMITIVE, |s, e, t| {
            let inputs = [
                signed([1, 1, 3, 3], s),
                signed([1, 2, 3, 3], s + 50),
                signed([1, 1, 3, 3], s + 100),
            ];
            let w = signed([1, 4, 3, 3], s + 150);
            gradcheck(&inputs, e, t, move |tape, v| {
                Ok(concat_channels(v)?.mul(tape.constant(w.clone()))?.sum())
            })
        }),
        c(tensor, "narrow_channels", PRIMITIVE, |s, e, t| {
            unary(e, t, signed([1, 4, 2, 2], s), |x| {
                Ok(x.narrow_channels(1, 2)?.tanh().sum())
            })
        }),
        c(tensor, "softmax_rows", PRIMITIVE, |s, e, t| {
            let w = signed([1, 1, 3, 3], s + 50);
            gradcheck(&[signed([1, 1, 3, 3], s)], e, t, move |tape, v| {
                Ok(v[0]
                    .softmax(SoftmaxAxis::Rows)?
                    .mul(tape.constant(w.clone()))?
                    .sum())
            })
        }),
        c(tensor, "softmax_cols", PRIMITIVE, |s, e, t| {
            let w = signed([1, 1, 3, 3], s + 50);
            gradcheck(&[signed([1, 1, 3, 3], s)], e, t, move |tape, v| {
                Ok(v[0]
                    .softmax(SoftmaxAxis::Cols)?
                    .mul(tape.constant(w.clone()))?
                    .sum())
            })
        }),
        c(tensor, "mul_scalar", PRIMITIVE, |s, e, t| {
            binary_op(signed(SMALL, s), Tensor::scalar(0.7), e, t, |a, b| {
                Ok(a.mul_scalar(b)?.tanh().sum())
            })
        }),
        c(layers, "conv2d", PRIMITIVE, |s, e, t| {
            let inputs = [
                signed([1, 2, 5, 5], s),
                signed([3, 2, 3, 3], s + 50),
                signed([1, 3, 1, 1], s + 100),
            ];
            gradcheck(&inputs, e, t, |_, v| {
                Ok(conv2d(v[0], v[1], Some(v[2]))?.tanh().sum())
            })
        }),
        c(layers, "conv2d_1x1", PRIMITIVE, |s, e, t| {
            let inputs = [signed([1, 3, 4, 4], s), signed([2, 3, 1, 1], s + 50)];
            gradcheck(&inputs, e, t, |_, v| {
                Ok(conv2d(v[0], v[1], None)?.tanh().sum())
            })
        }),
        c(layers, "conv_relu_mean", PRIMITIVE, |s, e, t| {
            let inputs = [
                away_from([1, 2, 4, 4], s, &[0.0], 0.05),
                signed([2, 2, 3, 3], s + 50),
            ];
            gradcheck(&inputs, e, t, |_, v| {
                Ok(conv2d(v[0], v[1], None)?.relu().mean())
            })
        }),
        c(layers, "maxpool2", PRIMITIVE, |s, e, t| {
            unary(e, t, signed([1, 1, 6, 6], s), |x| {
                Ok(maxpool2(x)?.tanh().sum())
            })
        }),
        c(layers, "upsample2", PRIMITIVE, |s, e, t| {
            unary(e, t, signed([1, 2, 3, 4], s), |x| {
                Ok(upsample2_nearest(x)?.tanh().sum())
            })
        }),
        c(layers, "batch_norm_train", (1e-4, 1e-3), |s, e, t| {
            let inputs = [
                uniform([2, 3, 3, 3], s, -1.5, 1.5),
                uniform([1, 3, 1, 1], s + 50, 0.5, 1.5),
                signed([1, 3, 1, 1], s + 100),
            ];
            let w = signed([2, 3, 3, 3], s + 150);
            gradcheck(&inputs, e, t, move |tape, v| {
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
        }),
        c(layers, "batch_norm_infer", PRIMITIVE, |s, e, t| {
            let inputs = [
                signed([1, 2, 3, 3], s),
                uniform([1, 2, 1, 1], s + 50, 0.5, 1.5),
                signed([1, 2, 1, 1], s + 100),
            ];
            gradcheck(&inputs, e, t, |_, v| {
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
        }),
        c(layers, "convlstm_2step", COMPOSITE, |s, e, t| {
            let mut store = ParamStore::<f64>::new();
            let cell = ConvLstmCell::new(&mut store, &mut Initializer::new(s), "lstm", 2, 2)?;
            let inputs = [
                signed([1, 2, 4, 4], s + 50),
                signed([1, 2, 4, 4], s + 100),
                store.value("lstm.gates.weight")?.clone(),
                uniform([1, 8, 1, 1], s + 150, -0.5, 0.5),
            ];
            gradcheck(&inputs, e, t, |tape, v| {
                let ctx = Ctx::new(tape, &store, Mode::Train);
                ctx.bind("lstm.gates.weight", v[2])?;
                ctx.bind("lstm.gates.bias", v[3])?;
                Ok(cell.run(&ctx, &[v[0], v[1]])?.mean())
            })
        }),
        c(layers, "dice_loss", PRIMITIVE, |s, e, t| {
            let truth = binary([1, 1, 4, 4], s + 50);
            gradcheck(&[uniform([1, 1, 4, 4], s, 0.1, 0.9)], e, t, move |_, v| {
                dice_loss(v[0], &truth)
            })
        }),
        c(layers, "bce_loss", PRIMITIVE, |s, e, t| {
            let truth = binary([1, 1, 4, 4], s + 50);
            gradcheck(&[uniform([1, 1, 4, 4], s, 0.1, 0.9)], e, t, move |_, v| {
                bce_loss(v[0], &truth)
            })
        }),
        c(arch, "cofres", COMPOSITE, |s, e, t| {
            let mut store = ParamStore::<f64>::new();
            let b = CofRes::new(&mut store, &mut Initializer::new(s), "enc", 4, 8)?;
            let inputs = [
                signed([1, 4, 8, 8], s + 50),
                store.value("enc.conv1.conv.weight")?.clone(),
                store.value("enc.conv5.bn.gamma")?.clone(),
                store.value("enc.proj.weight")?.clone(),
            ];
            gradcheck(&inputs, e, t, |tape, v| {
                let ctx = Ctx::new(tape, &store, Mode::Train);
                ctx.bind("enc.conv1.conv.weight", v[1])?;
                ctx.bind("enc.conv5.bn.gamma", v[2])?;
                ctx.bind("enc.proj.weight", v[3])?;
                let (skip, pooled) = b.forward(&ctx, v[0])?;
                skip.tanh().mean().add(pooled.mean())
            })
        }),
        c(arch, "channel_attention", PRIMITIVE, |s, e, t| {
            let inputs = [
                signed([1, 3, 4, 4], s).map(|v| v * 0.5),
                Tensor::scalar(0.7),
            ];
            gradcheck(&inputs, e, t, |_, v| {
                Ok(ca_forward(v[0], v[1])?.e.tanh().mean())
            })
        }),
        c(arch, "ar_upsample", COMPOSITE, |s, e, t| {
            let mut store = ParamStore::<f64>::new();
            let b = ArUpsample::new(&mut store, &mut Initializer::new(s), "up", 4)?;
            let inputs = [
                signed([1, 4, 4, 4], s + 50),
                store.value("up.reduce.weight")?.clone(),
                store.value("up.res.a.conv.weight")?.clone(),
                store.value("up.expand.weight")?.clone(),
            ];
            gradcheck(&inputs, e, t, |tape, v| {
                let ctx = Ctx::new(tape, &store, Mode::Train);
                ctx.bind("up.reduce.weight", v[1])?;
                ctx.bind("up.res.a.conv.weight", v[2])?;
                ctx.bind("up.expand.weight", v[3])?;
                Ok(b.forward(&ctx, v[0])?.tanh().mean())
            })
        }),
        c(arch, "ar_lstm", COMPOSITE, |s, e, t| {
            let mut store = ParamStore::<f64>::new();
            let b = ArLstm::new(&mut store, &mut Initializer::new(s), "lstm", 4)?;
            let inputs = [
                signed([1, 4, 4, 4], s + 50),
                signed([1, 4, 4, 4], s + 100),
                store.value("lstm.lstm.gates.weight")?.clone(),
                store.value("lstm.out.weight")?.clone(),
            ];
            gradcheck(&inputs, e, t, |tape, v| {
                let ctx = Ctx::new(tape, &store, Mode::Train);
                ctx.bind("lstm.lstm.gates.weight", v[2])?;
                ctx.bind("lstm.out.weight", v[3])?;
                Ok(b.forward(&ctx, v[0], v[1])?.tanh().mean())
            })
        }),
        c(arch, "network_train_params", COMPOSITE, |s, e, t| {
            let cfg = NetworkConfig {
                levels: 2,
                base_channels: 4,
                ..Default::default()
            };
            let (net, mut store) = RaVNet::init::<f64>(&cfg, s)?;
            store.set("ca1.beta", Tensor::scalar(0.3))?;
            let names = [
                "enc0.conv1.conv.weight",
                "enc1.proj.weight",
                "ca1.beta",
                "dec1.lstm.lstm.gates.bias",
                "dec1.lstm.out.weight",
                "head.weight",
                "head.bias",
            ];
            let x = uniform([1, 1, 8, 8], s + 50, 0.0, 1.0);
            let y = binary([1, 1, 8, 8], s + 100);
            let inputs = names
                .iter()
                .map(|n| store.value(n).cloned())
                .collect::<Result<Vec<_>>>()?;
            gradcheck(&inputs, e, t, |tape, v| {
                let ctx = Ctx::new(tape, &store, Mode::Train);
                for (n, var) in names.iter().zip(v) {
                    ctx.bind(n, *var)?;
                }
                dice_loss(net.forward(&ctx, tape.constant(x.clone()))?, &y)
            })
        }),
        c(arch, "network_infer", COMPOSITE, |s, e, t| {
            let cfg = NetworkConfig {
                levels: 2,
                base_channels: 4,
                ..Default::default()
            };
            let (net, mut store) = RaVNet::init::<f64>(&cfg, s)?;
            // nonzero β so the attention branch contributes
            store.set("ca1.beta", Tensor::scalar(0.5))?;
            gradcheck(
                &[uniform([1, 1, 8, 8], s + 50, 0.0, 1.0)],
                e,
                t,
                |tape, v| {
                    let ctx = Ctx::new(tape, &store, Mode::Infer);
                    Ok(net.forward(&ctx, v[0])?.mean())
                },
            )
        }),
    ]
}

/// Runs every check of `suite`, each over [`SEEDS_PER_CHECK`] seeds
/// starting at `seed`.
pub fn run_gradient_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    checks()
        .into_iter()
        .filter(|c| suite.includes(c.suite))
        .map(|c| {
            let (eps, tol) = c.eps_tol;
            let mut worst = 0.0f64;
            let mut passed = true;
            for s in seed..seed + SEEDS_PER_CHECK {
                let report = (c.run)(s, eps, tol)?;
                let err = report.max_rel_err();
                worst = if err.is_nan() {
                    f64::NAN
                } else {
                    worst.max(err)
                };
                passed &= report.passed();
            }
            Ok(CheckResult {
                suite: c.suite,
                name: c.name,
                eps,
                tol,
                seeds: SEEDS_PER_CHECK,
                max_rel_err: worst,
                passed,
            })
        })
        .collect()
}

/// One line per check: module, name, worst relative error, tolerance and
/// verdict.
pub fn format_results(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<8} {:<22} {:>12} {:>8}  result\n",
        "module", "check", "max_rel_err", "tol"
    );
    for r in results {
        s.push_str(&format!(
            "{:<8} {:<22} {:>12.3e} {:>8.0e}  {}\n",
            r.suite.name(),
            r.name,
            r.max_rel_err,
            r.tol,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}
