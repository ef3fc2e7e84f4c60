//! Finite-difference suites over every block and the assembled network.
//!
//! Each case builds its block at a small width against a private
//! [`Registry`], draws random parameters and inputs, and checks the gradient
//! with respect to the inputs and every parameter tensor.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{
    ChannelAttention, ColorCorrect, Conv, ConvAct, DetailEnhance, EncoderDecoder, Exposure, ExposureBlock,
    FeatureAggregate, IasResidual, Rcab, ResidualBlock, Sft, Ssb,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_inputs, GradCheckConfig, GradCheckReport};
use crate::losses::{total_loss, LossConfig};
use crate::model::{Jcrnet, ModelConfig};
use crate::params::{Ctx, Init, ParamStore, Registry};
use crate::tensor::Tensor;

/// Spatial extent of every suite input.
pub const EXTENT: usize = 8;
/// Channel width of the block cases.
pub const WIDTH: usize = 8;
/// Probes per tensor; small tensors are checked exhaustively.
pub const PROBES_PER_TENSOR: usize = 24;

pub const MODULES: [&str; 18] = [
    "conv",
    "activation",
    "residual_block",
    "channel_attention",
    "rcab",
    "encoder_decoder",
    "ssb",
    "sft",
    "detail_enhance",
    "color_correct",
    "feature_aggregate",
    "exposure",
    "ias_residual",
    "losses",
    "fes",
    "jrs",
    "ias",
    "model",
];

/// Outcome of one named case.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub module: &'static str,
    pub report: GradCheckReport,
    /// Input or parameter holding the largest relative error.
    pub worst_input: Option<String>,
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{:<18} {} max_rel_err {:.2e} (plain {:.2e}) checked {} nonzero {} skipped {}",
            self.module,
            if r.pass { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.max_rel_err_plain,
            r.checked,
            r.nonzero,
            r.skipped_kinks
        )
    }
}

type Build = fn(&mut Registry) -> Result<Case>;

/// A block bound to its parameter names plus the shapes of its data inputs.
struct Case {
    inputs: Vec<Input>,
    run: Box<dyn for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>,
}

#[derive(Clone, Copy)]
enum Input {
    /// Values in `[0, 1]`.
    Image([usize; 4]),
    /// Values in `[-1, 1]`.
    Feature([usize; 4]),
}

fn image(c: usize) -> Input {
    Input::Image([1, c, EXTENT, EXTENT])
}

fn feature(c: usize) -> Input {
    Input::Feature([1, c, EXTENT, EXTENT])
}

fn case<F>(inputs: Vec<Input>, run: F) -> Case
where
    F: for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
{
    Case {
        inputs,
        run: Box::new(run),
    }
}

fn build(module: &str) -> Result<Build> {
    let b: Build = match module {
        "conv" => |r| {
            let conv = Conv::new(r, "c", 3, 4, 3);
            let down = Conv::strided(r, "d", 4, 4, 3, 2);
            let up = Conv::new(r, "u", 4, 2, 3);
            Ok(case(vec![image(3)], move |ctx, x| {
                let y = conv.forward(ctx, x[0])?;
                up.forward_up(ctx, down.forward(ctx, y)?)
            }))
        },
        "activation" => |r| {
            let ca = ConvAct::new(r, "ca", 2, 3, 3);
            Ok(case(vec![feature(2)], move |ctx, x| {
                let y = ca.forward(ctx, x[0])?;
                y.relu()?.add(y.sigmoid()?)
            }))
        },
        "residual_block" => |r| {
            let b = ResidualBlock::new(r, "rb", WIDTH);
            Ok(case(vec![feature(WIDTH)], move |ctx, x| b.forward(ctx, x[0])))
        },
        "channel_attention" => |r| {
            let b = ChannelAttention::new(r, "att", WIDTH, 4)?;
            Ok(case(vec![feature(WIDTH)], move |ctx, x| b.forward(ctx, x[0])))
        },
        "rcab" => |r| {
            let b = Rcab::new(r, "rcab", WIDTH, 4)?;
            Ok(case(vec![feature(WIDTH)], move |ctx, x| b.forward(ctx, x[0])))
        },
        "encoder_decoder" => |r| {
            let b = EncoderDecoder::new(r, "ed", WIDTH, 2);
            Ok(case(vec![feature(WIDTH)], move |ctx, x| b.forward(ctx, x[0])))
        },
        "ssb" => |r| {
            let b = Ssb::new(r, "ssb", WIDTH);
            Ok(case(vec![feature(WIDTH), image(3)], move |ctx, x| {
                let (out, aux) = b.forward(ctx, x[0], x[1])?;
                out.sum()?.add(aux.sum()?)
            }))
        },
        "sft" => |r| {
            let b = Sft::new(r, "sft", WIDTH, 6);
            Ok(case(vec![feature(6), feature(WIDTH)], move |ctx, x| b.forward(ctx, x[0], x[1])))
        },
        "detail_enhance" => |r| {
            let b = DetailEnhance::new(r, "de", 2);
            Ok(case(vec![image(3)], move |ctx, x| b.forward(ctx, x[0])))
        },
        "color_correct" => |r| {
            let b = ColorCorrect::new(r, "cc", 6, WIDTH, 0.01);
            Ok(case(vec![image(3), feature(6)], move |ctx, x| b.forward(ctx, x[0], x[1])))
        },
        "feature_aggregate" => |r| {
            let b = FeatureAggregate::new(r, "agg", WIDTH, 4)?;
            Ok(case(vec![feature(WIDTH), feature(WIDTH)], move |ctx, x| b.forward(ctx, x[0], x[1])))
        },
        "exposure" => |r| {
            let l = ExposureBlock::new(r, "l", WIDTH, Exposure::Lighten)?;
            let d = ExposureBlock::new(r, "d", WIDTH, Exposure::Darken)?;
            Ok(case(vec![feature(WIDTH)], move |ctx, x| d.forward(ctx, l.forward(ctx, x[0])?)))
        },
        "ias_residual" => |r| {
            let b = IasResidual::new(r, "bp", WIDTH, 1.0)?;
            Ok(case(vec![feature(WIDTH)], move |ctx, x| {
                let (rf, pred) = b.forward(ctx, x[0])?;
                rf.add(pred)
            }))
        },
        "losses" => |_| {
            Ok(case(vec![image(3), image(3)], |_, x| total_loss(x[0], x[1], &LossConfig::default())))
        },
        "fes" | "jrs" | "ias" | "model" => return model_case(module),
        other => {
            return Err(Error::Usage(format!(
                "unknown gradcheck module `{other}`; expected one of {}",
                MODULES.join(", ")
            )))
        }
    };
    Ok(b)
}

/// The tiny network with the declarations under `prefix` copied into `r`.
fn tiny_net(r: &mut Registry, prefix: &str) -> Result<Jcrnet> {
    let net = Jcrnet::new(ModelConfig::tiny())?;
    for d in net.registry().decls().iter().filter(|d| d.name.starts_with(prefix)) {
        r.declare(d.name.clone(), d.shape.clone(), d.init);
    }
    Ok(net)
}

fn model_case(module: &str) -> Result<Build> {
    Ok(match module {
        "fes" => |r| {
            let n = tiny_net(r, "fes.")?;
            Ok(case(vec![image(3)], move |ctx, x| {
                let (f, aux) = n.forward_fes(ctx, x[0])?;
                f.sum()?.add(aux.sum()?)
            }))
        },
        "jrs" => |r| {
            let n = tiny_net(r, "jrs.")?;
            let w = n.cfg.width;
            Ok(case(vec![image(3), feature(w)], move |ctx, x| n.forward_jrs(ctx, x[1], x[0])))
        },
        "ias" => |r| {
            let n = tiny_net(r, "ias.")?;
            Ok(case(vec![image(3), image(3)], move |ctx, x| n.forward_ias(ctx, x[1], x[0])))
        },
        _ => |r| {
            let n = tiny_net(r, "")?;
            Ok(case(vec![image(3)], move |ctx, x| Ok(n.forward(ctx, x[0])?.y)))
        },
    })
}

fn sample(input: Input, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (shape, lo, hi) = match input {
        Input::Image(s) => (s, 0.02, 0.98),
        Input::Feature(s) => (s, -1.0, 1.0),
    };
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Random parameters: initializer draws plus a small perturbation of constant entries,
/// so zero biases and unit gains are exercised away from their special values.
pub fn randomized_params(reg: &Registry, seed: u64) -> Vec<(String, Tensor<f64>)> {
    let base = reg.initialize(seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    reg.decls()
        .iter()
        .map(|d| {
            let mut t = base.get(&d.name).expect("initialized").clone();
            match d.init {
                Init::KaimingUniform { .. } => {}
                Init::Zeros | Init::Const(_) => t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1)),
            }
            if matches!(d.init, Init::Zeros) && d.shape.len() == 4 {
                // zero-initialized heads get small random weights
                let bound = 1.0 / ((d.shape[1] * d.shape[2] * d.shape[3]) as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
            (d.name.clone(), t)
        })
        .collect()
}

/// Added to illumination-head biases so the estimate stays clear of the floor, where the
/// curvature of `1 / L` makes central differences at `h = 1e-3` inaccurate.
pub const ILLUMINATION_BIAS_SHIFT: f64 = 1.5;

/// Smallest residual, and residual Laplacian, allowed in the loss case.
pub const LOSS_MARGIN: f64 = 0.02;

/// `(x, gt)` whose difference and its Laplacian stay at least [`LOSS_MARGIN`] from zero,
/// where the Charbonnier penalty with `eps = 1e-3` bends sharply.
fn loss_pair(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Result<[Tensor<f64>; 2]> {
    let n: usize = shape.iter().product();
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let m = rng.gen_range(LOSS_MARGIN..0.3);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let [b, c, h, w] = shape;
        let lap = crate::kernels::laplacian_forward(&d, b * c, h, w);
        if lap.iter().all(|v| v.abs() >= LOSS_MARGIN) {
            let gt = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            return Ok([Tensor::new(shape.to_vec(), x)?, Tensor::new(shape.to_vec(), gt)?]);
        }
    }
    Err(Error::Training("could not draw a loss pair clear of the margin".into()))
}

/// Largest distance of the pre-clamp output from the head bias allowed in the `ias` and
/// `model` cases, so that no output sits on the clamp where every gradient vanishes.
pub const OUTPUT_SPREAD: f64 = 0.4;

/// Rescales `ias.project.weight` so every pre-clamp output on `inputs` lies within
/// [`OUTPUT_SPREAD`] of its bias.
fn calibrate_output_head(module: &str, inputs: &[Tensor<f64>], params: &mut [(String, Tensor<f64>)]) -> Result<()> {
    let net = Jcrnet::new(ModelConfig::tiny())?;
    let mut store = ParamStore::new();
    for (name, t) in params.iter() {
        store.insert(name, t.clone())?;
    }
    for d in net.registry().decls() {
        if store.get(&d.name).is_err() {
            store.insert(&d.name, Tensor::zeros(d.shape.clone()))?;
        }
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store)?;
    let x = tape.constant(inputs[0].clone())?;
    let xj = match module {
        "ias" => tape.constant(inputs[1].clone())?,
        _ => {
            let (features, _) = net.forward_fes(&ctx, x)?;
            net.forward_jrs(&ctx, features, x)?
        }
    };
    let trace = net.trace_ias(&ctx, xj, x)?;
    let head = &net.ias.project;
    let bias = store.get(&head.bias)?.clone();
    let [_, c, h, w] = trace.raw.value().dims4()?;
    let spread = trace
        .raw
        .value()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - bias.data()[(i / (h * w)) % c]).abs())
        .fold(0.0, f64::max);
    if spread > 0.0 {
        let scale = OUTPUT_SPREAD / spread;
        let (_, weight) = params
            .iter_mut()
            .find(|(n, _)| *n == head.weight)
            .ok_or_else(|| Error::config("output head missing from the case"))?;
        weight.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(())
}

/// Runs the named case with tolerance `tol` at step `h`.
pub fn run_module(module: &'static str, seed: u64, h: f64, tol: f64) -> Result<CaseReport> {
    let builder = build(module)?;
    let mut reg = Registry::new();
    let case = builder(&mut reg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor<f64>> = if module == "losses" {
        loss_pair([1, 3, EXTENT, EXTENT], &mut rng)?.to_vec()
    } else {
        case.inputs.iter().map(|&i| sample(i, &mut rng)).collect()
    };
    let n_data = inputs.len();
    let mut params = randomized_params(&reg, seed);
    for (name, t) in params.iter_mut() {
        if name.ends_with("head.bias") {
            t.data_mut().iter_mut().for_each(|v| *v += ILLUMINATION_BIAS_SHIFT);
        }
    }
    if module == "ias" || module == "model" {
        calibrate_output_head(module, &inputs, &mut params)?;
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    inputs.extend(params.into_iter().map(|(_, t)| t));
    let run = &case.run;
    let report = check_inputs(
        |tape: &Tape<f64>, vars: &[Var<'_, f64>]| {
            let ctx = Ctx::from_bound(tape, &names, &vars[n_data..]);
            run(&ctx, &vars[..n_data])
        },
        &inputs,
        GradCheckConfig {
            h,
            tol,
            max_per_input: Some(PROBES_PER_TENSOR),
            extrapolate: true,
        },
    )?;
    let mut report = report;
    // a case whose every derivative vanishes proves nothing
    report.pass &= report.nonzero > 0;
    let worst_input = report.worst.map(|(i, j)| match i.checked_sub(n_data) {
        None => format!("input{i}[{j}]"),
        Some(p) => format!("{}[{j}]", names[p]),
    });
    Ok(CaseReport {
        module,
        report,
        worst_input,
    })
}

/// Every case in [`MODULES`] order, or just `only`.
pub fn run_suite(only: Option<&str>, seed: u64) -> Result<Vec<CaseReport>> {
    let selected: Vec<&'static str> = match only {
        None => MODULES.to_vec(),
        Some(name) => vec![*MODULES
            .iter()
            .find(|m| **m == name)
            .ok_or_else(|| Error::Usage(format!("unknown gradcheck module `{name}`; expected one of {}", MODULES.join(", "))))?],
    };
    let cfg = GradCheckConfig::default();
    selected
        .into_iter()
        .map(|m| run_module(m, seed, cfg.h, cfg.tol))
        .collect()
}
