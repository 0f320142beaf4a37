//! Central finite-difference checks of every differentiable op and of whole
//! networks, in `f64`.
//!
//! Each check reduces the op output to a scalar with a fixed random
//! projection, `L = sum(out * R)`, and compares `dL/dx` from backward against
//! `(L(x + h) - L(x - h)) / 2h` at randomly sampled coordinates of every input.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::backend::Tape;
use crate::conv::WeightSharing;
use crate::dynamic::{dynamic_conv, names as dyn_names};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{self, network, ModelConfig, ParameterSet, Variant};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per input tensor.
    pub samples: usize,
    /// Largest acceptable relative error.
    pub threshold: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Largest disagreement between the estimates at `step` and `step / 2`
    /// before a coordinate is treated as straddling a kink.
    pub kink: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, samples: 8, threshold: 1e-4, floor: 1e-6, kink: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates passed over because the function has a kink within one step.
    pub skipped: usize,
    /// `(input, coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckResult {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, std: f64) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>], projection: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).iter().zip(projection.data()).map(|(a, b)| a * b).sum())
}

/// Compares backward against central differences for `build` at `inputs`.
/// Only inputs whose flag in `differentiable` is set are perturbed.
///
/// A coordinate whose estimates at `h` and `h / 2` disagree by more than the
/// kink tolerance sits next to a kink; it is skipped and another one drawn.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    build: F,
    opts: &GradcheckOptions,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| g.leaf(t.clone().requires_grad(d)))
        .collect();
    let out = build(&mut g, &vars)?;
    let projection = random_tensor(&mut rng, g.shape(out), 1.0);
    let r = g.constant(projection.clone());
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod);
    g.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut worst = None;
    let mut skipped = 0;
    let mut perturbed = inputs.to_vec();
    for (i, (&v, &d)) in vars.iter().zip(differentiable).enumerate() {
        if !d {
            continue;
        }
        let zeros;
        let grad = match g.grad(v) {
            Some(gr) => gr,
            None => {
                zeros = vec![0.0; inputs[i].len()];
                &zeros
            }
        };
        let n = inputs[i].len();
        let mut accepted = 0;
        for j in index::sample(&mut rng, n, (opts.samples * 4).min(n)) {
            if accepted == opts.samples {
                break;
            }
            let mut central = |h: f64| -> Result<f64> {
                let x0 = inputs[i].data()[j];
                perturbed[i].data_mut()[j] = x0 + h;
                let up = evaluate(&build, &perturbed, &projection)?;
                perturbed[i].data_mut()[j] = x0 - h;
                let down = evaluate(&build, &perturbed, &projection)?;
                perturbed[i].data_mut()[j] = x0;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            let half = central(opts.step / 2.0)?;
            // Disagreeing estimates mean a kink (ReLU, |.|) lies inside the interval.
            if relative_error(numeric, half, opts.floor) > opts.kink {
                skipped += 1;
                continue;
            }
            let err = relative_error(grad[j], numeric, opts.floor);
            if !err.is_finite() {
                return Err(Error::InvalidArgument(format!("{name}: non-finite gradient at input {i}[{j}]")));
            }
            if err > max_err || worst.is_none() {
                max_err = err;
                worst = Some((i, j, grad[j], numeric));
            }
            accepted += 1;
            checked += 1;
        }
        if accepted == 0 {
            return Err(Error::InvalidArgument(format!("{name}: no smooth coordinate found in input {i}")));
        }
    }
    Ok(CheckResult { name: name.to_string(), max_rel_error: max_err, checked, skipped, worst })
}

/// Values kept away from zero so ReLU and |.| kinks are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let mag = Uniform::new(0.1, 1.0).expect("range");
    let data = (0..shape.numel())
        .map(|i| {
            let m = mag.sample(rng);
            if i % 2 == 0 { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Checks every primitive op.
pub fn op_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rt = |s: [usize; 4]| random_tensor(&mut rng, Shape(s), 1.0);
    let a = rt([2, 3, 4, 5]);
    let b = rt([2, 3, 4, 5]);
    let x = rt([2, 4, 7, 6]);
    let w = rt([5, 4, 3, 3]);
    let bias = rt([5, 1, 1, 1]);
    let w_items = rt([10, 4, 3, 3]);
    let bias_items = rt([10, 1, 1, 1]);
    let feat = rt([3, 6, 1, 1]);
    let lw = rt([4, 6, 1, 1]);
    let lb = rt([4, 1, 1, 1]);
    let logits = rt([3, 5, 1, 1]);
    let att = rt([2, 3, 1, 1]);
    let k0 = rt([4, 2, 3, 3]);
    let k1 = rt([4, 2, 3, 3]);
    let k2 = rt([4, 2, 3, 3]);
    let shuf2 = rt([2, 8, 3, 2]);
    let shuf3 = rt([1, 9, 2, 3]);
    let c2 = rt([2, 2, 4, 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let kinked = away_from_zero(&mut rng, Shape::new(2, 3, 4, 5));
    let offset = rt_offset(&kinked);

    let t = [true, true, true, true];
    let mut out = vec![
        check("add", &[a.clone(), b.clone()], &t, |g, v| g.add(v[0], v[1]), opts)?,
        check("mul", &[a.clone(), b.clone()], &t, |g, v| g.mul(v[0], v[1]), opts)?,
        check("relu", std::slice::from_ref(&kinked), &t, |g, v| Ok(g.relu(v[0])), opts)?,
        check("global_avg_pool", std::slice::from_ref(&x), &t, |g, v| Ok(g.global_avg_pool(v[0])), opts)?,
        check("linear", &[feat.clone(), lw, lb], &t, |g, v| g.linear(v[0], v[1], v[2]), opts)?,
        check("softmax_temperature", std::slice::from_ref(&logits), &t, |g, v| g.softmax_temperature(v[0], 2.5), opts)?,
        check("softmax_temperature_tau30", &[logits], &t, |g, v| g.softmax_temperature(v[0], 30.0), opts)?,
    ];
    for d in [1, 2, 3] {
        out.push(check(
            &format!("conv2d_dilation{d}"),
            &[x.clone(), w.clone(), bias.clone()],
            &t,
            |g, v| g.conv2d(v[0], v[1], v[2], d),
            opts,
        )?);
    }
    out.push(check(
        "conv2d_per_item",
        &[x.clone(), w_items, bias_items],
        &t,
        |g, v| g.conv2d_with(v[0], v[1], v[2], 1, WeightSharing::PerItem),
        opts,
    )?);
    out.push(check("mix_kernels", &[att, k0, k1, k2], &t, |g, v| g.mix_kernels(v[0], &v[1..]), opts)?);
    out.push(check("pixel_shuffle_x2", &[shuf2], &t, |g, v| g.pixel_shuffle(v[0], 2), opts)?);
    out.push(check("pixel_shuffle_x3", &[shuf3], &t, |g, v| g.pixel_shuffle(v[0], 3), opts)?);
    out.push(check("concat_channels", &[a.clone(), c2], &t, |g, v| g.concat_channels(v[0], v[1]), opts)?);
    out.push(check("sum", std::slice::from_ref(&a), &t, |g, v| Ok(g.sum(v[0])), opts)?);
    out.push(check("mean_abs_error", &[kinked, offset], &t, |g, v| g.mean_abs_error(v[0], v[1]), opts)?);
    Ok(out)
}

fn rt_offset(t: &Tensor<f64>) -> Tensor<f64> {
    // Target differs from every prediction by at least 0.05.
    t.map(|v| v * 0.5 + if v > 0.0 { -0.05 } else { 0.05 })
}

/// Parameters with every tensor drawn at random, including the layers that
/// start at zero, so all gradient paths carry signal.
pub fn randomized_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet<f64>> {
    let mut params = ParameterSet::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") || name.contains(".attn.excite.") {
            let dist = Normal::new(0.0, 0.1).expect("std");
            t.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        if name.contains(".attn.excite.weight") {
            let dist = Normal::new(0.0, 0.05).expect("std");
            t.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Checks the full network of `config` on a random `1 x 3 x h x w` input
/// with respect to the input and every parameter.
pub fn network_check(config: &ModelConfig, h: usize, w: usize, tau: f64, opts: &GradcheckOptions) -> Result<CheckResult> {
    let params = randomized_params(config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let x = Tensor::from_vec(
        Shape::new(1, 3, h, w),
        (0..3 * h * w).map(|_| Uniform::new(0.0, 1.0).expect("range").sample(&mut rng)).collect(),
    )?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let flags = vec![true; inputs.len()];
    let cfg = *config;
    check(
        &format!("network_{}_x{}", config.variant, config.scale),
        &inputs,
        &flags,
        move |g, v| {
            let map: HashMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut tape = Tape::new(g, &map);
            model::adsrnet_forward(&mut tape, &cfg, &v[0], tau)
        },
        opts,
    )
}

/// Checks one dynamic layer (attention, aggregation and per-item conv together).
pub fn dynamic_check(kernels: usize, tau: f64, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(5));
    let c = 8;
    let hidden = c / 4;
    let prefix = "d";
    let mut names = Vec::new();
    let mut inputs = vec![random_tensor(&mut rng, Shape::new(2, c, 5, 6), 1.0)];
    for k in 0..kernels {
        names.push(dyn_names::kernel_weight(prefix, k));
        inputs.push(random_tensor(&mut rng, Shape::new(c, c, 3, 3), 0.3));
        names.push(dyn_names::kernel_bias(prefix, k));
        inputs.push(random_tensor(&mut rng, Shape::new(c, 1, 1, 1), 0.1));
    }
    for (n, s) in [
        (dyn_names::squeeze_weight(prefix), Shape::new(hidden, c, 1, 1)),
        (dyn_names::squeeze_bias(prefix), Shape::new(hidden, 1, 1, 1)),
        (dyn_names::excite_weight(prefix), Shape::new(kernels, hidden, 1, 1)),
        (dyn_names::excite_bias(prefix), Shape::new(kernels, 1, 1, 1)),
    ] {
        names.push(n);
        inputs.push(random_tensor(&mut rng, s, 1.0));
    }
    let flags = vec![true; inputs.len()];
    check(
        "dynamic_conv",
        &inputs,
        &flags,
        move |g, v| {
            let map: HashMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut tape = Tape::new(g, &map);
            dynamic_conv(&mut tape, prefix, &v[0], kernels, tau)
        },
        opts,
    )
}

/// Checks the symmetric lower branch alone, on a random `1 x 3 x 6 x 6` input.
pub fn slnet_check(opts: &GradcheckOptions) -> Result<CheckResult> {
    let config = ModelConfig::new(2, Variant::Full);
    let params = randomized_params(&config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(7));
    let x = random_tensor(&mut rng, Shape::new(1, 3, 6, 6), 1.0);
    let sl: Vec<(String, Tensor<f64>)> =
        params.iter().filter(|(n, _)| n.starts_with("slnet.")).map(|(n, t)| (n.to_string(), t.clone())).collect();
    let names: Vec<String> = sl.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(sl.into_iter().map(|(_, t)| t));
    let flags = vec![true; inputs.len()];
    check(
        "slnet",
        &inputs,
        &flags,
        move |g, v| {
            let map: HashMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut tape = Tape::new(g, &map);
            network::slnet_forward(&mut tape, &v[0], true)
        },
        opts,
    )
}

/// Every op, a dynamic layer, the lower branch and the network of `config`
/// on a `1 x 3 x 8 x 8` input.
pub fn full_suite(config: &ModelConfig, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(opts)?;
    results.push(dynamic_check(config.kernels, 2.0, opts)?);
    results.push(slnet_check(opts)?);
    results.push(network_check(config, 8, 8, 1.5, opts)?);
    Ok(results)
}

/// Tab-separated `op  max_rel_error  checked  skipped  status` table.
pub fn report(results: &[CheckResult], threshold: f64) -> String {
    let mut s = String::from("op\tmax_rel_error\tchecked\tskipped\tstatus\n");
    for r in results {
        let status = if r.passed(threshold) { "ok" } else { "FAIL" };
        s.push_str(&format!("{}\t{:.3e}\t{}\t{}\t{status}\n", r.name, r.max_rel_error, r.checked, r.skipped));
    }
    s
}
