use std::collections::HashMap;

use adsrnet_core::backend::Tape;
use adsrnet_core::gradcheck::{self, check, randomized_params, GradcheckOptions};
use adsrnet_core::graph::{Graph, Var};
use adsrnet_core::model::{self, Model};
use adsrnet_core::{ModelConfig, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn every_op_passes() {
    for seed in 0..3 {
        let opts = GradcheckOptions { seed, ..Default::default() };
        for r in gradcheck::op_suite(&opts).unwrap() {
            assert!(r.passed(1e-4), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn full_network_suite_passes() {
    let opts = GradcheckOptions::default();
    let results = gradcheck::full_suite(&ModelConfig::new(2, Variant::Full), &opts).unwrap();
    let table = gradcheck::report(&results, opts.threshold);
    assert!(results.iter().all(|r| r.passed(1e-4)), "{table}");
    assert!(table.starts_with("op\tmax_rel_error\tchecked\tskipped\tstatus\n"));
}

#[test]
fn every_variant_passes() {
    let opts = GradcheckOptions { samples: 2, seed: 1, ..Default::default() };
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::Full) {
        let r = gradcheck::network_check(&ModelConfig::new(2, v), 6, 6, 1.5, &opts).unwrap();
        assert!(r.passed(1e-4), "{v}: {r:?}");
    }
    for s in [3, 4] {
        let r = gradcheck::network_check(&ModelConfig::new(s, Variant::HbPlain), 4, 4, 1.0, &opts).unwrap();
        assert!(r.passed(1e-4), "x{s}: {r:?}");
    }
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let config = ModelConfig::new(2, Variant::SixCruCb);
    let params = randomized_params(&config, 4).unwrap();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let x = uniform([2, 3, 5, 5], 5);
    let target = uniform([2, 3, 10, 10], 6);
    let mut inputs = vec![x, target];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let mut flags = vec![true; inputs.len()];
    flags[1] = false;
    let r = check(
        "mae_network",
        &inputs,
        &flags,
        |g, v| {
            let map: HashMap<String, Var> = names.iter().cloned().zip(v[2..].iter().copied()).collect();
            let out = {
                let mut tape = Tape::new(g, &map);
                model::adsrnet_forward(&mut tape, &config, &v[0], 1.0)?
            };
            g.mean_abs_error(out, v[1])
        },
        &GradcheckOptions { samples: 3, ..Default::default() },
    )
    .unwrap();
    assert!(r.passed(1e-4), "{r:?}");
}

fn loss_grads<T: adsrnet_core::Scalar>(model: &Model<T>, x: &Tensor<f64>, y: &Tensor<f64>) -> Vec<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let input = g.constant(x.cast());
    let target = g.constant(y.cast());
    let (bindings, out) = model.forward_on(&mut g, input, 1.0).unwrap();
    let loss = g.mean_abs_error(out, target).unwrap();
    g.backward(loss).unwrap();
    bindings
        .take_grads(&mut g)
        .into_iter()
        .map(|gr| gr.unwrap().iter().map(|v| v.to_f64().unwrap()).collect())
        .collect()
}

#[test]
fn single_precision_gradients_track_double() {
    let config = ModelConfig::new(2, Variant::Full);
    let m64 = Model::from_params(config, randomized_params(&config, 7).unwrap()).unwrap();
    let m32: Model<f32> = m64.cast();
    let x = uniform([1, 3, 6, 6], 8);
    let y = uniform([1, 3, 12, 12], 9);
    let (g64, g32) = (loss_grads(&m64, &x, &y), loss_grads(&m32, &x, &y));
    for (name, (a, b)) in m64.params.names().zip(g64.iter().zip(&g32)) {
        let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * norm.max(1e-6), "{name}: {diff} vs {norm}");
    }
}
