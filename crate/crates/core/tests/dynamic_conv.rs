use adsrnet_core::backend::Eager;
use adsrnet_core::conv::{self, WeightSharing};
use adsrnet_core::dynamic::{attention, dynamic_conv, names, temperature_at, TemperatureSchedule};
use adsrnet_core::gradcheck::{self, GradcheckOptions};
use adsrnet_core::{ParameterSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: &str = "layer";

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

struct Layer {
    weights: Vec<Tensor<f64>>,
    biases: Vec<Tensor<f64>>,
    sw: Tensor<f64>,
    sb: Tensor<f64>,
    ew: Tensor<f64>,
    eb: Tensor<f64>,
}

impl Layer {
    fn random(c: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = c / 4;
        Self {
            weights: (0..k).map(|_| random([c, c, 3, 3], &mut rng, 0.2)).collect(),
            biases: (0..k).map(|_| random([c, 1, 1, 1], &mut rng, 0.2)).collect(),
            sw: random([h, c, 1, 1], &mut rng, 1.0),
            sb: random([h, 1, 1, 1], &mut rng, 0.5),
            ew: random([k, h, 1, 1], &mut rng, 1.0),
            eb: random([k, 1, 1, 1], &mut rng, 0.5),
        }
    }

    fn params(&self) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            p.insert(names::kernel_weight(P, i), w.clone()).unwrap();
            p.insert(names::kernel_bias(P, i), b.clone()).unwrap();
        }
        p.insert(names::squeeze_weight(P), self.sw.clone()).unwrap();
        p.insert(names::squeeze_bias(P), self.sb.clone()).unwrap();
        p.insert(names::excite_weight(P), self.ew.clone()).unwrap();
        p.insert(names::excite_bias(P), self.eb.clone()).unwrap();
        p
    }

    fn forward(&self, x: &Tensor<f64>, tau: f64) -> Tensor<f64> {
        let params = self.params();
        let mut e = Eager::new(&params);
        let xv = e.input(x.clone());
        dynamic_conv(&mut e, P, &xv, self.weights.len(), tau).unwrap().into_tensor()
    }

    fn attention(&self, x: &Tensor<f64>, tau: f64) -> Tensor<f64> {
        let params = self.params();
        let mut e = Eager::new(&params);
        let xv = e.input(x.clone());
        attention(&mut e, P, &xv, tau).unwrap().into_tensor()
    }
}

/// Hand-written attention, explicit kernel aggregation and a loop convolution.
fn explicit_oracle(layer: &Layer, x: &Tensor<f64>, tau: f64) -> Vec<f64> {
    let s = x.shape();
    let (c, h, w) = (s.c(), s.h(), s.w());
    let k = layer.weights.len();
    let hidden = layer.sw.shape().n();
    let mut out = Vec::new();
    for n in 0..s.n() {
        let pooled: Vec<f64> =
            (0..c).map(|ch| (0..h * w).map(|i| x.at(n, ch, i / w, i % w)).sum::<f64>() / (h * w) as f64).collect();
        let z: Vec<f64> = (0..hidden)
            .map(|j| {
                let v = layer.sb.data()[j] + (0..c).map(|i| layer.sw.data()[j * c + i] * pooled[i]).sum::<f64>();
                v.max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..k)
            .map(|m| layer.eb.data()[m] + (0..hidden).map(|j| layer.ew.data()[m * hidden + j] * z[j]).sum::<f64>())
            .collect();
        let exps: Vec<f64> = logits.iter().map(|l| (l / tau).exp()).collect();
        let total: f64 = exps.iter().sum();
        let pi: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut wagg = vec![0.0; c * c * 9];
        let mut bagg = vec![0.0; c];
        for m in 0..k {
            for (a, v) in wagg.iter_mut().zip(layer.weights[m].data()) {
                *a += pi[m] * v;
            }
            for (a, v) in bagg.iter_mut().zip(layer.biases[m].data()) {
                *a += pi[m] * v;
            }
        }
        for o in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bagg[o];
                    for i in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wagg[((o * c + i) * 3 + ky) * 3 + kx] * x.at(n, i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_explicit_aggregation_oracle() {
    let layer = Layer::random(64, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random([1, 64, 2, 2], &mut rng, 1.0);
    for tau in [1.0, 7.5, 30.0] {
        let got = layer.forward(&x, tau);
        assert!(max_diff(got.data(), &explicit_oracle(&layer, &x, tau)) < 1e-6, "tau {tau}");
    }
    let layer = Layer::random(8, 4, 3);
    let x = random([3, 8, 5, 4], &mut rng, 1.0);
    assert!(max_diff(layer.forward(&x, 2.0).data(), &explicit_oracle(&layer, &x, 2.0)) < 1e-9);
}

fn plain_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    conv::conv2d_forward(x, w, b, 1, WeightSharing::Shared).unwrap()
}

#[test]
fn single_kernel_is_plain_conv() {
    let layer = Layer::random(8, 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random([2, 8, 4, 4], &mut rng, 1.0);
    let expect = plain_conv(&x, &layer.weights[0], &layer.biases[0]);
    assert!(layer.forward(&x, 3.0).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn identical_kernels_ignore_attention() {
    let mut layer = Layer::random(8, 3, 6);
    for i in 1..3 {
        layer.weights[i] = layer.weights[0].clone();
        layer.biases[i] = layer.biases[0].clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random([2, 8, 3, 5], &mut rng, 1.0);
    let expect = plain_conv(&x, &layer.weights[0], &layer.biases[0]);
    assert!(layer.forward(&x, 1.0).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn zero_excite_gives_uniform_attention_and_mean_kernel() {
    let mut layer = Layer::random(8, 4, 8);
    layer.ew = Tensor::zeros(layer.ew.shape());
    layer.eb = Tensor::zeros(layer.eb.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random([2, 8, 4, 3], &mut rng, 1.0);
    let att = layer.attention(&x, 5.0);
    assert!(att.data().iter().all(|&v| v == 0.25));
    let mean = |ts: &[Tensor<f64>]| {
        let mut acc = Tensor::zeros(ts[0].shape());
        for t in ts {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v / ts.len() as f64;
            }
        }
        acc
    };
    let expect = plain_conv(&x, &mean(&layer.weights), &mean(&layer.biases));
    assert!(layer.forward(&x, 5.0).max_abs_diff(&expect) < 1e-6);
}

#[test]
fn permuting_kernels_with_excite_rows_is_invariant() {
    let layer = Layer::random(8, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random([2, 8, 4, 4], &mut rng, 1.0);
    let perm = [2usize, 0, 3, 1];
    let hidden = layer.ew.shape().c();
    let mut permuted = Layer {
        weights: perm.iter().map(|&i| layer.weights[i].clone()).collect(),
        biases: perm.iter().map(|&i| layer.biases[i].clone()).collect(),
        sw: layer.sw.clone(),
        sb: layer.sb.clone(),
        ew: layer.ew.clone(),
        eb: layer.eb.clone(),
    };
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..hidden {
            permuted.ew.data_mut()[dst * hidden + j] = layer.ew.data()[src * hidden + j];
        }
        permuted.eb.data_mut()[dst] = layer.eb.data()[src];
    }
    assert!(layer.forward(&x, 1.5).max_abs_diff(&permuted.forward(&x, 1.5)) < 1e-6);
}

#[test]
fn channel_mismatch_is_rejected() {
    let layer = Layer::random(8, 2, 12);
    let params = layer.params();
    let mut e = Eager::new(&params);
    let x = e.input(Tensor::zeros([1, 4, 3, 3]));
    assert!(dynamic_conv(&mut e, P, &x, 2, 1.0).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let opts = GradcheckOptions { samples: 6, ..Default::default() };
    for (k, tau) in [(4, 1.0), (2, 30.0)] {
        let r = gradcheck::dynamic_check(k, tau, &opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "K={k}: {r:?}");
    }
}

#[test]
fn temperature_schedule_examples() {
    let s = TemperatureSchedule::new(30.0, 1.0, 1_000).unwrap();
    assert_eq!(temperature_at(0, &s).unwrap(), 30.0);
    assert_eq!(temperature_at(1_000, &s).unwrap(), 1.0);
    assert_eq!(temperature_at(50_000, &s).unwrap(), 1.0);
    assert!((temperature_at(500, &s).unwrap() - 15.5).abs() < 1e-9);
    assert!(TemperatureSchedule::new(0.0, 1.0, 10).is_err());
    assert!(TemperatureSchedule::new(30.0, -1.0, 10).is_err());
    assert!(TemperatureSchedule::new(30.0, 1.0, 0).is_err());
    let run = TemperatureSchedule::for_run(30.0, 1.0, 0.1, 10_000).unwrap();
    assert_eq!(run.anneal_steps, 1_000);
    assert_eq!(TemperatureSchedule::for_run(30.0, 1.0, 0.1, 3).unwrap().anneal_steps, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_is_a_distribution(seed in 0u64..10_000, tau in 0.1f64..50.0, k in 1usize..6) {
        let layer = Layer::random(8, k, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = random([3, 8, 3, 3], &mut rng, 5.0);
        let att = layer.attention(&x, tau);
        prop_assert_eq!(att.shape().c(), k);
        for row in att.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
