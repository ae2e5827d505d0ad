use balistd_core::nn::fft::{irfft2, rfft2};
use balistd_core::nn::{ParamSet, Tensor};
use balistd_core::rng;
use balistd_core::sfim::{sfim_forward, FrequencyStage, Sfim};
use proptest::prelude::*;
use rand::Rng as _;

fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[test]
fn large_feature_round_trip() {
    let x = rand_tensor([1, 8, 64, 64], 11);
    assert!(irfft2(&rfft2(&x)).max_abs_diff(&x) <= 1e-5);
}

#[test]
fn identity_module_reproduces_input() {
    let mut m = Sfim::new("m", 8, true, &mut rng::rng(1));
    m.frequency = Some(FrequencyStage::identity("m", 8));
    m.residual.zero_branch();
    let x = rand_tensor([1, 8, 64, 64], 12);
    assert!(sfim_forward(&x, &m).unwrap().max_abs_diff(&x) <= 1e-5);
}

#[test]
fn gradients_match_finite_differences() {
    let x = rand_tensor([1, 2, 4, 4], 3);
    let w = rand_tensor([1, 2, 4, 4], 4);
    let mut m = Sfim::new("m", 2, true, &mut rng::rng(5));
    // Nonzero weights everywhere so no gradient path is trivially dead.
    let vals: Vec<f64> = m.flat_values().iter().enumerate().map(|(i, v)| v + 0.05 * ((i % 7) as f64 - 3.0)).collect();
    m.set_flat_values(&vals);

    let (_, cache) = m.forward(&x).unwrap();
    m.zero_grad();
    let gx = m.backward(&cache, &w);
    let gp = m.flat_grads();

    let h = 1e-6;
    let loss = |m: &Sfim, x: &Tensor| dot(&sfim_forward(x, m).unwrap(), &w);
    let mut fd_x = vec![0.0; x.data.len()];
    for i in 0..x.data.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data[i] += h;
        b.data[i] -= h;
        fd_x[i] = (loss(&m, &a) - loss(&m, &b)) / (2.0 * h);
    }
    let mut fd_p = vec![0.0; vals.len()];
    for i in 0..vals.len() {
        let mut probe = m.clone();
        let mut v = vals.clone();
        v[i] += h;
        probe.set_flat_values(&v);
        let up = loss(&probe, &x);
        v[i] -= 2.0 * h;
        probe.set_flat_values(&v);
        fd_p[i] = (up - loss(&probe, &x)) / (2.0 * h);
    }
    assert!(rel_err(&gx.data, &fd_x) <= 1e-3, "input {}", rel_err(&gx.data, &fd_x));
    assert!(rel_err(&gp, &fd_p) <= 1e-3, "params {}", rel_err(&gp, &fd_p));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_any_shape(h in 1usize..20, w in 1usize..20, c in 1usize..4, seed in any::<u64>()) {
        let x = rand_tensor([1, c, h, w], seed);
        prop_assert!(irfft2(&rfft2(&x)).max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn transform_is_linear(seed in any::<u64>(), s in -3.0f64..3.0) {
        let a = rand_tensor([1, 2, 6, 9], seed);
        let b = rand_tensor([1, 2, 6, 9], seed ^ 1);
        let mut combo = a.clone();
        combo.scale(s);
        combo.add_assign(&b);
        let (fa, fb, fc) = (rfft2(&a), rfft2(&b), rfft2(&combo));
        for j in 0..fc.real.data.len() {
            prop_assert!((fc.real.data[j] - (s * fa.real.data[j] + fb.real.data[j])).abs() < 1e-9);
            prop_assert!((fc.imag.data[j] - (s * fa.imag.data[j] + fb.imag.data[j])).abs() < 1e-9);
        }
    }
}
