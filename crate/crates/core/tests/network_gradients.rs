//! Central finite-difference checks of the three network backward passes at
//! f64, plus spectral normalization sanity checks.

use advtt::nets::{Adaptor, Discriminator, Segmentor};
use advtt::nn::{spectral_normalize, top_singular_value};
use advtt::nn::Module;
use advtt::seed::rng_for;
use advtt::Tensor;
use rand::Rng;

const H: f64 = 1e-6;

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "tensor");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn assert_close(analytic: f64, plus: f64, minus: f64, what: &str) {
    let fd = (plus - minus) / (2.0 * H);
    let rel = (analytic - fd).abs() / fd.abs().max(1e-4);
    assert!(rel < 1e-3, "{what}: analytic {analytic} vs numeric {fd}");
}

/// Checks parameter gradients of `m` for the scalar `loss(m)` every `stride` entries.
fn check_params<M: Module<f64> + Clone>(m: &M, grads: &[f64], stride: usize, loss: impl Fn(&M) -> f64, what: &str) {
    let theta = m.flat_values();
    assert_eq!(theta.len(), grads.len());
    for i in (0..theta.len()).step_by(stride) {
        let mut probe = m.clone();
        let mut t = theta.clone();
        t[i] += H;
        probe.set_flat_values(&t);
        let plus = loss(&probe);
        t[i] -= 2.0 * H;
        probe.set_flat_values(&t);
        assert_close(grads[i], plus, loss(&probe), &format!("{what} param {i}"));
    }
}

fn check_input(x: &Tensor<f64>, dx: &Tensor<f64>, stride: usize, loss: impl Fn(&Tensor<f64>) -> f64, what: &str) {
    for i in (0..x.len()).step_by(stride) {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += H;
        b.data_mut()[i] -= H;
        assert_close(dx.data()[i], loss(&a), loss(&b), &format!("{what} input {i}"));
    }
}

#[test]
fn adaptor_gradients() {
    let mut a = Adaptor::<f64>::new(4, &mut rng_for(1, "adaptor"));
    let x = random_tensor([2, 1, 8, 8], 2);
    let w = random_tensor([2, 1, 8, 8], 3);
    let loss = |a: &Adaptor<f64>, x: &Tensor<f64>| dot(&a.forward(x).0, &w);
    let (_, cache) = a.forward(&x);
    a.zero_grad();
    let dx = a.backward(&cache, &w, true, true).expect("input gradient requested");
    check_params(&a, &a.flat_grads(), 1, |m| loss(m, &x), "adaptor");
    check_input(&x, &dx, 3, |x| loss(&a, x), "adaptor");
}

#[test]
fn segmentor_gradients_in_training_mode() {
    for residual in [None, Some(2)] {
        let mut s = Segmentor::<f64>::new(2, 3, 3, residual, &mut rng_for(4, "segmentor"));
        let x = random_tensor([2, 1, 8, 8], 5);
        let wp = random_tensor([2, 3, 8, 8], 6);
        let wr = residual.map(|c| random_tensor([2, c, 4, 4], 7));
        let loss = |s: &Segmentor<f64>, x: &Tensor<f64>| {
            let out = s.forward(x, true).0;
            dot(&out.probs, &wp) + out.residual.as_ref().zip(wr.as_ref()).map_or(0.0, |(r, w)| dot(r, w))
        };
        let (_, cache) = s.forward(&x, true);
        s.zero_grad();
        let dx = s.backward(&cache, &wp, wr.as_ref(), true);
        check_params(&s, &s.flat_grads(), 7, |m| loss(m, &x), "segmentor");
        check_input(&x, &dx, 5, |x| loss(&s, x), "segmentor");
    }
}

#[test]
fn discriminator_gradients_with_and_without_smoothness() {
    for smooth in [true, false] {
        let mut d = Discriminator::<f64>::new(3, 16, 16, &[2, 3, 3, 3, 2], smooth, &mut rng_for(8, "disc"));
        let m = random_tensor([3, 3, 16, 16], 9);
        let ws = [0.7, -1.3, 0.4];
        let loss = |d: &Discriminator<f64>, m: &Tensor<f64>| d.forward(m).0.iter().zip(&ws).map(|(s, w)| s * w).sum::<f64>();
        let (_, cache) = d.forward(&m);
        d.zero_grad();
        let dm = d.backward(&cache, &ws, true);
        check_params(&d, &d.flat_grads(), 3, |x| loss(x, &m), "discriminator");
        check_input(&m, &dm, 11, |x| loss(&d, x), "discriminator");
    }
}

#[test]
fn spectral_normalization_of_a_known_matrix() {
    // diag(4, 2, 1) padded to 3×4
    let w = [4.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    assert!((top_singular_value(&w, 3, 4, 50) - 4.0).abs() < 1e-9);
    let n = spectral_normalize(&w, 3, 4, 50);
    assert!((top_singular_value(&n, 3, 4, 50) - 1.0).abs() < 1e-9);
    assert_eq!(spectral_normalize(&[0.0; 6], 2, 3, 5), vec![0.0; 6]);
}

#[test]
fn discriminator_layers_are_close_to_unit_norm() {
    let d = Discriminator::<f64>::new(3, 32, 32, &[8, 16, 16, 16, 8], true, &mut rng_for(10, "disc"));
    let (weights, _) = d.effective_weights();
    let shapes: Vec<(usize, usize)> =
        d.convs.iter().map(|c| (c.geom.out_ch, c.geom.patch_len())).chain(std::iter::once((1, d.fc.in_features))).collect();
    for (w, (r, c)) in weights.iter().zip(shapes) {
        let sigma = top_singular_value(w, r, c, 200);
        assert!((0.9..=1.1).contains(&sigma), "layer {r}x{c} has sigma {sigma}");
    }
}
