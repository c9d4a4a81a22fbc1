//! Seeded random networks and inputs for property and oracle tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowcert_core::nn::{Affine, Conv2d, Layer};
use shadowcert_core::{Network, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, a: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-a..=a)).collect()
}

fn affine(r: &mut ChaCha8Rng, inp: usize, out: usize) -> Layer {
    let a = 1.5 * (6.0 / (inp + out) as f32).sqrt();
    let w = Tensor::new(vec![out, inp], uniform(r, out * inp, a)).unwrap();
    let b = Tensor::new(vec![out], uniform(r, out, 0.2)).unwrap();
    Layer::Affine(Affine::new(w, b).unwrap())
}

fn conv(r: &mut ChaCha8Rng, c: usize, f: usize, k: usize, stride: usize, padding: usize) -> Layer {
    let a = 1.5 * (6.0 / ((c + f) * k * k) as f32).sqrt();
    let w = Tensor::new(vec![f, c, k, k], uniform(r, f * c * k * k, a)).unwrap();
    let b = Tensor::new(vec![f], uniform(r, f, 0.2)).unwrap();
    Layer::Conv2d(Conv2d::new(w, b, stride, padding).unwrap())
}

/// Small random network and its `(C, W, H)` input shape. Even seeds give
/// multilayer perceptrons, odd seeds convolutional nets.
pub fn random_network(seed: u64) -> (Network, Vec<usize>) {
    let mut r = rng(seed);
    let c = if r.random_bool(0.5) { 3 } else { 1 };
    let (w, h) = (r.random_range(3..=6), r.random_range(3..=6));
    let shape = vec![c, w, h];
    let classes = r.random_range(2..=5);
    let mut layers = Vec::new();
    let mut cur = shape.clone();
    if seed % 2 == 1 {
        let convs = r.random_range(1..=2);
        for _ in 0..convs {
            let k = r.random_range(2..=3).min(cur[1]).min(cur[2]);
            let f = r.random_range(2..=5);
            let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=1));
            let l = conv(&mut r, cur[0], f, k, stride, pad);
            cur = l.output_shape(&cur).unwrap();
            layers.push(l);
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Flatten);
    } else {
        layers.push(Layer::Flatten);
    }
    let mut width = cur.iter().product::<usize>();
    for _ in 0..r.random_range(1..=2) {
        let hidden = r.random_range(4..=12);
        layers.push(affine(&mut r, width, hidden));
        layers.push(Layer::Relu);
        width = hidden;
    }
    layers.push(affine(&mut r, width, classes));
    (Network::new(layers).unwrap(), shape)
}

/// Pixels uniform in `[lo, hi]`, exactly representable in `f32`.
pub fn random_image(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..=hi)).collect(),
    )
    .unwrap()
}
