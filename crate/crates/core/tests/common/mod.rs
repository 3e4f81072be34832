#![allow(dead_code)]

use mea_core::nn::{Grads, ParamId, ParamStore, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `max |a - n| / max(max|a|, max|n|)`, the scale-relative worst deviation.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_input(x: &Tensor4<f64>, mut f: impl FnMut(&Tensor4<f64>) -> f64) -> Vec<f64> {
    let mut xp = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + FD_EPS;
            let up = f(&xp);
            xp.data_mut()[i] = orig - FD_EPS;
            let down = f(&xp);
            xp.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Central differences of `f` with respect to every trainable tensor.
pub fn fd_params(
    store: &mut ParamStore<f64>,
    mut f: impl FnMut(&mut ParamStore<f64>) -> f64,
) -> Vec<(ParamId, Vec<f64>)> {
    let ids: Vec<ParamId> = (0..store.len())
        .map(ParamId)
        .filter(|&id| store.get(id).trainable)
        .collect();
    let mut out = Vec::new();
    for id in ids {
        let len = store.value(id).len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + FD_EPS;
            let up = f(store);
            store.value_mut(id)[i] = orig - FD_EPS;
            let down = f(store);
            store.value_mut(id)[i] = orig;
            g.push((up - down) / (2.0 * FD_EPS));
        }
        out.push((id, g));
    }
    out
}

pub fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error over the input gradient and every parameter gradient.
pub fn worst_error(
    dx: &Tensor4<f64>,
    num_dx: &[f64],
    grads: &Grads<f64>,
    num_params: &[(ParamId, Vec<f64>)],
) -> f64 {
    let mut worst = relative_error(dx.data(), num_dx);
    for (id, num) in num_params {
        worst = worst.max(relative_error(grads.get(*id).unwrap(), num));
    }
    worst
}

use mea_core::nn::{
    concat_channels, mse_loss, split_channels, upsample_backward, upsample_to, Activation,
    BatchNorm2d, Conv2d, Dense, Layer, Sequential,
};
use rand::SeedableRng;

pub const LAYER_KINDS: [&str; 9] = [
    "conv2d",
    "dense",
    "batchnorm2d",
    "relu",
    "swish",
    "upsample_to",
    "concat_channels",
    "flatten",
    "mse",
];

/// Worst relative gradient error of one layer kind over `shapes` random
/// configurations.
pub fn gradcheck_kind(kind: &str, shapes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..shapes {
        let e = match kind {
            "conv2d" => {
                let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
                let stride = rng.gen_range(1..3);
                let padding = rng.gen_range(0..2);
                let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
                let b = rng.gen_range(1..3);
                let mut store = ParamStore::new();
                let conv =
                    Conv2d::new(&mut store, "c", cin, cout, stride, padding, &mut rng).unwrap();
                for v in store.value_mut(conv.bias) {
                    *v = rng.gen_range(-0.5..0.5);
                }
                check_layer(&mut rng, &mut store, Layer::Conv2d(conv), [b, cin, h, w])
            }
            "dense" => {
                let (nin, nout, b) = (
                    rng.gen_range(1..12),
                    rng.gen_range(1..9),
                    rng.gen_range(1..4),
                );
                let mut store = ParamStore::new();
                let d = Dense::new(&mut store, "d", nin, nout, &mut rng).unwrap();
                check_layer(&mut rng, &mut store, Layer::Dense(d), [b, nin, 1, 1])
            }
            "batchnorm2d" => {
                let c = rng.gen_range(1..4);
                let shape = [
                    rng.gen_range(1..4),
                    c,
                    rng.gen_range(2..5),
                    rng.gen_range(2..5),
                ];
                let mut store = ParamStore::new();
                let bn = BatchNorm2d::new(&mut store, "bn", c).unwrap();
                for v in store.value_mut(bn.gamma) {
                    *v = rng.gen_range(0.5..1.5);
                }
                for v in store.value_mut(bn.beta) {
                    *v = rng.gen_range(-0.5..0.5);
                }
                check_layer(&mut rng, &mut store, Layer::BatchNorm2d(bn), shape)
            }
            "relu" | "swish" => {
                let act = if kind == "relu" {
                    Activation::Relu
                } else {
                    Activation::Swish
                };
                let shape = random_shape(&mut rng);
                let mut store = ParamStore::new();
                // keep relu inputs away from the kink
                let x = random_tensor(&mut rng, shape);
                let x = if kind == "relu" {
                    let d = x
                        .data()
                        .iter()
                        .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
                        .collect();
                    Tensor4::from_vec(shape, d).unwrap()
                } else {
                    x
                };
                check_layer_at(&mut rng, &mut store, Layer::Activation(act), x)
            }
            "flatten" => {
                let shape = random_shape(&mut rng);
                let mut store = ParamStore::new();
                check_layer(&mut rng, &mut store, Layer::Flatten, shape)
            }
            "upsample_to" => {
                let [b, c, h, w] = random_shape(&mut rng);
                let (ho, wo) = (h + rng.gen_range(0..6), w + rng.gen_range(0..6));
                let x = random_tensor(&mut rng, [b, c, h, w]);
                let r = random_tensor(&mut rng, [b, c, ho, wo]);
                let dx = upsample_backward(&r, h, w).unwrap();
                let num = fd_input(&x, |x| dot(&upsample_to(x, ho, wo).unwrap(), &r));
                relative_error(dx.data(), &num)
            }
            "concat_channels" => {
                let [b, ca, h, w] = random_shape(&mut rng);
                let cb = rng.gen_range(1..3);
                let a = random_tensor(&mut rng, [b, ca, h, w]);
                let bt = random_tensor(&mut rng, [b, cb, h, w]);
                let r = random_tensor(&mut rng, [b, ca + cb, h, w]);
                let (da, db) = split_channels(&r, ca).unwrap();
                let na = fd_input(&a, |a| dot(&concat_channels(a, &bt).unwrap(), &r));
                let nb = fd_input(&bt, |bt| dot(&concat_channels(&a, bt).unwrap(), &r));
                relative_error(da.data(), &na).max(relative_error(db.data(), &nb))
            }
            "mse" => {
                let shape = random_shape(&mut rng);
                let p = random_tensor(&mut rng, shape);
                let t = random_tensor(&mut rng, shape);
                let (_, g) = mse_loss(&p, &t).unwrap();
                let num = fd_input(&p, |p| mse_loss(p, &t).unwrap().0);
                relative_error(g.data(), &num)
            }
            other => panic!("unknown layer kind {other}"),
        };
        worst = worst.max(e);
    }
    worst
}

fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.gen_range(1..3),
        rng.gen_range(1..4),
        rng.gen_range(1..6),
        rng.gen_range(1..6),
    ]
}

fn check_layer(
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore<f64>,
    layer: Layer,
    shape: [usize; 4],
) -> f64 {
    let x = random_tensor(rng, shape);
    check_layer_at(rng, store, layer, x)
}

/// Loss `sum(r * layer(x))` in training mode, analytic vs numeric.
fn check_layer_at(
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore<f64>,
    layer: Layer,
    x: Tensor4<f64>,
) -> f64 {
    let mut seq = Sequential::new(vec![layer]);
    let y = seq.forward_train(store, x.clone()).unwrap();
    let r = random_tensor(rng, y.shape());
    let mut grads = store.zero_grads();
    let dx = seq.backward(store, r.clone(), &mut grads).unwrap();
    let mut probe = Sequential::new(seq.layers.clone());
    let num_dx = {
        let mut s = store.clone();
        fd_input(&x, |x| {
            dot(&probe.forward_train(&mut s, x.clone()).unwrap(), &r)
        })
    };
    let num_params = fd_params(store, |s| {
        dot(&probe.forward_train(s, x.clone()).unwrap(), &r)
    });
    worst_error(&dx, &num_dx, &grads, &num_params)
}
