//! Analytic gradients (first and second order) against central differences.

use panocube_autograd::nn::{BatchNorm, Conv2d, ConvTranspose2d, Ctx, Linear, ParamStore};
use panocube_autograd::{grad, ConvGeometry, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GEOM: ConvGeometry = ConvGeometry::new(4, 2, 1);

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-scale..scale)).collect(), shape)
}

struct TinyCritic {
    store: ParamStore<f64>,
    conv1: Conv2d,
    conv2: Conv2d,
    bn: BatchNorm,
    head: Linear,
}

impl TinyCritic {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, rng, "c1", 2, 3, GEOM, true);
        let conv2 = Conv2d::new(&mut store, rng, "c2", 3, 4, GEOM, false);
        let bn = BatchNorm::new(&mut store, rng, "bn", 4);
        let head = Linear::new(&mut store, rng, "fc", 4 * 2 * 2, 1);
        // Larger weights than the training init so the derivatives are not tiny.
        for v in store.values_mut() {
            *v = random(rng, v.shape(), 0.6);
        }
        Self { store, conv1, conv2, bn, head }
    }

    fn forward(&self, params: &[Var<f64>], x: &Var<f64>) -> Var<f64> {
        let mut ctx: Ctx<'_, f64, ChaCha8Rng> = Ctx::new(&self.store, params, true, None);
        let h = self.conv1.forward(&ctx, x).leaky_relu(0.2);
        let h = self.conv2.forward(&ctx, &h);
        let h = self.bn.forward(&mut ctx, &h).tanh();
        let n = h.shape()[0];
        self.head.forward(&ctx, &h.reshape(&[n, 16]))
    }

    /// Squared input-gradient norm: a second-order objective in the parameters.
    fn penalty(&self, params: &[Var<f64>], x: &Tensor<f64>) -> Var<f64> {
        let xv = Var::leaf(x.clone());
        let score = self.forward(params, &xv).sum();
        let g = grad(&score, &[xv], true)[0].clone().unwrap();
        let sq = g.mul(&g).reshape(&[x.shape()[0], x.numel() / x.shape()[0]]).sum_keep_axis(0);
        sq.sqrt().add_scalar(-1.0).mul(&sq.sqrt().add_scalar(-1.0)).mean()
    }
}

fn check_close(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    let rel = (analytic - numeric).abs() / denom;
    assert!(rel < 1e-4, "{what}: analytic {analytic} numeric {numeric} rel {rel}");
}

#[test]
fn first_order_input_and_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let critic = TinyCritic::new(&mut rng);
    let x = random(&mut rng, &[3, 2, 8, 8], 1.0);
    let params = critic.store.bind(true);
    let xv = Var::leaf(x.clone());
    let out = critic.forward(&params, &xv).mul(&critic.forward(&params, &xv)).sum();
    let mut wrt = params.clone();
    wrt.push(xv.clone());
    let grads = grad(&out, &wrt, false);

    let eval = |ps: &[Tensor<f64>], x: &Tensor<f64>| -> f64 {
        let mut store = critic.store.clone();
        for (v, p) in store.values_mut().iter_mut().zip(ps) {
            *v = p.clone();
        }
        let bound = store.bind(false);
        let c = TinyCritic { store: store.clone(), conv1: critic.conv1.clone(), conv2: critic.conv2.clone(), bn: critic.bn.clone(), head: critic.head.clone() };
        let y = c.forward(&bound, &Var::constant(x.clone()));
        y.value().data().iter().map(|v| v * v).sum()
    };
    let base: Vec<Tensor<f64>> = params.iter().map(|p| p.value().clone()).collect();
    let h = 1e-5;
    // Input coordinates.
    for &i in &[0usize, 37, 200, 383] {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&base, &plus) - eval(&base, &minus)) / (2.0 * h);
        check_close(grads.last().unwrap().as_ref().unwrap().value().data()[i], fd, "input");
    }
    // A few coordinates of every parameter tensor.
    for (pi, t) in base.iter().enumerate() {
        for &i in &[0usize, t.numel() / 2, t.numel() - 1] {
            let mut ps = base.clone();
            ps[pi].data_mut()[i] += h;
            let up = eval(&ps, &x);
            ps[pi].data_mut()[i] -= 2.0 * h;
            let down = eval(&ps, &x);
            let fd = (up - down) / (2.0 * h);
            check_close(grads[pi].as_ref().unwrap().value().data()[i], fd, &format!("param {pi}"));
        }
    }
}

#[test]
fn second_order_penalty_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let critic = TinyCritic::new(&mut rng);
    let x = random(&mut rng, &[2, 2, 8, 8], 1.0);
    let params = critic.store.bind(true);
    let pen = critic.penalty(&params, &x);
    let grads = grad(&pen, &params, false);

    let base: Vec<Tensor<f64>> = params.iter().map(|p| p.value().clone()).collect();
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut store = critic.store.clone();
        for (v, p) in store.values_mut().iter_mut().zip(ps) {
            *v = p.clone();
        }
        let c = TinyCritic { store, conv1: critic.conv1.clone(), conv2: critic.conv2.clone(), bn: critic.bn.clone(), head: critic.head.clone() };
        let bound = c.store.bind(true);
        c.penalty(&bound, &x).value().item()
    };
    let h = 1e-5;
    for (pi, t) in base.iter().enumerate() {
        for &i in &[0usize, t.numel() / 3, t.numel() - 1] {
            let mut ps = base.clone();
            ps[pi].data_mut()[i] += h;
            let up = eval(&ps);
            ps[pi].data_mut()[i] -= 2.0 * h;
            let down = eval(&ps);
            let fd = (up - down) / (2.0 * h);
            let analytic = grads[pi].as_ref().map(|g| g.value().data()[i]).unwrap_or(0.0);
            check_close(analytic, fd, &format!("param {pi}"));
        }
    }
}

#[test]
fn transposed_conv_second_order() {
    // d/dw of |d/dx sum(deconv(x, w)^2)|^2 exercises the adjoint chain
    // conv_transpose2d -> conv2d -> conv2d_weight_grad.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let layer = ConvTranspose2d::new(&mut store, &mut rng, "d", 2, 3, GEOM, true);
    for v in store.values_mut() {
        *v = random(&mut rng, v.shape(), 0.5);
    }
    let x = random(&mut rng, &[2, 2, 3, 3], 1.0);
    let objective = |store: &ParamStore<f64>, create: bool| -> (f64, Vec<Option<Var<f64>>>) {
        let params = store.bind(true);
        let ctx: Ctx<'_, f64, ChaCha8Rng> = Ctx::new(store, &params, true, None);
        let xv = Var::leaf(x.clone());
        let y = layer.forward(&ctx, &xv).tanh();
        let s = y.mul(&y).sum();
        let gx = grad(&s, &[xv], true)[0].clone().unwrap();
        let obj = gx.mul(&gx).sum();
        let g = if create { grad(&obj, &params, false) } else { Vec::new() };
        (obj.value().item(), g)
    };
    let (_, grads) = objective(&store, true);
    let h = 1e-5;
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    for (pi, name) in names.iter().enumerate() {
        let t = store.params().nth(pi).unwrap().1.clone();
        for &i in &[0usize, t.numel() - 1] {
            let mut up = t.clone();
            up.data_mut()[i] += h;
            let mut s1 = store.clone();
            s1.set(name, up).unwrap();
            let mut down = t.clone();
            down.data_mut()[i] -= h;
            let mut s2 = store.clone();
            s2.set(name, down).unwrap();
            let fd = (objective(&s1, false).0 - objective(&s2, false).0) / (2.0 * h);
            check_close(grads[pi].as_ref().unwrap().value().data()[i], fd, name);
        }
    }
}
