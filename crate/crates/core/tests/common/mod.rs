#![allow(dead_code)]

use std::rc::Rc;

use rand::Rng;
use seedcd_core::exchange::{Axis, ExchangeSpec};
use seedcd_core::model::{ArchConfig, Backbone, Model, Pass};
use seedcd_core::rng::keyed_rng;
use seedcd_core::tensor::{Graph, Tensor, Var};
use seedcd_core::Result;

pub const STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-2)`. The floor keeps near-zero gradients from
/// turning central-difference rounding noise into large relative errors.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values in `±[0.05, 1]`, away from the ReLU kink.
pub fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `sum(r * op(inputs))` with respect to every input entry.
pub fn check_op(seed: u64, inputs: &[Tensor], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let probe = |xs: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input_with_grad(t)).collect();
        let y = op(&mut g, &vars).unwrap();
        let mut rng = keyed_rng(&[seed, 0xFD]);
        let r = random_tensor(&mut rng, g.shape(y));
        let r = g.input(&r);
        let p = g.mul(y, r).unwrap();
        let loss = g.sum(p).unwrap();
        (g, vars, loss)
    };
    let (g, vars, loss) = probe(inputs);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input gradient").to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + STEP;
            let (g1, _, l1) = probe(&xs);
            xs[i].data_mut()[k] = orig - STEP;
            let (g2, _, l2) = probe(&xs);
            xs[i].data_mut()[k] = orig;
            let numeric = (g1.scalar(l1) - g2.scalar(l2)) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub const OPS: [&str; 14] = [
    "add",
    "sub",
    "mul",
    "scalar",
    "conv2d",
    "avg_pool",
    "upsample",
    "depth_to_space",
    "relu",
    "sigmoid",
    "concat_channels",
    "mix",
    "sum_mean",
    "bce_with_logits",
];

/// One randomized finite-difference trial of the named op.
pub fn op_trial(op: &str, seed: u64) -> f64 {
    let mut rng = keyed_rng(&[seed, 0x0A5]);
    let c = rng.random_range(1..=3usize);
    let h = 2 * rng.random_range(1..=3usize);
    let w = 2 * rng.random_range(1..=3usize);
    let t = |rng: &mut _| random_tensor(rng, &[c, h, w]);
    match op {
        "add" => check_op(seed, &[t(&mut rng), t(&mut rng)], |g, v| g.add(v[0], v[1])),
        "sub" => check_op(seed, &[t(&mut rng), t(&mut rng)], |g, v| g.sub(v[0], v[1])),
        "mul" => check_op(seed, &[t(&mut rng), t(&mut rng)], |g, v| g.mul(v[0], v[1])),
        "scalar" => {
            let (s1, s2, s3) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            check_op(seed, &[t(&mut rng)], move |g, v| {
                use seedcd_core::tensor::ElementwiseKind::{Add, Mul, Sub};
                let x = g.elementwise(Mul, v[0], s1)?;
                let x = g.elementwise(Add, x, s2)?;
                g.elementwise(Sub, x, s3)
            })
        }
        "conv2d" => {
            let k = rng.random_range(1..=3usize);
            let (kh, stride, pad) = match rng.random_range(0..3) {
                0 => (1, 1, 0),
                1 => (3, 1, 1),
                _ => (2, 2, 0),
            };
            let x = t(&mut rng);
            let wt = random_tensor(&mut rng, &[k, c, kh, kh]);
            let b = random_tensor(&mut rng, &[k]);
            check_op(seed, &[x, wt, b], move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
        }
        "avg_pool" => check_op(seed, &[t(&mut rng)], |g, v| g.avg_pool(v[0], 2)),
        "upsample" => {
            let f = rng.random_range(2..=3usize);
            check_op(seed, &[t(&mut rng)], move |g, v| g.upsample(v[0], f))
        }
        "depth_to_space" => {
            let x = random_tensor(&mut rng, &[4 * c, h / 2, w / 2]);
            check_op(seed, &[x], |g, v| g.depth_to_space(v[0], 2))
        }
        "relu" => check_op(seed, &[off_kink(&mut rng, &[c, h, w])], |g, v| g.relu(v[0])),
        "sigmoid" => check_op(seed, &[random_tensor(&mut rng, &[c, h, w])], |g, v| g.sigmoid(v[0])),
        "concat_channels" => {
            let c2 = rng.random_range(1..=3usize);
            let a = t(&mut rng);
            let b = random_tensor(&mut rng, &[c2, h, w]);
            check_op(seed, &[a, b], |g, v| g.concat_channels(v[0], v[1]))
        }
        "mix" => {
            let mask: Rc<Vec<bool>> = Rc::new((0..c * h * w).map(|_| rng.random_bool(0.5)).collect());
            check_op(seed, &[t(&mut rng), t(&mut rng)], move |g, v| g.mix(v[0], v[1], mask.clone()))
        }
        "sum_mean" => check_op(seed, &[t(&mut rng), t(&mut rng)], |g, v| {
            let s = g.sum(v[0])?;
            let m = g.mean(v[1])?;
            g.add(s, m)
        }),
        "bce_with_logits" => {
            let z = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-4.0..4.0));
            let target = Tensor::from_fn(&[c, h, w], |_| f64::from(u8::from(rng.random_bool(0.4))));
            check_op(seed, &[z], move |g, v| g.bce_with_logits(v[0], &target))
        }
        other => panic!("no trial for {other}"),
    }
}

pub fn tiny_arch(head: &str, exchange: Option<ExchangeSpec>) -> ArchConfig {
    ArchConfig {
        backbone: Backbone {
            height: 8,
            width: 8,
            in_channels: 3,
            levels: 2,
            channels: vec![4, 6],
            neck_channels: 4,
            blocks: 1,
        },
        head: head.into(),
        exchange,
    }
}

/// The full model graph: worst relative error of parameter gradients of the
/// training loss against central differences, on `per_tensor` random entries
/// of every parameter tensor.
pub fn model_trial(cfg: ArchConfig, seed: u64, per_tensor: usize) -> f64 {
    let mut model = Model::new(cfg, seed).unwrap();
    let mut rng = keyed_rng(&[seed, 0xE2E]);
    // Random biases keep pre-activations away from exact ReLU kinks.
    for (name, t) in model.params_mut().iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let a = Tensor::from_fn(&[3, 8, 8], |_| rng.random::<f64>());
    let b = Tensor::from_fn(&[3, 8, 8], |_| rng.random::<f64>());
    let mask = Tensor::from_fn(&[1, 8, 8], |_| f64::from(u8::from(rng.random_bool(0.3))));
    let iteration = rng.random_range(0..100u64);
    let loss_of = |m: &Model| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &a, &b, Pass::train(iteration)).unwrap();
        let l = m.loss(&mut g, &out, &mask).unwrap();
        g.scalar(l)
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &a, &b, Pass::train(iteration)).unwrap();
    let l = model.loss(&mut g, &out, &mask).unwrap();
    let grads = g.backward(l).unwrap();
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let analytic = grads.param(&name).expect("every parameter has a gradient").to_vec();
        for _ in 0..per_tensor {
            let k = rng.random_range(0..analytic.len());
            let orig = model.params().get(&name).unwrap().data()[k];
            model.params_mut().get_mut(&name).unwrap().data_mut()[k] = orig + STEP;
            let up = loss_of(&model);
            model.params_mut().get_mut(&name).unwrap().data_mut()[k] = orig - STEP;
            let down = loss_of(&model);
            model.params_mut().get_mut(&name).unwrap().data_mut()[k] = orig;
            worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Every architecture family the zoo builds.
pub fn model_variants() -> Vec<(String, ArchConfig)> {
    let mut out: Vec<ArchConfig> = [Axis::Layer, Axis::Channel, Axis::SpatialCol, Axis::SpatialRow]
        .into_iter()
        .flat_map(|axis| {
            [
                tiny_arch("none", Some(ExchangeSpec::deterministic(axis, 2, 0))),
                tiny_arch("none", Some(ExchangeSpec::bernoulli(axis, 0.5, 9))),
            ]
        })
        .collect();
    out.push(tiny_arch("none", None));
    out.extend(["concat", "add", "subtract"].map(|f| tiny_arch(f, None)));
    out.into_iter().map(|c| (c.label(), c)).collect()
}
