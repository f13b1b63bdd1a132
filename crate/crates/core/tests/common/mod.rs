//! Reference computations shared by the oracle, gradient and acceptance
//! suites. Each returns a measured error so callers pick their own bound.
#![allow(dead_code)]

use dilam::autodiff::{NormMode, Tape, Var};
use dilam::model::{build_model, ModelConfig, Regime};
use dilam::optim::{Parameter, Sgd, SgdConfig};
use dilam::stats::{alignment_loss, collect_clear_stats, Welford};
use dilam::taskid::vote;
use dilam::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const H: f64 = 1e-5;
pub const INSTANCES: u64 = 20;

pub fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

fn r64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape)
}

/// Values whose magnitude stays at least 0.05 away from zero, so no
/// finite-difference probe crosses the kink of relu or abs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    r64(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Distinct values spaced 0.01 apart in random order, so max-pool winners
/// cannot change under a probe.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
pub type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>);

/// Scalar loss `sum(f(inputs) * r)` with a fixed random projection `r`
/// when `f` returns a tensor.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 && tape.shape(out).is_empty() {
        return Ok(out);
    }
    let r = r64(&mut ChaCha8Rng::seed_from_u64(seed), tape.shape(out));
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn loss_value(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let l = project(&mut tape, out, seed).unwrap();
    tape.value(l).item()
}

/// Largest elementwise relative error between analytic and numeric
/// gradients over all inputs.
fn max_rel_error(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let l = project(&mut tape, out, seed).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every input reaches the loss");
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric =
                (loss_value(build, &plus, seed) - loss_value(build, &minus, seed)) / (2.0 * H);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst relative error of a primitive over `INSTANCES` random instances.
pub fn worst_gradient_error(case: Case) -> f64 {
    (0..INSTANCES)
        .map(|i| {
            let (inputs, build) = case(&mut ChaCha8Rng::seed_from_u64(1000 + i));
            max_rel_error(&*build, &inputs, 77 + i)
        })
        .fold(0.0, f64::max)
}

fn conv2d(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, c, k) = (
        rng.random_range(1..3),
        rng.random_range(1..3),
        rng.random_range(1..3),
    );
    let (h, w) = (rng.random_range(3..6), rng.random_range(3..6));
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..2);
    let bias = rng.random_bool(0.5);
    let mut inputs = vec![r64(rng, &[n, c, h, w]), r64(rng, &[k, c, 3, 3])];
    if bias {
        inputs.push(r64(rng, &[k]));
    }
    (
        inputs,
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
        }),
    )
}

fn linear(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, d, m) = (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..4),
    );
    let bias = rng.random_bool(0.5);
    let mut inputs = vec![r64(rng, &[n, d]), r64(rng, &[m, d])];
    if bias {
        inputs.push(r64(rng, &[m]));
    }
    (
        inputs,
        Box::new(|t: &mut Tape<f64>, v: &[Var]| t.linear(v[0], v[1], v.get(2).copied())),
    )
}

fn small_matrix(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.random_range(1..4), rng.random_range(1..5)]
}

fn relu(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = small_matrix(rng);
    (
        vec![away_from_zero(rng, &shape)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| t.relu(v[0])),
    )
}

fn abs(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = small_matrix(rng);
    (
        vec![away_from_zero(rng, &shape)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| t.abs(v[0])),
    )
}

fn max_pool2d(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [
        rng.random_range(1..3),
        rng.random_range(1..3),
        4,
        rng.random_range(2..5) * 2,
    ];
    (
        vec![distinct(rng, &shape)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| t.max_pool2d(v[0], 2, 2)),
    )
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..4),
    ];
    (
        vec![r64(rng, &shape)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| t.global_avg_pool(v[0])),
    )
}

fn norm_case(rng: &mut ChaCha8Rng, mode: u8) -> (Vec<Tensor<f64>>, Box<Build>) {
    let n = rng.random_range(2..4);
    let c = 2 * rng.random_range(1..3);
    let shape = [n, c, rng.random_range(1..4), rng.random_range(1..4)];
    let x = r64(rng, &shape);
    let gamma = r64(rng, &[c]).map(|v| v + 1.5);
    let beta = r64(rng, &[c]);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    (
        vec![x, gamma, beta],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let m = match mode {
                0 => NormMode::BatchStats,
                1 => NormMode::Frozen {
                    mean: &mean,
                    var: &var,
                },
                _ => NormMode::Group { groups: 2 },
            };
            t.norm(v[0], v[1], v[2], m, 1e-5)
        }),
    )
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, m) = (rng.random_range(1..5), rng.random_range(2..5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    (
        vec![r64(rng, &[n, m]).map(|v| 3.0 * v)],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &labels)),
    )
}

fn binary(rng: &mut ChaCha8Rng, op: u8) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [rng.random_range(1..4), rng.random_range(1..4)];
    (
        vec![r64(rng, &shape), r64(rng, &shape)],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| match op {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        }),
    )
}

fn unary(rng: &mut ChaCha8Rng, op: u8) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [
        rng.random_range(2..5),
        rng.random_range(1..3),
        rng.random_range(1..3),
    ];
    let f = rng.random_range(-2.0..2.0);
    (
        vec![r64(rng, &shape)],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| match op {
            0 => t.scale(v[0], f),
            1 => t.sum(v[0]),
            2 => t.mean(v[0]),
            3 => t.batch_mean(v[0]),
            _ => t.batch_var(v[0]),
        }),
    )
}

/// Every differentiable primitive with its instance generator.
pub fn gradient_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d),
        ("linear", linear),
        ("relu", relu),
        ("abs", abs),
        ("max_pool2d", max_pool2d),
        ("global_avg_pool", global_avg_pool),
        ("norm/batch", |r| norm_case(r, 0)),
        ("norm/frozen", |r| norm_case(r, 1)),
        ("norm/group", |r| norm_case(r, 2)),
        ("softmax_cross_entropy", softmax_cross_entropy),
        ("add", |r| binary(r, 0)),
        ("sub", |r| binary(r, 1)),
        ("mul", |r| binary(r, 2)),
        ("scale", |r| unary(r, 0)),
        ("sum", |r| unary(r, 1)),
        ("mean", |r| unary(r, 2)),
        ("batch_mean", |r| unary(r, 3)),
        ("batch_var", |r| unary(r, 4)),
    ]
}

#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [k, _, r, s] = ws;
    let oh = (h + 2 * pad - r) / stride + 1;
    let ow = (wd + 2 * pad - s) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[ki]);
                    for ci in 0..c {
                        for dy in 0..r {
                            for dx in 0..s {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((ki * c + ci) * r + dy) * s + dx];
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Worst absolute deviation of the library convolution from the naive
/// loops over 20 random shapes, in f32 and in f64.
pub fn conv_oracle_error() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut e32, mut e64): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let xs = [
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(3..10),
            rng.random_range(3..10),
        ];
        let ws = [rng.random_range(1..6), xs[1], 3, 3];
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let x64 = r64(&mut rng, &xs);
        let w64 = r64(&mut rng, &ws);
        let b64 = r64(&mut rng, &[ws[0]]);
        let expected = naive_conv(
            x64.data(),
            xs,
            w64.data(),
            ws,
            Some(b64.data()),
            stride,
            pad,
        );

        let mut tape = Tape::<f32>::new();
        let (x, w, b) = (
            tape.constant(x64.cast()),
            tape.constant(w64.cast()),
            tape.constant(b64.cast()),
        );
        let y = tape.conv2d(x, w, Some(b), stride, pad).unwrap();
        assert_eq!(tape.value(y).len(), expected.len());
        for (g, e) in tape.value(y).data().iter().zip(&expected) {
            e32 = e32.max((*g as f64 - e).abs());
        }

        let mut tape = Tape::<f64>::new();
        let (x, w) = (tape.constant(x64.clone()), tape.constant(w64.clone()));
        let y = tape.conv2d(x, w, None, stride, pad).unwrap();
        let expected = naive_conv(x64.data(), xs, w64.data(), ws, None, stride, pad);
        for (g, e) in tape.value(y).data().iter().zip(&expected) {
            e64 = e64.max((g - e).abs());
        }
    }
    (e32, e64)
}

/// Worst absolute deviation of the f32 fully connected layer from a
/// naive f64 dot product over 20 random shapes.
pub fn linear_oracle_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, d, m) = (
            rng.random_range(1..9),
            rng.random_range(1..40),
            rng.random_range(1..9),
        );
        let x = r64(&mut rng, &[n, d]);
        let w = r64(&mut rng, &[m, d]);
        let b = r64(&mut rng, &[m]);
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (
            tape.constant(x.cast()),
            tape.constant(w.cast()),
            tape.constant(b.cast()),
        );
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        for i in 0..n {
            for j in 0..m {
                let e: f64 = b.data()[j]
                    + (0..d)
                        .map(|k| x.data()[i * d + k] * w.data()[j * d + k])
                        .sum::<f64>();
                worst = worst.max((tape.value(y).data()[i * m + j] as f64 - e).abs());
            }
        }
    }
    worst
}

/// Worst deviation of streaming moments from the two-pass formula on data
/// with a large common offset, where naive sum-of-squares loses precision.
pub fn welford_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Vec<f64>> = (0..5000)
        .map(|_| {
            (0..3)
                .map(|j| 1e4 * j as f64 + rng.random_range(-2.0..2.0))
                .collect()
        })
        .collect();
    let mut w = Welford::new(3);
    xs.iter().for_each(|x| w.push(x));
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let mean = xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        worst = worst
            .max((w.mean()[j] - mean).abs())
            .max((w.variance()[j] - var).abs());
    }
    worst
}

/// Exact probability that the vote names class 0 when each of 8 i.i.d.
/// frames is correct with probability `p` and otherwise shows one of the
/// wrong classes drawn from `wrong`, by enumerating all outcomes.
pub fn vote_accuracy_exact(p: f64, wrong: &[f64]) -> f64 {
    let k = wrong.len() + 1;
    let probs: Vec<f64> = std::iter::once(p)
        .chain(wrong.iter().map(|w| (1.0 - p) * w))
        .collect();
    let mut total = 0.0;
    let mut window = [0usize; 8];
    for code in 0..k.pow(8) {
        let mut c = code;
        let mut prob = 1.0;
        for slot in window.iter_mut() {
            *slot = c % k;
            c /= k;
            prob *= probs[*slot];
        }
        if vote(window) == Some(0) {
            total += prob;
        }
    }
    total
}

/// Simulated counterpart of `vote_accuracy_exact` with errors spread
/// uniformly over three wrong classes.
pub fn vote_accuracy_monte_carlo(p: f64, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..trials {
        let w: Vec<usize> = (0..8)
            .map(|_| {
                if rng.random_bool(p) {
                    0
                } else {
                    rng.random_range(1..4)
                }
            })
            .collect();
        hits += (vote(w) == Some(0)) as usize;
    }
    hits as f64 / trials as f64
}

/// Outcome of comparing the alignment-loss gradient of the last norm layer
/// with its hand derivation.
pub struct AffineGradientCheck {
    pub worst_relative_error: f64,
    pub only_selected_layer: bool,
}

/// With frozen statistics the layer output is `y = gamma * xhat + beta`
/// per channel, so for element `e` of channel `c` the batch mean is
/// `gamma m_e + beta` and the batch variance `gamma^2 v_e`, where `m_e`
/// and `v_e` are the moments of `xhat`.
pub fn terminal_norm_affine_gradient() -> AffineGradientCheck {
    let config = ModelConfig {
        input_size: [3, 16, 16],
        widths: vec![4, 6],
        ..Default::default()
    };
    let mut model = build_model::<f64>(&config, 4).unwrap();
    let last = model.norms().len() - 1;
    let channels = model.norms()[last].channels;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g: Vec<f64> = (0..channels).map(|_| rng.random_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.3..0.3)).collect();
    model.set_affine(last, &g, &b).unwrap();
    let clear = r64(&mut rng, &[24, 3, 16, 16]).map(|v| 0.5 + 0.4 * v);
    let stats = collect_clear_stats(&model, &clear, 24).unwrap();
    let shifted = r64(&mut rng, &[12, 3, 16, 16]).map(|v| 0.7 + 0.2 * v);

    model.train_only_affine(&[last]);
    model.zero_grads();
    let mut pass = model.pass(Regime::Eval, true);
    let x = model.input(&mut pass, shifted).unwrap();
    model.forward(&mut pass, x).unwrap();
    let loss = alignment_loss(&model, &mut pass, &stats, &[last]).unwrap();
    let y = pass.tape.value(pass.norm_output(last).unwrap()).clone();
    let grads = pass.backward(loss).unwrap();
    model.accumulate_grads(&pass, &grads);

    let st = stats.layer(&model.norms()[last].name).unwrap();
    let (n, e) = (y.shape()[0], y.item_len());
    let per_channel = e / channels;
    let mut dg = vec![0.0; channels];
    let mut db = vec![0.0; channels];
    for el in 0..e {
        let c = el / per_channel;
        let xhat: Vec<f64> = (0..n).map(|i| (y.row(i)[el] - b[c]) / g[c]).collect();
        let m = xhat.iter().sum::<f64>() / n as f64;
        let v = xhat.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        let mu = g[c] * m + b[c];
        let var = g[c] * g[c] * v;
        let (sm, sv) = ((mu - st.mean[el]).signum(), (var - st.var[el]).signum());
        assert!(
            (mu - st.mean[el]).abs() > 1e-9 && (var - st.var[el]).abs() > 1e-9,
            "probe sits on a kink"
        );
        db[c] += sm / e as f64;
        dg[c] += (sm * m + sv * 2.0 * g[c] * v) / e as f64;
    }
    let norm = &model.norms()[last];
    let (gi, bi) = (norm.gamma, norm.beta);
    let got_g = model.params()[gi].grad.as_ref().unwrap().data().to_vec();
    let got_b = model.params()[bi].grad.as_ref().unwrap().data().to_vec();
    let mut worst: f64 = 0.0;
    for c in 0..channels {
        for (got, want) in [(got_g[c], dg[c]), (got_b[c], db[c])] {
            worst = worst.max((got - want).abs() / want.abs().max(1e-9));
        }
    }
    AffineGradientCheck {
        worst_relative_error: worst,
        only_selected_layer: model
            .params()
            .iter()
            .enumerate()
            .all(|(i, p)| p.grad.is_some() == (i == gi || i == bi)),
    }
}

/// One frozen-statistics norm layer over 2 channels at 1x1 resolution,
/// adapted by descent on the alignment objective. Returns per channel the
/// learned and closed-form `(gamma, gamma*, beta, beta*)` with
/// `gamma* = sigma_hat / sigma_z` and `beta* = mu_hat - gamma* mu_z`.
/// The objective is even in `gamma`; a step size small enough not to jump
/// across zero keeps descent on the positive branch.
pub fn one_layer_adaptation() -> Vec<(f64, f64, f64, f64)> {
    let mu_z = [0.5, -1.0];
    let sigma_z = [2.0, 0.5];
    let mu_hat = [1.0, 0.3];
    let sigma_hat = [1.0f64, 1.5];
    let batch = 4096;
    let mut params = vec![
        Parameter::new("gamma", Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap()),
        Parameter::new("beta", Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap()),
    ];
    let mut opt = Sgd::new(SgdConfig {
        lr: 0.002,
        momentum: 0.9,
        clip: None,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let normals: Vec<Normal<f64>> = (0..2)
        .map(|c| Normal::new(mu_z[c], sigma_z[c]).unwrap())
        .collect();
    let (frozen_mean, frozen_var) = ([0.0; 2], [1.0 - 1e-5; 2]);
    for step in 0..3000 {
        if step == 1500 || step == 2500 {
            let lr = opt.lr() / 5.0;
            opt.set_lr(lr);
        }
        let z: Vec<f64> = (0..batch)
            .flat_map(|_| [normals[0].sample(&mut rng), normals[1].sample(&mut rng)])
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![batch, 2, 1, 1], z).unwrap());
        let g = tape.leaf(params[0].tensor.clone(), true);
        let b = tape.leaf(params[1].tensor.clone(), true);
        let mode = NormMode::Frozen {
            mean: &frozen_mean,
            var: &frozen_var,
        };
        let y = tape.norm(x, g, b, mode, 1e-5).unwrap();
        let target_mean = tape.constant(Tensor::new(vec![2, 1, 1], mu_hat.to_vec()).unwrap());
        let target_var = tape.constant(
            Tensor::new(vec![2, 1, 1], sigma_hat.iter().map(|s| s * s).collect()).unwrap(),
        );
        let m = tape.batch_mean(y).unwrap();
        let v = tape.batch_var(y).unwrap();
        let dm = tape.sub(m, target_mean).unwrap();
        let dm = tape.abs(dm).unwrap();
        let lm = tape.mean(dm).unwrap();
        let dv = tape.sub(v, target_var).unwrap();
        let dv = tape.abs(dv).unwrap();
        let lv = tape.mean(dv).unwrap();
        let loss = tape.add(lm, lv).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        params[0].accumulate_grad(&grads.take(g).unwrap());
        params[1].accumulate_grad(&grads.take(b).unwrap());
        opt.step(&mut params);
    }
    (0..2)
        .map(|c| {
            let gamma_star = sigma_hat[c] / sigma_z[c];
            let beta_star = mu_hat[c] - gamma_star * mu_z[c];
            (
                params[0].tensor.data()[c],
                gamma_star,
                params[1].tensor.data()[c],
                beta_star,
            )
        })
        .collect()
}
