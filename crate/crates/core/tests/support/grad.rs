//! Finite-difference gradient checks in float64, ε = 1e-5, max relative
//! error 1e-4, grouped so more than one test target can run and report them.

use rand::Rng;
use rvafm::ctc::{Alphabet, LabelSeq};
use rvafm::gradcheck::{compare, grad_check, GradCheckReport};
use rvafm::layers::{
    conv1d, dense, encoder_forward, lstm_sequence, lstm_step, multi_conv1d, multi_dense, Activation, Conv1dParams,
    DenseParams, EncoderBlockConfig, EncoderConfig, EncoderParams, LstmParams, MultiConv1d, MultiDense, Parameters,
};
use rvafm::model::{total_loss, ModelConfig, ModelParams};
use rvafm::ops::Conv2dGeometry;
use rvafm::rvafm::{run_rollout, DualLayers, Mode, ProjectionHook, RolloutLength, RvafmConfig, RvafmParams, STOP};
use rvafm::{rng, Graph, Result, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Named reports of a group of checks.
#[derive(Default)]
pub struct Checks(pub Vec<(String, GradCheckReport)>);

impl Checks {
    pub fn failures(&self) -> Vec<String> {
        self.0
            .iter()
            .filter(|(_, r)| !r.pass)
            .map(|(w, r)| format!("{w}: worst relative error {:.3e}", r.worst()))
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.0.iter().map(|(_, r)| r.worst()).fold(0.0, f64::max)
    }

    pub fn assert_pass(&self) {
        let f = self.failures();
        assert!(f.is_empty(), "{}", f.join("\n"));
    }

    pub fn extend(&mut self, other: Checks) {
        self.0.extend(other.0);
    }

    fn op<F>(&mut self, what: &str, params: &[Tensor<f64>], f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let weighted = |g: &mut Graph<f64>, v: &[Var]| {
            let y = f(g, v)?;
            if g.shape(y).is_empty() {
                Ok(y)
            } else {
                weighted_sum(g, y, what)
            }
        };
        self.0.push((what.into(), grad_check(weighted, params, EPS, TOL).unwrap()));
    }

    /// Compares the gradients a parameter set's own binding produces against
    /// central differences taken by perturbing the stored tensors.
    fn params<P, F>(&mut self, what: &str, params: &P, loss: F)
    where
        P: Parameters<f64> + Clone,
        F: Fn(&P, &mut Graph<f64>, bool) -> Result<Var>,
    {
        let mut g = Graph::new();
        let l = loss(params, &mut g, true).unwrap();
        let analytic = g.backward(l).unwrap().params();
        let mut shapes = Vec::new();
        params.visit("", &mut |_, t| shapes.push(t.shape().to_vec()));
        assert_eq!(analytic.len(), shapes.len(), "{what}: one gradient per tensor");
        let eval = |p: &P| {
            let mut g = Graph::new();
            let l = loss(p, &mut g, false).unwrap();
            g.value(l).item().unwrap()
        };
        let mut numeric = Vec::new();
        let mut work = params.clone();
        for (ti, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut grad = vec![0.0; n];
            for (ei, slot) in grad.iter_mut().enumerate() {
                nudge(&mut work, ti, ei, EPS);
                let plus = eval(&work);
                nudge(&mut work, ti, ei, -2.0 * EPS);
                let minus = eval(&work);
                nudge(&mut work, ti, ei, EPS);
                *slot = (plus - minus) / (2.0 * EPS);
            }
            numeric.push(Tensor::new(shape.clone(), grad).unwrap());
        }
        self.0.push((what.into(), compare(&analytic, &numeric, TOL)));
    }
}

fn rand_t(shape: &[usize], name: &str) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng::stream(5, name)).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, name: &str) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(x), name));
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn nudge<P: Parameters<f64>>(p: &mut P, tensor: usize, elem: usize, delta: f64) {
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == tensor {
            t.data_mut()[elem] += delta;
        }
        i += 1;
    });
}

pub fn elementwise_ops() -> Checks {
    let mut c = Checks::default();
    let (a, b) = (rand_t(&[3, 4], "a"), rand_t(&[3, 4], "b"));
    c.op("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    c.op("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    c.op("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    c.op("tanh", std::slice::from_ref(&a), |g, v| g.tanh(v[0]));
    c.op("sigmoid", std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]));
    c.op("scale", std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5));
    c.op("clamp", &[a.map(|x| x * 0.4)], |g, v| g.clamp(v[0], -0.5, 0.5));
    c.op("tanh chain", std::slice::from_ref(&a), |g, v| {
        let x = g.tanh(v[0])?;
        let y = g.mul(x, x)?;
        let z = g.sigmoid(y)?;
        g.tanh(z)
    });
    c
}

pub fn linear_algebra_ops() -> Checks {
    let mut c = Checks::default();
    c.op("matmul", &[rand_t(&[3, 4], "m1"), rand_t(&[4, 2], "m2")], |g, v| g.matmul(v[0], v[1]));
    c.op("add_bias", &[rand_t(&[3, 4], "x"), rand_t(&[4], "bias")], |g, v| g.add_bias(v[0], v[1]));
    let geom = Conv2dGeometry { stride: (2, 1), padding: (1, 1) };
    c.op("conv2d", &[rand_t(&[5, 4, 2], "ci"), rand_t(&[3, 2, 3, 3], "ck"), rand_t(&[3], "cb")], move |g, v| {
        g.conv2d(v[0], v[1], v[2], geom)
    });
    c.op("conv1d", &[rand_t(&[7, 2], "1i"), rand_t(&[3, 2, 3], "1k"), rand_t(&[3], "1b")], |g, v| {
        g.conv1d(v[0], v[1], v[2], 1, 1)
    });
    c
}

pub fn reduction_and_shape_ops() -> Checks {
    let mut c = Checks::default();
    let x = rand_t(&[4, 5], "r");
    c.op("softmax", std::slice::from_ref(&x), |g, v| g.softmax(v[0]));
    c.op("log_softmax", std::slice::from_ref(&x), |g, v| g.log_softmax(v[0]));
    c.op("sum", std::slice::from_ref(&x), |g, v| g.sum(v[0]));
    c.op("mean_rows", std::slice::from_ref(&x), |g, v| g.mean_rows(v[0]));
    c.op("reshape", std::slice::from_ref(&x), |g, v| g.reshape(v[0], vec![2, 10]));
    c.op("row", std::slice::from_ref(&x), |g, v| g.row(v[0], 2));
    c.op("narrow", &[rand_t(&[6], "n")], |g, v| g.narrow(v[0], 1, 2));
    c.op("concat", &[x.clone(), rand_t(&[4, 2], "c2")], |g, v| g.concat(&[v[0], v[1]]));
    c.op("stack", &[rand_t(&[3], "s1"), rand_t(&[3], "s2")], |g, v| g.stack(&[v[0], v[1]]));
    c.op("pick", &[rand_t(&[6], "p")], |g, v| g.pick(v[0], 4));
    c.op("cross_entropy", &[rand_t(&[2], "ce")], |g, v| g.cross_entropy(v[0], 1));
    let f = rand_t(&[3, 6, 2], "f");
    c.op("mean_width", std::slice::from_ref(&f), |g, v| g.mean_width(v[0]));
    c.op("adaptive_max_pool_width", &[f], |g, v| g.adaptive_max_pool_width(v[0], 4));
    c.op("ctc", &[rand_t(&[6, 4], "ctc")], |g, v| {
        let lp = g.log_softmax(v[0])?;
        g.ctc_loss(lp, &[0, 2, 2])
    });
    c
}

pub fn dense_layers() -> Checks {
    let mut c = Checks::default();
    let p = DenseParams::<f64>::init(3, 4, &mut rng::stream(1, "dense"));
    let x = rand_t(&[2, 3], "dx");
    c.params("dense 3x4", &p, |p, g, tr| {
        let b = p.bind(g, tr);
        let xv = g.constant(x.clone());
        let y = dense(g, &b, xv)?;
        weighted_sum(g, y, "dy")
    });
    let m = MultiDense::<f64>::init(3, 4, 3, 1, "md").unwrap();
    c.params("multi dense", &m, |p, g, tr| {
        let b = p.bind(g, tr);
        let xv = g.constant(x.clone());
        let y = multi_dense(g, &b, xv)?;
        weighted_sum(g, y, "mdy")
    });
    c
}

pub fn conv1d_layers() -> Checks {
    let mut c = Checks::default();
    let x = rand_t(&[8, 2], "cx");
    let p = Conv1dParams::<f64>::init(2, 3, 5, 1, 2, &mut rng::stream(1, "conv"));
    c.params("conv1d", &p, |p, g, tr| {
        let b = p.bind(g, tr);
        let xv = g.constant(x.clone());
        let y = conv1d(g, &b, xv)?;
        weighted_sum(g, y, "cy")
    });
    let m = MultiConv1d::<f64>::init(2, 3, 5, 1, 2, 2, 1, "mc").unwrap();
    c.params("multi conv1d", &m, |p, g, tr| {
        let b = p.bind(g, tr);
        let xv = g.constant(x.clone());
        let y = multi_conv1d(g, &b, xv)?;
        weighted_sum(g, y, "mcy")
    });
    c
}

pub fn lstm_layer() -> Checks {
    let mut c = Checks::default();
    let p = LstmParams::<f64>::init(3, 4, &mut rng::stream(1, "lstm"));
    let xs = rand_t(&[5, 3], "xs");
    let (h0, c0) = (rand_t(&[4], "h0"), rand_t(&[4], "c0"));
    c.params("lstm sequence", &p, |p, g, tr| {
        let b = p.bind(g, tr);
        let (x, h, c) = (g.constant(xs.clone()), g.constant(h0.clone()), g.constant(c0.clone()));
        let run = lstm_sequence(g, &b, x, h, c)?;
        let a = weighted_sum(g, run.outputs, "lo")?;
        let z = weighted_sum(g, run.c, "lc")?;
        g.add(a, z)
    });
    c.op("lstm step inputs", &[rand_t(&[3], "sx"), h0.clone(), c0.clone()], |g, v| {
        let b = p.bind(g, false);
        let (h, c) = lstm_step(g, &b, v[0], v[1], v[2])?;
        let a = weighted_sum(g, h, "sh")?;
        let z = weighted_sum(g, c, "sc")?;
        g.add(a, z)
    });
    c
}

fn tiny_encoder(c_f: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        blocks: vec![
            EncoderBlockConfig { out_channels: 2, kernel: [3, 3], stride: [2, 2], activation: Activation::Tanh },
            EncoderBlockConfig { out_channels: c_f, kernel: [1, 1], stride: [1, 1], activation: Activation::Identity },
        ],
    }
}

pub fn two_block_encoder() -> Checks {
    let mut c = Checks::default();
    let p = EncoderParams::<f64>::init(&tiny_encoder(3), 1, "enc").unwrap();
    let image = rand_t(&[6, 8, 1], "img").map(|v| v.abs());
    c.params("encoder", &p, |p, g, tr| {
        let b = p.bind(g, tr);
        let x = g.constant(image.clone());
        let y = encoder_forward(g, &b, x)?;
        weighted_sum(g, y, "ey")
    });
    c
}

fn tiny_rvafm() -> RvafmConfig {
    RvafmConfig {
        c_f: 3,
        c_j: 2,
        kernel_size: 3,
        collapse_width: 2,
        c_u: 4,
        c_h: 3,
        nsl: 2,
        max_steps: 3,
        dual: DualLayers::ALL,
        mode: Mode::TrainMultibranch,
    }
}

/// Two forced steps through the attention module with every output,
/// halt logits included, feeding the loss.
pub fn two_step_rollout() -> Checks {
    let mut c = Checks::default();
    let p = RvafmParams::<f64>::init(tiny_rvafm(), 3).unwrap();
    let f = rand_t(&[5, 4, 3], "feat");
    let hook = ProjectionHook::random(3, 3, &mut rng::stream(3, "hook")).unwrap();
    let loss = |p: &RvafmParams<f64>, g: &mut Graph<f64>, tr: bool| {
        let b = p.bind(g, tr);
        let fv = g.constant(f.clone());
        let r = run_rollout(g, &b, fv, &mut hook.clone(), RolloutLength::Forced(2))?;
        let mut terms = Vec::new();
        for t in 0..2 {
            terms.push(weighted_sum(g, r.lines[t], &format!("l{t}"))?);
            terms.push(weighted_sum(g, r.alphas[t], &format!("a{t}"))?);
            terms.push(g.cross_entropy(r.halts[t], if t == 1 { STOP } else { 0 })?);
        }
        terms[1..].iter().try_fold(terms[0], |acc, &x| g.add(acc, x))
    };
    c.params("rollout", &p, loss);
    let single = RvafmParams::<f64>::init(RvafmConfig { dual: DualLayers::NONE, ..tiny_rvafm() }, 3).unwrap();
    c.params("single-branch rollout", &single, loss);
    c
}

pub fn paragraph_loss() -> Checks {
    let mut c = Checks::default();
    let alphabet = Alphabet::new(['a', 'b']).unwrap();
    let config = ModelConfig { encoder: tiny_encoder(3), rvafm: tiny_rvafm(), alphabet };
    let m = ModelParams::<f64>::init(&config, 4).unwrap();
    let mut r = rng::stream(4, "image");
    let image = Tensor::<f64>::from_fn(vec![8, 12, 1], |_| r.gen_range(0.0..1.0)).unwrap();
    let lines = [LabelSeq(vec![0, 1]), LabelSeq(vec![1])];
    c.params("total loss", &m, |m, g, tr| {
        let b = m.bind(g, tr);
        let x = g.constant(image.clone());
        Ok(total_loss(g, &b, x, &lines, 1.0)?.total)
    });
    c
}

/// Every group above.
pub fn all() -> Checks {
    let mut c = Checks::default();
    for group in [
        elementwise_ops,
        linear_algebra_ops,
        reduction_and_shape_ops,
        dense_layers,
        conv1d_layers,
        lstm_layer,
        two_block_encoder,
        two_step_rollout,
        paragraph_loss,
    ] {
        c.extend(group());
    }
    c
}
