//! Reverse-mode autodiff on a linear tape.
//!
//! Node ids are creation-ordered and every op only references earlier ids,
//! so the reverse pass is a single backward sweep over the id range.
//! Gradients accumulate additively, which keeps the sweep correct even if a
//! value fans out into several consumers.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        cache: ops::BatchNormCache<T>,
        channels: usize,
        spatial: usize,
    },
    Relu {
        x: VarId,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<u32>,
    },
    Flatten {
        x: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    SoftmaxCe {
        logits: VarId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Mse {
        pred: VarId,
        target: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> T {
        self.nodes[id.0].value.data[0]
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }))
    }

    /// Training-mode batchnorm; the running estimates are updated in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        channels: usize,
        spatial: usize,
    ) -> Result<VarId> {
        let (y, cache) = ops::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            channels,
            spatial,
            true,
        )?;
        let cache = cache.expect("training mode always yields a cache");
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                channels,
                spatial,
            },
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn maxpool(&mut self, x: VarId) -> Result<VarId> {
        let (y, argmax) = ops::maxpool_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn flatten(&mut self, x: VarId) -> VarId {
        let y = ops::flatten(self.value(x));
        self.push(y, Op::Flatten { x })
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let value = Tensor::from_vec(&[1], vec![loss])?;
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn mse(&mut self, pred: VarId, target: Tensor<T>) -> Result<VarId> {
        let loss = ops::mse(self.value(pred), &target)?;
        let value = Tensor::from_vec(&[1], vec![loss])?;
        Ok(self.push(value, Op::Mse { pred, target }))
    }

    /// Reverse sweep from `loss`, which must be a scalar node. Returns one
    /// gradient slot per node; leaves keep theirs, interior activations are
    /// freed as the sweep passes them.
    pub fn backward(&self, loss: VarId) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(
                "backward starts from a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(&[1], vec![T::one()])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                    channels,
                    spatial,
                } => {
                    let (dx, dgamma, dbeta) =
                        ops::batchnorm_backward(&g, self.value(*gamma), cache, *channels, *spatial);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool_backward(&self.value(*x).shape, &g, argmax);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Flatten { x } => {
                    let dx = Tensor {
                        shape: self.value(*x).shape.clone(),
                        data: g.data,
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let dl = ops::softmax_cross_entropy_backward(probs, labels, g.data[0]);
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Mse { pred, target } => {
                    let dp = ops::mse_backward(self.value(*pred), target, g.data[0]);
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        Ok(Grads { slots: grads })
    }

    /// Minimum distance to the nearest activation kink (relu zero crossing
    /// or pooling tie) over the recorded graph. Gradient checks use this to
    /// skip inputs where finite differences straddle a non-differentiable
    /// point.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in &self.nodes[x.0].value.data {
                        margin = margin.min(v.to_f64().abs());
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let xv = &self.nodes[x.0].value;
                    let w = xv.shape[3];
                    for &best in argmax {
                        let best = best as usize;
                        // reconstruct the 2x2 window around the winner
                        // (rows per plane are even, so row parity holds globally)
                        let base = best - (best / w % 2) * w - best % w % 2;
                        let bv = xv.data[best].to_f64();
                        for i in [base, base + 1, base + w, base + w + 1] {
                            if i != best {
                                margin = margin.min((bv - xv.data[i].to_f64()).abs());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: VarId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<T>> {
        self.slots[id.0].take()
    }
}

// ── Finite-difference gradient checking ─────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Base step: h = step_scale * max(1, |theta|).
    pub step_scale: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Relative-error denominator floor. Some directions have structurally
    /// zero gradients (a conv bias followed by batchnorm cancels exactly),
    /// where the central difference returns rounding noise near 1e-9 and
    /// any relative comparison explodes. Flooring the denominator at 1e-4
    /// makes the test equivalent to |fd - g| <= atol + rtol*max(|fd|,|g|)
    /// with atol = tolerance * floor = 1e-8, far below the magnitude at
    /// which a real gradient defect shows up.
    pub denom_floor: f64,
    /// Elements checked per parameter tensor (0 = all).
    pub max_elements_per_param: usize,
    /// Negative control: perturb the analytic gradient and expect failure.
    pub corrupt_gradient: bool,
    /// Seed for element subsampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step_scale: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-4,
            max_elements_per_param: 0,
            corrupt_gradient: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    /// "param_name[index]" of the worst element.
    pub worst: String,
}

/// Compare analytic gradients against central finite differences in f64.
///
/// `loss_at` must be a pure function of the parameter vectors. When an
/// element first fails, the step is shrunk and the comparison repeated: a
/// finite-difference artifact (kink crossing, truncation) shrinks with the
/// step, a genuinely wrong gradient does not.
pub fn grad_check(
    names: &[String],
    init: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut loss_at: impl FnMut(&[Vec<f64>]) -> f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(init.len(), analytic.len());
    assert_eq!(init.len(), names.len());
    let mut rng = crate::rng::rng_for(cfg.seed, "grad-check", 0);
    let mut params: Vec<Vec<f64>> = init.to_vec();
    let mut report = GradCheckReport {
        passed: true,
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for p in 0..params.len() {
        let numel = params[p].len();
        let indices: Vec<usize> = if cfg.max_elements_per_param == 0
            || numel <= cfg.max_elements_per_param
        {
            (0..numel).collect()
        } else {
            // sample distinct indices, order-stable for a given seed
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < cfg.max_elements_per_param {
                chosen.insert(rand::Rng::gen_range(&mut rng, 0..numel));
            }
            chosen.into_iter().collect()
        };
        for idx in indices {
            let theta = params[p][idx];
            let mut g = analytic[p][idx];
            if cfg.corrupt_gradient {
                g += 0.5 * (1.0 + g.abs());
            }
            let mut h = cfg.step_scale * theta.abs().max(1.0);
            let mut rel = f64::INFINITY;
            for _attempt in 0..3 {
                params[p][idx] = theta + h;
                let fp = loss_at(&params);
                params[p][idx] = theta - h;
                let fm = loss_at(&params);
                params[p][idx] = theta;
                let fd = (fp - fm) / (2.0 * h);
                // Keep the best attempt: a kink artifact shrinks with h, a
                // wrong gradient stays wrong at every step size.
                rel = rel.min((fd - g).abs() / fd.abs().max(g.abs()).max(cfg.denom_floor));
                if rel < cfg.tolerance {
                    break;
                }
                h /= 8.0;
            }
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{idx}]", names[p]);
            }
            if rel >= cfg.tolerance {
                report.failures += 1;
                report.passed = false;
            }
        }
    }
    report
}

/// One small check per differentiable primitive, probing inputs and
/// parameters alike. Each probe wires the op into a scalar loss, takes the
/// tape's gradients, and compares against central differences.
pub fn grad_check_primitives(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    use rand::Rng;

    let rand_vec = |n: usize, salt: u64| -> Vec<f64> {
        let mut rng = crate::rng::rng_for(seed, "prim-check", salt);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };

    // loss = mse(op(leaves...), fixed target); grads pulled off the tape.
    let check = |name: &'static str,
                 leaf_names: &[&str],
                 init: Vec<Vec<f64>>,
                 f: &dyn Fn(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>)|
     -> (&'static str, GradCheckReport) {
        let names: Vec<String> = leaf_names.iter().map(|s| s.to_string()).collect();
        let (_, analytic) = f(&init);
        let report = grad_check(&names, &init, &analytic, |p| f(p).0, &cfg);
        (name, report)
    };

    let grab = |tape: Tape<f64>, loss: VarId, ids: &[VarId]| -> (f64, Vec<Vec<f64>>) {
        let v = tape.scalar(loss);
        let mut g = tape.backward(loss).expect("probe backward");
        let out = ids
            .iter()
            .map(|&id| g.take(id).expect("leaf reaches loss").data)
            .collect();
        (v, out)
    };

    let mut out = Vec::new();

    // conv2d: x (2,2,4,4), w (3,2,3,3), b (3)
    let tgt = Tensor::from_vec(&[2, 3, 4, 4], rand_vec(96, 0)).unwrap();
    out.push(check(
        "conv2d",
        &["x", "w", "b"],
        vec![rand_vec(64, 1), rand_vec(54, 2), rand_vec(3, 3)],
        &|p| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(&[2, 2, 4, 4], p[0].clone()).unwrap());
            let w = t.leaf(Tensor::from_vec(&[3, 2, 3, 3], p[1].clone()).unwrap());
            let b = t.leaf(Tensor::from_vec(&[3], p[2].clone()).unwrap());
            let y = t.conv2d(x, w, b).unwrap();
            let loss = t.mse(y, tgt.clone()).unwrap();
            grab(t, loss, &[x, w, b])
        },
    ));

    // batchnorm: x (3,2,3,3) over 2 channels, spatial 9
    let tgt = Tensor::from_vec(&[3, 2, 3, 3], rand_vec(54, 4)).unwrap();
    out.push(check(
        "batchnorm",
        &["x", "gamma", "beta"],
        vec![
            rand_vec(54, 5),
            rand_vec(2, 6).iter().map(|v| 1.0 + 0.2 * v).collect(),
            rand_vec(2, 7),
        ],
        &|p| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(&[3, 2, 3, 3], p[0].clone()).unwrap());
            let g = t.leaf(Tensor::from_vec(&[2], p[1].clone()).unwrap());
            let b = t.leaf(Tensor::from_vec(&[2], p[2].clone()).unwrap());
            let mut rm = Tensor::zeros(&[2]);
            let mut rv = Tensor::from_vec(&[2], vec![1.0; 2]).unwrap();
            let y = t.batchnorm(x, g, b, &mut rm, &mut rv, 2, 9).unwrap();
            let loss = t.mse(y, tgt.clone()).unwrap();
            grab(t, loss, &[x, g, b])
        },
    ));

    // relu: x (4, 6)
    let tgt = Tensor::from_vec(&[4, 6], rand_vec(24, 8)).unwrap();
    out.push(check("relu", &["x"], vec![rand_vec(24, 9)], &|p| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[4, 6], p[0].clone()).unwrap());
        let y = t.relu(x);
        let loss = t.mse(y, tgt.clone()).unwrap();
        grab(t, loss, &[x])
    }));

    // maxpool: x (2,2,4,4) -> (2,2,2,2)
    let tgt = Tensor::from_vec(&[2, 2, 2, 2], rand_vec(16, 10)).unwrap();
    out.push(check("maxpool", &["x"], vec![rand_vec(64, 11)], &|p| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2, 2, 4, 4], p[0].clone()).unwrap());
        let y = t.maxpool(x).unwrap();
        let loss = t.mse(y, tgt.clone()).unwrap();
        grab(t, loss, &[x])
    }));

    // flatten: x (2,3,2,2) -> (2,12)
    let tgt = Tensor::from_vec(&[2, 12], rand_vec(24, 12)).unwrap();
    out.push(check("flatten", &["x"], vec![rand_vec(24, 13)], &|p| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2, 3, 2, 2], p[0].clone()).unwrap());
        let y = t.flatten(x);
        let loss = t.mse(y, tgt.clone()).unwrap();
        grab(t, loss, &[x])
    }));

    // linear: x (3,5), w (4,5), b (4)
    let tgt = Tensor::from_vec(&[3, 4], rand_vec(12, 14)).unwrap();
    out.push(check(
        "linear",
        &["x", "w", "b"],
        vec![rand_vec(15, 15), rand_vec(20, 16), rand_vec(4, 17)],
        &|p| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(&[3, 5], p[0].clone()).unwrap());
            let w = t.leaf(Tensor::from_vec(&[4, 5], p[1].clone()).unwrap());
            let b = t.leaf(Tensor::from_vec(&[4], p[2].clone()).unwrap());
            let y = t.linear(x, w, b).unwrap();
            let loss = t.mse(y, tgt.clone()).unwrap();
            grab(t, loss, &[x, w, b])
        },
    ));

    // softmax cross-entropy: logits (4,3), fixed labels
    let labels: Vec<usize> = vec![0, 2, 1, 2];
    out.push(check("softmax_ce", &["logits"], vec![rand_vec(12, 18)], &|p| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[4, 3], p[0].clone()).unwrap());
        let loss = t.softmax_cross_entropy(x, &labels).unwrap();
        grab(t, loss, &[x])
    }));

    // mse: pred (3,4) against a fixed target
    let tgt = Tensor::from_vec(&[3, 4], rand_vec(12, 19)).unwrap();
    out.push(check("mse", &["pred"], vec![rand_vec(12, 20)], &|p| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[3, 4], p[0].clone()).unwrap());
        let loss = t.mse(x, tgt.clone()).unwrap();
        grab(t, loss, &[x])
    }));

    out
}
