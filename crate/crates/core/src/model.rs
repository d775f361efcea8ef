//! The speckle decoder: a small CNN shared by every task, with a
//! classification or scalar regression head.
//!
//! Topology: three conv(3x3, pad 1) -> batchnorm -> relu -> maxpool(2x2)
//! stages, then flatten -> linear -> batchnorm -> relu -> head. Width and
//! input size are configurable; the defaults match the shipped tasks.
//!
//! Parameters are initialized from a ChaCha8 stream in a fixed draw order,
//! so a (config, seed) pair pins every weight bit-exactly. The f64
//! instantiation exists for gradient checking; training runs in f32.

use std::io::Read as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{self, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Head {
    Classifier { classes: usize },
    Regressor,
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match self {
            Head::Classifier { classes } => *classes,
            Head::Regressor => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_hw: (usize, usize),
    pub conv_channels: [usize; 3],
    pub fc_dim: usize,
    pub head: Head,
    pub seed: u64,
    /// Class index -> display name, carried into checkpoints so inference can
    /// print labels without the training manifest at hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl ModelConfig {
    pub fn classifier(classes: usize, seed: u64) -> Self {
        ModelConfig {
            input_hw: (128, 128),
            conv_channels: [16, 32, 64],
            fc_dim: 256,
            head: Head::Classifier { classes },
            seed,
            class_names: None,
        }
    }

    pub fn regressor(seed: u64) -> Self {
        ModelConfig {
            input_hw: (128, 128),
            conv_channels: [16, 32, 64],
            fc_dim: 256,
            head: Head::Regressor,
            seed,
            class_names: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {h}x{w} must be a multiple of 8 in both dims (three pooling stages)"
            )));
        }
        if self.conv_channels.contains(&0) || self.fc_dim == 0 {
            return Err(Error::InvalidArgument(
                "layer widths must be nonzero".into(),
            ));
        }
        if let Head::Classifier { classes } = self.head {
            if classes < 2 {
                return Err(Error::InvalidArgument(
                    "a classifier needs at least 2 classes".into(),
                ));
            }
        }
        Ok(())
    }

    /// Flattened feature dimension entering the fully connected stage.
    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.input_hw;
        self.conv_channels[2] * (h / 8) * (w / 8)
    }
}

/// One batchnorm stage's tensors.
#[derive(Debug, Clone, PartialEq)]
struct BnParams<T> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor {
                shape: vec![channels],
                data: vec![T::one(); channels],
            },
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor {
                shape: vec![channels],
                data: vec![T::one(); channels],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel<T: Scalar> {
    pub config: ModelConfig,
    conv_w: [Tensor<T>; 3],
    conv_b: [Tensor<T>; 3],
    bn: [BnParams<T>; 3],
    fc_w: Tensor<T>,
    fc_b: Tensor<T>,
    bn_fc: BnParams<T>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

/// Uniform init in [-sqrt(6/fan_in), sqrt(6/fan_in)), drawn in f64 so f32
/// and f64 models from one seed agree to rounding.
fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n)
            .map(|_| T::from_f64(bound * (2.0 * rng.gen::<f64>() - 1.0)))
            .collect(),
    }
}

pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<DecoderModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [c1, c2, c3] = config.conv_channels;
    // weight draw order is part of the reproducibility contract:
    // conv1.w, conv2.w, conv3.w, fc.w, head.w
    let conv_w = [
        init_uniform(&mut rng, &[c1, 1, 3, 3], 9),
        init_uniform(&mut rng, &[c2, c1, 3, 3], c1 * 9),
        init_uniform(&mut rng, &[c3, c2, 3, 3], c2 * 9),
    ];
    let flat = config.flat_dim();
    let fc_w = init_uniform(&mut rng, &[config.fc_dim, flat], flat);
    let head_w = init_uniform(
        &mut rng,
        &[config.head.output_dim(), config.fc_dim],
        config.fc_dim,
    );
    Ok(DecoderModel {
        config: config.clone(),
        conv_b: [
            Tensor::zeros(&[c1]),
            Tensor::zeros(&[c2]),
            Tensor::zeros(&[c3]),
        ],
        bn: [BnParams::new(c1), BnParams::new(c2), BnParams::new(c3)],
        conv_w,
        fc_w,
        fc_b: Tensor::zeros(&[config.fc_dim]),
        bn_fc: BnParams::new(config.fc_dim),
        head_w,
        head_b: Tensor::zeros(&[config.head.output_dim()]),
    })
}

/// Everything the optimizer needs from one recorded forward pass.
pub struct TrainStep<T: Scalar> {
    pub tape: Tape<T>,
    pub loss: VarId,
    pub output: VarId,
    /// Leaf ids of the trainable parameters, in `param_names` order.
    pub param_ids: Vec<VarId>,
}

pub enum Target<'a, T: Scalar> {
    Labels(&'a [usize]),
    Values(&'a Tensor<T>),
}

impl<T: Scalar> DecoderModel<T> {
    /// Trainable parameter names, in draw/update order.
    pub fn param_names(&self) -> Vec<&'static str> {
        vec![
            "conv1.w", "conv1.b", "bn1.gamma", "bn1.beta", //
            "conv2.w", "conv2.b", "bn2.gamma", "bn2.beta", //
            "conv3.w", "conv3.b", "bn3.gamma", "bn3.beta", //
            "fc.w", "fc.b", "bn_fc.gamma", "bn_fc.beta", //
            "head.w", "head.b",
        ]
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.conv_w[0],
            &self.conv_b[0],
            &self.bn[0].gamma,
            &self.bn[0].beta,
            &self.conv_w[1],
            &self.conv_b[1],
            &self.bn[1].gamma,
            &self.bn[1].beta,
            &self.conv_w[2],
            &self.conv_b[2],
            &self.bn[2].gamma,
            &self.bn[2].beta,
            &self.fc_w,
            &self.fc_b,
            &self.bn_fc.gamma,
            &self.bn_fc.beta,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [cw0, cw1, cw2] = &mut self.conv_w;
        let [cb0, cb1, cb2] = &mut self.conv_b;
        let [bn0, bn1, bn2] = &mut self.bn;
        vec![
            cw0,
            cb0,
            &mut bn0.gamma,
            &mut bn0.beta,
            cw1,
            cb1,
            &mut bn1.gamma,
            &mut bn1.beta,
            cw2,
            cb2,
            &mut bn2.gamma,
            &mut bn2.beta,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.bn_fc.gamma,
            &mut self.bn_fc.beta,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// Count of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.config.input_hw;
        match x.shape[..] {
            [_, 1, xh, xw] if xh == h && xw == w => Ok(()),
            _ => Err(Error::ShapeMismatch(format!(
                "model expects (N, 1, {h}, {w}) input, got {:?}",
                x.shape
            ))),
        }
    }

    /// Record a training forward pass (batch statistics, running estimates
    /// updated) and attach the loss for `target`.
    pub fn forward_train(&mut self, x: &Tensor<T>, target: Target<T>) -> Result<TrainStep<T>> {
        self.check_input(x)?;
        let n = x.shape[0];
        match &target {
            Target::Labels(l) => {
                if l.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "{} labels for a batch of {n}",
                        l.len()
                    )));
                }
            }
            Target::Values(v) => {
                if v.shape != vec![n, 1] {
                    return Err(Error::ShapeMismatch(format!(
                        "regression targets must be ({n}, 1), got {:?}",
                        v.shape
                    )));
                }
            }
        }
        let (h, w) = self.config.input_hw;
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(18);
        for p in self.params() {
            ids.push(p.clone());
        }
        let param_ids: Vec<VarId> = ids.into_iter().map(|t| tape.leaf(t)).collect();
        let x_id = tape.leaf(x.clone());

        let mut cur = x_id;
        let mut spatial = h * w;
        for stage in 0..3 {
            let [wi, bi, gi, bti] = [
                param_ids[stage * 4],
                param_ids[stage * 4 + 1],
                param_ids[stage * 4 + 2],
                param_ids[stage * 4 + 3],
            ];
            cur = tape.conv2d(cur, wi, bi)?;
            cur = tape.batchnorm(
                cur,
                gi,
                bti,
                &mut self.bn[stage].running_mean,
                &mut self.bn[stage].running_var,
                self.config.conv_channels[stage],
                spatial,
            )?;
            cur = tape.relu(cur);
            cur = tape.maxpool(cur)?;
            spatial /= 4;
        }
        cur = tape.flatten(cur);
        cur = tape.linear(cur, param_ids[12], param_ids[13])?;
        cur = tape.batchnorm(
            cur,
            param_ids[14],
            param_ids[15],
            &mut self.bn_fc.running_mean,
            &mut self.bn_fc.running_var,
            self.config.fc_dim,
            1,
        )?;
        cur = tape.relu(cur);
        let output = tape.linear(cur, param_ids[16], param_ids[17])?;
        let loss = match target {
            Target::Labels(labels) => tape.softmax_cross_entropy(output, labels)?,
            Target::Values(values) => tape.mse(output, values.clone())?,
        };
        Ok(TrainStep {
            tape,
            loss,
            output,
            param_ids,
        })
    }

    /// Inference pass using running statistics; no tape, no mutation.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (h, w) = self.config.input_hw;
        let mut cur = x.clone();
        let mut spatial = h * w;
        for stage in 0..3 {
            cur = ops::conv2d_forward(&cur, &self.conv_w[stage], &self.conv_b[stage])?;
            // eval mode leaves the running stats untouched; the &mut is an
            // artifact of the shared signature
            let mut rm = self.bn[stage].running_mean.clone();
            let mut rv = self.bn[stage].running_var.clone();
            let (y, _) = ops::batchnorm_forward(
                &cur,
                &self.bn[stage].gamma,
                &self.bn[stage].beta,
                &mut rm,
                &mut rv,
                self.config.conv_channels[stage],
                spatial,
                false,
            )?;
            cur = ops::relu_forward(&y);
            let (pooled, _) = ops::maxpool_forward(&cur)?;
            cur = pooled;
            spatial /= 4;
        }
        cur = ops::flatten(&cur);
        cur = ops::linear_forward(&cur, &self.fc_w, &self.fc_b)?;
        let mut rm = self.bn_fc.running_mean.clone();
        let mut rv = self.bn_fc.running_var.clone();
        let (y, _) = ops::batchnorm_forward(
            &cur,
            &self.bn_fc.gamma,
            &self.bn_fc.beta,
            &mut rm,
            &mut rv,
            self.config.fc_dim,
            1,
            false,
        )?;
        cur = ops::relu_forward(&y);
        ops::linear_forward(&cur, &self.head_w, &self.head_b)
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predict_classes(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward_eval(x)?;
        let k = logits.shape[1];
        Ok(logits
            .data
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn predict_scalars(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let out = self.forward_eval(x)?;
        Ok(out.data)
    }

    pub fn map_scalar<U: Scalar>(&self) -> DecoderModel<U> {
        DecoderModel {
            config: self.config.clone(),
            conv_w: [
                self.conv_w[0].map_scalar(),
                self.conv_w[1].map_scalar(),
                self.conv_w[2].map_scalar(),
            ],
            conv_b: [
                self.conv_b[0].map_scalar(),
                self.conv_b[1].map_scalar(),
                self.conv_b[2].map_scalar(),
            ],
            bn: [0, 1, 2].map(|i| BnParams {
                gamma: self.bn[i].gamma.map_scalar(),
                beta: self.bn[i].beta.map_scalar(),
                running_mean: self.bn[i].running_mean.map_scalar(),
                running_var: self.bn[i].running_var.map_scalar(),
            }),
            fc_w: self.fc_w.map_scalar(),
            fc_b: self.fc_b.map_scalar(),
            bn_fc: BnParams {
                gamma: self.bn_fc.gamma.map_scalar(),
                beta: self.bn_fc.beta.map_scalar(),
                running_mean: self.bn_fc.running_mean.map_scalar(),
                running_var: self.bn_fc.running_var.map_scalar(),
            },
            head_w: self.head_w.map_scalar(),
            head_b: self.head_b.map_scalar(),
        }
    }

    /// All persisted tensors (trainable followed by running stats), in
    /// checkpoint order.
    fn state_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("conv1.w", &self.conv_w[0]),
            ("conv1.b", &self.conv_b[0]),
            ("bn1.gamma", &self.bn[0].gamma),
            ("bn1.beta", &self.bn[0].beta),
            ("bn1.mean", &self.bn[0].running_mean),
            ("bn1.var", &self.bn[0].running_var),
            ("conv2.w", &self.conv_w[1]),
            ("conv2.b", &self.conv_b[1]),
            ("bn2.gamma", &self.bn[1].gamma),
            ("bn2.beta", &self.bn[1].beta),
            ("bn2.mean", &self.bn[1].running_mean),
            ("bn2.var", &self.bn[1].running_var),
            ("conv3.w", &self.conv_w[2]),
            ("conv3.b", &self.conv_b[2]),
            ("bn3.gamma", &self.bn[2].gamma),
            ("bn3.beta", &self.bn[2].beta),
            ("bn3.mean", &self.bn[2].running_mean),
            ("bn3.var", &self.bn[2].running_var),
            ("fc.w", &self.fc_w),
            ("fc.b", &self.fc_b),
            ("bn_fc.gamma", &self.bn_fc.gamma),
            ("bn_fc.beta", &self.bn_fc.beta),
            ("bn_fc.mean", &self.bn_fc.running_mean),
            ("bn_fc.var", &self.bn_fc.running_var),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ]
    }

    fn state_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let t = match name {
            "conv1.w" => &mut self.conv_w[0],
            "conv1.b" => &mut self.conv_b[0],
            "bn1.gamma" => &mut self.bn[0].gamma,
            "bn1.beta" => &mut self.bn[0].beta,
            "bn1.mean" => &mut self.bn[0].running_mean,
            "bn1.var" => &mut self.bn[0].running_var,
            "conv2.w" => &mut self.conv_w[1],
            "conv2.b" => &mut self.conv_b[1],
            "bn2.gamma" => &mut self.bn[1].gamma,
            "bn2.beta" => &mut self.bn[1].beta,
            "bn2.mean" => &mut self.bn[1].running_mean,
            "bn2.var" => &mut self.bn[1].running_var,
            "conv3.w" => &mut self.conv_w[2],
            "conv3.b" => &mut self.conv_b[2],
            "bn3.gamma" => &mut self.bn[2].gamma,
            "bn3.beta" => &mut self.bn[2].beta,
            "bn3.mean" => &mut self.bn[2].running_mean,
            "bn3.var" => &mut self.bn[2].running_var,
            "fc.w" => &mut self.fc_w,
            "fc.b" => &mut self.fc_b,
            "bn_fc.gamma" => &mut self.bn_fc.gamma,
            "bn_fc.beta" => &mut self.bn_fc.beta,
            "bn_fc.mean" => &mut self.bn_fc.running_mean,
            "bn_fc.var" => &mut self.bn_fc.running_var,
            "head.w" => &mut self.head_w,
            "head.b" => &mut self.head_b,
            _ => return None,
        };
        Some(t)
    }
}

// ── Checkpoint container ────────────────────────────────────────────────
//
// magic "SCKP" | u32 version = 1 | u32 header_len | JSON header |
// concatenated TNSR blobs. The header carries the model config and a
// name/offset/len index into the blob section.

const CKPT_MAGIC: &[u8; 4] = b"SCKP";
const CKPT_VERSION: u32 = 1;

// ── Whole-network gradient check ────────────────────────────────────────

/// Run a 64-bit central-difference check over every trainable parameter of
/// a small-config network, conv stack through loss head. Batch statistics
/// make the loss a pure function of the parameters, so each probe rebuilds
/// from a pristine clone. Diagnostic entry point; the test suites call it
/// across many seeds.
pub fn grad_check_decoder(head: Head, seed: u64) -> Result<crate::autodiff::GradCheckReport> {
    use crate::autodiff::{grad_check, GradCheckConfig};
    use crate::rng::{derive_seed, rng_for};

    let config = ModelConfig {
        input_hw: (16, 16),
        conv_channels: [2, 3, 4],
        fc_dim: 6,
        head,
        seed: derive_seed(seed, "grad-check-init", 0),
        class_names: None,
    };
    config.validate()?;
    let model = build_model::<f64>(&config)?;

    // Batch of 4: batchnorm statistics over a batch of 2 are so degenerate
    // (two points standardize to exactly +-1) that the loss surface turns
    // pathological and finite differences lose their footing.
    let n = 4;
    let mut rng = rng_for(seed, "grad-check-data", 0);
    let x = Tensor::from_vec(
        &[n, 1, 16, 16],
        (0..n * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let labels: Vec<usize> = match head {
        Head::Classifier { classes } => (0..n).map(|_| rng.gen_range(0..classes)).collect(),
        Head::Regressor => Vec::new(),
    };
    let values = Tensor::from_vec(&[n, 1], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;

    let run = |p: &[Vec<f64>], want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut m = model.clone();
        for (slot, vals) in m.params_mut().into_iter().zip(p) {
            slot.data.copy_from_slice(vals);
        }
        let target = match head {
            Head::Classifier { .. } => Target::Labels(&labels),
            Head::Regressor => Target::Values(&values),
        };
        let step = m.forward_train(&x, target).expect("probe forward");
        let loss = step.tape.scalar(step.loss);
        if !want_grads {
            return (loss, None);
        }
        let mut by_id = step.tape.backward(step.loss).expect("probe backward");
        let grads = step
            .param_ids
            .iter()
            .map(|&id| by_id.take(id).expect("param reaches the loss").data)
            .collect();
        (loss, Some(grads))
    };

    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    let init: Vec<Vec<f64>> = model.params().iter().map(|t| t.data.clone()).collect();
    let (_, analytic) = run(&init, true);
    let cfg = GradCheckConfig {
        seed: derive_seed(seed, "grad-check-sample", 0),
        ..GradCheckConfig::default()
    };
    Ok(grad_check(
        &names,
        &init,
        &analytic.expect("gradients requested"),
        |p| run(p, false).0,
        &cfg,
    ))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
}

pub fn save_checkpoint<T: Scalar>(model: &DecoderModel<T>, path: &Path) -> Result<()> {
    let mut blobs: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in model.state_tensors() {
        let blob = tensor::encode_tnsr(tensor);
        entries.push(TensorEntry {
            name: name.to_string(),
            offset: blobs.len(),
            len: blob.len(),
        });
        blobs.extend_from_slice(&blob);
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
    let mut out = Vec::with_capacity(12 + header_json.len() + blobs.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blobs);
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<DecoderModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<DecoderModel<T>> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    cursor
        .read_exact(&mut u32buf)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    cursor
        .read_exact(&mut u32buf)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let header_start = cursor.position() as usize;
    let header_end = header_start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint header overruns the file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[header_start..header_end])
        .map_err(|e| Error::Format(format!("checkpoint header JSON: {e}")))?;
    let blob_base = header_end;

    let mut model: DecoderModel<T> = build_model(&header.config)?;
    let expected: Vec<&'static str> = model.state_tensors().iter().map(|(n, _)| *n).collect();
    let found: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != found {
        return Err(Error::CorruptData(format!(
            "checkpoint tensor set mismatch: expected {expected:?}, found {found:?}"
        )));
    }
    for entry in &header.tensors {
        let start = blob_base
            .checked_add(entry.offset)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| Error::Format("tensor blob overruns the file".into()))?;
        let end = start
            .checked_add(entry.len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("tensor blob overruns the file".into()))?;
        let tensor = tensor::decode_tnsr(&bytes[start..end])?;
        let slot = model
            .state_tensor_mut(&entry.name)
            .expect("names validated above");
        if slot.shape != tensor.shape {
            return Err(Error::CorruptData(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name, tensor.shape, slot.shape
            )));
        }
        *slot = tensor.map_scalar();
    }
    Ok(model)
}
