//! Reduced-scale wide-residual classifiers over 1-D series or 2-D images.
//!
//! Pre-activation residual blocks with identity shortcuts, a 1x1 projection
//! on channel or stride change, and a BN-ReLU-pool-dense head. Stage-end
//! activations (post-activation) can be captured for similarity-based
//! distillation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Tensor};
use crate::nn::ops;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Series1d,
    Image2d,
}

/// Architecture description; equal specs build bitwise-identical parameter
/// layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_kind: InputKind,
    pub channels_in: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub width: Vec<usize>,
    pub classes: usize,
    pub batch_norm: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("stages and blocks_per_stage must be positive".into()));
        }
        if self.width.len() != self.stages {
            return Err(Error::Config(format!(
                "width list has {} entries for {} stages",
                self.width.len(),
                self.stages
            )));
        }
        if self.width.iter().any(|&w| w == 0) || self.channels_in == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("{} classes < 2", self.classes)));
        }
        Ok(())
    }

    pub fn series(channels_in: usize, classes: usize) -> Self {
        ModelSpec {
            input_kind: InputKind::Series1d,
            channels_in,
            stages: 3,
            blocks_per_stage: 2,
            width: vec![8, 16, 32],
            classes,
            batch_norm: true,
        }
    }

    pub fn image(channels_in: usize, classes: usize) -> Self {
        ModelSpec {
            input_kind: InputKind::Image2d,
            ..ModelSpec::series(channels_in, classes)
        }
    }

    pub fn with_width(mut self, width: Vec<usize>) -> Self {
        self.stages = width.len();
        self.width = width;
        self
    }

    /// Stage indices usable as capture layers.
    pub fn stage_ids(&self) -> std::ops::Range<usize> {
        0..self.stages
    }
}

/// A named trainable parameter with its gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// A named non-trainable buffer (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy)]
struct BlockIdx {
    bn1: Option<BnIdx>,
    conv1: ConvIdx,
    bn2: Option<BnIdx>,
    conv2: ConvIdx,
    proj: Option<ConvIdx>,
    stride: usize,
}

#[derive(Clone)]
struct Arch {
    stem: ConvIdx,
    stages: Vec<Vec<BlockIdx>>,
    head_bn: Option<BnIdx>,
    fc: ConvIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A classifier instance: spec, parameters, and batch-norm buffers.
#[derive(Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
    arch: Arch,
}

struct ArchBuilder {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    kernel_numel: usize,
}

impl ArchBuilder {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvIdx {
        let w_shape = match self.kernel_numel {
            1 => vec![c_out, c_in, k],
            2 => vec![c_out, c_in, k, k],
            _ => unreachable!(),
        };
        self.params.push(Param {
            name: format!("{name}.w"),
            shape: w_shape,
            data: Vec::new(),
            grad: None,
        });
        self.params.push(Param {
            name: format!("{name}.b"),
            shape: vec![c_out],
            data: Vec::new(),
            grad: None,
        });
        ConvIdx {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIdx {
        self.params.push(Param {
            name: format!("{name}.gamma"),
            shape: vec![c],
            data: Vec::new(),
            grad: None,
        });
        self.params.push(Param {
            name: format!("{name}.beta"),
            shape: vec![c],
            data: Vec::new(),
            grad: None,
        });
        self.buffers.push(Buffer {
            name: format!("{name}.running_mean"),
            data: vec![0.0; c],
        });
        self.buffers.push(Buffer {
            name: format!("{name}.running_var"),
            data: vec![1.0; c],
        });
        BnIdx {
            gamma: self.params.len() - 2,
            beta: self.params.len() - 1,
            mean: self.buffers.len() - 2,
            var: self.buffers.len() - 1,
        }
    }
}

impl Model {
    fn build_arch(spec: &ModelSpec) -> (Arch, Vec<Param>, Vec<Buffer>) {
        let mut b = ArchBuilder {
            params: Vec::new(),
            buffers: Vec::new(),
            kernel_numel: match spec.input_kind {
                InputKind::Series1d => 1,
                InputKind::Image2d => 2,
            },
        };
        let stem = b.conv("stem", spec.width[0], spec.channels_in, 3);
        let mut stages = Vec::new();
        let mut c_in = spec.width[0];
        for s in 0..spec.stages {
            let c_out = spec.width[s];
            let mut blocks = Vec::new();
            for blk in 0..spec.blocks_per_stage {
                let stride = if blk == 0 && s > 0 { 2 } else { 1 };
                let name = format!("s{s}.b{blk}");
                let bn1 = spec.batch_norm.then(|| b.bn(&format!("{name}.bn1"), c_in));
                let conv1 = b.conv(&format!("{name}.conv1"), c_out, c_in, 3);
                let bn2 = spec.batch_norm.then(|| b.bn(&format!("{name}.bn2"), c_out));
                let conv2 = b.conv(&format!("{name}.conv2"), c_out, c_out, 3);
                let proj = (c_in != c_out || stride != 1)
                    .then(|| b.conv(&format!("{name}.proj"), c_out, c_in, 1));
                blocks.push(BlockIdx {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    proj,
                    stride,
                });
                c_in = c_out;
            }
            stages.push(blocks);
        }
        let head_bn = spec.batch_norm.then(|| b.bn("head.bn", c_in));
        let fc = {
            // dense weight is [classes, features]
            b.params.push(Param {
                name: "head.fc.w".into(),
                shape: vec![spec.classes, c_in],
                data: Vec::new(),
                grad: None,
            });
            b.params.push(Param {
                name: "head.fc.b".into(),
                shape: vec![spec.classes],
                data: Vec::new(),
                grad: None,
            });
            ConvIdx {
                w: b.params.len() - 2,
                b: b.params.len() - 1,
            }
        };
        (
            Arch {
                stem,
                stages,
                head_bn,
                fc,
            },
            b.params,
            b.buffers,
        )
    }

    /// Random He-normal initialization, deterministic per seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let (arch, mut params, buffers) = Model::build_arch(spec);
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        for p in &mut params {
            let n = p.shape.iter().product();
            p.data = if p.name.ends_with(".w") {
                let fan_in: usize = p.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if p.name.ends_with(".gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n] // biases and beta
            };
        }
        Ok(Model {
            spec: spec.clone(),
            params,
            buffers,
            arch,
        })
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn expected_input(&self) -> String {
        match self.spec.input_kind {
            InputKind::Series1d => format!("[n, {}, length]", self.spec.channels_in),
            InputKind::Image2d => format!("[n, {}, h, w]", self.spec.channels_in),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match self.spec.input_kind {
            InputKind::Series1d => shape.len() == 3 && shape[1] == self.spec.channels_in,
            InputKind::Image2d => shape.len() == 4 && shape[1] == self.spec.channels_in,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                expected: self.expected_input(),
                actual: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    fn conv(
        &self,
        g: &Graph,
        leaves: &[Tensor],
        idx: ConvIdx,
        x: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let _ = g;
        match self.spec.input_kind {
            InputKind::Series1d => ops::conv1d(x, &leaves[idx.w], &leaves[idx.b], stride, pad),
            InputKind::Image2d => ops::conv2d(x, &leaves[idx.w], &leaves[idx.b], stride, pad),
        }
    }

    fn bn_relu(
        &self,
        g: &Graph,
        leaves: &[Tensor],
        bn: Option<BnIdx>,
        x: &Tensor,
        mode: Mode,
        updates: &mut Vec<(usize, usize, ops::BnStats)>,
    ) -> Result<Tensor> {
        let _ = g;
        let normed = match bn {
            Some(idx) => match mode {
                Mode::Train => {
                    let (y, stats) =
                        ops::batch_norm_train(x, &leaves[idx.gamma], &leaves[idx.beta], BN_EPS)?;
                    updates.push((idx.mean, idx.var, stats));
                    y
                }
                Mode::Eval => ops::batch_norm_eval(
                    x,
                    &leaves[idx.gamma],
                    &leaves[idx.beta],
                    &self.buffers[idx.mean].data,
                    &self.buffers[idx.var].data,
                    BN_EPS,
                )?,
            },
            None => x.clone(),
        };
        ops::relu(&normed)
    }

    fn forward_inner(
        &self,
        g: &Graph,
        batch: &Tensor,
        capture: &[usize],
        mode: Mode,
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>, Vec<(usize, usize, ops::BnStats)>, Vec<Tensor>)>
    {
        self.check_input(batch.shape())?;
        for &layer in capture {
            if layer >= self.spec.stages {
                return Err(Error::Config(format!(
                    "capture layer {layer} out of range for {} stages",
                    self.spec.stages
                )));
            }
        }
        // parameters enter the graph as leaves, in declaration order
        let leaves: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| g.tensor(p.shape.clone(), p.data.clone()))
            .collect();
        let mut updates = Vec::new();
        let mut captured = BTreeMap::new();

        let mut x = self.conv(g, &leaves, self.arch.stem, batch, 1, 1)?;
        for (s, blocks) in self.arch.stages.iter().enumerate() {
            for blk in blocks {
                let act = self.bn_relu(g, &leaves, blk.bn1, &x, mode, &mut updates)?;
                let mut y = self.conv(g, &leaves, blk.conv1, &act, blk.stride, 1)?;
                let act2 = self.bn_relu(g, &leaves, blk.bn2, &y, mode, &mut updates)?;
                y = self.conv(g, &leaves, blk.conv2, &act2, 1, 1)?;
                let shortcut = match blk.proj {
                    Some(p) => self.conv(g, &leaves, p, &act, blk.stride, 0)?,
                    None => x.clone(),
                };
                x = ops::add(&y, &shortcut)?;
            }
            if capture.contains(&s) {
                captured.insert(s, ops::relu(&x)?);
            }
        }
        let head = self.bn_relu(g, &leaves, self.arch.head_bn, &x, mode, &mut updates)?;
        let pooled = ops::global_avg_pool(&head)?;
        let logits = ops::dense(&pooled, &leaves[self.arch.fc.w], &leaves[self.arch.fc.b])?;
        Ok((logits, captured, updates, leaves))
    }

    /// Evaluation-mode forward pass; no state is touched.
    pub fn forward_eval(
        &self,
        g: &Graph,
        batch: &Tensor,
        capture: &[usize],
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let (logits, captured, _updates, _leaves) =
            self.forward_inner(g, batch, capture, Mode::Eval)?;
        Ok((logits, captured))
    }

    /// Training-mode forward pass. Batch-norm uses batch statistics and the
    /// running buffers are updated. Returns the parameter leaf tensors so the
    /// optimizer can read their gradients after `backward`.
    pub fn forward_train(
        &mut self,
        g: &Graph,
        batch: &Tensor,
        capture: &[usize],
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>, Vec<Tensor>)> {
        let (logits, captured, updates, leaves) =
            self.forward_inner(g, batch, capture, Mode::Train)?;
        for (mean_idx, var_idx, stats) in updates {
            let rm = &mut self.buffers[mean_idx].data;
            for (r, &m) in rm.iter_mut().zip(stats.mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = &mut self.buffers[var_idx].data;
            for (r, &v) in rv.iter_mut().zip(stats.var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok((logits, captured, leaves))
    }

    /// Copy gradients from a backward pass into the parameter slots.
    pub fn absorb_grads(&mut self, leaves: &[Tensor], grads: &crate::nn::graph::Gradients) {
        for (p, leaf) in self.params.iter_mut().zip(leaves.iter()) {
            p.grad = Some(grads.get(leaf).to_vec());
        }
    }
}
