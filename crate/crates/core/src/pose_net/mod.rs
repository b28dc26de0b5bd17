//! Convolutional head-pose regressor.
//!
//! Three valid convolutions, each followed by ReLU and 2x2 max pooling, then
//! two ReLU fully connected layers and a linear 3-way output (pitch, yaw,
//! roll divided by 90 degrees). Dropout follows the last pooling layer and
//! each hidden fully connected layer.

pub mod layers;
mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, HeadPose};
use crate::gray::GrayImage;
use layers::ConvGeom;

pub use train::{train, EpochRecord, PoseSample, TrainConfig, TrainHistory, TrainedPoseNet};

/// Side length of the square network input.
pub const INPUT_SIZE: usize = 96;
/// Degrees represented by a unit network output.
pub const ANGLE_SCALE_DEG: f64 = 90.0;
/// Intensity used for crop regions outside the image.
pub const PAD_VALUE: f64 = 0.5;

const MODEL_KIND: &str = "pose-net";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseNetArch {
    pub input_size: usize,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for PoseNetArch {
    fn default() -> Self {
        Self {
            input_size: INPUT_SIZE,
            conv: vec![
                ConvSpec { channels: 8, kernel: 5 },
                ConvSpec { channels: 16, kernel: 3 },
                ConvSpec { channels: 32, kernel: 3 },
            ],
            hidden: vec![128, 64],
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    offset: usize,
    len: usize,
    fan_in: usize,
}

impl Slot {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Derived layer geometry and parameter layout.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    convs: Vec<ConvGeom>,
    flat_len: usize,
    /// `(n_in, n_out)` for every dense layer including the output.
    dense: Vec<(usize, usize)>,
    /// Weight slot followed by bias slot, per layer (convs first).
    slots: Vec<Slot>,
    num_params: usize,
}

impl Plan {
    fn new(arch: &PoseNetArch) -> Result<Plan> {
        if arch.conv.is_empty() {
            return Err(Error::invalid("pose net needs at least one conv layer"));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        let mut convs = Vec::new();
        let (mut c, mut h, mut w) = (1, arch.input_size, arch.input_size);
        for spec in &arch.conv {
            if spec.channels == 0 || spec.kernel == 0 || spec.kernel > h || spec.kernel > w {
                return Err(Error::invalid(format!(
                    "conv layer {spec:?} does not fit a {h}x{w} input"
                )));
            }
            let g = ConvGeom {
                c_in: c,
                h,
                w,
                c_out: spec.channels,
                k: spec.kernel,
            };
            c = spec.channels;
            h = g.out_h() / 2;
            w = g.out_w() / 2;
            if h == 0 || w == 0 {
                return Err(Error::invalid("feature map vanishes before the dense layers"));
            }
            convs.push(g);
        }
        let flat_len = c * h * w;
        let mut dense = Vec::new();
        let mut n_in = flat_len;
        for &n_out in arch.hidden.iter().chain(std::iter::once(&3)) {
            if n_out == 0 {
                return Err(Error::invalid("dense layers need at least one unit"));
            }
            dense.push((n_in, n_out));
            n_in = n_out;
        }

        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, fan_in: usize| {
            slots.push(Slot { name, offset, len, fan_in });
            offset += len;
        };
        for (i, g) in convs.iter().enumerate() {
            push(format!("conv{i}.weight"), g.c_out * g.patch_len(), g.patch_len());
            push(format!("conv{i}.bias"), g.c_out, g.patch_len());
        }
        for (i, &(n_in, n_out)) in dense.iter().enumerate() {
            push(format!("fc{i}.weight"), n_in * n_out, n_in);
            push(format!("fc{i}.bias"), n_out, n_in);
        }
        Ok(Plan {
            convs,
            flat_len,
            dense,
            slots,
            num_params: offset,
        })
    }

    fn conv_slots(&self, i: usize) -> (&Slot, &Slot) {
        (&self.slots[2 * i], &self.slots[2 * i + 1])
    }

    fn dense_slots(&self, i: usize) -> (&Slot, &Slot) {
        let base = 2 * self.convs.len();
        (&self.slots[base + 2 * i], &self.slots[base + 2 * i + 1])
    }
}

/// Mutable views of a weight slot and the bias slot that follows it.
fn weight_bias_mut<'a>(grad: &'a mut [f64], w: &Slot, b: &Slot) -> (&'a mut [f64], &'a mut [f64]) {
    let (head, tail) = grad.split_at_mut(b.offset);
    (&mut head[w.range()], &mut tail[..b.len])
}

/// Dropout masks for one batch: one for the flattened features and one per
/// hidden layer. Entries are `0` or `1 / (1 - rate)`.
struct Masks {
    layers: Vec<Vec<f64>>,
}

impl Masks {
    fn sample(plan: &Plan, batch: usize, rate: f64, rng: &mut impl Rng) -> Masks {
        let keep = 1.0 / (1.0 - rate);
        let sizes = std::iter::once(plan.flat_len)
            .chain(plan.dense[..plan.dense.len() - 1].iter().map(|d| d.1));
        let layers = sizes
            .map(|n| {
                (0..batch * n)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect()
            })
            .collect();
        Masks { layers }
    }
}

struct ConvTrace {
    col: Vec<f64>,
    act: Vec<f64>,
    argmax: Vec<usize>,
}

struct Trace {
    convs: Vec<Vec<ConvTrace>>,
    /// Input of each dense layer, after dropout.
    dense_inputs: Vec<Vec<f64>>,
    /// Post-ReLU activations of the hidden layers, before dropout.
    hidden_acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    arch: PoseNetArch,
    plan: Plan,
    params: Vec<f64>,
}

impl PoseNet {
    /// All-zero weights and biases.
    pub fn zeros(arch: PoseNetArch) -> Result<PoseNet> {
        let plan = Plan::new(&arch)?;
        let params = vec![0.0; plan.num_params];
        Ok(PoseNet { arch, plan, params })
    }

    /// He-normal weights, zero biases.
    pub fn initialized(arch: PoseNetArch, rng: &mut impl Rng) -> Result<PoseNet> {
        let mut net = Self::zeros(arch)?;
        let last = net.plan.slots.len() - 2;
        for (i, slot) in net.plan.slots.iter().enumerate() {
            if i % 2 == 1 {
                continue;
            }
            let gain = if i == last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / slot.fan_in as f64).sqrt())
                .expect("positive standard deviation");
            for v in &mut net.params[slot.range()] {
                *v = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: PoseNetArch, params: Vec<f64>) -> Result<PoseNet> {
        let plan = Plan::new(&arch)?;
        if params.len() != plan.num_params {
            return Err(Error::mismatch(
                format!("{} parameters", plan.num_params),
                format!("{} parameters", params.len()),
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        Ok(PoseNet { arch, plan, params })
    }

    pub fn arch(&self) -> &PoseNetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.plan.num_params
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size
    }

    /// Names and parameter index ranges of every tensor, in storage order.
    pub fn tensors(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.plan
            .slots
            .iter()
            .map(|s| (s.name.clone(), s.range()))
            .collect()
    }

    /// Deterministic forward pass with dropout disabled. Returns the raw
    /// normalized (pitch, yaw, roll) outputs.
    pub fn forward(&self, input: &GrayImage) -> Result<[f64; 3]> {
        let n = self.arch.input_size;
        if input.width() != n || input.height() != n {
            return Err(Error::mismatch(
                format!("{n}x{n} input"),
                format!("{}x{}", input.width(), input.height()),
            ));
        }
        Ok(self.forward_batch(&[input.pixels()])[0])
    }

    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Vec<[f64; 3]> {
        let trace = self.run(&self.params, inputs, None, false);
        trace
            .output
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    /// Preprocess, forward, and map the outputs back to degrees, clamping
    /// each angle to `[-90, 90]`.
    pub fn predict_pose(&self, image: &GrayImage, bb: &BoundingBox) -> Result<HeadPose> {
        let crop = crop_resize(image, bb, self.arch.input_size)?;
        Ok(denormalize(self.forward(&crop)?))
    }

    /// Mean squared error over the batch and the three outputs, with its
    /// gradient for every parameter. Dropout is applied when `dropout_rng`
    /// is given.
    pub fn loss_and_gradient(
        &self,
        inputs: &[&[f64]],
        targets: &[[f64; 3]],
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> (f64, Vec<f64>) {
        self.loss_and_gradient_at(&self.params, inputs, targets, dropout_rng)
    }

    /// Same as [`PoseNet::loss_and_gradient`] but evaluated at `params`
    /// (used for the Nesterov lookahead).
    pub(crate) fn loss_and_gradient_at(
        &self,
        params: &[f64],
        inputs: &[&[f64]],
        targets: &[[f64; 3]],
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> (f64, Vec<f64>) {
        let batch = inputs.len();
        let masks = dropout_rng
            .filter(|_| self.arch.dropout > 0.0)
            .map(|rng| Masks::sample(&self.plan, batch, self.arch.dropout, &mut RngRef(rng)));
        let trace = self.run(params, inputs, masks.as_ref(), true);

        let denom = (3 * batch) as f64;
        let mut loss = 0.0;
        let mut d_out = vec![0.0; 3 * batch];
        for (i, t) in targets.iter().enumerate() {
            for c in 0..3 {
                let diff = trace.output[3 * i + c] - t[c];
                loss += diff * diff;
                d_out[3 * i + c] = 2.0 * diff / denom;
            }
        }
        let grad = self.backward(params, &trace, masks.as_ref(), d_out, batch);
        (loss / denom, grad)
    }

    /// Loss only, no dropout; the finite-difference reference.
    pub fn loss_at(&self, params: &[f64], inputs: &[&[f64]], targets: &[[f64; 3]]) -> f64 {
        let trace = self.run(params, inputs, None, false);
        let mut loss = 0.0;
        for (o, t) in trace.output.chunks_exact(3).zip(targets) {
            for c in 0..3 {
                loss += (o[c] - t[c]).powi(2);
            }
        }
        loss / (3 * inputs.len()) as f64
    }

    fn run(&self, params: &[f64], inputs: &[&[f64]], masks: Option<&Masks>, record: bool) -> Trace {
        let plan = &self.plan;
        let batch = inputs.len();
        let mut flat = vec![0.0; batch * plan.flat_len];
        let mut conv_traces = Vec::with_capacity(if record { batch } else { 0 });

        for (b, input) in inputs.iter().enumerate() {
            let mut current: Vec<f64> = input.to_vec();
            let mut sample_traces = Vec::new();
            for (i, g) in plan.convs.iter().enumerate() {
                let (ws, bs) = plan.conv_slots(i);
                let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
                let mut act = vec![0.0; g.c_out * g.out_pixels()];
                layers::conv_forward(g, &current, &params[ws.range()], &params[bs.range()], &mut col, &mut act);
                layers::relu_forward(&mut act);
                let pooled_len = g.c_out * (g.out_h() / 2) * (g.out_w() / 2);
                let mut pooled = vec![0.0; pooled_len];
                let mut argmax = vec![0usize; pooled_len];
                layers::maxpool_forward(g.c_out, g.out_h(), g.out_w(), &act, &mut pooled, &mut argmax);
                if record {
                    sample_traces.push(ConvTrace { col, act, argmax });
                }
                current = pooled;
            }
            flat[b * plan.flat_len..(b + 1) * plan.flat_len].copy_from_slice(&current);
            if record {
                conv_traces.push(sample_traces);
            }
        }

        if let Some(m) = masks {
            layers::apply_mask(&mut flat, &m.layers[0]);
        }
        let mut dense_inputs = vec![flat];
        let mut hidden_acts = Vec::new();
        let n_dense = plan.dense.len();
        let mut output = Vec::new();
        for (l, &(n_in, n_out)) in plan.dense.iter().enumerate() {
            let (ws, bs) = plan.dense_slots(l);
            let mut y = vec![0.0; batch * n_out];
            layers::dense_forward(
                batch,
                n_in,
                n_out,
                &dense_inputs[l],
                &params[ws.range()],
                &params[bs.range()],
                &mut y,
            );
            if l + 1 == n_dense {
                output = y;
            } else {
                layers::relu_forward(&mut y);
                let mut next = y.clone();
                if let Some(m) = masks {
                    layers::apply_mask(&mut next, &m.layers[l + 1]);
                }
                hidden_acts.push(y);
                dense_inputs.push(next);
            }
        }
        Trace {
            convs: conv_traces,
            dense_inputs,
            hidden_acts,
            output,
        }
    }

    fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        masks: Option<&Masks>,
        d_out: Vec<f64>,
        batch: usize,
    ) -> Vec<f64> {
        let plan = &self.plan;
        let mut grad = vec![0.0; plan.num_params];
        let n_dense = plan.dense.len();

        let mut d_y = d_out;
        for l in (0..n_dense).rev() {
            let (n_in, n_out) = plan.dense[l];
            let (ws, bs) = plan.dense_slots(l);
            let mut d_x = vec![0.0; batch * n_in];
            {
                let (dw, db) = weight_bias_mut(&mut grad, ws, bs);
                layers::dense_backward(
                    batch,
                    n_in,
                    n_out,
                    &trace.dense_inputs[l],
                    &params[ws.range()],
                    &d_y,
                    dw,
                    db,
                    Some(&mut d_x),
                );
            }
            if let Some(m) = masks {
                layers::apply_mask(&mut d_x, &m.layers[l]);
            }
            if l > 0 {
                layers::relu_backward(&trace.hidden_acts[l - 1], &mut d_x);
            }
            d_y = d_x;
        }
        let d_flat = d_y;

        for (b, sample) in trace.convs.iter().enumerate() {
            let mut d_pooled = d_flat[b * plan.flat_len..(b + 1) * plan.flat_len].to_vec();
            for i in (0..plan.convs.len()).rev() {
                let g = &plan.convs[i];
                let t = &sample[i];
                let mut d_act = vec![0.0; t.act.len()];
                layers::maxpool_backward(&t.argmax, &d_pooled, &mut d_act);
                layers::relu_backward(&t.act, &mut d_act);
                let (ws, bs) = plan.conv_slots(i);
                let weights = &params[ws.range()];
                let (dw, db) = weight_bias_mut(&mut grad, ws, bs);
                if i > 0 {
                    let mut d_input = vec![0.0; g.c_in * g.h * g.w];
                    let mut d_col = vec![0.0; t.col.len()];
                    layers::conv_backward(g, &t.col, weights, &d_act, dw, db, Some((&mut d_input, &mut d_col)));
                    d_pooled = d_input;
                } else {
                    layers::conv_backward(g, &t.col, weights, &d_act, dw, db, None);
                }
            }
        }
        grad
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, MODEL_KIND, &self.arch, &[("params", &self.params)])
    }

    /// Like `save`, with `provenance` (training config, seeds) stored next to
    /// the architecture in the header.
    pub fn save_with_provenance(&self, path: impl AsRef<Path>, provenance: &serde_json::Value) -> Result<()> {
        let mut meta = serde_json::to_value(&self.arch)?;
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("provenance".into(), provenance.clone());
        }
        container::save(path, MODEL_KIND, &meta, &[("params", &self.params)])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PoseNet> {
        let mut c = container::load(path, MODEL_KIND)?;
        let arch: PoseNetArch = serde_json::from_value(c.meta.clone())?;
        let params = c.take_array("params")?;
        Self::from_params(arch, params)
    }
}

/// Adapter so a `&mut dyn RngCore` can be passed where `impl Rng` is needed.
struct RngRef<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngRef<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

pub fn normalize_pose(pose: &HeadPose) -> [f64; 3] {
    pose.as_array().map(|a| a / ANGLE_SCALE_DEG)
}

/// Maps raw network outputs to degrees and clamps into the pose domain.
pub fn denormalize(raw: [f64; 3]) -> HeadPose {
    let [p, y, r] = raw.map(|v| v * ANGLE_SCALE_DEG);
    HeadPose::clamped(p, y, r)
}

/// Network input for a face box: the crop at [`INPUT_SIZE`] resolution.
pub fn preprocess(image: &GrayImage, bb: &BoundingBox) -> Result<GrayImage> {
    crop_resize(image, bb, INPUT_SIZE)
}

/// Bilinear crop of `bb` resampled to `size x size`; area outside the image
/// reads [`PAD_VALUE`].
pub fn crop_resize(image: &GrayImage, bb: &BoundingBox, size: usize) -> Result<GrayImage> {
    bb.validate()?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    if bb.x >= w || bb.y >= h || bb.x + bb.w <= 0.0 || bb.y + bb.h <= 0.0 {
        return Err(Error::EmptyIntersection);
    }
    let sx = bb.w / size as f64;
    let sy = bb.h / size as f64;
    GrayImage::from_fn(size, size, |j, i| {
        let x = bb.x + (j as f64 + 0.5) * sx;
        let y = bb.y + (i as f64 + 0.5) * sy;
        image.sample_padded(x, y, PAD_VALUE).clamp(0.0, 1.0)
    })
}
