//! Feed-forward ReLU network with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (`out x in`, row-major) followed by its `out` biases.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths, number of classes.
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, dropout_rate: f64) -> Result<Self> {
        let cfg = Self {
            layer_sizes,
            dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 54 -> 45 -> 30 -> 15 -> 2 with dropout 0.2.
    pub fn covtype() -> Self {
        Self {
            layer_sizes: vec![54, 45, 30, 15, 2],
            dropout_rate: 0.2,
        }
    }

    /// 784 -> 128 -> 64 -> 10 with dropout 0.2, on flattened pixels.
    pub fn mnist() -> Self {
        Self {
            layer_sizes: vec![784, 128, 64, 10],
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::config("model.layer_sizes", "need input, at least one hidden layer, and output"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layer_sizes", "layer widths must be positive"));
        }
        if *self.layer_sizes.last().unwrap() < 2 {
            return Err(Error::config("model.layer_sizes", "output layer needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layer_sizes
            .windows(2)
            .map(|w| LayerShape { rows: w[1], cols: w[0] })
            .collect()
    }
}

/// Weight matrix shape of one linear layer: `rows` outputs, `cols` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    flat: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl ModelParams {
    pub fn zeros(shapes: &[LayerShape]) -> Self {
        let n = shapes.iter().map(LayerShape::num_params).sum();
        Self {
            flat: vec![0.0; n],
            shapes: shapes.to_vec(),
        }
    }

    pub fn from_flat(shapes: &[LayerShape], flat: Vec<f64>) -> Result<Self> {
        let n: usize = shapes.iter().map(LayerShape::num_params).sum();
        if flat.len() != n {
            return Err(Error::Shape(format!("{} values for layers holding {n}", flat.len())));
        }
        Ok(Self {
            flat,
            shapes: shapes.to_vec(),
        })
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Flat index range of each layer (weights and biases together).
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.shapes
            .iter()
            .map(|s| {
                let r = start..start + s.num_params();
                start = r.end;
                r
            })
            .collect()
    }

    fn layer(&self, l: usize, range: Range<usize>) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let s = self.shapes[l];
        let (w, b) = self.flat[range].split_at(s.rows * s.cols);
        (
            ArrayView2::from_shape((s.rows, s.cols), w).expect("layer slice sized by shape"),
            ArrayView1::from(b),
        )
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.shapes == other.shapes
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    pub fn l2_distance(&self, other: &ModelParams) -> f64 {
        self.flat
            .iter()
            .zip(&other.flat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// He-normal weights (`N(0, 2 / fan_in)`), zero biases.
pub fn init_params(cfg: &MlpConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(&cfg.shapes());
    let mut rng = rng_from_seed(seed);
    let ranges = params.layer_ranges();
    for (shape, range) in cfg.shapes().iter().zip(ranges) {
        let normal = Normal::new(0.0, (2.0 / shape.cols as f64).sqrt()).expect("positive std");
        let weights = range.start..range.start + shape.rows * shape.cols;
        for w in &mut params.flat[weights] {
            *w = normal.sample(&mut rng);
        }
    }
    params
}

/// Whether dropout is active in a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SimRng),
}

/// Intermediate values of a forward pass, kept for backpropagation.
pub struct ForwardPass {
    pub logits: Array2<f64>,
    /// Inverted-dropout masks (entries `0` or `1 / (1 - rate)`), one per
    /// hidden layer; empty in eval mode.
    pub dropout_masks: Vec<Array2<f64>>,
    /// Input of every linear layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    hidden_pre: Vec<Array2<f64>>,
}

/// The proximal anchor of FedProx: adds `mu / 2 * |w - anchor|^2`.
#[derive(Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ModelParams,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: MlpConfig,
}

impl Mlp {
    pub fn new(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.shapes() != self.cfg.shapes().as_slice() {
            return Err(Error::Shape("parameters do not match the network layout".into()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ModelParams, batch: ArrayView2<'_, f64>, mut mode: Mode<'_>) -> Result<ForwardPass> {
        self.check_params(params)?;
        if batch.ncols() != self.cfg.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.ncols(),
                self.cfg.input_dim()
            )));
        }
        let ranges = params.layer_ranges();
        let last = ranges.len() - 1;
        let rate = self.cfg.dropout_rate;
        let mut inputs = Vec::with_capacity(ranges.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut dropout_masks = Vec::new();
        let mut a = batch.to_owned();
        for (l, range) in ranges.into_iter().enumerate() {
            let (w, b) = params.layer(l, range);
            let z = a.dot(&w.t()) + b;
            inputs.push(a);
            if l == last {
                return Ok(ForwardPass {
                    logits: z,
                    dropout_masks,
                    inputs,
                    hidden_pre,
                });
            }
            let mut h = z.mapv(|v| v.max(0.0));
            if let Mode::Train(rng) = &mut mode {
                if rate > 0.0 {
                    let keep_scale = 1.0 / (1.0 - rate);
                    let mask = Array2::from_shape_fn(h.raw_dim(), |_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep_scale
                        }
                    });
                    h *= &mask;
                    dropout_masks.push(mask);
                }
            }
            hidden_pre.push(z);
            a = h;
        }
        unreachable!("network has at least one layer")
    }

    /// Mean softmax cross-entropy (plus the proximal term when given) and
    /// its exact gradient.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        batch: ArrayView2<'_, f64>,
        labels: &[usize],
        prox: Option<Prox<'_>>,
        mode: Mode<'_>,
    ) -> Result<(f64, ModelParams)> {
        if batch.nrows() == 0 {
            return Err(Error::Empty("loss of an empty batch".into()));
        }
        if labels.len() != batch.nrows() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), batch.nrows())));
        }
        let q = self.cfg.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
            return Err(Error::Parameter(format!("label {bad} outside 0..{q}")));
        }
        if let Some(p) = &prox {
            if !p.anchor.same_shape(params) {
                return Err(Error::Shape("proximal anchor does not match parameters".into()));
            }
        }

        let pass = self.forward(params, batch, mode)?;
        let n = batch.nrows() as f64;
        let mut probs = softmax_rows(&pass.logits);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = pass.logits.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs[[i, y]] -= 1.0;
        }
        loss /= n;
        let mut delta = probs / n;

        let mut grad = ModelParams::zeros(params.shapes());
        let ranges = params.layer_ranges();
        for l in (0..ranges.len()).rev() {
            let s = params.shapes[l];
            let g_w = delta.t().dot(&pass.inputs[l]);
            let g_b: Array1<f64> = delta.sum_axis(Axis(0));
            let dst = &mut grad.flat[ranges[l].clone()];
            let (dw, db) = dst.split_at_mut(s.rows * s.cols);
            for (d, v) in dw.iter_mut().zip(g_w.iter()) {
                *d = *v;
            }
            for (d, v) in db.iter_mut().zip(g_b.iter()) {
                *d = *v;
            }
            if l == 0 {
                break;
            }
            let (w, _) = params.layer(l, ranges[l].clone());
            let mut upstream = delta.dot(&w);
            if let Some(mask) = pass.dropout_masks.get(l - 1) {
                upstream *= mask;
            }
            upstream.zip_mut_with(&pass.hidden_pre[l - 1], |u, &z| {
                if z <= 0.0 {
                    *u = 0.0;
                }
            });
            delta = upstream;
        }

        if let Some(p) = prox {
            if p.mu != 0.0 {
                let mut sq = 0.0;
                for ((g, w), a) in grad.flat.iter_mut().zip(&params.flat).zip(&p.anchor.flat) {
                    let d = w - a;
                    sq += d * d;
                    *g += p.mu * d;
                }
                loss += 0.5 * p.mu * sq;
            }
        }
        Ok((loss, grad))
    }

    /// Argmax of eval-mode logits per row; ties go to the lowest class.
    pub fn predict(&self, params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let pass = self.forward(params, features, Mode::Eval)?;
        Ok(argmax_rows(&pass.logits))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `params - eta * grad`, rejecting non-finite results.
pub fn sgd_step(params: &ModelParams, grad: &ModelParams, eta: f64) -> Result<ModelParams> {
    if !params.same_shape(grad) {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Parameter(format!("learning rate must be positive, got {eta}")));
    }
    let flat: Vec<f64> = params.flat.iter().zip(&grad.flat).map(|(w, g)| w - eta * g).collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { round: None, client: None });
    }
    Ok(ModelParams {
        flat,
        shapes: params.shapes.clone(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DCFLCKPT";

/// Checkpoint layout (little-endian): magic `DCFLCKPT`, `u32` layer count,
/// `(u32 rows, u32 cols)` per layer, then every parameter as `f64`.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut out = Vec::with_capacity(16 + params.shapes.len() * 8 + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.shapes.len() as u32).to_le_bytes());
    for s in &params.shapes {
        out.extend_from_slice(&(s.rows as u32).to_le_bytes());
        out.extend_from_slice(&(s.cols as u32).to_le_bytes());
    }
    for v in &params.flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::Format(format!("{} is truncated", path.display()));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(truncated)
    };
    let layers = u32_at(8)?;
    let mut shapes = Vec::with_capacity(layers);
    for l in 0..layers {
        shapes.push(LayerShape {
            rows: u32_at(12 + 8 * l)?,
            cols: u32_at(16 + 8 * l)?,
        });
    }
    let body = &bytes[12 + 8 * layers..];
    if body.len() % 8 != 0 {
        return Err(truncated());
    }
    let flat = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ModelParams::from_flat(&shapes, flat)
}
