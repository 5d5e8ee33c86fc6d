//! Miniature encoder–decoder with a segmentation head and a dense feature head.
//!
//! ```text
//! image ─ enc0 ─ e0 ─ down1 ─ e1 ─ down2 ─ e2          (1×, ½×, ¼×)
//!          lat0 │        lat1 │        lat2 │
//!               t0 ◄─ up ─ p1 ◄─ up ── p2 ◄─┘          (top-down, 3×3 dec convs)
//!  concat(p0, up p1, up up p2) ─ fuse ─ fused (F×H×W)
//!  fused ─ seg ─ logits (C×H×W)
//!  fused ─ dense1 ─ GELU ─ dense2 ─ dense (D×H×W)
//! ```
//!
//! Lateral and decoder convolutions use `base_channels` filters. Every layer
//! except the two head outputs is followed by GELU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::idmap::IdMap;
use crate::numerics::{Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub dense_dim: usize,
    pub base_channels: usize,
    pub fused_channels: usize,
    pub hidden_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 5,
            dense_dim: 3,
            base_channels: 16,
            fused_channels: 32,
            hidden_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(contract_err!("model needs at least 2 classes"));
        }
        if self.dense_dim < 1 || self.base_channels < 1 || self.fused_channels < 1 || self.hidden_channels < 1 {
            return Err(contract_err!("model widths must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn param_specs(&self) -> Vec<(String, Shape)> {
        let b = self.base_channels;
        let conv = |name: &str, out: usize, inp: usize, k: usize| {
            [
                (format!("{name}.weight"), vec![out, inp, k, k]),
                (format!("{name}.bias"), vec![out]),
            ]
        };
        [
            conv("enc0", b, 3, 3),
            conv("down1", 2 * b, b, 3),
            conv("down2", 4 * b, 2 * b, 3),
            conv("lat0", b, b, 1),
            conv("lat1", b, 2 * b, 1),
            conv("lat2", b, 4 * b, 1),
            conv("dec0", b, b, 3),
            conv("dec1", b, b, 3),
            conv("dec2", b, b, 3),
            conv("fuse", self.fused_channels, 3 * b, 1),
            conv("seg", self.classes, self.fused_channels, 1),
            conv("dense1", self.hidden_channels, self.fused_channels, 1),
            conv("dense2", self.dense_dim, self.hidden_channels, 1),
        ]
        .into_iter()
        .flatten()
        .map(|(name, dims)| (name, Shape::new(dims).expect("positive widths")))
        .collect()
    }
}

/// Layer indices into the parameter list (weight at 2i, bias at 2i+1).
mod layer {
    pub const ENC0: usize = 0;
    pub const DOWN1: usize = 1;
    pub const DOWN2: usize = 2;
    pub const LAT0: usize = 3;
    pub const LAT1: usize = 4;
    pub const LAT2: usize = 5;
    pub const DEC0: usize = 6;
    pub const DEC1: usize = 7;
    pub const DEC2: usize = 8;
    pub const FUSE: usize = 9;
    pub const SEG: usize = 10;
    pub const DENSE1: usize = 11;
    pub const DENSE2: usize = 12;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform(−1/√fan_in, 1/√fan_in) weights and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape.dims()[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..shape.numel()).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("shape matches its parameter")
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.param_specs().into_iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Ok(ModelParams { config, tensors })
    }

    /// Rebuilds parameters from tensors listed in [`ModelConfig::param_specs`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(shape_err!("expected {} parameter tensors, got {}", specs.len(), tensors.len()));
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if t.shape() != shape {
                return Err(shape_err!("parameter {name}: expected {shape}, got {}", t.shape()));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn record_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Records every parameter as a constant.
    pub fn record_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

/// Head outputs of one forward pass, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub dense: Var,
    pub fused: Var,
}

/// Head outputs of one forward pass, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    pub logits: Tensor,
    pub dense: Tensor,
    pub fused: Tensor,
}

fn conv(tape: &mut Tape, p: &[Var], layer: usize, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = (p[2 * layer], p[2 * layer + 1]);
    let k = tape.value(w).dims()[2];
    tape.conv2d(x, w, b, stride, k / 2)
}

fn conv_gelu(tape: &mut Tape, p: &[Var], layer: usize, x: Var, stride: usize) -> Result<Var> {
    let y = conv(tape, p, layer, x, stride)?;
    Ok(tape.gelu(y))
}

/// Runs the network on a tape. `params` are the nodes returned by
/// [`ModelParams::record_leaves`] or [`ModelParams::record_constants`].
pub fn forward_on_tape(tape: &mut Tape, params: &[Var], image: Var) -> Result<ForwardVars> {
    use layer::*;
    let (c, h, w) = tape.value(image).shape().chw()?;
    if c != 3 {
        return Err(shape_err!("model expects an RGB image, got {c} channels"));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(shape_err!("image height and width must be divisible by 4, got {h}×{w}"));
    }
    if params.len() != 26 {
        return Err(shape_err!("expected 26 parameter nodes, got {}", params.len()));
    }

    let e0 = conv_gelu(tape, params, ENC0, image, 1)?;
    let e1 = conv_gelu(tape, params, DOWN1, e0, 2)?;
    let e2 = conv_gelu(tape, params, DOWN2, e1, 2)?;

    let l2 = conv(tape, params, LAT2, e2, 1)?;
    let p2 = conv_gelu(tape, params, DEC2, l2, 1)?;

    let p2_up = tape.upsample_bilinear_2x(p2)?;
    let l1 = conv(tape, params, LAT1, e1, 1)?;
    let t1 = tape.add(p2_up, l1)?;
    let p1 = conv_gelu(tape, params, DEC1, t1, 1)?;

    let p1_up = tape.upsample_bilinear_2x(p1)?;
    let l0 = conv(tape, params, LAT0, e0, 1)?;
    let t0 = tape.add(p1_up, l0)?;
    let p0 = conv_gelu(tape, params, DEC0, t0, 1)?;

    let p2_full = tape.upsample_bilinear_2x(p2_up)?;
    let stacked = tape.concat_channels(p0, p1_up)?;
    let stacked = tape.concat_channels(stacked, p2_full)?;
    let fused = conv_gelu(tape, params, FUSE, stacked, 1)?;

    let logits = conv(tape, params, SEG, fused, 1)?;
    let hidden = conv_gelu(tape, params, DENSE1, fused, 1)?;
    let dense = conv(tape, params, DENSE2, hidden, 1)?;
    Ok(ForwardVars { logits, dense, fused })
}

/// Gradient-free forward pass.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<ForwardOut> {
    let mut tape = Tape::new();
    let p = params.record_constants(&mut tape);
    let x = tape.constant(image.clone());
    let out = forward_on_tape(&mut tape, &p, x)?;
    Ok(ForwardOut {
        logits: tape.value(out.logits).clone(),
        dense: tape.value(out.dense).clone(),
        fused: tape.value(out.fused).clone(),
    })
}

/// Per-pixel argmax over class logits; ties go to the lowest class id.
pub fn predict_labels(logits: &Tensor) -> Result<IdMap> {
    let (c, h, w) = logits.shape().chw()?;
    if c > 256 {
        return Err(shape_err!("{c} classes do not fit an 8-bit label map"));
    }
    let n = h * w;
    let x = logits.data();
    let ids = (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if x[k * n + p] > x[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    IdMap::new(w, h, ids)
}

/// `ema ← decay·ema + (1 − decay)·current`, element-wise.
pub fn ema_update(ema: &mut ModelParams, current: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(contract_err!("EMA decay {decay} outside [0, 1]"));
    }
    if ema.config != current.config {
        return Err(contract_err!("EMA and model configurations differ"));
    }
    for (e, c) in ema.tensors.iter_mut().zip(&current.tensors) {
        if e.shape() != c.shape() {
            return Err(contract_err!("EMA layout mismatch: {} vs {}", e.shape(), c.shape()));
        }
    }
    for (e, c) in ema.tensors.iter_mut().zip(&current.tensors) {
        for (a, &b) in e.data_mut().iter_mut().zip(c.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([3, h, w], (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        let params = ModelParams::init(ModelConfig::default(), 0).unwrap();
        let out = forward(&params, &image(64, 64, 1)).unwrap();
        assert_eq!(out.logits.dims(), &[5, 64, 64]);
        assert_eq!(out.dense.dims(), &[3, 64, 64]);
        assert_eq!(out.fused.dims(), &[32, 64, 64]);
        assert!(out.logits.is_finite() && out.dense.is_finite());

        let out = forward(&params, &image(12, 20, 2)).unwrap();
        assert_eq!(out.logits.dims(), &[5, 12, 20]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let params = ModelParams::init(ModelConfig::default(), 0).unwrap();
        assert!(matches!(forward(&params, &image(10, 16, 0)), Err(crate::Error::InvalidShape(_))));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let params = ModelParams::zeros(ModelConfig::default()).unwrap();
        let out = forward(&params, &image(16, 16, 3)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded_bounded_and_bias_free() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(cfg, 9).unwrap();
        assert_eq!(a, ModelParams::init(cfg, 9).unwrap());
        assert_ne!(a, ModelParams::init(cfg, 10).unwrap());
        for ((name, shape), t) in cfg.param_specs().iter().zip(a.tensors()) {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let fan_in: usize = shape.dims()[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(t.max_abs() <= bound, "{name}");
                // The draws actually use the range, not just a corner of it.
                assert!(t.max_abs() > 0.5 * bound, "{name}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::init(ModelConfig::default(), 4).unwrap();
        let x = image(16, 16, 5);
        assert_eq!(forward(&params, &x).unwrap(), forward(&params, &x).unwrap());
    }

    #[test]
    fn ema_update_rules() {
        let cfg = ModelConfig {
            base_channels: 2,
            fused_channels: 2,
            hidden_channels: 2,
            ..ModelConfig::default()
        };
        let cur = ModelParams::init(cfg, 1).unwrap();
        let start = ModelParams::init(cfg, 2).unwrap();

        let mut ema = start.clone();
        ema_update(&mut ema, &cur, 0.0).unwrap();
        assert_eq!(ema, cur);

        let mut ema = start.clone();
        ema_update(&mut ema, &cur, 1.0).unwrap();
        assert_eq!(ema, start);

        let mut ema = ModelParams::zeros(cfg).unwrap();
        let mut twos = ModelParams::zeros(cfg).unwrap();
        twos.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(2.0));
        ema_update(&mut ema, &twos, 0.5).unwrap();
        assert!(ema.tensors().iter().all(|t| t.data().iter().all(|&v| v == 1.0)));

        let other = ModelParams::init(ModelConfig { classes: 3, ..cfg }, 0).unwrap();
        assert!(ema_update(&mut ema, &other, 0.5).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_class_on_ties() {
        let logits = Tensor::from_vec([3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(predict_labels(&logits).unwrap().ids(), &[0, 1]);
    }
}
