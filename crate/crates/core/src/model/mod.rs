//! The dense-block encoder/decoder with dual per-pixel heads.
//!
//! Layout: a 3×3 stem convolution, `down_blocks` dense blocks each followed
//! by a transition down (1×1 conv keeping channel count, dropout, 2×2 max
//! pool), one bottleneck dense block, then a mirrored up path (nearest ×2
//! upsample, 3×3 conv to `up_conv_filters`, concat with the skip, dense
//! block). Two parallel 1×1 heads emit the per-pixel mean (linear) and
//! variance (softplus squared).
//!
//! A dense block is `layers_per_block` repetitions of relu → 3×3 conv
//! producing `growth_rate` channels → dropout, where each layer sees the
//! concatenation of the block input and all previous layer outputs; the
//! block output carries input + L·growth channels. No batch norm anywhere.
//!
//! Dropout stays active in ordinary inference (`stochastic = true`); that is
//! what makes Monte-Carlo prediction sample model weights. `stochastic =
//! false` is a diagnostic mode only.
//!
//! Weights are Glorot-normal from the build seed, biases zero, except the
//! variance head: zero kernel with bias ln(e−1), so a fresh model emits
//! exactly σ̂² = 1 everywhere.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::autograd::{softplus_f32, AutogradError, NodeId, Padding, Shape4, Tape, Tensor};
use crate::rng::SeedStream;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("input {h}x{w} not divisible by {divisor}")]
    IndivisibleInput { h: usize, w: usize, divisor: usize },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ModelError::ConfigInvalid(_) => 2,
            ModelError::Corrupt(_) | ModelError::ChecksumMismatch | ModelError::Io(_) => 3,
            _ => 4,
        }
    }
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::Paper => write!(f, "paper"),
            Preset::Desk => write!(f, "desk"),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub down_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub first_conv_filters: usize,
    pub up_conv_filters: usize,
    pub dropout_rate: f32,
    pub preset: Preset,
}

impl ModelConfig {
    /// Full-scale preset: 5 down blocks + bottleneck (six dense blocks),
    /// 5 layers per block, growth 16, stem 48, up convs 128, dropout 20%.
    pub fn paper() -> Self {
        Self {
            down_blocks: 5,
            layers_per_block: 5,
            growth_rate: 16,
            first_conv_filters: 48,
            up_conv_filters: 128,
            dropout_rate: 0.2,
            preset: Preset::Paper,
        }
    }

    /// Small preset used by the test and evaluation suites.
    pub fn desk() -> Self {
        Self {
            down_blocks: 3,
            layers_per_block: 2,
            growth_rate: 8,
            first_conv_filters: 16,
            up_conv_filters: 32,
            dropout_rate: 0.2,
            preset: Preset::Desk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_blocks < 1
            || self.layers_per_block < 1
            || self.growth_rate < 1
            || self.first_conv_filters < 1
            || self.up_conv_filters < 1
        {
            return Err(ModelError::ConfigInvalid("all counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::ConfigInvalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.down_blocks
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Layered parameter store plus config. Parameters keep creation order;
/// that order is the contract for checkpoints, gradients, and the
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Node handles of one recorded forward pass.
pub struct ForwardPass {
    pub mu: NodeId,
    pub sigma2: NodeId,
    /// Tape ids of the parameters, parallel to `Model::params` order.
    pub param_nodes: Vec<NodeId>,
}

/// The f32 bias value whose softplus² is exactly 1.0, found next to
/// ln(e−1). Search is deterministic; the natural cast already works on
/// mainstream libms and the walk is a guard against off-by-one-ulp libm
/// differences.
fn variance_head_bias() -> f32 {
    let start = ((std::f64::consts::E - 1.0).ln()) as f32;
    let mut lo = start;
    let mut hi = start;
    for _ in 0..16 {
        for b in [lo, hi] {
            let sp = softplus_f32(b);
            if sp * sp == 1.0 {
                return b;
            }
        }
        lo = lo.next_down();
        hi = hi.next_up();
    }
    panic!("no f32 bias near ln(e-1) maps to unit variance");
}

struct Builder {
    params: Vec<Param>,
    stream: SeedStream,
}

impl Builder {
    /// Glorot-normal kernel (out_c, in_c, k, k) and zero bias.
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) {
        let fan_in = (in_c * k * k) as f64;
        let fan_out = (out_c * k * k) as f64;
        let std = (2.0 / (fan_in + fan_out)).sqrt() as f32;
        let shape = Shape4::new(out_c, in_c, k, k);
        let data = (0..shape.len()).map(|_| self.stream.normal_f32() * std).collect();
        self.params.push(Param {
            name: format!("{name}.kernel"),
            value: Tensor::from_vec(shape, data),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(Shape4::new(1, out_c, 1, 1)),
        });
    }

    fn conv_const(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, bias: f32) {
        self.params.push(Param {
            name: format!("{name}.kernel"),
            value: Tensor::zeros(Shape4::new(out_c, in_c, k, k)),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::filled(Shape4::new(1, out_c, 1, 1), bias),
        });
    }
}

/// Build a model with Glorot-normal weights drawn from `seed`.
pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder { params: Vec::new(), stream: SeedStream::new(seed) };
    let (l, k) = (config.layers_per_block, config.growth_rate);

    b.conv("init", 1, config.first_conv_filters, 3);
    let mut c = config.first_conv_filters;
    let mut skip_channels = Vec::new();
    for d in 0..config.down_blocks {
        for j in 0..l {
            b.conv(&format!("down{d}.layer{j}"), c + j * k, k, 3);
        }
        c += l * k;
        skip_channels.push(c);
        b.conv(&format!("down{d}.td"), c, c, 1);
    }
    for j in 0..l {
        b.conv(&format!("bottleneck.layer{j}"), c + j * k, k, 3);
    }
    c += l * k;
    for d in (0..config.down_blocks).rev() {
        b.conv(&format!("up{d}.conv"), c, config.up_conv_filters, 3);
        c = config.up_conv_filters + skip_channels[d];
        for j in 0..l {
            b.conv(&format!("up{d}.layer{j}"), c + j * k, k, 3);
        }
        c += l * k;
    }
    b.conv("head.mu", c, 1, 1);
    b.conv_const("head.sigma2", c, 1, 1, variance_head_bias());

    Ok(Model { config, params: b.params })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param>) -> Self {
        Self { config, params }
    }

    /// Exact trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().len()).sum()
    }

    /// Record a forward pass on `tape`. Parameters enter the tape as
    /// gradient-carrying leaves (their ids are returned in order); dropout
    /// draws come sequentially from `stream` when `stochastic` is set.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: NodeId,
        stochastic: bool,
        stream: &mut SeedStream,
    ) -> Result<ForwardPass> {
        let s = tape.value(input).shape();
        if s.c != 1 {
            return Err(ModelError::BadInput(format!("expected 1 input channel, got {}", s.c)));
        }
        let div = self.config.spatial_divisor();
        if s.h % div != 0 || s.w % div != 0 {
            return Err(ModelError::IndivisibleInput { h: s.h, w: s.w, divisor: div });
        }

        let param_nodes: Vec<NodeId> =
            self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let mut cursor = 0usize;
        let mut next = |expect: &str| -> (NodeId, NodeId) {
            debug_assert_eq!(self.params[cursor].name, format!("{expect}.kernel"));
            let kn = param_nodes[cursor];
            let bn = param_nodes[cursor + 1];
            cursor += 2;
            (kn, bn)
        };
        let rate = self.config.dropout_rate;
        let mut drop = |tape: &mut Tape, x: NodeId, stream: &mut SeedStream| -> Result<NodeId> {
            if stochastic {
                Ok(tape.dropout(x, rate, stream)?)
            } else {
                Ok(x)
            }
        };
        let l = self.config.layers_per_block;

        let mut dense_block = |tape: &mut Tape,
                               input: NodeId,
                               prefix: &str,
                               next: &mut dyn FnMut(&str) -> (NodeId, NodeId),
                               stream: &mut SeedStream|
         -> Result<NodeId> {
            let mut x = input;
            for j in 0..l {
                let (kn, bn) = next(&format!("{prefix}.layer{j}"));
                let a = tape.relu(x);
                let conv = tape.conv2d(a, kn, bn, Padding::Same)?;
                let y = if stochastic { tape.dropout(conv, rate, stream)? } else { conv };
                x = tape.concat_channels(x, y)?;
            }
            Ok(x)
        };

        let (kn, bn) = next("init");
        let mut x = tape.conv2d(input, kn, bn, Padding::Same)?;
        let mut skips = Vec::new();
        for d in 0..self.config.down_blocks {
            x = dense_block(tape, x, &format!("down{d}"), &mut next, stream)?;
            skips.push(x);
            let (kn, bn) = next(&format!("down{d}.td"));
            let td = tape.conv2d(x, kn, bn, Padding::Same)?;
            let td = drop(tape, td, stream)?;
            x = tape.max_pool2(td)?;
        }
        x = dense_block(tape, x, "bottleneck", &mut next, stream)?;
        for d in (0..self.config.down_blocks).rev() {
            let up = tape.upsample_nn2(x);
            let (kn, bn) = next(&format!("up{d}.conv"));
            let conv = tape.conv2d(up, kn, bn, Padding::Same)?;
            let cat = tape.concat_channels(conv, skips[d])?;
            x = dense_block(tape, cat, &format!("up{d}"), &mut next, stream)?;
        }
        let (kn, bn) = next("head.mu");
        let mu = tape.conv2d(x, kn, bn, Padding::Same)?;
        let (kn, bn) = next("head.sigma2");
        let pre = tape.conv2d(x, kn, bn, Padding::Same)?;
        let sp = tape.softplus(pre);
        let sigma2 = tape.square(sp);
        debug_assert_eq!(cursor, self.params.len());

        Ok(ForwardPass { mu, sigma2, param_nodes })
    }

    /// Plain forward pass: returns the (μ̂, σ̂²) maps for `batch`.
    pub fn forward(
        &self,
        batch: &Tensor,
        stream: &mut SeedStream,
        stochastic: bool,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let pass = self.forward_on_tape(&mut tape, input, stochastic, stream)?;
        Ok((tape.value(pass.mu).clone(), tape.value(pass.sigma2).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_head_bias_is_near_ln_e_minus_1() {
        let b = variance_head_bias();
        assert!((b as f64 - 0.541324854612918).abs() < 1e-6);
        let sp = softplus_f32(b);
        assert_eq!(sp * sp, 1.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk();
        cfg.dropout_rate = 1.0;
        assert!(matches!(cfg.validate(), Err(ModelError::ConfigInvalid(_))));
        let mut cfg = ModelConfig::desk();
        cfg.growth_rate = 0;
        assert!(matches!(cfg.validate(), Err(ModelError::ConfigInvalid(_))));
        assert!(ModelConfig::paper().validate().is_ok());
    }

    #[test]
    fn paper_preset_carries_published_numbers() {
        let cfg = ModelConfig::paper();
        assert_eq!(
            (cfg.down_blocks, cfg.layers_per_block, cfg.growth_rate),
            (5, 5, 16)
        );
        assert_eq!((cfg.first_conv_filters, cfg.up_conv_filters), (48, 128));
        assert_eq!(cfg.dropout_rate, 0.2);
    }

    #[test]
    fn desk_preset_runs_end_to_end() {
        let model = build(ModelConfig::desk(), 7).unwrap();
        let mut stream = SeedStream::new(1);
        let input = Tensor::filled(Shape4::new(1, 1, 64, 64), 0.5);
        let (mu, s2) = model.forward(&input, &mut stream, true).unwrap();
        assert_eq!(mu.shape(), Shape4::new(1, 1, 64, 64));
        assert_eq!(s2.shape(), Shape4::new(1, 1, 64, 64));
    }

    #[test]
    fn indivisible_input_rejected() {
        let model = build(ModelConfig::desk(), 7).unwrap();
        let mut stream = SeedStream::new(1);
        let input = Tensor::zeros(Shape4::new(1, 1, 60, 64));
        assert!(matches!(
            model.forward(&input, &mut stream, true),
            Err(ModelError::IndivisibleInput { divisor: 8, .. })
        ));
    }

    #[test]
    fn fresh_model_variance_is_exactly_one() {
        let model = build(ModelConfig::desk(), 3).unwrap();
        for trial in 0..4 {
            let mut in_stream = SeedStream::new(100 + trial);
            let data =
                (0..1 * 1 * 16 * 16).map(|_| in_stream.unit_f32() * 8.0 - 1.0).collect();
            let input = Tensor::from_vec(Shape4::new(1, 1, 16, 16), data);
            let mut drop_stream = SeedStream::new(500 + trial);
            let (_, s2) = model.forward(&input, &mut drop_stream, true).unwrap();
            assert!(s2.data().iter().all(|&v| v == 1.0), "trial {trial}");
        }
    }

    #[test]
    fn desk_param_count_matches_independent_sum() {
        // Hand-derived ledger for (d=3, L=2, k=8, f0=16, fu=32), stem in 1
        // channel, heads 1x1 to 1 channel:
        //   stem 3x3 1->16:            144 + 16
        //   down0: 16->8, 24->8 (3x3): 1152+8 + 1728+8; td 32->32 (1x1): 1024+32
        //   down1: 32->8, 40->8:       2304+8 + 2880+8; td 48->48: 2304+48
        //   down2: 48->8, 56->8:       3456+8 + 4032+8; td 64->64: 4096+64
        //   bottleneck: 64->8, 72->8:  4608+8 + 5184+8
        //   up2: conv 80->32 (3x3):    23040+32; layers 96->8, 104->8: 6912+8 + 7488+8
        //   up1: conv 112->32:         32256+32; layers 80->8, 88->8: 5760+8 + 6336+8
        //   up0: conv 96->32:          27648+32; layers 64->8, 72->8: 4608+8 + 5184+8
        //   heads: 80->1 twice:        (80+1) * 2
        let expected: usize = (144 + 16)
            + (1152 + 8 + 1728 + 8 + 1024 + 32)
            + (2304 + 8 + 2880 + 8 + 2304 + 48)
            + (3456 + 8 + 4032 + 8 + 4096 + 64)
            + (4608 + 8 + 5184 + 8)
            + (23040 + 32 + 6912 + 8 + 7488 + 8)
            + (32256 + 32 + 5760 + 8 + 6336 + 8)
            + (27648 + 32 + 4608 + 8 + 5184 + 8)
            + 2 * 81;
        assert_eq!(expected, 152674);
        let model = build(ModelConfig::desk(), 0).unwrap();
        assert_eq!(model.count_params(), expected);
    }

    #[test]
    fn single_conv_param_arithmetic() {
        // 3x3 conv 1->48 with bias: 3*3*1*48 + 48 = 480
        let mut b = Builder { params: Vec::new(), stream: SeedStream::new(0) };
        b.conv("stem", 1, 48, 3);
        let total: usize = b.params.iter().map(|p| p.value.shape().len()).sum();
        assert_eq!(total, 480);
        // 1x1 head conv, C->1 with bias: C+1
        let mut b = Builder { params: Vec::new(), stream: SeedStream::new(0) };
        b.conv("head", 13, 1, 1);
        let total: usize = b.params.iter().map(|p| p.value.shape().len()).sum();
        assert_eq!(total, 14);
    }

    #[test]
    fn stochastic_forward_depends_on_stream_state() {
        let model = build(ModelConfig::desk(), 11).unwrap();
        let mut s = SeedStream::new(42);
        let data = (0..32 * 32).map(|_| s.unit_f32()).collect();
        let input = Tensor::from_vec(Shape4::new(1, 1, 32, 32), data);

        let mut s1 = SeedStream::new(7);
        let (mu1, _) = model.forward(&input, &mut s1, true).unwrap();
        // s1 advanced; same call now differs
        let (mu2, _) = model.forward(&input, &mut s1, true).unwrap();
        assert_ne!(mu1.data(), mu2.data());

        // identical states are bit-identical
        let mut s2 = SeedStream::new(7);
        let (mu3, _) = model.forward(&input, &mut s2, true).unwrap();
        assert_eq!(mu1.data(), mu3.data());

        // deterministic mode ignores the stream
        let mut sa = SeedStream::new(1);
        let mut sb = SeedStream::new(2);
        let (da, _) = model.forward(&input, &mut sa, false).unwrap();
        let (db, _) = model.forward(&input, &mut sb, false).unwrap();
        assert_eq!(da.data(), db.data());
    }

    #[test]
    fn dense_block_grows_channels_by_l_times_k() {
        // Observable through the skip shapes: run forward on a tape and
        // check the stem output + first block concat arithmetic via the
        // parameter shapes instead of internals.
        let model = build(ModelConfig::desk(), 5).unwrap();
        let find = |name: &str| {
            model
                .params()
                .iter()
                .find(|p| p.name == name)
                .unwrap_or_else(|| panic!("missing {name}"))
                .value
                .shape()
        };
        // down0 layer inputs: 16, then 16+8
        assert_eq!(find("down0.layer0.kernel").c, 16);
        assert_eq!(find("down0.layer1.kernel").c, 24);
        // td sees 16 + 2*8 = 32 channels
        assert_eq!(find("down0.td.kernel").c, 32);
        assert_eq!(find("down0.td.kernel").b, 32);
    }
}
