//! The decoder-only transformer: pre-LN blocks, weight-tied LM head,
//! training loop with named stop conditions, and autoregressive generation
//! with hidden-state capture.

mod checkpoint;
mod forward;
mod generate;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{BackwardScratch, ForwardCache, Mode};
pub use generate::{generate, GenerateSpec};
pub use train::{train, StepMetrics, StopCondition, TrainLog, TrainPlan};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Architecture hyperparameters. Defaults are the canonical configuration;
/// everything is overridable for toy models.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 6,
            d_model: 192,
            vocab_size: 65,
            block_size: 128,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    /// Small configuration for fast tests and gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 16,
            block_size: 8,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.vocab_size == 0
            || self.block_size == 0
        {
            return Err(Error::contract("model dimensions must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Closed-form parameter count (LM head is tied to the token embedding).
    pub fn param_count(&self) -> usize {
        let (c, v, f) = (self.d_model, self.vocab_size, self.mlp_hidden());
        let per_block = 2 * c            // ln1
            + c * 3 * c + 3 * c          // qkv
            + c * c + c                  // attn out projection
            + 2 * c                      // ln2
            + c * f + f                  // mlp up
            + f * c + c; // mlp down
        v * c + self.block_size * c + self.n_layers * per_block + 2 * c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = f32> {
    pub ln1: LayerNormParams<T>,
    pub qkv_w: Tensor<T>,  // [C, 3C]
    pub qkv_b: Tensor<T>,  // [3C]
    pub proj_w: Tensor<T>, // [C, C]
    pub proj_b: Tensor<T>, // [C]
    pub ln2: LayerNormParams<T>,
    pub up_w: Tensor<T>,   // [C, 4C]
    pub up_b: Tensor<T>,   // [4C]
    pub down_w: Tensor<T>, // [4C, C]
    pub down_b: Tensor<T>, // [C]
}

/// Full parameter set. `tok_emb` doubles as the LM head (tied weights):
/// logits are computed against the same storage the embedding reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>, // [V, C]
    pub pos_emb: Tensor<T>, // [block, C]
    pub blocks: Vec<BlockParams<T>>,
    pub lnf: LayerNormParams<T>,
}

/// Initialize weights Normal(0, 0.02), residual out-projections scaled by
/// 1/sqrt(2 * n_layers), biases and LN beta zero, LN gamma one.
pub fn init_model<T: Scalar, R: Rng>(config: ModelConfig, rng: &mut R) -> Result<ModelParams<T>> {
    config.validate()?;
    let (c, v, f) = (config.d_model, config.vocab_size, config.mlp_hidden());
    let base = Normal::new(0.0f64, 0.02).expect("valid std");
    let resid = Normal::new(0.0f64, 0.02 / (2.0 * config.n_layers as f64).sqrt())
        .expect("valid std");
    let mut draw = |shape: &[usize], dist: &Normal<f64>, rng: &mut R| {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of_f64(dist.sample(rng))).collect();
        Tensor::from_vec(shape, data).expect("shape/data agree")
    };
    let ln = |cols: usize| LayerNormParams {
        gamma: Tensor::from_vec(&[cols], vec![T::one(); cols]).expect("ln gamma"),
        beta: Tensor::zeros(&[cols]),
    };

    let tok_emb = draw(&[v, c], &base, rng);
    let pos_emb = draw(&[config.block_size, c], &base, rng);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(BlockParams {
            ln1: ln(c),
            qkv_w: draw(&[c, 3 * c], &base, rng),
            qkv_b: Tensor::zeros(&[3 * c]),
            proj_w: draw(&[c, c], &resid, rng),
            proj_b: Tensor::zeros(&[c]),
            ln2: ln(c),
            up_w: draw(&[c, f], &base, rng),
            up_b: Tensor::zeros(&[f]),
            down_w: draw(&[f, c], &resid, rng),
            down_b: Tensor::zeros(&[c]),
        });
    }
    Ok(ModelParams {
        config,
        tok_emb,
        pos_emb,
        blocks,
        lnf: ln(c),
    })
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameter set of the right shapes (checkpoint loading fills it).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c, v, f) = (config.d_model, config.vocab_size, config.mlp_hidden());
        let ln = |cols: usize| LayerNormParams {
            gamma: Tensor::zeros(&[cols]),
            beta: Tensor::zeros(&[cols]),
        };
        Ok(ModelParams {
            config,
            tok_emb: Tensor::zeros(&[v, c]),
            pos_emb: Tensor::zeros(&[config.block_size, c]),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams {
                    ln1: ln(c),
                    qkv_w: Tensor::zeros(&[c, 3 * c]),
                    qkv_b: Tensor::zeros(&[3 * c]),
                    proj_w: Tensor::zeros(&[c, c]),
                    proj_b: Tensor::zeros(&[c]),
                    ln2: ln(c),
                    up_w: Tensor::zeros(&[c, f]),
                    up_b: Tensor::zeros(&[f]),
                    down_w: Tensor::zeros(&[f, c]),
                    down_b: Tensor::zeros(&[c]),
                })
                .collect(),
            lnf: ln(c),
        })
    }

    /// Visit every parameter tensor in a fixed order. The order defines the
    /// checkpoint layout and the optimizer state association.
    pub fn visit(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.ln1_g"), &b.ln1.gamma));
            out.push((format!("block{l}.ln1_b"), &b.ln1.beta));
            out.push((format!("block{l}.qkv_w"), &b.qkv_w));
            out.push((format!("block{l}.qkv_b"), &b.qkv_b));
            out.push((format!("block{l}.proj_w"), &b.proj_w));
            out.push((format!("block{l}.proj_b"), &b.proj_b));
            out.push((format!("block{l}.ln2_g"), &b.ln2.gamma));
            out.push((format!("block{l}.ln2_b"), &b.ln2.beta));
            out.push((format!("block{l}.up_w"), &b.up_w));
            out.push((format!("block{l}.up_b"), &b.up_b));
            out.push((format!("block{l}.down_w"), &b.down_w));
            out.push((format!("block{l}.down_b"), &b.down_b));
        }
        out.push(("lnf_g".into(), &self.lnf.gamma));
        out.push(("lnf_b".into(), &self.lnf.beta));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.ln1_g"), &mut b.ln1.gamma));
            out.push((format!("block{l}.ln1_b"), &mut b.ln1.beta));
            out.push((format!("block{l}.qkv_w"), &mut b.qkv_w));
            out.push((format!("block{l}.qkv_b"), &mut b.qkv_b));
            out.push((format!("block{l}.proj_w"), &mut b.proj_w));
            out.push((format!("block{l}.proj_b"), &mut b.proj_b));
            out.push((format!("block{l}.ln2_g"), &mut b.ln2.gamma));
            out.push((format!("block{l}.ln2_b"), &mut b.ln2.beta));
            out.push((format!("block{l}.up_w"), &mut b.up_w));
            out.push((format!("block{l}.up_b"), &mut b.up_b));
            out.push((format!("block{l}.down_w"), &mut b.down_w));
            out.push((format!("block{l}.down_b"), &mut b.down_b));
        }
        out.push(("lnf_g".into(), &mut self.lnf.gamma));
        out.push(("lnf_b".into(), &mut self.lnf.beta));
        out
    }

    pub fn param_count(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.visit_mut() {
            t.ensure_grad();
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, t)| t.all_finite())
    }

    /// Global L2 norm of all gradients, computed at 64-bit.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0f64;
        for (_, t) in self.visit() {
            if let Some(g) = t.grad() {
                for &v in g {
                    let v = v.as_f64();
                    sq += v * v;
                }
            }
        }
        sq.sqrt()
    }

    /// Clip gradients to a maximum global norm; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = T::of_f64(max_norm / (norm + 1e-12));
            for (_, t) in self.visit_mut() {
                if let Some(g) = t.grad_mut() {
                    for v in g {
                        *v = *v * scale;
                    }
                }
            }
        }
        norm
    }

    /// Content hash over config and raw parameter bytes; identifies the
    /// exact weights a trace was captured from.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.visit() {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_param_count_is_about_3_6m() {
        let cfg = ModelConfig::default();
        let n = cfg.param_count();
        assert!((3_400_000..=3_800_000).contains(&n), "count {n}");
        assert_eq!(n, 3_596_352);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: ModelParams<f32> = init_model(cfg, &mut rng).unwrap();
        assert_eq!(params.param_count(), n);
    }

    #[test]
    fn toy_param_count_matches_closed_form() {
        let cfg = ModelConfig::toy();
        let (c, v, f) = (8usize, 16usize, 32usize);
        let per_block = 2 * c + c * 3 * c + 3 * c + c * c + c + 2 * c + c * f + f + f * c + c;
        let expect = v * c + cfg.block_size * c + 2 * per_block + 2 * c;
        assert_eq!(cfg.param_count(), expect);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: ModelParams<f32> = init_model(cfg, &mut rng).unwrap();
        assert_eq!(params.param_count(), expect);
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let cfg = ModelConfig::toy();
        let a: ModelParams<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b: ModelParams<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let c: ModelParams<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.n_heads = 3; // 8 % 3 != 0
        assert!(init_model::<f32, _>(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg = ModelConfig::toy();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grad_clip_scales_to_unit_norm() {
        let cfg = ModelConfig::toy();
        let mut params: ModelParams<f32> =
            init_model(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (_, t) in params.visit_mut() {
            let g = t.ensure_grad();
            g.fill(0.1);
        }
        let before = params.grad_norm();
        assert!(before > 1.0);
        let reported = params.clip_grad_norm(1.0);
        assert!((reported - before).abs() < 1e-9);
        assert!((params.grad_norm() - 1.0).abs() < 1e-3);
    }
}
