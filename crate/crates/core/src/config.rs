//! Experiment configuration: one TOML file, every key optional, unknown keys
//! rejected. Defaults are the desk-scale settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which implementation computes instance metrics during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricsBackendKind {
    #[default]
    Reference,
    /// Native contingency-table kernel; falls back to the reference
    /// implementation when no kernel is linked.
    Kernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width `C` of the shared embedding.
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Adapter bottleneck is `embed_dim / adapter_reduction`.
    pub adapter_reduction: usize,
    /// Semantic classes including background.
    pub num_semantic_classes: usize,
    /// Instance classes excluding background.
    pub num_instance_classes: usize,
    /// Channels of the shared probability space used by the consistency loss.
    pub align_classes: usize,
    pub ssm_state_dim: usize,
    pub ssm_conv_kernel: usize,
    pub decoder_depth: usize,
    pub lambda1: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Prompt encoder on/off.
    pub enable_p: bool,
    /// Cross-guided decoder attention on/off.
    pub enable_d: bool,
    /// Two-forward co-segmentation loop on/off.
    pub enable_c: bool,
    pub freeze_backbone: bool,
    /// Stop gradients between the first forward and the prompt encoder.
    pub detach_constraints: bool,
    /// Use symmetric (Jeffreys) KL for the consistency loss.
    pub symmetric_kl: bool,
    pub fg_threshold: f64,
    pub edge_threshold: f64,
    pub min_instance_area: usize,
    /// Validate every N epochs during `fit`.
    pub val_every: usize,
    pub metrics_backend: MetricsBackendKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            embed_dim: 96,
            num_heads: 4,
            mlp_ratio: 4,
            adapter_reduction: 4,
            num_semantic_classes: 3,
            num_instance_classes: 3,
            align_classes: 2,
            ssm_state_dim: 16,
            ssm_conv_kernel: 3,
            decoder_depth: 1,
            lambda1: 0.5,
            lr: 1e-4,
            lr_decay: 0.98,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            enable_p: true,
            enable_d: true,
            enable_c: true,
            freeze_backbone: true,
            detach_constraints: false,
            symmetric_kl: false,
            fg_threshold: 0.5,
            edge_threshold: 0.4,
            min_instance_area: 10,
            val_every: 1,
            metrics_backend: MetricsBackendKind::Reference,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Small configuration used by gradient probes and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            embed_dim: 16,
            ssm_state_dim: 4,
            batch_size: 2,
            epochs: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("adapter_reduction", self.adapter_reduction),
            ("ssm_state_dim", self.ssm_state_dim),
            ("ssm_conv_kernel", self.ssm_conv_kernel),
            ("decoder_depth", self.decoder_depth),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("val_every", self.val_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid(
                "patch_size",
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if !self.patch_size.is_multiple_of(4) {
            return Err(invalid("patch_size", "must be a multiple of 4 (pixel decoder upsamples tokens 4x)"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(
                "embed_dim",
                format!("{} is not divisible by num_heads {}", self.embed_dim, self.num_heads),
            ));
        }
        if !self.embed_dim.is_multiple_of(8) {
            return Err(invalid("embed_dim", "must be a multiple of 8 (pixel decoder halves it three times)"));
        }
        if !(self.embed_dim / 2).is_multiple_of(self.stage1_heads()) {
            return Err(invalid("num_heads", "first encoder stage width is not divisible by its head count"));
        }
        if self.num_semantic_classes < 2 {
            return Err(invalid("num_semantic_classes", "needs background plus at least one class"));
        }
        if self.num_instance_classes < 1 {
            return Err(invalid("num_instance_classes", "needs at least one instance class"));
        }
        if self.align_classes < 2 {
            return Err(invalid("align_classes", "must be at least 2"));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(invalid("lambda1", "must be finite and nonnegative"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr_decay", "must lie in (0, 1]"));
        }
        for (name, v) in [("fg_threshold", self.fg_threshold), ("edge_threshold", self.edge_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn stage1_heads(&self) -> usize {
        (self.num_heads / 2).max(1)
    }

    /// Side of the low-resolution binary-mask logits (4x the token grid).
    pub fn lowres_size(&self) -> usize {
        self.grid_size() * 4
    }

    /// Channel width of the pixel-decoder output.
    pub fn pixel_dim(&self) -> usize {
        self.embed_dim / 8
    }

    pub fn num_queries_sem(&self) -> usize {
        self.num_semantic_classes
    }

    /// binary (2) + hv (2) + type (K_ins + 1)
    pub fn num_queries_ins(&self) -> usize {
        4 + self.num_instance_classes + 1
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Sets one field from its textual value, then re-validates.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("own output parses");
        if !table.contains_key(key) {
            return Err(Error::Parse(format!("unknown config key `{key}`")));
        }
        let parsed = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(format!("{key}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every config key, in declaration order.
    pub fn field_names() -> Vec<String> {
        Self::default()
            .to_toml_string()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.trim().to_string()))
            .collect()
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ExperimentConfig::from_toml_str(&text)
}
