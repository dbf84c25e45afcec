//! Model and training configuration, plus the key=value config-file format
//! shared by every CLI subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::LocaError;

/// Architecture configuration. Desk-scale defaults; the full-scale values
/// (input 512, features 64, 256 channels, FFN 1024, decoder 128/64/32)
/// are reachable through the same knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input resolution H_IN = W_IN.
    pub input_size: usize,
    /// Encoded feature resolution h = w. Must be input_size / 8 so the
    /// decoder's three 2x upsamples land exactly on the input resolution.
    pub feature_size: usize,
    /// Encoded feature channels d.
    pub channels: usize,
    /// Self-attention layers in the encoder.
    pub attn_layers: usize,
    /// Attention heads in every MHA.
    pub heads: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn_hidden: usize,
    /// Dropout rate in the encoder (the adaptation module uses none).
    pub dropout: f64,
    /// Channel widths of the four stride-2 backbone blocks.
    pub backbone_widths: [usize; 4],
    /// Prototype spatial size s.
    pub proto_size: usize,
    /// Adaptation iterations L.
    pub adapt_iters: usize,
    /// Trainable objectness queries used by the zero-shot path.
    pub zero_shot_queries: usize,
    /// Share one set of adaptation weights across all L iterations.
    pub shared_adapt_weights: bool,
    /// Hidden width of the box-size embedding network.
    pub shape_hidden: usize,
    /// Channel widths of the three decoder conv blocks.
    pub decoder_widths: [usize; 3],
    /// Add fixed 2-D sinusoidal positional encodings to attention queries
    /// and keys. Exposed so tests can exercise permutation equivariance.
    pub pos_enc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            feature_size: 16,
            channels: 32,
            attn_layers: 3,
            heads: 8,
            ffn_hidden: 128,
            dropout: 0.1,
            backbone_widths: [8, 16, 32, 64],
            proto_size: 3,
            adapt_iters: 3,
            zero_shot_queries: 3,
            shared_adapt_weights: true,
            shape_hidden: 64,
            decoder_widths: [32, 16, 8],
            pos_enc: true,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast tests and gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 32,
            feature_size: 4,
            channels: 16,
            attn_layers: 1,
            heads: 2,
            ffn_hidden: 16,
            dropout: 0.1,
            backbone_widths: [4, 4, 8, 8],
            proto_size: 3,
            adapt_iters: 2,
            zero_shot_queries: 2,
            shared_adapt_weights: true,
            shape_hidden: 8,
            decoder_widths: [8, 8, 4],
            pos_enc: true,
        }
    }

    pub fn validate(&self) -> Result<(), LocaError> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(LocaError::config(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.channels % 4 != 0 {
            return Err(LocaError::config(format!(
                "channels {} must be divisible by 4 for the 2-D positional encoding",
                self.channels
            )));
        }
        if self.feature_size * 8 != self.input_size {
            return Err(LocaError::config(format!(
                "feature_size {} * 8 must equal input_size {} (three 2x upsamples)",
                self.feature_size, self.input_size
            )));
        }
        if self.input_size % 16 != 0 {
            return Err(LocaError::config(format!(
                "input_size {} must be divisible by 16 (backbone strides 4/8/16)",
                self.input_size
            )));
        }
        if self.proto_size % 2 == 0 || self.proto_size == 0 {
            return Err(LocaError::config(format!(
                "proto_size {} must be odd",
                self.proto_size
            )));
        }
        if self.adapt_iters == 0 {
            return Err(LocaError::config("adapt_iters must be at least 1"));
        }
        if self.zero_shot_queries == 0 {
            return Err(LocaError::config("zero_shot_queries must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LocaError::config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.backbone_widths.iter().any(|&w| w == 0)
            || self.decoder_widths.iter().any(|&w| w == 0)
            || self.ffn_hidden == 0
            || self.shape_hidden == 0
        {
            return Err(LocaError::config("all widths must be positive"));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical key=value rendering; stored in
    /// checkpoints and stamped on encoded images.
    pub fn hash(&self) -> u64 {
        fnv1a(self.render().as_bytes())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(s, "feature_size={}", self.feature_size);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "attn_layers={}", self.attn_layers);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "ffn_hidden={}", self.ffn_hidden);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "backbone_widths={}", join(&self.backbone_widths));
        let _ = writeln!(s, "proto_size={}", self.proto_size);
        let _ = writeln!(s, "adapt_iters={}", self.adapt_iters);
        let _ = writeln!(s, "zero_shot_queries={}", self.zero_shot_queries);
        let _ = writeln!(s, "shared_adapt_weights={}", self.shared_adapt_weights);
        let _ = writeln!(s, "shape_hidden={}", self.shape_hidden);
        let _ = writeln!(s, "decoder_widths={}", join(&self.decoder_widths));
        let _ = writeln!(s, "pos_enc={}", self.pos_enc);
        s
    }
}

/// Optimization and loop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_aux: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Validate every this many epochs (also at the final epoch).
    pub val_every: usize,
    pub flip_augment: bool,
    pub freeze_backbone: bool,
    /// Ground-truth Gaussian kernel size in pixels for the zero-shot mode,
    /// where no exemplar boxes define one.
    pub zero_shot_kernel_px: f64,
    /// Lower bound on the derived kernel size. At low input resolutions
    /// the exemplar-derived kernel collapses below one pixel, leaving
    /// near-delta targets that stall regression; the floor keeps the
    /// Gaussians resolvable.
    pub min_kernel_px: f64,
    /// Clamp negative count estimates to zero when reporting.
    pub clamp_counts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_aux: 0.3,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 5,
            flip_augment: true,
            freeze_backbone: false,
            zero_shot_kernel_px: 8.0,
            min_kernel_px: 4.0,
            clamp_counts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LocaError> {
        if self.lambda_aux < 0.0 {
            return Err(LocaError::config("lambda_aux must be >= 0"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("zero_shot_kernel_px", self.zero_shot_kernel_px),
            ("min_kernel_px", self.min_kernel_px),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(LocaError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(LocaError::config("epochs, batch_size and val_every must be positive"));
        }
        Ok(())
    }
}

/// Parsed key=value config file: '#' starts a comment, blank lines ignored.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, LocaError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(LocaError::config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, LocaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LocaError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, LocaError> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                LocaError::config(format!("key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    fn take_list<const N: usize>(&mut self, key: &str) -> Result<Option<[usize; N]>, LocaError> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => {
                let parts: Vec<usize> = raw
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| LocaError::config(format!("key {key}: bad list {raw:?}")))?;
                let arr: [usize; N] = parts.clone().try_into().map_err(|_| {
                    LocaError::config(format!("key {key}: expected {N} entries, got {}", parts.len()))
                })?;
                Ok(Some(arr))
            }
        }
    }

    /// Apply overrides onto defaults; every unknown key is an error.
    pub fn into_configs(mut self) -> Result<(ModelConfig, TrainConfig), LocaError> {
        let mut m = ModelConfig::default();
        let mut t = TrainConfig::default();

        macro_rules! set {
            ($target:expr, $key:literal) => {
                if let Some(v) = self.take_parsed($key)? {
                    $target = v;
                }
            };
        }
        set!(m.input_size, "input_size");
        set!(m.feature_size, "feature_size");
        set!(m.channels, "channels");
        set!(m.attn_layers, "attn_layers");
        set!(m.heads, "heads");
        set!(m.ffn_hidden, "ffn_hidden");
        set!(m.dropout, "dropout");
        if let Some(v) = self.take_list::<4>("backbone_widths")? {
            m.backbone_widths = v;
        }
        set!(m.proto_size, "proto_size");
        set!(m.adapt_iters, "adapt_iters");
        set!(m.zero_shot_queries, "zero_shot_queries");
        set!(m.shared_adapt_weights, "shared_adapt_weights");
        set!(m.shape_hidden, "shape_hidden");
        if let Some(v) = self.take_list::<3>("decoder_widths")? {
            m.decoder_widths = v;
        }
        set!(m.pos_enc, "pos_enc");

        set!(t.lambda_aux, "lambda_aux");
        set!(t.learning_rate, "learning_rate");
        set!(t.weight_decay, "weight_decay");
        set!(t.clip_norm, "clip_norm");
        set!(t.epochs, "epochs");
        set!(t.batch_size, "batch_size");
        set!(t.seed, "seed");
        set!(t.beta1, "beta1");
        set!(t.beta2, "beta2");
        set!(t.adam_eps, "adam_eps");
        set!(t.val_every, "val_every");
        set!(t.flip_augment, "flip_augment");
        set!(t.freeze_backbone, "freeze_backbone");
        set!(t.zero_shot_kernel_px, "zero_shot_kernel_px");
        set!(t.min_kernel_px, "min_kernel_px");
        set!(t.clamp_counts, "clamp_counts");

        if let Some(unknown) = self.values.keys().next() {
            return Err(LocaError::config(format!("unknown config key {unknown:?}")));
        }
        m.validate()?;
        t.validate()?;
        Ok((m, t))
    }
}

/// Worker-thread cap: LOCA_THREADS when set, else available parallelism.
pub fn thread_count() -> usize {
    if let Ok(raw) = std::env::var("LOCA_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
