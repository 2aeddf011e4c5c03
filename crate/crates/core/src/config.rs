//! Flat `key = value` run configuration with two presets.
//!
//! `desk` (the default) is sized for a laptop CPU; `full` carries the
//! full-scale geometry and optimizer settings. Every key is listed in
//! [`KEYS`]; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, StarError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        }
    }
}

impl FromStr for Preset {
    type Err = StarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(StarError::Config(format!(
                "unknown preset `{other}` (desk, full)"
            ))),
        }
    }
}

/// A learning rate given directly or derived as `blr * batch / 256`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSetting {
    Auto,
    Fixed(f64),
}

impl LrSetting {
    pub fn resolve(self, blr: f64, batch: usize) -> f64 {
        match self {
            LrSetting::Auto => blr * batch as f64 / 256.0,
            LrSetting::Fixed(v) => v,
        }
    }
}

trait Value: Sized {
    fn parse(key: &str, s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

fn bad(key: &str, s: &str, what: &str) -> StarError {
    StarError::Config(format!("{key}: `{s}` is not {what}"))
}

impl Value for usize {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.parse().map_err(|_| bad(key, s, "a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.parse().map_err(|_| bad(key, s, "a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse(key: &str, s: &str) -> Result<Self> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(bad(key, s, "a finite number")),
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse(key: &str, s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(bad(key, s, "a boolean")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for String {
    fn parse(_: &str, s: &str) -> Result<Self> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl Value for LrSetting {
    fn parse(key: &str, s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(LrSetting::Auto)
        } else {
            f64::parse(key, s).map(LrSetting::Fixed)
        }
    }
    fn render(&self) -> String {
        match self {
            LrSetting::Auto => "auto".into(),
            LrSetting::Fixed(v) => v.render(),
        }
    }
}

pub struct KeyInfo {
    pub key: &'static str,
    pub doc: &'static str,
    /// Part of the model / data definition; must match on resume.
    pub binding: bool,
}

macro_rules! config_table {
    ($( $field:ident : $ty:ty = $key:literal [$desk:expr, $full:expr] $bind:literal $doc:literal; )*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            pub preset: Preset,
            $(pub $field: $ty,)*
        }

        pub const KEYS: &[KeyInfo] = &[
            KeyInfo { key: "preset", doc: "Default set: desk or full. Applied before any other key.", binding: false },
            $(KeyInfo { key: $key, doc: $doc, binding: $bind },)*
        ];

        impl Config {
            pub fn preset(preset: Preset) -> Self {
                match preset {
                    Preset::Desk => Self { preset, $($field: $desk.into(),)* },
                    Preset::Full => Self { preset, $($field: $full.into(),)* },
                }
            }

            fn set_raw(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    "preset" => {
                        let p: Preset = value.parse()?;
                        if p != self.preset {
                            return Err(StarError::Config(
                                "preset must be set before other keys".into(),
                            ));
                        }
                        Ok(())
                    }
                    $($key => { self.$field = <$ty as Value>::parse(key, value)?; Ok(()) })*
                    _ => Err(StarError::Config(format!("unknown config key `{key}`"))),
                }
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    "preset" => Some(self.preset.name().to_string()),
                    $($key => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_table! {
    seed: u64 = "seed" [0u64, 0u64] false "Seed for every random stream (init, data order, augmentation, drop-path).";
    threads: usize = "threads" [0usize, 0usize] false "Worker threads for batch-parallel evaluation; 0 uses all cores. Results do not depend on it.";

    image_size: usize = "data.image_size" [16usize, 192usize] true "Square image edge in pixels.";
    channels: usize = "data.channels" [3usize, 3usize] true "Channels per pixel.";
    data_dir: String = "data.dir" ["corpus", "corpus"] false "Corpus directory holding manifest.tsv.";
    augment: bool = "data.augment" [true, true] true "Random resized crop plus horizontal flip during training.";
    crop_min_scale: f64 = "data.crop_min_scale" [0.35, 0.2] true "Smallest crop area as a fraction of the image.";
    shuffle: bool = "data.shuffle" [true, true] true "Reshuffle the corpus every epoch; otherwise batches follow manifest order.";

    gen_count: usize = "gen.count" [64usize, 1024usize] false "Images written by `gen`.";
    gen_classes: usize = "gen.classes" [4usize, 4usize] false "Shape classes used by `gen` (at most 4).";

    patch_size: usize = "patch.size" [4usize, 16usize] true "Patch edge in pixels.";
    cluster_side: usize = "patch.cluster_side" [2usize, 4usize] true "Patches per cluster edge.";

    separator_value: String = "separator.value" ["identity", "identity"] true "Separator value: zeros, ones, embeddings or identity.";
    separator_layout: String = "separator.layout" ["sc", "sc"] true "Separator layout: sc, cs, scs or csc.";
    pack_images: usize = "pack.images" [4usize, 8usize] true "Images packed into one pretraining sequence (N).";
    pack_max_images: usize = "pack.max_images" [16usize, 16usize] false "Upper bound accepted for pack.images.";
    restart_positions: bool = "pack.restart_positions" [true, true] true "Positional ids restart at every image instead of running on.";

    encoder_depth: usize = "encoder.depth" [4usize, 12usize] true "MambaMLP blocks.";
    encoder_width: usize = "encoder.width" [64usize, 768usize] true "Embedding width D.";
    encoder_state_dim: usize = "encoder.state_dim" [8usize, 16usize] true "SSM state size per channel.";
    encoder_mlp_ratio: usize = "encoder.mlp_ratio" [4usize, 4usize] true "MLP hidden width as a multiple of D.";
    encoder_positional: bool = "encoder.positional" [true, true] true "Add learned positional embeddings.";
    encoder_path_reduce: String = "encoder.path_reduce" ["sum", "sum"] true "How multi-path scans combine: sum or mean.";

    decoder_layers: usize = "decoder.layers" [2usize, 4usize] true "Decoder layers.";
    decoder_width: usize = "decoder.width" [64usize, 512usize] true "Decoder width.";
    decoder_heads: usize = "decoder.heads" [4usize, 8usize] true "Attention heads; must divide decoder.width.";
    decoder_mlp_ratio: usize = "decoder.mlp_ratio" [4usize, 4usize] true "Decoder MLP hidden width as a multiple of its width.";
    decoder_self_attention: bool = "decoder.self_attention" [true, true] true "Masked self-attention sublayer before cross-attention.";

    loss_include_separators: bool = "loss.include_separators" [true, true] true "Separator targets enter the loss.";
    loss_norm_pix: bool = "loss.norm_pix" [true, true] true "Standardize pixel targets per patch.";

    pre_epochs: usize = "pretrain.epochs" [100usize, 200usize] true "Pretraining epochs.";
    pre_warmup_epochs: usize = "pretrain.warmup_epochs" [5usize, 40usize] true "Linear warm-up epochs.";
    pre_batch: usize = "pretrain.batch" [16usize, 2048usize] true "Images per optimizer step; a multiple of pack.images.";
    pre_blr: f64 = "pretrain.blr" [1.5e-4, 1.5e-4] true "Base learning rate per 256 images.";
    pre_lr: LrSetting = "pretrain.lr" [LrSetting::Fixed(1e-3), LrSetting::Auto] true "Peak learning rate, or auto for blr * batch / 256.";
    pre_weight_decay: f64 = "pretrain.weight_decay" [0.05, 0.05] true "Decoupled weight decay.";
    pre_beta1: f64 = "pretrain.beta1" [0.9, 0.9] true "AdamW beta1.";
    pre_beta2: f64 = "pretrain.beta2" [0.95, 0.95] true "AdamW beta2.";
    pre_drop_path: f64 = "pretrain.drop_path" [0.0, 0.0] true "Stochastic depth rate at the last encoder block.";
    pre_ema_decay: f64 = "pretrain.ema_decay" [0.9999, 0.9999] true "EMA decay of the weights.";
    pre_checkpoint_every: usize = "pretrain.checkpoint_every" [0usize, 1000usize] false "Steps between checkpoints; 0 writes only the final one.";
    pre_max_steps: usize = "pretrain.max_steps" [0usize, 0usize] false "Stop after this many steps (0 runs the full schedule).";
    pre_out: String = "pretrain.out" ["runs/pretrain", "runs/pretrain"] false "Output directory for metrics and checkpoints.";
    record_wall_time: bool = "metrics.wall_time" [false, false] false "Record wall_ms per step (breaks byte-identical metrics).";

    ft_epochs: usize = "finetune.epochs" [30usize, 100usize] true "Fine-tuning epochs.";
    ft_warmup_epochs: usize = "finetune.warmup_epochs" [2usize, 5usize] true "Fine-tuning warm-up epochs.";
    ft_batch: usize = "finetune.batch" [16usize, 1024usize] true "Images per fine-tuning step.";
    ft_blr: f64 = "finetune.blr" [5e-4, 5e-4] true "Base fine-tuning learning rate per 256 images.";
    ft_lr: LrSetting = "finetune.lr" [LrSetting::Fixed(1e-3), LrSetting::Auto] true "Peak fine-tuning learning rate, or auto.";
    ft_weight_decay: f64 = "finetune.weight_decay" [0.05, 0.05] true "Fine-tuning weight decay.";
    ft_beta1: f64 = "finetune.beta1" [0.9, 0.9] true "Fine-tuning AdamW beta1.";
    ft_beta2: f64 = "finetune.beta2" [0.999, 0.999] true "Fine-tuning AdamW beta2.";
    ft_layer_decay: f64 = "finetune.layer_decay" [0.65, 0.65] true "Layer-wise learning-rate decay.";
    ft_drop_path: f64 = "finetune.drop_path" [0.1, 0.1] true "Stochastic depth rate at the last encoder block.";
    ft_ema_decay: f64 = "finetune.ema_decay" [0.9999, 0.9999] true "EMA decay during fine-tuning.";
    ft_scan: String = "finetune.scan" ["four-scan", "four-scan"] true "Scan mode while fine-tuning: one-scan or four-scan.";
    ft_class_token: String = "finetune.class_token" ["tail", "tail"] true "Class token placement: tail, middle, or none for mean pooling.";
    ft_classes: usize = "finetune.classes" [4usize, 1000usize] true "Number of labels.";
    ft_holdout: f64 = "finetune.holdout" [0.25, 0.0] true "Fraction of the corpus held out for evaluation (taken from the end of the manifest).";
    ft_init: String = "finetune.init" ["none", "none"] false "Pretraining checkpoint to start from, or none.";
    ft_out: String = "finetune.out" ["runs/finetune", "runs/finetune"] false "Output directory for fine-tuning artifacts.";
}

impl Default for Config {
    fn default() -> Self {
        Config::preset(Preset::Desk)
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key.trim(), value.trim())
    }

    /// Builds a config from `(key, value)` pairs. A `preset` pair is applied
    /// first wherever it appears.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs
            .into_iter()
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let mut preset = Preset::Desk;
        for (k, v) in &pairs {
            if *k == "preset" {
                preset = v.parse()?;
            }
        }
        let mut cfg = Config::preset(preset);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                StarError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Vec<(String, String)>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StarError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Every key as `key = value`, in table order.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(k.key);
            s.push_str(" = ");
            s.push_str(&self.get(k.key).expect("listed key"));
            s.push('\n');
        }
        s
    }

    /// Binding keys whose values differ from `other`.
    pub fn binding_differences(&self, other: &Config) -> Vec<String> {
        KEYS.iter()
            .filter(|k| k.binding && self.get(k.key) != other.get(k.key))
            .map(|k| {
                format!(
                    "{}: {} vs {}",
                    k.key,
                    self.get(k.key).unwrap_or_default(),
                    other.get(k.key).unwrap_or_default()
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(StarError::Config(m));
        let unit = self.patch_size * self.cluster_side;
        if self.patch_size == 0 || self.cluster_side == 0 || self.image_size == 0 {
            return err(
                "data.image_size, patch.size and patch.cluster_side must be positive".into(),
            );
        }
        if !self.image_size.is_multiple_of(unit) {
            return err(format!(
                "data.image_size {} is not divisible by patch.size * patch.cluster_side = {unit}",
                self.image_size
            ));
        }
        if self.channels == 0 {
            return err("data.channels must be positive".into());
        }
        if self.pack_images == 0 || self.pack_images > self.pack_max_images {
            return err(format!(
                "pack.images must be in 1..={} (got {})",
                self.pack_max_images, self.pack_images
            ));
        }
        if self.pre_batch == 0 || !self.pre_batch.is_multiple_of(self.pack_images) {
            return err(format!(
                "pretrain.batch {} must be a positive multiple of pack.images {}",
                self.pre_batch, self.pack_images
            ));
        }
        if self.ft_batch == 0 {
            return err("finetune.batch must be positive".into());
        }
        if self.encoder_width == 0 || self.encoder_state_dim == 0 || self.encoder_mlp_ratio == 0 {
            return err(
                "encoder.width, encoder.state_dim and encoder.mlp_ratio must be positive".into(),
            );
        }
        if self.decoder_heads == 0 || !self.decoder_width.is_multiple_of(self.decoder_heads) {
            return err(format!(
                "decoder.heads {} must divide decoder.width {}",
                self.decoder_heads, self.decoder_width
            ));
        }
        if !(0.0..1.0).contains(&self.pre_drop_path) || !(0.0..1.0).contains(&self.ft_drop_path) {
            return err("drop_path rates must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.ft_holdout) {
            return err("finetune.holdout must lie in [0, 1)".into());
        }
        if !(0.0 < self.crop_min_scale && self.crop_min_scale <= 1.0) {
            return err("data.crop_min_scale must lie in (0, 1]".into());
        }
        if self.gen_classes == 0 || self.gen_classes > 4 {
            return err("gen.classes must be between 1 and 4".into());
        }
        if !matches!(self.encoder_path_reduce.as_str(), "sum" | "mean") {
            return err(format!(
                "encoder.path_reduce must be sum or mean, got {}",
                self.encoder_path_reduce
            ));
        }
        crate::registry::separator_value(&self.separator_value)?;
        crate::registry::layout(&self.separator_layout)?;
        crate::registry::scan_mode(&self.ft_scan)?;
        if self.ft_class_token != "none" {
            crate::registry::class_token_policy(&self.ft_class_token)?;
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn clusters_per_image(&self) -> usize {
        let c = self.grid_side() / self.cluster_side;
        c * c
    }

    pub fn tokens_per_cluster(&self) -> usize {
        self.cluster_side * self.cluster_side
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.snapshot())
    }
}

/// Help table: one line per key with its desk and full defaults.
pub fn key_table() -> String {
    let desk = Config::preset(Preset::Desk);
    let full = Config::preset(Preset::Full);
    let mut s = String::new();
    for k in KEYS {
        let d = desk.get(k.key).unwrap_or_default();
        let p = full.get(k.key).unwrap_or_default();
        let defaults = if d == p {
            format!("[default: {d}]")
        } else {
            format!("[default: {d}; full: {p}]")
        };
        s.push_str(&format!("  {:<26} {} {}\n", k.key, k.doc, defaults));
    }
    s
}
