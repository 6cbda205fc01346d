//! Architecture and training configuration, plus the `key = value`
//! config-file format and the named ablation variants.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{DEFAULT_W_G, DEFAULT_W_S};

/// Which module fuses the two deep feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Cross-attention with reversed softmax (the default).
    Cam,
    /// Four plain conv layers (ablation).
    Cnn,
    /// One dense block plus compression (ablation).
    Dense,
}

impl FusionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Cam => "cam",
            FusionKind::Cnn => "cnn",
            FusionKind::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(FusionKind::Cam),
            "cnn" => Ok(FusionKind::Cnn),
            "dense" => Ok(FusionKind::Dense),
            other => Err(Error::Config(format!("unknown fusion module `{other}`"))),
        }
    }
}

/// Architecture hyperparameters; serialized into checkpoints so loading
/// can validate compatibility.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseConfig {
    /// Nominal training image side (inference takes any /8 size).
    pub image_size: usize,
    /// Self-attention blocks per position (a branch holds 2x this).
    pub n_sa: usize,
    /// Cross-attention blocks per branch.
    pub n_ca: usize,
    /// Reversed softmax in cross attention (`false` = plain softmax).
    pub use_resoftmax: bool,
    /// Cyclic shift between the two self-attention stages.
    pub use_shift: bool,
    pub fusion: FusionKind,
    /// Structural-similarity weight in the stage-1 loss.
    pub w_s: f64,
    /// Detail-target weight in the stage-2 loss.
    pub w_g: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            n_sa: 1,
            n_ca: 1,
            use_resoftmax: true,
            use_shift: true,
            fusion: FusionKind::Cam,
            w_s: DEFAULT_W_S,
            w_g: DEFAULT_W_G,
        }
    }
}

impl FuseConfig {
    /// Canonical sorted `key = value` text block (used verbatim inside
    /// checkpoints, so the rendering must stay stable).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fusion = {}", self.fusion.as_str());
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "n_ca = {}", self.n_ca);
        let _ = writeln!(s, "n_sa = {}", self.n_sa);
        let _ = writeln!(s, "use_resoftmax = {}", self.use_resoftmax);
        let _ = writeln!(s, "use_shift = {}", self.use_shift);
        let _ = writeln!(s, "w_g = {}", self.w_g);
        let _ = writeln!(s, "w_s = {}", self.w_s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = FuseConfig::default();
        for (key, value) in parse_kv_lines(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        Ok(cfg)
    }

    /// Apply one key; `Ok(false)` means the key is not an architecture key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_num(key, value)?,
            "n_sa" => self.n_sa = parse_num(key, value)?,
            "n_ca" => self.n_ca = parse_num(key, value)?,
            "use_resoftmax" => self.use_resoftmax = parse_bool(key, value)?,
            "use_shift" => self.use_shift = parse_bool(key, value)?,
            "fusion" => self.fusion = FusionKind::parse(value)?,
            "w_s" => self.w_s = parse_num(key, value)?,
            "w_g" => self.w_g = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.n_sa == 0 || self.n_ca == 0 {
            return Err(Error::Config("attention block counts must be positive".into()));
        }
        if self.w_s <= 0.0 || self.w_g < 0.0 {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer family used by the training loops. Adam is the default:
/// the 1e4-weighted structural term produces gradients that raw
/// momentum SGD cannot survive at the published learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    MomentumSgd,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::MomentumSgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::MomentumSgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Schedule and data settings for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub image_size: usize,
    /// Desk-scale override: run exactly this many optimizer steps, with
    /// the epoch schedule spread evenly across them.
    pub steps: Option<u64>,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    /// Paper stage-1 settings: 4 epochs, batch 2.
    pub fn stage1() -> Self {
        Self {
            epochs: 4,
            batch_size: 2,
            lr0: 0.01,
            seed: 0,
            image_size: 256,
            steps: None,
            optimizer: OptimizerKind::Adam,
        }
    }

    /// Paper stage-2 settings: 8 epochs, batch 8.
    pub fn stage2() -> Self {
        Self { epochs: 8, batch_size: 8, ..Self::stage1() }
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr0" => self.lr0 = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "steps" => self.steps = Some(parse_num(key, value)?),
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        Ok(())
    }
}

/// Split `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Apply a config file to both config structs; unknown keys are errors.
pub fn apply_config_file(text: &str, fuse: &mut FuseConfig, train: &mut TrainConfig) -> Result<()> {
    for (key, value) in parse_kv_lines(text)? {
        let hit = fuse.apply(&key, &value)? || train.apply(&key, &value)?;
        if !hit {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        // image_size lives in both structs; keep them aligned
        if key == "image_size" {
            train.image_size = fuse.image_size;
        }
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// The published ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    S1C1,
    S2C2,
    S3C3,
    NoResoftmax,
    NoShift,
    FuseCnn,
    FuseDense,
    OneStage,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::S1C1,
        Variant::S2C2,
        Variant::S3C3,
        Variant::NoResoftmax,
        Variant::NoShift,
        Variant::FuseCnn,
        Variant::FuseDense,
        Variant::OneStage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::S1C1 => "s1-c1",
            Variant::S2C2 => "s2-c2",
            Variant::S3C3 => "s3-c3",
            Variant::NoResoftmax => "no-resoftmax",
            Variant::NoShift => "no-shift",
            Variant::FuseCnn => "fuse-cnn",
            Variant::FuseDense => "fuse-dense",
            Variant::OneStage => "one-stage",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|v| v.name() == name)
            .copied()
            .ok_or_else(|| {
                Error::argument(format!(
                    "unknown variant `{name}` (expected one of: {})",
                    Self::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }

    /// Mutate the architecture for this variant; returns true when the
    /// run should train all parameters jointly in a single stage.
    pub fn apply(&self, cfg: &mut FuseConfig) -> bool {
        match self {
            Variant::S1C1 => {
                cfg.n_sa = 1;
                cfg.n_ca = 1;
            }
            Variant::S2C2 => {
                cfg.n_sa = 2;
                cfg.n_ca = 2;
            }
            Variant::S3C3 => {
                cfg.n_sa = 3;
                cfg.n_ca = 3;
            }
            Variant::NoResoftmax => cfg.use_resoftmax = false,
            Variant::NoShift => cfg.use_shift = false,
            Variant::FuseCnn => cfg.fusion = FusionKind::Cnn,
            Variant::FuseDense => cfg.fusion = FusionKind::Dense,
            Variant::OneStage => return true,
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = FuseConfig::default();
        cfg.n_sa = 2;
        cfg.n_ca = 2;
        cfg.use_shift = false;
        cfg.w_g = 2.5;
        let text = cfg.to_text();
        let back = FuseConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FuseConfig::from_text("nsa = 3\n").is_err());
        let mut f = FuseConfig::default();
        let mut t = TrainConfig::stage1();
        assert!(apply_config_file("lr = 0.1\n", &mut f, &mut t).is_err());
        assert!(apply_config_file("lr0 = 0.1\n# comment\n\nepochs = 2\n", &mut f, &mut t).is_ok());
        assert_eq!(t.lr0, 0.1);
        assert_eq!(t.epochs, 2);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn variants_flip_the_right_switches() {
        let mut cfg = FuseConfig::default();
        assert!(!Variant::S2C2.apply(&mut cfg));
        assert_eq!((cfg.n_sa, cfg.n_ca), (2, 2));
        assert!(!Variant::NoResoftmax.apply(&mut cfg));
        assert!(!cfg.use_resoftmax);
        assert!(!Variant::FuseCnn.apply(&mut cfg));
        assert_eq!(cfg.fusion, FusionKind::Cnn);
        assert!(Variant::OneStage.apply(&mut cfg));
    }
}
