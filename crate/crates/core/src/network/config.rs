use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionKind, AttentionSettings};
use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};

/// Number of blocks: three encoder, one bottleneck, three decoder.
pub const LAB_COUNT: usize = 7;

/// Spatial divisibility required by the three stride-2 stages.
pub const SPATIAL_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resample {
    None,
    Down2,
    Up2,
}

impl Resample {
    pub fn name(self) -> &'static str {
        match self {
            Resample::None => "none",
            Resample::Down2 => "down2",
            Resample::Up2 => "up2",
        }
    }
}

impl fmt::Display for Resample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Resample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Resample::None),
            "down2" => Ok(Resample::Down2),
            "up2" => Ok(Resample::Up2),
            other => Err(Error::config("resample", format!("unknown resample `{other}`"))),
        }
    }
}

/// One Linear Array Block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resample: Resample,
    pub attention: AttentionKind,
    pub use_lrl: bool,
    pub kernel: usize,
    pub slope: f64,
}

impl LabConfig {
    pub fn new(in_channels: usize, out_channels: usize, resample: Resample) -> Self {
        Self {
            in_channels,
            out_channels,
            resample,
            attention: AttentionKind::Lasa,
            use_lrl: true,
            kernel: 3,
            slope: 0.2,
        }
    }

    /// Whether the local residual needs a 1x1 projection instead of identity.
    pub fn needs_projection(&self) -> bool {
        self.use_lrl && (self.in_channels != self.out_channels || self.resample != Resample::None)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(
                format!("{field}.channels"),
                "channel counts must be positive",
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(
                format!("{field}.kernel"),
                format!("kernel must be odd, got {}", self.kernel),
            ));
        }
        if !self.slope.is_finite() || self.slope < 0.0 {
            return Err(Error::config(
                format!("{field}.slope"),
                "slope must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Linear Array Network layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LanConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Width multiplier at full, 1/2, 1/4 and 1/8 resolution.
    pub multipliers: [usize; 4],
    pub upscale: usize,
    pub labs: Vec<LabConfig>,
    pub skip_connections: bool,
    pub global_residual: bool,
    pub attention: AttentionSettings,
    pub seed: u64,
}

/// Named starting points for [`LanConfig`].
pub const PRESETS: [&str; 5] = ["paper-rgb", "paper-bayer", "desk", "desk-bayer", "tiny"];

impl LanConfig {
    /// Symmetric U-shaped layout with every block carrying LASA and LRL.
    pub fn standard(in_channels: usize, base_width: usize, upscale: usize) -> Self {
        let multipliers = [1, 2, 4, 8];
        Self {
            in_channels,
            out_channels: 3,
            base_width,
            multipliers,
            upscale,
            labs: standard_labs(base_width, multipliers),
            skip_connections: true,
            global_residual: true,
            attention: AttentionSettings::default(),
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-rgb" => Ok(Self::standard(3, 15, 1)),
            "paper-bayer" => Ok(Self::standard(4, 15, 2)),
            "desk" => Ok(Self::standard(3, 8, 1)),
            "desk-bayer" => Ok(Self::standard(4, 8, 2)),
            "tiny" => Ok(Self::standard(3, 4, 1)),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
            )),
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.multipliers[level]
    }

    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        for lab in &mut self.labs {
            lab.attention = kind;
        }
        self
    }

    pub fn with_lrl(mut self, on: bool) -> Self {
        for lab in &mut self.labs {
            lab.use_lrl = on;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Rebuilds the block list from `base_width` and `multipliers`, keeping
    /// the per-block options of the first block.
    pub fn relayout(&mut self) {
        let template = self.labs.first().copied();
        self.labs = standard_labs(self.base_width, self.multipliers);
        if let Some(t) = template {
            for lab in &mut self.labs {
                lab.attention = t.attention;
                lab.use_lrl = t.use_lrl;
                lab.kernel = t.kernel;
                lab.slope = t.slope;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.out_channels == 0 {
            return Err(Error::config("out_channels", "must be positive"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be positive"));
        }
        if !matches!(self.upscale, 1 | 2) {
            return Err(Error::config(
                "upscale",
                format!("must be 1 or 2, got {}", self.upscale),
            ));
        }
        if self.attention.reduction == 0 {
            return Err(Error::config("attention.reduction", "must be at least 1"));
        }
        if self.labs.len() != LAB_COUNT {
            return Err(Error::config(
                "labs",
                format!("expected {LAB_COUNT} blocks, got {}", self.labs.len()),
            ));
        }
        let expected = [
            Resample::Down2,
            Resample::Down2,
            Resample::Down2,
            Resample::None,
            Resample::Up2,
            Resample::Up2,
            Resample::Up2,
        ];
        let mut width = self.base_width;
        for (i, (lab, want)) in self.labs.iter().zip(expected).enumerate() {
            let field = format!("labs.{i}");
            lab.validate(&field)?;
            if lab.resample != want {
                return Err(Error::config(
                    format!("{field}.resample"),
                    format!("block {i} must be {want}, got {}", lab.resample),
                ));
            }
            if lab.in_channels != width {
                return Err(Error::config(
                    format!("{field}.in_channels"),
                    format!("expected {width} to match the previous stage, got {}", lab.in_channels),
                ));
            }
            width = lab.out_channels;
        }
        if self.global_residual && width != self.base_width {
            return Err(Error::config(
                "labs.6.out_channels",
                format!("must equal base_width {} for the global residual", self.base_width),
            ));
        }
        if self.skip_connections {
            for (dec, enc) in [(4, 1), (5, 0)] {
                if self.labs[dec].out_channels != self.labs[enc].out_channels {
                    return Err(Error::config(
                        format!("labs.{dec}.out_channels"),
                        format!(
                            "skip connection needs {} channels to match labs.{enc}",
                            self.labs[enc].out_channels
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("in_channels", self.in_channels);
        kv.set("out_channels", self.out_channels);
        kv.set("base_width", self.base_width);
        kv.set("multipliers", join_list(&self.multipliers));
        kv.set("upscale", self.upscale);
        kv.set("skip_connections", self.skip_connections);
        kv.set("global_residual", self.global_residual);
        kv.set("attention.reduction", self.attention.reduction);
        kv.set("attention.scale_qk", self.attention.scale_qk);
        kv.set("attention.simam_lambda", self.attention.simam_lambda);
        kv.set("seed", self.seed);
        for (i, lab) in self.labs.iter().enumerate() {
            kv.set(format!("labs.{i}.in_channels"), lab.in_channels);
            kv.set(format!("labs.{i}.out_channels"), lab.out_channels);
            kv.set(format!("labs.{i}.resample"), lab.resample);
            kv.set(format!("labs.{i}.attention"), lab.attention);
            kv.set(format!("labs.{i}.lrl"), lab.use_lrl);
            kv.set(format!("labs.{i}.kernel"), lab.kernel);
            kv.set(format!("labs.{i}.slope"), lab.slope);
        }
        kv
    }

    /// Overrides fields of `base` with the entries in `kv`.
    ///
    /// Changing `base_width` or `multipliers` relayouts the blocks; the
    /// `block.*` keys apply to every block and `labs.<i>.*` to one.
    pub fn from_kv(kv: &KvConfig, base: LanConfig) -> Result<Self> {
        let mut cfg = base;
        cfg.in_channels = kv.get_or("in_channels", cfg.in_channels)?;
        cfg.out_channels = kv.get_or("out_channels", cfg.out_channels)?;
        cfg.upscale = kv.get_or("upscale", cfg.upscale)?;
        cfg.skip_connections = kv.get_or("skip_connections", cfg.skip_connections)?;
        cfg.global_residual = kv.get_or("global_residual", cfg.global_residual)?;
        cfg.attention.reduction = kv.get_or("attention.reduction", cfg.attention.reduction)?;
        cfg.attention.scale_qk = kv.get_or("attention.scale_qk", cfg.attention.scale_qk)?;
        cfg.attention.simam_lambda = kv.get_or("attention.simam_lambda", cfg.attention.simam_lambda)?;
        cfg.seed = kv.get_or("seed", cfg.seed)?;

        let base_width = kv.get_or("base_width", cfg.base_width)?;
        let multipliers = match kv.get_list::<usize>("multipliers")? {
            None => cfg.multipliers,
            Some(v) => <[usize; 4]>::try_from(v)
                .map_err(|v| Error::config("multipliers", format!("expected 4 entries, got {}", v.len())))?,
        };
        if base_width != cfg.base_width || multipliers != cfg.multipliers {
            cfg.base_width = base_width;
            cfg.multipliers = multipliers;
            cfg.relayout();
        }

        for lab in &mut cfg.labs {
            lab.attention = kv.get_or("block.attention", lab.attention)?;
            lab.use_lrl = kv.get_or("block.lrl", lab.use_lrl)?;
            lab.kernel = kv.get_or("block.kernel", lab.kernel)?;
            lab.slope = kv.get_or("block.slope", lab.slope)?;
        }
        for (i, lab) in cfg.labs.iter_mut().enumerate() {
            let key = |k: &str| format!("labs.{i}.{k}");
            lab.in_channels = kv.get_or(&key("in_channels"), lab.in_channels)?;
            lab.out_channels = kv.get_or(&key("out_channels"), lab.out_channels)?;
            lab.resample = kv.get_or(&key("resample"), lab.resample)?;
            lab.attention = kv.get_or(&key("attention"), lab.attention)?;
            lab.use_lrl = kv.get_or(&key("lrl"), lab.use_lrl)?;
            lab.kernel = kv.get_or(&key("kernel"), lab.kernel)?;
            lab.slope = kv.get_or(&key("slope"), lab.slope)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn standard_labs(c0: usize, m: [usize; 4]) -> Vec<LabConfig> {
    let w = m.map(|k| c0 * k);
    vec![
        LabConfig::new(w[0], w[1], Resample::Down2),
        LabConfig::new(w[1], w[2], Resample::Down2),
        LabConfig::new(w[2], w[3], Resample::Down2),
        LabConfig::new(w[3], w[3], Resample::None),
        LabConfig::new(w[3], w[2], Resample::Up2),
        LabConfig::new(w[2], w[1], Resample::Up2),
        LabConfig::new(w[1], w[0], Resample::Up2),
    ]
}

/// One row of the structural ablation lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationArm {
    pub name: &'static str,
    pub skip_connections: bool,
    pub global_residual: bool,
    pub local_residual: bool,
    pub attention: AttentionKind,
}

impl AblationArm {
    pub fn apply(&self, base: &LanConfig) -> LanConfig {
        let mut cfg = base
            .clone()
            .with_attention(self.attention)
            .with_lrl(self.local_residual);
        cfg.skip_connections = self.skip_connections;
        cfg.global_residual = self.global_residual;
        cfg
    }
}

const fn arm(name: &'static str, sc: bool, grl: bool, lrl: bool, attention: AttentionKind) -> AblationArm {
    AblationArm {
        name,
        skip_connections: sc,
        global_residual: grl,
        local_residual: lrl,
        attention,
    }
}

/// Network-design ablation: residual paths and LASA toggled.
pub const DESIGN_ARMS: [AblationArm; 6] = [
    arm("Base", false, false, false, AttentionKind::None),
    arm("Base+SC", true, false, false, AttentionKind::None),
    arm("Base+SC+GRL", true, true, false, AttentionKind::None),
    arm("Base+SC+GRL+LRL", true, true, true, AttentionKind::None),
    arm("Base+SC+GRL+LASA", true, true, false, AttentionKind::Lasa),
    arm("Base+SC+GRL+LRL+LASA", true, true, true, AttentionKind::Lasa),
];

/// Attention-mechanism comparison on the full network.
pub const ATTENTION_ARMS: [AblationArm; 4] = [
    arm("LAN", true, true, true, AttentionKind::None),
    arm("LAN+CBAM", true, true, true, AttentionKind::Cbam),
    arm("LAN+SimAM", true, true, true, AttentionKind::Simam),
    arm("LAN+LASA", true, true, true, AttentionKind::Lasa),
];
