//! Training loop: Adam on the mixed loss with a one-step learning-rate drop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::data::{augment, load_pair_dir, procedural_image, random_crop, synth_lowlight, ImagePair, SynthParams};
use crate::engine::{Adam, Element, Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{mix_loss_graph, LossWeights, MsSsimConfig, RandomConvExtractor};
use crate::network::{build_lan, save, LanConfig, LanModel, SPATIAL_MULTIPLE};

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// 32-bit floats.
    Train,
    /// 64-bit floats.
    Verify,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Train => "train",
            Precision::Verify => "verify",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Precision::Train),
            "verify" => Ok(Precision::Verify),
            other => Err(Error::config(
                "precision",
                format!("expected `train` or `verify`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural clean images degraded by [`synth_lowlight`].
    Synth {
        count: usize,
        size: usize,
        params: SynthParams,
        seed: u64,
    },
    /// Two directories of name-matched PNGs.
    Dirs { input: PathBuf, gt: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<ImagePair>> {
        match self {
            DataSource::Synth {
                count,
                size,
                params,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|i| {
                        let s: u64 = rng.random();
                        let mut pair = synth_lowlight(&procedural_image(*size, *size, s), params, s ^ 0x5eed)?;
                        pair.id = format!("synth-{i}");
                        Ok(pair)
                    })
                    .collect()
            }
            DataSource::Dirs { input, gt } => Ok(load_pair_dir(input, gt)?.pairs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: LanConfig,
    pub data: DataSource,
    pub patch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Drop to `lr / 10` once half of the epochs are done.
    pub lr_drop: bool,
    pub loss: LossWeights,
    pub ms_ssim: MsSsimConfig,
    pub extractor_seed: u64,
    pub augment: bool,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 writes only the final model.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl TrainConfig {
    /// Training settings around a named network preset.
    pub fn preset(name: &str) -> Result<Self> {
        let model = LanConfig::preset(name)?;
        let patch_size = match name {
            "paper-rgb" | "paper-bayer" => 256,
            "tiny" => 16,
            _ => 64,
        };
        Ok(Self {
            model,
            data: DataSource::Synth {
                count: 8,
                size: patch_size,
                params: SynthParams::default(),
                seed: 0,
            },
            patch_size,
            epochs: 10,
            lr: 1e-4,
            lr_drop: true,
            loss: LossWeights::default(),
            ms_ssim: MsSsimConfig::default(),
            extractor_seed: 0,
            augment: true,
            seed: 0,
            checkpoint_every: 0,
            precision: Precision::Train,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.ms_ssim.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.patch_size < SPATIAL_MULTIPLE {
            return Err(Error::config(
                "train.patch_size",
                format!("must be at least {SPATIAL_MULTIPLE}"),
            ));
        }
        match &self.data {
            DataSource::Synth {
                count, size, params, ..
            } => {
                params.validate()?;
                if *count == 0 || *size < SPATIAL_MULTIPLE {
                    return Err(Error::config(
                        "data",
                        format!("synthetic set needs count >= 1 and size >= {SPATIAL_MULTIPLE}"),
                    ));
                }
                if self.model.in_channels != 3 || self.model.upscale != 1 {
                    return Err(Error::config(
                        "data.source",
                        "synthetic pairs are RGB at scale 1; use an RGB model",
                    ));
                }
            }
            DataSource::Dirs { input, gt } => {
                for (key, p) in [("data.input_dir", input), ("data.gt_dir", gt)] {
                    if !p.is_dir() {
                        return Err(Error::config(key, format!("{} is not a directory", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_drop && epoch >= self.epochs.div_ceil(2) && self.epochs > 1 {
            self.lr / 10.0
        } else {
            self.lr
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("train.epochs", self.epochs);
        kv.set("train.lr", self.lr);
        kv.set("train.lr_drop", self.lr_drop);
        kv.set("train.patch_size", self.patch_size);
        kv.set("train.augment", self.augment);
        kv.set("train.seed", self.seed);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv.set("train.precision", self.precision);
        kv.set("train.extractor_seed", self.extractor_seed);
        kv.set("train.ms_ssim_scales", self.ms_ssim.scales);
        match &self.data {
            DataSource::Synth {
                count,
                size,
                params,
                seed,
            } => {
                kv.set("data.source", "synth");
                kv.set("data.count", count);
                kv.set("data.size", size);
                kv.set("data.gamma", params.gamma);
                kv.set("data.gain", params.gain);
                kv.set("data.noise_sigma", params.noise_sigma);
                kv.set("data.seed", seed);
            }
            DataSource::Dirs { input, gt } => {
                kv.set("data.source", "dirs");
                kv.set("data.input_dir", input.display());
                kv.set("data.gt_dir", gt.display());
            }
        }
        kv.merge_section("loss", &self.loss.to_kv());
        kv.merge_section("model", &self.model.to_kv());
        kv
    }

    /// Reads a config; `preset` picks the starting point (default `desk`).
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let preset: String = kv.get_or("preset", "desk".to_string())?;
        let mut cfg = Self::preset(&preset)?;
        cfg.epochs = kv.get_or("train.epochs", cfg.epochs)?;
        cfg.lr = kv.get_or("train.lr", cfg.lr)?;
        cfg.lr_drop = kv.get_or("train.lr_drop", cfg.lr_drop)?;
        cfg.patch_size = kv.get_or("train.patch_size", cfg.patch_size)?;
        cfg.augment = kv.get_or("train.augment", cfg.augment)?;
        cfg.seed = kv.get_or("train.seed", cfg.seed)?;
        cfg.checkpoint_every = kv.get_or("train.checkpoint_every", cfg.checkpoint_every)?;
        cfg.precision = kv.get_or("train.precision", cfg.precision)?;
        cfg.extractor_seed = kv.get_or("train.extractor_seed", cfg.extractor_seed)?;
        cfg.ms_ssim.scales = kv.get_or("train.ms_ssim_scales", cfg.ms_ssim.scales)?;

        let source: String = kv.get_or("data.source", "synth".to_string())?;
        cfg.data = match source.as_str() {
            "synth" => {
                let (count, size, params, seed) = match cfg.data {
                    DataSource::Synth {
                        count,
                        size,
                        params,
                        seed,
                    } => (count, size, params, seed),
                    DataSource::Dirs { .. } => (8, cfg.patch_size, SynthParams::default(), 0),
                };
                DataSource::Synth {
                    count: kv.get_or("data.count", count)?,
                    size: kv.get_or("data.size", size)?,
                    params: SynthParams {
                        gamma: kv.get_or("data.gamma", params.gamma)?,
                        gain: kv.get_or("data.gain", params.gain)?,
                        noise_sigma: kv.get_or("data.noise_sigma", params.noise_sigma)?,
                    },
                    seed: kv.get_or("data.seed", seed)?,
                }
            }
            "dirs" => {
                let get = |k: &str| -> Result<PathBuf> {
                    kv.raw(k)
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::config(k.to_string(), "required when data.source = dirs"))
                };
                DataSource::Dirs {
                    input: get("data.input_dir")?,
                    gt: get("data.gt_dir")?,
                }
            }
            other => {
                return Err(Error::config(
                    "data.source",
                    format!("expected `synth` or `dirs`, got `{other}`"),
                ))
            }
        };
        cfg.loss = LossWeights::from_kv(&kv.section("loss"), cfg.loss)?;
        cfg.model = LanConfig::from_kv(&kv.section("model"), cfg.model)?;
        Ok(cfg)
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l1: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub contrastive: Option<f64>,
    pub total: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        write!(
            f,
            "step={} epoch={} lr={:e} l1={} ms_ssim={} cl={} total={:.6}",
            self.step,
            self.epoch,
            self.lr,
            opt(self.l1),
            opt(self.ms_ssim),
            opt(self.contrastive),
            self.total
        )
    }
}

impl StepRecord {
    /// Parses a line written by the `Display` impl.
    pub fn parse(line: &str) -> Option<Self> {
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=')?;
            fields.insert(k, v);
        }
        let opt = |k: &str| -> Option<Option<f64>> {
            let v = *fields.get(k)?;
            if v == "-" {
                Some(None)
            } else {
                v.parse().ok().map(Some)
            }
        };
        Some(Self {
            step: fields.get("step")?.parse().ok()?,
            epoch: fields.get("epoch")?.parse().ok()?,
            lr: fields.get("lr")?.parse().ok()?,
            l1: opt("l1")?,
            ms_ssim: opt("ms_ssim")?,
            contrastive: opt("cl")?,
            total: fields.get("total")?.parse().ok()?,
        })
    }
}

/// Network input as an RGB image at output resolution, used as the
/// contrastive negative: packed Bayer planes become (R, mean G, B) and are
/// repeated `scale` times along each axis.
pub fn input_as_rgb(input: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let s = input.shape();
    let rgb = match s {
        [3, _, _] => input.clone(),
        [4, h, w] => {
            let (h, w) = (*h, *w);
            let d = input.data();
            Tensor::from_fn(vec![3, h, w], |i| {
                let at = |p: usize| d[(p * h + i[1]) * w + i[2]];
                match i[0] {
                    0 => at(0),
                    1 => 0.5 * (at(1) + at(2)),
                    _ => at(3),
                }
            })
        }
        _ => {
            return Err(Error::invalid(
                "input_as_rgb",
                format!("expected 3 or 4 channels, got {s:?}"),
            ))
        }
    };
    if scale == 1 {
        return Ok(rgb);
    }
    crate::engine::kernels::upsample_nearest(&rgb.unsqueeze0(), scale).map(|t| t.index_first(0))
}

/// Largest multiple of 8 not above `min(size, h, w)`.
fn effective_patch(size: usize, h: usize, w: usize) -> usize {
    let p = size.min(h).min(w);
    p - p % SPATIAL_MULTIPLE
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Final model file name inside the output directory.
pub const FINAL_MODEL: &str = "model.lan";

pub struct Trainer<T: Element> {
    pub config: TrainConfig,
    pub model: LanModel<T>,
    adam: Adam<T>,
    extractor: RandomConvExtractor<T>,
    step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_lan(&config.model)?;
        let extractor = RandomConvExtractor::standard(config.model.out_channels, config.extractor_seed);
        let adam = Adam::new(config.lr);
        Ok(Self {
            config,
            model,
            adam,
            extractor,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One forward/backward/update on a whole pair.
    pub fn train_step(&mut self, pair: &ImagePair, epoch: usize) -> Result<StepRecord> {
        let step = self.step + 1;
        let lr = self.config.lr_at(epoch);
        let diverged = |e: Error| Error::Diverged {
            step,
            source: Box::new(e),
        };
        let s = self.config.model.upscale;
        let mut g = Graph::<T>::new();
        let x = g.constant(pair.input.cast::<T>().unsqueeze0());
        let gt = g.constant(pair.gt.cast::<T>().unsqueeze0());
        let neg = g.constant(input_as_rgb(&pair.input, s)?.cast::<T>().unsqueeze0());
        let trace = self.model.forward_graph(&mut g, x).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(e),
            other => other,
        })?;
        let loss = mix_loss_graph(
            &mut g,
            trace.out,
            gt,
            neg,
            &self.config.loss,
            &self.config.ms_ssim,
            &self.extractor,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => diverged(e),
            other => other,
        })?;
        let values = loss.values(&g);
        if !values.total.is_finite() {
            return Err(diverged(Error::NonFinite { op: "mix_loss" }));
        }
        let grads = g.backward(loss.total).map_err(diverged)?;
        self.adam.lr = lr;
        self.adam.step(&mut self.model.params, &grads)?;
        if self.model.params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(diverged(Error::NonFinite { op: "adam_step" }));
        }
        self.step = step;
        Ok(StepRecord {
            step,
            epoch,
            lr,
            l1: values.l1,
            ms_ssim: values.ms_ssim,
            contrastive: values.contrastive,
            total: values.total,
        })
    }

    /// Samples the training view of a pair for `epoch`, `index`.
    pub fn sample(&self, pair: &ImagePair, epoch: usize, index: usize) -> Result<ImagePair> {
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((epoch as u64) << 32 | index as u64);
        let (h, w) = (pair.input.shape()[1], pair.input.shape()[2]);
        let patch = effective_patch(self.config.patch_size, h, w);
        if patch == 0 {
            return Err(Error::invalid(
                "train",
                format!("pair `{}` is smaller than {SPATIAL_MULTIPLE} px", pair.id),
            ));
        }
        let mut view = random_crop(pair, patch, seed)?;
        if self.config.augment {
            view = augment(&view, seed ^ 0xa5a5).0;
        }
        Ok(view)
    }

    /// Trains for the configured epochs, reporting every step to `on_step`.
    ///
    /// With an output directory, checkpoints are written atomically, so a
    /// divergence leaves the last good one in place.
    pub fn run(
        &mut self,
        data: &[ImagePair],
        out_dir: Option<&Path>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainSummary> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let want_c = self.config.model.in_channels;
        if let Some(p) = data.iter().find(|p| p.input.shape()[0] != want_c) {
            return Err(Error::invalid(
                "train",
                format!(
                    "pair `{}` has {} input channels, the model expects {want_c}",
                    p.id,
                    p.input.shape()[0]
                ),
            ));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.config.to_kv().save(&dir.join("config.txt"))?;
        }
        let mut summary = TrainSummary {
            steps: 0,
            last: None,
            checkpoints: Vec::new(),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..self.config.epochs {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x51_7cc1_b727_220a));
            order.shuffle(&mut rng);
            for (k, &i) in order.iter().enumerate() {
                let view = self.sample(&data[i], epoch, k)?;
                let rec = self.train_step(&view, epoch)?;
                on_step(&rec);
                summary.last = Some(rec);
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < self.config.epochs {
                    let path = dir.join(format!("checkpoint_e{:04}.lan", epoch + 1));
                    write_atomic(&self.model, &path)?;
                    summary.checkpoints.push(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join(FINAL_MODEL);
            write_atomic(&self.model, &path)?;
            summary.checkpoints.push(path);
        }
        summary.steps = self.step;
        Ok(summary)
    }
}

fn write_atomic<T: Element>(model: &LanModel<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("lan.tmp");
    save(model, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::preset("tiny").unwrap();
        cfg.data = DataSource::Synth {
            count: 1,
            size: 16,
            params: SynthParams::default(),
            seed: 3,
        };
        cfg.epochs = 2;
        cfg
    }

    #[test]
    fn schedule_drops_at_half() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 4;
        let lrs: Vec<f64> = (0..4).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, [1e-4, 1e-4, 1e-5, 1e-5]);
        cfg.epochs = 1;
        assert_eq!(cfg.lr_at(0), 1e-4);
        cfg.lr_drop = false;
        cfg.epochs = 4;
        assert_eq!(cfg.lr_at(3), 1e-4);
    }

    #[test]
    fn two_step_run_logs_two_lines() {
        let cfg = tiny_cfg();
        let data = cfg.data.load().unwrap();
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let mut lines = Vec::new();
        let summary = t.run(&data, None, &mut |r| lines.push(r.to_string())).unwrap();
        assert_eq!(summary.steps, 2);
        assert_eq!(lines.len(), 2);
        let recs: Vec<StepRecord> = lines.iter().map(|l| StepRecord::parse(l).unwrap()).collect();
        assert_eq!(recs[0].lr, 1e-4);
        assert_eq!(recs[1].lr, 1e-5);
        assert!(recs.iter().all(|r| r.total.is_finite() && r.l1.is_some()));
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = tiny_cfg();
        cfg.loss.lambda3 = 0.0;
        cfg.model.seed = 5;
        let back = TrainConfig::from_kv(&KvConfig::parse(&cfg.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bayer_input_as_rgb() {
        let packed = Tensor::from_fn(vec![4, 2, 2], |i| i[0] as f32);
        let rgb = input_as_rgb(&packed, 2).unwrap();
        assert_eq!(rgb.shape(), &[3, 4, 4]);
        assert_eq!(rgb.at(&[1, 3, 3]), 1.5);
        assert_eq!(rgb.at(&[2, 0, 0]), 3.0);
    }

    #[test]
    fn missing_dirs_rejected() {
        let mut cfg = tiny_cfg();
        cfg.data = DataSource::Dirs {
            input: "/nonexistent/a".into(),
            gt: "/nonexistent/b".into(),
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("data.input_dir"));
    }
}
