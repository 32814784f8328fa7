//! Bayer RAW frames: packing, black-level normalization and a minimal
//! portable container.
//!
//! Container layout: one ASCII header line
//! `LANRAW width=<w> height=<h> pattern=<RGGB|BGGR|GRBG|GBRG> black=<b> white=<w> ratio=<r>`
//! terminated by `\n`, then `width * height` little-endian `u16` counts in
//! row-major order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const RAW_MAGIC: &str = "LANRAW";

/// Exposure amplification is capped at this ratio.
pub const MAX_EXPOSURE_RATIO: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [Self::Rggb, Self::Bggr, Self::Grbg, Self::Gbrg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rggb => "RGGB",
            Self::Bggr => "BGGR",
            Self::Grbg => "GRBG",
            Self::Gbrg => "GBRG",
        }
    }

    /// `(row, col)` offsets inside the 2x2 cell of R, G1, G2 and B.
    pub fn offsets(self) -> [(usize, usize); 4] {
        match self {
            Self::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            Self::Bggr => [(1, 1), (0, 1), (1, 0), (0, 0)],
            Self::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            Self::Gbrg => [(1, 0), (0, 0), (1, 1), (0, 1)],
        }
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Format(format!("unknown Bayer pattern `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    /// `[1, H, W]` sensor counts.
    pub mosaic: Tensor<f32>,
    pub black_level: f64,
    pub white_level: f64,
    /// Reference exposure over input exposure.
    pub exposure_ratio: f64,
    pub pattern: BayerPattern,
}

impl RawFrame {
    pub fn height(&self) -> usize {
        self.mosaic.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mosaic.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.mosaic.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::invalid(
                "raw frame",
                format!("mosaic must be [1, H, W], got {s:?}"),
            ));
        }
        if !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
            return Err(Error::invalid(
                "raw frame",
                format!("mosaic extents must be even, got {}x{}", s[1], s[2]),
            ));
        }
        if !(self.white_level > self.black_level) {
            return Err(Error::invalid(
                "raw frame",
                format!(
                    "white level {} must exceed black level {}",
                    self.white_level, self.black_level
                ),
            ));
        }
        if !(self.exposure_ratio >= 1.0) || !self.exposure_ratio.is_finite() {
            return Err(Error::invalid(
                "raw frame",
                format!("exposure ratio must be >= 1, got {}", self.exposure_ratio),
            ));
        }
        Ok(())
    }
}

/// `[1, H, W]` mosaic to `[4, H/2, W/2]` planes ordered R, G1, G2, B.
pub fn pack_bayer(frame: &RawFrame) -> Result<Tensor<f32>> {
    frame.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let offs = frame.pattern.offsets();
    let m = frame.mosaic.data();
    Ok(Tensor::from_fn(vec![4, h / 2, w / 2], |i| {
        let (dy, dx) = offs[i[0]];
        m[(2 * i[1] + dy) * w + 2 * i[2] + dx]
    }))
}

/// Inverse of [`pack_bayer`].
pub fn unpack_bayer(packed: &Tensor<f32>, pattern: BayerPattern) -> Result<Tensor<f32>> {
    let s = packed.shape();
    if s.len() != 3 || s[0] != 4 {
        return Err(Error::invalid("unpack_bayer", format!("expected [4, h, w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let offs = pattern.offsets();
    let mut out = vec![0.0f32; 4 * h * w];
    for (p, &(dy, dx)) in offs.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[(2 * y + dy) * 2 * w + 2 * x + dx] = packed.data()[(p * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![1, 2 * h, 2 * w], out)
}

/// `clip(max(x - black, 0) / (white - black) * min(ratio, 300), 0, 1)`.
pub fn preprocess_raw(packed: &Tensor<f32>, frame: &RawFrame) -> Result<Tensor<f32>> {
    if !(frame.white_level > frame.black_level) {
        return Err(Error::invalid(
            "preprocess_raw",
            format!(
                "white level {} must exceed black level {}",
                frame.white_level, frame.black_level
            ),
        ));
    }
    let range = frame.white_level - frame.black_level;
    let ratio = frame.exposure_ratio.min(MAX_EXPOSURE_RATIO);
    Ok(packed.map(|v| {
        let n = (v as f64 - frame.black_level).max(0.0) / range;
        (n * ratio).clamp(0.0, 1.0) as f32
    }))
}

pub fn encode_raw(frame: &RawFrame) -> Result<Vec<u8>> {
    frame.validate()?;
    let mut out = format!(
        "{RAW_MAGIC} width={} height={} pattern={} black={} white={} ratio={}\n",
        frame.width(),
        frame.height(),
        frame.pattern,
        frame.black_level,
        frame.white_level,
        frame.exposure_ratio
    )
    .into_bytes();
    for &v in frame.mosaic.data() {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::invalid(
                "write_raw",
                format!("count {v} is not a 16-bit integer"),
            ));
        }
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawFrame> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("raw container: missing header line".into()))?;
    let header =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("raw container: header is not UTF-8".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(RAW_MAGIC) {
        return Err(Error::Format(format!(
            "raw container: header must start with {RAW_MAGIC}"
        )));
    }
    let mut kv = std::collections::HashMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("raw container: bad header field `{f}`")))?;
        kv.insert(k, v);
    }
    fn field<V: FromStr>(kv: &std::collections::HashMap<&str, &str>, key: &str) -> Result<V> {
        kv.get(key)
            .ok_or_else(|| Error::Format(format!("raw container: missing `{key}`")))?
            .parse()
            .map_err(|_| Error::Format(format!("raw container: bad `{key}`")))
    }
    let width: usize = field(&kv, "width")?;
    let height: usize = field(&kv, "height")?;
    let pattern: BayerPattern = kv
        .get("pattern")
        .ok_or_else(|| Error::Format("raw container: missing `pattern`".into()))?
        .parse()?;
    let body = &bytes[nl + 1..];
    let expected = width * height * 2;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "raw container: expected {expected} data bytes for {width}x{height}, got {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
        .collect();
    let frame = RawFrame {
        mosaic: Tensor::new(vec![1, height, width], data)?,
        black_level: field(&kv, "black")?,
        white_level: field(&kv, "white")?,
        exposure_ratio: field(&kv, "ratio")?,
        pattern,
    };
    frame.validate()?;
    Ok(frame)
}

pub fn read_raw(path: &Path) -> Result<RawFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_raw(frame: &RawFrame, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(frame)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, pattern: BayerPattern) -> RawFrame {
        RawFrame {
            mosaic: Tensor::from_fn(vec![1, h, w], |i| (i[1] * w + i[2]) as f32),
            black_level: 512.0,
            white_level: 16383.0,
            exposure_ratio: 1.0,
            pattern,
        }
    }

    #[test]
    fn constant_mosaic_gives_constant_planes() {
        let mut f = frame(4, 6, BayerPattern::Rggb);
        f.mosaic = Tensor::full(vec![1, 4, 6], 700.0);
        let p = pack_bayer(&f).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 700.0));
    }

    #[test]
    fn planes_hold_their_sites() {
        let f = frame(4, 4, BayerPattern::Rggb);
        let p = pack_bayer(&f).unwrap();
        // R sites are (even, even), B sites (odd, odd)
        assert_eq!(p.index_first(0).data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(p.index_first(1).data(), &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(p.index_first(2).data(), &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(p.index_first(3).data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn unpack_inverts_pack_for_every_pattern() {
        for pat in BayerPattern::ALL {
            let f = frame(6, 8, pat);
            let back = unpack_bayer(&pack_bayer(&f).unwrap(), pat).unwrap();
            assert_eq!(back, f.mosaic);
        }
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(pack_bayer(&frame(5, 4, BayerPattern::Rggb)).is_err());
    }

    #[test]
    fn preprocess_closed_form() {
        let mut f = frame(2, 2, BayerPattern::Rggb);
        let packed = Tensor::from_f64(vec![4, 1, 1], &[512.0, 16383.0, 2099.0, 100.0]).unwrap();
        let out = preprocess_raw(&packed, &f).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], 1.0);
        assert!((out.data()[2] as f64 - 0.1).abs() < 1e-5);
        assert_eq!(out.data()[3], 0.0);
        f.exposure_ratio = 100.0;
        assert_eq!(preprocess_raw(&packed, &f).unwrap().data()[2], 1.0);
        f.white_level = 100.0;
        assert!(preprocess_raw(&packed, &f).is_err());
    }

    #[test]
    fn container_round_trip() {
        let mut f = frame(4, 6, BayerPattern::Gbrg);
        f.exposure_ratio = 250.0;
        let back = decode_raw(&encode_raw(&f).unwrap()).unwrap();
        assert_eq!(back, f);
        let bytes = encode_raw(&f).unwrap();
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
    }
}
