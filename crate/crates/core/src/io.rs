//! File formats: Netpbm images, depth maps, the weights container, run
//! configs and metrics CSV.
//!
//! # Sample conversion
//!
//! A Netpbm sample `s` with maximum value `m` reads as `s / m`. Writing maps
//! `v` to `round(clamp(v, 0, 1) * m)`, rounding half away from zero, so a
//! read followed by a write reproduces every sample exactly.
//!
//! # Weights container
//!
//! All integers are little-endian:
//!
//! ```text
//! "DSOW"  version:u32  count:u32
//! count × { name_len:u16  name:utf8  rank:u8  dims:u32×rank  values:f64×prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::DepthMap;
use crate::tensor::params::load_flat;
use crate::tensor::{Grid, ParamSet};
use crate::trainer::{Metrics, TrainConfig};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A decoded P5 (grey) or P6 (RGB) image with its raw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Header comments without the leading `#`, trimmed.
    pub comments: Vec<String>,
    /// Pixel-interleaved samples in file order.
    pub samples: Vec<u16>,
}

impl Netpbm {
    /// Planar grid with samples scaled to `[0, 1]`.
    pub fn to_grid(&self) -> Grid {
        let m = f64::from(self.maxval);
        let c = self.channels;
        Grid::from_fn(c, self.height, self.width, |ch, y, x| {
            f64::from(self.samples[(y * self.width + x) * c + ch]) / m
        })
    }

    /// Quantize a 1- or 3-channel grid.
    pub fn from_grid(grid: &Grid, maxval: u16) -> Result<Self> {
        if grid.channels() != 1 && grid.channels() != 3 {
            return Err(crate::error::dim_err!(
                "Netpbm images have 1 or 3 channels, got {}",
                grid.channels()
            ));
        }
        if maxval == 0 {
            return Err(Error::Parameter("maxval must be positive".into()));
        }
        if let Some(v) = grid.data().iter().find(|v| v.is_nan()) {
            return Err(Error::Domain(format!("cannot quantize {v}")));
        }
        let (c, h, w) = grid.shape();
        let m = f64::from(maxval);
        let mut samples = Vec::with_capacity(grid.len());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    samples.push((grid.get(ch, y, x).clamp(0.0, 1.0) * m).round() as u16);
                }
            }
        }
        Ok(Netpbm {
            width: w,
            height: h,
            channels: c,
            maxval,
            comments: Vec::new(),
            samples,
        })
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comments.push(comment.into());
        self
    }

    /// Value of the first `key=value` comment.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.comments
            .iter()
            .find_map(|c| c.strip_prefix(key)?.trim_start().strip_prefix('=').map(str::trim))
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n");
        for c in &self.comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("{} {}\n{}\n", self.width, self.height, self.maxval));
        let mut bytes = out.into_bytes();
        if self.maxval > 255 {
            bytes.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        } else {
            bytes.extend(self.samples.iter().map(|&s| s as u8));
        }
        bytes
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(format_err("not a binary PGM (P5) or PPM (P6) file")),
        };
        let mut pos = 2;
        let mut comments = Vec::new();
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and comments may precede every header field
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
                        comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
                        pos = end;
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format_err(format!("malformed header field at byte {start}")))?;
        }
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(format_err("header must end with a single whitespace byte"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(format_err(format!("empty image {width}x{height}")));
        }
        if !(1..=65535).contains(&maxval) {
            return Err(format_err(format!("maxval must lie in 1..=65535, got {maxval}")));
        }
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| format_err("image dimensions overflow"))?;
        let wide = maxval > 255;
        let raster = &bytes[pos..];
        let need = if wide { 2 * count } else { count };
        if raster.len() != need {
            return Err(format_err(format!("raster has {} bytes, header implies {need}", raster.len())));
        }
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            raster.iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(s) = samples.iter().find(|&&s| usize::from(s) > maxval) {
            return Err(format_err(format!("sample {s} exceeds maxval {maxval}")));
        }
        Ok(Netpbm {
            width,
            height,
            channels,
            maxval: maxval as u16,
            comments,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Netpbm::decode(&read_bytes(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }
}

pub fn read_image(path: &Path) -> Result<Grid> {
    Ok(Netpbm::read(path)?.to_grid())
}

/// Write an image with the given maxval (255 or 65535 are typical).
pub fn write_image(path: &Path, grid: &Grid, maxval: u16) -> Result<()> {
    Netpbm::from_grid(grid, maxval)?.write(path)
}

/// Header comment key carrying meters per depth unit.
pub const DEPTH_SCALE_KEY: &str = "depth-scale";

/// Depth map from a PGM whose header carries `# depth-scale=<meters>`.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let img = Netpbm::read(path)?;
    if img.channels != 1 {
        return Err(format_err(format!("{}: depth maps must be greyscale PGM", path.display())));
    }
    let scale: f64 = img
        .comment_value(DEPTH_SCALE_KEY)
        .ok_or_else(|| format_err(format!("{}: missing \"# {DEPTH_SCALE_KEY}=\" comment", path.display())))?
        .parse()
        .map_err(|_| format_err(format!("{}: unparsable {DEPTH_SCALE_KEY}", path.display())))?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(format_err(format!("{}: {DEPTH_SCALE_KEY} must be positive, got {scale}", path.display())));
    }
    let grid = Grid::from_fn(1, img.height, img.width, |_, y, x| {
        f64::from(img.samples[y * img.width + x]) * scale
    });
    DepthMap::new(grid)
}

/// 16-bit PGM of `round(d / scale)`.
pub fn write_depth(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!("depth scale must be positive, got {scale}")));
    }
    let g = depth.grid();
    let samples = g
        .data()
        .iter()
        .map(|&d| {
            let s = (d / scale).round();
            if s > 65535.0 {
                Err(Error::Domain(format!("depth {d} exceeds 65535 units of {scale}")))
            } else {
                Ok(s as u16)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Netpbm {
        width: g.width(),
        height: g.height(),
        channels: 1,
        maxval: 65535,
        comments: vec![format!("{DEPTH_SCALE_KEY}={scale}")],
        samples,
    }
    .write(path)
}

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DSOW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Every array of `p`, named and in visiting order.
pub fn named_tensors(p: &impl ParamSet) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit("", &mut |name, dims, values| {
        out.push(NamedTensor {
            name,
            dims,
            values: values.to_vec(),
        })
    });
    out
}

pub fn encode_weights(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    out.extend(WEIGHTS_VERSION.to_le_bytes());
    out.extend(u32::try_from(tensors.len()).map_err(|_| format_err("too many tensors"))?.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| format_err(format!("rank too large for {}", t.name)))?;
        if t.dims.iter().product::<usize>() != t.values.len() {
            return Err(format_err(format!("{}: dims {:?} do not match {} values", t.name, t.dims, t.values.len())));
        }
        out.extend(len.to_le_bytes());
        out.extend(name);
        out.push(rank);
        for &d in &t.dims {
            out.extend(u32::try_from(d).map_err(|_| format_err("dimension too large"))?.to_le_bytes());
        }
        out.extend(t.values.iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("weights file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(format_err("not a weights file (bad magic)"));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(format_err(format!("unsupported weights version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        let name = String::from_utf8(r.take(len.into())?.to_vec()).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0];
        let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format_err(format!("{name}: size overflows")))?;
        let values = r
            .take(n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedTensor { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_weights(path: &Path, p: &impl ParamSet) -> Result<()> {
    write_bytes(path, &encode_weights(&named_tensors(p))?)
}

/// Overwrite `p` from a weights file. Names, order and shapes must match
/// `p`'s layout exactly.
pub fn load_weights(path: &Path, p: &mut impl ParamSet) -> Result<()> {
    let stored = decode_weights(&read_bytes(path)?)?;
    let expected = named_tensors(p);
    if stored.len() != expected.len() {
        return Err(format_err(format!("file has {} tensors, model has {}", stored.len(), expected.len())));
    }
    for (s, e) in stored.iter().zip(&expected) {
        if s.name != e.name || s.dims != e.dims {
            return Err(format_err(format!("file tensor {} {:?} does not match model tensor {} {:?}", s.name, s.dims, e.name, e.dims)));
        }
    }
    let flat: Vec<f64> = stored.into_iter().flat_map(|t| t.values).collect();
    load_flat(p, &flat)
}

/// Keys of a run config, in serialization order.
pub const CONFIG_KEYS: [&str; 9] = [
    "learning_rate",
    "batch_size",
    "epochs",
    "dropout_rate",
    "lambda_dcp",
    "patch",
    "seed",
    "image_size",
    "n_images",
];

/// Named base profiles selectable with `profile = ...`.
pub fn profile(name: &str) -> Option<TrainConfig> {
    match name {
        "desk" => Some(TrainConfig::desk()),
        "full" => Some(TrainConfig::full()),
        "shapes" => Some(TrainConfig::shapes_desk()),
        _ => None,
    }
}

/// Parse `key = value` lines over `base`. `#` starts a comment; blank lines
/// are ignored. An optional `profile` key (desk, full or shapes) replaces
/// the base before the other keys apply, wherever it appears. Unknown and
/// repeated keys are errors, and the result must validate.
pub fn parse_run_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k != "profile" && !CONFIG_KEYS.contains(&k) {
            return Err(format_err(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if entries.iter().any(|e| e.1 == k) {
            return Err(format_err(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        entries.push((i + 1, k, v));
    }
    let mut c = base;
    if let Some(&(line, _, v)) = entries.iter().find(|e| e.1 == "profile") {
        c = profile(v).ok_or_else(|| format_err(format!("line {line}: unknown profile {v:?}")))?;
    }
    for &(line, k, v) in entries.iter().filter(|e| e.1 != "profile") {
        let bad = || format_err(format!("line {line}: invalid value {v:?} for {k}"));
        let f = || v.parse::<f64>().map_err(|_| bad());
        let u = || v.parse::<usize>().map_err(|_| bad());
        match k {
            "learning_rate" => c.learning_rate = f()?,
            "batch_size" => c.batch_size = u()?,
            "epochs" => c.epochs = u()?,
            "dropout_rate" => c.dropout_rate = f()?,
            "lambda_dcp" => c.lambda_dcp = f()?,
            "patch" => c.patch = u()?,
            "seed" => c.seed = v.parse().map_err(|_| bad())?,
            "image_size" => c.image_size = u()?,
            "n_images" => c.n_images = u()?,
            _ => unreachable!("keys checked above"),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Every field, one per line, in [`CONFIG_KEYS`] order. Floats use
/// shortest round-trip formatting, so parsing the output gives back `c`.
pub fn format_run_config(c: &TrainConfig) -> String {
    let values = [
        c.learning_rate.to_string(),
        c.batch_size.to_string(),
        c.epochs.to_string(),
        c.dropout_rate.to_string(),
        c.lambda_dcp.to_string(),
        c.patch.to_string(),
        c.seed.to_string(),
        c.image_size.to_string(),
        c.n_images.to_string(),
    ];
    CONFIG_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub fn read_run_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| format_err(format!("{}: not UTF-8", path.display())))?;
    parse_run_config(&text, base).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_metrics_csv(path: &Path, metrics: &Metrics) -> Result<()> {
    write_bytes(path, metrics.to_csv().as_bytes())
}
