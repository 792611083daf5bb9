//! Little-endian binary formats for datasets (`PMXD`) and checkpoints
//! (`PMXC`), plus the JSON manifest written next to a dataset.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Sample, SceneConfig, CLASS_NAMES};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PMXD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMXC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub count: u32,
    pub height: u16,
    pub width: u16,
    pub classes: u16,
    pub d_min: f32,
    pub d_max: f32,
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn encode_dataset(samples: &[Sample], cfg: &SceneConfig) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("cannot write an empty dataset"))?;
    let (h, w) = (first.height, first.width);
    for (i, s) in samples.iter().enumerate() {
        let px = h * w;
        if s.height != h
            || s.width != w
            || s.image.len() != px * 3
            || s.labels.len() != px
            || s.depth.len() != px
            || s.normal.len() != px * 3
        {
            return Err(Error::contract(format!(
                "sample {i} is {}x{}, expected homogeneous {h}x{w}",
                s.height, s.width
            )));
        }
    }
    let count = u32::try_from(samples.len()).map_err(|_| Error::contract("too many samples"))?;
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::contract(format!("dimension {v} exceeds u16")));
    let mut out = Vec::with_capacity(26 + samples.len() * h * w * 29);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(cfg.num_classes)?.to_le_bytes());
    out.extend_from_slice(&(cfg.d_min as f32).to_le_bytes());
    out.extend_from_slice(&(cfg.d_max as f32).to_le_bytes());
    for s in samples {
        put_f32s(&mut out, &s.image);
        out.extend_from_slice(&s.labels);
        put_f32s(&mut out, &s.depth);
        put_f32s(&mut out, &s.normal);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample], cfg: &SceneConfig) -> Result<()> {
    let bytes = encode_dataset(samples, cfg)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<Sample>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != DATASET_MAGIC {
        return Err(r.format("bad magic, not a PMXD dataset"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header = DatasetHeader {
        count: r.u32()?,
        height: r.u16()?,
        width: r.u16()?,
        classes: r.u16()?,
        d_min: r.f32()?,
        d_max: r.f32()?,
    };
    let (h, w) = (header.height as usize, header.width as usize);
    if h == 0 || w == 0 {
        return Err(r.format("zero image dimension in header"));
    }
    let px = h * w;
    let mut samples = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let image = r.f32s(px * 3)?;
        let labels = r.take(px)?.to_vec();
        let depth = r.f32s(px)?;
        let normal = r.f32s(px * 3)?;
        samples.push(Sample {
            height: h,
            width: w,
            image,
            labels,
            depth,
            normal,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.format(&format!(
            "{} trailing bytes after {} declared samples",
            bytes.len() - r.pos,
            header.count
        )));
    }
    Ok((header, samples))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::contract("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::contract(format!("duplicate tensor name {name:?}")));
        }
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::contract("tensor name too long"))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::contract("tensor rank too high"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::contract("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(entries)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let corrupt = |msg: String| Error::Corruption {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 20 {
        return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(corrupt(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let mut r = Reader::new(body, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.format("bad magic, not a PMXC checkpoint"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.format("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| r.format(&e.to_string()))?;
        if !seen.insert(name.clone()) {
            return Err(r.format(&format!("duplicate tensor name {name:?}")));
        }
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(r.format("trailing bytes before checksum"));
    }
    Ok(out)
}

/// Sidecar metadata for a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneConfig,
    pub class_names: Vec<String>,
    pub normal_frame: String,
    pub depth_convention: String,
}

impl Manifest {
    pub fn new(seed: u64, count: usize, scene: SceneConfig) -> Self {
        Manifest {
            seed,
            count,
            scene,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            normal_frame: "camera frame: +x right, +y up, +z forward (away from camera); \
                           visible normals satisfy n·ray_dir <= 0, so the back wall is (0,0,-1)"
                .into(),
            depth_convention: "z-depth in meters (not ray length), clamped to [d_min, d_max]".into(),
        }
    }
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    dataset.with_file_name(name)
}

pub fn write_manifest(dataset: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::contract(e.to_string()))?;
    write_atomic(&manifest_path(dataset), text.as_bytes())
}

pub fn read_manifest(dataset: &Path) -> Result<Manifest> {
    let path = manifest_path(dataset);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Writes an 8/16-bit binary PGM (`P5`). `maxval` ≤ 255 uses one byte per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, maxval: u16, pixels: &[u16]) -> Result<()> {
    if pixels.len() != width * height || maxval == 0 {
        return Err(Error::contract(format!(
            "PGM {width}x{height} with {} pixels, maxval {maxval}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    for &p in pixels {
        if p > maxval {
            return Err(Error::contract(format!("PGM value {p} exceeds maxval {maxval}")));
        }
        if maxval < 256 {
            out.push(p as u8);
        } else {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    write_atomic(path, &out)
}

/// Writes an 8-bit binary PPM (`P6`) from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::contract(format!("PPM {width}x{height} with {} bytes", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    write_atomic(path, &out)
}

/// Parsed 8-bit NetPBM image: magic (`P5`/`P6`), size, maxval, raw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Netpbm {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

pub fn read_netpbm(path: &Path) -> Result<Netpbm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated NetPBM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric NetPBM header field"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("unsupported NetPBM magic")),
    };
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit NetPBM is supported"));
    }
    let data = bytes
        .get(pos..pos + width * height * channels)
        .ok_or_else(|| bad("truncated NetPBM raster"))?
        .to_vec();
    Ok(Netpbm {
        magic: fields[0].clone(),
        width,
        height,
        maxval: maxval as u16,
        data,
    })
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for v in xs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn format(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.format(&format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.format("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
