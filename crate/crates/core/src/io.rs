//! On-disk formats: the BUFF tensor container, 16-bit PGM images and the
//! metrics CSV.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "BUFF" | version u32 | count u32 | count x { name_len u32 | name | rank u32 | dims u64 x rank | values f32 x prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{BuffError, Result};
use crate::grid::ImageGrid;
use crate::nn::{NamedTensor, NetworkParams};

pub const MAGIC: &[u8; 4] = b"BUFF";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> BuffError {
    BuffError::Format(msg.into())
}

/// Serialize tensors. Values are narrowed to `f32`.
pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(format_err("bad magic, not a BUFF file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| format_err("dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(format!("tensor {name}: element count overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err("size overflow"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(NamedTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

/// Load a container; a missing file is reported as a missing artifact.
pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = read_required(path)?;
    decode_tensors(&bytes).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    save_tensors(path, params.tensors())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let mut params = NetworkParams::new();
    for t in load_tensors(path)? {
        params.push(t.name, t.shape, t.values)?;
    }
    Ok(params)
}

/// Store grids as rank-2 tensors named `{prefix}/{index:04}`.
pub fn save_grids(path: &Path, prefix: &str, grids: &[ImageGrid]) -> Result<()> {
    let tensors: Vec<NamedTensor> = grids
        .iter()
        .enumerate()
        .map(|(i, g)| NamedTensor {
            name: format!("{prefix}/{i:04}"),
            shape: vec![g.height(), g.width()],
            values: g.as_slice().to_vec(),
        })
        .collect();
    save_tensors(path, &tensors)
}

pub fn load_grids(path: &Path, prefix: &str) -> Result<Vec<ImageGrid>> {
    load_tensors(path)?
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let expected = format!("{prefix}/{i:04}");
            if t.name != expected || t.shape.len() != 2 {
                return Err(format_err(format!(
                    "{}: expected rank-2 tensor {expected}, found {} with shape {:?}",
                    path.display(),
                    t.name,
                    t.shape
                )));
            }
            ImageGrid::new(t.shape[0], t.shape[1], t.values)
        })
        .collect()
}

fn read_required(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BuffError::MissingArtifact {
            path: path.to_path_buf(),
            reason: "file does not exist".into(),
        },
        _ => e.into(),
    })
}

const PGM_MAX: f64 = 65535.0;

/// Binary 16-bit PGM; values are clamped to [0, 1] and quantized.
pub fn encode_pgm(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.as_slice() {
        let q = (v.clamp(0.0, 1.0) * PGM_MAX).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(format!("not a binary PGM (magic {})", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad PGM header field {s}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(format!("unsupported PGM maxval {maxval}")));
    }
    let bpp = if maxval > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height * bpp {
        return Err(format_err(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            width * height * bpp
        )));
    }
    let data = raster
        .chunks_exact(bpp)
        .map(|c| {
            let q = if bpp == 2 { u16::from_be_bytes([c[0], c[1]]) } else { c[0] as u16 };
            q as f64 / maxval as f64
        })
        .collect();
    ImageGrid::new(height, width, data)
}

pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    decode_pgm(&read_required(path)?)
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ause: f64,
}

pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("image_id,psnr_db,ssim,ause\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.image_id, r.psnr_db, r.ssim, r.ause));
    }
    s
}
