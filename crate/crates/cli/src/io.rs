//! Image files, raw tensor files (RTF1) and parameter bundles (RTFZ).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use texdiff_core::numeric::{ConvParams, Shape, Tensor};
use texdiff_core::{Error, Result};

pub const RTF_MAGIC: &[u8; 8] = b"TEXDIFF\0";
pub const RTF_TAG: &[u8; 4] = b"RTF1";
pub const RTF_VERSION: u32 = 1;
pub const BUNDLE_TAG: &[u8; 4] = b"RTFZ";

fn file_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::File {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Rgb8,
    Depth8,
    Depth16,
}

impl std::str::FromStr for ImageKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb8" => Ok(ImageKind::Rgb8),
            "depth8" => Ok(ImageKind::Depth8),
            "depth16" => Ok(ImageKind::Depth16),
            other => Err(format!(
                "unknown image kind `{other}` (rgb8, depth8, depth16)"
            )),
        }
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| file_err(path, e))?
        .with_guessed_format()
        .map_err(|e| file_err(path, e))?
        .decode()
        .map_err(|e| file_err(path, e))
}

/// Reads an image: `rgb8` gives `3×H×W` in `[0,1]`, `depth8`/`depth16` give `1×H×W`
/// scaled by `1/255` or `1/65535`.
pub fn load_image(path: &Path, kind: ImageKind) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match (kind, img) {
        (ImageKind::Rgb8, DynamicImage::ImageRgb8(buf)) => Ok(rgb_tensor(&buf, h, w)),
        (ImageKind::Rgb8, DynamicImage::ImageRgba8(buf)) => {
            Ok(rgb_tensor(&DynamicImage::ImageRgba8(buf).to_rgb8(), h, w))
        }
        (ImageKind::Depth8, DynamicImage::ImageLuma8(buf)) => Ok(gray_tensor(
            buf.pixels().map(|p| p.0[0] as f64 / 255.0),
            h,
            w,
        )),
        (ImageKind::Depth16, DynamicImage::ImageLuma16(buf)) => Ok(gray_tensor(
            buf.pixels().map(|p| p.0[0] as f64 / 65535.0),
            h,
            w,
        )),
        (kind, img) => Err(file_err(
            path,
            format!("unsupported pixel format {:?} for {kind:?}", img.color()),
        )),
    }
}

/// Depth from an 8- or 16-bit grayscale file, whichever it holds.
pub fn load_depth(path: &Path) -> Result<Tensor> {
    match open(path)? {
        DynamicImage::ImageLuma16(_) => load_image(path, ImageKind::Depth16),
        _ => load_image(path, ImageKind::Depth8),
    }
}

/// Binary mask from an 8-bit grayscale file: values above 127 are foreground.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(load_image(path, ImageKind::Depth8)?.map(|v| (v > 0.5) as u8 as f64))
}

/// Raw 8-bit gray levels.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    match open(path)? {
        DynamicImage::ImageLuma8(buf) => Ok((
            buf.height() as usize,
            buf.width() as usize,
            buf.pixels().map(|p| p.0[0] as u32).collect(),
        )),
        img => Err(file_err(
            path,
            format!("label maps must be 8-bit grayscale, got {:?}", img.color()),
        )),
    }
}

fn rgb_tensor(buf: &RgbImage, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(3, h, w), |c, y, x| {
        buf.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

fn gray_tensor(vals: impl Iterator<Item = f64>, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(Shape::new(1, h, w), vals.collect()).expect("pixel count matches dimensions")
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes `t` (values clamped to `[0,1]`) as PNG, or as PGM when the extension is `.pgm`.
pub fn save_image(path: &Path, t: &Tensor, kind: ImageKind) -> Result<()> {
    let (h, w) = (t.height() as u32, t.width() as u32);
    let expect = if kind == ImageKind::Rgb8 { 3 } else { 1 };
    if t.channels() != expect {
        return Err(file_err(
            path,
            format!(
                "{kind:?} needs {expect} channel(s), tensor is {}",
                t.shape()
            ),
        ));
    }
    let img = match kind {
        ImageKind::Rgb8 => DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            let px = |c| quantize(t.at(c, y as usize, x as usize), 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })),
        ImageKind::Depth8 => DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| {
            Luma([quantize(t.at(0, y as usize, x as usize), 255.0) as u8])
        })),
        ImageKind::Depth16 => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quantize(t.at(0, y as usize, x as usize), 65535.0) as u16])
        })),
    };
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    img.save_with_format(path, format)
        .map_err(|e| file_err(path, e))
}

/// Min-max normalizes each of the first three (or only) channels to 8 bits.
pub fn save_preview(path: &Path, t: &Tensor) -> Result<()> {
    let c = if t.channels() >= 3 { 3 } else { 1 };
    let mut out = t.slice_channels(0, c)?;
    for ch in 0..c {
        let (lo, hi) = out.channel_range(ch);
        let span = hi - lo;
        out.channel_mut(ch)
            .iter_mut()
            .for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    }
    save_image(
        path,
        &out,
        if c == 3 {
            ImageKind::Rgb8
        } else {
            ImageKind::Depth8
        },
    )
}

/// RTF1 bytes: 16-byte header (magic, tag, version), `u32` C, H, W, then `f32` values, all little-endian.
pub fn encode_rtf(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * t.len());
    out.extend_from_slice(RTF_MAGIC);
    out.extend_from_slice(RTF_TAG);
    out.extend_from_slice(&RTF_VERSION.to_le_bytes());
    for d in [t.channels(), t.height(), t.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format {
        format: "RTF1",
        msg: e.to_string(),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one RTF1 tensor from the front of `r`.
pub fn decode_rtf(r: &mut impl Read) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        format: "RTF1",
        msg,
    };
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|e| bad(e.to_string()))?;
    if &head[..8] != RTF_MAGIC || &head[8..] != RTF_TAG {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != RTF_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (c, h, w) = (
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
    );
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let mut raw = vec![0u8; 4 * n];
    r.read_exact(&mut raw)
        .map_err(|e| bad(format!("truncated data: {e}")))?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::from_vec(Shape::new(c, h, w), data)
}

pub fn write_rtf(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    fs::write(path, encode_rtf(t)).map_err(|e| file_err(path, e))
}

pub fn read_rtf(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    let mut cur = bytes.as_slice();
    let t = decode_rtf(&mut cur).map_err(|e| file_err(path, e))?;
    if !cur.is_empty() {
        return Err(file_err(
            path,
            format!("{} trailing bytes after tensor", cur.len()),
        ));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub name: String,
    pub shape: [usize; 3],
}

/// Named tensors stored together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub entries: Vec<(String, Tensor)>,
}

impl Bundle {
    /// One `<name>.weight` (`out·in × k × k`) and `<name>.bias` (`out × 1 × 1`) pair per conv.
    pub fn from_convs<'a>(convs: impl IntoIterator<Item = (String, &'a ConvParams)>) -> Self {
        let mut entries = Vec::new();
        for (name, p) in convs {
            let k = p.kernel();
            let w = Tensor::from_vec(
                Shape::new(p.out_channels() * p.in_channels(), k, k),
                p.weight.clone(),
            )
            .expect("weight length matches conv shape");
            let b = Tensor::from_vec(Shape::new(p.out_channels(), 1, 1), p.bias.clone())
                .expect("bias length matches conv shape");
            entries.push((format!("{name}.weight"), w));
            entries.push((format!("{name}.bias"), b));
        }
        Bundle { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every conv in `convs` from the matching entries; all must be present with equal shapes.
    pub fn apply<'a>(
        &self,
        convs: impl IntoIterator<Item = (String, &'a mut ConvParams)>,
    ) -> Result<()> {
        for (name, p) in convs {
            for (suffix, dst) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
                let key = format!("{name}.{suffix}");
                let t = self.get(&key).ok_or_else(|| Error::Format {
                    format: "RTFZ",
                    msg: format!("missing tensor `{key}`"),
                })?;
                if t.len() != dst.len() {
                    return Err(Error::Format {
                        format: "RTFZ",
                        msg: format!("`{key}` holds {} values, expected {}", t.len(), dst.len()),
                    });
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    /// `RTFZ`, `u32` version, `u64` manifest length, JSON manifest, then the RTF1 tensors in manifest order.
    pub fn encode(&self) -> Vec<u8> {
        let manifest: Vec<BundleEntry> = self
            .entries
            .iter()
            .map(|(name, t)| BundleEntry {
                name: name.clone(),
                shape: [t.channels(), t.height(), t.width()],
            })
            .collect();
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_TAG);
        out.extend_from_slice(&RTF_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.entries {
            out.extend_from_slice(&encode_rtf(t));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            format: "RTFZ",
            msg,
        };
        if bytes.len() < 16 || &bytes[..4] != BUNDLE_TAG {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != RTF_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Vec<BundleEntry> =
            serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let mut cur = &bytes[16 + len..];
        let mut entries = Vec::with_capacity(manifest.len());
        for e in manifest {
            let t = decode_rtf(&mut cur)?;
            if [t.channels(), t.height(), t.width()] != e.shape {
                return Err(bad(format!("`{}` shape differs from the manifest", e.name)));
            }
            entries.push((e.name, t));
        }
        if !cur.is_empty() {
            return Err(bad(format!("{} trailing bytes", cur.len())));
        }
        Ok(Bundle { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| file_err(path, e))?;
        f.write_all(&self.encode()).map_err(|e| file_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
        Bundle::decode(&bytes).map_err(|e| file_err(path, e))
    }

    /// `sha256:` hex digest of `blob <len>\0` followed by the encoded bundle.
    pub fn content_hash(&self) -> String {
        let bytes = self.encode();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
        format!("sha256:{}", hex::encode(h.finalize()))
    }
}
