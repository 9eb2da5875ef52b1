//! On-disk formats: 16-bit depth PNGs with TOML sidecars, split manifests,
//! galleries and ASCII PLY point clouds.
//!
//! Text formats are written with a fixed field order so that files diff
//! cleanly and hash identically across runs.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BoundingBox, DepthFrame, Gallery, GalleryEntry, IdentityId, PointCloud, SplitManifest,
};

/// Metadata stored next to every depth PNG (`frame.png` -> `frame.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub sequence_id: String,
    pub frame_index: u64,
    /// Identity of the animal in a labeled crop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityId>,
    /// Placement of a crop within its source frame.
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("toml")
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Decodes the 16-bit grayscale pixels of a PNG without touching the sidecar.
pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(png_err)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(Error::BitDepth {
            path: path.to_owned(),
            found: format!("{color:?} at {depth:?} bits"),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png {
        path: path.to_owned(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect::<Vec<_>>();
    Ok((w, h, data))
}

pub fn write_png16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let enc_err = |e: png::EncodingError| Error::Png {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    let bytes: Vec<u8> = data.iter().flat_map(|d| d.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn read_frame_meta(png: &Path) -> Result<FrameMeta> {
    let side = sidecar_path(png);
    if !side.exists() {
        return Err(Error::MissingMetadata(side));
    }
    let text = read_text(&side)?;
    toml::from_str(&text).map_err(|e| Error::parse(&side, e))
}

pub fn write_frame_meta(png: &Path, meta: &FrameMeta) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| Error::parse(png, e))?;
    write_text(&sidecar_path(png), &text)
}

/// Reads a depth PNG and its sidecar. Pixel values are returned bit-exactly.
pub fn read_depth_frame(path: &Path) -> Result<DepthFrame> {
    read_depth_crop(path).map(|(frame, _)| frame)
}

/// Like [`read_depth_frame`], also returning the full sidecar (identity, crop box).
pub fn read_depth_crop(path: &Path) -> Result<(DepthFrame, FrameMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let (w, h, data) = read_png16(path)?;
    let meta = read_frame_meta(path)?;
    let frame = DepthFrame::new(w, h, data, meta.sequence_id.clone(), meta.frame_index)?;
    Ok((frame, meta))
}

pub fn write_depth_frame(frame: &DepthFrame, path: &Path) -> Result<()> {
    write_depth_crop(frame, None, None, path)
}

pub fn write_depth_crop(
    frame: &DepthFrame,
    identity: Option<IdentityId>,
    bbox: Option<BoundingBox>,
    path: &Path,
) -> Result<()> {
    write_png16(path, frame.width(), frame.height(), frame.data())?;
    write_frame_meta(
        path,
        &FrameMeta {
            sequence_id: frame.sequence_id.clone(),
            frame_index: frame.frame_index,
            identity,
            bbox,
        },
    )
}

pub fn manifest_to_string(manifest: &SplitManifest) -> Result<String> {
    toml::to_string(manifest).map_err(|e| Error::Invariant(e.to_string()))
}

pub fn write_split_manifest(manifest: &SplitManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    write_text(path, &manifest_to_string(manifest)?)
}

/// Reads a manifest and rejects it if any of its invariants do not hold.
pub fn read_split_manifest(path: &Path) -> Result<SplitManifest> {
    let text = read_text(path)?;
    let manifest: SplitManifest = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Nine significant digits, in a form TOML parses as a float.
pub(crate) fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    format!("{x:.8e}")
}

pub fn gallery_to_string(gallery: &Gallery) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "k = {}", gallery.k);
    let _ = writeln!(out, "distance = \"euclidean\"");
    let _ = writeln!(out, "dim = {}", gallery.dim());
    for e in &gallery.entries {
        let _ = writeln!(out, "\n[[entries]]");
        let _ = writeln!(out, "identity = {}", e.identity);
        if let Some(id) = &e.sample_id {
            let _ = writeln!(out, "sample = {}", toml::Value::String(id.clone()));
        }
        let values: Vec<String> = e.embedding.iter().map(|&x| fmt_sig9(x)).collect();
        let _ = writeln!(out, "embedding = [{}]", values.join(", "));
    }
    out
}

#[derive(Deserialize)]
struct GalleryFile {
    k: usize,
    distance: String,
    #[serde(default)]
    entries: Vec<GalleryFileEntry>,
}

#[derive(Deserialize)]
struct GalleryFileEntry {
    identity: IdentityId,
    sample: Option<String>,
    embedding: Vec<f64>,
}

pub fn write_gallery(gallery: &Gallery, path: &Path) -> Result<()> {
    gallery.validate()?;
    write_text(path, &gallery_to_string(gallery))
}

pub fn read_gallery(path: &Path) -> Result<Gallery> {
    let text = read_text(path)?;
    let file: GalleryFile = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if file.distance != "euclidean" {
        return Err(Error::parse(path, format!("unsupported distance `{}`", file.distance)));
    }
    let entries = file
        .entries
        .into_iter()
        .map(|e| GalleryEntry {
            embedding: e.embedding,
            identity: e.identity,
            sample_id: e.sample,
        })
        .collect();
    Gallery::new(entries, file.k)
}

/// Writes an ASCII PLY. With `colors`, each vertex also gets an RGB triple.
pub fn write_ply(cloud: &PointCloud, colors: Option<&[[u8; 3]]>, path: &Path) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} colors for {} points",
                c.len(),
                cloud.len()
            )));
        }
    }
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "comment sequence_id {}", cloud.sequence_id)?;
        writeln!(w, "comment frame_index {}", cloud.frame_index)?;
        if let Some(label) = cloud.label {
            writeln!(w, "comment label {label}")?;
        }
        writeln!(w, "element vertex {}", cloud.len())?;
        for axis in ["x", "y", "z"] {
            writeln!(w, "property double {axis}")?;
        }
        if colors.is_some() {
            for ch in ["red", "green", "blue"] {
                writeln!(w, "property uchar {ch}")?;
            }
        }
        writeln!(w, "end_header")?;
        for (i, p) in cloud.points.iter().enumerate() {
            write!(w, "{} {} {}", p[0], p[1], p[2])?;
            if let Some(c) = colors {
                write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads the x, y, z properties of an ASCII PLY written by [`write_ply`]
/// (or any ASCII PLY whose first three vertex properties are x, y, z).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, "unexpected end of file"))?
            .map_err(|e| Error::io(path, e))
    };
    if next()?.trim() != "ply" {
        return Err(Error::parse(path, "missing `ply` magic"));
    }
    let mut cloud = PointCloud::new(Vec::new());
    let mut vertices = None;
    loop {
        let line = next()?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("format"), Some(fmt)) if fmt != "ascii" => {
                return Err(Error::parse(path, format!("unsupported PLY format `{fmt}`")));
            }
            (Some("comment"), Some("sequence_id")) => {
                cloud.sequence_id = parts.collect::<Vec<_>>().join(" ");
            }
            (Some("comment"), Some("frame_index")) => {
                cloud.frame_index = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(path, "bad frame_index comment"))?;
            }
            (Some("comment"), Some("label")) => {
                cloud.label = parts.next().and_then(|s| s.parse().ok());
            }
            (Some("element"), Some("vertex")) => {
                vertices = parts.next().and_then(|s| s.parse::<usize>().ok());
            }
            (Some("end_header"), _) => break,
            _ => {}
        }
    }
    let count = vertices.ok_or_else(|| Error::parse(path, "missing vertex element"))?;
    cloud.points.reserve(count);
    for i in 0..count {
        let line = next()?;
        let mut p = [0.0; 3];
        let mut vals = line.split_whitespace();
        for c in p.iter_mut() {
            *c = vals
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(path, format!("bad vertex {i}")))?;
        }
        cloud.points.push(p);
    }
    cloud.validate()?;
    Ok(cloud)
}
