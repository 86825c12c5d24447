//! Bit-exact file formats: PFM depth maps, binary PLY point clouds,
//! probability-volume and grid-checkpoint binaries, 8-bit PNG images,
//! and JSON/JSON-lines helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::bounds::Aabb;
use crate::error::{Error, Result};
use crate::eval::PointCloud;
use crate::img::ImageBuffer;
use crate::mvs::{DepthHypotheses, HypothesisLayout, ProbabilityVolume};
use crate::sdf::VoxelSdfGrid;

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn corrupt_ckpt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_exact_f32(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

// ---------------------------------------------------------------------
// PFM (single-channel, f32 little-endian, scale -1.0, bottom-up rows)
// ---------------------------------------------------------------------

pub fn write_pfm(path: &Path, image: &ImageBuffer) -> Result<()> {
    assert_eq!(image.channels, 1, "PFM writer handles grayscale maps");
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", image.width, image.height)?;
    for y in (0..image.height).rev() {
        for x in 0..image.width {
            w.write_all(&(image.get(x, y, 0) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // Three whitespace-terminated tokens after the magic line.
    let mut tokens = Vec::new();
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    while tokens.len() < 4 {
        r.read_exact(&mut byte)?;
        header.push(byte[0]);
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(byte[0]);
        }
    }
    if tokens[0] != "Pf" {
        return Err(corrupt(path, format!("bad PFM magic '{}'", tokens[0])));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| corrupt(path, "bad width"))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| corrupt(path, "bad height"))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| corrupt(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(corrupt(path, "big-endian PFM not supported"));
    }
    let data = read_exact_f32(&mut r, width * height)?;
    let mut img = ImageBuffer::new(width, height, 1);
    for y in 0..height {
        let src_row = height - 1 - y;
        for x in 0..width {
            img.set(x, y, 0, data[src_row * width + x] as f64);
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------
// PLY (binary little-endian; x,y,z f32, optional r,g,b u8)
// ---------------------------------------------------------------------

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let with_color = cloud.colors.is_some();
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n",
        cloud.len()
    )?;
    if with_color {
        write!(
            w,
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        )?;
    }
    write!(w, "end_header\n")?;
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        if let Some(colors) = &cloud.colors {
            for c in colors[i] {
                w.write_all(&[(c.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    let mut byte = [0u8; 1];
    while !header.ends_with("end_header\n") {
        r.read_exact(&mut byte)
            .map_err(|_| corrupt(path, "truncated header"))?;
        header.push(byte[0] as char);
        if header.len() > 1 << 16 {
            return Err(corrupt(path, "header too large"));
        }
    }
    if !header.starts_with("ply\n") {
        return Err(corrupt(path, "bad PLY magic"));
    }
    if !header.contains("format binary_little_endian 1.0") {
        return Err(corrupt(path, "only binary little-endian PLY supported"));
    }
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt(path, "missing vertex count"))?;
    let with_color = header.contains("property uchar red");
    let mut points = Vec::with_capacity(n);
    let mut colors = if with_color {
        Some(Vec::with_capacity(n))
    } else {
        None
    };
    for _ in 0..n {
        let xyz = read_exact_f32(&mut r, 3).map_err(|_| corrupt(path, "truncated vertices"))?;
        points.push(Vector3::new(xyz[0] as f64, xyz[1] as f64, xyz[2] as f64));
        if let Some(cs) = &mut colors {
            let mut rgb = [0u8; 3];
            r.read_exact(&mut rgb)
                .map_err(|_| corrupt(path, "truncated colors"))?;
            cs.push([
                rgb[0] as f64 / 255.0,
                rgb[1] as f64 / 255.0,
                rgb[2] as f64 / 255.0,
            ]);
        }
    }
    Ok(PointCloud { points, colors })
}

// ---------------------------------------------------------------------
// Probability volume: magic "PVOL1", u32 width/height/D, f32 hypothesis
// list (D values for a shared list, width*height*D for per-pixel), then
// f32 probabilities pixel-major / hypothesis-minor. The layout is
// recovered from the file size.
// ---------------------------------------------------------------------

pub fn write_pvol(path: &Path, pv: &ProbabilityVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"PVOL1")?;
    for v in [pv.width as u32, pv.height as u32, pv.hypotheses.count as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let hyp_values: &[f64] = match &pv.hypotheses.layout {
        HypothesisLayout::Global(v) => v,
        HypothesisLayout::PerPixel(v) => v,
    };
    for &h in hyp_values {
        w.write_all(&(h as f32).to_le_bytes())?;
    }
    for &p in &pv.prob {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pvol(path: &Path) -> Result<ProbabilityVolume> {
    let len = std::fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "truncated magic"))?;
    if &magic != b"PVOL1" {
        return Err(corrupt(path, "bad magic"));
    }
    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    if width == 0 || height == 0 || count < 2 {
        return Err(corrupt(path, "degenerate dimensions"));
    }
    let pixels = width * height;
    let global_len = (17 + 4 * (count + pixels * count)) as u64;
    let perpixel_len = (17 + 4 * (2 * pixels * count)) as u64;
    let hyp_len = if len == global_len {
        count
    } else if len == perpixel_len {
        pixels * count
    } else {
        return Err(corrupt(path, format!("unexpected file size {len}")));
    };
    let hyps: Vec<f64> = read_exact_f32(&mut r, hyp_len)?
        .into_iter()
        .map(|v| v as f64)
        .collect();
    let prob: Vec<f64> = read_exact_f32(&mut r, pixels * count)?
        .into_iter()
        .map(|v| v as f64)
        .collect();
    let interval = if hyps.len() >= 2 {
        (hyps[count - 1] - hyps[0]) / (count - 1) as f64
    } else {
        0.0
    };
    let layout = if hyp_len == count {
        HypothesisLayout::Global(hyps)
    } else {
        HypothesisLayout::PerPixel(hyps)
    };
    // Unsupervised pixels were written as exactly uniform rows.
    let uniform = 1.0 / count as f64;
    let uniform_f32 = (uniform as f32) as f64;
    let unsupervised = (0..pixels)
        .map(|px| {
            prob[px * count..(px + 1) * count]
                .iter()
                .all(|&p| p == uniform_f32)
        })
        .collect();
    Ok(ProbabilityVolume {
        width,
        height,
        hypotheses: DepthHypotheses {
            width,
            height,
            count,
            interval,
            layout,
        },
        prob,
        unsupervised,
    })
}

// ---------------------------------------------------------------------
// Grid checkpoint: magic "SDFG1", u32 nx/ny/nz, f64 bounds (6), f64
// beta, f32 sdf values, f32 RGB values, x-major.
// ---------------------------------------------------------------------

pub fn write_sdfg(path: &Path, grid: &VoxelSdfGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"SDFG1")?;
    for v in [grid.nx as u32, grid.ny as u32, grid.nz as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let lo = grid.bounds.min_v();
    let hi = grid.bounds.max_v();
    for v in [lo.x, lo.y, lo.z, hi.x, hi.y, hi.z, grid.beta] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &s in &grid.sdf {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    for &c in &grid.color {
        w.write_all(&(c as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sdfg(path: &Path) -> Result<VoxelSdfGrid> {
    let len = std::fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt_ckpt(path, "truncated magic"))?;
    if &magic != b"SDFG1" {
        return Err(corrupt_ckpt(path, "bad magic"));
    }
    let nx = read_u32(&mut r)? as usize;
    let ny = read_u32(&mut r)? as usize;
    let nz = read_u32(&mut r)? as usize;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(corrupt_ckpt(path, "degenerate resolution"));
    }
    let n = nx * ny * nz;
    let expected = (5 + 12 + 56 + 4 * (n + 3 * n)) as u64;
    if len != expected {
        return Err(corrupt_ckpt(
            path,
            format!("file size {len}, expected {expected}"),
        ));
    }
    let mut b = [0.0; 6];
    for v in b.iter_mut() {
        *v = read_f64(&mut r)?;
    }
    let beta = read_f64(&mut r)?;
    if !(beta > 0.0) || b[3] <= b[0] || b[4] <= b[1] || b[5] <= b[2] {
        return Err(corrupt_ckpt(path, "invalid bounds or beta"));
    }
    let sdf = read_exact_f32(&mut r, n)?.into_iter().map(|v| v as f64).collect();
    let color = read_exact_f32(&mut r, 3 * n)?
        .into_iter()
        .map(|v| v as f64)
        .collect();
    Ok(VoxelSdfGrid {
        nx,
        ny,
        nz,
        bounds: Aabb {
            min: [b[0], b[1], b[2]],
            max: [b[3], b[4], b[5]],
        },
        sdf,
        color,
        beta,
    })
}

// ---------------------------------------------------------------------
// PNG (8-bit, values clamped then rounded)
// ---------------------------------------------------------------------

pub fn write_png(path: &Path, image: &ImageBuffer) -> Result<()> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match image.channels {
        1 => {
            let mut out = image::GrayImage::new(image.width as u32, image.height as u32);
            for y in 0..image.height {
                for x in 0..image.width {
                    out.put_pixel(x as u32, y as u32, image::Luma([to_u8(image.get(x, y, 0))]));
                }
            }
            out.save(path)?;
        }
        3 => {
            let mut out = image::RgbImage::new(image.width as u32, image.height as u32);
            for y in 0..image.height {
                for x in 0..image.width {
                    let p = image.pixel(x, y);
                    out.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
                    );
                }
            }
            out.save(path)?;
        }
        c => panic!("unsupported channel count {c} for PNG"),
    }
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageBuffer::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(x, y, c, p[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Write records as JSON lines, one object per line.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
