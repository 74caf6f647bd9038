use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels, values as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Writes a single-channel little-endian PFM (`Pf`, scale `-1.0`). PFM
/// stores the bottom row first.
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape("write_pfm", &[height, width], &[data.len()]));
    }
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in data.chunks(width).rev() {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a `Pf` (gray) or `PF` (RGB) file of either endianness, returning
/// rows top to bottom.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let mut pos = 0;
    let channels = match header_token(&bytes, &mut pos).as_deref() {
        Some("Pf") => 1,
        Some("PF") => 3,
        _ => return Err(bad("not a PFM file")),
    };
    let mut num = |what: &str| -> Result<String> { header_token(&bytes, &mut pos).ok_or_else(|| bad(what)) };
    let width: usize = num("missing width")?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = num("missing height")?.parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = num("missing scale")?.parse().map_err(|_| bad("bad scale"))?;
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let n = width * height * channels;
    let payload = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
    let little = scale < 0.0;
    let mut data = vec![0.0f32; n];
    let row_len = width * channels;
    for (r, row) in payload.chunks(4 * row_len).enumerate() {
        let dst = height - 1 - r;
        for (i, b) in row.chunks(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            data[dst * row_len + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

fn encoder<'a>(
    path: &Path,
    file: &'a mut BufWriter<File>,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<png::Writer<&'a mut BufWriter<File>>> {
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut file = BufWriter::new(file);
    let mut w = encoder(path, &mut file, width, height, color, depth)?;
    w.write_image_data(bytes).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    file.flush().map_err(|e| Error::io(path, e))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channel-planar `[3, H, W]` values in `[0, 1]` as 8-bit RGB.
pub fn write_png_rgb8(path: &Path, width: usize, height: usize, planar: &[f32]) -> Result<()> {
    let n = width * height;
    if planar.len() != 3 * n {
        return Err(Error::shape("write_png_rgb8", &[3, height, width], &[planar.len()]));
    }
    let bytes: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |c| to_u8(planar[c * n + i]))).collect();
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Values in `[0, 1]` as 8-bit gray.
pub fn write_png_gray8(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape("write_png_gray8", &[height, width], &[data.len()]));
    }
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

/// Values in `[0, 1]` as 16-bit gray.
pub fn write_png_gray16(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape("write_png_gray16", &[height, width], &[data.len()]));
    }
    let bytes: Vec<u8> = data
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// Reads an 8- or 16-bit gray, gray-alpha, RGB or RGBA PNG as values in
/// `[0, 1]`, dropping alpha.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (color, depth) = reader.output_color_type();
    let samples = color.samples();
    let keep = match color {
        png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgba => 3,
        _ => samples,
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let value = |i: usize| -> f32 {
        match depth {
            png::BitDepth::Sixteen => u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f32 / 65535.0,
            _ => bytes[i] as f32 / 255.0,
        }
    };
    let mut data = Vec::with_capacity(w * h * keep);
    for p in 0..w * h {
        for c in 0..keep {
            data.push(value(p * samples + c));
        }
    }
    Ok(Image {
        width: w,
        height: h,
        channels: keep,
        data,
    })
}

/// Near-to-far color ramp for inspection images: `t` in `[0, 1]` to RGB.
pub fn colormap(t: f32) -> [f32; 3] {
    const ANCHORS: [[f32; 3]; 5] = [
        [0.99, 0.91, 0.15],
        [0.35, 0.78, 0.39],
        [0.13, 0.57, 0.55],
        [0.23, 0.32, 0.55],
        [0.27, 0.00, 0.33],
    ];
    let x = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f32;
    let i = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - i as f32;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 + 1.0).collect();
        write_pfm(&path, 4, 3, &data).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (4, 3, 1));
        assert_eq!(img.data, data);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // Bottom row first.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, data[8]);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = dir.path().join("g.png");
        let vals = [0.0, 0.25, 0.5, 1.0];
        write_png_gray16(&g, 2, 2, &vals).unwrap();
        let img = read_png(&g).unwrap();
        for (a, b) in img.data.iter().zip(vals) {
            assert!((a - b).abs() < 1e-4);
        }
        let c = dir.path().join("c.png");
        let planar = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        write_png_rgb8(&c, 2, 2, &planar).unwrap();
        let img = read_png(&c).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(&img.data[..3], &[1.0, 0.0, 0.0]);
    }
}
