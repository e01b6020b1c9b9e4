//! Image and depth-map file I/O.
//!
//! Grayscale PNG (8- and 16-bit) and plain PGM (P2/P5, maxval up to 65535)
//! for intensity images. Depth maps are stored as 16-bit PNG scaled by a
//! declared factor, 5000 counts per meter by default; zero counts mark
//! invalid pixels.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Default encoding scale for 16-bit depth PNGs, in counts per meter.
pub const DEPTH_PNG_SCALE: f64 = 5000.0;

/// Loads a grayscale image from PNG or PGM, inferring the format from the
/// extension. Color PNGs are converted to luma; intensities are normalized
/// to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    if !path.exists() {
        return Err(Error::MissingImageFile(path.to_path_buf()));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => load_pgm(path),
        Some("png") => load_png(path),
        other => Err(Error::UnsupportedFormat(format!(
            "{} (extension {:?})",
            path.display(),
            other
        ))),
    }
}

fn load_png(path: &Path) -> Result<ImageBuffer> {
    let img = ImageReader::open(path)?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        other => other
            .into_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    };
    ImageBuffer::from_data(w, h, data)
}

/// Saves an 8-bit grayscale PNG.
pub fn save_png8(path: &Path, img: &ImageBuffer) -> Result<()> {
    let buf: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .expect("buffer sized from image")
        .save(path)?;
    Ok(())
}

/// Saves a 16-bit grayscale PNG.
pub fn save_png16(path: &Path, img: &ImageBuffer) -> Result<()> {
    let buf: Vec<u16> = img.data().iter().map(|v| (v * 65535.0).round() as u16).collect();
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        img.width() as u32,
        img.height() as u32,
        buf,
    )
    .expect("buffer sized from image")
    .save(path)?;
    Ok(())
}

/// Saves a depth map as 16-bit PNG, `counts = depth * scale`.
///
/// Invalid pixels and depths that would exceed the 16-bit range are written
/// as zero counts.
pub fn save_depth_png(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    let mut buf = vec![0u16; depth.width() * depth.height()];
    for (i, (v, ok)) in depth.values().iter().zip(depth.validity()).enumerate() {
        if *ok {
            let counts = (v * scale).round();
            if counts >= 1.0 && counts <= 65535.0 {
                buf[i] = counts as u16;
            }
        }
    }
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        buf,
    )
    .expect("buffer sized from map")
    .save(path)?;
    Ok(())
}

/// Loads a 16-bit depth PNG written by [`save_depth_png`]; zero counts are
/// invalid pixels.
pub fn load_depth_png(path: &Path, scale: f64) -> Result<DepthMap> {
    if !path.exists() {
        return Err(Error::MissingImageFile(path.to_path_buf()));
    }
    let img = ImageReader::open(path)?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_luma16().into_raw();
    let mut values = vec![0.0; raw.len()];
    let mut valid = vec![false; raw.len()];
    for (i, counts) in raw.iter().enumerate() {
        if *counts > 0 {
            values[i] = *counts as f64 / scale;
            valid[i] = true;
        }
    }
    DepthMap::from_parts(w, h, values, valid)
}

/// Saves an 8-bit preview of a depth map where darker means deeper.
///
/// The map is normalized over its valid range; invalid pixels render white.
pub fn save_depth_preview_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, ok) in depth.values().iter().zip(depth.validity()) {
        if *ok {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let preview = ImageBuffer::from_fn(depth.width(), depth.height(), |x, y| match depth.get(x, y) {
        Some(d) => 1.0 - (d - lo) / span,
        None => 1.0,
    });
    save_png8(path, &preview)
}

/// Writes a plain PGM. `P5` (binary) or `P2` (ASCII); 16-bit values when
/// `maxval > 255`, big-endian per the format.
pub fn save_pgm(path: &Path, img: &ImageBuffer, binary: bool, maxval: u16) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let magic = if binary { "P5" } else { "P2" };
    writeln!(w, "{magic}")?;
    writeln!(w, "{} {}", img.width(), img.height())?;
    writeln!(w, "{maxval}")?;
    let quant = |v: f64| (v * maxval as f64).round() as u16;
    if binary {
        if maxval > 255 {
            for v in img.data() {
                w.write_all(&quant(*v).to_be_bytes())?;
            }
        } else {
            for v in img.data() {
                w.write_all(&[quant(*v) as u8])?;
            }
        }
    } else {
        for y in 0..img.height() {
            let row: Vec<String> = (0..img.width())
                .map(|x| quant(img.get(x, y)).to_string())
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

/// Reads a plain PGM (P2 or P5).
pub fn load_pgm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path)?;
    let parse_err = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    // Header tokens may be separated by arbitrary whitespace and comments.
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<(usize, usize)> {
        let mut i = pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        if i >= bytes.len() {
            return None;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        pos = i;
        Some((start, i))
    };

    let tok = |r: (usize, usize)| std::str::from_utf8(&bytes[r.0..r.1]).unwrap_or("");
    let magic_r = next_token(&bytes).ok_or_else(|| parse_err("missing magic"))?;
    let magic = tok(magic_r).to_string();
    if magic != "P2" && magic != "P5" {
        return Err(Error::UnsupportedFormat(format!("PGM magic {magic}")));
    }
    let width: usize = tok(next_token(&bytes).ok_or_else(|| parse_err("missing width"))?)
        .parse()
        .map_err(|_| parse_err("bad width"))?;
    let height: usize = tok(next_token(&bytes).ok_or_else(|| parse_err("missing height"))?)
        .parse()
        .map_err(|_| parse_err("bad height"))?;
    let maxval: u32 = tok(next_token(&bytes).ok_or_else(|| parse_err("missing maxval"))?)
        .parse()
        .map_err(|_| parse_err("bad maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err("maxval out of range"));
    }

    let n = width * height;
    let mut data = Vec::with_capacity(n);
    if magic == "P2" {
        for _ in 0..n {
            let r = next_token(&bytes).ok_or_else(|| parse_err("truncated P2 data"))?;
            let v: u32 = tok(r).parse().map_err(|_| parse_err("bad P2 sample"))?;
            data.push(v.min(maxval) as f64 / maxval as f64);
        }
    } else {
        // Exactly one whitespace byte separates the header from binary data.
        let start = pos + 1;
        if maxval > 255 {
            if bytes.len() < start + 2 * n {
                return Err(parse_err("truncated P5 data"));
            }
            for i in 0..n {
                let v = u16::from_be_bytes([bytes[start + 2 * i], bytes[start + 2 * i + 1]]);
                data.push((v as u32).min(maxval) as f64 / maxval as f64);
            }
        } else {
            if bytes.len() < start + n {
                return Err(parse_err("truncated P5 data"));
            }
            for i in 0..n {
                data.push((bytes[start + i] as u32).min(maxval) as f64 / maxval as f64);
            }
        }
    }
    ImageBuffer::from_data(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn gradient_img() -> ImageBuffer {
        ImageBuffer::from_fn(9, 5, |x, y| (x as f64 + y as f64) / 12.0)
    }

    #[test]
    fn png8_roundtrip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_img();
        save_png8(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png16_roundtrip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img16.png");
        let img = gradient_img();
        save_png16(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_binary_and_ascii_roundtrip() {
        let dir = tempdir().unwrap();
        let img = gradient_img();
        for (name, binary, maxval) in
            [("a.pgm", false, 255u16), ("b.pgm", true, 255), ("c.pgm", true, 65535)]
        {
            let path = dir.path().join(name);
            save_pgm(&path, &img, binary, maxval).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!((back.width(), back.height()), (9, 5));
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / maxval as f64 + 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn pgm_comments_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, "P2\n# a comment\n2 2\n# another\n255\n0 128\n255 64\n").unwrap();
        let img = load_pgm(&path).unwrap();
        assert_relative_eq!(img.get(1, 0), 128.0 / 255.0, epsilon = 1e-12);
        assert_relative_eq!(img.get(0, 1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn depth_png_roundtrip_and_invalid_pixels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let depth = DepthMap::from_parts(
            2,
            2,
            vec![1.0, 2.5, 0.0, 4.2],
            vec![true, true, false, true],
        )
        .unwrap();
        save_depth_png(&path, &depth, DEPTH_PNG_SCALE).unwrap();
        let back = load_depth_png(&path, DEPTH_PNG_SCALE).unwrap();
        assert!(back.get(0, 1).is_none());
        assert_relative_eq!(back.get(0, 0).unwrap(), 1.0, epsilon = 1e-4);
        assert_relative_eq!(back.get(1, 1).unwrap(), 4.2, epsilon = 1e-4);
    }

    #[test]
    fn missing_file_is_reported_with_path() {
        let err = load_image(Path::new("/nonexistent/z.png")).unwrap_err();
        assert!(matches!(err, Error::MissingImageFile(_)));
    }
}
