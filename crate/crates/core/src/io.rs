//! File formats: LDR rasters, exposure lists, CRF tables, Radiance RGBE,
//! raw float dumps and homography sidecars.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use image::codecs::hdr::HdrEncoder;
use image::{ColorType, DynamicImage, ImageReader, Rgb};

use crate::align::Homography;
use crate::error::{Error, Result};
use crate::radiance::{CrfTable, RgbImage};

/// Reads an 8- or 16-bit PNG/TIFF into `[0, 1]` by dividing by the bit-depth maximum.
pub fn read_ldr(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    dynamic_to_rgb(path, img)
}

fn dynamic_to_rgb(path: &Path, img: DynamicImage) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::data(
                path,
                format!("unsupported sample format {other:?}; expected 8- or 16-bit integer"),
            ))
        }
    };
    RgbImage::from_vec(w, h, data)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes an 8-bit RGB PNG (samples clamped to `[0, 1]`).
pub fn write_png8(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| quantize(v, 255.0) as u8)
        .collect();
    image::save_buffer(
        path,
        &buf,
        img.width() as u32,
        img.height() as u32,
        ColorType::Rgb8,
    )?;
    Ok(())
}

/// Writes a 16-bit RGB image; the format follows the extension (PNG or TIFF).
pub fn write_ldr16(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| quantize(v, 65535.0) as u16)
        .collect();
    let out =
        image::ImageBuffer::<Rgb<u16>, _>::from_raw(img.width() as u32, img.height() as u32, buf)
            .expect("buffer matches dimensions");
    out.save(path)?;
    Ok(())
}

fn numeric_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t.to_string()));
    }
    Ok(out)
}

/// One exposure bias (stops) per non-empty line, in frame order.
pub fn read_exposures(path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in numeric_lines(path)? {
        // some datasets put several values on one line
        for tok in line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
        {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::data(path, format!("line {n}: '{tok}' is not a number")))?;
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::data(path, "no exposure values"));
    }
    Ok(out)
}

pub fn write_exposures(path: &Path, biases: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for b in biases {
        writeln!(w, "{b}")?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse CRF as CSV. Three columns give R,G,B irradiance at evenly spaced
/// intensities; six columns give `(intensity, irradiance)` pairs per channel.
/// A non-numeric first line is treated as a header.
pub fn read_crf_csv(path: &Path) -> Result<CrfTable> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, (n, line)) in numeric_lines(path)?.into_iter().enumerate() {
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if idx == 0 => continue,
            Err(_) => return Err(Error::data(path, format!("line {n}: malformed number"))),
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::data(path, "rows have differing column counts"));
    }
    match cols {
        3 => {
            let n = rows.len();
            if n < 2 {
                return Err(Error::Calibration("CRF table needs at least 2 rows".into()));
            }
            let ch = |c: usize| -> Vec<(f64, f64)> {
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| (i as f64 / (n - 1) as f64, r[c]))
                    .collect()
            };
            CrfTable::new([ch(0), ch(1), ch(2)])
        }
        6 => {
            let ch = |c: usize| -> Vec<(f64, f64)> {
                rows.iter().map(|r| (r[2 * c], r[2 * c + 1])).collect()
            };
            CrfTable::new([ch(0), ch(1), ch(2)])
        }
        _ => Err(Error::data(
            path,
            format!("expected 3 or 6 columns, found {cols}"),
        )),
    }
}

/// Reads a Radiance RGBE file into linear RGB.
pub fn read_hdr(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .to_rgb32f()
        .into_raw()
        .into_iter()
        .map(f64::from)
        .collect();
    RgbImage::from_vec(w, h, data)
}

/// Writes a Radiance RGBE file with run-length-encoded scanlines.
pub fn write_hdr(path: &Path, img: &RgbImage) -> Result<()> {
    let pixels: Vec<Rgb<f32>> = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            Rgb([
                p[0].max(0.0) as f32,
                p[1].max(0.0) as f32,
                p[2].max(0.0) as f32,
            ])
        })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    HdrEncoder::new(&mut w).encode(&pixels, img.width(), img.height())?;
    w.flush()?;
    Ok(())
}

/// Headerless little-endian float32 samples in row-major RGB order.
pub fn write_raw_f32(path: &Path, img: &RgbImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in img.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Precomputed homographies, nine numbers (row-major) per line, one per frame.
pub fn read_homographies(path: &Path) -> Result<Vec<Homography>> {
    let mut out = Vec::new();
    for (n, line) in numeric_lines(path)? {
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(path, format!("line {n}: malformed number")))?;
        let m: [f64; 9] = vals.try_into().map_err(|v: Vec<f64>| {
            Error::data(
                path,
                format!("line {n}: expected 9 numbers, found {}", v.len()),
            )
        })?;
        out.push(
            Homography::from_row_major(m)
                .map_err(|e| Error::data(path, format!("line {n}: {e}")))?,
        );
    }
    Ok(out)
}

pub fn write_homographies(path: &Path, hs: &[Homography]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in hs {
        let row: Vec<String> = h.row_major().iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |r, c, ch| {
            ((r * w + c) * 3 + ch) as f64 / (w * h * 3) as f64
        })
    }

    #[test]
    fn png16_round_trip_is_exact_on_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(7, 5, |r, c, ch| {
            ((r * 31 + c * 7 + ch * 1000) % 65536) as f64 / 65535.0
        });
        for name in ["a.png", "a.tif"] {
            let p = dir.path().join(name);
            write_ldr16(&p, &img).unwrap();
            let back = read_ldr(&p).unwrap();
            assert_eq!(back, img, "{name}");
        }
    }

    #[test]
    fn png8_divides_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = RgbImage::from_fn(4, 3, |r, c, ch| ((r * 4 + c) * 3 + ch) as f64 / 255.0);
        write_png8(&p, &img).unwrap();
        let back = read_ldr(&p).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hdr_round_trip_within_rgbe_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.hdr");
        let img = ramp(40, 6).map(|v| v * 3.0 + 1e-3);
        write_hdr(&p, &img).unwrap();
        let back = read_hdr(&p).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (pa, pb) in back.data().chunks(3).zip(img.data().chunks(3)) {
            // 8-bit mantissas share the exponent of the largest component
            let max = pb.iter().cloned().fold(0.0, f64::max);
            for (a, b) in pa.iter().zip(pb) {
                assert!((a - b).abs() <= max / 128.0, "{a} vs {b}");
            }
        }
        // run-length coding shrinks a constant image well below 4 bytes/pixel
        let flat = RgbImage::filled(256, 64, 0.5);
        write_hdr(&p, &flat).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() < 256 * 64);
    }

    #[test]
    fn exposures_and_crf_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exposures.txt");
        std::fs::write(&p, "-2.0\n\n0\n+2.0\n").unwrap();
        assert_eq!(read_exposures(&p).unwrap(), vec![-2.0, 0.0, 2.0]);
        std::fs::write(&p, "1\nx\n").unwrap();
        assert!(matches!(read_exposures(&p), Err(Error::Data { .. })));

        let c = dir.path().join("crf.csv");
        let mut text = String::from("r,g,b\n");
        for i in 0..256 {
            let s = i as f64 / 255.0;
            text += &format!("{},{},{}\n", s * s, s * s, s * s);
        }
        std::fs::write(&c, text).unwrap();
        let crf = read_crf_csv(&c).unwrap();
        assert!((crf.apply(1, 0.5) - 0.25).abs() < 1e-5);

        std::fs::write(&c, "0,0,0,0,0,0\n0.5,0.2,0.5,0.2,0.5,0.2\n1,1,1,1,1,1\n").unwrap();
        let crf = read_crf_csv(&c).unwrap();
        assert!((crf.apply(0, 0.25) - 0.1).abs() < 1e-12);

        std::fs::write(&c, "0,0,0\n0.6,0.5,0.5\n1,0.4,1\n").unwrap();
        assert!(matches!(read_crf_csv(&c), Err(Error::Calibration(_))));
    }

    #[test]
    fn homography_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.txt");
        let hs = vec![
            Homography::identity(),
            Homography::from_row_major([1.01, 0.02, 3.5, -0.01, 0.99, -2.25, 1e-5, -2e-5, 1.0])
                .unwrap(),
        ];
        write_homographies(&p, &hs).unwrap();
        assert_eq!(read_homographies(&p).unwrap(), hs);
        std::fs::write(&p, "1 0 0 0 1 0 0 0\n").unwrap();
        assert!(read_homographies(&p).is_err());
    }

    #[test]
    fn raw_dump_has_four_bytes_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let img = ramp(5, 3);
        write_raw_f32(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 5 * 3 * 3 * 4);
        let v = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        assert_eq!(v, img.data()[1] as f32);
    }
}
