//! Netpbm (PGM `P5`, PPM `P6`) and PFM (`Pf`) image files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse a netpbm header; returns (magic, width, height, maxval, payload offset).
fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Parse("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    i += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad header field {s:?}")))
    };
    Ok((
        fields[0].clone(),
        num(&fields[1])?,
        num(&fields[2])?,
        num(&fields[3])?,
        i,
    ))
}

/// Write channel 0 of batch item 0 as an 8-bit `P5` file (values in [0, 1]).
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let [_, _, h, w] = t.shape().0;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data()[..h * w].iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Write a 3-channel image as an 8-bit `P6` file.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let [_, c, h, w] = t.shape().0;
    if c != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM needs 3 channels, got {c}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(t.data()[ch * plane + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a `P5` or `P6` file as a `1×3×H×W` tensor in [0, 1]; grayscale is
/// replicated to three channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, off) = parse_header(&bytes)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Parse(format!("unsupported image format {m}"))),
    };
    let plane = w * h;
    let payload = bytes
        .get(off..off + plane * channels)
        .ok_or_else(|| Error::Parse("truncated image payload".into()))?;
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            let src = if channels == 1 { i } else { i * 3 + ch };
            data[ch * plane + i] = payload[src] as f32 * scale;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Write channel 0 of batch item 0 as little-endian grayscale PFM
/// (scale field `-1.0`, rows stored bottom to top).
pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    let [_, _, h, w] = t.shape().0;
    let mut f = fs::File::create(path)?;
    write!(f, "Pf\n{w} {h}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(4 * w * h);
    for y in (0..h).rev() {
        for &v in &t.data()[y * w..(y + 1) * w] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Read a grayscale PFM as `1×1×H×W`.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut lines = Vec::new();
    let mut i = 0;
    while lines.len() < 3 {
        let start = i;
        while i < bytes.len() && bytes[i] != b'\n' {
            i += 1;
        }
        if i >= bytes.len() {
            return Err(Error::Parse("truncated PFM header".into()));
        }
        lines.push(String::from_utf8_lossy(&bytes[start..i]).trim().to_string());
        i += 1;
    }
    if lines[0] != "Pf" {
        return Err(Error::Parse(format!(
            "expected grayscale PFM, got {:?}",
            lines[0]
        )));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad PFM size {s:?}")))
        })
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::Parse("PFM size needs two fields".into()));
    };
    let scale: f32 = lines[2]
        .parse()
        .map_err(|_| Error::Parse(format!("bad PFM scale {:?}", lines[2])))?;
    let little = scale < 0.0;
    let payload = bytes
        .get(i..i + 4 * w * h)
        .ok_or_else(|| Error::Parse("truncated PFM payload".into()))?;
    let mut data = vec![0f32; w * h];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (k / w, k % w);
        data[(h - 1 - row) * w + col] = v;
    }
    Tensor::from_vec([1, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bit_identical() {
        let dir = tempfile_dir();
        let data: Vec<f32> = (0..12)
            .map(|i| (i as f32 * 0.37).sin() * 1e3 + f32::EPSILON)
            .collect();
        let t = Tensor::from_vec([1, 1, 3, 4], data).unwrap();
        let p = dir.join("d.pfm");
        write_pfm(&p, &t).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.data(), t.data());
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
    }

    #[test]
    fn ppm_and_pgm_round_trip() {
        let dir = tempfile_dir();
        let data: Vec<f32> = (0..24).map(|i| i as f32 / 255.0).collect();
        let t = Tensor::from_vec([1, 3, 2, 4], data).unwrap();
        let p = dir.join("c.ppm");
        write_ppm(&p, &t).unwrap();
        assert!(read_image(&p).unwrap().max_abs_diff(&t) < 1e-6);

        let g = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let p = dir.join("g.pgm");
        write_pgm(&p, &g).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape().0, [1, 3, 2, 2]);
        assert_eq!(back.at(0, 2, 1, 0), 1.0);
        assert!((back.at(0, 0, 0, 1) - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile_dir();
        let p = dir.join("bad.pgm");
        fs::write(&p, b"P7\n1 1\n255\n\0").unwrap();
        assert!(read_image(&p).is_err());
        fs::write(&p, b"P5\n4 4\n255\n\0\0").unwrap();
        assert!(read_image(&p).is_err());
        fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
    }

    fn tempfile_dir() -> std::path::PathBuf {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static N: AtomicUsize = AtomicUsize::new(0);
        let d = std::env::temp_dir().join(format!(
            "depthkit-imageio-{}-{}",
            std::process::id(),
            N.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&d).unwrap();
        d
    }
}
