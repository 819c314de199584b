//! Minimal raster I/O: binary PPM (P6) for RGB, PFM (`Pf`) for float depth,
//! binary PGM (P5) for instance-id maps.
//!
//! All rasters in this crate are row-major with y down, matching the camera
//! convention. PFM rows are stored bottom-to-top on disk as the format
//! requires; readers and writers flip accordingly. Depth no-hit pixels are
//! `+inf`, id-map "no instance" is byte 0 (instance ids are stored as
//! `id + 1`, so at most 254 instances per map).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("{0}: bad header: {1}")]
    Header(String, String),
    #[error("{0}: truncated payload")]
    Truncated(String),
    #[error("instance id {0} does not fit an 8-bit id map")]
    IdOverflow(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB raster (`[0,1]` per channel, row-major) as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<(), ImgError> {
    assert_eq!(rgb.len(), width * height);
    let mut out = Vec::with_capacity(width * height * 3 + 32);
    write!(out, "P6\n{width} {height}\n255\n")?;
    for px in rgb {
        out.extend_from_slice(&[quantize(px[0]), quantize(px[1]), quantize(px[2])]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`]. Returns `(width, height, rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>), ImgError> {
    let name = path.display().to_string();
    let data = std::fs::read(path)?;
    let (width, height, maxval, offset) = parse_netpbm_header(&data, b"P6", &name)?;
    if maxval != 255 {
        return Err(ImgError::Header(name, format!("unsupported maxval {maxval}")));
    }
    let need = width * height * 3;
    let body = data.get(offset..offset + need).ok_or(ImgError::Truncated(name))?;
    let rgb = body
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok((width, height, rgb))
}

/// Write a float raster as grayscale PFM (little-endian, scale -1).
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), ImgError> {
    assert_eq!(values.len(), width * height);
    let mut out = Vec::with_capacity(width * height * 4 + 32);
    write!(out, "Pf\n{width} {height}\n-1.0\n")?;
    // PFM stores rows bottom-to-top.
    for y in (0..height).rev() {
        for x in 0..width {
            out.extend_from_slice(&(values[y * width + x] as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a grayscale little-endian PFM. Returns `(width, height, values)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>), ImgError> {
    let name = path.display().to_string();
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).to_string());
    }
    if fields.len() < 4 || fields[0] != "Pf" {
        return Err(ImgError::Header(name, "expected grayscale Pf".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let width: usize = fields[1]
        .parse()
        .map_err(|_| ImgError::Header(name.clone(), "bad width".into()))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| ImgError::Header(name.clone(), "bad height".into()))?;
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| ImgError::Header(name.clone(), "bad scale".into()))?;
    if scale >= 0.0 {
        return Err(ImgError::Header(name, "big-endian PFM not supported".into()));
    }
    let need = width * height * 4;
    let body = data.get(pos..pos + need).ok_or(ImgError::Truncated(name))?;
    let mut values = vec![0.0f64; width * height];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let y = height - 1 - i / width;
        let x = i % width;
        values[y * width + x] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    }
    Ok((width, height, values))
}

/// Write an instance-id map as binary PGM; `None` becomes 0, `Some(id)`
/// becomes `id + 1`.
pub fn write_id_map(
    path: &Path,
    width: usize,
    height: usize,
    ids: &[Option<u32>],
) -> Result<(), ImgError> {
    assert_eq!(ids.len(), width * height);
    let mut out = Vec::with_capacity(width * height + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    for id in ids {
        match id {
            None => out.push(0),
            Some(v) if *v < 255 => out.push((*v + 1) as u8),
            Some(v) => return Err(ImgError::IdOverflow(*v)),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read an id map written by [`write_id_map`].
pub fn read_id_map(path: &Path) -> Result<(usize, usize, Vec<Option<u32>>), ImgError> {
    let name = path.display().to_string();
    let data = std::fs::read(path)?;
    let (width, height, maxval, offset) = parse_netpbm_header(&data, b"P5", &name)?;
    if maxval != 255 {
        return Err(ImgError::Header(name, format!("unsupported maxval {maxval}")));
    }
    let body = data
        .get(offset..offset + width * height)
        .ok_or(ImgError::Truncated(name))?;
    let ids = body
        .iter()
        .map(|&b| if b == 0 { None } else { Some(b as u32 - 1) })
        .collect();
    Ok((width, height, ids))
}

fn parse_netpbm_header(
    data: &[u8],
    magic: &[u8],
    name: &str,
) -> Result<(usize, usize, usize, usize), ImgError> {
    if data.len() < 2 || &data[..2] != magic {
        return Err(ImgError::Header(name.into(), "wrong magic".into()));
    }
    let mut pos = 2;
    let mut nums = Vec::new();
    while nums.len() < 3 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(ImgError::Header(name.into(), "malformed size field".into()));
        }
        nums.push(
            String::from_utf8_lossy(&data[start..pos])
                .parse::<usize>()
                .map_err(|_| ImgError::Header(name.into(), "bad integer".into()))?,
        );
    }
    if nums.len() < 3 {
        return Err(ImgError::Header(name.into(), "incomplete header".into()));
    }
    // Single whitespace byte after maxval.
    Ok((nums[0], nums[1], nums[2], pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let rgb: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                let v = i as f64 / 11.0;
                [v, 1.0 - v, 0.25]
            })
            .collect();
        write_ppm(&path, 4, 3, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in rgb.iter().zip(&back) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn pfm_round_trip_exact_and_infinite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let vals = vec![0.5, 1.25, f64::INFINITY, 3.75, 0.0, 9.0];
        write_pfm(&path, 3, 2, &vals).unwrap();
        let (w, h, back) = read_pfm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in vals.iter().zip(&back) {
            if a.is_infinite() {
                assert!(b.is_infinite());
            } else {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn id_map_round_trip_and_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let ids = vec![None, Some(0), Some(7), Some(253)];
        write_id_map(&path, 2, 2, &ids).unwrap();
        let (_, _, back) = read_id_map(&path).unwrap();
        assert_eq!(back, ids);
        assert!(matches!(
            write_id_map(&path, 1, 1, &[Some(255)]),
            Err(ImgError::IdOverflow(255))
        ));
    }
}
