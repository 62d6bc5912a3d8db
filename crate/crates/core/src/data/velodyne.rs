//! Raw LiDAR scans: little-endian `f32` quadruples `(x, y, z, reflectance)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pillars::Point;

pub const POINT_BYTES: usize = 16;

pub fn decode_velodyne(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    let whole = bytes.len() - bytes.len() % POINT_BYTES;
    if whole != bytes.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: whole as u64,
        });
    }
    Ok(bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]) as f64;
            [f(0), f(1), f(2), f(3)]
        })
        .collect())
}

/// Points are stored at `f32` precision.
pub fn encode_velodyne(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne(path: &Path) -> Result<Vec<Point>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_velodyne(&bytes, path)
}

pub fn write_velodyne(path: &Path, points: &[Point]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&encode_velodyne(points)))
        .map_err(|e| Error::io(path, e))
}

/// Rounds coordinates to what a scan file can hold.
pub fn quantize(points: &mut [Point]) {
    for p in points {
        for v in p.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_from_32_bytes() {
        let pts = decode_velodyne(&[0u8; 32], Path::new("x.bin")).unwrap();
        assert_eq!(pts.len(), 2);
    }

    #[test]
    fn hex_fixture() {
        // 1.5, -2.0, 0.25, 0.5 as little-endian f32
        let bytes = [
            0x00, 0x00, 0xc0, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0x00, 0x00, 0x80, 0x3e, 0x00, 0x00, 0x00, 0x3f,
        ];
        let pts = decode_velodyne(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(pts, vec![[1.5, -2.0, 0.25, 0.5]]);
    }

    #[test]
    fn truncation_offset() {
        let err = decode_velodyne(&[0u8; 37], Path::new("x.bin")).unwrap_err();
        assert!(matches!(err, Error::Truncated { offset: 32, .. }));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut pts = vec![[0.1, -7.3, 1e-3, 0.9], [55.5, 3.25, -1.7, 0.0]];
        quantize(&mut pts);
        let back = decode_velodyne(&encode_velodyne(&pts), Path::new("x.bin")).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            for k in 0..4 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }
}
