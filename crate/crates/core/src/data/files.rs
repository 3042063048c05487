//! Point-cloud file formats.
//!
//! `xyz`: ASCII, one `x y z` triple per line, `#` starts a comment line,
//! values written with 9 significant digits (enough to recover any
//! f32-snapped coordinate exactly).
//!
//! `bin`: magic `OPC1`, little-endian u32 point count, then xyz triples
//! as little-endian f32 — bitwise round trips for normalised clouds,
//! whose coordinates are f32-exact by construction.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::geometry::PointCloud;

/// Magic bytes of the binary point-cloud format.
pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"OPC1";

/// On-disk format of a point cloud, chosen by file extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Bin,
}

impl CloudFormat {
    /// Picks the format from a path's extension (`.xyz` or `.bin`).
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") => Ok(CloudFormat::Xyz),
            Some("bin") => Ok(CloudFormat::Bin),
            _ => Err(DataError::UnknownExtension {
                path: path.display().to_string(),
            }),
        }
    }
}

/// Saves in the format implied by the path's extension.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), DataError> {
    match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => save_xyz(cloud, path),
        CloudFormat::Bin => save_bin(cloud, path),
    }
}

/// Loads in the format implied by the path's extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud, DataError> {
    match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => load_xyz(path),
        CloudFormat::Bin => load_bin(path),
    }
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<(), DataError> {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointCloud, DataError> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(DataError::XyzParse {
                path: display,
                line: line_no,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut p = [0.0f64; 3];
        for (a, tok) in fields.iter().enumerate() {
            p[a] = tok.parse().map_err(|_| DataError::XyzParse {
                path: display.clone(),
                line: line_no,
                reason: format!("invalid coordinate `{tok}`"),
            })?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points)?)
}

pub fn save_bin(cloud: &PointCloud, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(POINT_CLOUD_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for &c in p {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_bin(path: &Path) -> Result<PointCloud, DataError> {
    let buf = fs::read(path)?;
    let mut off = 0usize;
    let magic = take(&buf, &mut off, 4)?;
    if magic != POINT_CLOUD_MAGIC {
        return Err(DataError::BadMagic {
            expected: "OPC1",
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let count_bytes = take(&buf, &mut off, 4)?;
    let count = u32::from_le_bytes(count_bytes.try_into().expect("4 bytes")) as usize;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = [0.0f64; 3];
        for c in p.iter_mut() {
            let bytes = take(&buf, &mut off, 4)?;
            *c = f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64;
        }
        points.push(p);
    }
    if off != buf.len() {
        return Err(DataError::TrailingBytes { offset: off as u64 });
    }
    Ok(PointCloud::new(points)?)
}

/// Slices `len` bytes at `*off`, advancing it; errors with the offset at
/// which the file ran short.
pub(super) fn take<'a>(buf: &'a [u8], off: &mut usize, len: usize) -> Result<&'a [u8], DataError> {
    let end = off.checked_add(len).filter(|&e| e <= buf.len());
    match end {
        Some(end) => {
            let slice = &buf[*off..end];
            *off = end;
            Ok(slice)
        }
        None => Err(DataError::Truncated {
            offset: buf.len() as u64,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ShapeCategory, ShapeSpec};

    fn sample_cloud(n: usize) -> PointCloud {
        let spec = ShapeSpec::canonical(ShapeCategory::Cylinder, n, 0.02).unwrap();
        generate_synthetic(&spec, 31)
    }

    #[test]
    fn bin_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let cloud = sample_cloud(1024);
        save_bin(&cloud, &path).unwrap();
        let back = load_bin(&path).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn xyz_round_trip_recovers_snapped_coordinates_exactly() {
        // Normalised coordinates are f32 values; 9 significant digits
        // identify an f32 uniquely, so the round trip is exact.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        let cloud = sample_cloud(256);
        save_xyz(&cloud, &path).unwrap();
        let back = load_xyz(&path).unwrap();
        for (p, q) in cloud.points().iter().zip(back.points()) {
            for a in 0..3 {
                assert!(
                    (p[a] - q[a]).abs() <= 1e-6,
                    "coordinate drifted: {} vs {}",
                    p[a],
                    q[a]
                );
            }
        }
    }

    #[test]
    fn xyz_parses_zeros_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.xyz");
        std::fs::write(&path, "# a comment\n0 0 0\n\n1 2 3\n").unwrap();
        let cloud = load_xyz(&path).unwrap();
        assert_eq!(cloud.points(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn xyz_two_field_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "0 0 0\n1 2\n").unwrap();
        let err = load_xyz(&path).unwrap_err();
        match err {
            DataError::XyzParse { line, ref reason, .. } => {
                assert_eq!(line, 2);
                assert!(reason.contains("2"), "reason should count fields: {reason}");
            }
            other => panic!("expected XyzParse, got {other:?}"),
        }
    }

    #[test]
    fn bin_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let cloud = sample_cloud(16);
        save_bin(&cloud, &path).unwrap();

        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(
            load_bin(&path).unwrap_err(),
            DataError::Truncated { .. }
        ));

        let mut corrupt = full.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(
            load_bin(&path).unwrap_err(),
            DataError::BadMagic { .. }
        ));
    }

    #[test]
    fn extension_dispatch() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_cloud(32);
        let xyz = dir.path().join("c.xyz");
        let bin = dir.path().join("c.bin");
        save_cloud(&cloud, &xyz).unwrap();
        save_cloud(&cloud, &bin).unwrap();
        assert_eq!(load_cloud(&bin).unwrap(), cloud);
        assert!(load_cloud(&dir.path().join("c.npz")).is_err());
    }
}
