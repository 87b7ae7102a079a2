//! Point-cloud serialization.
//!
//! Binary container (all little-endian):
//! ```text
//! magic     4 bytes  b"PCLD"
//! version   1 byte   (1)
//! flags     1 byte   bit 0: labels present
//! count     8 bytes  u64
//! points    count * 3 * f64
//! labels    count * u16, only when flagged
//! ```
//! CSV (`x,y,z[,label]` with a header row) is provided for debugging.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

const MAGIC: &[u8; 4] = b"PCLD";
const VERSION: u8 = 1;

pub fn cloud_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let has_labels = cloud.labels.is_some();
    let mut out = Vec::with_capacity(14 + cloud.len() * 26);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(u8::from(has_labels));
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    if let Some(labels) = &cloud.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn cloud_from_bytes(bytes: &[u8]) -> Result<(PointCloud, usize)> {
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(Error::Spec("bad magic in point cloud container".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Spec(format!(
            "unsupported point cloud version {}",
            bytes[4]
        )));
    }
    let has_labels = bytes[5] & 1 != 0;
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let mut offset = 14;
    let need = count * 24 + if has_labels { count * 2 } else { 0 };
    if bytes.len() < offset + need {
        return Err(Error::Spec("truncated point cloud container".into()));
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = [0.0; 3];
        for c in &mut p {
            *c = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
        points.push(p);
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(u16::from_le_bytes(bytes[offset..offset + 2].try_into().unwrap()));
            offset += 2;
        }
        Some(labels)
    } else {
        None
    };
    Ok((PointCloud { points, labels }, offset))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, cloud_to_bytes(cloud))?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    Ok(cloud_from_bytes(&bytes)?.0)
}

pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::new();
    match &cloud.labels {
        Some(labels) => {
            writeln!(out, "x,y,z,label")?;
            for (p, l) in cloud.points.iter().zip(labels) {
                writeln!(out, "{},{},{},{}", p[0], p[1], p[2], l)?;
            }
        }
        None => {
            writeln!(out, "x,y,z")?;
            for p in &cloud.points {
                writeln!(out, "{},{},{}", p[0], p[1], p[2])?;
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_preserves_bits_and_labels() {
        let cloud = PointCloud::with_labels(
            vec![[0.1, -2.5, 1.0 / 3.0], [f64::MIN_POSITIVE, 0.0, -0.0]],
            vec![3, 65535],
        );
        let bytes = cloud_to_bytes(&cloud);
        let (back, consumed) = cloud_from_bytes(&bytes).unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(back.labels, cloud.labels);
        for (a, b) in cloud.points.iter().zip(&back.points) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits());
            }
        }

        let unlabeled = PointCloud::new(vec![[1.0, 2.0, 3.0]]);
        let (back, _) = cloud_from_bytes(&cloud_to_bytes(&unlabeled)).unwrap();
        assert_eq!(back, unlabeled);
    }

    #[test]
    fn rejects_garbage() {
        assert!(cloud_from_bytes(b"nope").is_err());
    }
}
