//! Catalog of complete object shapes and the heuristic similar-shape lookup.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const SIZE_WEIGHT: f64 = 1.0;
pub const COUNT_WEIGHT: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 3;

/// Relative margin applied when clipping assembled points to the target box.
pub const CLIP_MARGIN: f64 = 0.05;

/// One object's points in its own box frame (centered, heading along +x).
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub class_id: usize,
    /// `(l, w, h)` of the source box.
    pub size: [f64; 3],
    pub points: Vec<[f64; 3]>,
    /// Frame the shape was taken from, so a frame never retrieves its own objects.
    pub source: u64,
}

impl BankEntry {
    pub fn from_world(points: &[[f64; 3]], bbox: &Box3D, class_id: usize, source: u64) -> Self {
        BankEntry {
            class_id,
            size: [bbox.l, bbox.w, bbox.h],
            points: points.iter().map(|&p| bbox.to_local(p)).collect(),
            source,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeBank {
    entries: Vec<BankEntry>,
}

impl ShapeBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry after checking it is non-empty and canonical.
    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        if entry.points.is_empty() {
            return Err(Error::InvalidInput("bank entry without points".into()));
        }
        if !entry.size.iter().all(|&s| s > 0.0) {
            return Err(Error::InvalidInput("bank entry with non-positive size".into()));
        }
        let n = entry.points.len() as f64;
        let mx = entry.points.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = entry.points.iter().map(|p| p[1]).sum::<f64>() / n;
        if mx.abs() >= 0.5 * entry.size[0] || my.abs() >= 0.5 * entry.size[1] {
            return Err(Error::InvalidInput("bank entry is not in its box frame".into()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"BSHB")?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            out.write_all(&(e.class_id as u64).to_le_bytes())?;
            out.write_all(&e.source.to_le_bytes())?;
            for s in e.size {
                out.write_all(&s.to_le_bytes())?;
            }
            out.write_all(&(e.points.len() as u64).to_le_bytes())?;
            for p in &e.points {
                for v in p {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take8 = |pos: &mut usize| -> Result<[u8; 8]> {
            let b = bytes.get(*pos..*pos + 8).ok_or(Error::Truncated {
                path: path.to_path_buf(),
                offset: *pos as u64,
            })?;
            *pos += 8;
            Ok(b.try_into().unwrap())
        };
        if bytes.get(..4) != Some(b"BSHB".as_slice()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "not a shape bank".into(),
            });
        }
        pos += 4;
        let count = u64::from_le_bytes(take8(&mut pos)?) as usize;
        let mut bank = ShapeBank::new();
        for _ in 0..count {
            let class_id = u64::from_le_bytes(take8(&mut pos)?) as usize;
            let source = u64::from_le_bytes(take8(&mut pos)?);
            let mut size = [0.0; 3];
            for s in &mut size {
                *s = f64::from_le_bytes(take8(&mut pos)?);
            }
            let n = u64::from_le_bytes(take8(&mut pos)?) as usize;
            let mut points = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let mut p = [0.0; 3];
                for v in &mut p {
                    *v = f64::from_le_bytes(take8(&mut pos)?);
                }
                points.push(p);
            }
            bank.push(BankEntry {
                class_id,
                size,
                points,
                source,
            })
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }
}

/// Similarity cost of a bank entry for a target of the given size and (mirrored) point count.
pub fn retrieval_cost(target_size: [f64; 3], target_count: usize, entry: &BankEntry) -> f64 {
    let size_gap = (0..3)
        .map(|i| ((target_size[i] - entry.size[i]) / target_size[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let nb = entry.points.len();
    let denom = target_count.max(nb).max(1) as f64;
    let count_gap = (target_count as f64 - nb as f64).abs() / denom;
    SIZE_WEIGHT * size_gap + COUNT_WEIGHT * count_gap
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieval {
    /// Bank indices, best first.
    pub indices: Vec<usize>,
    /// Fewer than `k` candidates were available.
    pub short: bool,
}

/// Top-`k` same-class entries by ascending cost; ties go to the lower bank index.
///
/// The target's point count is doubled to account for its mirror image. Entries
/// from `exclude_source` are skipped.
pub fn retrieve_similar(
    target: &Box3D,
    target_points: usize,
    class_id: usize,
    bank: &ShapeBank,
    k: usize,
    exclude_source: Option<u64>,
) -> Retrieval {
    let size = [target.l, target.w, target.h];
    let mut scored: Vec<(f64, usize)> = bank
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.class_id == class_id && Some(e.source) != exclude_source)
        .map(|(i, e)| (retrieval_cost(size, 2 * target_points, e), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let short = scored.len() < k;
    Retrieval {
        indices: scored.into_iter().take(k).map(|(_, i)| i).collect(),
        short,
    }
}

/// Reflects a world point across the box's heading axis.
pub fn mirror_point(bbox: &Box3D, p: [f64; 3]) -> [f64; 3] {
    let q = bbox.to_local(p);
    bbox.to_world([q[0], -q[1], q[2]])
}

/// Target points, their mirror image, and donor shapes fitted to the target box,
/// clipped to the box enlarged by [`CLIP_MARGIN`].
pub fn assemble_shape(target: &Box3D, points: &[[f64; 3]], donors: &[&BankEntry]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(2 * points.len());
    out.extend_from_slice(points);
    out.extend(points.iter().map(|&p| mirror_point(target, p)));
    for d in donors {
        let s = [target.l / d.size[0], target.w / d.size[1], target.h / d.size[2]];
        out.extend(
            d.points
                .iter()
                .map(|p| target.to_world([p[0] * s[0], p[1] * s[1], p[2] * s[2]])),
        );
    }
    out.retain(|&p| target.contains_point_with_margin(p, CLIP_MARGIN));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(l: f64, n: usize, source: u64) -> BankEntry {
        BankEntry {
            class_id: 0,
            size: [l, 0.4 * l, 0.4 * l],
            points: (0..n).map(|i| [0.01 * i as f64 - 0.005 * n as f64, 0.0, 0.0]).collect(),
            source,
        }
    }

    #[test]
    fn identical_entry_ranks_first() {
        let mut bank = ShapeBank::new();
        bank.push(entry(3.0, 20, 1)).unwrap();
        bank.push(entry(4.0, 10, 2)).unwrap();
        let target = Box3D::new(0.0, 0.0, 0.0, 4.0, 1.6, 1.6, 0.3);
        let r = retrieve_similar(&target, 5, 0, &bank, 1, None);
        assert_eq!(r.indices, vec![1]);
    }

    #[test]
    fn small_bank_is_flagged() {
        let mut bank = ShapeBank::new();
        bank.push(entry(3.0, 20, 1)).unwrap();
        bank.push(entry(4.0, 10, 2)).unwrap();
        let target = Box3D::new(0.0, 0.0, 0.0, 4.0, 1.6, 1.6, 0.0);
        let r = retrieve_similar(&target, 5, 0, &bank, 3, None);
        assert_eq!(r.indices.len(), 2);
        assert!(r.short);
    }

    #[test]
    fn own_frame_excluded() {
        let mut bank = ShapeBank::new();
        bank.push(entry(4.0, 10, 7)).unwrap();
        let target = Box3D::new(0.0, 0.0, 0.0, 4.0, 1.6, 1.6, 0.0);
        assert!(retrieve_similar(&target, 5, 0, &bank, 3, Some(7)).indices.is_empty());
    }

    #[test]
    fn non_canonical_entry_rejected() {
        let mut bank = ShapeBank::new();
        let mut e = entry(4.0, 10, 0);
        e.points.iter_mut().for_each(|p| p[0] += 3.0);
        assert!(bank.push(e).is_err());
    }

    #[test]
    fn empty_donors_give_target_and_mirror() {
        let b = Box3D::new(5.0, 1.0, -1.0, 4.0, 2.0, 1.5, 0.7);
        let p = b.to_world([0.5, 0.6, 0.1]);
        let s = assemble_shape(&b, &[p], &[]);
        assert_eq!(s.len(), 2);
        let m = b.to_local(s[1]);
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn bank_round_trip() {
        let mut bank = ShapeBank::new();
        bank.push(entry(4.0, 10, 3)).unwrap();
        bank.push(entry(3.3, 4, 9)).unwrap();
        let mut bytes = Vec::new();
        bank.write_to(&mut bytes).unwrap();
        let back = ShapeBank::read_from(bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, bank);
    }
}
