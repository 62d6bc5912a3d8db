//! Named-tensor archive: little-endian, one shape header per tensor.
//!
//! ```text
//! "BSHC" u32:version u32:count
//! repeated: u32:name_len name u8:is_buffer u32:rank u64[rank]:dims f64[..]:values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::store::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BSHC";
const VERSION: u32 = 1;

pub struct ArchiveEntry {
    pub name: String,
    pub buffer: bool,
    pub tensor: Tensor,
}

pub fn write_checkpoint<W: Write>(mut out: W, store: &ParamStore) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[store.is_buffer(id) as u8])?;
        let t = store.value(id);
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self) -> std::io::Result<Option<[u8; N]>> {
        let mut buf = [0u8; N];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => {
                self.offset += N as u64;
                Ok(Some(buf))
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e),
        }
    }
}

pub fn read_checkpoint<R: Read>(input: R, path: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let truncated = |offset| Error::Truncated {
        path: path.to_path_buf(),
        offset,
    };
    macro_rules! take {
        ($n:expr) => {
            match cur.take::<$n>().map_err(|e| Error::io(path, e))? {
                Some(b) => b,
                None => return Err(truncated(cur.offset)),
            }
        };
    }
    let magic = take!(4);
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "not a checkpoint archive".into(),
        });
    }
    let version = u32::from_le_bytes(take!(4));
    if version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = u32::from_le_bytes(take!(4)) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take!(4)) as usize;
        let mut name = vec![0u8; name_len];
        cur.inner.read_exact(&mut name).map_err(|_| truncated(cur.offset))?;
        cur.offset += name_len as u64;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            message: "tensor name is not UTF-8".into(),
        })?;
        let buffer = take!(1)[0] != 0;
        let rank = u32::from_le_bytes(take!(4)) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take!(8)) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take!(8)));
        }
        entries.push(ArchiveEntry {
            name,
            buffer,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, store).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads archived values into an already-built store, matching by name and shape.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_checkpoint(BufReader::new(file), path)?;
    if entries.len() != store.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("archive holds {} tensors, model expects {}", entries.len(), store.len()),
        });
    }
    for e in entries {
        let id = store.id(&e.name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("unknown tensor {:?}", e.name),
        })?;
        store.set_value(id, e.tensor)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "conv.w",
            Tensor::from_vec(&[2, 1, 1, 2], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap(),
        )
        .unwrap();
        s.add_buffer("bn.mean", Tensor::from_vec(&[2], vec![-0.0, 3.25]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store).unwrap();
        let entries = read_checkpoint(bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(entries.len(), 2);
        for (e, id) in entries.iter().zip(store.ids()) {
            assert_eq!(e.name, store.name(id));
            assert_eq!(e.buffer, store.is_buffer(id));
            let a: Vec<u64> = e.tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = store.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut again = Vec::new();
        let mut reloaded = sample_store();
        for e in entries {
            let id = reloaded.id(&e.name).unwrap();
            reloaded.set_value(id, e.tensor).unwrap();
        }
        write_checkpoint(&mut again, &reloaded).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_archive_reports_offset() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample_store()).unwrap();
        bytes.truncate(bytes.len() - 3);
        match read_checkpoint(bytes.as_slice(), Path::new("mem")) {
            Err(Error::Truncated { offset, .. }) => assert!(offset > 0),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("truncated archive accepted"),
        }
    }
}
