//! Flat binary container for parameters and run state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"CKPT\x01\0\0\n"
//! count   u32      number of entries
//! entry   repeated:
//!   name_len u16, name bytes (utf-8)
//!   dtype    u8   (0=f32, 1=f64, 2=u64, 3=u8)
//!   ndim     u8, dims u64 x ndim
//!   payload  numel * dtype_size bytes, little-endian
//! ```
//!
//! Entries round-trip bit-exactly; ordering is preserved.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::scalar::{Dtype, Scalar};

const MAGIC: [u8; 8] = *b"CKPT\x01\0\0\n";

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "entry {} has dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self
            .payload
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect())
    }

    pub fn u64s(&self) -> Result<Vec<u64>> {
        if self.dtype != Dtype::U64 {
            return Err(Error::Checkpoint(format!(
                "entry {} is not u64",
                self.name
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// In-memory container; build it up, then write, or read and query.
#[derive(Debug, Default)]
pub struct Container {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, entry: Entry) -> Result<()> {
        if self.by_name.contains_key(&entry.name) {
            return Err(Error::Checkpoint(format!(
                "duplicate entry name {}",
                entry.name
            )));
        }
        self.by_name.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn put_scalars<T: Scalar>(
        &mut self,
        name: &str,
        shape: &[usize],
        values: &[T],
    ) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Checkpoint(format!(
                "entry {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        let mut payload = Vec::with_capacity(values.len() * T::BYTES);
        for v in values {
            v.write_le(&mut payload);
        }
        self.push(Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            payload,
        })
    }

    pub fn put_u64s(&mut self, name: &str, values: &[u64]) -> Result<()> {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.push(Entry {
            name: name.to_string(),
            dtype: Dtype::U64,
            shape: vec![values.len()],
            payload,
        })
    }

    pub fn put_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.push(Entry {
            name: name.to_string(),
            dtype: Dtype::U8,
            shape: vec![bytes.len()],
            payload: bytes.to_vec(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("entry name too long: {}", e.name)));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.dtype.code()])?;
            if e.shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint("too many dims".into()));
            }
            w.write_all(&[e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let expect = e.numel() * e.dtype.size();
            if expect != e.payload.len() {
                return Err(Error::Checkpoint(format!(
                    "entry {}: payload {} bytes, shape implies {expect}",
                    e.name,
                    e.payload.len()
                )));
            }
            w.write_all(&e.payload)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic in {}",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut container = Container::new();
        for _ in 0..count {
            let mut buf2 = [0u8; 2];
            r.read_exact(&mut buf2)?;
            let name_len = u16::from_le_bytes(buf2) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("non-utf8 entry name".into()))?;
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            let dtype = Dtype::from_code(b[0])
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {}", b[0])))?;
            r.read_exact(&mut b)?;
            let ndim = b[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut buf8 = [0u8; 8];
                r.read_exact(&mut buf8)?;
                shape.push(u64::from_le_bytes(buf8) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * dtype.size()];
            r.read_exact(&mut payload)?;
            container.push(Entry {
                name,
                dtype,
                shape,
                payload,
            })?;
        }
        // trailing bytes mean a corrupt or mismatched file
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(container)
    }
}

/// Store every registry slot (values and update counts) under a prefix.
pub fn pack_registry<T: Scalar>(
    container: &mut Container,
    prefix: &str,
    reg: &ParamRegistry<T>,
) -> Result<()> {
    let mut counts = Vec::with_capacity(reg.len());
    for (_, slot) in reg.iter() {
        container.put_scalars(
            &format!("{prefix}{}", slot.name),
            &slot.shape,
            &slot.value,
        )?;
        counts.push(slot.update_count);
    }
    container.put_u64s(&format!("{prefix}__update_counts"), &counts)?;
    Ok(())
}

/// Restore registry slots stored by [`pack_registry`]. The registry must
/// already hold identically-shaped slots (built from the same config).
pub fn unpack_registry<T: Scalar>(
    container: &Container,
    prefix: &str,
    reg: &mut ParamRegistry<T>,
) -> Result<()> {
    let counts = container
        .require(&format!("{prefix}__update_counts"))?
        .u64s()?;
    if counts.len() != reg.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} slots, registry has {}",
            counts.len(),
            reg.len()
        )));
    }
    let ids: Vec<_> = reg.iter().map(|(id, _)| id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = reg.slot(id).name.clone();
        let entry = container.require(&format!("{prefix}{name}"))?;
        if entry.shape != reg.slot(id).shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                entry.shape,
                reg.slot(id).shape
            )));
        }
        let values = entry.scalars::<T>()?;
        let slot = reg.slot_mut(id);
        slot.value = values;
        slot.update_count = counts[i];
    }
    Ok(())
}
