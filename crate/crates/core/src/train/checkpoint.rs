//! Checkpoint container: magic "NVST", little-endian layout, named entries
//! for parameters, optimizer moments, and the step counter, with a trailing
//! CRC32 over the payload. Loading validates the whole file before touching
//! any state.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, ParamStore, Scalar};

use super::adam::OptimizerState;

pub const MAGIC: [u8; 4] = *b"NVST";
pub const CHECKPOINT_VERSION: u32 = 1;

fn crc32(data: &[u8]) -> u32 {
    // Standard reflected CRC-32 (polynomial 0xEDB88320).
    let mut table = [0u32; 256];
    for (i, t) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *t = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

struct Entry {
    name: String,
    dtype: Dtype,
    dims: Vec<u64>,
    offset: u64,
}

fn push_entry(header: &mut Vec<u8>, e: &Entry) {
    header.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
    header.extend_from_slice(e.name.as_bytes());
    header.push(e.dtype as u8);
    header.push(e.dims.len() as u8);
    for &d in &e.dims {
        header.extend_from_slice(&d.to_le_bytes());
    }
    header.extend_from_slice(&e.offset.to_le_bytes());
}

fn scalar_bytes<T: Scalar>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::DTYPE.size());
    for v in data {
        v.write_le(&mut out);
    }
    out
}

/// Serialize parameters plus (optionally) optimizer moments and step.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    opt: Option<&OptimizerState<T>>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut add = |name: String, dtype: Dtype, dims: Vec<u64>, bytes: Vec<u8>, payload: &mut Vec<u8>| {
        entries.push(Entry { name, dtype, dims, offset: payload.len() as u64 });
        payload.extend_from_slice(&bytes);
    };
    for p in &store.entries {
        let dims = p.shape.iter().map(|&d| d as u64).collect();
        add(p.name.clone(), T::DTYPE, dims, scalar_bytes(&p.data), &mut payload);
    }
    if let Some(state) = opt {
        for (i, p) in store.entries.iter().enumerate() {
            let dims: Vec<u64> = p.shape.iter().map(|&d| d as u64).collect();
            add(format!("adam.m.{}", p.name), T::DTYPE, dims.clone(), scalar_bytes(&state.m[i]), &mut payload);
            add(format!("adam.v.{}", p.name), T::DTYPE, dims, scalar_bytes(&state.v[i]), &mut payload);
        }
        add(
            "step".to_string(),
            Dtype::U64,
            vec![1],
            state.step.to_le_bytes().to_vec(),
            &mut payload,
        );
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        push_entry(&mut out, e);
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    // Write via a temp file so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Parsed {
    entries: Vec<Entry>,
    payload: Vec<u8>,
}

fn parse(path: &Path) -> Result<Parsed> {
    let bytes = std::fs::read(path)?;
    let corrupt = |msg: &str| Error::CheckpointCorrupt(format!("{}: {}", path.display(), msg));
    if bytes.len() < 12 || bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(corrupt("truncated header"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| corrupt("entry name is not utf-8"))?
            .to_string();
        let dtype = Dtype::from_code(take(1)?[0])
            .ok_or_else(|| corrupt("unknown dtype code"))?;
        let rank = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let offset = u64::from_le_bytes(take(8)?.try_into().unwrap());
        entries.push(Entry { name, dtype, dims, offset });
    }
    if bytes.len() < pos + 4 {
        return Err(corrupt("missing payload"));
    }
    let payload = bytes[pos..bytes.len() - 4].to_vec();
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(&payload) != stored_crc {
        return Err(corrupt("payload checksum mismatch"));
    }
    for e in &entries {
        let n: u64 = e.dims.iter().product();
        if e.offset + n * e.dtype.size() as u64 > payload.len() as u64 {
            return Err(corrupt("entry points past payload"));
        }
    }
    Ok(Parsed { entries, payload })
}

fn read_array<T: Scalar>(parsed: &Parsed, e: &Entry) -> Result<Vec<T>> {
    if e.dtype != T::DTYPE {
        return Err(Error::CheckpointCorrupt(format!(
            "entry {} has dtype {:?}, expected {:?}",
            e.name, e.dtype, T::DTYPE
        )));
    }
    let n: usize = e.dims.iter().product::<u64>() as usize;
    let w = e.dtype.size();
    let start = e.offset as usize;
    Ok((0..n).map(|i| T::read_le(&parsed.payload[start + i * w..start + (i + 1) * w])).collect())
}

fn check_shape(e: &Entry, shape: &[usize], name: &str) -> Result<()> {
    let stored: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
    if stored != shape {
        return Err(Error::CheckpointShape {
            name: name.to_string(),
            stored,
            model: shape.to_vec(),
        });
    }
    Ok(())
}

/// Restore every parameter (and optimizer state when requested) from a
/// checkpoint. Validates everything first; on error no state is modified.
/// Returns the stored step count (0 when the file carries no optimizer).
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    store: &mut ParamStore<T>,
    mut opt: Option<&mut OptimizerState<T>>,
) -> Result<u64> {
    let parsed = parse(path)?;
    let find = |name: &str| parsed.entries.iter().find(|e| e.name == name);
    let mut params = Vec::with_capacity(store.entries.len());
    let mut moments = Vec::new();
    for p in &store.entries {
        let e = find(&p.name).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("missing parameter {}", p.name))
        })?;
        check_shape(e, &p.shape, &p.name)?;
        params.push(read_array::<T>(&parsed, e)?);
        if opt.is_some() {
            for prefix in ["adam.m", "adam.v"] {
                let mname = format!("{}.{}", prefix, p.name);
                let me = find(&mname).ok_or_else(|| {
                    Error::CheckpointCorrupt(format!("missing optimizer entry {}", mname))
                })?;
                check_shape(me, &p.shape, &mname)?;
                moments.push(read_array::<T>(&parsed, me)?);
            }
        }
    }
    let mut step = 0;
    if opt.is_some() {
        let e = find("step")
            .ok_or_else(|| Error::CheckpointCorrupt("missing step entry".to_string()))?;
        if e.dtype != Dtype::U64 || e.dims != [1] {
            return Err(Error::CheckpointCorrupt("malformed step entry".to_string()));
        }
        step = u64::from_le_bytes(
            parsed.payload[e.offset as usize..e.offset as usize + 8].try_into().unwrap(),
        );
    }
    // All validated; apply.
    for (p, data) in store.entries.iter_mut().zip(params) {
        p.data = data;
    }
    if let Some(state) = opt.as_deref_mut() {
        for (i, chunk) in moments.chunks_exact(2).enumerate() {
            state.m[i] = chunk[0].clone();
            state.v[i] = chunk[1].clone();
        }
        state.step = step;
    }
    Ok(step)
}

/// Copy over only entries whose name and shape match the store (e.g. reusing
/// a pretrained encoder inside the full model). Returns how many parameters
/// were taken.
pub fn load_matching<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<usize> {
    let parsed = parse(path)?;
    let mut loaded = 0;
    for p in store.entries.iter_mut() {
        if let Some(e) = parsed.entries.iter().find(|e| e.name == p.name) {
            check_shape(e, &p.shape, &p.name)?;
            p.data = read_array::<T>(&parsed, e)?;
            loaded += 1;
        }
    }
    Ok(loaded)
}
