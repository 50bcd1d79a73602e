//! Versioned binary checkpoint container: magic "AFDK", format version,
//! a 32-byte spec digest, a manifest of named shapes, then the parameter
//! arrays as little-endian IEEE-754 f64. Round trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AFDK";
pub const FORMAT_VERSION: u32 = 1;

pub type StateEntry = (String, Vec<usize>, Vec<f64>);

pub fn write_checkpoint<W: Write>(
    mut w: W,
    digest: &[u8; 32],
    entries: &[StateEntry],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(digest)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("entry name too long: {name}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Checkpoint(format!(
                "entry {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, _, data) in entries {
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<([u8; 32], Vec<StateEntry>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    r.read_exact(&mut buf4)?;
    let n_entries = u32::from_le_bytes(buf4) as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad entry name: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        manifest.push((name, shape));
    }
    let mut entries = Vec::with_capacity(n_entries);
    let mut buf8 = [0u8; 8];
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        entries.push((name, shape, data));
    }
    Ok((digest, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let entries: Vec<StateEntry> = (0..5)
            .map(|i| {
                let shape = vec![rng.gen_range(1usize..4), rng.gen_range(1usize..6)];
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect();
                (format!("layer{i}.weight"), shape, data)
            })
            .collect();
        let digest = [7u8; 32];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &digest, &entries).unwrap();
        let (got_digest, got_entries) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(got_digest, digest);
        assert_eq!(got_entries.len(), entries.len());
        for (a, b) in entries.iter().zip(&got_entries) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            assert_eq!(
                a.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let entries: Vec<StateEntry> = vec![("w".into(), vec![2], vec![1.0, 2.0])];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[0u8; 32], &entries).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 4];
        assert!(read_checkpoint(truncated).is_err());
    }
}
