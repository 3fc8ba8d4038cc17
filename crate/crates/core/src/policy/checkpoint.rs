//! Binary genome checkpoints: magic, version, layout, then the
//! parameters as little-endian `f64`.

use std::io::{Read, Write};

use super::{GenomeLayout, PolicyGenome};
use crate::error::{IapError, Result};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IAPG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest accepted slice count and name length, against corrupt headers.
const MAX_SLICES: u32 = 1 << 16;
const MAX_NAME: u16 = 256;

pub fn write_checkpoint<T: Real>(genome: &PolicyGenome<T>, mut w: impl Write) -> Result<()> {
    let layout = genome.layout();
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(layout.slices().len() as u32).to_le_bytes())?;
    for s in layout.slices() {
        w.write_all(&(s.name.len() as u16).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&(s.rows as u32).to_le_bytes())?;
        w.write_all(&(s.cols as u32).to_le_bytes())?;
    }
    w.write_all(&(genome.params().len() as u64).to_le_bytes())?;
    for p in genome.params() {
        w.write_all(&p.to_f64_lossy().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => IapError::Format("checkpoint truncated".into()),
        _ => IapError::Io(e),
    })?;
    Ok(b)
}

pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<PolicyGenome<T>> {
    if read_array::<4>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(IapError::Format(
            "not a genome checkpoint (bad magic)".into(),
        ));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(IapError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = u32::from_le_bytes(read_array(&mut r)?);
    if n > MAX_SLICES {
        return Err(IapError::Format(format!("implausible slice count {n}")));
    }
    let mut shapes = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = u16::from_le_bytes(read_array(&mut r)?);
        if len > MAX_NAME {
            return Err(IapError::Format(format!("slice name of {len} bytes")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| IapError::Format("slice name is not UTF-8".into()))?;
        let rows = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_array(&mut r)?) as usize;
        shapes.push((name, rows, cols));
    }
    let layout = GenomeLayout::new(shapes);
    let count = u64::from_le_bytes(read_array(&mut r)?);
    if count != layout.total() as u64 {
        return Err(IapError::Format(format!(
            "checkpoint holds {count} parameters, layout needs {}",
            layout.total()
        )));
    }
    let mut params = Vec::with_capacity(layout.total());
    for _ in 0..count {
        params.push(T::lit(f64::from_le_bytes(read_array(&mut r)?)));
    }
    PolicyGenome::new(layout, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let layout = GenomeLayout::new([("a".to_string(), 2, 3), ("bias".to_string(), 1, 3)]);
        let g = PolicyGenome::new(layout, (0..9).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&g, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"IAPG");
        let back: PolicyGenome<f64> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.checksum(), g.checksum());
        assert!(matches!(
            read_checkpoint::<f64>(&buf[..buf.len() - 3]),
            Err(IapError::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f64>(&bad[..]).is_err());
        let mut bad = buf;
        bad[4] = 9;
        assert!(read_checkpoint::<f64>(&bad[..]).is_err());
    }
}
