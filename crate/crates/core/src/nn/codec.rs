//! Binary network container.
//!
//! ```text
//! magic    b"SRRNET"
//! version  u16 LE (currently 1)
//! n_sizes  u32 LE
//! sizes    n_sizes x u32 LE
//! per layer: weights (row-major, f64 LE bits), then bias (f64 LE bits)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Layer, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"SRRNET";
const VERSION: u16 = 1;

impl Network {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let sizes = self.layer_sizes();
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a serialized network".into()));
        }
        let mut buf2 = [0u8; 2];
        read_exact(&mut r, &mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported network version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=1024).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| read_u32(&mut r).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n - 1);
        for pair in sizes.windows(2) {
            let (i, o) = (pair[0], pair[1]);
            let weights = read_f64s(&mut r, i * o)?;
            let bias = read_f64s(&mut r, o)?;
            layers.push(Layer::new(i, o, weights, bias)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after network".into()));
        }
        Network::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Network::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Length("network file is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
