//! Binary checkpoint codec.
//!
//! Layout (all integers u32 little-endian, all reals f64 little-endian):
//! magic `RFPK`, version, layer count, `(rows, cols)` per layer, every
//! weight row-major, every bias, then `input_dim`, `cond_dim`, `output_dim`.
//! `input_dim` is the full network input width (`data + cond + 1`).

use std::io::{Read, Write};

use super::{MlpSpec, Model, ParamVector};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFPK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model) -> Result<()> {
    w.write_all(&checkpoint_bytes(model))?;
    Ok(())
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let p = &model.params;
    let mut out = Vec::with_capacity(16 + 8 * p.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.layout.len() as u32).to_le_bytes());
    for &(r, c) in &p.layout {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    // values are already weights-then-biases
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in [
        model.spec.input_dim(),
        model.spec.cond_dim,
        model.spec.output_dim(),
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers < 2 {
        return Err(Error::Data(format!(
            "checkpoint has {n_layers} layers, need at least 2"
        )));
    }
    let mut layout = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        layout.push((rows, cols));
    }
    let n: usize = layout.iter().map(|&(r, c)| r * c + r).sum();
    let mut values = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        read_exact(&mut r, &mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let input_dim = read_u32(&mut r)? as usize;
    let cond_dim = read_u32(&mut r)? as usize;
    let output_dim = read_u32(&mut r)? as usize;
    if input_dim != output_dim + cond_dim + 1 {
        return Err(Error::Data(format!(
            "inconsistent checkpoint dims: input {input_dim}, cond {cond_dim}, output {output_dim}"
        )));
    }
    let hidden: Vec<usize> = layout[..n_layers - 1].iter().map(|&(r, _)| r).collect();
    let spec = MlpSpec::new(output_dim, cond_dim, hidden)?;
    if spec.layer_shapes() != layout {
        return Err(Error::Data("checkpoint layer shapes do not chain".into()));
    }
    let params = ParamVector::from_values(values, layout)?;
    Model::new(spec, params)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Data("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::new(2, 4, vec![6, 5]).unwrap();
        let model = Model::init(spec, 9).unwrap();
        let bytes = checkpoint_bytes(&model);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn header_layout() {
        let spec = MlpSpec::new(2, 1, vec![3]).unwrap();
        let model = Model::init(spec, 1).unwrap();
        let b = checkpoint_bytes(&model);
        assert_eq!(&b[0..4], b"RFPK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        // layer 0: 3 x 4, layer 1: 2 x 3
        let dims: Vec<u32> = b[12..28]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![3, 4, 2, 3]);
        let n_params = 3 * 4 + 2 * 3 + 3 + 2;
        assert_eq!(b.len(), 28 + 8 * n_params + 12);
        let tail: Vec<u32> = b[b.len() - 12..]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(tail, vec![4, 1, 2]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"NOPE"[..]).is_err());
        let spec = MlpSpec::new(2, 1, vec![3]).unwrap();
        let bytes = checkpoint_bytes(&Model::init(spec, 1).unwrap());
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Data(_))
        ));
    }
}
