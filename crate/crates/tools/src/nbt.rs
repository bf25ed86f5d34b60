//! `NBT1` tensors: magic, `u8` rank, `u32` LE extents, `f32` LE values.

use std::io::{self, Read, Write};

use ccam_core::Tensor;

pub const MAGIC: &[u8; 4] = b"NBT1";

/// Encoded size of a tensor with these extents.
pub fn encoded_len(dims: &[usize]) -> usize {
    4 + 1 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor<f32>) -> io::Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(t.dims()));
    buf.extend_from_slice(MAGIC);
    buf.push(t.dims().len() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "extent exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut v = Vec::new();
    write_tensor(&mut v, t).expect("writing to a Vec cannot fail");
    v
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_tensor<R: Read>(input: &mut R) -> io::Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an NBT1 tensor"));
    }
    let mut rank = [0u8; 1];
    input.read_exact(&mut rank)?;
    let rank = rank[0] as usize;
    if rank > ccam_core::tensor::MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds {}", ccam_core::tensor::MAX_RANK)));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
    let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| bad("extent overflow"))?];
    input.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&dims, data).map_err(|e| bad(e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> io::Result<Tensor<f32>> {
    let mut cur = bytes;
    let t = read_tensor(&mut cur)?;
    if !cur.is_empty() {
        return Err(bad("trailing bytes after tensor"));
    }
    Ok(t)
}
