//! Named-tensor archive: little-endian f64 arrays with names and shapes.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};

use super::seq2seq::Params;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XWTN";

pub type Tensor = (String, Vec<usize>, Vec<f64>);

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Vec<usize>, &[f64])]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, shape, data) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(shape.len() as u32)?;
        for d in shape {
            w.write_u64::<LittleEndian>(*d as u64)?;
        }
        for v in data.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> std::io::Result<Vec<Tensor>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a tensor archive"));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut data = vec![0.0; shape.iter().product()];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Copy archived tensors into parameters of the same architecture.
pub fn load_into(params: &mut Params, tensors: &[Tensor]) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != tensors.len() {
        return Err(Error::contract(format!(
            "archive holds {} tensors, model needs {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), (tn, ts, _)) in expected.iter().zip(tensors) {
        if name != tn || shape != ts {
            return Err(Error::contract(format!(
                "archive tensor {tn} {ts:?} does not match model tensor {name} {shape:?}"
            )));
        }
    }
    for (dst, (_, _, src)) in params.tensors_mut().into_iter().zip(tensors) {
        dst.copy_from_slice(src);
    }
    Ok(())
}
