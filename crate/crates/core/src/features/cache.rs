//! On-disk dataset cache: one little-endian binary file per split and a JSON sidecar.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureLayout, Scaler, SequenceSample, SplitAssignment};
use crate::error::{Error, Result};
use crate::world::VehicleId;

const MAGIC: &[u8; 4] = b"XWSQ";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub layout: FeatureLayout,
    pub feature_names: Vec<String>,
    pub scaler: Scaler,
    pub input_ticks: usize,
    pub horizon: usize,
    pub tick_s: f64,
    pub split_seed: u64,
    pub assignment: SplitAssignment,
    pub counts: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub meta: DatasetMeta,
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn write_samples<W: Write>(mut w: W, samples: &[SequenceSample]) -> std::io::Result<()> {
    let (t, d, l) = match samples.first() {
        Some(s) => (s.input.nrows(), s.input.ncols(), s.target.nrows()),
        None => (0, 0, 0),
    };
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(samples.len() as u64)?;
    for v in [t, d, l] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for s in samples {
        assert_eq!(s.input.dim(), (t, d), "inconsistent sample shapes");
        assert_eq!(s.target.dim(), (l, 2), "inconsistent target shapes");
        w.write_u32::<LittleEndian>(s.vehicle_id.0)?;
        w.write_f64::<LittleEndian>(s.anchor_time)?;
        w.write_u8(s.turning as u8)?;
        for v in s.input.iter().chain(s.target.iter()) {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_samples<R: Read>(mut r: R) -> std::io::Result<Vec<SequenceSample>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a sequence cache file"));
    }
    if r.read_u32::<LittleEndian>()? != VERSION {
        return Err(bad("unsupported cache version"));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let t = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let l = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0.0; t * d + l * 2];
    for _ in 0..n {
        let id = VehicleId(r.read_u32::<LittleEndian>()?);
        let anchor_time = r.read_f64::<LittleEndian>()?;
        let turning = r.read_u8()? != 0;
        r.read_f64_into::<LittleEndian>(&mut buf)?;
        out.push(SequenceSample {
            vehicle_id: id,
            anchor_time,
            input: Array2::from_shape_vec((t, d), buf[..t * d].to_vec()).expect("sized buffer"),
            target: Array2::from_shape_vec((l, 2), buf[t * d..].to_vec()).expect("sized buffer"),
            turning,
        });
    }
    Ok(out)
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

impl PreparedDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        io(dir, std::fs::create_dir_all(dir))?;
        for (name, samples) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            let path = dir.join(format!("{name}.bin"));
            let mut w = BufWriter::new(io(&path, File::create(&path))?);
            io(&path, write_samples(&mut w, samples))?;
            io(&path, w.flush())?;
        }
        let path = dir.join("dataset.json");
        io(&path, std::fs::write(&path, serde_json::to_string_pretty(&self.meta)?))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        let meta: DatasetMeta = serde_json::from_str(&io(&path, std::fs::read_to_string(&path))?)?;
        let mut splits = Vec::new();
        for name in SPLITS {
            let path = dir.join(format!("{name}.bin"));
            let r = BufReader::new(io(&path, File::open(&path))?);
            splits.push(io(&path, read_samples(r))?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self {
            meta,
            train,
            val,
            test,
        })
    }
}
