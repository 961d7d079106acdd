//! Binary checkpoint format.
//!
//! Layout: magic "FPRNN1", version byte, entry count (u32), then per array:
//! name length (u16), UTF-8 name, dtype tag (0 = f32, 1 = f64), rank (u8),
//! dims (u32 each), little-endian IEEE-754 payload. Arrays are stored as
//! f32 unless the f64 flag is set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::{SequenceModel, VisitArrays};
use crate::{FpError, Result};

const MAGIC: &[u8; 6] = b"FPRNN1";

pub fn save_model(path: &Path, model: &SequenceModel, f64_payload: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.for_each(&mut |name, view| {
        entries.push((name, view.dims(), view.data().to_vec()));
    });
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[1u8])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, dims, data) in &entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[if f64_payload { 1u8 } else { 0u8 }])?;
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        if f64_payload {
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        } else {
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path, model: &mut SequenceModel) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FpError::Format("bad checkpoint magic".into()));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != 1 {
        return Err(FpError::Format(format!(
            "unsupported checkpoint version {}",
            ver[0]
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;

    let mut entries = std::collections::HashMap::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| FpError::Format("bad name".into()))?;
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag)?;
        let (dtype, rank) = (tag[0], tag[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)?;
            dims.push(u32::from_le_bytes(buf4) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            0 => {
                for _ in 0..n {
                    r.read_exact(&mut buf4)?;
                    data.push(f32::from_le_bytes(buf4) as f64);
                }
            }
            1 => {
                let mut buf8 = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf8)?;
                    data.push(f64::from_le_bytes(buf8));
                }
            }
            other => {
                return Err(FpError::Format(format!("unknown dtype tag {other}")));
            }
        }
        entries.insert(name, (dims, data));
    }

    let mut missing = Vec::new();
    model.for_each_mut(&mut |name, mut view| {
        match entries.remove(&name) {
            Some((dims, data)) => {
                let slice = view.data_mut();
                if data.len() != slice.len() {
                    missing.push(format!("{name}: size {} vs {}", data.len(), slice.len()));
                } else {
                    slice.copy_from_slice(&data);
                }
                let _ = dims;
            }
            None => missing.push(format!("{name}: absent from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(FpError::Format(format!(
            "checkpoint does not match model: {}",
            missing.join("; ")
        )));
    }
    if !entries.is_empty() {
        return Err(FpError::Format(format!(
            "checkpoint has {} unknown arrays",
            entries.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed_point::FixedPointConfig;
    use crate::mixers::MixerVariant;
    use crate::model::{ModelConfig, ModelKind};
    use crate::scan::ScanMode;

    fn cfg() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::FpMamba,
            vocab: 5,
            d_model: 8,
            expansion: 2,
            d_state: 4,
            n_layers: 2,
            mixer_variant: MixerVariant::Kronecker,
            rank_r: 1,
            mixer_hidden_dependence: true,
            y_dep_bc: true,
            contraction_eps: 0.01,
            alpha_rescale: false,
            scan_mode: ScanMode::Parallel,
        }
    }

    #[test]
    fn save_load_reproduces_forward_bitwise() {
        let dir = std::env::temp_dir().join(format!("fprnn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");

        let model = SequenceModel::new(&cfg(), 11).unwrap();
        save_model(&path, &model, true).unwrap();
        let mut loaded_a = SequenceModel::new(&cfg(), 99).unwrap();
        load_model(&path, &mut loaded_a).unwrap();
        let mut loaded_b = SequenceModel::new(&cfg(), 123).unwrap();
        load_model(&path, &mut loaded_b).unwrap();

        let tokens = vec![vec![0u32, 3, 1, 4, 2]];
        let fp = FixedPointConfig::eval_default();
        let fa = loaded_a.forward_solve(&tokens, &fp, 0, None).unwrap();
        let fb = loaded_b.forward_solve(&tokens, &fp, 0, None).unwrap();
        for (sa, sb) in fa.final_out[0].iter().zip(fb.final_out[0].iter()) {
            assert_eq!(sa.data, sb.data);
        }
        // With the f64 flag the loaded model matches the source bitwise.
        let fs = model.forward_solve(&tokens, &fp, 0, None).unwrap();
        for (sa, sb) in fa.final_out[0].iter().zip(fs.final_out[0].iter()) {
            assert_eq!(sa.data, sb.data);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn f32_storage_round_trips_stably() {
        let dir = std::env::temp_dir().join(format!("fprnn-ckpt32-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path_a = dir.join("a.bin");
        let path_b = dir.join("b.bin");

        let model = SequenceModel::new(&cfg(), 4).unwrap();
        save_model(&path_a, &model, false).unwrap();
        let mut once = SequenceModel::new(&cfg(), 5).unwrap();
        load_model(&path_a, &mut once).unwrap();
        // Saving the rounded model again is byte-identical.
        save_model(&path_b, &once, false).unwrap();
        assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = std::env::temp_dir().join(format!("fprnn-ckpt-mm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let model = SequenceModel::new(&cfg(), 1).unwrap();
        save_model(&path, &model, false).unwrap();
        let mut other_cfg = cfg();
        other_cfg.n_layers = 1;
        let mut other = SequenceModel::new(&other_cfg, 1).unwrap();
        assert!(load_model(&path, &mut other).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
