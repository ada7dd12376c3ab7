//! SSCK: binary checkpoint container.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic      b"SSCK"
//! version    u16
//! text_len   u32, then UTF-8 "key=value\n" lines: cfg.*, meta.*, norm.*
//! n_params   u32
//! per param: name_len u16 + UTF-8 name, rank u8, rank x u32 dims,
//!            f32 payload (row-major)
//! ```

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u16 = 1;

/// A trained (or freshly initialized) model: configuration, parameters, and
/// free-form metadata such as training provenance and normalization stats.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore<f32>) -> Result<Checkpoint> {
        params.validate_inventory(&config)?;
        Ok(Checkpoint { config, params, meta: BTreeMap::new() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;

        let mut text = String::new();
        for (k, v) in self.config.to_kv() {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            if v.contains('\n') {
                return Err(Error::Format(format!("metadata value for '{k}' contains newline")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        w.write_u32::<LittleEndian>(text.len() as u32)?;
        w.write_all(text.as_bytes())?;

        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, value) in self.params.iter() {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(value.ndim() as u8)?;
            for &d in value.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            let contiguous = value.as_standard_layout();
            for &x in contiguous.as_slice().expect("standard layout") {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {magic:?}, not a checkpoint",
                path.display()
            )));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.read_u32::<LittleEndian>()? as usize;
        let mut text = vec![0u8; text_len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text)
            .map_err(|e| Error::Format(format!("checkpoint text section: {e}")))?;
        let mut kv = std::collections::HashMap::new();
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format(format!("malformed checkpoint line '{line}'")));
            };
            if k.starts_with("cfg.") {
                kv.insert(k.to_string(), v.to_string());
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let config = ModelConfig::from_kv(&kv)?;

        let n_params = r.read_u32::<LittleEndian>()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("parameter name: {e}")))?;
            let rank = r.read_u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            params.insert(&name, value)?;
        }
        params.validate_inventory(&config)?;
        Ok(Checkpoint { config, params, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, param_count, ModelConfig};

    #[test]
    fn save_load_roundtrip() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f32>(&cfg, 5);
        let mut ckpt = Checkpoint::new(cfg.clone(), params).unwrap();
        ckpt.meta.insert("meta.steps".into(), "12".into());
        ckpt.meta.insert("norm.irr_scale".into(), "1042.5".into());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssck");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.config, cfg);
        assert_eq!(back.meta.get("meta.steps").map(String::as_str), Some("12"));
        assert_eq!(back.params.element_count(), param_count(&cfg));
        for ((n1, v1), (n2, v2)) in ckpt.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "parameter {n1} corrupted by roundtrip");
        }
    }

    #[test]
    fn serialized_total_matches_param_count() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 6);
        assert_eq!(params.element_count(), param_count(&cfg));
    }

    #[test]
    fn missing_parameter_rejected() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f32>(&cfg, 7);
        let mut wrong = cfg.clone();
        wrong.n_afno_layers += 1;
        assert!(Checkpoint::new(wrong, params).is_err());
    }
}
