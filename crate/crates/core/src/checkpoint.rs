//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, a JSON manifest (sorted keys, so
//! serialization is canonical), then named f64 sections with explicit
//! shapes. A save -> load -> save round trip is bit-exact.

use crate::error::{DfqError, Result};
use crate::nn::fakequant::FakeQuantModel;
use crate::nn::generator::GeneratorGraph;
use crate::nn::model::ModelGraph;
use crate::quantizer::{QuantConfig, RangeTracker};
use crate::scalar::Scalar;
use crate::stats::{Centroid, CentroidBank};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array1;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DFQCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub manifest: Value,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(manifest: Value) -> Self {
        Checkpoint {
            manifest,
            sections: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| DfqError::Checkpoint(e.to_string()))?;
        f.write_u64::<LittleEndian>(manifest.len() as u64)?;
        f.write_all(&manifest)?;
        f.write_u32::<LittleEndian>(self.sections.len() as u32)?;
        for s in &self.sections {
            let name = s.name.as_bytes();
            f.write_u32::<LittleEndian>(name.len() as u32)?;
            f.write_all(name)?;
            f.write_u32::<LittleEndian>(s.shape.len() as u32)?;
            for &d in &s.shape {
                f.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in &s.data {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path)
                .map_err(|_| DfqError::MissingArtifact(path.display().to_string()))?,
        );
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| DfqError::MalformedFile("truncated checkpoint header".into()))?;
        if &magic != MAGIC {
            return Err(DfqError::MalformedFile("bad checkpoint magic".into()));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(DfqError::MalformedFile(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mlen = f.read_u64::<LittleEndian>()? as usize;
        let mut mbytes = vec![0u8; mlen];
        f.read_exact(&mut mbytes)
            .map_err(|_| DfqError::MalformedFile("truncated manifest".into()))?;
        let manifest: Value = serde_json::from_slice(&mbytes)
            .map_err(|e| DfqError::MalformedFile(format!("manifest: {e}")))?;
        let nsec = f.read_u32::<LittleEndian>()? as usize;
        let mut sections = Vec::with_capacity(nsec);
        for _ in 0..nsec {
            let nlen = f.read_u32::<LittleEndian>()? as usize;
            let mut nbytes = vec![0u8; nlen];
            f.read_exact(&mut nbytes)
                .map_err(|_| DfqError::MalformedFile("truncated section name".into()))?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| DfqError::MalformedFile("section name not utf-8".into()))?;
            let ndim = f.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(f.read_u64::<LittleEndian>()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(
                    f.read_f64::<LittleEndian>()
                        .map_err(|_| DfqError::MalformedFile("truncated section data".into()))?,
                );
            }
            sections.push(Section { name, shape, data });
        }
        Ok(Checkpoint { manifest, sections })
    }

    pub fn add_model<F: Scalar>(&mut self, prefix: &str, model: &mut ModelGraph<F>) {
        let sections = &mut self.sections;
        model.visit_params(&mut |p| {
            sections.push(Section {
                name: format!("{prefix}/{}", p.name),
                shape: p.shape.clone(),
                data: p.value.iter().map(|v| v.to_real()).collect(),
            });
        });
        model.visit_state(&mut |s| {
            sections.push(Section {
                name: format!("{prefix}/{}", s.name),
                shape: s.shape.clone(),
                data: s.value.iter().map(|v| v.to_real()).collect(),
            });
        });
        self.manifest["components"][prefix] = json!({
            "kind": "model",
            "arch": model.arch,
            "num_classes": model.num_classes,
            "input_shape": model.input_shape,
        });
    }

    fn fill_from_sections<F: Scalar>(
        &self,
        prefix: &str,
        model: &mut ModelGraph<F>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        model.visit_params(&mut |p| {
            let name = format!("{prefix}/{}", p.name);
            match self.sections.iter().find(|s| s.name == name) {
                Some(sec) if sec.data.len() == p.value.len() => {
                    for (dst, src) in p.value.iter_mut().zip(&sec.data) {
                        *dst = F::from_real(*src);
                    }
                }
                _ => missing.push(name),
            }
        });
        model.visit_state(&mut |s| {
            let name = format!("{prefix}/{}", s.name);
            match self.sections.iter().find(|sec| sec.name == name) {
                Some(sec) if sec.data.len() == s.value.len() => {
                    for (dst, src) in s.value.iter_mut().zip(&sec.data) {
                        *dst = F::from_real(*src);
                    }
                }
                _ => missing.push(name),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DfqError::Checkpoint(format!(
                "missing or mismatched sections: {}",
                missing.join(", ")
            )))
        }
    }

    pub fn load_model<F: Scalar>(&self, prefix: &str) -> Result<ModelGraph<F>> {
        let comp = &self.manifest["components"][prefix];
        let arch = comp["arch"]
            .as_str()
            .ok_or_else(|| DfqError::Checkpoint(format!("no component {prefix}")))?;
        let num_classes = comp["num_classes"].as_u64().unwrap_or(0) as usize;
        let mut model = crate::nn::model::build_classifier::<F>(arch, num_classes, 0)?;
        self.fill_from_sections(prefix, &mut model)?;
        Ok(model)
    }

    pub fn add_generator<F: Scalar>(&mut self, prefix: &str, g: &mut GeneratorGraph<F>) {
        let sections = &mut self.sections;
        g.visit_params(&mut |p| {
            sections.push(Section {
                name: format!("{prefix}/{}", p.name),
                shape: p.shape.clone(),
                data: p.value.iter().map(|v| v.to_real()).collect(),
            });
        });
        g.visit_state(&mut |s| {
            sections.push(Section {
                name: format!("{prefix}/{}", s.name),
                shape: s.shape.clone(),
                data: s.value.iter().map(|v| v.to_real()).collect(),
            });
        });
        self.manifest["components"][prefix] = json!({
            "kind": "generator",
            "arch": g.trunk.arch,
            "num_classes": g.num_classes,
            "noise_dim": g.noise_dim,
        });
    }

    pub fn load_generator<F: Scalar>(&self, prefix: &str) -> Result<GeneratorGraph<F>> {
        let comp = &self.manifest["components"][prefix];
        let arch = comp["arch"]
            .as_str()
            .ok_or_else(|| DfqError::Checkpoint(format!("no component {prefix}")))?;
        let num_classes = comp["num_classes"].as_u64().unwrap_or(0) as usize;
        let mut g = crate::nn::generator::build_generator::<F>(arch, num_classes, 0)?;
        // embedding + trunk params and state share the model naming scheme
        let mut missing = Vec::new();
        g.visit_params(&mut |p| {
            let name = format!("{prefix}/{}", p.name);
            match self.sections.iter().find(|s| s.name == name) {
                Some(sec) if sec.data.len() == p.value.len() => {
                    for (dst, src) in p.value.iter_mut().zip(&sec.data) {
                        *dst = F::from_real(*src);
                    }
                }
                _ => missing.push(name),
            }
        });
        g.visit_state(&mut |s| {
            let name = format!("{prefix}/{}", s.name);
            match self.sections.iter().find(|sec| sec.name == name) {
                Some(sec) if sec.data.len() == s.value.len() => {
                    for (dst, src) in s.value.iter_mut().zip(&sec.data) {
                        *dst = F::from_real(*src);
                    }
                }
                _ => missing.push(name),
            }
        });
        if !missing.is_empty() {
            return Err(DfqError::Checkpoint(format!(
                "missing or mismatched sections: {}",
                missing.join(", ")
            )));
        }
        Ok(g)
    }

    pub fn add_quant_model<F: Scalar>(&mut self, prefix: &str, q: &mut FakeQuantModel<F>) {
        let base_prefix = format!("{prefix}/base");
        let mut base = std::mem::replace(
            &mut q.base,
            ModelGraph::new(Vec::new(), 0, "", Vec::new()),
        );
        self.add_model(&base_prefix, &mut base);
        q.base = base;
        self.manifest["components"][prefix] = json!({
            "kind": "quant_model",
            "cfg": q.cfg,
            "weight_alphas": q
                .weight_alphas
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<BTreeMap<String, f64>>(),
            "trackers": q
                .trackers
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::to_value(v).unwrap()))
                .collect::<BTreeMap<String, Value>>(),
        });
    }

    pub fn load_quant_model<F: Scalar>(&self, prefix: &str) -> Result<FakeQuantModel<F>> {
        let comp = &self.manifest["components"][prefix];
        let cfg: QuantConfig = serde_json::from_value(comp["cfg"].clone())
            .map_err(|e| DfqError::Checkpoint(format!("quant cfg: {e}")))?;
        let base = self.load_model::<F>(&format!("{prefix}/base"))?;
        let weight_alphas: BTreeMap<usize, f64> = comp["weight_alphas"]
            .as_object()
            .ok_or_else(|| DfqError::Checkpoint("missing weight_alphas".into()))?
            .iter()
            .map(|(k, v)| (k.parse::<usize>().unwrap(), v.as_f64().unwrap()))
            .collect();
        let trackers: BTreeMap<usize, RangeTracker> = comp["trackers"]
            .as_object()
            .ok_or_else(|| DfqError::Checkpoint("missing trackers".into()))?
            .iter()
            .map(|(k, v)| {
                (
                    k.parse::<usize>().unwrap(),
                    serde_json::from_value(v.clone()).unwrap(),
                )
            })
            .collect();
        Ok(FakeQuantModel {
            base,
            cfg,
            weight_alphas,
            trackers,
        })
    }

    pub fn add_bank<F: Scalar>(&mut self, prefix: &str, bank: &CentroidBank<F>) {
        for (&(l, c), centroid) in &bank.entries {
            self.sections.push(Section {
                name: format!("{prefix}/l{l:03}.c{c:03}.mean"),
                shape: vec![centroid.mean.len()],
                data: centroid.mean.iter().map(|v| v.to_real()).collect(),
            });
            self.sections.push(Section {
                name: format!("{prefix}/l{l:03}.c{c:03}.std"),
                shape: vec![centroid.std.len()],
                data: centroid.std.iter().map(|v| v.to_real()).collect(),
            });
        }
        self.manifest["components"][prefix] = json!({
            "kind": "centroid_bank",
            "l_st": bank.l_st,
            "decay": bank.decay.to_real(),
            "keys": bank
                .entries
                .keys()
                .map(|&(l, c)| vec![l, c])
                .collect::<Vec<_>>(),
        });
    }

    pub fn load_bank<F: Scalar>(&self, prefix: &str) -> Result<CentroidBank<F>> {
        let comp = &self.manifest["components"][prefix];
        let l_st = comp["l_st"]
            .as_u64()
            .ok_or_else(|| DfqError::Checkpoint(format!("no component {prefix}")))?
            as usize;
        let decay = F::from_real(comp["decay"].as_f64().unwrap_or(0.0));
        let mut bank = CentroidBank::new(l_st, decay);
        for key in comp["keys"].as_array().unwrap_or(&Vec::new()) {
            let l = key[0].as_u64().unwrap() as usize;
            let c = key[1].as_u64().unwrap() as usize;
            let mean = self
                .get(&format!("{prefix}/l{l:03}.c{c:03}.mean"))
                .ok_or_else(|| DfqError::Checkpoint("missing centroid mean".into()))?;
            let std = self
                .get(&format!("{prefix}/l{l:03}.c{c:03}.std"))
                .ok_or_else(|| DfqError::Checkpoint("missing centroid std".into()))?;
            bank.entries.insert(
                (l, c),
                Centroid {
                    mean: Array1::from_iter(mean.data.iter().map(|&v| F::from_real(v))),
                    std: Array1::from_iter(std.data.iter().map(|&v| F::from_real(v))),
                },
            );
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::build_classifier;

    #[test]
    fn model_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let path2 = dir.path().join("m2.ckpt");
        let mut m = build_classifier::<f64>("tiny-cnn-6", 10, 42).unwrap();
        let mut ck = Checkpoint::new(json!({"seed": 42}));
        ck.add_model("teacher", &mut m);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut m2 = loaded.load_model::<f64>("teacher").unwrap();
        assert_eq!(m.content_hash(), m2.content_hash());
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bank_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut bank = CentroidBank::<f64>::new(4, 0.2);
        bank.entries.insert(
            (4, 1),
            Centroid {
                mean: ndarray::arr1(&[1.0, -2.0]),
                std: ndarray::arr1(&[0.5, 0.25]),
            },
        );
        let mut ck = Checkpoint::new(json!({}));
        ck.add_bank("bank", &bank);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().load_bank::<f64>("bank").unwrap();
        assert_eq!(loaded, bank);
    }
}
