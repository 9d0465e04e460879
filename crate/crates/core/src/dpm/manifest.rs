//! JSON manifest plus binary filter payloads.
//!
//! The manifest holds scalars and geometry, and names one payload file per
//! filter relative to the manifest's directory. Payloads are T3F for dense
//! models and CPF for decomposed ones; the kind is read from each payload's
//! magic. The schema lives in `docs/schema/model_manifest.schema.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    validate, DecomposedFilter, DecomposedModel, DecomposedPart, Deformation, PartGeometry, PartModel, PartSpec,
    PruningThresholds, Violation,
};
use crate::cp::CPModel;
use crate::error::{Error, Result};
use crate::io::{decode_cpf, decode_t3f, encode_cpf, encode_t3f, sniff, PayloadKind};
use crate::tensor::Tensor3;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPart {
    pub payload: String,
    pub anchor: [i64; 2],
    pub deformation: [f64; 4],
    pub search_radius: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub id: String,
    pub channels: usize,
    pub bias: f64,
    pub root: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_thresholds: Option<Vec<f64>>,
    pub parts: Vec<ManifestPart>,
}

/// Either kind of model, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedModel {
    Dense(PartModel),
    Decomposed(DecomposedModel),
}

impl LoadedModel {
    pub fn id(&self) -> &str {
        match self {
            LoadedModel::Dense(m) => &m.id,
            LoadedModel::Decomposed(m) => &m.id,
        }
    }
}

fn payload_names(manifest_path: &Path, parts: usize, ext: &str) -> (String, Vec<String>) {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    let root = format!("{stem}.root.{ext}");
    let parts = (0..parts).map(|i| format!("{stem}.part{i}.{ext}")).collect();
    (root, parts)
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn geometry_entry(payload: String, g: &PartGeometry) -> ManifestPart {
    ManifestPart {
        payload,
        anchor: [g.anchor.0, g.anchor.1],
        deformation: g.deformation.to_array(),
        search_radius: g.search_radius,
        thresholds: None,
        rank: None,
    }
}

fn reject(problems: Vec<Violation>) -> Result<()> {
    if problems.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
    Err(Error::InvalidModel(list.join("; ")))
}

/// Write a dense model as a manifest at `path` plus T3F payloads beside it.
///
/// Filter elements are stored as `f32`.
pub fn save_model(path: impl AsRef<Path>, model: &PartModel) -> Result<()> {
    let path = path.as_ref();
    reject(validate(model))?;
    let dir = base_dir(path);
    let (root_name, part_names) = payload_names(path, model.parts.len(), "t3f");
    write_bytes(&dir.join(&root_name), &encode_t3f(&model.root)?)?;
    let mut parts = Vec::with_capacity(model.parts.len());
    for (p, name) in model.parts.iter().zip(part_names) {
        write_bytes(&dir.join(&name), &encode_t3f(&p.filter)?)?;
        parts.push(geometry_entry(name, &p.geometry));
    }
    write_manifest(
        path,
        &Manifest {
            version: MANIFEST_VERSION,
            id: model.id.clone(),
            channels: model.channels(),
            bias: model.bias,
            root: root_name,
            root_rank: None,
            root_thresholds: None,
            parts,
        },
    )
}

/// Write a decomposed model as a manifest at `path` plus CPF payloads
/// beside it, with ranks and any thresholds in the manifest.
pub fn save_decomposed(path: impl AsRef<Path>, model: &DecomposedModel) -> Result<()> {
    let path = path.as_ref();
    reject(model.violations())?;
    let dir = base_dir(path);
    let (root_name, part_names) = payload_names(path, model.parts.len(), "cpf");
    write_bytes(&dir.join(&root_name), &encode_cpf(&model.root.cp)?)?;
    let mut parts = Vec::with_capacity(model.parts.len());
    for (p, name) in model.parts.iter().zip(part_names) {
        write_bytes(&dir.join(&name), &encode_cpf(&p.filter.cp)?)?;
        let mut entry = geometry_entry(name, &p.geometry);
        entry.rank = Some(p.filter.cp.rank());
        entry.thresholds = p.filter.thresholds.as_ref().map(|t| t.values().to_vec());
        parts.push(entry);
    }
    write_manifest(
        path,
        &Manifest {
            version: MANIFEST_VERSION,
            id: model.id.clone(),
            channels: model.channels(),
            bias: model.bias,
            root: root_name,
            root_rank: Some(model.root.cp.rank()),
            root_thresholds: model.root.thresholds.as_ref().map(|t| t.values().to_vec()),
            parts,
        },
    )
}

enum Payload {
    Dense(Tensor3),
    Decomposed(CPModel),
}

fn read_payload(dir: &Path, name: &str, field: &str) -> Result<Payload> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let tag = |e: Error| e.in_filter(format!("{field} ({})", path.display()));
    match sniff(&bytes) {
        Some(PayloadKind::Dense) => decode_t3f(&bytes).map(Payload::Dense).map_err(tag),
        Some(PayloadKind::Decomposed) => decode_cpf(&bytes).map(Payload::Decomposed).map_err(tag),
        None => Err(tag(Error::Malformed {
            format: "payload",
            offset: 0,
            reason: "unknown magic".into(),
        })),
    }
}

fn thresholds(values: &Option<Vec<f64>>, field: &str) -> Result<Option<PruningThresholds>> {
    values
        .as_ref()
        .map(|v| PruningThresholds::new(v.clone()).map_err(|e| e.in_filter(field)))
        .transpose()
}

fn check_rank(declared: Option<usize>, actual: usize, field: &str) -> Result<()> {
    match declared {
        Some(r) if r != actual => Err(Error::InvalidModel(format!(
            "{field}: manifest rank {r} but payload rank {actual}"
        ))),
        _ => Ok(()),
    }
}

/// Read a manifest and its payloads.
pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::InvalidModel(format!(
            "version: unsupported manifest version {}",
            manifest.version
        )));
    }
    let dir = base_dir(path);
    let root = read_payload(&dir, &manifest.root, "root")?;
    let mut parts = Vec::with_capacity(manifest.parts.len());
    for (i, p) in manifest.parts.iter().enumerate() {
        parts.push(read_payload(&dir, &p.payload, &format!("parts[{i}]"))?);
    }
    let geometry = |p: &ManifestPart| PartGeometry {
        anchor: (p.anchor[0], p.anchor[1]),
        deformation: Deformation::from_array(p.deformation),
        search_radius: p.search_radius,
    };

    let loaded = match root {
        Payload::Dense(root) => {
            if manifest.root_rank.is_some() || manifest.root_thresholds.is_some() {
                return Err(Error::InvalidModel("root: rank or thresholds given for a dense payload".into()));
            }
            let mut specs = Vec::with_capacity(parts.len());
            for (i, (payload, entry)) in parts.into_iter().zip(&manifest.parts).enumerate() {
                let Payload::Dense(filter) = payload else {
                    return Err(Error::InvalidModel(format!(
                        "parts[{i}]: decomposed payload in a dense model"
                    )));
                };
                if entry.rank.is_some() || entry.thresholds.is_some() {
                    return Err(Error::InvalidModel(format!(
                        "parts[{i}]: rank or thresholds given for a dense payload"
                    )));
                }
                specs.push(PartSpec {
                    filter,
                    geometry: geometry(entry),
                });
            }
            let model = PartModel {
                id: manifest.id.clone(),
                root,
                parts: specs,
                bias: manifest.bias,
            };
            reject(validate(&model))?;
            LoadedModel::Dense(model)
        }
        Payload::Decomposed(root_cp) => {
            check_rank(manifest.root_rank, root_cp.rank(), "root")?;
            let root = DecomposedFilter {
                cp: root_cp,
                thresholds: thresholds(&manifest.root_thresholds, "root")?,
            };
            let mut dparts = Vec::with_capacity(parts.len());
            for (i, (payload, entry)) in parts.into_iter().zip(&manifest.parts).enumerate() {
                let field = format!("parts[{i}]");
                let Payload::Decomposed(cp) = payload else {
                    return Err(Error::InvalidModel(format!("{field}: dense payload in a decomposed model")));
                };
                check_rank(entry.rank, cp.rank(), &field)?;
                dparts.push(DecomposedPart {
                    filter: DecomposedFilter {
                        cp,
                        thresholds: thresholds(&entry.thresholds, &field)?,
                    },
                    geometry: geometry(entry),
                });
            }
            let model = DecomposedModel {
                id: manifest.id.clone(),
                root,
                parts: dparts,
                bias: manifest.bias,
            };
            reject(model.violations())?;
            LoadedModel::Decomposed(model)
        }
    };

    let channels = match &loaded {
        LoadedModel::Dense(m) => m.channels(),
        LoadedModel::Decomposed(m) => m.channels(),
    };
    if channels != manifest.channels {
        return Err(Error::InvalidModel(format!(
            "channels: manifest says {} but root filter has {channels}",
            manifest.channels
        )));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::AlsOptions;
    use crate::dpm::{decompose_model, RankSpec};

    fn sample(parts: usize) -> PartModel {
        // Multiples of 1/8 are exact in f32.
        let filt = |dims, s: usize| Tensor3::from_fn(dims, |i, j, k| ((i * 5 + j * 3 + k + s) % 7) as f64 / 8.0 - 0.375);
        PartModel {
            id: "toy".into(),
            root: filt((3, 4, 2), 0),
            parts: (0..parts)
                .map(|i| PartSpec {
                    filter: filt((2, 2, 2), i + 1),
                    geometry: PartGeometry {
                        anchor: (i as i64 - 1, 1),
                        deformation: Deformation::new(0.1, -0.2, 0.05, 0.3),
                        search_radius: 2 + i,
                    },
                })
                .collect(),
            bias: -1.25,
        }
    }

    #[test]
    fn dense_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        for parts in [0, 3] {
            let m = sample(parts);
            save_model(&path, &m).unwrap();
            assert_eq!(load_model(&path).unwrap(), LoadedModel::Dense(m));
        }
    }

    #[test]
    fn decomposed_round_trip_keeps_thresholds_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dec.json");
        let mut dec = decompose_model(&sample(2), &RankSpec::RootParts { root: 2, parts: 1 }, &AlsOptions::default())
            .unwrap()
            .model;
        dec.root.thresholds = Some(PruningThresholds::new(vec![0.1, -1.0 / 3.0]).unwrap());
        dec.parts[1].filter.thresholds = Some(PruningThresholds::new(vec![2.5e-7]).unwrap());
        save_decomposed(&path, &dec).unwrap();
        let LoadedModel::Decomposed(back) = load_model(&path).unwrap() else {
            panic!("expected decomposed model");
        };
        assert_eq!(back.ranks(), dec.ranks());
        assert_eq!(back.root.thresholds, dec.root.thresholds);
        assert_eq!(back.parts[1].filter.thresholds, dec.parts[1].filter.thresholds);
        assert_eq!(back.parts[0].filter.thresholds, None);
        let before = fs::read(dir.path().join("dec.root.cpf")).unwrap();
        save_decomposed(&path, &back).unwrap();
        assert_eq!(fs::read(dir.path().join("dec.root.cpf")).unwrap(), before);
        let LoadedModel::Decomposed(again) = load_model(&path).unwrap() else {
            panic!("expected decomposed model");
        };
        assert_eq!(again, back);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        save_model(&path, &sample(1)).unwrap();
        let part = dir.path().join("toy.part0.t3f");
        let bytes = fs::read(&part).unwrap();
        fs::write(&part, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("parts[0]") && err.contains("byte"), "{err}");
    }

    #[test]
    fn malformed_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, b"{\"version\": 1, \"channels\": 2").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Json { .. })));
        fs::write(&path, b"{\"version\": 1, \"channels\": 2, \"bias\": 0, \"root\": \"x\", \"parts\": [], \"extra\": 1}")
            .unwrap();
        assert!(matches!(load_model(&path), Err(Error::Json { .. })));
    }

    #[test]
    fn inconsistent_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        save_model(&path, &sample(1)).unwrap();
        let original = fs::read_to_string(&path).unwrap();

        let wrong_channels = original.replace("\"channels\": 2", "\"channels\": 3");
        fs::write(&path, wrong_channels).unwrap();
        assert!(matches!(load_model(&path), Err(Error::InvalidModel(_))));

        let bad_version = original.replace("\"version\": 1", "\"version\": 9");
        fs::write(&path, bad_version).unwrap();
        assert!(matches!(load_model(&path), Err(Error::InvalidModel(_))));

        let negative = original.replace("0.3", "-0.3");
        fs::write(&path, negative).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("c_dyy"), "{err}");
    }
}
