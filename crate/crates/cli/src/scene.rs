//! Scene files: a JSON manifest naming one T3F payload per pyramid level,
//! plus the planted ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpdpm::detector::Hypothesis;
use cpdpm::harness::SyntheticScene;
use cpdpm::io::{read_t3f, write_t3f};
use cpdpm::sepconv::FeatureMap;
use serde::{Deserialize, Serialize};

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Planted {
    level: usize,
    root: [usize; 2],
    parts: Vec<[usize; 2]>,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    version: u32,
    seed: u64,
    noise_level: f64,
    levels: Vec<String>,
    planted: Vec<Planted>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Write `scene` as a manifest at `path` with `{stem}.level{k}.t3f` beside it.
/// Feature values are stored as `f32`.
pub fn save_scene(path: &Path, scene: &SyntheticScene) -> Result<()> {
    let dir = base_dir(path);
    let stem = stem(path);
    let mut levels = Vec::with_capacity(scene.pyramid.len());
    for (k, map) in scene.pyramid.iter().enumerate() {
        let name = format!("{stem}.level{k}.t3f");
        write_t3f(dir.join(&name), map.tensor())?;
        levels.push(name);
    }
    let manifest = SceneManifest {
        version: SCENE_VERSION,
        seed: scene.seed,
        noise_level: scene.noise_level,
        levels,
        planted: scene
            .planted
            .iter()
            .map(|h| Planted {
                level: h.level,
                root: [h.root.0, h.root.1],
                parts: h.parts.iter().map(|p| [p.0, p.1]).collect(),
                score: h.score,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_scene(path: &Path) -> Result<SyntheticScene> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| cpdpm::Error::Json { path: path.to_path_buf(), source: e })?;
    if manifest.version != SCENE_VERSION {
        bail!(cpdpm::Error::InvalidModel(format!(
            "{}: scene version {} is not supported",
            path.display(),
            manifest.version
        )));
    }
    let dir = base_dir(path);
    let pyramid = manifest
        .levels
        .iter()
        .map(|name| read_t3f(dir.join(name)).map(FeatureMap::new))
        .collect::<cpdpm::Result<Vec<_>>>()?;
    let mut planted = Vec::with_capacity(manifest.planted.len());
    for p in manifest.planted {
        let Some(map) = pyramid.get(p.level) else {
            bail!(cpdpm::Error::InvalidModel(format!(
                "{}: planted object on missing level {}",
                path.display(),
                p.level
            )));
        };
        let inside = |q: [usize; 2]| q[0] < map.height() && q[1] < map.width();
        if !inside(p.root) || !p.parts.iter().all(|&q| inside(q)) {
            bail!(cpdpm::Error::InvalidModel(format!(
                "{}: planted object at {:?} lies outside level {}",
                path.display(),
                p.root,
                p.level
            )));
        }
        planted.push(Hypothesis {
            level: p.level,
            root: (p.root[0], p.root[1]),
            parts: p.parts.iter().map(|q| (q[0], q[1])).collect(),
            score: p.score,
        });
    }
    Ok(SyntheticScene {
        pyramid,
        planted,
        noise_level: manifest.noise_level,
        seed: manifest.seed,
    })
}
