//! Dataset export: a JSON Lines manifest next to PPM images.
//!
//! Each manifest line holds one record:
//!
//! ```json
//! {"task":"editing","condition_text":"make the circle blue","target_text":null,
//!  "scene":{...},"source_scene":{...},"image":"000003_image.ppm","source_image":"000003_source.ppm"}
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mixture::{SampleRecord, Task};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::imageio::{read_ppm, write_ppm};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    task: Task,
    condition_text: Option<String>,
    target_text: Option<String>,
    scene: Option<Scene>,
    source_scene: Option<Scene>,
    image: Option<String>,
    source_image: Option<String>,
}

pub fn write_dataset(dir: &Path, records: &[SampleRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for (i, r) in records.iter().enumerate() {
        let mut line = ManifestLine {
            task: r.task,
            condition_text: r.condition_text.clone(),
            target_text: r.target_text.clone(),
            scene: r.scene.clone(),
            source_scene: r.source_scene.clone(),
            image: None,
            source_image: None,
        };
        if let Some(img) = &r.image {
            let name = format!("{i:06}_image.ppm");
            write_ppm(&dir.join(&name), img)?;
            line.image = Some(name);
        }
        if let Some(img) = &r.source_image {
            let name = format!("{i:06}_source.ppm");
            write_ppm(&dir.join(&name), img)?;
            line.source_image = Some(name);
        }
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let load = |name: &Option<String>| name.as_ref().map(|n| read_ppm(&dir.join(n))).transpose();
        records.push(SampleRecord {
            task: m.task,
            condition_text: m.condition_text,
            target_text: m.target_text,
            image: load(&m.image)?,
            source_image: load(&m.source_image)?,
            scene: m.scene,
            source_scene: m.source_scene,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mixture::{sample_batch, DataConfig, MixtureConfig, SceneSource, Stage};
    use crate::rng::Stream;

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Stream::new(3);
        let src = SceneSource::Procedural { max_objects: 2 };
        let cfg = DataConfig::default();
        let mut records = sample_batch(&MixtureConfig::default(), Stage::Pretrain, 40, &src, &cfg, &s.fork(0));
        records.extend(sample_batch(
            &MixtureConfig::default(),
            Stage::Sft,
            40,
            &src,
            &cfg,
            &s.fork(1),
        ));
        write_dataset(dir.path(), &records).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), records);
    }
}
