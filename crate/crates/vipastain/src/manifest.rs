//! Dataset manifest (CSV) and box annotations (JSON lines).
//!
//! Manifest header: `patch_id,stain,split,image_path,mask_paths,annotation_path`.
//! `mask_paths` is a `;`-joined list. An H&E patch and its virtual CD20
//! counterpart are paired by sharing the same `patch_id` across rows.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgutil::StainDomain;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub patch_id: String,
    pub stain: StainDomain,
    pub split: String,
    pub image_path: PathBuf,
    pub mask_paths: Vec<PathBuf>,
    pub annotation_path: Option<PathBuf>,
}

impl ManifestRow {
    /// Slide a patch belongs to. Tiled patches follow the
    /// `{slide_id}_x{origin_x}_y{origin_y}` naming convention; anything else
    /// is its own slide.
    pub fn slide_id(&self) -> &str {
        slide_id_of(&self.patch_id)
    }
}

pub fn slide_id_of(patch_id: &str) -> &str {
    if let Some(xpos) = patch_id.rfind("_x") {
        let rest = &patch_id[xpos + 2..];
        if let Some(ypos) = rest.find("_y") {
            let (xs, ys) = (&rest[..ypos], &rest[ypos + 2..]);
            if !xs.is_empty()
                && !ys.is_empty()
                && xs.bytes().all(|b| b.is_ascii_digit())
                && ys.bytes().all(|b| b.is_ascii_digit())
            {
                return &patch_id[..xpos];
            }
        }
    }
    patch_id
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
        w.write_record([
            "patch_id",
            "stain",
            "split",
            "image_path",
            "mask_paths",
            "annotation_path",
        ])
        .map_err(|e| Error::Manifest(e.to_string()))?;
        for r in &self.rows {
            let masks = r
                .mask_paths
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(";");
            let ann = r
                .annotation_path
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default();
            w.write_record([
                r.patch_id.as_str(),
                r.stain.as_str(),
                r.split.as_str(),
                &r.image_path.to_string_lossy(),
                &masks,
                &ann,
            ])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| {
            Error::Manifest(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Manifest(e.to_string()))?;
            if rec.len() != 6 {
                return Err(Error::Manifest(format!(
                    "manifest row has {} fields, expected 6",
                    rec.len()
                )));
            }
            let mask_paths = if rec[4].is_empty() {
                Vec::new()
            } else {
                rec[4].split(';').map(PathBuf::from).collect()
            };
            rows.push(ManifestRow {
                patch_id: rec[0].to_string(),
                stain: StainDomain::parse(&rec[1])?,
                split: rec[2].to_string(),
                image_path: PathBuf::from(&rec[3]),
                mask_paths,
                annotation_path: if rec[5].is_empty() {
                    None
                } else {
                    Some(PathBuf::from(&rec[5]))
                },
            });
        }
        Ok(DatasetManifest { rows })
    }

    /// Rows grouped by patch_id, insertion order within groups preserved.
    pub fn by_patch_id(&self) -> BTreeMap<&str, Vec<&ManifestRow>> {
        let mut map: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
        for r in &self.rows {
            map.entry(r.patch_id.as_str()).or_default().push(r);
        }
        map
    }
}

/// One annotation record per patch: TLS boxes in pixel coordinates,
/// origin top-left.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub patch_id: String,
    pub boxes: Vec<[f64; 4]>,
}

pub fn save_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for a in anns {
        let line = serde_json::to_string(a).map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut anns = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        anns.push(serde_json::from_str(&line).map_err(|e| Error::Manifest(e.to_string()))?);
    }
    Ok(anns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slide_id_convention() {
        assert_eq!(slide_id_of("slideA_x512_y1024"), "slideA");
        assert_eq!(slide_id_of("synth0001"), "synth0001");
        assert_eq!(slide_id_of("weird_x_y"), "weird_x_y");
        assert_eq!(slide_id_of("s_x12_y0"), "s");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DatasetManifest {
            rows: vec![ManifestRow {
                patch_id: "p0".into(),
                stain: StainDomain::He,
                split: "train".into(),
                image_path: "img/p0.png".into(),
                mask_paths: vec!["m/a.png".into(), "m/b.png".into()],
                annotation_path: Some("ann.jsonl".into()),
            }],
        };
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let anns = vec![Annotation {
            patch_id: "p0".into(),
            boxes: vec![[1.0, 2.0, 10.0, 12.0]],
        }];
        save_annotations(&path, &anns).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), anns);
    }
}
