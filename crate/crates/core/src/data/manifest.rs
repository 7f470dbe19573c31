//! Text manifests listing pre-extracted face/UV frame pairs.
//!
//! ```text
//! dfvt-manifest v1
//! <id>\t<label>\t<T>\t<face_1>,...,<face_T>\t<uv_1>,...,<uv_T>
//! ```
//!
//! Relative frame paths are resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::ppm::{read_ppm, write_ppm};
use super::{Dataset, FrameSample, Label, VideoSample};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "dfvt-manifest v1";

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Manifest {
                line: 1,
                message: format!("expected header {MANIFEST_HEADER:?}, found {h:?}"),
            })
        }
        None => {
            return Err(Error::Manifest {
                line: 1,
                message: "empty file, missing header".into(),
            })
        }
    }
    let mut videos = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, t, faces, uvs] = fields[..] else {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
        };
        let label = label
            .parse::<usize>()
            .ok()
            .and_then(|l| Label::from_index(l).ok())
            .ok_or_else(|| bad(format!("label {label:?} is not 0 or 1")))?;
        let t: usize = t
            .parse()
            .map_err(|_| bad(format!("frame count {t:?} is not a non-negative integer")))?;
        let faces: Vec<&str> = faces.split(',').collect();
        let uvs: Vec<&str> = uvs.split(',').collect();
        if t == 0 || faces.len() != t || uvs.len() != t {
            return Err(bad(format!(
                "frame count {t} disagrees with {} face and {} uv paths",
                faces.len(),
                uvs.len()
            )));
        }
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut frames = Vec::with_capacity(t);
        for (f, u) in faces.iter().zip(&uvs) {
            let face = read_ppm(&resolve(f))?;
            let uv = read_ppm(&resolve(u))?;
            frames.push(FrameSample::new(face, uv).map_err(|e| bad(e.to_string()))?);
        }
        videos.push(VideoSample {
            id: id.to_string(),
            label,
            frames,
        });
    }
    Ok(Dataset::new(videos))
}

/// Writes every frame as P6 images under `dir/frames/` and a manifest at
/// `dir/manifest.tsv`, returning the manifest path.
pub fn write_manifest(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for v in &dataset.videos {
        if v.id.is_empty() || v.id.contains(['\t', '\n', ',', '/', '\\']) {
            return Err(Error::data(format!("video id {:?} cannot be written to a manifest", v.id)));
        }
        let mut faces = Vec::with_capacity(v.frames.len());
        let mut uvs = Vec::with_capacity(v.frames.len());
        for (t, f) in v.frames.iter().enumerate() {
            let face = format!("frames/{}_{t:03}_face.ppm", v.id);
            let uv = format!("frames/{}_{t:03}_uv.ppm", v.id);
            write_ppm(&dir.join(&face), &f.face)?;
            write_ppm(&dir.join(&uv), &f.uv)?;
            faces.push(face);
            uvs.push(uv);
        }
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            v.id,
            v.label.index(),
            v.frames.len(),
            faces.join(","),
            uvs.join(",")
        ));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
