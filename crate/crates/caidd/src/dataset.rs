//! Synthetic dataset export and import: PNGs plus a text manifest.
//!
//! Manifest lines read `filename identity pose_yaw gaze_x gaze_y gaze_z lighting`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use caidd_core::synthfaces::SyntheticDataset;
use caidd_core::ImageTensor;

use crate::error::{Error, Result};
use crate::images::{load_png, save_png};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub filename: String,
    pub identity: usize,
    pub pose_yaw: f64,
    pub gaze: [f64; 3],
    pub lighting: f64,
}

pub fn export(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    let mut text = String::new();
    for (i, (face, &id)) in ds.faces.iter().zip(&ds.identities).enumerate() {
        let filename = format!("face_{:05}.png", i);
        save_png(&face.image, &dir.join(&filename))?;
        let p = &face.params;
        let e = ManifestEntry {
            filename,
            identity: id,
            pose_yaw: p.pose_yaw,
            gaze: p.gaze,
            lighting: p.lighting,
        };
        writeln!(
            text,
            "{} {} {} {} {} {} {}",
            e.filename, e.identity, e.pose_yaw, e.gaze[0], e.gaze[1], e.gaze[2], e.lighting
        )
        .expect("String");
        entries.push(e);
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let bad = || Error::format(&path, format!("line {}: `{}`", n + 1, l));
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let r = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(ManifestEntry {
                filename: f[0].to_string(),
                identity: f[1].parse().map_err(|_| bad())?,
                pose_yaw: r(2)?,
                gaze: [r(3)?, r(4)?, r(5)?],
                lighting: r(6)?,
            })
        })
        .collect()
}

/// Rejects manifests whose gaze vectors are not unit length within `tol`.
pub fn validate_manifest(entries: &[ManifestEntry], tol: f64) -> Result<()> {
    for e in entries {
        let n = e.gaze.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > tol {
            return Err(caidd_core::Error::contract(format!("{}: gaze norm {}", e.filename, n)).into());
        }
    }
    Ok(())
}

/// Images listed in the manifest of `dir`, in manifest order.
pub fn import(dir: &Path, size: usize) -> Result<(Vec<ManifestEntry>, Vec<ImageTensor>)> {
    let entries = read_manifest(dir)?;
    let images = entries
        .iter()
        .map(|e| load_png(&dir.join(&e.filename), size))
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, images))
}

pub fn image_path(dir: &Path, e: &ManifestEntry) -> PathBuf {
    dir.join(&e.filename)
}
