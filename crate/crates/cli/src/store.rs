//! On-disk layout of frame and pair directories.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use densecontrast::dataset::{DepthFrame, ScenePair};
use densecontrast::io::write_atomic;
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliResult};

pub const FRAME_EXT: &str = "pcfd";
pub const PAIR_INDEX: &str = "pairs.json";

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:05}.{FRAME_EXT}")
}

pub fn write_frame(dir: &Path, k: usize, frame: &DepthFrame<f64>) -> CliResult<PathBuf> {
    let path = dir.join(frame_file_name(k));
    let mut bytes = Vec::new();
    frame.write_to(&mut bytes)?;
    write_atomic(&path, &bytes)?;
    Ok(path)
}

/// Frames of one directory in file-name order.
pub fn read_frames(dir: &Path) -> CliResult<Vec<DepthFrame<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| validation(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FRAME_EXT))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let mut r = BufReader::new(File::open(p)?);
            DepthFrame::read_from(&mut r).map_err(|e| validation(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub file: String,
    pub scene_id: String,
    pub frames: (usize, usize),
    pub overlap: f64,
}

/// Index written next to the pair files; records the mining parameters so
/// loaders can recheck every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    pub radius: f64,
    pub overlap_threshold: f64,
    pub voxel_size: f64,
    pub stride: usize,
    pub pairs: Vec<PairEntry>,
}

pub fn pair_file_name(p: &ScenePair<f64>) -> String {
    format!("{}_{:05}_{:05}.pcpr", p.scene_id, p.frame_ids.0, p.frame_ids.1)
}

pub fn write_pair(dir: &Path, p: &ScenePair<f64>) -> CliResult<String> {
    let name = pair_file_name(p);
    let mut bytes = Vec::new();
    p.write_to(&mut bytes)?;
    write_atomic(&dir.join(&name), &bytes)?;
    Ok(name)
}

pub fn write_index(dir: &Path, index: &PairIndex) -> CliResult<()> {
    write_atomic(&dir.join(PAIR_INDEX), serde_json::to_string_pretty(index)?.as_bytes())?;
    Ok(())
}

/// Loads every pair listed in the index and rechecks its overlap.
pub fn read_pairs(dir: &Path) -> CliResult<Vec<ScenePair<f64>>> {
    let index_path = dir.join(PAIR_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| validation(format!("{}: {e}", index_path.display())))?;
    let index: PairIndex =
        serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", index_path.display())))?;
    index
        .pairs
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let mut r = BufReader::new(File::open(&path).map_err(|e| validation(format!("{}: {e}", path.display())))?);
            let pair = ScenePair::read_from(&mut r, &entry.scene_id, entry.frames)
                .and_then(|p| p.revalidate(index.radius, index.overlap_threshold).map(|_| p))
                .map_err(|e| validation(format!("{}: {e}", path.display())))?;
            Ok(pair)
        })
        .collect()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}
