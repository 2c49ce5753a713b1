//! Figure-style exports: embedding-similarity heatmaps, cascade mask
//! overlays, and selected-query dots. Every image ships with a JSON sidecar
//! carrying the raw values, so pixels stay checkable.

use crate::imageio::{write_pgm, write_ppm};
use crate::numerics::cosine_similarity;
use crate::pipeline::{Diagnostics, SelectedQuery};
use crate::synthdata::Scene;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Min-max normalize to 0..=255. A constant map renders black.
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8).collect()
}

/// Cosine similarity between the final embedding and every cell of every
/// level grid, one row-major map per level.
pub fn similarity_maps(diag: &Diagnostics) -> Vec<Vec<f64>> {
    let emb = &diag.embedding_final;
    diag.level_grids
        .iter()
        .map(|grid| {
            let (rows, cols) = (grid.shape[0], grid.shape[1]);
            (0..rows)
                .map(|r| cosine_similarity(emb, &grid.data[r * cols..(r + 1) * cols]))
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimilaritySidecar {
    pub scene: usize,
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub scene: usize,
    pub iteration: usize,
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub activated: usize,
    pub mask: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuerySidecar {
    pub scene: usize,
    pub canvas: usize,
    pub selected: Vec<SelectedQuery>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::Error::InvalidArgument(format!("sidecar serialization: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// One embedding-similarity heatmap per level: `sim-l<level>.pgm` plus
/// `sim-l<level>.json`. Returns the written paths.
pub fn write_similarity_heatmaps(
    dir: &Path,
    scene_id: usize,
    diag: &Diagnostics,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let maps = similarity_maps(diag);
    let mut written = Vec::new();
    for (summary, values) in diag.levels.iter().zip(&maps) {
        let bytes = normalize_to_bytes(values);
        let pgm = dir.join(format!("sim-l{}.pgm", summary.level));
        write_pgm(&pgm, summary.w, summary.h, &bytes)?;
        let sidecar = dir.join(format!("sim-l{}.json", summary.level));
        write_json(
            &sidecar,
            &SimilaritySidecar {
                scene: scene_id,
                level: summary.level,
                h: summary.h,
                w: summary.w,
                min: values.iter().cloned().fold(f64::INFINITY, f64::min),
                max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                values: values.clone(),
            },
        )?;
        written.push(pgm);
        written.push(sidecar);
    }
    Ok(written)
}

/// One activated-cell overlay per cascade visit:
/// `mask-i<iteration>-l<level>.pgm` plus its sidecar.
pub fn write_mask_overlays(dir: &Path, scene_id: usize, diag: &Diagnostics) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for visit in &diag.masks.visits {
        let bytes: Vec<u8> = visit.mask.iter().map(|&on| if on { 255 } else { 0 }).collect();
        let pgm = dir.join(format!("mask-i{}-l{}.pgm", visit.iteration, visit.level));
        write_pgm(&pgm, visit.w, visit.h, &bytes)?;
        let sidecar = dir.join(format!("mask-i{}-l{}.json", visit.iteration, visit.level));
        write_json(
            &sidecar,
            &MaskSidecar {
                scene: scene_id,
                iteration: visit.iteration,
                level: visit.level,
                h: visit.h,
                w: visit.w,
                activated: visit.activated,
                mask: visit.mask.iter().map(|&b| b as u8).collect(),
            },
        )?;
        written.push(pgm);
        written.push(sidecar);
    }
    Ok(written)
}

/// The scene with a green dot on every selected query position:
/// `queries.ppm` plus `queries.json`.
pub fn write_query_overlay(dir: &Path, scene: &Scene, diag: &Diagnostics) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let canvas = scene.canvas;
    let mut rgb = scene.pixels.clone();
    for q in &diag.selected {
        let cx = ((q.position.0 * canvas as f64) as isize).clamp(0, canvas as isize - 1);
        let cy = ((q.position.1 * canvas as f64) as isize).clamp(0, canvas as isize - 1);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let x = cx + dx;
                let y = cy + dy;
                if x < 0 || y < 0 || x >= canvas as isize || y >= canvas as isize {
                    continue;
                }
                let at = (y as usize * canvas + x as usize) * 3;
                rgb[at] = 0;
                rgb[at + 1] = 255;
                rgb[at + 2] = 0;
            }
        }
    }
    let ppm = dir.join("queries.ppm");
    write_ppm(&ppm, canvas, canvas, &rgb)?;
    let sidecar = dir.join("queries.json");
    write_json(
        &sidecar,
        &QuerySidecar { scene: scene.id, canvas, selected: diag.selected.clone() },
    )?;
    Ok(vec![ppm, sidecar])
}

/// All exports for one scene, under `dir`.
pub fn export_scene(dir: &Path, scene: &Scene, diag: &Diagnostics) -> Result<Vec<PathBuf>> {
    let mut written = write_similarity_heatmaps(dir, scene.id, diag)?;
    written.extend(write_mask_overlays(dir, scene.id, diag)?);
    written.extend(write_query_overlay(dir, scene, diag)?);
    Ok(written)
}
