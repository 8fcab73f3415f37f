//! Qualitative reconstruction dumps: per task, a grid of
//! masked / unprompted / prompted / ground-truth panels as PNG files.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::data::{Corpus, TaskSpec};
use crate::error::Result;
use crate::masking::{extract_restore, make_mask_plan, reconstruct, MaskPlan};
use crate::math::Scalar;
use crate::model::params::Model;
use crate::prompts::TransmittedParams;
use crate::rng::stream;

fn to_rgb<F: Scalar>(pixels: &Array3<F>, x: usize, y: usize) -> Rgb<u8> {
    let channels = pixels.dim().0;
    let grab = |ch: usize| -> u8 {
        let v = pixels[[ch.min(channels - 1), y, x]].as_f64();
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    Rgb([grab(0), grab(1), grab(2)])
}

fn masked_view<F: Scalar>(model: &Model<F>, image: &Array3<F>, plan: &MaskPlan) -> Array3<F> {
    let cfg = &model.config;
    let grid = cfg.image_side / cfg.patch_side;
    let gray = F::of(0.5);
    let mut out = image.clone();
    for &patch in &plan.masked_sorted() {
        let (gr, gc) = (patch / grid, patch % grid);
        for ch in 0..cfg.channels {
            for py in 0..cfg.patch_side {
                for px in 0..cfg.patch_side {
                    out[[ch, gr * cfg.patch_side + py, gc * cfg.patch_side + px]] = gray;
                }
            }
        }
    }
    out
}

const GAP: usize = 2;

/// Render a grid (one row per sample, one column per panel) into a PNG.
fn render_grid<F: Scalar>(rows: &[Vec<Array3<F>>], side: usize, path: &Path) -> Result<()> {
    let cols = rows.first().map_or(0, |r| r.len());
    let width = cols * side + (cols.saturating_sub(1)) * GAP;
    let height = rows.len() * side + (rows.len().saturating_sub(1)) * GAP;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let ox = c * (side + GAP);
            let oy = r * (side + GAP);
            for y in 0..side {
                for x in 0..side {
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, to_rgb(panel, x, y));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| crate::error::Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Write `task_<t>.png` with up to four samples of this task's test split:
/// masked input, unprompted reconstruction, prompted reconstruction, and the
/// ground truth.
pub fn dump_task_panels(
    model: &Model<f32>,
    w: &TransmittedParams<f32>,
    corpus: &Corpus<f32>,
    task: &TaskSpec,
    task_id: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for (slot, &idx) in task.test.iter().take(4).enumerate() {
        let image = &corpus.test[idx].pixels;
        let mut rng = stream(0xd0d0, &[task_id as u64, slot as u64]);
        let plan = make_mask_plan(model.config.num_patches(), model.config.mask_ratio, &mut rng)?;
        let restore = extract_restore(model, image, corpus.test[idx].label, &plan)?;
        let unprompted = reconstruct(model, &restore, None)?;
        let prompted = reconstruct(model, &restore, Some(&w.recon))?;
        rows.push(vec![
            masked_view(model, image, &plan),
            unprompted.pixels,
            prompted.pixels,
            image.clone(),
        ]);
    }
    render_grid(&rows, model.config.image_side, &dir.join(format!("task_{task_id}.png")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_tasks, synthetic_corpus};
    use crate::model::config::ModelConfig;
    use crate::prompts::init_params;

    #[test]
    fn panels_are_written() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 1).unwrap();
        let corpus = synthetic_corpus(2, 2, 3, 8, 1, 4);
        let tasks = split_tasks(&corpus, 1, &mut stream(1, &[])).unwrap();
        let w = init_params(&ModelConfig::tiny(), 2, &mut stream(2, &[])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_task_panels(&model, &w, &corpus, &tasks.tasks[0], 0, dir.path()).unwrap();
        let path = dir.path().join("task_0.png");
        assert!(path.exists());
        let img = image::open(&path).unwrap().to_rgb8();
        // 4 panels of 8px + 3 gaps of 2px wide; 4 samples tall (6 available, capped)
        assert_eq!(img.width(), 4 * 8 + 3 * 2);
        assert_eq!(img.height(), 4 * 8 + 3 * 2);
    }

    #[test]
    fn masked_view_grays_exactly_the_masked_patches() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 1).unwrap();
        let image = Array3::from_elem((1, 8, 8), 1.0f32);
        let plan = MaskPlan::new(vec![0, 1, 2, 3], 2).unwrap();
        let masked = masked_view(&model, &image, &plan);
        // patches 2 and 3 are masked: bottom half of the 2x2 patch grid
        assert_eq!(masked[[0, 0, 0]], 1.0);
        assert_eq!(masked[[0, 4, 0]], 0.5);
        assert_eq!(masked[[0, 7, 7]], 0.5);
    }
}
