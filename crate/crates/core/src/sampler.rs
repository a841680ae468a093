//! Multi-scale dense sampling grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch sides of the default nine-scale pyramid, for a 256-pixel image.
pub const DEFAULT_SCALES: [u32; 9] = [64, 80, 96, 112, 128, 144, 160, 176, 192];
pub const DEFAULT_IMAGE_SIDE: u32 = 256;
pub const DEFAULT_GRID: u32 = 10;

/// A square patch at `(x, y)` with side `side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub flipped: bool,
    pub scale_index: usize,
}

impl std::fmt::Display for PatchRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.scale_index, self.x, self.y, self.side, self.flipped as u8
        )
    }
}

/// Evenly spaced offsets `round(i * (image_side - side) / (grid - 1))`, both
/// borders included. Rounding is half away from zero.
pub fn grid_offsets(image_side: u32, side: u32, grid: u32) -> Vec<u32> {
    if grid == 1 {
        return vec![0];
    }
    let span = (image_side - side) as f64;
    (0..grid)
        .map(|i| (i as f64 * span / (grid - 1) as f64).round() as u32)
        .collect()
}

/// All patch rectangles, scale-major, then row (y), then column (x), then flip.
pub fn sample_grid(image_side: u32, scales: &[u32], grid: u32, with_flips: bool) -> Result<Vec<PatchRect>> {
    if scales.is_empty() {
        return Err(Error::EmptyScales);
    }
    if grid == 0 {
        return Err(Error::InvalidGrid);
    }
    if let Some(&scale) = scales.iter().find(|&&s| s > image_side || s == 0) {
        return Err(Error::ScaleTooLarge { scale, image_side });
    }
    let flips: &[bool] = if with_flips { &[false, true] } else { &[false] };
    let per_scale = (grid * grid) as usize * flips.len();
    let mut out = Vec::with_capacity(scales.len() * per_scale);
    for (scale_index, &side) in scales.iter().enumerate() {
        let offsets = grid_offsets(image_side, side, grid);
        for &y in &offsets {
            for &x in &offsets {
                for &flipped in flips {
                    out.push(PatchRect {
                        x,
                        y,
                        side,
                        flipped,
                        scale_index,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_200_patches_per_scale() {
        let rects = sample_grid(256, &DEFAULT_SCALES, 10, true).unwrap();
        assert_eq!(rects.len(), 1800);
        for s in 0..DEFAULT_SCALES.len() {
            assert_eq!(rects.iter().filter(|r| r.scale_index == s).count(), 200);
        }
    }

    #[test]
    fn offsets_for_64_pixel_patches() {
        assert_eq!(
            grid_offsets(256, 64, 10),
            vec![0, 21, 43, 64, 85, 107, 128, 149, 171, 192]
        );
    }

    #[test]
    fn whole_image_patch() {
        let rects = sample_grid(128, &[128], 1, false).unwrap();
        assert_eq!(
            rects,
            vec![PatchRect {
                x: 0,
                y: 0,
                side: 128,
                flipped: false,
                scale_index: 0
            }]
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(sample_grid(100, &[], 3, false), Err(Error::EmptyScales)));
        assert!(matches!(
            sample_grid(100, &[64, 128], 3, false),
            Err(Error::ScaleTooLarge { scale: 128, .. })
        ));
        assert!(matches!(sample_grid(100, &[64], 0, false), Err(Error::InvalidGrid)));
    }

    #[test]
    fn exhaustive_bounds_symmetry_and_count() {
        for image_side in [32u32, 97, 256] {
            for side in (1..=image_side).step_by(7) {
                for grid in 1..=12 {
                    for flips in [false, true] {
                        let rects = sample_grid(image_side, &[side], grid, flips).unwrap();
                        assert_eq!(rects.len(), (grid * grid) as usize * (1 + flips as usize));
                        assert!(rects
                            .iter()
                            .all(|r| r.x + r.side <= image_side && r.y + r.side <= image_side));
                        let off = grid_offsets(image_side, side, grid);
                        if grid > 1 {
                            for i in 0..grid as usize {
                                let sum = off[i] as i64 + off[grid as usize - 1 - i] as i64;
                                assert!((sum - (image_side - side) as i64).abs() <= 1);
                            }
                        }
                    }
                }
            }
        }
    }
}
