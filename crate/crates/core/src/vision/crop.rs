//! Dynamic multi-crop planning: tile a high-resolution image into a grid
//! of fixed-size crops, falling back to an aspect-ratio-matched grid when
//! the natural tiling would exceed the crop budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How one image is resized and tiled before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CropPlan {
    pub rows: usize,
    pub cols: usize,
    pub resize_h: usize,
    pub resize_w: usize,
    pub fallback_used: bool,
}

impl CropPlan {
    pub fn crop_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Geometry of the crop encoder and the per-stage crop budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionEncoderConfig {
    /// Side length of one square crop in pixels.
    pub crop_size: usize,
    /// Side length of one square patch inside a crop.
    pub patch: usize,
    /// Encoder feature width.
    pub width: usize,
    pub n_heads: usize,
    pub max_crops_pretrain: usize,
    pub max_crops_sft: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            crop_size: 448,
            patch: 32,
            width: 64,
            n_heads: 4,
            max_crops_pretrain: 16,
            max_crops_sft: 36,
        }
    }
}

impl VisionEncoderConfig {
    /// Production-scale geometry (SigLIP-class encoder width); kept as
    /// metadata — the test suite never instantiates weights at this size.
    pub fn full_scale() -> Self {
        Self {
            crop_size: 448,
            patch: 14,
            width: 1152,
            n_heads: 16,
            max_crops_pretrain: 16,
            max_crops_sft: 36,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.patch == 0 || self.width == 0 || self.n_heads == 0 {
            return Err(Error::Config("vision encoder dims must be >= 1".into()));
        }
        if self.crop_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "crop_size {} is not a multiple of patch {}",
                self.crop_size, self.patch
            )));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by n_heads {}",
                self.width, self.n_heads
            )));
        }
        if (self.width / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.width / self.n_heads
            )));
        }
        if self.max_crops_pretrain == 0 || self.max_crops_sft == 0 {
            return Err(Error::Config("crop budgets must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.crop_size / self.patch
    }

    /// Patch tokens produced per crop.
    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Flattened input width of one patch (RGB).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }
}

/// Choose the crop grid for an H x W image. The natural tiling
/// ceil(H/C) x ceil(W/C) is kept whenever it fits the budget (so images
/// no larger than one crop always map to a single crop); otherwise the
/// grid comes from [`fallback_aspect_grid`]. The resize target is always
/// an exact multiple of the crop size on both sides.
pub fn plan_crops(h: usize, w: usize, c: usize, max_crops: usize) -> Result<CropPlan> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("image dims must be >= 1, got {h}x{w}")));
    }
    if c == 0 || max_crops == 0 {
        return Err(Error::Config("crop size and budget must be >= 1".into()));
    }
    let rows = h.div_ceil(c);
    let cols = w.div_ceil(c);
    let (rows, cols, fallback_used) = if rows * cols <= max_crops {
        (rows, cols, false)
    } else {
        let (r, cc) = fallback_aspect_grid(h, w, max_crops);
        (r, cc, true)
    };
    Ok(CropPlan {
        rows,
        cols,
        resize_h: rows * c,
        resize_w: cols * c,
        fallback_used,
    })
}

/// Over all grids with 1 <= rows*cols <= max_crops, pick the one whose
/// rows/cols ratio is closest to h/w; ties go to the larger grid, then to
/// more rows. Comparisons are exact (integer cross-multiplication), so the
/// argmin is independent of floating-point rounding.
pub fn fallback_aspect_grid(h: usize, w: usize, max_crops: usize) -> (usize, usize) {
    let mut best = (1usize, 1usize);
    for r in 1..=max_crops {
        for c in 1..=max_crops / r {
            if closer(r, c, best, h, w) {
                best = (r, c);
            }
        }
    }
    best
}

/// True when grid (r, c) beats `best` under the objective above.
/// |r/c - h/w| < |br/bc - h/w| cross-multiplies (w > 0 cancels) to
/// |r*w - c*h| * bc < |br*w - bc*h| * c.
fn closer(r: usize, c: usize, best: (usize, usize), h: usize, w: usize) -> bool {
    let (br, bc) = best;
    let lhs = (r as u128 * w as u128).abs_diff(c as u128 * h as u128) * bc as u128;
    let rhs = (br as u128 * w as u128).abs_diff(bc as u128 * h as u128) * c as u128;
    if lhs != rhs {
        return lhs < rhs;
    }
    if r * c != br * bc {
        return r * c > br * bc;
    }
    r > br
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_image_keeps_single_crop() {
        let plan = plan_crops(28, 448, 448, 16).unwrap();
        assert_eq!((plan.rows, plan.cols), (1, 1));
        assert_eq!((plan.resize_h, plan.resize_w), (448, 448));
        assert!(!plan.fallback_used);
    }

    #[test]
    fn exact_multiple_tiles_directly() {
        let plan = plan_crops(896, 896, 448, 16).unwrap();
        assert_eq!((plan.rows, plan.cols), (2, 2));
        assert_eq!((plan.resize_h, plan.resize_w), (896, 896));
        assert!(!plan.fallback_used);
    }

    #[test]
    fn over_budget_takes_fallback() {
        // ceil(2000/448) * ceil(3000/448) = 5 * 7 = 35 > 16.
        let plan = plan_crops(2000, 3000, 448, 16).unwrap();
        assert!(plan.fallback_used);
        assert!(plan.crop_count() <= 16);
        // 2000/3000 = 2/3 is matched exactly by (2, 3) and no larger
        // in-budget grid hits it exactly.
        assert_eq!((plan.rows, plan.cols), (2, 3));
        assert_eq!((plan.resize_h, plan.resize_w), (896, 1344));
    }

    #[test]
    fn square_fallback_prefers_largest_square() {
        assert_eq!(fallback_aspect_grid(1000, 1000, 16), (4, 4));
        assert_eq!(fallback_aspect_grid(7000, 7000, 36), (6, 6));
    }

    #[test]
    fn budget_one_is_single_crop() {
        assert_eq!(fallback_aspect_grid(123, 4567, 1), (1, 1));
        let plan = plan_crops(5000, 5000, 448, 1).unwrap();
        assert_eq!((plan.rows, plan.cols), (1, 1));
        assert!(plan.fallback_used);
    }

    #[test]
    fn fallback_matches_float_enumeration() {
        // Independent check of the exact-integer comparison against a
        // straightforward floating-point enumeration.
        for &(h, w) in &[(2000, 3000), (515, 3001), (4096, 1), (1, 4096), (997, 998)] {
            for &max in &[2usize, 5, 16, 36] {
                let got = fallback_aspect_grid(h, w, max);
                let target = h as f64 / w as f64;
                let mut best = (1usize, 1usize);
                let mut best_err = (1.0f64 - target).abs();
                for r in 1..=max {
                    for c in 1..=max {
                        if r * c > max {
                            continue;
                        }
                        let err = (r as f64 / c as f64 - target).abs();
                        let better = err < best_err
                            || (err == best_err
                                && (r * c > best.0 * best.1
                                    || (r * c == best.0 * best.1 && r > best.0)));
                        if better {
                            best = (r, c);
                            best_err = err;
                        }
                    }
                }
                assert_eq!(got, best, "h={h} w={w} max={max}");
            }
        }
    }

    #[test]
    fn primary_branch_iff_natural_grid_fits() {
        for h in (1..=2048).step_by(97) {
            for w in (1..=2048).step_by(89) {
                let plan = plan_crops(h, w, 448, 16).unwrap();
                let natural = h.div_ceil(448) * w.div_ceil(448);
                assert_eq!(plan.fallback_used, natural > 16);
                assert!(plan.crop_count() <= 16);
                assert_eq!(plan.resize_h % 448, 0);
                assert_eq!(plan.resize_w % 448, 0);
                if !plan.fallback_used {
                    assert_eq!(plan.rows, h.div_ceil(448));
                    assert_eq!(plan.cols, w.div_ceil(448));
                }
            }
        }
    }

    #[test]
    fn zero_inputs_rejected() {
        assert!(plan_crops(0, 10, 448, 16).is_err());
        assert!(plan_crops(10, 0, 448, 16).is_err());
        assert!(plan_crops(10, 10, 0, 16).is_err());
        assert!(plan_crops(10, 10, 448, 0).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        VisionEncoderConfig::default().validate().unwrap();
        VisionEncoderConfig::full_scale().validate().unwrap();
        let cfg = VisionEncoderConfig::default();
        assert_eq!(cfg.n_patches(), 196);
        assert_eq!(cfg.patch_dim(), 32 * 32 * 3);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = VisionEncoderConfig::default();
        cfg.patch = 30; // 448 % 30 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = VisionEncoderConfig::default();
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = VisionEncoderConfig::default();
        cfg.width = 4;
        cfg.n_heads = 4; // head dim 1 is odd
        assert!(cfg.validate().is_err());
    }
}
