//! Patch budgeting for native-resolution encoding.
//!
//! Computes, for any source resolution, the planned resolution and token
//! counts under a patch-size-14, 2x2-merge scheme: sides snap to multiples
//! of `patch_size * merge`, then scale to respect per-image token caps and
//! an optional MaxRes side limit. Token caps are post-merge counts.

use crate::taxonomy::ImageDims;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BudgetError {
    #[error("invalid budget config: {0}")]
    InvalidConfig(String),
    #[error("side {side} is not a multiple of patch size {patch_size}")]
    SideNotAligned { side: u32, patch_size: u32 },
}

/// Token budget settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// ViT patch side in pixels.
    pub patch_size: u32,
    /// Merge grid factor; 2 means 2x2 average pooling (4x token reduction).
    pub merge: u32,
    /// Minimum post-merge tokens per image.
    pub min_tokens: u64,
    /// Maximum post-merge tokens per image.
    pub max_tokens: u64,
    /// Optional cap on either planned side, in pixels.
    pub max_res: Option<u32>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            merge: 2,
            min_tokens: 4,
            max_tokens: 2048,
            max_res: None,
        }
    }
}

impl BudgetConfig {
    /// Pixel side of one merged cell (`patch_size * merge`), the rounding unit.
    pub fn unit(&self) -> u32 {
        self.patch_size * self.merge
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.patch_size == 0 || self.merge == 0 {
            return Err(BudgetError::InvalidConfig(
                "patch_size and merge must be positive".into(),
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(BudgetError::InvalidConfig(format!(
                "need 1 <= min_tokens <= max_tokens, got {}..{}",
                self.min_tokens, self.max_tokens
            )));
        }
        if let Some(max_res) = self.max_res {
            let units = u64::from(max_res / self.unit());
            if units * units < self.min_tokens {
                return Err(BudgetError::InvalidConfig(format!(
                    "max_res {} admits at most {} post-merge tokens, below min_tokens {}",
                    max_res,
                    units * units,
                    self.min_tokens
                )));
            }
        }
        Ok(())
    }
}

/// Resize decision and token counts for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub source: ImageDims,
    pub planned: ImageDims,
    /// Patch grid height (planned_height / patch_size).
    pub grid_rows: u32,
    /// Patch grid width (planned_width / patch_size).
    pub grid_cols: u32,
    pub pre_merge_tokens: u64,
    pub post_merge_tokens: u64,
}

/// Round to the nearest positive multiple of `unit`; ties round up.
fn round_to_unit(px: f64, unit: u32) -> u32 {
    let units = (px / f64::from(unit) + 0.5).floor().max(1.0);
    units as u32 * unit
}

/// Post-merge token count for unit-aligned sides: one token per merged cell.
fn post_merge(w: u32, h: u32, cfg: &BudgetConfig) -> u64 {
    let unit = u64::from(cfg.unit());
    (u64::from(w) / unit) * (u64::from(h) / unit)
}

/// Compute the patch plan for one source resolution.
///
/// Sides snap to the nearest multiple of `patch_size * merge` (minimum one
/// merged cell per side), then scale down uniformly if the post-merge token
/// count exceeds `max_tokens` or a side exceeds `max_res`, then scale up
/// uniformly if the count falls below `min_tokens`.
///
/// Aspect ratio is preserved up to side quantization: each side moves by at
/// most half a unit at the initial snap and loses under one unit to the
/// floored downscale, so the planned ratio stays within 12% of the source
/// once both sides span at least 9 merged units (252px at the defaults).
/// Below that the relative unit is coarse enough that the bound genuinely
/// fails -- 127x124 snaps to 140x112, drifting the ratio 22% -- so callers
/// padding tiny images should not rely on the planner to keep their shape.
pub fn plan(dims: ImageDims, cfg: &BudgetConfig) -> Result<PatchPlan, BudgetError> {
    cfg.validate()?;
    let unit = cfg.unit();
    let mut w = round_to_unit(f64::from(dims.width()), unit);
    let mut h = round_to_unit(f64::from(dims.height()), unit);

    // side cap expressed in whole units
    let side_cap = cfg.max_res.map(|m| (m / unit).max(1) * unit);

    // Downscale toward the caps in one pass, re-rounding by floor. Floor is
    // what makes post_merge_tokens monotone in max_tokens: a larger cap gives
    // a larger scale, and flooring preserves that order side by side. Nearest
    // re-rounding does not -- it can round a side up past the cap and leave
    // the trim below to shave the *other* side, so a higher cap could end at
    // fewer tokens (e.g. 7854x4942 at caps 3883 vs 3890). Floor also keeps
    // the planned product at or under the cap immediately, since the real
    // scaled sides multiply out to exactly max_tokens.
    let over_cap = post_merge(w, h, cfg) > cfg.max_tokens;
    let over_res = side_cap.is_some_and(|cap| w > cap || h > cap);
    if over_cap || over_res {
        let mut scale = (cfg.max_tokens as f64 / post_merge(w, h, cfg) as f64)
            .sqrt()
            .min(1.0);
        if let Some(cap) = side_cap {
            scale = scale
                .min(f64::from(cap) / f64::from(w))
                .min(f64::from(cap) / f64::from(h));
        }
        w = ((f64::from(w) * scale / f64::from(unit)).floor() as u32).max(1) * unit;
        h = ((f64::from(h) * scale / f64::from(unit)).floor() as u32).max(1) * unit;
    }
    // the 1-unit clamp on a sliver side can leave the count over the cap;
    // shave the long side until it fits
    while post_merge(w, h, cfg) > cfg.max_tokens && (w > unit || h > unit) {
        if w >= h && w > unit {
            w -= unit;
        } else {
            h -= unit;
        }
    }

    // upscale toward the floor
    for _ in 0..2 {
        if post_merge(w, h, cfg) >= cfg.min_tokens {
            break;
        }
        let scale = (cfg.min_tokens as f64 / post_merge(w, h, cfg) as f64).sqrt();
        w = ((f64::from(w) * scale / f64::from(unit)).ceil() as u32).max(1) * unit;
        h = ((f64::from(h) * scale / f64::from(unit)).ceil() as u32).max(1) * unit;
    }

    let planned = ImageDims::new(w, h).expect("planned sides are positive");
    Ok(plan_from_planned(dims, planned, cfg))
}

fn plan_from_planned(source: ImageDims, planned: ImageDims, cfg: &BudgetConfig) -> PatchPlan {
    let grid_rows = planned.height() / cfg.patch_size;
    let grid_cols = planned.width() / cfg.patch_size;
    let pre = u64::from(grid_rows) * u64::from(grid_cols);
    let m = u64::from(cfg.merge);
    // ceil division per side; equals pre / merge^2 on merge-aligned grids
    let post = u64::from(grid_rows).div_ceil(m) * u64::from(grid_cols).div_ceil(m);
    PatchPlan {
        source,
        planned,
        grid_rows,
        grid_cols,
        pre_merge_tokens: pre,
        post_merge_tokens: post,
    }
}

/// Largest square side, a multiple of `patch_size * merge`, whose post-merge
/// token count fits the cap. This is the MaxRes implied by a token budget.
pub fn max_square_side(cap: u64, cfg: &BudgetConfig) -> u32 {
    let units = (cap as f64).sqrt().floor() as u64;
    // floating sqrt can land one off near perfect squares; settle exactly
    let units = if (units + 1) * (units + 1) <= cap {
        units + 1
    } else if units * units > cap {
        units - 1
    } else {
        units
    };
    (units.max(1) as u32) * cfg.unit()
}

/// Fixed-resolution baseline: plan every image to `side x side` regardless of
/// source aspect ratio. `side` must be a multiple of `patch_size`; it need
/// not be merge-aligned (the 378 baseline yields an odd 27x27 grid, which the
/// encoder rejects but the token accounting still reports).
pub fn fixed_res_plan(
    dims: ImageDims,
    side: u32,
    cfg: &BudgetConfig,
) -> Result<PatchPlan, BudgetError> {
    cfg.validate()?;
    if side == 0 || !side.is_multiple_of(cfg.patch_size) {
        return Err(BudgetError::SideNotAligned {
            side,
            patch_size: cfg.patch_size,
        });
    }
    let planned = ImageDims::new(side, side).expect("side is positive");
    Ok(plan_from_planned(dims, planned, cfg))
}
