//! Resolution / aspect-ratio taxonomy.
//!
//! Classifies image dimensions into seven area bins (A..G, built on a
//! 384x384 base unit) and five aspect-ratio bins (BW, AW, NM, AH, BH),
//! forming the 7x5 grid used by distribution analysis and reporting.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Pixel dimensions of an image. Both sides are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    width: u32,
    height: u32,
}

/// Error for zero-sized dimensions.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("image dimensions must be at least 1x1, got {width}x{height}")]
pub struct InvalidDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, InvalidDims> {
        if width == 0 || height == 0 {
            return Err(InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Total pixel area, `width * height`.
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// Aspect ratio `width / height`.
    pub fn ratio(&self) -> f64 {
        f64::from(self.width) / f64::from(self.height)
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Area bins, smallest to largest. The partition is half-open on the right:
/// a bin covers `[lo, hi)` in pixel-area units, and G is unbounded above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AreaBin {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

/// Upper bounds of bins A..F; derived from the 384x384 base unit
/// (100^2, 384^2, (2*384)^2, ... (5*384)^2).
const AREA_UPPER_BOUNDS: [u64; 6] = [10_000, 147_456, 589_824, 1_327_104, 2_359_296, 3_686_400];

impl AreaBin {
    pub const ALL: [AreaBin; 7] = [
        AreaBin::A,
        AreaBin::B,
        AreaBin::C,
        AreaBin::D,
        AreaBin::E,
        AreaBin::F,
        AreaBin::G,
    ];

    /// Index 0..7 in A..G order.
    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn label(&self) -> &'static str {
        match self {
            AreaBin::A => "A",
            AreaBin::B => "B",
            AreaBin::C => "C",
            AreaBin::D => "D",
            AreaBin::E => "E",
            AreaBin::F => "F",
            AreaBin::G => "G",
        }
    }

    /// The `[lo, hi)` pixel-area interval covered by this bin (`hi` is None for G).
    pub fn bounds(&self) -> (u64, Option<u64>) {
        let i = self.index();
        let lo = if i == 0 { 1 } else { AREA_UPPER_BOUNDS[i - 1] };
        let hi = AREA_UPPER_BOUNDS.get(i).copied();
        (lo, hi)
    }
}

impl fmt::Display for AreaBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Aspect-ratio bins in the fixed emission order: very wide, wide, medium,
/// tall, very tall. Boundaries close so the partition of (0, inf) is total:
/// BW is `r > 4`, AW is `(2, 4]`, NM is `[1/2, 2]`, AH is `[1/4, 1/2)`,
/// BH is `r < 1/4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RatioBin {
    Bw,
    Aw,
    Nm,
    Ah,
    Bh,
}

impl RatioBin {
    pub const ALL: [RatioBin; 5] = [
        RatioBin::Bw,
        RatioBin::Aw,
        RatioBin::Nm,
        RatioBin::Ah,
        RatioBin::Bh,
    ];

    /// Index 0..5 in BW, AW, NM, AH, BH order (the emission row order).
    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn label(&self) -> &'static str {
        match self {
            RatioBin::Bw => "BW",
            RatioBin::Aw => "AW",
            RatioBin::Nm => "NM",
            RatioBin::Ah => "AH",
            RatioBin::Bh => "BH",
        }
    }
}

impl fmt::Display for RatioBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One of the 35 cells of the 7x5 (area, ratio) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub area: AreaBin,
    pub ratio: RatioBin,
}

impl GridCell {
    pub fn new(area: AreaBin, ratio: RatioBin) -> Self {
        Self { area, ratio }
    }

    /// All 35 cells in (area, ratio) lexical order: (A,BW), (A,AW), ... (G,BH).
    pub fn all() -> impl Iterator<Item = GridCell> {
        AreaBin::ALL
            .into_iter()
            .flat_map(|a| RatioBin::ALL.into_iter().map(move |r| GridCell::new(a, r)))
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.area, self.ratio)
    }
}

/// Classify by total pixel area into bins A..G.
pub fn classify_area(dims: ImageDims) -> AreaBin {
    let area = dims.area();
    for (i, &hi) in AREA_UPPER_BOUNDS.iter().enumerate() {
        if area < hi {
            return AreaBin::ALL[i];
        }
    }
    AreaBin::G
}

/// Classify by aspect ratio `width / height` into BW/AW/NM/AH/BH.
///
/// Boundary values (1/4, 1/2, 2, 4) are exactly representable in f64, so
/// the comparisons below are exact whenever the ratio itself is.
pub fn classify_ratio(dims: ImageDims) -> RatioBin {
    let r = dims.ratio();
    if r > 4.0 {
        RatioBin::Bw
    } else if r > 2.0 {
        RatioBin::Aw
    } else if r >= 0.5 {
        RatioBin::Nm
    } else if r >= 0.25 {
        RatioBin::Ah
    } else {
        RatioBin::Bh
    }
}

/// Full grid-cell classification.
pub fn classify(dims: ImageDims) -> GridCell {
    GridCell::new(classify_area(dims), classify_ratio(dims))
}
