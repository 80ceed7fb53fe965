//! Dataset manifest ingestion and distribution tooling: line-delimited QA
//! records, header-only PNG/JPEG dimension probing, 7×5 distribution counts,
//! balance auditing, and pad/resize augmentation planning toward a target
//! distribution.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scoring::AnswerType;
use crate::taxonomy::{classify, AreaBin, GridCell, ImageDims, RatioBin};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("failed to read '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record '{id}' has no dimensions (none given, none probed)")]
    MissingDims { id: String },
    #[error("augmentation target infeasible: {detail}")]
    Infeasible { detail: String },
    #[error("malformed distribution CSV: {detail}")]
    BadDistribution { detail: String },
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("failed to read '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("'{path}' is neither PNG nor JPEG")]
    UnsupportedFormat { path: String },
    #[error("'{path}' ends before its dimension header")]
    Truncated { path: String },
    #[error("'{path}' declares invalid dimensions {width}x{height}")]
    InvalidDims { path: String, width: u32, height: u32 },
}

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("pad target {target_w}x{target_h} is smaller than source {src_w}x{src_h}")]
    PadShrinks {
        src_w: u32,
        src_h: u32,
        target_w: u32,
        target_h: u32,
    },
}

/// One dataset record: image pointer, optional known dimensions, question,
/// gold answers, optional declared answer type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<AnswerType>,
}

impl Record {
    pub fn dims(&self) -> Option<ImageDims> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => ImageDims::new(w, h).ok(),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("record id must be non-empty".into());
        }
        if self.answers.is_empty() {
            return Err(format!("record '{}' has no answers", self.id));
        }
        match (self.width, self.height) {
            (Some(0), _) | (_, Some(0)) => {
                Err(format!("record '{}' has zero width or height", self.id))
            }
            (Some(_), None) | (None, Some(_)) => Err(format!(
                "record '{}' gives only one of width/height",
                self.id
            )),
            _ => Ok(()),
        }
    }
}

/// Parse a line-delimited manifest; blank lines are skipped, malformed lines
/// are reported with their 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<Record>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<Record>, ManifestError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        record.validate().map_err(|message| ManifestError::Parse {
            line: i + 1,
            message,
        })?;
        records.push(record);
    }
    Ok(records)
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

fn be_u32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

fn be_u16(bytes: &[u8]) -> u16 {
    u16::from_be_bytes([bytes[0], bytes[1]])
}

/// Read image dimensions from file headers alone: PNG IHDR width/height
/// (big-endian, bytes 16–23) or the first JPEG SOF0/SOF1/SOF2 segment. No
/// pixel data is decoded.
pub fn probe_dims(path: &Path) -> Result<ImageDims, ProbeError> {
    let bytes = std::fs::read(path).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    probe_dims_bytes(&bytes, &path.display().to_string())
}

pub fn probe_dims_bytes(bytes: &[u8], path: &str) -> Result<ImageDims, ProbeError> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        return probe_png(bytes, path);
    }
    if bytes.starts_with(&[0xFF, 0xD8]) {
        return probe_jpeg(bytes, path);
    }
    Err(ProbeError::UnsupportedFormat { path: path.into() })
}

fn probe_png(bytes: &[u8], path: &str) -> Result<ImageDims, ProbeError> {
    // signature (8) + IHDR length (4) + "IHDR" (4) + width (4) + height (4)
    if bytes.len() < 24 {
        return Err(ProbeError::Truncated { path: path.into() });
    }
    if &bytes[12..16] != b"IHDR" {
        return Err(ProbeError::UnsupportedFormat { path: path.into() });
    }
    let width = be_u32(&bytes[16..20]);
    let height = be_u32(&bytes[20..24]);
    ImageDims::new(width, height).map_err(|_| ProbeError::InvalidDims {
        path: path.into(),
        width,
        height,
    })
}

fn probe_jpeg(bytes: &[u8], path: &str) -> Result<ImageDims, ProbeError> {
    let truncated = || ProbeError::Truncated { path: path.into() };
    let mut pos = 2; // past SOI
    loop {
        // markers are 0xFF followed by a code; 0xFF bytes may pad in between
        if pos >= bytes.len() {
            return Err(truncated());
        }
        if bytes[pos] != 0xFF {
            return Err(ProbeError::UnsupportedFormat { path: path.into() });
        }
        while pos < bytes.len() && bytes[pos] == 0xFF {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(truncated());
        }
        let marker = bytes[pos];
        pos += 1;
        match marker {
            0x01 | 0xD0..=0xD7 => continue, // standalone, no payload
            0xD9 | 0xDA => return Err(truncated()), // EOI / SOS before any SOF
            _ => {}
        }
        if pos + 2 > bytes.len() {
            return Err(truncated());
        }
        let len = be_u16(&bytes[pos..pos + 2]) as usize;
        if len < 2 {
            return Err(ProbeError::UnsupportedFormat { path: path.into() });
        }
        match marker {
            0xC0..=0xC2 => {
                // precision (1) + height (2) + width (2)
                if len < 7 || pos + 7 > bytes.len() {
                    return Err(truncated());
                }
                let height = u32::from(be_u16(&bytes[pos + 3..pos + 5]));
                let width = u32::from(be_u16(&bytes[pos + 5..pos + 7]));
                return ImageDims::new(width, height).map_err(|_| ProbeError::InvalidDims {
                    path: path.into(),
                    width,
                    height,
                });
            }
            // other SOF variants (lossless, arithmetic, hierarchical)
            0xC3 | 0xC5..=0xC7 | 0xC9..=0xCB | 0xCD..=0xCF => {
                return Err(ProbeError::UnsupportedFormat { path: path.into() })
            }
            _ => {
                pos += len;
            }
        }
    }
}

/// Per-cell record counts over the 7×5 grid. Stored in emission layout
/// (rows = ratio bins BW–BH, columns = area bins A–G); addressed by
/// `GridCell`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl Distribution {
    pub fn empty() -> Self {
        Self {
            counts: vec![vec![0; AreaBin::ALL.len()]; RatioBin::ALL.len()],
            total: 0,
        }
    }

    pub fn get(&self, cell: GridCell) -> u64 {
        self.counts[cell.ratio.index()][cell.area.index()]
    }

    pub fn increment(&mut self, cell: GridCell) {
        self.counts[cell.ratio.index()][cell.area.index()] += 1;
        self.total += 1;
    }

    /// Parse the `to_csv` format back into counts. The `# total` line is
    /// optional; when present it must agree with the cell sum. Rows may
    /// appear in any order but each ratio bin must appear exactly once.
    pub fn from_csv(text: &str) -> Result<Self, ManifestError> {
        let bad = |detail: String| ManifestError::BadDistribution { detail };
        let mut declared_total: Option<u64> = None;
        let mut rows: Vec<Option<Vec<u64>>> = vec![None; RatioBin::ALL.len()];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(total) = rest.trim().strip_prefix("total,") {
                    declared_total = Some(total.trim().parse().map_err(|e| {
                        bad(format!("unreadable total '{}': {e}", total.trim()))
                    })?);
                }
                continue;
            }
            let mut fields = line.split(',');
            let head = fields.next().unwrap_or_default().trim();
            if head == "ratio/area" {
                let cols: Vec<&str> = fields.map(str::trim).collect();
                let want: Vec<&str> = AreaBin::ALL.iter().map(|a| a.label()).collect();
                if cols != want {
                    return Err(bad(format!(
                        "header columns {cols:?} do not match area bins {want:?}"
                    )));
                }
                continue;
            }
            let Some(ratio) = RatioBin::ALL.iter().find(|r| r.label() == head) else {
                return Err(bad(format!("unknown ratio bin '{head}'")));
            };
            let counts: Vec<u64> = fields
                .map(|f| {
                    f.trim()
                        .parse()
                        .map_err(|e| bad(format!("unreadable count '{}': {e}", f.trim())))
                })
                .collect::<Result<_, _>>()?;
            if counts.len() != AreaBin::ALL.len() {
                return Err(bad(format!(
                    "row {head} has {} counts, expected {}",
                    counts.len(),
                    AreaBin::ALL.len()
                )));
            }
            if rows[ratio.index()].replace(counts).is_some() {
                return Err(bad(format!("duplicate row for ratio bin {head}")));
            }
        }
        let counts: Vec<Vec<u64>> = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| row.ok_or_else(|| bad(format!(
                "missing row for ratio bin {}",
                RatioBin::ALL[i].label()
            ))))
            .collect::<Result<_, _>>()?;
        let total = counts.iter().flatten().sum();
        if let Some(declared) = declared_total {
            if declared != total {
                return Err(bad(format!(
                    "declared total {declared} does not match cell sum {total}"
                )));
            }
        }
        Ok(Self { counts, total })
    }

    /// CSV rendering: `#`-prefixed total, then the 5×7 count grid.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# total,{}\n", self.total);
        out.push_str("ratio/area");
        for a in AreaBin::ALL {
            out.push(',');
            out.push_str(a.label());
        }
        out.push('\n');
        for (r, row) in self.counts.iter().enumerate() {
            out.push_str(RatioBin::ALL[r].label());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Count records per grid cell; every record must carry dimensions.
pub fn distribution(records: &[Record]) -> Result<Distribution, ManifestError> {
    let mut dist = Distribution::empty();
    for r in records {
        let dims = r
            .dims()
            .ok_or_else(|| ManifestError::MissingDims { id: r.id.clone() })?;
        dist.increment(classify(dims));
    }
    Ok(dist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviatingCell {
    pub cell: String,
    pub count: u64,
    pub relative_deviation: f64,
}

/// Balance audit against the uniform expectation of total/35 per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total: u64,
    pub expected_per_cell: f64,
    pub max_count: u64,
    pub min_count: u64,
    pub deviating: Vec<DeviatingCell>,
    pub balanced: bool,
}

/// Flag cells whose count deviates from total/35 by more than `tolerance`
/// (relative). An empty distribution is trivially balanced.
pub fn audit_balance(dist: &Distribution, tolerance: f64) -> BalanceReport {
    let cell_count = (AreaBin::ALL.len() * RatioBin::ALL.len()) as f64;
    let expected = dist.total as f64 / cell_count;
    let flat: Vec<u64> = dist.counts.iter().flatten().copied().collect();
    let max_count = flat.iter().copied().max().unwrap_or(0);
    let min_count = flat.iter().copied().min().unwrap_or(0);
    let mut deviating = Vec::new();
    if dist.total > 0 {
        for cell in GridCell::all() {
            let count = dist.get(cell);
            let rel = (count as f64 - expected).abs() / expected;
            if rel > tolerance {
                deviating.push(DeviatingCell {
                    cell: cell.to_string(),
                    count,
                    relative_deviation: rel,
                });
            }
        }
    }
    BalanceReport {
        total: dist.total,
        expected_per_cell: expected,
        max_count,
        min_count,
        balanced: deviating.is_empty(),
        deviating,
    }
}

/// Planned transform for one record. Pad grows the canvas around the
/// centered original (changing the aspect ratio); resize scales to new
/// dimensions preserving it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    None,
    Pad { width: u32, height: u32, fill: u8 },
    Resize { width: u32, height: u32 },
}

impl Transform {
    /// Dimensions after applying to `src`.
    pub fn output_dims(&self, src: ImageDims) -> ImageDims {
        match *self {
            Transform::None => src,
            Transform::Pad { width, height, .. } | Transform::Resize { width, height } => {
                ImageDims::new(width, height).expect("transform targets are positive")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub id: String,
    pub transform: Transform,
    pub cell: GridCell,
}

/// Interior sampling ranges per bin, kept clear of the boundaries so integer
/// rounding cannot flip the classification.
fn area_range(bin: AreaBin) -> (f64, f64) {
    match bin {
        AreaBin::A => (2_500.0, 9_500.0),
        AreaBin::B => (20_000.0, 140_000.0),
        AreaBin::C => (160_000.0, 560_000.0),
        AreaBin::D => (600_000.0, 1_300_000.0),
        AreaBin::E => (1_400_000.0, 2_300_000.0),
        AreaBin::F => (2_400_000.0, 3_600_000.0),
        AreaBin::G => (3_700_000.0, 8_000_000.0),
    }
}

fn ratio_range(bin: RatioBin) -> (f64, f64) {
    match bin {
        RatioBin::Bw => (4.2, 12.0),
        RatioBin::Aw => (2.1, 3.9),
        RatioBin::Nm => (0.55, 1.9),
        RatioBin::Ah => (0.26, 0.48),
        RatioBin::Bh => (0.05, 0.24),
    }
}

/// Find a single pad or resize moving `src` into `target`, or None when no
/// such transform exists (pads cannot shrink; resizes keep the ratio).
fn transform_to(src: ImageDims, target: GridCell, fill: u8) -> Option<Transform> {
    if classify(src) == target {
        return Some(Transform::None);
    }

    let (area_lo, area_hi) = area_range(target.area);
    let area_candidates = [
        (area_lo + area_hi) / 2.0,
        area_lo,
        area_hi,
        (area_lo + area_hi) / 2.0 * 1.2,
        (area_lo + area_hi) / 2.0 * 0.8,
    ];

    if classify(src).ratio == target.ratio {
        // same ratio row: resize preserving aspect
        let r = src.ratio();
        for t in area_candidates {
            let w = (t * r).sqrt().round().max(1.0) as u32;
            let h = (t / r).sqrt().round().max(1.0) as u32;
            if let Ok(dims) = ImageDims::new(w, h) {
                if classify(dims) == target {
                    return Some(Transform::Resize {
                        width: w,
                        height: h,
                    });
                }
            }
        }
    }

    // cross-row (or resize fallback): pad onto a larger canvas with a ratio
    // drawn from the target row; requires the canvas to contain the source
    let (r_lo, r_hi) = ratio_range(target.ratio);
    let w = f64::from(src.width());
    let h = f64::from(src.height());
    for t in area_candidates {
        // w' = sqrt(t*r) >= w  and  h' = sqrt(t/r) >= h  bound the ratio
        let feas_lo = (w * w / t).max(r_lo);
        let feas_hi = (t / (h * h)).min(r_hi);
        if feas_lo > feas_hi {
            continue;
        }
        let r = (feas_lo + feas_hi) / 2.0;
        let pw = (t * r).sqrt().ceil().max(w) as u32;
        let ph = (t / r).sqrt().ceil().max(h) as u32;
        if let Ok(dims) = ImageDims::new(pw, ph) {
            if pw >= src.width() && ph >= src.height() && classify(dims) == target {
                return Some(Transform::Pad {
                    width: pw,
                    height: ph,
                    fill,
                });
            }
        }
    }
    None
}

/// Greedy augmentation planning: records in surplus cells are transformed to
/// fill deficit cells, draining surpluses in (area, ratio) lexical order.
/// The target must account for every record exactly once; each emitted
/// plan's cell is verified by re-classifying the transformed dimensions.
pub fn plan_augmentation(
    records: &[Record],
    target: &Distribution,
    fill: u8,
) -> Result<Vec<AugmentationPlan>, ManifestError> {
    let current = distribution(records)?;
    if current.total != target.total {
        return Err(ManifestError::Infeasible {
            detail: format!(
                "target total {} != record count {}; transforms re-bin records, never add or drop them",
                target.total, current.total
            ),
        });
    }

    // records by current cell, in manifest order
    let mut by_cell: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let cell = classify(r.dims().expect("checked by distribution"));
        by_cell
            .entry((cell.area.index(), cell.ratio.index()))
            .or_default()
            .push(i);
    }

    let mut plans: Vec<Option<AugmentationPlan>> = vec![None; records.len()];

    // keep records in place up to the target count for their own cell
    let mut donors: Vec<usize> = Vec::new();
    for cell in GridCell::all() {
        let key = (cell.area.index(), cell.ratio.index());
        let have = by_cell.remove(&key).unwrap_or_default();
        let keep = target.get(cell).min(have.len() as u64) as usize;
        for &i in &have[..keep] {
            plans[i] = Some(AugmentationPlan {
                id: records[i].id.clone(),
                transform: Transform::None,
                cell,
            });
        }
        donors.extend(&have[keep..]);
    }

    // fill each deficit cell from the donor pool, first donor that fits
    for cell in GridCell::all() {
        let have = plans
            .iter()
            .flatten()
            .filter(|p| p.cell == cell)
            .count() as u64;
        for _ in have..target.get(cell) {
            let mut found = None;
            for (k, &i) in donors.iter().enumerate() {
                let dims = records[i].dims().expect("checked");
                if let Some(tr) = transform_to(dims, cell, fill) {
                    let out = tr.output_dims(dims);
                    debug_assert_eq!(classify(out), cell);
                    found = Some((k, i, tr, out));
                    break;
                }
            }
            let Some((k, i, tr, out)) = found else {
                return Err(ManifestError::Infeasible {
                    detail: format!(
                        "no remaining record can be transformed into cell {}",
                        cell
                    ),
                });
            };
            if classify(out) != cell {
                return Err(ManifestError::Infeasible {
                    detail: format!("transform verification failed for cell {}", cell),
                });
            }
            donors.remove(k);
            plans[i] = Some(AugmentationPlan {
                id: records[i].id.clone(),
                transform: tr,
                cell,
            });
        }
    }

    debug_assert!(donors.is_empty(), "totals matched, so all donors are used");
    Ok(plans.into_iter().map(|p| p.expect("every record planned")).collect())
}

/// Apply a pad or resize to encoded image bytes; output is re-encoded PNG.
/// Pads center the original on a constant-fill canvas; resizes resample
/// bilinearly.
pub fn apply_augmentation(bytes: &[u8], transform: &Transform) -> Result<Vec<u8>, AugmentError> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| AugmentError::Decode(e.to_string()))?
        .to_rgb8();
    let out = match *transform {
        Transform::None => img,
        Transform::Resize { width, height } => image::imageops::resize(
            &img,
            width,
            height,
            image::imageops::FilterType::Triangle,
        ),
        Transform::Pad {
            width,
            height,
            fill,
        } => {
            let (sw, sh) = img.dimensions();
            if width < sw || height < sh {
                return Err(AugmentError::PadShrinks {
                    src_w: sw,
                    src_h: sh,
                    target_w: width,
                    target_h: height,
                });
            }
            let mut canvas =
                image::RgbImage::from_pixel(width, height, image::Rgb([fill, fill, fill]));
            let x0 = i64::from((width - sw) / 2);
            let y0 = i64::from((height - sh) / 2);
            image::imageops::overlay(&mut canvas, &img, x0, y0);
            canvas
        }
    };
    let mut buf = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(out)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| AugmentError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}
