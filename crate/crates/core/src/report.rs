//! Aggregation of scored answers into the 7×5 resolution/ratio grid, with
//! overall accuracy, sample-weighted marginals, ACV/RCV coefficients of
//! variation, diff heatmaps, sensitivity classification, and CSV/JSON/SVG
//! emission.
//!
//! Conventions: σ defaults to the population standard deviation (a [`Sigma`]
//! selects Bessel's correction instead); marginals weight by sample count;
//! empty cells are excluded from marginals and CV (zero imputation would
//! fabricate dispersion); a single populated bin or a zero mean yields CV 0.
//! Emission row order defaults to BW, AW, NM, AH, BH ([`RowOrder`] flips it);
//! columns are always A–G.

use serde::{Deserialize, Serialize};

use crate::scoring::ScoredAnswer;
use crate::taxonomy::{classify, AreaBin, ImageDims, RatioBin};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("no scored records to aggregate")]
    EmptyInput,
    #[error("no dimensions known for record '{id}'")]
    MissingDims { id: String },
}

/// Per-cell accuracy grid with marginals and dispersion statistics.
/// Matrix layout is rows × columns = ratio bins × area bins, in emission
/// order; `None` marks a cell or bin with no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// Sample counts, 5 rows × 7 columns.
    pub counts: Vec<Vec<u64>>,
    /// Mean score per cell; `None` where count is 0.
    pub accuracy: Vec<Vec<Option<f64>>>,
    /// Sample-weighted mean per area bin (columns), A–G.
    pub area_marginals: Vec<Option<f64>>,
    /// Sample-weighted mean per ratio bin (rows), BW–BH.
    pub ratio_marginals: Vec<Option<f64>>,
    /// Σ scores / Σ counts over every sample.
    pub overall: f64,
    pub total: u64,
    /// 100 × σ_pop(area marginals) / μ(area marginals).
    pub acv: f64,
    /// 100 × σ_pop(ratio marginals) / μ(ratio marginals).
    pub rcv: f64,
}

/// Cell-wise accuracy difference (left − right); `None` where either side
/// is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub diff: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Sensitivity {
    Rc,
    Sc,
}

impl Sensitivity {
    pub fn label(self) -> &'static str {
        match self {
            Sensitivity::Rc => "RC",
            Sensitivity::Sc => "SC",
        }
    }
}

/// Standard-deviation convention for ACV/RCV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    /// Divide squared deviations by n. The convention used throughout.
    #[default]
    Population,
    /// Divide by n − 1 (Bessel); a single populated marginal yields CV 0.
    Sample,
}

impl std::str::FromStr for Sigma {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "population" => Ok(Sigma::Population),
            "sample" => Ok(Sigma::Sample),
            other => Err(format!(
                "unknown sigma convention '{other}' (expected population|sample)"
            )),
        }
    }
}

/// Vertical ordering of ratio rows in CSV and SVG emissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOrder {
    /// BW at the top, BH at the bottom (the default axis direction).
    #[default]
    BwFirst,
    /// BH at the top, BW at the bottom.
    BhFirst,
}

impl RowOrder {
    fn indices(self) -> [usize; 5] {
        match self {
            RowOrder::BwFirst => [0, 1, 2, 3, 4],
            RowOrder::BhFirst => [4, 3, 2, 1, 0],
        }
    }
}

impl std::str::FromStr for RowOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bw_first" => Ok(RowOrder::BwFirst),
            "bh_first" => Ok(RowOrder::BhFirst),
            other => Err(format!(
                "unknown row order '{other}' (expected bw_first|bh_first)"
            )),
        }
    }
}

/// Join scored answers with their image dimensions by record id.
pub fn join_dims(
    scored: &[ScoredAnswer],
    dims: &std::collections::BTreeMap<String, ImageDims>,
) -> Result<Vec<(ImageDims, f64)>, ReportError> {
    scored
        .iter()
        .map(|s| {
            dims.get(&s.id)
                .map(|d| (*d, s.score))
                .ok_or_else(|| ReportError::MissingDims { id: s.id.clone() })
        })
        .collect()
}

/// Sum after sorting by total order, so aggregation is bitwise independent
/// of record order (the fold is commutative up to this canonicalization).
fn canonical_sum(scores: &mut [f64]) -> f64 {
    scores.sort_by(|a, b| a.total_cmp(b));
    scores.iter().sum()
}

fn cv_percent(marginals: &[Option<f64>], sigma: Sigma) -> f64 {
    let populated: Vec<f64> = marginals.iter().copied().flatten().collect();
    if populated.is_empty() {
        return 0.0;
    }
    let n = populated.len() as f64;
    let mean = populated.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let denom = match sigma {
        Sigma::Population => n,
        Sigma::Sample if populated.len() > 1 => n - 1.0,
        Sigma::Sample => return 0.0,
    };
    let var = populated.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / denom;
    100.0 * var.sqrt() / mean
}

/// Aggregate (dims, score) pairs into the cell grid under population σ.
pub fn aggregate(records: &[(ImageDims, f64)]) -> Result<CellReport, ReportError> {
    aggregate_with(records, Sigma::Population)
}

/// Aggregate (dims, score) pairs into the cell grid with an explicit σ
/// convention for ACV/RCV.
pub fn aggregate_with(
    records: &[(ImageDims, f64)],
    sigma: Sigma,
) -> Result<CellReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyInput);
    }

    let mut cell_scores: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); AreaBin::ALL.len()]; RatioBin::ALL.len()];
    for &(dims, score) in records {
        let cell = classify(dims);
        cell_scores[cell.ratio.index()][cell.area.index()].push(score);
    }

    let mut counts = vec![vec![0u64; AreaBin::ALL.len()]; RatioBin::ALL.len()];
    let mut sums = vec![vec![0.0f64; AreaBin::ALL.len()]; RatioBin::ALL.len()];
    let mut accuracy = vec![vec![None; AreaBin::ALL.len()]; RatioBin::ALL.len()];
    for (r, row) in cell_scores.iter_mut().enumerate() {
        for (a, scores) in row.iter_mut().enumerate() {
            counts[r][a] = scores.len() as u64;
            sums[r][a] = canonical_sum(scores);
            if !scores.is_empty() {
                accuracy[r][a] = Some(sums[r][a] / scores.len() as f64);
            }
        }
    }

    let area_marginals: Vec<Option<f64>> = (0..AreaBin::ALL.len())
        .map(|a| {
            let n: u64 = (0..RatioBin::ALL.len()).map(|r| counts[r][a]).sum();
            (n > 0).then(|| {
                (0..RatioBin::ALL.len()).map(|r| sums[r][a]).sum::<f64>() / n as f64
            })
        })
        .collect();
    let ratio_marginals: Vec<Option<f64>> = (0..RatioBin::ALL.len())
        .map(|r| {
            let n: u64 = counts[r].iter().sum();
            (n > 0).then(|| sums[r].iter().sum::<f64>() / n as f64)
        })
        .collect();

    let total: u64 = counts.iter().flatten().sum();
    let overall = sums.iter().flatten().sum::<f64>() / total as f64;
    let acv = cv_percent(&area_marginals, sigma);
    let rcv = cv_percent(&ratio_marginals, sigma);

    Ok(CellReport {
        counts,
        accuracy,
        area_marginals,
        ratio_marginals,
        overall,
        total,
        acv,
        rcv,
    })
}

/// Cell-wise a − b; populated only where both sides are.
pub fn diff(a: &CellReport, b: &CellReport) -> DiffReport {
    let diff = a
        .accuracy
        .iter()
        .zip(&b.accuracy)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(ca, cb)| match (ca, cb) {
                    (Some(x), Some(y)) => Some(x - y),
                    _ => None,
                })
                .collect()
        })
        .collect();
    DiffReport { diff }
}

/// Classify a benchmark as resolution-centric (RC) when moving from the
/// low- to the high-resolution setting yields a relative gain above
/// `threshold`; semantic-centric (SC) otherwise.
pub fn sensitivity(low_res_acc: f64, high_res_acc: f64, threshold: f64) -> Sensitivity {
    if (high_res_acc - low_res_acc) / low_res_acc.max(1e-9) > threshold {
        Sensitivity::Rc
    } else {
        Sensitivity::Sc
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

fn csv_grid(rows: &[Vec<Option<f64>>], order: RowOrder) -> String {
    let mut out = String::new();
    out.push_str("ratio/area");
    for a in AreaBin::ALL {
        out.push(',');
        out.push_str(a.label());
    }
    out.push('\n');
    for r in order.indices() {
        out.push_str(RatioBin::ALL[r].label());
        for cell in &rows[r] {
            out.push(',');
            out.push_str(&fmt_cell(*cell));
        }
        out.push('\n');
    }
    out
}

/// CSV rendering: `#`-prefixed metadata header, then the 5×7 accuracy grid.
pub fn to_csv(report: &CellReport) -> String {
    to_csv_with(report, RowOrder::BwFirst)
}

/// CSV rendering with an explicit row order.
pub fn to_csv_with(report: &CellReport, order: RowOrder) -> String {
    let mut out = String::new();
    out.push_str(&format!("# overall_accuracy,{:.6}\n", report.overall));
    out.push_str(&format!("# acv,{:.6}\n", report.acv));
    out.push_str(&format!("# rcv,{:.6}\n", report.rcv));
    out.push_str(&format!("# total_samples,{}\n", report.total));
    out.push_str(&csv_grid(&report.accuracy, order));
    out
}

/// CSV rendering of a diff grid with a minimal metadata header.
pub fn diff_to_csv(d: &DiffReport) -> String {
    diff_to_csv_with(d, RowOrder::BwFirst)
}

/// Diff CSV rendering with an explicit row order.
pub fn diff_to_csv_with(d: &DiffReport, order: RowOrder) -> String {
    let mut out = String::from("# cell_accuracy_difference\n");
    out.push_str(&csv_grid(&d.diff, order));
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn hex(r: f64, g: f64, b: f64) -> String {
    format!(
        "#{:02x}{:02x}{:02x}",
        r.round().clamp(0.0, 255.0) as u8,
        g.round().clamp(0.0, 255.0) as u8,
        b.round().clamp(0.0, 255.0) as u8
    )
}

/// Sequential ramp for accuracies in [0,1]: near-white to deep green.
fn accuracy_color(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    hex(
        lerp(247.0, 0.0, t),
        lerp(252.0, 104.0, t),
        lerp(245.0, 55.0, t),
    )
}

/// Red–yellow–green diverging scale for differences in [−1,1]; negative is
/// red, zero pale yellow, positive green.
fn diverging_color(v: f64) -> String {
    let t = v.clamp(-1.0, 1.0);
    if t < 0.0 {
        let u = -t;
        hex(
            lerp(255.0, 165.0, u),
            lerp(255.0, 0.0, u),
            lerp(224.0, 38.0, u),
        )
    } else {
        hex(
            lerp(255.0, 0.0, t),
            lerp(255.0, 104.0, t),
            lerp(224.0, 55.0, t),
        )
    }
}

const CELL_W: u32 = 86;
const CELL_H: u32 = 56;
const MARGIN_LEFT: u32 = 70;
const MARGIN_TOP: u32 = 64;

fn svg_heatmap(grid: &[Vec<Option<f64>>], title: &str, diverging: bool, order: RowOrder) -> String {
    let cols = AreaBin::ALL.len() as u32;
    let rows = RatioBin::ALL.len() as u32;
    let width = MARGIN_LEFT + cols * CELL_W + 20;
    let height = MARGIN_TOP + rows * CELL_H + 30;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        width / 2,
        title
    ));
    for (a, bin) in AreaBin::ALL.iter().enumerate() {
        let x = MARGIN_LEFT + a as u32 * CELL_W + CELL_W / 2;
        s.push_str(&format!(
            "  <text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_TOP - 10,
            bin.label()
        ));
    }
    for (pos, r) in order.indices().into_iter().enumerate() {
        let y = MARGIN_TOP + pos as u32 * CELL_H + CELL_H / 2 + 4;
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 8,
            RatioBin::ALL[r].label()
        ));
    }
    for (pos, r) in order.indices().into_iter().enumerate() {
        for (a, cell) in grid[r].iter().enumerate() {
            let x = MARGIN_LEFT + a as u32 * CELL_W;
            let y = MARGIN_TOP + pos as u32 * CELL_H;
            let (fill, label) = match cell {
                Some(v) => {
                    let fill = if diverging {
                        diverging_color(*v)
                    } else {
                        accuracy_color(*v)
                    };
                    (fill, format!("{v:.2}"))
                }
                None => ("#eeeeee".to_string(), String::new()),
            };
            s.push_str(&format!(
                "  <rect id=\"cell-{}-{}\" x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" fill=\"{fill}\" stroke=\"#ffffff\"/>\n",
                RatioBin::ALL[r].label(),
                AreaBin::ALL[a].label()
            ));
            if !label.is_empty() {
                s.push_str(&format!(
                    "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{label}</text>\n",
                    x + CELL_W / 2,
                    y + CELL_H / 2 + 4
                ));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// SVG heatmap of per-cell accuracy (sequential green scale).
pub fn to_svg(report: &CellReport, title: &str) -> String {
    to_svg_with(report, title, RowOrder::BwFirst)
}

/// Accuracy heatmap with an explicit row order.
pub fn to_svg_with(report: &CellReport, title: &str, order: RowOrder) -> String {
    svg_heatmap(&report.accuracy, title, false, order)
}

/// SVG heatmap of a diff grid (red–yellow–green diverging scale).
pub fn diff_to_svg(d: &DiffReport, title: &str) -> String {
    diff_to_svg_with(d, title, RowOrder::BwFirst)
}

/// Diff heatmap with an explicit row order.
pub fn diff_to_svg_with(d: &DiffReport, title: &str, order: RowOrder) -> String {
    svg_heatmap(&d.diff, title, true, order)
}
