//! Subcommand bodies. Each one reads its inputs, runs the corresponding
//! library routines, writes machine-readable artifacts atomically under the
//! output directory, and prints a short human-readable summary to stdout.
//! All of them are deterministic: same inputs, config, and seed produce the
//! same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nativeres::manifest::{
    self, apply_augmentation, audit_balance, distribution, plan_augmentation, probe_dims,
    AugmentationPlan, ManifestError, ProbeError, Record,
};
use nativeres::report::{
    aggregate_with, diff as diff_reports, diff_to_csv_with, diff_to_svg_with, join_dims,
    to_csv_with, to_svg_with, CellReport,
};
use nativeres::scoring::{score_record, Prediction};
use nativeres::taxonomy::classify;
use nativeres::{
    budget, encoder, packer, Distribution, ImageDims, PackPolicy, PatchPlan, PatchSequence,
    Transform,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io;
use crate::CliError;

fn manifest_err(e: ManifestError) -> CliError {
    match e {
        ManifestError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn probe_err(e: ProbeError) -> CliError {
    match e {
        ProbeError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

/// Load a manifest and make every record carry concrete dimensions: records
/// without width/height get them probed from the image file under
/// `image_root` (defaulting to the manifest's own directory).
fn load_with_dims(
    manifest_path: &Path,
    image_root: Option<&Path>,
) -> Result<(Vec<Record>, PathBuf), CliError> {
    let mut records = manifest::load_manifest(manifest_path).map_err(manifest_err)?;
    let root = resolve_root(manifest_path, image_root);
    for r in &mut records {
        if r.dims().is_none() {
            let dims = probe_dims(&root.join(&r.image_path)).map_err(probe_err)?;
            r.width = Some(dims.width());
            r.height = Some(dims.height());
        }
    }
    Ok((records, root))
}

fn resolve_root(manifest_path: &Path, image_root: Option<&Path>) -> PathBuf {
    match image_root {
        Some(p) => p.to_path_buf(),
        None => manifest_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    }
}

fn record_dims(r: &Record) -> ImageDims {
    r.dims().expect("dims materialized by load_with_dims")
}

// ---------------------------------------------------------------------------
// analyze

pub fn analyze(
    manifest_path: &Path,
    tolerance: f64,
    out_dir: &Path,
    image_root: Option<&Path>,
) -> Result<(), CliError> {
    if !tolerance.is_finite() || tolerance < 0.0 {
        return Err(CliError::Validation(format!(
            "tolerance must be a non-negative number, got {tolerance}"
        )));
    }
    let (records, _) = load_with_dims(manifest_path, image_root)?;
    let dist = distribution(&records).map_err(manifest_err)?;
    let balance = audit_balance(&dist, tolerance);

    io::write_atomic(&out_dir.join("distribution.csv"), dist.to_csv().as_bytes())?;
    io::write_json_pretty(&out_dir.join("balance.json"), &balance)?;

    println!("total: {}", dist.total);
    println!("balanced: {}", balance.balanced);
    if !balance.balanced {
        for d in &balance.deviating {
            println!(
                "  {} count {} deviates {:.1}% from expected {:.1}",
                d.cell,
                d.count,
                d.relative_deviation * 100.0,
                balance.expected_per_cell
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// budget

/// One planning decision as written to plans.jsonl: flat scalars so the file
/// is greppable and column-stable.
#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    id: String,
    source_width: u32,
    source_height: u32,
    planned_width: u32,
    planned_height: u32,
    grid_rows: u32,
    grid_cols: u32,
    pre_merge_tokens: u64,
    post_merge_tokens: u64,
}

impl PlanRow {
    fn new(id: &str, p: &PatchPlan) -> Self {
        Self {
            id: id.to_string(),
            source_width: p.source.width(),
            source_height: p.source.height(),
            planned_width: p.planned.width(),
            planned_height: p.planned.height(),
            grid_rows: p.grid_rows,
            grid_cols: p.grid_cols,
            pre_merge_tokens: p.pre_merge_tokens,
            post_merge_tokens: p.post_merge_tokens,
        }
    }
}

pub fn budget(
    manifest_path: &Path,
    fixed_res: Option<u32>,
    cfg: &RunConfig,
    out_dir: &Path,
    image_root: Option<&Path>,
) -> Result<(), CliError> {
    let (records, _) = load_with_dims(manifest_path, image_root)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let dims = record_dims(r);
        let plan = match fixed_res {
            Some(side) => budget::fixed_res_plan(dims, side, &cfg.budget),
            None => budget::plan(dims, &cfg.budget),
        }
        .map_err(|e| CliError::Validation(format!("record '{}': {e}", r.id)))?;
        rows.push(PlanRow::new(&r.id, &plan));
    }
    io::write_jsonl(&out_dir.join("plans.jsonl"), &rows)?;

    let mut pre_total = 0u64;
    let mut post_total = 0u64;
    for row in &rows {
        println!(
            "{}  {}x{} -> {}x{}  grid {}x{}  pre {}  post {}",
            row.id,
            row.source_width,
            row.source_height,
            row.planned_width,
            row.planned_height,
            row.grid_rows,
            row.grid_cols,
            row.pre_merge_tokens,
            row.post_merge_tokens
        );
        pre_total += row.pre_merge_tokens;
        post_total += row.post_merge_tokens;
    }
    println!(
        "planned {} records: {} pre-merge tokens, {} post-merge",
        rows.len(),
        pre_total,
        post_total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pack

#[derive(Debug, Serialize)]
struct BinRow<'a> {
    bin: usize,
    members: Vec<&'a str>,
    lens: Vec<usize>,
    cu_seqlens: &'a [usize],
    total: usize,
}

fn plan_lengths(
    records: &[Record],
    cfg: &RunConfig,
    length: &str,
) -> Result<Vec<PatchSequence>, CliError> {
    let mut seqs = Vec::with_capacity(records.len());
    for r in records {
        let plan = budget::plan(record_dims(r), &cfg.budget)
            .map_err(|e| CliError::Validation(format!("record '{}': {e}", r.id)))?;
        let len = match length {
            "post" => plan.post_merge_tokens,
            "pre" => plan.pre_merge_tokens,
            other => {
                return Err(CliError::Validation(format!(
                    "unknown --length '{other}' (expected post|pre)"
                )));
            }
        };
        seqs.push(PatchSequence::dry(&r.id, len as usize));
    }
    Ok(seqs)
}

fn resolve_policy(explicit: Option<&str>, cfg: &RunConfig) -> Result<PackPolicy, CliError> {
    match explicit {
        Some(s) => s.parse().map_err(CliError::Validation),
        None => Ok(cfg.policy),
    }
}

pub fn pack(
    manifest_path: &Path,
    capacity: Option<usize>,
    policy: Option<&str>,
    length: &str,
    cfg: &RunConfig,
    out_dir: &Path,
    image_root: Option<&Path>,
) -> Result<(), CliError> {
    let (records, _) = load_with_dims(manifest_path, image_root)?;
    let seqs = plan_lengths(&records, cfg, length)?;
    let capacity = capacity.unwrap_or(cfg.capacity);
    let policy = resolve_policy(policy, cfg)?;

    let batch =
        packer::pack(&seqs, capacity, policy).map_err(|e| CliError::Validation(e.to_string()))?;
    let stats = packer::stats(&batch, &seqs);

    let rows: Vec<BinRow> = batch
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| BinRow {
            bin: i,
            members: b.members.iter().map(|&m| seqs[m].id.as_str()).collect(),
            lens: b.members.iter().map(|&m| seqs[m].len).collect(),
            cu_seqlens: &b.cu_seqlens,
            total: b.total_len(),
        })
        .collect();
    io::write_jsonl(&out_dir.join("bins.jsonl"), &rows)?;
    io::write_json_pretty(&out_dir.join("pack_stats.json"), &stats)?;

    println!(
        "packed {} sequences ({} tokens) into {} bins of {} ({})",
        seqs.len(),
        stats.packed_tokens,
        stats.bin_count,
        capacity,
        policy
    );
    println!(
        "utilization {:.4}, waste saved vs pad-to-longest {:.4}",
        stats.utilization, stats.waste_ratio_saved
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// encode

#[derive(Debug, Serialize)]
struct EncodeRow {
    id: String,
    grid_rows: u32,
    grid_cols: u32,
    pre_merge_tokens: u64,
    post_merge_tokens: u64,
}

#[derive(Debug, Serialize)]
struct EncodeReport {
    seed: u64,
    capacity: usize,
    policy: String,
    records: Vec<EncodeRow>,
    max_abs_deviation: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn encode(
    manifest_path: &Path,
    seed: Option<u64>,
    capacity: Option<usize>,
    policy: Option<&str>,
    sample: usize,
    cfg: &RunConfig,
    out_dir: &Path,
    image_root: Option<&Path>,
) -> Result<(), CliError> {
    let (records, _) = load_with_dims(manifest_path, image_root)?;
    let taken: Vec<&Record> = if sample == 0 {
        records.iter().collect()
    } else {
        records.iter().take(sample).collect()
    };
    if taken.is_empty() {
        return Err(CliError::Validation("manifest has no records".into()));
    }

    let seed = seed.unwrap_or(cfg.encoder.seed);
    let policy = resolve_policy(policy, cfg)?;
    let enc = nativeres::Encoder::new(cfg.encoder.clone())
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let mut rows = Vec::with_capacity(taken.len());
    let mut inputs = Vec::with_capacity(taken.len());
    for (i, r) in taken.iter().enumerate() {
        let plan = budget::plan(record_dims(r), &cfg.budget)
            .map_err(|e| CliError::Validation(format!("record '{}': {e}", r.id)))?;
        rows.push(EncodeRow {
            id: r.id.clone(),
            grid_rows: plan.grid_rows,
            grid_cols: plan.grid_cols,
            pre_merge_tokens: plan.pre_merge_tokens,
            post_merge_tokens: plan.post_merge_tokens,
        });
        inputs.push(encoder::synthetic_input(
            plan.grid_rows,
            plan.grid_cols,
            seed.wrapping_add(i as u64),
            &cfg.encoder,
        ));
    }

    let longest = inputs.iter().map(|i| i.payload.nrows()).max().unwrap_or(0);
    let capacity = match capacity {
        Some(c) if c < longest => {
            return Err(CliError::Validation(format!(
                "--capacity {c} is below the longest sequence ({longest} patches)"
            )));
        }
        Some(c) => c,
        None => cfg.capacity.max(longest),
    };

    let singles: Vec<_> = inputs
        .iter()
        .map(|inp| enc.forward_single(inp))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let packed = enc
        .forward_packed(&inputs, capacity, policy)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let mut max_dev = 0.0f64;
    for (s, p) in singles.iter().zip(&packed) {
        for (a, b) in s.tokens.iter().zip(p.tokens.iter()) {
            max_dev = max_dev.max(f64::from((a - b).abs()));
        }
    }

    let report = EncodeReport {
        seed,
        capacity,
        policy: policy.to_string(),
        records: rows,
        max_abs_deviation: max_dev,
    };
    io::write_json_pretty(&out_dir.join("encode.json"), &report)?;

    for row in &report.records {
        println!(
            "{}  grid {}x{}  pre {}  post {}",
            row.id, row.grid_rows, row.grid_cols, row.pre_merge_tokens, row.post_merge_tokens
        );
    }
    println!(
        "encoded {} records (seed {}), packed-vs-unpacked max abs deviation {:.3e}",
        report.records.len(),
        seed,
        max_dev
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score

pub fn score(
    manifest_path: &Path,
    predictions_path: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<(), CliError> {
    let records = manifest::load_manifest(manifest_path).map_err(manifest_err)?;
    let preds: Vec<Prediction> = io::read_jsonl(predictions_path)?;

    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for p in &preds {
        if by_id.insert(&p.id, &p.prediction).is_some() {
            return Err(CliError::Validation(format!(
                "duplicate prediction for id '{}'",
                p.id
            )));
        }
    }
    let known: std::collections::BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    for p in &preds {
        if !known.contains(p.id.as_str()) {
            return Err(CliError::Validation(format!(
                "prediction id '{}' is not in the manifest",
                p.id
            )));
        }
    }

    let mut scored = Vec::with_capacity(records.len());
    for r in &records {
        let pred = by_id.get(r.id.as_str()).ok_or_else(|| {
            CliError::Validation(format!("no prediction for record '{}'", r.id))
        })?;
        let s = score_record(&r.id, pred, &r.answers, r.answer_type, &cfg.scoring)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        scored.push(s);
    }
    io::write_jsonl(&out_dir.join("scored.jsonl"), &scored)?;

    let mean = scored.iter().map(|s| s.score).sum::<f64>() / scored.len().max(1) as f64;
    println!("scored {} records, mean score {:.4}", scored.len(), mean);
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn report(
    scored_path: &Path,
    manifest_path: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
    image_root: Option<&Path>,
) -> Result<(), CliError> {
    let scored: Vec<nativeres::ScoredAnswer> = io::read_jsonl(scored_path)?;
    let (records, _) = load_with_dims(manifest_path, image_root)?;
    let dims: BTreeMap<String, ImageDims> = records
        .iter()
        .map(|r| (r.id.clone(), record_dims(r)))
        .collect();

    let joined = join_dims(&scored, &dims).map_err(|e| CliError::Validation(e.to_string()))?;
    let cell_report =
        aggregate_with(&joined, cfg.sigma).map_err(|e| CliError::Validation(e.to_string()))?;

    io::write_json_pretty(&out_dir.join("report.json"), &cell_report)?;
    io::write_atomic(
        &out_dir.join("report.csv"),
        to_csv_with(&cell_report, cfg.row_order).as_bytes(),
    )?;
    io::write_atomic(
        &out_dir.join("report.svg"),
        to_svg_with(&cell_report, "cell accuracy", cfg.row_order).as_bytes(),
    )?;

    println!(
        "overall {:.4} over {} samples; ACV {:.2}, RCV {:.2}",
        cell_report.overall, cell_report.total, cell_report.acv, cell_report.rcv
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// diff

pub fn diff(
    report_a: &Path,
    report_b: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<(), CliError> {
    let a: CellReport = read_report(report_a)?;
    let b: CellReport = read_report(report_b)?;
    let d = diff_reports(&a, &b);

    io::write_json_pretty(&out_dir.join("diff.json"), &d)?;
    io::write_atomic(
        &out_dir.join("diff.csv"),
        diff_to_csv_with(&d, cfg.row_order).as_bytes(),
    )?;
    io::write_atomic(
        &out_dir.join("diff.svg"),
        diff_to_svg_with(&d, "cell accuracy difference", cfg.row_order).as_bytes(),
    )?;

    let flat: Vec<f64> = d.diff.iter().flatten().filter_map(|c| *c).collect();
    match (
        flat.iter().copied().reduce(f64::min),
        flat.iter().copied().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) => println!(
            "diff over {} populated cells: min {:+.4}, max {:+.4}",
            flat.len(),
            lo,
            hi
        ),
        _ => println!("diff has no cells populated on both sides"),
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<CellReport, CliError> {
    let text = io::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// augment

#[derive(Debug, Serialize)]
struct AugmentSummary {
    none: usize,
    pad: usize,
    resize: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn augment(
    manifest_path: &Path,
    target_path: &Path,
    fill: u8,
    apply: bool,
    out_dir: &Path,
    image_root: Option<&Path>,
    images_out: Option<&Path>,
) -> Result<(), CliError> {
    let (records, root) = load_with_dims(manifest_path, image_root)?;
    let target_text = io::read_to_string(target_path)?;
    let target = Distribution::from_csv(&target_text).map_err(manifest_err)?;

    let plans = plan_augmentation(&records, &target, fill).map_err(manifest_err)?;
    io::write_jsonl(&out_dir.join("augment_plans.jsonl"), &plans)?;

    let mut summary = AugmentSummary {
        none: 0,
        pad: 0,
        resize: 0,
    };
    for p in &plans {
        match p.transform {
            Transform::None => summary.none += 1,
            Transform::Pad { .. } => summary.pad += 1,
            Transform::Resize { .. } => summary.resize += 1,
        }
    }
    println!(
        "planned {} records: {} unchanged, {} padded, {} resized",
        plans.len(),
        summary.none,
        summary.pad,
        summary.resize
    );

    if apply {
        let images_dir = match images_out {
            Some(p) => p.to_path_buf(),
            None => out_dir.join("images"),
        };
        let by_id: BTreeMap<&str, &Record> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut augmented = Vec::with_capacity(plans.len());
        for plan in &plans {
            let record = by_id[plan.id.as_str()];
            let new_path = apply_one(record, plan, &root, &images_dir)?;
            let out_dims = plan.transform.output_dims(record_dims(record));
            let mut updated = (*record).clone();
            updated.image_path = new_path;
            updated.width = Some(out_dims.width());
            updated.height = Some(out_dims.height());
            debug_assert_eq!(classify(out_dims), plan.cell);
            augmented.push(updated);
        }
        io::write_jsonl(&out_dir.join("augmented_manifest.jsonl"), &augmented)?;
        println!("wrote {} images to {}", plans.len(), images_dir.display());
    }
    Ok(())
}

/// Materialize one plan: unchanged records are copied byte-for-byte under
/// their original extension; transformed ones are re-encoded as PNG. Returns
/// the written file name (relative to the images directory).
fn apply_one(
    record: &Record,
    plan: &AugmentationPlan,
    root: &Path,
    images_dir: &Path,
) -> Result<String, CliError> {
    let src = root.join(&record.image_path);
    let bytes = std::fs::read(&src)
        .map_err(|e| CliError::Io(format!("cannot read '{}': {e}", src.display())))?;
    let stem = sanitize(&record.id);
    let file_name = match &plan.transform {
        Transform::None => {
            let ext = Path::new(&record.image_path)
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("bin");
            format!("{stem}.{ext}")
        }
        _ => format!("{stem}.png"),
    };
    let out_bytes = match &plan.transform {
        Transform::None => bytes,
        t => apply_augmentation(&bytes, t)
            .map_err(|e| CliError::Validation(format!("record '{}': {e}", record.id)))?,
    };
    io::write_atomic(&images_dir.join(&file_name), &out_bytes)?;
    Ok(file_name)
}

/// Keep ids usable as file names: anything outside [A-Za-z0-9._-] becomes '_'.
fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}
