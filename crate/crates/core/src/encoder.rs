//! Desk-scale reference encoder: linear patch embedding, pre-norm attention
//! blocks with 2D rotary positions and variable-length (packed) attention,
//! 2×2 average-pool merging, and a two-layer GELU projector.
//!
//! This exists to verify the packing and positional contracts — that a
//! packed forward is indistinguishable from per-image forwards, and that
//! rotary positions encode only relative offsets — not to reproduce any
//! trained model. Weights are seeded uniform noise; everything runs in
//! single precision on the CPU.
//!
//! Positional layout per head: the head's dimensions split into a row half
//! and a column half; within each half, consecutive pairs (2j, 2j+1) rotate
//! by angle p · base^(−2j/half_dim), where p is the patch's row (row half)
//! or column (col half) coordinate.

use ndarray::{s, Array1, Array2};
use rand::distr::Uniform;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::packer::{self, PackError, PackPolicy, PatchSequence};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("grid {rows}x{cols} has an odd side; 2x2 merging requires even dims")]
    OddGrid { rows: u32, cols: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid cu_seqlens: {0}")]
    InvalidCuSeqlens(String),
    #[error(transparent)]
    Pack(#[from] PackError),
}

/// Architecture and init parameters for the reference encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: u32,
    /// Flattened patch input dimension (3 · patch_size² for RGB pixels).
    pub in_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub out_dim: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            in_dim: 3 * 14 * 14,
            embed_dim: 32,
            heads: 2,
            layers: 2,
            mlp_hidden: 64,
            out_dim: 32,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.patch_size == 0 {
            return fail("patch_size must be positive".into());
        }
        if self.in_dim == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 || self.out_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        // each head splits into row/col halves of rotation pairs
        if !self.head_dim().is_multiple_of(4) {
            return fail(format!(
                "head dim {} must be divisible by 4 (two even positional halves)",
                self.head_dim()
            ));
        }
        if self.rope_base <= 1.0 {
            return fail("rope_base must exceed 1".into());
        }
        Ok(())
    }
}

/// Per-patch (row, col) coordinates in a patch grid, raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionGrid {
    rows: u32,
    cols: u32,
    coords: Vec<(u32, u32)>,
}

impl PositionGrid {
    pub fn raster(rows: u32, cols: u32) -> Self {
        let coords = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .collect();
        Self { rows, cols, coords }
    }

    /// Same grid with every coordinate offset by (dr, dc); used to verify
    /// that attention depends only on relative positions.
    pub fn shifted(&self, dr: u32, dc: u32) -> Self {
        Self {
            rows: self.rows + dr,
            cols: self.cols + dc,
            coords: self.coords.iter().map(|&(r, c)| (r + dr, c + dc)).collect(),
        }
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Rotation angles per patch: one row per patch, `head_dim/2` columns — the
/// first `head_dim/4` drive the row half's pairs, the rest the col half's.
/// Identical across heads.
pub fn rope_angles(grid: &PositionGrid, cfg: &EncoderConfig) -> Array2<f64> {
    let half_dim = cfg.head_dim() / 2; // dims per positional half
    let pairs = half_dim / 2; // rotation pairs per half
    let mut angles = Array2::<f64>::zeros((grid.len(), 2 * pairs));
    for (i, &(r, c)) in grid.coords.iter().enumerate() {
        for j in 0..pairs {
            let freq = cfg.rope_base.powf(-2.0 * j as f64 / half_dim as f64);
            angles[[i, j]] = f64::from(r) * freq;
            angles[[i, pairs + j]] = f64::from(c) * freq;
        }
    }
    angles
}

/// Rotate Q or K rows in place: within each head, pair (2j, 2j+1) of each
/// positional half turns by its angle. Rotations are per-row isometries.
pub fn apply_rope(
    mat: &mut Array2<f32>,
    angles: &Array2<f64>,
    cfg: &EncoderConfig,
) -> Result<(), EncoderError> {
    let (n, d) = mat.dim();
    if d != cfg.embed_dim {
        return Err(EncoderError::DimensionMismatch(format!(
            "matrix has {d} columns, config embeds {}",
            cfg.embed_dim
        )));
    }
    if angles.nrows() != n || angles.ncols() != cfg.head_dim() / 2 {
        return Err(EncoderError::DimensionMismatch(format!(
            "angles shaped {:?}, expected ({n}, {})",
            angles.dim(),
            cfg.head_dim() / 2
        )));
    }
    let head_dim = cfg.head_dim();
    let pairs = head_dim / 4; // per half
    for i in 0..n {
        for h in 0..cfg.heads {
            let base = h * head_dim;
            for half in 0..2 {
                for j in 0..pairs {
                    let theta = angles[[i, half * pairs + j]];
                    let (sin, cos) = theta.sin_cos();
                    let (sin, cos) = (sin as f32, cos as f32);
                    let lo = base + half * (head_dim / 2) + 2 * j;
                    let x = mat[[i, lo]];
                    let y = mat[[i, lo + 1]];
                    mat[[i, lo]] = x * cos - y * sin;
                    mat[[i, lo + 1]] = x * sin + y * cos;
                }
            }
        }
    }
    Ok(())
}

/// Q/K/V/output projection matrices of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
}

fn validate_cu(cu: &[usize], n: usize) -> Result<(), EncoderError> {
    let ok = cu.first() == Some(&0)
        && cu.last() == Some(&n)
        && cu.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(EncoderError::InvalidCuSeqlens(format!(
            "{cu:?} does not delimit {n} rows"
        )))
    }
}

/// Multi-head attention over a packed matrix, each [cu[i], cu[i+1]) segment
/// attending only to itself. Rotary angles are applied to Q and K before
/// the segment-local softmax(QKᵀ/√d_head)V.
pub fn varlen_attention(
    packed: &Array2<f32>,
    cu_seqlens: &[usize],
    weights: &AttentionWeights,
    angles: &Array2<f64>,
    cfg: &EncoderConfig,
) -> Result<Array2<f32>, EncoderError> {
    let n = packed.nrows();
    validate_cu(cu_seqlens, n)?;
    let mut q = packed.dot(&weights.wq);
    let mut k = packed.dot(&weights.wk);
    let v = packed.dot(&weights.wv);
    apply_rope(&mut q, angles, cfg)?;
    apply_rope(&mut k, angles, cfg)?;

    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut ctx = Array2::<f32>::zeros((n, cfg.embed_dim));
    for seg in cu_seqlens.windows(2) {
        let (s0, s1) = (seg[0], seg[1]);
        for h in 0..cfg.heads {
            let qh = q.slice(s![s0..s1, h * head_dim..(h + 1) * head_dim]);
            let kh = k.slice(s![s0..s1, h * head_dim..(h + 1) * head_dim]);
            let vh = v.slice(s![s0..s1, h * head_dim..(h + 1) * head_dim]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            // row-wise softmax, max-shifted for stability
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum: f32 = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            let out = scores.dot(&vh);
            ctx.slice_mut(s![s0..s1, h * head_dim..(h + 1) * head_dim])
                .assign(&out);
        }
    }
    Ok(ctx.dot(&weights.wo))
}

/// Average-pool raster-ordered grid features over non-overlapping 2×2
/// blocks. Both grid sides must be even.
pub fn merge_2x2(
    features: &Array2<f32>,
    rows: u32,
    cols: u32,
) -> Result<Array2<f32>, EncoderError> {
    if !rows.is_multiple_of(2) || !cols.is_multiple_of(2) {
        return Err(EncoderError::OddGrid { rows, cols });
    }
    let expected = rows as usize * cols as usize;
    if features.nrows() != expected {
        return Err(EncoderError::DimensionMismatch(format!(
            "{} feature rows for a {rows}x{cols} grid",
            features.nrows()
        )));
    }
    let (mr, mc) = (rows as usize / 2, cols as usize / 2);
    let d = features.ncols();
    let mut out = Array2::<f32>::zeros((mr * mc, d));
    for r in 0..mr {
        for c in 0..mc {
            let idx = |dr: usize, dc: usize| (2 * r + dr) * cols as usize + (2 * c + dc);
            let mut acc = Array1::<f32>::zeros(d);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                acc += &features.row(idx(dr, dc));
            }
            acc.mapv_inplace(|x| x / 4.0);
            out.row_mut(r * mc + c).assign(&acc);
        }
    }
    Ok(out)
}

/// One pre-norm transformer block: RMS-norm gains, attention, two-layer
/// GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Array1<f32>,
    pub attn: AttentionWeights,
    pub norm2: Array1<f32>,
    pub mlp_up: Array2<f32>,
    pub mlp_down: Array2<f32>,
}

/// One image's input to the encoder: flattened patch rows in raster order
/// plus their position grid.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub payload: Array2<f32>,
    pub grid: PositionGrid,
}

/// Deterministic stand-in for pixel content: a seeded uniform [0, 1) payload
/// for a rows × cols patch grid. Lets harnesses exercise seeded forwards
/// without decoding images.
pub fn synthetic_input(rows: u32, cols: u32, seed: u64, cfg: &EncoderConfig) -> EncoderInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows as usize * cols as usize;
    let dist = Uniform::new(0.0f32, 1.0).expect("constant bounds are valid");
    let payload = Array2::from_shape_fn((n, cfg.in_dim), |_| dist.sample(&mut rng));
    EncoderInput {
        payload,
        grid: PositionGrid::raster(rows, cols),
    }
}

/// Encoded output of one image: the merged grid shape and the projected
/// token matrix (one row per merged cell).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub merged_rows: u32,
    pub merged_cols: u32,
    pub tokens: Array2<f32>,
}

const RMS_EPS: f32 = 1e-6;

fn rms_norm(x: &Array2<f32>, gain: &Array1<f32>) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.zip_mut_with(gain, |v, g| *v = *v * inv * g);
    }
    out
}

fn gelu(x: f32) -> f32 {
    // tanh form of GELU
    const C: f32 = 0.797_884_6; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Seeded reference encoder. Weights are drawn once at construction in a
/// fixed order, uniform in [−1/√fan_in, +1/√fan_in]; forwards never mutate.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Array2<f32>,
    pub blocks: Vec<Block>,
    pub proj_up: Array2<f32>,
    pub proj_down: Array2<f32>,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    let bound = 1.0 / (rows as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    Array2::from_shape_fn((rows, cols), |_| rng.sample(dist))
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let patch_embed = init_matrix(&mut rng, cfg.in_dim, d);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                norm1: Array1::ones(d),
                attn: AttentionWeights {
                    wq: init_matrix(&mut rng, d, d),
                    wk: init_matrix(&mut rng, d, d),
                    wv: init_matrix(&mut rng, d, d),
                    wo: init_matrix(&mut rng, d, d),
                },
                norm2: Array1::ones(d),
                mlp_up: init_matrix(&mut rng, d, cfg.mlp_hidden),
                mlp_down: init_matrix(&mut rng, cfg.mlp_hidden, d),
            })
            .collect();
        let proj_up = init_matrix(&mut rng, d, cfg.mlp_hidden);
        let proj_down = init_matrix(&mut rng, cfg.mlp_hidden, cfg.out_dim);
        Ok(Self {
            cfg,
            patch_embed,
            blocks,
            proj_up,
            proj_down,
        })
    }

    fn check_input(&self, input: &EncoderInput) -> Result<(), EncoderError> {
        let grid = &input.grid;
        if !grid.rows.is_multiple_of(2) || !grid.cols.is_multiple_of(2) {
            return Err(EncoderError::OddGrid {
                rows: grid.rows,
                cols: grid.cols,
            });
        }
        if input.payload.nrows() != grid.len() {
            return Err(EncoderError::DimensionMismatch(format!(
                "payload has {} rows, grid has {} positions",
                input.payload.nrows(),
                grid.len()
            )));
        }
        if input.payload.ncols() != self.cfg.in_dim {
            return Err(EncoderError::DimensionMismatch(format!(
                "payload dim {} != configured in_dim {}",
                input.payload.ncols(),
                self.cfg.in_dim
            )));
        }
        Ok(())
    }

    /// Run the transformer trunk over a packed matrix (already embedded).
    fn trunk(
        &self,
        embedded: Array2<f32>,
        cu: &[usize],
        angles: &Array2<f64>,
    ) -> Result<Array2<f32>, EncoderError> {
        let mut x = embedded;
        for block in &self.blocks {
            let attn_in = rms_norm(&x, &block.norm1);
            let attn_out = varlen_attention(&attn_in, cu, &block.attn, angles, &self.cfg)?;
            x += &attn_out;
            let mlp_in = rms_norm(&x, &block.norm2);
            let mut hidden = mlp_in.dot(&block.mlp_up);
            hidden.mapv_inplace(gelu);
            x += &hidden.dot(&block.mlp_down);
        }
        Ok(x)
    }

    /// Merge a single image's trunk features and project them to tokens.
    fn finish(&self, features: &Array2<f32>, grid: &PositionGrid) -> Result<EncodedImage, EncoderError> {
        let merged = merge_2x2(features, grid.rows, grid.cols)?;
        let mut hidden = merged.dot(&self.proj_up);
        hidden.mapv_inplace(gelu);
        let tokens = hidden.dot(&self.proj_down);
        Ok(EncodedImage {
            merged_rows: grid.rows / 2,
            merged_cols: grid.cols / 2,
            tokens,
        })
    }

    /// Forward one image alone.
    pub fn forward_single(&self, input: &EncoderInput) -> Result<EncodedImage, EncoderError> {
        self.check_input(input)?;
        let embedded = input.payload.dot(&self.patch_embed);
        let angles = rope_angles(&input.grid, &self.cfg);
        let cu = [0, input.payload.nrows()];
        let features = self.trunk(embedded, &cu, &angles)?;
        self.finish(&features, &input.grid)
    }

    /// Forward a batch through packed sequences: images are packed into
    /// capacity-bounded bins, each bin runs the trunk once with segment
    /// isolation, and per-image outputs are sliced back out in input order.
    pub fn forward_packed(
        &self,
        inputs: &[EncoderInput],
        capacity: usize,
        policy: PackPolicy,
    ) -> Result<Vec<EncodedImage>, EncoderError> {
        for input in inputs {
            self.check_input(input)?;
        }
        let seqs: Vec<PatchSequence> = inputs
            .iter()
            .enumerate()
            .map(|(i, inp)| PatchSequence::dry(i.to_string(), inp.payload.nrows()))
            .collect();
        let batch = packer::pack(&seqs, capacity, policy)?;

        let mut out: Vec<Option<EncodedImage>> = vec![None; inputs.len()];
        for bin in &batch.bins {
            let total = bin.total_len();
            let mut packed = Array2::<f32>::zeros((total, self.cfg.in_dim));
            let mut angles = Array2::<f64>::zeros((total, self.cfg.head_dim() / 2));
            for (k, &i) in bin.members.iter().enumerate() {
                let (lo, hi) = (bin.cu_seqlens[k], bin.cu_seqlens[k + 1]);
                packed
                    .slice_mut(s![lo..hi, ..])
                    .assign(&inputs[i].payload);
                angles
                    .slice_mut(s![lo..hi, ..])
                    .assign(&rope_angles(&inputs[i].grid, &self.cfg));
            }
            let embedded = packed.dot(&self.patch_embed);
            let features = self.trunk(embedded, &bin.cu_seqlens, &angles)?;
            for (k, &i) in bin.members.iter().enumerate() {
                let (lo, hi) = (bin.cu_seqlens[k], bin.cu_seqlens[k + 1]);
                let img_features = features.slice(s![lo..hi, ..]).to_owned();
                out[i] = Some(self.finish(&img_features, &inputs[i].grid)?);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("all images packed")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 14,
            in_dim: 12,
            embed_dim: 16,
            heads: 2,
            layers: 2,
            mlp_hidden: 24,
            out_dim: 16,
            rope_base: 10_000.0,
            seed: 42,
        }
    }

    fn random_payload(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn random_input(rng: &mut ChaCha8Rng, rows: u32, cols: u32, cfg: &EncoderConfig) -> EncoderInput {
        EncoderInput {
            payload: random_payload(rng, (rows * cols) as usize, cfg.in_dim),
            grid: PositionGrid::raster(rows, cols),
        }
    }

    #[test]
    fn synthetic_input_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let a = synthetic_input(4, 6, 7, &cfg);
        let b = synthetic_input(4, 6, 7, &cfg);
        let c = synthetic_input(4, 6, 8, &cfg);
        assert_eq!(a.payload, b.payload);
        assert_ne!(a.payload, c.payload);
        assert_eq!(a.payload.dim(), (24, cfg.in_dim));
        assert!(a.payload.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!((a.grid.rows(), a.grid.cols()), (4, 6));
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let mut bad = tiny_cfg();
        bad.heads = 3; // 16 % 3 != 0
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.embed_dim = 12;
        bad.heads = 2; // head_dim 6, not divisible by 4
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.rope_base = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rope_angles_at_origin_and_unit_row() {
        let cfg = tiny_cfg(); // head_dim 8, half_dim 4, 2 pairs per half
        let grid = PositionGrid::raster(2, 1); // positions (0,0) and (1,0)
        let angles = rope_angles(&grid, &cfg);
        assert_eq!(angles.dim(), (2, 4));
        assert!(angles.row(0).iter().all(|&a| a == 0.0));
        // position (1,0): row-half pair j=0 → 1·base⁰ = 1 rad; col-half all 0
        assert_eq!(angles[[1, 0]], 1.0);
        assert_eq!(angles[[1, 1]], 1.0 * cfg.rope_base.powf(-2.0 / 4.0));
        assert_eq!(angles[[1, 2]], 0.0);
        assert_eq!(angles[[1, 3]], 0.0);
    }

    #[test]
    fn rope_zero_angles_is_identity() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = random_payload(&mut rng, 4, cfg.embed_dim);
        let before = m.clone();
        let zeros = Array2::<f64>::zeros((4, cfg.head_dim() / 2));
        apply_rope(&mut m, &zeros, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn rope_preserves_per_head_norms() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = PositionGrid::raster(6, 5);
        let mut m = random_payload(&mut rng, 30, cfg.embed_dim);
        let before = m.clone();
        let angles = rope_angles(&grid, &cfg);
        apply_rope(&mut m, &angles, &cfg).unwrap();
        let hd = cfg.head_dim();
        for i in 0..m.nrows() {
            for h in 0..cfg.heads {
                let norm = |mat: &Array2<f32>| -> f64 {
                    mat.slice(s![i, h * hd..(h + 1) * hd])
                        .iter()
                        .map(|&v| f64::from(v) * f64::from(v))
                        .sum::<f64>()
                        .sqrt()
                };
                assert!((norm(&m) - norm(&before)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rope_attention_logits_are_translation_invariant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = PositionGrid::raster(4, 6);
        let n = grid.len();
        let q0 = random_payload(&mut rng, n, cfg.embed_dim);
        let k0 = random_payload(&mut rng, n, cfg.embed_dim);

        let logits = |grid: &PositionGrid, q0: &Array2<f32>, k0: &Array2<f32>| {
            let angles = rope_angles(grid, &cfg);
            let mut q = q0.clone();
            let mut k = k0.clone();
            apply_rope(&mut q, &angles, &cfg).unwrap();
            apply_rope(&mut k, &angles, &cfg).unwrap();
            q.dot(&k.t())
        };

        let base = logits(&grid, &q0, &k0);
        let shifted = logits(&grid.shifted(3, 5), &q0, &k0);
        let max_diff = (&base - &shifted)
            .iter()
            .fold(0f32, |m, &d| m.max(d.abs()));
        assert!(max_diff <= 1e-5, "logits drifted by {max_diff}");
    }

    #[test]
    fn varlen_isolates_segments() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = cfg.embed_dim;
        let weights = AttentionWeights {
            wq: random_payload(&mut rng, d, d),
            wk: random_payload(&mut rng, d, d),
            wv: random_payload(&mut rng, d, d),
            wo: random_payload(&mut rng, d, d),
        };
        let grid = PositionGrid::raster(2, 4);
        let content = random_payload(&mut rng, 8, d);
        let angles_one = rope_angles(&grid, &cfg);

        // single segment == plain attention over the whole matrix
        let single =
            varlen_attention(&content, &[0, 8], &weights, &angles_one, &cfg).unwrap();

        // duplicated content in two segments: each replica equals the single run
        let mut packed = Array2::<f32>::zeros((16, d));
        packed.slice_mut(s![0..8, ..]).assign(&content);
        packed.slice_mut(s![8..16, ..]).assign(&content);
        let mut angles_two = Array2::<f64>::zeros((16, cfg.head_dim() / 2));
        angles_two.slice_mut(s![0..8, ..]).assign(&angles_one);
        angles_two.slice_mut(s![8..16, ..]).assign(&angles_one);
        let both =
            varlen_attention(&packed, &[0, 8, 16], &weights, &angles_two, &cfg).unwrap();

        for seg in 0..2 {
            let replica = both.slice(s![seg * 8..(seg + 1) * 8, ..]);
            let max_diff = replica
                .iter()
                .zip(single.iter())
                .fold(0f32, |m, (&a, &b)| m.max((a - b).abs()));
            assert!(max_diff <= 1e-5);
        }
    }

    #[test]
    fn varlen_rejects_bad_cu() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = cfg.embed_dim;
        let weights = AttentionWeights {
            wq: random_payload(&mut rng, d, d),
            wk: random_payload(&mut rng, d, d),
            wv: random_payload(&mut rng, d, d),
            wo: random_payload(&mut rng, d, d),
        };
        let x = random_payload(&mut rng, 4, d);
        let angles = Array2::<f64>::zeros((4, cfg.head_dim() / 2));
        for bad in [&[1, 4][..], &[0, 3][..], &[0, 2, 2, 4][..]] {
            let err = varlen_attention(&x, bad, &weights, &angles, &cfg).unwrap_err();
            assert!(matches!(err, EncoderError::InvalidCuSeqlens(_)), "{bad:?}");
        }
    }

    #[test]
    fn merge_examples() {
        let v = Array2::from_shape_vec(
            (4, 2),
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0],
        )
        .unwrap();
        let merged = merge_2x2(&v, 2, 2).unwrap();
        assert_eq!(merged.dim(), (1, 2));
        assert_eq!(merged[[0, 0]], 2.5);
        assert_eq!(merged[[0, 1]], 25.0);

        let err = merge_2x2(&Array2::zeros((12, 2)), 3, 4).unwrap_err();
        assert!(matches!(err, EncoderError::OddGrid { rows: 3, cols: 4 }));
    }

    #[test]
    fn merge_preserves_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let features = random_payload(&mut rng, 6 * 8, 5);
        let merged = merge_2x2(&features, 6, 8).unwrap();
        for c in 0..5 {
            let mean_in: f64 = features.column(c).iter().map(|&v| f64::from(v)).sum::<f64>()
                / features.nrows() as f64;
            let mean_out: f64 = merged.column(c).iter().map(|&v| f64::from(v)).sum::<f64>()
                / merged.nrows() as f64;
            assert!((mean_in - mean_out).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_yields_quarter_tokens() {
        let cfg = tiny_cfg();
        let enc = Encoder::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // a 336×336 plan: 24×24 patch grid, 576 patches, 144 merged tokens
        let input = random_input(&mut rng, 24, 24, &cfg);
        let out = enc.forward_single(&input).unwrap();
        assert_eq!(out.tokens.nrows(), 144);
        assert_eq!(out.tokens.ncols(), cfg.out_dim);
        assert_eq!((out.merged_rows, out.merged_cols), (12, 12));
    }

    #[test]
    fn forward_rejects_odd_grid() {
        let cfg = tiny_cfg();
        let enc = Encoder::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random_input(&mut rng, 27, 27, &cfg);
        let err = enc.forward_single(&input).unwrap_err();
        assert!(matches!(err, EncoderError::OddGrid { rows: 27, cols: 27 }));
    }

    #[test]
    fn zeroed_blocks_pass_constants_through() {
        let cfg = tiny_cfg();
        let mut enc = Encoder::new(cfg.clone()).unwrap();
        for block in &mut enc.blocks {
            block.attn.wq.fill(0.0);
            block.attn.wk.fill(0.0);
            block.attn.wv.fill(0.0);
            block.attn.wo.fill(0.0);
            block.mlp_up.fill(0.0);
            block.mlp_down.fill(0.0);
        }
        // constant patch rows → constant embeddings → merger sees constants
        let payload = Array2::from_elem((16, cfg.in_dim), 0.25);
        let input = EncoderInput {
            payload,
            grid: PositionGrid::raster(4, 4),
        };
        let embedded_row = input.payload.row(0).dot(&enc.patch_embed);
        let features = enc
            .trunk(
                input.payload.dot(&enc.patch_embed),
                &[0, 16],
                &rope_angles(&input.grid, &cfg),
            )
            .unwrap();
        let merged = merge_2x2(&features, 4, 4).unwrap();
        for row in merged.rows() {
            for (a, b) in row.iter().zip(embedded_row.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn packed_forward_matches_unpacked() {
        let cfg = tiny_cfg();
        let enc = Encoder::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = vec![
            random_input(&mut rng, 4, 6, &cfg),
            random_input(&mut rng, 2, 8, &cfg),
            random_input(&mut rng, 6, 4, &cfg),
        ];
        // capacity forces real packing: 24+16+24 = 64 → at least two bins of 40
        let packed = enc
            .forward_packed(&inputs, 40, PackPolicy::FirstFitDecreasing)
            .unwrap();
        assert_eq!(packed.len(), 3);
        for (input, got) in inputs.iter().zip(&packed) {
            let solo = enc.forward_single(input).unwrap();
            assert_eq!(solo.tokens.dim(), got.tokens.dim());
            let max_diff = solo
                .tokens
                .iter()
                .zip(got.tokens.iter())
                .fold(0f32, |m, (&a, &b)| m.max((a - b).abs()));
            assert!(max_diff <= 1e-5, "packed deviates by {max_diff}");
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let cfg = tiny_cfg();
        let e1 = Encoder::new(cfg.clone()).unwrap();
        let e2 = Encoder::new(cfg.clone()).unwrap();
        assert_eq!(e1.patch_embed, e2.patch_embed);
        assert_eq!(e1.blocks.len(), e2.blocks.len());
        for (b1, b2) in e1.blocks.iter().zip(&e2.blocks) {
            assert_eq!(b1, b2);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = random_input(&mut rng, 4, 4, &cfg);
        let o1 = e1.forward_single(&input).unwrap();
        let o2 = e2.forward_single(&input).unwrap();
        assert_eq!(o1.tokens, o2.tokens);

        let mut other = cfg;
        other.seed = 43;
        let e3 = Encoder::new(other).unwrap();
        assert_ne!(e1.patch_embed, e3.patch_embed);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn packing_equivalence_over_random_configs(
            arch in prop_oneof![
                Just((16usize, 1usize)),
                Just((16, 2)),
                Just((32, 2)),
                Just((32, 4)),
                Just((64, 4)),
                Just((24, 2)),
            ],
            layers in 1usize..=2,
            grids in proptest::collection::vec((1u32..=3, 1u32..=3), 2..=4),
            seed in 0u64..500,
        ) {
            let (embed_dim, heads) = arch;
            let cfg = EncoderConfig {
                patch_size: 14,
                in_dim: 8,
                embed_dim,
                heads,
                layers,
                mlp_hidden: 16,
                out_dim: 8,
                rope_base: 10_000.0,
                seed,
            };
            let enc = Encoder::new(cfg.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
            let inputs: Vec<EncoderInput> = grids
                .into_iter()
                .map(|(r, c)| random_input(&mut rng, 2 * r, 2 * c, &cfg))
                .collect();
            let capacity = inputs.iter().map(|i| i.payload.nrows()).max().unwrap() + 4;
            let packed = enc.forward_packed(&inputs, capacity, PackPolicy::FirstFitDecreasing).unwrap();
            for (input, got) in inputs.iter().zip(&packed) {
                let solo = enc.forward_single(input).unwrap();
                let max_diff = solo
                    .tokens
                    .iter()
                    .zip(got.tokens.iter())
                    .fold(0f32, |m, (&a, &b)| m.max((a - b).abs()));
                prop_assert!(max_diff <= 1e-5, "deviation {max_diff}");
            }
        }

        #[test]
        fn token_count_law(units_w in 1u32..=5, units_h in 1u32..=5) {
            // planned sides are multiples of 28 → grid dims even; output
            // tokens = (w/28)·(h/28)
            let cfg = tiny_cfg();
            let enc = Encoder::new(cfg.clone()).unwrap();
            let (rows, cols) = (2 * units_h, 2 * units_w);
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from(units_w * 37 + units_h));
            let input = random_input(&mut rng, rows, cols, &cfg);
            let out = enc.forward_single(&input).unwrap();
            prop_assert_eq!(out.tokens.nrows() as u32, units_w * units_h);
        }
    }
}
