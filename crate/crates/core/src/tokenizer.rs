//! Turns a frame pair into the concatenated two-frame token sequence.
//!
//! Tokens `0..N/2` come from the first frame and `N/2..N` from the second,
//! both in row-major grid order, so token `i` and token `i + N/2` sit on the
//! same grid cell.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::video::{Frame, FramePair, GridCell, CHANNELS};

pub const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub tokens_per_frame: usize,
    pub total_tokens: usize,
    pub grid: (usize, usize),
}

impl FrameLayout {
    pub fn new(grid_rows: usize, grid_cols: usize) -> Self {
        let per = grid_rows * grid_cols;
        Self { tokens_per_frame: per, total_tokens: 2 * per, grid: (grid_rows, grid_cols) }
    }

    /// Frame (0 or 1) that token `i` belongs to.
    #[inline]
    pub fn frame_of(&self, i: usize) -> usize {
        usize::from(i >= self.tokens_per_frame)
    }

    /// Index of the token's grid cell within its frame.
    #[inline]
    pub fn cell_index(&self, i: usize) -> usize {
        i % self.tokens_per_frame
    }

    pub fn cell_of(&self, i: usize) -> GridCell {
        let c = self.cell_index(i);
        GridCell { row: c / self.grid.1, col: c % self.grid.1 }
    }

    pub fn token(&self, frame: usize, cell: GridCell) -> usize {
        frame * self.tokens_per_frame + cell.row * self.grid.1 + cell.col
    }

    /// The same grid cell in the other frame.
    #[inline]
    pub fn temporal_twin(&self, i: usize) -> usize {
        (i + self.tokens_per_frame) % self.total_tokens
    }

    #[inline]
    pub fn same_frame(&self, i: usize, j: usize) -> bool {
        self.frame_of(i) == self.frame_of(j)
    }

    pub fn frame_range(&self, frame: usize) -> std::ops::Range<usize> {
        frame * self.tokens_per_frame..(frame + 1) * self.tokens_per_frame
    }
}

/// Masked token indices, sorted, with their complement.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub ratio: f64,
}

impl MaskSet {
    pub fn none(total: usize) -> Self {
        Self { masked: Vec::new(), visible: (0..total).collect(), ratio: 0.0 }
    }

    pub fn from_masked(mut masked: Vec<usize>, total: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= total) {
            return Err(Error::rejected("masked index out of range"));
        }
        let mut is_masked = vec![false; total];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..total).filter(|&i| !is_masked[i]).collect();
        let ratio = masked.len() as f64 / total as f64;
        Ok(Self { masked, visible, ratio })
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

pub fn mask_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).floor() as usize
}

/// Uniform subset of `floor(ratio · N)` tokens drawn jointly over both frames.
pub fn sample_mask(layout: &FrameLayout, ratio: f64, rng: &mut impl Rng) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::rejected(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n = layout.total_tokens;
    let count = mask_count(n, ratio);
    let masked = rand::seq::index::sample(rng, n, count).into_vec();
    let mut set = MaskSet::from_masked(masked, n)?;
    set.ratio = ratio;
    Ok(set)
}

fn frame_patches<T: Real>(frame: &Frame, patch: usize, out: &mut Vec<T>) {
    let (gr, gc) = (frame.height / patch, frame.width / patch);
    for r in 0..gr {
        for c in 0..gc {
            for py in 0..patch {
                for px in 0..patch {
                    for &v in frame.pixel(c * patch + px, r * patch + py) {
                        out.push(T::c(f64::from(v)));
                    }
                }
            }
        }
    }
}

pub fn patch_dim(patch: usize) -> usize {
    patch * patch * CHANNELS
}

/// Splits both frames into non-overlapping patches, frame one first.
pub fn patchify<T: Real>(pair: &FramePair, patch: usize) -> Result<(Tensor<T>, FrameLayout)> {
    let (a, b) = (&pair.frame_a, &pair.frame_b);
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::rejected("frames of a pair differ in size"));
    }
    if patch == 0 || a.width % patch != 0 || a.height % patch != 0 {
        return Err(Error::rejected(format!("{}x{} frame not divisible by patch {patch}", a.width, a.height)));
    }
    let layout = FrameLayout::new(a.height / patch, a.width / patch);
    let mut data = Vec::with_capacity(layout.total_tokens * patch_dim(patch));
    frame_patches(a, patch, &mut data);
    frame_patches(b, patch, &mut data);
    Ok((Tensor::from_rows(layout.total_tokens, patch_dim(patch), data)?, layout))
}

/// Inverse of the per-frame part of [`patchify`].
pub fn unpatchify<T: Real>(rows: &Tensor<T>, layout: &FrameLayout, patch: usize, frame: usize) -> Frame {
    let (gr, gc) = layout.grid;
    let mut out = Frame::filled(gc * patch, gr * patch, 0.0);
    for cell in 0..layout.tokens_per_frame {
        let row = rows.row(frame * layout.tokens_per_frame + cell);
        let (r, c) = (cell / gc, cell % gc);
        for py in 0..patch {
            for px in 0..patch {
                let base = (py * patch + px) * CHANNELS;
                let dst = out.pixel_mut(c * patch + px, r * patch + py);
                for ch in 0..CHANNELS {
                    dst[ch] = row[base + ch].f64() as f32;
                }
            }
        }
    }
    out
}

/// Fixed 2-D sine-cosine table with one row per grid cell. Half of the
/// columns encode the row coordinate, half the column coordinate.
pub fn sincos_table<T: Real>(grid: (usize, usize), dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::rejected(format!("positional width {dim} must be divisible by 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    Ok(Tensor::from_fn(grid.0 * grid.1, dim, |cell, d| {
        let (r, c) = ((cell / grid.1) as f64, (cell % grid.1) as f64);
        let (pos, k) = if d < dim / 2 { (c, d) } else { (r, d - dim / 2) };
        let v = if k < quarter { (pos * omega[k]).sin() } else { (pos * omega[k - quarter]).cos() };
        T::c(v)
    }))
}

/// Embedding parameters as they appear on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub mask_token: Var,
    /// Two rows, one per frame. `None` disables frame identity embeddings.
    pub identity: Option<Var>,
    /// Fixed table with one row per grid cell, shared by both frames.
    pub positional: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedTarget {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub embeddings: Var,
    /// Token index of each embedding row.
    pub tokens: Vec<usize>,
    pub layout: FrameLayout,
    pub mask: MaskSet,
    pub positional_added: bool,
    pub identity_added: bool,
}

/// Adds positional and (optionally) identity rows to `x`, whose row `r`
/// holds token `tokens[r]`.
pub fn add_token_embeddings<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    tokens: &[usize],
    positional: Var,
    identity: Option<Var>,
    layout: &FrameLayout,
) -> Result<Var> {
    let cells: Vec<usize> = tokens.iter().map(|&t| layout.cell_index(t)).collect();
    let mut x = tape.add_indexed_rows(x, positional, cells)?;
    if let Some(id) = identity {
        let frames: Vec<usize> = tokens.iter().map(|&t| layout.frame_of(t)).collect();
        x = tape.add_indexed_rows(x, id, frames)?;
    }
    Ok(x)
}

/// Projects the patches of `tokens` (in the given order) and adds their
/// positional and identity embeddings.
pub fn embed_tokens<T: Real>(
    tape: &mut Tape<'_, T>,
    patches: Var,
    tokens: &[usize],
    params: &EmbedVars,
    layout: &FrameLayout,
) -> Result<Var> {
    let rows = tape.gather_rows(patches, tokens.to_vec())?;
    let projected = tape.matmul(rows, params.proj_w)?;
    let projected = tape.add_row_bias(projected, params.proj_b)?;
    add_token_embeddings(tape, projected, tokens, params.positional, params.identity, layout)
}

/// Builds the full decoder-side sequence: `visible_rows[r]` at `mask.visible[r]`,
/// the mask token elsewhere, then positional and identity embeddings.
pub fn assemble_full<T: Real>(
    tape: &mut Tape<'_, T>,
    visible_rows: Var,
    mask: &MaskSet,
    mask_token: Var,
    positional: Var,
    identity: Option<Var>,
    layout: &FrameLayout,
) -> Result<Var> {
    let n = layout.total_tokens;
    let full = tape.scatter_rows(visible_rows, mask_token, mask.visible.clone(), n)?;
    let tokens: Vec<usize> = (0..n).collect();
    add_token_embeddings(tape, full, &tokens, positional, identity, layout)
}

/// Embeds a patchified pair for the encoder (visible tokens only) or the
/// decoder (all tokens, mask token at masked positions).
pub fn embed<T: Real>(
    tape: &mut Tape<'_, T>,
    patches: Var,
    mask: &MaskSet,
    params: &EmbedVars,
    layout: &FrameLayout,
    target: EmbedTarget,
) -> Result<TokenSequence> {
    let rows = tape.gather_rows(patches, mask.visible.clone())?;
    let projected = tape.matmul(rows, params.proj_w)?;
    let projected = tape.add_row_bias(projected, params.proj_b)?;
    let (embeddings, tokens) = match target {
        EmbedTarget::Encoder => (
            add_token_embeddings(tape, projected, &mask.visible, params.positional, params.identity, layout)?,
            mask.visible.clone(),
        ),
        EmbedTarget::Decoder => (
            assemble_full(tape, projected, mask, params.mask_token, params.positional, params.identity, layout)?,
            (0..layout.total_tokens).collect(),
        ),
    };
    Ok(TokenSequence {
        embeddings,
        tokens,
        layout: *layout,
        mask: mask.clone(),
        positional_added: true,
        identity_added: params.identity.is_some(),
    })
}

/// Per-patch mean and standard deviation (`sqrt(var + eps)`).
pub fn patch_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, (var + T::c(TARGET_NORM_EPS)).sqrt())
}

/// Normalized pixel targets for the masked patches, in mask order.
pub fn normalize_targets<T: Real>(patches: &Tensor<T>, mask: &MaskSet) -> Result<Tensor<T>> {
    let cols = patches.cols();
    let mut data = Vec::with_capacity(mask.masked.len() * cols);
    for &m in &mask.masked {
        if m >= patches.rows() {
            return Err(Error::rejected("mask index beyond patch rows"));
        }
        let row = patches.row(m);
        let (mean, std) = patch_stats(row);
        data.extend(row.iter().map(|&v| (v - mean) / std));
    }
    Tensor::from_rows(mask.masked.len(), cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::StreamRng;
    use rand::SeedableRng;

    fn constant_pair(size: usize, value: f32) -> FramePair {
        FramePair::from_single(Frame::filled(size, size, value))
    }

    #[test]
    fn patch_counts() {
        let (p, layout) = patchify::<f64>(&constant_pair(64, 0.3), 8).unwrap();
        assert_eq!(layout.total_tokens, 128);
        assert_eq!(p.shape(), &[128, 192]);
        let (p, layout) = patchify::<f32>(&constant_pair(224, 0.3), 16).unwrap();
        assert_eq!(layout.total_tokens, 392);
        assert_eq!(p.cols(), 768);
    }

    #[test]
    fn constant_frames_give_identical_rows() {
        let (p, _) = patchify::<f64>(&constant_pair(32, 0.7), 8).unwrap();
        assert!((1..p.rows()).all(|r| p.row(r) == p.row(0)));
    }

    #[test]
    fn indivisible_frames_are_rejected() {
        assert!(patchify::<f64>(&constant_pair(30, 0.0), 8).is_err());
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let clip = crate::video::generate_clip(&crate::video::SceneSpec { clip_length: 2, ..Default::default() }, 3).unwrap();
        let pair = FramePair { frame_a: clip.frames[0].clone(), frame_b: clip.frames[1].clone(), start: 0, gap: 1, correspondence: None };
        let (p, layout) = patchify::<f64>(&pair, 8).unwrap();
        assert_eq!(unpatchify(&p, &layout, 8, 0), pair.frame_a);
        assert_eq!(unpatchify(&p, &layout, 8, 1), pair.frame_b);
    }

    #[test]
    fn mask_sizes() {
        let mut rng = StreamRng::seed_from_u64(0);
        let m = sample_mask(&FrameLayout::new(8, 8), 0.75, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 96);
        assert_eq!(m.visible.len(), 32);
        let m = sample_mask(&FrameLayout::new(14, 14), 0.75, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 294);
        assert!(sample_mask(&FrameLayout::new(2, 2), 1.0, &mut rng).is_err());
        assert!(sample_mask(&FrameLayout::new(2, 2), 0.0, &mut rng).is_err());
    }

    #[test]
    fn mask_partitions_tokens() {
        let mut rng = StreamRng::seed_from_u64(4);
        let m = sample_mask(&FrameLayout::new(8, 8), 0.75, &mut rng).unwrap();
        let mut all: Vec<usize> = m.masked.iter().chain(&m.visible).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..128).collect::<Vec<_>>());
    }

    #[test]
    fn masking_frequency_is_uniform() {
        let layout = FrameLayout::new(8, 8);
        let mut rng = StreamRng::seed_from_u64(17);
        let mut hits = vec![0u32; 128];
        let draws = 10_000;
        for _ in 0..draws {
            for m in sample_mask(&layout, 0.75, &mut rng).unwrap().masked {
                hits[m] += 1;
            }
        }
        for h in hits {
            let f = f64::from(h) / f64::from(draws);
            assert!((f - 0.75).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn positional_rows_are_shared_across_frames() {
        let layout = FrameLayout::new(4, 4);
        let table = sincos_table::<f64>(layout.grid, 16).unwrap();
        for i in 0..layout.tokens_per_frame {
            assert_eq!(layout.cell_index(i), layout.cell_index(layout.temporal_twin(i)));
        }
        assert_ne!(table.row(0), table.row(1));
        assert_ne!(table.row(1), table.row(4));
    }

    #[test]
    fn normalized_target_examples() {
        let patches = Tensor::from_rows(1, 4, vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let m = MaskSet::from_masked(vec![0], 1).unwrap();
        let t = normalize_targets(&patches, &m).unwrap();
        for (got, want) in t.data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-5);
        }
        let flat = Tensor::from_rows(1, 4, vec![0.4f64; 4]).unwrap();
        let t = normalize_targets(&flat, &m).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn normalized_target_is_centered() {
        let patches = Tensor::<f64>::from_fn(3, 12, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.2);
        let m = MaskSet::from_masked(vec![0, 2], 3).unwrap();
        let t = normalize_targets(&patches, &m).unwrap();
        for r in 0..2 {
            let mean: f64 = t.row(r).iter().sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-6);
        }
    }
}
