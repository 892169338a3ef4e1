//! Test-time attention decoding. Group-wise attention comes straight from
//! the masking network — no brain data involved. Individual-specific
//! attention relates each image block to one brain recording: a 3×3 sliding
//! window over the image feature grid is pooled, encoded, paired with the
//! recording's code, and scored by the relational network, yielding a
//! per-cell relational map that reweights the image.

use crate::attention;
use crate::encoders;
use crate::error::{Error, Result};
use crate::nn;
use crate::relational;
use crate::tensorcore::{Graph, Mode, ParamStore, Scalar, Tensor};

/// Input pixels covered by one feature-grid cell along each axis (the
/// product of the five stride-2 stages).
pub const CELL_PX: usize = 32;

fn single_image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::usage(format!("expected a single image [c, h, w], got {s:?}"))),
    }
}

fn require_cell_aligned(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % CELL_PX != 0 || w % CELL_PX != 0 {
        return Err(Error::usage(format!(
            "image dimensions {h}x{w} must be non-zero multiples of {CELL_PX}"
        )));
    }
    Ok(())
}

/// Largest top-left sub-image made of whole cells: `[c, h, w]` becomes
/// `[c, 32·⌊h/32⌋, 32·⌊w/32⌋]`. Partial edge blocks are discarded. Errors if
/// the image is smaller than one cell.
pub fn crop_to_cells<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (offsets, cropped) = anchored_crop(image, false)?;
    debug_assert_eq!(offsets, (0, 0));
    Ok(cropped)
}

/// Like [`crop_to_cells`] but centered: returns the `(left, top)` pixel
/// offset of the crop so coordinates (gaze points) can be shifted into it.
pub fn center_crop_to_cells<T: Scalar>(image: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
    let (offsets, cropped) = anchored_crop(image, true)?;
    Ok((cropped, offsets))
}

fn anchored_crop<T: Scalar>(
    image: &Tensor<T>,
    centered: bool,
) -> Result<((usize, usize), Tensor<T>)> {
    let (c, h, w) = single_image_dims(image)?;
    let ch = (h / CELL_PX) * CELL_PX;
    let cw = (w / CELL_PX) * CELL_PX;
    if ch == 0 || cw == 0 {
        return Err(Error::usage(format!(
            "image {h}x{w} is smaller than one {CELL_PX}x{CELL_PX} cell"
        )));
    }
    let (left, top) = if centered { ((w - cw) / 2, (h - ch) / 2) } else { (0, 0) };
    if ch == h && cw == w {
        return Ok(((0, 0), image.clone()));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for ci in 0..c {
        for y in 0..ch {
            let s = (ci * h + y + top) * w + left;
            out.extend_from_slice(&src[s..s + cw]);
        }
    }
    Ok(((left, top), Tensor::new(&[c, ch, cw], out)?))
}

// ---------------------------------------------------------------------------
// Group-wise attention: the masking network alone
// ---------------------------------------------------------------------------

/// Attention decoded for an unseen viewer from the masking network alone.
pub struct GroupAttention<T: Scalar> {
    /// Possibility grid `[h/32, w/32]`, each cell in (0, 1).
    pub alpha: Tensor<T>,
    /// Upsampled pixel mask `[h, w]`.
    pub mask: Tensor<T>,
    /// `image ⊙ mask`, `[c, h, w]`.
    pub attended: Tensor<T>,
    /// `image ⊙ (1 − mask)`, `[c, h, w]`.
    pub neglected: Tensor<T>,
}

/// Run the masking network on one image and split it into attended and
/// neglected content. Image dimensions must be whole cells (see
/// [`crop_to_cells`] / [`center_crop_to_cells`] for preparing raw frames).
pub fn group_attention<T: Scalar>(
    store: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<GroupAttention<T>> {
    let (c, h, w) = single_image_dims(image)?;
    require_cell_aligned(h, w)?;
    let batched = Tensor::new(&[1, c, h, w], image.data().to_vec())?;
    let mut g: Graph<T> = Graph::new();
    let x = g.input("image", &[1, c, h, w])?;
    let alpha = attention::alpha_grid_node(&mut g, store, x)?;
    let seg = attention::segment_nodes(&mut g, x, alpha)?;
    let eval = g.evaluate(store, &[("image", &batched)], Mode::Eval)?;
    Ok(GroupAttention {
        alpha: Tensor::new(&[h / CELL_PX, w / CELL_PX], eval.value(alpha).to_vec())?,
        mask: Tensor::new(&[h, w], eval.value(seg.mask).to_vec())?,
        attended: Tensor::new(&[c, h, w], eval.value(seg.attended).to_vec())?,
        neglected: Tensor::new(&[c, h, w], eval.value(seg.neglected).to_vec())?,
    })
}

// ---------------------------------------------------------------------------
// Feature grid and the sliding-window relational map
// ---------------------------------------------------------------------------

/// Pre-pooling spatial features of the image encoder,
/// `[C_f, ⌊h/32⌋, ⌊w/32⌋]`. Each cell summarizes one 32×32 input block;
/// partial edge blocks are cropped away first. Depends only on the image,
/// never on a recording, so one grid serves any number of subjects.
pub fn feature_grid<T: Scalar>(store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let cropped = crop_to_cells(image)?;
    let (c, h, w) = single_image_dims(&cropped)?;
    let batched = Tensor::new(&[1, c, h, w], cropped.data().to_vec())?;
    let mut g: Graph<T> = Graph::new();
    let x = g.input("image", &[1, c, h, w])?;
    let grid = encoders::feature_grid_node(&mut g, store, x)?;
    let gs = g.shape(grid).to_vec();
    let eval = g.evaluate(store, &[("image", &batched)], Mode::Eval)?;
    Tensor::new(&[gs[1], gs[2], gs[3]], eval.value(grid).to_vec())
}

/// 3×3 window means over a feature grid `[C_f, gh, gw]`, flattened row-major
/// to `[gh·gw, C_f]`. Border windows average only their in-bounds cells
/// (count normalization), so a spatially constant grid pools to itself and
/// the map keeps the full grid size.
pub fn window_pool<T: Scalar>(grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (cf, gh, gw) = match *grid.shape() {
        [a, b, c] => (a, b, c),
        ref s => {
            return Err(Error::usage(format!("feature grid must be [C_f, gh, gw], got {s:?}")))
        }
    };
    let src = grid.data();
    let mut out = vec![T::zero(); gh * gw * cf];
    for i in 0..gh {
        let i0 = i.saturating_sub(1);
        let i1 = (i + 1).min(gh - 1);
        for j in 0..gw {
            let j0 = j.saturating_sub(1);
            let j1 = (j + 1).min(gw - 1);
            let count = T::from_f64(((i1 - i0 + 1) * (j1 - j0 + 1)) as f64);
            let row = (i * gw + j) * cf;
            for ch in 0..cf {
                let mut acc = T::zero();
                for y in i0..=i1 {
                    for x in j0..=j1 {
                        acc = acc + src[(ch * gh + y) * gw + x];
                    }
                }
                out[row + ch] = acc / count;
            }
        }
    }
    Tensor::new(&[gh * gw, cf], out)
}

/// Relational map from a precomputed feature grid and one recording row of
/// length V: every windowed block is encoded by the shared dense+tanh head,
/// paired with the recording's code, and scored by the relational network.
/// Returns `[gh, gw]` with entries in (−1, 1).
pub fn relational_map_from_grid<T: Scalar>(
    store: &ParamStore<T>,
    grid: &Tensor<T>,
    fmri: &[T],
) -> Result<Tensor<T>> {
    let (gh, gw) = match *grid.shape() {
        [_, b, c] => (b, c),
        ref s => {
            return Err(Error::usage(format!("feature grid must be [C_f, gh, gw], got {s:?}")))
        }
    };
    let v = store.require(encoders::FMRI_WEIGHT)?.shape()[1];
    if fmri.len() != v {
        return Err(Error::usage(format!(
            "recording has {} voxels but the encoder expects {v}",
            fmri.len()
        )));
    }
    let pooled = window_pool(grid)?;
    let rows = gh * gw;

    // One brain code, replicated so every window row pairs with it.
    let code = encoders::encode_fmri(store, &Tensor::new(&[1, v], fmri.to_vec())?)?;
    let d = code.shape()[1];
    let mut rep = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        rep.extend_from_slice(code.data());
    }
    let codes = Tensor::new(&[rows, d], rep)?;

    let mut g: Graph<T> = Graph::new();
    let p = g.input("pooled", pooled.shape())?;
    let b = g.input("braincode", codes.shape())?;
    let fc = nn::dense_from_store(&mut g, store, p, &format!("{}.fc", encoders::IMG_PREFIX))?;
    let img_code = g.tanh(fc);
    let pairs = g.concat(&[img_code, b], 1)?;
    let scores = relational::relate_node(&mut g, store, pairs)?;
    let eval = g.evaluate(store, &[("pooled", &pooled), ("braincode", &codes)], Mode::Eval)?;
    Tensor::new(&[gh, gw], eval.value(scores).to_vec())
}

/// Relational map of one image against one recording row. The image must
/// already be whole cells; raw frames go through [`crop_to_cells`] or
/// [`center_crop_to_cells`] first.
pub fn relational_map<T: Scalar>(
    store: &ParamStore<T>,
    image: &Tensor<T>,
    fmri: &[T],
) -> Result<Tensor<T>> {
    let (_, h, w) = single_image_dims(image)?;
    require_cell_aligned(h, w)?;
    let grid = feature_grid(store, image)?;
    relational_map_from_grid(store, &grid, fmri)
}

// ---------------------------------------------------------------------------
// Individual-specific attention: image ⊙ rectified upsampled map
// ---------------------------------------------------------------------------

/// How signed relational values are rectified before multiplying the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RmapRectify {
    /// Clamp negatives to zero: a below-zero relation marks neglected
    /// content, and multiplying by it would invert colors instead of
    /// dimming them. The default.
    #[default]
    Clamp,
    /// Min-max rescale the upsampled field into [0, 1]. A constant field has
    /// no range to rescale and falls back to clamping into [0, 1].
    MinMax,
}

/// Rectify a pixel field in place per `mode`.
pub fn rectify<T: Scalar>(field: &mut [T], mode: RmapRectify) {
    match mode {
        RmapRectify::Clamp => {
            for v in field.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        RmapRectify::MinMax => {
            let (mut lo, mut hi) = (T::infinity(), -T::infinity());
            for &v in field.iter() {
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            if hi > lo {
                let span = hi - lo;
                for v in field.iter_mut() {
                    *v = (*v - lo) / span;
                }
            } else {
                for v in field.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    } else if *v > T::one() {
                        *v = T::one();
                    }
                }
            }
        }
    }
}

/// Bilinearly upsample a relational map `[gh, gw]` to a pixel field
/// `[h, w]`.
pub fn upsample_map<T: Scalar>(rmap: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (gh, gw) = match *rmap.shape() {
        [a, b] => (a, b),
        ref s => return Err(Error::usage(format!("relational map must be [gh, gw], got {s:?}"))),
    };
    let grid = Tensor::new(&[1, 1, gh, gw], rmap.data().to_vec())?;
    let up = attention::upsample_mask(&grid, h, w)?;
    Tensor::new(&[h, w], up.data().to_vec())
}

/// Individual-specific attended content: upsample the relational map to
/// pixel size, rectify it, and multiply the image per channel.
pub fn individual_attention<T: Scalar>(
    image: &Tensor<T>,
    rmap: &Tensor<T>,
    mode: RmapRectify,
) -> Result<Tensor<T>> {
    let (c, h, w) = single_image_dims(image)?;
    let up = upsample_map(rmap, h, w)?;
    let mut field = up.data().to_vec();
    rectify(&mut field, mode);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        out.extend(plane.iter().zip(&field).map(|(&p, &m)| p * m));
    }
    Tensor::new(&[c, h, w], out)
}
