//! Quantitative evaluation: gaze hit rates with chance baselines, mean
//! relation scores per dataset split, the hemodynamic-delay sweep, and
//! brain-network extraction from the linear recording encoder's rows.

use crate::alignment::{period_ms_for, FmriSeries};
use crate::encoders;
use crate::error::{Error, Result};
use crate::inference::{self, RmapRectify};
use crate::relational::{self, PairedSet, TrainConfig};
use crate::tensorcore::{ParamStore, Scalar, Tensor};

// ---------------------------------------------------------------------------
// Hit rate against gaze
// ---------------------------------------------------------------------------

/// Gaze hit rate against decoded attention masks, with the chance baseline
/// a uniformly random gaze point would score on the same masks.
#[derive(Debug, Clone, PartialEq)]
pub struct HitRateReport {
    pub split: String,
    pub hits: usize,
    pub total: usize,
    /// `hits / total`.
    pub rate: f64,
    /// Mean fraction of mask pixels at or above threshold.
    pub chance: f64,
}

/// Count gaze points landing on mask pixels at or above `threshold`. Each
/// sample pairs a gaze point `(x, y)` in pixel coordinates with a `[h, w]`
/// mask; the point reads the mask at its containing pixel. Chance is the hit
/// rate uniformly random gaze would get: the mean above-threshold fraction.
pub fn hit_rate<T: Scalar>(
    samples: &[((f64, f64), Tensor<T>)],
    threshold: f64,
    split: &str,
) -> Result<HitRateReport> {
    if samples.is_empty() {
        return Err(Error::usage("hit rate needs at least one gaze/mask sample"));
    }
    if !threshold.is_finite() {
        return Err(Error::usage(format!("hit threshold must be finite, got {threshold}")));
    }
    let mut hits = 0usize;
    let mut area = 0.0f64;
    for (i, ((x, y), mask)) in samples.iter().enumerate() {
        let (h, w) = match *mask.shape() {
            [h, w] if h > 0 && w > 0 => (h, w),
            ref s => {
                return Err(Error::usage(format!("sample {i}: mask must be [h, w], got {s:?}")))
            }
        };
        if !(*x >= 0.0 && *x < w as f64 && *y >= 0.0 && *y < h as f64) {
            return Err(Error::usage(format!(
                "sample {i}: gaze ({x}, {y}) outside the {w}x{h} mask"
            )));
        }
        let px = (y.floor() as usize) * w + x.floor() as usize;
        let above = mask.data().iter().filter(|v| v.as_f64() >= threshold).count();
        if mask.data()[px].as_f64() >= threshold {
            hits += 1;
        }
        area += above as f64 / (h * w) as f64;
    }
    Ok(HitRateReport {
        split: split.to_string(),
        hits,
        total: samples.len(),
        rate: hits as f64 / samples.len() as f64,
        chance: area / samples.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Mean relation scores over a split
// ---------------------------------------------------------------------------

/// Mean relation scores over one split: the positive pairing, the negative
/// pairing, and the two zero-target pairings.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalStats {
    pub split: String,
    pub n: usize,
    pub mean_attended: f64,
    pub mean_neglected: f64,
    pub mean_combined: f64,
    pub mean_blank: f64,
}

impl RelationalStats {
    /// The two zero-target pairings folded into one reported column.
    pub fn regularization(&self) -> f64 {
        (self.mean_combined + self.mean_blank) / 2.0
    }
}

fn mean<T: Scalar>(values: &[T]) -> f64 {
    values.iter().map(|v| v.as_f64()).sum::<f64>() / values.len() as f64
}

/// Average the four relation scores over every sample of `data`
/// (inference-mode normalization throughout).
pub fn relational_stats<T: Scalar>(
    store: &ParamStore<T>,
    data: &PairedSet<T>,
    combined_encodes_original: bool,
    split: &str,
) -> Result<RelationalStats> {
    if data.is_empty() {
        return Err(Error::usage("cannot average relation scores over zero samples"));
    }
    let out = relational::relation_outputs(store, data, combined_encodes_original)?;
    Ok(RelationalStats {
        split: split.to_string(),
        n: data.len(),
        mean_attended: mean(&out.r_att),
        mean_neglected: mean(&out.r_neg),
        mean_combined: mean(&out.r_comb),
        mean_blank: mean(&out.r_blank),
    })
}

// ---------------------------------------------------------------------------
// Frame-level samples for full-frame attention scoring
// ---------------------------------------------------------------------------

/// One frame kept for full-frame evaluation: its gaze point in frame
/// coordinates and the recording volume delayed to match it.
#[derive(Debug, Clone)]
pub struct FrameSample<T: Scalar> {
    pub frame_index: usize,
    pub gaze: (f64, f64),
    pub fmri: Vec<T>,
}

/// Keep every frame with gaze and an aligned delayed volume, without
/// cropping. Uses the same skip rule as the training pairing, so the output
/// lines up one-to-one with the paired-crop samples built from the same
/// gaze and recording series.
pub fn frame_samples<T: Scalar>(
    n_frames: usize,
    fps: f64,
    gaze: &[Option<(f64, f64)>],
    fmri: &FmriSeries<T>,
    delay_s: f64,
) -> Result<Vec<FrameSample<T>>> {
    if delay_s < 0.0 {
        return Err(Error::usage(format!("delay must be non-negative, got {delay_s}")));
    }
    if gaze.len() != n_frames {
        return Err(Error::usage(format!(
            "gaze has {} entries for {n_frames} frames",
            gaze.len()
        )));
    }
    let frame_period = period_ms_for(fps)?;
    let delay_ms = (delay_s * 1000.0).round() as i64;
    let mut out = Vec::new();
    for (i, g) in gaze.iter().enumerate() {
        let Some(point) = g else { continue };
        let t = i as i64 * frame_period + delay_ms - fmri.t0_ms();
        if t < 0 || t % fmri.period_ms() != 0 {
            continue;
        }
        let idx = (t / fmri.period_ms()) as usize;
        if idx >= fmri.len() {
            continue;
        }
        out.push(FrameSample { frame_index: i, gaze: *point, fmri: fmri.volume(idx).to_vec() });
    }
    Ok(out)
}

/// Index of the first held-out sample under the leading-block time split —
/// the same cut rule the trainer uses.
pub fn time_cut(n: usize, train_frac: f64) -> Result<usize> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::usage(format!(
            "training fraction must be in (0, 1), got {train_frac}"
        )));
    }
    if n < 2 {
        return Err(Error::usage(format!(
            "cannot split {n} sample(s) into non-empty train and test blocks"
        )));
    }
    Ok(((n as f64 * train_frac).round() as usize).clamp(1, n - 1))
}

/// Hit mask for individual-specific attention: the relational map is
/// upsampled, negatives are clamped away, and the field is min-max
/// normalized so ≥ 0.5 marks the upper half of its range. A field with no
/// range (all relations equal or non-positive) is neutral 0.5 everywhere.
pub fn individual_hit_mask<T: Scalar>(rmap: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let up = inference::upsample_map(rmap, h, w)?;
    let mut field = up.data().to_vec();
    inference::rectify(&mut field, RmapRectify::Clamp);
    let (mut lo, mut hi) = (T::infinity(), -T::infinity());
    for &v in &field {
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
        let half = T::from_f64(0.5);
        for v in field.iter_mut() {
            *v = half;
        }
    }
    Tensor::new(&[h, w], field)
}

/// Group-attention pixel masks over full frames: each frame is center-cropped
/// to whole cells, the gaze point is shifted into the crop, and the masking
/// network produces the mask. Samples whose gaze leaves the cropped region
/// are dropped.
pub fn group_attention_samples<T: Scalar, F>(
    store: &ParamStore<T>,
    mut frame_at: F,
    samples: &[FrameSample<T>],
) -> Result<Vec<((f64, f64), Tensor<T>)>>
where
    F: FnMut(usize) -> Result<Tensor<T>>,
{
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let frame = frame_at(s.frame_index)?;
        let Some((gaze, cropped)) = crop_frame_for(&frame, s.gaze)? else { continue };
        let att = inference::group_attention(store, &cropped)?;
        out.push((gaze, att.mask));
    }
    Ok(out)
}

/// Individual-attention pixel masks over full frames: like
/// [`group_attention_samples`], but each frame is scored against its own
/// recording through the relational map.
pub fn individual_attention_samples<T: Scalar, F>(
    store: &ParamStore<T>,
    mut frame_at: F,
    samples: &[FrameSample<T>],
) -> Result<Vec<((f64, f64), Tensor<T>)>>
where
    F: FnMut(usize) -> Result<Tensor<T>>,
{
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let frame = frame_at(s.frame_index)?;
        let Some((gaze, cropped)) = crop_frame_for(&frame, s.gaze)? else { continue };
        let rmap = inference::relational_map(store, &cropped, &s.fmri)?;
        let (h, w) = (cropped.shape()[1], cropped.shape()[2]);
        out.push((gaze, individual_hit_mask(&rmap, h, w)?));
    }
    Ok(out)
}

fn crop_frame_for<T: Scalar>(
    frame: &Tensor<T>,
    gaze: (f64, f64),
) -> Result<Option<((f64, f64), Tensor<T>)>> {
    let (cropped, (left, top)) = inference::center_crop_to_cells(frame)?;
    let (h, w) = (cropped.shape()[1], cropped.shape()[2]);
    let x = gaze.0 - left as f64;
    let y = gaze.1 - top as f64;
    if x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64 {
        Ok(Some(((x, y), cropped)))
    } else {
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// Hemodynamic-delay sweep
// ---------------------------------------------------------------------------

/// Everything one delay assumption needs: crop-level training pairs and the
/// frame-level samples for hit-rate scoring, built from the same gaze and
/// recording series so both lists share one sample order.
pub struct DelayData<T: Scalar> {
    pub pairs: PairedSet<T>,
    pub frames: Vec<FrameSample<T>>,
}

/// Metrics of one delay assumption, scored on its held-out block.
#[derive(Debug, Clone)]
pub struct DelayPoint {
    pub delay_s: f64,
    pub hit: HitRateReport,
    /// Mean relation score of the positive pairing on the held-out block.
    pub mean_positive: f64,
}

/// Per-delay metrics plus the winning row.
pub struct DelaySweep {
    pub points: Vec<DelayPoint>,
    /// Index into `points` of the best delay: highest hit rate, ties broken
    /// by mean positive relation, then by listing order.
    pub best: usize,
}

/// Train one fresh model per delay assumption from the same initial
/// parameters and score each on its held-out block. `data_at` re-pairs the
/// dataset under the given delay; `frame_at` loads full frames for the
/// hit-rate pass.
pub fn delay_sweep<T: Scalar, D, F>(
    delays: &[f64],
    init: &ParamStore<T>,
    cfg: &TrainConfig,
    threshold: f64,
    mut data_at: D,
    mut frame_at: F,
) -> Result<DelaySweep>
where
    D: FnMut(f64) -> Result<DelayData<T>>,
    F: FnMut(usize) -> Result<Tensor<T>>,
{
    if delays.is_empty() {
        return Err(Error::usage("delay sweep needs at least one delay"));
    }
    let mut points = Vec::with_capacity(delays.len());
    for &delay_s in delays {
        let DelayData { pairs, frames } = data_at(delay_s)?;
        let result = relational::train(&pairs, init.clone(), cfg, None)?;
        let store = result.trainer.into_params();

        let (_, test) = pairs.split_by_time(cfg.train_frac)?;
        let rel = relational::relation_outputs(&store, &test, cfg.combined_encodes_original)?;
        let mean_positive = mean(&rel.r_att);

        let cut = time_cut(frames.len(), cfg.train_frac)?;
        let masks = group_attention_samples(&store, &mut frame_at, &frames[cut..])?;
        let hit = hit_rate(&masks, threshold, &format!("delay {delay_s}s test"))?;
        points.push(DelayPoint { delay_s, hit, mean_positive });
    }
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        if p.hit.rate > b.hit.rate
            || (p.hit.rate == b.hit.rate && p.mean_positive > b.mean_positive)
        {
            best = i;
        }
    }
    Ok(DelaySweep { points, best })
}

// ---------------------------------------------------------------------------
// Brain networks from the recording encoder's rows
// ---------------------------------------------------------------------------

/// One row of the recording encoder read as a spatial map over voxels.
#[derive(Debug, Clone)]
pub struct BrainNetwork<T: Scalar> {
    /// Row of the encoder weight this network came from.
    pub index: usize,
    /// The raw row, length V.
    pub map: Vec<T>,
    /// The row z-scored across its voxels (zeros when degenerate).
    pub zmap: Vec<f64>,
    /// Voxel indices with `|z| ≥ threshold`.
    pub support: Vec<usize>,
    /// Mean `|code|` of this row's component over the dataset — the ranking
    /// key.
    pub mean_activation: f64,
    /// True when the row had zero variance and could not be z-scored.
    pub degenerate: bool,
}

/// Read every encoder row as a brain network: z-score it across voxels,
/// threshold the support, and rank rows by how strongly their component
/// activates over `recordings` (`[N, V]`).
pub fn extract_networks<T: Scalar>(
    store: &ParamStore<T>,
    recordings: &Tensor<T>,
    threshold_z: f64,
) -> Result<Vec<BrainNetwork<T>>> {
    if !(threshold_z >= 0.0) {
        return Err(Error::usage(format!(
            "support threshold must be non-negative, got {threshold_z}"
        )));
    }
    let w = store.require(encoders::FMRI_WEIGHT)?;
    let (d, v) = (w.shape()[0], w.shape()[1]);
    match *recordings.shape() {
        [n, rv] if rv == v && n > 0 => {}
        ref s => {
            return Err(Error::usage(format!(
                "recordings must be [N, {v}] to match the encoder, got {s:?}"
            )))
        }
    }
    let codes = encoders::encode_fmri(store, recordings)?;
    let n = recordings.shape()[0];

    let mut networks = Vec::with_capacity(d);
    for i in 0..d {
        let row = &w.data()[i * v..(i + 1) * v];
        let mean_activation =
            (0..n).map(|s| codes.data()[s * d + i].as_f64().abs()).sum::<f64>() / n as f64;
        let mu = row.iter().map(|x| x.as_f64()).sum::<f64>() / v as f64;
        let var = row.iter().map(|x| (x.as_f64() - mu).powi(2)).sum::<f64>() / v as f64;
        let sigma = var.sqrt();
        let degenerate = !(sigma > 0.0);
        let zmap: Vec<f64> = if degenerate {
            vec![0.0; v]
        } else {
            row.iter().map(|x| (x.as_f64() - mu) / sigma).collect()
        };
        let support = if degenerate {
            Vec::new()
        } else {
            zmap.iter()
                .enumerate()
                .filter(|(_, z)| z.abs() >= threshold_z)
                .map(|(j, _)| j)
                .collect()
        };
        networks.push(BrainNetwork {
            index: i,
            map: row.to_vec(),
            zmap,
            support,
            mean_activation,
            degenerate,
        });
    }
    networks.sort_by(|a, b| {
        b.mean_activation.partial_cmp(&a.mean_activation).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(networks)
}

/// Best-matching network for one template map.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMatch {
    /// Template row.
    pub template: usize,
    /// `BrainNetwork::index` (encoder row) of the best match.
    pub network: usize,
    /// Signed correlation of that pair.
    pub corr: f64,
    /// True when the winning pair involved a zero-variance side, pinning its
    /// correlation to 0.
    pub flagged: bool,
}

/// Pearson correlation in f64; `None` when either side has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa > 0.0 && sbb > 0.0 {
        Some(sab / (saa.sqrt() * sbb.sqrt()))
    } else {
        None
    }
}

/// Correlate every (network, template) pair over voxels. Returns the full
/// matrix indexed `[network position][template row]` (zero-variance pairs
/// read 0) and each template's best match by absolute correlation.
pub fn match_networks<T: Scalar>(
    networks: &[BrainNetwork<T>],
    templates: &Tensor<f64>,
) -> Result<(Vec<Vec<f64>>, Vec<NetworkMatch>)> {
    let (g, v) = match *templates.shape() {
        [g, v] if g > 0 => (g, v),
        ref s => return Err(Error::usage(format!("templates must be [G, V], got {s:?}"))),
    };
    if networks.is_empty() {
        return Err(Error::usage("no networks to match against templates"));
    }
    if networks.iter().any(|nw| nw.map.len() != v) {
        return Err(Error::usage(format!(
            "network maps and templates disagree on voxel count {v}"
        )));
    }
    let mut matrix = vec![vec![0.0f64; g]; networks.len()];
    let mut flags = vec![vec![false; g]; networks.len()];
    for (i, nw) in networks.iter().enumerate() {
        let row: Vec<f64> = nw.map.iter().map(|x| x.as_f64()).collect();
        for t in 0..g {
            match pearson(&row, &templates.data()[t * v..(t + 1) * v]) {
                Some(c) => matrix[i][t] = c,
                None => flags[i][t] = true,
            }
        }
    }
    let mut best = Vec::with_capacity(g);
    for t in 0..g {
        let mut pick = 0;
        for i in 1..networks.len() {
            if matrix[i][t].abs() > matrix[pick][t].abs() {
                pick = i;
            }
        }
        best.push(NetworkMatch {
            template: t,
            network: networks[pick].index,
            corr: matrix[pick][t],
            flagged: flags[pick][t],
        });
    }
    Ok((matrix, best))
}
