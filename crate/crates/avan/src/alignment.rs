//! Multimodal preprocessing and temporal alignment: cleaning 1000 Hz gaze
//! traces, resampling across gaze / frame / recording rates, pairing frames
//! with delayed recording volumes, and gaze-centered cropping.
//!
//! All time grids are integer milliseconds, so resampling arithmetic is
//! exact: knots land on knots and index offsets are whole numbers rather
//! than accumulating float drift.

use crate::error::{Error, Result};
use crate::relational::PairedSet;
use crate::tensorcore::{Scalar, Tensor};

/// Longest invalid gaze run that is repaired by interpolation rather than
/// left invalid, inclusive, in milliseconds.
pub const BLINK_REPAIR_MS: i64 = 300;

/// Nominal median-filter window, in samples, applied to cleaned gaze
/// traces. The filter realizes it as the centered odd window of radius
/// `MEDIAN_WINDOW / 2` (41 samples in span interiors): an even selection
/// window is half a sample off-center, which shifts ramps on every pass —
/// that would both break idempotence and erode interpolated segments when
/// iterated. The centered window keeps monotone stretches fixed exactly.
pub const MEDIAN_WINDOW: usize = 40;

// ---------------------------------------------------------------------------
// Gaze cleaning
// ---------------------------------------------------------------------------

/// One eye-tracker reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub t_ms: i64,
    pub x_px: f64,
    pub y_px: f64,
    pub valid: bool,
}

/// Clean a gaze recording in three passes:
/// 1. samples outside `[0, screen_w) × [0, screen_h)` are marked invalid;
/// 2. contiguous invalid runs spanning more than [`BLINK_REPAIR_MS`] stay
///    invalid, shorter interior runs are linearly interpolated from their
///    valid neighbors (runs touching either end of the recording have no
///    neighbor on one side and stay invalid);
/// 3. a median filter of nominal window [`MEDIAN_WINDOW`] runs over x and y
///    independently within each valid span, iterated to a fixed point so
///    cleaning is idempotent. Windows shrink at span edges instead of
///    reaching beyond the recording.
///
/// A run's span is measured inclusively on the sample timestamps
/// (`t_last − t_first + 1`), so at 1000 Hz a 300-sample run spans exactly
/// 300 ms and is repaired while a 301-sample run is not.
pub fn clean_gaze(
    samples: &[GazeSample],
    screen_w: f64,
    screen_h: f64,
) -> Result<Vec<GazeSample>> {
    for pair in samples.windows(2) {
        if pair[1].t_ms <= pair[0].t_ms {
            return Err(Error::usage(format!(
                "gaze timestamps must be strictly increasing ({} then {})",
                pair[0].t_ms, pair[1].t_ms
            )));
        }
    }
    let mut out: Vec<GazeSample> = samples.to_vec();

    // Pass 1: off-screen samples are invalid.
    for s in &mut out {
        if !(s.x_px >= 0.0 && s.x_px < screen_w && s.y_px >= 0.0 && s.y_px < screen_h) {
            s.valid = false;
        }
    }

    // Pass 2: repair short invalid runs by linear interpolation in time.
    let n = out.len();
    let mut i = 0;
    while i < n {
        if out[i].valid {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && !out[i].valid {
            i += 1;
        }
        let end = i; // run is [start, end)
        let span_ms = out[end - 1].t_ms - out[start].t_ms + 1;
        let has_neighbors = start > 0 && end < n;
        if span_ms <= BLINK_REPAIR_MS && has_neighbors {
            let (a, b) = (out[start - 1], out[end]);
            let dt = (b.t_ms - a.t_ms) as f64;
            for s in &mut out[start..end] {
                let w = (s.t_ms - a.t_ms) as f64 / dt;
                s.x_px = a.x_px + w * (b.x_px - a.x_px);
                s.y_px = a.y_px + w * (b.y_px - a.y_px);
                s.valid = true;
            }
        }
    }

    // Pass 3: iterated median filter over each maximal valid span.
    let mut start = 0;
    while start < n {
        if !out[start].valid {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < n && out[end].valid {
            end += 1;
        }
        let span = &mut out[start..end];
        let xs: Vec<f64> = span.iter().map(|s| s.x_px).collect();
        let ys: Vec<f64> = span.iter().map(|s| s.y_px).collect();
        let xs = median_fixpoint(xs);
        let ys = median_fixpoint(ys);
        for ((s, x), y) in span.iter_mut().zip(xs).zip(ys) {
            s.x_px = x;
            s.y_px = y;
        }
        start = end;
    }
    Ok(out)
}

/// One median filtering pass using the centered window of radius
/// `MEDIAN_WINDOW / 2`, shrunk symmetrically near span edges so every
/// window stays odd and centered (endpoints pass through unchanged).
fn median_pass(v: &[f64]) -> Vec<f64> {
    let radius = MEDIAN_WINDOW / 2;
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    let mut window = Vec::with_capacity(2 * radius + 1);
    for i in 0..n {
        let r = radius.min(i).min(n - 1 - i);
        window.clear();
        window.extend_from_slice(&v[i - r..=i + r]);
        window.sort_by(|a, b| a.partial_cmp(b).expect("gaze coordinates are finite"));
        out.push(window[r]);
    }
    out
}

/// Iterate [`median_pass`] to a fixed point, which is what makes the whole
/// cleaning pipeline idempotent: a second cleaning finds the trace already
/// at the filter's fixed point. Repeated median smoothing reaches one in a
/// few passes (monotone stretches are already fixed); the loop is capped
/// and carries a two-cycle tiebreak purely as hang guards.
fn median_fixpoint(mut v: Vec<f64>) -> Vec<f64> {
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..(2 * v.len() + 8) {
        let next = median_pass(&v);
        if next == v {
            return v;
        }
        if prev.as_deref() == Some(&next[..]) {
            return if next < v { next } else { v };
        }
        prev = Some(std::mem::replace(&mut v, next));
    }
    v
}

// ---------------------------------------------------------------------------
// Gaze at frame rate
// ---------------------------------------------------------------------------

/// Reduce a cleaned gaze trace to one point per frame: the valid sample
/// nearest to each frame interval's midpoint, or `None` when the interval
/// holds no valid sample. Ties resolve to the earlier sample.
pub fn gaze_to_frames(
    samples: &[GazeSample],
    fps: f64,
    n_frames: usize,
) -> Result<Vec<Option<(f64, f64)>>> {
    if !(fps > 0.0) {
        return Err(Error::usage(format!("frame rate must be positive, got {fps}")));
    }
    let period = 1000.0 / fps;
    let mut out = vec![None; n_frames];
    let mut cursor = 0;
    for (f, slot) in out.iter_mut().enumerate() {
        let lo = f as f64 * period;
        let hi = (f + 1) as f64 * period;
        let mid = lo + period / 2.0;
        while cursor < samples.len() && (samples[cursor].t_ms as f64) < lo {
            cursor += 1;
        }
        let mut best: Option<(f64, (f64, f64))> = None;
        let mut k = cursor;
        while k < samples.len() && (samples[k].t_ms as f64) < hi {
            let s = &samples[k];
            if s.valid {
                let dist = (s.t_ms as f64 - mid).abs();
                if best.map_or(true, |(d, _)| dist < d) {
                    best = Some((dist, (s.x_px, s.y_px)));
                }
            }
            k += 1;
        }
        *slot = best.map(|(_, p)| p);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Recording series and interpolation
// ---------------------------------------------------------------------------

/// A regularly sampled recording: volumes at `t0_ms + k · period_ms`.
#[derive(Debug, Clone)]
pub struct FmriSeries<T: Scalar> {
    t0_ms: i64,
    period_ms: i64,
    /// `[volumes, voxels]`.
    volumes: Tensor<T>,
}

impl<T: Scalar> FmriSeries<T> {
    pub fn new(t0_ms: i64, period_ms: i64, volumes: Tensor<T>) -> Result<Self> {
        if period_ms <= 0 {
            return Err(Error::usage(format!("sampling period must be positive, got {period_ms} ms")));
        }
        if volumes.shape().len() != 2 {
            return Err(Error::usage(format!(
                "recording series must be [volumes, voxels], got {:?}",
                volumes.shape()
            )));
        }
        Ok(FmriSeries { t0_ms, period_ms, volumes })
    }

    /// Build from a sampling rate in Hz; the rate must land on the integer
    /// millisecond grid (e.g. 0.5 Hz → 2000 ms, 25 Hz → 40 ms).
    pub fn from_rate(t0_ms: i64, rate_hz: f64, volumes: Tensor<T>) -> Result<Self> {
        Self::new(t0_ms, period_ms_for(rate_hz)?, volumes)
    }

    pub fn len(&self) -> usize {
        self.volumes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxels(&self) -> usize {
        self.volumes.shape()[1]
    }

    pub fn t0_ms(&self) -> i64 {
        self.t0_ms
    }

    pub fn period_ms(&self) -> i64 {
        self.period_ms
    }

    /// Acquisition time of volume `k`.
    pub fn time_ms(&self, k: usize) -> i64 {
        self.t0_ms + k as i64 * self.period_ms
    }

    /// Acquisition time of the last volume.
    pub fn end_ms(&self) -> i64 {
        self.time_ms(self.len().saturating_sub(1))
    }

    pub fn volumes(&self) -> &Tensor<T> {
        &self.volumes
    }

    pub fn volume(&self, k: usize) -> &[T] {
        let v = self.voxels();
        &self.volumes.data()[k * v..(k + 1) * v]
    }

    /// Normalize each voxel's series to mean 0 and (population) standard
    /// deviation 1 in place; constant voxels become all zeros.
    pub fn zscore(&mut self) {
        zscore_columns(&mut self.volumes);
    }
}

/// Integer sampling period for a rate, rejecting rates that fall off the
/// millisecond grid.
pub fn period_ms_for(rate_hz: f64) -> Result<i64> {
    if !(rate_hz > 0.0) {
        return Err(Error::usage(format!("sampling rate must be positive, got {rate_hz}")));
    }
    let period = 1000.0 / rate_hz;
    if (period - period.round()).abs() > 1e-9 || period.round() < 1.0 {
        return Err(Error::usage(format!(
            "rate {rate_hz} Hz does not land on the millisecond grid (period {period} ms)"
        )));
    }
    Ok(period.round() as i64)
}

/// Normalize each column of `[rows, cols]` to mean 0, population std 1;
/// constant columns become zeros.
pub fn zscore_columns<T: Scalar>(data: &mut Tensor<T>) {
    let shape = data.shape().to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    if rows == 0 {
        return;
    }
    let buf = data.data_mut();
    for c in 0..cols {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += buf[r * cols + c].as_f64();
        }
        mean /= rows as f64;
        let mut var = 0.0;
        for r in 0..rows {
            let d = buf[r * cols + c].as_f64() - mean;
            var += d * d;
        }
        var /= rows as f64;
        let std = var.sqrt();
        for r in 0..rows {
            let z = if std > 0.0 { (buf[r * cols + c].as_f64() - mean) / std } else { 0.0 };
            buf[r * cols + c] = T::from_f64(z);
        }
    }
}

/// Resample a recording onto a finer (or equal) grid by per-voxel linear
/// interpolation. The target grid starts at the series origin and covers the
/// original span inclusively; queries beyond either end clamp to the
/// endpoint volumes. Original acquisition times reproduce their volumes
/// bit-exactly.
pub fn interpolate_fmri<T: Scalar>(series: &FmriSeries<T>, target_hz: f64) -> Result<FmriSeries<T>> {
    if series.len() < 2 {
        return Err(Error::usage(format!(
            "interpolation needs at least 2 volumes, got {}",
            series.len()
        )));
    }
    let period = period_ms_for(target_hz)?;
    let v = series.voxels();
    let span = series.end_ms() - series.t0_ms();
    let count = (span / period) as usize + 1;
    let mut data = Vec::with_capacity(count * v);
    for k in 0..count {
        let t = series.t0_ms() + k as i64 * period;
        let offset = t - series.t0_ms();
        let idx = (offset / series.period_ms()).clamp(0, series.len() as i64 - 1) as usize;
        let rem = offset - idx as i64 * series.period_ms();
        if rem == 0 || idx + 1 >= series.len() {
            data.extend_from_slice(series.volume(idx));
        } else {
            let w = T::from_f64(rem as f64 / series.period_ms() as f64);
            let (a, b) = (series.volume(idx), series.volume(idx + 1));
            data.extend(a.iter().zip(b).map(|(&x, &y)| x + w * (y - x)));
        }
    }
    FmriSeries::new(series.t0_ms(), period, Tensor::new(&[count, v], data)?)
}

// ---------------------------------------------------------------------------
// Cropping and pairing
// ---------------------------------------------------------------------------

/// One aligned training sample: a gaze-centered crop, the recording volume
/// delayed to match it, and where the gaze landed inside the crop.
#[derive(Debug, Clone)]
pub struct PairedSample<T: Scalar> {
    /// `[c, crop, crop]`.
    pub image: Tensor<T>,
    pub fmri: Vec<T>,
    /// Gaze position in crop coordinates, when the sample came from a
    /// gaze-bearing frame (always true for [`pair_samples`] output).
    pub gaze_in_crop: Option<(f64, f64)>,
    pub frame_index: usize,
    pub subject: usize,
}

/// Cut a `crop × crop` window from `frame` (`[c, h, w]`), centered on
/// `point` and translated as needed to stay fully inside the frame. Returns
/// the crop and the point's position in crop coordinates.
pub fn crop_around<T: Scalar>(
    frame: &Tensor<T>,
    point: (f64, f64),
    crop: usize,
) -> Result<(Tensor<T>, (f64, f64))> {
    let shape = frame.shape();
    if shape.len() != 3 {
        return Err(Error::usage(format!("frame must be [c, h, w], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if crop == 0 || crop > h || crop > w {
        return Err(Error::usage(format!(
            "crop {crop} does not fit a {w}×{h} frame"
        )));
    }
    let (px, py) = point;
    let x0 = (px.round() as i64 - (crop / 2) as i64).clamp(0, (w - crop) as i64) as usize;
    let y0 = (py.round() as i64 - (crop / 2) as i64).clamp(0, (h - crop) as i64) as usize;
    let mut data = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        let plane = ch * h * w;
        for y in y0..y0 + crop {
            let row = plane + y * w + x0;
            data.extend_from_slice(&frame.data()[row..row + crop]);
        }
    }
    let image = Tensor::new(&[c, crop, crop], data)?;
    Ok((image, (px - x0 as f64, py - y0 as f64)))
}

/// Result of pairing: emitted samples plus how many frames were skipped
/// (no gaze, or the delayed recording time falls past the series end).
pub struct PairingOutcome<T: Scalar> {
    pub samples: Vec<PairedSample<T>>,
    pub skipped: usize,
}

/// Pair each frame with the recording volume `delay_s` later: the frame at
/// time `t` reflects brain activity measured at `t + delay_s`. `fmri` must
/// already be at frame rate (see [`interpolate_fmri`]); `frame_at` loads
/// frame `i` as `[c, h, w]`. Frames without gaze or without a delayed
/// volume in range are skipped, never zero-filled.
pub fn pair_samples<T: Scalar, F>(
    mut frame_at: F,
    n_frames: usize,
    fps: f64,
    gaze: &[Option<(f64, f64)>],
    fmri: &FmriSeries<T>,
    delay_s: f64,
    crop: usize,
    subject: usize,
) -> Result<PairingOutcome<T>>
where
    F: FnMut(usize) -> Result<Tensor<T>>,
{
    if delay_s < 0.0 {
        return Err(Error::usage(format!("delay must be non-negative, got {delay_s}")));
    }
    if crop % 32 != 0 {
        return Err(Error::usage(format!("crop size must be divisible by 32, got {crop}")));
    }
    if gaze.len() != n_frames {
        return Err(Error::usage(format!(
            "gaze has {} entries for {n_frames} frames",
            gaze.len()
        )));
    }
    let frame_period = period_ms_for(fps)?;
    let delay_ms = (delay_s * 1000.0).round() as i64;
    let mut outcome = PairingOutcome { samples: Vec::new(), skipped: 0 };
    for (i, g) in gaze.iter().enumerate() {
        let Some(point) = g else {
            outcome.skipped += 1;
            continue;
        };
        let t = i as i64 * frame_period + delay_ms - fmri.t0_ms();
        if t < 0 || t % fmri.period_ms() != 0 {
            outcome.skipped += 1;
            continue;
        }
        let idx = (t / fmri.period_ms()) as usize;
        if idx >= fmri.len() {
            outcome.skipped += 1;
            continue;
        }
        let frame = frame_at(i)?;
        let (image, gaze_in_crop) = crop_around(&frame, *point, crop)?;
        outcome.samples.push(PairedSample {
            image,
            fmri: fmri.volume(idx).to_vec(),
            gaze_in_crop: Some(gaze_in_crop),
            frame_index: i,
            subject,
        });
    }
    Ok(outcome)
}

/// Stack paired samples into the batch tensors the trainer consumes,
/// preserving order.
pub fn to_paired_set<T: Scalar>(samples: &[PairedSample<T>]) -> Result<PairedSet<T>> {
    if samples.is_empty() {
        return Err(Error::usage("cannot build a training set from zero samples"));
    }
    let dims = samples[0].image.shape().to_vec();
    let v = samples[0].fmri.len();
    let mut images = Vec::with_capacity(samples.len() * samples[0].image.len());
    let mut fmri = Vec::with_capacity(samples.len() * v);
    for s in samples {
        if s.image.shape() != &dims[..] || s.fmri.len() != v {
            return Err(Error::usage("paired samples disagree on shapes"));
        }
        images.extend_from_slice(s.image.data());
        fmri.extend_from_slice(&s.fmri);
    }
    PairedSet::new(
        Tensor::new(&[samples.len(), dims[0], dims[1], dims[2]], images)?,
        Tensor::new(&[samples.len(), v], fmri)?,
    )
}
