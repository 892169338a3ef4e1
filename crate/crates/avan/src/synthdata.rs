//! Ground-truth synthetic benchmark: procedural movies of moving textured
//! objects, a simulated observer's 1000 Hz gaze, and voxel recordings built
//! from planted sparse networks driven by attended-object features and
//! convolved with a hemodynamic response kernel at a known delay.
//!
//! Everything is seeded and byte-deterministic so tests can demand exact
//! regeneration, and the generator writes a ground-truth sidecar (attended
//! schedule, planted maps, true delay) that the model code never reads.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use sha2::{Digest, Sha256};

use crate::alignment::{zscore_columns, FmriSeries, GazeSample};
use crate::cli::formats::{
    write_fmri_matrix, write_gaze_csv, write_ppm, write_text, DatasetManifest, KvReader,
    SubjectFiles, MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::tensorcore::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectShape {
    Circle,
    Square,
    Diamond,
}

/// One moving textured object. Its center follows a bounded Lissajous path
/// `center + amplitude · sin(ω t + φ)` per axis.
#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub shape: ObjectShape,
    pub radius: f64,
    pub color: [f64; 3],
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub wx: f64,
    pub wy: f64,
    pub phx: f64,
    pub phy: f64,
}

impl ObjectSpec {
    pub fn center_at(&self, t_s: f64) -> (f64, f64) {
        (
            self.cx + self.ax * (self.wx * t_s + self.phx).sin(),
            self.cy + self.ay * (self.wy * t_s + self.phy).sin(),
        )
    }

    pub fn velocity_at(&self, t_s: f64) -> (f64, f64) {
        (
            self.ax * self.wx * (self.wx * t_s + self.phx).cos(),
            self.ay * self.wy * (self.wy * t_s + self.phy).cos(),
        )
    }

    /// Largest distance from center at which the shape can paint a pixel.
    fn paint_radius(&self) -> f64 {
        match self.shape {
            ObjectShape::Circle => self.radius,
            ObjectShape::Square => self.radius * 0.89 * std::f64::consts::SQRT_2,
            ObjectShape::Diamond => self.radius * 1.25,
        }
    }

    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self.shape {
            ObjectShape::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            ObjectShape::Square => dx.abs().max(dy.abs()) <= self.radius * 0.89,
            ObjectShape::Diamond => dx.abs() + dy.abs() <= self.radius * 1.25,
        }
    }
}

/// A complete scene: frame geometry, objects, and which object the observer
/// attends to in each time segment.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub objects: Vec<ObjectSpec>,
    /// `(start_frame, object)` segments sorted by start; the first starts
    /// at frame 0, so exactly one object is attended at any time.
    pub schedule: Vec<(usize, usize)>,
}

impl WorldSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || !(self.duration_s > 0.0) || self.n_frames() == 0 {
            return Err(Error::usage("world needs positive fps and duration"));
        }
        for (k, o) in self.objects.iter().enumerate() {
            let reach = o.paint_radius();
            let fits = o.cx - o.ax.abs() - reach >= 0.0
                && o.cx + o.ax.abs() + reach < self.width as f64
                && o.cy - o.ay.abs() - reach >= 0.0
                && o.cy + o.ay.abs() + reach < self.height as f64;
            if !fits {
                return Err(Error::usage(format!("object {k} can leave the frame bounds")));
            }
        }
        if self.objects.is_empty() {
            if !self.schedule.is_empty() {
                return Err(Error::usage("schedule references objects but none exist"));
            }
            return Ok(());
        }
        if self.schedule.is_empty() || self.schedule[0].0 != 0 {
            return Err(Error::usage("attended schedule must start at frame 0"));
        }
        for pair in self.schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::usage("schedule segment starts must strictly increase"));
            }
        }
        for &(start, obj) in &self.schedule {
            if obj >= self.objects.len() || start >= self.n_frames() {
                return Err(Error::usage(format!(
                    "schedule entry ({start}, {obj}) is out of range"
                )));
            }
        }
        Ok(())
    }

    /// Which object is attended during `frame`.
    pub fn attended_at_frame(&self, frame: usize) -> usize {
        let mut current = self.schedule[0].1;
        for &(start, obj) in &self.schedule {
            if start <= frame {
                current = obj;
            } else {
                break;
            }
        }
        current
    }

    pub fn attended_at_time(&self, t_s: f64) -> usize {
        let frame = ((t_s * self.fps).floor() as usize).min(self.n_frames() - 1);
        self.attended_at_frame(frame)
    }

    /// Deterministic default world: `k` distinct objects on bounded paths
    /// with a randomized attended-object schedule.
    pub fn synthetic(
        width: usize,
        height: usize,
        fps: f64,
        duration_s: f64,
        k: usize,
        seed: u64,
    ) -> Result<WorldSpec> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Hue-distinct but luminance-matched (channel means all ~0.72): which
        // object is which must be read from chroma and stripe orientation, not
        // from one object simply being brighter than another.
        let palette: [[f64; 3]; 6] = [
            [0.95, 0.62, 0.52],
            [0.58, 0.95, 0.60],
            [0.58, 0.66, 0.95],
            [0.88, 0.85, 0.45],
            [0.86, 0.50, 0.84],
            [0.48, 0.88, 0.82],
        ];
        let shapes = [ObjectShape::Circle, ObjectShape::Square, ObjectShape::Diamond];
        let (w, h) = (width as f64, height as f64);
        let mut objects = Vec::with_capacity(k);
        for i in 0..k {
            let radius = (w.min(h) * (0.10 + 0.028 * (i % 3) as f64)).max(3.0);
            let shape = shapes[i % shapes.len()];
            let reach = ObjectSpec {
                shape,
                radius,
                color: [0.0; 3],
                stripe_freq: 0.0,
                stripe_angle: 0.0,
                cx: 0.0,
                cy: 0.0,
                ax: 0.0,
                ay: 0.0,
                wx: 0.0,
                wy: 0.0,
                phx: 0.0,
                phy: 0.0,
            }
            .paint_radius();
            let ax = (w / 2.0 - reach - 2.0).max(0.0) * rng.gen_range(0.55..0.95);
            let ay = (h / 2.0 - reach - 2.0).max(0.0) * rng.gen_range(0.55..0.95);
            objects.push(ObjectSpec {
                shape,
                radius,
                color: palette[i % palette.len()],
                stripe_freq: 0.45 + 0.3 * i as f64,
                stripe_angle: 0.9 * i as f64 + rng.gen_range(0.0..0.8),
                cx: w / 2.0,
                cy: h / 2.0,
                ax,
                ay,
                wx: std::f64::consts::TAU / rng.gen_range(9.0..21.0),
                wy: std::f64::consts::TAU / rng.gen_range(9.0..21.0),
                phx: rng.gen_range(0.0..std::f64::consts::TAU),
                phy: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        let n_frames = (duration_s * fps).round() as usize;
        let mut schedule = Vec::new();
        if k > 0 {
            let mut cursor = 0usize;
            while cursor < n_frames {
                schedule.push((cursor, rng.gen_range(0..k)));
                let seg_s: f64 = rng.gen_range(4.0..10.0);
                cursor += ((seg_s * fps).round() as usize).max(1);
            }
        }
        let world = WorldSpec { width, height, fps, duration_s, objects, schedule };
        world.validate()?;
        Ok(world)
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Static background texture, identical in every frame. All wavelengths sit
/// below ~30 px, so the texture has strong pixel-level contrast but averages
/// out to a near-uniform mean (~0.36) over any attention-cell-sized patch:
/// no region of the background is rankably brighter than another, and every
/// object (palette means ~0.72) is clearly brighter than any background cell.
fn background(x: f64, y: f64) -> [f64; 3] {
    let b = 0.36
        + 0.10 * (0.21 * x + 1.7).sin() * (0.24 * y + 0.3).sin()
        + 0.09 * (0.23 * x + 0.37 * y + 2.1).sin()
        + 0.07 * (0.71 * x - 0.29 * y + 0.9).sin();
    [
        (b * 0.92).clamp(0.0, 1.0),
        b.clamp(0.0, 1.0),
        (b * 1.06).clamp(0.0, 1.0),
    ]
}

/// Render frame `frame`: static textured background plus striped objects at
/// their trajectory positions (higher-indexed objects occlude lower). Also
/// returns each object's visible-pixel mask for evaluation against ground
/// truth.
pub fn render_frame<T: Scalar>(
    world: &WorldSpec,
    frame: usize,
) -> Result<(Tensor<T>, Vec<Vec<bool>>)> {
    if frame >= world.n_frames() {
        return Err(Error::usage(format!(
            "frame {frame} out of range (world has {})",
            world.n_frames()
        )));
    }
    let (w, h) = (world.width, world.height);
    let t_s = frame as f64 / world.fps;
    let centers: Vec<(f64, f64)> = world.objects.iter().map(|o| o.center_at(t_s)).collect();
    let mut data = vec![T::from_f64(0.0); 3 * h * w];
    let mut masks = vec![vec![false; h * w]; world.objects.len()];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            // Pixel centers at half-integer coordinates.
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = background(px, py);
            // Topmost (highest-index) object owns the pixel.
            for (k, o) in world.objects.iter().enumerate().rev() {
                let (dx, dy) = (px - centers[k].0, py - centers[k].1);
                if o.contains(dx, dy) {
                    // Narrow modulation: stripes stay a texture/orientation cue
                    // without dragging object luminance down into the
                    // background's range.
                    let stripe = 0.85
                        + 0.15
                            * (o.stripe_freq
                                * (dx * o.stripe_angle.cos() + dy * o.stripe_angle.sin()))
                            .sin();
                    color = [
                        (o.color[0] * stripe).clamp(0.0, 1.0),
                        (o.color[1] * stripe).clamp(0.0, 1.0),
                        (o.color[2] * stripe).clamp(0.0, 1.0),
                    ];
                    masks[k][y * w + x] = true;
                    break;
                }
            }
            for c in 0..3 {
                data[c * plane + y * w + x] = T::from_f64(color[c]);
            }
        }
    }
    Ok((Tensor::new(&[3, h, w], data)?, masks))
}

// ---------------------------------------------------------------------------
// Gaze simulation
// ---------------------------------------------------------------------------

/// Observer model for [`gen_gaze`]: fixation jitter, Poisson-timed saccades
/// to distractors (visual search), occasional off-screen excursions, and
/// blink gaps (explicit plus Poisson-timed random ones).
#[derive(Debug, Clone)]
pub struct GazeConfig {
    pub jitter_px: f64,
    pub saccade_rate_hz: f64,
    pub saccade_dwell_ms: i64,
    /// Probability that a saccade leaves the screen instead of landing on a
    /// distractor.
    pub offscreen_prob: f64,
    /// Explicit blink gaps as `(start_ms, duration_ms)`.
    pub blinks: Vec<(i64, i64)>,
    pub random_blink_rate_hz: f64,
    /// Random blink duration range in ms (inclusive low, exclusive high).
    pub random_blink_ms: (i64, i64),
}

impl Default for GazeConfig {
    fn default() -> Self {
        GazeConfig {
            jitter_px: 1.5,
            saccade_rate_hz: 0.3,
            saccade_dwell_ms: 150,
            offscreen_prob: 0.02,
            blinks: Vec::new(),
            random_blink_rate_hz: 0.05,
            random_blink_ms: (80, 500),
        }
    }
}

impl GazeConfig {
    /// No jitter, no saccades, no blinks: gaze exactly tracks the attended
    /// object's center.
    pub fn noiseless() -> Self {
        GazeConfig {
            jitter_px: 0.0,
            saccade_rate_hz: 0.0,
            saccade_dwell_ms: 0,
            offscreen_prob: 0.0,
            blinks: Vec::new(),
            random_blink_rate_hz: 0.0,
            random_blink_ms: (0, 1),
        }
    }
}

/// Simulate a 1000 Hz eye-tracking recording of an observer watching the
/// world: fixating the attended object plus Gaussian jitter, saccading to
/// random distractors at Poisson times, occasionally drifting off-screen,
/// and blinking (invalid samples).
pub fn gen_gaze(world: &WorldSpec, cfg: &GazeConfig, seed: u64) -> Result<Vec<GazeSample>> {
    world.validate()?;
    if world.objects.is_empty() {
        return Err(Error::usage("gaze simulation needs at least one object to attend"));
    }
    if cfg.jitter_px < 0.0 || cfg.saccade_rate_hz < 0.0 || cfg.random_blink_rate_hz < 0.0 {
        return Err(Error::usage("gaze rates must be non-negative"));
    }
    if !(0.0..=1.0).contains(&cfg.offscreen_prob) {
        return Err(Error::usage("offscreen probability must be in [0, 1]"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_ms = (world.duration_s * 1000.0).round() as i64;
    let (w, h) = (world.width as f64, world.height as f64);

    // Blink intervals: explicit gaps plus Poisson-timed random ones.
    let mut blinks = cfg.blinks.clone();
    if cfg.random_blink_rate_hz > 0.0 {
        let exp = Exp::new(cfg.random_blink_rate_hz).expect("positive rate");
        let mut t = 0.0f64;
        loop {
            t += exp.sample(&mut rng) * 1000.0;
            if t >= n_ms as f64 {
                break;
            }
            let dur = rng.gen_range(cfg.random_blink_ms.0..cfg.random_blink_ms.1.max(cfg.random_blink_ms.0 + 1));
            blinks.push((t as i64, dur));
        }
    }

    /// Where a saccade currently points.
    enum Excursion {
        Distractor(usize),
        OffScreen(f64, f64),
    }
    let mut next_saccade_ms = if cfg.saccade_rate_hz > 0.0 {
        (Exp::new(cfg.saccade_rate_hz).expect("positive rate").sample(&mut rng) * 1000.0) as i64
    } else {
        i64::MAX
    };
    let mut excursion: Option<(Excursion, i64)> = None; // (target, until_ms)

    let mut samples = Vec::with_capacity(n_ms as usize);
    for t_ms in 0..n_ms {
        let t_s = t_ms as f64 / 1000.0;
        if t_ms >= next_saccade_ms {
            let target = if rng.gen_bool(cfg.offscreen_prob) {
                // Leave the screen past a random edge.
                let over = rng.gen_range(10.0..60.0);
                match rng.gen_range(0..4) {
                    0 => Excursion::OffScreen(-over, rng.gen_range(0.0..h)),
                    1 => Excursion::OffScreen(w + over, rng.gen_range(0.0..h)),
                    2 => Excursion::OffScreen(rng.gen_range(0.0..w), -over),
                    _ => Excursion::OffScreen(rng.gen_range(0.0..w), h + over),
                }
            } else if world.objects.len() > 1 {
                let attended = world.attended_at_time(t_s);
                let mut pick = rng.gen_range(0..world.objects.len() - 1);
                if pick >= attended {
                    pick += 1;
                }
                Excursion::Distractor(pick)
            } else {
                Excursion::OffScreen(rng.gen_range(0.0..w), rng.gen_range(0.0..h))
            };
            excursion = Some((target, t_ms + cfg.saccade_dwell_ms));
            next_saccade_ms = t_ms
                + 1
                + (Exp::new(cfg.saccade_rate_hz).expect("positive rate").sample(&mut rng)
                    * 1000.0) as i64;
        }
        if let Some((_, until)) = &excursion {
            if t_ms >= *until {
                excursion = None;
            }
        }
        let (tx, ty) = match &excursion {
            Some((Excursion::Distractor(k), _)) => world.objects[*k].center_at(t_s),
            Some((Excursion::OffScreen(x, y), _)) => (*x, *y),
            None => world.objects[world.attended_at_time(t_s)].center_at(t_s),
        };
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        samples.push(GazeSample {
            t_ms,
            x_px: tx + cfg.jitter_px * jx,
            y_px: ty + cfg.jitter_px * jy,
            valid: true,
        });
    }
    for &(start, dur) in &blinks {
        for t in start.max(0)..(start + dur).min(n_ms) {
            let s = &mut samples[t as usize];
            s.valid = false;
            s.x_px = -1.0;
            s.y_px = -1.0;
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Hemodynamic response
// ---------------------------------------------------------------------------

/// Double-gamma response kernel parameters. Defaults place the peak at 5 s
/// with a 15 s undershoot at 1/6 amplitude, matching the physiology the
/// delay-correction procedure assumes (rises to ≥ 90% of peak by 5 s).
#[derive(Debug, Clone, Copy)]
pub struct HrfSpec {
    pub peak_s: f64,
    pub undershoot_s: f64,
    pub ratio: f64,
    /// Recording sampling rate in Hz.
    pub rate_hz: f64,
    /// Kernel support length in seconds.
    pub duration_s: f64,
}

impl Default for HrfSpec {
    fn default() -> Self {
        HrfSpec { peak_s: 5.0, undershoot_s: 15.0, ratio: 6.0, rate_hz: 0.5, duration_s: 32.0 }
    }
}

fn gamma_pdf(t: f64, shape: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t - libm::lgamma(shape)).exp()
}

/// Sample the double-gamma kernel at `rate_hz`: a gamma bump peaking at
/// `peak_s` minus a `1/ratio`-scaled undershoot peaking at `undershoot_s`
/// (unit dispersion, so a gamma with shape `a` peaks at `a − 1`).
pub fn hrf_kernel(spec: &HrfSpec, rate_hz: f64) -> Result<Vec<f64>> {
    if !(spec.peak_s > 0.0) || !(spec.undershoot_s > 0.0) || !(spec.ratio > 0.0) {
        return Err(Error::usage("response kernel parameters must be positive"));
    }
    if !(rate_hz > 0.0) || !(spec.duration_s > 0.0) {
        return Err(Error::usage("kernel sampling rate and duration must be positive"));
    }
    let len = (spec.duration_s * rate_hz).ceil() as usize + 1;
    let (a1, a2) = (spec.peak_s + 1.0, spec.undershoot_s + 1.0);
    Ok((0..len)
        .map(|j| {
            let t = j as f64 / rate_hz;
            gamma_pdf(t, a1) - gamma_pdf(t, a2) / spec.ratio
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Planted networks
// ---------------------------------------------------------------------------

/// A feature of the attended object that drives one planted network's time
/// course.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriveFeature {
    /// 1 when the given object is attended, else 0.
    ObjectIndicator(usize),
    /// Attended-object center x, min-max normalized over the run.
    X,
    /// Attended-object center y, normalized.
    Y,
    /// Attended-object speed, normalized.
    Speed,
    /// Attended-object distance from frame center, normalized.
    CenterDistance,
    /// Attended-object x-velocity, normalized.
    VelX,
    /// Attended-object y-velocity, normalized.
    VelY,
}

impl DriveFeature {
    pub fn label(&self) -> String {
        match self {
            DriveFeature::ObjectIndicator(k) => format!("ind:{k}"),
            DriveFeature::X => "x".into(),
            DriveFeature::Y => "y".into(),
            DriveFeature::Speed => "speed".into(),
            DriveFeature::CenterDistance => "dist".into(),
            DriveFeature::VelX => "vx".into(),
            DriveFeature::VelY => "vy".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "x" => DriveFeature::X,
            "y" => DriveFeature::Y,
            "speed" => DriveFeature::Speed,
            "dist" => DriveFeature::CenterDistance,
            "vx" => DriveFeature::VelX,
            "vy" => DriveFeature::VelY,
            other => match other.strip_prefix("ind:") {
                Some(k) => DriveFeature::ObjectIndicator(
                    k.parse().map_err(|_| Error::usage(format!("bad feature `{other}`")))?,
                ),
                None => return Err(Error::usage(format!("bad feature `{other}`"))),
            },
        })
    }
}

/// `G` sparse voxel maps, each driven by one attended-object feature.
#[derive(Debug, Clone)]
pub struct PlantedNetworks<T: Scalar> {
    /// `[g, v]`, entries in {−1, 0, +1}.
    pub maps: Tensor<T>,
    pub features: Vec<DriveFeature>,
}

impl<T: Scalar> PlantedNetworks<T> {
    pub fn count(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn voxels(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn map(&self, g: usize) -> &[T] {
        let v = self.voxels();
        &self.maps.data()[g * v..(g + 1) * v]
    }
}

/// Default feature assignment: one indicator per object (up to `g`), then
/// continuous motion features. Errors if `g` exceeds the distinct features
/// available, which would make two networks share a time course.
pub fn default_features(g: usize, k_objects: usize) -> Result<Vec<DriveFeature>> {
    let continuous = [
        DriveFeature::X,
        DriveFeature::Y,
        DriveFeature::Speed,
        DriveFeature::CenterDistance,
        DriveFeature::VelX,
        DriveFeature::VelY,
    ];
    let max = k_objects + continuous.len();
    if g > max {
        return Err(Error::usage(format!(
            "cannot drive {g} networks from {k_objects} objects: at most {max} distinct features"
        )));
    }
    let mut features = Vec::with_capacity(g);
    for i in 0..g {
        if i < k_objects {
            features.push(DriveFeature::ObjectIndicator(i));
        } else {
            features.push(continuous[i - k_objects]);
        }
    }
    Ok(features)
}

/// Plant `g` sparse ±1 maps over `v` voxels. `sparsity` is the nonzero
/// fraction per map; when the supports fit disjointly (`g·nnz ≤ v`) they are
/// carved from a shuffled partition, otherwise drawn independently. Maps
/// are linearly independent in both regimes (each owns at least one
/// exclusive voxel by construction when disjoint; random supports and signs
/// make dependence vanishingly unlikely otherwise, and the constructor
/// verifies rank).
pub fn plant_networks<T: Scalar>(
    g: usize,
    v: usize,
    k_objects: usize,
    sparsity: f64,
    seed: u64,
) -> Result<PlantedNetworks<T>> {
    if g == 0 || v == 0 {
        return Err(Error::usage("need at least one network and one voxel"));
    }
    if !(0.0 < sparsity && sparsity <= 1.0) {
        return Err(Error::usage(format!("sparsity must be in (0, 1], got {sparsity}")));
    }
    let nnz = ((sparsity * v as f64).round() as usize).clamp(1, v);
    let features = default_features(g, k_objects)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut maps = vec![T::from_f64(0.0); g * v];
    if g * nnz <= v {
        let mut voxels: Vec<usize> = (0..v).collect();
        // Fisher-Yates shuffle, then carve consecutive chunks.
        for i in (1..v).rev() {
            voxels.swap(i, rng.gen_range(0..=i));
        }
        for gi in 0..g {
            for &vx in &voxels[gi * nnz..(gi + 1) * nnz] {
                maps[gi * v + vx] = T::from_f64(if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            }
        }
    } else {
        for gi in 0..g {
            let mut voxels: Vec<usize> = (0..v).collect();
            for i in (1..v).rev() {
                voxels.swap(i, rng.gen_range(0..=i));
            }
            for &vx in &voxels[..nnz] {
                maps[gi * v + vx] = T::from_f64(if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            }
        }
    }
    let nets = PlantedNetworks { maps: Tensor::new(&[g, v], maps)?, features };
    if map_rank(&nets) < g {
        return Err(Error::runtime("planted maps came out linearly dependent; change the seed"));
    }
    Ok(nets)
}

/// Rank of the map matrix via Gaussian elimination (for the independence
/// invariant).
pub fn map_rank<T: Scalar>(nets: &PlantedNetworks<T>) -> usize {
    let (g, v) = (nets.count(), nets.voxels());
    let mut m: Vec<Vec<f64>> = (0..g)
        .map(|gi| nets.map(gi).iter().map(|x| x.as_f64()).collect())
        .collect();
    let mut rank = 0;
    for col in 0..v {
        if rank == g {
            break;
        }
        let pivot = (rank..g).max_by(|&a, &b| {
            m[a][col].abs().partial_cmp(&m[b][col].abs()).expect("finite")
        });
        let Some(p) = pivot else { break };
        if m[p][col].abs() < 1e-9 {
            continue;
        }
        m.swap(rank, p);
        for r in rank + 1..g {
            let f = m[r][col] / m[rank][col];
            for c in col..v {
                m[r][c] -= f * m[rank][c];
            }
        }
        rank += 1;
    }
    rank
}

// ---------------------------------------------------------------------------
// Recording synthesis
// ---------------------------------------------------------------------------

/// Raw per-network drives sampled at the volume grid `[t, g]`: indicator
/// features as 0/1, continuous features min-max normalized to [0, 1]
/// (constant features become 0.5).
pub fn network_drives(
    world: &WorldSpec,
    features: &[DriveFeature],
    rate_hz: f64,
) -> Result<Tensor<f64>> {
    world.validate()?;
    if world.objects.is_empty() {
        return Err(Error::usage("drives need at least one object"));
    }
    if !(rate_hz > 0.0) {
        return Err(Error::usage("sampling rate must be positive"));
    }
    let t_count = (world.duration_s * rate_hz).round() as usize;
    let g = features.len();
    let mut drives = vec![0.0f64; t_count * g];
    for ti in 0..t_count {
        let t_s = ti as f64 / rate_hz;
        let attended = world.attended_at_time(t_s);
        let obj = &world.objects[attended];
        let (x, y) = obj.center_at(t_s);
        let (vx, vy) = obj.velocity_at(t_s);
        let (cx, cy) = (world.width as f64 / 2.0, world.height as f64 / 2.0);
        for (gi, f) in features.iter().enumerate() {
            drives[ti * g + gi] = match f {
                DriveFeature::ObjectIndicator(k) => f64::from(attended == *k),
                DriveFeature::X => x,
                DriveFeature::Y => y,
                DriveFeature::Speed => (vx * vx + vy * vy).sqrt(),
                DriveFeature::CenterDistance => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt(),
                DriveFeature::VelX => vx,
                DriveFeature::VelY => vy,
            };
        }
    }
    // Normalize continuous features so contributions are comparable.
    for (gi, f) in features.iter().enumerate() {
        if matches!(f, DriveFeature::ObjectIndicator(_)) {
            continue;
        }
        let col: Vec<f64> = (0..t_count).map(|ti| drives[ti * g + gi]).collect();
        let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        for ti in 0..t_count {
            let d = &mut drives[ti * g + gi];
            *d = if hi > lo { (*d - lo) / (hi - lo) } else { 0.5 };
        }
    }
    Tensor::new(&[t_count, g], drives)
}

/// Per-network activity `[t, g]`: drives shifted **earlier in stimulus
/// time** by `delay_s` (so the recording lags the stimulus), then convolved
/// with the response kernel. The delay must be a whole number of volumes.
pub fn planted_activity<T: Scalar>(
    world: &WorldSpec,
    nets: &PlantedNetworks<T>,
    hrf: &HrfSpec,
    delay_s: f64,
) -> Result<Tensor<f64>> {
    if delay_s < 0.0 {
        return Err(Error::usage(format!("delay must be non-negative, got {delay_s}")));
    }
    let shift_f = delay_s * hrf.rate_hz;
    if (shift_f - shift_f.round()).abs() > 1e-9 {
        return Err(Error::usage(format!(
            "delay {delay_s} s is not a whole number of volumes at {} Hz",
            hrf.rate_hz
        )));
    }
    let shift = shift_f.round() as usize;
    let drives = network_drives(world, &nets.features, hrf.rate_hz)?;
    let kernel = hrf_kernel(hrf, hrf.rate_hz)?;
    let (t_count, g) = (drives.shape()[0], drives.shape()[1]);
    let mut activity = vec![0.0f64; t_count * g];
    for gi in 0..g {
        for ti in 0..t_count {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                // Shifted drive: d[t] = drive[t - shift], zero before onset.
                let Some(src) = ti.checked_sub(j + shift) else { break };
                acc += k * drives.data()[src * g + gi];
            }
            activity[ti * g + gi] = acc;
        }
    }
    Tensor::new(&[t_count, g], activity)
}

/// Synthesize the voxel recording: volume(t) = Σ_g activity_g(t) · map_g +
/// Gaussian noise, z-scored per voxel at the end.
pub fn gen_fmri<T: Scalar>(
    world: &WorldSpec,
    nets: &PlantedNetworks<T>,
    hrf: &HrfSpec,
    delay_s: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<FmriSeries<T>> {
    if noise_sigma < 0.0 {
        return Err(Error::usage("noise sigma must be non-negative"));
    }
    let activity = planted_activity(world, nets, hrf, delay_s)?;
    let (t_count, g) = (activity.shape()[0], activity.shape()[1]);
    let v = nets.voxels();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = vec![T::from_f64(0.0); t_count * v];
    for ti in 0..t_count {
        for gi in 0..g {
            let a = activity.data()[ti * g + gi];
            if a == 0.0 {
                continue;
            }
            let map = nets.map(gi);
            for vx in 0..v {
                let m = map[vx].as_f64();
                if m != 0.0 {
                    data[ti * v + vx] = data[ti * v + vx] + T::from_f64(a * m);
                }
            }
        }
        if noise_sigma > 0.0 {
            for vx in 0..v {
                let n: f64 = rng.sample(StandardNormal);
                data[ti * v + vx] = data[ti * v + vx] + T::from_f64(noise_sigma * n);
            }
        }
    }
    let mut volumes = Tensor::new(&[t_count, v], data)?;
    zscore_columns(&mut volumes);
    FmriSeries::from_rate(0, hrf.rate_hz, volumes)
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Everything needed to synthesize a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub objects: usize,
    pub voxels: usize,
    pub networks: usize,
    pub sparsity: f64,
    pub fmri_rate_hz: f64,
    /// True planted response delay.
    pub delay_s: f64,
    pub noise_sigma: f64,
    pub subjects: usize,
    pub gaze: GazeConfig,
    pub hrf_peak_s: f64,
    pub hrf_undershoot_s: f64,
    pub hrf_ratio: f64,
}

impl Default for DatasetConfig {
    /// Desk-scale defaults: small frames and ten simulated minutes so the
    /// full pipeline runs in CPU-minutes.
    fn default() -> Self {
        DatasetConfig {
            width: 320,
            height: 180,
            fps: 25.0,
            duration_s: 600.0,
            objects: 3,
            voxels: 256,
            networks: 8,
            sparsity: 0.125,
            fmri_rate_hz: 0.5,
            delay_s: 2.0,
            noise_sigma: 0.1,
            subjects: 1,
            gaze: GazeConfig::default(),
            hrf_peak_s: 5.0,
            hrf_undershoot_s: 15.0,
            hrf_ratio: 6.0,
        }
    }
}

impl DatasetConfig {
    pub fn hrf(&self) -> HrfSpec {
        HrfSpec {
            peak_s: self.hrf_peak_s,
            undershoot_s: self.hrf_undershoot_s,
            ratio: self.hrf_ratio,
            rate_hz: self.fmri_rate_hz,
            duration_s: 32.0,
        }
    }
}

/// Ground-truth sidecar: what was planted, for tests and evaluation only.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub delay_s: f64,
    pub noise_sigma: f64,
    pub objects: usize,
    pub schedule: Vec<(usize, usize)>,
    pub features: Vec<DriveFeature>,
    /// `[g, v]` planted maps.
    pub maps: Tensor<f64>,
    /// Hex digest over all rendered per-object masks.
    pub mask_digest: String,
    pub world_seed: u64,
}

pub const TRUTH_NAME: &str = "ground_truth.txt";

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (g, v) = (self.maps.shape()[0], self.maps.shape()[1]);
        let mut text = String::new();
        text.push_str("version = 1\n");
        text.push_str(&format!("delay_s = {}\n", self.delay_s));
        text.push_str(&format!("noise_sigma = {}\n", self.noise_sigma));
        text.push_str(&format!("objects = {}\n", self.objects));
        text.push_str(&format!("networks = {g}\n"));
        text.push_str(&format!("voxels = {v}\n"));
        text.push_str(&format!("world_seed = {}\n", self.world_seed));
        text.push_str(&format!("mask_digest = {}\n", self.mask_digest));
        let labels: Vec<String> = self.features.iter().map(|f| f.label()).collect();
        text.push_str(&format!("features = {}\n", labels.join("|")));
        text.push_str(&format!("segments = {}\n", self.schedule.len()));
        for (i, (start, obj)) in self.schedule.iter().enumerate() {
            text.push_str(&format!("segment.{i} = {start} {obj}\n"));
        }
        for gi in 0..g {
            let row: Vec<String> = self.maps.data()[gi * v..(gi + 1) * v]
                .iter()
                .map(|x| format!("{x}"))
                .collect();
            text.push_str(&format!("map.{gi} = {}\n", row.join(" ")));
        }
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::cli::formats::read_text(path)?;
        let mut kv = KvReader::new(path, &text)?;
        let version: u32 = kv.parse("version")?;
        if version != 1 {
            return Err(Error::format(path, format!("unsupported ground-truth version {version}")));
        }
        let delay_s: f64 = kv.parse("delay_s")?;
        let noise_sigma: f64 = kv.parse("noise_sigma")?;
        let objects: usize = kv.parse("objects")?;
        let g: usize = kv.parse("networks")?;
        let v: usize = kv.parse("voxels")?;
        let world_seed: u64 = kv.parse("world_seed")?;
        let mask_digest = kv.require("mask_digest")?.to_string();
        let features = kv
            .require("features")?
            .split('|')
            .map(DriveFeature::parse)
            .collect::<Result<Vec<_>>>()?;
        let segments: usize = kv.parse("segments")?;
        let mut schedule = Vec::with_capacity(segments);
        for i in 0..segments {
            let raw = kv.require(&format!("segment.{i}"))?.to_string();
            let parts: Vec<&str> = raw.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::format(path, format!("segment.{i}: expected `start object`")));
            }
            let bad = |_| Error::format(path, format!("segment.{i}: bad integer"));
            schedule.push((parts[0].parse().map_err(bad)?, parts[1].parse().map_err(bad)?));
        }
        let mut maps = Vec::with_capacity(g * v);
        for gi in 0..g {
            let raw = kv.require(&format!("map.{gi}"))?.to_string();
            let row: Vec<f64> = raw
                .split_whitespace()
                .map(|x| x.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("map.{gi}: bad value")))?;
            if row.len() != v {
                return Err(Error::format(path, format!("map.{gi}: expected {v} values")));
            }
            maps.extend(row);
        }
        kv.finish()?;
        Ok(GroundTruth {
            delay_s,
            noise_sigma,
            objects,
            schedule,
            features,
            maps: Tensor::new(&[g, v], maps)?,
            mask_digest,
            world_seed,
        })
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.rotate_left(17) ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Rebuild the world a dataset was generated from (deterministic in the
/// recorded seed).
pub fn world_from_truth(manifest: &DatasetManifest, truth: &GroundTruth) -> Result<WorldSpec> {
    WorldSpec::synthetic(
        manifest.frame_width,
        manifest.frame_height,
        manifest.fps,
        manifest.frame_count as f64 / manifest.fps,
        truth.objects,
        truth.world_seed,
    )
}

/// Generate a complete dataset directory: PPM frames, per-subject gaze CSV
/// and recording matrix, manifest, and the ground-truth sidecar. Byte
/// deterministic in `(config, seed)`.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if cfg.subjects == 0 {
        return Err(Error::usage("need at least one subject"));
    }
    let world_seed = derive_seed(seed, 1);
    let world = WorldSpec::synthetic(
        cfg.width,
        cfg.height,
        cfg.fps,
        cfg.duration_s,
        cfg.objects,
        world_seed,
    )?;
    let nets: PlantedNetworks<f64> =
        plant_networks(cfg.networks, cfg.voxels, cfg.objects, cfg.sparsity, derive_seed(seed, 2))?;
    let hrf = cfg.hrf();

    for sub in ["frames", "gaze", "fmri", "truth"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    // Frames (streamed to disk) and the mask digest over every frame.
    let mut hasher = Sha256::new();
    let mut packed = Vec::new();
    for i in 0..world.n_frames() {
        let (image, masks) = render_frame::<f32>(&world, i)?;
        write_ppm(&out_dir.join("frames").join(DatasetManifest::frame_file(i)), &image)?;
        for mask in &masks {
            packed.clear();
            packed.resize(mask.len().div_ceil(8), 0u8);
            for (j, &on) in mask.iter().enumerate() {
                if on {
                    packed[j / 8] |= 1 << (j % 8);
                }
            }
            hasher.update(&packed);
        }
    }
    let mask_digest = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();

    let mut subjects = Vec::with_capacity(cfg.subjects);
    for s in 0..cfg.subjects {
        let gaze = gen_gaze(&world, &cfg.gaze, derive_seed(seed, 100 + s as u64))?;
        let gaze_rel = format!("gaze/subject_{s:02}.csv");
        write_gaze_csv(&out_dir.join(&gaze_rel), &gaze)?;
        let fmri: FmriSeries<f64> = gen_fmri(
            &world,
            &nets,
            &hrf,
            cfg.delay_s,
            cfg.noise_sigma,
            derive_seed(seed, 200 + s as u64),
        )?;
        let fmri_rel = format!("fmri/subject_{s:02}.avfm");
        write_fmri_matrix(&out_dir.join(&fmri_rel), fmri.volumes())?;
        subjects.push(SubjectFiles { gaze: gaze_rel, fmri: fmri_rel });
    }

    let truth = GroundTruth {
        delay_s: cfg.delay_s,
        noise_sigma: cfg.noise_sigma,
        objects: cfg.objects,
        schedule: world.schedule.clone(),
        features: nets.features.clone(),
        maps: nets.maps.clone(),
        mask_digest,
        world_seed,
    };
    let truth_rel = format!("truth/{TRUTH_NAME}");
    truth.save(&out_dir.join(&truth_rel))?;

    let manifest = DatasetManifest {
        version: 1,
        frame_dir: "frames".into(),
        frame_count: world.n_frames(),
        fps: cfg.fps,
        frame_width: cfg.width,
        frame_height: cfg.height,
        screen_width: cfg.width as f64,
        screen_height: cfg.height as f64,
        fmri_rate_hz: cfg.fmri_rate_hz,
        voxels: cfg.voxels,
        subjects,
        truth: Some(truth_rel),
    };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    manifest.validate(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world(k: usize, duration_s: f64, seed: u64) -> WorldSpec {
        WorldSpec::synthetic(96, 64, 25.0, duration_s, k, seed).unwrap()
    }

    #[test]
    fn synthetic_world_validates_and_schedules_every_frame() {
        let w = tiny_world(3, 30.0, 7);
        assert_eq!(w.n_frames(), 750);
        for f in [0, 1, 374, 749] {
            assert!(w.attended_at_frame(f) < 3);
        }
        // 60 s at 25 fps is exactly 1500 frames.
        assert_eq!(tiny_world(2, 60.0, 1).n_frames(), 1500);
    }

    #[test]
    fn world_validation_rejects_out_of_bounds_and_bad_schedules() {
        let mut w = tiny_world(2, 10.0, 3);
        w.objects[0].ax = 1000.0;
        assert!(w.validate().is_err());
        let mut w = tiny_world(2, 10.0, 3);
        w.schedule[0].0 = 5;
        assert!(w.validate().is_err());
        let mut w = tiny_world(2, 10.0, 3);
        w.schedule.push((1, 0));
        assert!(w.validate().is_err());
        let mut w = tiny_world(2, 10.0, 3);
        w.schedule[0].1 = 9;
        assert!(w.validate().is_err());
    }

    #[test]
    fn empty_world_renders_pure_background_deterministically() {
        let w = WorldSpec {
            width: 48,
            height: 32,
            fps: 25.0,
            duration_s: 1.0,
            objects: vec![],
            schedule: vec![],
        };
        w.validate().unwrap();
        let (a, masks) = render_frame::<f64>(&w, 0).unwrap();
        let (b, _) = render_frame::<f64>(&w, 20).unwrap();
        assert!(masks.is_empty());
        assert_eq!(a.data(), b.data());
        assert!(render_frame::<f64>(&w, 25).is_err());
    }

    #[test]
    fn centered_circle_mask_covers_pi_r_squared() {
        let mut w = tiny_world(1, 1.0, 2);
        let o = &mut w.objects[0];
        o.shape = ObjectShape::Circle;
        o.radius = 20.0;
        o.ax = 0.0;
        o.ay = 0.0;
        o.cx = 48.0;
        o.cy = 32.0;
        w.validate().unwrap();
        let (_, masks) = render_frame::<f64>(&w, 0).unwrap();
        let area = masks[0].iter().filter(|&&m| m).count() as f64;
        let expect = std::f64::consts::PI * 400.0;
        assert!((area - expect).abs() < 0.10 * expect, "area {area} vs {expect}");
    }

    #[test]
    fn frames_differ_only_inside_object_bounding_boxes() {
        let w = tiny_world(2, 10.0, 11);
        let (a, _) = render_frame::<f64>(&w, 0).unwrap();
        let (b, _) = render_frame::<f64>(&w, 100).unwrap();
        let inside_any_bbox = |x: f64, y: f64| {
            [0.0, 4.0].iter().any(|&t_s| {
                w.objects.iter().any(|o| {
                    let (cx, cy) = o.center_at(t_s);
                    let r = o.paint_radius() + 1.0;
                    (x - cx).abs() <= r && (y - cy).abs() <= r
                })
            })
        };
        let plane = 64 * 96;
        for y in 0..64 {
            for x in 0..96 {
                let differs = (0..3).any(|c| {
                    a.data()[c * plane + y * 96 + x] != b.data()[c * plane + y * 96 + x]
                });
                if differs {
                    assert!(
                        inside_any_bbox(x as f64 + 0.5, y as f64 + 0.5),
                        "background changed at ({x}, {y})"
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_gaze_tracks_the_attended_center_exactly() {
        let w = tiny_world(3, 2.0, 5);
        let gaze = gen_gaze(&w, &GazeConfig::noiseless(), 9).unwrap();
        assert_eq!(gaze.len(), 2000);
        for s in &gaze {
            let t_s = s.t_ms as f64 / 1000.0;
            let (cx, cy) = w.objects[w.attended_at_time(t_s)].center_at(t_s);
            assert_eq!((s.x_px, s.y_px), (cx, cy));
            assert!(s.valid);
        }
    }

    #[test]
    fn explicit_blink_makes_exactly_one_invalid_run() {
        let w = tiny_world(1, 2.0, 5);
        let mut cfg = GazeConfig::noiseless();
        cfg.blinks = vec![(600, 400)];
        let gaze = gen_gaze(&w, &cfg, 9).unwrap();
        let invalid: Vec<usize> =
            gaze.iter().enumerate().filter(|(_, s)| !s.valid).map(|(i, _)| i).collect();
        assert_eq!(invalid.len(), 400);
        assert_eq!(invalid[0], 600);
        assert_eq!(*invalid.last().unwrap(), 999);
    }

    #[test]
    fn gaze_generation_is_deterministic_and_saccades_move_it() {
        let w = tiny_world(3, 4.0, 5);
        let mut cfg = GazeConfig::default();
        cfg.saccade_rate_hz = 2.0;
        let a = gen_gaze(&w, &cfg, 42).unwrap();
        let b = gen_gaze(&w, &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_gaze(&w, &cfg, 43).unwrap();
        assert_ne!(a, c);
        // With saccades the trace must sometimes sit far from the attended
        // center (on a distractor).
        let far = a.iter().filter(|s| {
            let t_s = s.t_ms as f64 / 1000.0;
            let (cx, cy) = w.objects[w.attended_at_time(t_s)].center_at(t_s);
            ((s.x_px - cx).powi(2) + (s.y_px - cy).powi(2)).sqrt() > 10.0
        });
        assert!(far.count() > 100);
    }

    #[test]
    fn response_kernel_peaks_at_five_seconds_and_rises_by_then() {
        let spec = HrfSpec::default();
        let fine = hrf_kernel(&spec, 100.0).unwrap();
        let (argmax, max) = fine
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &v)| (i as f64 / 100.0, v))
            .unwrap();
        assert!((argmax - 5.0).abs() <= 0.05, "peak at {argmax}");
        let at_5s = fine[500];
        assert!(at_5s >= 0.9 * max);
        assert!(fine.iter().sum::<f64>() > 0.0);
        // Undershoot exists and is small relative to the peak.
        let min = fine.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min < 0.0 && min.abs() < max / 3.0);
    }

    #[test]
    fn planted_maps_are_sparse_disjoint_and_independent() {
        let nets: PlantedNetworks<f64> = plant_networks(8, 256, 3, 0.125, 77).unwrap();
        assert_eq!(nets.count(), 8);
        assert_eq!(map_rank(&nets), 8);
        let mut owners = vec![0usize; 256];
        for gi in 0..8 {
            let nnz = nets.map(gi).iter().filter(|x| **x != 0.0).count();
            assert_eq!(nnz, 32);
            for (vx, val) in nets.map(gi).iter().enumerate() {
                if *val != 0.0 {
                    owners[vx] += 1;
                    assert!(val.abs() == 1.0);
                }
            }
        }
        // 8 × 32 = 256: exact disjoint partition.
        assert!(owners.iter().all(|&c| c == 1));
    }

    #[test]
    fn feature_assignment_rejects_indistinguishable_networks() {
        assert!(default_features(8, 3).is_ok());
        assert!(default_features(10, 3).is_err());
    }

    #[test]
    fn delay_shifts_the_drive_by_whole_volumes_before_convolution() {
        let w = tiny_world(3, 60.0, 13);
        let nets: PlantedNetworks<f64> = plant_networks(4, 32, 3, 0.2, 5).unwrap();
        let hrf = HrfSpec::default();
        let a0 = planted_activity(&w, &nets, &hrf, 0.0).unwrap();
        let a4 = planted_activity(&w, &nets, &hrf, 4.0).unwrap();
        let g = 4;
        // 4 s at 0.5 Hz = exactly 2 volumes.
        for ti in 0..a4.shape()[0] {
            for gi in 0..g {
                let want = if ti >= 2 { a0.data()[(ti - 2) * g + gi] } else { 0.0 };
                assert_eq!(a4.data()[ti * g + gi], want, "t={ti} g={gi}");
            }
        }
        // Non-integral shifts are rejected.
        assert!(planted_activity(&w, &nets, &hrf, 1.0).is_err());
    }

    #[test]
    fn sixty_seconds_at_half_hz_gives_thirty_volumes() {
        let w = tiny_world(2, 60.0, 3);
        let nets: PlantedNetworks<f64> = plant_networks(2, 16, 2, 0.25, 5).unwrap();
        let fmri = gen_fmri(&w, &nets, &HrfSpec::default(), 2.0, 0.1, 21).unwrap();
        assert_eq!(fmri.len(), 30);
        assert_eq!(fmri.voxels(), 16);
    }

    #[test]
    fn recording_is_zscored_per_voxel() {
        let w = tiny_world(3, 120.0, 3);
        let nets: PlantedNetworks<f64> = plant_networks(4, 24, 3, 0.2, 5).unwrap();
        let fmri = gen_fmri(&w, &nets, &HrfSpec::default(), 2.0, 0.3, 8).unwrap();
        let t = fmri.len();
        for vx in 0..fmri.voxels() {
            let col: Vec<f64> = (0..t).map(|k| fmri.volume(k)[vx]).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
            assert!(mean.abs() < 1e-9, "voxel {vx} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "voxel {vx} std {}", var.sqrt());
        }
    }

    /// World where one object is attended for the entire run.
    fn constant_attention_world(duration_s: f64) -> WorldSpec {
        let mut w = tiny_world(1, duration_s, 2);
        w.schedule = vec![(0, 0)];
        w.validate().unwrap();
        w
    }

    #[test]
    fn constant_drive_makes_late_volumes_proportional_to_the_map() {
        let w = constant_attention_world(120.0);
        let nets: PlantedNetworks<f64> = plant_networks(1, 16, 1, 0.5, 5).unwrap();
        let fmri = gen_fmri(&w, &nets, &HrfSpec::default(), 0.0, 0.0, 3).unwrap();
        let map = nets.map(0);
        // After the kernel transient (32 s = 16 volumes) the drive is fully
        // enveloped, so every later volume is the same multiple of the map.
        let t = fmri.len();
        let late = fmri.volume(t - 1);
        let denom: f64 = map.iter().map(|m| m * m).sum();
        let c: f64 = late.iter().zip(map).map(|(x, m)| x * m).sum::<f64>() / denom;
        for k in 20..t {
            let vol = fmri.volume(k);
            for (x, m) in vol.iter().zip(map) {
                assert!((x - c * m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_one_recovery_of_a_single_planted_network() {
        let w = constant_attention_world(240.0);
        let nets: PlantedNetworks<f64> = plant_networks(1, 32, 1, 0.4, 5).unwrap();
        let fmri = gen_fmri(&w, &nets, &HrfSpec::default(), 0.0, 0.0, 3).unwrap();
        let (t, v) = (fmri.len(), fmri.voxels());
        let x = fmri.volumes().data();
        // Power iteration on XᵀX, seeded with the largest-norm row.
        let mut best = 0;
        let mut best_norm = -1.0;
        for k in 0..t {
            let n: f64 = fmri.volume(k).iter().map(|a| a * a).sum();
            if n > best_norm {
                best_norm = n;
                best = k;
            }
        }
        let mut vvec: Vec<f64> = fmri.volume(best).to_vec();
        for _ in 0..30 {
            let mut xv = vec![0.0; t];
            for k in 0..t {
                xv[k] = (0..v).map(|j| x[k * v + j] * vvec[j]).sum();
            }
            let mut xtxv = vec![0.0; v];
            for k in 0..t {
                for j in 0..v {
                    xtxv[j] += x[k * v + j] * xv[k];
                }
            }
            let norm = xtxv.iter().map(|a| a * a).sum::<f64>().sqrt();
            for j in 0..v {
                vvec[j] = xtxv[j] / norm;
            }
        }
        let map: Vec<f64> = nets.map(0).to_vec();
        let dot: f64 = vvec.iter().zip(&map).map(|(a, b)| a * b).sum();
        let nm: f64 = map.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = vvec.iter().map(|a| a * a).sum::<f64>().sqrt();
        let corr = (dot / (nm * nv)).abs();
        assert!(corr > 0.99, "rank-1 recovery correlation {corr}");
    }

    #[test]
    fn generated_dataset_validates_and_is_byte_identical_per_seed() {
        let cfg = DatasetConfig {
            width: 64,
            height: 64,
            duration_s: 8.0,
            objects: 2,
            voxels: 16,
            networks: 2,
            sparsity: 0.25,
            subjects: 2,
            ..DatasetConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg, 99, dir_a.path()).unwrap();
        assert_eq!(m.frame_count, 200);
        assert_eq!(m.subjects.len(), 2);
        m.validate(dir_a.path()).unwrap();
        generate_dataset(&cfg, 99, dir_b.path()).unwrap();

        let digest_tree = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for entry in fs::read_dir(&d).unwrap() {
                    let p = entry.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                        files.push((rel, fs::read(&p).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        assert_eq!(digest_tree(dir_a.path()), digest_tree(dir_b.path()));

        // Truth sidecar round-trips.
        let truth = GroundTruth::load(&dir_a.path().join("truth").join(TRUTH_NAME)).unwrap();
        assert_eq!(truth.maps.shape(), &[2, 16]);
        assert_eq!(truth.objects, 2);
        assert_eq!(truth.features.len(), 2);
        let world = world_from_truth(&m, &truth).unwrap();
        assert_eq!(world.schedule, truth.schedule);

        // A different seed changes the bytes.
        let dir_c = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, 100, dir_c.path()).unwrap();
        assert_ne!(digest_tree(dir_a.path()), digest_tree(dir_c.path()));
    }
}
