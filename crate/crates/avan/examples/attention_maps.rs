//! Produce attention maps from a trained model, both flavors:
//!
//! - the group mask, computed from the image alone: which content is worth
//!   attending at all;
//! - the individual relational map, conditioned on one observer's recording
//!   volume: which of that content this brain was attending right then.
//!
//! The demo trains a miniature model on 64px gaze crops (a 2x2 cell grid, so
//! training sees objects off-center and background-only cells), then renders
//! both maps over full 192x128 frames as character grids, for two frames
//! where different objects are attended. The individual map should follow
//! the planted attended object; the group mask should not care which one.
//!
//! Run with: `cargo run --example attention_maps` (about a minute)

use avan::alignment::{clean_gaze, gaze_to_frames, interpolate_fmri, pair_samples, to_paired_set};
use avan::inference::{group_attention, individual_attention, relational_map, RmapRectify};
use avan::relational::{init_model_params, train, ModelConfig, TrainConfig};
use avan::synthdata::{gen_fmri, gen_gaze, plant_networks, render_frame, GazeConfig, HrfSpec, WorldSpec};
use avan::tensorcore::{ParamStore, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Coarse character rendering of a `[h, w]` field in [0, 1], with object
/// centers overlaid: `A` for the attended object, `o` for the other.
fn render_field<T: Scalar>(field: &Tensor<T>, centers: &[(f64, f64)], attended: usize) {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let (step_y, step_x) = (8, 8);
    for gy in 0..h / step_y {
        let mut line = String::new();
        for gx in 0..w / step_x {
            let (y, x) = (gy * step_y + step_y / 2, gx * step_x + step_x / 2);
            let mut ch = match field.data()[y * w + x].as_f64() {
                v if v >= 0.75 => '#',
                v if v >= 0.5 => '+',
                v if v >= 0.25 => '.',
                _ => ' ',
            };
            for (k, &(cx, cy)) in centers.iter().enumerate() {
                if (cx as usize) / step_x == gx && (cy as usize) / step_y == gy {
                    ch = if k == attended { 'A' } else { 'o' };
                }
            }
            line.push(ch);
        }
        println!("    |{line}|");
    }
}

fn grid_string<T: Scalar>(grid: &Tensor<T>) -> String {
    let (gh, gw) = (grid.shape()[grid.shape().len() - 2], grid.shape()[grid.shape().len() - 1]);
    (0..gh)
        .map(|i| {
            let row: Vec<String> = (0..gw)
                .map(|j| format!("{:+.2}", grid.data()[i * gw + j].as_f64()))
                .collect();
            row.join(" ")
        })
        .collect::<Vec<_>>()
        .join(" / ")
}

fn main() -> avan::Result<()> {
    // Two objects on a 192x128 stage, 64px crops around a noiseless gaze.
    let world = WorldSpec::synthetic(192, 128, 5.0, 90.0, 2, 3)?;
    let nets = plant_networks::<f32>(4, 24, 2, 0.25, 4)?;
    let hrf = HrfSpec { peak_s: 5.0, undershoot_s: 15.0, ratio: 6.0, rate_hz: 1.0, duration_s: 32.0 };
    let delay_s = 1.0;
    let fmri = gen_fmri(&world, &nets, &hrf, delay_s, 0.05, 5)?;
    let gaze = clean_gaze(&gen_gaze(&world, &GazeConfig::noiseless(), 6)?, 192.0, 128.0)?;
    let per_frame = gaze_to_frames(&gaze, world.fps, world.n_frames())?;
    let at_fps = interpolate_fmri(&fmri, world.fps)?;
    let outcome = pair_samples(
        |i| Ok(render_frame::<f32>(&world, i)?.0),
        world.n_frames(),
        world.fps,
        &per_frame,
        &at_fps,
        delay_s,
        64,
        0,
    )?;
    let data = to_paired_set(&outcome.samples)?;

    let mc = ModelConfig {
        in_channels: 3,
        crop: 64,
        d: 6,
        v: 24,
        widths: [2, 2, 3, 3, 3],
        rel_hidden: [8, 4],
    };
    let mut params: ParamStore<f32> = ParamStore::new();
    init_model_params(&mut params, &mut ChaCha20Rng::seed_from_u64(0), &mc);
    let cfg = TrainConfig { steps: 1500, batch: 4, lr: 3e-3, ..TrainConfig::default() };
    println!("training {} steps on {} paired samples...", cfg.steps, data.len());
    let result = train(&data, params, &cfg, None)?;
    let last = result.history.last().unwrap();
    println!(
        "final batch relations: attended {:+.2}, neglected {:+.2}",
        last.r_att_mean, last.r_neg_mean
    );
    let store = result.trainer.into_params();

    // Two frames from segments where different objects are attended.
    let frames: Vec<usize> = world
        .schedule
        .iter()
        .take(2)
        .map(|&(start, _)| start + 25)
        .collect();
    for &i in &frames {
        let t_s = i as f64 / world.fps;
        let attended = world.attended_at_frame(i);
        let centers: Vec<(f64, f64)> = world.objects.iter().map(|o| o.center_at(t_s)).collect();
        let (image, _) = render_frame::<f32>(&world, i)?;

        // Group: image in, possibility grid and pixel mask out. The frame is
        // 192x128, so the grid is 4 rows x 6 columns of 32px cells.
        let group = group_attention(&store, &image)?;
        println!("\nframe {i} (object {attended} attended)");
        println!("  group possibility grid: {}", grid_string(&group.alpha));
        println!("  group mask (A = attended object, o = other):");
        render_field(&group.mask, &centers, attended);

        // Individual: add the recording volume aligned to this frame.
        let t_ms = (t_s + delay_s) as i64 * 1000;
        let idx = ((t_ms - at_fps.t0_ms()) / at_fps.period_ms()) as usize;
        let volume = at_fps.volume(idx).to_vec();
        let rmap = relational_map(&store, &image, &volume)?;
        println!("  relational map:         {}", grid_string(&rmap));
        let focused = individual_attention(&image, &rmap, RmapRectify::Clamp)?;
        // Show per-pixel luminance of the focused content; object pixels are
        // bright on a dark background, so it doubles as a visibility field.
        let (c, h, w) = (focused.shape()[0], focused.shape()[1], focused.shape()[2]);
        let mut lum = vec![0f32; h * w];
        for ch in 0..c {
            for p in 0..h * w {
                lum[p] += focused.data()[ch * h * w + p] / c as f32;
            }
        }
        let lum = Tensor::new(&[h, w], lum.iter().map(|v| (v * 3.0).min(1.0)).collect())?;
        println!("  individual attended content (image x rectified map):");
        render_field(&lum, &centers, attended);
    }
    Ok(())
}
