//! Eye-tracking preprocessing: synthesize a noisy 1 kHz gaze trace with
//! jitter, saccades, blinks, and off-screen excursions, then clean it and
//! reduce it to one usable point per video frame.
//!
//! Cleaning marks off-screen samples invalid, linearly interpolates blink
//! gaps up to 300 ms, and median-filters each valid span to a fixed point —
//! so cleaning an already-clean trace is a no-op.
//!
//! Run with: `cargo run --example clean_gaze`

use avan::alignment::{clean_gaze, gaze_to_frames};
use avan::synthdata::{gen_gaze, GazeConfig, WorldSpec};

fn main() -> avan::Result<()> {
    let (w, h) = (320.0, 180.0);
    let world = WorldSpec::synthetic(320, 180, 25.0, 8.0, 3, 21)?;
    let mut cfg = GazeConfig::default();
    // Two scripted blinks on top of the random ones: a short one that
    // cleaning can repair and a long one it must leave invalid.
    cfg.blinks = vec![(2000, 250), (5000, 600)];
    let raw = gen_gaze(&world, &cfg, 9)?;
    let invalid = |t: &[avan::alignment::GazeSample]| t.iter().filter(|s| !s.valid).count();
    println!(
        "raw trace: {} samples, {} invalid (blinks + off-screen)",
        raw.len(),
        invalid(&raw)
    );

    let cleaned = clean_gaze(&raw, w, h)?;
    println!(
        "cleaned:   {} samples, {} still invalid (gaps longer than 300 ms stay out)",
        cleaned.len(),
        invalid(&cleaned)
    );

    // Idempotence: a second cleaning pass changes nothing.
    let twice = clean_gaze(&cleaned, w, h)?;
    assert_eq!(cleaned, twice);
    println!("cleaning twice: identical trace (fixed point reached)");

    // One point per frame: the valid sample nearest each frame midpoint.
    let per_frame = gaze_to_frames(&cleaned, 25.0, world.n_frames())?;
    let usable = per_frame.iter().filter(|g| g.is_some()).count();
    println!("\nframes with a usable gaze point: {usable} / {}", per_frame.len());
    for (i, g) in per_frame.iter().enumerate().step_by(40) {
        match g {
            Some((x, y)) => println!("frame {i:3}: gaze ({x:6.1}, {y:6.1})"),
            None => println!("frame {i:3}: no valid gaze"),
        }
    }
    Ok(())
}
