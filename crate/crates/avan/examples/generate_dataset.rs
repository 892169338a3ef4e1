//! Synthesize a complete dataset directory — rendered video frames, a noisy
//! gaze trace, and simulated brain recordings driven by planted voxel
//! networks — then read it back through the manifest.
//!
//! Generation is byte-deterministic in (config, seed), and the manifest
//! validator notices when files go missing.
//!
//! Run with: `cargo run --example generate_dataset`

use std::fs;

use avan::cli::formats::{read_fmri_matrix, read_ppm, DatasetManifest, MANIFEST_NAME};
use avan::synthdata::{generate_dataset, DatasetConfig, GroundTruth};

fn main() -> avan::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path().join("dataset");

    // A few seconds of video at a small resolution; everything else scales
    // down to match (2 objects, 24 voxels, 4 planted networks at 1 Hz).
    let cfg = DatasetConfig {
        width: 96,
        height: 64,
        fps: 5.0,
        duration_s: 20.0,
        objects: 2,
        voxels: 24,
        networks: 4,
        sparsity: 0.25,
        fmri_rate_hz: 1.0,
        delay_s: 1.0,
        ..DatasetConfig::default()
    };
    let manifest = generate_dataset(&cfg, 42, &root)?;
    println!(
        "generated {} frames ({}x{} at {} fps), {} subject(s), {} voxels at {} Hz",
        manifest.frame_count,
        manifest.frame_width,
        manifest.frame_height,
        manifest.fps,
        manifest.subjects.len(),
        manifest.voxels,
        manifest.fmri_rate_hz
    );

    // Everything on disk is plain formats: PPM frames, CSV gaze, a small
    // binary matrix for the recordings, and text manifests.
    let frame = read_ppm::<f32>(&manifest.frame_path(&root, 0))?;
    let volumes = read_fmri_matrix::<f32>(&root.join(&manifest.subjects[0].fmri))?;
    println!(
        "frame 0 tensor {:?}; recordings {:?} (z-scored per voxel)",
        frame.shape(),
        volumes.shape()
    );

    let truth = GroundTruth::load(&root.join(manifest.truth.as_ref().unwrap()))?;
    let labels: Vec<String> = truth.features.iter().map(|f| f.label()).collect();
    println!(
        "planted: delay {}s, noise sigma {}, {} networks driven by [{}]",
        truth.delay_s,
        truth.noise_sigma,
        truth.maps.shape()[0],
        labels.join(", ")
    );
    println!(
        "attended-object schedule: {} segments, first {:?}",
        truth.schedule.len(),
        truth.schedule[0]
    );

    // Same config and seed again: byte-identical output.
    let root2 = dir.path().join("again");
    generate_dataset(&cfg, 42, &root2)?;
    for rel in [
        MANIFEST_NAME.to_string(),
        manifest.subjects[0].fmri.clone(),
        format!("frames/{}", DatasetManifest::frame_file(17)),
    ] {
        let a = fs::read(root.join(&rel)).expect("first copy");
        let b = fs::read(root2.join(&rel)).expect("second copy");
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    println!("\nregenerated with the same seed: manifest, frames, recordings byte-identical");

    // The manifest knows its own inventory.
    fs::remove_file(manifest.frame_path(&root, 17)).expect("remove frame");
    let err = manifest.validate(&root).unwrap_err();
    println!("after deleting a frame, validate reports: {err}");
    Ok(())
}
