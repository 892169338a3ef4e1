//! Pretrain the sparse linear autoencoder on synthetic brain recordings and
//! warm-start the recording encoder from its encoder half. The L1 proximal
//! step drives unused weights to exact zero, so the learned dictionary is
//! genuinely sparse, not just small.
//!
//! Run with: `cargo run --example pretrain_autoencoder`

use avan::encoders::{
    encode_fmri, init_fmri_from_autoencoder, pretrain_autoencoder, AutoencoderConfig,
};
use avan::synthdata::{gen_fmri, plant_networks, HrfSpec, WorldSpec};
use avan::tensorcore::{ParamStore, Tensor};

fn main() -> avan::Result<()> {
    // Two minutes of simulated activity: 4 planted networks over 48 voxels,
    // driven by which object is attended, sampled at 1 Hz.
    let world = WorldSpec::synthetic(96, 64, 25.0, 120.0, 2, 5)?;
    let nets = plant_networks::<f32>(4, 48, 2, 0.25, 6)?;
    let hrf = HrfSpec {
        peak_s: 5.0,
        undershoot_s: 15.0,
        ratio: 6.0,
        rate_hz: 1.0,
        duration_s: 32.0,
    };
    let series = gen_fmri::<f32>(&world, &nets, &hrf, 2.0, 0.1, 7)?;
    println!(
        "recordings: {} volumes x {} voxels",
        series.len(),
        series.voxels()
    );

    // A deliberately strong sparsity penalty, trained long enough to
    // converge, so the proximal effect is visible at this tiny scale; the
    // pipeline default is far gentler.
    let cfg = AutoencoderConfig { epochs: 2000, l1_coeff: 1e-2, ..AutoencoderConfig::default() };
    let (ae, losses) = pretrain_autoencoder(series.volumes(), 6, &cfg)?;
    println!(
        "reconstruction mse over {} epochs: {:.4} -> {:.4}",
        cfg.epochs,
        losses[0],
        losses.last().unwrap()
    );
    assert!(losses.last().unwrap() < &losses[0]);

    let exact_zeros = ae.encoder.data().iter().filter(|w| **w == 0.0).count();
    println!(
        "encoder dictionary: {:?}, {} of {} weights at exactly 0 from the L1 step",
        ae.encoder.shape(),
        exact_zeros,
        ae.encoder.len()
    );
    assert!(exact_zeros > 0, "proximal step should zero out some weights");

    // Warm-start a model's recording encoder and encode the first volume.
    let mut store: ParamStore<f32> = ParamStore::new();
    init_fmri_from_autoencoder(&mut store, &ae)?;
    let one = Tensor::new(&[1, series.voxels()], series.volume(0).to_vec())?;
    let code = encode_fmri(&store, &one)?;
    let line: Vec<String> = code.data().iter().map(|c| format!("{c:+.3}")).collect();
    println!("code for volume 0: [{}]", line.join(", "));
    Ok(())
}
