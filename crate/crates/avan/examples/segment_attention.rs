//! Split an image into attended and neglected halves with the masking
//! network. The mask is a sigmoid grid predicted at 1/32 resolution and
//! bilinearly upsampled, so the two halves always recompose the input
//! exactly: attended + neglected = image, pixel for pixel.
//!
//! Run with: `cargo run --example segment_attention`

use avan::attention::{init_mask_params, mask_forward, segment};
use avan::synthdata::{render_frame, WorldSpec};
use avan::tensorcore::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> avan::Result<()> {
    // A synthetic scene to segment: 96x64 with two moving shapes.
    let world = WorldSpec::synthetic(96, 64, 25.0, 2.0, 2, 11)?;
    let (frame, _masks) = render_frame::<f32>(&world, 10)?;
    let image = Tensor::new(
        &[1, 3, 64, 96],
        frame.data().to_vec(),
    )?;

    // A freshly initialized masking network. Its head starts at zero, so the
    // first mask is exactly 0.5 everywhere: maximally undecided.
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut store: ParamStore<f32> = ParamStore::new();
    init_mask_params(&mut store, &mut rng, 3, &[4, 4, 8, 8, 8]);

    let alpha = mask_forward(&store, &image)?;
    println!("mask grid shape: {:?} (input downsampled 32x)", alpha.shape());
    println!(
        "initial mask values: min {:.3}, max {:.3}",
        alpha.data().iter().cloned().fold(f32::INFINITY, f32::min),
        alpha.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max),
    );

    let pair = segment(&image, &alpha)?;
    let mut worst = 0.0f32;
    for ((a, n), px) in pair
        .attended
        .data()
        .iter()
        .zip(pair.neglected.data())
        .zip(image.data())
    {
        worst = worst.max((a + n - px).abs());
    }
    println!("max |attended + neglected - image| = {worst:.2e}");
    assert!(worst < 1e-5);

    // Perturb the head: the mask moves, but the recomposition identity holds
    // for any parameters because neglected is built from 1 - mask.
    for w in store.get_mut("mask.head.w").unwrap().data_mut() {
        *w += 0.8;
    }
    let alpha = mask_forward(&store, &image)?;
    let pair = segment(&image, &alpha)?;
    let mut worst = 0.0f32;
    for ((a, n), px) in pair
        .attended
        .data()
        .iter()
        .zip(pair.neglected.data())
        .zip(image.data())
    {
        worst = worst.max((a + n - px).abs());
    }
    println!(
        "after shifting the head: mask mean {:.3}, recomposition error {worst:.2e}",
        alpha.data().iter().sum::<f32>() / alpha.len() as f32
    );
    Ok(())
}
