use avan::alignment::{clean_gaze, crop_around, gaze_to_frames, interpolate_fmri, pair_samples, to_paired_set};
use avan::encoders::encode_image;
use avan::inference::{feature_grid, group_attention, relational_map};
use avan::tensorcore::Tensor;
use avan::relational::{init_model_params, train, ModelConfig, TrainConfig};
use avan::synthdata::{gen_fmri, gen_gaze, plant_networks, render_frame, GazeConfig, HrfSpec, WorldSpec};
use avan::tensorcore::{ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> avan::Result<()> {
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
    let mc = ModelConfig { in_channels: 3, crop: 64, d: 6, v: 24, widths: [2, 2, 3, 3, 3], rel_hidden: [8, 4] };
    let mut params: ParamStore<f32> = ParamStore::new();
    init_model_params(&mut params, &mut ChaCha20Rng::seed_from_u64(0), &mc);
    let cfg = TrainConfig { steps: 1500, batch: 4, lr: 3e-3, ..TrainConfig::default() };
    let result = train(&data, params, &cfg, None)?;
    for m in result.history.iter().step_by(250) {
        println!("step {:4}  l_rel {:.4}  l_trip {:.4}", m.step, m.l_rel, m.l_trip);
    }
    let m = result.history.last().unwrap();
    println!("step {:4}  l_rel {:.4}  l_trip {:.4}", m.step, m.l_rel, m.l_trip);
    let store = result.trainer.into_params();

    // Masked-stream codes on one training sample: does the backbone
    // distinguish att = m*x from neg = (1-m)*x in eval mode?
    let (img0, fm0) = data.gather(&[10]);
    let one = Tensor::new(&[3, 64, 64], img0.data().to_vec())?;
    let ga = group_attention(&store, &one)?;
    let att = Tensor::new(&[1, 3, 64, 64], ga.attended.data().to_vec())?;
    let neg = Tensor::new(&[1, 3, 64, 64], ga.neglected.data().to_vec())?;
    let ca = encode_image(&store, &att)?;
    let cn = encode_image(&store, &neg)?;
    let fmt = |t: &Tensor<f32>| t.data().iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" ");
    println!("sample 10 att code [{}]", fmt(&ca));
    println!("sample 10 neg code [{}]", fmt(&cn));
    let sub = {
        let (im, fv) = data.gather(&[10, 11, 12]);
        avan::relational::PairedSet::new(im, fv)?
    };
    let ro = avan::relational::relation_outputs(&store, &sub, false)?;
    println!("relation_outputs r_att {:?} r_neg {:?}", ro.r_att, ro.r_neg);
    let _ = fm0;

    for &i in &[25usize, 75] {
        let t_s = i as f64 / world.fps;
        let attended = world.attended_at_frame(i);
        let (image, _) = render_frame::<f32>(&world, i)?;
        let t_ms = (t_s + delay_s) as i64 * 1000;
        let idx = ((t_ms - at_fps.t0_ms()) / at_fps.period_ms()) as usize;
        let volume = at_fps.volume(idx).to_vec();
        println!("frame {i}, attended object {attended}");
        let mut crops: Vec<(String, (f64, f64))> = world
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| (format!("object {k} crop"), o.center_at(t_s)))
            .collect();
        crops.push(("background crop".into(), (32.0, 32.0)));
        for (label, center) in crops {
            let (crop, _) = crop_around(&image, center, 64)?;
            let g = group_attention(&store, &crop)?;
            let alpha_mean = g.alpha.data().iter().map(|v| v.as_f64()).sum::<f64>() / g.alpha.len() as f64;
            let rmap = relational_map(&store, &crop, &volume)?;
            let vals: Vec<String> = rmap.data().iter().map(|v| format!("{:+.3}", v.as_f64())).collect();
            let rmean = rmap.data().iter().map(|v| v.as_f64()).sum::<f64>() / rmap.len() as f64;
            println!("  {label:15}  alpha mean {alpha_mean:.3}  rmap mean {rmean:+.3}  cells [{}]", vals.join(" "));
            let batched = Tensor::new(&[1, 3, 64, 64], crop.data().to_vec())?;
            let code = encode_image(&store, &batched)?;
            let cs: Vec<String> = code.data().iter().map(|v| format!("{:+.3}", v.as_f64())).collect();
            let grid = feature_grid(&store, &crop)?;
            let gmean = grid.data().iter().map(|v| v.as_f64()).sum::<f64>() / grid.len() as f64;
            let gmax = grid.data().iter().map(|v| v.as_f64()).fold(f64::MIN, f64::max);
            println!("                   image code [{}]  feature grid mean {gmean:+.3} max {gmax:+.3}", cs.join(" "));
        }
    }
    Ok(())
}
