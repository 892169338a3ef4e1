//! The six commands behind the `avan` binary: dataset synthesis, autoencoder
//! pretraining, adversarial training, overlay inference, evaluation reports,
//! and the response-delay sweep. Every command is deterministic given the
//! dataset bytes, the run configuration, and the seed.

use std::fmt::Write as _;
use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::alignment::{
    clean_gaze, gaze_to_frames, interpolate_fmri, pair_samples, period_ms_for, to_paired_set,
    FmriSeries,
};
use crate::cli::checkpoint::{AutoencoderCheckpoint, ModelCheckpoint};
use crate::cli::config::RunConfig;
use crate::cli::formats::{
    read_fmri_matrix, read_gaze_csv, read_ppm, write_ppm, write_text, DatasetManifest,
    SubjectFiles, MANIFEST_NAME,
};
use crate::encoders::{init_fmri_from_autoencoder, pretrain_autoencoder};
use crate::error::{Error, Result};
use crate::evaluation::{
    delay_sweep, extract_networks, frame_samples, group_attention_samples, hit_rate,
    individual_attention_samples, match_networks, relational_stats, time_cut, DelayData,
};
use crate::inference;
use crate::relational::{init_model_params, PairedSet, StepMetrics, Trainer};
use crate::synthdata::{generate_dataset, GroundTruth};
use crate::tensorcore::{ParamStore, Scalar, Tensor};

/// The command layer runs in 32-bit floats.
type S = f32;

// ---------------------------------------------------------------------------
// Dataset access
// ---------------------------------------------------------------------------

/// An opened dataset directory: validated manifest plus loaders for frames
/// and per-subject gaze and recordings.
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_NAME);
        if !manifest_path.is_file() {
            return Err(Error::usage(format!(
                "no dataset at {}: {MANIFEST_NAME} not found",
                root.display()
            )));
        }
        let manifest = DatasetManifest::load(&manifest_path)?;
        manifest.validate(root)?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn frame(&self, i: usize) -> Result<Tensor<S>> {
        if i >= self.manifest.frame_count {
            return Err(Error::usage(format!(
                "frame {i} does not exist; available frames are 0..{}",
                self.manifest.frame_count
            )));
        }
        read_ppm(&self.manifest.frame_path(&self.root, i))
    }

    fn subject_files(&self, subject: usize) -> Result<&SubjectFiles> {
        self.manifest.subjects.get(subject).ok_or_else(|| {
            Error::usage(format!(
                "subject {subject} does not exist; available subjects are 0..{}",
                self.manifest.subjects.len()
            ))
        })
    }

    /// Cleaned gaze reduced to one optional point per frame.
    pub fn gaze_per_frame(&self, subject: usize) -> Result<Vec<Option<(f64, f64)>>> {
        let files = self.subject_files(subject)?;
        let raw = read_gaze_csv(&self.root.join(&files.gaze))?;
        let cleaned = clean_gaze(&raw, self.manifest.screen_width, self.manifest.screen_height)?;
        gaze_to_frames(&cleaned, self.manifest.fps, self.manifest.frame_count)
    }

    /// The recording at its native rate, volumes starting at t = 0.
    pub fn recording(&self, subject: usize) -> Result<FmriSeries<S>> {
        let files = self.subject_files(subject)?;
        let volumes = read_fmri_matrix(&self.root.join(&files.fmri))?;
        FmriSeries::from_rate(0, self.manifest.fmri_rate_hz, volumes)
    }

    /// The recording linearly interpolated to frame rate.
    pub fn recording_at_fps(&self, subject: usize) -> Result<FmriSeries<S>> {
        interpolate_fmri(&self.recording(subject)?, self.manifest.fps)
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        let rel = self
            .manifest
            .truth
            .as_ref()
            .ok_or_else(|| Error::usage("this dataset has no ground-truth sidecar"))?;
        GroundTruth::load(&self.root.join(rel))
    }

    /// Frame-aligned gaze and recording for one subject, ready to pair at
    /// any assumed delay.
    pub fn aligned(&self, subject: usize) -> Result<AlignedSubject> {
        Ok(AlignedSubject {
            gaze: self.gaze_per_frame(subject)?,
            at_fps: self.recording_at_fps(subject)?,
        })
    }

    /// Crop-level training pairs plus frame-level evaluation samples under
    /// one assumed delay.
    pub fn delay_data(
        &self,
        aligned: &AlignedSubject,
        subject: usize,
        crop: usize,
        delay_s: f64,
    ) -> Result<DelayData<S>> {
        let outcome = pair_samples(
            |i| self.frame(i),
            self.manifest.frame_count,
            self.manifest.fps,
            &aligned.gaze,
            &aligned.at_fps,
            delay_s,
            crop,
            subject,
        )?;
        let pairs = to_paired_set(&outcome.samples)?;
        let frames = frame_samples(
            self.manifest.frame_count,
            self.manifest.fps,
            &aligned.gaze,
            &aligned.at_fps,
            delay_s,
        )?;
        Ok(DelayData { pairs, frames })
    }
}

/// One subject's per-frame gaze and frame-rate recording.
pub struct AlignedSubject {
    pub gaze: Vec<Option<(f64, f64)>>,
    pub at_fps: FmriSeries<S>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_voxels(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<()> {
    if manifest.voxels != cfg.voxels {
        return Err(Error::usage(format!(
            "dataset records {} voxels but the run configuration says voxels = {}",
            manifest.voxels, cfg.voxels
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let manifest = generate_dataset(&cfg.dataset_config(), seed, out)?;
    println!(
        "wrote dataset: {} frames at {} fps, {} subject(s), {} voxels -> {}",
        manifest.frame_count,
        manifest.fps,
        manifest.subjects.len(),
        manifest.voxels,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(cfg: &RunConfig, seed: u64, dataset: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(dataset)?;
    check_voxels(&ds.manifest, cfg)?;
    // Stack every subject's recording into one [T_total, V] matrix.
    let mut rows: Vec<S> = Vec::new();
    let mut total = 0usize;
    for s in 0..ds.manifest.subjects.len() {
        let series = ds.recording(s)?;
        rows.extend_from_slice(series.volumes().data());
        total += series.len();
    }
    let data = Tensor::new(&[total, ds.manifest.voxels], rows)?;
    let (ae, losses) = pretrain_autoencoder(&data, cfg.code_dim, &cfg.autoencoder_config(seed))?;

    ensure_dir(out)?;
    let ck_path = out.join("autoencoder.avck");
    AutoencoderCheckpoint { autoencoder: ae }.save(&ck_path)?;
    let mut log = String::from("epoch,mse\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(log, "{e},{l}");
    }
    write_text(&out.join("pretrain_log.csv"), &log)?;
    println!(
        "pretrained on {total} volumes: reconstruction {:.6} -> {:.6}; wrote {}",
        losses.first().unwrap(),
        losses.last().unwrap(),
        ck_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArgs<'a> {
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub subject: usize,
    pub autoencoder: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub steps: Option<usize>,
}

/// Load an autoencoder checkpoint and copy its encoder half into the
/// recording encoder, erroring when the two architectures disagree.
fn warm_start(store: &mut ParamStore<S>, path: &Path, d: usize, v: usize) -> Result<()> {
    let ack = AutoencoderCheckpoint::<S>::load(path)?;
    let shape = ack.autoencoder.encoder.shape();
    if shape != [d, v] {
        return Err(Error::usage(format!(
            "autoencoder encoder is {shape:?} but the model wants [code_dim, voxels] = [{d}, {v}]"
        )));
    }
    init_fmri_from_autoencoder(store, &ack.autoencoder)
}

pub fn cmd_train(cfg: &RunConfig, seed: u64, args: &TrainArgs) -> Result<()> {
    let ds = Dataset::open(args.dataset)?;
    check_voxels(&ds.manifest, cfg)?;
    let aligned = ds.aligned(args.subject)?;
    let outcome = pair_samples(
        |i| ds.frame(i),
        ds.manifest.frame_count,
        ds.manifest.fps,
        &aligned.gaze,
        &aligned.at_fps,
        cfg.delay_s,
        cfg.crop,
        args.subject,
    )?;
    let pairs = to_paired_set(&outcome.samples)?;
    println!(
        "paired {} sample(s) at delay {} s ({} frame(s) skipped)",
        pairs.len(),
        cfg.delay_s,
        outcome.skipped
    );

    let mc = cfg.model_config();
    let mut tc = cfg.train_config(seed);
    if let Some(s) = args.steps {
        tc.steps = s;
    }
    let (train_split, test_split) = pairs.split_by_time(tc.train_frac)?;
    let n = train_split.len();

    // Build a fresh trainer or restore one mid-run; either way `rng` is the
    // batch sampler positioned exactly where the next step expects it.
    let (mut trainer, mut rng, train_seed) = match args.resume {
        Some(path) => {
            let ck = ModelCheckpoint::<S>::load(path)?;
            if ck.model != mc {
                return Err(Error::usage(format!(
                    "checkpoint architecture {:?} does not match the run configuration {:?}",
                    ck.model, mc
                )));
            }
            tc.seed = ck.train_seed;
            let trainer = Trainer::resume(
                ck.params.clone(),
                ck.optimizer()?,
                ck.steps_done as usize,
                &tc,
                train_split.image_dims(),
                train_split.voxels(),
            )?;
            (trainer, ck.sampler(), ck.train_seed)
        }
        None => {
            let mut store = ParamStore::new();
            let mut init_rng = ChaCha20Rng::seed_from_u64(tc.seed);
            init_model_params(&mut store, &mut init_rng, &mc);
            if let Some(ae_path) = args.autoencoder {
                warm_start(&mut store, ae_path, mc.d, mc.v)?;
            }
            let trainer =
                Trainer::new(store, &tc, train_split.image_dims(), train_split.voxels())?;
            (trainer, ChaCha20Rng::seed_from_u64(tc.seed), tc.seed)
        }
    };
    if trainer.steps_done() > tc.steps {
        return Err(Error::usage(format!(
            "checkpoint already holds {} step(s), more than the requested {}",
            trainer.steps_done(),
            tc.steps
        )));
    }

    ensure_dir(args.out)?;
    let log_path = args.out.join("train_log.csv");
    let log_io = |e: std::io::Error| Error::io(&log_path, e);
    let mut log = if args.resume.is_some() && log_path.exists() {
        let f = fs::OpenOptions::new().append(true).open(&log_path).map_err(log_io)?;
        BufWriter::new(f)
    } else {
        let mut f = BufWriter::new(File::create(&log_path).map_err(log_io)?);
        writeln!(f, "{}", StepMetrics::CSV_HEADER).map_err(log_io)?;
        f
    };

    for _ in trainer.steps_done()..tc.steps {
        let idx: Vec<usize> = (0..tc.batch).map(|_| rng.gen_range(0..n)).collect();
        let (bi, bf) = train_split.gather(&idx);
        let metrics = trainer.step(&bi, &bf)?;
        writeln!(log, "{}", metrics.csv_row()).map_err(log_io)?;
    }

    // Summary statistics on both splits, appended below the step log.
    writeln!(log).map_err(log_io)?;
    writeln!(log, "split,Positive,Negative,Regularization").map_err(log_io)?;
    writeln!(log, "target,1,-1,0").map_err(log_io)?;
    for (name, split) in [("train", &train_split), ("test", &test_split)] {
        let st = relational_stats(trainer.params(), split, tc.combined_encodes_original, name)?;
        writeln!(
            log,
            "{name},{},{},{}",
            st.mean_attended,
            st.mean_neglected,
            st.regularization()
        )
        .map_err(log_io)?;
        println!(
            "{name} split ({} samples): positive {:.4}, negative {:.4}, regularization {:.4}",
            st.n,
            st.mean_attended,
            st.mean_neglected,
            st.regularization()
        );
    }
    log.flush().map_err(log_io)?;

    let model_path = args.out.join("model.avck");
    ModelCheckpoint::capture(
        mc,
        trainer.steps_done(),
        train_seed,
        trainer.optimizer(),
        &rng,
        trainer.params(),
    )
    .save(&model_path)?;
    println!(
        "trained to step {} on {} train / {} test sample(s); wrote {}",
        trainer.steps_done(),
        n,
        test_split.len(),
        model_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

pub struct InferArgs<'a> {
    pub dataset: &'a Path,
    pub model: &'a Path,
    pub out: &'a Path,
    pub subject: usize,
    pub frames: &'a [usize],
    pub individual: bool,
}

/// Image dimmed where the mask is low, with an optional red gaze dot.
fn overlay_image(image: &Tensor<S>, mask: &Tensor<S>, gaze: Option<(f64, f64)>) -> Result<Tensor<S>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in 0..h * w {
            let m = mask.data()[p].clamp(0.0, 1.0);
            data.push(image.data()[ch * h * w + p] * (0.35 + 0.65 * m));
        }
    }
    if let Some((gx, gy)) = gaze {
        const R: i64 = 3;
        let (cx, cy) = (gx.floor() as i64, gy.floor() as i64);
        for dy in -R..=R {
            for dx in -R..=R {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= R * R
                    && (0..w as i64).contains(&x)
                    && (0..h as i64).contains(&y)
                {
                    let p = y as usize * w + x as usize;
                    data[p] = 1.0;
                    for ch in 1..c {
                        data[ch * h * w + p] = 0.0;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], data)
}

fn grid_csv<T: Scalar>(t: &Tensor<T>) -> String {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut s = String::new();
    for y in 0..h {
        let row: Vec<String> =
            t.data()[y * w..(y + 1) * w].iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn cmd_infer(cfg: &RunConfig, args: &InferArgs) -> Result<()> {
    if args.frames.is_empty() {
        return Err(Error::usage("no frames requested; pass --frames with frame indices"));
    }
    let ds = Dataset::open(args.dataset)?;
    let ck = ModelCheckpoint::<S>::load(args.model)?;
    let store = &ck.params;
    let gaze = ds.gaze_per_frame(args.subject)?;
    let recording =
        if args.individual { Some(ds.recording_at_fps(args.subject)?) } else { None };
    let frame_period = period_ms_for(ds.manifest.fps)?;
    let delay_ms = (cfg.delay_s * 1000.0).round() as i64;
    ensure_dir(args.out)?;

    for &i in args.frames {
        let frame = ds.frame(i)?;
        let (cropped, (left, top)) = inference::center_crop_to_cells(&frame)?;
        let (c, h, w) = (cropped.shape()[0], cropped.shape()[1], cropped.shape()[2]);
        let gaze_in_crop = gaze.get(i).copied().flatten().and_then(|(x, y)| {
            let (gx, gy) = (x - left as f64, y - top as f64);
            (gx >= 0.0 && gx < w as f64 && gy >= 0.0 && gy < h as f64).then_some((gx, gy))
        });

        let (mask, attended, neglected, rmap) = if let Some(series) = &recording {
            let t = i as i64 * frame_period + delay_ms - series.t0_ms();
            if t < 0 || t % series.period_ms() != 0 || (t / series.period_ms()) as usize >= series.len()
            {
                return Err(Error::usage(format!(
                    "frame {i} has no recording volume {} s later; the recording covers {} frame time(s)",
                    cfg.delay_s,
                    series.len()
                )));
            }
            let volume = series.volume((t / series.period_ms()) as usize);
            let rmap = inference::relational_map(store, &cropped, volume)?;
            let mut field = inference::upsample_map(&rmap, h, w)?.into_data();
            inference::rectify(&mut field, cfg.rmap_rectify);
            let mut att = Vec::with_capacity(c * h * w);
            let mut neg = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for p in 0..h * w {
                    let px = cropped.data()[ch * h * w + p];
                    att.push(px * field[p]);
                    neg.push(px * (1.0 - field[p]));
                }
            }
            (
                Tensor::new(&[h, w], field)?,
                Tensor::new(&[c, h, w], att)?,
                Tensor::new(&[c, h, w], neg)?,
                Some(rmap),
            )
        } else {
            let g = inference::group_attention(store, &cropped)?;
            (g.mask, g.attended, g.neglected, None)
        };

        let base = format!("frame_{i:06}");
        write_ppm(&args.out.join(format!("{base}_attended.ppm")), &attended)?;
        write_ppm(&args.out.join(format!("{base}_neglected.ppm")), &neglected)?;
        let overlay = overlay_image(&cropped, &mask, gaze_in_crop)?;
        write_ppm(&args.out.join(format!("{base}_overlay.ppm")), &overlay)?;
        if let Some(rmap) = rmap {
            write_text(&args.out.join(format!("{base}_rmap.csv")), &grid_csv(&rmap))?;
        }
    }
    println!(
        "wrote {} file(s) per frame for {} frame(s) to {}",
        if args.individual { 4 } else { 3 },
        args.frames.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    HitRate,
    Stats,
    Networks,
}

impl EvalMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hitrate" => Ok(EvalMetric::HitRate),
            "stats" => Ok(EvalMetric::Stats),
            "networks" => Ok(EvalMetric::Networks),
            other => Err(Error::usage(format!(
                "unknown metric `{other}`; expected hitrate, stats, or networks"
            ))),
        }
    }
}

pub struct EvalArgs<'a> {
    pub dataset: &'a Path,
    pub model: &'a Path,
    pub out: &'a Path,
    pub subject: usize,
    pub metric: EvalMetric,
}

fn eval_hitrate(cfg: &RunConfig, ds: &Dataset, store: &ParamStore<S>, args: &EvalArgs) -> Result<()> {
    let aligned = ds.aligned(args.subject)?;
    let frames = frame_samples(
        ds.manifest.frame_count,
        ds.manifest.fps,
        &aligned.gaze,
        &aligned.at_fps,
        cfg.delay_s,
    )?;
    let cut = time_cut(frames.len(), cfg.train_frac)?;
    let mut csv = String::from("mode,split,hits,total,rate,chance\n");
    for mode in ["group", "individual"] {
        for (split, block) in [("train", &frames[..cut]), ("test", &frames[cut..])] {
            let masks = if mode == "group" {
                group_attention_samples(store, |i| ds.frame(i), block)?
            } else {
                individual_attention_samples(store, |i| ds.frame(i), block)?
            };
            let r = hit_rate(&masks, cfg.threshold, split)?;
            let _ = writeln!(csv, "{mode},{split},{},{},{},{}", r.hits, r.total, r.rate, r.chance);
            println!(
                "{mode} {split}: hit rate {:.4} vs chance {:.4} ({}/{})",
                r.rate, r.chance, r.hits, r.total
            );
        }
    }
    let path = args.out.join("hitrate.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_stats(cfg: &RunConfig, ds: &Dataset, store: &ParamStore<S>, args: &EvalArgs) -> Result<()> {
    let aligned = ds.aligned(args.subject)?;
    let pairs: PairedSet<S> =
        ds.delay_data(&aligned, args.subject, cfg.crop, cfg.delay_s)?.pairs;
    let (train_split, test_split) = pairs.split_by_time(cfg.train_frac)?;
    let mut csv = String::from("split,Positive,Negative,Regularization\ntarget,1,-1,0\n");
    for (name, split) in [("train", &train_split), ("test", &test_split)] {
        let st = relational_stats(store, split, cfg.combined_encodes_original, name)?;
        let _ = writeln!(
            csv,
            "{name},{},{},{}",
            st.mean_attended,
            st.mean_neglected,
            st.regularization()
        );
        println!(
            "{name}: positive {:.4}, negative {:.4}, regularization {:.4}",
            st.mean_attended,
            st.mean_neglected,
            st.regularization()
        );
    }
    let path = args.out.join("stats.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_networks(cfg: &RunConfig, ds: &Dataset, store: &ParamStore<S>, args: &EvalArgs) -> Result<()> {
    let recordings = ds.recording(args.subject)?;
    let networks = extract_networks(store, recordings.volumes(), cfg.z_threshold)?;
    let mut csv = String::from("rank,row,mean_activation,degenerate,support_size,support\n");
    let mut zmaps = String::new();
    for (rank, nw) in networks.iter().enumerate() {
        let support: Vec<String> = nw.support.iter().map(|j| j.to_string()).collect();
        let _ = writeln!(
            csv,
            "{rank},{},{},{},{},{}",
            nw.index,
            nw.mean_activation,
            nw.degenerate,
            nw.support.len(),
            support.join(" ")
        );
        let row: Vec<String> = nw.zmap.iter().map(|z| format!("{z}")).collect();
        zmaps.push_str(&row.join(","));
        zmaps.push('\n');
    }
    write_text(&args.out.join("networks.csv"), &csv)?;
    write_text(&args.out.join("network_zmaps.csv"), &zmaps)?;
    println!(
        "extracted {} network(s); strongest support has {} voxel(s)",
        networks.len(),
        networks.first().map_or(0, |n| n.support.len())
    );

    if ds.manifest.truth.is_some() {
        let truth = ds.truth()?;
        let (_, matches) = match_networks(&networks, &truth.maps)?;
        let mut csv = String::from("template,network_row,corr,flagged\n");
        let mut strong = 0;
        for m in &matches {
            let _ = writeln!(csv, "{},{},{},{}", m.template, m.network, m.corr, m.flagged);
            if m.corr.abs() >= 0.6 && !m.flagged {
                strong += 1;
            }
        }
        write_text(&args.out.join("network_matches.csv"), &csv)?;
        println!(
            "matched {strong} of {} planted map(s) at |corr| >= 0.6",
            matches.len()
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ds = Dataset::open(args.dataset)?;
    let ck = ModelCheckpoint::<S>::load(args.model)?;
    ensure_dir(args.out)?;
    match args.metric {
        EvalMetric::HitRate => eval_hitrate(cfg, &ds, &ck.params, args),
        EvalMetric::Stats => eval_stats(cfg, &ds, &ck.params, args),
        EvalMetric::Networks => eval_networks(cfg, &ds, &ck.params, args),
    }
}

// ---------------------------------------------------------------------------
// sweep-delay
// ---------------------------------------------------------------------------

pub struct SweepArgs<'a> {
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub subject: usize,
    pub autoencoder: Option<&'a Path>,
    pub delays: Option<Vec<f64>>,
}

pub fn cmd_sweep_delay(cfg: &RunConfig, seed: u64, args: &SweepArgs) -> Result<()> {
    let ds = Dataset::open(args.dataset)?;
    check_voxels(&ds.manifest, cfg)?;
    let delays = args.delays.clone().unwrap_or_else(|| cfg.sweep_delays.clone());
    let aligned = ds.aligned(args.subject)?;

    let mc = cfg.model_config();
    let mut init = ParamStore::new();
    let mut init_rng = ChaCha20Rng::seed_from_u64(seed);
    init_model_params(&mut init, &mut init_rng, &mc);
    if let Some(ae_path) = args.autoencoder {
        warm_start(&mut init, ae_path, mc.d, mc.v)?;
    }
    let mut tc = cfg.train_config(seed);
    tc.steps = cfg.sweep_steps;

    let sweep = delay_sweep(
        &delays,
        &init,
        &tc,
        cfg.threshold,
        |delay_s| ds.delay_data(&aligned, args.subject, cfg.crop, delay_s),
        |i| ds.frame(i),
    )?;

    ensure_dir(args.out)?;
    let mut csv = String::from("delay_s,hits,total,rate,chance,mean_positive,best\n");
    for (k, p) in sweep.points.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.delay_s,
            p.hit.hits,
            p.hit.total,
            p.hit.rate,
            p.hit.chance,
            p.mean_positive,
            (k == sweep.best) as u8
        );
        println!(
            "delay {} s: hit rate {:.4} vs chance {:.4}, positive relation {:.4}",
            p.delay_s, p.hit.rate, p.hit.chance, p.mean_positive
        );
    }
    let path = args.out.join("delay_sweep.csv");
    write_text(&path, &csv)?;
    println!(
        "best delay: {} s; wrote {}",
        sweep.points[sweep.best].delay_s,
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::DatasetConfig;
    use tempfile::TempDir;

    /// A dataset small enough that every command finishes in test time:
    /// 96×64 frames (3×2 grid cells), 12 seconds at 5 fps, recordings at
    /// 1 Hz so delays 0–2 s stay in range.
    fn tiny_run() -> (TempDir, RunConfig) {
        let dir = TempDir::new().unwrap();
        let mut cfg = RunConfig::default();
        cfg.width = 96;
        cfg.height = 64;
        cfg.fps = 5.0;
        cfg.duration_s = 12.0;
        cfg.objects = 2;
        cfg.voxels = 24;
        cfg.networks = 4;
        cfg.sparsity = 0.25;
        cfg.fmri_rate_hz = 1.0;
        cfg.delay_s = 1.0;
        cfg.crop = 32;
        cfg.code_dim = 6;
        cfg.widths = [2, 2, 3, 3, 3];
        cfg.rel_hidden = [8, 4];
        cfg.steps = 2;
        cfg.batch = 2;
        cfg.ae_epochs = 3;
        cfg.sweep_steps = 1;
        cfg.sweep_delays = vec![1.0];
        cmd_gen(&cfg, 5, dir.path()).unwrap();
        (dir, cfg)
    }

    #[test]
    fn full_pipeline_runs_end_to_end_on_a_tiny_dataset() {
        let (dir, cfg) = tiny_run();
        let data = dir.path();
        let out = dir.path().join("run");

        cmd_pretrain(&cfg, 5, data, &out).unwrap();
        assert!(out.join("autoencoder.avck").is_file());
        let log = fs::read_to_string(out.join("pretrain_log.csv")).unwrap();
        assert!(log.starts_with("epoch,mse\n"));
        assert_eq!(log.lines().count(), cfg.ae_epochs + 2);

        let ae = out.join("autoencoder.avck");
        cmd_train(
            &cfg,
            5,
            &TrainArgs {
                dataset: data,
                out: &out,
                subject: 0,
                autoencoder: Some(&ae),
                resume: None,
                steps: None,
            },
        )
        .unwrap();
        let model = out.join("model.avck");
        assert!(model.is_file());
        let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
        assert!(log.starts_with(StepMetrics::CSV_HEADER));
        assert!(log.contains("\n\nsplit,Positive,Negative,Regularization\ntarget,1,-1,0\n"));

        let infer_out = dir.path().join("overlays");
        cmd_infer(
            &cfg,
            &InferArgs {
                dataset: data,
                model: &model,
                out: &infer_out,
                subject: 0,
                frames: &[0, 7],
                individual: false,
            },
        )
        .unwrap();
        for i in [0, 7] {
            for suffix in ["attended", "neglected", "overlay"] {
                assert!(infer_out.join(format!("frame_{i:06}_{suffix}.ppm")).is_file());
            }
        }
        cmd_infer(
            &cfg,
            &InferArgs {
                dataset: data,
                model: &model,
                out: &infer_out,
                subject: 0,
                frames: &[3],
                individual: true,
            },
        )
        .unwrap();
        let rmap = fs::read_to_string(infer_out.join("frame_000003_rmap.csv")).unwrap();
        // 96×64 frame -> 3×2 grid of cells.
        assert_eq!(rmap.lines().count(), 2);
        assert!(rmap.lines().all(|l| l.split(',').count() == 3));

        let eval_out = dir.path().join("eval");
        fs::create_dir_all(&eval_out).unwrap();
        for metric in [EvalMetric::HitRate, EvalMetric::Stats, EvalMetric::Networks] {
            cmd_eval(
                &cfg,
                &EvalArgs { dataset: data, model: &model, out: &eval_out, subject: 0, metric },
            )
            .unwrap();
        }
        let hit = fs::read_to_string(eval_out.join("hitrate.csv")).unwrap();
        assert!(hit.starts_with("mode,split,hits,total,rate,chance\n"));
        assert_eq!(hit.lines().count(), 5);
        let stats = fs::read_to_string(eval_out.join("stats.csv")).unwrap();
        assert_eq!(stats.lines().nth(1), Some("target,1,-1,0"));
        let nets = fs::read_to_string(eval_out.join("networks.csv")).unwrap();
        assert_eq!(nets.lines().count(), cfg.code_dim + 1);
        assert!(eval_out.join("network_matches.csv").is_file());

        let sweep_out = dir.path().join("sweep");
        cmd_sweep_delay(
            &cfg,
            5,
            &SweepArgs {
                dataset: data,
                out: &sweep_out,
                subject: 0,
                autoencoder: Some(&ae),
                delays: None,
            },
        )
        .unwrap();
        let sweep = fs::read_to_string(sweep_out.join("delay_sweep.csv")).unwrap();
        assert!(sweep.starts_with("delay_s,hits,total,rate,chance,mean_positive,best\n"));
        assert_eq!(sweep.lines().count(), 2);
        assert!(sweep.lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        let (dir, cfg) = tiny_run();
        let data = dir.path();

        // One uninterrupted 4-step run.
        let full = dir.path().join("full");
        cmd_train(
            &cfg,
            5,
            &TrainArgs {
                dataset: data,
                out: &full,
                subject: 0,
                autoencoder: None,
                resume: None,
                steps: Some(4),
            },
        )
        .unwrap();

        // The same four steps as 2 + resume 2.
        let half = dir.path().join("half");
        cmd_train(
            &cfg,
            5,
            &TrainArgs {
                dataset: data,
                out: &half,
                subject: 0,
                autoencoder: None,
                resume: None,
                steps: Some(2),
            },
        )
        .unwrap();
        let mid = half.join("model.avck");
        let resumed = dir.path().join("resumed");
        fs::create_dir_all(&resumed).unwrap();
        fs::copy(&mid, resumed.join("start.avck")).unwrap();
        cmd_train(
            &cfg,
            5,
            &TrainArgs {
                dataset: data,
                out: &resumed,
                subject: 0,
                autoencoder: None,
                resume: Some(&resumed.join("start.avck")),
                steps: Some(4),
            },
        )
        .unwrap();

        let a = fs::read(full.join("model.avck")).unwrap();
        let b = fs::read(resumed.join("model.avck")).unwrap();
        assert_eq!(a, b, "resume must reproduce the uninterrupted run byte for byte");
    }

    #[test]
    fn zero_step_training_saves_the_warm_started_initialization() {
        let (dir, cfg) = tiny_run();
        let data = dir.path();
        let out = dir.path().join("run");
        cmd_pretrain(&cfg, 5, data, &out).unwrap();
        let ae = out.join("autoencoder.avck");
        cmd_train(
            &cfg,
            5,
            &TrainArgs {
                dataset: data,
                out: &out,
                subject: 0,
                autoencoder: Some(&ae),
                resume: None,
                steps: Some(0),
            },
        )
        .unwrap();
        let ck = ModelCheckpoint::<S>::load(&out.join("model.avck")).unwrap();
        assert_eq!(ck.steps_done, 0);
        let ack = AutoencoderCheckpoint::<S>::load(&ae).unwrap();
        assert_eq!(
            ck.params.require(crate::encoders::FMRI_WEIGHT).unwrap().data(),
            ack.autoencoder.encoder.data(),
            "zero-step training must preserve the autoencoder warm start"
        );
    }

    #[test]
    fn bad_subjects_frames_and_voxel_counts_are_rejected() {
        let (dir, cfg) = tiny_run();
        let data = dir.path();
        let ds = Dataset::open(data).unwrap();
        let err = ds.gaze_per_frame(9).unwrap_err().to_string();
        assert!(err.contains("subject 9") && err.contains("0..1"), "{err}");
        let err = ds.frame(100_000).unwrap_err().to_string();
        assert!(err.contains("available frames"), "{err}");

        let mut wrong = cfg.clone();
        wrong.voxels = 99;
        let err = cmd_pretrain(&wrong, 5, data, &dir.path().join("x"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("24") && err.contains("99"), "{err}");

        // Missing dataset directory is a usage-class error (exit code 2).
        let missing = cmd_pretrain(&cfg, 5, &dir.path().join("nowhere"), &dir.path().join("x"))
            .unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }
}
