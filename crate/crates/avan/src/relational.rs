//! Relational discrimination and the full training objective.
//!
//! A small dense network scores (image code ++ recording code) pairs: toward
//! +1 when the image half is the attended content, −1 for the neglected
//! content, and 0 for two controls (the combined code and a blank image). A
//! reconstruction head maps image codes back to voxel space so the attended
//! content must also explain the recording better than the neglected content
//! — an ordering hinge on Euclidean distances. The sum of both terms is
//! minimized jointly over the masking network, both encoders, the relational
//! network, and the reconstruction head; sparsity of the recording encoder is
//! handled proximally and kept out of the reported loss.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::attention;
use crate::encoders::{self, FMRI_WEIGHT};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensorcore::{
    l1_prox, update_running_stats, Adam, AdamConfig, Evaluation, Graph, Mode, NodeId, ParamStore,
    Scalar, Tensor,
};

/// Graph input names used by the training graph.
pub const IMAGE_INPUT: &str = "image";
pub const FMRI_INPUT: &str = "fmri";

// ---------------------------------------------------------------------------
// Architecture and parameter initialization
// ---------------------------------------------------------------------------

/// Architecture knobs shared by training, inference, and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Square crop side fed to the networks; must be divisible by 32.
    pub crop: usize,
    /// Code length produced by both encoders.
    pub d: usize,
    /// Recording length (number of voxels).
    pub v: usize,
    /// Backbone widths: stem plus four halving blocks.
    pub widths: [usize; 5],
    /// Hidden widths of the relational network.
    pub rel_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            crop: 64,
            d: 64,
            v: 256,
            widths: [8, 16, 32, 64, 64],
            rel_hidden: [256, 64],
        }
    }
}

/// Relational network: `2D -> hidden[0] -> hidden[1] -> 1`, batch-normalized
/// ReLU hidden layers, tanh output.
pub fn init_relational_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    d: usize,
    hidden: &[usize; 2],
) {
    nn::init_dense(store, rng, "rel.fc1", hidden[0], 2 * d, false);
    nn::init_bn(store, "rel.bn1", hidden[0]);
    nn::init_dense(store, rng, "rel.fc2", hidden[1], hidden[0], false);
    nn::init_bn(store, "rel.bn2", hidden[1]);
    nn::init_dense(store, rng, "rel.fc3", 1, hidden[1], true);
}

/// Reconstruction head: one dense layer `D -> V` followed by batch norm.
pub fn init_recon_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    d: usize,
    v: usize,
) {
    nn::init_dense(store, rng, "recon.fc", v, d, false);
    nn::init_bn(store, "recon.bn", v);
}

/// All five parameter groups in one deterministic pass over the RNG.
pub fn init_model_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    mc: &ModelConfig,
) {
    attention::init_mask_params(store, rng, mc.in_channels, &mc.widths);
    encoders::init_image_encoder_params(store, rng, mc.in_channels, &mc.widths, mc.d);
    encoders::init_fmri_encoder_params(store, rng, mc.d, mc.v);
    init_relational_params(store, rng, mc.d, &mc.rel_hidden);
    init_recon_params(store, rng, mc.d, mc.v);
}

// ---------------------------------------------------------------------------
// Graph fragments and eager wrappers
// ---------------------------------------------------------------------------

/// Graph fragment: relation scores `[n, 1]` in (−1, 1) from concatenated
/// code pairs `[n, 2D]`.
pub fn relate_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
) -> Result<NodeId> {
    let h = nn::dense_from_store(g, store, x, "rel.fc1")?;
    let h = nn::bn_from_store(g, store, h, "rel.bn1")?;
    let h = g.relu(h);
    let h = nn::dense_from_store(g, store, h, "rel.fc2")?;
    let h = nn::bn_from_store(g, store, h, "rel.bn2")?;
    let h = g.relu(h);
    let out = nn::dense_from_store(g, store, h, "rel.fc3")?;
    Ok(g.tanh(out))
}

/// Graph fragment: voxel-space reconstructions `[n, V]` from codes `[n, D]`.
pub fn recon_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    code: NodeId,
) -> Result<NodeId> {
    let r = nn::dense_from_store(g, store, code, "recon.fc")?;
    nn::bn_from_store(g, store, r, "recon.bn")
}

/// Eager wrapper: score code pairs `[n, 2D]`, returning `[n]` values in
/// (−1, 1) (inference-mode batch norm).
pub fn relate<T: Scalar>(store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::usage(format!(
            "relational input must be [rows, 2D], got {:?}",
            x.shape()
        )));
    }
    let mut g: Graph<T> = Graph::new();
    let xin = g.input("x", x.shape())?;
    let r = relate_node(&mut g, store, xin)?;
    let eval = g.evaluate(store, &[("x", x)], Mode::Eval)?;
    Tensor::new(&[x.shape()[0]], eval.value(r).to_vec())
}

/// Eager wrapper: reconstruct recordings `[n, V]` from codes `[n, D]`
/// (inference-mode batch norm).
pub fn reconstruct<T: Scalar>(store: &ParamStore<T>, codes: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let c = g.input("codes", codes.shape())?;
    let r = recon_node(&mut g, store, c)?;
    let eval = g.evaluate(store, &[("codes", codes)], Mode::Eval)?;
    Ok(eval.tensor(&g, r))
}

// ---------------------------------------------------------------------------
// Loss arithmetic (scalar reference forms)
// ---------------------------------------------------------------------------

/// Discrimination loss for one sample's four relation scores:
/// `(1 − r_att)² + (−1 − r_neg)² + r_comb² + r_blank²`.
pub fn relational_loss<T: Scalar>(r_att: T, r_neg: T, r_comb: T, r_blank: T) -> T {
    let one = T::one();
    (one - r_att) * (one - r_att)
        + (-one - r_neg) * (-one - r_neg)
        + r_comb * r_comb
        + r_blank * r_blank
}

/// Ordering hinge on reconstruction distances:
/// `max(d_att − d_neg + margin, 0)`.
pub fn triplet_hinge<T: Scalar>(d_att: T, d_neg: T, margin: T) -> T {
    (d_att - d_neg + margin).max(T::zero())
}

/// Eager wrapper: per-row ordering hinges for a batch. Reconstructs both
/// code sets, measures Euclidean distance to the recording rows, and applies
/// the hinge (inference-mode batch norm).
pub fn triplet_hinges<T: Scalar>(
    store: &ParamStore<T>,
    s: &Tensor<T>,
    v_att: &Tensor<T>,
    v_neg: &Tensor<T>,
    margin: f64,
) -> Result<Tensor<T>> {
    if margin < 0.0 {
        return Err(Error::usage("triplet margin must be non-negative"));
    }
    let n = s.shape().first().copied().unwrap_or(0);
    let mut g: Graph<T> = Graph::new();
    let sx = g.input("s", s.shape())?;
    let va = g.input("v_att", v_att.shape())?;
    let vn = g.input("v_neg", v_neg.shape())?;
    let both = g.concat(&[va, vn], 0)?;
    let rec = recon_node(&mut g, store, both)?;
    let rec_att = g.slice(rec, 0, 0, n)?;
    let rec_neg = g.slice(rec, 0, n, n)?;
    let d_att = g.row_distance(rec_att, sx)?;
    let d_neg = g.row_distance(rec_neg, sx)?;
    let diff = {
        let neg = g.scale(d_neg, -1.0)?;
        g.add(d_att, neg)?
    };
    let shifted = g.offset(diff, margin)?;
    let hinge = g.relu(shifted);
    let eval = g.evaluate(store, &[("s", s), ("v_att", v_att), ("v_neg", v_neg)], Mode::Eval)?;
    Ok(eval.tensor(&g, hinge))
}

// ---------------------------------------------------------------------------
// The training graph
// ---------------------------------------------------------------------------

/// Handles into the full training graph. The batch flows: mask → segment →
/// batched image encoder (attended / neglected / blank, optionally the
/// unmasked image) → relation scores against four targets, plus the
/// reconstruction-distance hinge. Exposed so callers can evaluate, inspect,
/// or finite-difference the composed objective directly.
pub struct TrainGraph<T: Scalar> {
    pub graph: Graph<T>,
    /// Relation scores `[4n, 1]`, blocks ordered attended / neglected /
    /// combined / blank.
    pub scores: NodeId,
    /// `[n]` Euclidean distances from the reconstructed attended codes to
    /// the recordings, and likewise for neglected codes.
    pub d_att: NodeId,
    pub d_neg: NodeId,
    /// `[1]` loss nodes: discrimination term, ordering term, their sum.
    pub l_rel: NodeId,
    pub l_trip: NodeId,
    pub total: NodeId,
    /// Rows per block — the batch size n.
    pub rows: usize,
}

/// Build the training objective for a fixed batch size `n` over images
/// `[n, c, h, w]` and recordings `[n, v]`.
///
/// `combined_encodes_original` selects how the combined-content code is
/// formed: `false` sums the attended and neglected codes (the default
/// reading), `true` encodes the unmasked image itself.
pub fn build_train_graph<T: Scalar>(
    store: &ParamStore<T>,
    n: usize,
    image_dims: [usize; 3],
    v: usize,
    margin: f64,
    combined_encodes_original: bool,
) -> Result<TrainGraph<T>> {
    if n == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    if margin < 0.0 {
        return Err(Error::usage("triplet margin must be non-negative"));
    }
    let [c, h, w] = image_dims;
    let mut g: Graph<T> = Graph::new();
    let image = g.input(IMAGE_INPUT, &[n, c, h, w])?;
    let fmri = g.input(FMRI_INPUT, &[n, v])?;

    // Mask and segment each image into complementary parts.
    let alpha = attention::alpha_grid_node(&mut g, store, image)?;
    let seg = attention::segment_nodes(&mut g, image, alpha)?;

    // Encode every role in one batched pass so normalization statistics are
    // shared across attended / neglected / blank (and optionally unmasked)
    // rows, exactly as a single encoder applied to a mixed batch.
    let blank = g.const_filled(&[n, c, h, w], 0.0);
    let mut roles = vec![seg.attended, seg.neglected, blank];
    if combined_encodes_original {
        roles.push(image);
    }
    let enc_in = g.concat(&roles, 0)?;
    let codes = encoders::image_code_node(&mut g, store, enc_in)?;
    let v_att = g.slice(codes, 0, 0, n)?;
    let v_neg = g.slice(codes, 0, n, n)?;
    let v_blank = g.slice(codes, 0, 2 * n, n)?;
    let v_comb = if combined_encodes_original {
        g.slice(codes, 0, 3 * n, n)?
    } else {
        g.add(v_att, v_neg)?
    };
    let v_f = encoders::fmri_code_node(&mut g, store, fmri)?;

    // Score all four pairings in one relational pass against the targets
    // (+1, −1, 0, 0) and average the squared errors over the batch.
    let x_att = g.concat(&[v_att, v_f], 1)?;
    let x_neg = g.concat(&[v_neg, v_f], 1)?;
    let x_comb = g.concat(&[v_comb, v_f], 1)?;
    let x_blank = g.concat(&[v_blank, v_f], 1)?;
    let rel_in = g.concat(&[x_att, x_neg, x_comb, x_blank], 0)?;
    let scores = relate_node(&mut g, store, rel_in)?;
    let targets = {
        let mut t = vec![T::zero(); 4 * n];
        t[..n].fill(T::one());
        t[n..2 * n].fill(-T::one());
        g.constant(Tensor::new(&[4 * n, 1], t)?)
    };
    let sq = g.squared_error(scores, targets)?;
    let l_rel = g.scale(sq, 1.0 / n as f64)?;

    // Reconstruct both content codes and order their distances to the
    // recording with a hinge of the given margin.
    let rec_in = g.concat(&[v_att, v_neg], 0)?;
    let rec = recon_node(&mut g, store, rec_in)?;
    let rec_att = g.slice(rec, 0, 0, n)?;
    let rec_neg = g.slice(rec, 0, n, n)?;
    let d_att = g.row_distance(rec_att, fmri)?;
    let d_neg = g.row_distance(rec_neg, fmri)?;
    let diff = {
        let neg = g.scale(d_neg, -1.0)?;
        g.add(d_att, neg)?
    };
    let shifted = g.offset(diff, margin)?;
    let hinge = g.relu(shifted);
    let hinge_sum = g.l1_norm(hinge);
    let l_trip = g.scale(hinge_sum, 1.0 / n as f64)?;

    let total = g.add(l_rel, l_trip)?;
    Ok(TrainGraph { graph: g, scores, d_att, d_neg, l_rel, l_trip, total, rows: n })
}

// ---------------------------------------------------------------------------
// Paired data
// ---------------------------------------------------------------------------

/// Time-ordered (image crop, recording row) pairs ready for training or
/// evaluation.
#[derive(Clone)]
pub struct PairedSet<T: Scalar> {
    images: Tensor<T>,
    fmri: Tensor<T>,
}

impl<T: Scalar> PairedSet<T> {
    /// `images: [N, c, h, w]`, `fmri: [N, V]`, matched first dimension.
    pub fn new(images: Tensor<T>, fmri: Tensor<T>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::usage(format!(
                "paired images must be [N, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if fmri.shape().len() != 2 {
            return Err(Error::usage(format!(
                "paired recordings must be [N, V], got {:?}",
                fmri.shape()
            )));
        }
        if images.shape()[0] != fmri.shape()[0] {
            return Err(Error::usage(format!(
                "sample counts differ: {} images vs {} recordings",
                images.shape()[0],
                fmri.shape()[0]
            )));
        }
        Ok(PairedSet { images, fmri })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn fmri(&self) -> &Tensor<T> {
        &self.fmri
    }

    /// Per-sample image dimensions `[c, h, w]`.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.fmri.shape()[1]
    }

    /// Copy out the rows at `idx` (repeats allowed) as batch tensors.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let [c, h, w] = self.image_dims();
        let isz = c * h * w;
        let vsz = self.voxels();
        let mut im = Vec::with_capacity(idx.len() * isz);
        let mut fm = Vec::with_capacity(idx.len() * vsz);
        for &i in idx {
            im.extend_from_slice(&self.images.data()[i * isz..(i + 1) * isz]);
            fm.extend_from_slice(&self.fmri.data()[i * vsz..(i + 1) * vsz]);
        }
        (
            Tensor::new(&[idx.len(), c, h, w], im).expect("gather shape"),
            Tensor::new(&[idx.len(), vsz], fm).expect("gather shape"),
        )
    }

    /// Split into a leading training block and trailing held-out block.
    /// Samples are assumed time-ordered, so the boundary is a single cut —
    /// recordings are autocorrelated and a shuffled split would leak across
    /// adjacent time points.
    pub fn split_by_time(&self, train_frac: f64) -> Result<(Self, Self)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::usage(format!(
                "training fraction must be in (0, 1), got {train_frac}"
            )));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::usage(format!(
                "cannot split {n} sample(s) into non-empty train and test blocks"
            )));
        }
        let cut = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..n).collect();
        let (hi, hf) = self.gather(&head);
        let (ti, tf) = self.gather(&tail);
        Ok((PairedSet { images: hi, fmri: hf }, PairedSet { images: ti, fmri: tf }))
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub margin: f64,
    /// L1 coefficient on the recording-encoder weight; applied as a proximal
    /// shrink after each optimizer step and reported separately in metrics,
    /// never folded into the loss values.
    pub l1_coeff: f64,
    pub train_frac: f64,
    pub combined_encodes_original: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 16,
            lr: 1e-3,
            margin: 0.1,
            l1_coeff: 5e-6,
            train_frac: 0.7,
            combined_encodes_original: false,
            seed: 0,
        }
    }
}

/// Per-step measurements. `l1` is the proximal penalty value
/// (`coeff · Σ|W|`); it is reported alongside but never added to `l_rel` and
/// `l_trip`, so logged losses stay comparable across penalty settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_rel: f64,
    pub l_trip: f64,
    pub l1: f64,
    pub r_att_mean: f64,
    pub r_neg_mean: f64,
    pub r_comb_mean: f64,
    pub r_blank_mean: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,L_rel,L_trip,L1,r_af_mean,r_nf_mean,r_anf_mean,r_bf_mean";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.l_rel,
            self.l_trip,
            self.l1,
            self.r_att_mean,
            self.r_neg_mean,
            self.r_comb_mean,
            self.r_blank_mean
        )
    }

    /// Reported objective: discrimination plus ordering terms.
    pub fn total(&self) -> f64 {
        self.l_rel + self.l_trip
    }
}

/// One model being optimized: the training graph for a fixed batch shape,
/// the parameter store, and the optimizer state.
pub struct Trainer<T: Scalar> {
    tg: TrainGraph<T>,
    params: ParamStore<T>,
    opt: Adam<T>,
    l1_coeff: f64,
    steps_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        params: ParamStore<T>,
        cfg: &TrainConfig,
        image_dims: [usize; 3],
        voxels: usize,
    ) -> Result<Self> {
        let opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        Self::resume(params, opt, 0, cfg, image_dims, voxels)
    }

    /// Rebuild a trainer around previously saved parameter and optimizer
    /// state (checkpoint restore).
    pub fn resume(
        params: ParamStore<T>,
        optimizer: Adam<T>,
        steps_done: usize,
        cfg: &TrainConfig,
        image_dims: [usize; 3],
        voxels: usize,
    ) -> Result<Self> {
        let wshape = params.require(FMRI_WEIGHT)?.shape().to_vec();
        if wshape[1] != voxels {
            return Err(Error::usage(format!(
                "recording length {voxels} does not match encoder weight shape {wshape:?}"
            )));
        }
        let tg = build_train_graph(
            &params,
            cfg.batch,
            image_dims,
            voxels,
            cfg.margin,
            cfg.combined_encodes_original,
        )?;
        Ok(Trainer { tg, params, opt: optimizer, l1_coeff: cfg.l1_coeff, steps_done })
    }

    fn forward(&self, images: &Tensor<T>, fmri: &Tensor<T>) -> Result<(Evaluation<T>, StepMetrics)> {
        let eval = self.tg.graph.evaluate(
            &self.params,
            &[(IMAGE_INPUT, images), (FMRI_INPUT, fmri)],
            Mode::Train,
        )?;
        let l_rel = eval.scalar(self.tg.l_rel).as_f64();
        let l_trip = eval.scalar(self.tg.l_trip).as_f64();
        for (value, term) in [(l_rel, "discrimination loss"), (l_trip, "ordering loss")] {
            if !value.is_finite() {
                return Err(Error::NonFinite { context: term.into() });
            }
        }
        let n = self.tg.rows;
        let r = eval.value(self.tg.scores);
        let mean = |block: usize| {
            r[block * n..(block + 1) * n].iter().map(|x| x.as_f64()).sum::<f64>() / n as f64
        };
        let metrics = StepMetrics {
            step: self.steps_done + 1,
            l_rel,
            l_trip,
            l1: encoders::l1_penalty(&self.params, self.l1_coeff)?,
            r_att_mean: mean(0),
            r_neg_mean: mean(1),
            r_comb_mean: mean(2),
            r_blank_mean: mean(3),
        };
        Ok((eval, metrics))
    }

    /// Training-mode forward only: the losses a step on this batch would
    /// see, with no state mutation.
    pub fn measure(&self, images: &Tensor<T>, fmri: &Tensor<T>) -> Result<StepMetrics> {
        self.forward(images, fmri).map(|(_, m)| m)
    }

    /// One joint update across all five parameter groups: backward pass,
    /// optimizer step, proximal shrink of the recording-encoder weight, and
    /// fold of fresh batch-norm statistics into the running estimates.
    pub fn step(&mut self, images: &Tensor<T>, fmri: &Tensor<T>) -> Result<StepMetrics> {
        let (eval, metrics) = self.forward(images, fmri)?;
        let grads = self.tg.graph.gradients(&eval, &self.params, self.tg.total)?;
        self.opt.step(&mut self.params, &grads)?;
        let threshold = self.opt.config.lr * self.l1_coeff;
        l1_prox(
            self.params.get_mut(FMRI_WEIGHT).expect("validated at construction"),
            threshold,
        );
        update_running_stats(&mut self.params, eval.batch_stats(), nn::BN_MOMENTUM_NEW)?;
        self.steps_done += 1;
        Ok(metrics)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.opt
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn batch_size(&self) -> usize {
        self.tg.rows
    }
}

/// Outcome of [`train`]: the trainer (parameters, optimizer state, step
/// count — everything a checkpoint needs), the per-step metric history, and
/// the split sizes actually used.
pub struct TrainResult<T: Scalar> {
    pub trainer: Trainer<T>,
    pub history: Vec<StepMetrics>,
    pub train_len: usize,
    pub test_len: usize,
}

/// Optimize `params` on the leading time block of `data` for `cfg.steps`
/// batches, sampling batch indices uniformly from the training block with a
/// seeded generator. When `log` is given, writes one CSV row per step under
/// a fixed header. The trailing block is held out untouched; its size is
/// reported so callers can evaluate on exactly the same split.
pub fn train<T: Scalar>(
    data: &PairedSet<T>,
    params: ParamStore<T>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult<T>> {
    let (train_split, test_split) = data.split_by_time(cfg.train_frac)?;
    let mut trainer = Trainer::new(params, cfg, train_split.image_dims(), train_split.voxels())?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let log_io = |e: std::io::Error| Error::runtime(format!("failed to write training log: {e}"));
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", StepMetrics::CSV_HEADER).map_err(log_io)?;
    }
    let n = train_split.len();
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..n)).collect();
        let (bi, bf) = train_split.gather(&idx);
        let metrics = trainer.step(&bi, &bf)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", metrics.csv_row()).map_err(log_io)?;
        }
        history.push(metrics);
    }
    Ok(TrainResult { trainer, history, train_len: train_split.len(), test_len: test_split.len() })
}

// ---------------------------------------------------------------------------
// Inference-mode relation measurements over a whole sample set
// ---------------------------------------------------------------------------

/// Relation scores and reconstruction distances per sample, inference-mode.
pub struct RelationOutputs<T: Scalar> {
    pub r_att: Vec<T>,
    pub r_neg: Vec<T>,
    pub r_comb: Vec<T>,
    pub r_blank: Vec<T>,
    pub d_att: Vec<T>,
    pub d_neg: Vec<T>,
}

/// Run the full pipeline over `data` with running-statistics normalization,
/// chunked to bound memory. Scores are batch-independent in this mode, so
/// chunking does not change results.
pub fn relation_outputs<T: Scalar>(
    store: &ParamStore<T>,
    data: &PairedSet<T>,
    combined_encodes_original: bool,
) -> Result<RelationOutputs<T>> {
    const CHUNK: usize = 32;
    let mut out = RelationOutputs {
        r_att: Vec::with_capacity(data.len()),
        r_neg: Vec::with_capacity(data.len()),
        r_comb: Vec::with_capacity(data.len()),
        r_blank: Vec::with_capacity(data.len()),
        d_att: Vec::with_capacity(data.len()),
        d_neg: Vec::with_capacity(data.len()),
    };
    let mut cached: Option<(usize, TrainGraph<T>)> = None;
    let mut start = 0;
    while start < data.len() {
        let len = CHUNK.min(data.len() - start);
        let rebuild = !matches!(&cached, Some((l, _)) if *l == len);
        if rebuild {
            let tg = build_train_graph(
                store,
                len,
                data.image_dims(),
                data.voxels(),
                0.0,
                combined_encodes_original,
            )?;
            cached = Some((len, tg));
        }
        let (_, tg) = cached.as_ref().expect("just built");
        let idx: Vec<usize> = (start..start + len).collect();
        let (bi, bf) = data.gather(&idx);
        let eval =
            tg.graph.evaluate(store, &[(IMAGE_INPUT, &bi), (FMRI_INPUT, &bf)], Mode::Eval)?;
        let r = eval.value(tg.scores);
        out.r_att.extend_from_slice(&r[..len]);
        out.r_neg.extend_from_slice(&r[len..2 * len]);
        out.r_comb.extend_from_slice(&r[2 * len..3 * len]);
        out.r_blank.extend_from_slice(&r[3 * len..4 * len]);
        out.d_att.extend_from_slice(eval.value(tg.d_att));
        out.d_neg.extend_from_slice(eval.value(tg.d_neg));
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::check_gradients;

    fn tiny_mc() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            crop: 32,
            d: 3,
            v: 5,
            widths: [2, 2, 3, 3, 3],
            rel_hidden: [6, 4],
        }
    }

    fn tiny_store(seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_model_params(&mut store, &mut rng, &tiny_mc());
        store
    }

    /// The zero-initialized mask head outputs a flat 0.5 grid, which leaves
    /// several paths at exact symmetry points; nudging it makes every
    /// gradient path generic.
    fn perturb_mask_head(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for name in ["mask.head.w", "mask.head.b"] {
            for w in store.get_mut(name).unwrap().data_mut() {
                *w += rng.gen_range(-0.3..0.3);
            }
        }
    }

    fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn tiny_batch(seed: u64, n: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mc = tiny_mc();
        (
            rand_tensor(seed, &[n, mc.in_channels, mc.crop, mc.crop], 0.0, 1.0),
            rand_tensor(seed ^ 0xabc, &[n, mc.v], -1.0, 1.0),
        )
    }

    fn tiny_set(seed: u64, n: usize) -> PairedSet<f64> {
        let (im, fm) = tiny_batch(seed, n);
        PairedSet::new(im, fm).unwrap()
    }

    // -- scalar loss arithmetic ---------------------------------------------

    #[test]
    fn discrimination_loss_matches_independent_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let module = relational_loss(r[0], r[1], r[2], r[3]);
            // Independent form: explicit (score, target) pairs.
            let oracle: f64 = [(r[0], 1.0), (r[1], -1.0), (r[2], 0.0), (r[3], 0.0)]
                .iter()
                .map(|(s, t)| (s - t) * (s - t))
                .sum();
            assert!((module - oracle).abs() <= 1e-12, "{module} vs {oracle}");
        }
    }

    #[test]
    fn discrimination_loss_known_points() {
        assert_eq!(relational_loss(1.0, -1.0, 0.0, 0.0), 0.0);
        assert_eq!(relational_loss(0.0, 0.0, 0.0, 0.0), 2.0);
        let near_converged = relational_loss(0.91f64, -0.94, 0.023, 0.023);
        assert!(
            (near_converged - 0.012758).abs() < 1e-6,
            "got {near_converged}"
        );
    }

    #[test]
    fn hinge_known_points_and_nonnegativity() {
        assert_eq!(triplet_hinge(1.0, 2.0, 0.1), 0.0);
        assert_eq!(triplet_hinge(2.0, 1.0, 0.1), 1.1);
        assert_eq!(triplet_hinge(1.0, 1.0, 0.1), 0.1);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let h = triplet_hinge(
                rng.gen_range(0.0..5.0),
                rng.gen_range(0.0..5.0),
                rng.gen_range(0.0..1.0),
            );
            assert!(h >= 0.0);
        }
    }

    #[test]
    fn equal_codes_cost_exactly_the_margin() {
        let store = tiny_store(9);
        let s = rand_tensor(10, &[3, 5], -1.0, 1.0);
        let v = rand_tensor(11, &[3, 3], -1.0, 1.0);
        let hinges = triplet_hinges(&store, &s, &v, &v, 0.1).unwrap();
        for h in hinges.data() {
            assert_eq!(*h, 0.1);
        }
        assert!(triplet_hinges(&store, &s, &v, &v, -0.5).is_err());
    }

    // -- graph assembly vs independent scalar pipeline -----------------------

    #[test]
    fn graph_loss_terms_match_independent_scalar_assembly() {
        let mc = tiny_mc();
        let mut store = tiny_store(12);
        perturb_mask_head(&mut store, 13);
        let n = 2;
        let margin = 0.1;
        let (im, fm) = tiny_batch(14, n);
        let tg = build_train_graph(&store, n, [mc.in_channels, mc.crop, mc.crop], mc.v, margin, false)
            .unwrap();
        let eval = tg
            .graph
            .evaluate(&store, &[(IMAGE_INPUT, &im), (FMRI_INPUT, &fm)], Mode::Train)
            .unwrap();

        let r = eval.value(tg.scores);
        let d_att = eval.value(tg.d_att);
        let d_neg = eval.value(tg.d_neg);
        // Independent per-sample assembly of the same measurements.
        let mut rel = 0.0;
        let mut trip = 0.0;
        for i in 0..n {
            rel += (r[i] - 1.0) * (r[i] - 1.0)
                + (r[n + i] + 1.0) * (r[n + i] + 1.0)
                + r[2 * n + i] * r[2 * n + i]
                + r[3 * n + i] * r[3 * n + i];
            trip += (d_att[i] - d_neg[i] + margin).max(0.0);
        }
        rel /= n as f64;
        trip /= n as f64;

        assert!((eval.scalar(tg.l_rel) - rel).abs() < 1e-12);
        assert!((eval.scalar(tg.l_trip) - trip).abs() < 1e-12);
        assert!((eval.scalar(tg.total) - (rel + trip)).abs() < 1e-12);
    }

    #[test]
    fn doubling_the_margin_never_decreases_the_total() {
        let mc = tiny_mc();
        let mut store = tiny_store(15);
        perturb_mask_head(&mut store, 16);
        let n = 3;
        let (im, fm) = tiny_batch(17, n);
        let dims = [mc.in_channels, mc.crop, mc.crop];
        let total_at = |margin: f64| {
            let tg = build_train_graph(&store, n, dims, mc.v, margin, false).unwrap();
            let eval = tg
                .graph
                .evaluate(&store, &[(IMAGE_INPUT, &im), (FMRI_INPUT, &fm)], Mode::Train)
                .unwrap();
            eval.scalar(tg.total)
        };
        let mut m = 0.05;
        for _ in 0..6 {
            assert!(total_at(2.0 * m) >= total_at(m) - 1e-15);
            m *= 2.0;
        }
    }

    // -- relational network behavior ------------------------------------------

    #[test]
    fn zeroed_final_layer_scores_exactly_zero() {
        let mut store = tiny_store(18);
        for w in store.get_mut("rel.fc3.w").unwrap().data_mut() {
            *w = 0.0;
        }
        let x = rand_tensor(19, &[7, 6], -2.0, 2.0);
        let r = relate(&store, &x).unwrap();
        assert_eq!(r.shape(), &[7]);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        let store = tiny_store(20);
        let x = rand_tensor(21, &[1000, 6], -3.0, 3.0);
        let r = relate(&store, &x).unwrap();
        assert!(r.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn pair_input_length_is_twice_the_code_length() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_relational_params(&mut store, &mut rng, 1024, &[8, 4]);
        let good = rand_tensor(23, &[1, 2048], -1.0, 1.0);
        assert!(relate(&store, &good).is_ok());
        let bad = rand_tensor(24, &[1, 2047], -1.0, 1.0);
        assert!(relate(&store, &bad).is_err());
        assert!(relate(&store, &rand_tensor(25, &[2048], -1.0, 1.0)).is_err());
    }

    #[test]
    fn reconstruction_output_has_recording_length() {
        let store = tiny_store(26);
        let codes = rand_tensor(27, &[4, 3], -1.0, 1.0);
        let rec = reconstruct(&store, &codes).unwrap();
        assert_eq!(rec.shape(), &[4, 5]);
    }

    // -- training mechanics ----------------------------------------------------

    #[test]
    fn zero_learning_rate_reports_metrics_without_moving_weights() {
        let mc = tiny_mc();
        let store = tiny_store(28);
        let before: Vec<(String, Vec<f64>)> = store
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect();
        let cfg = TrainConfig { batch: 2, lr: 0.0, ..TrainConfig::default() };
        let mut trainer =
            Trainer::new(store, &cfg, [mc.in_channels, mc.crop, mc.crop], mc.v).unwrap();
        let (im, fm) = tiny_batch(29, 2);
        let metrics = trainer.step(&im, &fm).unwrap();
        assert!(metrics.l_rel.is_finite() && metrics.l_trip.is_finite());
        assert!(metrics.total() > 0.0);
        // Trainable weights must be bit-identical; batch-norm running
        // statistics are measurement buffers and are allowed to move.
        for (name, data) in &before {
            assert_eq!(
                trainer.params().require(name).unwrap().data(),
                &data[..],
                "{name} moved under lr=0"
            );
        }
        assert_eq!(trainer.steps_done(), 1);
    }

    #[test]
    fn same_seed_yields_bit_identical_metric_streams() {
        let data = tiny_set(30, 8);
        let cfg = TrainConfig { steps: 5, batch: 2, lr: 1e-3, ..TrainConfig::default() };
        let run = || {
            let result = train(&data, tiny_store(31), &cfg, None).unwrap();
            result.history
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.step, y.step);
            for (p, q) in [
                (x.l_rel, y.l_rel),
                (x.l_trip, y.l_trip),
                (x.l1, y.l1),
                (x.r_att_mean, y.r_att_mean),
                (x.r_neg_mean, y.r_neg_mean),
                (x.r_comb_mean, y.r_comb_mean),
                (x.r_blank_mean, y.r_blank_mean),
            ] {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn two_hundred_steps_strictly_reduce_the_loss() {
        let mc = tiny_mc();
        let store = tiny_store(32);
        let cfg = TrainConfig { batch: 4, lr: 3e-3, ..TrainConfig::default() };
        let mut trainer =
            Trainer::new(store, &cfg, [mc.in_channels, mc.crop, mc.crop], mc.v).unwrap();
        let (im, fm) = tiny_batch(33, 4);
        let before = trainer.measure(&im, &fm).unwrap().total();
        for _ in 0..200 {
            trainer.step(&im, &fm).unwrap();
        }
        let after = trainer.measure(&im, &fm).unwrap().total();
        assert!(
            after < before,
            "loss failed to decrease: {before} -> {after}"
        );
    }

    #[test]
    fn time_split_respects_fractions() {
        let ten = tiny_set(34, 10);
        let (tr, te) = ten.split_by_time(0.7).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        // The split is a single time cut: train is the leading block, test
        // the trailing block, in original order.
        let isz: usize = ten.image_dims().iter().product();
        assert_eq!(tr.images().data(), &ten.images().data()[..7 * isz]);
        assert_eq!(te.images().data(), &ten.images().data()[7 * isz..]);
        assert_eq!(te.fmri().data(), &ten.fmri().data()[7 * ten.voxels()..]);

        let seven = tiny_set(35, 7);
        let (tr, te) = seven.split_by_time(0.7).unwrap();
        assert_eq!((tr.len(), te.len()), (5, 2));

        assert!(tiny_set(36, 1).split_by_time(0.7).is_err());
        assert!(ten.split_by_time(0.0).is_err());
        assert!(ten.split_by_time(1.0).is_err());
    }

    #[test]
    fn training_log_rows_follow_the_header() {
        let data = tiny_set(37, 6);
        let cfg = TrainConfig { steps: 3, batch: 2, ..TrainConfig::default() };
        let mut buf: Vec<u8> = Vec::new();
        train(&data, tiny_store(38), &cfg, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], StepMetrics::CSV_HEADER);
        for (i, line) in lines[1..].iter().enumerate() {
            assert_eq!(line.split(',').count(), 8);
            assert!(line.starts_with(&format!("{},", i + 1)));
        }
    }

    #[test]
    fn mask_parameters_receive_gradient_from_the_total_loss() {
        let mc = tiny_mc();
        let mut store = tiny_store(39);
        perturb_mask_head(&mut store, 40);
        let n = 2;
        let (im, fm) = tiny_batch(41, n);
        let tg = build_train_graph(&store, n, [mc.in_channels, mc.crop, mc.crop], mc.v, 0.1, false)
            .unwrap();
        let eval = tg
            .graph
            .evaluate(&store, &[(IMAGE_INPUT, &im), (FMRI_INPUT, &fm)], Mode::Train)
            .unwrap();
        let grads = tg.graph.gradients(&eval, &store, tg.total).unwrap();
        for name in ["mask.head.w", "mask.stem.w", "mask.block3.fuse.w"] {
            let g = grads.param(name).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.iter().any(|&x| x != 0.0), "{name} gradient is all zero");
        }
    }

    #[test]
    fn nonfinite_recording_aborts_naming_a_loss_term() {
        let mc = tiny_mc();
        let store = tiny_store(42);
        let cfg = TrainConfig { batch: 2, ..TrainConfig::default() };
        let mut trainer =
            Trainer::new(store, &cfg, [mc.in_channels, mc.crop, mc.crop], mc.v).unwrap();
        let (im, mut fm) = tiny_batch(43, 2);
        fm.data_mut()[3] = f64::NAN;
        let err = trainer.step(&im, &fm).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got {err}");
    }

    #[test]
    fn combined_code_switch_changes_only_the_combined_block() {
        let mut store = tiny_store(44);
        perturb_mask_head(&mut store, 45);
        let data = tiny_set(46, 4);
        let summed = relation_outputs(&store, &data, false).unwrap();
        let encoded = relation_outputs(&store, &data, true).unwrap();
        assert_eq!(summed.r_att, encoded.r_att);
        assert_eq!(summed.r_neg, encoded.r_neg);
        assert_eq!(summed.r_blank, encoded.r_blank);
        assert_eq!(summed.d_att, encoded.d_att);
        // A nonlinear encoder: code(att) + code(neg) ≠ code(original).
        assert_ne!(summed.r_comb, encoded.r_comb);
    }

    #[test]
    fn relation_outputs_are_chunk_invariant() {
        // 35 samples forces a full 32-row chunk plus a 3-row remainder;
        // inference-mode normalization must make the two paths agree with a
        // single-change-of-batch reference.
        let mut store = tiny_store(47);
        perturb_mask_head(&mut store, 48);
        let data = tiny_set(49, 35);
        let whole = relation_outputs(&store, &data, false).unwrap();
        assert_eq!(whole.r_att.len(), 35);
        // Reference: per-sample singleton sets.
        for i in [0usize, 17, 34] {
            let (im, fm) = data.gather(&[i]);
            let single =
                relation_outputs(&store, &PairedSet::new(im, fm).unwrap(), false).unwrap();
            assert!((whole.r_att[i] - single.r_att[0]).abs() < 1e-12);
            assert!((whole.d_neg[i] - single.d_neg[0]).abs() < 1e-12);
        }
    }

    // -- the composed model passes a finite-difference check -------------------

    #[test]
    fn full_model_gradient_check() {
        let mc = tiny_mc();
        let mut store = tiny_store(50);
        perturb_mask_head(&mut store, 51);
        let n = 2;
        let (im, fm) = tiny_batch(52, n);
        let tg = build_train_graph(&store, n, [mc.in_channels, mc.crop, mc.crop], mc.v, 0.3, false)
            .unwrap();
        // h = 1e-4 rather than the per-primitive 1e-5: the composed graph
        // accumulates enough floating-point noise that smaller probes sink
        // tiny gradient entries below the roundoff floor of the difference.
        let report = check_gradients(
            &tg.graph,
            &store,
            &[(IMAGE_INPUT, &im), (FMRI_INPUT, &fm)],
            Mode::Train,
            tg.total,
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
