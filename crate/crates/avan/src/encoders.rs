//! Feature encoders: the convolutional image encoder producing bounded
//! D-dimensional codes, the strictly linear brain-recording encoder whose
//! weight rows are interpretable as voxel maps, and the linear autoencoder
//! used to warm-start that encoder.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensorcore::{l1_prox, Adam, AdamConfig, Graph, Mode, NodeId, ParamStore, Scalar, Tensor};

pub const IMG_PREFIX: &str = "imgenc";
/// Weight of the linear brain-recording encoder, shape `[D, V]`.
pub const FMRI_WEIGHT: &str = "fmrienc.w";

// ---------------------------------------------------------------------------
// Image encoder: backbone -> global average pool -> dense -> tanh
// ---------------------------------------------------------------------------

pub fn init_image_encoder_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    in_channels: usize,
    widths: &[usize; 5],
    d: usize,
) {
    nn::init_backbone(store, rng, IMG_PREFIX, in_channels, widths);
    nn::init_dense(store, rng, &format!("{IMG_PREFIX}.fc"), d, widths[4], true);
}

/// Graph fragment: spatial feature grid before pooling,
/// `[n, C_f, h/32, w/32]`.
pub fn feature_grid_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    image: NodeId,
) -> Result<NodeId> {
    nn::backbone_from_store(g, store, image, IMG_PREFIX)
}

/// Graph fragment: image `[n, c, h, w]` to code `[n, D]`, components in
/// (−1, 1).
pub fn image_code_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    image: NodeId,
) -> Result<NodeId> {
    let grid = feature_grid_node(g, store, image)?;
    let pooled = g.global_avg_pool(grid)?;
    let code = nn::dense_from_store(g, store, pooled, &format!("{IMG_PREFIX}.fc"))?;
    Ok(g.tanh(code))
}

/// Eager wrapper: encode a batch of images (inference-mode batch norm).
pub fn encode_image<T: Scalar>(store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let x = g.input("image", images.shape())?;
    let code = image_code_node(&mut g, store, x)?;
    let eval = g.evaluate(store, &[("image", images)], Mode::Eval)?;
    Ok(eval.tensor(&g, code))
}

// ---------------------------------------------------------------------------
// Brain-recording encoder: a single dense layer, no bias, no nonlinearity.
// Keeping it exactly linear is what lets each weight row be read as a
// voxel-space map later.
// ---------------------------------------------------------------------------

pub fn init_fmri_encoder_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    d: usize,
    v: usize,
) {
    store.insert(FMRI_WEIGHT, nn::uniform_fan_in(rng, &[d, v], v));
}

/// Graph fragment: recording rows `[n, V]` to codes `[n, D]`.
pub fn fmri_code_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fmri: NodeId,
) -> Result<NodeId> {
    let w = g.param(FMRI_WEIGHT, store.require(FMRI_WEIGHT)?.shape())?;
    g.dense(fmri, w, None)
}

/// Eager wrapper: `codes = rows · Wᵀ`.
pub fn encode_fmri<T: Scalar>(store: &ParamStore<T>, rows: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let x = g.input("fmri", rows.shape())?;
    let code = fmri_code_node(&mut g, store, x)?;
    let eval = g.evaluate(store, &[("fmri", rows)], Mode::Eval)?;
    Ok(eval.tensor(&g, code))
}

/// `coeff · Σ|W_ij|` over the brain-encoder weight.
pub fn l1_penalty<T: Scalar>(store: &ParamStore<T>, coeff: f64) -> Result<f64> {
    if coeff < 0.0 {
        return Err(Error::usage("L1 coefficient must be non-negative"));
    }
    let w = store.require(FMRI_WEIGHT)?;
    Ok(coeff * w.data().iter().map(|v| v.as_f64().abs()).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Linear autoencoder pretraining for the brain encoder
// ---------------------------------------------------------------------------

/// Encoder/decoder weights of a trained linear autoencoder.
pub struct Autoencoder<T: Scalar> {
    /// `[D, V]` — the half that seeds the brain encoder.
    pub encoder: Tensor<T>,
    /// `[V, D]`.
    pub decoder: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct AutoencoderConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l1_coeff: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig { epochs: 300, lr: 1e-2, l1_coeff: 5e-6, seed: 0 }
    }
}

/// Train `x -> W_e x -> W_d W_e x` against mean squared reconstruction error
/// plus an L1 penalty on the encoder weight, full-batch. Returns the trained
/// weights and the loss trace: `losses[e]` is the mean squared error at the
/// start of epoch `e`, with the post-training error appended last (length
/// `epochs + 1`).
pub fn pretrain_autoencoder<T: Scalar>(
    data: &Tensor<T>,
    d: usize,
    cfg: &AutoencoderConfig,
) -> Result<(Autoencoder<T>, Vec<f64>)> {
    let shape = data.shape();
    if shape.len() != 2 {
        return Err(Error::usage(format!(
            "autoencoder data must be [samples, voxels], got {shape:?}"
        )));
    }
    let (t, v) = (shape[0], shape[1]);
    if t < 2 {
        return Err(Error::usage(format!(
            "autoencoder pretraining needs at least 2 samples, got {t}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params: ParamStore<T> = ParamStore::new();
    params.insert("ae.enc.w", nn::uniform_fan_in(&mut rng, &[d, v], v));
    params.insert("ae.dec.w", nn::uniform_fan_in(&mut rng, &[v, d], d));

    let mut g: Graph<T> = Graph::new();
    let x = g.input("x", &[t, v])?;
    let enc_w = g.param("ae.enc.w", &[d, v])?;
    let dec_w = g.param("ae.dec.w", &[v, d])?;
    let code = g.dense(x, enc_w, None)?;
    let recon = g.dense(code, dec_w, None)?;
    let sse = g.squared_error(recon, x)?;
    let mse = g.scale(sse, 1.0 / (t * v) as f64)?;

    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let eval = g.evaluate(&params, &[("x", data)], Mode::Train)?;
        let loss = eval.scalar(mse).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "autoencoder reconstruction loss".into() });
        }
        losses.push(loss);
        let grads = g.gradients(&eval, &params, mse)?;
        opt.step(&mut params, &grads)?;
        l1_prox(params.get_mut("ae.enc.w").unwrap(), cfg.lr * cfg.l1_coeff);
    }
    let eval = g.evaluate(&params, &[("x", data)], Mode::Eval)?;
    losses.push(eval.scalar(mse).as_f64());

    let encoder = params.require("ae.enc.w")?.clone();
    let decoder = params.require("ae.dec.w")?.clone();
    Ok((Autoencoder { encoder, decoder }, losses))
}

/// Seed the brain encoder with a trained autoencoder's encoder half
/// (bit-exact copy, trainable).
pub fn init_fmri_from_autoencoder<T: Scalar>(
    store: &mut ParamStore<T>,
    ae: &Autoencoder<T>,
) -> Result<()> {
    if ae.encoder.shape().len() != 2 {
        return Err(Error::usage("autoencoder encoder weight must be 2-D"));
    }
    store.insert(FMRI_WEIGHT, ae.encoder.clone().with_requires_grad(true));
    Ok(())
}

use rand::SeedableRng;
