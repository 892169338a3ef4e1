//! Shared layer plumbing: parameter initialization and graph builders for
//! the convolutional backbone both the masking network and the image
//! encoder are built from.
//!
//! Parameters live in a flat [`ParamStore`] under dotted names
//! (`mask.block0.conv1.w`, …); the graph builders look shapes up from the
//! store so the architecture is defined in exactly one place.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::tensorcore::{Graph, NodeId, ParamStore, Scalar, Tensor};

/// Epsilon used by every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;

/// New-observation weight when folding batch statistics into the running
/// estimates (the running value keeps weight 0.9).
pub const BN_MOMENTUM_NEW: f64 = 0.1;

// ---------------------------------------------------------------------------
// Initialization: uniform in ±1/sqrt(fan_in), drawn in f64 then narrowed,
// so f32 and f64 stores built from the same seed hold the same values.
// ---------------------------------------------------------------------------

pub fn uniform_fan_in<T: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

/// Insert `{name}.w` (and `{name}.b`, zero, when `bias`) for a convolution.
pub fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    bias: bool,
) {
    store.insert(
        format!("{name}.w"),
        uniform_fan_in(rng, &[co, ci, k, k], ci * k * k),
    );
    if bias {
        store.insert(
            format!("{name}.b"),
            Tensor::zeros(&[co]).with_requires_grad(true),
        );
    }
}

/// Insert `{name}.w` (and `{name}.b`, zero, when `bias`) for a dense layer.
pub fn init_dense<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    name: &str,
    out_f: usize,
    in_f: usize,
    bias: bool,
) {
    store.insert(format!("{name}.w"), uniform_fan_in(rng, &[out_f, in_f], in_f));
    if bias {
        store.insert(
            format!("{name}.b"),
            Tensor::zeros(&[out_f]).with_requires_grad(true),
        );
    }
}

/// Insert batch-norm parameters: unit gamma, zero beta, and frozen running
/// statistics starting at mean 0 / variance 1.
pub fn init_bn<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::filled(&[c], T::one()).with_requires_grad(true));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]).with_requires_grad(true));
    store.insert(format!("{name}.rmean"), Tensor::zeros(&[c]));
    store.insert(format!("{name}.rvar"), Tensor::filled(&[c], T::one()));
}

// ---------------------------------------------------------------------------
// Graph builders reading shapes from the store
// ---------------------------------------------------------------------------

pub fn conv_from_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let wname = format!("{name}.w");
    let w = g.param(&wname, store.require(&wname)?.shape())?;
    let bname = format!("{name}.b");
    let b = if store.contains(&bname) {
        Some(g.param(&bname, store.require(&bname)?.shape())?)
    } else {
        None
    };
    g.conv2d(x, w, b, stride, pad)
}

pub fn dense_from_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    name: &str,
) -> Result<NodeId> {
    let wname = format!("{name}.w");
    let w = g.param(&wname, store.require(&wname)?.shape())?;
    let bname = format!("{name}.b");
    let b = if store.contains(&bname) {
        Some(g.param(&bname, store.require(&bname)?.shape())?)
    } else {
        None
    };
    g.dense(x, w, b)
}

pub fn bn_from_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    name: &str,
) -> Result<NodeId> {
    let c = store.require(&format!("{name}.gamma"))?.shape()[0];
    let gamma = g.param(&format!("{name}.gamma"), &[c])?;
    let beta = g.param(&format!("{name}.beta"), &[c])?;
    let rmean = g.param(&format!("{name}.rmean"), &[c])?;
    let rvar = g.param(&format!("{name}.rvar"), &[c])?;
    g.batch_norm(x, gamma, beta, rmean, rvar, BN_EPS)
}

/// Frozen 2×2 mean-pool with stride 2, expressed as a constant
/// channel-diagonal convolution so it rides the existing conv kernels.
pub fn avg_pool_2x2<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let c = g.shape(x)[1];
    let quarter = T::from_f64(0.25);
    let mut kernel = vec![T::zero(); c * c * 4];
    for ch in 0..c {
        for p in 0..4 {
            kernel[(ch * c + ch) * 4 + p] = quarter;
        }
    }
    let k = g.constant(Tensor::new(&[c, c, 2, 2], kernel).unwrap());
    g.conv2d(x, k, None, 2, 0)
}

// ---------------------------------------------------------------------------
// Backbone: stem conv + 4 halving blocks, overall downsampling 32×
// ---------------------------------------------------------------------------

/// Create all backbone parameters under `prefix`. `widths[0]` is the stem
/// width; `widths[1..5]` the four block widths.
pub fn init_backbone<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    in_channels: usize,
    widths: &[usize; 5],
) {
    init_conv(store, rng, &format!("{prefix}.stem"), widths[0], in_channels, 3, false);
    init_bn(store, &format!("{prefix}.stem.bn"), widths[0]);
    let mut ci = widths[0];
    for (i, &co) in widths[1..].iter().enumerate() {
        let b = format!("{prefix}.block{i}");
        init_conv(store, rng, &format!("{b}.conv1"), co, ci, 3, false);
        init_bn(store, &format!("{b}.bn1"), co);
        init_conv(store, rng, &format!("{b}.conv2"), co, co, 3, false);
        init_bn(store, &format!("{b}.bn2"), co);
        // The block output is conv2's features stacked with the mean-pooled
        // block input, fused back down to `co` channels by a 1×1 conv.
        init_conv(store, rng, &format!("{b}.fuse"), co, co + ci, 1, true);
        ci = co;
    }
}

/// One halving block: conv(s2)-BN-ReLU, conv(s1)-BN, concatenate with the
/// mean-pooled input, 1×1 fuse conv.
fn block_from_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let h1 = conv_from_store(g, store, x, &format!("{prefix}.conv1"), 2, 1)?;
    let h1 = bn_from_store(g, store, h1, &format!("{prefix}.bn1"))?;
    let h1 = g.relu(h1);
    let h2 = conv_from_store(g, store, h1, &format!("{prefix}.conv2"), 1, 1)?;
    let h2 = bn_from_store(g, store, h2, &format!("{prefix}.bn2"))?;
    let skip = avg_pool_2x2(g, x)?;
    let cat = g.concat(&[h2, skip], 1)?;
    conv_from_store(g, store, cat, &format!("{prefix}.fuse"), 1, 0)
}

/// Full backbone under `prefix`; input `[n, c, h, w]` with `h`, `w`
/// divisible by 32 yields `[n, widths[4], h/32, w/32]`.
pub fn backbone_from_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let (h, w) = {
        let s = g.shape(x);
        (s[2], s[3])
    };
    if h % 32 != 0 || w % 32 != 0 {
        return Err(crate::error::Error::usage(format!(
            "backbone input dims must be divisible by 32, got {h}x{w}"
        )));
    }
    let mut cur = conv_from_store(g, store, x, &format!("{prefix}.stem"), 2, 1)?;
    cur = bn_from_store(g, store, cur, &format!("{prefix}.stem.bn"))?;
    cur = g.relu(cur);
    for i in 0..4 {
        cur = block_from_store(g, store, cur, &format!("{prefix}.block{i}"))?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Mode;
    use rand::SeedableRng;

    #[test]
    fn backbone_downsamples_by_exactly_32() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store: ParamStore<f32> = ParamStore::new();
        init_backbone(&mut store, &mut rng, "bb", 3, &[4, 4, 8, 8, 8]);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input("x", &[1, 3, 64, 96]).unwrap();
        let out = backbone_from_store(&mut g, &store, x, "bb").unwrap();
        assert_eq!(g.shape(out), &[1, 8, 2, 3]);
    }

    #[test]
    fn backbone_rejects_unaligned_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store: ParamStore<f32> = ParamStore::new();
        init_backbone(&mut store, &mut rng, "bb", 3, &[4, 4, 4, 4, 4]);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input("x", &[1, 3, 60, 64]).unwrap();
        assert!(backbone_from_store(&mut g, &store, x, "bb").is_err());
    }

    #[test]
    fn avg_pool_halves_and_averages() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[1, 2, 2, 2]).unwrap();
        let y = avg_pool_2x2(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 1, 1]);
        let xv = Tensor::from_f64_slice(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0])
            .unwrap();
        let eval = g.evaluate(&ParamStore::new(), &[("x", &xv)], Mode::Eval).unwrap();
        assert_eq!(eval.value(y), &[2.5, 25.0]);
    }

    #[test]
    fn init_is_seed_deterministic_and_fan_in_scaled() {
        let draw = || {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            let mut s: ParamStore<f64> = ParamStore::new();
            init_dense(&mut s, &mut rng, "fc", 8, 100, true);
            s.require("fc.w").unwrap().data().to_vec()
        };
        let a = draw();
        assert_eq!(a, draw());
        let bound = 1.0 / 10.0;
        assert!(a.iter().all(|v| v.abs() < bound));
        assert!(a.iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn f32_and_f64_inits_agree_from_one_seed() {
        let mut rng1 = ChaCha20Rng::seed_from_u64(4);
        let mut rng2 = ChaCha20Rng::seed_from_u64(4);
        let mut s1: ParamStore<f32> = ParamStore::new();
        let mut s2: ParamStore<f64> = ParamStore::new();
        init_conv(&mut s1, &mut rng1, "c", 2, 3, 3, false);
        init_conv(&mut s2, &mut rng2, "c", 2, 3, 3, false);
        for (a, b) in s1.require("c.w").unwrap().data().iter().zip(s2.require("c.w").unwrap().data()) {
            assert_eq!(*a as f64, (*b as f32) as f64);
        }
    }
}
