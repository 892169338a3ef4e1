//! Adversarial attention: a masking network that maps an image to a coarse
//! possibility grid α, and the segmentation of the image into complementary
//! attended / neglected parts via the upsampled α and 1−α.
//!
//! Every pixel's intensity is split between exactly the two parts — the
//! attended and neglected images always sum back to the original. That
//! complementarity is what makes the downstream training adversarial: mass
//! claimed by one branch is taken from the other.

use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::nn;
use crate::tensorcore::{Graph, Mode, NodeId, ParamStore, Scalar, Tensor};

/// Parameter-name prefix for the masking network.
pub const MASK_PREFIX: &str = "mask";

/// Create masking-network parameters: the shared backbone plus a 1×1 head
/// producing one channel. Head weights and bias start at zero so the initial
/// grid is exactly 0.5 everywhere — neither branch begins with an advantage.
pub fn init_mask_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    in_channels: usize,
    widths: &[usize; 5],
) {
    nn::init_backbone(store, rng, MASK_PREFIX, in_channels, widths);
    store.insert(
        format!("{MASK_PREFIX}.head.w"),
        Tensor::zeros(&[1, widths[4], 1, 1]).with_requires_grad(true),
    );
    store.insert(
        format!("{MASK_PREFIX}.head.b"),
        Tensor::zeros(&[1]).with_requires_grad(true),
    );
}

/// Graph fragment: image `[n, c, h, w]` (h, w divisible by 32) to possibility
/// grid `[n, 1, h/32, w/32]`, entries in (0,1).
pub fn alpha_grid_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    image: NodeId,
) -> Result<NodeId> {
    let feat = nn::backbone_from_store(g, store, image, MASK_PREFIX)?;
    let logits = nn::conv_from_store(g, store, feat, &format!("{MASK_PREFIX}.head"), 1, 0)?;
    Ok(g.sigmoid(logits))
}

/// Graph nodes produced by segmentation.
pub struct SegmentNodes {
    /// `[n, 1, h, w]` upsampled mask in (0,1).
    pub mask: NodeId,
    /// `image ⊙ mask`, broadcast over channels.
    pub attended: NodeId,
    /// `image ⊙ (1 − mask)`.
    pub neglected: NodeId,
}

/// Graph fragment: split `image` by the upsampled possibility grid. The
/// neglected branch uses `1 − mask` built from the same mask tensor, so the
/// two branches are complementary by construction.
pub fn segment_nodes<T: Scalar>(
    g: &mut Graph<T>,
    image: NodeId,
    alpha: NodeId,
) -> Result<SegmentNodes> {
    let (n, c, h, w) = {
        let s = g.shape(image);
        (s[0], s[1], s[2], s[3])
    };
    let mask = g.upsample(alpha, h, w)?;
    let neg_mask = {
        let flipped = g.scale(mask, -1.0)?;
        g.offset(flipped, 1.0)?
    };
    let broadcast = |g: &mut Graph<T>, m: NodeId| -> Result<NodeId> {
        let copies: Vec<NodeId> = std::iter::repeat(m).take(c).collect();
        g.concat(&copies, 1)
    };
    let mask_c = broadcast(g, mask)?;
    let neg_c = broadcast(g, neg_mask)?;
    debug_assert_eq!(g.shape(mask_c), &[n, c, h, w]);
    let attended = g.mul(image, mask_c)?;
    let neglected = g.mul(image, neg_c)?;
    Ok(SegmentNodes { mask, attended, neglected })
}

/// Segmented image pair with the mask that produced it.
pub struct SegmentedPair<T: Scalar> {
    pub attended: Tensor<T>,
    pub neglected: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Eager wrapper: run the masking network on a batch of images
/// (inference-mode batch norm) and return the possibility grid.
pub fn mask_forward<T: Scalar>(store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let x = g.input("image", image.shape())?;
    let alpha = alpha_grid_node(&mut g, store, x)?;
    let eval = g.evaluate(store, &[("image", image)], Mode::Eval)?;
    Ok(eval.tensor(&g, alpha))
}

/// Eager wrapper: bilinear-upsample a possibility grid `[n, 1, gh, gw]` to
/// `[n, 1, h, w]`.
pub fn upsample_mask<T: Scalar>(grid: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let x = g.input("grid", grid.shape())?;
    let up = g.upsample(x, h, w)?;
    let eval = g.evaluate(&ParamStore::new(), &[("grid", grid)], Mode::Eval)?;
    Ok(eval.tensor(&g, up))
}

/// Eager wrapper: segment `image` by possibility grid `alpha`.
pub fn segment<T: Scalar>(image: &Tensor<T>, alpha: &Tensor<T>) -> Result<SegmentedPair<T>> {
    let mut g: Graph<T> = Graph::new();
    let x = g.input("image", image.shape())?;
    let a = g.input("alpha", alpha.shape())?;
    let seg = segment_nodes(&mut g, x, a)?;
    let eval = g.evaluate(&ParamStore::new(), &[("image", image), ("alpha", alpha)], Mode::Eval)?;
    Ok(SegmentedPair {
        attended: eval.tensor(&g, seg.attended),
        neglected: eval.tensor(&g, seg.neglected),
        mask: eval.tensor(&g, seg.mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const TINY: [usize; 5] = [4, 4, 8, 8, 8];

    fn tiny_store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_mask_params(&mut store, &mut rng, 3, &TINY);
        store
    }

    fn rand_image(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn grid_is_input_over_32_in_each_dim() {
        let store = tiny_store(1);
        let g224 = mask_forward(&store, &rand_image(2, &[1, 3, 224, 224])).unwrap();
        assert_eq!(g224.shape(), &[1, 1, 7, 7]);
        let g64 = mask_forward(&store, &rand_image(3, &[1, 3, 64, 64])).unwrap();
        assert_eq!(g64.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn unaligned_dims_are_rejected() {
        let store = tiny_store(1);
        assert!(mask_forward(&store, &rand_image(2, &[1, 3, 50, 64])).is_err());
    }

    #[test]
    fn fresh_net_outputs_exactly_half_on_blank_input() {
        let store = tiny_store(5);
        let blank = Tensor::zeros(&[1, 3, 64, 64]);
        let grid = mask_forward(&store, &blank).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.5), "{:?}", grid.data());
    }

    #[test]
    fn grid_entries_strictly_inside_unit_interval() {
        let store = tiny_store(6);
        let grid = mask_forward(&store, &rand_image(7, &[2, 3, 64, 96])).unwrap();
        assert!(grid.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn constant_grid_upsamples_to_constant_mask() {
        let grid = Tensor::filled(&[1, 1, 2, 2], 0.7f32);
        let mask = upsample_mask(&grid, 64, 64).unwrap();
        assert!(mask.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn step_grid_upsamples_monotonically() {
        // Grid columns [0, 1] per row: the 4-wide mask must increase
        // left-to-right in every row.
        let grid = Tensor::from_f64_slice(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let mask: Tensor<f64> = upsample_mask(&grid, 4, 4).unwrap();
        for row in mask.data().chunks(4) {
            assert!(row.windows(2).all(|p| p[0] < p[1]), "{row:?}");
        }
    }

    #[test]
    fn complement_commutes_with_upsampling() {
        let grid = rand_image(8, &[1, 1, 2, 3]);
        let comp_data: Vec<f32> = grid.data().iter().map(|&v| 1.0 - v).collect();
        let comp = Tensor::new(&[1, 1, 2, 3], comp_data).unwrap();
        let up_then_comp: Vec<f32> = upsample_mask(&grid, 8, 12)
            .unwrap()
            .data()
            .iter()
            .map(|&v| 1.0 - v)
            .collect();
        let comp_then_up = upsample_mask(&comp, 8, 12).unwrap();
        for (a, b) in up_then_comp.iter().zip(comp_then_up.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_and_half_masks_behave_as_expected() {
        let img = rand_image(9, &[1, 3, 64, 64]);
        let ones = Tensor::filled(&[1, 1, 2, 2], 1.0f32);
        let pair = segment(&img, &ones).unwrap();
        assert_eq!(pair.attended.data(), img.data());
        assert!(pair.neglected.data().iter().all(|&v| v == 0.0));

        let half = Tensor::filled(&[1, 1, 2, 2], 0.5f32);
        let pair = segment(&img, &half).unwrap();
        for (a, o) in pair.attended.data().iter().zip(img.data()) {
            assert!((a - o / 2.0).abs() < 1e-7);
        }
        assert_eq!(pair.attended.data(), pair.neglected.data());
    }

    #[test]
    fn gradient_reaches_mask_params_through_attended_branch_only() {
        // Loss that ignores the neglected branch must still train the mask.
        let mut store = tiny_store(10);
        // Move the head off its zero init: at exactly zero the head blocks
        // backbone gradients (they reappear after the first step), and this
        // test is about generic parameter values.
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for v in store.get_mut("mask.head.w").unwrap().data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        let img = rand_image(11, &[1, 3, 64, 64]);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input("image", img.shape()).unwrap();
        let alpha = alpha_grid_node(&mut g, &store, x).unwrap();
        let seg = segment_nodes(&mut g, x, alpha).unwrap();
        let loss = g.l1_norm(seg.attended);
        let eval = g.evaluate(&store, &[("image", &img)], Mode::Train).unwrap();
        let grads = g.gradients(&eval, &store, loss).unwrap();
        let head = grads.param("mask.head.w").unwrap();
        assert!(head.iter().any(|&v| v != 0.0));
        let stem = grads.param("mask.stem.w").unwrap();
        assert!(stem.iter().any(|&v| v != 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        /// Attended + neglected reconstructs the input within 1e-5 for any
        /// image and mask parameters (f32).
        #[test]
        fn attended_plus_neglected_reconstructs_image(seed in any::<u64>()) {
            let store = tiny_store(seed);
            let img = rand_image(seed ^ 0xabcd, &[1, 3, 64, 64]);
            let alpha = mask_forward(&store, &img).unwrap();
            let pair = segment(&img, &alpha).unwrap();
            for ((a, n), o) in pair
                .attended
                .data()
                .iter()
                .zip(pair.neglected.data())
                .zip(img.data())
            {
                prop_assert!((a + n - o).abs() < 1e-5);
            }
        }
    }
}
