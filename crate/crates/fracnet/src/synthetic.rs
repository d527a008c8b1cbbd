//! Deterministic two-class texture generators for fixtures, smoke tests, and
//! training sanity runs: class 0 is horizontal stripes, class 1 vertical,
//! each image with its own phase and mild noise.

use crate::data::bilinear_resize;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;
use crate::train::LoadedSplit;

const STRIPE_PERIOD: usize = 8;

/// One grayscale texture image as row-major bytes.
pub fn textured_image(extent: usize, class: usize, seed: u64) -> Vec<u8> {
    let mut rng = SplitMix64::new(derive_seed(seed, &[0x746578, class as u64]));
    let phase = rng.next_below(STRIPE_PERIOD);
    let mut out = vec![0u8; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let coord = if class == 0 { y } else { x };
            let stripe = ((coord + phase) / (STRIPE_PERIOD / 2)) % 2;
            let base: i32 = if stripe == 0 { 64 } else { 192 };
            let noise = rng.next_below(33) as i32 - 16;
            out[y * extent + x] = (base + noise).clamp(0, 255) as u8;
        }
    }
    out
}

/// A balanced split of `n_per_class` images per class, generated at
/// `source_extent` and bilinearly scaled into the `target` pipeline extent
/// with `channels` replicated planes, normalized to [0, 1].
pub fn textured_split(
    n_per_class: usize,
    source_extent: usize,
    target: (usize, usize),
    channels: usize,
    seed: u64,
) -> LoadedSplit {
    let (th, tw) = target;
    let mut images = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let class = i % 2;
        let raw = textured_image(source_extent, class, derive_seed(seed, &[i as u64]));
        let plane: Vec<f32> = raw.iter().map(|&v| v as f32).collect();
        let resized = bilinear_resize(&plane, source_extent, source_extent, tw, th);
        let mut data = Vec::with_capacity(channels * th * tw);
        for _ in 0..channels {
            data.extend(resized.iter().map(|v| v / 255.0));
        }
        images.push(Tensor::from_vec(&[channels, th, tw], data).expect("synthetic shape"));
        labels.push(class);
    }
    LoadedSplit { images, labels }
}
