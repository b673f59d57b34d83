//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use guideseg::geometry::{BinaryMask, BoundingBox};
use guideseg::guidelines::{build_index, Guideline, GuidelineId, GuidelineIndex, HashEmbedder};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mask with roughly `fill` of its pixels set.
pub fn noisy_mask(rng: &mut ChaCha8Rng, width: u32, height: u32, fill: f64) -> BinaryMask {
    BinaryMask::from_fn(width, height, |_, _| rng.random_bool(fill))
}

pub fn boxes(rng: &mut ChaCha8Rng, n: usize, width: u32, height: u32) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let (w, h) = (rng.random_range(8..64), rng.random_range(16..160));
            let x = rng.random_range(0..width - w);
            let y = rng.random_range(0..height - h);
            BoundingBox::new(y, x, y + h, x + w).unwrap()
        })
        .collect()
}

/// Index over `n` synthetic guidelines with the default hash embedder.
pub fn index(n: usize) -> GuidelineIndex {
    let words = ["person", "umbrella", "bicycle", "statue", "reflection", "crowd", "partial", "occluded"];
    let guidelines: Vec<Guideline> = (0..n)
        .map(|i| Guideline {
            id: GuidelineId(i as u32),
            text: format!(
                "Rule {i}: label every {} unless it is a {}.",
                words[i % words.len()],
                words[(i * 3 + 1) % words.len()]
            ),
            summary: String::new(),
        })
        .collect();
    build_index(&guidelines, &HashEmbedder::default()).unwrap()
}
