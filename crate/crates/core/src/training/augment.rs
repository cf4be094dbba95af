use rand::seq::index;
use rand::Rng;

/// Random patch subset for one training batch: draws `k` uniformly from
/// `min_keep..=n_patches`, then `k` distinct indices uniformly without
/// replacement. Returned sorted ascending.
pub fn sample_patch_subset<R: Rng + ?Sized>(n_patches: usize, min_keep: usize, rng: &mut R) -> Vec<usize> {
    let min_keep = min_keep.clamp(1, n_patches);
    if min_keep == n_patches {
        return (0..n_patches).collect();
    }
    let k = rng.gen_range(min_keep..=n_patches);
    let mut rows = index::sample(rng, n_patches, k).into_vec();
    rows.sort_unstable();
    rows
}

/// Probability that a given patch survives [`sample_patch_subset`].
pub fn retention_marginal(n_patches: usize, min_keep: usize) -> f64 {
    let min_keep = min_keep.clamp(1, n_patches);
    let mean_k = (min_keep + n_patches) as f64 / 2.0;
    mean_k / n_patches as f64
}
