use rand::seq::SliceRandom;
use rand::Rng;

use super::LossContext;
use crate::error::{Error, Result};
use crate::nn::Targets;

/// Splits `b` draws over groups of sizes `sizes` proportionally, using
/// largest remainders (ties to the lower group index).
pub(crate) fn proportional_allocation(sizes: &[usize], b: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * b / total).collect();
    let mut rem: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (s * b % total, i))
        .collect();
    rem.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    let missing = b - alloc.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(missing) {
        alloc[i] += 1;
    }
    alloc
}

/// Random batch of `b` examples with data-term scale `N / b`.
///
/// Classification batches are stratified by label with proportional
/// allocation; regression batches are simple random samples. Indices are
/// returned sorted so the batch depends only on the RNG stream.
pub fn make_minibatch_ctx<R: Rng + ?Sized>(
    ctx: &LossContext,
    b: usize,
    rng: &mut R,
) -> Result<LossContext> {
    let n = ctx.data().len();
    if b == 0 || b > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} outside [1, {n}]"
        )));
    }
    let mut idx = match ctx.data().targets() {
        Some(Targets::Classes { n_classes, labels }) => {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); *n_classes];
            for (i, &y) in labels.iter().enumerate() {
                groups[y].push(i);
            }
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            let alloc = proportional_allocation(&sizes, b);
            let mut picked = Vec::with_capacity(b);
            for (g, k) in groups.iter_mut().zip(alloc) {
                let (chosen, _) = g.partial_shuffle(rng, k);
                picked.extend_from_slice(chosen);
            }
            picked
        }
        _ => {
            let mut all: Vec<usize> = (0..n).collect();
            let (chosen, _) = all.partial_shuffle(rng, b);
            chosen.to_vec()
        }
    };
    idx.sort_unstable();
    ctx.subset(&idx, ctx.scale() * n as f64 / b as f64)
}
