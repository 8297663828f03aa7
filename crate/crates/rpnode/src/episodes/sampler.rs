//! N-way K-shot episode sampling from a pool of subjects. Fully determined by
//! the seed: the same subjects and request always rebuild the same episode.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::protoseg::MaskTensor;
use crate::rng::chacha;

use super::{Episode, Subject};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeRequest {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeRequest {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::Config("episode request needs n_way >= 1 and k_shot >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `count` distinct elements from `pool` by partial Fisher-Yates.
/// The pool must already be in deterministic order.
fn draw_distinct<T: Copy>(pool: &mut Vec<T>, count: usize, rng: &mut impl Rng) -> Vec<T> {
    debug_assert!(count <= pool.len());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

/// Replaces labels outside the episode class set with background so episode
/// masks only ever mention episode classes.
fn remap_mask(mask: &MaskTensor, class_set: &[u8]) -> MaskTensor {
    let labels = mask
        .labels()
        .iter()
        .map(|l| if class_set.contains(l) { *l } else { 0 })
        .collect();
    MaskTensor::new(mask.height(), mask.width(), labels).expect("same dimensions")
}

/// Samples one episode. Support slices are grouped class-major in ascending
/// class order; query slices are drawn from the remaining eligible slices of
/// the episode classes, never overlapping the support set.
pub fn sample_episode(
    subjects: &[Subject],
    request: EpisodeRequest,
    class_filter: Option<&[u8]>,
    seed: u64,
) -> Result<Episode> {
    request.validate()?;

    // Eligible slice lists per class, in deterministic subject-then-slice order.
    let mut eligible: BTreeMap<u8, Vec<(usize, usize)>> = BTreeMap::new();
    for (si, subject) in subjects.iter().enumerate() {
        for (sj, slice) in subject.slices.iter().enumerate() {
            for class in slice.mask.foreground_classes() {
                eligible.entry(class).or_default().push((si, sj));
            }
        }
    }
    if let Some(filter) = class_filter {
        eligible.retain(|c, _| filter.contains(c));
    }

    let available: Vec<u8> = eligible.keys().copied().collect();
    if available.len() < request.n_way {
        return Err(Error::InsufficientClasses { needed: request.n_way, available: available.len() });
    }

    let mut rng = chacha(seed);
    let mut class_pool = available.clone();
    let mut class_set = draw_distinct(&mut class_pool, request.n_way, &mut rng);
    class_set.sort_unstable();

    let mut support_refs: Vec<(usize, usize)> = Vec::with_capacity(request.n_way * request.k_shot);
    for &class in &class_set {
        let pool = &eligible[&class];
        if pool.len() < request.k_shot {
            return Err(Error::InsufficientSlices {
                class,
                needed: request.k_shot,
                available: pool.len(),
            });
        }
        let mut pool = pool.clone();
        support_refs.extend(draw_distinct(&mut pool, request.k_shot, &mut rng));
    }

    // Query pool: eligible slices of any episode class, minus the supports.
    let mut query_pool: Vec<(usize, usize)> = Vec::new();
    for &class in &class_set {
        for &slice_ref in &eligible[&class] {
            if !support_refs.contains(&slice_ref) && !query_pool.contains(&slice_ref) {
                query_pool.push(slice_ref);
            }
        }
    }
    if query_pool.len() < request.n_query {
        // Name the class with the thinnest remaining pool; with one way that
        // is simply the episode class.
        let scarcest = class_set
            .iter()
            .copied()
            .min_by_key(|c| eligible[c].iter().filter(|r| !support_refs.contains(r)).count())
            .expect("class set non-empty");
        return Err(Error::InsufficientSlices {
            class: scarcest,
            needed: request.n_query,
            available: query_pool.len(),
        });
    }
    let query_refs = draw_distinct(&mut query_pool, request.n_query, &mut rng);

    let fetch = |(si, sj): (usize, usize)| {
        let slice = &subjects[si].slices[sj];
        (slice.image.clone(), remap_mask(&slice.mask, &class_set))
    };
    Ok(Episode {
        support: support_refs.into_iter().map(fetch).collect(),
        query: query_refs.into_iter().map(fetch).collect(),
        class_set,
        seed,
    })
}
