//! C-way K-shot episode sampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which benchmark's query-count conventions to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Omniglot,
    MiniImagenet,
}

/// Default queries per class for a `way`-way `shot`-shot episode.
pub fn default_queries(bench: Benchmark, way: usize, shot: usize) -> usize {
    match (bench, way >= 20, shot > 1) {
        (Benchmark::Omniglot, false, false) => 19,
        (Benchmark::Omniglot, false, true) => 15,
        (Benchmark::Omniglot, true, false) => 10,
        (Benchmark::Omniglot, true, true) => 5,
        (Benchmark::MiniImagenet, _, false) => 15,
        (Benchmark::MiniImagenet, _, true) => 10,
    }
}

/// Dataset indices drawn for one episode, before any pixels are read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePlan {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Dataset class of each episode label.
    pub classes: Vec<usize>,
    /// `[label][k]` image indices of the sample set.
    pub sample_images: Vec<Vec<usize>>,
    /// `[label][q]` image indices of the query set.
    pub query_images: Vec<Vec<usize>>,
}

/// One episode's tensors. Samples are class-major (`label·K + k`), as are queries.
#[derive(Debug, Clone)]
pub struct Episode {
    pub plan: EpisodePlan,
    /// `[C·K, ch, S, S]`
    pub samples: Tensor<f32>,
    /// `[C·Q, ch, S, S]`
    pub queries: Tensor<f32>,
    pub query_labels: Vec<usize>,
}

/// Draw classes and images uniformly without replacement.
///
/// Only classes with at least `K + Q` images are eligible.
pub fn sample_plan<R: Rng + ?Sized>(
    d: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<EpisodePlan> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Sampling(format!(
            "way, shot and queries must be positive (got {way}, {shot}, {queries})"
        )));
    }
    let need = shot + queries;
    let eligible: Vec<usize> = (0..d.classes.len())
        .filter(|&c| d.num_images(c) >= need)
        .collect();
    if eligible.len() < way {
        return Err(Error::Sampling(format!(
            "{way}-way episode with {need} images per class needs {way} classes, but only {} of {} classes have {need} images",
            eligible.len(),
            d.classes.len()
        )));
    }
    let classes: Vec<usize> = sample(rng, eligible.len(), way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut sample_images = Vec::with_capacity(way);
    let mut query_images = Vec::with_capacity(way);
    for &c in &classes {
        let picked = sample(rng, d.num_images(c), need).into_vec();
        sample_images.push(picked[..shot].to_vec());
        query_images.push(picked[shot..].to_vec());
    }
    Ok(EpisodePlan {
        way,
        shot,
        queries,
        classes,
        sample_images,
        query_images,
    })
}

/// Read the planned images into tensors.
pub fn materialize(d: &Dataset, plan: &EpisodePlan) -> Result<Episode> {
    let s = d.image_size;
    let gather = |sets: &[Vec<usize>]| -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut n = 0;
        for (label, imgs) in sets.iter().enumerate() {
            for &i in imgs {
                data.extend(d.image(plan.classes[label], i));
                n += 1;
            }
        }
        Tensor::new(data, &[n, d.channels, s, s])
    };
    let query_labels = (0..plan.way)
        .flat_map(|l| std::iter::repeat_n(l, plan.queries))
        .collect();
    Ok(Episode {
        samples: gather(&plan.sample_images)?,
        queries: gather(&plan.query_images)?,
        query_labels,
        plan: plan.clone(),
    })
}

pub fn sample_episode<R: Rng + ?Sized>(
    d: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    let plan = sample_plan(d, way, shot, queries, rng)?;
    materialize(d, &plan)
}
