use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ClassId, DatasetView, LabeledSample, SampleId};
use crate::error::{Error, Result};

/// C-way K-shot shape with `q` queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Result<Self> {
        if ways < 2 || shots < 1 || queries < 1 {
            return Err(Error::InvalidParam(format!(
                "episode needs ways >= 2, shots >= 1, queries >= 1 (got {ways}/{shots}/{queries})"
            )));
        }
        Ok(Self {
            ways,
            shots,
            queries,
        })
    }

    /// `n_s = C × K`
    pub fn n_support(&self) -> usize {
        self.ways * self.shots
    }

    /// `n_q = C × q`
    pub fn n_query(&self) -> usize {
        self.ways * self.queries
    }
}

/// One task. Supports are class-major: episode class 0's K shots first, then
/// class 1's, and so on; queries follow the same order.
#[derive(Clone, Debug)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// Dataset class of each episode label.
    pub classes: Vec<ClassId>,
    pub support: Vec<LabeledSample>,
    pub query: Vec<LabeledSample>,
    pub seed: u64,
}

impl Episode {
    /// Episode-local label (0..C) of each support sample.
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.spec.n_support())
            .map(|i| i / self.spec.shots)
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.spec.n_query())
            .map(|j| j / self.spec.queries)
            .collect()
    }

    pub fn support_ids(&self) -> Vec<SampleId> {
        self.support.iter().map(|s| s.id).collect()
    }

    pub fn query_ids(&self) -> Vec<SampleId> {
        self.query.iter().map(|s| s.id).collect()
    }

    /// Checks counts, class structure, ordering and disjointness.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec;
        let fail = |msg: String| Err(Error::InvalidParam(msg));
        if self.support.len() != spec.n_support() || self.query.len() != spec.n_query() {
            return fail("support/query counts".into());
        }
        let mut distinct = self.classes.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != spec.ways || self.classes.len() != spec.ways {
            return fail("class count".into());
        }
        for (i, s) in self.support.iter().enumerate() {
            if s.class != self.classes[i / spec.shots] {
                return fail(format!("support {i} out of class-major order"));
            }
        }
        for (j, s) in self.query.iter().enumerate() {
            if s.class != self.classes[j / spec.queries] {
                return fail(format!("query {j} out of class-major order"));
            }
        }
        let mut ids: Vec<SampleId> = self.support_ids();
        ids.extend(self.query_ids());
        let n = ids.len();
        ids.sort();
        ids.dedup();
        if ids.len() != n {
            return fail("support and query ids overlap".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SampleRecord {
    sample_id: u64,
    class_id: u32,
    label: usize,
}

#[derive(Serialize)]
struct EpisodeRecord {
    episode_seed: u64,
    ways: usize,
    shots: usize,
    queries: usize,
    support: Vec<SampleRecord>,
    query: Vec<SampleRecord>,
}

impl Episode {
    /// One JSON object (no trailing newline) describing the episode.
    pub fn to_json_line(&self) -> String {
        let rec = |s: &[LabeledSample], labels: Vec<usize>| {
            s.iter()
                .zip(labels)
                .map(|(s, label)| SampleRecord {
                    sample_id: s.id.0,
                    class_id: s.class.0,
                    label,
                })
                .collect()
        };
        let record = EpisodeRecord {
            episode_seed: self.seed,
            ways: self.spec.ways,
            shots: self.spec.shots,
            queries: self.spec.queries,
            support: rec(&self.support, self.support_labels()),
            query: rec(&self.query, self.query_labels()),
        };
        serde_json::to_string(&record).expect("episode record serializes")
    }
}

/// Draws C classes, then K supports and q queries per class without
/// replacement. Fully determined by the view, `spec` and `seed`.
pub fn sample_episode(view: &DatasetView<'_>, spec: EpisodeSpec, seed: u64) -> Result<Episode> {
    let needed = spec.shots + spec.queries;
    for &class in view.classes() {
        let available = view.dataset.class_indices(class).len();
        if available < needed {
            return Err(Error::NotEnoughSamples {
                class: class.0,
                available,
                needed,
            });
        }
    }
    if view.classes().len() < spec.ways {
        return Err(Error::NotEnoughClasses {
            available: view.classes().len(),
            needed: spec.ways,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<ClassId> = index::sample(&mut rng, view.classes().len(), spec.ways)
        .into_iter()
        .map(|i| view.classes()[i])
        .collect();

    let samples = view.dataset.samples();
    let mut support = Vec::with_capacity(spec.n_support());
    let mut query = Vec::with_capacity(spec.n_query());
    for &class in &classes {
        let pool = view.dataset.class_indices(class);
        let picked = index::sample(&mut rng, pool.len(), needed).into_vec();
        support.extend(
            picked[..spec.shots]
                .iter()
                .map(|&p| samples[pool[p]].clone()),
        );
        query.extend(
            picked[spec.shots..]
                .iter()
                .map(|&p| samples[pool[p]].clone()),
        );
    }
    Ok(Episode {
        spec,
        classes,
        support,
        query,
        seed,
    })
}
