//! Dataset splitting with temporal neighbor removal, gallery enrollment,
//! kNN identification and accuracy reporting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embednet::{embed_batch, NetworkParams};
use crate::error::{Error, Result};
use crate::losses::euclidean_distance;
use crate::model::{Gallery, GalleryEntry, IdentityId, Sample, SampleRef, SplitManifest};

/// Identity-agnostic random split; `round(ratio * N)` samples (ties down)
/// go to train. References keep their input order within each side.
pub fn random_split(samples: &[SampleRef], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to split".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParam(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = samples.len();
    let train_count = ((ratio * n as f64) - 0.5).ceil().clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..train_count] {
        is_train[i] = true;
    }
    let train: Vec<SampleRef> = (0..n).filter(|&i| is_train[i]).map(|i| samples[i].clone()).collect();
    let test = (0..n).filter(|&i| !is_train[i]).map(|i| samples[i].clone()).collect();
    Ok(SplitManifest {
        seed,
        ratio,
        n: 0,
        dataset: None,
        unknown_identities: Vec::new(),
        pre_removal_train_ids: train.clone(),
        train_ids: train,
        test_ids: test,
    })
}

/// Drops every train sample within `n` frames of a same-sequence test
/// sample. Identities left without train samples become unknowns.
pub fn leave_sequence_out(manifest: &SplitManifest, n: u64) -> SplitManifest {
    let mut test_frames: HashMap<&str, Vec<u64>> = HashMap::new();
    for t in &manifest.test_ids {
        test_frames.entry(&t.sequence_id).or_default().push(t.frame_index);
    }
    for frames in test_frames.values_mut() {
        frames.sort_unstable();
    }
    let near_test = |s: &SampleRef| {
        test_frames.get(s.sequence_id.as_str()).is_some_and(|frames| {
            // nearest test frame at or after frame_index - n
            let lo = s.frame_index.saturating_sub(n);
            let i = frames.partition_point(|&f| f < lo);
            frames.get(i).is_some_and(|&f| f <= s.frame_index.saturating_add(n))
        })
    };
    let train_ids: Vec<SampleRef> = manifest
        .pre_removal_train_ids
        .iter()
        .filter(|s| !near_test(s))
        .cloned()
        .collect();
    let remaining: BTreeSet<IdentityId> = train_ids.iter().map(|s| s.identity).collect();
    let unknown_identities = manifest
        .pre_removal_train_ids
        .iter()
        .map(|s| s.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|id| !remaining.contains(id))
        .collect();
    SplitManifest {
        n,
        train_ids,
        unknown_identities,
        ..manifest.clone()
    }
}

/// References that make up the gallery: post-removal train samples for
/// known identities, pre-removal train samples for unknown ones.
pub fn gallery_members(manifest: &SplitManifest) -> Vec<SampleRef> {
    let mut members = manifest.train_ids.clone();
    members.extend(
        manifest
            .pre_removal_train_ids
            .iter()
            .filter(|s| manifest.is_unknown(s.identity))
            .cloned(),
    );
    members
}

/// Embeddings keyed by sample id.
pub type EmbeddingTable = HashMap<String, Vec<f64>>;

/// Embeds the given samples (already network-ready clouds).
pub fn embed_samples(params: &NetworkParams, samples: &[&Sample]) -> Result<EmbeddingTable> {
    let clouds: Vec<_> = samples.iter().map(|s| s.cloud.clone()).collect();
    let embeddings = embed_batch(params, &clouds)?;
    Ok(samples
        .iter()
        .map(|s| s.id.clone())
        .zip(embeddings)
        .collect())
}

fn lookup<'a>(table: &'a EmbeddingTable, id: &str) -> Result<&'a Vec<f64>> {
    table
        .get(id)
        .ok_or_else(|| Error::Invariant(format!("no embedding for sample `{id}`")))
}

pub fn gallery_from_table(manifest: &SplitManifest, table: &EmbeddingTable, k: usize) -> Result<Gallery> {
    let members = gallery_members(manifest);
    if members.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let entries = members
        .iter()
        .map(|s| {
            Ok(GalleryEntry {
                embedding: lookup(table, &s.id)?.clone(),
                identity: s.identity,
                sample_id: Some(s.id.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Gallery::new(entries, k)
}

fn index_samples(samples: &[Sample]) -> HashMap<&str, &Sample> {
    samples.iter().map(|s| (s.id.as_str(), s)).collect()
}

fn resolve<'a>(index: &HashMap<&str, &'a Sample>, refs: &[SampleRef]) -> Result<Vec<&'a Sample>> {
    refs.iter()
        .map(|r| {
            index
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| Error::Invariant(format!("sample `{}` not in dataset", r.id)))
        })
        .collect()
}

/// Embeds the gallery members of `manifest` and labels them.
pub fn build_gallery(
    params: &NetworkParams,
    manifest: &SplitManifest,
    samples: &[Sample],
    k: usize,
) -> Result<Gallery> {
    let index = index_samples(samples);
    let members = resolve(&index, &gallery_members(manifest))?;
    let table = embed_samples(params, &members)?;
    gallery_from_table(manifest, &table, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub identity: IdentityId,
    /// Distances to the k nearest entries, ascending.
    pub neighbor_distances: Vec<f64>,
}

/// Majority vote among the k nearest gallery entries. Ties go to the label
/// with the smaller mean neighbor distance, then to the smaller label.
pub fn knn_predict(gallery: &Gallery, embedding: &[f64]) -> Result<Prediction> {
    gallery.validate()?;
    let mut ranked: Vec<(f64, usize)> = gallery
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| euclidean_distance(&e.embedding, embedding).map(|d| (d, i)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(gallery.k);

    let mut votes: BTreeMap<IdentityId, (usize, f64)> = BTreeMap::new();
    for &(d, i) in &ranked {
        let v = votes.entry(gallery.entries[i].identity).or_default();
        v.0 += 1;
        v.1 += d;
    }
    let (&identity, _) = votes
        .iter()
        .min_by(|(la, (ca, sa)), (lb, (cb, sb))| {
            cb.cmp(ca)
                .then((sa / *ca as f64).total_cmp(&(sb / *cb as f64)))
                .then(la.cmp(lb))
        })
        .expect("k >= 1");
    Ok(Prediction {
        identity,
        neighbor_distances: ranked.into_iter().map(|(d, _)| d).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: String,
    pub truth: IdentityId,
    pub predicted: IdentityId,
    pub is_unknown_identity: bool,
}

impl PredictionRow {
    pub fn correct(&self) -> bool {
        self.truth == self.predicted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<PredictionRow>,
}

fn fraction(rows: &[&PredictionRow]) -> Option<f64> {
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().filter(|r| r.correct()).count() as f64 / rows.len() as f64)
    }
}

impl AccuracyReport {
    pub fn overall(&self) -> Option<f64> {
        fraction(&self.rows.iter().collect::<Vec<_>>())
    }

    pub fn known(&self) -> Option<f64> {
        fraction(&self.rows.iter().filter(|r| !r.is_unknown_identity).collect::<Vec<_>>())
    }

    pub fn unknown(&self) -> Option<f64> {
        fraction(&self.rows.iter().filter(|r| r.is_unknown_identity).collect::<Vec<_>>())
    }

    /// `(true, predicted) -> count`.
    pub fn confusion(&self) -> BTreeMap<(IdentityId, IdentityId), usize> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry((r.truth, r.predicted)).or_insert(0) += 1;
        }
        m
    }

    /// `sample_id,true,predicted,is_unknown_identity,correct`, one row per test sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,true,predicted,is_unknown_identity,correct\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.sample_id,
                r.truth,
                r.predicted,
                r.is_unknown_identity,
                r.correct()
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
        format!(
            "samples={} overall={} known={} unknown={}",
            self.rows.len(),
            pct(self.overall()),
            pct(self.known()),
            pct(self.unknown())
        )
    }
}

/// Scores every test sample of `manifest` against its gallery using
/// precomputed embeddings.
pub fn evaluate_table(manifest: &SplitManifest, table: &EmbeddingTable, k: usize) -> Result<AccuracyReport> {
    let gallery = gallery_from_table(manifest, table, k)?;
    let rows = manifest
        .test_ids
        .iter()
        .map(|t| {
            let p = knn_predict(&gallery, lookup(table, &t.id)?)?;
            Ok(PredictionRow {
                sample_id: t.id.clone(),
                truth: t.identity,
                predicted: p.identity,
                is_unknown_identity: manifest.is_unknown(t.identity),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AccuracyReport { rows })
}

/// Embeds gallery and test samples, then scores the test side.
pub fn evaluate(
    params: &NetworkParams,
    manifest: &SplitManifest,
    samples: &[Sample],
    k: usize,
) -> Result<AccuracyReport> {
    let index = index_samples(samples);
    let mut needed = gallery_members(manifest);
    needed.extend(manifest.test_ids.iter().cloned());
    let refs = resolve(&index, &needed)?;
    let table = embed_samples(params, &refs)?;
    evaluate_table(manifest, &table, k)
}
