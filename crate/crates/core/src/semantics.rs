//! Semantic part discovery in hidden activations.
//!
//! Every spatial position of a layer's activation tensor is a `C`-dimensional
//! patch embedding. Spherical k-means over the bag of embeddings factorizes
//! the flattened activations as `A ≈ U V`, with one-hot memberships `U` and
//! unit-norm centroids `V`. The memberships then attribute channel energy to
//! clusters at every layer:
//!
//! ```text
//! M[k][c] = 1/(N·H·W) · Σ_{n,h,w} A[n,c,h,w]² · U[n,k,h,w]
//! ```
//!
//! With standardized activations every column of `M` sums to one.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ndio::{
    self, resample_membership, standardize, ActivationTensor, Array, ChannelStats, MembershipTensor, NdioError, Tensor4,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SAMPLE_COUNT: usize = 200;
const MANIFEST: &str = "manifest.json";
const ARRAYS: &str = "arrays.npz";
const ROW_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("activations must be standardized first")]
    NotStandardized,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cluster {0} already belongs to a part")]
    AlreadyAssigned(usize),
    #[error("unknown cluster {0}")]
    UnknownCluster(usize),
    #[error("unknown part {0:?}")]
    UnknownPart(String),
    #[error("a part needs at least one cluster")]
    EmptyMerge,
    #[error("no attribution for layer {0}")]
    MissingLayerAttribution(usize),
    #[error("catalog schema mismatch: {0}")]
    SchemaVersionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed manifest")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Array(#[from] NdioError),
}

pub type Result<T> = std::result::Result<T, SemanticsError>;

// ---------------------------------------------------------------------------
// Spherical k-means
// ---------------------------------------------------------------------------

/// Unit-norm cluster centroids, `K × C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidMatrix {
    pub k: usize,
    pub c: usize,
    pub v: Vec<f32>,
}

impl CentroidMatrix {
    pub fn row(&self, k: usize) -> &[f32] {
        &self.v[k * self.c..(k + 1) * self.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-5,
        }
    }
}

/// Result of clustering a bag of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RowClustering {
    pub assignments: Vec<usize>,
    pub centroids: CentroidMatrix,
    /// Objective after each assignment pass.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub membership: MembershipTensor,
    pub centroids: CentroidMatrix,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

/// Flatten `n × c × h × w` to `(n·h·w) × c` patch embeddings, row `(n·h + y)·w + x`.
pub fn patch_embeddings(t: &Tensor4) -> Vec<f32> {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut rows = vec![0.0f32; n * hw * c];
    for s in 0..n {
        for ch in 0..c {
            for (p, &v) in t.plane(s, ch).iter().enumerate() {
                rows[(s * hw + p) * c + ch] = v;
            }
        }
    }
    rows
}

/// Unit-normalize rows in f64. Zero rows stay zero.
fn normalize_rows(rows: &[f32], dim: usize) -> Vec<f64> {
    let mut out: Vec<f64> = rows.iter().map(|&v| v as f64).collect();
    for row in out.chunks_exact_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn is_zero(row: &[f64]) -> bool {
    row.iter().all(|&v| v == 0.0)
}

/// Best centroid by dot product, ties to the lowest index. Zero rows go to cluster 0.
#[inline]
fn best_centroid(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    if is_zero(row) {
        return (0, 0.0);
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(row, c);
        if s > best_sim {
            best_sim = s;
            best = j;
        }
    }
    (best, best_sim)
}

fn count_distinct_up_to(rows: &[f64], dim: usize, limit: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for row in rows.chunks_exact(dim) {
        if is_zero(row) {
            continue;
        }
        seen.insert(row.iter().map(|v| v.to_bits()).collect());
        if seen.len() >= limit {
            break;
        }
    }
    seen.len()
}

/// k-means++ seeding with squared cosine distance `(1 - cos)²` as the weight.
fn seed_centroids(rows: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let live: Vec<usize> = rows
        .chunks_exact(dim)
        .enumerate()
        .filter(|(_, r)| !is_zero(r))
        .map(|(i, _)| i)
        .collect();
    let first = live[rng.random_range(0..live.len())];
    let mut centroids = rows[first * dim..(first + 1) * dim].to_vec();
    let mut nearest: Vec<f64> = live
        .iter()
        .map(|&i| (1.0 - dot(&rows[i * dim..(i + 1) * dim], &centroids)).max(0.0))
        .collect();

    for _ in 1..k {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(SemanticsError::DegenerateInput(
                "fewer distinct directions than clusters".into(),
            ));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = *live.last().unwrap();
        let mut pick_pos = live.len() - 1;
        for (pos, w) in weights.iter().enumerate() {
            acc += w;
            if acc > target && *w > 0.0 {
                pick = live[pos];
                pick_pos = pos;
                break;
            }
        }
        if weights[pick_pos] == 0.0 {
            // numerical tail: take the last row with positive weight
            pick_pos = weights.iter().rposition(|&w| w > 0.0).unwrap();
            pick = live[pick_pos];
        }
        let new = rows[pick * dim..(pick + 1) * dim].to_vec();
        for (d, &i) in nearest.iter_mut().zip(&live) {
            let dist = (1.0 - dot(&rows[i * dim..(i + 1) * dim], &new)).max(0.0);
            if dist < *d {
                *d = dist;
            }
        }
        centroids.extend(new);
    }
    Ok(centroids)
}

struct ChunkStats {
    objective: f64,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

/// Assign every row, filling `assign` and `best_sim`; per-chunk partials are
/// reduced in chunk order so the result is independent of the thread count.
fn assignment_pass(
    rows: &[f64],
    dim: usize,
    centroids: &[f64],
    k: usize,
    assign: &mut [usize],
    best_sim: &mut [f64],
) -> (f64, Vec<f64>, Vec<usize>) {
    let partials: Vec<ChunkStats> = rows
        .par_chunks(ROW_CHUNK * dim)
        .zip(assign.par_chunks_mut(ROW_CHUNK))
        .zip(best_sim.par_chunks_mut(ROW_CHUNK))
        .map(|((chunk, a), b)| {
            let mut stats = ChunkStats {
                objective: 0.0,
                sums: vec![0.0; k * dim],
                counts: vec![0; k],
            };
            for ((row, slot), sim) in chunk.chunks_exact(dim).zip(a.iter_mut()).zip(b.iter_mut()) {
                let (j, s) = best_centroid(row, centroids, dim);
                *slot = j;
                *sim = s;
                stats.objective += s;
                stats.counts[j] += 1;
                for (acc, v) in stats.sums[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            stats
        })
        .collect();

    let mut objective = 0.0;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0; k];
    for p in partials {
        objective += p.objective;
        for (a, b) in sums.iter_mut().zip(&p.sums) {
            *a += b;
        }
        for (a, b) in counts.iter_mut().zip(&p.counts) {
            *a += b;
        }
    }
    (objective, sums, counts)
}

/// Spherical k-means on row vectors (`rows.len() / dim` rows of width `dim`).
pub fn spherical_kmeans_rows(rows: &[f32], dim: usize, opts: KMeansOptions) -> Result<RowClustering> {
    if opts.k == 0 {
        return Err(SemanticsError::DegenerateInput("k must be at least 1".into()));
    }
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(SemanticsError::ShapeMismatch(format!(
            "{} values do not form rows of width {dim}",
            rows.len()
        )));
    }
    let rows = normalize_rows(rows, dim);
    let n = rows.len() / dim;
    let distinct = count_distinct_up_to(&rows, dim, opts.k);
    if distinct < opts.k {
        return Err(SemanticsError::DegenerateInput(format!(
            "k = {} exceeds the {distinct} distinct nonzero directions",
            opts.k
        )));
    }
    let live_rows = rows.chunks_exact(dim).filter(|r| !is_zero(r)).count();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let k = opts.k;
    let mut centroids = seed_centroids(&rows, dim, k, &mut rng)?;
    let mut assign = vec![0usize; n];
    let mut best_sim = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut converged = false;

    for it in 0..opts.max_iter.max(1) {
        let (objective, sums, counts) = assignment_pass(&rows, dim, &centroids, k, &mut assign, &mut best_sim);
        trace.push(objective);
        if it > 0 && objective - trace[it - 1] < opts.tol * live_rows.max(1) as f64 {
            converged = true;
            break;
        }
        if it + 1 >= opts.max_iter {
            break;
        }

        let mut empty = Vec::new();
        for j in 0..k {
            let s = &sums[j * dim..(j + 1) * dim];
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if counts[j] == 0 || norm == 0.0 {
                empty.push(j);
            } else {
                for (c, v) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(s) {
                    *c = v / norm;
                }
            }
        }
        if !empty.is_empty() {
            // re-seed from the worst-served rows, lowest index first on ties
            let mut order: Vec<usize> = (0..n).filter(|&i| !is_zero(&rows[i * dim..(i + 1) * dim])).collect();
            order.sort_by(|&a, &b| best_sim[a].total_cmp(&best_sim[b]).then(a.cmp(&b)));
            for (j, &row) in empty.iter().zip(&order) {
                centroids[j * dim..(j + 1) * dim].copy_from_slice(&rows[row * dim..(row + 1) * dim]);
            }
        }
    }

    Ok(RowClustering {
        assignments: assign,
        centroids: CentroidMatrix {
            k,
            c: dim,
            v: centroids.iter().map(|&v| v as f32).collect(),
        },
        objective_trace: trace,
        converged,
    })
}

/// Cluster the patch embeddings of standardized activations.
pub fn spherical_kmeans(a: &ActivationTensor, opts: KMeansOptions) -> Result<KMeansFit> {
    if !a.standardized {
        return Err(SemanticsError::NotStandardized);
    }
    let [n, c, h, w] = a.tensor.shape();
    let rows = patch_embeddings(&a.tensor);
    let fit = spherical_kmeans_rows(&rows, c, opts)?;
    Ok(KMeansFit {
        membership: MembershipTensor::from_assignments(&fit.assignments, n, opts.k, h, w),
        centroids: fit.centroids,
        objective_trace: fit.objective_trace,
        converged: fit.converged,
    })
}

/// Sum over rows of the cosine to the assigned centroid; zero rows contribute 0.
pub fn kmeans_objective(rows: &[f32], dim: usize, assignments: &[usize], v: &CentroidMatrix) -> f64 {
    normalize_rows(rows, dim)
        .chunks_exact(dim)
        .zip(assignments)
        .map(|(row, &j)| row.iter().zip(v.row(j)).map(|(&a, &b)| a * b as f64).sum::<f64>())
        .sum()
}

/// Nearest-centroid assignment of raw (unnormalized) rows.
pub fn assign_rows(rows: &[f32], v: &CentroidMatrix) -> Vec<usize> {
    let dim = v.c;
    let rows = normalize_rows(rows, dim);
    let centroids: Vec<f64> = v.v.iter().map(|&x| x as f64).collect();
    rows.chunks_exact(dim)
        .map(|r| best_centroid(r, &centroids, dim).0)
        .collect()
}

// ---------------------------------------------------------------------------
// Attribution
// ---------------------------------------------------------------------------

/// Channel-to-cluster contributions `M`, `K × C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub layer_id: usize,
    pub k: usize,
    pub c: usize,
    pub m: Vec<f32>,
}

impl AttributionMatrix {
    pub fn row(&self, k: usize) -> &[f32] {
        &self.m[k * self.c..(k + 1) * self.c]
    }

    pub fn column_sum(&self, c: usize) -> f64 {
        (0..self.k).map(|k| self.m[k * self.c + c] as f64).sum()
    }

    pub fn to_array(&self) -> Array {
        Array::new(vec![self.k, self.c], self.m.clone()).expect("finite attribution")
    }
}

/// Mean of `A² ⊙ U` over samples and positions, for soft or hard `U`.
pub fn channel_attribution(a: &ActivationTensor, u: &MembershipTensor) -> Result<AttributionMatrix> {
    if !a.standardized {
        return Err(SemanticsError::NotStandardized);
    }
    let [n, c, h, w] = a.tensor.shape();
    let [un, k, uh, uw] = u.tensor.shape();
    if (n, h, w) != (un, uh, uw) {
        return Err(SemanticsError::ShapeMismatch(format!(
            "activations {:?} vs memberships {:?}",
            a.tensor.shape(),
            u.tensor.shape()
        )));
    }
    let mut acc = vec![0.0f64; k * c];
    let mut sq = vec![0.0f64; h * w];
    for s in 0..n {
        for ch in 0..c {
            for (q, &v) in sq.iter_mut().zip(a.tensor.plane(s, ch)) {
                *q = v as f64 * v as f64;
            }
            for cl in 0..k {
                let up = u.tensor.plane(s, cl);
                acc[cl * c + ch] += sq.iter().zip(up).map(|(q, &m)| q * m as f64).sum::<f64>();
            }
        }
    }
    let denom = (n * h * w) as f64;
    Ok(AttributionMatrix {
        layer_id: a.layer_id,
        k,
        c,
        m: acc.iter().map(|v| (v / denom) as f32).collect(),
    })
}

/// Attribution at every captured layer with respect to the base-layer clusters.
/// Memberships are bilinearly resampled to each layer; captures are standardized
/// unless they already are.
pub fn attribution_all_layers(
    captures: &BTreeMap<usize, ActivationTensor>,
    u_base: &MembershipTensor,
) -> Result<BTreeMap<usize, AttributionMatrix>> {
    captures
        .iter()
        .map(|(&layer, a)| {
            let a = if a.standardized { a.clone() } else { standardize(a) };
            let u = resample_membership(u_base, a.tensor.h(), a.tensor.w());
            Ok((layer, channel_attribution(&a, &u)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub id: usize,
    pub label: String,
    pub merged_into: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub id: usize,
    pub label: String,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Clustering seed.
    pub seed: u64,
    pub sample_count: usize,
    pub generator_seed: u64,
}

/// Persisted clustering outcome with human labels and part merges.
///
/// Attributions are kept per cluster; part rows are derived as the clamped
/// sum of their member rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCatalog {
    pub base_layer_id: usize,
    pub k: usize,
    pub centroids: CentroidMatrix,
    pub clusters: Vec<ClusterEntry>,
    pub parts: Vec<Part>,
    pub attributions: BTreeMap<usize, AttributionMatrix>,
    /// Base-layer memberships of the catalog samples.
    pub membership: MembershipTensor,
    /// Standardization of the base layer, reused when assigning new images.
    pub base_stats: ChannelStats,
    pub provenance: Provenance,
}

fn f32_stats(s: ChannelStats) -> ChannelStats {
    let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
    ChannelStats {
        mean: round(s.mean),
        std: round(s.std),
    }
}

impl SemanticCatalog {
    /// Cluster the base layer and attribute every captured layer.
    pub fn build(
        captures: &BTreeMap<usize, ActivationTensor>,
        base_layer_id: usize,
        opts: KMeansOptions,
        provenance: Provenance,
    ) -> Result<Self> {
        let base = captures
            .get(&base_layer_id)
            .ok_or(SemanticsError::MissingLayerAttribution(base_layer_id))?;
        let base_stats = f32_stats(ChannelStats::of(&base.tensor));
        let standardized = ActivationTensor {
            tensor: base_stats.apply(&base.tensor)?,
            layer_id: base_layer_id,
            standardized: true,
            dead_channels: base_stats.dead_channels(),
        };
        let fit = spherical_kmeans(&standardized, opts)?;
        let attributions = attribution_all_layers(captures, &fit.membership)?;
        Ok(Self {
            base_layer_id,
            k: opts.k,
            centroids: fit.centroids,
            clusters: (0..opts.k)
                .map(|id| ClusterEntry {
                    id,
                    label: format!("cluster-{id}"),
                    merged_into: None,
                })
                .collect(),
            parts: Vec::new(),
            attributions,
            membership: fit.membership,
            base_stats,
            provenance,
        })
    }

    pub fn part(&self, id: usize) -> Result<&Part> {
        self.parts
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| SemanticsError::UnknownPart(id.to_string()))
    }

    /// Look up a part by numeric id or by label.
    pub fn find_part(&self, key: &str) -> Result<&Part> {
        if let Some(p) = self.parts.iter().find(|p| p.label == key) {
            return Ok(p);
        }
        key.parse::<usize>()
            .ok()
            .and_then(|id| self.parts.iter().find(|p| p.id == id))
            .ok_or_else(|| SemanticsError::UnknownPart(key.to_string()))
    }

    pub fn set_label(&self, cluster_id: usize, label: &str) -> Result<Self> {
        let mut next = self.clone();
        let entry = next
            .clusters
            .iter_mut()
            .find(|c| c.id == cluster_id)
            .ok_or(SemanticsError::UnknownCluster(cluster_id))?;
        entry.label = label.to_string();
        Ok(next)
    }

    /// Group unassigned clusters into a new part.
    pub fn merge_clusters(&self, cluster_ids: &[usize], label: &str) -> Result<Self> {
        if cluster_ids.is_empty() {
            return Err(SemanticsError::EmptyMerge);
        }
        let mut members: Vec<usize> = cluster_ids.to_vec();
        members.sort_unstable();
        members.dedup();
        for &id in &members {
            let entry = self
                .clusters
                .iter()
                .find(|c| c.id == id)
                .ok_or(SemanticsError::UnknownCluster(id))?;
            if entry.merged_into.is_some() {
                return Err(SemanticsError::AlreadyAssigned(id));
            }
        }
        let mut next = self.clone();
        let part_id = next.parts.iter().map(|p| p.id + 1).max().unwrap_or(0);
        for c in next.clusters.iter_mut().filter(|c| members.contains(&c.id)) {
            c.merged_into = Some(part_id);
        }
        next.parts.push(Part {
            id: part_id,
            label: label.to_string(),
            members,
        });
        Ok(next)
    }

    /// One single-cluster part per cluster that is not yet assigned,
    /// labelled `cluster-{id}-part`.
    pub fn with_singleton_parts(&self) -> Self {
        let mut next = self.clone();
        for id in 0..self.k {
            if next.clusters[id].merged_into.is_none() {
                next = next
                    .merge_clusters(&[id], &format!("cluster-{id}-part"))
                    .expect("unassigned cluster");
            }
        }
        next
    }

    /// Part row at `layer`: elementwise sum of member cluster rows, clamped to `[0, 1]`.
    pub fn part_attribution(&self, part_id: usize, layer: usize) -> Result<Vec<f32>> {
        let part = self.part(part_id)?;
        let m = self
            .attributions
            .get(&layer)
            .ok_or(SemanticsError::MissingLayerAttribution(layer))?;
        let mut row = vec![0.0f32; m.c];
        for &k in &part.members {
            for (r, v) in row.iter_mut().zip(m.row(k)) {
                *r += v;
            }
        }
        row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(row)
    }

    /// Part-level attribution matrix at `layer`, one row per part in catalog order.
    pub fn part_attributions(&self, layer: usize) -> Result<AttributionMatrix> {
        let c = self
            .attributions
            .get(&layer)
            .ok_or(SemanticsError::MissingLayerAttribution(layer))?
            .c;
        let mut m = Vec::with_capacity(self.parts.len() * c);
        for p in &self.parts {
            m.extend(self.part_attribution(p.id, layer)?);
        }
        Ok(AttributionMatrix {
            layer_id: layer,
            k: self.parts.len(),
            c,
            m,
        })
    }

    /// Union of the member masks of a part, `n × 1 × h × w`.
    pub fn part_mask(&self, part_id: usize) -> Result<Tensor4> {
        let part = self.part(part_id)?;
        let [n, _, h, w] = self.membership.tensor.shape();
        let mut data = vec![0.0f32; n * h * w];
        for s in 0..n {
            for &k in &part.members {
                for (d, v) in data[s * h * w..(s + 1) * h * w]
                    .iter_mut()
                    .zip(self.membership.tensor.plane(s, k))
                {
                    *d += v;
                }
            }
        }
        Ok(Tensor4::new([n, 1, h, w], data)?)
    }

    /// Hard memberships for new images from their raw base-layer capture.
    pub fn membership_for(&self, base_capture: &ActivationTensor) -> Result<MembershipTensor> {
        if base_capture.layer_id != self.base_layer_id {
            return Err(SemanticsError::ShapeMismatch(format!(
                "capture from layer {} but the catalog clusters layer {}",
                base_capture.layer_id, self.base_layer_id
            )));
        }
        let [n, c, h, w] = base_capture.tensor.shape();
        if c != self.centroids.c {
            return Err(SemanticsError::ShapeMismatch(format!(
                "{c} channels, centroids have {}",
                self.centroids.c
            )));
        }
        let t = self.base_stats.apply(&base_capture.tensor)?;
        let assign = assign_rows(&patch_embeddings(&t), &self.centroids);
        Ok(MembershipTensor::from_assignments(&assign, n, self.k, h, w))
    }

    fn to_arrays(&self) -> BTreeMap<String, Array> {
        let mut arrays = BTreeMap::new();
        let vec = |v: &[f64]| Array::new(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("finite stats");
        arrays.insert(
            "centroids".to_string(),
            Array::new(vec![self.centroids.k, self.centroids.c], self.centroids.v.clone()).expect("finite centroids"),
        );
        arrays.insert("membership".to_string(), self.membership.tensor.clone().into());
        arrays.insert("base_mean".to_string(), vec(&self.base_stats.mean));
        arrays.insert("base_std".to_string(), vec(&self.base_stats.std));
        for (l, m) in &self.attributions {
            arrays.insert(format!("attr_l{l}"), m.to_array());
        }
        arrays
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    base_layer_id: usize,
    k: usize,
    clusters: Vec<ClusterEntry>,
    parts: Vec<Part>,
    provenance: Provenance,
    attributions: Vec<usize>,
    arrays: String,
    arrays_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `manifest.json` and `arrays.npz` into `dir`, returning the manifest's SHA-256.
pub fn save_catalog(catalog: &SemanticCatalog, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let archive = ndio::write_archive(&catalog.to_arrays());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        base_layer_id: catalog.base_layer_id,
        k: catalog.k,
        clusters: catalog.clusters.clone(),
        parts: catalog.parts.clone(),
        provenance: catalog.provenance,
        attributions: catalog.attributions.keys().copied().collect(),
        arrays: ARRAYS.to_string(),
        arrays_sha256: sha256_hex(&archive),
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    // archive first, so a reader never sees a manifest pointing at stale arrays
    write_atomic(&dir.join(ARRAYS), &archive)?;
    write_atomic(&dir.join(MANIFEST), &text)?;
    Ok(sha256_hex(&text))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn manifest_digest(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(dir.join(MANIFEST))?))
}

pub fn load_catalog(dir: &Path) -> Result<SemanticCatalog> {
    let text = fs::read(dir.join(MANIFEST))?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(SemanticsError::SchemaVersionMismatch(format!(
            "expected schema_version {SCHEMA_VERSION}, found {version:?}"
        )));
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| SemanticsError::SchemaVersionMismatch(e.to_string()))?;

    let arrays = ndio::read_archive(&fs::read(dir.join(&manifest.arrays))?)?;
    let take = |name: &str| {
        arrays
            .get(name)
            .cloned()
            .ok_or_else(|| SemanticsError::SchemaVersionMismatch(format!("archive lacks {name:?}")))
    };

    let centroids = take("centroids")?;
    if centroids.shape() != [manifest.k, centroids.shape().get(1).copied().unwrap_or(0)] {
        return Err(SemanticsError::SchemaVersionMismatch(format!(
            "centroids shape {:?} does not match k = {}",
            centroids.shape(),
            manifest.k
        )));
    }
    let c = centroids.shape()[1];
    let membership: Tensor4 = take("membership")?.try_into()?;
    let stats = ChannelStats {
        mean: take("base_mean")?.data().iter().map(|&v| v as f64).collect(),
        std: take("base_std")?.data().iter().map(|&v| v as f64).collect(),
    };
    let mut attributions = BTreeMap::new();
    for &l in &manifest.attributions {
        let a = take(&format!("attr_l{l}"))?;
        let &[k, ch] = a.shape() else {
            return Err(SemanticsError::SchemaVersionMismatch(format!(
                "attr_l{l} must be two-dimensional"
            )));
        };
        attributions.insert(
            l,
            AttributionMatrix {
                layer_id: l,
                k,
                c: ch,
                m: a.into_data(),
            },
        );
    }

    Ok(SemanticCatalog {
        base_layer_id: manifest.base_layer_id,
        k: manifest.k,
        centroids: CentroidMatrix {
            k: manifest.k,
            c,
            v: centroids.into_data(),
        },
        clusters: manifest.clusters,
        parts: manifest.parts,
        attributions,
        membership: MembershipTensor {
            tensor: membership,
            hard: true,
        },
        base_stats: stats,
        provenance: manifest.provenance,
    })
}
