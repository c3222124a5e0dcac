//! Labelled datasets: seeded Gaussian blobs, stratified i.i.d. sharding
//! across participants, leave-one-class-out splits and a CSV loader.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File { path: PathBuf },
    Derived { from: Box<Provenance>, note: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("features must be finite".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order, keeping the class count.
    pub fn subset(&self, indices: &[usize], note: &str) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            dim: self.dim,
            labels,
            class_count: self.class_count,
            provenance: Provenance::Derived {
                from: Box::new(self.provenance.clone()),
                note: note.to_string(),
            },
        }
    }

    /// Rows at `indices` as a contiguous (features, labels) pair.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

/// `c` isotropic unit-variance Gaussian blobs in `d` dimensions with `n`
/// balanced instances in shuffled order. Blob means are drawn at random and
/// then spread out until every pair is at least `separation` apart.
pub fn synth_blobs(c: usize, d: usize, n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if c < 2 || d == 0 {
        return Err(Error::Config(format!(
            "blobs need c >= 2 and d >= 1, got c={c}, d={d}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let mut rng = seed::rng(seed, &[seed::DATA]);
    let mut means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut closest = f64::INFINITY;
    for a in 0..c {
        for b in a + 1..c {
            let dist = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(dist);
        }
    }
    if closest < separation {
        // Scaling about the origin multiplies every pairwise distance alike.
        let scale = separation / closest.max(f64::MIN_POSITIVE) * (1.0 + 1e-12);
        for m in &mut means {
            for v in m.iter_mut() {
                *v *= scale;
            }
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        for mean in &means[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(mean + noise);
        }
    }
    Dataset::new(features, d, labels, c, Provenance::Synthetic { seed })
}

/// Splits a random subset of `ds` into disjoint shards of the requested
/// sizes. Within each class the rows are shuffled, then all rows are laid
/// out by their relative position inside their class so that every
/// contiguous window mirrors the global class mix; shards are consecutive
/// windows of that order, shuffled internally.
pub fn partition_iid(ds: &Dataset, counts: &[usize], seed: u64) -> Result<Vec<Dataset>> {
    let requested: usize = counts.iter().sum();
    if requested > ds.len() {
        return Err(Error::InsufficientData {
            requested,
            available: ds.len(),
        });
    }
    let mut rng = seed::rng(seed, &[seed::PARTITION]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut class_order: Vec<usize> = (0..ds.class_count()).collect();
    class_order.shuffle(&mut rng);
    let mut keyed = Vec::with_capacity(ds.len());
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let len = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / len, class_order[ds.labels()[i]], i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut shards = Vec::with_capacity(counts.len());
    let mut at = 0;
    for (s, &count) in counts.iter().enumerate() {
        let mut indices: Vec<usize> = keyed[at..at + count].iter().map(|k| k.2).collect();
        indices.shuffle(&mut rng);
        shards.push(ds.subset(&indices, &format!("shard {s}")));
        at += count;
    }
    Ok(shards)
}

/// Class with the most instances (smallest id on ties).
pub fn most_frequent_class(ds: &Dataset) -> Option<usize> {
    let counts = ds.class_counts();
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (*best.1 > 0).then_some(best.0)
}

/// Training set without `class_id` (default: the most frequent class) and
/// the untouched dataset for testing.
///
/// A model trained on the reduced set may still predict the dropped label,
/// since its output layer keeps all `c` classes.
pub fn leave_one_out(ds: &Dataset, class_id: Option<usize>) -> Result<(Dataset, Dataset)> {
    let class_id = match class_id {
        Some(c) => c,
        None => most_frequent_class(ds).ok_or(Error::InvalidClass(0))?,
    };
    if class_id >= ds.class_count() || !ds.labels().contains(&class_id) {
        return Err(Error::InvalidClass(class_id));
    }
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels()[i] != class_id)
        .collect();
    Ok((
        ds.subset(&keep, &format!("without class {class_id}")),
        ds.clone(),
    ))
}

/// Loads a CSV with a header row, a `label` column and one column per
/// feature. The class count is one more than the largest label unless
/// given.
pub fn load_dataset_csv(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::malformed(path, e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::malformed(path, "missing `label` column"))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::malformed(path, "no feature columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::malformed(path, e.to_string()))?;
        let bad = |what: &str| Error::malformed(path, format!("row {}: {what}", line + 2));
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                labels.push(
                    field
                        .parse::<usize>()
                        .map_err(|_| bad("label is not a class index"))?,
                );
            } else {
                let v = field
                    .parse::<f64>()
                    .map_err(|_| bad("feature is not a number"))?;
                if !v.is_finite() {
                    return Err(bad("feature is not finite"));
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::malformed(path, "no rows"));
    }
    let c = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        features,
        dim,
        labels,
        c.max(2),
        Provenance::File {
            path: path.to_path_buf(),
        },
    )
    .map_err(|e| Error::malformed(path, e.to_string()))
}
