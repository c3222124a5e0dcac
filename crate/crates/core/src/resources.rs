//! Participant resource descriptions, min-max normalization and the
//! weighted similarity used for clustering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A participant's raw resources: processing speed (GHz), upload rate
/// (Mbps) and available memory (GB).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceVector {
    pub processing_speed: f64,
    pub transmission_rate: f64,
    pub memory: f64,
}

impl ResourceVector {
    pub fn new(processing_speed: f64, transmission_rate: f64, memory: f64) -> Result<Self> {
        for (name, value) in [
            ("processing_speed", processing_speed),
            ("transmission_rate", transmission_rate),
            ("memory", memory),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidResource(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        Ok(Self {
            processing_speed,
            transmission_rate,
            memory,
        })
    }

    fn components(&self) -> [f64; 3] {
        [self.processing_speed, self.transmission_rate, self.memory]
    }
}

/// Min-max scaled resources, each component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedResourceVector {
    pub s_bar: f64,
    pub r_bar: f64,
    pub a_bar: f64,
}

impl NormalizedResourceVector {
    pub fn new(s_bar: f64, r_bar: f64, a_bar: f64) -> Result<Self> {
        for value in [s_bar, r_bar, a_bar] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidResource(format!(
                    "normalized component {value} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            s_bar,
            r_bar,
            a_bar,
        })
    }

    pub fn components(&self) -> [f64; 3] {
        [self.s_bar, self.r_bar, self.a_bar]
    }

    fn from_components(c: [f64; 3]) -> Self {
        Self {
            s_bar: c[0],
            r_bar: c[1],
            a_bar: c[2],
        }
    }

    /// Weighted sum of the components; used to rank participants and
    /// clusters by how much capacity they have overall.
    pub fn capacity_score(&self, w: &ResourceWeights) -> f64 {
        let l = w.as_array();
        l[0] * self.s_bar + l[1] * self.r_bar + l[2] * self.a_bar
    }
}

/// Relative contributions of processing speed, rate and memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceWeights {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
}

impl ResourceWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let all = [lambda1, lambda2, lambda3];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidWeights(format!(
                "weights must be nonnegative and finite, got {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(Self {
            lambda1,
            lambda2,
            lambda3,
        })
    }

    pub fn equal() -> Self {
        Self {
            lambda1: 1.0 / 3.0,
            lambda2: 1.0 / 3.0,
            lambda3: 1.0 / 3.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }
}

/// Scales every component to `[0, 1]` over the population.
///
/// A component that is constant across the population carries no
/// information for clustering and maps to 0 for everyone.
pub fn normalize_resources(vectors: &[ResourceVector]) -> Result<Vec<NormalizedResourceVector>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidPopulation(format!(
            "need at least 2 participants to normalize, got {}",
            vectors.len()
        )));
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for v in vectors {
        for (c, value) in v.components().into_iter().enumerate() {
            min[c] = min[c].min(value);
            max[c] = max[c].max(value);
        }
    }
    Ok(vectors
        .iter()
        .map(|v| {
            let raw = v.components();
            let mut out = [0.0; 3];
            for c in 0..3 {
                let span = max[c] - min[c];
                if span > 0.0 {
                    out[c] = ((raw[c] - min[c]) / span).clamp(0.0, 1.0);
                }
            }
            NormalizedResourceVector::from_components(out)
        })
        .collect())
}

/// Weighted Euclidean distance between two normalized resource vectors.
pub fn similarity(
    a: &NormalizedResourceVector,
    b: &NormalizedResourceVector,
    w: &ResourceWeights,
) -> f64 {
    weighted_sq_distance(&a.components(), &b.components(), w).sqrt()
}

pub(crate) fn weighted_sq_distance(a: &[f64; 3], b: &[f64; 3], w: &ResourceWeights) -> f64 {
    let l = w.as_array();
    (0..3).map(|c| l[c] * (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Symmetric matrix of pairwise similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_points(points: &[NormalizedResourceVector], w: &ResourceWeights) -> Self {
        let n = points.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = similarity(&points[i], &points[j], w);
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self { n, values }
    }

    /// Builds a matrix from explicit rows. Rows must form a square,
    /// symmetric, nonnegative matrix with a zero diagonal.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "distance matrix row has {} entries, expected {n}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        for i in 0..n {
            for j in 0..n {
                let d = values[i * n + j];
                if !(d.is_finite() && d >= 0.0) || d != values[j * n + i] || (i == j && d != 0.0) {
                    return Err(Error::Shape(format!(
                        "distance matrix entry ({i},{j}) = {d} breaks symmetry or nonnegativity"
                    )));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Multiplies every distance by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A participant entry of a resource population file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRecord {
    pub id: String,
    pub resources: ResourceVector,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    speed_ghz: f64,
    rate_mbps: f64,
    memory_gb: f64,
}

/// Loads a population from CSV with header `id,speed_ghz,rate_mbps,memory_gb`.
pub fn load_population_csv(path: impl AsRef<Path>) -> Result<Vec<ResourceRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_population_csv(file).map_err(|e| match e {
        Error::Csv(err) => Error::malformed(path, err.to_string()),
        Error::InvalidResource(reason) => Error::malformed(path, reason),
        other => other,
    })
}

pub fn read_population_csv(reader: impl std::io::Read) -> Result<Vec<ResourceRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "speed_ghz", "rate_mbps", "memory_gb"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidResource(format!(
            "expected header {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row?;
        out.push(ResourceRecord {
            resources: ResourceVector::new(row.speed_ghz, row.rate_mbps, row.memory_gb)?,
            id: row.id,
        });
    }
    Ok(out)
}

pub fn write_population_csv(records: &[ResourceRecord], writer: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "speed_ghz", "rate_mbps", "memory_gb"])?;
    for r in records {
        wtr.write_record([
            r.id.clone(),
            r.resources.processing_speed.to_string(),
            r.resources.transmission_rate.to_string(),
            r.resources.memory.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rv(s: f64, r: f64, a: f64) -> ResourceVector {
        ResourceVector::new(s, r, a).unwrap()
    }

    #[test]
    fn rejects_non_positive_resources() {
        assert!(ResourceVector::new(0.0, 1.0, 1.0).is_err());
        assert!(ResourceVector::new(1.0, f64::NAN, 1.0).is_err());
        assert!(ResourceVector::new(1.0, 1.0, -2.0).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(ResourceWeights::new(0.4, 0.4, 0.2).is_ok());
        assert!(ResourceWeights::new(0.5, 0.4, 0.2).is_err());
        assert!(ResourceWeights::new(1.2, -0.1, -0.1).is_err());
    }

    #[test]
    fn normalize_needs_two_vectors() {
        assert!(matches!(
            normalize_resources(&[rv(1.0, 1.0, 1.0)]),
            Err(Error::InvalidPopulation(_))
        ));
    }

    #[test]
    fn constant_component_maps_to_zero() {
        let pop = [
            rv(100.0, 1.0, 2.0),
            rv(100.0, 3.0, 4.0),
            rv(100.0, 2.0, 8.0),
        ];
        let out = normalize_resources(&pop).unwrap();
        assert!(out.iter().all(|v| v.s_bar == 0.0));
        assert_eq!(out[1].r_bar, 1.0);
        assert_eq!(out[0].a_bar, 0.0);
    }

    #[test]
    fn similarity_examples() {
        let v5 = NormalizedResourceVector::new(1.0, 0.0, 0.0).unwrap();
        let v2 = NormalizedResourceVector::new(0.0, 1.0, 1.0).unwrap();
        let eq = ResourceWeights::equal();
        assert_eq!(similarity(&v5, &v5, &eq), 0.0);
        assert!((similarity(&v5, &v2, &eq) - 1.0).abs() < 1e-12);

        let speed_only = ResourceWeights::new(1.0, 0.0, 0.0).unwrap();
        let a = NormalizedResourceVector::new(0.2, 0.9, 0.1).unwrap();
        let b = NormalizedResourceVector::new(0.7, 0.0, 0.5).unwrap();
        assert!((similarity(&a, &b, &speed_only) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let records = vec![
            ResourceRecord {
                id: "p1".into(),
                resources: rv(1.6, 10.88, 8.0),
            },
            ResourceRecord {
                id: "p2".into(),
                resources: rv(2.8, 4.1, 3.0),
            },
        ];
        let mut buf = Vec::new();
        write_population_csv(&records, &mut buf).unwrap();
        assert_eq!(read_population_csv(buf.as_slice()).unwrap(), records);

        let bad = "id,speed,rate,memory\np1,1,1,1\n";
        assert!(read_population_csv(bad.as_bytes()).is_err());
    }

    fn unit() -> impl Strategy<Value = NormalizedResourceVector> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(s, r, a)| NormalizedResourceVector::new(s, r, a).unwrap())
    }

    fn positive_weights() -> impl Strategy<Value = ResourceWeights> {
        (0.01..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(a, b, c)| {
            let t = a + b + c;
            ResourceWeights::new(a / t, b / t, 1.0 - a / t - b / t).unwrap()
        })
    }

    proptest! {
        #[test]
        fn similarity_is_a_metric(a in unit(), b in unit(), c in unit(), w in positive_weights()) {
            let ab = similarity(&a, &b, &w);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, similarity(&b, &a, &w));
            prop_assert!(ab <= similarity(&a, &c, &w) + similarity(&c, &b, &w) + 1e-12);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn normalization_is_idempotent_on_normalized_populations(
            raw in prop::collection::vec((0.1..10.0f64, 0.1..10.0f64, 0.1..10.0f64), 2..20)
        ) {
            let pop: Vec<_> = raw.iter().map(|&(s, r, a)| rv(s, r, a)).collect();
            let once = normalize_resources(&pop).unwrap();
            // Re-normalizing needs strictly positive inputs; shift by one,
            // which min-max scaling ignores.
            let shifted: Vec<_> = once
                .iter()
                .map(|v| rv(v.s_bar + 1.0, v.r_bar + 1.0, v.a_bar + 1.0))
                .collect();
            let twice = normalize_resources(&shifted).unwrap();
            for (x, y) in once.iter().zip(&twice) {
                for (p, q) in x.components().iter().zip(y.components()) {
                    prop_assert!((p - q).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(p));
                }
            }
        }
    }
}
