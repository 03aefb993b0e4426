//! Material catalog: ingestion, synthetic generation, normalization, chunking
//! and nearest-neighbour lookup.
//!
//! Every material is a point `(E, nu, rho)` with E in GPa and rho in g/cm^3. Grids
//! and distances live in the normalized cube `[-1, 1]^3`, obtained with fixed
//! per-dimension bounds so that grids stay comparable across catalogs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::{Distribution, Open01};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed normalization bounds for (E, nu, rho).
pub const BOUNDS: [(f64, f64); 3] = [(0.0, 500.0), (0.0, 0.5), (0.0, 10.0)];

/// Segments per property axis for chunking.
pub const CHUNK_SEGMENTS: usize = 10;

pub const DEFAULT_MAX_RECORDS: usize = 500;

/// Number of nonempty chunks targeted by the synthetic generator.
pub const SYNTHETIC_CHUNKS: usize = 168;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialRecord {
    pub id: u32,
    #[serde(rename = "E")]
    pub e: f64,
    pub nu: f64,
    pub rho: f64,
}

impl MaterialRecord {
    pub fn properties(&self) -> [f64; 3] {
        [self.e, self.nu, self.rho]
    }

    pub fn is_valid(&self) -> bool {
        self.e > 0.0
            && self.e <= BOUNDS[0].1
            && self.nu > 0.0
            && self.nu < BOUNDS[1].1
            && self.rho > 0.0
            && self.rho < BOUNDS[2].1
    }

    pub fn normalized(&self) -> [f64; 3] {
        normalize(self.properties()).value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkIndex(pub u8, pub u8, pub u8);

/// Result of [`normalize`]; `clamped` is set when any input was outside the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    pub value: [f64; 3],
    pub clamped: bool,
}

pub fn normalize(props: [f64; 3]) -> Normalized {
    let mut value = [0.0; 3];
    let mut clamped = false;
    for d in 0..3 {
        let (lo, hi) = BOUNDS[d];
        let v = 2.0 * (props[d] - lo) / (hi - lo) - 1.0;
        if !(-1.0..=1.0).contains(&v) {
            clamped = true;
        }
        value[d] = v.clamp(-1.0, 1.0);
    }
    Normalized { value, clamped }
}

pub fn denormalize(x: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for d in 0..3 {
        out[d] = denormalize_channel(d, x[d]);
    }
    out
}

#[inline]
pub fn denormalize_channel(channel: usize, x: f64) -> f64 {
    let (lo, hi) = BOUNDS[channel];
    lo + (x + 1.0) * 0.5 * (hi - lo)
}

/// d(physical)/d(normalized) for a channel of the affine map.
#[inline]
pub fn denormalize_slope(channel: usize) -> f64 {
    let (lo, hi) = BOUNDS[channel];
    0.5 * (hi - lo)
}

pub fn chunk_index(props: [f64; 3]) -> ChunkIndex {
    let seg = |d: usize| {
        let (lo, hi) = BOUNDS[d];
        let s = (CHUNK_SEGMENTS as f64 * (props[d] - lo) / (hi - lo)).floor();
        s.clamp(0.0, (CHUNK_SEGMENTS - 1) as f64) as u8
    };
    ChunkIndex(seg(0), seg(1), seg(2))
}

/// Immutable set of available materials, sorted by id.
#[derive(Debug, Clone)]
pub struct Catalog {
    records: Vec<MaterialRecord>,
    normalized: Vec<[f64; 3]>,
    chunks: BTreeMap<ChunkIndex, Vec<usize>>,
}

impl Catalog {
    pub fn new(records: Vec<MaterialRecord>) -> Result<Self> {
        Self::with_limit(records, DEFAULT_MAX_RECORDS)
    }

    pub fn with_limit(mut records: Vec<MaterialRecord>, max_records: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let bad: Vec<u32> = records.iter().filter(|r| !r.is_valid()).map(|r| r.id).collect();
        if !bad.is_empty() {
            return Err(Error::Validation {
                ids: bad,
                reason: "properties outside 0<E<=500, 0<nu<0.5, 0<rho<10".into(),
            });
        }
        records.sort_by_key(|r| r.id);
        let dup: Vec<u32> = records
            .windows(2)
            .filter(|w| w[0].id == w[1].id)
            .map(|w| w[0].id)
            .collect();
        if !dup.is_empty() {
            return Err(Error::Validation {
                ids: dup,
                reason: "duplicate ids".into(),
            });
        }
        if records.len() > max_records {
            return Err(Error::Validation {
                ids: vec![],
                reason: format!("{} records exceed the limit of {max_records}", records.len()),
            });
        }
        let normalized = records.iter().map(|r| r.normalized()).collect();
        let mut chunks: BTreeMap<ChunkIndex, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            chunks.entry(chunk_index(r.properties())).or_default().push(i);
        }
        Ok(Catalog {
            records,
            normalized,
            chunks,
        })
    }

    pub fn records(&self) -> &[MaterialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn nonempty_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunks(&self) -> impl Iterator<Item = (&ChunkIndex, usize)> {
        self.chunks.iter().map(|(k, v)| (k, v.len()))
    }

    pub fn get(&self, id: u32) -> Option<&MaterialRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Two-stage draw: a nonempty chunk uniformly, then a material uniformly inside it.
    pub fn sample_material<R: Rng + ?Sized>(&self, rng: &mut R) -> MaterialRecord {
        let c = rng.random_range(0..self.chunks.len());
        let members = self.chunks.values().nth(c).expect("chunk index in range");
        let m = rng.random_range(0..members.len());
        self.records[members[m]]
    }

    /// Euclidean nearest neighbour in normalized space; ties go to the lowest id.
    pub fn nearest_material(&self, point: [f64; 3]) -> (MaterialRecord, f64) {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (i, p) in self.normalized.iter().enumerate() {
            let d2 = (p[0] - point[0]).powi(2) + (p[1] - point[1]).powi(2) + (p[2] - point[2]).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        (self.records[best], best_d2.sqrt())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Read a catalog CSV with header `id,E,nu,rho`.
pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedFile {
            path: path.into(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let expected = ["id", "E", "nu", "rho"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::MalformedFile {
            path: path.into(),
            line: 1,
            message: format!("expected header id,E,nu,rho, found {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut records = Vec::new();
    for row in reader.deserialize::<MaterialRecord>() {
        let rec = row.map_err(|e| Error::MalformedFile {
            path: path.into(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Catalog::new(records)
}

/// Deterministic synthetic catalog that mimics the chunk structure of a curated
/// materials database: about 168 nonempty chunks, availability skewed toward low
/// stiffness, and a common per-chunk cap so that the total equals `n`.
pub fn generate_synthetic_catalog(seed: u64, n: usize) -> Result<Catalog> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic catalog needs at least 2 materials, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_chunks = SYNTHETIC_CHUNKS.min(n);

    // Weighted sampling without replacement (exponential keys), favouring low E.
    let mut keyed: Vec<(f64, ChunkIndex)> = Vec::with_capacity(1000);
    for i in 0..CHUNK_SEGMENTS as u8 {
        for j in 0..CHUNK_SEGMENTS as u8 {
            for k in 0..CHUNK_SEGMENTS as u8 {
                let w = 1.0 / (1.0 + i as f64);
                let u: f64 = Open01.sample(&mut rng);
                keyed.push((u.ln() / w, ChunkIndex(i, j, k)));
            }
        }
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut selected: Vec<ChunkIndex> = keyed[..n_chunks].iter().map(|k| k.1).collect();
    selected.sort();

    // Raw availability per chunk, heavy-tailed and larger for soft materials.
    let mut avail: Vec<usize> = selected
        .iter()
        .map(|c| {
            let mu = 2.5 - 0.25 * c.0 as f64;
            let z: f64 = Normal::new(mu, 1.2).expect("valid normal").sample(&mut rng);
            1 + z.exp().floor().min(1e6) as usize
        })
        .collect();
    let total: usize = avail.iter().sum();
    if total < n {
        let scale = n.div_ceil(total);
        avail.iter_mut().for_each(|a| *a *= scale);
    }

    // Largest common cap whose capped total does not exceed n, then top up.
    let capped = |cap: usize| avail.iter().map(|&a| a.min(cap)).sum::<usize>();
    let mut cap = 1;
    while capped(cap + 1) <= n {
        cap += 1;
    }
    let mut counts: Vec<usize> = avail.iter().map(|&a| a.min(cap)).collect();
    let mut deficit = n - counts.iter().sum::<usize>();
    let mut open: Vec<usize> = (0..counts.len()).filter(|&i| avail[i] > cap).collect();
    while deficit > 0 && !open.is_empty() {
        let pick = rng.random_range(0..open.len());
        counts[open.swap_remove(pick)] += 1;
        deficit -= 1;
    }

    let mut records = Vec::with_capacity(n);
    for (chunk, &count) in selected.iter().zip(&counts) {
        for _ in 0..count {
            let props = loop {
                let mut p = [0.0; 3];
                for (d, seg) in [chunk.0, chunk.1, chunk.2].into_iter().enumerate() {
                    let (lo, hi) = BOUNDS[d];
                    let w = (hi - lo) / CHUNK_SEGMENTS as f64;
                    let u: f64 = Open01.sample(&mut rng);
                    p[d] = lo + (seg as f64 + u) * w;
                }
                if chunk_index(p) == *chunk {
                    break p;
                }
            };
            records.push(MaterialRecord {
                id: records.len() as u32 + 1,
                e: props[0],
                nu: props[1],
                rho: props[2],
            });
        }
    }
    Catalog::with_limit(records, n.max(DEFAULT_MAX_RECORDS))
}
