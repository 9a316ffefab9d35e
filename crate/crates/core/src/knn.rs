//! Nearest-neighbor indices over one layer's representations.
//!
//! Exact mode is a brute-force scan with ties broken by the smaller point
//! index. Approximate mode builds a k-NN graph with NN-descent and answers
//! queries by best-first beam search; the beam width is widened at build time
//! until an audit against brute force meets the configured recall.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, squared_euclidean, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => squared_euclidean(a, b).sqrt(),
            Metric::Cosine => {
                let denom = norm(a) * norm(b);
                if denom == 0.0 {
                    return 1.0;
                }
                (1.0 - dot(a, b) / denom).clamp(0.0, 2.0)
            }
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

/// Requested search exactness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SearchMode {
    Exact,
    Approximate { recall_target: f64 },
    /// Exact below [`AUTO_EXACT_LIMIT`] points, approximate (recall 0.95) above.
    #[default]
    Auto,
}

pub const AUTO_EXACT_LIMIT: usize = 5000;

/// `k = ceil(n^0.4)`.
pub fn default_k(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("default_k needs at least one sample"));
    }
    Ok(((n as f64).powf(0.4).ceil() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Neighbor class histogram; sums to the neighbor count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts(pub Vec<usize>);

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

pub fn class_counts(nb: &NeighborList, labels: &[usize], num_classes: usize) -> Result<ClassCounts> {
    let mut counts = vec![0usize; num_classes];
    for &i in &nb.indices {
        let l = *labels
            .get(i)
            .ok_or_else(|| Error::invalid(format!("neighbor index {i} has no label")))?;
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                sample: i,
                label: l,
                num_classes,
            });
        }
        counts[l] += 1;
    }
    Ok(ClassCounts(counts))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Graph {
    neighbors: Vec<Vec<usize>>,
    entry_points: Vec<usize>,
    ef: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    metric: Metric,
    points: Matrix,
    // Unit-normalized copies for cosine; empty under euclidean.
    unit: Vec<f64>,
    graph: Option<Graph>,
    recall_target: f64,
}

impl KnnIndex {
    pub fn build(points: Matrix, metric: Metric, mode: SearchMode) -> Result<Self> {
        Self::build_seeded(points, metric, mode, 0x5eed)
    }

    pub fn build_seeded(points: Matrix, metric: Metric, mode: SearchMode, seed: u64) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::Empty("point set"));
        }
        let unit = match metric {
            Metric::Euclidean => Vec::new(),
            Metric::Cosine => normalize_rows(&points)?,
        };
        let mut index = KnnIndex {
            metric,
            points,
            unit,
            graph: None,
            recall_target: 1.0,
        };
        let recall_target = match mode {
            SearchMode::Exact => None,
            SearchMode::Approximate { recall_target } => Some(recall_target),
            SearchMode::Auto if index.len() < AUTO_EXACT_LIMIT => None,
            SearchMode::Auto => Some(0.95),
        };
        if let Some(target) = recall_target {
            if !(0.0..=1.0).contains(&target) {
                return Err(Error::invalid(format!("recall target {target} outside [0, 1]")));
            }
            index.recall_target = target;
            index.build_graph(seed);
            index.tune_beam(target, seed);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn is_exact(&self) -> bool {
        self.graph.is_none()
    }

    /// The `k` nearest points to `x`. With `exclude_self`, one stored point
    /// identical to `x` (distance 0) is left out.
    pub fn query(&self, x: &[f64], k: usize, exclude_self: bool) -> Result<NeighborList> {
        if !exclude_self {
            return self.query_excluding(x, k, None);
        }
        let probe = self.query_excluding(x, (k + 1).min(self.len()), None)?;
        let self_pos = probe
            .indices
            .iter()
            .zip(&probe.distances)
            .position(|(&i, &d)| d == 0.0 && self.points.row(i) == x);
        match self_pos {
            Some(pos) => {
                if k > self.len() - 1 {
                    return Err(Error::KTooLarge {
                        k,
                        available: self.len() - 1,
                    });
                }
                let mut nb = probe;
                nb.indices.remove(pos);
                nb.distances.remove(pos);
                nb.indices.truncate(k);
                nb.distances.truncate(k);
                Ok(nb)
            }
            None => self.query_excluding(x, k, None),
        }
    }

    /// The `k` nearest points to `x`, never returning the point at index
    /// `exclude`.
    pub fn query_excluding(&self, x: &[f64], k: usize, exclude: Option<usize>) -> Result<NeighborList> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "query vector".into(),
                expected: self.dim(),
                found: x.len(),
            });
        }
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::KTooLarge { k, available });
        }
        if k == 0 {
            return Ok(NeighborList {
                indices: vec![],
                distances: vec![],
            });
        }
        let query = self.prepare_query(x)?;
        let found = match &self.graph {
            None => self.exact_search(&query, k, exclude),
            Some(g) => self.beam_search(g, &query, k, g.ef.max(k + 1), exclude),
        };
        Ok(NeighborList {
            indices: found.iter().map(|c| c.idx).collect(),
            distances: found.iter().map(|c| c.dist).collect(),
        })
    }

    /// Exact scan over all points, regardless of the index mode.
    pub fn brute_force(&self, x: &[f64], k: usize, exclude: Option<usize>) -> Result<NeighborList> {
        let query = self.prepare_query(x)?;
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::KTooLarge { k, available });
        }
        let found = self.exact_search(&query, k, exclude);
        Ok(NeighborList {
            indices: found.iter().map(|c| c.idx).collect(),
            distances: found.iter().map(|c| c.dist).collect(),
        })
    }

    /// Mean fraction of true `k` nearest neighbors recovered for `queries`.
    pub fn audit_recall(&self, queries: &Matrix, k: usize) -> Result<f64> {
        if queries.rows() == 0 {
            return Ok(1.0);
        }
        let mut total = 0.0;
        for q in queries.iter_rows() {
            let truth: HashSet<usize> = self.brute_force(q, k, None)?.indices.into_iter().collect();
            let got = self.query_excluding(q, k, None)?;
            total += got.indices.iter().filter(|i| truth.contains(i)).count() as f64 / k as f64;
        }
        Ok(total / queries.rows() as f64)
    }

    fn prepare_query(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.metric {
            Metric::Euclidean => Ok(x.to_vec()),
            Metric::Cosine => {
                let n = norm(x);
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::invalid("zero-norm query under cosine distance"));
                }
                Ok(x.iter().map(|v| v / n).collect())
            }
        }
    }

    #[inline]
    fn point_distance(&self, i: usize, query: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => squared_euclidean(self.points.row(i), query).sqrt(),
            Metric::Cosine => {
                let d = self.dim();
                (1.0 - dot(&self.unit[i * d..(i + 1) * d], query)).clamp(0.0, 2.0)
            }
        }
    }

    #[inline]
    fn pair_distance(&self, i: usize, j: usize) -> f64 {
        match self.metric {
            Metric::Euclidean => squared_euclidean(self.points.row(i), self.points.row(j)).sqrt(),
            Metric::Cosine => {
                let d = self.dim();
                (1.0 - dot(&self.unit[i * d..(i + 1) * d], &self.unit[j * d..(j + 1) * d]))
                    .clamp(0.0, 2.0)
            }
        }
    }

    fn exact_search(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = (0..self.len())
            .filter(|&i| Some(i) != exclude)
            .map(|i| Candidate {
                dist: self.point_distance(i, query),
                idx: i,
            })
            .collect();
        if k < all.len() {
            all.select_nth_unstable(k - 1);
            all.truncate(k);
        }
        all.sort_unstable();
        all
    }

    fn beam_search(
        &self,
        graph: &Graph,
        query: &[f64],
        k: usize,
        ef: usize,
        exclude: Option<usize>,
    ) -> Vec<Candidate> {
        let mut visited = vec![false; self.len()];
        let mut frontier: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::new();
        // Max-heap of the best `ef` seen so far.
        let mut best: BinaryHeap<Candidate> = BinaryHeap::new();
        let ef = ef.min(self.len());
        let consider = |c: Candidate, best: &mut BinaryHeap<Candidate>| -> bool {
            if best.len() < ef {
                best.push(c);
                true
            } else if c < *best.peek().expect("non-empty") {
                best.pop();
                best.push(c);
                true
            } else {
                false
            }
        };
        for &e in &graph.entry_points {
            if !visited[e] {
                visited[e] = true;
                let c = Candidate {
                    dist: self.point_distance(e, query),
                    idx: e,
                };
                consider(c, &mut best);
                frontier.push(std::cmp::Reverse(c));
            }
        }
        while let Some(std::cmp::Reverse(cur)) = frontier.pop() {
            if best.len() >= ef && cur > *best.peek().expect("non-empty") {
                break;
            }
            for &nb in &graph.neighbors[cur.idx] {
                if visited[nb] {
                    continue;
                }
                visited[nb] = true;
                let c = Candidate {
                    dist: self.point_distance(nb, query),
                    idx: nb,
                };
                if consider(c, &mut best) {
                    frontier.push(std::cmp::Reverse(c));
                }
            }
        }
        let mut out: Vec<Candidate> = best
            .into_vec()
            .into_iter()
            .filter(|c| Some(c.idx) != exclude)
            .collect();
        out.sort_unstable();
        out.truncate(k);
        out
    }

    fn build_graph(&mut self, seed: u64) {
        let n = self.len();
        let degree = 24.min(n.saturating_sub(1)).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lists = if n <= degree + 1 {
            (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect()
        } else {
            self.nn_descent(degree, &mut rng)
        };
        // Symmetrize so every point is reachable from its neighbors.
        let mut neighbors: Vec<Vec<usize>> = lists.clone();
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if !neighbors[j].contains(&i) && neighbors[j].len() < 2 * degree {
                    neighbors[j].push(i);
                }
            }
        }
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let entry_points = all.into_iter().take(8.min(n)).collect();
        self.graph = Some(Graph {
            neighbors,
            entry_points,
            ef: (2 * degree).min(n),
        });
    }

    fn nn_descent(&self, degree: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let n = self.len();
        // Per node: ascending (dist, idx, is_new), at most `degree` entries.
        let mut heaps: Vec<Vec<(f64, usize, bool)>> = vec![Vec::with_capacity(degree + 1); n];
        let insert = |heap: &mut Vec<(f64, usize, bool)>, d: f64, j: usize| -> bool {
            if heap.iter().any(|e| e.1 == j) {
                return false;
            }
            if heap.len() == degree {
                let worst = heap[degree - 1];
                if (d, j) >= (worst.0, worst.1) {
                    return false;
                }
                heap.pop();
            }
            let pos = heap.partition_point(|e| (e.0, e.1) < (d, j));
            heap.insert(pos, (d, j, true));
            true
        };
        for i in 0..n {
            while heaps[i].len() < degree {
                let j = rng.random_range(0..n);
                if j != i {
                    let d = self.pair_distance(i, j);
                    insert(&mut heaps[i], d, j);
                }
            }
        }
        let sample_size = degree;
        for _ in 0..16 {
            let mut new_lists: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut old_lists: Vec<Vec<usize>> = vec![Vec::new(); n];
            for i in 0..n {
                let mut fresh: Vec<usize> = (0..heaps[i].len()).filter(|&p| heaps[i][p].2).collect();
                fresh.shuffle(rng);
                fresh.truncate(sample_size);
                for &p in &fresh {
                    heaps[i][p].2 = false;
                    new_lists[i].push(heaps[i][p].1);
                }
                for e in heaps[i].iter() {
                    if !e.2 && !new_lists[i].contains(&e.1) {
                        old_lists[i].push(e.1);
                    }
                }
            }
            let mut rev_new: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut rev_old: Vec<Vec<usize>> = vec![Vec::new(); n];
            for i in 0..n {
                for &j in &new_lists[i] {
                    rev_new[j].push(i);
                }
                for &j in &old_lists[i] {
                    rev_old[j].push(i);
                }
            }
            let mut updates = 0usize;
            for i in 0..n {
                let mut new_i = new_lists[i].clone();
                new_i.extend(rev_new[i].choose_multiple(rng, sample_size).copied());
                new_i.sort_unstable();
                new_i.dedup();
                let mut old_i = old_lists[i].clone();
                old_i.extend(rev_old[i].choose_multiple(rng, sample_size).copied());
                old_i.sort_unstable();
                old_i.dedup();
                for a in 0..new_i.len() {
                    let u = new_i[a];
                    let partners = new_i[a + 1..].iter().chain(old_i.iter());
                    for &v in partners {
                        if u == v {
                            continue;
                        }
                        let d = self.pair_distance(u, v);
                        updates += usize::from(insert(&mut heaps[u], d, v));
                        updates += usize::from(insert(&mut heaps[v], d, u));
                    }
                }
            }
            if (updates as f64) < 0.001 * (n * degree) as f64 {
                break;
            }
        }
        heaps
            .into_iter()
            .map(|h| h.into_iter().map(|e| e.1).collect())
            .collect()
    }

    fn tune_beam(&mut self, target: f64, seed: u64) {
        let n = self.len();
        let k = 10.min(n.saturating_sub(1)).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0d1);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        ids.truncate(64);
        loop {
            let mut hit = 0usize;
            for &i in &ids {
                let q = self.points.row(i).to_vec();
                let truth: HashSet<usize> = match self.brute_force(&q, k, Some(i)) {
                    Ok(nb) => nb.indices.into_iter().collect(),
                    Err(_) => return,
                };
                let got = self.query_excluding(&q, k, Some(i)).map(|nb| nb.indices).unwrap_or_default();
                hit += got.iter().filter(|j| truth.contains(j)).count();
            }
            let recall = hit as f64 / (ids.len() * k) as f64;
            let graph = self.graph.as_mut().expect("graph built");
            if recall >= target || graph.ef >= n {
                break;
            }
            graph.ef = (graph.ef * 2).min(n);
        }
    }

    const MAGIC: &'static [u8; 8] = b"LSKNNIDX";
    const VERSION: u32 = 1;

    /// Serializes the index to a single little-endian binary file.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.push(match self.metric {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
        });
        out.push(u8::from(self.graph.is_some()));
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&self.recall_target.to_le_bytes());
        for v in self.points.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(g) = &self.graph {
            out.extend_from_slice(&(g.ef as u64).to_le_bytes());
            out.extend_from_slice(&(g.entry_points.len() as u32).to_le_bytes());
            for &e in &g.entry_points {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for list in &g.neighbors {
                out.extend_from_slice(&(list.len() as u32).to_le_bytes());
                for &j in list {
                    out.extend_from_slice(&(j as u32).to_le_bytes());
                }
            }
        }
        let path = path.as_ref();
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |m: &str| Error::Manifest {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(8).ok_or_else(|| corrupt("truncated header"))? != Self::MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: version,
            });
        }
        let metric = match cur.u8() {
            Some(0) => Metric::Cosine,
            Some(1) => Metric::Euclidean,
            _ => return Err(corrupt("bad metric tag")),
        };
        let has_graph = cur.u8().ok_or_else(|| corrupt("truncated header"))? == 1;
        let rows = cur.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let cols = cur.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let recall_target = cur.f64().ok_or_else(|| corrupt("truncated header"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = cur.f64().ok_or_else(|| corrupt("truncated point matrix"))?;
            if !v.is_finite() {
                return Err(corrupt("non-finite point value"));
            }
            data.push(v);
        }
        let points = Matrix::new(rows, cols, data)?;
        if rows == 0 {
            return Err(Error::Empty("point set"));
        }
        let unit = match metric {
            Metric::Euclidean => Vec::new(),
            Metric::Cosine => normalize_rows(&points)?,
        };
        let graph = if has_graph {
            let ef = cur.u64().ok_or_else(|| corrupt("truncated graph"))? as usize;
            let n_entry = cur.u32().ok_or_else(|| corrupt("truncated graph"))? as usize;
            let mut entry_points = Vec::with_capacity(n_entry);
            for _ in 0..n_entry {
                entry_points.push(cur.u32().ok_or_else(|| corrupt("truncated graph"))? as usize);
            }
            let mut neighbors = Vec::with_capacity(rows);
            for _ in 0..rows {
                let len = cur.u32().ok_or_else(|| corrupt("truncated graph"))? as usize;
                let mut list = Vec::with_capacity(len);
                for _ in 0..len {
                    list.push(cur.u32().ok_or_else(|| corrupt("truncated graph"))? as usize);
                }
                neighbors.push(list);
            }
            let out_of_range = entry_points
                .iter()
                .chain(neighbors.iter().flatten())
                .any(|&j| j >= rows);
            if out_of_range || entry_points.is_empty() || ef == 0 {
                return Err(corrupt("graph references invalid points"));
            }
            Some(Graph {
                neighbors,
                entry_points,
                ef,
            })
        } else {
            None
        };
        if !cur.is_done() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(KnnIndex {
            metric,
            points,
            unit,
            graph,
            recall_target,
        })
    }
}

fn normalize_rows(points: &Matrix) -> Result<Vec<f64>> {
    let mut unit = Vec::with_capacity(points.as_slice().len());
    for (i, r) in points.iter_rows().enumerate() {
        let n = norm(r);
        if n == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        unit.extend(r.iter().map(|v| v / n));
    }
    Ok(unit)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Index over a subset of a point set (e.g. one class), reporting neighbors by
/// their position in the full set.
#[derive(Debug, Clone)]
pub struct SubsetIndex {
    members: Vec<usize>,
    index: Option<KnnIndex>,
}

impl SubsetIndex {
    pub fn build(points: &Matrix, members: Vec<usize>, metric: Metric, mode: SearchMode) -> Result<Self> {
        let index = if members.is_empty() {
            None
        } else {
            Some(KnnIndex::build(points.select_rows(&members), metric, mode)?)
        };
        Ok(Self { members, index })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// The underlying index over member points (local indices); `None` for
    /// an empty subset.
    pub fn index(&self) -> Option<&KnnIndex> {
        self.index.as_ref()
    }

    /// Neighbors of `x` within the subset, excluding the full-set point
    /// `exclude` when it is a member.
    pub fn query(&self, x: &[f64], k: usize, exclude: Option<usize>) -> Result<NeighborList> {
        let index = self.index.as_ref().ok_or(Error::Empty("class subset"))?;
        let local = exclude.and_then(|g| self.members.binary_search(&g).ok());
        let mut nb = index.query_excluding(x, k, local)?;
        for i in nb.indices.iter_mut() {
            *i = self.members[*i];
        }
        Ok(nb)
    }
}
