//! Key-value datastore of decoder states with exact nearest-neighbor search.
//!
//! Keys are `f32`, distances are squared L2 accumulated in `f64`. Search is a
//! flat scan holding the best `k` rows in a bounded max-heap; ties go to the
//! lower row index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::binio::Reader;
use crate::corpus::{hash_pairs, ParallelPair, TokenId};
use crate::error::{Error, Result};
use crate::model::{teacher_force_pass, ModelParams};
use crate::parallel::{map_ordered, Parallelism};

const STORE_MAGIC: &[u8; 4] = b"KVDS";
const STORE_VERSION: u32 = 1;
/// magic, version, d, reserved, N
pub const STORE_HEADER_BYTES: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DatastoreMeta {
    /// Hash of the pairs the store was built from; not persisted.
    pub corpus_hash: Option<u64>,
    /// Hash of the model that produced the keys; not persisted.
    pub model_hash: Option<u64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    d: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    meta: DatastoreMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub value: TokenId,
    /// Squared L2 distance.
    pub distance: f64,
}

impl Datastore {
    pub fn from_parts(d: usize, keys: Vec<f32>, values: Vec<TokenId>) -> Result<Self> {
        if d == 0 {
            return Err(Error::validation("key dimension must be positive"));
        }
        if keys.len() != values.len() * d {
            return Err(Error::validation(format!(
                "{} key floats do not form {} rows of dimension {d}",
                keys.len(),
                values.len()
            )));
        }
        if let Some(i) = keys.iter().position(|k| !k.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite key in row {}",
                i / d
            )));
        }
        let n = values.len();
        Ok(Self {
            d,
            keys,
            values,
            meta: DatastoreMeta {
                n,
                ..DatastoreMeta::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn meta(&self) -> &DatastoreMeta {
        &self.meta
    }

    pub fn key(&self, row: usize) -> &[f32] {
        &self.keys[row * self.d..(row + 1) * self.d]
    }

    pub fn value(&self, row: usize) -> TokenId {
        self.values[row]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    pub fn check_model(&self, params: &ModelParams) -> Result<()> {
        if params.d != self.d {
            return Err(Error::validation(format!(
                "model hidden size {} does not match datastore key size {}",
                params.d, self.d
            )));
        }
        Ok(())
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if query.len() != self.d {
            return Err(Error::validation(format!(
                "query has dimension {}, store has {}",
                query.len(),
                self.d
            )));
        }
        Ok(())
    }

    /// Feeds rows `start..` of `keys` into a bounded heap for `query`.
    fn scan(
        &self,
        heap: &mut BinaryHeap<Candidate>,
        keys: &[f32],
        start: usize,
        query: &[f32],
        k: usize,
    ) {
        for (offset, key) in keys.chunks_exact(self.d).enumerate() {
            let bound = if heap.len() < k {
                f64::INFINITY
            } else {
                heap.peek().expect("heap is full").distance
            };
            let Some(distance) = squared_l2_bounded(key, query, bound) else {
                continue;
            };
            let cand = Candidate {
                distance,
                row: start + offset,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    fn finish_heap(&self, heap: BinaryHeap<Candidate>) -> Vec<Neighbor> {
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                index: c.row,
                value: self.values[c.row],
                distance: c.distance,
            })
            .collect()
    }

    /// Exact k nearest rows, ascending by (distance, row).
    pub fn query_knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query, k)?;
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.scan(&mut heap, &self.keys, 0, query, k);
        Ok(self.finish_heap(heap))
    }

    /// Runs many queries, possibly in parallel; results stay in query order.
    pub fn query_knn_many(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        par: Parallelism,
    ) -> Result<Vec<Vec<Neighbor>>> {
        map_ordered(queries, par, |_, q| self.query_knn(q, k))
            .into_iter()
            .collect()
    }

    /// Same results as calling [`Datastore::query_knn`] per query, but keys
    /// are read tile by tile and each tile is matched against every query
    /// while it is still in cache. With `Rayon`, queries are split across
    /// workers.
    pub fn query_knn_batch(
        &self,
        queries: &[&[f32]],
        k: usize,
        par: Parallelism,
    ) -> Result<Vec<Vec<Neighbor>>> {
        for q in queries {
            self.check_query(q, k)?;
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let groups = crate::parallel::current_workers(par).clamp(1, queries.len());
        let per_group = queries.len().div_ceil(groups);
        let chunks: Vec<&[&[f32]]> = queries.chunks(per_group).collect();
        let results = map_ordered(&chunks, par, |_, group| {
            let mut heaps: Vec<BinaryHeap<Candidate>> = group
                .iter()
                .map(|_| BinaryHeap::with_capacity(k + 1))
                .collect();
            for (tile, keys) in self.keys.chunks(TILE_ROWS * self.d).enumerate() {
                for (heap, q) in heaps.iter_mut().zip(group.iter()) {
                    self.scan(heap, keys, tile * TILE_ROWS, q, k);
                }
            }
            heaps
                .into_iter()
                .map(|h| self.finish_heap(h))
                .collect::<Vec<_>>()
        });
        Ok(results.into_iter().flatten().collect())
    }
}

/// Rows per tile in batched search; 256 rows of d = 64 is 64 KiB of keys.
const TILE_ROWS: usize = 256;

#[derive(Clone, Copy, Debug)]
struct Candidate {
    distance: f64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.row.cmp(&other.row))
    }
}

const LANES: usize = 8;

/// Squared L2 distance with `f64` accumulation.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    squared_l2_bounded(a, b, f64::INFINITY).expect("unbounded distance always completes")
}

/// As [`squared_l2`], but gives up (returns `None`) once the partial sum
/// exceeds `bound`. Completed results are bit-identical to [`squared_l2`].
fn squared_l2_bounded(a: &[f32], b: &[f32], bound: f64) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (i, (xa, xb)) in ca.zip(cb).enumerate() {
        for l in 0..LANES {
            let d = xa[l] as f64 - xb[l] as f64;
            acc[l] += d * d;
        }
        if i % 4 == 3 && lanes_sum(&acc) > bound {
            return None;
        }
    }
    for (l, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        let d = x as f64 - y as f64;
        acc[l] += d * d;
    }
    Some(lanes_sum(&acc))
}

#[inline]
fn lanes_sum(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Accumulates teacher-forced (state, token) rows from one or more corpora.
pub struct DatastoreBuilder {
    d: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    model_hash: u64,
}

impl DatastoreBuilder {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            d: params.d,
            keys: Vec::new(),
            values: Vec::new(),
            model_hash: params.content_hash(),
        }
    }

    pub fn append(&mut self, params: &ModelParams, pairs: &[ParallelPair]) -> Result<()> {
        if params.d != self.d {
            return Err(Error::validation(format!(
                "model hidden size {} does not match store key size {}",
                params.d, self.d
            )));
        }
        for pair in pairs {
            for (step, &y) in teacher_force_pass(params, pair)?.iter().zip(&pair.target) {
                self.keys.extend(step.hidden.iter().map(|&h| h as f32));
                self.values.push(y);
            }
        }
        Ok(())
    }

    pub fn finish(self, corpus_hash: Option<u64>) -> Result<Datastore> {
        let mut store = Datastore::from_parts(self.d, self.keys, self.values)?;
        store.meta.corpus_hash = corpus_hash;
        store.meta.model_hash = Some(self.model_hash);
        Ok(store)
    }
}

/// One row per target token (EOS steps included), in corpus × timestep order.
pub fn build_datastore(params: &ModelParams, pairs: &[ParallelPair]) -> Result<Datastore> {
    if pairs.is_empty() {
        return Err(Error::validation(
            "cannot build a datastore from an empty corpus",
        ));
    }
    let mut builder = DatastoreBuilder::new(params);
    builder.append(params, pairs)?;
    builder.finish(Some(hash_pairs(pairs.iter())))
}

/// Keeps `round(keep_fraction · N)` uniformly chosen rows in original order.
pub fn prune_random(store: &Datastore, keep_fraction: f64, seed: u64) -> Result<Datastore> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "keep_fraction {keep_fraction} must be in (0, 1]"
        )));
    }
    let n = store.len();
    let keep = ((n as f64) * keep_fraction).round() as usize;
    let mut rows =
        rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, keep).into_vec();
    rows.sort_unstable();
    let mut keys = Vec::with_capacity(keep * store.d);
    let mut values = Vec::with_capacity(keep);
    for &r in &rows {
        keys.extend_from_slice(store.key(r));
        values.push(store.values[r]);
    }
    let mut pruned = Datastore::from_parts(store.d, keys, values)?;
    pruned.meta.corpus_hash = store.meta.corpus_hash;
    pruned.meta.model_hash = store.meta.model_hash;
    Ok(pruned)
}

/// Expected on-disk size for `n` rows of dimension `d`.
pub fn store_file_size(n: usize, d: usize) -> usize {
    STORE_HEADER_BYTES + n * d * 4 + n * 4
}

pub fn store_to_bytes(store: &Datastore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store_file_size(store.len(), store.d));
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.d as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for k in &store.keys {
        out.extend_from_slice(&k.to_le_bytes());
    }
    for v in &store.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn store_from_bytes(bytes: &[u8]) -> Result<Datastore> {
    let mut r = Reader::new(bytes);
    r.magic(STORE_MAGIC)?;
    r.version(STORE_VERSION)?;
    let d = r.u32()? as usize;
    let _reserved = r.u32()?;
    let n = r.u64()? as usize;
    let key_bytes = r.take(n.saturating_mul(d).saturating_mul(4))?;
    let keys = key_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let value_bytes = r.take(n.saturating_mul(4))?;
    let values = value_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    r.finish()?;
    Datastore::from_parts(d, keys, values).map_err(|e| Error::Format {
        offset: STORE_HEADER_BYTES as u64,
        msg: e.to_string(),
    })
}

pub fn save_store(store: &Datastore, path: &Path) -> Result<()> {
    std::fs::write(path, store_to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: &Path) -> Result<Datastore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    store_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use rand::Rng;

    fn random_store(n: usize, d: usize, seed: u64) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let values = (0..n).map(|_| rng.gen_range(4..50)).collect();
        Datastore::from_parts(d, keys, values).unwrap()
    }

    #[test]
    fn self_match_is_first_with_zero_distance() {
        let store = random_store(200, 16, 1);
        let q = store.key(37).to_vec();
        let res = store.query_knn(&q, 5).unwrap();
        assert_eq!(res[0].index, 37);
        assert_eq!(res[0].distance, 0.0);
        assert_eq!(res[0].value, store.value(37));
    }

    #[test]
    fn k_beyond_n_returns_everything_sorted() {
        let store = random_store(10, 3, 2);
        let res = store.query_knn(&[0.0, 0.0, 0.0], 50).unwrap();
        assert_eq!(res.len(), 10);
        assert!(res.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn ties_resolve_to_lower_rows() {
        let keys = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let store = Datastore::from_parts(2, keys, vec![4, 5, 6, 7]).unwrap();
        let res = store.query_knn(&[0.0, 0.0], 2).unwrap();
        assert_eq!(res.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1]);
        let res = store.query_knn(&[1.0, 0.0], 2).unwrap();
        assert_eq!(res.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn query_errors_and_empty_store() {
        let store = random_store(5, 4, 3);
        assert!(matches!(
            store.query_knn(&[0.0; 4], 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            store.query_knn(&[0.0; 3], 1),
            Err(Error::Validation(_))
        ));
        let empty = Datastore::from_parts(4, vec![], vec![]).unwrap();
        assert!(empty.query_knn(&[0.0; 4], 3).unwrap().is_empty());
    }

    #[test]
    fn batched_search_matches_single_queries() {
        let store = random_store(1300, 24, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut queries: Vec<Vec<f32>> = (0..37)
            .map(|_| (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        queries.push(store.key(700).to_vec());
        let refs: Vec<&[f32]> = queries.iter().map(|q| q.as_slice()).collect();
        for par in [Parallelism::Sequential, Parallelism::Rayon] {
            let batch = store.query_knn_batch(&refs, 8, par).unwrap();
            for (q, got) in queries.iter().zip(&batch) {
                assert_eq!(got, &store.query_knn(q, 8).unwrap());
            }
        }
        assert!(store
            .query_knn_batch(&[], 8, Parallelism::Sequential)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn bounded_distance_matches_full() {
        let store = random_store(50, 37, 4);
        let q = store.key(0).to_vec();
        for r in 0..50 {
            let full = squared_l2(store.key(r), &q);
            assert_eq!(squared_l2_bounded(store.key(r), &q, full), Some(full));
        }
    }

    #[test]
    fn pruning_counts_and_identity() {
        let store = random_store(1000, 4, 5);
        assert_eq!(prune_random(&store, 1.0, 9).unwrap(), store);
        let half = prune_random(&store, 0.5, 9).unwrap();
        assert_eq!(half.len(), 500);
        assert!(prune_random(&store, 0.0, 9).is_err());
        assert!(prune_random(&store, 1.5, 9).is_err());
    }

    #[test]
    fn pruning_keeps_rows_paired() {
        let store = random_store(300, 3, 6);
        let pruned = prune_random(&store, 0.3, 1).unwrap();
        let mut cursor = 0;
        for r in 0..pruned.len() {
            // Rows appear in original order, so a forward scan finds each one.
            while store.key(cursor) != pruned.key(r) {
                cursor += 1;
            }
            assert_eq!(store.value(cursor), pruned.value(r));
        }
    }

    #[test]
    fn build_counts_rows_per_target_token() {
        let params = ModelParams::init(20, 6, 5, 2).unwrap();
        let mk = |n: usize| ParallelPair {
            source: vec![5; n],
            target: [vec![6; n - 1], vec![EOS]].concat(),
        };
        let store = build_datastore(&params, &[mk(4), mk(5), mk(6)]).unwrap();
        assert_eq!(store.len(), 15);
        assert_eq!(store.meta().n, 15);
        assert_eq!(store.value(3), EOS);

        let other = ModelParams::init(20, 7, 5, 2).unwrap();
        let mut builder = DatastoreBuilder::new(&params);
        assert!(builder.append(&other, &[mk(3)]).is_err());
    }

    #[test]
    fn file_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = random_store(123, 7, 8);
        let path = dir.path().join("store.kv");
        save_store(&store, &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 24 + 123 * 7 * 4 + 123 * 4);
        let back = load_store(&path).unwrap();
        assert_eq!(back.keys(), store.keys());
        assert_eq!(back.values(), store.values());

        let mut bytes = store_to_bytes(&store);
        bytes[1] = b'Z';
        assert!(matches!(
            store_from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let bytes = store_to_bytes(&store);
        assert!(matches!(
            store_from_bytes(&bytes[..100]),
            Err(Error::Format { offset: 24, .. })
        ));
    }
}
