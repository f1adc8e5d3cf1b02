//! Trajectory segments and nearest-neighbour search over their start latents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::StateEmbedding;
use crate::maze::{Dataset, EnvState};
use crate::seed::rng_from_seed;
use crate::{Error, Result};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TSIX";
const KMEANS_ITERS: usize = 25;
pub const DEFAULT_N_PROBE: usize = 128;

/// A contiguous window `states[start_offset .. start_offset + length]` of
/// trajectory `traj_id` (its position in the source dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: usize,
    pub traj_id: usize,
    pub start_offset: usize,
    pub length: usize,
    pub start_state: EnvState,
    pub end_state: EnvState,
    pub phi_start: Vec<f64>,
    pub phi_end: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub records: Vec<SegmentRecord>,
    /// Trajectories shorter than the window length.
    pub skipped: usize,
}

impl SegmentSet {
    /// `phi_start` of every record, one row each.
    pub fn start_matrix(&self) -> Array2<f64> {
        latent_matrix(self.records.iter().map(|r| &r.phi_start[..]))
    }
}

fn latent_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>) -> Array2<f64> {
    let n = rows.len();
    let mut data = Vec::new();
    let mut dim = 0;
    for r in rows {
        dim = r.len();
        data.extend_from_slice(r);
    }
    Array2::from_shape_vec((n, dim), data).expect("equal latent widths")
}

/// Sliding windows of `h_seg` states every `stride` steps, with both
/// endpoints embedded.
pub fn extract_segments<E: StateEmbedding + ?Sized>(dataset: &Dataset, model: &E, h_seg: usize, stride: usize) -> Result<SegmentSet> {
    if h_seg < 2 || stride < 1 {
        return Err(Error::Config(format!("need h_seg >= 2 and stride >= 1, got {h_seg}, {stride}")));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut ends = Vec::new();
    for (traj_id, traj) in dataset.trajectories.iter().enumerate() {
        if traj.len() < h_seg {
            skipped += 1;
            continue;
        }
        for start in (0..=traj.len() - h_seg).step_by(stride) {
            let (s, e) = (traj.states[start], traj.states[start + h_seg - 1]);
            ends.push(s);
            ends.push(e);
            records.push(SegmentRecord {
                id: records.len(),
                traj_id,
                start_offset: start,
                length: h_seg,
                start_state: s,
                end_state: e,
                phi_start: Vec::new(),
                phi_end: Vec::new(),
            });
        }
    }
    const CHUNK: usize = 4096;
    for (c, chunk) in ends.chunks(CHUNK).enumerate() {
        let z = model.embed_batch(chunk)?;
        for (k, row) in z.rows().into_iter().enumerate() {
            let flat = c * CHUNK + k;
            let rec = &mut records[flat / 2];
            if flat % 2 == 0 {
                rec.phi_start = row.to_vec();
            } else {
                rec.phi_end = row.to_vec();
            }
        }
    }
    Ok(SegmentSet { records, skipped })
}

/// Euclidean distance, accumulated in index order.
pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

fn sort_hits(hits: &mut [(usize, f64)]) {
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

/// Exact k nearest rows of `vectors`, ascending by `(distance, id)`.
pub fn brute_topk(vectors: ArrayView2<f64>, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let q = ArrayView1::from(query);
    let mut hits: Vec<(usize, f64)> = vectors.rows().into_iter().enumerate().map(|(i, r)| (i, euclidean(r, q))).collect();
    sort_hits(&mut hits);
    hits.truncate(k);
    hits
}

/// [`brute_topk`] over the `phi_start` of segment records; ids are record ids.
pub fn brute_topk_records(records: &[SegmentRecord], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let q = ArrayView1::from(query);
    let mut hits: Vec<(usize, f64)> = records
        .iter()
        .map(|r| (r.id, euclidean(ArrayView1::from(&r.phi_start[..]), q)))
        .collect();
    sort_hits(&mut hits);
    hits.truncate(k);
    hits
}

/// Inverted-file index: k-means centroids with one posting list each.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub centroids: Array2<f64>,
    pub lists: Vec<Vec<usize>>,
    pub vectors: Array2<f64>,
    pub n_probe: usize,
}

/// Squared distances from every row of `x` to every centroid.
fn sq_dists(x: ArrayView2<f64>, c: ArrayView2<f64>) -> Array2<f64> {
    let xn = x.map_axis(Axis(1), |r| r.dot(&r));
    let cn = c.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = x.dot(&c.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (xn[i] - 2.0 * *v + cn[j]).max(0.0);
    }
    d
}

fn argmin_rows(d: &Array2<f64>) -> Vec<usize> {
    d.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v < r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Seeded k-means++ initialization followed by 25 Lloyd iterations; every
/// vector is then filed under its nearest centroid.
pub fn build_ivf(vectors: ArrayView2<f64>, n_list: usize, seed: u64) -> Result<IvfIndex> {
    let n = vectors.nrows();
    if n_list < 1 {
        return Err(Error::Config("n_list must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::EmptyIndex);
    }
    if n_list > n {
        return Err(Error::Config(format!("n_list {n_list} exceeds {n} vectors")));
    }
    let mut rng = rng_from_seed(seed);
    let dim = vectors.ncols();
    let mut centroids = Array2::zeros((n_list, dim));
    centroids.row_mut(0).assign(&vectors.row(rng.random_range(0..n)));
    let mut nearest = sq_dists(vectors, centroids.slice(ndarray::s![0..1, ..])).column(0).to_owned();
    for c in 1..n_list {
        let total: f64 = nearest.sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&vectors.row(pick));
        let d = sq_dists(vectors, centroids.slice(ndarray::s![c..c + 1, ..]));
        for (m, &v) in nearest.iter_mut().zip(d.column(0)) {
            *m = m.min(v);
        }
    }

    let mut assign = argmin_rows(&sq_dists(vectors, centroids.view()));
    for _ in 0..KMEANS_ITERS {
        let mut sums = Array2::<f64>::zeros((n_list, dim));
        let mut counts = vec![0usize; n_list];
        for (i, &a) in assign.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &vectors.row(i);
            counts[a] += 1;
        }
        for c in 0..n_list {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        assign = argmin_rows(&sq_dists(vectors, centroids.view()));
    }

    let mut lists = vec![Vec::new(); n_list];
    for (i, &a) in assign.iter().enumerate() {
        lists[a].push(i);
    }
    Ok(IvfIndex {
        centroids,
        lists,
        vectors: vectors.to_owned(),
        n_probe: DEFAULT_N_PROBE,
    })
}

/// `floor(sqrt(n))`, at least 1.
pub fn default_n_list(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}

impl IvfIndex {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn n_list(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// k nearest vectors among the `n_probe` lists whose centroids are closest
    /// to `query`, ascending by `(distance, id)`.
    pub fn topk(&self, query: &[f64], k: usize, n_probe: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 || n_probe == 0 {
            return Err(Error::Config("k and n_probe must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query dim {} != index dim {}", query.len(), self.dim())));
        }
        let q = ArrayView1::from(query);
        let mut cells: Vec<(usize, f64)> = self
            .centroids
            .rows()
            .into_iter()
            .enumerate()
            .map(|(c, r)| (c, euclidean(r, q)))
            .collect();
        sort_hits(&mut cells);
        let mut hits = Vec::new();
        for &(c, _) in cells.iter().take(n_probe) {
            for &id in &self.lists[c] {
                hits.push((id, euclidean(self.vectors.row(id), q)));
            }
        }
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn topk_default(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        self.topk(query, k, self.n_probe)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header {
            n_list: usize,
            latent_dim: usize,
            count: usize,
            n_probe: usize,
        }
        let header = serde_json::to_vec(&Header {
            n_list: self.n_list(),
            latent_dim: self.dim(),
            count: self.len(),
            n_probe: self.n_probe,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.centroids.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut off = 0u64;
        w.write_all(&off.to_le_bytes())?;
        for list in &self.lists {
            off += list.len() as u64;
            w.write_all(&off.to_le_bytes())?;
        }
        for list in &self.lists {
            for &id in list {
                w.write_all(&(id as u64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an index file; `vectors` (one row per id) are supplied by the
    /// caller, typically recomputed from the segment records.
    pub fn read_from<R: Read>(mut r: R, vectors: Array2<f64>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            n_list: usize,
            latent_dim: usize,
            count: usize,
            n_probe: usize,
        }
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Corrupt("not an index file".into()));
        }
        let version = cur.u32()?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let hlen = cur.u32()? as usize;
        let header: Header =
            serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::Corrupt(format!("bad index header: {e}")))?;
        if vectors.dim() != (header.count, header.latent_dim) {
            return Err(Error::Shape(format!(
                "index holds {} x {} vectors, got {:?}",
                header.count,
                header.latent_dim,
                vectors.dim()
            )));
        }
        let mut cvals = Vec::with_capacity(header.n_list * header.latent_dim);
        for _ in 0..header.n_list * header.latent_dim {
            cvals.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let mut offsets = Vec::with_capacity(header.n_list + 1);
        for _ in 0..=header.n_list {
            offsets.push(cur.u64()? as usize);
        }
        if offsets[0] != 0 || *offsets.last().unwrap() != header.count || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Corrupt("bad list offsets".into()));
        }
        let mut ids = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let id = cur.u64()? as usize;
            if id >= header.count {
                return Err(Error::Corrupt(format!("id {id} out of range")));
            }
            ids.push(id);
        }
        if cur.pos != buf.len() {
            return Err(Error::Corrupt("trailing bytes in index file".into()));
        }
        let lists = offsets.windows(2).map(|w| ids[w[0]..w[1]].to_vec()).collect();
        Ok(Self {
            centroids: Array2::from_shape_vec((header.n_list, header.latent_dim), cvals).expect("shape"),
            lists,
            vectors,
            n_probe: header.n_probe,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>, vectors: Array2<f64>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), vectors)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("truncated index file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Fraction of the exact top-k found by the index, averaged over queries.
pub fn recall_at_k(index: &IvfIndex, queries: ArrayView2<f64>, k: usize, n_probe: usize) -> Result<f64> {
    let mut found = 0usize;
    for q in queries.rows() {
        let q = q.to_vec();
        let exact: std::collections::HashSet<usize> =
            brute_topk(index.vectors.view(), &q, k).into_iter().map(|h| h.0).collect();
        found += index.topk(&q, k, n_probe)?.iter().filter(|h| exact.contains(&h.0)).count();
    }
    Ok(found as f64 / (queries.nrows() * k) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::CoordinateEmbedding;
    use crate::maze::{generate_stitch_dataset, MazeSpec, StitchParams};
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;

    fn uniform(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_simple_fn((n, dim), || rng.random::<f64>())
    }

    #[test]
    fn window_counts() {
        let spec = MazeSpec::medium();
        let d = generate_stitch_dataset(
            &spec,
            StitchParams {
                n_episodes: 3,
                max_span: 4,
                ep_len: 200,
                seed: 0,
            },
        )
        .unwrap();
        let phi = CoordinateEmbedding { cell_size: 1.0 };
        let set = extract_segments(&d, &phi, 26, 13).unwrap();
        assert_eq!(set.records.len(), 3 * ((200 - 26) / 13 + 1));
        assert_eq!(set.records.len(), 42);
        for r in &set.records {
            let t = &d.trajectories[r.traj_id];
            assert_eq!(r.start_state, t.states[r.start_offset]);
            assert_eq!(r.end_state, t.states[r.start_offset + 25]);
            assert_eq!(r.phi_start, phi.embed(&t.states[r.start_offset]).unwrap());
            assert_eq!(r.phi_end, phi.embed(&r.end_state).unwrap());
        }
        let short = extract_segments(&d, &phi, 200, 1).unwrap();
        assert_eq!(short.records.len(), 3);
        let none = extract_segments(&d, &phi, 201, 1).unwrap();
        assert_eq!((none.records.len(), none.skipped), (0, 3));
        assert!(extract_segments(&d, &phi, 1, 1).is_err());
    }

    #[test]
    fn single_list_holds_everything() {
        let v = uniform(50, 3, 1);
        let idx = build_ivf(v.view(), 1, 0).unwrap();
        assert_eq!(idx.lists.len(), 1);
        assert_eq!(idx.lists[0], (0..50).collect::<Vec<_>>());
        assert!(build_ivf(v.view(), 0, 0).is_err());
        assert!(build_ivf(v.view(), 51, 0).is_err());
    }

    #[test]
    fn separated_blobs() {
        let mut rng = rng_from_seed(3);
        let mut v = Array2::zeros((200, 2));
        for i in 0..200 {
            let centre = if i % 2 == 0 { -50.0 } else { 50.0 };
            v[[i, 0]] = centre + rng.random_range(-1.0..1.0);
            v[[i, 1]] = rng.random_range(-1.0..1.0);
        }
        let idx = build_ivf(v.view(), 2, 9).unwrap();
        let mut lists = idx.lists.clone();
        lists.sort();
        let evens: Vec<usize> = (0..200).step_by(2).collect();
        let odds: Vec<usize> = (1..200).step_by(2).collect();
        assert!(lists == vec![evens.clone(), odds.clone()] || lists == vec![odds, evens]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lists_partition_ids(n in 5usize..120, n_list in 1usize..6, seed in 0u64..1000) {
            let n_list = n_list.min(n);
            let v = uniform(n, 4, seed);
            let idx = build_ivf(v.view(), n_list, seed).unwrap();
            let mut all: Vec<usize> = idx.lists.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn full_probe_equals_brute(seed in 0u64..1000, k in 1usize..15) {
            let v = uniform(300, 5, seed);
            let idx = build_ivf(v.view(), 17, seed).unwrap();
            let q = uniform(1, 5, seed + 1).row(0).to_vec();
            let got = idx.topk(&q, k, 17).unwrap();
            prop_assert_eq!(&got, &brute_topk(v.view(), &q, k));
            prop_assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn exact_hit_and_ties() {
        let v = ndarray::array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [3.0, 3.0]];
        let idx = build_ivf(v.view(), 2, 0).unwrap();
        let hits = idx.topk(&[1.0, 0.0], 2, 2).unwrap();
        assert_eq!(hits, vec![(1, 0.0), (3, 0.0)]);
        // hand-sorted: distances from (0.1, 0.2)
        let b = brute_topk(v.view(), &[0.1, 0.2], 2);
        assert_eq!(b.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2]);
        assert!((b[0].1 - (0.05f64).sqrt()).abs() < 1e-15);
        let one = brute_topk(v.slice(ndarray::s![4..5, ..]), &[0.0, 0.0], 3);
        assert_eq!(one.len(), 1);
        assert_eq!(idx.topk(&[0.0, 0.0], 99, 2).unwrap().len(), 5);
    }

    #[test]
    fn record_brute_matches_matrix_brute() {
        let spec = MazeSpec::compact8();
        let d = generate_stitch_dataset(
            &spec,
            StitchParams {
                n_episodes: 10,
                max_span: 4,
                ep_len: 60,
                seed: 2,
            },
        )
        .unwrap();
        let set = extract_segments(&d, &CoordinateEmbedding { cell_size: 1.0 }, 10, 5).unwrap();
        let m = set.start_matrix();
        assert_eq!(brute_topk_records(&set.records, &[3.0, 2.5], 7), brute_topk(m.view(), &[3.0, 2.5], 7));
    }

    #[test]
    fn file_round_trip() {
        let v = uniform(400, 6, 5);
        let idx = build_ivf(v.view(), 20, 1).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = IvfIndex::read_from(&buf[..], v.clone()).unwrap();
        assert_eq!(back, idx);
        assert!(matches!(IvfIndex::read_from(&buf[..buf.len() - 3], v.clone()), Err(Error::Corrupt(_))));
        assert!(IvfIndex::read_from(&buf[..], uniform(10, 6, 0)).is_err());
    }

    #[test]
    fn empty_index_errors() {
        let idx = IvfIndex {
            centroids: Array2::zeros((0, 2)),
            lists: vec![],
            vectors: Array2::zeros((0, 2)),
            n_probe: 1,
        };
        assert!(matches!(idx.topk(&[0.0, 0.0], 1, 1), Err(Error::EmptyIndex)));
        assert!(matches!(build_ivf(Array2::zeros((0, 2)).view(), 1, 0), Err(Error::EmptyIndex)));
    }
}
