//! Synthetic ordinal content/style images, their on-disk format, and
//! grouped minibatching.
//!
//! Each image is a 16×16 canvas holding one axis-aligned square. The square's
//! side `2 + c` encodes the content level `c`; its position is the style.
//! Interior pixels are 1.0, the square's outermost ring 0.5, background 0.0.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SIDE: usize = 16;
pub const DATA_DIM: usize = SIDE * SIDE;
pub const MAGIC: &[u8; 5] = b"OLVD1";
const HEADER_LEN: usize = 5 + 3 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInstance {
    pub x: Vec<f64>,
    /// Content level in `1..=K`.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub data_dim: usize,
    pub k: usize,
    pub instances: Vec<LabeledInstance>,
}

impl Dataset {
    pub fn new(data_dim: usize, k: usize, instances: Vec<LabeledInstance>) -> Result<Self> {
        if data_dim == 0 || k == 0 {
            return Err(Error::Contract(format!("dataset needs D, K >= 1 (got {data_dim}, {k})")));
        }
        for (n, inst) in instances.iter().enumerate() {
            if inst.x.len() != data_dim {
                return Err(Error::shape("Dataset::new", &[data_dim], &[inst.x.len()]));
            }
            if !(1..=k).contains(&inst.label) {
                return Err(Error::Contract(format!("instance {n} has label {} outside 1..={k}", inst.label)));
            }
            if inst.x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!("instance {n} has a pixel outside [0, 1]")));
            }
        }
        Ok(Dataset { data_dim, k, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Instance indices per level (index 0 holds level 1).
    pub fn indices_by_level(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.k];
        for (n, inst) in self.instances.iter().enumerate() {
            by[inst.label - 1].push(n);
        }
        by
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        self.indices_by_level().iter().map(Vec::len).collect()
    }
}

/// Square side for content level `c`.
pub fn side_for_level(c: usize) -> usize {
    2 + c
}

/// Rasterize a square of side `side` with its top-left corner at `(row, col)`.
pub fn render_square(side: usize, row: usize, col: usize) -> Vec<f64> {
    assert!(row + side <= SIDE && col + side <= SIDE, "square leaves the canvas");
    let mut img = vec![0.0; DATA_DIM];
    for r in row..row + side {
        for c in col..col + side {
            let edge = r == row || r == row + side - 1 || c == col || c == col + side - 1;
            img[r * SIDE + c] = if edge { 0.5 } else { 1.0 };
        }
    }
    img
}

/// Recover the content level from a clean rendering by counting lit pixels.
pub fn level_from_pixels(x: &[f64]) -> Option<usize> {
    let lit = x.iter().filter(|&&v| v > 0.25).count();
    let side = (lit as f64).sqrt().round() as usize;
    (side * side == lit && side > 2).then(|| side - 2)
}

/// `n` images over `k` levels, labels balanced to within one.
pub fn generate(seed: u64, n: usize, k: usize) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Contract(format!("need K >= 2 levels, got {k}")));
    }
    if n < k {
        return Err(Error::Contract(format!("need N >= K, got N = {n}, K = {k}")));
    }
    if side_for_level(k) > SIDE {
        return Err(Error::Contract(format!("K = {k} squares do not fit a {SIDE}x{SIDE} canvas")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k + 1).collect();
    labels.shuffle(&mut rng);
    let instances = labels
        .into_iter()
        .map(|label| {
            let side = side_for_level(label);
            let row = rng.random_range(0..=SIDE - side);
            let col = rng.random_range(0..=SIDE - side);
            LabeledInstance {
                x: render_square(side, row, col),
                label,
            }
        })
        .collect();
    Dataset::new(DATA_DIM, k, instances)
}

/// Serialize with 8-bit pixel quantization.
pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let n = dataset.len();
    if dataset.k > u8::MAX as usize {
        return Err(Error::Contract(format!("K = {} does not fit a label byte", dataset.k)));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * (1 + dataset.data_dim));
    out.extend_from_slice(MAGIC);
    for v in [dataset.data_dim, dataset.k, n] {
        let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for inst in &dataset.instances {
        out.push(inst.label as u8);
        out.extend(inst.x.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail(0, "missing OLVD1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let word = |i: usize| {
        let o = MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let (d, k, n) = (word(0), word(1), word(2));
    if d == 0 {
        return Err(fail(5, "data dimension D is zero".into()));
    }
    if k == 0 {
        return Err(fail(9, "level count K is zero".into()));
    }
    let record = 1 + d;
    let expected = n
        .checked_mul(record)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| fail(13, format!("record count {n} overflows")))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN) / record;
        return Err(fail(
            HEADER_LEN + complete * record,
            format!("truncated: header promises {n} records, found {complete}"),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, "trailing bytes after last record".into()));
    }
    let mut instances = Vec::with_capacity(n);
    for r in 0..n {
        let o = HEADER_LEN + r * record;
        let label = bytes[o] as usize;
        if !(1..=k).contains(&label) {
            return Err(fail(o, format!("label {label} outside 1..={k}")));
        }
        let x = bytes[o + 1..o + record].iter().map(|&b| b as f64 / 255.0).collect();
        instances.push(LabeledInstance { x, label });
    }
    Dataset::new(d, k, instances)
}

pub fn save(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(dataset)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Minibatch partitioned by content level: `groups[i]` holds the dataset
/// indices with label `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupedBatch {
    pub groups: Vec<Vec<usize>>,
}

impl GroupedBatch {
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut groups = vec![Vec::new(); dataset.k];
        for &n in indices {
            groups[dataset.instances[n].label - 1].push(n);
        }
        GroupedBatch { groups }
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset indices in group order.
    pub fn order(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Zero-based level of each row of [`GroupedBatch::order`].
    pub fn row_levels(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| std::iter::repeat_n(i, g.len()))
            .collect()
    }
}

/// Shuffle with `seed` and cut into batches of `batch_size` (the last may
/// be short). Every instance lands in exactly one batch.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<GroupedBatch>> {
    if batch_size < dataset.k {
        return Err(Error::Contract(format!(
            "batch size {batch_size} smaller than K = {}",
            dataset.k
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| GroupedBatch::from_indices(dataset, chunk))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_and_largest_square() {
        for (c, side) in [(1, 3), (6, 8)] {
            assert_eq!(side_for_level(c), side);
            let img = render_square(side, 2, 5);
            let area: f64 = img.iter().sum();
            let (s2, perim) = ((side * side) as f64, (4 * side) as f64);
            assert!((area - s2).abs() <= perim);
            assert_eq!(img.iter().filter(|&&v| v > 0.0).count(), side * side);
            assert_eq!(level_from_pixels(&img), Some(c));
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(7, 600, 6).unwrap();
        let b = generate(7, 600, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(8, 600, 6).unwrap());

        let big = generate(1, 6000, 6).unwrap();
        assert!(big.label_histogram().iter().all(|&h| h.abs_diff(1000) <= 1));
        let odd = generate(1, 605, 6).unwrap();
        let h = odd.label_histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
    }

    #[test]
    fn level_recoverable_from_every_image() {
        let ds = generate(3, 1200, 6).unwrap();
        for inst in &ds.instances {
            assert_eq!(level_from_pixels(&inst.x), Some(inst.label));
            assert!(inst.x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_preconditions() {
        assert!(generate(0, 5, 6).is_err());
        assert!(generate(0, 10, 1).is_err());
        assert!(generate(0, 100, 15).is_err());
    }

    #[test]
    fn round_trip_within_quantization() {
        let ds = generate(5, 60, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.olvd");
        save(&path, &ds).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.k, 6);
        assert_eq!(back.len(), 60);
        for (a, b) in ds.instances.iter().zip(&back.instances) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.x.iter().zip(&b.x) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(matches!(decode(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(b"NOPE1xxxxxxxxxxxx"), Err(Error::Format { offset: 0, .. })));

        let ds = generate(5, 12, 6).unwrap();
        let good = encode(&ds).unwrap();

        let mut zero_k = good.clone();
        zero_k[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&zero_k), Err(Error::Format { offset: 9, .. })));

        let truncated = &good[..good.len() - 3];
        match decode(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, HEADER_LEN + 11 * 257),
            other => panic!("{other:?}"),
        }

        let mut bad_label = good.clone();
        bad_label[HEADER_LEN + 257] = 7;
        match decode(&bad_label) {
            Err(e @ Error::Format { .. }) => {
                assert!(e.to_string().contains(&format!("offset {}", HEADER_LEN + 257)))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_partition_each_epoch() {
        let ds = generate(2, 100, 6).unwrap();
        let batches = make_batches(&ds, 32, 9).unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.order()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
        for b in &batches {
            for (i, g) in b.groups.iter().enumerate() {
                assert!(g.iter().all(|&n| ds.instances[n].label == i + 1));
            }
        }
        assert_eq!(batches, make_batches(&ds, 32, 9).unwrap());
        assert_ne!(batches, make_batches(&ds, 32, 10).unwrap());

        let whole = make_batches(&ds, 100, 0).unwrap();
        assert_eq!(whole.len(), 1);
        assert!(whole[0].groups.iter().all(|g| !g.is_empty()));

        assert!(make_batches(&ds, 5, 0).is_err());
    }
}
