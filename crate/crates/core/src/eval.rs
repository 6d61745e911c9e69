//! Latent-quality evaluation: nearest-centroid level prediction, distance
//! maps between group vectors, triplet ordering and content/style swaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{level_from_pixels, Dataset, SIDE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::inference::{poe_fuse, DiagGaussian};
use crate::model::Model;

/// Which latent a classifier reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Latent {
    Content,
    Style,
}

impl Latent {
    pub fn as_str(&self) -> &'static str {
        match self {
            Latent::Content => "content",
            Latent::Style => "style",
        }
    }
}

const ENCODE_CHUNK: usize = 512;

fn encode_rows(model: &Model, dataset: &Dataset, indices: &[usize], latent: Latent) -> Result<Vec<DiagGaussian>> {
    let encoder = match latent {
        Latent::Content => &model.content_encoder,
        Latent::Style => &model.style_encoder,
    };
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(ENCODE_CHUNK) {
        let data: Vec<f64> = chunk
            .iter()
            .flat_map(|&n| dataset.instances[n].x.iter().copied())
            .collect();
        out.extend(encoder.encode_batch(&Tensor::new(vec![chunk.len(), dataset.data_dim], data)?)?);
    }
    Ok(out)
}

/// Instances of each level in a seeded, reproducible order.
fn shuffled_levels(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by = dataset.indices_by_level();
    for group in &mut by {
        group.shuffle(&mut rng);
    }
    by
}

fn check_m(by_level: &[Vec<usize>], m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Contract("M must be at least 1".into()));
    }
    if let Some((i, g)) = by_level.iter().enumerate().find(|(_, g)| g.len() < m) {
        return Err(Error::Contract(format!(
            "level {} has {} instances, fewer than M = {m}",
            i + 1,
            g.len()
        )));
    }
    Ok(())
}

/// Fused content posterior of `M` seeded-chosen instances for every level.
pub fn infer_group_posteriors(model: &Model, dataset: &Dataset, m: usize, seed: u64) -> Result<Vec<DiagGaussian>> {
    let by = shuffled_levels(dataset, seed);
    check_m(&by, m)?;
    by.iter()
        .map(|g| poe_fuse(&encode_rows(model, dataset, &g[..m], Latent::Content)?))
        .collect()
}

/// Means of [`infer_group_posteriors`]: one content vector per level.
pub fn infer_group_vectors(model: &Model, dataset: &Dataset, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(infer_group_posteriors(model, dataset, m, seed)?
        .into_iter()
        .map(|q| q.mean)
        .collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One-based label of the nearest centroid.
pub fn nearest_centroid(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    centroids
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| squared_distance(a, v).total_cmp(&squared_distance(b, v)))
        .map(|(i, _)| i + 1)
        .expect("at least one centroid")
}

pub fn mean_absolute_error(truth: &[usize], predicted: &[usize]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    truth.iter().zip(predicted).map(|(&t, &p)| t.abs_diff(p) as f64).sum::<f64>() / truth.len() as f64
}

/// Per-level means of the posterior means of `latent` over the training split.
pub fn level_centroids(model: &Model, train: &Dataset, latent: Latent) -> Result<Vec<Vec<f64>>> {
    train
        .indices_by_level()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.is_empty() {
                return Err(Error::Contract(format!("training split has no level {}", i + 1)));
            }
            let qs = encode_rows(model, train, g, latent)?;
            let mut c = vec![0.0; qs[0].dim()];
            for q in &qs {
                c.iter_mut().zip(&q.mean).for_each(|(c, m)| *c += m);
            }
            c.iter_mut().for_each(|c| *c /= qs.len() as f64);
            Ok(c)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeResult {
    pub mae: f64,
    pub units: usize,
}

/// Level-prediction error with a nearest-centroid classifier.
///
/// Content units are disjoint chunks of `m` same-level test instances,
/// fused by product of experts; style units are single instances.
pub fn content_mae(model: &Model, train: &Dataset, test: &Dataset, latent: Latent, m: usize, seed: u64) -> Result<MaeResult> {
    let centroids = level_centroids(model, train, latent)?;
    let by = shuffled_levels(test, seed);
    check_m(&by, m)?;
    let (mut truth, mut predicted) = (Vec::new(), Vec::new());
    for (i, g) in by.iter().enumerate() {
        let qs = encode_rows(model, test, g, latent)?;
        match latent {
            Latent::Content => {
                for chunk in qs.chunks_exact(m) {
                    truth.push(i + 1);
                    predicted.push(nearest_centroid(&centroids, &poe_fuse(chunk)?.mean));
                }
            }
            Latent::Style => {
                for q in &qs {
                    truth.push(i + 1);
                    predicted.push(nearest_centroid(&centroids, &q.mean));
                }
            }
        }
    }
    Ok(MaeResult {
        mae: mean_absolute_error(&truth, &predicted),
        units: truth.len(),
    })
}

/// Symmetric `K × K` matrix of Euclidean distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub k: usize,
    pub values: Vec<f64>,
}

pub fn distance_map(vectors: &[Vec<f64>]) -> DistanceMap {
    let k = vectors.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let d = squared_distance(&vectors[i], &vectors[j]).sqrt();
            values[i * k + j] = d;
            values[j * k + i] = d;
        }
    }
    DistanceMap { k, values }
}

/// Cell size in pixels of rendered maps.
pub const MAP_CELL: usize = 16;

impl DistanceMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Equal spacing `|i - j|`, scaled so its maximum equals `max`.
    pub fn ideal(k: usize, max: f64) -> DistanceMap {
        let unit = if k > 1 { max / (k - 1) as f64 } else { 0.0 };
        DistanceMap {
            k,
            values: (0..k * k).map(|p| (p / k).abs_diff(p % k) as f64 * unit).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|j| self.at(i, j).to_string()).collect();
            writeln!(s, "{}", row.join(",")).expect("string write");
        }
        s
    }

    /// Map rendered with the maximum as white, each entry a square cell.
    pub fn render(&self) -> GrayImage {
        let side = self.k * MAP_CELL;
        let max = self.max();
        let mut img = GrayImage::new(side, side);
        for r in 0..side {
            for c in 0..side {
                let v = self.at(r / MAP_CELL, c / MAP_CELL);
                img.pixels[r * side + c] = if max > 0.0 { v / max } else { 0.0 };
            }
        }
        img
    }

    /// Spearman correlation between off-diagonal entries and `|i - j|`.
    pub fn spearman_with_gap(&self) -> f64 {
        let mut dist = Vec::new();
        let mut gap = Vec::new();
        for i in 0..self.k {
            for j in i + 1..self.k {
                dist.push(self.at(i, j));
                gap.push((j - i) as f64);
            }
        }
        spearman(&dist, &gap)
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &p in &order[start..end] {
            ranks[p] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Fraction of triplets `i < j < k` with
/// `‖v_i − v_k‖ > max(‖v_i − v_j‖, ‖v_j − v_k‖)`.
pub fn triplet_satisfaction(vectors: &[Vec<f64>]) -> Result<f64> {
    let k = vectors.len();
    if k < 3 {
        return Err(Error::Contract(format!("triplets need K >= 3, got {k}")));
    }
    let map = distance_map(vectors);
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..k {
        for j in i + 1..k {
            for l in j + 1..k {
                total += 1;
                if map.at(i, l) > map.at(i, j).max(map.at(j, l)) {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Decoded means for every (style image, level) pair.
///
/// The result has `(rows + 1) × (K + 1)` tiles: the left column shows the
/// style images, the top row decodes each level's vector with the style of
/// that level's reference image, and cell `(r, i)` decodes level `i` with
/// the style of image `r`.
pub fn swap_grid(
    model: &Model,
    style_images: &[&[f64]],
    content_vectors: &[Vec<f64>],
    references: &[&[f64]],
) -> Result<GrayImage> {
    let k = content_vectors.len();
    if references.len() != k {
        return Err(Error::shape("swap_grid", &[k], &[references.len()]));
    }
    let d = model.config.data_dim;
    if d != SIDE * SIDE {
        return Err(Error::Contract(format!("swap grid expects {SIDE}x{SIDE} images, D = {d}")));
    }
    let style_of = |images: &[&[f64]]| -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let data: Vec<f64> = images.iter().flat_map(|x| x.iter().copied()).collect();
        Ok(model
            .style_encoder
            .encode_batch(&Tensor::new(vec![images.len(), d], data)?)?
            .into_iter()
            .map(|q| q.mean)
            .collect())
    };
    let styles = style_of(style_images)?;
    let reference_styles = style_of(references)?;

    let mut img = GrayImage::new((k + 1) * SIDE, (style_images.len() + 1) * SIDE);
    let mut pairs: Vec<(&[f64], &[f64])> = Vec::new();
    for (v, s) in content_vectors.iter().zip(&reference_styles) {
        pairs.push((v, s));
    }
    for s in &styles {
        for v in content_vectors {
            pairs.push((v, s));
        }
    }
    let decoded = model.decoder.decode_batch(&pairs)?;
    for (i, tile) in decoded[..k].iter().enumerate() {
        img.paste(tile, SIDE, 0, (i + 1) * SIDE);
    }
    for (r, x) in style_images.iter().enumerate() {
        img.paste(x, SIDE, (r + 1) * SIDE, 0);
        for i in 0..k {
            img.paste(&decoded[k + r * k + i], SIDE, (r + 1) * SIDE, (i + 1) * SIDE);
        }
    }
    Ok(img)
}

/// Lit-pixel counts of the swapped tiles, one row per style image.
pub fn swap_pixel_counts(grid: &GrayImage, k: usize) -> Vec<Vec<usize>> {
    let rows = grid.height / SIDE - 1;
    (1..=rows)
        .map(|r| {
            (1..=k)
                .map(|c| grid.tile(SIDE, r, c).iter().filter(|&&v| v > 0.25).count())
                .collect()
        })
        .collect()
}

/// Fraction of swap rows whose lit-pixel count strictly increases with level.
pub fn swap_monotone_fraction(grid: &GrayImage, k: usize) -> f64 {
    let counts = swap_pixel_counts(grid, k);
    let good = counts
        .iter()
        .filter(|row| row.windows(2).all(|w| w[1] > w[0]))
        .count();
    good as f64 / counts.len().max(1) as f64
}

/// Predicted level of each swapped tile via the pixel-count rule.
pub fn swap_levels(grid: &GrayImage, k: usize) -> Vec<Vec<Option<usize>>> {
    let rows = grid.height / SIDE - 1;
    (1..=rows)
        .map(|r| (1..=k).map(|c| level_from_pixels(&grid.tile(SIDE, r, c))).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub latent: Latent,
    pub m: usize,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: Vec<MetricRow>,
    pub distance_map: DistanceMap,
    pub artifacts: Vec<PathBuf>,
}

impl EvalReport {
    pub fn value(&self, metric: &str, latent: Latent, m: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.metric == metric && r.latent == latent && r.m == m)
            .map(|r| r.value)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,latent,M,value\n");
        for r in &self.metrics {
            writeln!(s, "{},{},{},{}", r.metric, r.latent.as_str(), r.m, r.value).expect("string write");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ms: Vec<usize>,
    pub seed: u64,
    pub swap_rows: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ms: vec![1, 5, 10, 20],
            seed: 0,
            swap_rows: 6,
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Every metric for each `M`, plus distance-map and swap artifacts for the
/// largest `M`, written into `out`.
pub fn evaluate(model: &Model, train: &Dataset, test: &Dataset, opts: &EvalOptions, out: &Path) -> Result<EvalReport> {
    if opts.ms.is_empty() {
        return Err(Error::Contract("no M values to evaluate".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut metrics = Vec::new();
    let style = content_mae(model, train, test, Latent::Style, 1, opts.seed)?;
    let mut last_map = None;
    for &m in &opts.ms {
        let content = content_mae(model, train, test, Latent::Content, m, opts.seed)?;
        let vectors = infer_group_vectors(model, test, m, opts.seed)?;
        let map = distance_map(&vectors);
        metrics.push(MetricRow { metric: "mae", latent: Latent::Content, m, value: content.mae });
        metrics.push(MetricRow { metric: "mae", latent: Latent::Style, m, value: style.mae });
        if vectors.len() >= 3 {
            metrics.push(MetricRow {
                metric: "triplet_satisfaction",
                latent: Latent::Content,
                m,
                value: triplet_satisfaction(&vectors)?,
            });
        }
        metrics.push(MetricRow {
            metric: "distmap_spearman",
            latent: Latent::Content,
            m,
            value: map.spearman_with_gap(),
        });
        last_map = Some((m, map, vectors));
    }
    let (m, map, vectors) = last_map.expect("ms is non-empty");

    let by = shuffled_levels(test, opts.seed);
    let references: Vec<&[f64]> = by.iter().map(|g| test.instances[g[0]].x.as_slice()).collect();
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5157_4150));
    let styles: Vec<&[f64]> = order
        .iter()
        .take(opts.swap_rows)
        .map(|&n| test.instances[n].x.as_slice())
        .collect();
    let grid = swap_grid(model, &styles, &vectors, &references)?;
    metrics.push(MetricRow {
        metric: "swap_monotone_rows",
        latent: Latent::Content,
        m,
        value: swap_monotone_fraction(&grid, vectors.len()),
    });

    let report = EvalReport {
        metrics,
        distance_map: map,
        artifacts: ["metrics.csv", "distmap.csv", "distmap.pgm", "distmap_ideal.pgm", "swap.pgm"]
            .iter()
            .map(|f| out.join(f))
            .collect(),
    };
    let ideal = DistanceMap::ideal(report.distance_map.k, report.distance_map.max());
    write(&report.artifacts[0], report.metrics_csv().as_bytes())?;
    write(&report.artifacts[1], report.distance_map.to_csv().as_bytes())?;
    write(&report.artifacts[2], &report.distance_map.render().to_pgm())?;
    write(&report.artifacts[3], &ideal.render().to_pgm())?;
    write(&report.artifacts[4], &grid.to_pgm())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;
    use crate::model::ModelConfig;
    use crate::prior::PriorMode;
    use crate::prior::SpacingParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn small_model() -> Model {
        let mut c = ModelConfig::new(256, 3, 2, 6, PriorMode::Ordinal);
        c.encoder_hidden = vec![16];
        c.decoder_hidden = vec![16];
        Model::new(c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn collinear(k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|i| vec![i as f64, 2.0 * i as f64]).collect()
    }

    #[test]
    fn uniform_random_predictor_mae() {
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for t in 1..=6 {
            for p in 1..=6 {
                truth.push(t);
                pred.push(p);
            }
        }
        assert!((mean_absolute_error(&truth, &pred) - 35.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn median_predictor_mae_is_mean_absolute_deviation() {
        let truth: Vec<usize> = (0..600).map(|i| i % 6 + 1).collect();
        let pred = vec![3; 600];
        // |c - 3| over 1..=6 is 2,1,0,1,2,3
        assert!((mean_absolute_error(&truth, &pred) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn nearest_centroid_on_separated_data() {
        let centroids: Vec<Vec<f64>> = (0..6).map(|i| vec![10.0 * i as f64]).collect();
        let truth: Vec<usize> = (1..=6).collect();
        let pred: Vec<usize> = (0..6).map(|i| nearest_centroid(&centroids, &[10.0 * i as f64 + 1.0])).collect();
        assert_eq!(mean_absolute_error(&truth, &pred), 0.0);
    }

    #[test]
    fn distance_map_properties() {
        let map = distance_map(&collinear(5));
        let unit = map.at(0, 1);
        for i in 0..5 {
            assert_eq!(map.at(i, i), 0.0);
            for j in 0..5 {
                assert_eq!(map.at(i, j), map.at(j, i));
                assert!((map.at(i, j) - unit * i.abs_diff(j) as f64).abs() < 1e-12);
            }
        }
        assert!((map.spearman_with_gap() - 1.0).abs() < 1e-12);
        let ideal = DistanceMap::ideal(5, map.max());
        assert!(ideal.values.iter().zip(&map.values).all(|(a, b)| (a - b).abs() < 1e-12));

        let two = distance_map(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        assert_eq!(two.values, vec![0.0, 5.0, 5.0, 0.0]);

        let img = map.render();
        assert_eq!(img.width, 5 * MAP_CELL);
        assert_eq!(img.pixels.iter().copied().fold(0.0, f64::max), 1.0);
        assert_eq!(img.at(0, 4 * MAP_CELL), 1.0);
        assert!(map.to_csv().lines().count() == 5);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_satisfaction_extremes() {
        assert_eq!(triplet_satisfaction(&collinear(6)).unwrap(), 1.0);
        assert_eq!(triplet_satisfaction(&vec![vec![1.0, 1.0]; 5]).unwrap(), 0.0);
        assert!(triplet_satisfaction(&collinear(2)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = crate::oracle::random_spacing(&mut rng, 4, 6).unwrap().joint_moments();
        let means: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|l| prior.mean(l)[i]).collect()).collect();
        assert_eq!(triplet_satisfaction(&means).unwrap(), 1.0);
        let init = SpacingParams::init(3, 6).unwrap().joint_moments();
        let means: Vec<Vec<f64>> = (0..6).map(|i| (0..3).map(|l| init.mean(l)[i]).collect()).collect();
        assert_eq!(triplet_satisfaction(&means).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn triplets_invariant_under_similarity(
            seed in any::<u64>(),
            angle in 0.0..std::f64::consts::TAU,
            scale in 0.1f64..10.0,
            shift in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let (s, c) = angle.sin_cos();
            let moved: Vec<Vec<f64>> = vs
                .iter()
                .map(|v| vec![scale * (c * v[0] - s * v[1]) + shift[0], scale * (s * v[0] + c * v[1]) + shift[1]])
                .collect();
            let a = triplet_satisfaction(&vs).unwrap();
            let b = triplet_satisfaction(&moved).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn group_vectors_follow_product_of_experts() {
        let model = small_model();
        let test = generate(5, 120, 6).unwrap();
        let one = infer_group_posteriors(&model, &test, 1, 3).unwrap();
        let by = shuffled_levels(&test, 3);
        let single = encode_rows(&model, &test, &[by[2][0]], Latent::Content).unwrap();
        assert_eq!(one[2], single[0]);

        let twenty = infer_group_posteriors(&model, &test, 20, 3).unwrap();
        for (a, b) in twenty.iter().zip(&one) {
            assert!(a.var.iter().zip(&b.var).all(|(x, y)| x <= y));
        }
        assert_eq!(
            infer_group_vectors(&model, &test, 20, 3).unwrap(),
            infer_group_vectors(&model, &test, 20, 3).unwrap()
        );
        match infer_group_vectors(&model, &test, 21, 3) {
            Err(Error::Contract(msg)) => assert!(msg.contains("level 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mae_in_range_and_units_counted() {
        let model = small_model();
        let train = generate(1, 120, 6).unwrap();
        let test = generate(2, 60, 6).unwrap();
        let c = content_mae(&model, &train, &test, Latent::Content, 5, 0).unwrap();
        assert_eq!(c.units, 12);
        assert!((0.0..=5.0).contains(&c.mae));
        let s = content_mae(&model, &train, &test, Latent::Style, 5, 0).unwrap();
        assert_eq!(s.units, 60);
    }

    #[test]
    fn swap_grid_layout() {
        let model = small_model();
        let test = generate(2, 60, 6).unwrap();
        let vectors = infer_group_vectors(&model, &test, 3, 0).unwrap();
        let styles: Vec<&[f64]> = test.instances[..4].iter().map(|i| i.x.as_slice()).collect();
        let refs: Vec<&[f64]> = test.instances[..6].iter().map(|i| i.x.as_slice()).collect();
        let grid = swap_grid(&model, &styles, &vectors, &refs).unwrap();
        assert_eq!((grid.width, grid.height), (7 * SIDE, 5 * SIDE));
        assert_eq!(grid.tile(SIDE, 2, 0), test.instances[1].x);
        assert!(grid.tile(SIDE, 0, 0).iter().all(|&v| v == 0.0));
        let expected = model.decoder.decode(&vectors[3], &model.style_encoder.encode(&test.instances[2].x).unwrap().mean).unwrap();
        assert_eq!(grid.tile(SIDE, 3, 4), expected);
        assert_eq!(swap_pixel_counts(&grid, 6).len(), 4);
    }

    #[test]
    fn evaluate_writes_artifacts_deterministically() {
        let model = small_model();
        let train = generate(1, 120, 6).unwrap();
        let test = generate(2, 60, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = EvalOptions { ms: vec![1, 5], seed: 1, swap_rows: 3 };
        let a = evaluate(&model, &train, &test, &opts, &dir.path().join("a")).unwrap();
        let b = evaluate(&model, &train, &test, &opts, &dir.path().join("b")).unwrap();
        for (x, y) in a.artifacts.iter().zip(&b.artifacts) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let csv = fs::read_to_string(&a.artifacts[0]).unwrap();
        assert!(csv.starts_with("metric,latent,M,value\nmae,content,1,"));
        assert!(a.value("mae", Latent::Style, 5).is_some());
        let swap = crate::image::parse_pgm(&fs::read(&a.artifacts[4]).unwrap()).unwrap();
        assert_eq!((swap.width, swap.height), (7 * SIDE, 4 * SIDE));
    }
}
