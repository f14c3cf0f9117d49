//! Datasets, IDX files, synthetic generators, splits and pool bookkeeping.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Labeled images with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<E: Element = f32> {
    name: String,
    images: Tensor<E>,
    labels: Vec<usize>,
    classes: usize,
}

impl<E: Element> Dataset<E> {
    /// `images` is `[n, c, h, w]`.
    pub fn new(name: impl Into<String>, images: Tensor<E>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("images must be [n, c, h, w], got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch { images: images.rows(), labels: labels.len() });
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
            return Err(Error::InvalidParams("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset { name: name.into(), images, labels, classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<E> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels of the given items, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<E>, Vec<usize>) {
        (self.images.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices);
        Dataset::new(self.name.clone(), images, labels, self.classes)
    }

    /// The first `n` items (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Appends `other`'s items after this dataset's.
    pub fn concat(&self, other: &Dataset<E>) -> Result<Self> {
        if self.image_shape() != other.image_shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.image_shape(), other.image_shape())));
        }
        let images = Tensor::concat_rows(&[&self.images, &other.images])?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(self.name.clone(), images, labels, self.classes.max(other.classes))
    }

    pub fn cast<F: Element>(&self) -> Dataset<F> {
        Dataset { name: self.name.clone(), images: self.images.cast(), labels: self.labels.clone(), classes: self.classes }
    }
}

fn read_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::TruncatedFile(path.to_path_buf()));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), found, expected: magic });
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

/// Reads an IDX image/label file pair (MNIST layout), scaling bytes by 1/255.
///
/// The class count is one more than the largest label, and at least 2.
pub fn load_idx<E: Element>(images_path: &Path, labels_path: &Path) -> Result<Dataset<E>> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let dims = read_header(&img, images_path, IDX_IMAGES, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let count = read_header(&lab, labels_path, IDX_LABELS, 1)?[0];
    if n != count {
        return Err(Error::CountMismatch { images: n, labels: count });
    }
    let pixels = &img[16..];
    if pixels.len() < n * rows * cols {
        return Err(Error::TruncatedFile(images_path.to_path_buf()));
    }
    let labels_raw = &lab[8..];
    if labels_raw.len() < n {
        return Err(Error::TruncatedFile(labels_path.to_path_buf()));
    }
    let data = pixels[..n * rows * cols].iter().map(|&b| E::of(f64::from(b) / 255.0)).collect();
    let labels: Vec<usize> = labels_raw[..n].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    let name = images_path.file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    Dataset::new(name, Tensor::new([n, 1, rows, cols], data)?, labels, classes)
}

/// Writes single-channel datasets as an IDX pair; pixels are rounded to bytes.
pub fn write_idx<E: Element>(d: &Dataset<E>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = d.image_shape();
    if c != 1 {
        return Err(Error::InvalidParams(format!("IDX export needs one channel, got {c}")));
    }
    if d.classes() > 256 {
        return Err(Error::InvalidParams("labels must fit in a byte".into()));
    }
    let mut img = Vec::with_capacity(16 + d.images().len());
    for word in [IDX_IMAGES, d.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend(d.images().data().iter().map(|v| (v.f64() * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + d.len());
    for word in [IDX_LABELS, d.len() as u32] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    lab.extend(d.labels().iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Gaussian clusters around random, well-separated centers in `[0.1, 0.9]^dim`,
/// clipped to `[0, 1]`. Items are ordered class by class.
pub fn synth_blobs<E: Element>(classes: usize, n_per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset<E>> {
    if classes < 2 || n_per_class == 0 || dim == 0 || !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "blobs need classes >= 2, n_per_class >= 1, dim >= 1 and a finite spread >= 0 (got {classes}, {n_per_class}, {dim}, {spread})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Separation target shrinks with crowding so rejection sampling terminates.
    let min_gap = (0.8 * (dim as f64).sqrt() / classes as f64).min(0.3);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while centers.len() < classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..0.9)).collect();
        attempts += 1;
        let far = centers.iter().all(|o| dist(o, &c) >= min_gap);
        if far || attempts > 10_000 {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &v in c {
                let jitter = if spread == 0.0 { 0.0 } else { noise.sample(&mut rng) };
                data.push(E::of((v + jitter).clamp(0.0, 1.0)));
            }
            labels.push(k);
        }
    }
    Dataset::new("blobs", Tensor::new([classes * n_per_class, 1, 1, dim], data)?, labels, classes)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize) -> Vec<(f64, f64)> {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons of the ten digits in a unit box, y pointing down.
fn glyph(digit: usize) -> Vec<Vec<(f64, f64)>> {
    use std::f64::consts::PI;
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.42, 0.0, 2.0 * PI, 24)],
        1 => vec![vec![(0.36, 0.24), (0.52, 0.08), (0.52, 0.92)]],
        2 => vec![{
            let mut p = ellipse(0.5, 0.3, 0.24, 0.2, PI, 2.2 * PI, 10);
            p.extend([(0.24, 0.9), (0.8, 0.9)]);
            p
        }],
        3 => vec![ellipse(0.48, 0.29, 0.23, 0.2, -0.8 * PI, 0.5 * PI, 10), ellipse(0.48, 0.7, 0.27, 0.22, -0.5 * PI, 0.85 * PI, 12)],
        4 => vec![vec![(0.64, 0.92), (0.64, 0.08), (0.18, 0.64), (0.82, 0.64)]],
        5 => vec![{
            let mut p = vec![(0.76, 0.1), (0.32, 0.1), (0.29, 0.45)];
            p.extend(ellipse(0.48, 0.66, 0.26, 0.24, -0.75 * PI, 0.8 * PI, 12));
            p
        }],
        6 => vec![vec![(0.7, 0.1), (0.42, 0.3), (0.28, 0.6)], ellipse(0.5, 0.7, 0.22, 0.21, 0.0, 2.0 * PI, 18)],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.42, 0.92)]],
        8 => vec![ellipse(0.5, 0.28, 0.2, 0.19, 0.0, 2.0 * PI, 16), ellipse(0.5, 0.7, 0.25, 0.22, 0.0, 2.0 * PI, 18)],
        _ => vec![ellipse(0.5, 0.3, 0.22, 0.21, 0.0, 2.0 * PI, 18), vec![(0.72, 0.3), (0.62, 0.92)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render_digit(digit: usize, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    const SIDE: usize = 28;
    let jitter = Normal::new(0.0, 0.035).expect("valid normal");
    let angle = rng.random_range(-0.25..0.25);
    let shear = rng.random_range(-0.3..0.3);
    let sx = rng.random_range(15.0..20.0);
    let sy = rng.random_range(17.0..21.0);
    let tx = 14.0 + rng.random_range(-2.0..2.0);
    let ty = 14.0 + rng.random_range(-2.0..2.0);
    let half_width = rng.random_range(0.7..1.6);
    let peak = rng.random_range(0.95..1.0);
    let (sin, cos) = f64::sin_cos(angle);
    let strokes: Vec<Vec<(f64, f64)>> = glyph(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + jitter.sample(rng) - 0.5, y + jitter.sample(rng) - 0.5);
                    let x = x + shear * y;
                    let (x, y) = (x * sx, y * sy);
                    (tx + cos * x - sin * y, ty + sin * x + cos * y)
                })
                .collect()
        })
        .collect();
    for r in 0..SIDE {
        for c in 0..SIDE {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = peak * (1.0 - (d - half_width).max(0.0)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
}

/// Procedural 28x28 handwritten-style digits with random affine jitter and
/// stroke width; an offline stand-in for MNIST. Labels cycle through 0..9
/// in a shuffled order.
pub fn synth_digits<E: Element>(n: usize, seed: u64) -> Result<Dataset<E>> {
    if n == 0 {
        return Err(Error::InvalidParams("need at least one digit".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    labels.shuffle(&mut rng);
    let mut bytes = Vec::with_capacity(n * 784);
    for &l in &labels {
        render_digit(l, &mut rng, &mut bytes);
    }
    let data = bytes.iter().map(|&b| E::of(f64::from(b) / 255.0)).collect();
    Dataset::new("digits", Tensor::new([n, 1, 28, 28], data)?, labels, 10)
}

/// Shuffled halves of a held-out set: `(validation, test)`, with validation
/// receiving the extra item when `n` is odd.
pub fn split_val_test<E: Element>(d: &Dataset<E>, seed: u64) -> Result<(Dataset<E>, Dataset<E>)> {
    let (val, test) = split_indices(d.len(), seed)?;
    Ok((d.subset(&val)?, d.subset(&test)?))
}

/// Index form of [`split_val_test`].
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n.div_ceil(2));
    Ok((order, test))
}

/// Unlabeled pool `U` and labeled pool `L` over dataset indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolState {
    /// Sorted ascending.
    unlabeled: Vec<usize>,
    /// In acquisition order.
    labeled: Vec<usize>,
    acquired_at: Vec<usize>,
    budget: Option<usize>,
}

impl PoolState {
    /// Samples `initial_count` of `n` items uniformly without replacement
    /// as the stage-0 labeled pool.
    pub fn init(n: usize, initial_count: usize, seed: u64) -> Result<Self> {
        if initial_count > n {
            return Err(Error::CountTooLarge { requested: initial_count, available: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labeled = index::sample(&mut rng, n, initial_count).into_vec();
        labeled.sort_unstable();
        let mut in_l = vec![false; n];
        labeled.iter().for_each(|&i| in_l[i] = true);
        let unlabeled = (0..n).filter(|&i| !in_l[i]).collect();
        Ok(PoolState { unlabeled, acquired_at: vec![0; labeled.len()], labeled, budget: None })
    }

    /// Caps `|L|`; transfers beyond it fail.
    pub fn with_budget(mut self, budget: usize) -> Result<Self> {
        if self.labeled.len() > budget {
            return Err(Error::BudgetTooLarge { requested: self.labeled.len(), available: budget });
        }
        self.budget = Some(budget);
        Ok(self)
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    /// Stage at which each labeled item (same order as [`labeled`](Self::labeled)) was acquired.
    pub fn acquired_at(&self) -> &[usize] {
        &self.acquired_at
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    /// Labels left before the budget is exhausted, bounded by `|U|`.
    pub fn remaining(&self) -> usize {
        let cap = self.budget.map_or(usize::MAX, |b| b - self.labeled.len());
        cap.min(self.unlabeled.len())
    }

    /// Moves `selected` from `U` to `L`, recording `stage`.
    pub fn transfer(&mut self, selected: &[usize], stage: usize) -> Result<()> {
        if let Some(b) = self.budget {
            if self.labeled.len() + selected.len() > b {
                return Err(Error::BudgetTooLarge { requested: selected.len(), available: b - self.labeled.len() });
            }
        }
        let mut sorted = selected.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("selection contains duplicates".into()));
        }
        if let Some(&bad) = sorted.iter().find(|i| self.unlabeled.binary_search(i).is_err()) {
            return Err(Error::InvalidArgument(format!("item {bad} is not in the unlabeled pool")));
        }
        self.unlabeled.retain(|i| sorted.binary_search(i).is_err());
        self.labeled.extend_from_slice(selected);
        self.acquired_at.extend(std::iter::repeat_n(stage, selected.len()));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (a, b) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&a, img).unwrap();
        fs::write(&b, lab).unwrap();
        (a, b)
    }

    fn idx_images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES, n, r, c] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_LABELS, labels.len() as u32] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = write_raw(dir.path(), &idx_images(2, 1, 2, &[0, 255, 128, 7]), &idx_labels(&[3, 1]));
        let d = load_idx::<f32>(&a, &b).unwrap();
        assert_eq!(d.image_shape(), [1, 1, 2]);
        assert_eq!(d.images().data()[0], 0.0);
        assert_eq!(d.images().data()[1], 1.0);
        assert_eq!(d.labels(), &[3, 1]);
        assert_eq!(d.classes(), 4);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        let (a, b) = write_raw(dir.path(), &bad, &idx_labels(&[0]));
        assert!(matches!(load_idx::<f32>(&a, &b), Err(Error::BadMagic { .. })));
        let (a, b) = write_raw(dir.path(), &idx_images(2, 1, 1, &[0, 1]), &idx_labels(&[0]));
        assert!(matches!(load_idx::<f32>(&a, &b), Err(Error::CountMismatch { .. })));
        let (a, b) = write_raw(dir.path(), &idx_images(2, 2, 2, &[0; 5]), &idx_labels(&[0, 1]));
        assert!(matches!(load_idx::<f32>(&a, &b), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn idx_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_digits::<f32>(30, 4).unwrap();
        let (a, b) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, &a, &b).unwrap();
        let back = load_idx::<f32>(&a, &b).unwrap();
        assert_eq!(back.images(), d.images());
        assert_eq!(back.labels(), d.labels());
        let (a2, b2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&back, &a2, &b2).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&a2).unwrap());
    }

    #[test]
    fn blobs_zero_spread_and_determinism() {
        let d = synth_blobs::<f64>(3, 4, 5, 0.0, 1).unwrap();
        for k in 0..3 {
            let first = d.images().row(k * 4).to_vec();
            for i in 1..4 {
                assert_eq!(d.images().row(k * 4 + i), &first[..]);
            }
        }
        assert_eq!(synth_blobs::<f64>(3, 4, 5, 0.1, 9).unwrap(), synth_blobs::<f64>(3, 4, 5, 0.1, 9).unwrap());
        assert!(synth_blobs::<f64>(1, 4, 5, 0.1, 9).is_err());
    }

    #[test]
    fn digits_are_balanced_and_reproducible() {
        let d = synth_digits::<f32>(200, 2).unwrap();
        for k in 0..10 {
            assert_eq!(d.labels().iter().filter(|&&l| l == k).count(), 20);
        }
        assert_eq!(d, synth_digits::<f32>(200, 2).unwrap());
        let ink: f32 = d.images().row(0).iter().sum();
        assert!(ink > 20.0 && ink < 400.0, "ink {ink}");
    }

    #[test]
    fn split_rules() {
        let (v, t) = split_indices(10_000, 0).unwrap();
        assert_eq!((v.len(), t.len()), (5000, 5000));
        let (v, t) = split_indices(3, 0).unwrap();
        assert_eq!((v.len(), t.len()), (2, 1));
        assert_eq!(split_indices(50, 7).unwrap(), split_indices(50, 7).unwrap());
        let (v, t) = split_indices(51, 7).unwrap();
        let mut all: Vec<usize> = v.iter().chain(&t).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..51).collect::<Vec<_>>());
        assert!(matches!(split_indices(1, 0), Err(Error::TooSmall(1))));
    }

    #[test]
    fn pool_initialisation() {
        let p = PoolState::init(100, 20, 3).unwrap();
        assert_eq!(p.labeled().len(), 20);
        assert_eq!(p.unlabeled().len(), 80);
        assert_eq!(p, PoolState::init(100, 20, 3).unwrap());
        assert!(PoolState::init(10, 10, 0).unwrap().unlabeled().is_empty());
        assert!(matches!(PoolState::init(10, 11, 0), Err(Error::CountTooLarge { .. })));
    }

    #[test]
    fn pool_transfer_preserves_union() {
        let mut p = PoolState::init(30, 5, 1).unwrap().with_budget(12).unwrap();
        let pick: Vec<usize> = p.unlabeled()[..4].to_vec();
        p.transfer(&pick, 1).unwrap();
        assert_eq!(p.unlabeled().len(), 21);
        let mut all: Vec<usize> = p.unlabeled().iter().chain(p.labeled()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(&p.acquired_at()[5..], &[1, 1, 1, 1]);
        assert!(p.transfer(&[pick[0]], 2).is_err());
        let more: Vec<usize> = p.unlabeled()[..4].to_vec();
        assert!(matches!(p.transfer(&more, 2), Err(Error::BudgetTooLarge { .. })));
        assert_eq!(p.remaining(), 3);
    }
}
