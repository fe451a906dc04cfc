//! Dataset discovery, k-shot splits, image loading and the synthetic defect fixture.
//!
//! Datasets follow the MVTec directory convention:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect>/*.png          (test/good holds normals)
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// A test image with its label, optional ground-truth mask and defect type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: PathBuf,
    pub label: u8,
    pub mask: Option<PathBuf>,
    pub defect: String,
}

impl TestItem {
    /// Anomalous item whose ground-truth mask could not be found.
    pub fn mask_absent(&self) -> bool {
        self.label == 1 && self.mask.is_none()
    }
}

/// Immutable listing of one dataset category. Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub normal_train: Vec<PathBuf>,
    pub test_items: Vec<TestItem>,
}

impl DatasetIndex {
    pub fn anomaly_count(&self) -> usize {
        self.test_items.iter().filter(|t| t.label == 1).count()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

/// Training/test partition: all training normals, `k` sampled anomalies, the rest for testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSplit {
    /// Dataset root the item paths are relative to.
    pub root: PathBuf,
    pub category: String,
    pub k: usize,
    pub seed: u64,
    pub train_normals: Vec<PathBuf>,
    pub train_anomalies: Vec<TestItem>,
    pub test: Vec<TestItem>,
}

impl KShotSplit {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// RGB image as a `3 × H × W` array with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub source: Option<PathBuf>,
    /// `(height, width)` of the file before resizing.
    pub original_size: (usize, usize),
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        let (_, h, w) = data.dim();
        Self {
            data,
            source: None,
            original_size: (h, w),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Pixel-level ground truth, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub data: Array2<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

fn relative(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}

/// Index a category laid out in the MVTec convention.
///
/// Anomalous test images without a matching `<stem>_mask.png` are kept and
/// flagged (see [`TestItem::mask_absent`]).
pub fn scan_dataset(root: &Path, category: &str) -> Result<DatasetIndex> {
    let base = root.join(category);
    let train = base.join("train");
    let test = base.join("test");
    for dir in [&base, &train, &test] {
        if !dir.is_dir() {
            return Err(Error::Layout(format!("missing directory {}", dir.display())));
        }
    }

    let good = train.join("good");
    let normal_train = if good.is_dir() {
        list_images(&good)?
            .iter()
            .map(|p| relative(root, p))
            .collect()
    } else {
        Vec::new()
    };

    let mut test_items = Vec::new();
    for defect_dir in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
        let defect = defect_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let label = u8::from(defect != "good");
        for img in list_images(&defect_dir)? {
            let mask = if label == 1 {
                let stem = img.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let candidate = base
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{stem}_mask.png"));
                if candidate.is_file() {
                    Some(relative(root, &candidate))
                } else {
                    log::warn!("no ground-truth mask for {}", img.display());
                    None
                }
            } else {
                None
            };
            test_items.push(TestItem {
                path: relative(root, &img),
                label,
                mask,
                defect: defect.clone(),
            });
        }
    }

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        category: category.to_string(),
        normal_train,
        test_items,
    })
}

/// Sample `k` anomalous shots uniformly (pooled over defect types) for training.
pub fn make_kshot_split(index: &DatasetIndex, k: usize, seed: u64) -> Result<KShotSplit> {
    let anomalous: Vec<usize> = index
        .test_items
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label == 1)
        .map(|(i, _)| i)
        .collect();
    if k > anomalous.len() {
        return Err(Error::InsufficientAnomalies {
            requested: k,
            available: anomalous.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = anomalous.choose_multiple(&mut rng, k).copied().collect();

    let train_anomalies = chosen.iter().map(|&i| index.test_items[i].clone()).collect();
    let test = index
        .test_items
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, t)| t.clone())
        .collect();

    Ok(KShotSplit {
        root: index.root.clone(),
        category: index.category.clone(),
        k,
        seed,
        train_normals: index.normal_train.clone(),
        train_anomalies,
        test,
    })
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Load an image as a 3-channel tensor resized (bilinear) to `size × size`.
/// Grayscale inputs are replicated across channels.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut rgb = img.to_rgb32f();
    if (w, h) != (size, size) {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let mut data = Array3::zeros((3, size, size));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = f64::from(px.0[c]).clamp(0.0, 1.0);
        }
    }
    Ok(ImageTensor {
        data,
        source: Some(path.to_path_buf()),
        original_size: (h, w),
    })
}

/// Load a ground-truth mask, nearest-neighbor resized so binarity is preserved.
pub fn load_mask(path: &Path, size: usize) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let mut gray = img.to_luma8();
    if (gray.width() as usize, gray.height() as usize) != (size, size) {
        gray = image::imageops::resize(&gray, size as u32, size as u32, FilterType::Nearest);
    }
    let mut data = Array2::zeros((size, size));
    for (x, y, px) in gray.enumerate_pixels() {
        data[[y as usize, x as usize]] = u8::from(px.0[0] > 127);
    }
    Ok(BinaryMask { data })
}

/// Parameters of the synthetic defect dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Total normal images; a `test_normal_fraction` share goes to `test/good`.
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub size: usize,
    pub seed: u64,
    pub test_normal_fraction: f64,
    pub category: String,
}

impl SyntheticConfig {
    pub fn new(n_normal: usize, n_anomalous: usize, size: usize, seed: u64) -> Self {
        Self {
            n_normal,
            n_anomalous,
            size,
            seed,
            test_normal_fraction: 0.2,
            category: "synthetic".to_string(),
        }
    }
}

const TEXTURE_STD: f64 = 0.05;
const TEXTURE_BASE: [f64; 3] = [0.52, 0.48, 0.44];

fn smooth_texture(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
    let octave = |rng: &mut ChaCha8Rng, cells: usize| -> Array2<f64> {
        let grid = Array2::from_shape_fn((cells, cells), |_| rng.sample::<f64, _>(StandardNormal));
        raster::resize_bilinear(&grid, size, size)
    };
    let coarse = octave(rng, (size / 16).max(2) + 1);
    let medium = octave(rng, (size / 4).max(2) + 1);
    let mut field = coarse + &(medium * 0.5);
    let mean = field.mean().unwrap_or(0.0);
    let std = field.std(0.0).max(1e-12);
    field.mapv_inplace(|v| (v - mean) / std * TEXTURE_STD);

    let mut img = Array3::zeros((3, size, size));
    for c in 0..3 {
        let tint = TEXTURE_BASE[c] + rng.random_range(-0.02..0.02);
        for y in 0..size {
            for x in 0..size {
                let fine: f64 = rng.sample::<f64, _>(StandardNormal) * 0.005;
                img[[c, y, x]] = (tint + field[[y, x]] + fine).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn draw_blob(rng: &mut ChaCha8Rng, size: usize, mask: &mut Array2<u8>) {
    let s = size as f64;
    let area = rng.random_range(0.01..0.04) * s * s;
    let aspect: f64 = rng.random_range(0.6..1.6);
    let ry = (area / (std::f64::consts::PI * aspect)).sqrt();
    let rx = ry * aspect;
    let r = rx.max(ry);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                mask[[y, x]] = 1;
            }
        }
    }
}

fn draw_scratch(rng: &mut ChaCha8Rng, size: usize, mask: &mut Array2<u8>) {
    let s = size as f64;
    let len = rng.random_range(0.25..0.45) * s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos() * len, theta.sin() * len);
    let margin: f64 = 3.0;
    let x0 = rng.random_range(margin.max(margin - dx)..(s - margin).min(s - margin - dx));
    let y0 = rng.random_range(margin.max(margin - dy)..(s - margin).min(s - margin - dy));
    let half_width = 1.25;
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - x0;
            let py = y as f64 + 0.5 - y0;
            let t = ((px * dx + py * dy) / (len * len)).clamp(0.0, 1.0);
            let ex = px - t * dx;
            let ey = py - t * dy;
            if (ex * ex + ey * ey).sqrt() <= half_width {
                mask[[y, x]] = 1;
            }
        }
    }
}

fn write_rgb(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    out.save(path).map_err(|e| image_error(path, e))
}

fn write_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    out.save(path).map_err(|e| image_error(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write a seed-deterministic synthetic dataset under `out/<category>` and index it.
///
/// Normals are smooth correlated-noise textures. Anomalies are the same kind of
/// texture with 1–3 high-contrast blobs (`test/blob`) or scratches
/// (`test/scratch`), each defect covering roughly 1–4 % of the image, with exact masks.
pub fn generate_synthetic(config: &SyntheticConfig, out: &Path) -> Result<DatasetIndex> {
    if config.size < 16 {
        return Err(Error::Contract(format!(
            "synthetic image size must be at least 16, got {}",
            config.size
        )));
    }
    let base = out.join(&config.category);
    let train_good = base.join("train/good");
    let test_good = base.join("test/good");
    create_dir(&train_good)?;
    create_dir(&test_good)?;

    let size = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_test_normal = (config.n_normal as f64 * config.test_normal_fraction).round() as usize;
    let n_train_normal = config.n_normal - n_test_normal.min(config.n_normal);

    for i in 0..config.n_normal {
        let img = smooth_texture(&mut rng, size);
        let dir = if i < n_train_normal { &train_good } else { &test_good };
        let idx = if i < n_train_normal { i } else { i - n_train_normal };
        write_rgb(&img, &dir.join(format!("{idx:03}.png")))?;
    }

    for i in 0..config.n_anomalous {
        let mut img = smooth_texture(&mut rng, size);
        let scratch = rng.random_bool(0.5);
        let defect = if scratch { "scratch" } else { "blob" };
        let mut mask = Array2::<u8>::zeros((size, size));
        let n_defects = rng.random_range(1..=3);
        for _ in 0..n_defects {
            let mut single = Array2::<u8>::zeros((size, size));
            if scratch {
                draw_scratch(&mut rng, size, &mut single);
            } else {
                draw_blob(&mut rng, size, &mut single);
            }
            let magnitude = rng.random_range(0.25..0.35);
            let delta: f64 = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            for ((y, x), &m) in single.indexed_iter() {
                if m != 0 {
                    mask[[y, x]] = 1;
                    for c in 0..3 {
                        img[[c, y, x]] = (img[[c, y, x]] + delta).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let img_dir = base.join("test").join(defect);
        let gt_dir = base.join("ground_truth").join(defect);
        create_dir(&img_dir)?;
        create_dir(&gt_dir)?;
        write_rgb(&img, &img_dir.join(format!("{i:03}.png")))?;
        write_mask(&mask, &gt_dir.join(format!("{i:03}_mask.png")))?;
    }

    scan_dataset(out, &config.category)
}

/// Deterministic shuffle helper shared by the trainer.
pub(crate) fn shuffled<T: Clone>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_png(path: &Path, w: u32, h: u32, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, Rgb([value, value, value]))
            .save(path)
            .unwrap();
    }

    fn fake_index(n_anomalies: usize) -> DatasetIndex {
        DatasetIndex {
            root: PathBuf::from("/data"),
            category: "cat".into(),
            normal_train: (0..5).map(|i| PathBuf::from(format!("cat/train/good/{i}.png"))).collect(),
            test_items: (0..n_anomalies + 3)
                .map(|i| TestItem {
                    path: PathBuf::from(format!("cat/test/x/{i}.png")),
                    label: u8::from(i >= 3),
                    mask: None,
                    defect: if i >= 3 { "crack".into() } else { "good".into() },
                })
                .collect(),
        }
    }

    #[test]
    fn scan_counts_train_normals() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            touch_png(&dir.path().join(format!("c/train/good/{i}.png")), 4, 4, 0);
        }
        fs::create_dir_all(dir.path().join("c/test")).unwrap();
        let index = scan_dataset(dir.path(), "c").unwrap();
        assert_eq!(index.normal_train.len(), 3);
        assert!(index.test_items.is_empty());
    }

    #[test]
    fn scan_labels_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_png(&root.join("c/train/good/0.png"), 4, 4, 0);
        touch_png(&root.join("c/test/good/0.png"), 4, 4, 0);
        touch_png(&root.join("c/test/good/1.png"), 4, 4, 0);
        touch_png(&root.join("c/test/crack/0.png"), 4, 4, 0);
        touch_png(&root.join("c/ground_truth/crack/0_mask.png"), 4, 4, 255);
        let index = scan_dataset(root, "c").unwrap();
        let labels: Vec<u8> = index.test_items.iter().map(|t| t.label).collect();
        assert_eq!(labels, vec![1, 0, 0]);
        let masks = index.test_items.iter().filter(|t| t.mask.is_some()).count();
        assert_eq!(masks, 1);
        let mut sorted: Vec<u8> = labels.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 0, 1]);
    }

    #[test]
    fn missing_mask_is_flagged_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("c/train/good")).unwrap();
        touch_png(&root.join("c/test/hole/a.png"), 4, 4, 0);
        let index = scan_dataset(root, "c").unwrap();
        assert!(index.test_items[0].mask_absent());
    }

    #[test]
    fn missing_category_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_dataset(dir.path(), "nope").unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn kshot_counts() {
        let index = fake_index(20);
        let split = make_kshot_split(&index, 8, 0).unwrap();
        assert_eq!(split.train_anomalies.len(), 8);
        assert_eq!(split.test.iter().filter(|t| t.label == 1).count(), 12);
        assert_eq!(split.train_normals.len(), 5);
        for a in &split.train_anomalies {
            assert!(!split.test.contains(a));
        }
    }

    #[test]
    fn kshot_zero_keeps_all_anomalies_in_test() {
        let index = fake_index(6);
        let split = make_kshot_split(&index, 0, 3).unwrap();
        assert!(split.train_anomalies.is_empty());
        assert_eq!(split.test.len(), index.test_items.len());
    }

    #[test]
    fn kshot_is_deterministic_and_seed_sensitive() {
        let index = fake_index(10);
        let a = make_kshot_split(&index, 4, 7).unwrap();
        let b = make_kshot_split(&index, 4, 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let distinct = (0..10)
            .map(|s| make_kshot_split(&index, 4, s).unwrap().train_anomalies)
            .filter(|t| *t != a.train_anomalies)
            .count();
        assert!(distinct >= 1);
    }

    #[test]
    fn kshot_rejects_large_k() {
        let index = fake_index(3);
        match make_kshot_split(&index, 4, 0).unwrap_err() {
            Error::InsufficientAnomalies { requested, available } => {
                assert_eq!((requested, available), (4, 3));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn load_resizes_tall_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.png");
        let img = RgbImage::from_fn(1024, 700, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 128]));
        img.save(&p).unwrap();
        let t = load_image(&p, 224).unwrap();
        assert_eq!(t.data.dim(), (3, 224, 224));
        assert_eq!(t.original_size, (700, 1024));
        assert!(t.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn load_same_size_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("id.png");
        let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, ((x + y) * 3) as u8]));
        img.save(&p).unwrap();
        let t = load_image(&p, 32).unwrap();
        for y in 0..32u32 {
            for x in 0..32u32 {
                let px = img.get_pixel(x, y).0;
                for c in 0..3 {
                    let expect = f64::from(px[c]) / 255.0;
                    assert!((t.data[[c, y as usize, x as usize]] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn black_image_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        touch_png(&p, 40, 30, 0);
        let t = load_image(&p, 16).unwrap();
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        GrayImage::from_fn(8, 8, |x, _| Luma([(x * 30) as u8])).save(&p).unwrap();
        let t = load_image(&p, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(t.data[[0, y, x]], t.data[[1, y, x]]);
                assert_eq!(t.data[[1, y, x]], t.data[[2, y, x]]);
            }
        }
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not an image").unwrap();
        match load_image(&p, 8).unwrap_err() {
            Error::Image { path, .. } => assert_eq!(path, p),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        GrayImage::from_fn(37, 53, |x, y| Luma([if (x * y) % 7 < 3 { 255 } else { 0 }]))
            .save(&p)
            .unwrap();
        for size in [16, 64, 100] {
            let m = load_mask(&p, size).unwrap();
            assert_eq!(m.data.dim(), (size, size));
            assert!(m.data.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(20, 6, 32, 1);
        let ia = generate_synthetic(&cfg, a.path()).unwrap();
        let ib = generate_synthetic(&cfg, b.path()).unwrap();
        let normals = ia.normal_train.len() + ia.test_items.iter().filter(|t| t.label == 0).count();
        assert_eq!(normals, 20);
        assert_eq!(ia.anomaly_count(), 6);
        assert_eq!(ia.test_items.iter().filter(|t| t.mask.is_some()).count(), 6);
        for (ta, tb) in ia.test_items.iter().zip(&ib.test_items) {
            assert_eq!(ta.path, tb.path);
            let da = fs::read(ia.resolve(&ta.path)).unwrap();
            let db = fs::read(ib.resolve(&tb.path)).unwrap();
            assert_eq!(da, db);
        }
    }

    #[test]
    fn synthetic_without_anomalies_has_no_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(5, 0, 32, 2);
        generate_synthetic(&cfg, dir.path()).unwrap();
        assert!(!dir.path().join("synthetic/ground_truth").exists());
    }

    #[test]
    fn synthetic_defects_are_high_contrast() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(2, 8, 64, 5);
        let index = generate_synthetic(&cfg, dir.path()).unwrap();
        for item in index.test_items.iter().filter(|t| t.label == 1) {
            let mask = load_mask(&index.resolve(item.mask.as_ref().unwrap()), 64).unwrap();
            let frac = mask.count() as f64 / (64.0 * 64.0);
            assert!(frac > 0.005 && frac < 0.15, "mask fraction {frac}");
        }
    }
}
