use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, TAG_SUBSET, TAG_SYNTH};
use crate::{CoreError, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "test" => Ok(Split::Val),
            other => Err(CoreError::Invalid(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Cifar10Binary,
    ImageFolder,
    SyntheticSpec,
}

impl FromStr for DatasetFormat {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(Self::Cifar10Binary),
            "image-folder" => Ok(Self::ImageFolder),
            "synthetic-spec" => Ok(Self::SyntheticSpec),
            other => Err(CoreError::Dataset(format!(
                "unknown format `{other}` (expected cifar10-binary, image-folder or synthetic-spec)"
            ))),
        }
    }
}

/// Borrowed `C x H x W` uint8 image.
#[derive(Clone, Copy, Debug)]
pub struct ImageRef<'a> {
    pub data: &'a [u8],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `N x C x H x W`, channel-planar per image.
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            split,
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(CoreError::Dataset(format!("{} is empty", self.name)));
        }
        if self.channels * self.height * self.width == 0 {
            return Err(CoreError::Dataset("image extents must be positive".into()));
        }
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(CoreError::Dataset(format!(
                "{} labels but {} pixel bytes",
                self.labels.len(),
                self.images.len()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize >= self.num_classes) {
            return Err(CoreError::Dataset(format!(
                "label {l} of item {i} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> ImageRef<'_> {
        let n = self.image_len();
        ImageRef {
            data: &self.images[i * n..(i + 1) * n],
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CoreError::Dataset(format!("index {i} outside {} items", self.len())));
            }
            images.extend_from_slice(self.image(i).data);
            labels.push(self.labels[i]);
        }
        Dataset::new(name, self.split, (self.channels, self.height, self.width), self.num_classes, images, labels)
    }
}

/// Uniform sample without replacement of `ceil(fraction * N)` items, kept in
/// their original order.
pub fn make_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::config("dataset.fraction", format!("must be in (0, 1], got {fraction}")));
    }
    let n = ds.len();
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        sample(&mut stream(seed, &[TAG_SUBSET]), n, k).into_vec()
    };
    idx.sort_unstable();
    ds.select(&idx, format!("{}[{fraction}]", ds.name))
}

pub fn load_dataset(path: &Path, format: DatasetFormat, split: Split) -> Result<Dataset> {
    load_dataset_sized(path, format, split, None)
}

/// `image_size` resizes image-folder items to a square side (default 32).
pub fn load_dataset_sized(path: &Path, format: DatasetFormat, split: Split, image_size: Option<usize>) -> Result<Dataset> {
    match format {
        DatasetFormat::Cifar10Binary => load_cifar10(path, split),
        DatasetFormat::ImageFolder => load_image_folder(path, split, image_size.unwrap_or(CIFAR_SIDE)),
        DatasetFormat::SyntheticSpec => {
            let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
            let spec: SyntheticSpec = toml::from_str(&text)?;
            spec.generate(split)
        }
    }
}

// ---- cifar10-binary -------------------------------------------------------

fn cifar_files(path: &Path, split: Split) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CoreError::Dataset(format!(
            "{} not found; expected the CIFAR-10 binary batches (data_batch_1.bin .. data_batch_5.bin, test_batch.bin)",
            path.display()
        )));
    }
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Val => vec!["test_batch.bin".into()],
    };
    let files: Vec<PathBuf> = names.iter().map(|n| path.join(n)).collect();
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(CoreError::Dataset(format!("missing CIFAR-10 batch {}", missing.display())));
    }
    Ok(files)
}

/// Parses concatenated 3073-byte records (label byte, then 1024 bytes per
/// R, G, B plane).
pub fn parse_cifar10_records(bytes: &[u8], path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u32>) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(CoreError::Corrupt {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(CoreError::Corrupt {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                detail: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as u32);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in cifar_files(path, split)? {
        let bytes = fs::read(&f).map_err(|e| CoreError::io(&f, e))?;
        parse_cifar10_records(&bytes, &f, &mut images, &mut labels)?;
    }
    Dataset::new(
        format!("cifar10:{}", path.display()),
        split,
        (3, CIFAR_SIDE, CIFAR_SIDE),
        CIFAR_CLASSES,
        images,
        labels,
    )
}

// ---- image-folder ---------------------------------------------------------

/// `root/<class>/<image>`, or `root/{train,val}/<class>/<image>` when split
/// directories exist. Classes are sorted directory names.
fn load_image_folder(root: &Path, split: Split, side: usize) -> Result<Dataset> {
    let split_dir = match split {
        Split::Train => root.join("train"),
        Split::Val => {
            let v = root.join("val");
            if v.is_dir() {
                v
            } else {
                root.join("test")
            }
        }
    };
    let base = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| CoreError::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let classes: Vec<PathBuf> = read_dir(&base)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(CoreError::Dataset(format!("{} has no class directories", base.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        for file in read_dir(dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
            if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                continue;
            }
            let img = image::open(&file)
                .map_err(|e| CoreError::Dataset(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let img = if img.width() as usize != side || img.height() as usize != side {
                image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle)
            } else {
                img
            };
            for c in 0..3 {
                images.extend(img.pixels().map(|p| p.0[c]));
            }
            labels.push(label as u32);
        }
    }
    Dataset::new(
        format!("folder:{}", base.display()),
        split,
        (3, side, side),
        classes.len(),
        images,
        labels,
    )
}

// ---- synthetic-spec -------------------------------------------------------

/// Labeled Gaussian-blob images. Each class has a prototype blob (center,
/// radius, colour); items jitter the prototype and add pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Validation items; defaults to `n / 4` (at least one).
    #[serde(default)]
    pub n_val: Option<usize>,
}

fn default_channels() -> usize {
    3
}

struct Prototype {
    cy: f64,
    cx: f64,
    radius: f64,
    colour: [f64; 3],
}

impl SyntheticSpec {
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        if self.n == 0 || self.classes == 0 || self.image_size < 4 || !(self.channels == 1 || self.channels == 3) {
            return Err(CoreError::config(
                "synthetic",
                "needs n >= 1, classes >= 1, image_size >= 4 and 1 or 3 channels",
            ));
        }
        let s = self.image_size as f64;
        let mut proto_rng = stream(self.seed, &[TAG_SYNTH, 0]);
        let protos: Vec<Prototype> = (0..self.classes)
            .map(|_| Prototype {
                cy: proto_rng.random_range(0.25..0.75) * s,
                cx: proto_rng.random_range(0.25..0.75) * s,
                radius: proto_rng.random_range(0.1..0.25) * s,
                colour: [proto_rng.random(), proto_rng.random(), proto_rng.random()],
            })
            .collect();
        let (count, tag) = match split {
            Split::Train => (self.n, 1),
            Split::Val => (self.n_val.unwrap_or(self.n / 4).max(1), 2),
        };
        let mut rng = stream(self.seed, &[TAG_SYNTH, tag]);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let jitter = Normal::new(0.0, 0.08 * s).unwrap();
        let side = self.image_size;
        let mut images = Vec::with_capacity(count * self.channels * side * side);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % self.classes;
            let p = &protos[label];
            let cy = p.cy + jitter.sample(&mut rng);
            let cx = p.cx + jitter.sample(&mut rng);
            let r = p.radius * rng.random_range(0.8..1.2);
            let bg: f64 = rng.random_range(0.2..0.5);
            let colour: Vec<f64> = p.colour.iter().map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
            let mut planes = vec![0u8; self.channels * side * side];
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let a = (-d2 / (2.0 * r * r)).exp();
                    for c in 0..self.channels {
                        let col = if self.channels == 1 { colour.iter().sum::<f64>() / 3.0 } else { colour[c] };
                        let v = bg * (1.0 - a) + col * a + noise.sample(&mut rng);
                        planes[(c * side + y) * side + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            images.extend_from_slice(&planes);
            labels.push(label as u32);
        }
        Dataset::new(
            format!("synthetic:{}x{}:{}", self.n, self.classes, self.seed),
            split,
            (self.channels, side, side),
            self.classes,
            images,
            labels,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec { n: 256, classes: 4, image_size: 8, seed: 0, channels: 3, n_val: None }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = spec().generate(Split::Train).unwrap();
        let b = spec().generate(Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert_eq!(spec().generate(Split::Val).unwrap().len(), 64);
        assert_ne!(a.images[..192], spec().generate(Split::Val).unwrap().images[..192]);
    }

    #[test]
    fn truncated_cifar_file_names_the_offset() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD + 100];
        bytes[CIFAR_RECORD] = 9;
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        match parse_cifar10_records(&bytes, Path::new("x.bin"), &mut im, &mut lb) {
            Err(CoreError::Corrupt { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        bytes.truncate(2 * CIFAR_RECORD);
        parse_cifar10_records(&bytes, Path::new("x.bin"), &mut im, &mut lb).unwrap();
        assert_eq!(lb, vec![0, 9]);
        assert_eq!(im.len(), 2 * 3072);
    }

    #[test]
    fn cifar_label_out_of_range_is_rejected() {
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        assert!(parse_cifar10_records(&bytes, Path::new("x.bin"), &mut im, &mut lb).is_err());
    }

    #[test]
    fn subsets() {
        let ds = spec().generate(Split::Train).unwrap();
        assert_eq!(make_subset(&ds, 1.0, 3).unwrap().images, ds.images);
        let a = make_subset(&ds, 0.05, 3).unwrap();
        assert_eq!(a.len(), 13);
        assert_eq!(a, make_subset(&ds, 0.05, 3).unwrap());
        assert_ne!(a.images, make_subset(&ds, 0.05, 4).unwrap().images);
        assert!(make_subset(&ds, 0.0, 3).is_err());
        assert!(make_subset(&ds, 1.5, 3).is_err());
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (c, colour) in [("cat", [255u8, 0, 0]), ("dog", [0, 0, 255])] {
            fs::create_dir_all(dir.path().join(c)).unwrap();
            let img = image::RgbImage::from_pixel(8, 8, image::Rgb(colour));
            img.save(dir.path().join(c).join("a.png")).unwrap();
        }
        let ds = load_dataset_sized(dir.path(), DatasetFormat::ImageFolder, Split::Train, Some(8)).unwrap();
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.image(0).data[0], 255);
        assert_eq!(ds.image(1).data[2 * 64], 255);
    }

    #[test]
    fn unknown_format_is_an_error() {
        assert!("jpeg-zip".parse::<DatasetFormat>().is_err());
        assert!(load_dataset(Path::new("/nonexistent"), DatasetFormat::Cifar10Binary, Split::Train).is_err());
    }
}
