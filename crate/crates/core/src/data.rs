//! Synthetic HAR-like dataset generation, dataset I/O, and test-time
//! corruption.
//!
//! Each class mixes a class-specific sinusoid (spectral signal for the
//! 1-D teacher) with a class-specific number of tall Gaussian bumps
//! (local-minima structure for the persistence-image teacher), plus white
//! noise.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, DataHeader, DATA_FORMAT};
use crate::error::{Error, Result};
use crate::topology::{PersistenceImage, SignalWindow};

/// Baseline sinusoid amplitude. Kept below the bump height so bump-induced
/// persistence pairs dominate the topological signal, and close to the noise
/// floor so the spectral task is not trivially easy.
pub const SINE_AMPLITUDE: f64 = 0.3;
/// Gaussian bump height added `class` times per window.
pub const BUMP_AMPLITUDE: f64 = 1.5;
/// White-noise standard deviation.
pub const NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::MalformedHeader(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub window_length: usize,
    pub sample_rate_hz: f64,
    pub generator_seed: u64,
}

/// A labelled collection of equally shaped windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub windows: Vec<SignalWindow>,
    pub classes: usize,
    pub split: Split,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label.unwrap_or(0)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.windows.iter().enumerate() {
            w.validate().map_err(|e| e.at_window(i))?;
            if w.channels != self.meta.channels || w.length != self.meta.window_length {
                return Err(Error::ShapeMismatch {
                    expected: format!("[{} x {}]", self.meta.channels, self.meta.window_length),
                    actual: format!("window {i}: [{} x {}]", w.channels, w.length),
                });
            }
            match w.label {
                Some(l) if l < self.classes => {}
                other => {
                    return Err(Error::Config(format!(
                        "window {i} label {other:?} out of range for {} classes",
                        self.classes
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Generate a balanced synthetic dataset. Class `j` windows carry a
/// sinusoid of `1 + j/2` cycles per window plus `j` Gaussian bumps
/// (amplitude 1.5, width `length / 40`) at stratified random positions,
/// with white noise of std 0.1 on top.
pub fn gen_synthetic(
    classes: usize,
    samples_per_class: usize,
    channels: usize,
    length: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("{classes} classes < 2")));
    }
    if length < 32 {
        return Err(Error::Config(format!("window length {length} < 32")));
    }
    if channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let bump_width = length as f64 / 40.0;
    let sample_rate_hz = 100.0;

    let mut windows = Vec::with_capacity(classes * samples_per_class);
    for class in 0..classes {
        let cycles = 1.0 + class as f64 / 2.0;
        for _ in 0..samples_per_class {
            let mut values = Vec::with_capacity(channels * length);
            for _c in 0..channels {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                // one bump per stratum, jittered but kept 6 widths apart so
                // bumps never merge into a single local maximum
                let margin = 3.0 * bump_width;
                let span = (length as f64 - 2.0 * margin) / class.max(1) as f64;
                let jitter = (span / 2.0 - 3.0 * bump_width).max(0.0);
                let bumps: Vec<f64> = (0..class)
                    .map(|i| {
                        let center = margin + (i as f64 + 0.5) * span;
                        center + rng.gen_range(-jitter..=jitter)
                    })
                    .collect();
                for i in 0..length {
                    let t = i as f64 / length as f64;
                    let mut v = SINE_AMPLITUDE * (std::f64::consts::TAU * cycles * t + phase).sin();
                    for &pos in &bumps {
                        let d = (i as f64 - pos) / bump_width;
                        v += BUMP_AMPLITUDE * (-0.5 * d * d).exp();
                    }
                    v += noise.sample(&mut rng);
                    values.push(v);
                }
            }
            windows.push(SignalWindow {
                values,
                channels,
                length,
                sample_rate_hz,
                label: Some(class),
            });
        }
    }
    Ok(Dataset {
        windows,
        classes,
        split: Split::Train,
        meta: DatasetMeta {
            channels,
            window_length: length,
            sample_rate_hz,
            generator_seed: seed,
        },
    })
}

/// Test-time corruption severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLevel {
    /// Fraction of the window zeroed as one contiguous segment.
    pub kappa_r: f64,
    /// Std of Gaussian noise added to every sample.
    pub sigma_g: f64,
}

impl CorruptionLevel {
    pub const CLEAN: CorruptionLevel = CorruptionLevel { kappa_r: 0.0, sigma_g: 0.0 };
    pub const LEVEL1: CorruptionLevel = CorruptionLevel { kappa_r: 0.15, sigma_g: 0.06 };
    pub const LEVEL2: CorruptionLevel = CorruptionLevel { kappa_r: 0.22, sigma_g: 0.09 };
    pub const LEVEL3: CorruptionLevel = CorruptionLevel { kappa_r: 0.30, sigma_g: 0.12 };

    pub fn numbered(level: usize) -> Option<CorruptionLevel> {
        match level {
            0 => Some(Self::CLEAN),
            1 => Some(Self::LEVEL1),
            2 => Some(Self::LEVEL2),
            3 => Some(Self::LEVEL3),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.kappa_r) {
            return Err(Error::Config(format!("kappa_r {} must be in [0, 1)", self.kappa_r)));
        }
        if self.sigma_g < 0.0 {
            return Err(Error::Config(format!("sigma_g {} must be non-negative", self.sigma_g)));
        }
        Ok(())
    }
}

/// Zero a contiguous segment of `round(kappa_r * length)` samples (same
/// time span in every channel), then add Gaussian noise everywhere.
/// Labels and shapes are untouched.
pub fn corrupt(ds: &Dataset, level: CorruptionLevel, seed: u64) -> Result<Dataset> {
    level.validate()?;
    let mut out = ds.clone();
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    for w in &mut out.windows {
        let len = w.length;
        let seg = ((level.kappa_r * len as f64).round() as usize).min(len);
        if seg > 0 {
            let start = rng.gen_range(0..=len - seg);
            for c in 0..w.channels {
                for i in start..start + seg {
                    w.values[c * len + i] = 0.0;
                }
            }
        }
        if level.sigma_g > 0.0 {
            let noise = Normal::new(0.0, level.sigma_g).unwrap();
            for v in &mut w.values {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let header = DataHeader {
        format: DATA_FORMAT.into(),
        kind: "series".into(),
        classes: ds.classes,
        split: ds.split.as_str().into(),
        count: ds.windows.len(),
        channels: ds.meta.channels,
        dim: ds.meta.window_length,
        sample_rate_hz: ds.meta.sample_rate_hz,
        generator_seed: ds.meta.generator_seed,
        values_len: ds.windows.len() * ds.meta.channels * ds.meta.window_length,
        labels_len: ds.windows.len(),
    };
    let values = container::f32_blob(ds.windows.iter().flat_map(|w| w.values.iter().copied()));
    let labels: Vec<u32> = ds.windows.iter().map(|w| w.label.unwrap_or(0) as u32).collect();
    container::write_data_container(path, &header, &values, &labels)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, values, labels) = container::read_data_container(path)?;
    if header.kind != "series" {
        return Err(Error::WrongKind {
            expected: "series".into(),
            found: header.kind,
        });
    }
    let per = header.channels * header.dim;
    let mut windows = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let vals: Vec<f64> = values[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
        let label = labels[i] as usize;
        if label >= header.classes {
            return Err(Error::Config(format!(
                "window {i} label {label} out of range for {} classes",
                header.classes
            )));
        }
        windows.push(SignalWindow {
            values: vals,
            channels: header.channels,
            length: header.dim,
            sample_rate_hz: header.sample_rate_hz,
            label: Some(label),
        });
    }
    Ok(Dataset {
        windows,
        classes: header.classes,
        split: Split::parse(&header.split)?,
        meta: DatasetMeta {
            channels: header.channels,
            window_length: header.dim,
            sample_rate_hz: header.sample_rate_hz,
            generator_seed: header.generator_seed,
        },
    })
}

/// Persistence images aligned index-for-index with a series dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PiDataset {
    pub images: Vec<PersistenceImage>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub generator_seed: u64,
}

impl PiDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn save_pi_dataset(ds: &PiDataset, path: &Path) -> Result<()> {
    if ds.images.len() != ds.labels.len() {
        return Err(Error::Misaligned(format!(
            "{} images vs {} labels",
            ds.images.len(),
            ds.labels.len()
        )));
    }
    let (channels, resolution) = ds
        .images
        .first()
        .map(|i| (i.channels, i.resolution))
        .unwrap_or((1, 2));
    let header = DataHeader {
        format: DATA_FORMAT.into(),
        kind: "image".into(),
        classes: ds.classes,
        split: ds.split.as_str().into(),
        count: ds.images.len(),
        channels,
        dim: resolution,
        sample_rate_hz: 0.0,
        generator_seed: ds.generator_seed,
        values_len: ds.images.len() * channels * resolution * resolution,
        labels_len: ds.images.len(),
    };
    let values = container::f32_blob(ds.images.iter().flat_map(|i| i.pixels.iter().copied()));
    let labels: Vec<u32> = ds.labels.iter().map(|&l| l as u32).collect();
    container::write_data_container(path, &header, &values, &labels)
}

pub fn load_pi_dataset(path: &Path) -> Result<PiDataset> {
    let (header, values, labels) = container::read_data_container(path)?;
    if header.kind != "image" {
        return Err(Error::WrongKind {
            expected: "image".into(),
            found: header.kind,
        });
    }
    let per = header.channels * header.dim * header.dim;
    let mut images = Vec::with_capacity(header.count);
    for i in 0..header.count {
        images.push(PersistenceImage {
            pixels: values[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect(),
            channels: header.channels,
            resolution: header.dim,
        });
    }
    Ok(PiDataset {
        images,
        labels: labels.into_iter().map(|l| l as usize).collect(),
        classes: header.classes,
        split: Split::parse(&header.split)?,
        generator_seed: header.generator_seed,
    })
}

/// Import windows from CSV: one row per window, `label` first, then
/// channel-major values.
pub fn import_csv(path: &Path, channels: usize, classes: usize, sample_rate_hz: f64) -> Result<Dataset> {
    if channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut windows = Vec::new();
    let mut length = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedHeader(format!("row {i}: {e}")))?;
        if record.len() < 1 + 2 * channels {
            return Err(Error::MalformedHeader(format!(
                "row {i}: {} fields, need a label plus at least 2 samples per channel",
                record.len()
            )));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("row {i}: bad label {:?}", &record[0])))?;
        if label >= classes {
            return Err(Error::Config(format!(
                "row {i}: label {label} out of range for {classes} classes"
            )));
        }
        let values: Vec<f64> = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, s)| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::MalformedHeader(format!("row {i}, field {}: {s:?}", j + 1)))
            })
            .collect::<Result<_>>()?;
        if values.len() % channels != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("row {i}: multiple of {channels} values"),
                actual: format!("{}", values.len()),
            });
        }
        let this_len = values.len() / channels;
        match length {
            None => length = Some(this_len),
            Some(l) if l == this_len => {}
            Some(l) => {
                return Err(Error::ShapeMismatch {
                    expected: format!("window length {l}"),
                    actual: format!("row {i}: {this_len}"),
                })
            }
        }
        windows.push(SignalWindow::new(values, channels, this_len, sample_rate_hz, Some(label))
            .map_err(|e| e.at_window(i))?);
    }
    let window_length = length.ok_or(Error::EmptyDataset)?;
    Ok(Dataset {
        windows,
        classes,
        split: Split::Train,
        meta: DatasetMeta {
            channels,
            window_length,
            sample_rate_hz,
            generator_seed: 0,
        },
    })
}

/// A batched view over either representation, for model training and
/// evaluation.
pub enum ModelData<'a> {
    Series(&'a Dataset),
    Images(&'a PiDataset),
}

impl<'a> ModelData<'a> {
    pub fn len(&self) -> usize {
        match self {
            ModelData::Series(d) => d.len(),
            ModelData::Images(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelData::Series(d) => d.classes,
            ModelData::Images(d) => d.classes,
        }
    }

    pub fn label(&self, i: usize) -> usize {
        match self {
            ModelData::Series(d) => d.windows[i].label.unwrap_or(0),
            ModelData::Images(d) => d.labels[i],
        }
    }

    /// Gather rows into a dense batch: `(shape, values, labels)`.
    pub fn gather(&self, indices: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
        match self {
            ModelData::Series(d) => {
                let (c, l) = (d.meta.channels, d.meta.window_length);
                let mut values = Vec::with_capacity(indices.len() * c * l);
                let mut labels = Vec::with_capacity(indices.len());
                for &i in indices {
                    values.extend_from_slice(&d.windows[i].values);
                    labels.push(d.windows[i].label.unwrap_or(0));
                }
                (vec![indices.len(), c, l], values, labels)
            }
            ModelData::Images(d) => {
                let (c, r) = d
                    .images
                    .first()
                    .map(|im| (im.channels, im.resolution))
                    .unwrap_or((1, 2));
                let mut values = Vec::with_capacity(indices.len() * c * r * r);
                let mut labels = Vec::with_capacity(indices.len());
                for &i in indices {
                    values.extend_from_slice(&d.images[i].pixels);
                    labels.push(d.labels[i]);
                }
                (vec![indices.len(), c, r, r], values, labels)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{sublevel_diagram, PiConfig};

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = gen_synthetic(3, 5, 2, 64, 42).unwrap();
        let b = gen_synthetic(3, 5, 2, 64, 42).unwrap();
        assert_eq!(a, b);
        for class in 0..3 {
            let count = a.windows.iter().filter(|w| w.label == Some(class)).count();
            assert_eq!(count, 5);
        }
        let c = gen_synthetic(3, 5, 2, 64, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_samples_gives_empty_dataset() {
        let ds = gen_synthetic(2, 0, 3, 64, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn higher_classes_have_more_prominent_pairs() {
        // class j should average about j more finite pairs with lifetime > 1
        // than class 0
        let per_class = 100;
        let ds = gen_synthetic(4, per_class, 1, 128, 7).unwrap();
        let mut mean_prominent = vec![0.0f64; 4];
        for w in &ds.windows {
            let pd = sublevel_diagram(w).unwrap();
            let prominent = pd.pairs[0].iter().filter(|(b, d)| d - b > 1.0).count();
            mean_prominent[w.label.unwrap()] += prominent as f64 / per_class as f64;
        }
        for j in 1..4 {
            let extra = mean_prominent[j] - mean_prominent[0];
            assert!(
                (extra - j as f64).abs() < 0.75,
                "class {j}: expected ~{j} extra prominent pairs, got {extra:.2} \
                 (means {mean_prominent:?})"
            );
        }
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let ds = gen_synthetic(2, 4, 2, 64, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        // values pass through f32 on disk; compare at f32 precision
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.classes, ds.classes);
        for (a, b) in loaded.windows.iter().zip(ds.windows.iter()) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // saving the loaded dataset again is bitwise identical on disk
        let path2 = dir.path().join("d2.bin");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn malformed_header_json_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let garbage = b"{not json";
        let mut bytes = (garbage.len() as u32).to_le_bytes().to_vec();
        bytes.extend_from_slice(garbage);
        std::fs::write(&path, bytes).unwrap();
        match load_dataset(&path) {
            Err(Error::MalformedHeader(_)) => {}
            other => panic!("expected MalformedHeader, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_dataset_file_is_rejected_before_materializing() {
        let ds = gen_synthetic(2, 4, 2, 64, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        match load_dataset(&cut) {
            Err(Error::LengthMismatch(_)) => {}
            other => panic!("expected LengthMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn noop_corruption_is_identity() {
        let ds = gen_synthetic(2, 3, 2, 64, 5).unwrap();
        let c = corrupt(&ds, CorruptionLevel::CLEAN, 1).unwrap();
        assert_eq!(ds, c);
    }

    #[test]
    fn level1_zeroes_exactly_75_of_500() {
        let ds = gen_synthetic(2, 2, 1, 500, 5).unwrap();
        let c = corrupt(&ds, CorruptionLevel::LEVEL1, 1).unwrap();
        assert_eq!((0.15f64 * 500.0).round() as usize, 75);
        // noise is added after zeroing, so verify the segment length via the
        // zero-free reconstruction: corrupt with noise disabled instead
        let seg_only = corrupt(&ds, CorruptionLevel { kappa_r: 0.15, sigma_g: 0.0 }, 1).unwrap();
        for (w, orig) in seg_only.windows.iter().zip(ds.windows.iter()) {
            let zeros: Vec<usize> = (0..w.length)
                .filter(|&i| w.values[i] == 0.0 && orig.values[i] != 0.0)
                .collect();
            assert_eq!(zeros.len(), 75);
            // contiguous run
            assert_eq!(zeros[zeros.len() - 1] - zeros[0] + 1, 75);
        }
        // with noise enabled the dataset differs everywhere
        let diff: f64 = c
            .windows
            .iter()
            .zip(ds.windows.iter())
            .flat_map(|(a, b)| a.values.iter().zip(b.values.iter()))
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn corruption_preserves_labels_and_shapes() {
        let ds = gen_synthetic(3, 4, 2, 64, 5).unwrap();
        let c = corrupt(&ds, CorruptionLevel::LEVEL3, 2).unwrap();
        assert_eq!(ds.len(), c.len());
        for (a, b) in ds.windows.iter().zip(c.windows.iter()) {
            assert_eq!(a.label, b.label);
            assert_eq!((a.channels, a.length), (b.channels, b.length));
        }
    }

    #[test]
    fn csv_import_round_trips_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "1,0.0,1.0,2.0,3.0\n0,4.0,5.0,6.0,7.0\n").unwrap();
        let ds = import_csv(&path, 2, 2, 50.0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.meta.window_length, 2);
        assert_eq!(ds.windows[0].label, Some(1));
        assert_eq!(ds.windows[0].values, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(import_csv(&path, 3, 2, 50.0).is_err());
    }

    #[test]
    fn pi_dataset_round_trip() {
        let ds = gen_synthetic(2, 3, 2, 64, 9).unwrap();
        let cfg = PiConfig::default();
        let images = crate::topology::batch_extract(&ds.windows, &cfg).unwrap();
        let pi = PiDataset {
            labels: ds.labels(),
            images,
            classes: ds.classes,
            split: Split::Train,
            generator_seed: 9,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pi.bin");
        save_pi_dataset(&pi, &path).unwrap();
        let loaded = load_pi_dataset(&path).unwrap();
        assert_eq!(loaded.labels, pi.labels);
        assert_eq!(loaded.len(), pi.len());
        // wrong-kind load is a distinct error
        match load_dataset(&path) {
            Err(Error::WrongKind { expected, found }) => {
                assert_eq!((expected.as_str(), found.as_str()), ("series", "image"));
            }
            other => panic!("expected WrongKind, got {:?}", other.map(|_| ())),
        }
    }
}
