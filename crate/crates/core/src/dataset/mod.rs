//! Sample format, annotation CSV I/O and synthetic data generation.
//!
//! The annotation CSV has the header
//! `id,au1,...,au12,lm_x1,lm_y1,...,lm_x49,lm_y49,image_path` (the twelve AU
//! column names are free, distinct identifiers), one sample per row, labels
//! as literal `0`/`1` and coordinates as decimal pixels. `image_path` is
//! relative to the directory holding the CSV and points at an 8-bit RGB PNG.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{DEFAULT_AU_NAMES, IMAGE_CHANNELS, IMAGE_SIZE, LANDMARK_DIM, NUM_AUS, NUM_LANDMARKS};
use crate::nn::FeatureMap;

pub use synth::{generate_synthetic, render_face, CooccurrenceSpec, PairBoost};

pub type AuLabels = [u8; NUM_AUS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
}

/// An 8-bit RGB face crop, row-major `H × W × 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceImage {
    pixels: Vec<u8>,
}

impl FaceImage {
    pub fn from_rgb8(pixels: Vec<u8>) -> Result<Self> {
        let want = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;
        if pixels.len() != want {
            return Err(Error::shape(format!(
                "image must be {IMAGE_SIZE}x{IMAGE_SIZE}x{IMAGE_CHANNELS} ({want} bytes), got {}",
                pixels.len()
            )));
        }
        Ok(FaceImage { pixels })
    }

    /// Quantizes `[0,1]` values laid out `H × W × 3`.
    pub fn from_unit(values: &[f64]) -> Result<Self> {
        Self::from_rgb8(
            values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        )
    }

    pub fn rgb8(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixel value in `[0,1]`.
    pub fn value(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * IMAGE_SIZE + x) * IMAGE_CHANNELS + ch] as f64 / 255.0
    }

    /// Channel-major `3 × 112 × 112` tensor with values in `[0,1]`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = vec![0.0; IMAGE_CHANNELS * n];
        for (i, px) in self.pixels.chunks_exact(IMAGE_CHANNELS).enumerate() {
            for ch in 0..IMAGE_CHANNELS {
                data[ch * n + i] = px[ch] as f64 / 255.0;
            }
        }
        FeatureMap {
            c: IMAGE_CHANNELS,
            h: IMAGE_SIZE,
            w: IMAGE_SIZE,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            IMAGE_SIZE as u32,
            IMAGE_SIZE as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() as usize != IMAGE_SIZE || rgb.height() as usize != IMAGE_SIZE {
            return Err(Error::validation(format!(
                "{}: image is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
                path.display(),
                rgb.width(),
                rgb.height()
            )));
        }
        Self::from_rgb8(rgb.into_raw())
    }
}

/// One manifest row: labels, ground-truth landmarks and where the image lives.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRef {
    pub id: String,
    pub labels: AuLabels,
    /// `[x1, y1, ..., x49, y49]` in pixels.
    pub landmarks: Vec<f64>,
    pub image_path: String,
}

impl SampleRef {
    pub fn validate(&self) -> Result<()> {
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::validation(format!("sample {}: label outside {{0,1}}", self.id)));
        }
        check_landmarks(&self.landmarks).map_err(|m| Error::validation(format!("sample {}: {m}", self.id)))
    }
}

fn check_landmarks(lm: &[f64]) -> std::result::Result<(), String> {
    if lm.len() != LANDMARK_DIM {
        return Err(format!("expected {LANDMARK_DIM} landmark values, got {}", lm.len()));
    }
    let bound = IMAGE_SIZE as f64;
    if let Some(v) = lm.iter().find(|v| !v.is_finite() || **v < 0.0 || **v >= bound) {
        return Err(format!("landmark coordinate {v} outside [0,{IMAGE_SIZE})"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRef>,
    pub au_names: Vec<String>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(samples: Vec<SampleRef>) -> Self {
        DatasetManifest {
            samples,
            au_names: DEFAULT_AU_NAMES.iter().map(|s| s.to_string()).collect(),
            split: Split::Train,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = Vec::with_capacity(2 + NUM_AUS + LANDMARK_DIM);
        h.push("id".to_string());
        h.extend(self.au_names.iter().cloned());
        for k in 1..=NUM_LANDMARKS {
            h.push(format!("lm_x{k}"));
            h.push(format!("lm_y{k}"));
        }
        h.push("image_path".to_string());
        h
    }

    /// Label matrix, one row per sample.
    pub fn label_rows(&self) -> Vec<AuLabels> {
        self.samples.iter().map(|s| s.labels).collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::validation(e.to_string());
        w.write_record(self.header()).map_err(csv_err)?;
        for s in &self.samples {
            let mut row = Vec::with_capacity(2 + NUM_AUS + LANDMARK_DIM);
            row.push(s.id.clone());
            row.extend(s.labels.iter().map(|l| l.to_string()));
            row.extend(s.landmarks.iter().map(|v| v.to_string()));
            row.push(s.image_path.clone());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = rdr.records();
        let width = 2 + NUM_AUS + LANDMARK_DIM;

        let header = match records.next() {
            None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
            Some(r) => r.map_err(|e| Error::Parse { line: 1, message: e.to_string() })?,
        };
        if header.len() != width {
            return Err(Error::validation(format!(
                "line 1: header has {} columns, expected {width}",
                header.len()
            )));
        }
        if &header[0] != "id" || &header[width - 1] != "image_path" {
            return Err(Error::validation("line 1: header must start with `id` and end with `image_path`"));
        }
        let au_names: Vec<String> = (1..=NUM_AUS).map(|k| header[k].to_string()).collect();
        for (i, a) in au_names.iter().enumerate() {
            if au_names[..i].contains(a) {
                return Err(Error::validation(format!("line 1: duplicate AU name {a}")));
            }
        }

        let mut samples = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != width {
                let n_lm = rec.len().saturating_sub(2 + NUM_AUS);
                return Err(Error::validation(format!(
                    "line {line}: expected {LANDMARK_DIM} landmark values, row has {n_lm}"
                )));
            }
            let mut labels = [0u8; NUM_AUS];
            for (k, l) in labels.iter_mut().enumerate() {
                *l = match rec[1 + k].trim() {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        if other.parse::<f64>().is_err() {
                            return Err(Error::Parse {
                                line,
                                message: format!("label {:?} is not a number", other),
                            });
                        }
                        return Err(Error::validation(format!(
                            "line {line}: label {other:?} for {} outside {{0,1}}",
                            au_names[k]
                        )));
                    }
                };
            }
            let mut landmarks = Vec::with_capacity(LANDMARK_DIM);
            for k in 0..LANDMARK_DIM {
                let field = rec[1 + NUM_AUS + k].trim();
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("landmark value {field:?} is not a number"),
                })?;
                landmarks.push(v);
            }
            check_landmarks(&landmarks).map_err(|m| Error::validation(format!("line {line}: {m}")))?;
            samples.push(SampleRef {
                id: rec[0].to_string(),
                labels,
                landmarks,
                image_path: rec[width - 1].to_string(),
            });
        }
        Ok(DatasetManifest {
            samples,
            au_names,
            split: Split::Train,
        })
    }
}

/// Reads an annotation CSV. Images are not touched; see [`Dataset::load`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse_csv(&text)
}

/// Per-AU occurrence rate `count(label_i = 1) / n`.
pub fn empirical_rates(manifest: &DatasetManifest) -> Result<[f64; NUM_AUS]> {
    rates_of(&manifest.label_rows())
}

pub fn rates_of(labels: &[AuLabels]) -> Result<[f64; NUM_AUS]> {
    if labels.is_empty() {
        return Err(Error::validation("occurrence rates are undefined for an empty manifest"));
    }
    let mut counts = [0usize; NUM_AUS];
    for row in labels {
        for (c, &l) in counts.iter_mut().zip(row) {
            *c += l as usize;
        }
    }
    let n = labels.len() as f64;
    Ok(counts.map(|c| c as f64 / n))
}

/// A manifest together with its decoded images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<FaceImage>,
}

/// Borrowed view of one fully materialized sample.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub entry: &'a SampleRef,
    pub image: &'a FaceImage,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            entry: &self.manifest.samples[i],
            image: &self.images[i],
        }
    }

    /// Loads the CSV at `path` and every referenced image.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let images = manifest
            .samples
            .iter()
            .map(|s| {
                let p = base.join(&s.image_path);
                if !p.exists() {
                    return Err(Error::Missing(p));
                }
                FaceImage::load_png(&p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, images })
    }

    /// Writes `manifest.csv` and the images under `dir`. Returns the CSV path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for (s, img) in self.manifest.samples.iter().zip(&self.images) {
            let p = dir.join(&s.image_path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save_png(&p)?;
        }
        let csv_path = dir.join("manifest.csv");
        self.manifest.save(&csv_path)?;
        Ok(csv_path)
    }

    /// Splits off the first `n` samples as one dataset and the rest as another.
    pub fn split_at(self, n: usize) -> (Dataset, Dataset) {
        let Dataset { manifest, mut images } = self;
        let mut head = manifest.samples;
        let tail = head.split_off(n.min(head.len()));
        let tail_images = images.split_off(n.min(images.len()));
        let names = manifest.au_names;
        (
            Dataset {
                manifest: DatasetManifest {
                    samples: head,
                    au_names: names.clone(),
                    split: Split::Train,
                },
                images,
            },
            Dataset {
                manifest: DatasetManifest {
                    samples: tail,
                    au_names: names,
                    split: Split::Validation,
                },
                images: tail_images,
            },
        )
    }
}
