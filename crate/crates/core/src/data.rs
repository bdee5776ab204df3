//! Synthetic geo-biased species dataset and geotagged-metadata ingestion.
//!
//! Each synthetic class gets a distinct procedural visual signature (an
//! oriented grating plus a colored blob) and a geographic range modeled as a
//! spherical cap whose angular radius is Pareto-distributed, so land
//! coverage follows a heavy-tailed law: most classes are confined to small
//! regions, a few span continents.

use crate::geocell::{CellId, GeoError, LatLng};
use crate::model::TrainSample;
use crate::tensor::{Scalar, Tensor};
use crate::Rng;
use serde::{Deserialize, Serialize};
#[cfg(test)]
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error("csv ingest failed: {0} of {1} rows invalid (over 10%)")]
    TooManyBadRows(usize, usize),
    #[error("row {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Where a record's pixels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum ImageRef {
    /// Procedural: rendered on demand from the dataset seed and this value.
    Seed(u64),
    /// File path relative to the dataset directory.
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub class_id: u32,
    pub location: LatLng,
    pub split: Split,
    pub image: ImageRef,
}

/// Geographic range of one synthetic class: a spherical cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRange {
    pub center: LatLng,
    /// Angular radius in radians.
    pub radius: f64,
}

/// On-disk pixel format for generated images.
///
/// `Png` stores RGB8 (pixels quantized to 1/255 steps); `RawF32` stores the
/// exact planar float tensor: magic `GIMG`, then channels/height/width as
/// little-endian u32, then c*h*w little-endian f32 values channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Png,
    RawF32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub image_size: usize,
    /// Patch size the downstream model will use; images must be at least
    /// two patches wide.
    pub patch_size: usize,
    pub samples_per_class: usize,
    /// Minimum class size when imbalance is enabled.
    pub min_samples: usize,
    /// Pareto shape for cap radii; smaller = heavier tail.
    pub pareto_alpha: f64,
    /// Pareto scale (minimum cap radius, radians).
    pub pareto_scale: f64,
    /// Additive pixel noise (standard deviations).
    pub noise: f64,
    /// Long-tail exponent for class sizes; `None` keeps classes balanced.
    pub imbalance: Option<f64>,
    /// train/val/test fractions; must sum to 1.
    pub split_fractions: (f64, f64, f64),
    pub image_format: ImageFormat,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            image_size: 32,
            patch_size: 4,
            samples_per_class: 40,
            min_samples: 10,
            pareto_alpha: 1.5,
            pareto_scale: 0.15,
            noise: 0.05,
            imbalance: None,
            split_fractions: (0.7, 0.1, 0.2),
            image_format: ImageFormat::default(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::BadConfig("need at least 2 classes".into()));
        }
        if self.image_size < 2 * self.patch_size {
            return Err(DataError::BadConfig(format!(
                "image size {} below 2x patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::BadConfig(
                "samples_per_class must be >= 1".into(),
            ));
        }
        if !(self.pareto_alpha > 0.0 && self.pareto_scale > 0.0) {
            return Err(DataError::BadConfig(
                "pareto params must be positive".into(),
            ));
        }
        let (a, b, c) = self.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() < 1e-9) {
            return Err(DataError::BadConfig(
                "split fractions must be positive and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// Dataset description: records plus generation provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    /// Present for synthetic datasets; carries the range model so coverage
    /// statistics can be recomputed.
    pub synthetic: Option<SyntheticProvenance>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticProvenance {
    pub config: SyntheticConfig,
    pub ranges: Vec<ClassRange>,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// (location, class) pairs of the training split, for geocell queries.
    pub fn train_locations(&self) -> Vec<(LatLng, u32)> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| (r.location, r.class_id))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn config_hash(cfg: &SyntheticConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform point on the sphere.
fn random_point(rng: &mut Rng) -> LatLng {
    let z = rng.uniform_range(-1.0, 1.0);
    let lng = rng.uniform_range(-180.0, 180.0);
    LatLng {
        lat: z.asin().to_degrees(),
        lng,
    }
}

/// Uniform point within the spherical cap of angular radius `r` around
/// `center`: draw the polar offset with the cap's area measure, then rotate.
fn random_point_in_cap(center: &LatLng, r: f64, rng: &mut Rng) -> LatLng {
    let cos_r = r.min(std::f64::consts::PI).cos();
    let z = rng.uniform_range(cos_r, 1.0); // cos of polar angle from cap axis
    let phi = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let sin_t = (1.0 - z * z).max(0.0).sqrt();
    // local frame: cap axis n, tangents e1, e2
    let n = center.to_xyz();
    let helper = if n[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let e1 = cross(&helper, &n);
    let e1 = normalize(&e1);
    let e2 = cross(&n, &e1);
    let p = [
        n[0] * z + sin_t * (phi.cos() * e1[0] + phi.sin() * e2[0]),
        n[1] * z + sin_t * (phi.cos() * e1[1] + phi.sin() * e2[1]),
        n[2] * z + sin_t * (phi.cos() * e1[2] + phi.sin() * e2[2]),
    ];
    let lat = p[2].clamp(-1.0, 1.0).asin().to_degrees();
    let lng = p[1].atan2(p[0]).to_degrees();
    LatLng {
        lat: lat.clamp(-90.0, 90.0),
        lng: lng.clamp(-180.0, 180.0),
    }
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: &[f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-30);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Visual signature of a class: grating frequency/orientation plus an RGB
/// tint and a blob position. Parameters are spaced on deterministic grids so
/// any two classes differ in at least one strong component.
#[derive(Debug, Clone, Copy)]
pub struct ClassSignature {
    pub frequency: f64,
    pub orientation: f64,
    pub color: [f64; 3],
    pub blob_x: f64,
    pub blob_y: f64,
}

pub fn class_signature(class_id: u32, num_classes: usize) -> ClassSignature {
    let k = num_classes as f64;
    let c = class_id as f64;
    let hue = c / k;
    ClassSignature {
        frequency: 2.0 + (class_id % 4) as f64 * 1.5,
        orientation: std::f64::consts::PI * c / k,
        color: hue_to_rgb(hue),
        blob_x: 0.5 + 0.3 * (2.0 * std::f64::consts::PI * hue).cos(),
        blob_y: 0.5 + 0.3 * (2.0 * std::f64::consts::PI * hue).sin(),
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |offset: f64| {
        let t = (h + offset).fract();
        (0.5 + 0.5 * (2.0 * std::f64::consts::PI * t).cos()).clamp(0.0, 1.0)
    };
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

/// Render one record's image: `[3, size, size]` floats in [0, 1].
pub fn render_image<S: Scalar>(
    cfg: &SyntheticConfig,
    class_id: u32,
    record_seed: u64,
) -> Tensor<S> {
    let sig = class_signature(class_id, cfg.num_classes);
    let mut rng = Rng::new(cfg.seed).derive(0x696d67).derive(record_seed);
    let size = cfg.image_size;
    let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let mut data = vec![S::zero(); 3 * size * size];
    let (so, co) = sig.orientation.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let wave = 0.5
                + 0.5
                    * (2.0 * std::f64::consts::PI * sig.frequency * (u * co + v * so) + phase)
                        .sin();
            let dx = u - sig.blob_x;
            let dy = v - sig.blob_y;
            let blob = (-(dx * dx + dy * dy) / 0.02).exp();
            for ch in 0..3 {
                let noise = rng.normal() * cfg.noise;
                let val = (sig.color[ch] * wave * 0.7 + blob * 0.5 + noise).clamp(0.0, 1.0);
                data[(ch * size + y) * size + x] = S::from_f64(val);
            }
        }
    }
    Tensor::from_vec(vec![3, size, size], data).expect("image shape")
}

/// Generate a synthetic manifest. Images are procedural (`ImageRef::Seed`);
/// render them via [`load_samples`] or write PNGs with [`write_images`].
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut range_rng = root.derive(1);
    let mut loc_rng = root.derive(2);
    let mut split_rng = root.derive(3);
    let mut size_rng = root.derive(4);

    let ranges: Vec<ClassRange> = (0..cfg.num_classes)
        .map(|_| ClassRange {
            center: random_point(&mut range_rng),
            radius: range_rng
                .pareto(cfg.pareto_scale, cfg.pareto_alpha)
                .min(std::f64::consts::PI),
        })
        .collect();

    let class_sizes: Vec<usize> = (0..cfg.num_classes)
        .map(|_c| match cfg.imbalance {
            None => cfg.samples_per_class,
            Some(exp) => {
                // long-tailed profile with a random class order
                let rank = 1.0 + size_rng.uniform() * cfg.num_classes as f64;
                let scale = rank.powf(-exp);
                ((cfg.samples_per_class as f64 * scale).round() as usize)
                    .max(cfg.min_samples.min(cfg.samples_per_class))
            }
        })
        .map(|n| n.max(1))
        .collect();

    let mut records = Vec::new();
    let mut id = 0u64;
    for (c, range) in ranges.iter().enumerate() {
        let n = class_sizes[c];
        // stratified split: shuffle within the class, then cut
        let mut order: Vec<usize> = (0..n).collect();
        split_rng.shuffle(&mut order);
        let n_train = ((n as f64) * cfg.split_fractions.0).round().max(1.0) as usize;
        let n_val = ((n as f64) * cfg.split_fractions.1).round().max(1.0) as usize;
        for (pos, &k) in order.iter().enumerate() {
            let split = if pos < n_train.min(n.saturating_sub(2)) {
                Split::Train
            } else if pos < (n_train + n_val).min(n.saturating_sub(1)) {
                Split::Val
            } else {
                Split::Test
            };
            let _ = k;
            records.push(Record {
                id,
                class_id: c as u32,
                location: random_point_in_cap(&range.center, range.radius, &mut loc_rng),
                split,
                image: ImageRef::Seed(id),
            });
            id += 1;
        }
    }

    Ok(DatasetManifest {
        records,
        class_names: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        config_hash: config_hash(cfg),
        synthetic: Some(SyntheticProvenance {
            config: cfg.clone(),
            ranges,
        }),
    })
}

/// Presence scores of every class over a cell grid: 1 inside the class's
/// cap, 0 outside. Row-major `[classes x cells]`.
pub fn range_scores(prov: &SyntheticProvenance, cells: &[CellId]) -> Vec<f64> {
    let centers: Vec<LatLng> = cells.iter().map(|c| c.center()).collect();
    let mut out = Vec::with_capacity(prov.ranges.len() * cells.len());
    for range in &prov.ranges {
        for center in &centers {
            let inside = range.center.angular_distance(center) <= range.radius;
            out.push(if inside { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Materialize a split as training samples, rendering procedural images or
/// loading PNGs relative to `dir`.
pub fn load_samples<S: Scalar>(
    manifest: &DatasetManifest,
    split: Split,
    dir: Option<&Path>,
) -> Result<Vec<TrainSample<S>>, DataError> {
    let cfg = manifest.synthetic.as_ref().map(|p| &p.config);
    manifest
        .split_records(split)
        .into_iter()
        .map(|r| {
            let image = match &r.image {
                ImageRef::Seed(seed) => {
                    let cfg = cfg.ok_or_else(|| {
                        DataError::Invalid("procedural image without synthetic provenance".into())
                    })?;
                    render_image::<S>(cfg, r.class_id, *seed)
                }
                ImageRef::Path(rel) => {
                    let base = dir.ok_or_else(|| {
                        DataError::Invalid(format!(
                            "record {} references file {rel} but no dataset dir was given",
                            r.id
                        ))
                    })?;
                    let path = base.join(rel);
                    if rel.ends_with(".gimg") {
                        load_raw(&path)?
                    } else {
                        load_png(&path)?
                    }
                }
            };
            Ok(TrainSample {
                id: r.id,
                image,
                label: r.class_id,
                location: r.location,
            })
        })
        .collect()
}

/// Write every procedural image under `dir` in the configured format,
/// returning a manifest whose records point at the files.
pub fn write_images(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetManifest, DataError> {
    let prov = manifest
        .synthetic
        .as_ref()
        .ok_or_else(|| DataError::Invalid("write_images needs a synthetic manifest".into()))?;
    std::fs::create_dir_all(dir.join("images"))?;
    let mut out = manifest.clone();
    for r in out.records.iter_mut() {
        if let ImageRef::Seed(seed) = &r.image {
            let img: Tensor<f32> = render_image(&prov.config, r.class_id, *seed);
            let rel = match prov.config.image_format {
                ImageFormat::Png => {
                    let rel = format!("images/img_{:06}.png", r.id);
                    save_png(&img, &dir.join(&rel))?;
                    rel
                }
                ImageFormat::RawF32 => {
                    let rel = format!("images/img_{:06}.gimg", r.id);
                    save_raw(&img, &dir.join(&rel))?;
                    rel
                }
            };
            r.image = ImageRef::Path(rel);
        }
    }
    Ok(out)
}

const RAW_MAGIC: &[u8; 4] = b"GIMG";

fn save_raw(img: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(16 + img.numel() * 4);
    bytes.extend_from_slice(RAW_MAGIC);
    for &d in img.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_raw<S: Scalar>(path: &Path) -> Result<Tensor<S>, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(DataError::Image(format!(
            "{}: not a raw planar float image",
            path.display()
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(4), dim(8), dim(12));
    let expect = 16 + c * h * w * 4;
    if bytes.len() != expect {
        return Err(DataError::Image(format!(
            "{}: expected {expect} bytes, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<S> = bytes[16..]
        .chunks_exact(4)
        .map(|b| S::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Tensor::from_vec(vec![c, h, w], data).map_err(|e| DataError::Image(e.to_string()))
}

fn save_png(img: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    debug_assert_eq!(c, 3);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                (img.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|e| DataError::Image(e.to_string()))
}

fn load_png<S: Scalar>(path: &Path) -> Result<Tensor<S>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![S::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = S::from_f64(px[ch] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).map_err(|e| DataError::Image(e.to_string()))
}

/// CSV schema: `id,class,lat,lng,split,image_path`.
pub fn records_to_csv(manifest: &DatasetManifest) -> String {
    let mut out = String::from("id,class,lat,lng,split,image_path\n");
    for r in &manifest.records {
        let image = match &r.image {
            ImageRef::Seed(s) => format!("seed:{s}"),
            ImageRef::Path(p) => p.clone(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            r.class_id,
            r.location.lat,
            r.location.lng,
            r.split.as_str(),
            image
        ));
    }
    out
}

/// Parse the CSV schema above. Bad rows are collected with line numbers;
/// more than 10% bad rows aborts the ingest.
pub fn ingest_csv(text: &str) -> Result<(DatasetManifest, Vec<DataError>), DataError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != "id,class,lat,lng,split,image_path" {
        return Err(DataError::Invalid(format!(
            "unexpected header {header:?}, want id,class,lat,lng,split,image_path"
        )));
    }
    let mut records = Vec::new();
    let mut errors: Vec<DataError> = Vec::new();
    let mut total = 0usize;
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let bad = |reason: String| DataError::BadRow {
            line: lineno,
            reason,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            errors.push(bad(format!("expected 6 columns, got {}", cols.len())));
            continue;
        }
        let parsed = (|| -> Result<Record, DataError> {
            let id: u64 = cols[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("field id: {:?} is not an integer", cols[0])))?;
            let class_id: u32 = cols[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("field class: {:?} is not an integer", cols[1])))?;
            let lat: f64 = cols[2]
                .trim()
                .parse()
                .map_err(|_| bad(format!("field lat: {:?} is not a number", cols[2])))?;
            let lng: f64 = cols[3]
                .trim()
                .parse()
                .map_err(|_| bad(format!("field lng: {:?} is not a number", cols[3])))?;
            let location = LatLng::new(lat, lng).map_err(|e| bad(format!("field lat/lng: {e}")))?;
            let split = Split::parse(cols[4].trim())
                .ok_or_else(|| bad(format!("field split: unknown value {:?}", cols[4])))?;
            let image = match cols[5].trim().strip_prefix("seed:") {
                Some(s) => ImageRef::Seed(
                    s.parse()
                        .map_err(|_| bad(format!("field image_path: bad seed {s:?}")))?,
                ),
                None => ImageRef::Path(cols[5].trim().to_string()),
            };
            if !seen_ids.insert(id) {
                return Err(bad(format!("duplicate id {id}")));
            }
            Ok(Record {
                id,
                class_id,
                location,
                split,
                image,
            })
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(e) => errors.push(e),
        }
    }
    if total > 0 && errors.len() * 10 > total {
        return Err(DataError::TooManyBadRows(errors.len(), total));
    }
    let num_classes = records
        .iter()
        .map(|r| r.class_id as usize + 1)
        .max()
        .unwrap_or(0);
    Ok((
        DatasetManifest {
            records,
            class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
            synthetic: None,
            config_hash: String::new(),
        },
        errors,
    ))
}

/// Per-location splits; the test split is filtered to classes present in
/// that location's training records.
#[derive(Debug, Clone)]
pub struct LocationSplit {
    pub cell: CellId,
    /// Record indices into the manifest.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_by_location(
    manifest: &DatasetManifest,
    locations: &[CellId],
) -> (Vec<LocationSplit>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for cell in locations {
        let inside: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| cell.contains_point(&r.location))
            .map(|(i, _)| i)
            .collect();
        let train: Vec<usize> = inside
            .iter()
            .copied()
            .filter(|&i| manifest.records[i].split == Split::Train)
            .collect();
        if train.is_empty() {
            warnings.push(format!("location {} has no training records", cell.token()));
            continue;
        }
        let classes: BTreeSet<u32> = train
            .iter()
            .map(|&i| manifest.records[i].class_id)
            .collect();
        let val: Vec<usize> = inside
            .iter()
            .copied()
            .filter(|&i| manifest.records[i].split == Split::Val)
            .collect();
        let test: Vec<usize> = inside
            .iter()
            .copied()
            .filter(|&i| {
                manifest.records[i].split == Split::Test
                    && classes.contains(&manifest.records[i].class_id)
            })
            .collect();
        out.push(LocationSplit {
            cell: cell.clone(),
            train,
            val,
            test,
        });
    }
    (out, warnings)
}

/// Split-size table in the shape of a per-location report.
pub fn split_table(splits: &[LocationSplit]) -> String {
    let mut out = String::from("location,train,val,test\n");
    for s in splits {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.cell.token(),
            s.train.len(),
            s.val.len(),
            s.test.len()
        ));
    }
    out
}
