//! Synthetic unpaired multispectral/RGB scene data.
//!
//! Each class owns a spectral signature (one mean per band) and a sinusoidal
//! texture whose strength varies by band. Multispectral images carry every
//! band; RGB images carry three of them, with a class-specific offset in mean
//! and texture controlled by `region_shift`, so the two populations share
//! class semantics only loosely. No RGB image is derived from an MS image.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_tensor, write_tensor, DType};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub ms_bands: usize,
    /// Bands read as R, G, B.
    pub rgb_band_indices: [usize; 3],
    pub image_size: usize,
    pub ms_per_class: usize,
    pub rgb_per_class: usize,
    /// Strength of the RGB-only change in class mean and texture.
    pub region_shift: f64,
    /// Pixel noise level; also scales instance-to-instance variation.
    pub noise_sigma: f64,
    pub label_mode: LabelMode,
    /// Train and validation fractions; the remainder is the test split.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            ms_bands: 10,
            rgb_band_indices: [2, 3, 4],
            image_size: 16,
            ms_per_class: 200,
            rgb_per_class: 200,
            region_shift: 0.5,
            noise_sigma: 0.4,
            label_mode: LabelMode::Single,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.ms_per_class == 0 || self.rgb_per_class == 0 {
            return bad("class and per-class counts must be positive".into());
        }
        let [r, g, b] = self.rgb_band_indices;
        if r == g || g == b || r == b {
            return bad(format!("rgb band indices {:?} must be distinct", self.rgb_band_indices));
        }
        if self.rgb_band_indices.iter().any(|&i| i >= self.ms_bands) {
            return bad(format!(
                "rgb band indices {:?} must be below {} bands",
                self.rgb_band_indices, self.ms_bands
            ));
        }
        if self.image_size < 3 {
            return bad("image size must be at least 3".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.region_shift >= 0.0) {
            return bad("noise_sigma and region_shift must be non-negative".into());
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
            return bad(format!("split fractions {t} + {v} must be positive and at most 1"));
        }
        Ok(())
    }

    /// Lowercase hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<usize>),
    /// `[M, C]` multi-hot.
    Multi(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positive classes of every sample.
    pub fn membership(&self) -> Vec<Vec<usize>> {
        match self {
            Labels::Single(v) => v.iter().map(|&c| vec![c]).collect(),
            Labels::Multi(t) => {
                let c = t.shape()[1];
                t.data()
                    .chunks(c)
                    .map(|row| (0..c).filter(|&j| row[j] > 0.5).collect())
                    .collect()
            }
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Single(v) => Labels::Single(idx.iter().map(|&i| v[i]).collect()),
            Labels::Multi(t) => Labels::Multi(t.select_rows(idx)),
        }
    }

    fn to_tensor(&self) -> Tensor {
        match self {
            Labels::Single(v) => Tensor::from_vec(v.iter().map(|&c| c as f64).collect()),
            Labels::Multi(t) => t.clone(),
        }
    }

    fn from_tensor(t: Tensor, classes: usize) -> Result<Labels> {
        match t.rank() {
            1 => {
                let mut v = Vec::with_capacity(t.len());
                for &x in t.data() {
                    if x < 0.0 || x.fract() != 0.0 || x as usize >= classes {
                        return Err(Error::Contract(format!("label value {x} is not a class index")));
                    }
                    v.push(x as usize);
                }
                Ok(Labels::Single(v))
            }
            2 if t.shape()[1] == classes => Ok(Labels::Multi(t)),
            _ => Err(Error::Contract(format!("label tensor shape {:?}", t.shape()))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityManifest {
    pub count: usize,
    /// Samples per (primary) class.
    pub per_class: Vec<usize>,
    pub split_sizes: [usize; 3],
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec_hash: String,
    pub spec: SyntheticSpec,
    pub ms: ModalityManifest,
    pub rgb: ModalityManifest,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M, B_ms, S, S]`
    pub ms: Tensor,
    pub ms_labels: Labels,
    /// `[R, 3, S, S]`
    pub rgb: Tensor,
    pub rgb_labels: Vec<usize>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.manifest.spec
    }

    pub fn classes(&self) -> usize {
        self.manifest.spec.classes
    }
}

/// Plane waves summed into each class texture.
const WAVES: usize = 4;
/// Largest wave frequency, in cycles per image side.
const MAX_FREQ: f64 = 3.0;
/// Mean offset per unit of `region_shift`.
const OFFSET_SCALE: f64 = 0.15;

struct Wave {
    freq: [f64; 2],
    phase: f64,
    rgb_freq_shift: [f64; 2],
    rgb_phase_shift: f64,
}

struct ClassParams {
    mean: Vec<f64>,
    band_gain: Vec<f64>,
    amplitude: f64,
    waves: Vec<Wave>,
    rgb_offset: [f64; 3],
}

const STREAM_CLASS: u64 = 0;
const STREAM_MS: u64 = 1 << 40;
const STREAM_RGB: u64 = 2 << 40;
const STREAM_SPLIT: u64 = 3 << 40;

fn class_params(spec: &SyntheticSpec, seed: u64, c: usize) -> ClassParams {
    let mut r = Rng::derive(seed, STREAM_CLASS + c as u64);
    let sym = |r: &mut Rng, half: f64| half * (2.0 * r.uniform() - 1.0);
    let mean = (0..spec.ms_bands).map(|_| 0.25 + 0.5 * r.uniform()).collect();
    let band_gain = (0..spec.ms_bands).map(|_| 0.8 + 0.4 * r.uniform()).collect();
    let amplitude = 0.15 + 0.02 * r.uniform();
    let waves = (0..WAVES)
        .map(|_| Wave {
            freq: [sym(&mut r, MAX_FREQ), sym(&mut r, MAX_FREQ)],
            phase: TAU * r.uniform(),
            rgb_freq_shift: [sym(&mut r, 1.0), sym(&mut r, 1.0)],
            rgb_phase_shift: sym(&mut r, PI),
        })
        .collect();
    let rgb_offset = [r.normal(), r.normal(), r.normal()];
    ClassParams {
        mean,
        band_gain,
        amplitude,
        waves,
        rgb_offset,
    }
}

struct Instance {
    gain: f64,
    phase: [f64; WAVES],
}

fn instance(spec: &SyntheticSpec, r: &mut Rng) -> Instance {
    Instance {
        gain: 1.0 + spec.noise_sigma * r.normal(),
        phase: std::array::from_fn(|_| 2.0 * spec.noise_sigma * r.normal()),
    }
}

/// Noise-free class pattern for one band, written into `out` (`S·S`).
fn band_pattern(
    spec: &SyntheticSpec,
    p: &ClassParams,
    band: usize,
    inst: &Instance,
    rgb_slot: Option<usize>,
    out: &mut [f64],
) {
    let s = spec.image_size;
    let shift = if rgb_slot.is_some() { spec.region_shift } else { 0.0 };
    let mean = p.mean[band] + rgb_slot.map_or(0.0, |k| shift * OFFSET_SCALE * p.rgb_offset[k]);
    let amp = p.amplitude * p.band_gain[band] / (WAVES as f64).sqrt();
    let waves: Vec<([f64; 2], f64)> = p
        .waves
        .iter()
        .zip(inst.phase)
        .map(|(w, jitter)| {
            let f = [
                TAU * (w.freq[0] + shift * w.rgb_freq_shift[0]) / s as f64,
                TAU * (w.freq[1] + shift * w.rgb_freq_shift[1]) / s as f64,
            ];
            (f, w.phase + jitter + shift * w.rgb_phase_shift)
        })
        .collect();
    for y in 0..s {
        for x in 0..s {
            let tex: f64 = waves.iter().map(|(f, ph)| (f[0] * x as f64 + f[1] * y as f64 + ph).sin()).sum();
            out[y * s + x] = mean * inst.gain + amp * tex;
        }
    }
}

fn add_noise_and_clamp(spec: &SyntheticSpec, img: &mut [f64], r: &mut Rng) {
    for v in img.iter_mut() {
        *v = (*v + spec.noise_sigma * r.normal()).clamp(0.0, 1.0);
    }
}

fn ms_image(spec: &SyntheticSpec, params: &[ClassParams], labels: &[usize], r: &mut Rng) -> Vec<f64> {
    let plane = spec.image_size * spec.image_size;
    let inst = instance(spec, r);
    let mut img = vec![0.0; spec.ms_bands * plane];
    let mut tmp = vec![0.0; plane];
    let w = 1.0 / labels.len() as f64;
    for &c in labels {
        for b in 0..spec.ms_bands {
            band_pattern(spec, &params[c], b, &inst, None, &mut tmp);
            for (o, t) in img[b * plane..(b + 1) * plane].iter_mut().zip(&tmp) {
                *o += w * t;
            }
        }
    }
    add_noise_and_clamp(spec, &mut img, r);
    img
}

fn rgb_image(spec: &SyntheticSpec, p: &ClassParams, r: &mut Rng) -> Vec<f64> {
    let plane = spec.image_size * spec.image_size;
    let inst = instance(spec, r);
    let mut img = vec![0.0; 3 * plane];
    for (k, &band) in spec.rgb_band_indices.iter().enumerate() {
        band_pattern(spec, p, band, &inst, Some(k), &mut img[k * plane..(k + 1) * plane]);
    }
    add_noise_and_clamp(spec, &mut img, r);
    img
}

fn multi_labels(primary: usize, classes: usize, r: &mut Rng) -> Vec<usize> {
    let extra = r.below(3).min(classes - 1);
    let mut labels = vec![primary];
    while labels.len() < 1 + extra {
        let c = r.below(classes);
        if !labels.contains(&c) {
            labels.push(c);
        }
    }
    labels
}

/// Stratified split: each class's indices are shuffled with a seeded stream
/// and cut by the configured fractions.
fn stratified_splits(primary: &[usize], spec: &SyntheticSpec, seed: u64, stream: u64) -> Splits {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.classes];
    for (i, &c) in primary.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut splits = Splits::default();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        Rng::derive(seed, STREAM_SPLIT + stream + c as u64).shuffle(&mut idx);
        let n = idx.len();
        let n_train = ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * spec.val_fraction).round() as usize).min(n - n_train);
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for s in [&mut splits.train, &mut splits.val, &mut splits.test] {
        s.sort_unstable();
    }
    splits
}

fn modality_manifest(primary: &[usize], classes: usize, splits: Splits) -> ModalityManifest {
    let mut per_class = vec![0; classes];
    primary.iter().for_each(|&c| per_class[c] += 1);
    ModalityManifest {
        count: primary.len(),
        per_class,
        split_sizes: splits.sizes(),
        splits,
    }
}

/// Deterministic in `(spec, seed)`; samples are generated in parallel from
/// per-sample streams, so the thread count never changes the output.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let params: Vec<ClassParams> = (0..spec.classes).map(|c| class_params(spec, seed, c)).collect();
    let s = spec.image_size;
    let m = spec.classes * spec.ms_per_class;
    let n = spec.classes * spec.rgb_per_class;

    let ms_primary: Vec<usize> = (0..m).map(|i| i / spec.ms_per_class).collect();
    let ms: Vec<(Vec<f64>, Vec<usize>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut r = Rng::derive(seed, STREAM_MS + i as u64);
            let labels = match spec.label_mode {
                LabelMode::Single => vec![ms_primary[i]],
                LabelMode::Multi => multi_labels(ms_primary[i], spec.classes, &mut r),
            };
            (ms_image(spec, &params, &labels, &mut r), labels)
        })
        .collect();
    let rgb_labels: Vec<usize> = (0..n).map(|i| i / spec.rgb_per_class).collect();
    let rgb: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = Rng::derive(seed, STREAM_RGB + i as u64);
            rgb_image(spec, &params[rgb_labels[i]], &mut r)
        })
        .collect();

    let ms_labels = match spec.label_mode {
        LabelMode::Single => Labels::Single(ms_primary.clone()),
        LabelMode::Multi => {
            let mut t = Tensor::zeros(&[m, spec.classes]);
            for (i, (_, labels)) in ms.iter().enumerate() {
                for &c in labels {
                    t.set(&[i, c], 1.0);
                }
            }
            Labels::Multi(t)
        }
    };
    let ms_tensor = Tensor::new(vec![m, spec.ms_bands, s, s], ms.into_iter().flat_map(|(img, _)| img).collect())?;
    let rgb_tensor = Tensor::new(vec![n, 3, s, s], rgb.into_iter().flatten().collect())?;

    let manifest = DatasetManifest {
        seed,
        spec_hash: spec.hash(),
        spec: spec.clone(),
        ms: modality_manifest(&ms_primary, spec.classes, stratified_splits(&ms_primary, spec, seed, 0)),
        rgb: modality_manifest(&rgb_labels, spec.classes, stratified_splits(&rgb_labels, spec, seed, 1 << 20)),
        files: FILES.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    Ok(Dataset {
        ms: ms_tensor,
        ms_labels,
        rgb: rgb_tensor,
        rgb_labels,
        manifest,
    })
}

const FILES: [(&str, &str); 4] = [
    ("ms", "ms.sbt"),
    ("ms_labels", "ms_labels.sbt"),
    ("rgb", "rgb.sbt"),
    ("rgb_labels", "rgb_labels.sbt"),
];

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write the four tensor files and `manifest.json` into `dir`.
pub fn store(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(&dir.join(FILES[0].1), &ds.ms, DType::F64)?;
    write_tensor(&dir.join(FILES[1].1), &ds.ms_labels.to_tensor(), DType::F64)?;
    write_tensor(&dir.join(FILES[2].1), &ds.rgb, DType::F64)?;
    let rl = Tensor::from_vec(ds.rgb_labels.iter().map(|&c| c as f64).collect());
    write_tensor(&dir.join(FILES[3].1), &rl, DType::F64)?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&ds.manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn file_of(m: &DatasetManifest, dir: &Path, key: &str) -> Result<PathBuf> {
    m.files
        .get(key)
        .map(|f| dir.join(f))
        .ok_or_else(|| Error::Contract(format!("manifest lists no {key} file")))
}

/// Read a dataset written by [`store`], checking every count in the manifest
/// against the tensors. Nothing is returned unless all files load.
pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "dataset manifest",
            path: path.clone(),
        },
        _ => Error::io(&path, e),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let spec = &manifest.spec;
    let s = spec.image_size;
    let classes = spec.classes;
    let ms = read_tensor(&file_of(&manifest, dir, "ms")?)?;
    let ms_labels = Labels::from_tensor(read_tensor(&file_of(&manifest, dir, "ms_labels")?)?, classes)?;
    let rgb = read_tensor(&file_of(&manifest, dir, "rgb")?)?;
    let rgb_labels = match Labels::from_tensor(read_tensor(&file_of(&manifest, dir, "rgb_labels")?)?, classes)? {
        Labels::Single(v) => v,
        Labels::Multi(_) => return Err(Error::Contract("rgb labels must be single-label".into())),
    };
    let check = |ok: bool, what: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("dataset {}: {what} disagrees with the manifest", dir.display())))
        }
    };
    check(ms.shape() == [manifest.ms.count, spec.ms_bands, s, s], "ms tensor shape")?;
    check(rgb.shape() == [manifest.rgb.count, 3, s, s], "rgb tensor shape")?;
    check(ms_labels.len() == manifest.ms.count, "ms label count")?;
    check(rgb_labels.len() == manifest.rgb.count, "rgb label count")?;
    for (mm, n) in [(&manifest.ms, manifest.ms.count), (&manifest.rgb, manifest.rgb.count)] {
        check(mm.per_class.iter().sum::<usize>() == n, "per-class counts")?;
        check(mm.splits.sizes() == mm.split_sizes, "split sizes")?;
        check(
            [&mm.splits.train, &mm.splits.val, &mm.splits.test].iter().all(|v| v.iter().all(|&i| i < n)),
            "split indices",
        )?;
    }
    Ok(Dataset {
        ms,
        ms_labels,
        rgb,
        rgb_labels,
        manifest,
    })
}

/// Gather the R, G, B bands of one `[B_ms, h, w]` image.
pub fn pseudo_rgb_split(v: &Tensor, indices: [usize; 3]) -> Result<Tensor> {
    let &[b, h, w] = v.shape() else {
        return Err(Error::dim(format!("expected [B, h, w], got {:?}", v.shape())));
    };
    let batch = v.clone().reshape(&[1, b, h, w])?;
    pseudo_rgb_batch(&batch, indices)?.reshape(&[3, h, w])
}

/// Batched band gather: `[M, B_ms, h, w] → [M, 3, h, w]`.
pub fn pseudo_rgb_batch(v: &Tensor, indices: [usize; 3]) -> Result<Tensor> {
    let &[m, b, h, w] = v.shape() else {
        return Err(Error::dim(format!("expected [M, B, h, w], got {:?}", v.shape())));
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
        return Err(Error::param(format!("band index {bad} out of range for {b} bands")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(m * 3 * plane);
    for i in 0..m {
        for &k in &indices {
            let start = (i * b + k) * plane;
            out.extend_from_slice(&v.data()[start..start + plane]);
        }
    }
    Tensor::new(vec![m, 3, h, w], out)
}

/// Map `[0, 1]` floats to `0..=255`, clamping outside values.
pub fn quantize_u8(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Sum in ascending order, so the result depends only on the multiset of
/// terms.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn histogram(a: &[u8]) -> [usize; 256] {
    let mut h = [0usize; 256];
    a.iter().for_each(|&v| h[v as usize] += 1);
    h
}

/// Histogram entropy (nats) over 256 levels.
pub fn entropy_u8(a: &[u8]) -> f64 {
    let n = a.len() as f64;
    let terms = histogram(a)
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * -p.ln()
        })
        .collect();
    sorted_sum(terms)
}

/// `H(A) + H(B) − H(A, B)` in nats from 256-bin marginal and 256×256 joint
/// histograms of co-located pixels, evaluated cell by cell as
/// `Σ p(a,b)·(ln p(a,b) − (ln p(a) + ln p(b)))`.
pub fn mutual_information(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("mutual information: {} vs {} pixels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::dim("mutual information of empty images"));
    }
    let n = a.len() as f64;
    let (ha, hb) = (histogram(a), histogram(b));
    let mut joint: Vec<u16> = a.iter().zip(b).map(|(&x, &y)| (u16::from(x) << 8) | u16::from(y)).collect();
    joint.sort_unstable();
    let mut terms = Vec::new();
    let mut i = 0;
    while i < joint.len() {
        let mut j = i;
        while j < joint.len() && joint[j] == joint[i] {
            j += 1;
        }
        let (x, y) = ((joint[i] >> 8) as usize, (joint[i] & 0xff) as usize);
        let pab = (j - i) as f64 / n;
        let (pa, pb) = (ha[x] as f64 / n, hb[y] as f64 / n);
        terms.push(pab * (pab.ln() - (pa.ln() + pb.ln())));
        i = j;
    }
    Ok(sorted_sum(terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiChannels {
    /// Average channels into one plane, then one MI value.
    #[default]
    Average,
    /// MI per channel, averaged afterwards.
    PerChannel,
}

/// MI between two `[C, h, w]` images.
pub fn image_mi(a: &Tensor, b: &Tensor, mode: MiChannels) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::dim(format!("image MI: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let c = a.shape()[0];
    let plane = a.len() / c;
    match mode {
        MiChannels::Average => {
            let avg = |t: &Tensor| -> Vec<f64> {
                (0..plane)
                    .map(|p| (0..c).map(|k| t.data()[k * plane + p]).sum::<f64>() / c as f64)
                    .collect()
            };
            mutual_information(&quantize_u8(&avg(a)), &quantize_u8(&avg(b)))
        }
        MiChannels::PerChannel => {
            let mut total = 0.0;
            for k in 0..c {
                let qa = quantize_u8(&a.data()[k * plane..(k + 1) * plane]);
                let qb = quantize_u8(&b.data()[k * plane..(k + 1) * plane]);
                total += mutual_information(&qa, &qb)?;
            }
            Ok(total / c as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMi {
    pub class: usize,
    pub mean_mi: f64,
    pub pairs: usize,
}

pub const DEFAULT_MI_PAIRS: usize = 200;

fn sample_image(t: &Tensor, i: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    Tensor::new(t.shape()[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).expect("sized")
}

fn pairs_for(ms_ids: &[usize], rgb_ids: &[usize], max_pairs: usize, r: &mut Rng) -> Vec<(usize, usize)> {
    let all = ms_ids.len() * rgb_ids.len();
    if all <= max_pairs {
        ms_ids.iter().flat_map(|&a| rgb_ids.iter().map(move |&b| (a, b))).collect()
    } else {
        (0..max_pairs)
            .map(|_| (ms_ids[r.below(ms_ids.len())], rgb_ids[r.below(rgb_ids.len())]))
            .collect()
    }
}

fn mean_pair_mi(ds: &Dataset, pseudo: &Tensor, pairs: &[(usize, usize)], mode: MiChannels) -> Result<f64> {
    let vals = pairs
        .par_iter()
        .map(|&(a, b)| image_mi(&sample_image(pseudo, a), &sample_image(&ds.rgb, b), mode))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean MI between pseudo-RGB images of each class's MS samples and that
/// class's RGB images, over all cross pairs or a seeded subsample of
/// `max_pairs`.
pub fn class_mi_report(ds: &Dataset, max_pairs: usize, seed: u64, mode: MiChannels) -> Result<Vec<ClassMi>> {
    let pseudo = pseudo_rgb_batch(&ds.ms, ds.spec().rgb_band_indices)?;
    let membership = ds.ms_labels.membership();
    let mut out = Vec::with_capacity(ds.classes());
    for c in 0..ds.classes() {
        let ms_ids: Vec<usize> = (0..membership.len()).filter(|&i| membership[i].contains(&c)).collect();
        let rgb_ids: Vec<usize> = (0..ds.rgb_labels.len()).filter(|&i| ds.rgb_labels[i] == c).collect();
        if ms_ids.is_empty() || rgb_ids.is_empty() {
            return Err(Error::Contract(format!("class {c} has no samples in one modality")));
        }
        let pairs = pairs_for(&ms_ids, &rgb_ids, max_pairs, &mut Rng::derive(seed, c as u64));
        out.push(ClassMi {
            class: c,
            mean_mi: mean_pair_mi(ds, &pseudo, &pairs, mode)?,
            pairs: pairs.len(),
        });
    }
    Ok(out)
}

/// The same table with RGB labels shuffled, so each class's MS samples are
/// paired with RGB images of arbitrary classes.
pub fn shuffled_label_mi(ds: &Dataset, max_pairs: usize, seed: u64, mode: MiChannels) -> Result<Vec<ClassMi>> {
    let mut shuffled = ds.clone();
    Rng::derive(seed, u64::MAX).shuffle(&mut shuffled.rgb_labels);
    class_mi_report(&shuffled, max_pairs, seed, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            ms_bands: 5,
            ms_per_class: 6,
            rgb_per_class: 5,
            image_size: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn shapes_counts_and_splits() {
        let ds = generate(&tiny(), 1).unwrap();
        assert_eq!(ds.ms.shape(), &[18, 5, 8, 8]);
        assert_eq!(ds.rgb.shape(), &[15, 3, 8, 8]);
        assert_eq!(ds.manifest.ms.per_class, vec![6, 6, 6]);
        assert_eq!(ds.manifest.rgb.per_class, vec![5, 5, 5]);
        for m in [&ds.manifest.ms, &ds.manifest.rgb] {
            let mut all: Vec<usize> = m.splits.train.iter().chain(&m.splits.val).chain(&m.splits.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..m.count).collect::<Vec<_>>());
        }
        assert!(ds.ms.data().iter().chain(ds.rgb.data()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = generate(&tiny(), 5).unwrap();
        let b = generate(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate(&tiny(), 6).unwrap();
        assert_ne!(a.ms, c.ms);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| generate(&tiny(), 9).unwrap());
        let b = three.install(|| generate(&tiny(), 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_shift_zero_noise_shares_signature() {
        let spec = SyntheticSpec {
            region_shift: 0.0,
            noise_sigma: 0.0,
            ..tiny()
        };
        let ds = generate(&spec, 2).unwrap();
        let pseudo = pseudo_rgb_batch(&ds.ms, spec.rgb_band_indices).unwrap();
        let plane = 3 * 64;
        for c in 0..3 {
            let class_mean = |t: &Tensor, ids: Vec<usize>| -> Vec<f64> {
                (0..plane)
                    .map(|p| ids.iter().map(|&i| t.data()[i * plane + p]).sum::<f64>() / ids.len() as f64)
                    .collect()
            };
            let ms_ids: Vec<usize> = (0..18).filter(|i| i / 6 == c).collect();
            let rgb_ids: Vec<usize> = (0..15).filter(|i| i / 5 == c).collect();
            let a = class_mean(&pseudo, ms_ids);
            let b = class_mean(&ds.rgb, rgb_ids);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_label_mode() {
        let spec = SyntheticSpec {
            label_mode: LabelMode::Multi,
            ..tiny()
        };
        let ds = generate(&spec, 3).unwrap();
        let m = ds.ms_labels.membership();
        assert!(m.iter().all(|l| (1..=3).contains(&l.len())));
        assert!(m.iter().enumerate().all(|(i, l)| l.contains(&(i / 6))));
        assert!(m.iter().any(|l| l.len() > 1));
    }

    #[test]
    fn store_load_round_trip_and_truncation() {
        let ds = generate(&tiny(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.ms.data().iter().zip(ds.ms.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let p = dir.path().join("rgb.sbt");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn pseudo_rgb_examples() {
        let v = Tensor::randn(&[3, 2, 2], 1.0, &mut Rng::new(1));
        assert_eq!(pseudo_rgb_split(&v, [0, 1, 2]).unwrap(), v);
        let mut bands = Tensor::zeros(&[6, 2, 2]);
        for b in 0..6 {
            for p in 0..4 {
                bands.data_mut()[b * 4 + p] = 10.0 * (b + 1) as f64;
            }
        }
        let g = pseudo_rgb_split(&bands, [2, 3, 4]).unwrap();
        assert_eq!(g.data(), &[30.0, 30.0, 30.0, 30.0, 40.0, 40.0, 40.0, 40.0, 50.0, 50.0, 50.0, 50.0]);
        assert!(pseudo_rgb_split(&bands, [2, 3, 6]).is_err());

        let r = Tensor::randn(&[7, 4, 3], 1.0, &mut Rng::new(2));
        let g = pseudo_rgb_split(&r, [3, 0, 2]).unwrap();
        for (k, &b) in [3, 0, 2].iter().enumerate() {
            for p in 0..12 {
                assert_eq!(g.data()[k * 12 + p], r.data()[b * 12 + p]);
            }
        }
    }

    #[test]
    fn mi_identities() {
        let mut rng = Rng::new(3);
        let a: Vec<u8> = (0..1024).map(|_| rng.below(40) as u8).collect();
        assert_eq!(mutual_information(&a, &a).unwrap(), entropy_u8(&a));
        let flat = vec![17u8; 1024];
        assert_eq!(mutual_information(&flat, &a).unwrap(), 0.0);
        let b: Vec<u8> = (0..1024).map(|_| rng.below(256) as u8).collect();
        assert_eq!(
            mutual_information(&a, &b).unwrap().to_bits(),
            mutual_information(&b, &a).unwrap().to_bits()
        );
        assert!(mutual_information(&a, &b[..10]).is_err());
    }

    /// At 16×16 the 256-bin joint histogram is almost all singletons, so the
    /// MI checks run on larger, cleaner images.
    fn mi_spec(region_shift: f64) -> SyntheticSpec {
        SyntheticSpec {
            ms_per_class: 20,
            rgb_per_class: 20,
            image_size: 64,
            noise_sigma: 0.05,
            region_shift,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn class_mi_falls_as_region_shift_grows() {
        let means: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&shift| {
                let ds = generate(&mi_spec(shift), 7).unwrap();
                let r = class_mi_report(&ds, DEFAULT_MI_PAIRS, 1, MiChannels::Average).unwrap();
                r.iter().map(|c| c.mean_mi).sum::<f64>() / r.len() as f64
            })
            .collect();
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn class_mi_beats_shuffled_labels_without_shift() {
        let spec = mi_spec(0.0);
        let ds = generate(&spec, 7).unwrap();
        let report = class_mi_report(&ds, DEFAULT_MI_PAIRS, 1, MiChannels::Average).unwrap();
        let base = shuffled_label_mi(&ds, DEFAULT_MI_PAIRS, 1, MiChannels::Average).unwrap();
        for (r, b) in report.iter().zip(&base) {
            assert!(r.mean_mi > b.mean_mi, "class {} {} vs {}", r.class, r.mean_mi, b.mean_mi);
        }
        assert_eq!(report, class_mi_report(&ds, DEFAULT_MI_PAIRS, 1, MiChannels::Average).unwrap());
    }

    #[test]
    fn single_image_classes_report_one_pair() {
        let spec = SyntheticSpec {
            ms_per_class: 1,
            rgb_per_class: 1,
            ..tiny()
        };
        let ds = generate(&spec, 8).unwrap();
        let r = class_mi_report(&ds, DEFAULT_MI_PAIRS, 0, MiChannels::PerChannel).unwrap();
        assert!(r.iter().all(|c| c.pairs == 1));
    }

    #[test]
    fn spec_validation() {
        let ok = SyntheticSpec::default();
        ok.validate().unwrap();
        assert!(SyntheticSpec { rgb_band_indices: [1, 1, 2], ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { rgb_band_indices: [1, 2, 10], ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { ms_per_class: 0, ..ok.clone() }.validate().is_err());
        assert_ne!(ok.hash(), SyntheticSpec { noise_sigma: 0.2, ..ok.clone() }.hash());
    }
}
