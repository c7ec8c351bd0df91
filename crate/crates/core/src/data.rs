//! Synthetic multi-label image datasets, the uncertain-label policy, and the
//! AXDS file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytesio::Reader;
use crate::error::{Error, Result};
use crate::rng::mix_seed;
use crate::tensor::Tensor;

pub const LABEL_NEG: u8 = 0;
pub const LABEL_POS: u8 = 1;
pub const LABEL_UNCERTAIN: u8 = 2;

pub const DEFAULT_LABEL_NAMES: [&str; 6] = [
    "No Finding",
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Pleural Effusion",
];

/// Labels that default to positive when uncertain.
const UNCERTAIN_POSITIVE: [&str; 2] = ["Atelectasis", "Edema"];

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, 1, S, S], values in [0,1].
    pub images: Tensor,
    /// N * L entries in {0, 1, 2}; 2 marks an uncertain label.
    pub labels: Vec<u8>,
    pub label_names: Vec<String>,
    pub split: Option<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn is_resolved(&self) -> bool {
        self.labels.iter().all(|&l| l != LABEL_UNCERTAIN)
    }

    /// Labels as an [N, L] tensor of 0.0/1.0. Errors on unresolved labels.
    pub fn label_tensor(&self) -> Result<Tensor> {
        if !self.is_resolved() {
            return Err(Error::invalid(
                "dataset still contains uncertain labels; apply a LabelPolicy first",
            ));
        }
        Tensor::new(
            vec![self.n(), self.num_labels()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    /// Image `i` as a [1, 1, S, S] tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.side();
        let per = s * s;
        Tensor::new(
            vec![1, 1, s, s],
            self.images.data()[i * per..(i + 1) * per].to_vec(),
        )
        .unwrap()
    }

    /// Label row `i` as a [1, L] tensor (must be resolved).
    pub fn label_row(&self, i: usize) -> Result<Tensor> {
        let l = self.num_labels();
        let row = &self.labels[i * l..(i + 1) * l];
        if row.contains(&LABEL_UNCERTAIN) {
            return Err(Error::invalid("unresolved label row"));
        }
        Tensor::new(vec![1, l], row.iter().map(|&v| v as f64).collect())
    }

    /// Subset by example indices, preserving order.
    pub fn select(&self, indices: &[usize], split: Option<&str>) -> Dataset {
        let s = self.side();
        let l = self.num_labels();
        let per = s * s;
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            pixels.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.extend_from_slice(&self.labels[i * l..(i + 1) * l]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), 1, s, s], pixels).unwrap(),
            labels,
            label_names: self.label_names.clone(),
            split: split.map(str::to_string),
        }
    }
}

/// Per-label mapping of uncertain entries to 0 or 1. Must cover every label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelPolicy {
    map: BTreeMap<String, u8>,
}

impl LabelPolicy {
    pub fn new(map: BTreeMap<String, u8>) -> Self {
        LabelPolicy { map }
    }

    /// Uncertain maps to 1 for Atelectasis and Edema, 0 elsewhere.
    pub fn chexpert_default(label_names: &[String]) -> Self {
        let map = label_names
            .iter()
            .map(|n| {
                let v = if UNCERTAIN_POSITIVE.contains(&n.as_str()) {
                    LABEL_POS
                } else {
                    LABEL_NEG
                };
                (n.clone(), v)
            })
            .collect();
        LabelPolicy { map }
    }

    pub fn get(&self, name: &str) -> Option<u8> {
        self.map.get(name).copied()
    }
}

/// Replace every uncertain label per the policy; certain labels pass through.
pub fn resolve_labels(dataset: &Dataset, policy: &LabelPolicy) -> Result<Dataset> {
    let l = dataset.num_labels();
    let mut mapped = Vec::with_capacity(l);
    for name in &dataset.label_names {
        mapped.push(policy.get(name).ok_or_else(|| {
            Error::invalid(format!("label policy has no mapping for {name:?}"))
        })?);
    }
    let labels = dataset
        .labels
        .iter()
        .enumerate()
        .map(|(i, &v)| if v == LABEL_UNCERTAIN { mapped[i % l] } else { v })
        .collect();
    Ok(Dataset {
        images: dataset.images.clone(),
        labels,
        label_names: dataset.label_names.clone(),
        split: dataset.split.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub side: usize,
    pub num_labels: usize,
    pub seed: u64,
    pub uncertainty_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 4000,
            side: 32,
            num_labels: 6,
            seed: 0,
            uncertainty_rate: 0.05,
        }
    }
}

/// The per-label robust cue: a small checkerboard patch at a label-specific
/// location (±1 inside the patch, 0 elsewhere). A positive label stamps the
/// patch with a per-example random sign, so only the *presence* of local
/// high-frequency contrast carries label information — the cue has zero
/// linear correlation with the label and lives at the pixel-alternation
/// frequency, far from the smooth gratings of [`label_texture`].
pub fn label_marker(label: usize, num_labels: usize, side: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * label as f64 / num_labels as f64;
    checkerboard_patch(side, angle, 0.30, (side / 8).max(1))
}

/// A second, smaller checkerboard patch per label on an inner ring, offset
/// from the [`label_marker`] sites. Unlike the marker it tracks the label
/// exactly, so it is the most reliable cue in the image — but it is also
/// the least salient one, and standard training tends to leave it
/// untouched.
pub fn label_stamp(label: usize, num_labels: usize, side: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * (label as f64 + 0.5) / num_labels as f64;
    checkerboard_patch(side, angle, 0.15, (side / 16).max(1))
}

/// A solid bright square per label on an outer ring, far brighter than any
/// common perturbation budget. A perturbation bounded well below its
/// amplitude can neither paint a convincing fake nor dim a real one enough
/// to flip how examples rank, so this is the one cue that survives
/// transferred attacks at every budget the toolkit sweeps. It is noisy by
/// construction (see `PLATE_HIT_RATE` / `PLATE_FALSE_RATE`), which keeps it
/// from being sufficient on its own and forces models to also learn the
/// fragile cues that attacks exploit.
pub fn label_plate(label: usize, num_labels: usize, side: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * (label as f64 + 0.5) / num_labels as f64;
    solid_patch(side, angle, 0.44, (side / 16).max(1))
}

fn patch_center(side: usize, angle: f64, radius: f64) -> (isize, isize) {
    let s = side as f64;
    let cy = (s / 2.0 + radius * s * angle.sin()).round() as isize;
    let cx = (s / 2.0 + radius * s * angle.cos()).round() as isize;
    (cy, cx)
}

fn solid_patch(side: usize, angle: f64, radius: f64, half: usize) -> Vec<f64> {
    let (cy, cx) = patch_center(side, angle, radius);
    let half = half as isize;
    let mut out = vec![0.0; side * side];
    for y in (cy - half).max(0)..=(cy + half).min(side as isize - 1) {
        for x in (cx - half).max(0)..=(cx + half).min(side as isize - 1) {
            out[y as usize * side + x as usize] = 1.0;
        }
    }
    out
}

fn checkerboard_patch(side: usize, angle: f64, radius: f64, half: usize) -> Vec<f64> {
    let (cy, cx) = patch_center(side, angle, radius);
    let half = half as isize;
    let mut out = vec![0.0; side * side];
    for y in (cy - half).max(0)..=(cy + half).min(side as isize - 1) {
        for x in (cx - half).max(0)..=(cx + half).min(side as isize - 1) {
            out[y as usize * side + x as usize] = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    out
}

/// A fixed full-image sinusoidal grating per label, pairwise orthogonal
/// across labels. Its sign in a rendered image encodes the label state,
/// making it a highly predictive cue — but its amplitude is so small that a
/// modest perturbation erases or inverts it. Robust classifiers must rely on
/// the marker patches instead.
pub fn label_texture(label: usize, side: usize) -> Vec<f64> {
    // Gratings are defined by fixed pixel periods, not per-image cycle
    // counts, so their local appearance is the same at every image size.
    // Periods are short (4-6 pixels) so even a 3x3 kernel resolves them,
    // but none collapses to the 2-pixel checkerboard period the marker and
    // stamp patches use.
    const PERIODS: [(f64, f64); 6] = [
        (0.0, 4.0),
        (4.0, 0.0),
        (4.0, 4.0),
        (0.0, 6.0),
        (6.0, 0.0),
        (6.0, 6.0),
    ];
    let (py, px) = PERIODS[label % PERIODS.len()];
    let s = side as f64;
    let fy = if py == 0.0 { 0.0 } else { s / py };
    let fx = if px == 0.0 { 0.0 } else { s / px };
    let cycle = label / PERIODS.len(); // extra labels reuse shifted phases
    let phase = 0.5 * cycle as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let arg = 2.0 * std::f64::consts::PI * (fy * y as f64 + fx * x as f64) / s + phase;
            out.push(arg.cos());
        }
    }
    out
}

/// Amplitude of the [`label_texture`] cue. Deliberately below twice the
/// smallest interesting attack budget, so even a 4/255 perturbation can
/// overwrite a real grating with a convincing fake of the opposite sign.
pub const TEXTURE_AMPLITUDE: f64 = 0.008;

/// Probability that a grating's sign contradicts its label, capping how
/// reliable the texture cue can ever be on its own.
pub const TEXTURE_FLIP_RATE: f64 = 0.10;

/// Amplitude of a marker patch. Large enough that the smallest swept attack
/// budget can only dim it, small enough that moderate budgets overwrite it.
pub const MARKER_AMPLITUDE: f64 = 0.022;

/// Probability that the marker is stamped when the label is positive.
pub const MARKER_HIT_RATE: f64 = 0.8;

/// Probability that the marker is stamped anyway when the label is negative.
pub const MARKER_FALSE_RATE: f64 = 0.3;

/// Amplitude of a positive label's stamp patch. Matched to the marker: it
/// survives the smallest swept budget but not moderate ones.
pub const STAMP_AMPLITUDE: f64 = 0.022;

/// Amplitude of a plate patch; larger than twice the biggest attack budget
/// the toolkit sweeps, so a real plate always outshines a painted one.
pub const PLATE_AMPLITUDE: f64 = 1.0;

/// Probability that the plate is drawn when the label is positive.
pub const PLATE_HIT_RATE: f64 = 0.9;

/// Probability that the plate is drawn anyway when the label is negative.
pub const PLATE_FALSE_RATE: f64 = 0.05;

/// Standard deviation of the additive pixel noise. Kept below the faintest
/// cue amplitude so every cue is detectable in principle.
pub const NOISE_SIGMA: f64 = 0.005;

/// Renders each positive label's marker patch (with a per-example random
/// sign) onto a dim background with Gaussian pixel noise, plus a signed
/// low-amplitude grating cue per label. Labels are drawn from a shared
/// latent factor so they are pairwise correlated. A fraction
/// `uncertainty_rate` of label entries is overwritten with the uncertain
/// marker. Pixels are quantized to f32 so the AXDS file round-trips
/// bit-exactly.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n == 0 || cfg.side < 2 || cfg.num_labels < 2 {
        return Err(Error::invalid(format!(
            "generate_synthetic: degenerate sizes n={} side={} labels={}",
            cfg.n, cfg.side, cfg.num_labels
        )));
    }
    if !(0.0..=1.0).contains(&cfg.uncertainty_rate) {
        return Err(Error::invalid("uncertainty_rate must be in [0,1]"));
    }
    let markers: Vec<Vec<f64>> = (0..cfg.num_labels)
        .map(|l| label_marker(l, cfg.num_labels, cfg.side))
        .collect();
    let stamps: Vec<Vec<f64>> = (0..cfg.num_labels)
        .map(|l| label_stamp(l, cfg.num_labels, cfg.side))
        .collect();
    let plates: Vec<Vec<f64>> = (0..cfg.num_labels)
        .map(|l| label_plate(l, cfg.num_labels, cfg.side))
        .collect();
    let textures: Vec<Vec<f64>> = (0..cfg.num_labels)
        .map(|l| label_texture(l, cfg.side))
        .collect();
    let label_names: Vec<String> = if cfg.num_labels == DEFAULT_LABEL_NAMES.len() {
        DEFAULT_LABEL_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..cfg.num_labels).map(|i| format!("Label {i}")).collect()
    };

    let per = cfg.side * cfg.side;
    let mut pixels = Vec::with_capacity(cfg.n * per);
    let mut labels = Vec::with_capacity(cfg.n * cfg.num_labels);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64));
        // Shared latent factor couples the labels.
        let latent: f64 = standard_normal(&mut rng);
        let mut y = vec![0u8; cfg.num_labels];
        for (l, yl) in y.iter_mut().enumerate() {
            let bias = 0.25 * (l as f64 - (cfg.num_labels - 1) as f64 / 2.0);
            let p = 1.0 / (1.0 + (-(1.2 * latent + bias)).exp());
            *yl = u8::from(rng.gen::<f64>() < p);
        }
        let mut img = vec![0.12f64; per];
        for (l, yl) in y.iter().enumerate() {
            // The marker is a strong but noisy witness of the label; each
            // patch carries a per-example random sign so only its presence
            // (local contrast), never its polarity, is informative.
            let hit_rate = if *yl == 1 {
                MARKER_HIT_RATE
            } else {
                MARKER_FALSE_RATE
            };
            let marker_on = rng.gen::<f64>() < hit_rate;
            let marker_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            if marker_on {
                for (px, pat) in img.iter_mut().zip(&markers[l]) {
                    *px += marker_sign * MARKER_AMPLITUDE * pat;
                }
            }
            let stamp_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            if *yl == 1 {
                for (px, pat) in img.iter_mut().zip(&stamps[l]) {
                    *px += stamp_sign * STAMP_AMPLITUDE * pat;
                }
            }
            // The plate is the high-amplitude cue no bounded perturbation can
            // counterfeit; like the marker it is a noisy witness, so models
            // cannot get by on it alone.
            let plate_rate = if *yl == 1 {
                PLATE_HIT_RATE
            } else {
                PLATE_FALSE_RATE
            };
            let plate_on = rng.gen::<f64>() < plate_rate;
            if plate_on {
                for (px, pat) in img.iter_mut().zip(&plates[l]) {
                    *px += PLATE_AMPLITUDE * pat;
                }
            }
            // The grating tracks the label except for an occasional sign
            // flip, so texture alone can never be a perfect predictor.
            let flipped = rng.gen::<f64>() < TEXTURE_FLIP_RATE;
            let sgn = if (*yl == 1) != flipped { 1.0 } else { -1.0 };
            for (px, t) in img.iter_mut().zip(&textures[l]) {
                *px += sgn * TEXTURE_AMPLITUDE * t;
            }
        }
        for px in img.iter_mut() {
            *px += NOISE_SIGMA * standard_normal(&mut rng);
            *px = px.clamp(0.0, 1.0);
            *px = *px as f32 as f64;
        }
        for yl in y.iter_mut() {
            if rng.gen::<f64>() < cfg.uncertainty_rate {
                *yl = LABEL_UNCERTAIN;
            }
        }
        pixels.extend(img);
        labels.extend(y);
    }
    Ok(Dataset {
        images: Tensor::new(vec![cfg.n, 1, cfg.side, cfg.side], pixels)?,
        labels,
        label_names,
        split: None,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and stable.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Seeded 70/15/15 shuffle split.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let n = dataset.n();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5114));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let train = dataset.select(&indices[..n_train], Some("train"));
    let val = dataset.select(&indices[n_train..n_train + n_val], Some("val"));
    let test = dataset.select(&indices[n_train + n_val..], Some("test"));
    (train, val, test)
}

const AXDS_MAGIC: &[u8; 4] = b"AXDS";
const AXDS_VERSION: u16 = 1;

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(AXDS_MAGIC);
    buf.extend_from_slice(&AXDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.n() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_labels() as u16).to_le_bytes());
    buf.extend_from_slice(&(dataset.side() as u16).to_le_bytes());
    for name in &dataset.label_names {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    let per = dataset.side() * dataset.side();
    let l = dataset.num_labels();
    for i in 0..dataset.n() {
        for &px in &dataset.images.data()[i * per..(i + 1) * per] {
            buf.extend_from_slice(&(px as f32).to_le_bytes());
        }
        buf.extend_from_slice(&dataset.labels[i * l..(i + 1) * l]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4)? != AXDS_MAGIC {
        return Err(r.error("bad magic, not an AXDS dataset"));
    }
    let version = r.u16()?;
    if version != AXDS_VERSION {
        return Err(r.error(format!(
            "unsupported AXDS version {version} (expected {AXDS_VERSION})"
        )));
    }
    let n = r.u32()? as usize;
    let l = r.u16()? as usize;
    let s = r.u16()? as usize;
    let mut label_names = Vec::with_capacity(l);
    for _ in 0..l {
        let len = r.u16()? as usize;
        let raw = r.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| r.error("label name is not valid UTF-8"))?
            .to_string();
        label_names.push(name);
    }
    let per = s * s;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n * l);
    for _ in 0..n {
        for _ in 0..per {
            pixels.push(r.f32()? as f64);
        }
        for &b in r.take(l)? {
            if b > LABEL_UNCERTAIN {
                return Err(r.error(format!("invalid label byte {b}")));
            }
            labels.push(b);
        }
    }
    r.expect_end()?;
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, s, s], pixels)?,
        labels,
        label_names,
        split: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n: 40,
            side: 16,
            num_labels: 6,
            seed: 7,
            uncertainty_rate: 0.1,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn zero_uncertainty_rate_means_no_u_labels() {
        let cfg = SyntheticConfig {
            uncertainty_rate: 0.0,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(ds.is_resolved());
    }

    #[test]
    fn generator_rejects_degenerate_sizes() {
        assert!(generate_synthetic(&SyntheticConfig {
            n: 0,
            ..small_cfg()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticConfig {
            num_labels: 1,
            ..small_cfg()
        })
        .is_err());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert!(ds.images.in_unit_range());
    }

    #[test]
    fn default_policy_follows_uncertain_mapping() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let policy = LabelPolicy::chexpert_default(&ds.label_names);
        assert_eq!(policy.get("Atelectasis"), Some(1));
        assert_eq!(policy.get("Edema"), Some(1));
        assert_eq!(policy.get("Cardiomegaly"), Some(0));
        assert_eq!(policy.get("No Finding"), Some(0));

        let resolved = resolve_labels(&ds, &policy).unwrap();
        assert!(resolved.is_resolved());
        // certain labels pass through
        for (a, b) in ds.labels.iter().zip(&resolved.labels) {
            if *a != LABEL_UNCERTAIN {
                assert_eq!(a, b);
            }
        }
        // uncertain entries follow the per-label mapping
        let l = ds.num_labels();
        for (i, &a) in ds.labels.iter().enumerate() {
            if a == LABEL_UNCERTAIN {
                let name = &ds.label_names[i % l];
                assert_eq!(resolved.labels[i], policy.get(name).unwrap());
            }
        }
    }

    #[test]
    fn policy_must_be_total() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let policy = LabelPolicy::new(BTreeMap::new());
        assert!(resolve_labels(&ds, &policy).is_err());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.axds");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds.images, back.images);
        assert_eq!(ds.labels, back.labels);
        assert_eq!(ds.label_names, back.label_names);
    }

    #[test]
    fn read_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.axds");
        std::fs::write(&bad_magic, b"NOPExxxxxxxxxxxx").unwrap();
        let err = read_dataset(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let empty = dir.path().join("empty.axds");
        std::fs::write(&empty, b"").unwrap();
        let err = read_dataset(&empty).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let ds = generate_synthetic(&small_cfg()).unwrap();
        let good = dir.path().join("good.axds");
        write_dataset(&ds, &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 9; // version
        std::fs::write(&good, &bytes).unwrap();
        let err = read_dataset(&good).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn split_fractions_and_determinism() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 200,
            ..small_cfg()
        })
        .unwrap();
        let (tr, va, te) = split_dataset(&ds, 3);
        assert_eq!(tr.n(), 140);
        assert_eq!(va.n(), 30);
        assert_eq!(te.n(), 30);
        let (tr2, _, _) = split_dataset(&ds, 3);
        assert_eq!(tr.images, tr2.images);
    }

    /// Nearest-centroid on clean class means must separate each label; this
    /// guarantees attacks have a real decision boundary to cross.
    #[test]
    fn generator_has_label_signal() {
        use crate::metrics::auc;
        let cfg = SyntheticConfig {
            n: 400,
            side: 16,
            num_labels: 6,
            seed: 11,
            uncertainty_rate: 0.0,
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let per = cfg.side * cfg.side;
        for l in 0..cfg.num_labels {
            let mut pos_mean = vec![0.0; per];
            let mut neg_mean = vec![0.0; per];
            let (mut np, mut nn) = (0usize, 0usize);
            for i in 0..cfg.n {
                let img = &ds.images.data()[i * per..(i + 1) * per];
                if ds.labels[i * cfg.num_labels + l] == 1 {
                    for (m, &v) in pos_mean.iter_mut().zip(img) {
                        *m += v;
                    }
                    np += 1;
                } else {
                    for (m, &v) in neg_mean.iter_mut().zip(img) {
                        *m += v;
                    }
                    nn += 1;
                }
            }
            for m in pos_mean.iter_mut() {
                *m /= np as f64;
            }
            for m in neg_mean.iter_mut() {
                *m /= nn as f64;
            }
            // score by distance difference to the two centroids
            let mut scores = Vec::with_capacity(cfg.n);
            let mut labels = Vec::with_capacity(cfg.n);
            for i in 0..cfg.n {
                let img = &ds.images.data()[i * per..(i + 1) * per];
                let mut dp = 0.0;
                let mut dn = 0.0;
                for k in 0..per {
                    dp += (img[k] - pos_mean[k]).powi(2);
                    dn += (img[k] - neg_mean[k]).powi(2);
                }
                scores.push(dn - dp);
                labels.push(ds.labels[i * cfg.num_labels + l]);
            }
            let a = auc(&scores, &labels).unwrap();
            assert!(a > 0.7, "label {l}: nearest-centroid AUC {a} <= 0.7");
        }
    }
}
