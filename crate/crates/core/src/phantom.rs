//! Synthetic mammogram-like phantoms with exact ground-truth masks.
//!
//! Each image shows a half-ellipse "breast" anchored to the left edge (the
//! chest wall) over a dimmer noisy background. Dense tissue is a union of
//! Gaussian blobs clipped to the breast; its mask is the set of breast pixels
//! where the summed blob profile reaches 0.5, and its intensity ramps from fat
//! to dense over a short profile interval around that level. Tissue intensity
//! falls off to the background level across a narrow skin-line band.
//! MLO-like institutions add a triangular pectoral wedge in the top-left
//! corner, which is excluded from the breast mask. A small bright rectangular marker may sit in a
//! right-hand background corner.
//!
//! Raw intensities are integer detector counts in `[0, 65535]`, so images
//! survive a 16-bit PGM round trip unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::pgm;
use crate::rng;

/// Detector counts corresponding to unit tissue gain.
const TISSUE_SCALE: f64 = 40_000.0;
/// Background sits just under the marker-removal cut (0.85 of the maximum),
/// so re-normalising over a mask that strays onto background still leaves
/// most of the range to fat versus dense tissue.
const BACKGROUND_LEVEL: f64 = 0.75;
const FAT_LEVEL: f64 = 0.90;
/// Muscle is darker than fat and below the marker cut, so marker removal
/// never keeps it.
const PECTORAL_LEVEL: f64 = 0.80;
const DENSE_CONTRAST: f64 = 0.10;
/// Width, in blob-profile units around the 0.5 mask level, of the ramp from
/// fat to full dense contrast.
const DENSE_EDGE: f64 = 0.2;
const TAG_LEVEL: f64 = 1.0;
/// Width in pixels of the skin-line band over which tissue thickness, and
/// with it intensity, falls to zero at the breast boundary.
const SKIN_BAND: f64 = 3.0;
const TAG_WIDTH: usize = 5;
const TAG_HEIGHT: usize = 8;
const TAG_INSET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewStyle {
    /// Craniocaudal-like: no pectoral muscle in frame.
    Cc,
    /// Mediolateral-oblique-like: pectoral wedge in the top-left corner.
    Mlo,
}

impl ViewStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewStyle::Cc => "cc",
            ViewStyle::Mlo => "mlo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cc" => Some(ViewStyle::Cc),
            "mlo" => Some(ViewStyle::Mlo),
            _ => None,
        }
    }
}

/// Acquisition characteristics of one synthetic institution. Geometric
/// ranges are fractions of `image_size`; all ranges are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct InstitutionProfile {
    pub name: String,
    pub view_style: ViewStyle,
    pub image_size: usize,
    pub intensity_gain: f64,
    /// Noise standard deviation as a fraction of the tissue scale.
    pub noise_sigma: f64,
    /// Detector response exponent applied to the dense-tissue profile.
    pub response_gamma: f64,
    /// Horizontal semi-axis of the breast ellipse.
    pub breast_depth: (f64, f64),
    /// Vertical semi-axis of the breast ellipse.
    pub breast_half_height: (f64, f64),
    pub blob_count: (usize, usize),
    pub blob_sigma: (f64, f64),
    pub tag_probability: f64,
    pub n_subjects: usize,
    pub images_per_subject: usize,
    /// Index of the first subject, so train and test cohorts get disjoint ids.
    pub first_subject: usize,
}

impl InstitutionProfile {
    /// CC-like institution: fewer subjects, more images each.
    pub fn default_a() -> Self {
        InstitutionProfile {
            name: "inst-a".into(),
            view_style: ViewStyle::Cc,
            image_size: 64,
            intensity_gain: 1.0,
            noise_sigma: 0.008,
            response_gamma: 1.0,
            breast_depth: (0.45, 0.72),
            breast_half_height: (0.30, 0.44),
            blob_count: (1, 5),
            blob_sigma: (0.05, 0.11),
            tag_probability: 0.5,
            n_subjects: 40,
            images_per_subject: 5,
            first_subject: 0,
        }
    }

    /// MLO-like institution: pectoral wedge, lower gain, noisier, different
    /// detector response.
    pub fn default_b() -> Self {
        InstitutionProfile {
            name: "inst-b".into(),
            view_style: ViewStyle::Mlo,
            image_size: 64,
            intensity_gain: 0.7,
            noise_sigma: 0.012,
            response_gamma: 1.2,
            breast_depth: (0.50, 0.75),
            breast_half_height: (0.32, 0.45),
            blob_count: (1, 5),
            blob_sigma: (0.05, 0.11),
            tag_probability: 0.3,
            n_subjects: 100,
            images_per_subject: 2,
            first_subject: 0,
        }
    }

    pub fn image_count(&self) -> usize {
        self.n_subjects * self.images_per_subject
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("profile {}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(|c: char| c.is_whitespace() || c == '/') {
            return bad("name must be non-empty without whitespace or '/'".into());
        }
        if self.n_subjects == 0 || self.images_per_subject == 0 {
            return bad("needs at least one subject and one image per subject".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        for (label, (lo, hi)) in [
            ("breast_depth", self.breast_depth),
            ("breast_half_height", self.breast_half_height),
            ("blob_sigma", self.blob_sigma),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{label} range ({lo}, {hi}) is empty or out of (0, 1]"));
            }
        }
        if self.blob_count.0 > self.blob_count.1 {
            return bad("blob_count range is empty".into());
        }
        if !(0.0..=1.0).contains(&self.tag_probability) {
            return bad("tag_probability must lie in [0, 1]".into());
        }
        if !(self.intensity_gain > 0.0 && self.intensity_gain * TISSUE_SCALE * 1.2 <= 65535.0) {
            return bad("intensity_gain out of range".into());
        }
        if !(self.noise_sigma >= 0.0 && self.response_gamma > 0.0) {
            return bad("noise_sigma and response_gamma must be non-negative / positive".into());
        }
        Ok(())
    }
}

/// Top-left corner and extent of a marker rectangle, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl TagRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.width).contains(&x) && (self.y..self.y + self.height).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub subject_id: String,
    pub image_index: usize,
    /// Raw (pre-normalisation) detector counts.
    pub image: Image,
    pub breast_truth: BinaryMask,
    pub dense_truth: BinaryMask,
    /// `100 · |dense| / |breast|`.
    pub pd_truth: f64,
    pub tag: Option<TagRect>,
}

pub fn percent_of(dense: &BinaryMask, breast: &BinaryMask) -> f64 {
    100.0 * dense.count() as f64 / breast.count() as f64
}

struct SubjectTraits {
    depth: f64,
    half_height: f64,
    centre_y: f64,
    blobs: usize,
    blob_sigma: f64,
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

fn subject_traits(p: &InstitutionProfile, r: &mut rng::Rng) -> SubjectTraits {
    let s = p.image_size as f64;
    SubjectTraits {
        depth: uniform(r, p.breast_depth) * s,
        half_height: uniform(r, p.breast_half_height) * s,
        centre_y: s * (0.5 + r.random_range(-0.05..=0.05)),
        blobs: r.random_range(p.blob_count.0..=p.blob_count.1),
        blob_sigma: uniform(r, p.blob_sigma) * s,
    }
}

fn render(p: &InstitutionProfile, t: &SubjectTraits, r: &mut rng::Rng) -> (Image, BinaryMask, BinaryMask, Option<TagRect>) {
    let n = p.image_size;
    let s = n as f64;
    // per-image jitter around the subject's anatomy
    let depth = t.depth * r.random_range(0.94..=1.06);
    let half_height = t.half_height * r.random_range(0.94..=1.06);
    let cy = t.centre_y + r.random_range(-1.5..=1.5);
    let wedge = match p.view_style {
        ViewStyle::Cc => None,
        ViewStyle::Mlo => Some((r.random_range(0.25..=0.40) * s, r.random_range(0.40..=0.60) * s)),
    };
    let in_wedge = |px: f64, py: f64| wedge.is_some_and(|(ww, wh)| px / ww + py / wh <= 1.0);
    let radius = |px: f64, py: f64| {
        let (u, v) = (px / depth, (py - cy) / half_height);
        (u * u + v * v).sqrt()
    };
    let in_ellipse = |px: f64, py: f64| radius(px, py) <= 1.0;
    // approximate distance to the boundary in pixels, mapped through a smoothstep
    let thickness = |px: f64, py: f64| {
        let r = ((1.0 - radius(px, py)) * depth.min(half_height) / SKIN_BAND).clamp(0.0, 1.0);
        r * r * (3.0 - 2.0 * r)
    };
    let breast = BinaryMask::from_fn(n, n, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        in_ellipse(px, py) && !in_wedge(px, py)
    });

    // blob centres are drawn uniformly over breast pixels
    let breast_pixels: Vec<usize> = (0..n * n).filter(|&i| breast.bits()[i]).collect();
    let blobs: Vec<(f64, f64, f64)> = (0..t.blobs)
        .filter(|_| !breast_pixels.is_empty())
        .map(|_| {
            let i = breast_pixels[r.random_range(0..breast_pixels.len())];
            let sigma = t.blob_sigma * r.random_range(0.8..=1.2);
            ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5, sigma)
        })
        .collect();
    let profile: Vec<f64> = (0..n * n)
        .map(|i| {
            let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
            blobs
                .iter()
                .map(|&(bx, by, sg)| (-((px - bx).powi(2) + (py - by).powi(2)) / (2.0 * sg * sg)).exp())
                .sum()
        })
        .collect();
    let dense = BinaryMask::new(
        n,
        n,
        (0..n * n).map(|i| breast.bits()[i] && profile[i] >= 0.5).collect(),
    )
    .expect("dims");

    let tag = (r.random::<f64>() < p.tag_probability).then(|| {
        let top = r.random_bool(0.5);
        TagRect {
            x: n - TAG_INSET - TAG_WIDTH,
            y: if top { TAG_INSET } else { n - TAG_INSET - TAG_HEIGHT },
            width: TAG_WIDTH,
            height: TAG_HEIGHT,
        }
    });

    let scale = p.intensity_gain * TISSUE_SCALE;
    let mut pixels = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let (x, y) = (i % n, i / n);
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let level = if tag.is_some_and(|t| t.contains(x, y)) {
            TAG_LEVEL
        } else if in_wedge(px, py) {
            PECTORAL_LEVEL
        } else if breast.bits()[i] {
            let z = ((profile[i] - 0.5) / DENSE_EDGE + 0.5).clamp(0.0, 1.0);
            let q = z * z * (3.0 - 2.0 * z);
            let tissue = FAT_LEVEL + DENSE_CONTRAST * q.powf(p.response_gamma);
            BACKGROUND_LEVEL + (tissue - BACKGROUND_LEVEL) * thickness(px, py)
        } else {
            BACKGROUND_LEVEL
        };
        let noise: f64 = StandardNormal.sample(r);
        let v = (level + p.noise_sigma * noise) * scale;
        pixels.push(v.round().clamp(0.0, 65535.0) as f32);
    }
    (Image::new(n, n, pixels).expect("dims"), breast, dense, tag)
}

/// Generates `n_subjects · images_per_subject` samples. The output depends
/// only on `(profile, seed)`; each subject and image draws from its own
/// derived stream.
pub fn generate_dataset(profile: &InstitutionProfile, seed: u64) -> Result<Vec<PhantomSample>> {
    profile.validate()?;
    let base = rng::derive_seed(seed, &format!("phantom/{}", profile.name));
    let mut out = Vec::with_capacity(profile.image_count());
    for k in 0..profile.n_subjects {
        let subject = profile.first_subject + k;
        let subject_seed = rng::derive_seed(base, &format!("subject/{subject}"));
        let traits = subject_traits(profile, &mut rng::stream(subject_seed, "traits"));
        for image_index in 0..profile.images_per_subject {
            let mut r = rng::indexed_stream(subject_seed, "image", image_index as u64);
            let (image, breast_truth, dense_truth, tag) = render(profile, &traits, &mut r);
            let pd_truth = percent_of(&dense_truth, &breast_truth);
            out.push(PhantomSample {
                subject_id: format!("{}-{subject:04}", profile.name),
                image_index,
                image,
                breast_truth,
                dense_truth,
                pd_truth,
                tag,
            });
        }
    }
    Ok(out)
}

/// One manifest row: a sample on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub institution: String,
    pub subject_id: String,
    pub image_index: usize,
    pub image_path: PathBuf,
    pub breast_path: PathBuf,
    pub dense_path: PathBuf,
    pub pd_truth: f64,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# institution subject image_index image breast dense pd_truth";

/// A sample read back from disk together with its institution.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub institution: String,
    pub sample: PhantomSample,
}

/// Writes `<root>/<institution>/<subject>/<idx>.pgm` (16-bit) with
/// `<idx>_breast.pgm` and `<idx>_dense.pgm` sidecars, plus
/// `<root>/manifest.txt` listing every sample with paths relative to `root`.
pub fn write_dataset(root: &Path, institutions: &[(&str, &[PhantomSample])]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (institution, samples) in institutions {
        for s in samples.iter() {
            let rel_dir = PathBuf::from(institution).join(&s.subject_id);
            fs::create_dir_all(root.join(&rel_dir))?;
            let image_path = rel_dir.join(format!("{}.pgm", s.image_index));
            let breast_path = rel_dir.join(format!("{}_breast.pgm", s.image_index));
            let dense_path = rel_dir.join(format!("{}_dense.pgm", s.image_index));
            fs::write(root.join(&image_path), pgm::write_pgm(&s.image, 65535)?)?;
            fs::write(root.join(&breast_path), pgm::write_mask_pgm(&s.breast_truth))?;
            fs::write(root.join(&dense_path), pgm::write_mask_pgm(&s.dense_truth))?;
            writeln!(
                manifest,
                "{institution} {} {} {} {} {} {}",
                s.subject_id,
                s.image_index,
                image_path.display(),
                breast_path.display(),
                dense_path.display(),
                s.pd_truth
            )
            .expect("write to string");
            entries.push(ManifestEntry {
                institution: institution.to_string(),
                subject_id: s.subject_id.clone(),
                image_index: s.image_index,
                image_path,
                breast_path,
                dense_path,
                pd_truth: s.pd_truth,
            });
        }
    }
    fs::write(root.join(MANIFEST_FILE), manifest)?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::config(format!("manifest line {}: malformed", lineno + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            institution: f[0].to_string(),
            subject_id: f[1].to_string(),
            image_index: f[2].parse().map_err(|_| bad())?,
            image_path: f[3].into(),
            breast_path: f[4].into(),
            dense_path: f[5].into(),
            pd_truth: f[6].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Loads every manifest entry, grouped by institution in manifest order.
pub fn read_dataset(root: &Path) -> Result<BTreeMap<String, Vec<PhantomSample>>> {
    let mut out: BTreeMap<String, Vec<PhantomSample>> = BTreeMap::new();
    for e in read_manifest(root)? {
        let sample = PhantomSample {
            subject_id: e.subject_id,
            image_index: e.image_index,
            image: pgm::load_image(root.join(&e.image_path))?,
            breast_truth: pgm::load_mask(root.join(&e.breast_path))?,
            dense_truth: pgm::load_mask(root.join(&e.dense_path))?,
            pd_truth: e.pd_truth,
            tag: None,
        };
        out.entry(e.institution).or_default().push(sample);
    }
    Ok(out)
}
