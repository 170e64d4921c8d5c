//! Procedural stand-in for a two-domain, three-plane slice collection.
//!
//! Orientation is carried by the head silhouette (tall oval for axial, a dome
//! over a centered stem for coronal, a wide profile with a slanted stem for
//! sagittal). The tumor class is carried by the lesion pattern: a large
//! ring-enhancing mass with a dark core and halo (glioma), a bright homogeneous
//! disc against the skull (meningioma) or a small bright blob with a stalk at
//! the inferior midline (pituitary). Each domain then applies its photometric
//! model `contrast * value + offset + N(0, noise)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::{DatasetManifest, ManifestEntry};
use crate::data::split::split_source_lenient;
use crate::data::types::{Domain, Orientation, SliceImage, Split, TumorClass, MIN_SLICE_EDGE};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub intensity_offset: f64,
    pub contrast_scale: f64,
    pub noise_std: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        intensity_offset: 0.0,
        contrast_scale: 1.0,
        noise_std: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: u32,
    pub counts: BTreeMap<(Domain, Orientation, TumorClass), usize>,
    pub source: Photometric,
    pub target: Photometric,
    pub split_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            counts: BTreeMap::new(),
            source: Photometric {
                noise_std: 2.0,
                ..Photometric::IDENTITY
            },
            target: Photometric {
                intensity_offset: 10.0,
                noise_std: 0.0,
                ..Photometric::IDENTITY
            },
            split_ratio: 0.8,
        }
    }
}

impl SynthConfig {
    /// Sets the same count for every (orientation, class) cell of `domain`.
    pub fn with_uniform_counts(mut self, domain: Domain, per_cell: usize) -> Self {
        for o in Orientation::ALL {
            for c in TumorClass::ALL {
                self.counts.insert((domain, o, c), per_cell);
            }
        }
        self
    }

    pub fn count(&self, domain: Domain, o: Orientation, c: TumorClass) -> usize {
        self.counts.get(&(domain, o, c)).copied().unwrap_or(0)
    }

    pub fn photometric(&self, domain: Domain) -> Photometric {
        match domain {
            Domain::Source => self.source,
            Domain::Target => self.target,
        }
    }

    /// Reads the key-value generator config.
    ///
    /// Counts use `count.<domain>[.<orientation>[.<class>]]`; the most
    /// specific key wins. Photometric keys are
    /// `<domain>.intensity_offset`, `<domain>.contrast_scale` and
    /// `<domain>.noise_std`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for key in kv.keys() {
            let known = matches!(key, "image_size" | "split_ratio")
                || key.starts_with("count.")
                || Domain::ALL.iter().any(|d| {
                    ["intensity_offset", "contrast_scale", "noise_std"]
                        .iter()
                        .any(|k| key == format!("{d}.{k}"))
                });
            if !known {
                return Err(Error::Config(format!("unknown generator key {key:?}")));
            }
            if let Some(rest) = key.strip_prefix("count.") {
                let parts: Vec<&str> = rest.split('.').collect();
                if parts.len() > 3 {
                    return Err(Error::Config(format!("bad count key {key:?}")));
                }
                parts[0].parse::<Domain>()?;
                if let Some(o) = parts.get(1) {
                    o.parse::<Orientation>()?;
                }
                if let Some(c) = parts.get(2) {
                    c.parse::<TumorClass>()?;
                }
            }
        }

        if let Some(size) = kv.get::<i64>("image_size")? {
            if size < MIN_SLICE_EDGE as i64 {
                return Err(Error::Config(format!(
                    "image_size {size} below {MIN_SLICE_EDGE}"
                )));
            }
            cfg.image_size = size as u32;
        }
        if let Some(r) = kv.get::<f64>("split_ratio")? {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("split_ratio {r} outside (0, 1)")));
            }
            cfg.split_ratio = r;
        }
        for domain in Domain::ALL {
            let mut p = cfg.photometric(domain);
            if let Some(v) = kv.get::<f64>(&format!("{domain}.intensity_offset"))? {
                p.intensity_offset = v;
            }
            if let Some(v) = kv.get::<f64>(&format!("{domain}.contrast_scale"))? {
                p.contrast_scale = v;
            }
            if let Some(v) = kv.get::<f64>(&format!("{domain}.noise_std"))? {
                if v < 0.0 {
                    return Err(Error::Config(format!("{domain}.noise_std must be >= 0")));
                }
                p.noise_std = v;
            }
            match domain {
                Domain::Source => cfg.source = p,
                Domain::Target => cfg.target = p,
            }
            for o in Orientation::ALL {
                for c in TumorClass::ALL {
                    let keys = [
                        format!("count.{domain}.{o}.{c}"),
                        format!("count.{domain}.{o}"),
                        format!("count.{domain}"),
                    ];
                    for key in &keys {
                        if let Some(n) = kv.get::<i64>(key)? {
                            if n < 0 {
                                return Err(Error::Config(format!("{key} = {n} is negative")));
                            }
                            cfg.counts.insert((domain, o, c), n as usize);
                            break;
                        }
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < MIN_SLICE_EDGE {
            return Err(Error::Config(format!(
                "image_size {} below {MIN_SLICE_EDGE}",
                self.image_size
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio {} outside (0, 1)",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

pub fn slice_id(domain: Domain, o: Orientation, c: TumorClass, index: usize) -> String {
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    format!("{prefix}-{o}-{c}-{index:04}")
}

/// Renders every configured slice in memory, ordered by domain, orientation,
/// class and index. Both labels are attached to every slice, including target.
pub fn render_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<SliceImage>> {
    config.validate()?;
    let mut out = Vec::new();
    for domain in Domain::ALL {
        for o in Orientation::ALL {
            for c in TumorClass::ALL {
                for i in 0..config.count(domain, o, c) {
                    let pixels = render_slice(config, seed, domain, o, c, i);
                    out.push(SliceImage::new(
                        slice_id(domain, o, c, i),
                        pixels,
                        domain,
                        Some(c),
                        Some(o),
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// Builds the manifest for `slices` (as produced by [`render_dataset`]) with a
/// stratified source split and every target entry in TEST.
pub fn manifest_for(
    config: &SynthConfig,
    slices: &[SliceImage],
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    let entries = slices
        .iter()
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            path: Path::new("images").join(format!("{}.png", s.id)),
            domain: s.domain,
            class_label: s.class_label,
            orientation_label: s.orientation_label,
            split: Split::Test,
        })
        .collect();
    let manifest = DatasetManifest::new(entries, seed, root)?;
    split_source_lenient(&manifest, config.split_ratio, seed)
}

/// Writes `images/<id>.png` and `manifest.csv` under `out_dir`.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let slices = render_dataset(config, seed)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in &slices {
        let path = images.join(format!("{}.png", s.id));
        s.pixels
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path, source })?;
    }
    let manifest = manifest_for(config, &slices, seed, out_dir)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn cell_seed(seed: u64, domain: Domain, o: Orientation, c: TumorClass, index: usize) -> u64 {
    // splitmix64 over the packed cell coordinates
    let packed = ((domain.index() as u64) << 56)
        ^ ((o.index() as u64) << 52)
        ^ ((c.index() as u64) << 48)
        ^ index as u64;
    let mut z = seed ^ packed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Geometry {
    scale: f64,
    tx: f64,
    ty: f64,
    cos: f64,
    sin: f64,
}

impl Geometry {
    /// Maps image coordinates in [-1, 1] into the canonical head frame.
    fn to_canonical(&self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = (u - self.tx, v - self.ty);
        let (u, v) = (self.cos * u + self.sin * v, -self.sin * u + self.cos * v);
        (u / self.scale, v / self.scale)
    }
}

/// Main brain ellipse per orientation: (center_u, center_v, semi_u, semi_v).
fn brain_ellipse(o: Orientation) -> (f64, f64, f64, f64) {
    match o {
        Orientation::Axial => (0.0, 0.0, 0.66, 0.86),
        Orientation::Coronal => (0.0, -0.14, 0.82, 0.66),
        Orientation::Sagittal => (-0.02, -0.14, 0.88, 0.6),
    }
}

fn ellipse_level(u: f64, v: f64, e: (f64, f64, f64, f64)) -> f64 {
    let (cu, cv, a, b) = e;
    ((u - cu) / a).powi(2) + ((v - cv) / b).powi(2)
}

fn in_stem(o: Orientation, u: f64, v: f64) -> bool {
    match o {
        Orientation::Axial => false,
        Orientation::Coronal => u.abs() <= 0.17 && (0.3..=0.98).contains(&v),
        Orientation::Sagittal => {
            // Slanted band from (0.05, 0.3) to (0.3, 0.98).
            let (ax, ay, bx, by) = (0.05, 0.3, 0.3, 0.98);
            let (dx, dy) = (bx - ax, by - ay);
            let t = ((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy);
            if !(0.0..=1.0).contains(&t) {
                return false;
            }
            let (px, py) = (ax + t * dx, ay + t * dy);
            ((u - px).powi(2) + (v - py).powi(2)).sqrt() <= 0.12
        }
    }
}

struct Lesion {
    class: TumorClass,
    cu: f64,
    cv: f64,
    radius: f64,
    phase: [f64; 2],
}

impl Lesion {
    fn sample(class: TumorClass, o: Orientation, rng: &mut ChaCha8Rng) -> Self {
        let (ecu, ecv, ea, eb) = brain_ellipse(o);
        let phase = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
        match class {
            TumorClass::Glioma => {
                let r = rng.gen_range(0.0..0.35);
                let t = rng.gen_range(0.0..2.0 * PI);
                Lesion {
                    class,
                    cu: ecu + r * ea * t.cos(),
                    cv: ecv + r * eb * t.sin(),
                    radius: rng.gen_range(0.2..0.27),
                    phase,
                }
            }
            TumorClass::Meningioma => {
                // Against the skull: 62-72% of the way to the boundary.
                let r = rng.gen_range(0.62..0.72);
                let t = rng.gen_range(0.0..2.0 * PI);
                Lesion {
                    class,
                    cu: ecu + r * ea * t.cos(),
                    cv: ecv + r * eb * t.sin(),
                    radius: rng.gen_range(0.14..0.19),
                    phase,
                }
            }
            TumorClass::Pituitary => Lesion {
                class,
                cu: ecu + rng.gen_range(-0.05..0.05),
                cv: ecv + eb * rng.gen_range(0.35..0.5),
                radius: rng.gen_range(0.07..0.1),
                phase,
            },
        }
    }

    /// Lesion intensity at (u, v), or `None` where the lesion leaves tissue untouched.
    fn intensity(&self, u: f64, v: f64) -> Option<f64> {
        let (du, dv) = (u - self.cu, v - self.cv);
        let dist = (du * du + dv * dv).sqrt();
        match self.class {
            TumorClass::Glioma => {
                let theta = dv.atan2(du);
                let r = self.radius
                    * (1.0
                        + 0.15 * (3.0 * theta + self.phase[0]).sin()
                        + 0.1 * (5.0 * theta + self.phase[1]).sin());
                let d = dist / r;
                if d < 0.55 {
                    Some(45.0)
                } else if d < 1.0 {
                    Some(195.0 - 40.0 * (d - 0.55) / 0.45)
                } else if d < 1.35 {
                    Some(70.0)
                } else {
                    None
                }
            }
            TumorClass::Meningioma => {
                let d = dist / self.radius;
                if d < 0.9 {
                    Some(205.0)
                } else if d < 1.1 {
                    Some(205.0 - 110.0 * (d - 0.9) / 0.2)
                } else {
                    None
                }
            }
            TumorClass::Pituitary => {
                let d = dist / self.radius;
                let stalk = du.abs() < 0.018 && dv < 0.0 && dv > -2.2 * self.radius;
                if d < 1.0 {
                    Some(185.0)
                } else if stalk {
                    Some(160.0)
                } else {
                    None
                }
            }
        }
    }
}

fn render_slice(
    config: &SynthConfig,
    seed: u64,
    domain: Domain,
    o: Orientation,
    c: TumorClass,
    index: usize,
) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, domain, o, c, index));
    let rot = rng.gen_range(-8.0f64..8.0).to_radians();
    let geom = Geometry {
        scale: rng.gen_range(0.92..1.08),
        tx: rng.gen_range(-0.05..0.05),
        ty: rng.gen_range(-0.05..0.05),
        cos: rot.cos(),
        sin: rot.sin(),
    };
    let lesion = Lesion::sample(c, o, &mut rng);
    let tex: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..5.0),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let photo = config.photometric(domain);
    let noise = Normal::new(0.0, photo.noise_std.max(0.0)).expect("finite noise std");

    let ellipse = brain_ellipse(o);
    let n = config.image_size;
    let half = (n as f64 - 1.0) / 2.0;
    GrayImage::from_fn(n, n, |x, y| {
        let (u, v) = ((x as f64 - half) / half, (y as f64 - half) / half);
        let (u, v) = geom.to_canonical(u, v);
        let level = ellipse_level(u, v, ellipse);
        let base = if level <= 1.0 {
            if level > 0.8 {
                150.0
            } else if let Some(value) = lesion.intensity(u, v) {
                value
            } else {
                let t: f64 = tex
                    .iter()
                    .map(|&(f, p1, p2)| (f * u + p1).sin() * (f * v + p2).cos())
                    .sum();
                95.0 + 4.0 * t
            }
        } else if in_stem(o, u, v) {
            110.0
        } else {
            0.0
        };
        let value = photo.contrast_scale * base + photo.intensity_offset + noise.sample(&mut rng);
        Luma([value.round().clamp(0.0, 255.0) as u8])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(per_cell_source: usize, per_cell_target: usize) -> SynthConfig {
        SynthConfig::default()
            .with_uniform_counts(Domain::Source, per_cell_source)
            .with_uniform_counts(Domain::Target, per_cell_target)
    }

    #[test]
    fn zero_counts_give_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&config(0, 0), 1, dir.path()).unwrap();
        assert!(m.is_empty());
        let images: Vec<_> = std::fs::read_dir(dir.path().join("images"))
            .unwrap()
            .collect();
        assert!(images.is_empty());
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let cfg = config(2, 1);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic_dataset(&cfg, 9, a.path()).unwrap();
        generate_synthetic_dataset(&cfg, 9, b.path()).unwrap();
        assert_eq!(ma.len(), 27);
        for e in &ma.entries {
            let fa = std::fs::read(a.path().join(&e.path)).unwrap();
            let fb = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(fa, fb, "{}", e.id);
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.csv")).unwrap(),
            std::fs::read(b.path().join("manifest.csv")).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = config(1, 0);
        assert_ne!(
            render_dataset(&cfg, 1).unwrap(),
            render_dataset(&cfg, 2).unwrap()
        );
    }

    #[test]
    fn intensity_offset_moves_target_mean() {
        let mut cfg = SynthConfig {
            source: Photometric::IDENTITY,
            target: Photometric {
                intensity_offset: 40.0,
                ..Photometric::IDENTITY
            },
            ..SynthConfig::default()
        };
        // 100 images per domain.
        for o in Orientation::ALL {
            for (k, c) in TumorClass::ALL.into_iter().enumerate() {
                let n = if (o.index() * 3 + k) == 0 { 12 } else { 11 };
                cfg.counts.insert((Domain::Source, o, c), n);
                cfg.counts.insert((Domain::Target, o, c), n);
            }
        }
        let slices = render_dataset(&cfg, 5).unwrap();
        let mean = |d: Domain| {
            let imgs: Vec<_> = slices.iter().filter(|s| s.domain == d).collect();
            assert_eq!(imgs.len(), 100);
            let total: f64 = imgs
                .iter()
                .map(|s| {
                    s.pixels.pixels().map(|p| p[0] as f64).sum::<f64>() / (s.pixels.len() as f64)
                })
                .sum();
            total / imgs.len() as f64
        };
        let gap = mean(Domain::Target) - mean(Domain::Source);
        assert!((gap - 40.0).abs() <= 2.0, "gap {gap}");
    }

    #[test]
    fn manifest_labels_and_split() {
        let cfg = config(5, 2);
        let slices = render_dataset(&cfg, 3).unwrap();
        let m = manifest_for(&cfg, &slices, 3, Path::new("x")).unwrap();
        assert_eq!(
            m.source_counts
                .get(Some(Orientation::Coronal), Some(TumorClass::Glioma)),
            5
        );
        let train = m.entries.iter().filter(|e| e.split == Split::Train).count();
        assert_eq!(train, 3 * 12);
        assert!(m
            .entries
            .iter()
            .filter(|e| e.domain == Domain::Target)
            .all(|e| e.split == Split::Test));
    }

    #[test]
    fn config_parsing() {
        let kv = KeyValues::parse(
            "image_size = 48\ncount.source = 4\ncount.source.axial = 2\ncount.source.axial.glioma = 7\n\
             count.target = 1\ntarget.intensity_offset = 12.5\ntarget.noise_std = 3\n",
        )
        .unwrap();
        let cfg = SynthConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.image_size, 48);
        assert_eq!(
            cfg.count(Domain::Source, Orientation::Axial, TumorClass::Glioma),
            7
        );
        assert_eq!(
            cfg.count(Domain::Source, Orientation::Axial, TumorClass::Pituitary),
            2
        );
        assert_eq!(
            cfg.count(Domain::Source, Orientation::Coronal, TumorClass::Pituitary),
            4
        );
        assert_eq!(
            cfg.count(
                Domain::Target,
                Orientation::Sagittal,
                TumorClass::Meningioma
            ),
            1
        );
        assert_eq!(cfg.target.intensity_offset, 12.5);
        assert_eq!(cfg.target.noise_std, 3.0);

        for bad in [
            "image_size = 31",
            "count.source = -1",
            "count.elsewhere = 3",
            "count.source.oblique = 3",
            "colour = red",
            "split_ratio = 1.5",
        ] {
            assert!(
                SynthConfig::from_kv(&KeyValues::parse(bad).unwrap()).is_err(),
                "{bad}"
            );
        }
    }
}
