use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::DatasetManifest;
use crate::data::types::{Domain, Split, TumorClass};
use crate::error::{Error, Result};

/// Stratified TRAIN/VAL assignment of the source entries.
///
/// Each class keeps `round(ratio * n)` entries for TRAIN (clamped so both sides
/// are non-empty); target entries all become TEST. Entry order is preserved.
pub fn split_source(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    split_impl(manifest, ratio, seed, true)
}

/// Like [`split_source`], but a class with a single source sample keeps it in
/// TRAIN instead of failing.
pub(crate) fn split_source_lenient(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    split_impl(manifest, ratio, seed, false)
}

fn split_impl(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
    strict: bool,
) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.domain != Domain::Source {
            continue;
        }
        let class = e
            .class_label
            .ok_or_else(|| Error::MissingLabel(format!("source entry {:?} has no class", e.id)))?;
        by_class[class.index()].push(i);
    }

    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = if e.domain == Domain::Source {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, mut indices) in TumorClass::ALL.into_iter().zip(by_class) {
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 2 {
            if !strict {
                out.entries[indices[0]].split = Split::Train;
                continue;
            }
            return Err(Error::InvalidInput(format!(
                "class {class} has {} source sample(s); at least 2 needed to stratify",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let n_train = train_count(indices.len(), ratio);
        for &i in &indices[..n_train] {
            out.entries[i].split = Split::Train;
        }
    }
    out.seed = seed;
    Ok(out)
}

pub(crate) fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}
