//! Line-oriented dataset manifest.
//!
//! ```text
//! #seed=7
//! #count=source,axial,glioma,50
//! id,path,domain,class,orientation,split
//! s0001,images/s0001.png,source,glioma,axial,train
//! ```
//!
//! `#` lines before the header carry metadata. `#count` lines declare tallies
//! which are checked against the rows on load. Empty label fields mean "absent".

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::types::{Domain, Orientation, SliceImage, Split, TumorClass};
use crate::error::{Error, Result};

/// Line number, domain, orientation, class and count of a `#count` line.
type DeclaredCount = (
    usize,
    Domain,
    Option<Orientation>,
    Option<TumorClass>,
    usize,
);

pub const MANIFEST_HEADER: &str = "id,path,domain,class,orientation,split";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub domain: Domain,
    pub class_label: Option<TumorClass>,
    pub orientation_label: Option<Orientation>,
    pub split: Split,
}

/// Per-(orientation, class) counts for one domain. Absent labels count under `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tally {
    counts: BTreeMap<(Option<Orientation>, Option<TumorClass>), usize>,
}

impl Tally {
    pub fn get(&self, orientation: Option<Orientation>, class: Option<TumorClass>) -> usize {
        self.counts.get(&(orientation, class)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn iter(
        &self,
    ) -> impl Iterator<Item = (Option<Orientation>, Option<TumorClass>, usize)> + '_ {
        self.counts.iter().map(|(&(o, c), &n)| (o, c, n))
    }

    fn add(&mut self, orientation: Option<Orientation>, class: Option<TumorClass>) {
        *self.counts.entry((orientation, class)).or_insert(0) += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub source_counts: Tally,
    pub target_counts: Tally,
    /// Directory relative entry paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate ids and computing tallies.
    pub fn new(entries: Vec<ManifestEntry>, seed: u64, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for entry in &entries {
            if entry.id.is_empty() {
                return Err(Error::InvalidInput("empty slice id".into()));
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::DuplicateId(entry.id.clone()));
            }
        }
        let (source_counts, target_counts) = tally(&entries);
        Ok(Self {
            entries,
            seed,
            source_counts,
            target_counts,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self, domain: Domain) -> &Tally {
        match domain {
            Domain::Source => &self.source_counts,
            Domain::Target => &self.target_counts,
        }
    }

    /// Recomputes the tallies and checks them against the stored ones.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.entries.clone(), self.seed, self.root.clone())?;
        for domain in Domain::ALL {
            check_tally(domain, self.counts(domain), rebuilt.counts(domain))?;
        }
        Ok(())
    }

    /// A new manifest holding the entries accepted by `keep`, in order.
    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        let entries = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        Self::new(entries, self.seed, self.root.clone()).expect("subset of a valid manifest")
    }

    pub fn select(&self, domain: Domain, split: Option<Split>) -> DatasetManifest {
        self.filtered(|e| e.domain == domain && split.is_none_or(|s| e.split == s))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Reads the PNG behind `entry`.
    pub fn load_slice(&self, entry: &ManifestEntry) -> Result<SliceImage> {
        let path = self.resolve(entry);
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_luma8();
        SliceImage::new(
            entry.id.clone(),
            img,
            entry.domain,
            entry.class_label,
            entry.orientation_label,
        )
    }

    pub fn load_slices(&self) -> Result<Vec<SliceImage>> {
        self.entries.iter().map(|e| self.load_slice(e)).collect()
    }

    /// Serializes the manifest. Relative paths are rebased onto `dir` when it
    /// differs from the manifest root.
    pub fn to_text(&self, dir: &Path) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "#seed={}", self.seed).unwrap();
        for domain in Domain::ALL {
            for (o, c, n) in self.counts(domain).iter() {
                writeln!(
                    out,
                    "#count={},{},{},{}",
                    domain,
                    opt_token(o),
                    opt_token(c),
                    n
                )
                .unwrap();
            }
        }
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let path = if e.path.is_absolute() || dir == self.root {
                e.path.clone()
            } else {
                absolute(&self.root.join(&e.path))
            };
            let path = path.to_string_lossy().into_owned();
            for field in [e.id.as_str(), path.as_str()] {
                if field.contains(',') || field.contains('\n') {
                    return Err(Error::InvalidInput(format!(
                        "field {field:?} cannot be stored in a manifest"
                    )));
                }
            }
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.id,
                path,
                e.domain,
                opt_token(e.class_label),
                opt_token(e.orientation_label),
                e.split
            )
            .unwrap();
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = self.to_text(&dir)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seed = 0u64;
        let mut declared: Vec<DeclaredCount> = Vec::new();
        let mut entries = Vec::new();
        let mut header_seen = false;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            if !header_seen {
                if let Some(meta) = line.strip_prefix('#') {
                    if let Some(v) = meta.strip_prefix("seed=") {
                        seed = v
                            .trim()
                            .parse()
                            .map_err(|_| parse_err(format!("bad seed {v:?}")))?;
                    } else if let Some(v) = meta.strip_prefix("count=") {
                        let f: Vec<&str> = v.split(',').collect();
                        if f.len() != 4 {
                            return Err(parse_err(format!("bad count line {v:?}")));
                        }
                        let n = f[3]
                            .trim()
                            .parse()
                            .map_err(|_| parse_err(format!("bad count {:?}", f[3])))?;
                        declared.push((
                            line_no,
                            f[0].parse()?,
                            opt_parse(f[1])?,
                            opt_parse(f[2])?,
                            n,
                        ));
                    }
                    continue;
                }
                if line.trim() != MANIFEST_HEADER {
                    return Err(parse_err(format!("expected header {MANIFEST_HEADER:?}")));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(parse_err(format!("expected 6 fields, found {}", f.len())));
            }
            if f[1].is_empty() {
                return Err(parse_err("empty path".into()));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                domain: f[2].parse()?,
                class_label: opt_parse(f[3])?,
                orientation_label: opt_parse(f[4])?,
                split: f[5].parse()?,
            });
        }
        if !header_seen {
            return Err(Error::Parse {
                line: 0,
                message: "missing manifest header".into(),
            });
        }

        let manifest = Self::new(entries, seed, root)?;
        if !declared.is_empty() {
            let mut declared_tallies = [Tally::default(), Tally::default()];
            for &(_, domain, o, c, n) in &declared {
                declared_tallies[domain.index()].counts.insert((o, c), n);
            }
            for domain in Domain::ALL {
                check_tally(
                    domain,
                    &declared_tallies[domain.index()],
                    manifest.counts(domain),
                )?;
            }
        }
        Ok(manifest)
    }
}

/// Reads and validates a manifest file. Relative image paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, root)
}

fn tally(entries: &[ManifestEntry]) -> (Tally, Tally) {
    let mut source = Tally::default();
    let mut target = Tally::default();
    for e in entries {
        match e.domain {
            Domain::Source => source.add(e.orientation_label, e.class_label),
            Domain::Target => target.add(e.orientation_label, e.class_label),
        }
    }
    (source, target)
}

fn check_tally(domain: Domain, declared: &Tally, actual: &Tally) -> Result<()> {
    let keys: std::collections::BTreeSet<_> = declared
        .counts
        .keys()
        .chain(actual.counts.keys())
        .copied()
        .collect();
    for (o, c) in keys {
        let (d, a) = (declared.get(o, c), actual.get(o, c));
        if d != a {
            return Err(Error::TallyMismatch {
                key: format!("{domain}/{}/{}", opt_token(o), opt_token(c)),
                declared: d,
                actual: a,
            });
        }
    }
    Ok(())
}

fn opt_token<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Option<T>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(
        id: &str,
        domain: Domain,
        class: Option<TumorClass>,
        o: Option<Orientation>,
    ) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            path: format!("{id}.png").into(),
            domain,
            class_label: class,
            orientation_label: o,
            split: if domain == Domain::Source {
                Split::Train
            } else {
                Split::Test
            },
        }
    }

    #[test]
    fn two_unique_entries() {
        let text = format!(
            "{MANIFEST_HEADER}\ns1,a.png,source,glioma,axial,train\ns2,b.png,target,,,test\n"
        );
        let m = DatasetManifest::parse(&text, "").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].class_label, None);
        assert_eq!(
            m.source_counts
                .get(Some(Orientation::Axial), Some(TumorClass::Glioma)),
            1
        );
        assert_eq!(m.target_counts.get(None, None), 1);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let text = format!(
            "{MANIFEST_HEADER}\ns1,a.png,source,glioma,axial,train\ns1,b.png,source,glioma,axial,train\n"
        );
        assert!(
            matches!(DatasetManifest::parse(&text, ""), Err(Error::DuplicateId(id)) if id == "s1")
        );
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        for row in [
            "s1,a.png,elsewhere,glioma,axial,train",
            "s1,a.png,source,astrocytoma,axial,train",
            "s1,a.png,source,glioma,oblique,train",
            "s1,a.png,source,glioma,axial,holdout",
        ] {
            let text = format!("{MANIFEST_HEADER}\n{row}\n");
            assert!(
                matches!(
                    DatasetManifest::parse(&text, ""),
                    Err(Error::UnknownToken { .. })
                ),
                "{row}"
            );
        }
    }

    #[test]
    fn declared_tally_mismatch_is_rejected() {
        let text = format!(
            "#count=source,axial,glioma,2\n{MANIFEST_HEADER}\ns1,a.png,source,glioma,axial,train\n"
        );
        assert!(matches!(
            DatasetManifest::parse(&text, ""),
            Err(Error::TallyMismatch {
                declared: 2,
                actual: 1,
                ..
            })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn missing_header_and_bad_rows() {
        assert!(DatasetManifest::parse("s1,a.png,source,glioma,axial,train\n", "").is_err());
        let text = format!("{MANIFEST_HEADER}\ns1,a.png,source\n");
        assert!(DatasetManifest::parse(&text, "").is_err());
    }

    #[test]
    fn text_round_trip_preserves_order_and_tallies() {
        let entries = vec![
            entry(
                "b",
                Domain::Source,
                Some(TumorClass::Pituitary),
                Some(Orientation::Coronal),
            ),
            entry("a", Domain::Target, Some(TumorClass::Glioma), None),
            entry("c", Domain::Target, None, None),
        ];
        let m = DatasetManifest::new(entries, 42, "root").unwrap();
        let text = m.to_text(Path::new("root")).unwrap();
        let back = DatasetManifest::parse(&text, "root").unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }

    #[test]
    fn table_four_tallies() {
        use Orientation::*;
        use TumorClass::*;
        let table: [(Domain, Orientation, [usize; 3]); 6] = [
            (Domain::Source, Axial, [1184, 717, 535]),
            (Domain::Target, Axial, [620, 182, 388]),
            (Domain::Source, Sagittal, [68, 762, 834]),
            (Domain::Target, Sagittal, [408, 253, 318]),
            (Domain::Source, Coronal, [752, 525, 679]),
            (Domain::Target, Coronal, [398, 273, 224]),
        ];
        let mut entries = Vec::new();
        for (domain, o, counts) in table {
            for (c, &n) in TumorClass::ALL.iter().zip(&counts) {
                for i in 0..n {
                    entries.push(entry(
                        &format!("{domain}-{o}-{c}-{i}"),
                        domain,
                        Some(*c),
                        Some(o),
                    ));
                }
            }
        }
        let m = DatasetManifest::new(entries, 0, "").unwrap();
        let text = m.to_text(Path::new("")).unwrap();
        let m = DatasetManifest::parse(&text, "").unwrap();
        assert_eq!(m.source_counts.get(Some(Axial), Some(Glioma)), 1184);
        assert_eq!(m.source_counts.get(Some(Sagittal), Some(Glioma)), 68);
        assert_eq!(m.target_counts.get(Some(Coronal), Some(Pituitary)), 224);
        assert_eq!(m.source_counts.total(), 6056);
        assert_eq!(m.target_counts.total(), 3064);
        assert_eq!(m.len(), 9120);
    }
}
