//! Per-orientation classifier: frozen trunk plus a trainable MLP head, and the
//! cached trunk features the head trains on.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FEATURE_DIM};
use crate::data::{DatasetManifest, Domain, Orientation, SliceImage, TumorClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::layers::{gather_rows, relu_backward, relu_inplace};
use crate::nn::{softmax_rows, Checkpoint, Dense, Trainable};

/// Layer widths of the head, input to output.
pub const HEAD_WIDTHS: [usize; 5] = [FEATURE_DIM, 1024, 512, 256, NUM_CLASSES];
/// Width of the layer whose post-ReLU activations are aligned.
pub const ALIGNMENT_DIM: usize = 256;

pub const CLASSIFIER_KIND: &str = "orientation-classifier";
pub const CLASSIFIER_VERSION: u32 = 1;
pub const CLASSIFIER_ARCHITECTURE: &str = "resnet50-frozen|fc2048-1024-512-256-3|relu|softmax";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "phase1" | "1" => Ok(Phase::Phase1),
            "phase2" | "2" => Ok(Phase::Phase2),
            _ => Err(Error::UnknownToken {
                kind: "phase",
                token: s.to_string(),
            }),
        }
    }
}

/// Trunk features of a set of slices from one domain, one row per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub ids: Vec<String>,
    pub labels: Vec<Option<TumorClass>>,
    pub domain: Domain,
    pub features: Array2<f32>,
}

const FEATURE_CACHE_KIND: &str = "feature-cache";

impl EncodedSet {
    pub fn encode(backbone: &Backbone, slices: &[SliceImage], domain: Domain) -> Result<Self> {
        if let Some(s) = slices.iter().find(|s| s.domain != domain) {
            return Err(Error::InvalidInput(format!(
                "slice {} is not from the {domain} domain",
                s.id
            )));
        }
        Ok(Self {
            ids: slices.iter().map(|s| s.id.clone()).collect(),
            labels: slices.iter().map(|s| s.class_label).collect(),
            domain,
            features: backbone.extract(slices)?,
        })
    }

    /// Encodes the manifest's entries of `domain`, in manifest order.
    pub fn from_manifest(
        backbone: &Backbone,
        manifest: &DatasetManifest,
        domain: Domain,
    ) -> Result<Self> {
        let subset = manifest.filtered(|e| e.domain == domain);
        Self::encode(backbone, &subset.load_slices()?, domain)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domain: self.domain,
            features: gather_rows(&self.features, rows),
        }
    }

    /// Rows whose id is accepted by `keep`, in order.
    pub fn filter_ids(&self, keep: impl Fn(&str) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| keep(&self.ids[r])).collect();
        self.subset(&rows)
    }

    /// Copy with every class label removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: vec![None; self.len()],
            ..self.clone()
        }
    }

    /// Every label, or an error naming the first unlabeled slice.
    pub fn require_labels(&self) -> Result<Vec<TumorClass>> {
        self.ids
            .iter()
            .zip(&self.labels)
            .map(|(id, l)| l.ok_or_else(|| Error::MissingLabel(format!("class of {id}"))))
            .collect()
    }

    pub fn save(&self, path: &Path, backbone_checksum: &str) -> Result<()> {
        let mut ckpt = Checkpoint::new(
            FEATURE_CACHE_KIND,
            1,
            &format!("features{}", self.features.ncols()),
        )
        .with_meta("backbone", backbone_checksum)
        .with_meta("domain", self.domain)
        .with_meta(
            "ids",
            serde_json::to_string(&self.ids).expect("ids serialize"),
        )
        .with_meta(
            "labels",
            serde_json::to_string(&self.labels).expect("labels serialize"),
        );
        ckpt.push("features", self.features.iter().copied().collect());
        ckpt.save(path)
    }

    /// Loads a cache written by [`EncodedSet::save`]; rejects caches made with
    /// a different trunk.
    pub fn load(path: &Path, backbone_checksum: &str) -> Result<Self> {
        let ckpt = Checkpoint::load(
            path,
            FEATURE_CACHE_KIND,
            1,
            &format!("features{FEATURE_DIM}"),
        )?;
        let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if ckpt.meta("backbone") != Some(backbone_checksum) {
            return Err(corrupt(
                "features were computed with different backbone weights",
            ));
        }
        let ids: Vec<String> =
            serde_json::from_str(ckpt.meta("ids").unwrap_or("")).map_err(|_| corrupt("bad ids"))?;
        let labels: Vec<Option<TumorClass>> =
            serde_json::from_str(ckpt.meta("labels").unwrap_or(""))
                .map_err(|_| corrupt("bad labels"))?;
        let domain: Domain = ckpt.meta("domain").unwrap_or("").parse()?;
        let data = ckpt
            .tensor("features")
            .ok_or_else(|| corrupt("missing features"))?;
        let features = Array2::from_shape_vec((ids.len(), FEATURE_DIM), data.to_vec())
            .map_err(|_| corrupt("bad shape"))?;
        if labels.len() != ids.len() {
            return Err(corrupt("label count differs from id count"));
        }
        Ok(Self {
            ids,
            labels,
            domain,
            features,
        })
    }
}

/// Activations of one head forward pass.
pub(crate) struct HeadTrace {
    /// Post-ReLU outputs of the three hidden layers.
    hidden: [Array2<f32>; 3],
}

impl HeadTrace {
    pub(crate) fn embedding(&self) -> &Array2<f32> {
        &self.hidden[2]
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    layers: [Dense; 4],
}

impl ClassifierHead {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = std::array::from_fn(|i| {
            let mut d = Dense::new(HEAD_WIDTHS[i], HEAD_WIDTHS[i + 1]);
            d.init_he(&mut rng);
            d
        });
        Self { layers }
    }

    pub(crate) fn forward_trace(&self, x: ArrayView2<f32>) -> (Array2<f32>, HeadTrace) {
        let mut h1 = self.layers[0].forward(x);
        relu_inplace(&mut h1);
        let mut h2 = self.layers[1].forward(h1.view());
        relu_inplace(&mut h2);
        let mut h3 = self.layers[2].forward(h2.view());
        relu_inplace(&mut h3);
        let logits = self.layers[3].forward(h3.view());
        (
            logits,
            HeadTrace {
                hidden: [h1, h2, h3],
            },
        )
    }

    /// Accumulates gradients given d(loss)/d(logits) and, optionally, an extra
    /// gradient on the post-ReLU alignment features.
    pub(crate) fn backward(
        &mut self,
        x: ArrayView2<f32>,
        trace: &HeadTrace,
        grad_logits: ArrayView2<f32>,
        grad_embedding: Option<ArrayView2<f32>>,
    ) {
        let [h1, h2, h3] = &trace.hidden;
        let mut g = self.layers[3].backward(h3.view(), grad_logits);
        if let Some(extra) = grad_embedding {
            g += &extra;
        }
        relu_backward(&mut g, h3);
        let mut g = self.layers[2].backward(h2.view(), g.view());
        relu_backward(&mut g, h2);
        let mut g = self.layers[1].backward(h1.view(), g.view());
        relu_backward(&mut g, h1);
        self.layers[0].accumulate_grads(x, g.view());
    }
}

impl Trainable for ClassifierHead {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub orientation: Orientation,
    pub seed: u64,
    pub(crate) head: ClassifierHead,
    backbone: Arc<Backbone>,
}

/// Loads trunk weights from `weights` and builds a fresh head.
pub fn build_classifier(
    orientation: Orientation,
    seed: u64,
    weights: &Path,
) -> Result<ClassifierModel> {
    Ok(ClassifierModel::new(
        orientation,
        seed,
        Arc::new(Backbone::load(weights)?),
    ))
}

impl ClassifierModel {
    pub fn new(orientation: Orientation, seed: u64, backbone: Arc<Backbone>) -> Self {
        Self {
            orientation,
            seed,
            head: ClassifierHead::new(seed),
            backbone,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_checksum(&self) -> &str {
        self.backbone.checksum()
    }

    pub fn head_parameters(&self) -> Vec<f32> {
        self.head.clone().flat_params()
    }

    /// Class probabilities for precomputed trunk features.
    pub fn predict_features(&self, features: ArrayView2<f32>) -> Result<Array2<f64>> {
        if features.ncols() != FEATURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "expected {FEATURE_DIM} features, got {}",
                features.ncols()
            )));
        }
        let (logits, _) = self.head.forward_trace(features);
        let probs = softmax_rows(logits.view());
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier output"));
        }
        Ok(probs)
    }

    /// Post-ReLU alignment-layer activations for precomputed trunk features.
    pub fn alignment_features(&self, features: ArrayView2<f32>) -> Array2<f32> {
        let (_, trace) = self.head.forward_trace(features);
        trace.hidden[2].clone()
    }

    /// End-to-end class probabilities for raw slices.
    pub fn predict(&self, slices: &[SliceImage]) -> Result<Array2<f64>> {
        self.predict_features(self.backbone.extract(slices)?.view())
    }

    pub fn save(&self, path: &Path, phase: Phase) -> Result<()> {
        let mut ckpt =
            Checkpoint::new(CLASSIFIER_KIND, CLASSIFIER_VERSION, CLASSIFIER_ARCHITECTURE)
                .with_meta("orientation", self.orientation)
                .with_meta("phase", phase)
                .with_meta("seed", self.seed)
                .with_meta("backbone", self.backbone.checksum());
        ckpt.push("head", self.head_parameters());
        ckpt.save(path)
    }

    /// Restores a head saved by [`ClassifierModel::save`] onto `backbone`; the
    /// trunk must be the one it was trained on.
    pub fn load(path: &Path, backbone: Arc<Backbone>) -> Result<(Self, Phase)> {
        let ckpt = Checkpoint::load(
            path,
            CLASSIFIER_KIND,
            CLASSIFIER_VERSION,
            CLASSIFIER_ARCHITECTURE,
        )?;
        let corrupt = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let orientation: Orientation = ckpt.meta("orientation").unwrap_or("").parse()?;
        let phase: Phase = ckpt.meta("phase").unwrap_or("").parse()?;
        let seed = ckpt
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("missing seed".into()))?;
        if ckpt.meta("backbone") != Some(backbone.checksum()) {
            return Err(corrupt(
                "head was trained on different backbone weights".into(),
            ));
        }
        let mut model = Self::new(orientation, seed, backbone);
        let params = ckpt
            .tensor("head")
            .ok_or_else(|| corrupt("missing head".into()))?;
        model.head.load_flat_params(params).map_err(corrupt)?;
        Ok((model, phase))
    }
}
