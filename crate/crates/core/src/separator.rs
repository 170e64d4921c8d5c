//! Orientation separator: a small dilated CNN that routes each slice to the
//! axial, sagittal or coronal stream.
//!
//! Architecture on a 32x32x1 binarized input:
//!
//! | layer | op                              | output   |
//! |-------|---------------------------------|----------|
//! | 1     | conv 3x3, 16, ReLU, max-pool 2  | 16x16x16 |
//! | 2     | conv 3x3, 32, ReLU, max-pool 2  | 8x8x32   |
//! | 3     | conv 3x3 dilation 2, 64, ReLU   | 8x8x64   |
//! | 4     | conv 3x3 dilation 4, 64, ReLU   | 8x8x64   |
//! | head  | global average pool, FC 64 -> 3, softmax | 3 |
//!
//! Dilated layers use "same" padding. The receptive field of layer 4 is 58
//! pixels, wider than the input.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetManifest, Orientation, SliceImage, NUM_ORIENTATIONS};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace};
use crate::nn::{argmax, softmax_rows, Checkpoint, Conv2d, Dense, MaxPool2d, Sgd, Trainable};
use crate::preprocess::{prepare_for_separator, SEPARATOR_INPUT};

pub const SEPARATOR_KIND: &str = "orientation-separator";
pub const SEPARATOR_VERSION: u32 = 1;
pub const SEPARATOR_ARCHITECTURE: &str =
    "in32x1|c3x3x16-relu-mp2|c3x3x32-relu-mp2|c3x3x64d2-relu|c3x3x64d4-relu|gap|fc3";
pub const PREDICTIONS_HEADER: &str = "slice_id,predicted,p_axial,p_sagittal,p_coronal";

const POOL: MaxPool2d = MaxPool2d {
    kernel: 2,
    stride: 2,
    padding: 0,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SeparatorConfig {
    pub const KEYS: [&'static str; 5] =
        ["epochs", "learning_rate", "momentum", "batch_size", "seed"];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(|k| Self::KEYS.contains(&k))?;
        let d = Self::default();
        let cfg = Self {
            epochs: kv.get("epochs")?.unwrap_or(d.epochs),
            learning_rate: kv.get("learning_rate")?.unwrap_or(d.learning_rate),
            momentum: kv.get("momentum")?.unwrap_or(d.momentum),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "learning_rate must be > 0 and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SeparatorModel {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    conv4: Conv2d,
    fc: Dense,
    pub seed: u64,
    /// Mean training cross-entropy of each completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationPrediction {
    pub slice_id: String,
    pub predicted: Orientation,
    /// Ordered axial, sagittal, coronal.
    pub probabilities: [f64; NUM_ORIENTATIONS],
}

/// Activations kept for the backward pass of one sample.
struct Trace {
    cols1: Array2<f32>,
    a1: Array3<f32>,
    idx1: Vec<usize>,
    cols2: Array2<f32>,
    a2: Array3<f32>,
    idx2: Vec<usize>,
    cols3: Array2<f32>,
    a3: Array3<f32>,
    cols4: Array2<f32>,
    a4: Array3<f32>,
}

pub fn build_separator(seed: u64) -> SeparatorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv1 = Conv2d::new(1, 16, 3, 1, 1, 1);
    let mut conv2 = Conv2d::new(16, 32, 3, 1, 1, 1);
    let mut conv3 = Conv2d::new(32, 64, 3, 1, 2, 2);
    let mut conv4 = Conv2d::new(64, 64, 3, 1, 4, 4);
    let mut fc = Dense::new(64, NUM_ORIENTATIONS);
    conv1.init_he(&mut rng);
    conv2.init_he(&mut rng);
    conv3.init_he(&mut rng);
    conv4.init_he(&mut rng);
    fc.init_he(&mut rng);
    SeparatorModel {
        conv1,
        conv2,
        conv3,
        conv4,
        fc,
        seed,
        loss_history: Vec::new(),
    }
}

impl Trainable for SeparatorModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.conv3.visit_params(f);
        self.conv4.visit_params(f);
        self.fc.visit_params(f);
    }
}

impl SeparatorModel {
    /// Receptive field (pixels) of the last convolution, from the layer geometry.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        let conv = |c: &Conv2d, field: &mut usize, jump: &mut usize| {
            *field += c.dilation * (c.kernel - 1) * *jump;
            *jump *= c.stride;
        };
        let pool = |field: &mut usize, jump: &mut usize| {
            *field += (POOL.kernel - 1) * *jump;
            *jump *= POOL.stride;
        };
        conv(&self.conv1, &mut field, &mut jump);
        pool(&mut field, &mut jump);
        conv(&self.conv2, &mut field, &mut jump);
        pool(&mut field, &mut jump);
        conv(&self.conv3, &mut field, &mut jump);
        conv(&self.conv4, &mut field, &mut jump);
        field
    }

    fn trunk(&self, x: &Array3<f32>) -> (Array1<f32>, Trace) {
        let (mut a1, cols1) = self.conv1.forward_train(x.view());
        relu_inplace(&mut a1);
        let (p1, idx1) = POOL.forward(a1.view());
        let (mut a2, cols2) = self.conv2.forward_train(p1.view());
        relu_inplace(&mut a2);
        let (p2, idx2) = POOL.forward(a2.view());
        let (mut a3, cols3) = self.conv3.forward_train(p2.view());
        relu_inplace(&mut a3);
        let (mut a4, cols4) = self.conv4.forward_train(a3.view());
        relu_inplace(&mut a4);
        let pooled = global_avg_pool(a4.view());
        let trace = Trace {
            cols1,
            a1,
            idx1,
            cols2,
            a2,
            idx2,
            cols3,
            a3,
            cols4,
            a4,
        };
        (pooled, trace)
    }

    fn backward_trunk(&mut self, grad_pooled: &Array1<f32>, t: &Trace) {
        let side = SEPARATOR_INPUT;
        let (_, h4, w4) = t.a4.dim();
        let mut g = global_avg_pool_backward(grad_pooled, h4, w4);
        relu_backward(&mut g, &t.a4);
        let mut g = self.conv4.backward(g.view(), &t.cols4, h4, w4);
        relu_backward(&mut g, &t.a3);
        let g = self.conv3.backward(g.view(), &t.cols3, h4, w4);
        let mut g = MaxPool2d::backward(g.view(), &t.idx2, t.a2.dim());
        relu_backward(&mut g, &t.a2);
        let g = self.conv2.backward(g.view(), &t.cols2, side / 2, side / 2);
        let mut g = MaxPool2d::backward(g.view(), &t.idx1, t.a1.dim());
        relu_backward(&mut g, &t.a1);
        self.conv1.backward(g.view(), &t.cols1, side, side);
    }

    /// Class probabilities for one prepared 1x32x32 input.
    pub fn forward(&self, x: &Array3<f32>) -> [f64; NUM_ORIENTATIONS] {
        let (pooled, _) = self.trunk(x);
        let logits = self.fc.forward(pooled.insert_axis(ndarray::Axis(0)).view());
        let p = softmax_rows(logits.view());
        [p[[0, 0]], p[[0, 1]], p[[0, 2]]]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut model = self.clone();
        let mut ckpt = Checkpoint::new(SEPARATOR_KIND, SEPARATOR_VERSION, SEPARATOR_ARCHITECTURE)
            .with_meta("seed", self.seed)
            .with_meta(
                "loss_history",
                serde_json::to_string(&self.loss_history).expect("floats serialize"),
            );
        ckpt.push("parameters", model.flat_params());
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(
            path,
            SEPARATOR_KIND,
            SEPARATOR_VERSION,
            SEPARATOR_ARCHITECTURE,
        )?;
        let corrupt = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let seed = ckpt
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("missing seed".into()))?;
        let mut model = build_separator(seed);
        let params = ckpt
            .tensor("parameters")
            .ok_or_else(|| corrupt("missing parameters".into()))?;
        model.load_flat_params(params).map_err(corrupt)?;
        if let Some(h) = ckpt.meta("loss_history") {
            model.loss_history = serde_json::from_str(h).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(model)
    }
}

fn as_input(slice: &SliceImage) -> Array3<f32> {
    let img = prepare_for_separator(slice);
    Array3::from_shape_vec((1, img.height, img.width), img.data).expect("separator input shape")
}

/// Trains with SGD on mean cross-entropy; appends one mean loss per epoch to
/// `model.loss_history`.
pub fn train_separator(
    mut model: SeparatorModel,
    train_set: &[SliceImage],
    config: &SeparatorConfig,
) -> Result<SeparatorModel> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput(
            "separator training set is empty".into(),
        ));
    }
    let labels = train_set
        .iter()
        .map(|s| {
            s.orientation_label
                .map(Orientation::index)
                .ok_or_else(|| Error::MissingLabel(format!("orientation of {}", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<Array3<f32>> = train_set.iter().map(as_input).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            let (pooled, traces): (Vec<_>, Vec<_>) =
                batch.iter().map(|&i| model.trunk(&inputs[i])).unzip();
            let mut feats = Array2::<f32>::zeros((batch.len(), 64));
            for (mut row, p) in feats.rows_mut().into_iter().zip(&pooled) {
                row.assign(p);
            }
            let probs = softmax_rows(model.fc.forward(feats.view()).view());
            let scale = 1.0 / batch.len() as f64;
            let mut grad_logits = Array2::<f32>::zeros(probs.dim());
            for (r, &i) in batch.iter().enumerate() {
                let y = labels[i];
                epoch_loss -= probs[[r, y]].max(1e-12).ln();
                for c in 0..NUM_ORIENTATIONS {
                    let target = if c == y { 1.0 } else { 0.0 };
                    grad_logits[[r, c]] = ((probs[[r, c]] - target) * scale) as f32;
                }
            }
            let grad_feats = model.fc.backward(feats.view(), grad_logits.view());
            for (r, trace) in traces.iter().enumerate() {
                model.backward_trunk(&grad_feats.row(r).to_owned(), trace);
            }
            opt.step(&mut model);
        }
        let mean = epoch_loss / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("separator training loss"));
        }
        model.loss_history.push(mean);
    }
    Ok(model)
}

/// One prediction per slice, in input order.
pub fn predict_orientation(
    model: &SeparatorModel,
    slices: &[SliceImage],
) -> Vec<OrientationPrediction> {
    slices
        .iter()
        .map(|s| {
            let probabilities = model.forward(&as_input(s));
            OrientationPrediction {
                slice_id: s.id.clone(),
                predicted: Orientation::from_index(argmax(&probabilities)).expect("three outputs"),
                probabilities,
            }
        })
        .collect()
}

/// Fraction of labeled slices whose prediction matches; `None` when no slice
/// carries an orientation label.
pub fn orientation_accuracy(
    slices: &[SliceImage],
    predictions: &[OrientationPrediction],
) -> Option<f64> {
    let pairs: Vec<bool> = slices
        .iter()
        .zip(predictions)
        .filter_map(|(s, p)| s.orientation_label.map(|o| o == p.predicted))
        .collect();
    (!pairs.is_empty()).then(|| pairs.iter().filter(|&&ok| ok).count() as f64 / pairs.len() as f64)
}

/// Routes every entry by its predicted orientation. All three keys are present.
pub fn partition_by_orientation(
    manifest: &DatasetManifest,
    predictions: &[OrientationPrediction],
) -> Result<BTreeMap<Orientation, DatasetManifest>> {
    let by_id: HashMap<&str, Orientation> = predictions
        .iter()
        .map(|p| (p.slice_id.as_str(), p.predicted))
        .collect();
    if let Some(e) = manifest
        .entries
        .iter()
        .find(|e| !by_id.contains_key(e.id.as_str()))
    {
        return Err(Error::MissingPrediction(e.id.clone()));
    }
    Ok(Orientation::ALL
        .into_iter()
        .map(|o| (o, manifest.filtered(|e| by_id[e.id.as_str()] == o)))
        .collect())
}

pub fn predictions_to_csv(predictions: &[OrientationPrediction]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for p in predictions {
        let [a, s, c] = p.probabilities;
        writeln!(out, "{},{},{a},{s},{c}", p.slice_id, p.predicted).unwrap();
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<OrientationPrediction>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {PREDICTIONS_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let mut probabilities = [0.0; NUM_ORIENTATIONS];
        for (p, f) in probabilities.iter_mut().zip(&fields[2..]) {
            *p = f
                .parse()
                .map_err(|_| bad(format!("bad probability {f:?}")))?;
        }
        out.push(OrientationPrediction {
            slice_id: fields[0].to_string(),
            predicted: fields[1].parse()?,
            probabilities,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, ManifestEntry, Split};
    use image::{GrayImage, Luma};
    use std::path::PathBuf;

    fn labeled(id: &str, img: GrayImage, o: Orientation) -> SliceImage {
        SliceImage::new(id, img, Domain::Source, None, Some(o)).unwrap()
    }

    #[test]
    fn deterministic_init_and_valid_output() {
        let mut a = build_separator(0);
        let mut b = build_separator(0);
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), build_separator(1).flat_params());
        let p = a.forward(&Array3::zeros((1, 32, 32)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn receptive_field_covers_input() {
        // 3 -> 4 (pool) -> 8 -> 10 (pool) -> 10 + 4*4 -> 26 + 8*4
        let mut model = build_separator(0);
        assert_eq!(model.receptive_field(), 58);
        assert!(model.receptive_field() >= 31);

        // Empirically: with positive weights, count the input columns and rows
        // whose impulse reaches the centre of the last feature map.
        model.visit_params(&mut |p, _| p.fill(0.05));
        let (_, base) = model.trunk(&Array3::zeros((1, 32, 32)));
        let reach = |at: &dyn Fn(usize) -> (usize, usize)| {
            (0..32)
                .filter(|&i| {
                    let (y, x) = at(i);
                    let mut input = Array3::<f32>::zeros((1, 32, 32));
                    input[[0, y, x]] = 1.0;
                    model.trunk(&input).1.a4[[0, 4, 4]] > base.a4[[0, 4, 4]]
                })
                .count()
        };
        assert!(reach(&|i| (16, i)) >= 31);
        assert!(reach(&|i| (i, 16)) >= 31);
    }

    fn shapes() -> Vec<SliceImage> {
        let disc = GrayImage::from_fn(32, 32, |x, y| {
            Luma([if (x as i32 - 16).pow(2) + (y as i32 - 16).pow(2) < 100 {
                200
            } else {
                0
            }])
        });
        let bar = GrayImage::from_fn(32, 32, |x, _| {
            Luma([if (12..20).contains(&x) { 200 } else { 0 }])
        });
        let corner = GrayImage::from_fn(32, 32, |x, y| Luma([if x + y < 24 { 200 } else { 0 }]));
        vec![
            labeled("a", disc, Orientation::Axial),
            labeled("s", bar, Orientation::Sagittal),
            labeled("c", corner, Orientation::Coronal),
        ]
    }

    #[test]
    fn memorizes_one_sample_per_class() {
        let set = shapes();
        let model = train_separator(build_separator(3), &set, &SeparatorConfig::default()).unwrap();
        assert_eq!(model.loss_history.len(), 50);
        assert!(model.loss_history.last() <= model.loss_history.first());
        let preds = predict_orientation(&model, &set);
        assert_eq!(orientation_accuracy(&set, &preds), Some(1.0));
    }

    #[test]
    fn training_is_deterministic() {
        let set = shapes();
        let cfg = SeparatorConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut a = train_separator(build_separator(1), &set, &cfg).unwrap();
        let mut b = train_separator(build_separator(1), &set, &cfg).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn training_errors() {
        let cfg = SeparatorConfig::default();
        assert!(matches!(
            train_separator(build_separator(0), &[], &cfg),
            Err(Error::InvalidInput(_))
        ));
        let mut set = shapes();
        set[1].orientation_label = None;
        assert!(matches!(
            train_separator(build_separator(0), &set, &cfg),
            Err(Error::MissingLabel(_))
        ));
    }

    #[test]
    fn prediction_order_and_duplicates() {
        let model = build_separator(2);
        assert!(predict_orientation(&model, &[]).is_empty());
        let s = shapes();
        let preds = predict_orientation(&model, &[s[0].clone(), s[2].clone(), s[0].clone()]);
        assert_eq!(preds.len(), 3);
        assert_eq!(preds[0], preds[2]);
        assert_eq!(preds[1].slice_id, "c");
        for p in &preds {
            assert_eq!(p.predicted.index(), argmax(&p.probabilities));
        }
    }

    fn manifest(n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                id: format!("e{i}"),
                path: PathBuf::from(format!("e{i}.png")),
                domain: Domain::Target,
                class_label: None,
                orientation_label: None,
                split: Split::Test,
            })
            .collect();
        DatasetManifest::new(entries, 0, "/").unwrap()
    }

    fn pred(id: &str, o: Orientation) -> OrientationPrediction {
        let mut probabilities = [0.0; 3];
        probabilities[o.index()] = 1.0;
        OrientationPrediction {
            slice_id: id.into(),
            predicted: o,
            probabilities,
        }
    }

    #[test]
    fn partition_routes_by_prediction() {
        let m = manifest(3);
        let preds: Vec<_> = Orientation::ALL
            .iter()
            .enumerate()
            .map(|(i, &o)| pred(&format!("e{i}"), o))
            .collect();
        let parts = partition_by_orientation(&m, &preds).unwrap();
        for (i, o) in Orientation::ALL.iter().enumerate() {
            assert_eq!(parts[o].len(), 1);
            assert_eq!(parts[o].entries[0].id, format!("e{i}"));
        }

        let all_axial: Vec<_> = (0..3)
            .map(|i| pred(&format!("e{i}"), Orientation::Axial))
            .collect();
        let parts = partition_by_orientation(&m, &all_axial).unwrap();
        assert_eq!(parts[&Orientation::Axial].entries, m.entries);
        assert!(
            parts[&Orientation::Sagittal].is_empty() && parts[&Orientation::Coronal].is_empty()
        );

        assert!(matches!(
            partition_by_orientation(&m, &all_axial[..2]),
            Err(Error::MissingPrediction(id)) if id == "e2"
        ));
    }

    #[test]
    fn checkpoint_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sep.ckpt");
        let mut model = build_separator(5);
        model.loss_history = vec![1.0, 0.5];
        model.save(&path).unwrap();
        let mut back = SeparatorModel::load(&path).unwrap();
        assert_eq!(back.flat_params(), model.flat_params());
        assert_eq!(back.loss_history, model.loss_history);

        let preds = predict_orientation(&model, &shapes());
        let csv = predictions_to_csv(&preds);
        assert!(csv.starts_with("slice_id,predicted,p_axial,p_sagittal,p_coronal\n"));
        assert_eq!(parse_predictions(&csv).unwrap(), preds);
    }
}
