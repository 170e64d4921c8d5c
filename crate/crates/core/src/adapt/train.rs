use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::data::{Domain, Orientation, TumorClass};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport, ReportContext};
use crate::nn::layers::gather_rows;
use crate::nn::{argmax, softmax_rows, Adam, Trainable};

use super::config::{AdaptConfig, MmdMode};
use super::loss::{alignment_loss_with_grad, mean_cross_entropy, FeatureBatch, LossComponents};
use super::model::{ClassifierModel, EncodedSet, Phase};

pub const LOG_HEADER: &str = "epoch,ce_src,ce_tgt,mmd,total,val_macro_f1";
pub const PSEUDO_HEADER: &str = "slice_id,class,confidence";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-averaged losses; `total` is the mean of per-step totals.
    pub losses: LossComponents,
    /// Source validation macro F1 after the epoch, if a validation set exists.
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub phase: Phase,
    pub orientation: Orientation,
    pub mmd_mode: MmdMode,
    pub lambda: f64,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// A `#` comment line with the run tags, the header, then one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# phase={} orientation={} mmd_mode={} lambda={} seed={}\n{LOG_HEADER}\n",
            self.phase, self.orientation, self.mmd_mode, self.lambda, self.seed
        );
        for r in &self.records {
            let l = r.losses;
            let val = r.val_macro_f1.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{val}",
                r.epoch, l.ce_src, l.ce_tgt, l.mmd, l.total
            )
            .unwrap();
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Parses the rows of a log written by [`TrainingLog::to_csv`]; comment lines
/// are skipped.
pub fn parse_log_rows(text: &str) -> Result<Vec<EpochRecord>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        if !seen_header {
            if line != LOG_HEADER {
                return Err(bad(format!("expected header {LOG_HEADER:?}")));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number {s:?}")))
        };
        rows.push(EpochRecord {
            epoch: f[0]
                .parse()
                .map_err(|_| bad(format!("bad epoch {:?}", f[0])))?,
            losses: LossComponents {
                ce_src: num(f[1])?,
                ce_tgt: num(f[2])?,
                mmd: num(f[3])?,
                total: num(f[4])?,
            },
            val_macro_f1: if f[5].is_empty() {
                None
            } else {
                Some(num(f[5])?)
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub slice_id: String,
    pub class: TumorClass,
    /// Maximum softmax probability.
    pub confidence: f64,
}

/// Fixed target labels produced once by the Phase 1 model.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
    pub source_model_id: String,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self) -> HashMap<&str, TumorClass> {
        self.entries
            .iter()
            .map(|e| (e.slice_id.as_str(), e.class))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{PSEUDO_HEADER}\n");
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.slice_id, e.class, e.confidence).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str, source_model_id: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        if lines.next().map(|(_, l)| l.trim()) != Some(PSEUDO_HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {PSEUDO_HEADER:?}"),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.trim().split(',').collect();
            let bad = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())));
            }
            let confidence: f64 = f[2]
                .parse()
                .map_err(|_| bad(format!("bad confidence {:?}", f[2])))?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(bad(format!("confidence {confidence} outside [0, 1]")));
            }
            entries.push(PseudoLabel {
                slice_id: f[0].to_string(),
                class: f[1].parse()?,
                confidence,
            });
        }
        Ok(Self {
            entries,
            source_model_id: source_model_id.to_string(),
        })
    }
}

/// Index stream over one domain; reshuffles whenever it runs out.
struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn optimizer(config: &AdaptConfig) -> Adam {
    Adam::new(
        config.learning_rate as f64,
        config.beta1 as f64,
        config.beta2 as f64,
        config.epsilon as f64,
    )
}

/// d(mean CE)/d(logits) = (p - y) / n.
fn ce_grad(probs: &Array2<f64>, labels: &[TumorClass]) -> Array2<f32> {
    let n = labels.len() as f64;
    Array2::from_shape_fn(probs.dim(), |(i, c)| {
        let y = if labels[i].index() == c { 1.0 } else { 0.0 };
        ((probs[[i, c]] - y) / n) as f32
    })
}

pub fn predicted_classes(probs: &Array2<f64>) -> Vec<TumorClass> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            TumorClass::from_index(argmax(r.as_slice().expect("contiguous rows")))
                .expect("class index")
        })
        .collect()
}

fn macro_f1_on(model: &ClassifierModel, set: Option<&EncodedSet>) -> Result<Option<f64>> {
    match set {
        Some(s) if !s.is_empty() => {
            let truth = s.require_labels()?;
            let pred = predicted_classes(&model.predict_features(s.features.view())?);
            Ok(Some(compute_metrics(&truth, &pred)?.macro_f1))
        }
        _ => Ok(None),
    }
}

fn phase_rng(config: &AdaptConfig, phase: Phase, orientation: Orientation) -> ChaCha8Rng {
    let tag = (phase as u64 + 1) * 16 + orientation.index() as u64;
    ChaCha8Rng::seed_from_u64(config.seed ^ (tag << 40))
}

fn check_finite(c: &LossComponents) -> Result<()> {
    if [c.ce_src, c.ce_tgt, c.mmd, c.total]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(())
    } else {
        Err(Error::NonFinite("training loss"))
    }
}

/// Supervised source training of the head for `phase1_epochs`.
pub fn train_phase1(
    model: &mut ClassifierModel,
    source_train: &EncodedSet,
    source_val: Option<&EncodedSet>,
    config: &AdaptConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    if source_train.is_empty() {
        return Err(Error::EmptyStream(format!(
            "no source training slices for {}",
            model.orientation
        )));
    }
    let labels = source_train.require_labels()?;
    let mut rng = phase_rng(config, Phase::Phase1, model.orientation);
    let mut adam = optimizer(config);
    let mut log = TrainingLog {
        phase: Phase::Phase1,
        orientation: model.orientation,
        mmd_mode: config.mmd_mode,
        lambda: config.lambda,
        seed: config.seed,
        records: Vec::new(),
    };
    let mut order: Vec<usize> = (0..source_train.len()).collect();
    for epoch in 1..=config.phase1_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            let x = gather_rows(&source_train.features, batch);
            let y: Vec<TumorClass> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, trace) = model.head.forward_trace(x.view());
            let probs = softmax_rows(logits.view());
            sum += mean_cross_entropy(probs.view(), &y)?;
            steps += 1;
            model.head.zero_grad();
            model
                .head
                .backward(x.view(), &trace, ce_grad(&probs, &y).view(), None);
            adam.step(&mut model.head);
        }
        let ce = sum / steps as f64;
        let losses = LossComponents::combine(ce, 0.0, 0.0, config.lambda);
        check_finite(&losses)?;
        log.records.push(EpochRecord {
            epoch,
            losses,
            val_macro_f1: macro_f1_on(model, source_val)?,
        });
    }
    Ok(log)
}

/// Argmax label and confidence for every target slice.
pub fn generate_pseudo_labels(
    model: &ClassifierModel,
    target: &EncodedSet,
) -> Result<PseudoLabelSet> {
    if target.is_empty() {
        return Err(Error::EmptyStream(format!(
            "no target slices for {}",
            model.orientation
        )));
    }
    let probs = model.predict_features(target.features.view())?;
    let classes = predicted_classes(&probs);
    let entries = target
        .ids
        .iter()
        .zip(classes)
        .enumerate()
        .map(|(i, (id, class))| PseudoLabel {
            slice_id: id.clone(),
            class,
            confidence: probs[[i, class.index()]],
        })
        .collect();
    let mut hasher = Sha256::new();
    for v in model.head_parameters() {
        hasher.update(v.to_le_bytes());
    }
    let digest = format!("{:x}", hasher.finalize());
    Ok(PseudoLabelSet {
        entries,
        source_model_id: format!("{}-{}-{}", model.orientation, Phase::Phase1, &digest[..16]),
    })
}

fn to_f64(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

fn scaled_f32(g: ArrayView2<f64>, scale: f64) -> Array2<f32> {
    g.mapv(|v| (v * scale) as f32)
}

/// Joint training on source labels, fixed target pseudo-labels and the
/// alignment term. Target class labels are never read.
pub fn train_phase2(
    model: &mut ClassifierModel,
    source_train: &EncodedSet,
    source_val: Option<&EncodedSet>,
    target: &EncodedSet,
    pseudo: &PseudoLabelSet,
    config: &AdaptConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    if source_train.is_empty() {
        return Err(Error::EmptyStream(format!(
            "no source training slices for {}",
            model.orientation
        )));
    }
    if target.is_empty() {
        return Err(Error::EmptyStream(format!(
            "no target slices for {}",
            model.orientation
        )));
    }
    let src_labels = source_train.require_labels()?;
    let lookup = pseudo.lookup();
    let tgt_labels = target
        .ids
        .iter()
        .map(|id| {
            lookup
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::MissingLabel(format!("pseudo-label for {id}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = phase_rng(config, Phase::Phase2, model.orientation);
    let mut adam = optimizer(config);
    let mut log = TrainingLog {
        phase: Phase::Phase2,
        orientation: model.orientation,
        mmd_mode: config.mmd_mode,
        lambda: config.lambda,
        seed: config.seed,
        records: Vec::new(),
    };
    let (ns, nt) = (source_train.len(), target.len());
    let longest = ns.max(nt);
    let steps = longest.div_ceil(config.batch_size);
    for epoch in 1..=config.phase2_epochs {
        let mut src_stream = Stream::new(ns, &mut rng);
        let mut tgt_stream = Stream::new(nt, &mut rng);
        let mut sum = [0.0f64; 4];
        for step in 0..steps {
            let size = config.batch_size.min(longest - step * config.batch_size);
            let sb = src_stream.take(size, &mut rng);
            let tb = tgt_stream.take(size, &mut rng);
            let xs = gather_rows(&source_train.features, &sb);
            let xt = gather_rows(&target.features, &tb);
            let ys: Vec<TumorClass> = sb.iter().map(|&i| src_labels[i]).collect();
            let yt: Vec<TumorClass> = tb.iter().map(|&i| tgt_labels[i]).collect();

            let (ls, trace_s) = model.head.forward_trace(xs.view());
            let (lt, trace_t) = model.head.forward_trace(xt.view());
            let (ps, pt) = (softmax_rows(ls.view()), softmax_rows(lt.view()));
            let fs = FeatureBatch::new(to_f64(trace_s.embedding()), ys.clone(), Domain::Source)?;
            let ft = FeatureBatch::new(to_f64(trace_t.embedding()), yt.clone(), Domain::Target)?;
            let (mmd, gs, gt) = alignment_loss_with_grad(&fs, &ft, config)?;
            let c = LossComponents::combine(
                mean_cross_entropy(ps.view(), &ys)?,
                mean_cross_entropy(pt.view(), &yt)?,
                mmd,
                config.lambda,
            );
            check_finite(&c)?;
            for (acc, v) in sum.iter_mut().zip([c.ce_src, c.ce_tgt, c.mmd, c.total]) {
                *acc += v;
            }

            model.head.zero_grad();
            let (extra_s, extra_t) = if config.lambda > 0.0 {
                (
                    Some(scaled_f32(gs.view(), config.lambda)),
                    Some(scaled_f32(gt.view(), config.lambda)),
                )
            } else {
                (None, None)
            };
            model.head.backward(
                xs.view(),
                &trace_s,
                ce_grad(&ps, &ys).view(),
                extra_s.as_ref().map(|g| g.view()),
            );
            model.head.backward(
                xt.view(),
                &trace_t,
                ce_grad(&pt, &yt).view(),
                extra_t.as_ref().map(|g| g.view()),
            );
            adam.step(&mut model.head);
        }
        let n = steps as f64;
        log.records.push(EpochRecord {
            epoch,
            losses: LossComponents {
                ce_src: sum[0] / n,
                ce_tgt: sum[1] / n,
                mmd: sum[2] / n,
                total: sum[3] / n,
            },
            val_macro_f1: macro_f1_on(model, source_val)?,
        });
    }
    Ok(log)
}

/// Per-orientation inputs. Target class labels, when present, are used only
/// for the final evaluation.
#[derive(Debug, Clone)]
pub struct OrientationData {
    pub source_train: EncodedSet,
    pub source_val: EncodedSet,
    pub target: EncodedSet,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub phase1_model: ClassifierModel,
    pub model: ClassifierModel,
    pub pseudo_labels: PseudoLabelSet,
    pub phase1_log: TrainingLog,
    pub phase2_log: TrainingLog,
    /// Target evaluation of the Phase 1 model (no adaptation).
    pub phase1_report: Option<MetricsReport>,
    /// Target evaluation of the adapted model.
    pub report: Option<MetricsReport>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
}

/// Head seed for one orientation of a run.
pub fn head_seed(seed: u64, orientation: Orientation) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (orientation.index() as u64 + 1)
}

/// Target report with true labels, or `None` if the target set is unlabeled.
pub fn evaluate_target(
    model: &ClassifierModel,
    target: &EncodedSet,
    phase: Phase,
) -> Result<Option<MetricsReport>> {
    if target.is_empty() || target.labels.iter().any(Option::is_none) {
        return Ok(None);
    }
    let truth = target.require_labels()?;
    let pred = predicted_classes(&model.predict_features(target.features.view())?);
    let report = compute_metrics(&truth, &pred)?.with_context(ReportContext {
        orientation: Some(model.orientation),
        domain: Some(Domain::Target),
        phase: Some(phase.to_string()),
    });
    Ok(Some(report))
}

/// Phase 1, pseudo-labels, Phase 2, then target evaluation for one orientation.
pub fn run_orientation_pipeline(
    orientation: Orientation,
    data: &OrientationData,
    backbone: Arc<Backbone>,
    config: &AdaptConfig,
) -> Result<PipelineOutcome> {
    if data.target.is_empty() {
        return Err(Error::EmptyStream(format!(
            "no target slices for {orientation}"
        )));
    }
    let before = backbone.compute_checksum();
    let unlabeled_target = data.target.without_labels();
    let val = (!data.source_val.is_empty()).then_some(&data.source_val);

    let mut model =
        ClassifierModel::new(orientation, head_seed(config.seed, orientation), backbone);
    let phase1_log = train_phase1(&mut model, &data.source_train, val, config)?;
    let phase1_model = model.clone();
    let pseudo_labels = generate_pseudo_labels(&model, &unlabeled_target)?;
    let phase2_log = train_phase2(
        &mut model,
        &data.source_train,
        val,
        &unlabeled_target,
        &pseudo_labels,
        config,
    )?;

    Ok(PipelineOutcome {
        phase1_report: evaluate_target(&phase1_model, &data.target, Phase::Phase1)?,
        report: evaluate_target(&model, &data.target, Phase::Phase2)?,
        backbone_checksum_after: model.backbone().compute_checksum(),
        backbone_checksum_before: before,
        phase1_model,
        model,
        pseudo_labels,
        phase1_log,
        phase2_log,
    })
}

/// Accuracy of pseudo-labels against known target labels.
pub fn pseudo_label_accuracy(pseudo: &PseudoLabelSet, target: &EncodedSet) -> Option<f64> {
    let truth: HashMap<&str, TumorClass> = target
        .ids
        .iter()
        .zip(&target.labels)
        .filter_map(|(id, l)| l.map(|l| (id.as_str(), l)))
        .collect();
    let hits: Vec<bool> = pseudo
        .entries
        .iter()
        .filter_map(|e| truth.get(e.slice_id.as_str()).map(|&t| t == e.class))
        .collect();
    (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
