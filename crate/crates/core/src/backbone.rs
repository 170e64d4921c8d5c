//! Frozen ResNet-50 convolutional trunk (torchvision v1.5 layout) producing a
//! 2048-dim globally pooled feature per image.
//!
//! Weights are read from a safetensors file using torchvision parameter names
//! (`conv1.weight`, `bn1.running_mean`, `layer3.4.conv2.weight`,
//! `layer1.0.downsample.1.weight`, ...); `fc.*` and other extra keys are
//! ignored. Batch norm runs in inference mode and is folded into the
//! preceding convolution at load time.
//!
//! When ImageNet weights are not available, [`BackboneWeights::stand_in`]
//! builds a deterministic substitute: He-initialized kernels whose batch-norm
//! statistics are estimated on a fixed procedural calibration set.
//!
//! The pooled output is standardized by a frozen affine map (per-feature mean,
//! one shared scale) estimated on procedural images when the weights are
//! loaded, so it never depends on task data.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::data::SliceImage;
use crate::error::{Error, Result};
use crate::nn::layers::{global_avg_pool, relu_inplace, Conv2d, MaxPool2d};
use crate::preprocess::{
    prepare_for_classifier, standardize_intensities, NormalizedImage, CLASSIFIER_INPUT,
};

pub const FEATURE_DIM: usize = 2048;
const BN_EPS: f32 = 1e-5;
const STAGES: [(usize, usize, usize); 4] = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];
const EXPANSION: usize = 4;

/// Raw named tensors, torchvision naming.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
    pub description: String,
}

impl BackboneWeights {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                continue;
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        let description = SafeTensors::read_metadata(&bytes)
            .ok()
            .and_then(|(_, m)| {
                m.metadata()
                    .as_ref()
                    .and_then(|m| m.get("description").cloned())
            })
            .unwrap_or_else(|| path.display().to_string());
        let weights = Self {
            tensors,
            description,
        };
        // Fail early on missing or misshapen tensors.
        Backbone::from_weights(&weights)?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = names
            .into_iter()
            .map(|n| {
                let (shape, v) = &self.tensors[n];
                (
                    n.clone(),
                    shape.clone(),
                    v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                )
            })
            .collect();
        let views: Vec<(String, TensorView)> = bytes
            .iter()
            .map(|(n, shape, b)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, shape.clone(), b).expect("valid view"),
                )
            })
            .collect();
        let meta = HashMap::from([("description".to_string(), self.description.clone())]);
        let out = safetensors::serialize(views, &Some(meta))
            .map_err(|e| Error::Weights(format!("serialize: {e}")))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (found, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if found != shape {
            return Err(Error::Weights(format!(
                "tensor {name} has shape {found:?}, expected {shape:?}"
            )));
        }
        Ok(values.clone())
    }

    /// Deterministic substitute for pretrained weights.
    pub fn stand_in(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Backbone::skeleton();
        for cb in net.conv_bns_mut() {
            // Kaiming normal, fan-out mode.
            let fan_out = cb.conv.out_channels * cb.conv.kernel * cb.conv.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).unwrap();
            cb.conv
                .weight
                .mapv_inplace(|_| normal.sample(&mut rng) as f32);
            cb.gamma.fill(1.0);
            cb.beta.fill(0.0);
            cb.mean.fill(0.0);
            cb.var.fill(1.0);
        }
        let calibration: Vec<Array3<f32>> = (0..CALIBRATION_IMAGES)
            .map(|i| calibration_image(seed.wrapping_add(1 + i as u64)))
            .collect();
        net.calibrate(calibration);
        let mut weights = net.to_weights();
        weights.description = format!("stand-in resnet50 trunk, seed {seed}");
        weights
    }
}

const CALIBRATION_IMAGES: usize = 12;
const STANDARDIZATION_IMAGES: u64 = 24;
const STANDARDIZATION_SEED: u64 = 0x5E_ED0F_F00D;

/// Procedural calibration image: gradient, ellipses, a grating and noise.
fn calibration_image(seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = CLASSIFIER_INPUT;
    let ellipses: Vec<[f64; 6]> = (0..rng.gen_range(3..7))
        .map(|_| {
            [
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(8.0..80.0),
                rng.gen_range(8.0..80.0),
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(-120.0..160.0),
            ]
        })
        .collect();
    let (gx, gy, base) = (
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(20.0..120.0),
    );
    let (freq, angle, amp) = (
        rng.gen_range(0.02..0.4),
        rng.gen_range(0.0..6.3f64),
        rng.gen_range(0.0..40.0),
    );
    let noise = Normal::new(0.0, rng.gen_range(1.0..15.0)).unwrap();
    let mut values = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base + gx * xf + gy * yf;
            v += amp * (freq * (xf * angle.cos() + yf * angle.sin())).sin();
            for e in &ellipses {
                let (dx, dy) = (xf - e[0], yf - e[1]);
                let (c, s) = (e[4].cos(), e[4].sin());
                let (u, w) = ((c * dx + s * dy) / e[2], (-s * dx + c * dy) / e[3]);
                if u * u + w * w <= 1.0 {
                    v += e[5];
                }
            }
            v += noise.sample(&mut rng);
            values.push(v.clamp(0.0, 255.0) as f32);
        }
    }
    let img = standardize_intensities(&values, n, n);
    Array3::from_shape_vec((3, n, n), img.data).unwrap()
}

/// Convolution followed by inference-mode batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    name: String,
    bn_name: String,
    conv: Conv2d,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    mean: Vec<f32>,
    var: Vec<f32>,
    folded: Conv2d,
}

impl ConvBn {
    fn new(
        name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let conv = Conv2d::new(cin, cout, k, stride, pad, 1);
        Self {
            name: name.into(),
            bn_name: bn_name.into(),
            folded: conv.clone(),
            conv,
            gamma: vec![1.0; cout],
            beta: vec![0.0; cout],
            mean: vec![0.0; cout],
            var: vec![1.0; cout],
        }
    }

    fn fold(&mut self) {
        let mut folded = self.conv.clone();
        for o in 0..folded.out_channels {
            let scale = self.gamma[o] / (self.var[o] + BN_EPS).sqrt();
            folded.weight.row_mut(o).mapv_inplace(|w| w * scale);
            folded.bias[o] = self.beta[o] - self.mean[o] * scale;
        }
        self.folded = folded;
    }

    /// With `calibration`, normalizes with batch statistics and records them.
    fn apply(
        &self,
        xs: &[Array3<f32>],
        calibration: Option<&mut Vec<(Vec<f32>, Vec<f32>)>>,
    ) -> Vec<Array3<f32>> {
        let Some(stats) = calibration else {
            return xs.iter().map(|x| self.folded.forward(x.view())).collect();
        };
        let mut outs: Vec<Array3<f32>> = xs.iter().map(|x| self.conv.forward(x.view())).collect();
        let c = self.conv.out_channels;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for o in &outs {
            for (ch, plane) in o.outer_iter().enumerate() {
                for &v in plane.iter() {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += o.dim().1 * o.dim().2;
        }
        let mean: Vec<f32> = mean.iter().map(|m| (m / count as f64) as f32).collect();
        let var: Vec<f32> = sq
            .iter()
            .zip(&mean)
            .map(|(s, &m)| ((s / count as f64) - (m as f64).powi(2)).max(0.0) as f32)
            .collect();
        for o in &mut outs {
            for (ch, mut plane) in o.outer_iter_mut().enumerate() {
                let scale = self.gamma[ch] / (var[ch] + BN_EPS).sqrt();
                let shift = self.beta[ch] - mean[ch] * scale;
                plane.mapv_inplace(|v| v * scale + shift);
            }
        }
        stats.push((mean, var));
        outs
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
}

type Stats = Vec<(Vec<f32>, Vec<f32>)>;

impl Bottleneck {
    fn forward(&self, xs: Vec<Array3<f32>>, mut stats: Option<&mut Stats>) -> Vec<Array3<f32>> {
        let mut h = self.conv1.apply(&xs, stats.as_deref_mut());
        h.iter_mut().for_each(relu_inplace);
        let mut h = self.conv2.apply(&h, stats.as_deref_mut());
        h.iter_mut().for_each(relu_inplace);
        let mut h = self.conv3.apply(&h, stats.as_deref_mut());
        let identity = match &self.downsample {
            Some(ds) => ds.apply(&xs, stats),
            None => xs,
        };
        for (o, id) in h.iter_mut().zip(identity.iter()) {
            *o += id;
            relu_inplace(o);
        }
        h
    }
}

/// The frozen trunk. Parameters are only reachable immutably once built.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    description: String,
    feature_mean: Array1<f32>,
    feature_scale: f32,
    checksum: String,
}

impl Backbone {
    fn skeleton() -> Self {
        let stem = ConvBn::new("conv1", "bn1", 3, 64, 7, 2, 3);
        let mut blocks = Vec::new();
        let mut inplanes = 64;
        for (stage, &(count, planes, stride)) in STAGES.iter().enumerate() {
            for b in 0..count {
                let p = format!("layer{}.{b}", stage + 1);
                let s = if b == 0 { stride } else { 1 };
                let cin = if b == 0 { inplanes } else { planes * EXPANSION };
                blocks.push(Bottleneck {
                    conv1: ConvBn::new(
                        &format!("{p}.conv1"),
                        &format!("{p}.bn1"),
                        cin,
                        planes,
                        1,
                        1,
                        0,
                    ),
                    conv2: ConvBn::new(
                        &format!("{p}.conv2"),
                        &format!("{p}.bn2"),
                        planes,
                        planes,
                        3,
                        s,
                        1,
                    ),
                    conv3: ConvBn::new(
                        &format!("{p}.conv3"),
                        &format!("{p}.bn3"),
                        planes,
                        planes * EXPANSION,
                        1,
                        1,
                        0,
                    ),
                    downsample: (b == 0).then(|| {
                        ConvBn::new(
                            &format!("{p}.downsample.0"),
                            &format!("{p}.downsample.1"),
                            cin,
                            planes * EXPANSION,
                            1,
                            s,
                            0,
                        )
                    }),
                });
            }
            inplanes = planes * EXPANSION;
        }
        Self {
            stem,
            blocks,
            description: String::new(),
            feature_mean: Array1::zeros(FEATURE_DIM),
            feature_scale: 1.0,
            checksum: String::new(),
        }
    }

    /// Same order as the forward pass.
    fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
            out.push(&mut b.conv3);
            if let Some(ds) = &mut b.downsample {
                out.push(ds);
            }
        }
        out
    }

    fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.extend([&b.conv1, &b.conv2, &b.conv3]);
            out.extend(b.downsample.as_ref());
        }
        out
    }

    pub fn from_weights(weights: &BackboneWeights) -> Result<Self> {
        let mut net = Self::skeleton();
        for cb in net.conv_bns_mut() {
            let (o, i, k) = (cb.conv.out_channels, cb.conv.in_channels, cb.conv.kernel);
            let w = weights.get(&format!("{}.weight", cb.name), &[o, i, k, k])?;
            cb.conv.weight = Array2::from_shape_vec((o, i * k * k), w).unwrap();
            cb.gamma = weights.get(&format!("{}.weight", cb.bn_name), &[o])?;
            cb.beta = weights.get(&format!("{}.bias", cb.bn_name), &[o])?;
            cb.mean = weights.get(&format!("{}.running_mean", cb.bn_name), &[o])?;
            cb.var = weights.get(&format!("{}.running_var", cb.bn_name), &[o])?;
            if cb
                .var
                .iter()
                .chain(&cb.gamma)
                .chain(&cb.mean)
                .any(|v| !v.is_finite())
                || cb.var.iter().any(|&v| v < 0.0)
            {
                return Err(Error::Weights(format!(
                    "invalid batch-norm statistics in {}",
                    cb.bn_name
                )));
            }
            cb.fold();
        }
        net.description = weights.description.clone();
        net.fit_standardization();
        net.checksum = net.compute_checksum();
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights(&BackboneWeights::load(path)?)
    }

    fn to_weights(&self) -> BackboneWeights {
        let mut tensors = HashMap::new();
        for cb in self.conv_bns() {
            let (o, i, k) = (cb.conv.out_channels, cb.conv.in_channels, cb.conv.kernel);
            tensors.insert(
                format!("{}.weight", cb.name),
                (vec![o, i, k, k], cb.conv.weight.iter().copied().collect()),
            );
            tensors.insert(
                format!("{}.weight", cb.bn_name),
                (vec![o], cb.gamma.clone()),
            );
            tensors.insert(format!("{}.bias", cb.bn_name), (vec![o], cb.beta.clone()));
            tensors.insert(
                format!("{}.running_mean", cb.bn_name),
                (vec![o], cb.mean.clone()),
            );
            tensors.insert(
                format!("{}.running_var", cb.bn_name),
                (vec![o], cb.var.clone()),
            );
        }
        BackboneWeights {
            tensors,
            description: self.description.clone(),
        }
    }

    fn calibrate(&mut self, images: Vec<Array3<f32>>) {
        let mut stats = Vec::new();
        self.run(images, Some(&mut stats));
        let layers = self.conv_bns_mut();
        assert_eq!(layers.len(), stats.len());
        for (cb, (mean, var)) in layers.into_iter().zip(stats) {
            cb.mean = mean;
            cb.var = var;
            cb.fold();
        }
        self.checksum = self.compute_checksum();
    }

    fn pooled(&self, x: Array3<f32>) -> Array1<f32> {
        let out = self.run(vec![x], None).pop().expect("one output");
        global_avg_pool(out.view())
    }

    fn fit_standardization(&mut self) {
        let pooled: Vec<Array1<f32>> = (0..STANDARDIZATION_IMAGES)
            .map(|i| self.pooled(calibration_image(STANDARDIZATION_SEED + i)))
            .collect();
        let n = pooled.len() as f64;
        let mut mean = vec![0.0f64; FEATURE_DIM];
        for p in &pooled {
            for (m, &v) in mean.iter_mut().zip(p) {
                *m += v as f64 / n;
            }
        }
        let mut sd_sum = 0.0;
        for (d, &m) in mean.iter().enumerate() {
            let var = pooled
                .iter()
                .map(|p| (p[d] as f64 - m).powi(2))
                .sum::<f64>()
                / n;
            sd_sum += var.sqrt();
        }
        self.feature_mean = mean.iter().map(|&m| m as f32).collect();
        self.feature_scale = ((sd_sum / FEATURE_DIM as f64) as f32).max(1e-6);
    }

    fn run(&self, xs: Vec<Array3<f32>>, mut stats: Option<&mut Stats>) -> Vec<Array3<f32>> {
        let mut h = self.stem.apply(&xs, stats.as_deref_mut());
        drop(xs);
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let mut h: Vec<Array3<f32>> = h
            .iter_mut()
            .map(|x| {
                relu_inplace(x);
                pool.forward(x.view()).0
            })
            .collect();
        for block in &self.blocks {
            h = block.forward(h, stats.as_deref_mut());
        }
        h
    }

    /// Standardized 2048-dim pooled feature of one classifier-conditioned image.
    pub fn features(&self, img: &NormalizedImage) -> Result<Array1<f32>> {
        if img.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects 3 channels, got {}",
                img.channels
            )));
        }
        let x = Array3::from_shape_vec((3, img.height, img.width), img.data.clone())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let pooled = self.pooled(x);
        Ok((pooled - &self.feature_mean) / self.feature_scale)
    }

    /// Features for each slice, one row per slice, in order.
    pub fn extract(&self, slices: &[SliceImage]) -> Result<Array2<f32>> {
        let mut out = Array2::<f32>::zeros((slices.len(), FEATURE_DIM));
        for (row, s) in out.rows_mut().into_iter().zip(slices) {
            let f = self.features(&prepare_for_classifier(s))?;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backbone features"));
            }
            let mut row = row;
            row.assign(&f);
        }
        Ok(out)
    }

    /// SHA-256 over the folded inference parameters, taken at construction.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Rehashes the current parameters.
    pub fn compute_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for cb in self.conv_bns() {
            for v in cb.folded.weight.iter().chain(cb.folded.bias.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        for v in self.feature_mean.iter().chain([&self.feature_scale]) {
            hasher.update(v.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_bns()
            .iter()
            .map(|cb| cb.conv.weight.len() + 4 * cb.gamma.len())
            .sum()
    }
}
