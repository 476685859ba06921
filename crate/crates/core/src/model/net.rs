use indexmap::IndexMap;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchConfig, Init, Variant};
use crate::autodiff::{Graph, Padding, Var};
use crate::data::{SliceWindow, WindowBatch};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Named parameters in registration order.
pub type ParamStore<T> = IndexMap<String, Tensor<T>>;

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct GraphOutputs {
    /// `[m]` classification probabilities.
    pub cls: Var,
    /// `[m, h, w]` centre-slice mask probabilities.
    pub seg: Option<Var>,
    /// `[m]` raw blood-volume estimate in mm³.
    pub volume_mm3: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions<T> {
    pub cls_probs: Vec<T>,
    /// `[m, h, w]`; absent for the single-task variant.
    pub seg_probs: Option<Tensor<T>>,
    /// Raw mm³ estimate per window; task-dependent variant only.
    pub volume_mm3: Option<Vec<T>>,
}

/// `voxel_volume * sum(seg_probs)`.
pub fn blood_volume_feature(seg_probs: &[f64], voxel_volume: f64) -> Result<f64> {
    if !(voxel_volume > 0.0) {
        return Err(Error::invalid(format!("voxel volume must be positive, got {voxel_volume}")));
    }
    if let Some(p) = seg_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("segmentation probability {p} outside [0, 1]")));
    }
    Ok(voxel_volume * seg_probs.iter().sum::<f64>())
}

/// Differentiable volume estimate: sums each sample of `seg` (`[m, ...]`)
/// and multiplies by that sample's voxel volume, giving `[m]`.
pub fn volume_feature_graph<T: Element>(
    g: &mut Graph<T>,
    seg: Var,
    voxel_volumes: &[T],
) -> Result<Var> {
    let shape = g.shape(seg).to_vec();
    if shape.len() < 2 || shape[0] != voxel_volumes.len() {
        return Err(Error::ShapeMismatch {
            op: "volume_feature",
            lhs: shape,
            rhs: vec![voxel_volumes.len()],
        });
    }
    let summed = g.sum_trailing(seg, shape.len() - 1)?;
    let vv = g.input(Tensor::new(vec![voxel_volumes.len()], voxel_volumes.to_vec())?);
    g.mul(summed, vv)
}

fn p(params: &IndexMap<String, Var>, name: &str) -> Result<Var> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

fn conv_relu<T: Element>(
    g: &mut Graph<T>,
    params: &IndexMap<String, Var>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = p(params, &format!("{name}.weight"))?;
    let b = p(params, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, Some(b), 1, Padding::Same)?;
    Ok(g.relu(y))
}

fn affine<T: Element>(
    g: &mut Graph<T>,
    params: &IndexMap<String, Var>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = p(params, &format!("{name}.weight"))?;
    let b = p(params, &format!("{name}.bias"))?;
    g.dense(x, w, Some(b))
}

impl ArchConfig {
    /// Build the forward graph for `x` (`[m, k, h, w]`) from parameter nodes.
    pub fn build_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &IndexMap<String, Var>,
        x: Var,
        voxel_volumes: &[T],
    ) -> Result<GraphOutputs> {
        let shape = g.shape(x).to_vec();
        let expected = [self.input_slices, self.height, self.width];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape,
                rhs: expected.to_vec(),
            });
        }
        let m = shape[0];
        if voxel_volumes.len() != m {
            return Err(Error::ShapeMismatch {
                op: "voxel volumes",
                lhs: vec![m],
                rhs: vec![voxel_volumes.len()],
            });
        }

        let mut h = x;
        let mut skips = Vec::with_capacity(self.stages());
        for i in 0..self.stages() {
            h = conv_relu(g, params, &format!("enc.{i}.conv1"), h)?;
            h = conv_relu(g, params, &format!("enc.{i}.conv2"), h)?;
            skips.push(h);
            h = g.max_pool2d(h, 2)?;
        }
        let bottleneck = conv_relu(g, params, "bottleneck", h)?;
        let pooled = g.mean_trailing(bottleneck, 2)?;

        let mut seg = None;
        if self.variant.has_decoder() {
            let mut d = bottleneck;
            for j in 0..self.stages() {
                d = g.upsample_nearest2d(d, 2)?;
                if self.skip_connections {
                    d = g.concat(&[d, skips[self.stages() - 1 - j]], 1)?;
                }
                d = conv_relu(g, params, &format!("dec.{j}.conv"), d)?;
            }
            let w = p(params, "dec.out.weight")?;
            let b = p(params, "dec.out.bias")?;
            let logits = g.conv2d(d, w, Some(b), 1, Padding::Same)?;
            let probs = g.sigmoid(logits);
            seg = Some(g.reshape(probs, vec![m, self.height, self.width])?);
        }

        let mut head_in = pooled;
        let mut volume_mm3 = None;
        if self.variant == Variant::TaskDependent {
            let seg = seg.expect("task-dependent variant has a decoder");
            let volume = volume_feature_graph(g, seg, voxel_volumes)?;
            let scaled = g.scale(volume, T::from_f64(1.0 / self.volume_scale()));
            let column = g.reshape(scaled, vec![m, 1])?;
            head_in = g.concat(&[pooled, column], 1)?;
            volume_mm3 = Some(volume);
        }

        let mut z = head_in;
        if self.head_hidden > 0 {
            let hidden = affine(g, params, "head.hidden", z)?;
            z = g.relu(hidden);
        }
        let logit = affine(g, params, "head.final", z)?;
        let prob = g.sigmoid(logit);
        let cls = g.reshape(prob, vec![m])?;
        Ok(GraphOutputs {
            cls,
            seg,
            volume_mm3,
        })
    }
}

/// A network variant together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    arch: ArchConfig,
    params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Seeded initialisation; identical `(arch, seed)` give identical bits.
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in arch.param_specs() {
            let numel: usize = spec.shape.iter().product();
            let std = match spec.init {
                Init::He { fan_in } => (2.0 / fan_in as f64).sqrt(),
                Init::Lecun { fan_in } => (1.0 / fan_in as f64).sqrt(),
                Init::Zeros | Init::Constant(_) => 0.0,
            };
            let data = match spec.init {
                Init::Constant(v) => vec![T::from_f64(v); numel],
                _ if std > 0.0 => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..numel).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
                _ => vec![T::zero(); numel],
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Model {
            arch: arch.resolved(),
            params,
        })
    }

    /// Assemble from stored parameters, checking names and shapes against
    /// the architecture.
    pub fn from_parts(arch: ArchConfig, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "architecture expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&params) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Model {
            arch: arch.resolved(),
            params,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every parameter as a graph leaf.
    pub fn register(
        &self,
        g: &mut Graph<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<IndexMap<String, Var>> {
        self.params
            .iter()
            .map(|(name, t)| Ok((name.clone(), g.param(name, t.clone(), trainable(name))?)))
            .collect()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        voxel_volumes: &[T],
        trainable: impl Fn(&str) -> bool,
    ) -> Result<GraphOutputs> {
        let vars = self.register(g, trainable)?;
        let x = g.input(images.clone());
        self.arch.build_graph(g, &vars, x, voxel_volumes)
    }

    /// Inference on `[m, k, h, w]` windows.
    pub fn forward(&self, images: &Tensor<T>, voxel_volumes: &[T]) -> Result<Predictions<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, images, voxel_volumes, |_| false)?;
        Ok(Predictions {
            cls_probs: g.value(out.cls).data().to_vec(),
            seg_probs: out.seg.map(|s| g.value(s).clone()),
            volume_mm3: out.volume_mm3.map(|v| g.value(v).data().to_vec()),
        })
    }

    pub fn forward_batch(&self, batch: &WindowBatch<T>) -> Result<Predictions<T>> {
        self.forward(&batch.images, &batch.voxel_volumes)
    }

    /// Classification probability of every window, evaluated in chunks.
    pub fn predict_windows(&self, windows: &[SliceWindow], batch_size: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch_size.max(1)) {
            let refs: Vec<&SliceWindow> = chunk.iter().collect();
            let batch = WindowBatch::from_windows(&refs)?;
            out.extend(self.forward_batch(&batch)?.cls_probs);
        }
        Ok(out)
    }
}
