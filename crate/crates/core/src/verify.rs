//! Finite-difference verification of every differentiable primitive and of
//! the complete loss graph of each network variant.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{self, GradCheckReport, GraphFn};
use crate::autodiff::{Graph, Padding, Var};
use crate::loss::{self, LossConfig};
use crate::model::{ArchConfig, Model, Variant};
use crate::{Element, Result, Tensor};

/// Central-difference step.
pub const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("data length matches shape")
}

/// `sum(op(inputs) * weights)` with fixed random weights, so every output
/// element contributes a distinct amount to the scalar.
struct Weighted<F> {
    op: F,
    weights: Tensor<f64>,
}

impl<F> GraphFn for Weighted<F>
where
    F: Fn(&mut dyn OpBuilder, &[Var]) -> Result<Var>,
{
    fn build<T: Element>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let out = (self.op)(&mut Builder(g), inputs)?;
        let w = g.input(self.weights.cast());
        let w = g.reshape(w, g.shape(out).to_vec())?;
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    }
}

// Object-safe facade so one closure can build at either precision.
trait OpBuilder {
    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, s: usize, p: Padding) -> Result<Var>;
    fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var>;
    fn upsample(&mut self, x: Var, f: usize) -> Result<Var>;
    fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var>;
    fn sigmoid(&mut self, x: Var) -> Var;
    fn relu(&mut self, x: Var) -> Var;
    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var>;
    fn sum_trailing(&mut self, x: Var, axes: usize) -> Result<Var>;
    fn mean_trailing(&mut self, x: Var, axes: usize) -> Result<Var>;
    fn sum(&mut self, x: Var) -> Var;
    fn mean(&mut self, x: Var) -> Var;
    fn add(&mut self, a: Var, b: Var) -> Result<Var>;
    fn mul(&mut self, a: Var, b: Var) -> Result<Var>;
    fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var;
    fn log_clamped(&mut self, x: Var) -> Var;
    fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var>;
}

struct Builder<'a, T>(&'a mut Graph<T>);

impl<T: Element> OpBuilder for Builder<'_, T> {
    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, s: usize, p: Padding) -> Result<Var> {
        self.0.conv2d(x, w, b, s, p)
    }
    fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.0.max_pool2d(x, size)
    }
    fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        self.0.upsample_nearest2d(x, f)
    }
    fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.0.dense(x, w, b)
    }
    fn sigmoid(&mut self, x: Var) -> Var {
        self.0.sigmoid(x)
    }
    fn relu(&mut self, x: Var) -> Var {
        self.0.relu(x)
    }
    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.0.concat(xs, axis)
    }
    fn sum_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        self.0.sum_trailing(x, axes)
    }
    fn mean_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        self.0.mean_trailing(x, axes)
    }
    fn sum(&mut self, x: Var) -> Var {
        self.0.sum(x)
    }
    fn mean(&mut self, x: Var) -> Var {
        self.0.mean(x)
    }
    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.0.add(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.0.mul(a, b)
    }
    fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.0.affine(x, T::from_f64(scale), T::from_f64(shift))
    }
    fn log_clamped(&mut self, x: Var) -> Var {
        self.0.log_clamped(x, T::from_f64(1e-12))
    }
    fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.0.reshape(x, shape)
    }
}

type OpFn = fn(&mut dyn OpBuilder, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, f64, f64)>,
    out_numel: usize,
    op: OpFn,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d same stride 1 + bias",
            inputs: vec![(vec![2, 3, 6, 5], -1.0, 1.0), (vec![4, 3, 3, 3], -1.0, 1.0), (vec![4], -1.0, 1.0)],
            out_numel: 2 * 4 * 6 * 5,
            op: |b, v| b.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same),
        },
        Case {
            name: "conv2d valid stride 2",
            inputs: vec![(vec![1, 7, 7], -1.0, 1.0), (vec![2, 1, 3, 3], -1.0, 1.0)],
            out_numel: 2 * 3 * 3,
            op: |b, v| b.conv2d(v[0], v[1], None, 2, Padding::Valid),
        },
        Case {
            name: "conv2d same stride 2 even kernel",
            inputs: vec![(vec![1, 2, 5, 6], -1.0, 1.0), (vec![3, 2, 2, 2], -1.0, 1.0)],
            out_numel: 3 * 3 * 3,
            op: |b, v| b.conv2d(v[0], v[1], None, 2, Padding::Same),
        },
        Case {
            name: "max_pool2d",
            inputs: vec![(vec![2, 3, 4, 6], -1.0, 1.0)],
            out_numel: 2 * 3 * 2 * 3,
            op: |b, v| b.max_pool2d(v[0], 2),
        },
        Case {
            name: "nearest_upsample2d",
            inputs: vec![(vec![2, 2, 3, 2], -1.0, 1.0)],
            out_numel: 2 * 2 * 6 * 4,
            op: |b, v| b.upsample(v[0], 2),
        },
        Case {
            name: "dense",
            inputs: vec![(vec![3, 5], -1.0, 1.0), (vec![4, 5], -1.0, 1.0), (vec![4], -1.0, 1.0)],
            out_numel: 12,
            op: |b, v| b.dense(v[0], v[1], Some(v[2])),
        },
        Case {
            name: "sigmoid",
            inputs: vec![(vec![3, 4], -4.0, 4.0)],
            out_numel: 12,
            op: |b, v| Ok(b.sigmoid(v[0])),
        },
        Case {
            name: "relu",
            inputs: vec![(vec![3, 4], -1.0, 1.0)],
            out_numel: 12,
            op: |b, v| Ok(b.relu(v[0])),
        },
        Case {
            name: "concat axis 1",
            inputs: vec![(vec![2, 3, 2], -1.0, 1.0), (vec![2, 1, 2], -1.0, 1.0)],
            out_numel: 16,
            op: |b, v| b.concat(&[v[0], v[1]], 1),
        },
        Case {
            name: "reduce_sum trailing",
            inputs: vec![(vec![2, 3, 4], -1.0, 1.0)],
            out_numel: 2,
            op: |b, v| b.sum_trailing(v[0], 2),
        },
        Case {
            name: "reduce_mean trailing",
            inputs: vec![(vec![2, 3, 4], -1.0, 1.0)],
            out_numel: 6,
            op: |b, v| b.mean_trailing(v[0], 1),
        },
        Case {
            name: "reduce_sum all",
            inputs: vec![(vec![3, 3], -1.0, 1.0)],
            out_numel: 1,
            op: |b, v| Ok(b.sum(v[0])),
        },
        Case {
            name: "reduce_mean all",
            inputs: vec![(vec![3, 3], -1.0, 1.0)],
            out_numel: 1,
            op: |b, v| Ok(b.mean(v[0])),
        },
        Case {
            name: "add",
            inputs: vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)],
            out_numel: 6,
            op: |b, v| b.add(v[0], v[1]),
        },
        Case {
            name: "mul",
            inputs: vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)],
            out_numel: 6,
            op: |b, v| b.mul(v[0], v[1]),
        },
        Case {
            name: "mul (shared operand)",
            inputs: vec![(vec![5], -1.0, 1.0)],
            out_numel: 5,
            op: |b, v| b.mul(v[0], v[0]),
        },
        Case {
            name: "affine",
            inputs: vec![(vec![4], -1.0, 1.0)],
            out_numel: 4,
            op: |b, v| Ok(b.affine(v[0], -1.5, 0.25)),
        },
        Case {
            name: "log clamp",
            inputs: vec![(vec![6], 0.05, 2.0)],
            out_numel: 6,
            op: |b, v| Ok(b.log_clamped(v[0])),
        },
        Case {
            name: "reshape",
            inputs: vec![(vec![2, 6], -1.0, 1.0)],
            out_numel: 12,
            op: |b, v| b.reshape(v[0], vec![3, 4]),
        },
    ]
}


/// One checked function at one seed.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Names of the primitive cases, in check order.
pub fn primitive_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Every primitive at `seed`, float64 analytic gradients.
pub fn check_primitives_f64(seed: u64) -> Result<Vec<CheckOutcome>> {
    cases()
        .into_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = case
                .inputs
                .iter()
                .map(|(s, lo, hi)| random(&mut rng, s, *lo, *hi))
                .collect();
            let f = Weighted {
                op: case.op,
                weights: random(&mut rng, &[case.out_numel], -1.0, 1.0),
            };
            Ok(CheckOutcome {
                name: case.name.to_string(),
                seed,
                report: gradcheck::check(&f, &inputs, H)?,
            })
        })
        .collect()
}

/// Every primitive at `seed`, float32 analytic gradients against float64
/// central differences at the same point.
pub fn check_primitives_f32(seed: u64) -> Result<Vec<CheckOutcome>> {
    cases()
        .into_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f32>> = case
                .inputs
                .iter()
                .map(|(s, lo, hi)| random(&mut rng, s, *lo, *hi).cast())
                .collect();
            let f = Weighted {
                op: case.op,
                weights: random(&mut rng, &[case.out_numel], -1.0, 1.0).cast::<f32>().cast(),
            };
            Ok(CheckOutcome {
                name: case.name.to_string(),
                seed,
                report: gradcheck::check_f32(&f, &inputs, H)?,
            })
        })
        .collect()
}

/// Blended training loss of a small `variant` network at `seed`, checked
/// with respect to every parameter. Odd seeds enable skip connections.
pub fn check_network(variant: Variant, seed: u64) -> Result<CheckOutcome> {
    let (f, params) = network_case(variant, seed % 2 == 1, seed, 0.5)?;
    Ok(CheckOutcome {
        name: variant.to_string(),
        seed,
        report: gradcheck::check(&f, &params, H)?,
    })
}

fn tiny_arch(variant: Variant, skip: bool) -> ArchConfig {
    ArchConfig {
        variant,
        input_slices: 3,
        height: 8,
        width: 8,
        encoder_channels: vec![2, 3],
        bottleneck_channels: 3,
        decoder_channels: vec![3, 2],
        head_hidden: 3,
        skip_connections: skip,
        volume_scale_mm3: Some(20.0),
        seg_prior: 0.01,
    }
}

/// Full network plus blended loss as a function of every parameter.
struct NetworkLoss {
    arch: ArchConfig,
    names: Vec<String>,
    images: Tensor<f64>,
    masks: Tensor<f64>,
    labels: Vec<f64>,
    voxel_volumes: Vec<f64>,
    lambda: f64,
}

impl GraphFn for NetworkLoss {
    fn build<T: Element>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let params: IndexMap<String, Var> = self.names.iter().cloned().zip(inputs.iter().copied()).collect();
        let x = g.input(self.images.cast());
        let vv: Vec<T> = self.voxel_volumes.iter().map(|&v| T::from_f64(v)).collect();
        let out = self.arch.build_graph(g, &params, x, &vv)?;
        let labels: Vec<T> = self.labels.iter().map(|&v| T::from_f64(v)).collect();
        let config = LossConfig::default();
        let l_cls = loss::classification_loss(g, &labels, out.cls, &config)?;
        match out.seg {
            Some(seg) => {
                let l_seg = loss::segmentation_loss(g, &self.masks.cast(), seg, &config)?;
                loss::combined_loss(g, l_cls, l_seg, self.lambda)
            }
            None => Ok(l_cls),
        }
    }
}

fn network_case(variant: Variant, skip: bool, seed: u64, lambda: f64) -> Result<(NetworkLoss, Vec<Tensor<f64>>)> {
    let arch = tiny_arch(variant, skip);
    let model = Model::<f64>::new(&arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let m = 2;
    let images = random(&mut rng, &[m, 3, 8, 8], 0.0, 1.0);
    let masks = Tensor::new(
        vec![m, 8, 8],
        (0..m * 64).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect(),
    )?;
    // perturb the zero-initialised biases so every parameter is exercised generically
    let params: Vec<Tensor<f64>> = model
        .params()
        .values()
        .map(|t| {
            let noise = random(&mut rng, t.shape(), -0.1, 0.1);
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let f = NetworkLoss {
        arch,
        names: model.param_names().map(String::from).collect(),
        images,
        masks,
        labels: vec![1.0, 0.0],
        voxel_volumes: vec![1.25, 0.8],
        lambda,
    };
    Ok((f, params))
}

