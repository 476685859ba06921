use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel volume of the default phantom geometry (0.5 x 0.5 x 5.0 mm).
pub const DEFAULT_VOXEL_VOLUME_MM3: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleTask,
    MultiTask,
    TaskDependent,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SingleTask, Variant::MultiTask, Variant::TaskDependent];

    pub fn has_decoder(self) -> bool {
        !matches!(self, Variant::SingleTask)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SingleTask => "single_task",
            Variant::MultiTask => "multi_task",
            Variant::TaskDependent => "task_dependent",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Context slices per input window.
    pub input_slices: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each encoder stage; every stage halves H and W.
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    /// One entry per encoder stage; every stage doubles H and W.
    pub decoder_channels: Vec<usize>,
    /// Width of the hidden dense layer in the classification head; 0 means
    /// the head is a single affine layer.
    pub head_hidden: usize,
    pub skip_connections: bool,
    /// Divisor applied to the mm³ volume estimate before it enters the
    /// head. `None` resolves to the volume of one full window slice.
    pub volume_scale_mm3: Option<f64>,
    /// Initial foreground probability of the mask output; its log-odds
    /// seed the output bias so early segmentation gradients are not
    /// dominated by the background.
    pub seg_prior: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::TaskDependent,
            input_slices: 5,
            height: 64,
            width: 64,
            encoder_channels: vec![16, 32, 64],
            bottleneck_channels: 64,
            decoder_channels: vec![64, 32, 16],
            head_hidden: 32,
            skip_connections: false,
            volume_scale_mm3: None,
            seg_prior: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Normal with std `sqrt(1 / fan_in)`.
    Lecun { fan_in: usize },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv(name: &str, c_out: usize, c_in: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![c_out, c_in, k, k],
            init: Init::He { fan_in: c_in * k * k },
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![c_out],
            init: Init::Zeros,
        },
    ]
}

fn dense(name: &str, fan_out: usize, fan_in: usize, init: Init) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![fan_out, fan_in],
            init,
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![fan_out],
            init: Init::Zeros,
        },
    ]
}

impl ArchConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.input_slices == 0 || self.input_slices.is_multiple_of(2) {
            return fail(format!("input_slices must be odd, got {}", self.input_slices));
        }
        if self.encoder_channels.is_empty() {
            return fail("at least one encoder stage is required".into());
        }
        let widths = self
            .encoder_channels
            .iter()
            .chain([&self.bottleneck_channels])
            .chain(if self.variant.has_decoder() {
                self.decoder_channels.iter()
            } else {
                [].iter()
            });
        if widths.into_iter().any(|&c| c == 0) {
            return fail("channel widths must be positive".into());
        }
        let factor = 1usize << self.stages();
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(factor)
            || !self.width.is_multiple_of(factor)
        {
            return fail(format!(
                "{}x{} input is not divisible by 2^{} for {} pooling stages",
                self.height,
                self.width,
                self.stages(),
                self.stages()
            ));
        }
        if self.variant.has_decoder() && self.decoder_channels.len() != self.stages() {
            return fail(format!(
                "decoder needs {} stages to restore resolution, got {}",
                self.stages(),
                self.decoder_channels.len()
            ));
        }
        if !(self.seg_prior > 0.0 && self.seg_prior < 1.0) {
            return fail(format!("seg_prior must lie in (0, 1), got {}", self.seg_prior));
        }
        if let Some(s) = self.volume_scale_mm3 {
            if !(s > 0.0 && s.is_finite()) {
                return fail(format!("volume_scale_mm3 must be positive, got {s}"));
            }
        }
        Ok(())
    }

    pub fn volume_scale(&self) -> f64 {
        self.volume_scale_mm3
            .unwrap_or((self.height * self.width) as f64 * DEFAULT_VOXEL_VOLUME_MM3)
    }

    /// Copy with every defaulted knob made explicit, as echoed in checkpoints.
    pub fn resolved(&self) -> Self {
        ArchConfig {
            volume_scale_mm3: Some(self.volume_scale()),
            ..self.clone()
        }
    }

    /// Width of the vector entering the classification head.
    pub fn head_input_width(&self) -> usize {
        self.bottleneck_channels + usize::from(self.variant == Variant::TaskDependent)
    }

    /// Every parameter in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = self.input_slices;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            specs.extend(conv(&format!("enc.{i}.conv1"), c, c_in, 3));
            specs.extend(conv(&format!("enc.{i}.conv2"), c, c, 3));
            c_in = c;
        }
        specs.extend(conv("bottleneck", self.bottleneck_channels, c_in, 3));

        if self.variant.has_decoder() {
            let mut d_in = self.bottleneck_channels;
            for (j, &d) in self.decoder_channels.iter().enumerate() {
                let skip = if self.skip_connections {
                    self.encoder_channels[self.stages() - 1 - j]
                } else {
                    0
                };
                specs.extend(conv(&format!("dec.{j}.conv"), d, d_in + skip, 3));
                d_in = d;
            }
            let mut out = conv("dec.out", 1, d_in, 1);
            out[0].init = Init::Lecun { fan_in: d_in };
            out[1].init = Init::Constant((self.seg_prior / (1.0 - self.seg_prior)).ln());
            specs.extend(out);
        }

        let mut h_in = self.head_input_width();
        if self.head_hidden > 0 {
            specs.extend(dense(
                "head.hidden",
                self.head_hidden,
                h_in,
                Init::He { fan_in: h_in },
            ));
            h_in = self.head_hidden;
        }
        specs.extend(dense("head.final", 1, h_in, Init::Lecun { fan_in: h_in }));
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        for v in Variant::ALL {
            ArchConfig::default().with_variant(v).validate().unwrap();
        }
    }

    #[test]
    fn incompatible_resolution_rejected() {
        let a = ArchConfig {
            height: 60,
            ..ArchConfig::default()
        };
        assert!(a.validate().is_err());
        let a = ArchConfig {
            decoder_channels: vec![8],
            ..ArchConfig::default()
        };
        assert!(a.validate().is_err());
        // the decoder layout is irrelevant without a decoder
        assert!(a.with_variant(Variant::SingleTask).validate().is_ok());
        let a = ArchConfig {
            input_slices: 4,
            ..ArchConfig::default()
        };
        assert!(a.validate().is_err());
    }

    #[test]
    fn single_task_has_no_decoder_params() {
        let specs = ArchConfig::default().with_variant(Variant::SingleTask).param_specs();
        assert!(specs.iter().all(|s| !s.name.starts_with("dec.")));
    }

    #[test]
    fn task_dependent_head_takes_extra_feature() {
        let a = ArchConfig::default();
        let specs = a.param_specs();
        let hidden = specs.iter().find(|s| s.name == "head.hidden.weight").unwrap();
        assert_eq!(hidden.shape, vec![32, 64 + 1]);
        let m = a.with_variant(Variant::MultiTask).param_specs();
        let hidden = m.iter().find(|s| s.name == "head.hidden.weight").unwrap();
        assert_eq!(hidden.shape, vec![32, 64]);
    }

    #[test]
    fn skip_connections_widen_decoder_inputs() {
        let a = ArchConfig {
            skip_connections: true,
            ..ArchConfig::default()
        };
        let specs = a.param_specs();
        let d0 = specs.iter().find(|s| s.name == "dec.0.conv.weight").unwrap();
        assert_eq!(d0.shape, vec![64, 64 + 64, 3, 3]);
        let d2 = specs.iter().find(|s| s.name == "dec.2.conv.weight").unwrap();
        assert_eq!(d2.shape, vec![16, 32 + 16, 3, 3]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }
}
