//! Small multi-stride convolutional backbone standing in for VGG16.
//!
//! Each stage optionally max-pools, then applies 3×3 convolutions with
//! ReLU. Taps expose stage outputs as feature maps at known strides, the
//! same role conv3_3 / conv4_3 / conv5_3 play in the full-size network.

use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::hash_active;
use super::layers::{max_pool2d, max_pool2d_backward, relu, relu_backward, Conv2d};
use super::tensor::pad_to_multiple;
use super::{NetError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Max-pool factor applied before the convolutions (1 = none).
    #[serde(default = "one")]
    pub pool: usize,
    pub convs: Vec<ConvSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub stage: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub taps: Vec<TapSpec>,
}

impl Default for BackboneSpec {
    /// Three stages tapped at strides 4, 8 and 16.
    fn default() -> Self {
        let conv = |c, s| ConvSpec {
            out_channels: c,
            stride: s,
        };
        BackboneSpec {
            in_channels: 1,
            stages: vec![
                StageSpec {
                    pool: 1,
                    convs: vec![conv(8, 2), conv(16, 2), conv(16, 1)],
                },
                StageSpec {
                    pool: 2,
                    convs: vec![conv(32, 1)],
                },
                StageSpec {
                    pool: 2,
                    convs: vec![conv(32, 1)],
                },
            ],
            taps: vec![
                TapSpec { stage: 0, stride: 4 },
                TapSpec { stage: 1, stride: 8 },
                TapSpec { stage: 2, stride: 16 },
            ],
        }
    }
}

impl BackboneSpec {
    /// Cumulative stride at the output of each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.stages
            .iter()
            .map(|st| {
                s *= st.pool.max(1);
                for c in &st.convs {
                    s *= c.stride.max(1);
                }
                s
            })
            .collect()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        let mut c = self.in_channels;
        self.stages
            .iter()
            .map(|st| {
                if let Some(last) = st.convs.last() {
                    c = last.out_channels;
                }
                c
            })
            .collect()
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        let ch = self.stage_channels();
        self.taps.iter().map(|t| ch[t.stage]).collect()
    }

    pub fn max_stride(&self) -> usize {
        self.taps.iter().map(|t| t.stride).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.in_channels == 0 {
            return bad("backbone needs at least one input channel".into());
        }
        if self.taps.is_empty() {
            return bad("backbone needs at least one tap".into());
        }
        let strides = self.stage_strides();
        let mut prev = 0;
        for t in &self.taps {
            if t.stage >= self.stages.len() {
                return bad(format!("tap refers to missing stage {}", t.stage));
            }
            if strides[t.stage] != t.stride {
                return bad(format!(
                    "tap on stage {} declares stride {} but the stage runs at {}",
                    t.stage, t.stride, strides[t.stage]
                ));
            }
            if !t.stride.is_power_of_two() || t.stride <= prev {
                return bad("tap strides must be strictly increasing powers of two".into());
            }
            prev = t.stride;
        }
        for st in &self.stages {
            if !(st.pool == 1 || st.pool == 2) {
                return bad(format!("unsupported pool factor {}", st.pool));
            }
            if st
                .convs
                .iter()
                .any(|c| c.out_channels == 0 || !(c.stride == 1 || c.stride == 2))
            {
                return bad("convs need positive channels and stride 1 or 2".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    /// Convolutions of all stages, in order.
    pub convs: Vec<Conv2d>,
}

enum Step {
    Pool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Conv { conv: usize, input: Tensor, output: Tensor },
}

/// Intermediate values kept from a forward pass for the backward pass.
pub struct BackboneCache {
    /// Steps of each stage, in forward order.
    stages: Vec<Vec<Step>>,
}

impl BackboneCache {
    /// Feeds the active relu units and the pooling winners into `h`.
    pub fn hash_pattern(&self, h: &mut impl Hasher) {
        for step in self.stages.iter().flatten() {
            match step {
                Step::Pool { argmax, .. } => argmax.hash(h),
                Step::Conv { output, .. } => hash_active(output.data(), h),
            }
        }
    }
}

impl Backbone {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self, NetError> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut c = spec.in_channels;
        for st in &spec.stages {
            for cs in &st.convs {
                convs.push(Conv2d::he(c, cs.out_channels, 3, cs.stride, 1, rng));
                c = cs.out_channels;
            }
        }
        Ok(Backbone { spec, convs })
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.convs.len())
            .flat_map(|i| [format!("backbone.conv{i}.weight"), format!("backbone.conv{i}.bias")])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    /// Runs the network on `image (1, c, h, w)`, zero-padding it up to the
    /// largest tap stride. Returns one `(feature map, stride)` per tap.
    pub fn forward(&self, image: &Tensor) -> Result<(Vec<(Tensor, usize)>, BackboneCache), NetError> {
        let (_, c, _, _) = image.dims4()?;
        if c != self.spec.in_channels {
            return Err(NetError::Shape(format!(
                "backbone expects {} input channels, image has shape {:?}",
                self.spec.in_channels,
                image.shape()
            )));
        }
        let mut x = pad_to_multiple(image, self.spec.max_stride())?;
        let mut stage_outputs = Vec::with_capacity(self.spec.stages.len());
        let mut cache = Vec::with_capacity(self.spec.stages.len());
        let mut conv_idx = 0;
        for st in &self.spec.stages {
            let mut steps = Vec::new();
            if st.pool > 1 {
                let (y, argmax) = max_pool2d(&x, st.pool, st.pool)?;
                steps.push(Step::Pool {
                    in_shape: x.shape().to_vec(),
                    argmax,
                });
                x = y;
            }
            for _ in &st.convs {
                let out = relu(&self.convs[conv_idx].forward(&x)?);
                steps.push(Step::Conv {
                    conv: conv_idx,
                    input: x,
                    output: out.clone(),
                });
                x = out;
                conv_idx += 1;
            }
            stage_outputs.push(x.clone());
            cache.push(steps);
        }
        let taps = self
            .spec
            .taps
            .iter()
            .map(|t| (stage_outputs[t.stage].clone(), t.stride))
            .collect();
        Ok((taps, BackboneCache { stages: cache }))
    }

    /// Back-propagates tap gradients (`None` for taps with no gradient) and
    /// returns parameter gradients in [`Backbone::params`] order.
    pub fn backward(&self, cache: &BackboneCache, tap_grads: &[Option<Tensor>]) -> Result<Vec<Tensor>, NetError> {
        let mut grads: Vec<Tensor> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut carry: Option<Tensor> = None;
        for (s, steps) in cache.stages.iter().enumerate().rev() {
            for (t, tap) in self.spec.taps.iter().enumerate() {
                if tap.stage != s {
                    continue;
                }
                if let Some(Some(g)) = tap_grads.get(t) {
                    match carry.as_mut() {
                        Some(c) => c.add_assign(g)?,
                        None => carry = Some(g.clone()),
                    }
                }
            }
            let Some(mut d) = carry.take() else {
                continue;
            };
            for step in steps.iter().rev() {
                d = match step {
                    Step::Pool { in_shape, argmax } => max_pool2d_backward(in_shape, argmax, &d),
                    Step::Conv { conv, input, output } => {
                        let dpre = relu_backward(output, &d);
                        let (dx, dw, db) = self.convs[*conv].backward(input, &dpre)?;
                        grads[2 * conv].add_assign(&dw)?;
                        grads[2 * conv + 1].add_assign(&db)?;
                        dx
                    }
                };
            }
            carry = Some(d);
        }
        Ok(grads)
    }
}

/// Feature maps and strides for every tap of `backbone` on `image`.
pub fn backbone_forward(backbone: &Backbone, image: &Tensor) -> Result<Vec<(Tensor, usize)>, NetError> {
    Ok(backbone.forward(image)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_shapes() {
        let spec = BackboneSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.stage_strides(), vec![4, 8, 16]);
        let bb = Backbone::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::filled(&[1, 1, 64, 64], 0.5);
        let taps = backbone_forward(&bb, &img).unwrap();
        let dims: Vec<_> = taps.iter().map(|(t, s)| (t.shape().to_vec(), *s)).collect();
        assert_eq!(
            dims,
            vec![
                (vec![1, 16, 16, 16], 4),
                (vec![1, 32, 8, 8], 8),
                (vec![1, 32, 4, 4], 16)
            ]
        );
        assert_eq!(spec.tap_channels(), vec![16, 32, 32]);
    }

    #[test]
    fn pads_to_largest_stride() {
        let bb = Backbone::new(BackboneSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let taps = backbone_forward(&bb, &Tensor::zeros(&[1, 1, 50, 70])).unwrap();
        assert_eq!(taps[2].0.shape(), &[1, 32, 4, 5]);
    }

    #[test]
    fn deterministic() {
        let bb = Backbone::new(BackboneSpec::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bb2 = Backbone::new(BackboneSpec::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(bb, bb2);
        let img = Tensor::from_vec(&[1, 1, 32, 32], (0..1024).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        assert_eq!(
            backbone_forward(&bb, &img).unwrap(),
            backbone_forward(&bb2, &img).unwrap()
        );
    }

    #[test]
    fn invalid_specs() {
        let mut s = BackboneSpec::default();
        s.taps[1].stride = 4;
        assert!(s.validate().is_err());
        let mut s = BackboneSpec::default();
        s.taps.clear();
        assert!(s.validate().is_err());
        let mut s = BackboneSpec::default();
        s.taps.swap(0, 1);
        assert!(s.validate().is_err());
    }
}
