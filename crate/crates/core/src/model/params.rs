use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, AUX_CHANNELS, RGB_CHANNELS};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// `[c_s, c_{s-1}, 3, 3]` per stage.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    /// `[c_s, 2 c_s]` per stage.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[K, c_s]` per stage.
    pub proj: Vec<Tensor>,
    pub bias: Tensor,
}

/// Every learnable tensor of the network. The same type doubles as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub rgb: Branch,
    pub aux: Branch,
    pub fusion: Fusion,
    pub joint: Head,
    pub rgb_head: Option<Head>,
    pub aux_head: Option<Head>,
    version: u64,
}

fn branch_shapes(config: &ModelConfig, in_channels: usize) -> Vec<[usize; 4]> {
    let mut prev = in_channels;
    config
        .channels
        .iter()
        .map(|&c| {
            let s = [c, prev, 3, 3];
            prev = c;
            s
        })
        .collect()
}

impl Params {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let branch = |in_c| Branch {
            weights: branch_shapes(config, in_c).iter().map(|s| Tensor::zeros(s)).collect(),
            biases: config.channels.iter().map(|&c| Tensor::zeros(&[c])).collect(),
        };
        let head = || Head {
            proj: config.channels.iter().map(|&c| Tensor::zeros(&[config.classes, c])).collect(),
            bias: Tensor::zeros(&[config.classes]),
        };
        Ok(Params {
            config: config.clone(),
            rgb: branch(RGB_CHANNELS),
            aux: branch(AUX_CHANNELS),
            fusion: Fusion {
                weights: config.channels.iter().map(|&c| Tensor::zeros(&[c, 2 * c])).collect(),
                biases: config.channels.iter().map(|&c| Tensor::zeros(&[c])).collect(),
            },
            joint: head(),
            rgb_head: config.multihead.then(head),
            aux_head: config.multihead.then(head),
            version: 0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(&self.config).expect("config validated at construction")
    }

    /// Bumped whenever the tensors are handed out mutably.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, b) in [("rgb", &self.rgb), ("aux", &self.aux)] {
            for (s, (w, bias)) in b.weights.iter().zip(&b.biases).enumerate() {
                out.push((format!("{prefix}.stage{s}.weight"), w));
                out.push((format!("{prefix}.stage{s}.bias"), bias));
            }
        }
        for (s, (w, b)) in self.fusion.weights.iter().zip(&self.fusion.biases).enumerate() {
            out.push((format!("fusion.stage{s}.weight"), w));
            out.push((format!("fusion.stage{s}.bias"), b));
        }
        for (name, head) in self.heads() {
            for (s, p) in head.proj.iter().enumerate() {
                out.push((format!("head.{name}.stage{s}.weight"), p));
            }
            out.push((format!("head.{name}.bias"), &head.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in [&mut self.rgb, &mut self.aux] {
            for (w, bias) in b.weights.iter_mut().zip(b.biases.iter_mut()) {
                out.push(w);
                out.push(bias);
            }
        }
        for (w, b) in self.fusion.weights.iter_mut().zip(self.fusion.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        for head in [Some(&mut self.joint), self.rgb_head.as_mut(), self.aux_head.as_mut()]
            .into_iter()
            .flatten()
        {
            out.extend(head.proj.iter_mut());
            out.push(&mut head.bias);
        }
        out
    }

    fn heads(&self) -> Vec<(&'static str, &Head)> {
        let mut v = vec![("joint", &self.joint)];
        if let Some(h) = &self.rgb_head {
            v.push(("rgb", h));
        }
        if let Some(h) = &self.aux_head {
            v.push(("aux", h));
        }
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Flat copy of every scalar in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &Params) {
        let src: Vec<Tensor> = other.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            dst.add_assign(s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }
}

/// Fan-in scaled normal (Kaiming) weights for every layer, zero biases.
/// Deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    let mut params = Params::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = params.names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = t.shape()[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    params.version = 0;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn biases_zero_and_weights_finite() {
        let p = init_params(&ModelConfig::default(), 1).unwrap();
        for (name, t) in p.named_tensors() {
            assert!(t.is_finite());
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }

    #[test]
    fn names_match_mutable_order() {
        let mut p = init_params(&ModelConfig::default(), 1).unwrap();
        let shapes: Vec<Vec<usize>> = p.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mshapes: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mshapes);
        assert!(p.names().contains(&"head.aux.bias".to_string()));
    }

    #[test]
    fn single_head_config_has_no_side_heads() {
        let cfg = ModelConfig {
            multihead: false,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 1).unwrap();
        assert!(p.rgb_head.is_none() && p.aux_head.is_none());
        assert!(!p.names().iter().any(|n| n.starts_with("head.rgb")));
    }

    #[test]
    fn stage_shapes() {
        let p = Params::zeros(&ModelConfig::default()).unwrap();
        assert_eq!(p.rgb.weights[0].shape(), &[8, 3, 3, 3]);
        assert_eq!(p.aux.weights[0].shape(), &[8, 2, 3, 3]);
        assert_eq!(p.aux.weights[2].shape(), &[32, 16, 3, 3]);
        assert_eq!(p.fusion.weights[1].shape(), &[16, 32]);
        assert_eq!(p.joint.proj[2].shape(), &[4, 32]);
    }
}
