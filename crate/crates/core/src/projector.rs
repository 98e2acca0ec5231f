//! Frozen feature networks, fixed random projections, and the blur schedule
//! for discriminator inputs.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gaussian_kernel, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bind, Conv2d, ParamStore, WeightInit};
use crate::tensor::Tensor;

pub const FEATURE_LEVELS: usize = 4;

/// Blur strength at the given step, fading linearly to zero over `fade_budget` images.
pub fn blur_schedule(step_images: u64, fade_budget: u64, sigma_max: f64) -> f64 {
    assert!(fade_budget > 0, "fade budget must be positive");
    sigma_max * (1.0 - step_images as f64 / fade_budget as f64).max(0.0)
}

/// `sigma_max` of 10 px at height 288, scaled to `height`.
pub fn sigma_max_for_height(height: usize) -> f64 {
    10.0 * height as f64 / 288.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Resize {
    None,
    /// Fixed portrait size, e.g. 288x160.
    Native { height: usize, width: usize },
    Square { size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub resize: Resize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            resize: Resize::None,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Four stride-2 3x3 convolution stages with leaky ReLU. Parameters are never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetwork {
    pub name: String,
    pub preprocess: Preprocess,
    channels: Vec<usize>,
    slope: f64,
    convs: Vec<Conv2d>,
    params: ParamStore,
}

/// On-disk description of an external feature network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginDescriptor {
    pub name: String,
    pub resize: Resize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub channels: Vec<usize>,
    #[serde(default = "default_slope")]
    pub slope: f64,
    /// Weight archive path, relative to the descriptor.
    pub weights: String,
}

fn default_slope() -> f64 {
    0.2
}

impl FeatureNetwork {
    /// Randomly initialized network with a fixed seed.
    pub fn random(name: &str, channels: &[usize], seed: u64, preprocess: Preprocess) -> Self {
        assert_eq!(channels.len(), FEATURE_LEVELS);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let convs = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::init(&mut params, &mut rng, &format!("stage{i}"), cin, c, 3, 2, true, WeightInit::Kaiming);
                cin = c;
                conv
            })
            .collect();
        Self {
            name: name.to_string(),
            preprocess,
            channels: channels.to_vec(),
            slope: 0.2,
            convs,
            params,
        }
    }

    /// Built-in desk network: channels 32/64/128/256.
    pub fn desk(seed: u64) -> Self {
        Self::random("desk", &[32, 64, 128, 256], seed, Preprocess::default())
    }

    fn from_parts(desc: &PluginDescriptor, params: ParamStore) -> Result<Self> {
        if desc.channels.len() != FEATURE_LEVELS {
            return Err(Error::LevelCountMismatch {
                expected: FEATURE_LEVELS,
                got: desc.channels.len(),
            });
        }
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in desc.channels.iter().enumerate() {
            let conv = Conv2d::named(&format!("stage{i}"), 3, 2, true, WeightInit::Kaiming, cin * 9);
            let expect = [c, cin, 3, 3];
            let ok = params.contains(&conv.weight)
                && params.get(&conv.weight).shape() == expect
                && conv.bias.as_ref().is_some_and(|b| params.contains(b) && params.get(b).shape() == [c]);
            if !ok {
                return Err(Error::Checkpoint(format!(
                    "feature network `{}`: stage{i} weights missing or not shaped {expect:?}",
                    desc.name
                )));
            }
            convs.push(conv);
            cin = c;
        }
        if params.len() != 2 * FEATURE_LEVELS {
            return Err(Error::Checkpoint(format!(
                "feature network `{}`: unexpected extra tensors in weight archive",
                desc.name
            )));
        }
        Ok(Self {
            name: desc.name.clone(),
            preprocess: Preprocess {
                resize: desc.resize.clone(),
                mean: desc.mean,
                std: desc.std,
            },
            channels: desc.channels.clone(),
            slope: desc.slope,
            convs,
            params,
        })
    }

    /// Loads a JSON descriptor and the bincode weight archive it points at.
    pub fn load_plugin(descriptor: &Path) -> Result<Self> {
        let desc: PluginDescriptor = serde_json::from_slice(&fs::read(descriptor)?)?;
        let dir = descriptor.parent().unwrap_or(Path::new("."));
        let bytes = fs::read(dir.join(&desc.weights))?;
        let params: ParamStore = bincode::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("weight archive {}: {e}", desc.weights)))?;
        Self::from_parts(&desc, params)
    }

    /// Writes `descriptor` plus a weight archive next to it.
    pub fn save_plugin(&self, descriptor: &Path) -> Result<()> {
        let stem = descriptor
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("features");
        let weights = format!("{stem}.weights.bin");
        let desc = PluginDescriptor {
            name: self.name.clone(),
            resize: self.preprocess.resize.clone(),
            mean: self.preprocess.mean,
            std: self.preprocess.std,
            channels: self.channels.clone(),
            slope: self.slope,
            weights: weights.clone(),
        };
        let dir = descriptor.parent().unwrap_or(Path::new("."));
        let bytes = bincode::serialize(&self.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join(weights), bytes)?;
        fs::write(descriptor, serde_json::to_vec_pretty(&desc)?)?;
        Ok(())
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    fn preprocess(&self, t: &mut Tape, x: Var) -> Var {
        let x = match self.preprocess.resize {
            Resize::None => x,
            Resize::Native { height, width } => t.resize_bilinear(x, height, width),
            Resize::Square { size } => t.resize_bilinear(x, size, size),
        };
        let Preprocess { mean, std, .. } = self.preprocess;
        if mean == [0.0; 3] && std == [1.0; 3] {
            return x;
        }
        let n = t.shape(x)[0];
        let scale: Vec<f64> = (0..n).flat_map(|_| std.map(|s| 1.0 / s)).collect();
        let shift: Vec<f64> = (0..n).flat_map(|_| [0, 1, 2].map(|c| -mean[c] / std[c])).collect();
        let scale = t.constant(Tensor::from_vec(&[n, 3], scale));
        let shift = t.constant(Tensor::from_vec(&[n, 3], shift));
        t.modulate(x, scale, shift)
    }

    /// Blur, preprocess, and run the frozen stages on `[N, 3, H, W]` images.
    /// Gradients reach the images, never the network.
    pub fn extract(&self, t: &mut Tape, images: Var, blur_sigma: f64) -> Vec<Var> {
        let mut x = if blur_sigma > 0.0 {
            t.blur(images, gaussian_kernel(blur_sigma))
        } else {
            images
        };
        x = self.preprocess(t, x);
        let bind = Bind::frozen(&self.params);
        self.convs
            .iter()
            .map(|conv| {
                let y = conv.forward(t, bind, x);
                x = t.leaky_relu(y, self.slope);
                x
            })
            .collect()
    }
}

/// Eager feature extraction on a batch.
pub fn extract_features(net: &FeatureNetwork, images: &Tensor, blur_sigma: f64) -> Vec<Tensor> {
    let mut t = Tape::new();
    let x = t.constant(images.clone());
    net.extract(&mut t, x, blur_sigma)
        .into_iter()
        .map(|v| t.value(v).clone())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Random,
    Identity,
}

/// Cross-channel 1x1 mixes per level, then a top-down cross-scale pathway of
/// 3x3 mixes with nearest-upsampled lateral inputs. Bias-free and never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub seed: u64,
    pub mode: ProjectionMode,
    in_channels: Vec<usize>,
    out_channels: usize,
    ccm: Vec<Conv2d>,
    csm: Vec<Conv2d>,
    params: ParamStore,
}

impl ProjectionSet {
    pub fn new(in_channels: &[usize], out_channels: usize, seed: u64, mode: ProjectionMode) -> Self {
        let mut params = ParamStore::new();
        let (mut ccm, mut csm) = (Vec::new(), Vec::new());
        if mode == ProjectionMode::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (l, &c) in in_channels.iter().enumerate() {
                ccm.push(Conv2d::init(&mut params, &mut rng, &format!("ccm{l}"), c, out_channels, 1, 1, false, WeightInit::Kaiming));
            }
            for l in 0..in_channels.len() {
                csm.push(Conv2d::init(&mut params, &mut rng, &format!("csm{l}"), out_channels, out_channels, 3, 1, false, WeightInit::Kaiming));
            }
        }
        Self {
            seed,
            mode,
            in_channels: in_channels.to_vec(),
            out_channels,
            ccm,
            csm,
            params,
        }
    }

    pub fn output_channels(&self) -> Vec<usize> {
        match self.mode {
            ProjectionMode::Random => vec![self.out_channels; self.in_channels.len()],
            ProjectionMode::Identity => self.in_channels.clone(),
        }
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn forward(&self, t: &mut Tape, features: &[Var]) -> Result<Vec<Var>> {
        if features.len() != self.in_channels.len() {
            return Err(Error::LevelCountMismatch {
                expected: self.in_channels.len(),
                got: features.len(),
            });
        }
        if self.mode == ProjectionMode::Identity {
            return Ok(features.to_vec());
        }
        let bind = Bind::frozen(&self.params);
        let mixed: Vec<Var> = features
            .iter()
            .zip(&self.ccm)
            .map(|(&f, conv)| conv.forward(t, bind, f))
            .collect();
        let mut out = vec![mixed[0]; mixed.len()];
        let mut coarser: Option<Var> = None;
        for l in (0..mixed.len()).rev() {
            let mut x = mixed[l];
            if let Some(c) = coarser {
                let s = t.shape(x);
                let (h, w) = (s[2], s[3]);
                let up = t.resize_nearest(c, h, w);
                x = t.add(x, up);
            }
            let y = self.csm[l].forward(t, bind, x);
            out[l] = y;
            coarser = Some(y);
        }
        Ok(out)
    }
}

/// Eager projection of feature maps.
pub fn project(pset: &ProjectionSet, features: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut t = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| t.constant(f.clone())).collect();
    let out = pset.forward(&mut t, &vars)?;
    Ok(out.into_iter().map(|v| t.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        Tensor::uniform(&[1, 3, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn blur_schedule_examples() {
        assert_eq!(blur_schedule(0, 4_000_000, 10.0), 10.0);
        assert_eq!(blur_schedule(2_000_000, 4_000_000, 10.0), 5.0);
        assert_eq!(blur_schedule(4_000_000, 4_000_000, 10.0), 0.0);
        assert_eq!(blur_schedule(9_000_000, 4_000_000, 10.0), 0.0);
        let mut prev = f64::INFINITY;
        for s in (0..5000).step_by(37) {
            let v = blur_schedule(s, 4000, 1.25);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn features_are_deterministic_and_shrinking() {
        let net = FeatureNetwork::desk(7);
        let img = image(1, 36, 20);
        let a = extract_features(&net, &img, 0.0);
        let b = extract_features(&net, &img, 0.0);
        assert_eq!(a.len(), FEATURE_LEVELS);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let sizes: Vec<_> = a.iter().map(|f| (f.shape()[2], f.shape()[3])).collect();
        assert_eq!(sizes, vec![(18, 10), (9, 5), (5, 3), (3, 2)]);
    }

    #[test]
    fn blur_of_constant_image_changes_nothing() {
        let net = FeatureNetwork::desk(7);
        let img = Tensor::full(&[1, 3, 18, 10], 0.3);
        let a = extract_features(&net, &img, 0.0);
        let b = extract_features(&net, &img, 4.0);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let net = FeatureNetwork::random("t", &[4, 4, 4, 4], 2, Preprocess::default());
        let img = image(3, 8, 6);
        let total = |x: &Tensor| -> f64 {
            extract_features(&net, x, 0.8).iter().map(|f| f.sum()).sum()
        };
        let mut t = Tape::new();
        let x = t.leaf(img.clone());
        let feats = net.extract(&mut t, x, 0.8);
        let sums: Vec<Var> = feats.iter().map(|&f| t.sum(f)).collect();
        let mut loss = sums[0];
        for &s in &sums[1..] {
            loss = t.add(loss, s);
        }
        let g = t.backward(loss);
        assert!(t.param_grads(&g).is_empty());
        let grad = g.of(x).unwrap();
        for idx in [0, 17, 60, 143] {
            let h = 1e-5;
            let (mut p, mut m) = (img.clone(), img.clone());
            p.data_mut()[idx] += h;
            m.data_mut()[idx] -= h;
            let fd = (total(&p) - total(&m)) / (2.0 * h);
            let ad = grad.data()[idx];
            assert!((fd - ad).abs() <= 1e-3 * ad.abs().max(1e-6), "{fd} vs {ad}");
        }
    }

    #[test]
    fn square_resize_and_normalization() {
        let pre = Preprocess {
            resize: Resize::Square { size: 16 },
            mean: [0.1, 0.2, 0.3],
            std: [0.5, 0.5, 0.5],
        };
        let net = FeatureNetwork::random("sq", &[4, 4, 4, 4], 1, pre);
        let f = extract_features(&net, &image(0, 18, 10), 0.0);
        assert_eq!((f[0].shape()[2], f[0].shape()[3]), (8, 8));
    }

    #[test]
    fn projection_properties() {
        let chans = [32, 64, 128, 256];
        let feats = extract_features(&FeatureNetwork::desk(1), &image(5, 18, 10), 0.0);
        let p1 = ProjectionSet::new(&chans, 64, 9, ProjectionMode::Random);
        let a = project(&p1, &feats).unwrap();
        assert_eq!(a, project(&p1, &feats).unwrap());
        let p2 = ProjectionSet::new(&chans, 64, 10, ProjectionMode::Random);
        assert_ne!(a, project(&p2, &feats).unwrap());
        for (x, f) in a.iter().zip(&feats) {
            assert_eq!(&x.shape()[2..], &f.shape()[2..]);
            assert_eq!(x.shape()[1], 64);
        }
        let zeros: Vec<Tensor> = feats.iter().map(|f| Tensor::zeros(f.shape())).collect();
        assert!(project(&p1, &zeros).unwrap().iter().all(|x| x.data().iter().all(|v| *v == 0.0)));
        assert!(matches!(
            project(&p1, &feats[..3]),
            Err(Error::LevelCountMismatch { expected: 4, got: 3 })
        ));
        let id = ProjectionSet::new(&chans, 64, 0, ProjectionMode::Identity);
        assert_eq!(project(&id, &feats).unwrap(), feats);
    }

    #[test]
    fn coarse_levels_feed_finer_projections() {
        let chans = [2, 2, 2, 2];
        let p = ProjectionSet::new(&chans, 3, 4, ProjectionMode::Random);
        let mut feats: Vec<Tensor> = [(8, 8), (4, 4), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| Tensor::zeros(&[1, 2, h, w]))
            .collect();
        feats[3] = Tensor::ones(&[1, 2, 1, 1]);
        let out = project(&p, &feats).unwrap();
        assert!(out.iter().all(|o| o.norm() > 0.0));
    }

    #[test]
    fn plugin_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pre = Preprocess {
            resize: Resize::Native { height: 36, width: 20 },
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let net = FeatureNetwork::random("ext", &[4, 8, 8, 16], 3, pre);
        let path = dir.path().join("ext.json");
        net.save_plugin(&path).unwrap();
        let back = FeatureNetwork::load_plugin(&path).unwrap();
        assert_eq!(back.digest(), net.digest());
        let img = image(2, 18, 10);
        assert_eq!(extract_features(&back, &img, 0.0), extract_features(&net, &img, 0.0));
    }
}
