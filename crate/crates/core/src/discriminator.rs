//! Shallow patch discriminators on projected features and the adversarial losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{minpool_mask, Mask};
use crate::nn::{Bind, Conv2d, ParamStore, WeightInit};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const SN_WARMUP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Baseline,
    MaskAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Hinge,
}

/// Which fake patches the generator loss averages over in mask-aware mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorScope {
    Generated,
    AllPatches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub norm: Norm,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            norm: Norm::Batch,
            leaky_slope: 0.2,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// One power iteration for `w` viewed as `rows x cols`, starting from `u`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (vc, wc) in v.iter_mut().zip(row) {
            *vc += wc * u[r];
        }
    }
    normalize(&mut v);
    let mut u2: Vec<f64> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    normalize(&mut u2);
    (u2, v)
}

/// Three spectral-normalized convolutions: 3x3 stride 2, 3x3, 1x1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDiscriminator {
    pub in_channels: usize,
    pub channels: usize,
    norm: Norm,
    slope: f64,
    convs: Vec<Conv2d>,
    bn: Vec<(String, String)>,
}

impl PatchDiscriminator {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        cfg: &DiscriminatorConfig,
    ) -> Self {
        let c = cfg.channels;
        let convs = vec![
            Conv2d::init(params, rng, &format!("{prefix}.conv0"), in_channels, c, 3, 2, true, WeightInit::Kaiming),
            Conv2d::init(params, rng, &format!("{prefix}.conv1"), c, c, 3, 1, true, WeightInit::Kaiming),
            Conv2d::init(params, rng, &format!("{prefix}.conv2"), c, 1, 1, 1, true, WeightInit::Kaiming),
        ];
        for conv in &convs {
            let w = params.get(&conv.weight);
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            let mut u = Tensor::randn(&[rows], rng).into_data();
            normalize(&mut u);
            for _ in 0..SN_WARMUP {
                u = power_iteration(w.data(), rows, cols, &u).0;
            }
            buffers.insert(format!("{}.sn_u", conv.weight), Tensor::from_vec(&[rows], u));
        }
        let bn = match cfg.norm {
            Norm::Batch => (0..2)
                .map(|i| {
                    let g = format!("{prefix}.bn{i}.gamma");
                    let b = format!("{prefix}.bn{i}.beta");
                    params.insert(g.clone(), Tensor::ones(&[c]));
                    params.insert(b.clone(), Tensor::zeros(&[c]));
                    (g, b)
                })
                .collect(),
            Norm::None => Vec::new(),
        };
        Self {
            in_channels,
            channels: c,
            norm: cfg.norm,
            slope: cfg.leaky_slope,
            convs,
            bn,
        }
    }

    pub fn conv_weights(&self) -> impl Iterator<Item = &str> {
        self.convs.iter().map(|c| c.weight.as_str())
    }

    /// Logits `[N, 1, ceil(h/2), ceil(w/2)]` for projected features `[N, C, h, w]`.
    /// With `update_sn` the stored power-iteration vectors advance one step.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: Bind<'_>,
        buffers: &mut ParamStore,
        x: Var,
        update_sn: bool,
    ) -> Result<Var> {
        let got = t.shape(x)[1];
        if got != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got,
            });
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let w = p.store.get(&conv.weight);
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            let key = format!("{}.sn_u", conv.weight);
            let (u, v) = power_iteration(w.data(), rows, cols, buffers.get(&key).data());
            if update_sn {
                *buffers.get_mut(&key) = Tensor::from_vec(&[rows], u.clone());
            }
            let wv = p.var(t, &conv.weight);
            let wn = t.spectral_norm(wv, u, v);
            let b = conv.bias.as_ref().map(|b| p.var(t, b));
            h = t.conv2d(h, wn, b, conv.stride, conv.pad);
            if i < 2 {
                if let Some((g, bt)) = self.bn.get(i) {
                    let gv = p.var(t, g);
                    let bv = p.var(t, bt);
                    h = t.batch_norm(h, gv, bv, BN_EPS);
                }
                h = t.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }
}

/// One patch discriminator per projected level of every feature network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSet {
    pub params: ParamStore,
    pub buffers: ParamStore,
    /// `heads[network][level]`
    pub heads: Vec<Vec<PatchDiscriminator>>,
}

impl DiscriminatorSet {
    pub fn new<R: Rng + ?Sized>(level_channels: &[Vec<usize>], cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let heads = level_channels
            .iter()
            .enumerate()
            .map(|(n, chans)| {
                chans
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| PatchDiscriminator::init(&mut params, &mut buffers, rng, &format!("d{n}.l{l}"), c, cfg))
                    .collect()
            })
            .collect();
        Self { params, buffers, heads }
    }

    pub fn level_channels(&self) -> Vec<Vec<usize>> {
        self.heads
            .iter()
            .map(|hs| hs.iter().map(|h| h.in_channels).collect())
            .collect()
    }

    /// Logits for every level of every network, flattened in network-major order.
    pub fn forward(&mut self, t: &mut Tape, trainable: bool, projected: &[Vec<Var>], update_sn: bool) -> Result<Vec<Var>> {
        if projected.len() != self.heads.len() {
            return Err(Error::LevelCountMismatch {
                expected: self.heads.len(),
                got: projected.len(),
            });
        }
        let bind = Bind {
            store: &self.params,
            trainable,
        };
        let mut out = Vec::new();
        for (hs, feats) in self.heads.iter().zip(projected) {
            if hs.len() != feats.len() {
                return Err(Error::LevelCountMismatch {
                    expected: hs.len(),
                    got: feats.len(),
                });
            }
            for (h, &f) in hs.iter().zip(feats) {
                out.push(h.forward(t, bind, &mut self.buffers, f, update_sn)?);
            }
        }
        Ok(out)
    }
}

/// Eager single-sample forward: `[C, h, w]` features to `[h', w']` logits.
pub fn d_forward(d: &PatchDiscriminator, params: &ParamStore, buffers: &ParamStore, projected: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let s = projected.shape();
    let x = t.constant(projected.clone().reshape(&[1, s[0], s[1], s[2]]));
    let mut buffers = buffers.clone();
    let y = d.forward(&mut t, Bind::frozen(params), &mut buffers, x, false)?;
    let (_, _, h, w) = t.value(y).dims4();
    Ok(t.value(y).clone().reshape(&[h, w]))
}

/// Min-pooled masks at each logit resolution, as `[N, 1, h, w]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskAwareLabels {
    pub levels: Vec<Tensor>,
}

impl MaskAwareLabels {
    pub fn from_masks(masks: &[Mask], sizes: &[(usize, usize)]) -> Result<Self> {
        let levels = sizes
            .iter()
            .map(|&(h, w)| {
                let pooled = masks
                    .iter()
                    .map(|m| Ok(minpool_mask(m, h, w)?.to_tensor().reshape(&[1, h, w])))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&pooled))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn for_logits(masks: &[Mask], t: &Tape, logits: &[Var]) -> Result<Self> {
        let sizes: Vec<_> = logits
            .iter()
            .map(|&l| {
                let s = t.shape(l);
                (s[2], s[3])
            })
            .collect();
        Self::from_masks(masks, &sizes)
    }
}

fn nonempty(real: &[Var], fake: &[Var]) -> Result<()> {
    if fake.is_empty() || real.len() != fake.len() {
        return Err(Error::EmptyLevelList);
    }
    Ok(())
}

fn check_labels(t: &Tape, fake: &[Var], labels: &MaskAwareLabels) -> Result<()> {
    if labels.levels.len() != fake.len() {
        return Err(Error::LevelCountMismatch {
            expected: fake.len(),
            got: labels.levels.len(),
        });
    }
    for (&f, m) in fake.iter().zip(&labels.levels) {
        let s = t.shape(f);
        if s != m.shape() {
            return Err(Error::ResolutionMismatch {
                expected: (s[2], s[3]),
                got: (m.shape()[2], m.shape()[3]),
            });
        }
    }
    Ok(())
}

/// Per-patch penalty for labeling `x` real.
fn as_real(t: &mut Tape, x: Var, kind: LossKind) -> Var {
    let neg = t.scale(x, -1.0);
    match kind {
        LossKind::Logistic => t.softplus(neg),
        LossKind::Hinge => {
            let one = Tensor::ones(t.shape(x));
            let c = t.constant(one);
            let m = t.add(c, neg);
            t.relu(m)
        }
    }
}

/// Per-patch penalty for labeling `x` fake.
fn as_fake(t: &mut Tape, x: Var, kind: LossKind) -> Var {
    match kind {
        LossKind::Logistic => t.softplus(x),
        LossKind::Hinge => {
            let one = Tensor::ones(t.shape(x));
            let c = t.constant(one);
            let m = t.add(c, x);
            t.relu(m)
        }
    }
}

fn sum_levels(t: &mut Tape, terms: Vec<Var>) -> Var {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, v| t.add(acc, v))
}

/// Real-image term: every patch labeled real.
pub fn real_term(t: &mut Tape, real: &[Var], kind: LossKind) -> Var {
    let terms = real
        .iter()
        .map(|&r| {
            let p = as_real(t, r, kind);
            t.mean(p)
        })
        .collect();
    sum_levels(t, terms)
}

pub fn fake_term_baseline(t: &mut Tape, fake: &[Var], kind: LossKind) -> Var {
    let terms = fake
        .iter()
        .map(|&f| {
            let p = as_fake(t, f, kind);
            t.mean(p)
        })
        .collect();
    sum_levels(t, terms)
}

/// Known patches labeled real, generated patches labeled fake.
pub fn fake_term_mask_aware(t: &mut Tape, fake: &[Var], labels: &MaskAwareLabels, kind: LossKind) -> Var {
    let terms = fake
        .iter()
        .zip(&labels.levels)
        .map(|(&f, m)| {
            let known = as_real(t, f, kind);
            let known = t.mul_const(known, m.clone());
            let gen = as_fake(t, f, kind);
            let gen = t.mul_const(gen, m.map(|v| 1.0 - v));
            let s = t.add(known, gen);
            t.mean(s)
        })
        .collect();
    sum_levels(t, terms)
}

pub fn loss_d_baseline(t: &mut Tape, real: &[Var], fake: &[Var], kind: LossKind) -> Result<Var> {
    nonempty(real, fake)?;
    let r = real_term(t, real, kind);
    let f = fake_term_baseline(t, fake, kind);
    Ok(t.add(r, f))
}

pub fn loss_d_mask_aware(t: &mut Tape, real: &[Var], fake: &[Var], labels: &MaskAwareLabels, kind: LossKind) -> Result<Var> {
    nonempty(real, fake)?;
    check_labels(t, fake, labels)?;
    let r = real_term(t, real, kind);
    let f = fake_term_mask_aware(t, fake, labels, kind);
    Ok(t.add(r, f))
}

/// Non-saturating generator loss (hinge: `-mean(fake)`).
pub fn loss_g(
    t: &mut Tape,
    fake: &[Var],
    labels: Option<&MaskAwareLabels>,
    objective: Objective,
    scope: GeneratorScope,
    kind: LossKind,
) -> Result<Var> {
    if fake.is_empty() {
        return Err(Error::EmptyLevelList);
    }
    let per_patch = |t: &mut Tape, f: Var| match kind {
        LossKind::Logistic => {
            let n = t.scale(f, -1.0);
            t.softplus(n)
        }
        LossKind::Hinge => t.scale(f, -1.0),
    };
    let restrict = objective == Objective::MaskAware && scope == GeneratorScope::Generated;
    if !restrict {
        let terms = fake
            .iter()
            .map(|&f| {
                let p = per_patch(t, f);
                t.mean(p)
            })
            .collect();
        return Ok(sum_levels(t, terms));
    }
    let labels = labels.ok_or(Error::EmptyLevelList)?;
    check_labels(t, fake, labels)?;
    let mut terms = Vec::new();
    for (&f, m) in fake.iter().zip(&labels.levels) {
        let generated = m.map(|v| 1.0 - v);
        let count = generated.sum();
        if count == 0.0 {
            continue;
        }
        let p = per_patch(t, f);
        let p = t.mul_const(p, generated);
        let s = t.sum(p);
        terms.push(t.scale(s, 1.0 / count));
    }
    if terms.is_empty() {
        return Err(Error::AllPatchesKnown);
    }
    Ok(sum_levels(t, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(cin: usize, norm: Norm) -> (PatchDiscriminator, ParamStore, ParamStore) {
        let mut p = ParamStore::new();
        let mut b = ParamStore::new();
        let cfg = DiscriminatorConfig {
            channels: 8,
            norm,
            leaky_slope: 0.2,
        };
        let d = PatchDiscriminator::init(&mut p, &mut b, &mut ChaCha8Rng::seed_from_u64(1), "d", cin, &cfg);
        (d, p, b)
    }

    fn logits(t: &mut Tape, vals: &[f64], h: usize, w: usize) -> Var {
        t.leaf(Tensor::from_vec(&[1, 1, h, w], vals.to_vec()))
    }

    #[test]
    fn output_is_half_resolution() {
        let (d, p, b) = disc(5, Norm::Batch);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = d_forward(&d, &p, &b, &Tensor::randn(&[5, 8, 8], &mut rng)).unwrap();
        assert_eq!(y.shape(), &[4, 4]);
        let y = d_forward(&d, &p, &b, &Tensor::randn(&[5, 7, 5], &mut rng)).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
        assert!(matches!(
            d_forward(&d, &p, &b, &Tensor::zeros(&[4, 8, 8])),
            Err(Error::ChannelMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let (d, mut p, b) = disc(3, Norm::None);
        let last = d.conv_weights().last().unwrap().to_string();
        p.get_mut(&last).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let y = d_forward(&d, &p, &b, &Tensor::zeros(&[3, 6, 6])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    fn top_singular_value(w: &[f64], rows: usize, cols: usize) -> f64 {
        let mut u = vec![1.0; rows];
        let mut v = vec![0.0; cols];
        for _ in 0..500 {
            (u, v) = power_iteration(w, rows, cols, &u);
        }
        crate::autograd::bilinear_form(w, rows, cols, &u, &v)
    }

    #[test]
    fn spectral_norm_bounds_singular_value() {
        for seed in 0..5 {
            let mut p = ParamStore::new();
            let mut b = ParamStore::new();
            let d = PatchDiscriminator::init(
                &mut p,
                &mut b,
                &mut ChaCha8Rng::seed_from_u64(seed),
                "d",
                16,
                &DiscriminatorConfig::default(),
            );
            for name in d.conv_weights() {
                let w = p.get(name);
                let rows = w.shape()[0];
                let cols = w.len() / rows;
                let (u, v) = power_iteration(w.data(), rows, cols, b.get(&format!("{name}.sn_u")).data());
                let mut t = Tape::new();
                let wv = t.constant(w.clone());
                let wn = t.spectral_norm(wv, u, v);
                let s = top_singular_value(t.value(wn).data(), rows, cols);
                assert!((0.9..=1.1).contains(&s), "{name}: {s}");
            }
        }
    }

    #[test]
    fn baseline_examples() {
        let mut t = Tape::new();
        let r = [logits(&mut t, &[0.0; 4], 2, 2), logits(&mut t, &[0.0; 1], 1, 1)];
        let f = [logits(&mut t, &[0.0; 4], 2, 2), logits(&mut t, &[0.0; 1], 1, 1)];
        let l = loss_d_baseline(&mut t, &r, &f, LossKind::Logistic).unwrap();
        assert!((t.value(l).item() - 2.0 * 2.0 * 2f64.ln()).abs() < 1e-12);
        let r = [logits(&mut t, &[60.0], 1, 1)];
        let f = [logits(&mut t, &[-60.0], 1, 1)];
        let l = loss_d_baseline(&mut t, &r, &f, LossKind::Logistic).unwrap();
        assert!(t.value(l).item() < 1e-20);
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let r = [logits(&mut t, &[x], 1, 1)];
            let f = [logits(&mut t, &[x], 1, 1)];
            let lv = loss_d_baseline(&mut t, &r, &f, LossKind::Logistic).unwrap();
            let l = t.value(lv).item();
            assert!((l - (softplus(-x) + softplus(x))).abs() < 1e-14);
            assert!(l >= 2.0 * 2f64.ln() - 1e-15);
        }
        assert!(matches!(
            loss_d_baseline(&mut t, &[], &[], LossKind::Logistic),
            Err(Error::EmptyLevelList)
        ));
    }

    #[test]
    fn mask_aware_reduces_to_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let r = [t.leaf(Tensor::randn(&[2, 1, 3, 2], &mut rng))];
        let f = [t.leaf(Tensor::randn(&[2, 1, 3, 2], &mut rng))];
        let zeros = MaskAwareLabels {
            levels: vec![Tensor::zeros(&[2, 1, 3, 2])],
        };
        let a = loss_d_mask_aware(&mut t, &r, &f, &zeros, LossKind::Logistic).unwrap();
        let b = loss_d_baseline(&mut t, &r, &f, LossKind::Logistic).unwrap();
        assert!((t.value(a).item() - t.value(b).item()).abs() < 1e-12);
        let ones = MaskAwareLabels {
            levels: vec![Tensor::ones(&[2, 1, 3, 2])],
        };
        let fm = fake_term_mask_aware(&mut t, &f, &ones, LossKind::Logistic);
        let fr = real_term(&mut t, &f, LossKind::Logistic);
        assert!((t.value(fm).item() - t.value(fr).item()).abs() < 1e-12);
    }

    #[test]
    fn mask_aware_checkerboard_gradient_signs() {
        let mut t = Tape::new();
        let f = [logits(&mut t, &[0.0; 4], 2, 2)];
        let labels = MaskAwareLabels {
            levels: vec![Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0])],
        };
        let term = fake_term_mask_aware(&mut t, &f, &labels, LossKind::Logistic);
        assert!((t.value(term).item() - 2f64.ln()).abs() < 1e-15);
        let g = t.backward(term);
        let g = g.of(f[0]).unwrap().data().to_vec();
        assert!(g[0] < 0.0 && g[3] < 0.0);
        assert!(g[1] > 0.0 && g[2] > 0.0);
        let bad = MaskAwareLabels {
            levels: vec![Tensor::zeros(&[1, 1, 3, 2])],
        };
        let r = [logits(&mut t, &[0.0; 4], 2, 2)];
        assert!(matches!(
            loss_d_mask_aware(&mut t, &r, &f, &bad, LossKind::Logistic),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn mask_aware_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let real = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let fake = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let m = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let labels = MaskAwareLabels { levels: vec![m] };
        let eval = |fk: &Tensor| {
            let mut t = Tape::new();
            let r = [t.constant(real.clone())];
            let f = [t.constant(fk.clone())];
            let l = loss_d_mask_aware(&mut t, &r, &f, &labels, LossKind::Logistic).unwrap();
            t.value(l).item()
        };
        let mut t = Tape::new();
        let r = [t.constant(real.clone())];
        let f = [t.leaf(fake.clone())];
        let l = loss_d_mask_aware(&mut t, &r, &f, &labels, LossKind::Logistic).unwrap();
        let g = t.backward(l);
        let grad = g.of(f[0]).unwrap();
        for i in 0..18 {
            let h = 1e-5;
            let (mut a, mut b) = (fake.clone(), fake.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (eval(&a) - eval(&b)) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() <= 1e-4 * grad.data()[i].abs());
        }
    }

    #[test]
    fn generator_loss_modes() {
        let mut t = Tape::new();
        let f = [logits(&mut t, &[0.0; 4], 2, 2), logits(&mut t, &[0.0; 1], 1, 1)];
        let base = loss_g(&mut t, &f, None, Objective::Baseline, GeneratorScope::Generated, LossKind::Logistic).unwrap();
        assert!((t.value(base).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let zeros = MaskAwareLabels {
            levels: vec![Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1, 1, 1, 1])],
        };
        let ma = loss_g(&mut t, &f, Some(&zeros), Objective::MaskAware, GeneratorScope::Generated, LossKind::Logistic).unwrap();
        assert!((t.value(ma).item() - t.value(base).item()).abs() < 1e-15);
        let ones = MaskAwareLabels {
            levels: vec![Tensor::ones(&[1, 1, 2, 2]), Tensor::ones(&[1, 1, 1, 1])],
        };
        assert!(matches!(
            loss_g(&mut t, &f, Some(&ones), Objective::MaskAware, GeneratorScope::Generated, LossKind::Logistic),
            Err(Error::AllPatchesKnown)
        ));
        assert!(loss_g(&mut t, &f, Some(&ones), Objective::MaskAware, GeneratorScope::AllPatches, LossKind::Logistic).is_ok());
    }

    #[test]
    fn hinge_losses() {
        let mut t = Tape::new();
        let r = [logits(&mut t, &[2.0, 0.0], 1, 2)];
        let f = [logits(&mut t, &[-2.0, 0.5], 1, 2)];
        let l = loss_d_baseline(&mut t, &r, &f, LossKind::Hinge).unwrap();
        // real: mean(relu(1-2), relu(1-0)) = 0.5; fake: mean(relu(-1), relu(1.5)) = 0.75
        assert!((t.value(l).item() - 1.25).abs() < 1e-15);
        let g = loss_g(&mut t, &f, None, Objective::Baseline, GeneratorScope::Generated, LossKind::Hinge).unwrap();
        assert!((t.value(g).item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn labels_come_from_minpool() {
        let mut m = Mask::ones(8, 6);
        m.set(5, 1, false);
        let labels = MaskAwareLabels::from_masks(&[m.clone()], &[(4, 3), (2, 2)]).unwrap();
        assert_eq!(labels.levels[0].shape(), &[1, 1, 4, 3]);
        let expect = minpool_mask(&m, 4, 3).unwrap().to_tensor();
        assert_eq!(labels.levels[0].data(), expect.data());
    }
}
