//! Adversarial training loop, stage scheduling, and run-directory output.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::config::{NetworkConfig, RunConfig};
use crate::datasets::{image_to_png, write_png, MaskedSample};
use crate::discriminator::{loss_d_baseline, loss_d_mask_aware, loss_g, DiscriminatorSet, MaskAwareLabels, Objective};
use crate::error::{Error, Result};
use crate::generator::{Conditioning, EmaRamp, GeneratorState, LATENT_DIM};
use crate::mask::Mask;
use crate::metrics::sample_latent;
use crate::nn::{Adam, Bind};
use crate::pose::{skeleton_segments, line_pixels, pixel_index, LimbClass};
use crate::projector::{blur_schedule, FeatureNetwork, Preprocess, ProjectionSet};
use crate::tensor::Tensor;

const DISCRIMINATOR_SEED_TAG: u64 = 0xD15C_0000;
const LOOP_SEED_TAG: u64 = 0x7EA1_0000;

/// A frozen feature network with its frozen projection.
#[derive(Clone, Debug)]
pub struct FeatureBranch {
    pub network: FeatureNetwork,
    pub projection: ProjectionSet,
}

impl FeatureBranch {
    /// Blurred, projected multi-scale features.
    pub fn project(&self, t: &mut Tape, images: Var, sigma: f64) -> Result<Vec<Var>> {
        let feats = self.network.extract(t, images, sigma);
        self.projection.forward(t, &feats)
    }

    /// Combined digest of the frozen weights.
    pub fn digest(&self) -> String {
        format!("{}:{}", self.network.digest(), self.projection.digest())
    }
}

/// Builds the feature branches named by the config. Plugin paths are
/// resolved against `base_dir`.
pub fn build_branches(config: &RunConfig, base_dir: &Path) -> Result<Vec<FeatureBranch>> {
    let p = &config.projector;
    p.networks
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let network = match n {
                NetworkConfig::Desk { name, seed, channels } => FeatureNetwork::random(name, channels, *seed, Preprocess::default()),
                NetworkConfig::Plugin { path } => FeatureNetwork::load_plugin(&base_dir.join(path))?,
            };
            let projection = ProjectionSet::new(network.channels(), p.proj_channels, p.seed.wrapping_add(i as u64), p.mode);
            Ok(FeatureBranch { network, projection })
        })
        .collect()
}

/// Everything that changes during training. Serializes losslessly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub generator: GeneratorState,
    pub discriminators: DiscriminatorSet,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub stage: usize,
    /// Images consumed in each stage so far.
    pub stage_images: Vec<u64>,
    /// Images consumed over the whole run; drives the blur schedule.
    pub images_seen: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl TrainState {
    pub fn new(config: &RunConfig, branches: &[FeatureBranch], dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(Error::EmptyDataset);
        }
        let generator = GeneratorState::new(config.generator.clone(), config.stage_level(0))?;
        let level_channels: Vec<Vec<usize>> = branches.iter().map(|b| b.projection.output_channels()).collect();
        let mut d_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DISCRIMINATOR_SEED_TAG);
        let discriminators = DiscriminatorSet::new(&level_channels, &config.discriminator, &mut d_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ LOOP_SEED_TAG);
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            generator,
            discriminators,
            g_opt: Adam::new(),
            d_opt: Adam::new(),
            stage: 0,
            stage_images: vec![0; config.num_stages()],
            images_seen: 0,
            step: 0,
            rng,
            order,
            cursor: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: usize,
    pub objective: Objective,
    pub d_loss: f64,
    pub g_loss: f64,
    pub blur_sigma: f64,
    pub images_seen: u64,
}

pub const CSV_HEADER: &str = "step,stage,objective,d_loss,g_loss,blur_sigma,images_seen";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let objective = match self.objective {
            Objective::Baseline => "baseline",
            Objective::MaskAware => "mask_aware",
        };
        format!(
            "{},{},{},{:e},{:e},{:e},{}",
            self.step, self.stage, objective, self.d_loss, self.g_loss, self.blur_sigma, self.images_seen
        )
    }
}

/// Callbacks invoked by [`Trainer::run`].
pub trait Observer {
    fn on_step(&mut self, trainer: &Trainer, metrics: &StepMetrics) -> Result<()>;
    fn on_stage_end(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {
    fn on_step(&mut self, _: &Trainer, _: &StepMetrics) -> Result<()> {
        Ok(())
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub branches: Vec<FeatureBranch>,
    pub state: TrainState,
    data: Vec<MaskedSample>,
    stage_data: Vec<MaskedSample>,
}

impl Trainer {
    /// Fresh run over `data`, which must be at the top generator resolution.
    pub fn new(config: RunConfig, branches: Vec<FeatureBranch>, data: Vec<MaskedSample>) -> Result<Self> {
        let state = TrainState::new(&config, &branches, data.len())?;
        Self::resume(config, branches, data, state)
    }

    pub fn resume(config: RunConfig, branches: Vec<FeatureBranch>, data: Vec<MaskedSample>, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let top = *config.generator.resolutions.last().expect("validated");
        for s in &data {
            if s.resolution() != top {
                return Err(Error::ResolutionMismatch {
                    expected: top,
                    got: s.resolution(),
                });
            }
        }
        if state.order.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} samples, dataset has {}",
                state.order.len(),
                data.len()
            )));
        }
        let mut t = Self {
            config,
            branches,
            state,
            data,
            stage_data: Vec::new(),
        };
        t.refresh_stage_data()?;
        Ok(t)
    }

    fn refresh_stage_data(&mut self) -> Result<()> {
        let top = self.config.generator.resolutions.len() - 1;
        let levels = top - self.config.stage_level(self.state.stage);
        self.stage_data = self.data.iter().map(|s| s.downsampled(levels)).collect::<Result<_>>()?;
        Ok(())
    }

    pub fn stage_resolution(&self) -> (usize, usize) {
        self.config.generator.resolutions[self.config.stage_level(self.state.stage)]
    }

    /// Dataset at the current stage resolution.
    pub fn stage_data(&self) -> &[MaskedSample] {
        &self.stage_data
    }

    pub fn stage_complete(&self) -> bool {
        self.state.stage_images[self.state.stage] >= self.config.stage_budget(self.state.stage)
    }

    pub fn is_final_stage(&self) -> bool {
        self.state.stage + 1 == self.config.num_stages()
    }

    pub fn blur_sigma(&self) -> f64 {
        let p = &self.config.projector;
        let (h, _) = self.stage_resolution();
        blur_schedule(self.state.images_seen, p.fade_budget, p.sigma_max_288 * h as f64 / 288.0)
    }

    /// Next batch from a shuffled epoch order; reshuffles at epoch end.
    pub fn next_batch(&mut self) -> Vec<MaskedSample> {
        let n = self.config.trainer.batch_size;
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            if self.state.cursor == self.state.order.len() {
                let TrainState { order, rng, .. } = &mut self.state;
                order.shuffle(rng);
                self.state.cursor = 0;
            }
            batch.push(self.stage_data[self.state.order[self.state.cursor]].clone());
            self.state.cursor += 1;
        }
        batch
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[MaskedSample]) -> Result<StepMetrics> {
        let res = self.stage_resolution();
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(bad) = batch.iter().find(|s| s.resolution() != res) {
            return Err(Error::StageMismatch {
                expected: res,
                got: bad.resolution(),
            });
        }
        let tc = &self.config.trainer;
        let (objective, kind, scope) = (tc.objective, tc.loss, tc.generator_scope);
        let n = batch.len();
        let st = &mut self.state;

        let flip_p = tc.flip_probability;
        let batch: Vec<MaskedSample> = batch
            .iter()
            .map(|s| if st.rng.random_bool(flip_p) { s.flipped() } else { s.clone() })
            .collect();
        let z = Tensor::randn(&[n, LATENT_DIM], &mut st.rng);
        let items: Vec<_> = batch.iter().map(|s| (&s.image, &s.mask, &s.pose)).collect();
        let cond = Conditioning::new(&items)?;
        let real = Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let masks: Vec<Mask> = batch.iter().map(|s| s.mask.clone()).collect();
        let p = &self.config.projector;
        let sigma = blur_schedule(st.images_seen, p.fade_budget, p.sigma_max_288 * res.0 as f64 / 288.0);
        let step = st.step;

        // Generator forward once; the discriminator step sees a detached copy.
        let net = st.generator.network();
        let mut gt = Tape::new();
        let zv = gt.constant(z);
        let (fake, _) = net.forward(&mut gt, Bind::trainable(&st.generator.params), zv, &cond);
        let fake_value = gt.value(fake).clone();

        let d_loss = {
            let mut t = Tape::new();
            let realv = t.constant(real);
            let fakev = t.constant(fake_value);
            let real_proj = project_all(&self.branches, &mut t, realv, sigma)?;
            let fake_proj = project_all(&self.branches, &mut t, fakev, sigma)?;
            let real_logits = st.discriminators.forward(&mut t, true, &real_proj, true)?;
            let fake_logits = st.discriminators.forward(&mut t, true, &fake_proj, false)?;
            let loss = match objective {
                Objective::Baseline => loss_d_baseline(&mut t, &real_logits, &fake_logits, kind)?,
                Objective::MaskAware => {
                    let labels = MaskAwareLabels::for_logits(&masks, &t, &fake_logits)?;
                    loss_d_mask_aware(&mut t, &real_logits, &fake_logits, &labels, kind)?
                }
            };
            let value = t.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { step, what: "discriminator loss".into() });
            }
            let grads = t.param_grads(&t.backward(loss));
            st.d_opt.step(&tc.adam, &mut st.discriminators.params, &grads);
            value
        };

        let fake_proj = project_all(&self.branches, &mut gt, fake, sigma)?;
        let fake_logits = st.discriminators.forward(&mut gt, false, &fake_proj, false)?;
        let labels = match objective {
            Objective::MaskAware => Some(MaskAwareLabels::for_logits(&masks, &gt, &fake_logits)?),
            Objective::Baseline => None,
        };
        let g_loss = match loss_g(&mut gt, &fake_logits, labels.as_ref(), objective, scope, kind) {
            Ok(loss) => {
                let value = gt.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite { step, what: "generator loss".into() });
                }
                let grads = gt.param_grads(&gt.backward(loss));
                st.g_opt.step(&tc.adam, &mut st.generator.params, &grads);
                value
            }
            // Nothing to generate in this batch; skip the update.
            Err(Error::AllPatchesKnown) => 0.0,
            Err(e) => return Err(e),
        };

        let ramp = tc.ema_ramp.then_some(EmaRamp { images_per_step: n as u64 });
        st.generator.ema_update(tc.ema_beta, ramp.as_ref());
        st.generator.step_count += n as u64;
        st.images_seen += n as u64;
        st.stage_images[st.stage] += n as u64;
        st.step += 1;

        Ok(StepMetrics {
            step: st.step,
            stage: st.stage,
            objective,
            d_loss,
            g_loss,
            blur_sigma: sigma,
            images_seen: st.images_seen,
        })
    }

    /// Draws the next batch and trains on it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        self.train_step(&batch)
    }

    /// Grows the generator to the next resolution. Discriminators and
    /// optimizer moments carry over; new parameters get fresh moments.
    pub fn advance_stage(&mut self) -> Result<()> {
        if self.is_final_stage() {
            return Err(Error::FinalStage);
        }
        self.state.generator.grow()?;
        self.state.stage += 1;
        self.refresh_stage_data()
    }

    /// Trains until every stage budget is spent, or until `max_steps` total
    /// steps have run.
    pub fn run(&mut self, observer: &mut dyn Observer, max_steps: Option<u64>) -> Result<()> {
        loop {
            while !self.stage_complete() {
                if max_steps.is_some_and(|m| self.state.step >= m) {
                    return Ok(());
                }
                let m = self.step()?;
                observer.on_step(self, &m)?;
            }
            observer.on_stage_end(self)?;
            if self.is_final_stage() {
                return Ok(());
            }
            self.advance_stage()?;
        }
    }
}

fn project_all(branches: &[FeatureBranch], t: &mut Tape, images: Var, sigma: f64) -> Result<Vec<Vec<Var>>> {
    branches.iter().map(|b| b.project(t, images, sigma)).collect()
}

const LIMB_COLORS: [[u8; 3]; 6] = [
    [255, 255, 255],
    [255, 200, 0],
    [0, 200, 255],
    [255, 80, 200],
    [120, 255, 120],
    [255, 120, 60],
];

fn limb_color(class: LimbClass) -> [u8; 3] {
    LIMB_COLORS[class as usize % LIMB_COLORS.len()]
}

/// Rows of `corrupted | pose overlay | output` for each sample, using the
/// given latents and the EMA weights. Pixels are upscaled by `scale`.
pub fn sample_grid(state: &GeneratorState, samples: &[MaskedSample], latents: &[Vec<f64>], scale: u32) -> Result<image::RgbImage> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items: Vec<_> = samples.iter().map(|s| (&s.image, &s.mask, &s.pose)).collect();
    let cond = Conditioning::new(&items)?;
    let z = Tensor::from_vec(&[samples.len(), LATENT_DIM], latents.iter().flatten().copied().collect());
    let out = state.synthesize_ema(&z, &cond)?;
    check_known_pixels(&out, samples)?;
    let (h, w) = samples[0].resolution();
    let (h, w) = (h as u32, w as u32);
    let gap = 1;
    let mut grid = image::RgbImage::from_pixel(3 * w * scale + 2 * gap, samples.len() as u32 * (h * scale + gap) - gap, image::Rgb([40, 40, 40]));
    for (r, s) in samples.iter().enumerate() {
        let corrupted = image_to_png(&s.corrupted());
        let mut overlay = corrupted.clone();
        for (class, a, b) in skeleton_segments(&s.keypoints) {
            let a = (pixel_index(a.0), pixel_index(a.1));
            let b = (pixel_index(b.0), pixel_index(b.1));
            for (x, y) in line_pixels(a, b) {
                if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                    overlay.put_pixel(x as u32, y as u32, image::Rgb(limb_color(class)));
                }
            }
        }
        let output = image_to_png(&out.index0(r));
        for (c, tile) in [corrupted, overlay, output].iter().enumerate() {
            let ox = c as u32 * (w * scale + gap);
            let oy = r as u32 * (h * scale + gap);
            for y in 0..h * scale {
                for x in 0..w * scale {
                    grid.put_pixel(ox + x, oy + y, *tile.get_pixel(x / scale, y / scale));
                }
            }
        }
    }
    Ok(grid)
}

/// Verifies that every known pixel of each output equals its input bit for bit.
pub fn check_known_pixels(outputs: &Tensor, samples: &[MaskedSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let out = outputs.index0(i);
        let (h, w) = s.resolution();
        let corrupted = s.corrupted();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let k = (c * h + y) * w + x;
                    if s.mask.get(y, x) == 1 && out.data()[k].to_bits() != corrupted.data()[k].to_bits() {
                        return Err(Error::KnownPixelViolation(i));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fixed latents for the sample grid rows.
pub fn grid_latents(seed: u64, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|i| sample_latent(seed, i)).collect()
}

/// Writes a sample grid plus a JSON record of its latents.
pub fn write_sample_grid(path: &Path, state: &GeneratorState, samples: &[MaskedSample], latents: &[Vec<f64>]) -> Result<()> {
    let (h, _) = samples.first().ok_or(Error::EmptyDataset)?.resolution();
    let scale = (72 / h.max(1)).max(1) as u32;
    let grid = sample_grid(state, samples, latents, scale)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_png(&grid, path)?;
    fs::write(path.with_extension("latents.json"), serde_json::to_string(latents)?)?;
    Ok(())
}

/// Run directory layout: `config.toml`, `metrics.csv`, `checkpoints/`, `samples/`.
pub struct RunDir {
    pub root: PathBuf,
    csv: File,
}

impl RunDir {
    /// Opens (or creates) a run directory. When resuming from `resume_step`,
    /// CSV rows past that step are dropped so the log stays consistent.
    pub fn open(root: &Path, config: &RunConfig, resume_step: Option<u64>) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("samples"))?;
        fs::write(root.join("config.toml"), config.to_toml())?;
        let csv_path = root.join("metrics.csv");
        let mut rows = vec![CSV_HEADER.to_string()];
        if let (Some(limit), Ok(text)) = (resume_step, fs::read_to_string(&csv_path)) {
            rows.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= limit))
                    .map(str::to_string),
            );
        }
        let mut body = rows.join("\n");
        body.push('\n');
        fs::write(&csv_path, body)?;
        let csv = OpenOptions::new().append(true).open(&csv_path)?;
        Ok(Self { root: root.to_path_buf(), csv })
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn latest_checkpoint(root: &Path) -> PathBuf {
        root.join("checkpoints").join("latest.ckpt")
    }

    fn save_checkpoint(&self, trainer: &Trainer, name: &str) -> Result<String> {
        let id = checkpoint::save(&self.checkpoint_path(name), &trainer.config, &trainer.state)?;
        checkpoint::save(&Self::latest_checkpoint(&self.root), &trainer.config, &trainer.state)?;
        Ok(id)
    }

    fn save_grid(&self, trainer: &Trainer, name: &str) -> Result<()> {
        let count = trainer.config.trainer.sample_count.min(trainer.stage_data().len());
        if count == 0 {
            return Ok(());
        }
        let samples = &trainer.stage_data()[..count];
        let latents = grid_latents(trainer.config.metrics.latent_seed, count);
        write_sample_grid(&self.root.join("samples").join(format!("{name}.png")), &trainer.state.generator, samples, &latents)
    }
}

impl Observer for RunDir {
    fn on_step(&mut self, trainer: &Trainer, m: &StepMetrics) -> Result<()> {
        writeln!(self.csv, "{}", m.csv_row())?;
        let tc = &trainer.config.trainer;
        if tc.checkpoint_every > 0 && m.step % tc.checkpoint_every == 0 {
            self.save_checkpoint(trainer, &format!("step-{:08}", m.step))?;
        }
        if tc.sample_every > 0 && m.step % tc.sample_every == 0 {
            self.save_grid(trainer, &format!("step-{:08}", m.step))?;
        }
        Ok(())
    }

    fn on_stage_end(&mut self, trainer: &Trainer) -> Result<()> {
        self.csv.flush()?;
        let name = format!("stage-{}", trainer.state.stage);
        self.save_checkpoint(trainer, &name)?;
        self.save_grid(trainer, &name)
    }
}
