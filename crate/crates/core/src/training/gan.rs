//! The progressive adversarial loop.
//!
//! Each iteration renders one batch of fakes on a tape, scores it with the
//! frozen critic and backpropagates the generator objective (adversarial
//! term plus Eikonal and normal regularizers) into the generator and the
//! opacity sharpness. The critic's objective (with R1 on the reals) is
//! then formed on a second tape from the same fake images. Both players
//! take their gradients at the parameters from the start of the iteration
//! and step together. All randomness is drawn from streams keyed by
//! `(seed, iteration)`, so a resumed run replays the uninterrupted one bit
//! for bit.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Image};
use super::{is_stage_boundary, stage_at, total_iterations, validate_stages, StageSpec};
use crate::autodiff::{round_to_f32, AdamState, Checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{generate_rays, PoseDistribution, Vec3};
use crate::losses::{
    discriminator_loss_taped, eikonal_points, eikonal_taped, generator_loss_taped, normal_taped, perturb, total_loss,
    Discriminator, LossParts, LossWeights,
};
use crate::network::{ColorCode, GeneratorNetwork, NetConfig, ShapeCode};
use crate::render::{render_taped, RenderConfig};
use crate::rng::{derive_key, stream};

pub const CSV_HEADER: &str = "iteration,L_G,L_D,R1,Eikonal,Normal,beta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub net: NetConfig,
    pub stages: Vec<StageSpec>,
    pub loss: LossWeights,
    /// Channels of every critic layer.
    pub disc_channels: usize,
    /// Opacity sharpness at iteration 0; must exceed the first floor.
    pub beta_init: f64,
    /// Checkpoint cadence in iterations (stage ends always checkpoint).
    pub checkpoint_every: u64,
    pub poses: PoseDistribution,
    /// Marching and background settings; sampling fields come from the stage.
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            stages: super::desk_stages(),
            loss: LossWeights::default(),
            disc_channels: 32,
            beta_init: 30.0,
            checkpoint_every: 500,
            poses: PoseDistribution::carla(),
            render: RenderConfig::default(),
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        validate_stages(&self.stages)?;
        self.loss.validate()?;
        self.poses.validate()?;
        if self.disc_channels == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("disc_channels and checkpoint_every must be positive".into()));
        }
        if !(self.beta_init > self.stages[0].beta_floor) {
            return Err(Error::InvalidConfig(format!(
                "beta_init {} must exceed the first beta floor {}",
                self.beta_init, self.stages[0].beta_floor
            )));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub l_g: f64,
    /// Adversarial part only; R1 is its own column.
    pub l_d: f64,
    pub r1: f64,
    pub eikonal: f64,
    pub normal: f64,
    pub beta: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.l_g, self.l_d, self.r1, self.eikonal, self.normal, self.beta
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_d, self.r1, self.eikonal, self.normal, self.beta]
            .iter()
            .all(|v| v.is_finite())
    }
}

const TAG_ITER: u64 = 0x6974_6572;
const TAG_GROW: u64 = 0x6772_6f77;

#[derive(Debug, Clone)]
pub struct GanTrainer {
    cfg: GanConfig,
    generator: GeneratorNetwork,
    disc: Discriminator,
    /// Log of the sharpness above the floor: `beta = floor + exp(b)`.
    b: f64,
    opt_g: AdamState,
    opt_b: AdamState,
    opt_d: AdamState,
    iteration: u64,
    dataset: Dataset,
    images: Vec<Image>,
    images_res: usize,
}

impl GanTrainer {
    pub fn new(cfg: GanConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let generator = GeneratorNetwork::new(cfg.net.clone(), cfg.seed)?;
        let first = &cfg.stages[0];
        let disc = Discriminator::new(first.resolution, cfg.disc_channels, &mut stream(cfg.seed, &[TAG_GROW, 0]))?;
        let b = ((cfg.beta_init - first.beta_floor).ln() as f32) as f64;
        let opt_g = AdamState::new(generator.params().len(), first.lr_g);
        let opt_d = AdamState::new(disc.param_count(), first.lr_d);
        let images = dataset.images(first.resolution)?;
        Ok(Self {
            opt_g,
            opt_b: AdamState::new(1, first.lr_g),
            opt_d,
            images_res: first.resolution,
            images,
            cfg,
            generator,
            disc,
            b,
            iteration: 0,
            dataset,
        })
    }

    /// Restores a trainer from a checkpoint written by [`Self::checkpoint`].
    pub fn from_checkpoint(cfg: GanConfig, dataset: Dataset, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ck.validate()?;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if ck.seed != cfg.seed {
            return Err(bad("checkpoint seed differs from the configured seed"));
        }
        let g_dims: Vec<(u32, u32)> = cfg.net.layer_dims().iter().map(|&(r, c)| (r as u32, c as u32)).collect();
        let ng = g_dims.len();
        if ck.layers.len() < ng + 1 || ck.layers[..ng] != g_dims[..] || ck.layers[ng] != (1, 0) {
            return Err(bad("layer layout does not match the generator configuration"));
        }
        if ck.optimizer.len() != 3 {
            return Err(bad("expected generator, beta and discriminator optimizer groups"));
        }
        let g_len = cfg.net.param_count();
        let generator = GeneratorNetwork::from_params(cfg.net.clone(), ck.params[..g_len].to_vec())?;
        let b = ck.params[g_len];
        // The critic is at the resolution of the last completed iteration.
        let last = ck.iteration.checked_sub(1).and_then(|i| stage_at(&cfg.stages, i)).unwrap_or(0);
        let res = cfg.stages[last].resolution;
        let d_dims: Vec<(usize, usize)> = ck.layers[ng + 1..].iter().map(|&(r, c)| (r as usize, c as usize)).collect();
        let disc = Discriminator::from_layers(res, &d_dims, &ck.params[g_len + 1..])?;
        let [opt_g, opt_b, opt_d]: [AdamState; 3] = ck.optimizer.clone().try_into().expect("three groups");
        if opt_g.len() != g_len || opt_b.len() != 1 || opt_d.len() != disc.param_count() {
            return Err(bad("optimizer state sizes do not match the parameters"));
        }
        let images = dataset.images(res)?;
        Ok(Self {
            cfg,
            generator,
            disc,
            b,
            opt_g,
            opt_b,
            opt_d,
            iteration: ck.iteration,
            dataset,
            images,
            images_res: res,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut layers: Vec<(u32, u32)> = self.generator.layer_dims().iter().map(|&(r, c)| (r as u32, c as u32)).collect();
        layers.push((1, 0));
        layers.extend(self.disc.layer_dims().iter().map(|&(r, c)| (r as u32, c as u32)));
        let mut params = self.generator.params().to_vec();
        params.push(self.b);
        params.extend(self.disc.params());
        Checkpoint {
            layers,
            params,
            optimizer: vec![self.opt_g.clone(), self.opt_b.clone(), self.opt_d.clone()],
            beta: self.beta(),
            seed: self.cfg.seed,
            iteration: self.iteration,
        }
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &GeneratorNetwork {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn total_iterations(&self) -> u64 {
        total_iterations(&self.cfg.stages)
    }

    /// Stage of the next iteration (the last stage once the plan is done).
    pub fn stage_index(&self) -> usize {
        stage_at(&self.cfg.stages, self.iteration).unwrap_or(self.cfg.stages.len() - 1)
    }

    pub fn beta_floor(&self) -> f64 {
        self.cfg.stages[self.stage_index()].beta_floor
    }

    /// Current opacity sharpness.
    pub fn beta(&self) -> f64 {
        self.beta_floor() + self.b.exp()
    }

    /// Render settings of the current stage at the current sharpness.
    pub fn render_config(&self) -> RenderConfig {
        let st = &self.cfg.stages[self.stage_index()];
        RenderConfig {
            strategy: st.strategy,
            n_coarse: st.n_coarse,
            n_fine: st.n_fine,
            delta: st.delta,
            beta: self.beta(),
            ..self.cfg.render.clone()
        }
    }

    /// Moves the critic and the dataset to the resolution of `stage`.
    fn enter_stage(&mut self, stage: usize) -> Result<()> {
        let res = self.cfg.stages[stage].resolution;
        if self.disc.resolution() != res {
            let mut rng = stream(self.cfg.seed, &[TAG_GROW, stage as u64]);
            let (removed, added) = self.disc.grow(res, &mut rng)?;
            let keep = self.opt_d.len() - removed;
            let remap = |v: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; added];
                out.extend_from_slice(&v[removed..]);
                out
            };
            self.opt_d.m = remap(&self.opt_d.m);
            self.opt_d.v = remap(&self.opt_d.v);
            debug_assert_eq!(self.opt_d.len(), added + keep);
        }
        if self.images_res != res {
            self.images = self.dataset.images(res)?;
            self.images_res = res;
        }
        Ok(())
    }

    /// Runs one iteration and returns its log row.
    pub fn step(&mut self) -> Result<LogRow> {
        let it = self.iteration;
        let stage_idx = stage_at(&self.cfg.stages, it)
            .ok_or_else(|| Error::InvalidConfig(format!("iteration {it} is past the end of the stage plan")))?;
        self.enter_stage(stage_idx)?;
        let st = self.cfg.stages[stage_idx].clone();
        let res = st.resolution;
        let batch = st.batch_size;
        let lambda_r1 = self.cfg.loss.lambda_r1 / f64::powi(2.0, stage_idx as i32);
        let mut rng = stream(self.cfg.seed, &[TAG_ITER, it]);
        let (zd, zcd) = (self.cfg.net.z_shape, self.cfg.net.z_color);

        let beta_value = st.beta_floor + self.b.exp();
        let cfg = RenderConfig {
            jitter: true,
            seed: derive_key(self.cfg.seed, &[TAG_ITER, it]),
            ..self.render_config()
        };

        // Generator tape.
        let mut tape = Tape::new();
        let gp = self.generator.register(&mut tape, true);
        let bv = tape.param(Tensor::scalar(self.b));
        let eb = tape.exp(bv);
        let beta = tape.add_scalar(eb, st.beta_floor);
        let dp = self.disc.register(&mut tape, false);
        let mut fakes = Vec::with_capacity(batch);
        let mut eik_terms = Vec::with_capacity(batch);
        let mut normal_terms = Vec::with_capacity(batch);
        let n_eik = (self.cfg.loss.n_eik_points / batch).max(8);
        let n_surf = (self.cfg.loss.n_surf_points / batch).max(1);
        for _ in 0..batch {
            let zs = ShapeCode::sample(zd, &mut rng);
            let zc = ColorCode::sample(zcd, &mut rng);
            let pose = self.cfg.poses.sample(&mut rng);
            let grid = generate_rays(&pose, res, res)?;
            let (near, far) = pose.near_far();
            let img = render_taped(&mut tape, &self.generator, &gp, beta, &grid.rays, near, far, &cfg, &zs, &zc);
            fakes.push(img.rgb);
            let pts = eikonal_points(n_eik, &img.surface_points, &mut rng);
            eik_terms.push(eikonal_taped(&mut tape, &self.generator, &gp, &pts, &zs));
            if st.lambda_normal > 0.0 && !img.surface_points.is_empty() {
                let surf: Vec<Vec3> = (0..n_surf.min(img.surface_points.len()))
                    .map(|_| img.surface_points[rng.random_range(0..img.surface_points.len())])
                    .collect();
                let moved = perturb(&surf, self.cfg.loss.eps_std, &mut rng);
                normal_terms.push(normal_taped(&mut tape, &self.generator, &gp, &surf, &moved, &zs));
            }
        }
        let fake = tape.concat_cols(&fakes);
        let fake_scores = self.disc.forward_taped(&mut tape, &dp, fake, batch);
        let l_g = generator_loss_taped(&mut tape, fake_scores);
        let eik = mean_of(&mut tape, &eik_terms);
        let normal = mean_of(&mut tape, &normal_terms);
        let we = tape.scale(eik, st.lambda_eikonal);
        let wn = tape.scale(normal, st.lambda_normal);
        let g_total = tape.add(l_g, we);
        let g_total = tape.add(g_total, wn);
        let fake_images = tape.value(fake).clone();
        let (l_g_v, eik_v, normal_v) = (tape.scalar(l_g), tape.scalar(eik), tape.scalar(normal));
        let g_grads = tape.backward(g_total);
        let grad_g = self.generator.gather_grads(&gp, &g_grads);
        let grad_b = g_grads.get(bv).data[0];
        drop(tape);

        // Critic tape.
        let mut tape = Tape::new();
        let dp = self.disc.register(&mut tape, true);
        let px = res * res;
        let mut real = vec![0.0; 3 * batch * px];
        for k in 0..batch {
            let img = &self.images[rng.random_range(0..self.images.len())];
            for c in 0..3 {
                for (j, &v) in img.data[c * px..(c + 1) * px].iter().enumerate() {
                    real[c * batch * px + k * px + j] = v as f64;
                }
            }
        }
        let real = tape.constant(Tensor::from_vec(3, batch * px, real));
        let fake = tape.constant(fake_images);
        let (real_scores, r1) = self.disc.r1_taped(&mut tape, &dp, real, batch);
        let fake_scores = self.disc.forward_taped(&mut tape, &dp, fake, batch);
        let l_d = discriminator_loss_taped(&mut tape, real_scores, fake_scores);
        let wr = tape.scale(r1, lambda_r1);
        let d_total = tape.add(l_d, wr);
        let (l_d_v, r1_v) = (tape.scalar(l_d), tape.scalar(r1));
        let grad_d = self.disc.gather_grads(&dp, &tape.backward(d_total));
        drop(tape);

        let parts = LossParts {
            gan_generator: l_g_v,
            gan_discriminator: l_d_v,
            r1: r1_v,
            eikonal: eik_v,
            normal: normal_v,
        };
        let weights = LossWeights {
            lambda_eikonal: st.lambda_eikonal,
            lambda_normal: st.lambda_normal,
            ..self.cfg.loss.clone()
        };
        total_loss(&parts, &weights, lambda_r1, it)?;
        let finite = |g: &[f64]| g.iter().all(|v| v.is_finite());
        if !(finite(&grad_g) && grad_b.is_finite() && finite(&grad_d)) {
            return Err(Error::Diverged {
                iteration: it,
                what: "gradient".into(),
            });
        }

        self.opt_g.lr = st.lr_g;
        self.opt_b.lr = st.lr_g;
        self.opt_d.lr = st.lr_d;
        let params = self.generator.params_mut();
        self.opt_g.step(params, &grad_g);
        round_to_f32(params);
        let mut b = [self.b];
        self.opt_b.step(&mut b, &[grad_b]);
        round_to_f32(&mut b);
        self.b = b[0];
        let mut dparams = self.disc.params();
        self.opt_d.step(&mut dparams, &grad_d);
        round_to_f32(&mut dparams);
        self.disc.set_params(&dparams);
        self.iteration += 1;

        Ok(LogRow {
            iteration: it,
            l_g: l_g_v,
            l_d: l_d_v,
            r1: r1_v,
            eikonal: eik_v,
            normal: normal_v,
            beta: beta_value,
        })
    }

    /// Trains until `until` completed iterations (capped at the plan's
    /// end). With `out_dir`, appends to `losses.csv` (dropping rows at or
    /// past the starting iteration left by an interrupted run) and writes
    /// `checkpoint_NNNNNN.bin` plus `checkpoint.bin` every
    /// `checkpoint_every` iterations, at stage ends and at the end of the
    /// run. On divergence the error is returned and the files from the last
    /// good checkpoint remain.
    pub fn run(&mut self, until: u64, out_dir: Option<&Path>, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        let until = until.min(self.total_iterations());
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(open_log(&dir.join("losses.csv"), self.iteration)?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.iteration < until {
            let row = self.step()?;
            on_row(&row);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            rows.push(row);
            let n = self.iteration;
            let due = n % self.cfg.checkpoint_every == 0 || is_stage_boundary(&self.cfg.stages, n) || n == until;
            if let (true, Some(dir)) = (due, out_dir) {
                if let Some(f) = log.as_mut() {
                    f.flush()?;
                }
                let ck = self.checkpoint();
                ck.save(&dir.join(format!("checkpoint_{n:06}.bin")))?;
                ck.save(&dir.join("checkpoint.bin"))?;
            }
        }
        Ok(rows)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Opens the loss log for appending, keeping only header and rows before
/// iteration `start`.
fn open_log(path: &Path, start: u64) -> Result<File> {
    let mut kept = vec![CSV_HEADER.to_string()];
    if start > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let it: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if it.is_some_and(|i| i < start) {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    for l in &kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::SamplingStrategy;
    use crate::training::DatasetSource;

    fn tiny_config(seed: u64) -> GanConfig {
        let stage = |iterations, resolution, floor| StageSpec {
            iterations,
            resolution,
            batch_size: 2,
            strategy: SamplingStrategy::CoarseAccurate,
            delta: 0.3,
            n_coarse: 6,
            n_fine: 0,
            lr_g: 1e-3,
            lr_d: 1e-3,
            lambda_eikonal: 0.5,
            lambda_normal: 1.0,
            beta_floor: floor,
        };
        GanConfig {
            net: NetConfig::small(),
            stages: vec![stage(3, 8, 20.0), stage(3, 12, 40.0)],
            disc_channels: 4,
            checkpoint_every: 2,
            seed,
            loss: LossWeights {
                n_eik_points: 16,
                n_surf_points: 8,
                ..LossWeights::default()
            },
            ..GanConfig::default()
        }
    }

    fn data() -> Dataset {
        Dataset::Synthetic(DatasetSource {
            size: 6,
            seed: 3,
            ..DatasetSource::default()
        })
    }

    #[test]
    fn run_logs_checkpoints_and_grows() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = GanTrainer::new(tiny_config(5), data()).unwrap();
        let rows = t.run(6, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.is_finite()));
        assert!(rows[3].beta >= 40.0 && rows[2].beta < 40.0 + 20.0);
        assert_eq!(t.discriminator().resolution(), 12);
        let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        for n in [2, 3, 4, 6] {
            assert!(dir.path().join(format!("checkpoint_{n:06}.bin")).exists(), "checkpoint {n}");
        }
        assert!(!dir.path().join("checkpoint_000005.bin").exists());
    }

    #[test]
    fn resume_replays_bit_identically() {
        let cfg = tiny_config(9);
        let mut full = GanTrainer::new(cfg.clone(), data()).unwrap();
        let all = full.run(6, None, |_| {}).unwrap();
        let mut first = GanTrainer::new(cfg.clone(), data()).unwrap();
        first.run(3, None, |_| {}).unwrap();
        // Through the byte format, across the stage boundary.
        let mut buf = Vec::new();
        first.checkpoint().write_to(&mut buf).unwrap();
        let ck = Checkpoint::read_from(&mut &buf[..]).unwrap();
        let mut resumed = GanTrainer::from_checkpoint(cfg, data(), &ck).unwrap();
        let rest = resumed.run(6, None, |_| {}).unwrap();
        assert_eq!(&all[3..], &rest[..]);
        assert_eq!(full.checkpoint(), resumed.checkpoint());
    }

    #[test]
    fn resume_truncates_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let mut t = GanTrainer::new(cfg.clone(), data()).unwrap();
        t.run(5, Some(dir.path()), |_| {}).unwrap();
        let ck = Checkpoint::load(&dir.path().join("checkpoint_000004.bin")).unwrap();
        let mut r = GanTrainer::from_checkpoint(cfg, data(), &ck).unwrap();
        r.run(6, Some(dir.path()), |_| {}).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        let its: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(its, ["0", "1", "2", "3", "4", "5"]);
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny_config(0);
        cfg.beta_init = 10.0;
        assert!(GanTrainer::new(cfg, data()).is_err());
        let empty = Dataset::Synthetic(DatasetSource {
            size: 0,
            ..DatasetSource::default()
        });
        assert!(matches!(GanTrainer::new(tiny_config(0), empty), Err(Error::EmptyDataset)));
        let ck = GanTrainer::new(tiny_config(0), data()).unwrap().checkpoint();
        assert!(GanTrainer::from_checkpoint(tiny_config(1), data(), &ck).is_err());
    }
}
