//! The training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{total_loss_graph, BoundDenoiser, LossBreakdown};
use super::{Checkpoint, PipelineError, TrainConfig};
use crate::autograd::Graph;
use crate::denoiser::DenoiserParams;
use crate::diffusion::NoiseSchedule;
use crate::imaging::{sample_patch_pair, Dataset, PairedSample};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;
use crate::vlg::{Embedder, PromptPair};
use crate::Scalar;

pub const LOSS_LOG_HEADER: &str = "iteration,total,diffusion,vlg,spectral,content";

/// Owns the parameters and optimizer state of one run.
///
/// Denoiser and HFPM weights are updated together: one objective, one Adam
/// step per iteration over both parameter sets.
pub struct Trainer<'e, T: Scalar> {
    config: TrainConfig,
    data: Dataset<T>,
    embedder: &'e dyn Embedder<T>,
    state: Checkpoint<T>,
    schedule: NoiseSchedule<T>,
    text: (Vec<T>, Vec<T>),
    adam_denoiser: Adam,
    adam_hfpm: Adam,
    rng: ChaCha8Rng,
    log: Vec<(u64, LossBreakdown)>,
    dump_dir: PathBuf,
}

fn all_finite<T: Scalar>(tensors: &[Tensor<T>]) -> bool {
    tensors.iter().all(Tensor::all_finite)
}

impl<'e, T: Scalar> Trainer<'e, T> {
    pub fn new(config: TrainConfig, data: Dataset<T>, embedder: &'e dyn Embedder<T>) -> Result<Self, PipelineError> {
        config.validate()?;
        if data.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        for s in &data.samples {
            let (h, w, _) = s.low.dims();
            if h < config.patch_size || w < config.patch_size {
                return Err(PipelineError::Config(format!(
                    "pair {} is {h}x{w}, smaller than patch_size {}",
                    s.identifier, config.patch_size
                )));
            }
        }
        let state = Checkpoint::initial(&config)?;
        let schedule = config.schedule_spec().build()?;
        let text = PromptPair::new(config.prompt_positive.as_str(), config.prompt_negative.as_str())?.resolve(embedder)?;
        let adam = AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        };
        Ok(Self {
            adam_denoiser: Adam::new(&state.denoiser.store, adam),
            adam_hfpm: Adam::new(&state.hfpm.store, adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            data,
            embedder,
            state,
            schedule,
            text,
            log: Vec::new(),
            dump_dir: std::env::temp_dir(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Current weights and iteration count.
    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.state
    }

    pub fn denoiser_mut(&mut self) -> &mut DenoiserParams<T> {
        &mut self.state.denoiser
    }

    pub fn log(&self) -> &[(u64, LossBreakdown)] {
        &self.log
    }

    /// Where diagnostics go if a step produces non-finite values.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = dir.into();
    }

    fn sample_batch(&mut self) -> Result<Vec<PairedSample<T>>, PipelineError> {
        let divisor = 1 << self.config.levels;
        (0..self.config.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..self.data.len());
                Ok(sample_patch_pair(
                    &self.data.samples[i],
                    self.config.patch_size,
                    divisor,
                    self.config.flip,
                    &mut self.rng,
                )?)
            })
            .collect()
    }

    /// One optimization step; returns the loss before the update.
    pub fn step(&mut self) -> Result<LossBreakdown, PipelineError> {
        let batch = self.sample_batch()?;
        let (breakdown, grads_d, grads_h) = {
            let mut g = Graph::new();
            let denoiser = BoundDenoiser {
                params: self.state.denoiser.store.bind(&mut g, true),
                config: self.state.denoiser.config,
                prediction: self.config.prediction,
            };
            let hfpm = self.state.hfpm.store.bind(&mut g, true);
            let lg = total_loss_graph(
                &mut g,
                &batch,
                &denoiser,
                &hfpm,
                &self.config,
                &self.schedule,
                self.embedder,
                &self.text,
                &mut self.rng,
            )?;
            let breakdown = lg.breakdown(&g);
            if !breakdown.is_finite() {
                (breakdown, Vec::new(), Vec::new())
            } else {
                let grads = g.backward(lg.total);
                (breakdown, denoiser.params.gradients(&grads), hfpm.gradients(&grads))
            }
        };
        let iteration = self.state.iteration + 1;
        if !breakdown.is_finite() || !all_finite(&grads_d) || !all_finite(&grads_h) {
            let dump = self.write_dump(iteration, &breakdown, &grads_d, &grads_h);
            return Err(PipelineError::NonFiniteLoss {
                iteration: iteration as usize,
                dump,
            });
        }
        self.adam_denoiser.update(&mut self.state.denoiser.store, &grads_d);
        self.adam_hfpm.update(&mut self.state.hfpm.store, &grads_h);
        self.state.iteration = iteration;
        self.log.push((iteration, breakdown));
        Ok(breakdown)
    }

    fn write_dump(&self, iteration: u64, loss: &LossBreakdown, grads_d: &[Tensor<T>], grads_h: &[Tensor<T>]) -> PathBuf {
        let mut s = String::new();
        writeln!(s, "iteration {iteration}").unwrap();
        writeln!(s, "loss {loss:?}").unwrap();
        let describe = |s: &mut String, label: &str, store: &ParamStore<T>, grads: &[Tensor<T>]| {
            writeln!(s, "[{label}] {}", store.fingerprint()).unwrap();
            for (i, (name, t)) in store.iter().enumerate() {
                let bad = t.data().iter().filter(|v| !v.is_finite()).count();
                let max = t.data().iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs().to_f64().unwrap()));
                let grad = grads.get(i).map_or("-".to_string(), |g| {
                    format!("{} non-finite", g.data().iter().filter(|v| !v.is_finite()).count())
                });
                writeln!(s, "{name} shape={:?} non_finite={bad} max_abs={max:e} grad={grad}", t.shape()).unwrap();
            }
        };
        describe(&mut s, "denoiser", &self.state.denoiser.store, grads_d);
        describe(&mut s, "hfpm", &self.state.hfpm.store, grads_h);
        writeln!(s, "[config]\n{}", self.config.to_text()).unwrap();
        let path = self.dump_dir.join(format!("nonfinite-{iteration:06}.txt"));
        // The error itself carries the diagnosis; a failed write only loses the file.
        let _ = std::fs::create_dir_all(&self.dump_dir).and_then(|_| std::fs::write(&path, s));
        path
    }

    /// CSV of every completed step, with shortest round-trip float formatting.
    pub fn loss_csv(&self) -> String {
        let mut s = format!("{LOSS_LOG_HEADER}\n");
        for (i, b) in &self.log {
            writeln!(s, "{i},{},{},{},{},{}", b.total, b.diffusion, b.vlg, b.spectral, b.content).unwrap();
        }
        s
    }

    /// Trains to `config.iterations`, writing `loss.csv`, a checkpoint every
    /// `checkpoint_every` steps and `final.ckpt` into `out_dir`. Returns the
    /// checkpoint paths in order. `progress` sees every step.
    pub fn run(
        &mut self,
        out_dir: &Path,
        mut progress: impl FnMut(u64, &LossBreakdown),
    ) -> Result<Vec<PathBuf>, PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        self.dump_dir = out_dir.to_path_buf();
        let mut trail = Vec::new();
        while (self.state.iteration as usize) < self.config.iterations {
            let b = self.step()?;
            let it = self.state.iteration;
            progress(it, &b);
            if (it as usize).is_multiple_of(self.config.checkpoint_every) && (it as usize) < self.config.iterations {
                let path = out_dir.join(format!("iter-{it:06}.ckpt"));
                self.state.save(&path)?;
                std::fs::write(out_dir.join("loss.csv"), self.loss_csv())?;
                trail.push(path);
            }
        }
        let path = out_dir.join("final.ckpt");
        self.state.save(&path)?;
        std::fs::write(out_dir.join("loss.csv"), self.loss_csv())?;
        trail.push(path);
        Ok(trail)
    }
}
