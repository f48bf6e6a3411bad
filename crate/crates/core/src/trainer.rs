//! Pre-training loop, metrics log and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use spa_diff::{ParamStore, Tape};

use crate::config::TrainConfig;
use crate::error::{Result, SpaError};
use crate::losses::{compute_losses, LossBreakdown, LossTerms, TERM_NAMES};
use crate::model::{sample_pixels, SpaModel};
use crate::optim::{adamw_step, clip_grad_norm, onecycle_lr, AdamW, EmaState, OptimState};
use crate::renderer::render_rays;
use crate::rng::{self, mix};
use crate::scenes::Dataset;
use crate::scenes::SemanticTeacher;

pub const METRICS_HEADER: &str = "step,lr,color,depth,semantic,eikonal,sdf_near,free,total,ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.spac";

/// Identifies the semantic targets a model is trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn of(ds: &Dataset) -> Self {
        TeacherSpec {
            classes: ds.class_count,
            dim: ds.teacher_dim,
            seed: ds.teacher_seed,
        }
    }

    pub fn build(&self) -> SemanticTeacher {
        SemanticTeacher::new(self.classes, self.dim, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    /// Gradient norm of each weighted term, when requested.
    pub term_grad_norms: Option<[f64; 6]>,
    pub grad_norm: f64,
    pub ms: f64,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{:.1}",
            self.step, self.lr, b.color, b.depth, b.semantic, b.eikonal, b.sdf_near, b.free, b.total, self.ms
        )
    }
}

/// Model, optimizer and EMA state. The per-step random stream is derived
/// from `(cfg.seed, step)` alone, so this is the complete training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub teacher: TeacherSpec,
    pub model: SpaModel,
    pub store: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub ema: EmaState<f32>,
    teacher_table: SemanticTeacher,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, teacher: TeacherSpec) -> Result<Self> {
        cfg.validate()?;
        if teacher.dim != cfg.render.semantic_dim {
            return Err(SpaError::Config {
                key: "render.semantic_dim".into(),
                reason: format!("dataset teacher has {} channels", teacher.dim),
            });
        }
        let mut store = ParamStore::new();
        let model = SpaModel::new(&mut store, &cfg.model(), cfg.seed)?;
        let optim = OptimState::new(&store);
        let ema = EmaState::new(&store, cfg.ema_decay);
        Ok(Trainer {
            cfg: cfg.clone(),
            teacher,
            model,
            store,
            optim,
            ema,
            teacher_table: teacher.build(),
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let oc = &self.cfg.onecycle;
        onecycle_lr(step as usize, self.cfg.steps, self.cfg.lr, oc.pct_start, oc.div, oc.final_div)
    }

    /// Scene index used by `step`: a fresh seeded permutation every epoch.
    pub fn scene_for_step(&self, step: u64, n: usize) -> usize {
        let (epoch, pos) = (step / n as u64, (step % n as u64) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(mix(self.cfg.seed, 0x5ce7e), epoch));
        order[pos]
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.cfg.betas[0],
            beta2: self.cfg.betas[1],
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Forward, backward, AdamW and EMA on one multi-view sample.
    pub fn train_step(&mut self, sample: &crate::scenes::MultiViewSample) -> Result<StepReport> {
        let start = Instant::now();
        let step = self.optim.step;
        let seed = mix(self.cfg.seed, step);
        let lr = self.lr_at(step);
        let t = Tape::new();
        let fields = self
            .model
            .fields(&t, &self.store, sample, self.cfg.mask_ratio, mix(seed, 1))?;
        let (rays, batch) = sample_pixels(sample, &self.teacher_table, self.cfg.pixels_per_view, mix(seed, 2))?;
        let out = render_rays(&t, &fields, &rays, &self.cfg.render.sampler(), mix(seed, 3))?
            .ok_or_else(|| SpaError::invalid(format!("no sampled ray hits the bounds of {}", sample.scene_id)))?;
        let terms = compute_losses(&t, &out, &batch, &self.cfg.losses, &self.cfg.toggles)?;
        check_finite(&terms)?;

        let term_grad_norms = if self.cfg.term_grad_norms {
            let mut norms = [0.0; 6];
            for (i, p) in terms.parts.iter().enumerate() {
                if let Some(p) = p {
                    let g = t.backward(*p)?;
                    norms[i] = g.params().map(|(_, x)| x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
                }
            }
            Some(norms)
        } else {
            None
        };

        let grads = t.backward(terms.total)?;
        drop(t);
        self.store.zero_grad();
        self.store.accumulate(&grads);
        drop(grads);
        let grad_norm = clip_grad_norm(&mut self.store, self.cfg.grad_clip);
        let opt = self.optimizer();
        adamw_step(&mut self.store, &mut self.optim, &opt, lr)?;
        self.ema.update(&self.store);
        Ok(StepReport {
            step: self.optim.step,
            lr,
            breakdown: terms.breakdown,
            term_grad_norms,
            grad_norm,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs until `cfg.steps` (or `until`, when smaller) steps are complete,
    /// appending one metrics row per step to `out/metrics.csv` and writing
    /// checkpoints into `out`.
    pub fn fit(
        &mut self,
        ds: &Dataset,
        out: &Path,
        until: Option<u64>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        if ds.samples.is_empty() {
            return Err(SpaError::invalid("empty dataset"));
        }
        if TeacherSpec::of(ds) != self.teacher {
            return Err(SpaError::invalid("dataset semantic teacher differs from the checkpoint"));
        }
        fs::create_dir_all(out).map_err(SpaError::io(out))?;
        let metrics = out.join(METRICS_FILE);
        let mut log = open_metrics(&metrics, self.step() == 0)?;
        let end = until.map_or(self.cfg.steps as u64, |u| u.min(self.cfg.steps as u64));
        let mut reports = Vec::new();
        while self.step() < end {
            let idx = self.scene_for_step(self.step(), ds.samples.len());
            let r = self.train_step(&ds.samples[idx])?;
            writeln!(log, "{}", r.csv_row()).map_err(SpaError::io(&metrics))?;
            on_step(&r);
            let every = self.cfg.checkpoint_every as u64;
            if every > 0 && r.step % every == 0 {
                self.save(&out.join(format!("step{:06}.spac", r.step)))?;
            }
            reports.push(r);
        }
        log.flush().map_err(SpaError::io(&metrics))?;
        self.save(&out.join(FINAL_CHECKPOINT))?;
        Ok(reports)
    }

    /// The EMA weights as a parameter store, for evaluation.
    pub fn ema_store(&self) -> ParamStore<f32> {
        self.ema.store(&self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load(path)
    }

    pub(crate) fn from_parts(
        cfg: TrainConfig,
        teacher: TeacherSpec,
        model: SpaModel,
        store: ParamStore<f32>,
        optim: OptimState<f32>,
        ema: EmaState<f32>,
    ) -> Self {
        Trainer {
            teacher_table: teacher.build(),
            cfg,
            teacher,
            model,
            store,
            optim,
            ema,
        }
    }
}

fn check_finite(terms: &LossTerms) -> Result<()> {
    let b = &terms.breakdown;
    let vals = [b.color, b.depth, b.semantic, b.eikonal, b.sdf_near, b.free];
    for (name, v) in TERM_NAMES.iter().zip(vals) {
        if !v.is_finite() {
            return Err(SpaError::NonFinite { what: format!("{name} loss") });
        }
    }
    if !b.total.is_finite() {
        return Err(SpaError::NonFinite { what: "total loss".into() });
    }
    Ok(())
}

fn open_metrics(path: &PathBuf, fresh: bool) -> Result<File> {
    if fresh || !path.exists() {
        let mut f = File::create(path).map_err(SpaError::io(path))?;
        writeln!(f, "{METRICS_HEADER}").map_err(SpaError::io(path))?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(path).map_err(SpaError::io(path))
    }
}

/// Reads a metrics log back into `(step, lr, breakdown)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64, LossBreakdown)>> {
    let text = fs::read_to_string(path).map_err(SpaError::io(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(SpaError::format(path, "unexpected metrics header"));
    }
    lines
        .map(|l| {
            let f: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SpaError::format(path, e.to_string()))?;
            if f.len() != 10 {
                return Err(SpaError::format(path, "metrics row needs 10 columns"));
            }
            Ok((
                f[0] as u64,
                f[1],
                LossBreakdown {
                    color: f[2],
                    depth: f[3],
                    semantic: f[4],
                    eikonal: f[5],
                    sdf_near: f[6],
                    free: f[7],
                    total: f[8],
                    no_valid_depth: false,
                },
            ))
        })
        .collect()
}
