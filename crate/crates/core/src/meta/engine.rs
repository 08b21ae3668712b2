//! The trainer: realizes the inner-loop update, the meta-test evaluation
//! and the combined outer step, plus the epoch loop with logging,
//! checkpoints and resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_episode, AblationMode, Episode, TestModel, TrainerConfig};
use crate::checkpoint::{load_params, save_params};
use crate::dataset::DomainDataset;
use crate::ema::{ema_init, ema_update, TeacherState};
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, lr_schedule, ramp_weight, seg_loss, trans_loss};
use crate::metrics::{evaluate, normalized_batch, MetricsReport};
use crate::nets::{identity_grid, warp_labels_nearest, HallucinatorDesc, ParamSet};
use crate::optim::Adam;
use crate::tensor::{Real, Tape, Tensor, Var};

/// What the trainer sees. The caller assembles these per ablation arm:
/// bounds train on `labeled` alone, adaptation arms additionally get the
/// source-like pool. `val` is scored each epoch against `val_gt`.
#[derive(Debug, Clone)]
pub struct TrainData<F: Real> {
    pub labeled: DomainDataset<F>,
    pub source_like: Option<DomainDataset<F>>,
    pub val: DomainDataset<F>,
    pub val_gt: Vec<Vec<u8>>,
}

impl<F: Real> TrainData<F> {
    fn validate(&self, mode: AblationMode) -> Result<()> {
        if self.labeled.labels.is_none() || self.labeled.is_empty() {
            return Err(Error::Data("training needs a labeled dataset".into()));
        }
        if mode.uses_unlabeled() {
            match &self.source_like {
                Some(sl) if !sl.is_empty() => {}
                _ => {
                    return Err(Error::Data(format!(
                        "mode {} needs a non-empty unlabeled source-like pool",
                        mode.as_str()
                    )))
                }
            }
        }
        if self.val_gt.len() != self.val.len() {
            return Err(Error::Data("validation ground truth count mismatch".into()));
        }
        Ok(())
    }
}

/// Instrumentation counters used to assert exact ablation gating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    /// Transforms produced by the hallucinator (one per batch item).
    pub transforms_built: u64,
    /// Transformation-loss evaluations.
    pub trans_loss_evals: u64,
    /// Consistency-loss evaluations.
    pub con_loss_evals: u64,
    /// Loss evaluations that consumed target-side (source-like) data.
    pub target_side_evals: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub l_seg: f64,
    pub l_trans: f64,
    pub l_con: f64,
    pub lambda: f64,
    pub lr: f64,
    pub val_dice: f64,
}

impl EpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,l_seg,l_trans,l_con,lambda,lr,val_dice"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.l_seg, self.l_trans, self.l_con, self.lambda, self.lr, self.val_dice
        )
    }
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub l_seg: f64,
    pub l_trans: f64,
    pub l_con: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub log: Vec<EpochLog>,
    pub stats: TrainStats,
    pub report_student: MetricsReport,
    pub report_teacher: MetricsReport,
    /// Mean target Dice of the configured test model.
    pub headline_dice: f64,
}

/// Prepared (normalized) tensors for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeData<F: Real> {
    pub episode: Episode,
    pub labeled_images: Tensor<F>,
    pub labeled_labels: Vec<u8>,
    pub train_moving: Tensor<F>,
    pub train_moving_labels: Vec<u8>,
    pub train_fixed: Tensor<F>,
    pub test_moving: Tensor<F>,
    pub test_moving_labels: Vec<u8>,
    pub test_fixed: Tensor<F>,
    pub unlabeled: Tensor<F>,
    pub unlabeled_partner: Tensor<F>,
}

/// Outcome of the first-order inner-loop update.
pub struct InnerOutcome<F: Real> {
    pub adapted_student: ParamSet<F>,
    pub adapted_halluc: ParamSet<F>,
    pub l_meta_train: f64,
    pub l_seg: f64,
    pub l_trans: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MetaTestOutcome {
    pub l_meta_test: f64,
    pub l_seg: f64,
    pub l_trans: f64,
    pub l_con: f64,
}

pub(crate) struct MtGraph {
    pub(crate) loss: Var,
    pub(crate) l_seg: Var,
    pub(crate) l_trans: Option<Var>,
}

pub(crate) struct MteGraph {
    pub(crate) loss: Var,
    pub(crate) l_seg: Var,
    pub(crate) l_trans: Option<Var>,
    pub(crate) l_con: Option<Var>,
}

#[derive(Serialize, Deserialize)]
struct TrainerStateFile {
    epoch: u32,
    seed: u64,
    rng_word_pos: String,
    adam_seg_step: u64,
    adam_hal_step: u64,
    ema_steps: u64,
    mode: String,
}

pub struct Trainer<F: Real> {
    pub cfg: TrainerConfig,
    pub halluc_desc: HallucinatorDesc,
    pub student: ParamSet<F>,
    pub halluc: ParamSet<F>,
    pub teacher: TeacherState<F>,
    pub stats: TrainStats,
    pub epoch: u32,
    data: TrainData<F>,
    opt_seg: Adam<F>,
    opt_hal: Adam<F>,
    rng: ChaCha8Rng,
    log: Vec<EpochLog>,
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: TrainerConfig, data: TrainData<F>) -> Result<Self> {
        cfg.validate()?;
        data.validate(cfg.mode)?;
        let (h, w) = (data.labeled.h, data.labeled.w);
        let mut halluc_desc = HallucinatorDesc::new(h, w);
        halluc_desc.kind = cfg.transform;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student: ParamSet<F> = cfg.unet.init(&mut rng);
        let halluc: ParamSet<F> = halluc_desc.init(&mut rng);
        let teacher = ema_init(&student, cfg.ema_beta);
        let opt_seg = Adam::new(&student);
        let opt_hal = Adam::new(&halluc);
        if cfg.mode.is_episodic() {
            let pool = data.source_like.as_ref().map(|d| d.len()).unwrap_or(0);
            if pool < cfg.meta_train_pairs + cfg.meta_test_pairs {
                return Err(Error::Data(format!(
                    "source-like pool ({pool}) must hold at least meta_train_pairs + \
                     meta_test_pairs ({})",
                    cfg.meta_train_pairs + cfg.meta_test_pairs
                )));
            }
        }
        Ok(Trainer {
            cfg,
            halluc_desc,
            student,
            halluc,
            teacher,
            stats: TrainStats::default(),
            epoch: 0,
            data,
            opt_seg,
            opt_hal,
            rng,
            log: Vec::new(),
        })
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn data(&self) -> &TrainData<F> {
        &self.data
    }

    /// Iterations per epoch: one pass over the unlabeled pool in
    /// episode-sized chunks; arms without an unlabeled pool pace by the
    /// labeled set instead.
    pub fn iterations_per_epoch(&self) -> usize {
        if self.cfg.mode.uses_unlabeled() {
            let pool = self.data.source_like.as_ref().unwrap().len();
            pool.div_ceil(self.cfg.unlabeled_batch)
        } else {
            (self.data.labeled.len().div_ceil(self.cfg.labeled_batch)).max(1)
        }
    }

    /// The epoch's unlabeled-pool partition (shuffled, chunked).
    fn epoch_chunks(&mut self) -> Vec<Vec<usize>> {
        if self.cfg.mode.uses_unlabeled() {
            let pool = self.data.source_like.as_ref().unwrap().len();
            let mut perm: Vec<usize> = (0..pool).collect();
            for i in (1..pool).rev() {
                let j = self.rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            perm.chunks(self.cfg.unlabeled_batch)
                .map(|c| c.to_vec())
                .collect()
        } else {
            vec![Vec::new(); self.iterations_per_epoch()]
        }
    }

    /// Samples an episode and materializes its normalized batches.
    pub fn build_episode_data(&mut self, unlabeled_chunk: &[usize]) -> Result<EpisodeData<F>> {
        let sl = self
            .data
            .source_like
            .as_ref()
            .ok_or_else(|| Error::Data("episodic mode needs the source-like pool".into()))?;
        let episode = sample_episode(
            self.data.labeled.len(),
            sl.len(),
            unlabeled_chunk,
            &self.cfg,
            &mut self.rng,
        )?;
        let labeled = &self.data.labeled;
        let movings_tr = episode.train_movings();
        let movings_te = episode.test_movings();
        let rotated: Vec<usize> = {
            let u = &episode.unlabeled_batch;
            (0..u.len()).map(|i| u[(i + 1) % u.len()]).collect()
        };
        Ok(EpisodeData {
            labeled_images: normalized_batch(labeled, &episode.labeled_batch),
            labeled_labels: labeled.label_batch(&episode.labeled_batch).unwrap(),
            train_moving: normalized_batch(labeled, &movings_tr),
            train_moving_labels: labeled.label_batch(&movings_tr).unwrap(),
            train_fixed: normalized_batch(sl, &episode.train_fixed()),
            test_moving: normalized_batch(labeled, &movings_te),
            test_moving_labels: labeled.label_batch(&movings_te).unwrap(),
            test_fixed: normalized_batch(sl, &episode.test_fixed()),
            unlabeled: normalized_batch(sl, &episode.unlabeled_batch),
            unlabeled_partner: normalized_batch(sl, &rotated),
            episode,
        })
    }

    fn image_hw(&self) -> (usize, usize) {
        (self.data.labeled.h, self.data.labeled.w)
    }

    /// Builds the meta-train objective `L_seg + lambda_trans * L_trans` on
    /// `tape`. The segmentation batch is the labeled slots plus (for
    /// hallucinating modes) the hallucinated samples with co-warped labels;
    /// the gradient of `L_seg` reaches the hallucinator through the warped
    /// images.
    pub(crate) fn build_meta_train(
        &mut self,
        tape: &mut Tape<F>,
        theta: &[Var],
        psi: &[Var],
        ep: &EpisodeData<F>,
        lambda_trans: f64,
    ) -> Result<MtGraph> {
        let (h, w) = self.image_hw();
        if self.cfg.mode.uses_hallucinator() {
            let moving = tape.constant(&ep.train_moving);
            let fixed = tape.constant(&ep.train_fixed);
            let (transform, moved) = self.halluc_desc.forward(tape, psi, moving, fixed)?;
            self.stats.transforms_built += ep.train_moving.shape()[0] as u64;
            let mut l_trans = trans_loss(tape, moved, fixed)?;
            if let Some(field) = transform.dense_field() {
                let sm = tape.smoothness(field)?;
                let sm_w = tape.scale(sm, self.cfg.smooth_weight);
                l_trans = tape.add(l_trans, sm_w)?;
            }
            self.stats.trans_loss_evals += 1;
            self.stats.target_side_evals += 1;

            let aug_n = self.cfg.augmented_batch;
            let grid = transform.to_grid(tape, h, w)?;
            let aug_imgs = tape.slice_b(moved, 0, aug_n)?;
            let grid_aug = tape.slice_b(grid, 0, aug_n)?;
            let aug_labels = warp_labels_nearest(
                &ep.train_moving_labels[..aug_n * h * w],
                tape.value(grid_aug),
                aug_n,
                h,
                w,
            );
            let labeled_imgs = tape.constant(&ep.labeled_images);
            let seg_in = tape.concat_b(labeled_imgs, aug_imgs)?;
            let mut labels = ep.labeled_labels.clone();
            labels.extend_from_slice(&aug_labels);
            let logits = self.cfg.unet.forward(tape, theta, seg_in)?;
            let l_seg = seg_loss(tape, logits, &labels)?;
            let lt_w = tape.scale(l_trans, lambda_trans);
            let loss = tape.add(l_seg, lt_w)?;
            Ok(MtGraph {
                loss,
                l_seg,
                l_trans: Some(l_trans),
            })
        } else {
            let x = tape.constant(&ep.labeled_images);
            let logits = self.cfg.unet.forward(tape, theta, x)?;
            let l_seg = seg_loss(tape, logits, &ep.labeled_labels)?;
            Ok(MtGraph {
                loss: l_seg,
                l_seg,
                l_trans: None,
            })
        }
    }

    /// Builds the meta-test objective
    /// `L_seg + lambda_con * L_con + lambda_trans * L_trans` with the
    /// adapted parameters.
    pub(crate) fn build_meta_test(
        &mut self,
        tape: &mut Tape<F>,
        theta_ad: &[Var],
        psi_ad: &[Var],
        ep: &EpisodeData<F>,
        lambda: f64,
    ) -> Result<MteGraph> {
        let (h, w) = self.image_hw();
        let n_te = ep.test_moving.shape()[0];
        let n_un = ep.unlabeled.shape()[0];

        // hallucinate meta-test pairs (and unlabeled partners for the
        // hallucination-consistent arm)
        let mut l_trans = None;
        let mut test_grid = None;
        let mut aug = None;
        if self.cfg.mode.uses_hallucinator() {
            let moving = tape.constant(&ep.test_moving);
            let fixed = tape.constant(&ep.test_fixed);
            let (transform, moved) = self.halluc_desc.forward(tape, psi_ad, moving, fixed)?;
            self.stats.transforms_built += n_te as u64;
            let mut lt = trans_loss(tape, moved, fixed)?;
            if let Some(field) = transform.dense_field() {
                let sm = tape.smoothness(field)?;
                let sm_w = tape.scale(sm, self.cfg.smooth_weight);
                lt = tape.add(lt, sm_w)?;
            }
            self.stats.trans_loss_evals += 1;
            self.stats.target_side_evals += 1;
            l_trans = Some(lt);
            let grid = transform.to_grid(tape, h, w)?;
            let aug_labels = warp_labels_nearest(
                &ep.test_moving_labels,
                tape.value(grid),
                n_te,
                h,
                w,
            );
            aug = Some((moved, aug_labels));
            test_grid = Some(grid);
        }

        // meta-test segmentation loss on labeled (+ hallucinated) samples
        let l_seg = {
            let labeled = tape.constant(&ep.test_moving);
            let (seg_in, labels) = match aug {
                Some((moved, aug_labels)) => {
                    let joined = tape.concat_b(labeled, moved)?;
                    let mut l = ep.test_moving_labels.clone();
                    l.extend_from_slice(&aug_labels);
                    (joined, l)
                }
                None => (labeled, ep.test_moving_labels.clone()),
            };
            let logits = self.cfg.unet.forward(tape, theta_ad, seg_in)?;
            seg_loss(tape, logits, &labels)?
        };

        // consistency on labeled + unlabeled meta-test samples
        let l_con = if self.cfg.mode.uses_consistency() {
            let mut con_images = ep.test_moving.data().to_vec();
            con_images.extend_from_slice(ep.unlabeled.data());
            let n_con = n_te + n_un;
            let con_images = Tensor::from_vec(vec![n_con, 1, h, w], con_images)?;

            let grid = if self.cfg.mode.hallucination_consistent() {
                // per-sample transforms from the hallucinator: the test
                // pairs reuse theirs, unlabeled items pair cyclically
                let un = tape.constant(&ep.unlabeled);
                let partner = tape.constant(&ep.unlabeled_partner);
                let (t_un, _) = self.halluc_desc.forward(tape, psi_ad, un, partner)?;
                self.stats.transforms_built += n_un as u64;
                let grid_un = t_un.to_grid(tape, h, w)?;
                tape.concat_b(test_grid.expect("test grid exists in full mode"), grid_un)?
            } else {
                identity_grid(tape, n_con, h, w)
            };

            let sigma = self.cfg.noise.sigma;
            let (xi_t, xi_s) = if sigma > 0.0 {
                let shape = vec![n_con, 1, h, w];
                let a = Tensor::randn(shape.clone(), sigma, &mut self.rng);
                let b = Tensor::randn(shape, sigma, &mut self.rng);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            let lc = consistency_loss(
                tape,
                &self.cfg.unet,
                theta_ad,
                &self.teacher.params,
                &con_images,
                grid,
                xi_s.as_ref(),
                xi_t.as_ref(),
            )?;
            self.stats.con_loss_evals += 1;
            self.stats.target_side_evals += 1;
            Some(lc)
        } else {
            None
        };

        let mut loss = l_seg;
        if let Some(lc) = l_con {
            let t = tape.scale(lc, lambda);
            loss = tape.add(loss, t)?;
        }
        if let Some(lt) = l_trans {
            let t = tape.scale(lt, lambda);
            loss = tape.add(loss, t)?;
        }
        Ok(MteGraph {
            loss,
            l_seg,
            l_trans,
            l_con,
        })
    }

    /// First-order inner-loop update: one SGD step at rate `alpha` on the
    /// meta-train objective. Gradients are also left in the original
    /// parameters' grad buffers for the outer update.
    pub fn inner_update(
        &mut self,
        ep: &EpisodeData<F>,
        lambda_trans: f64,
        alpha: f64,
    ) -> Result<InnerOutcome<F>> {
        let mut tape = Tape::new();
        let theta = self.student.leaves(&mut tape);
        let psi = if self.cfg.mode.uses_hallucinator() {
            self.halluc.leaves(&mut tape)
        } else {
            Vec::new()
        };
        let g = self.build_meta_train(&mut tape, &theta, &psi, ep, lambda_trans)?;
        let l_meta_train = tape.scalar_value(g.loss).f64();
        if !l_meta_train.is_finite() {
            return Err(Error::NumericalAbort {
                context: "meta-train loss".into(),
                loss: l_meta_train,
            });
        }
        let l_seg = tape.scalar_value(g.l_seg).f64();
        let l_trans = g.l_trans.map(|v| tape.scalar_value(v).f64()).unwrap_or(0.0);
        let grads = tape.backward(g.loss, false)?;
        self.student.absorb_grads(&tape, &theta, &grads);
        self.halluc.absorb_grads(&tape, &psi, &grads);

        let mut adapted_student = self.student.clone();
        adapted_student.sgd_step(alpha);
        adapted_student.zero_grads();
        let mut adapted_halluc = self.halluc.clone();
        adapted_halluc.sgd_step(alpha);
        adapted_halluc.zero_grads();
        Ok(InnerOutcome {
            adapted_student,
            adapted_halluc,
            l_meta_train,
            l_seg,
            l_trans,
        })
    }

    /// First-order meta-test evaluation with the adapted parameters;
    /// accumulates the meta-test gradients onto the original parameters
    /// (direct parameter reuse).
    pub fn meta_test_eval(
        &mut self,
        adapted_student: &ParamSet<F>,
        adapted_halluc: &ParamSet<F>,
        ep: &EpisodeData<F>,
        lambda: f64,
    ) -> Result<MetaTestOutcome> {
        let mut tape = Tape::new();
        let theta_ad = adapted_student.leaves(&mut tape);
        let psi_ad = if self.cfg.mode.uses_hallucinator() {
            adapted_halluc.leaves(&mut tape)
        } else {
            Vec::new()
        };
        let g = self.build_meta_test(&mut tape, &theta_ad, &psi_ad, ep, lambda)?;
        let out = MetaTestOutcome {
            l_meta_test: tape.scalar_value(g.loss).f64(),
            l_seg: tape.scalar_value(g.l_seg).f64(),
            l_trans: g.l_trans.map(|v| tape.scalar_value(v).f64()).unwrap_or(0.0),
            l_con: g.l_con.map(|v| tape.scalar_value(v).f64()).unwrap_or(0.0),
        };
        if !out.l_meta_test.is_finite() {
            return Err(Error::NumericalAbort {
                context: "meta-test loss".into(),
                loss: out.l_meta_test,
            });
        }
        let grads = tape.backward(g.loss, false)?;
        self.student.absorb_grads(&tape, &theta_ad, &grads);
        self.halluc.absorb_grads(&tape, &psi_ad, &grads);
        Ok(out)
    }

    /// One full meta-iteration: inner update, meta-test, combined Adam step
    /// on the original parameters, then the EMA teacher update.
    pub fn meta_step(&mut self, ep: &EpisodeData<F>, epoch: u32) -> Result<StepLosses> {
        let lambda = ramp_weight(epoch as f64, &self.cfg.schedule);
        let lr = lr_schedule(epoch, &self.cfg.schedule);
        let alpha = self.cfg.schedule.inner_lr;
        self.student.zero_grads();
        self.halluc.zero_grads();

        let losses = if !self.cfg.second_order {
            let inner = self.inner_update(ep, lambda, alpha)?;
            let mte = self.meta_test_eval(
                &inner.adapted_student,
                &inner.adapted_halluc,
                ep,
                lambda,
            )?;
            StepLosses {
                l_seg: inner.l_seg,
                l_trans: inner.l_trans,
                l_con: mte.l_con,
                total: inner.l_meta_train + mte.l_meta_test,
            }
        } else {
            // single differentiable tape through the inner step
            let mut tape = Tape::new();
            let theta = self.student.leaves(&mut tape);
            let psi = if self.cfg.mode.uses_hallucinator() {
                self.halluc.leaves(&mut tape)
            } else {
                Vec::new()
            };
            let mt = self.build_meta_train(&mut tape, &theta, &psi, ep, lambda)?;
            let g1 = tape.backward(mt.loss, true)?;
            let adapt = |tape: &mut Tape<F>, vars: &[Var]| -> Result<Vec<Var>> {
                vars.iter()
                    .map(|&v| match g1.grad(v) {
                        Some(gv) => {
                            let step = tape.scale(gv, alpha);
                            tape.sub(v, step)
                        }
                        None => Ok(v),
                    })
                    .collect()
            };
            let theta_ad = adapt(&mut tape, &theta)?;
            let psi_ad = adapt(&mut tape, &psi)?;
            let mte = self.build_meta_test(&mut tape, &theta_ad, &psi_ad, ep, lambda)?;
            let total = tape.add(mt.loss, mte.loss)?;
            let losses = StepLosses {
                l_seg: tape.scalar_value(mt.l_seg).f64(),
                l_trans: mt
                    .l_trans
                    .map(|v| tape.scalar_value(v).f64())
                    .unwrap_or(0.0),
                l_con: mte.l_con.map(|v| tape.scalar_value(v).f64()).unwrap_or(0.0),
                total: tape.scalar_value(total).f64(),
            };
            let grads = tape.backward(total, false)?;
            self.student.absorb_grads(&tape, &theta, &grads);
            self.halluc.absorb_grads(&tape, &psi, &grads);
            losses
        };

        self.guard(losses.total)?;
        self.opt_seg.step(&mut self.student, lr);
        if self.cfg.mode.uses_hallucinator() {
            self.opt_hal.step(&mut self.halluc, lr);
        }
        ema_update(&mut self.teacher, &self.student)?;
        Ok(StepLosses {
            total: losses.total,
            ..losses
        })
    }

    /// Non-episodic step for the bounds and the plain mean-teacher arm.
    fn plain_step(&mut self, epoch: u32, unlabeled_chunk: &[usize]) -> Result<StepLosses> {
        let lambda = ramp_weight(epoch as f64, &self.cfg.schedule);
        let lr = lr_schedule(epoch, &self.cfg.schedule);
        let (h, w) = self.image_hw();
        self.student.zero_grads();

        let n = self.data.labeled.len();
        let idxs = {
            let count = self.cfg.labeled_batch;
            if n >= count {
                let mut all: Vec<usize> = (0..n).collect();
                for i in 0..count {
                    let j = self.rng.gen_range(i..n);
                    all.swap(i, j);
                }
                all.truncate(count);
                all
            } else {
                (0..count).map(|_| self.rng.gen_range(0..n)).collect()
            }
        };
        let images = normalized_batch(&self.data.labeled, &idxs);
        let labels = self.data.labeled.label_batch(&idxs).unwrap();

        let mut tape = Tape::new();
        let theta = self.student.leaves(&mut tape);
        let x = tape.constant(&images);
        let logits = self.cfg.unet.forward(&mut tape, &theta, x)?;
        let l_seg_v = seg_loss(&mut tape, logits, &labels)?;
        let mut loss = l_seg_v;
        let mut l_con = 0.0;
        if self.cfg.mode == AblationMode::Mt {
            let sl = self.data.source_like.as_ref().unwrap();
            let un = normalized_batch(sl, unlabeled_chunk);
            let mut con = images.data().to_vec();
            con.extend_from_slice(un.data());
            let n_con = idxs.len() + unlabeled_chunk.len();
            let con_images = Tensor::from_vec(vec![n_con, 1, h, w], con)?;
            let grid = identity_grid(&mut tape, n_con, h, w);
            let sigma = self.cfg.noise.sigma;
            let (xi_t, xi_s) = if sigma > 0.0 {
                let shape = vec![n_con, 1, h, w];
                let a = Tensor::randn(shape.clone(), sigma, &mut self.rng);
                let b = Tensor::randn(shape, sigma, &mut self.rng);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            let lc = consistency_loss(
                &mut tape,
                &self.cfg.unet,
                &theta,
                &self.teacher.params,
                &con_images,
                grid,
                xi_s.as_ref(),
                xi_t.as_ref(),
            )?;
            self.stats.con_loss_evals += 1;
            self.stats.target_side_evals += 1;
            l_con = tape.scalar_value(lc).f64();
            let lc_w = tape.scale(lc, lambda);
            loss = tape.add(loss, lc_w)?;
        }
        let losses = StepLosses {
            l_seg: tape.scalar_value(l_seg_v).f64(),
            l_trans: 0.0,
            l_con,
            total: tape.scalar_value(loss).f64(),
        };
        self.guard(losses.total)?;
        let grads = tape.backward(loss, false)?;
        self.student.absorb_grads(&tape, &theta, &grads);
        self.opt_seg.step(&mut self.student, lr);
        ema_update(&mut self.teacher, &self.student)?;
        Ok(losses)
    }

    fn guard(&self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NumericalAbort {
                context: format!("non-finite loss at epoch {}", self.epoch + 1),
                loss,
            });
        }
        if loss > self.cfg.divergence_threshold {
            return Err(Error::NumericalAbort {
                context: format!(
                    "loss exceeded divergence threshold {} at epoch {}",
                    self.cfg.divergence_threshold,
                    self.epoch + 1
                ),
                loss,
            });
        }
        Ok(())
    }

    pub fn params_for(&self, model: TestModel) -> &ParamSet<F> {
        match model {
            TestModel::Student => &self.student,
            TestModel::Teacher => &self.teacher.params,
        }
    }

    pub fn evaluate_on_val(&self, model: TestModel) -> Result<MetricsReport> {
        evaluate(
            &self.cfg.unet,
            self.params_for(model),
            &self.data.val,
            &self.data.val_gt,
        )
    }

    /// Runs the remaining epochs. With an output directory, writes the
    /// per-epoch CSV log, periodic checkpoints and the final reports; on a
    /// numerical abort the last-good checkpoint is retained and a
    /// diagnostics file is written.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<RunArtifacts> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir.join("checkpoints"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
            if self.epoch == 0 {
                let mut f = fs::File::create(dir.join("log.csv"))
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
                writeln!(f, "{}", EpochLog::csv_header())
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
        }
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch + 1;
            let chunks = self.epoch_chunks();
            let mut sums = StepLosses::default();
            let iters = chunks.len();
            for chunk in &chunks {
                let step = if self.cfg.mode.is_episodic() {
                    let ep = self.build_episode_data(chunk)?;
                    self.meta_step(&ep, epoch)
                } else {
                    self.plain_step(epoch, chunk)
                };
                let step = match step {
                    Ok(s) => s,
                    Err(e) => {
                        if let Some(dir) = out_dir {
                            let _ = fs::write(
                                dir.join("diagnostics.txt"),
                                format!("aborted at epoch {epoch}: {e}\n"),
                            );
                        }
                        return Err(e);
                    }
                };
                sums.l_seg += step.l_seg;
                sums.l_trans += step.l_trans;
                sums.l_con += step.l_con;
                sums.total += step.total;
            }
            if !self.student.all_finite() || !self.halluc.all_finite() {
                return Err(Error::NumericalAbort {
                    context: format!("non-finite parameters after epoch {epoch}"),
                    loss: f64::NAN,
                });
            }
            let val = self.evaluate_on_val(self.cfg.test_model)?;
            let entry = EpochLog {
                epoch,
                l_seg: sums.l_seg / iters as f64,
                l_trans: sums.l_trans / iters as f64,
                l_con: sums.l_con / iters as f64,
                lambda: ramp_weight(epoch as f64, &self.cfg.schedule),
                lr: lr_schedule(epoch, &self.cfg.schedule),
                val_dice: val.overall_dice_mean,
            };
            self.log.push(entry);
            self.epoch = epoch;
            if let Some(dir) = out_dir {
                let mut f = fs::OpenOptions::new()
                    .append(true)
                    .open(dir.join("log.csv"))
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
                writeln!(f, "{}", entry.csv_line())
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
                if epoch % self.cfg.checkpoint_every == 0 || epoch == self.cfg.epochs {
                    self.save_checkpoint(&dir.join("checkpoints"))?;
                }
            }
        }
        let report_student = self.evaluate_on_val(TestModel::Student)?;
        let report_teacher = self.evaluate_on_val(TestModel::Teacher)?;
        let headline = match self.cfg.test_model {
            TestModel::Student => report_student.overall_dice_mean,
            TestModel::Teacher => report_teacher.overall_dice_mean,
        };
        if let Some(dir) = out_dir {
            let w = |name: &str, text: String| -> Result<()> {
                fs::write(dir.join(name), text)
                    .map_err(|e| Error::io(dir.display().to_string(), e))
            };
            w("report_student.txt", report_student.to_text())?;
            w("report_student.csv", report_student.to_csv())?;
            w("report_teacher.txt", report_teacher.to_text())?;
            w("report_teacher.csv", report_teacher.to_csv())?;
            w(
                "run_meta.toml",
                format!(
                    "mode = \"{}\"\nseed = {}\nepochs = {}\nheadline_dice = {:.6}\n",
                    self.cfg.mode.as_str(),
                    self.cfg.seed,
                    self.cfg.epochs,
                    headline
                ),
            )?;
        }
        Ok(RunArtifacts {
            log: self.log.clone(),
            stats: self.stats,
            report_student,
            report_teacher,
            headline_dice: headline,
        })
    }

    /// Writes a full training checkpoint under `dir/ep{epoch:04}/`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let cdir = dir.join(format!("ep{:04}", self.epoch));
        fs::create_dir_all(&cdir).map_err(|e| Error::io(cdir.display().to_string(), e))?;
        save_params(&self.student, &cdir.join("segmenter.mhp"))?;
        save_params(&self.halluc, &cdir.join("hallucinator.mhp"))?;
        save_params(&self.teacher.params, &cdir.join("teacher.mhp"))?;
        save_params(&moments_set(&self.student, &self.opt_seg), &cdir.join("adam_seg.mhp"))?;
        save_params(&moments_set(&self.halluc, &self.opt_hal), &cdir.join("adam_hal.mhp"))?;
        let state = TrainerStateFile {
            epoch: self.epoch,
            seed: self.cfg.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            adam_seg_step: self.opt_seg.step_count(),
            adam_hal_step: self.opt_hal.step_count(),
            ema_steps: self.teacher.step_count,
            mode: self.cfg.mode.as_str().to_string(),
        };
        fs::write(
            cdir.join("state.toml"),
            toml::to_string_pretty(&state).expect("state serializes"),
        )
        .map_err(|e| Error::io(cdir.display().to_string(), e))?;
        Ok(())
    }

    /// Restores a trainer from the newest checkpoint under
    /// `run_dir/checkpoints`.
    pub fn resume(cfg: TrainerConfig, data: TrainData<F>, run_dir: &Path) -> Result<Self> {
        let ckroot = run_dir.join("checkpoints");
        let mut newest: Option<(u32, PathBuf)> = None;
        let entries =
            fs::read_dir(&ckroot).map_err(|e| Error::io(ckroot.display().to_string(), e))?;
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().to_string();
            if let Some(num) = name.strip_prefix("ep") {
                if let Ok(ep) = num.parse::<u32>() {
                    if newest.as_ref().map(|(n, _)| ep > *n).unwrap_or(true) {
                        newest = Some((ep, e.path()));
                    }
                }
            }
        }
        let (_, cdir) = newest.ok_or_else(|| Error::Data("no checkpoint found".into()))?;
        let mut t = Trainer::new(cfg, data)?;
        t.student = load_params(&cdir.join("segmenter.mhp"))?;
        t.halluc = load_params(&cdir.join("hallucinator.mhp"))?;
        t.teacher.params = load_params(&cdir.join("teacher.mhp"))?;
        let state: TrainerStateFile = toml::from_str(
            &fs::read_to_string(cdir.join("state.toml"))
                .map_err(|e| Error::io(cdir.display().to_string(), e))?,
        )
        .map_err(|e| Error::Config(format!("bad state file: {e}")))?;
        let (m, v) = split_moments(load_params(&cdir.join("adam_seg.mhp"))?, &t.student)?;
        t.opt_seg.restore(state.adam_seg_step, m, v);
        let (m, v) = split_moments(load_params(&cdir.join("adam_hal.mhp"))?, &t.halluc)?;
        t.opt_hal.restore(state.adam_hal_step, m, v);
        t.teacher.step_count = state.ema_steps;
        t.epoch = state.epoch;
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Config("bad rng position in state file".into()))?;
        t.rng.set_word_pos(pos);
        // the epoch log before the resume point stays in the on-disk CSV
        Ok(t)
    }
}

/// Adam moments packed as a parameter set for checkpointing.
fn moments_set<F: Real>(params: &ParamSet<F>, opt: &Adam<F>) -> ParamSet<F> {
    let (m, v) = opt.moments();
    let mut out = ParamSet::new();
    for (i, (name, t)) in params.iter().enumerate() {
        out.push(
            format!("m.{name}"),
            Tensor::from_vec(t.shape().to_vec(), m[i].clone()).expect("moment shape"),
        );
        out.push(
            format!("v.{name}"),
            Tensor::from_vec(t.shape().to_vec(), v[i].clone()).expect("moment shape"),
        );
    }
    out
}

fn split_moments<F: Real>(
    packed: ParamSet<F>,
    params: &ParamSet<F>,
) -> Result<(Vec<Vec<F>>, Vec<Vec<F>>)> {
    if packed.len() != 2 * params.len() {
        return Err(Error::Data("moment checkpoint layout mismatch".into()));
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        m.push(packed.tensor(2 * i).data().to_vec());
        v.push(packed.tensor(2 * i + 1).data().to_vec());
    }
    Ok((m, v))
}
