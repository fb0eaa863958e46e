//! The optimization loop: forward cascade, per-stage matching, losses,
//! parameter step, memory update, schedule and checkpointing.
//!
//! Everything is deterministic given the seed: data order comes from
//! counter-derived streams (stateless, so resuming from a checkpoint
//! reproduces the uninterrupted run bit for bit), the optimizer is plain
//! AdamW, and the identity memories are updated strictly after the step
//! from detached final-stage features.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::{Config, ReidMatching};
use crate::data::{make_batch, Example, SearchDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{
    total_loss, LossReport, MemoryState, ReIDMemory, ReidLossVars, ReidMemories, StageLossVars,
};
use crate::matching::{drsm_assign, hungarian, match_cost, Assignment, MatchCostWeights, ReidMatch};
use crate::model::PersonSearchModel;
use crate::rng::{counter_rng, STREAM_AUGMENT, STREAM_SHUFFLE};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSRCHKP1";
const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay on flagged entries only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &crate::params::ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| ArrayD::zeros(IxDyn(e.value.shape()))).collect();
        let v = store.iter().map(|(_, e)| ArrayD::zeros(IxDyn(e.value.shape()))).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// One update. `grads` is indexed like the store; missing entries are
    /// treated as zero gradient (their moments still decay).
    pub fn apply(
        &mut self,
        store: &mut crate::params::ParamStore,
        grads: &mut [Option<ArrayD<f64>>],
        lr: f64,
        weight_decay: f64,
        grad_clip: f64,
    ) {
        // global-norm clipping across all gradients
        if grad_clip > 0.0 {
            let norm_sq: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > grad_clip {
                let scale = grad_clip / norm;
                for g in grads.iter_mut().flatten() {
                    *g *= scale;
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<crate::params::ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(IxDyn(store.value(id).shape()));
                    &zero
                }
            };
            let m = &mut self.m[i];
            *m *= self.beta1;
            m.zip_mut_with(g, |mi, &gi| *mi += (1.0 - self.beta1) * gi);
            let v = &mut self.v[i];
            *v *= self.beta2;
            v.zip_mut_with(g, |vi, &gi| *vi += (1.0 - self.beta2) * gi * gi);
            let decay = store.entry(id).decay;
            let p = store.value_mut(id);
            ndarray::Zip::from(&mut *p).and(&self.m[i]).and(&self.v[i]).for_each(
                |pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= lr * mhat / (vhat.sqrt() + self.eps);
                },
            );
            if decay && weight_decay > 0.0 {
                let p = store.value_mut(id);
                *p *= 1.0 - lr * weight_decay;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Trainer {
    pub cfg: Config,
    pub model: PersonSearchModel,
    pub memories: ReidMemories,
    pub opt: AdamW,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(cfg: &Config, n_labeled: usize) -> Result<Trainer> {
        cfg.validate()?;
        let model = PersonSearchModel::new(&cfg.model, cfg.train.seed)?;
        let memories = ReidMemories::new(
            n_labeled,
            cfg.model.reid_dim,
            cfg.train.memory.queue,
            cfg.train.memory.momentum,
            cfg.train.memory.temperature,
        );
        let opt = AdamW::new(&model.store);
        Ok(Trainer { cfg: cfg.clone(), model, memories, opt, iteration: 0 })
    }

    /// One optimization step over a batch of examples. Gradients are the
    /// mean over images; the memories are read during the forward pass and
    /// folded strictly after the parameter update.
    pub fn train_step(&mut self, examples: &[Example], lr: f64) -> Result<LossReport> {
        assert!(!examples.is_empty());
        let store_len = self.model.store.len();
        let mut grad_acc: Vec<Option<ArrayD<f64>>> = (0..store_len).map(|_| None).collect();
        let mut reports = Vec::with_capacity(examples.len());
        let mut updates_plain: Vec<(Array1<f64>, i64)> = Vec::new();
        let mut updates_inter: Vec<(Array1<f64>, i64)> = Vec::new();

        for ex in examples {
            let mut g = Graph::new();
            let (_fmaps, outs) = self.model.forward(&mut g, &ex.image)?;
            let (_, oh, ow) = ex.image.dim();
            let gt_norm: Vec<BBox> = ex
                .gt_boxes
                .iter()
                .map(|b| b.to_normalized(ow as f64, oh as f64))
                .collect::<Result<_>>()?;

            let mut stage_vars = Vec::with_capacity(outs.len());
            let mut assignments = Vec::with_capacity(outs.len());
            for out in &outs {
                let logit_arr = g.value(out.cls_logits);
                let logits: Vec<f64> =
                    (0..out.boxes.len()).map(|n| logit_arr[[n, 0]]).collect();
                let cost_w = MatchCostWeights {
                    cls: self.cfg.train.loss.cls,
                    l1: self.cfg.train.loss.l1,
                    giou: self.cfg.train.loss.giou,
                };
                let cost = match_cost(&logits, &out.boxes, &gt_norm, &cost_w)?;
                let det = hungarian(&cost);
                let assign = self.assign_reid(&out.boxes, &gt_norm, &ex.gt_ids, &det)?;
                stage_vars.push(StageLossVars {
                    cls_logits: out.cls_logits,
                    pred_boxes: out.boxes_norm,
                    reid: out.reid.as_ref().map(|r| ReidLossVars {
                        f_ip: r.f_ip,
                        f_rp: r.f_rp,
                        f_ih: r.f_ih,
                        f_rh: r.f_rh,
                    }),
                });
                assignments.push(assign);
            }

            let (loss_var, report) = total_loss(
                &mut g,
                &stage_vars,
                &assignments,
                &gt_norm,
                &ex.gt_ids,
                &self.memories,
                &self.cfg.train.loss,
            )?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged on image {}: {}",
                    ex.image_id,
                    serde_json::to_string(&report).unwrap_or_default()
                )));
            }
            let grads = g.backward(loss_var);
            for (slot, pg) in grad_acc.iter_mut().zip(g.param_grads(&grads, &self.model.store)) {
                match (slot.as_mut(), pg) {
                    (Some(acc), Some(pg)) => *acc += &pg,
                    (None, Some(pg)) => *slot = Some(pg),
                    _ => {}
                }
            }

            // detached final-stage features of every re-id-labeled proposal
            let last_out = outs.last().unwrap();
            let last_assign = assignments.last().unwrap();
            if let Some(reid) = &last_out.reid {
                let frp = g.value(reid.f_rp).clone();
                let frh = g.value(reid.f_rh).clone();
                for (n, m) in last_assign.reid.iter().enumerate() {
                    let Some(m) = m else { continue };
                    updates_plain.push((unit_row(&frp, n), m.identity));
                    updates_inter.push((unit_row(&frh, n), m.identity));
                }
            }
            reports.push(report);
        }

        let scale = 1.0 / examples.len() as f64;
        for slot in grad_acc.iter_mut().flatten() {
            *slot *= scale;
        }
        let report = LossReport::mean_of(&reports);

        self.opt.apply(
            &mut self.model.store,
            &mut grad_acc,
            lr,
            self.cfg.train.weight_decay,
            self.cfg.train.grad_clip,
        );
        self.model.proposals.project(&mut self.model.store);

        // memory update happens after the step; the forward pass above saw
        // the pre-step state
        self.memories.plain.update(&updates_plain)?;
        self.memories.interaction.update(&updates_inter)?;

        self.iteration += 1;
        Ok(report)
    }

    fn assign_reid(
        &self,
        pred_boxes: &[BBox],
        gt_norm: &[BBox],
        gt_ids: &[i64],
        det: &[(usize, usize)],
    ) -> Result<Assignment> {
        let mut assign = match self.cfg.train.reid_matching {
            ReidMatching::Drsm => {
                drsm_assign(pred_boxes, gt_norm, gt_ids, det, self.cfg.train.theta)?
            }
            ReidMatching::OneToOne => {
                let mut reid: Vec<Option<ReidMatch>> = vec![None; pred_boxes.len()];
                for &(p, t) in det {
                    let ov = crate::geometry::iou(&pred_boxes[p], &gt_norm[t])?;
                    reid[p] = Some(ReidMatch { gt: t, identity: gt_ids[t], iou: ov, weight: 1.0 });
                }
                Assignment { det_match: det.to_vec(), reid }
            }
        };
        if !self.cfg.train.reid_weighting {
            for r in assign.reid.iter_mut().flatten() {
                r.weight = 1.0;
            }
        }
        Ok(assign)
    }
}

/// Forward pass plus loss assembly with no parameter update; detection uses
/// the bipartite match, re-id the one-to-many labels. Used by verification.
pub fn forward_loss_report(
    model: &PersonSearchModel,
    memories: &ReidMemories,
    ex: &Example,
    weights: &crate::losses::LossWeights,
    theta: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let (_fmaps, outs) = model.forward(&mut g, &ex.image)?;
    let (_, oh, ow) = ex.image.dim();
    let gt_norm: Vec<BBox> = ex
        .gt_boxes
        .iter()
        .map(|b| b.to_normalized(ow as f64, oh as f64))
        .collect::<Result<_>>()?;
    let mut stage_vars = Vec::with_capacity(outs.len());
    let mut assignments = Vec::with_capacity(outs.len());
    for out in &outs {
        let logit_arr = g.value(out.cls_logits);
        let logits: Vec<f64> = (0..out.boxes.len()).map(|n| logit_arr[[n, 0]]).collect();
        let cost_w = MatchCostWeights { cls: weights.cls, l1: weights.l1, giou: weights.giou };
        let cost = match_cost(&logits, &out.boxes, &gt_norm, &cost_w)?;
        let det = hungarian(&cost);
        let assign = drsm_assign(&out.boxes, &gt_norm, &ex.gt_ids, &det, theta)?;
        stage_vars.push(StageLossVars {
            cls_logits: out.cls_logits,
            pred_boxes: out.boxes_norm,
            reid: out.reid.as_ref().map(|r| ReidLossVars {
                f_ip: r.f_ip,
                f_rp: r.f_rp,
                f_ih: r.f_ih,
                f_rh: r.f_rh,
            }),
        });
        assignments.push(assign);
    }
    let (_, report) =
        total_loss(&mut g, &stage_vars, &assignments, &gt_norm, &ex.gt_ids, memories, weights)?;
    Ok(report)
}

fn unit_row(mat: &ArrayD<f64>, n: usize) -> Array1<f64> {
    let cols = mat.shape()[1];
    let mut row = Array1::zeros(cols);
    for j in 0..cols {
        row[j] = mat[[n, j]];
    }
    let norm = row.dot(&row).sqrt();
    if norm > 1e-12 {
        row /= norm;
    }
    row
}

// ---------------------------------------------------------------------------
// schedule & fit loop
// ---------------------------------------------------------------------------

/// Step-decay learning rate for an epoch.
pub fn lr_for_epoch(cfg: &Config, epoch: usize) -> f64 {
    let drops = cfg.train.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.train.lr * cfg.train.lr_decay_factor.powi(drops as i32)
}

/// Deterministic permutation of `len` items for an epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = counter_rng(seed, STREAM_SHUFFLE, epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Mirror an example horizontally (image and boxes).
pub fn flip_example(ex: &Example) -> Example {
    let (c, h, w) = ex.image.dim();
    let mut img = ndarray::Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                img[[ci, y, x]] = ex.image[[ci, y, w - 1 - x]];
            }
        }
    }
    let boxes = ex
        .gt_boxes
        .iter()
        .map(|b| {
            BBox::absolute(w as f64 - b.x2, b.y1, w as f64 - b.x1, b.y2)
                .expect("flip preserves validity")
        })
        .collect();
    Example { image: img, gt_boxes: boxes, gt_ids: ex.gt_ids.clone(), image_id: ex.image_id }
}

#[derive(Serialize)]
struct LogRecord<'a> {
    iter: u64,
    lr: f64,
    report: &'a LossReport,
}

/// Total optimizer steps a config implies for a dataset.
pub fn planned_iterations(cfg: &Config, n_train: usize) -> usize {
    let bpe = n_train.div_ceil(cfg.train.batch_size);
    let by_epochs = cfg.train.epochs * bpe;
    if cfg.train.max_iters > 0 {
        by_epochs.min(cfg.train.max_iters)
    } else {
        by_epochs
    }
}

/// Drive a trainer to the planned iteration count. Appends one JSON record
/// per step to `train_log.jsonl` and saves periodic plus final checkpoints
/// when `out_dir` is given. Safe to call on a resumed trainer.
pub fn fit_loop(trainer: &mut Trainer, ds: &SearchDataset, out_dir: Option<&Path>) -> Result<()> {
    let train_idx = ds.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("training needs a non-empty train split".into()));
    }
    let batch = trainer.cfg.train.batch_size;
    let bpe = train_idx.len().div_ceil(batch);
    let total = planned_iterations(&trainer.cfg, train_idx.len()) as u64;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.jsonl"))?,
            ))
        }
        None => None,
    };
    while trainer.iteration < total {
        let it = trainer.iteration as usize;
        let epoch = it / bpe;
        let pos = it % bpe;
        let perm = epoch_permutation(trainer.cfg.train.seed, epoch, train_idx.len());
        let lo = pos * batch;
        let hi = ((pos + 1) * batch).min(train_idx.len());
        let ids: Vec<usize> = perm[lo..hi].iter().map(|&k| train_idx[k]).collect();
        let mut examples = make_batch(ds, &ids, &trainer.cfg.pixel_norm)?;
        if trainer.cfg.train.horizontal_flip {
            let mut rng = counter_rng(trainer.cfg.train.seed, STREAM_AUGMENT, trainer.iteration);
            for ex in examples.iter_mut() {
                if rand::Rng::gen_range(&mut rng, 0.0..1.0) < 0.5 {
                    *ex = flip_example(ex);
                }
            }
        }
        let lr = lr_for_epoch(&trainer.cfg, epoch);
        let report = match trainer.train_step(&examples, lr) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    let _ = fs::write(dir.join("diverged.json"), format!("{e}"));
                }
                return Err(e);
            }
        };
        if let Some(log) = log.as_mut() {
            serde_json::to_writer(&mut *log, &LogRecord { iter: trainer.iteration, lr, report: &report })?;
            writeln!(log)?;
        }
        if let Some(dir) = out_dir {
            let every = trainer.cfg.train.checkpoint_every;
            if every > 0 && trainer.iteration % every as u64 == 0 && trainer.iteration < total {
                save_checkpoint(&dir.join(format!("checkpoint_{:06}.ckpt", trainer.iteration)), trainer)?;
            }
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint_final.ckpt"), trainer)?;
    }
    Ok(())
}

/// Train a fresh model on a dataset.
pub fn fit(ds: &SearchDataset, cfg: &Config, out_dir: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg, ds.num_labeled())?;
    fit_loop(&mut trainer, ds, out_dir)?;
    Ok(trainer)
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

fn write_arr<W: Write>(w: &mut W, a: &ArrayD<f64>) -> Result<()> {
    w.write_all(&(a.ndim() as u32).to_le_bytes())?;
    for &d in a.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_arr<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0f64; len];
    let mut b8 = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("array shape: {e}")))
}

fn write_mem<W: Write>(w: &mut W, s: &MemoryState) -> Result<()> {
    write_arr(w, &s.v.clone().into_dyn())?;
    w.write_all(&(s.v_occupied.len() as u64).to_le_bytes())?;
    w.write_all(&s.v_occupied.iter().map(|&b| b as u8).collect::<Vec<u8>>())?;
    write_arr(w, &s.u.clone().into_dyn())?;
    w.write_all(&(s.u_occupied.len() as u64).to_le_bytes())?;
    w.write_all(&s.u_occupied.iter().map(|&b| b as u8).collect::<Vec<u8>>())?;
    w.write_all(&(s.cursor as u64).to_le_bytes())?;
    w.write_all(&s.momentum.to_le_bytes())?;
    w.write_all(&s.temperature.to_le_bytes())?;
    Ok(())
}

fn read_mem<R: Read>(r: &mut R) -> Result<MemoryState> {
    let to2 = |a: ArrayD<f64>| -> Result<Array2<f64>> {
        a.into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Checkpoint(format!("memory shape: {e}")))
    };
    let v = to2(read_arr(r)?)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut vb = vec![0u8; n];
    r.read_exact(&mut vb)?;
    let u = to2(read_arr(r)?)?;
    r.read_exact(&mut b8)?;
    let m = u64::from_le_bytes(b8) as usize;
    let mut ub = vec![0u8; m];
    r.read_exact(&mut ub)?;
    r.read_exact(&mut b8)?;
    let cursor = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let momentum = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let temperature = f64::from_le_bytes(b8);
    Ok(MemoryState {
        v,
        v_occupied: vb.into_iter().map(|b| b != 0).collect(),
        u,
        u_occupied: ub.into_iter().map(|b| b != 0).collect(),
        cursor,
        momentum,
        temperature,
    })
}

/// Versioned binary checkpoint: header (magic, version, config digest),
/// the effective config as JSON, the iteration counter, every named
/// parameter, optimizer moments, and both memory banks.
pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let digest = t.cfg.digest();
    w.write_all(&(digest.len() as u32).to_le_bytes())?;
    w.write_all(digest.as_bytes())?;
    let cfg_json = serde_json::to_string(&t.cfg)?;
    w.write_all(&(cfg_json.len() as u64).to_le_bytes())?;
    w.write_all(cfg_json.as_bytes())?;
    w.write_all(&t.iteration.to_le_bytes())?;
    w.write_all(&t.opt.step.to_le_bytes())?;
    w.write_all(&(t.model.store.len() as u64).to_le_bytes())?;
    for (_, e) in t.model.store.iter() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        write_arr(&mut w, &e.value)?;
    }
    for m in &t.opt.m {
        write_arr(&mut w, m)?;
    }
    for v in &t.opt.v {
        write_arr(&mut w, v)?;
    }
    write_mem(&mut w, &t.memories.plain.to_state())?;
    write_mem(&mut w, &t.memories.interaction.to_state())?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint and rebuild the trainer, bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b4)?;
    let dlen = u32::from_le_bytes(b4) as usize;
    let mut digest = vec![0u8; dlen];
    r.read_exact(&mut digest)?;
    let digest = String::from_utf8(digest)
        .map_err(|_| Error::Checkpoint("digest is not utf-8".into()))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let clen = u64::from_le_bytes(b8) as usize;
    let mut cfg_json = vec![0u8; clen];
    r.read_exact(&mut cfg_json)?;
    let cfg: Config = serde_json::from_slice(&cfg_json)?;
    if cfg.digest() != digest {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    r.read_exact(&mut b8)?;
    let iteration = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let opt_step = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let n_params = u64::from_le_bytes(b8) as usize;

    let mut names = Vec::with_capacity(n_params);
    let mut values = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        r.read_exact(&mut b4)?;
        let nlen = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        names.push(
            String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?,
        );
        values.push(read_arr(&mut r)?);
    }
    let mut ms = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        ms.push(read_arr(&mut r)?);
    }
    let mut vs = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        vs.push(read_arr(&mut r)?);
    }
    let mem_plain = read_mem(&mut r)?;
    let mem_inter = read_mem(&mut r)?;

    let n_labeled = mem_plain.v.nrows();
    let mut trainer = Trainer::new(&cfg, n_labeled)?;
    if trainer.model.store.len() != n_params {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {n_params}",
            trainer.model.store.len()
        )));
    }
    for (name, value) in names.iter().zip(values) {
        trainer.model.store.set_by_name(name, value)?;
    }
    trainer.opt.step = opt_step;
    trainer.opt.m = ms;
    trainer.opt.v = vs;
    trainer.memories =
        ReidMemories { plain: ReIDMemory::from_state(mem_plain), interaction: ReIDMemory::from_state(mem_inter) };
    trainer.iteration = iteration;
    Ok(trainer)
}
