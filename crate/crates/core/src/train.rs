//! Training loop, inference and split evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Manifest, SliceSet, Split};
use crate::error::{Error, Result};
use crate::losses::loss_on_logits;
use crate::metrics::{evaluate, BinaryMask, Hd95Mode, Report, VolumePair};
use crate::model::Model;
use crate::nn::Session;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Parameters from the best validation epoch.
    pub model: Model,
}

/// Argmax masks from logits `[B, C, H, W]`; a single channel is
/// thresholded at zero.
pub fn logits_to_masks(logits: &Tensor) -> Result<Vec<BinaryMask>> {
    let s = logits.shape();
    (0..s.b())
        .map(|b| {
            let bits = (0..s.plane())
                .map(|i| {
                    let at = |c: usize| logits.data()[(b * s.c() + c) * s.plane() + i];
                    if s.c() == 1 {
                        at(0) > 0.0
                    } else {
                        (1..s.c()).fold(0, |best, c| if at(c) > at(best) { c } else { best }) != 0
                    }
                })
                .collect();
            BinaryMask::new(s.h(), s.w(), bits)
        })
        .collect()
}

/// Eval-mode predicted masks for every item of `set`, in item order.
pub fn predict(model: &Model, set: &SliceSet, batch_size: usize) -> Result<Vec<BinaryMask>> {
    let order: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for batch in set.batches(&order, batch_size)? {
        let mut sess = Session::new(&model.store, false);
        let x = sess.input(batch.images, false)?;
        let y = model.forward(&mut sess, x)?;
        out.extend(logits_to_masks(sess.tape.value(y))?);
    }
    Ok(out)
}

/// Metrics report for a whole split.
pub fn evaluate_set(model: &Model, set: &SliceSet, batch_size: usize, mode: Hd95Mode) -> Result<Report> {
    let preds = predict(model, set, batch_size)?;
    let volumes: Vec<VolumePair> = set
        .volumes()
        .into_iter()
        .map(|(id, idx)| VolumePair {
            volume_id: id,
            slices: idx.iter().map(|&i| (set.items[i].slice_idx, preds[i].clone(), set.items[i].mask.clone())).collect(),
        })
        .collect();
    evaluate(&volumes, mode)
}

/// Resolution check shared by training and evaluation.
pub fn check_resolution(height: usize, width: usize) -> Result<()> {
    if height == 0 || !height.is_multiple_of(16) || !width.is_multiple_of(16) {
        return Err(Error::Config(format!("resolution {height}x{width} is not divisible by 16; pad the data")));
    }
    Ok(())
}

/// One optimisation step on a batch; returns the loss value.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    images: Tensor,
    targets: &[f64],
    phi: &[f64],
    cfg: &RunConfig,
) -> Result<f64> {
    let (grads, bn, loss) = {
        let mut sess = Session::new(&model.store, true);
        let x = sess.input(images, false)?;
        let logits = model.forward(&mut sess, x)?;
        let (node, loss) = loss_on_logits(&mut sess, logits, targets, phi, &cfg.loss)?;
        sess.tape.backward(node);
        (sess.param_grads(), sess.take_bn_updates(), loss)
    };
    opt.step(&mut model.store, &grads)?;
    model.store.apply_bn_updates(&bn);
    Ok(loss)
}

/// Train per `cfg`, writing `config.txt`, `train_log.csv` and `best.ckpt`
/// into the output directory.
pub fn train(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model.num_classes != 2 {
        return Err(Error::Config("training needs num_classes=2".into()));
    }
    let manifest = Manifest::read(&cfg.data_dir.join("manifest.csv"))?;
    let train_set = SliceSet::load(&manifest, Split::Train)?;
    let val_set = SliceSet::load(&manifest, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Manifest("train and val splits must be non-empty".into()));
    }
    check_resolution(train_set.height, train_set.width)?;

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out.join("train_log.csv");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log_file, "epoch,train_loss,val_dsc,wall_seconds").map_err(|e| Error::io(&log_path, e))?;

    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut best: Option<(usize, f64, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let order = train_set.epoch_order(cfg.seed, epoch);
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            let loss = train_step(&mut model, &mut opt, batch.images, &batch.targets, &batch.phi, cfg).map_err(|e| match e {
                Error::NonFinite { op } => Error::Numerical(format!("epoch {epoch}: non-finite value in {op}; aborting")),
                other => other,
            })?;
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_dsc = evaluate_set(&model, &val_set, cfg.batch_size, Hd95Mode::default())?.dataset.dsc;
        let entry = EpochLog { epoch, train_loss: total / seen as f64, val_dsc, wall_seconds: start.elapsed().as_secs_f64() };
        writeln!(log_file, "{},{:.9},{:.9},{:.3}", entry.epoch, entry.train_loss, entry.val_dsc, entry.wall_seconds)
            .map_err(|e| Error::io(&log_path, e))?;
        on_epoch(&entry);
        if best.as_ref().is_none_or(|b| val_dsc > b.1) {
            checkpoint::save(&model, &out.join("best.ckpt"))?;
            best = Some((epoch, val_dsc, model.clone()));
        }
        log.push(entry);
    }
    let (best_epoch, best_val_dsc, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { log, best_epoch, best_val_dsc, model })
}

/// Evaluate a checkpoint on one split and write `metrics_<split>.csv` and
/// `regional_<split>.csv` into `out`.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, split: Split, out: &Path, mode: Hd95Mode) -> Result<Report> {
    let model = checkpoint::load(ckpt)?;
    let manifest = Manifest::read(&data_dir.join("manifest.csv"))?;
    let set = SliceSet::load(&manifest, split)?;
    check_resolution(set.height, set.width)?;
    let report = evaluate_set(&model, &set, 4, mode)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_slice_csv(&out.join(format!("metrics_{split}.csv")))?;
    report.write_regional_csv(&out.join(format!("regional_{split}.csv")))?;
    Ok(report)
}

/// Per-position density scores and neighbour counts of every attention
/// site, for each slice whose ground truth has foreground. Columns:
/// `volume_id,slice_idx,stage,position,row,col,tau,k`. Returns the number
/// of data rows written.
pub fn write_tau_csv(model: &Model, set: &SliceSet, path: &Path) -> Result<usize> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["volume_id", "slice_idx", "stage", "position", "row", "col", "tau", "k"])?;
    let order: Vec<usize> = (0..set.len()).filter(|&i| !set.items[i].mask.is_empty()).collect();
    let mut written = 0;
    for chunk in order.chunks(4) {
        let batch = set.batch(chunk)?;
        let mut sess = Session::new(&model.store, false);
        let x = sess.input(batch.images, false)?;
        let (_, states) = model.forward_with_diagnostics(&mut sess, x, true)?;
        for (b, &item) in chunk.iter().enumerate() {
            let it = &set.items[item];
            for (stage, state) in &states {
                let ts = state.tau.shape();
                for p in 0..ts.plane() {
                    w.write_record([
                        it.patient_id.clone(),
                        it.slice_idx.to_string(),
                        stage.name().to_string(),
                        p.to_string(),
                        (p / ts.w()).to_string(),
                        (p % ts.w()).to_string(),
                        format!("{:.9}", state.tau.data()[b * ts.plane() + p]),
                        state.k[b * ts.plane() + p].to_string(),
                    ])?;
                    written += 1;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(written)
}
