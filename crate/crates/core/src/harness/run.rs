//! Training, evaluation, inference and embedding dumps.

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{class_dice, mean};
use super::phantom::{gen_phantom, PhantomSpec};
use super::vol3d::{write_atomic, Vol3d};
use crate::error::{Error, Result};
use crate::heads::HeadVariant;
use crate::model::Model;
use crate::nn::ParamGroup;
use crate::optim::{sgd_step, SgdState};
use crate::tensor::{Graph, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Stream of the data generator, kept apart from weight initialisation.
const DATA_STREAM: u64 = 1;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub class: f64,
    pub bce: f64,
    pub dice_loss: f64,
    pub ce: f64,
    /// per foreground class, on the training phantoms before each update
    pub train_dice: Vec<f64>,
    pub lr_cnn: f64,
    pub lr_trans: f64,
}

impl EpochMetrics {
    fn header(classes: usize) -> String {
        let dice: String = (1..=classes).map(|c| format!(",dice_c{c}")).collect();
        format!("epoch,loss,loss_class,loss_bce,loss_dice,loss_ce{dice},dice_mean,lr_cnn,lr_trans")
    }

    fn row(&self) -> String {
        let dice: String = self.train_dice.iter().map(|d| format!(",{d}")).collect();
        format!(
            "{},{},{},{},{},{}{dice},{},{},{}",
            self.epoch,
            self.loss,
            self.class,
            self.bce,
            self.dice_loss,
            self.ce,
            mean(&self.train_dice),
            self.lr_cnn,
            self.lr_trans
        )
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Untrained state at epoch 0.
    pub fn fresh(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::<f32>::new(&config.model, config.train.seed)?;
        let optimizer = SgdState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Checkpoint { config: config.clone(), epoch: 0, rng, model, optimizer })
    }
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains from scratch. With an output directory, writes `config.txt`,
/// `metrics.csv`, a checkpoint every `train.save_every` epochs and
/// `last.ckpt` (always the newest good state).
pub fn train(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_from(Checkpoint::fresh(config)?, out)
}

/// Continues a run; resuming from any saved epoch reproduces the
/// uninterrupted run exactly.
pub fn train_from(mut state: Checkpoint, out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let k = cfg.phantom.classes;
    let mut history = Vec::new();
    let mut csv = format!("{}\n", EpochMetrics::header(k));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
        if state.epoch == 0 {
            state.save(&dir.join(LAST_CHECKPOINT))?;
        }
    }
    let mut last_good = out.map(|d| d.join(LAST_CHECKPOINT));
    let abort = |what: String, last: &Option<PathBuf>| {
        let kept = last.as_ref().map_or("none (no output directory)".to_string(), |p| p.display().to_string());
        Error::Numeric(format!("{what}; training aborted, last good checkpoint: {kept}"))
    };

    let iters = cfg.train.iters_per_epoch;
    for epoch in state.epoch..cfg.train.epochs {
        let started = Instant::now();
        let lr_cnn = cfg.optim.lr(epoch, ParamGroup::Cnn)?;
        let lr_trans = cfg.optim.lr(epoch, ParamGroup::Transformer)?;
        let mut m = EpochMetrics { epoch, loss: 0.0, class: 0.0, bce: 0.0, dice_loss: 0.0, ce: 0.0, train_dice: vec![0.0; k], lr_cnn, lr_trans };
        for it in 0..iters {
            let seed = state.rng.next_u64();
            let (img, lab) = gen_phantom(&cfg.phantom.with_seed(seed))?;
            let labels = lab.as_labels()?;
            let model = &mut state.model;
            let step = (|| -> Result<_> {
                let mut g = Graph::<f32>::new();
                let p = model.params.bind(&mut g, true);
                let x = g.constant(img.to_tensor()?);
                let fwd = model.net.forward(&mut g, &p, x)?;
                let loss = model.net.loss(&mut g, &fwd, labels, cfg.phantom.extent, &cfg.loss)?;
                let total = g.value(loss.total).item() as f64;
                if !total.is_finite() {
                    return Err(Error::Numeric(format!("loss is {total}")));
                }
                let pred = model.net.labels(&g, &fwd)?;
                let grads = g.backward(loss.total)?;
                model.params.zero_grads();
                model.params.accumulate_grads(&p, &grads, 1.0);
                drop(grads);
                sgd_step(&mut model.params, &mut state.optimizer, &cfg.optim, lr_cnn, lr_trans)?;
                Ok((total, loss, pred))
            })();
            let (total, loss, pred) = match step {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => return Err(abort(format!("{msg} at epoch {epoch}, iteration {it}"), &last_good)),
                Err(e) => return Err(e),
            };
            m.loss += total;
            m.class += loss.class;
            m.bce += loss.bce;
            m.dice_loss += loss.dice;
            m.ce += loss.ce;
            for (acc, d) in m.train_dice.iter_mut().zip(class_dice(&pred, labels, k)?) {
                *acc += d;
            }
        }
        let n = iters as f64;
        for v in [&mut m.loss, &mut m.class, &mut m.bce, &mut m.dice_loss, &mut m.ce].into_iter().chain(m.train_dice.iter_mut()) {
            *v /= n;
        }
        state.epoch = epoch + 1;
        log::info!(
            "epoch {epoch}: loss {:.4} train dice {:.3} lr {:.2e}/{:.2e} ({:.1}s)",
            m.loss,
            mean(&m.train_dice),
            lr_cnn,
            lr_trans,
            started.elapsed().as_secs_f64()
        );
        writeln!(csv, "{}", m.row()).unwrap();
        history.push(m);
        if let Some(dir) = out {
            write_atomic(&dir.join(METRICS_FILE), csv.as_bytes())?;
            if state.epoch % cfg.train.save_every == 0 || state.epoch == cfg.train.epochs {
                state.save(&dir.join(checkpoint_name(state.epoch)))?;
                state.save(&dir.join(LAST_CHECKPOINT))?;
                last_good = Some(dir.join(LAST_CHECKPOINT));
            }
        }
    }
    Ok(TrainOutcome { checkpoint: state, history })
}

/// Finest-stage labels; extents that the pyramid cannot halve evenly are
/// zero-padded at the far end and the prediction is cropped back.
pub fn predict_volume(model: &Model<f32>, vol: &Vol3d) -> Result<Vec<u16>> {
    let (c, values) = vol.as_f32()?;
    let pyr = &model.net.config.pyramid;
    if c != pyr.in_channels {
        return Err(Error::Config(format!("volume has {c} channels, the model expects {}", pyr.in_channels)));
    }
    let f = 1usize << (pyr.stages - 1);
    let [d, h, w] = vol.extents;
    let padded = vol.extents.map(|e| e.div_ceil(f) * f);
    let [pd, ph, pw] = padded;
    if padded == vol.extents {
        return model.predict(&vol.to_tensor()?);
    }
    let mut x = vec![0f32; c * pd * ph * pw];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = &values[((ch * d + z) * h + y) * w..][..w];
                x[((ch * pd + z) * ph + y) * pw..][..w].copy_from_slice(src);
            }
        }
    }
    let full = model.predict(&Tensor::new(&[1, c, pd, ph, pw], x)?)?;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            out.extend_from_slice(&full[(z * ph + y) * pw..][..w]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    /// per foreground class
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub classes: usize,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    pub fn per_class(&self) -> Vec<f64> {
        (0..self.classes).map(|c| mean(&self.cases.iter().map(|r| r.dice[c]).collect::<Vec<_>>())).collect()
    }

    /// Mean over cases of each case's mean foreground Dice.
    pub fn mean_foreground(&self) -> f64 {
        mean(&self.cases.iter().map(|r| mean(&r.dice)).collect::<Vec<_>>())
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "case")?;
        for c in 1..=self.classes {
            write!(f, ",dice_c{c}")?;
        }
        writeln!(f, ",dice_mean")?;
        for r in &self.cases {
            write!(f, "{}", r.name)?;
            r.dice.iter().try_for_each(|d| write!(f, ",{d:.4}"))?;
            writeln!(f, ",{:.4}", mean(&r.dice))?;
        }
        write!(f, "mean")?;
        self.per_class().iter().try_for_each(|d| write!(f, ",{d:.4}"))?;
        write!(f, ",{:.4}", self.mean_foreground())
    }
}

pub fn evaluate_cases(model: &Model<f32>, classes: usize, cases: impl IntoIterator<Item = Result<(String, Vol3d, Vol3d)>>) -> Result<EvalReport> {
    let mut out = Vec::new();
    for case in cases {
        let (name, img, lab) = case?;
        if img.extents != lab.extents {
            return Err(Error::Format(format!("{name}: image {:?} and labels {:?} differ in extent", img.extents, lab.extents)));
        }
        let pred = predict_volume(model, &img)?;
        out.push(CaseResult { name, dice: class_dice(&pred, lab.as_labels()?, classes)? });
    }
    if out.is_empty() {
        return Err(Error::Config("no evaluation cases".into()));
    }
    Ok(EvalReport { classes, cases: out })
}

/// Held-out phantoms `eval_seed + i` for `i < eval_cases`.
pub fn evaluate_heldout(model: &Model<f32>, cfg: &RunConfig) -> Result<EvalReport> {
    let t = &cfg.train;
    evaluate_cases(
        model,
        cfg.phantom.classes,
        (0..t.eval_cases as u64).map(|i| {
            let seed = t.eval_seed + i;
            let (img, lab) = gen_phantom(&cfg.phantom.with_seed(seed))?;
            Ok((format!("phantom_{seed}"), img, lab))
        }),
    )
}

/// Writes `spec.count` cases as `case_NNN_image.v3d` / `case_NNN_label.v3d`,
/// case i generated with seed `spec.seed + i`.
pub fn write_phantoms(spec: &PhantomSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for i in 0..spec.count {
        let (img, lab) = gen_phantom(&spec.with_seed(spec.seed + i as u64))?;
        for (kind, v) in [("image", img), ("label", lab)] {
            let p = dir.join(format!("case_{i:03}_{kind}.v3d"));
            v.write(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Every `*_image.v3d` in `dir` paired with its `*_label.v3d`, by name.
pub fn evaluate_dir(ckpt: &Checkpoint, dir: &Path) -> Result<EvalReport> {
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_image.v3d")))
        .collect();
    images.sort();
    let cases = images.into_iter().map(|img| {
        let name = img.file_name().unwrap().to_string_lossy().trim_end_matches("_image.v3d").to_string();
        let lab = img.with_file_name(format!("{name}_label.v3d"));
        Ok((name, Vol3d::read(&img)?, Vol3d::read(&lab)?))
    });
    evaluate_cases(&ckpt.model, ckpt.config.phantom.classes, cases)
}

pub fn infer(ckpt: &Checkpoint, input: &Path, output: &Path) -> Result<Vol3d> {
    let vol = Vol3d::read(input)?;
    let labels = Vol3d::labels(vol.extents, predict_volume(&ckpt.model, &vol)?)?;
    labels.write(output)?;
    Ok(labels)
}

fn write_csv(path: &Path, header: &[String], t: &Tensor<f32>) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    debug_assert_eq!(cols, header.len());
    let mut s = header.join(",");
    s.push('\n');
    for r in 0..rows {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Per stage, `stage{level}_class_embedding.csv` (rows: queries or class
/// channels) and `stage{level}_mask_embedding.csv` (rows × decoder channels).
/// Query-based embeddings depend on the input volume.
pub fn dump_embeddings(model: &Model<f32>, volume: &Vol3d, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(volume.to_tensor()?);
    let out = model.net.forward(&mut g, &p, x)?;
    let k = model.net.config.head.classes;
    let class_header: Vec<String> = if model.net.config.head.variant == HeadVariant::Decoupled {
        (1..=k).map(|c| format!("class{c}")).chain(["no_object".to_string()]).collect()
    } else {
        ["background".to_string()].into_iter().chain((1..=k).map(|c| format!("class{c}"))).collect()
    };
    let mut written = Vec::new();
    for s in &out.stages {
        let cls = g.value(s.output.class_embedding);
        let path = dir.join(format!("stage{}_class_embedding.csv", s.level));
        write_csv(&path, &class_header, cls)?;
        written.push(path);
        let mask = g.value(s.output.mask_embedding);
        let header: Vec<String> = (0..mask.dims2()?.1).map(|c| format!("ch{c}")).collect();
        let path = dir.join(format!("stage{}_mask_embedding.csv", s.level));
        write_csv(&path, &header, mask)?;
        written.push(path);
    }
    Ok(written)
}
