//! Optimization: SGD with step decay, the EMA teacher, temperature-softened
//! distillation and the per-step training routine.

mod augment;

pub use augment::{amplitude_mix, augment_pair, fourier_augment, standard_augment};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_iter, DomainSample};
use crate::error::{Error, Result};
use crate::model::{argmax, decays, FamlpModel};
use crate::rng;
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    /// EMA momentum of the teacher.
    pub eta: f64,
    pub tau_md: f64,
    pub lambda_md: f64,
    pub rampup_epochs: usize,
    /// Upper bound of the amplitude-mixing coefficient.
    pub aug_strength: f64,
    pub seed: u64,
    /// Teacher, Fourier augmentation and distillation on or off.
    pub mus_enabled: bool,
    /// Feed the Fourier-augmented view to the student as well.
    pub augment_student: bool,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            lr_decay_epoch: 40,
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            eta: 0.9995,
            tau_md: 10.0,
            lambda_md: 2.0,
            rampup_epochs: 5,
            aug_strength: 1.0,
            seed: 1,
            mus_enabled: true,
            augment_student: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, msg: &str| Err(Error::Parameter(format!("{k} {msg}")));
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta", "must lie in [0, 1]");
        }
        if !(self.tau_md > 0.0) {
            return bad("tau_md", "must be positive");
        }
        if !(self.lambda_md >= 0.0) {
            return bad("lambda_md", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.aug_strength) {
            return bad("aug_strength", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_epoch", self.lr_decay_epoch.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("eta", self.eta.to_string()),
            ("tau_md", self.tau_md.to_string()),
            ("lambda_md", self.lambda_md.to_string()),
            ("rampup_epochs", self.rampup_epochs.to_string()),
            ("aug_strength", self.aug_strength.to_string()),
            ("seed", self.seed.to_string()),
            ("mus_enabled", self.mus_enabled.to_string()),
            ("augment_student", self.augment_student.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Applies one `key=value` setting. `tau_r` and `lambda_r` are accepted
    /// and ignored: they configure no loss in this model.
    pub fn set(&mut self, key: &str, value: &str, prefix: &str) -> Result<()> {
        let err = |msg: String| Error::Config {
            key: format!("{prefix}{key}"),
            msg,
        };
        let v = value.trim();
        let count = || v.parse::<usize>().map_err(|e| err(format!("expected a count: {e}")));
        let real = || v.parse::<f64>().map_err(|e| err(format!("expected a number: {e}")));
        let flag = || v.parse::<bool>().map_err(|e| err(format!("expected true/false: {e}")));
        match key {
            "epochs" => self.epochs = count()?,
            "batch_size" => self.batch_size = count()?,
            "lr" => self.lr = real()?,
            "lr_decay_epoch" => self.lr_decay_epoch = count()?,
            "lr_decay_factor" => self.lr_decay_factor = real()?,
            "weight_decay" => self.weight_decay = real()?,
            "eta" => self.eta = real()?,
            "tau_md" => self.tau_md = real()?,
            "lambda_md" => self.lambda_md = real()?,
            "rampup_epochs" => self.rampup_epochs = count()?,
            "aug_strength" => self.aug_strength = real()?,
            "seed" => self.seed = v.parse().map_err(|e| err(format!("expected an integer: {e}")))?,
            "mus_enabled" => self.mus_enabled = flag()?,
            "augment_student" => self.augment_student = flag()?,
            "checkpoint_every" => self.checkpoint_every = count()?,
            "tau_r" | "lambda_r" => {
                real()?;
                log::warn!("{prefix}{key} is accepted for compatibility but has no effect");
            }
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }
}

/// `exp(−5·(1 − min(epoch/rampup, 1))²)`; 1 when `rampup_epochs` is 0.
pub fn rampup_weight(epoch: usize, rampup_epochs: usize) -> f64 {
    if rampup_epochs == 0 {
        return 1.0;
    }
    let t = (epoch as f64 / rampup_epochs as f64).min(1.0);
    (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// Step schedule: `lr` before `lr_decay_epoch`, `lr·lr_decay_factor` after.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch >= config.lr_decay_epoch {
        config.lr * config.lr_decay_factor
    } else {
        config.lr
    }
}

/// Plain SGD with L2 weight decay on the parameters selected by [`decays`].
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `w ← w − lr·(∇w + wd·w)`, then clears the gradients.
    pub fn step(&self, model: &mut FamlpModel) {
        let (lr, wd) = (self.lr, self.weight_decay);
        model.visit_parameters_mut(|name, t| {
            let decay = if decays(name) { wd } else { 0.0 };
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { return };
            for (w, gv) in t.data_mut().iter_mut().zip(&g) {
                *w -= lr * (gv + decay * *w);
            }
            t.zero_grad();
        });
    }
}

/// Blends `teacher ← η·teacher + (1−η)·student` over congruent maps.
pub fn ema_blend(teacher: &mut IndexMap<String, Tensor>, student: &IndexMap<String, Tensor>, eta: f64) -> Result<()> {
    check_congruent(teacher.iter().map(|(k, v)| (k.as_str(), v)), student.iter().map(|(k, v)| (k.as_str(), v)))?;
    for (t, s) in teacher.values_mut().zip(student.values()) {
        blend(t, s, eta);
    }
    Ok(())
}

fn blend(t: &mut Tensor, s: &Tensor, eta: f64) {
    // The edge cases are exact by construction rather than by arithmetic.
    if eta == 1.0 {
        return;
    }
    if eta == 0.0 {
        t.data_mut().copy_from_slice(s.data());
        return;
    }
    for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
        *tv = eta * *tv + (1.0 - eta) * sv;
    }
}

fn check_congruent<'a>(
    a: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
    b: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Congruence(format!("{} vs {} parameters", a.len(), b.len())));
    }
    for ((na, ta), (nb, tb)) in a.zip(b) {
        if na != nb {
            return Err(Error::Congruence(format!("`{na}` vs `{nb}`")));
        }
        if ta.shape() != tb.shape() {
            return Err(Error::Congruence(format!(
                "`{na}` has shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    Ok(())
}

/// Exponential moving average of the student's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    model: FamlpModel,
    pub eta: f64,
    pub step: usize,
}

impl TeacherState {
    /// Starts as an exact copy of `student`.
    pub fn new(student: &FamlpModel, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Parameter(format!("eta {eta} outside [0, 1]")));
        }
        let mut model = student.clone();
        model.zero_grad();
        Ok(TeacherState { model, eta, step: 0 })
    }

    pub fn model(&self) -> &FamlpModel {
        &self.model
    }

    pub fn parameters(&self) -> IndexMap<String, Tensor> {
        self.model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// One EMA step toward `student`.
    pub fn ema_update(&mut self, student: &FamlpModel) -> Result<()> {
        let theirs = student.named_parameters();
        {
            let ours = self.model.named_parameters();
            check_congruent(
                ours.iter().map(|(n, t)| (n.as_str(), *t)),
                theirs.iter().map(|(n, t)| (n.as_str(), *t)),
            )?;
        }
        let mut src = theirs.into_iter().map(|(_, t)| t);
        let eta = self.eta;
        self.model.visit_parameters_mut(|_, t| blend(t, src.next().expect("congruent"), eta));
        self.step += 1;
        Ok(())
    }
}

/// Temperature-softened `KL(softmax(s/τ) ‖ softmax(t/τ))`, averaged over the
/// batch. The teacher logits are detached.
pub fn distill_loss(g: &mut Graph, student_logits: Var, teacher_logits: Var, tau: f64) -> Result<Var> {
    if g.shape(student_logits) != g.shape(teacher_logits) {
        return Err(Error::shape(
            "distill_loss",
            g.shape(student_logits),
            g.shape(teacher_logits),
        ));
    }
    let q = g.softmax(student_logits, tau)?;
    let p_log = teacher_log_probs(g.value(teacher_logits), tau)?;
    let p_log = g.constant(p_log);
    g.kl_divergence(p_log, q)
}

/// `ln softmax(t/τ)` taken from the same softmax values as the student side,
/// so identical logits give a divergence of exactly zero. Bins that
/// underflow fall back to the log-sum-exp form.
fn teacher_log_probs(teacher: &Tensor, tau: f64) -> Result<Tensor> {
    let p = softmax_rows(teacher, tau)?;
    let lp = crate::tensor::log_softmax_rows(teacher, tau)?;
    Ok(p.zip_map(&lp, |pv, lv| if pv > 0.0 { pv.ln() } else { lv })?)
}

/// Scalar reference value of [`distill_loss`] on plain tensors.
pub fn distill_loss_value(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let loss = distill_loss(&mut g, s, t, tau)?;
    g.value(loss).item()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_c: f64,
    pub loss_md: f64,
    pub loss_all: f64,
    /// Correct student predictions in the batch.
    pub correct: usize,
}

/// Index of a partner sample for amplitude mixing: uniform over samples of
/// another domain when the batch has any, otherwise uniform over the batch.
fn pick_partner<R: Rng>(batch: &[&DomainSample], i: usize, rng: &mut R) -> usize {
    let others: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].domain != batch[i].domain).collect();
    if others.is_empty() {
        rng.gen_range(0..batch.len())
    } else {
        others[rng.gen_range(0..others.len())]
    }
}

/// One optimizer step on `batch`.
///
/// The student sees a standard augmentation of each sample. With a teacher,
/// the teacher sees the same view with another sample's amplitude spectrum
/// mixed in, and `ℓ_all = ℓ_c + rampup·λ_md·ℓ_md`. After the SGD step the
/// teacher takes one EMA step.
pub fn train_step(
    model: &mut FamlpModel,
    teacher: Option<&mut TeacherState>,
    batch: &[&DomainSample],
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let k = model.config().num_classes;
    if let Some(s) = batch.iter().find(|s| s.label >= k) {
        return Err(Error::Index {
            op: "train_step",
            index: s.label,
            size: k,
        });
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let mut student_views = Vec::with_capacity(batch.len());
    let mut teacher_views = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        if teacher.is_some() {
            let j = pick_partner(batch, i, rng);
            let (s, t) = augment_pair(&sample.image, &batch[j].image, config.aug_strength, rng)?;
            student_views.push(if config.augment_student { t.clone() } else { s });
            teacher_views.push(t);
        } else {
            student_views.push(standard_augment(&sample.image, rng)?);
        }
    }

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let views: Vec<&Tensor> = student_views.iter().collect();
    let logits = bound.forward_batch(&mut g, &views)?;
    let loss_c = g.cross_entropy(logits, &labels)?;

    let (loss_all, loss_md) = match &teacher {
        Some(t) => {
            let views: Vec<&Tensor> = teacher_views.iter().collect();
            let teacher_logits = Tensor::new(
                vec![batch.len(), k],
                t.model().logits_many(&views)?.into_iter().flat_map(Tensor::into_data).collect(),
            )?;
            let teacher_logits = g.constant(teacher_logits);
            let md = distill_loss(&mut g, logits, teacher_logits, config.tau_md)?;
            let w = rampup_weight(epoch, config.rampup_epochs) * config.lambda_md;
            let scaled = g.scale(md, w);
            (g.add(loss_c, scaled)?, g.value(md).item()?)
        }
        None => (loss_c, 0.0),
    };

    let logit_values = g.value(logits).clone();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logit_values.data()[i * k..(i + 1) * k]) == l)
        .count();
    let report = StepReport {
        loss_c: g.value(loss_c).item()?,
        loss_md,
        loss_all: g.value(loss_all).item()?,
        correct,
    };

    g.backward(loss_all)?;
    model.accumulate_grads(&g, &bound)?;
    Sgd {
        lr: lr_at(epoch, config),
        weight_decay: config.weight_decay,
    }
    .step(model);
    if let Some(t) = teacher {
        t.ema_update(model)?;
    }
    Ok(report)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_c: f64,
    pub loss_md: f64,
    pub loss_all: f64,
    /// Running training accuracy over the epoch so far.
    pub acc_train: f64,
    /// Domains present in the batch, sorted and `;`-joined.
    pub domains: String,
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss_c,loss_md,loss_all,acc_train,domains";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:.9e},{:.9e},{:.9e},{:.6},{}",
            self.epoch, self.step, self.lr, self.loss_c, self.loss_md, self.loss_all, self.acc_train, self.domains
        )
    }
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the 1-based count of finished epochs.
    fn on_epoch(&mut self, _epochs_done: usize, _model: &FamlpModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_loss: f64,
    pub teacher: Option<TeacherState>,
}

/// Runs `config.epochs` epochs of shuffled mini-batch training.
pub fn train(
    model: &mut FamlpModel,
    samples: &[DomainSample],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("no training samples".into()));
    }
    let mut teacher = if config.mus_enabled {
        Some(TeacherState::new(model, config.eta)?)
    } else {
        None
    };
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let (mut seen, mut correct) = (0usize, 0usize);
        for (b, indices) in batch_iter(samples.len(), config.batch_size, config.seed, epoch).enumerate() {
            let batch: Vec<&DomainSample> = indices.iter().map(|&i| &samples[i]).collect();
            let mut rng = rng::stream(config.seed, &[0xa06, epoch as u64, b as u64]);
            let report = train_step(model, teacher.as_mut(), &batch, config, epoch, &mut rng)?;
            seen += batch.len();
            correct += report.correct;
            final_loss = report.loss_all;
            let mut domains: Vec<&str> = batch.iter().map(|s| s.domain.as_str()).collect();
            domains.sort_unstable();
            domains.dedup();
            observer.on_step(&LogRow {
                epoch,
                step,
                lr: lr_at(epoch, config),
                loss_c: report.loss_c,
                loss_md: report.loss_md,
                loss_all: report.loss_all,
                acc_train: correct as f64 / seen as f64,
                domains: domains.join(";"),
            })?;
            step += 1;
        }
        log::debug!("epoch {epoch}: loss {final_loss:.4}, train acc {:.3}", correct as f64 / seen as f64);
        observer.on_epoch(epoch + 1, model)?;
    }
    Ok(TrainOutcome {
        steps: step,
        final_loss,
        teacher,
    })
}

/// Fraction of `samples` the model classifies correctly.
pub fn evaluate(model: &FamlpModel, samples: &[DomainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("no samples to evaluate".into()));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let logits = model.logits_many(&images)?;
    let correct = logits
        .iter()
        .zip(samples)
        .filter(|(l, s)| argmax(l.data()) == s.label)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}
