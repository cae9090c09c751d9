//! Leave-one-domain-out experiments: component variants, repeated seeds,
//! run directories and accuracy reports.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{leave_one_domain_out, MultiDomainDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, FamlpModel, ModelConfig};
use crate::training::{evaluate, train, LogRow, TrainConfig, TrainObserver, LOG_HEADER};

/// One row of the component grid: frequency filter, low-rank enhancement,
/// momentum teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub lff: bool,
    pub lre: bool,
    pub mus: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        lff: false,
        lre: false,
        mus: false,
    };
    pub const FULL: Variant = Variant {
        lff: true,
        lre: true,
        mus: true,
    };

    /// `baseline`, or the enabled components joined by `+`.
    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.lff, "lff"), (self.lre, "lre"), (self.mus, "mus")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn of(model: &ModelConfig, train: &TrainConfig) -> Variant {
        Variant {
            lff: model.aff_enabled,
            lre: model.lre_active(),
            mus: train.mus_enabled,
        }
    }

    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.aff_enabled = self.lff;
        model.lre_enabled = self.lre;
        train.mus_enabled = self.mus;
    }

    /// Parses an `--ablate` switch (`no-aff`, `no-lre`, `no-mus`) relative
    /// to `self`. `no-aff` gives the plain mixer: no filter, no low-rank
    /// path and no teacher.
    pub fn ablate(&self, switch: &str) -> Result<Variant> {
        let mut v = *self;
        match switch {
            "no-aff" => v = Variant::BASELINE,
            "no-lre" => v.lre = false,
            "no-mus" => v.mus = false,
            other => {
                return Err(Error::Parameter(format!(
                    "unknown ablation `{other}` (expected no-aff, no-lre or no-mus)"
                )))
            }
        }
        Ok(v)
    }
}

/// The six valid on/off combinations; the low-rank path needs the filter.
pub fn ablation_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for lff in [false, true] {
        for lre in [false, true] {
            for mus in [false, true] {
                if lre && !lff {
                    continue;
                }
                out.push(Variant { lff, lre, mus });
            }
        }
    }
    out
}

/// Result of training one variant on one hold-out split with one seed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: String,
    pub held_out: String,
    pub seed: u64,
    pub test_acc: f64,
    pub val_acc: Option<f64>,
    pub model: FamlpModel,
}

/// Accuracy table: one row per method (and seed), one column per held-out
/// domain, plus the column average.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    /// Test accuracy in percent per held-out domain.
    pub accuracy: Vec<f64>,
}

impl ReportRow {
    pub fn average(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }
}

impl Report {
    pub fn from_outcomes(outcomes: &[RunOutcome]) -> Report {
        let mut domains: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        let mut seeds: Vec<u64> = Vec::new();
        for o in outcomes {
            if !domains.contains(&o.held_out) {
                domains.push(o.held_out.clone());
            }
            if !methods.contains(&o.method) {
                methods.push(o.method.clone());
            }
            if !seeds.contains(&o.seed) {
                seeds.push(o.seed);
            }
        }
        let acc = |m: &str, d: &str, s: u64| {
            outcomes
                .iter()
                .find(|o| o.method == m && o.held_out == d && o.seed == s)
                .map(|o| 100.0 * o.test_acc)
        };
        let mut rows = Vec::new();
        for m in &methods {
            let mut per_seed = Vec::new();
            for &s in &seeds {
                let accuracy: Option<Vec<f64>> = domains.iter().map(|d| acc(m, d, s)).collect();
                if let Some(accuracy) = accuracy {
                    per_seed.push(ReportRow {
                        method: m.clone(),
                        seed: Some(s),
                        accuracy,
                    });
                }
            }
            if per_seed.len() > 1 {
                let n = per_seed.len() as f64;
                let mean = (0..domains.len())
                    .map(|i| per_seed.iter().map(|r| r.accuracy[i]).sum::<f64>() / n)
                    .collect();
                per_seed.push(ReportRow {
                    method: m.clone(),
                    seed: None,
                    accuracy: mean,
                });
            }
            rows.extend(per_seed);
        }
        Report { domains, rows }
    }

    /// The seed-averaged row of `method`, or its only row.
    pub fn summary(&self, method: &str) -> Option<&ReportRow> {
        let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.method == method).collect();
        rows.iter().find(|r| r.seed.is_none()).or(rows.first()).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("method,seed,{},avg\n", self.domains.join(","));
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |v| v.to_string());
            let _ = write!(s, "{},{seed}", r.method);
            for a in &r.accuracy {
                let _ = write!(s, ",{a:.2}");
            }
            let _ = writeln!(s, ",{:.2}", r.average());
        }
        s
    }
}

/// Output directory of one command: `config.echo`, `log.csv`, `report.csv`
/// and `ckpt/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<RunDir> {
        let path = path.into();
        let ckpt = path.join("ckpt");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join("ckpt").join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }
}

/// Log writer and periodic checkpointing for one run.
struct RunObserver<'a> {
    log: Option<&'a mut BufWriter<File>>,
    log_path: PathBuf,
    run: String,
    checkpoint_every: usize,
    dir: Option<&'a RunDir>,
}

impl TrainObserver for RunObserver<'_> {
    fn on_step(&mut self, row: &LogRow) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{},{}", row.to_csv(), self.run).map_err(|e| Error::io(&self.log_path, e))?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, epochs_done: usize, model: &FamlpModel) -> Result<()> {
        if let Some(dir) = self.dir {
            if self.checkpoint_every > 0 && epochs_done % self.checkpoint_every == 0 {
                save_checkpoint(dir.checkpoint(&format!("{}-e{epochs_done}.famlp", self.run.replace('/', "-"))), model)?;
            }
        }
        Ok(())
    }
}

/// Trains and evaluates one variant on one split.
pub fn run_single(
    ds: &MultiDomainDataset,
    cfg: &RunConfig,
    variant: Variant,
    held_out: &str,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<RunOutcome> {
    let (mut model_cfg, mut train_cfg) = (cfg.model.clone(), cfg.train.clone());
    variant.apply(&mut model_cfg, &mut train_cfg);
    train_cfg.seed = seed;
    if model_cfg.num_classes != ds.num_classes()
        || model_cfg.channels_in != ds.channels()
        || model_cfg.image_size != ds.image_size()
    {
        return Err(Error::Config {
            key: "model".into(),
            msg: format!(
                "model expects {} classes of {}x{}x{} images, dataset has {} classes of {}x{}x{}",
                model_cfg.num_classes,
                model_cfg.channels_in,
                model_cfg.image_size,
                model_cfg.image_size,
                ds.num_classes(),
                ds.channels(),
                ds.image_size(),
                ds.image_size()
            ),
        });
    }
    let split = leave_one_domain_out(
        ds,
        &SplitSpec {
            held_out_domain: held_out.to_string(),
            train_fraction: cfg.train_fraction,
            seed,
        },
    )?;
    let mut model = FamlpModel::new(model_cfg, seed)?;
    train(&mut model, &split.train, &train_cfg, observer)?;
    let test_acc = evaluate(&model, &split.test)?;
    let val_acc = if split.val.is_empty() {
        None
    } else {
        Some(evaluate(&model, &split.val)?)
    };
    log::info!(
        "{} held out {held_out} seed {seed}: test {:.2}%",
        variant.name(),
        100.0 * test_acc
    );
    Ok(RunOutcome {
        method: variant.name(),
        held_out: held_out.to_string(),
        seed,
        test_acc,
        val_acc,
        model,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: Report,
    pub outcomes: Vec<RunOutcome>,
}

/// Runs every variant × held-out domain × seed sequentially. With a run
/// directory, writes the config echo, the step log, checkpoints and the
/// report into it.
pub fn run_experiment(
    ds: &MultiDomainDataset,
    cfg: &RunConfig,
    variants: &[Variant],
    dir: Option<&RunDir>,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let held_outs = cfg.hold_out.resolve(&ds.domain_names())?;
    let seeds = cfg.effective_seeds();

    let log_path = dir.map(|d| d.file("log.csv")).unwrap_or_default();
    let mut log = match dir {
        Some(d) => {
            d.write("config.echo", &cfg.to_ini())?;
            let f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER},run").map_err(|e| Error::io(&log_path, e))?;
            Some(w)
        }
        None => None,
    };

    let mut outcomes = Vec::new();
    for variant in variants {
        for held_out in &held_outs {
            for &seed in &seeds {
                let run = format!("{}/{held_out}/s{seed}", variant.name());
                let mut observer = RunObserver {
                    log: log.as_mut(),
                    log_path: log_path.clone(),
                    run: run.clone(),
                    checkpoint_every: cfg.train.checkpoint_every,
                    dir,
                };
                let outcome = run_single(ds, cfg, *variant, held_out, seed, &mut observer)?;
                if let Some(d) = dir {
                    save_checkpoint(d.checkpoint(&format!("{}.famlp", run.replace('/', "-"))), &outcome.model)?;
                }
                outcomes.push(outcome);
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&log_path, e))?;
    }
    let report = Report::from_outcomes(&outcomes);
    if let Some(d) = dir {
        d.write("report.csv", &report.to_csv())?;
    }
    Ok(ExperimentResult { report, outcomes })
}

/// Accuracy of a frozen model on each named domain.
pub fn evaluate_domains(model: &FamlpModel, ds: &MultiDomainDataset, domains: &[String]) -> Result<Vec<(String, usize, f64)>> {
    domains
        .iter()
        .map(|d| {
            let samples = ds
                .domain(d)
                .ok_or_else(|| Error::Parameter(format!("unknown domain `{d}`")))?;
            Ok((d.clone(), samples.len(), evaluate(model, samples)?))
        })
        .collect()
}

/// `domain,samples,accuracy` rows (accuracy in percent) and a mean row.
pub fn eval_report_csv(rows: &[(String, usize, f64)]) -> String {
    let mut s = String::from("domain,samples,accuracy\n");
    for (d, n, a) in rows {
        let _ = writeln!(s, "{d},{n},{:.2}", 100.0 * a);
    }
    if !rows.is_empty() {
        let total: usize = rows.iter().map(|r| r.1).sum();
        let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
        let _ = writeln!(s, "avg,{total},{:.2}", 100.0 * mean);
    }
    s
}

/// `runs/<stamp>-<tag>` style directory name under `out`.
pub fn run_dir_name(out: &Path, stamp: &str, tag: &str) -> PathBuf {
    out.join(format!("{stamp}-{tag}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_six_rows_and_respects_dependency() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 6);
        assert!(grid.iter().all(|v| !v.lre || v.lff));
        assert_eq!(grid[0], Variant::BASELINE);
        assert_eq!(*grid.last().unwrap(), Variant::FULL);
    }

    #[test]
    fn names() {
        assert_eq!(Variant::BASELINE.name(), "baseline");
        assert_eq!(Variant::FULL.name(), "lff+lre+mus");
        assert_eq!(Variant::FULL.ablate("no-aff").unwrap(), Variant::BASELINE);
        assert!(Variant::FULL.ablate("no-filter").is_err());
    }
}
