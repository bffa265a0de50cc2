//! Command implementations behind the `quad` binary. Each command takes a
//! serializable config; its SHA-256 digest is echoed in every report.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    aggregate_topk, naive_mean, oracle_level, RankingKind, RankingStrategy, TopK,
};
use crate::calibration::{fit, fuse_corrected, loo_fit, CalibrationModel, FitConfig, FusedScore};
use crate::error::{Error, Result};
use crate::io::{ingest, write_dataset, write_text, IngestOptions, IngestReport};
use crate::metrics::{evaluate, evaluate_scores, EvalReport, EvalRow, Evaluation};
use crate::sim::{simulate_dataset, subsample_availability, SimConfig};
use crate::types::{validate_dataset, Dataset, Label, QuerySet, Violation};

pub const RUN_SCHEMA_VERSION: &str = "quad-run/1";

/// Hex SHA-256 of the JSON form of a resolved config.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn check_fraction(split: f64) -> Result<()> {
    if split > 0.0 && split < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "split fraction must be in (0, 1), got {split}"
        )))
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{} does not exist", path.display())))
    }
}

/// Seeded source-level partition, stratified by label. Returns
/// `(dev, eval)` source ids; unlabeled sources always go to eval.
pub fn split_sources(
    ds: &Dataset,
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    check_fraction(dev_fraction)?;
    let mut dev = Vec::new();
    for label in [Label::Real, Label::Fake] {
        let mut ids: Vec<&str> = ds
            .sets
            .iter()
            .filter(|s| s.label == Some(label))
            .map(|s| s.source_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut crate::rng::stream(seed, &format!("split/{label}")));
        let n_dev = (dev_fraction * ids.len() as f64).round() as usize;
        dev.extend(ids[..n_dev].iter().map(|s| s.to_string()));
    }
    let eval = ds
        .source_ids()
        .filter(|id| !dev.iter().any(|d| d == id))
        .map(str::to_string)
        .collect();
    let dev = ds
        .source_ids()
        .filter(|id| dev.iter().any(|d| d == id))
        .map(str::to_string)
        .collect();
    Ok((dev, eval))
}

fn load(path: &Path, opts: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    require_file(path)?;
    let (ds, report) = ingest(path, opts)?;
    let violations = validate_dataset(&ds);
    if let Some(v) = violations.first() {
        return Err(Error::invalid(format!(
            "{} has {} schema violation(s), first: {v}",
            path.display(),
            violations.len()
        )));
    }
    Ok((ds, report))
}

fn load_model(path: &Path) -> Result<CalibrationModel> {
    require_file(path)?;
    CalibrationModel::from_json(&crate::io::read_text(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Csv,
    Json,
}

impl DataFormat {
    fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub schema_version: String,
    pub sim: SimConfig,
    pub out_dir: PathBuf,
    pub format: DataFormat,
    pub manifests: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub sources: usize,
    pub instances: usize,
    pub dataset_path: PathBuf,
    pub manifest_dir: Option<PathBuf>,
    pub config_digest: String,
}

/// Writes `dataset.{csv,json}`, `config.json` and, optionally, one tree
/// manifest per source under `manifests/`.
pub fn cmd_simulate(cfg: &SimulateConfig) -> Result<SimulateSummary> {
    let sim = simulate_dataset(&cfg.sim)?;
    let dataset_path = cfg
        .out_dir
        .join(format!("dataset.{}", cfg.format.extension()));
    write_dataset(&dataset_path, &sim.dataset)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let manifest_dir = if cfg.manifests {
        let dir = cfg.out_dir.join("manifests");
        sim.trees.par_iter().try_for_each(|t| {
            write_text(
                &dir.join(format!("{}.json", t.source_id)),
                &(t.to_json()? + "\n"),
            )
        })?;
        Some(dir)
    } else {
        None
    };
    Ok(SimulateSummary {
        sources: sim.dataset.sets.len(),
        instances: sim.dataset.n_instances(),
        dataset_path,
        manifest_dir,
        config_digest: config_digest(cfg)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCommand {
    pub schema_version: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: f64,
    pub seed: u64,
    pub fit: FitConfig,
    pub ingest: IngestOptions,
}

/// Fits on the dev part of a seeded source-level split and writes the model.
pub fn cmd_fit(cmd: &FitCommand) -> Result<CalibrationModel> {
    check_fraction(cmd.split)?;
    let (ds, _) = load(&cmd.data, &cmd.ingest)?;
    if let Some(s) = ds.sets.iter().find(|s| s.label.is_none()) {
        return Err(Error::LabelsRequired(format!(
            "source {} has no label; fitting needs labels",
            s.source_id
        )));
    }
    let (dev_ids, _) = split_sources(&ds, cmd.split, cmd.seed)?;
    let dev = ds.filter_sources(|id| dev_ids.iter().any(|d| d == id));
    let mut model = fit(&dev, &cmd.fit)?;
    model.fit_meta.dev_sources = dev_ids;
    model.fit_meta.note = Some(format!("config_digest {}", config_digest(cmd)?));
    write_text(&cmd.out, &(model.to_json()? + "\n"))?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCommand {
    pub schema_version: String,
    pub data: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
    pub ingest: IngestOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub source_id: String,
    pub score: f64,
    pub decision: Label,
    pub n_instances: usize,
    pub label: Option<Label>,
}

/// Fused QuAD score and decision per source, written as CSV.
pub fn cmd_score(cmd: &ScoreCommand) -> Result<Vec<SourceScore>> {
    let (ds, _) = load(&cmd.data, &cmd.ingest)?;
    let model = load_model(&cmd.model)?;
    let scores: Vec<SourceScore> = ds
        .sets
        .par_iter()
        .map(|set| {
            let f = fuse_corrected(set, &model)?;
            Ok(SourceScore {
                source_id: set.source_id.clone(),
                score: f.score,
                decision: f.decision,
                n_instances: set.len(),
                label: set.label,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::from("source_id,score,decision,n_instances,label\n");
    for s in &scores {
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        text += &format!(
            "{},{},{},{},{label}\n",
            s.source_id, s.score, s.decision, s.n_instances
        );
    }
    write_text(&cmd.out, &text)?;
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateCommand {
    pub schema_version: String,
    pub data: PathBuf,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub detector: Option<String>,
    pub seed: u64,
    pub k_values: Vec<usize>,
    pub strategies: Vec<RankingKind>,
    pub random_repeats: usize,
    pub loo: bool,
    /// Also evaluate the sources the model was fitted on.
    pub include_dev: bool,
    pub fit: FitConfig,
    pub ingest: IngestOptions,
}

impl EvaluateCommand {
    pub fn new(data: PathBuf) -> Self {
        EvaluateCommand {
            schema_version: RUN_SCHEMA_VERSION.into(),
            data,
            model: None,
            out: None,
            detector: None,
            seed: 0,
            k_values: vec![1, 10, 20],
            strategies: vec![
                RankingKind::Qf,
                RankingKind::Size,
                RankingKind::Date,
                RankingKind::Iqa,
            ],
            random_repeats: 10,
            loo: false,
            include_dev: false,
            fit: FitConfig::default(),
            ingest: IngestOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub loo_fits: usize,
}

fn row_or_unavailable(method: &str, k: &str, result: Result<EvalRow>) -> Result<EvalRow> {
    match result {
        Ok(row) => Ok(row),
        Err(Error::MissingMetadata(reason)) => Ok(EvalRow::unavailable(method, k, reason)),
        Err(e) => Err(e),
    }
}

fn mean_evaluation(runs: &[Evaluation]) -> Evaluation {
    let n = runs.len() as f64;
    Evaluation {
        bacc: runs.iter().map(|e| e.bacc).sum::<f64>() / n,
        nll: runs.iter().map(|e| e.nll).sum::<f64>() / n,
        n_sources: runs.first().map_or(0, |e| e.n_sources),
    }
}

/// The baseline and QuAD rows of a Table-2-style comparison on `ds`.
pub fn evaluation_rows(
    ds: &Dataset,
    model: Option<&CalibrationModel>,
    cmd: &EvaluateCommand,
) -> Result<(Vec<EvalRow>, usize)> {
    let mut rows = Vec::new();
    let repeats = cmd.random_repeats.max(1);
    let random = RankingStrategy::new(RankingKind::Random, TopK::K(1))?;
    let runs = (0..repeats)
        .map(|r| {
            evaluate(
                ds,
                |s| aggregate_topk(s, random, cmd.seed.wrapping_add(r as u64)),
                0.0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut row = EvalRow::available("random", "1", mean_evaluation(&runs));
    row.repetitions = Some(repeats);
    rows.push(row);

    rows.push(EvalRow::available(
        "naive",
        "all",
        evaluate(ds, naive_mean, 0.0)?,
    ));

    if ds.records().any(|r| r.meta.tree_level.is_some()) {
        let r = evaluate(ds, |s| oracle_level(s, 1), 0.0)
            .map(|e| EvalRow::available("oracle", "L1", e));
        rows.push(row_or_unavailable("oracle", "L1", r)?);
    }

    for &kind in &cmd.strategies {
        for &k in &cmd.k_values {
            let strategy = RankingStrategy::new(kind, TopK::K(k))?;
            let r = evaluate(ds, |s| aggregate_topk(s, strategy, cmd.seed), 0.0)
                .map(|e| EvalRow::available(kind.name(), k.to_string(), e));
            rows.push(row_or_unavailable(kind.name(), &k.to_string(), r)?);
        }
    }

    match model {
        Some(m) => rows.push(EvalRow::available(
            "QuAD",
            "all",
            evaluate(ds, |s| fuse_corrected(s, m), 0.0)?,
        )),
        None => rows.push(EvalRow::unavailable(
            "QuAD",
            "all",
            "no calibration model given",
        )),
    }

    let mut loo_fits = 0;
    if cmd.loo {
        let scored: Vec<Result<(f64, Label)>> = ds
            .sets
            .par_iter()
            .map(|set| {
                let m = loo_fit(ds, &set.source_id, &cmd.fit)?;
                Ok((fuse_corrected(set, &m)?.score, set.require_label()?))
            })
            .collect();
        loo_fits = scored.len();
        let scored: Result<Vec<_>> = scored.into_iter().collect();
        match scored {
            Ok(scored) => rows.push(EvalRow::available(
                "QuAD*",
                "all",
                evaluate_scores(&scored, 0.0)?,
            )),
            Err(Error::InvalidInput(reason)) => rows.push(EvalRow::unavailable(
                "QuAD*",
                "all",
                format!("leave-one-out fit failed: {reason}"),
            )),
            Err(e) => return Err(e),
        }
    }
    Ok((rows, loo_fits))
}

/// Restricts `ds` to the sources not used to fit `model`.
pub fn eval_sources(ds: &Dataset, model: Option<&CalibrationModel>, include_dev: bool) -> Dataset {
    match model {
        Some(m) if !include_dev && !m.fit_meta.dev_sources.is_empty() => {
            ds.filter_sources(|id| !m.fit_meta.dev_sources.iter().any(|d| d == id))
        }
        _ => ds.clone(),
    }
}

/// Evaluates every method row; writes `<out>.json` and `<out>.txt` when `out`
/// is set.
pub fn cmd_evaluate(cmd: &EvaluateCommand) -> Result<EvaluateOutcome> {
    let (ds, _) = load(&cmd.data, &cmd.ingest)?;
    let model = cmd.model.as_deref().map(load_model).transpose()?;
    let eval = eval_sources(&ds, model.as_ref(), cmd.include_dev);
    if eval.sets.is_empty() {
        return Err(Error::invalid("no sources left to evaluate"));
    }
    let (rows, loo_fits) = evaluation_rows(&eval, model.as_ref(), cmd)?;
    let mut report = EvalReport::new(rows, config_digest(cmd)?);
    report.detector = cmd.detector.clone();
    report
        .notes
        .push(format!("{} sources evaluated", eval.sets.len()));
    if loo_fits > 0 {
        report.notes.push(format!("{loo_fits} leave-one-out fits"));
    }
    if let Some(out) = &cmd.out {
        write_report(out, &report)?;
    }
    Ok(EvaluateOutcome { report, loo_fits })
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out.with_extension("json"), report)?;
    write_text(&out.with_extension("txt"), &report.to_table())
}

/// Joins several single-detector reports into one table with an AVG column.
pub fn join_reports(paths: &[PathBuf]) -> Result<String> {
    let reports = paths
        .iter()
        .map(|p| {
            Ok(serde_json::from_str::<EvalReport>(&crate::io::read_text(
                p,
            )?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let columns: Vec<(String, &EvalReport)> = reports
        .iter()
        .zip(paths)
        .map(|(r, p)| {
            let name = r.detector.clone().unwrap_or_else(|| {
                p.file_stem().map_or_else(
                    || p.display().to_string(),
                    |s| s.to_string_lossy().into_owned(),
                )
            });
            (name, r)
        })
        .collect();
    Ok(crate::metrics::render_table(&columns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCommand {
    pub schema_version: String,
    pub data: PathBuf,
    pub model: PathBuf,
    pub out: Option<PathBuf>,
    pub grid: Vec<usize>,
    pub seed: u64,
    pub include_dev: bool,
    pub ingest: IngestOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub method: String,
    pub bacc: f64,
    pub nll: f64,
    pub n_sources: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub config_digest: String,
}

impl SweepReport {
    pub fn point(&self, n: usize, method: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.n == n && p.method == method)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:>14}  {:>14}  {:>14}\n",
            "n", "naive", "IQA-10", "QuAD"
        );
        let mut ns: Vec<usize> = self.points.iter().map(|p| p.n).collect();
        ns.dedup();
        for n in ns {
            out += &format!("{n:>5}");
            for m in SWEEP_METHODS {
                let cell = self.point(n, m).map_or("-".into(), |p| {
                    format!("{:.1} / {:.2}", 100.0 * p.bacc, p.nll)
                });
                out += &format!("  {cell:>14}");
            }
            out.push('\n');
        }
        out
    }
}

type ScoreFn<'a> = dyn Fn(&QuerySet) -> Result<FusedScore> + Sync + 'a;

pub const DEFAULT_SWEEP_GRID: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 124];
const SWEEP_METHODS: [&str; 3] = ["naive", "IQA-10", "QuAD"];

/// Availability sweep on an already loaded dataset. For each `n`, every source
/// keeps a seeded uniform subset of `min(n, len)` instances.
pub fn availability_sweep(
    ds: &Dataset,
    model: &CalibrationModel,
    grid: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let iqa = RankingStrategy::new(RankingKind::Iqa, TopK::K(10))?;
    let mut points = Vec::new();
    for &n in grid {
        if n == 0 {
            return Err(Error::invalid("sweep grid values must be positive"));
        }
        let sets = ds
            .sets
            .par_iter()
            .map(|s| {
                let mut rng = crate::rng::stream(seed, &format!("sweep/{n}/{}", s.source_id));
                let kept = subsample_availability(&s.instances, n.min(s.len()), &mut rng)?;
                Ok(QuerySet::new(s.source_id.clone(), s.label, kept))
            })
            .collect::<Result<Vec<_>>>()?;
        let sub = Dataset { sets, ..ds.clone() };
        let methods: [(&str, &ScoreFn); 3] = [
            ("naive", &naive_mean),
            ("IQA-10", &|s| aggregate_topk(s, iqa, seed)),
            ("QuAD", &|s| fuse_corrected(s, model)),
        ];
        for (name, method) in methods {
            let e = evaluate(&sub, method, 0.0)?;
            points.push(SweepPoint {
                n,
                method: name.into(),
                bacc: e.bacc,
                nll: e.nll,
                n_sources: e.n_sources,
            });
        }
    }
    Ok(points)
}

pub fn cmd_sweep(cmd: &SweepCommand) -> Result<SweepReport> {
    let (ds, _) = load(&cmd.data, &cmd.ingest)?;
    let model = load_model(&cmd.model)?;
    let eval = eval_sources(&ds, Some(&model), cmd.include_dev);
    let report = SweepReport {
        points: availability_sweep(&eval, &model, &cmd.grid, cmd.seed)?,
        config_digest: config_digest(cmd)?,
    };
    if let Some(out) = &cmd.out {
        write_json(&out.with_extension("json"), &report)?;
        write_text(&out.with_extension("txt"), &report.to_table())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationSummary {
    pub sources: usize,
    pub instances: usize,
    pub real_sources: usize,
    pub fake_sources: usize,
    pub ingest: IngestReport,
    pub violations: Vec<Violation>,
}

impl ValidationSummary {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn cmd_validate(path: &Path, opts: &IngestOptions) -> Result<ValidationSummary> {
    require_file(path)?;
    let (ds, ingest) = ingest(path, opts)?;
    let (real_sources, fake_sources) = ds.count_by_label();
    Ok(ValidationSummary {
        sources: ds.sets.len(),
        instances: ds.n_instances(),
        real_sources,
        fake_sources,
        ingest,
        violations: validate_dataset(&ds),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::testutil::rec;

    fn labeled(n_real: usize, n_fake: usize) -> Dataset {
        let mut recs = Vec::new();
        for i in 0..n_real + n_fake {
            let label = if i < n_real { Label::Real } else { Label::Fake };
            recs.push(rec(&format!("s{i:03}"), "a", 0.0, 0.5, Some(label)));
        }
        Dataset::from_records(recs)
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let ds = labeled(50, 50);
        let (dev, eval) = split_sources(&ds, 0.5, 3).unwrap();
        assert_eq!((dev.len(), eval.len()), (50, 50));
        let dev_ds = ds.filter_sources(|id| dev.iter().any(|d| d == id));
        assert_eq!(dev_ds.count_by_label(), (25, 25));
        assert_eq!(split_sources(&ds, 0.5, 3).unwrap().0, dev);
        assert_ne!(split_sources(&ds, 0.5, 4).unwrap().0, dev);
        assert!(dev.iter().all(|d| !eval.contains(d)));
    }

    #[test]
    fn split_fraction_bounds() {
        let ds = labeled(2, 2);
        assert!(split_sources(&ds, 0.0, 0).is_err());
        assert!(split_sources(&ds, 1.0, 0).is_err());
        assert!(split_sources(&ds, 0.3, 0).is_ok());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = EvaluateCommand::new("x.csv".into());
        let mut b = a.clone();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        b.seed = 1;
        assert_ne!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        assert_eq!(config_digest(&a).unwrap().len(), 64);
    }

    #[test]
    fn default_grid_has_fifteen_rows_without_tree_levels() {
        let mut recs = Vec::new();
        for s in 0..4 {
            let label = if s % 2 == 0 { Label::Real } else { Label::Fake };
            for i in 0..12 {
                let mut r = rec(
                    &format!("s{s}"),
                    &i.to_string(),
                    if s % 2 == 0 { -1.0 } else { 1.0 },
                    i as f64 / 12.0,
                    Some(label),
                );
                r.meta.jpeg_qf = Some(60 + i as u8);
                r.meta.format = Some(crate::types::ImageFormat::Jpeg);
                r.meta.width = Some(1000 + i as u32);
                r.meta.height = Some(800);
                r.meta.timestamp = Some(i as i64);
                recs.push(r);
            }
        }
        let ds = Dataset::from_records(recs);
        let cmd = EvaluateCommand::new("x".into());
        let (rows, fits) = evaluation_rows(&ds, None, &cmd).unwrap();
        assert_eq!(rows.len(), 15);
        assert_eq!(fits, 0);
        assert_eq!(rows.iter().filter(|r| r.unavailable.is_some()).count(), 1);
        // perfect separation: every available method is perfect
        assert!(rows.iter().filter_map(|r| r.bacc).all(|b| b == 1.0));
    }

    #[test]
    fn missing_metadata_marks_rows_unavailable() {
        let ds = Dataset::from_records((0..4).flat_map(|s| {
            let label = if s < 2 { Label::Real } else { Label::Fake };
            (0..3).map(move |i| {
                rec(
                    &format!("s{s}"),
                    &i.to_string(),
                    if s < 2 { -1.0 } else { 1.0 },
                    0.1 * i as f64,
                    Some(label),
                )
            })
        }));
        let cmd = EvaluateCommand::new("x".into());
        let (rows, _) = evaluation_rows(&ds, None, &cmd).unwrap();
        for kind in ["qf", "size", "date"] {
            assert!(
                rows.iter()
                    .filter(|r| r.method == kind)
                    .all(|r| r.unavailable.is_some()),
                "{kind}"
            );
        }
        assert!(rows
            .iter()
            .filter(|r| r.method == "iqa")
            .all(|r| r.bacc == Some(1.0)));
    }
}
