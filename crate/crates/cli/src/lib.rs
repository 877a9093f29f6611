//! Run configuration and the `fit`, `eval`, `sweep` and `synth` commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fmap_ood::clustering::{ClusterMethod, ClusterSpec};
use fmap_ood::eul::EulConfig;
use fmap_ood::fmap::FitConfig;
use fmap_ood::metrics::{pareto_front, EvalReport, MetricsConfig};
use fmap_ood::pipeline::{evaluate_method, fit_model, EvalOptions, LogitsOptions, MethodSpec, Model};
use fmap_ood::sdr::SdrConfig;
use fmap_ood::synth::{self, SynthConfig};
use fmap_ood::tensor_io::Dataset;
use fmap_ood::Distance;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fmap_ood::Error),
    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USER: i32 = 2;

impl CliError {
    /// 2 for problems with the inputs or configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use fmap_ood::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
            CliError::Core(e) => match e {
                E::Io { .. }
                | E::Format(_)
                | E::Data(_)
                | E::Config(_)
                | E::Json(_)
                | E::Fit(_)
                | E::InsufficientSamples { .. }
                | E::AllNoise
                | E::Triplet(_)
                | E::DegenerateBox(_) => EXIT_USER,
                E::Undefined(_) | E::ZeroVector | E::Divergence(_) | E::DegenerateMap => EXIT_INTERNAL,
            },
        }
    }
}

/// One method to run, with optional overrides of the feature fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub method: MethodSpec,
    #[serde(default)]
    pub eul: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<Distance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdr: Option<bool>,
}

impl RunEntry {
    pub fn new(method: MethodSpec) -> Self {
        Self {
            method,
            eul: false,
            distance: None,
            cluster: None,
            sdr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub fit_manifest: Option<PathBuf>,
    pub eval_manifests: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Model file for `eval`; defaults to `<output_dir>/bank.json`.
    pub bank: Option<PathBuf>,
    /// Overrides the clustering, SDR and generator seeds when set.
    pub seed: Option<u64>,
    pub fit: FitConfig,
    pub sdr: Option<SdrConfig>,
    pub eul: EulConfig,
    pub logits: LogitsOptions,
    pub runs: Vec<RunEntry>,
    pub confidence_thresholds: Vec<f64>,
    pub metrics: MetricsConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fit_manifest: None,
            eval_manifests: Vec::new(),
            output_dir: PathBuf::from("out"),
            bank: None,
            seed: None,
            fit: FitConfig::default(),
            sdr: None,
            eul: EulConfig::default(),
            logits: LogitsOptions::default(),
            runs: vec![RunEntry::new(MethodSpec::Fmap)],
            confidence_thresholds: EvalOptions::default().confidence_thresholds,
            metrics: MetricsConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Pushes `seed` into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.fit.cluster.seed = seed;
        self.synth.seed = seed;
        if let Some(s) = &mut self.sdr {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.fit.validate()?;
        self.eul.validate()?;
        self.eval_options().validate()?;
        if self.runs.is_empty() {
            return Err(CliError::Usage("config lists no runs".into()));
        }
        for r in &self.runs {
            r.method.validate()?;
            if r.sdr == Some(true) && self.sdr.is_none() {
                return Err(CliError::Usage("a run asks for SDR but the config has no sdr section".into()));
            }
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            metrics: self.metrics,
            confidence_thresholds: self.confidence_thresholds.clone(),
        }
    }

    pub fn bank_path(&self) -> PathBuf {
        self.bank.clone().unwrap_or_else(|| self.output_dir.join("bank.json"))
    }

    fn fit_dataset(&self) -> CliResult<Dataset> {
        let path = self
            .fit_manifest
            .as_ref()
            .ok_or_else(|| CliError::Usage("no fit_manifest given".into()))?;
        open_dataset(path)
    }

    fn eval_datasets(&self) -> CliResult<Vec<(String, Dataset)>> {
        if self.eval_manifests.is_empty() {
            return Err(CliError::Usage("no eval_manifests given".into()));
        }
        self.eval_manifests
            .iter()
            .map(|p| {
                let ds = open_dataset(p)?;
                Ok((ds.manifest.name.clone(), ds))
            })
            .collect()
    }
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::Usage(format!("manifest not found: {}", path.display())));
    }
    Ok(Dataset::open(path)?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Feature-fit settings a run depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Variant {
    distance: Distance,
    cluster: ClusterMethod,
    sdr: bool,
}

fn variant_of(cfg: &RunConfig, r: &RunEntry) -> Variant {
    Variant {
        distance: r.distance.unwrap_or(cfg.fit.distance),
        cluster: r.cluster.unwrap_or(cfg.fit.cluster.method),
        sdr: r.sdr.unwrap_or(cfg.sdr.is_some()),
    }
}

fn fit_variant(cfg: &RunConfig, ds: &Dataset, v: Variant) -> CliResult<Model> {
    let fit = FitConfig {
        distance: v.distance,
        cluster: ClusterSpec {
            method: v.cluster,
            ..cfg.fit.cluster.clone()
        },
        ..cfg.fit.clone()
    };
    let sdr = if v.sdr { cfg.sdr.as_ref() } else { None };
    Ok(fit_model(ds, &fit, sdr, &cfg.logits)?)
}

pub fn cmd_synth(cfg: &RunConfig) -> CliResult<()> {
    cfg.synth.validate()?;
    create_dir(&cfg.output_dir)?;
    let m = synth::generate(&cfg.synth, &cfg.output_dir)?;
    info!(
        "wrote {} images to {}",
        m.images.len(),
        cfg.output_dir.join("manifest.json").display()
    );
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Model> {
    cfg.fit.validate()?;
    let ds = cfg.fit_dataset()?;
    let v = Variant {
        distance: cfg.fit.distance,
        cluster: cfg.fit.cluster.method,
        sdr: cfg.sdr.is_some(),
    };
    let model = fit_variant(cfg, &ds, v)?;
    for cell in &model.bank.cells {
        info!(
            "cell (class {}, stride {}): {} samples, {} centroids, threshold {} ({:?})",
            cell.class_id,
            cell.stride_index,
            cell.sample_count,
            cell.centroids.len(),
            cell.record.threshold,
            cell.record.source
        );
    }
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("bank.json"), &model.to_json()?)?;
    Ok(model)
}

/// Leading CSV columns, in the layout of the stored result tables.
pub const RESULT_COLUMNS: [&str; 14] = [
    "method",
    "distance",
    "cluster",
    "sdr",
    "eul",
    "fusion",
    "conf_threshold",
    "mAP",
    "U-AP",
    "U-PRE",
    "U-REC",
    "U-F1",
    "A-OSE",
    "WI",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub distance: String,
    pub cluster: String,
    pub sdr: String,
    pub eul: String,
    pub fusion: String,
    pub conf_threshold: f64,
    pub map: Option<f64>,
    pub u_ap: Option<f64>,
    pub u_pre: Option<f64>,
    pub u_rec: Option<f64>,
    pub u_f1: Option<f64>,
    pub a_ose: Option<usize>,
    pub wi: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str, column: &str) -> CliResult<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| CliError::Usage(format!("column {column}: cannot parse {s:?}")))
}

/// Looks fields up by header name.
pub struct CsvRecord<'a> {
    headers: &'a csv::StringRecord,
    record: &'a csv::StringRecord,
}

impl CsvRecord<'_> {
    pub fn get(&self, column: &str) -> CliResult<&str> {
        self.headers
            .iter()
            .position(|h| h == column)
            .and_then(|i| self.record.get(i))
            .ok_or_else(|| CliError::Usage(format!("missing column {column}")))
    }

    pub fn f64_opt(&self, column: &str) -> CliResult<Option<f64>> {
        parse_opt(self.get(column)?, column)
    }
}

impl ResultRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.distance.clone(),
            self.cluster.clone(),
            self.sdr.clone(),
            self.eul.clone(),
            self.fusion.clone(),
            self.conf_threshold.to_string(),
            opt(self.map),
            opt(self.u_ap),
            opt(self.u_pre),
            opt(self.u_rec),
            opt(self.u_f1),
            opt(self.a_ose),
            opt(self.wi),
        ]
    }

    pub fn from_record(r: &CsvRecord) -> CliResult<Self> {
        Ok(Self {
            method: r.get("method")?.into(),
            distance: r.get("distance")?.into(),
            cluster: r.get("cluster")?.into(),
            sdr: r.get("sdr")?.into(),
            eul: r.get("eul")?.into(),
            fusion: r.get("fusion")?.into(),
            conf_threshold: r
                .f64_opt("conf_threshold")?
                .ok_or_else(|| CliError::Usage("empty conf_threshold".into()))?,
            map: r.f64_opt("mAP")?,
            u_ap: r.f64_opt("U-AP")?,
            u_pre: r.f64_opt("U-PRE")?,
            u_rec: r.f64_opt("U-REC")?,
            u_f1: r.f64_opt("U-F1")?,
            a_ose: parse_opt(r.get("A-OSE")?, "A-OSE")?,
            wi: r.f64_opt("WI")?,
        })
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

fn describe(entry: &RunEntry, v: Variant, model: &Model, t: f64, r: Option<&EvalReport>) -> ResultRow {
    let feat = entry.method.uses_features() || entry.eul;
    let dash = || "-".to_string();
    ResultRow {
        method: entry.method.to_string(),
        distance: if feat { model.bank.distance.to_string() } else { dash() },
        cluster: if feat { v.cluster.to_string() } else { dash() },
        sdr: yes_no(feat && model.bank.reducers.is_some()),
        eul: yes_no(entry.eul),
        fusion: entry.method.fusion().map_or_else(dash, |s| s.to_string()),
        conf_threshold: t,
        map: r.and_then(|r| r.map_known),
        u_ap: r.and_then(|r| r.u_ap),
        u_pre: r.and_then(|r| r.u_pre),
        u_rec: r.and_then(|r| r.u_rec),
        u_f1: r.and_then(|r| r.u_f1),
        a_ose: r.map(|r| r.a_ose),
        wi: r.and_then(|r| r.wi),
    }
}

/// A row of `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub row: ResultRow,
    pub dataset: String,
}

impl CsvRow for DatasetRow {
    fn header() -> Vec<&'static str> {
        let mut h = RESULT_COLUMNS.to_vec();
        h.push("dataset");
        h
    }

    fn fields(&self) -> Vec<String> {
        let mut f = self.row.fields();
        f.push(self.dataset.clone());
        f
    }

    fn from_record(r: &CsvRecord) -> CliResult<Self> {
        Ok(Self {
            row: ResultRow::from_record(r)?,
            dataset: r.get("dataset")?.into(),
        })
    }
}

/// A row of `sweep.csv` and `front.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub row: ResultRow,
    pub u_f1_sum: Option<f64>,
    pub error: String,
}

impl CsvRow for SweepRow {
    fn header() -> Vec<&'static str> {
        let mut h = RESULT_COLUMNS.to_vec();
        h.extend(["U-F1_SUM", "error"]);
        h
    }

    fn fields(&self) -> Vec<String> {
        let mut f = self.row.fields();
        f.push(opt(self.u_f1_sum));
        f.push(self.error.clone());
        f
    }

    fn from_record(r: &CsvRecord) -> CliResult<Self> {
        Ok(Self {
            row: ResultRow::from_record(r)?,
            u_f1_sum: r.f64_opt("U-F1_SUM")?,
            error: r.get("error")?.into(),
        })
    }
}

pub trait CsvRow: Sized {
    fn header() -> Vec<&'static str>;
    fn fields(&self) -> Vec<String>;
    fn from_record(r: &CsvRecord) -> CliResult<Self>;
}

#[derive(Clone, Debug, Serialize)]
struct RunReport<'a> {
    method: &'a MethodSpec,
    eul: bool,
    dataset: &'a str,
    report: &'a EvalReport,
}

#[derive(Clone, Debug, Serialize)]
struct ThresholdReport<'a> {
    conf_threshold: f64,
    runs: Vec<RunReport<'a>>,
    /// Per run, the summed U-F1 over the two evaluation sets.
    #[serde(skip_serializing_if = "Option::is_none")]
    u_f1_sum: Option<Vec<Option<f64>>>,
}

/// `(run, dataset) -> reports per threshold`.
type Grid = Vec<Vec<Vec<EvalReport>>>;

fn run_grid(
    cfg: &RunConfig,
    datasets: &[(String, Dataset)],
    runs: &[(RunEntry, &Model)],
) -> Vec<CliResult<Vec<Vec<EvalReport>>>> {
    let opts = cfg.eval_options();
    runs.par_iter()
        .map(|(entry, model)| {
            let eul = entry.eul.then_some(&cfg.eul);
            datasets
                .iter()
                .map(|(_, ds)| Ok(evaluate_method(ds, model, &entry.method, eul, &opts)?))
                .collect()
        })
        .collect()
}

fn u_f1_sum(per_dataset: &[&EvalReport]) -> Option<f64> {
    let vals: Vec<Option<f64>> = per_dataset.iter().map(|r| r.u_f1).collect();
    // a set without unknown predictions or unknown ground truth adds 0
    if vals.iter().all(Option::is_none) {
        return None;
    }
    Some(per_dataset.iter().map(|r| r.u_f1.unwrap_or(0.0)).sum())
}

fn csv_string<T: CsvRow>(rows: &[T]) -> CliResult<String> {
    let err = |e: csv::Error| CliError::Internal(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(T::header()).map_err(err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Internal(e.to_string()))
}

fn threshold_file(t: f64) -> String {
    format!("report_{t}.json")
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<Vec<DatasetRow>> {
    cfg.validate()?;
    let bank = cfg.bank_path();
    let text = fs::read_to_string(&bank)
        .map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", bank.display())))?;
    let model = Model::from_json(&text)?;
    for r in &cfg.runs {
        let clash = r.distance.is_some_and(|d| d != model.bank.distance)
            || r.sdr.is_some_and(|s| s != model.bank.reducers.is_some());
        if clash {
            return Err(CliError::Usage(format!(
                "run {} asks for fit settings that differ from {}; use sweep",
                r.method,
                bank.display()
            )));
        }
    }
    let datasets = cfg.eval_datasets()?;
    let runs: Vec<(RunEntry, &Model)> = cfg.runs.iter().map(|r| (r.clone(), &model)).collect();
    let grid: Grid = run_grid(cfg, &datasets, &runs).into_iter().collect::<CliResult<_>>()?;

    create_dir(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for (ti, &t) in cfg.confidence_thresholds.iter().enumerate() {
        let mut reports = Vec::new();
        let mut sums = Vec::new();
        for (ri, (entry, _)) in runs.iter().enumerate() {
            let v = variant_of(cfg, entry);
            let per: Vec<&EvalReport> = grid[ri].iter().map(|r| &r[ti]).collect();
            sums.push(u_f1_sum(&per));
            for ((name, _), r) in datasets.iter().zip(&per) {
                reports.push(RunReport {
                    method: &entry.method,
                    eul: entry.eul,
                    dataset: name,
                    report: r,
                });
                rows.push(DatasetRow {
                    row: describe(entry, v, &model, t, Some(r)),
                    dataset: name.clone(),
                });
            }
        }
        let doc = ThresholdReport {
            conf_threshold: t,
            runs: reports,
            u_f1_sum: (datasets.len() == 2).then_some(sums),
        };
        let mut json = serde_json::to_string_pretty(&doc).map_err(fmap_ood::Error::from)?;
        json.push('\n');
        write_file(&cfg.output_dir.join(threshold_file(t)), &json)?;
    }
    write_file(&cfg.output_dir.join("results.csv"), &csv_string(&rows)?)?;
    Ok(rows)
}

/// Sweep output: every point and the non-dominated subset.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub front: Vec<SweepRow>,
}

/// Row indices of the (mAP, U-F1_SUM) front among rows with both values.
pub fn front_of(rows: &[SweepRow]) -> Vec<usize> {
    let valid: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].error.is_empty() && rows[i].row.map.is_some() && rows[i].u_f1_sum.is_some())
        .collect();
    let pts: Vec<(f64, f64)> = valid
        .iter()
        .map(|&i| (rows[i].row.map.unwrap(), rows[i].u_f1_sum.unwrap()))
        .collect();
    pareto_front(&pts).into_iter().map(|k| valid[k]).collect()
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<SweepOutput> {
    cfg.validate()?;
    let fit_ds = cfg.fit_dataset()?;
    let datasets = cfg.eval_datasets()?;

    let mut models: BTreeMap<Variant, Result<Model, String>> = BTreeMap::new();
    for r in &cfg.runs {
        let v = variant_of(cfg, r);
        if !models.contains_key(&v) {
            info!("fitting {v:?}");
            models.insert(v, fit_variant(cfg, &fit_ds, v).map_err(|e| e.to_string()));
        }
    }
    let fitted: Vec<usize> = (0..cfg.runs.len())
        .filter(|&i| models[&variant_of(cfg, &cfg.runs[i])].is_ok())
        .collect();
    let runs: Vec<(RunEntry, &Model)> = fitted
        .iter()
        .map(|&i| {
            let r = &cfg.runs[i];
            (r.clone(), models[&variant_of(cfg, r)].as_ref().expect("fitted"))
        })
        .collect();
    let mut by_run: Vec<Result<Vec<Vec<EvalReport>>, String>> = cfg
        .runs
        .iter()
        .map(|r| Err(models[&variant_of(cfg, r)].as_ref().err().cloned().unwrap_or_default()))
        .collect();
    for (k, res) in run_grid(cfg, &datasets, &runs).into_iter().enumerate() {
        by_run[fitted[k]] = res.map_err(|e| e.to_string());
    }

    let mut rows = Vec::new();
    for (entry, res) in cfg.runs.iter().zip(&by_run) {
        let v = variant_of(cfg, entry);
        if let Err(e) = res {
            warn!("run {} failed: {e}", entry.method);
        }
        for (ti, &t) in cfg.confidence_thresholds.iter().enumerate() {
            rows.push(match (res, &models[&v]) {
                (Ok(grid), Ok(model)) => {
                    let per: Vec<&EvalReport> = grid.iter().map(|r| &r[ti]).collect();
                    // mAP comes from the first set with known ground truth
                    let primary = per.iter().find(|r| r.map_known.is_some()).copied().unwrap_or(per[0]);
                    SweepRow {
                        row: describe(entry, v, model, t, Some(primary)),
                        u_f1_sum: u_f1_sum(&per),
                        error: String::new(),
                    }
                }
                (Err(e), _) => failed_row(entry, v, cfg, t, e.clone()),
                (Ok(_), Err(e)) => failed_row(entry, v, cfg, t, e.clone()),
            });
        }
    }
    if rows.iter().all(|r| !r.error.is_empty()) {
        return Err(CliError::Usage(format!("every run failed; first error: {}", rows[0].error)));
    }
    let front: Vec<SweepRow> = front_of(&rows).into_iter().map(|i| rows[i].clone()).collect();
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("sweep.csv"), &csv_string(&rows)?)?;
    write_file(&cfg.output_dir.join("front.csv"), &csv_string(&front)?)?;
    Ok(SweepOutput { rows, front })
}

fn failed_row(entry: &RunEntry, v: Variant, cfg: &RunConfig, t: f64, error: String) -> SweepRow {
    let feat = entry.method.uses_features() || entry.eul;
    let dash = || "-".to_string();
    SweepRow {
        row: ResultRow {
            method: entry.method.to_string(),
            distance: if feat { v.distance.to_string() } else { dash() },
            cluster: if feat { v.cluster.to_string() } else { dash() },
            sdr: yes_no(feat && v.sdr && cfg.sdr.is_some()),
            eul: yes_no(entry.eul),
            fusion: entry.method.fusion().map_or_else(dash, |s| s.to_string()),
            conf_threshold: t,
            map: None,
            u_ap: None,
            u_pre: None,
            u_rec: None,
            u_f1: None,
            a_ose: None,
            wi: None,
        },
        u_f1_sum: None,
        error,
    }
}

/// Reads a CSV file through a per-record parser.
pub fn read_rows<T>(path: &Path, parse: impl Fn(&CsvRecord) -> CliResult<T>) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        .clone();
    r.records()
        .map(|rec| {
            let record = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            parse(&CsvRecord {
                headers: &headers,
                record: &record,
            })
        })
        .collect()
}

pub fn read_csv<T: CsvRow>(path: &Path) -> CliResult<Vec<T>> {
    read_rows(path, T::from_record)
}
