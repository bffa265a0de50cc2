//! Dataset files: CSV with one row per instance, or the JSON form of [`Dataset`].
//!
//! CSV columns are matched by header name; `source_id`, `instance_id`, `logit`
//! and `quality` are required, the rest optional, and empty cells mean absent.
//! An extra `checksum` column enables duplicate removal.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, InstanceMeta, InstanceRecord, SCHEMA_VERSION};

pub const CSV_HEADER: [&str; 11] = [
    "source_id",
    "instance_id",
    "logit",
    "quality",
    "label",
    "width",
    "height",
    "jpeg_qf",
    "format",
    "timestamp",
    "tree_level",
];

const CHECKSUM: &str = "checksum";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Drop instances whose shorter side is below this; rows without
    /// dimensions are kept.
    pub min_short_side: Option<u32>,
    /// Keep only the first row of each checksum value.
    pub dedup_checksum: bool,
    /// Drop whole sources with fewer instances than this.
    pub min_instances: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            min_short_side: Some(256),
            dedup_checksum: true,
            min_instances: 10,
        }
    }
}

impl IngestOptions {
    pub fn no_filters() -> Self {
        IngestOptions {
            min_short_side: None,
            dedup_checksum: false,
            min_instances: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub dropped_small: usize,
    pub dropped_duplicate: usize,
    pub dropped_sources: Vec<String>,
    pub dropped_source_rows: usize,
}

impl IngestReport {
    pub fn rows_kept(&self) -> usize {
        self.rows_read - self.dropped_small - self.dropped_duplicate - self.dropped_source_rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Json,
}

impl FileFormat {
    /// `.json` means JSON; anything else is read as CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => FileFormat::Json,
            _ => FileFormat::Csv,
        }
    }
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match FileFormat::from_path(path) {
        FileFormat::Csv => ingest_csv(reader, path, opts),
        FileFormat::Json => ingest_json(reader, path, opts),
    }
}

pub fn ingest_csv<R: Read>(
    reader: R,
    path: &Path,
    opts: &IngestOptions,
) -> Result<(Dataset, IngestReport)> {
    let (rows, n_read) = parse_csv(reader, path)?;
    let mut report = IngestReport {
        rows_read: n_read,
        ..IngestReport::default()
    };
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(rows.len());
    for (rec, checksum) in rows {
        if !passes_size(&rec.meta, opts.min_short_side) {
            report.dropped_small += 1;
            continue;
        }
        if let Some(sum) = checksum.filter(|_| opts.dedup_checksum) {
            if !seen.insert(sum) {
                report.dropped_duplicate += 1;
                continue;
            }
        }
        kept.push(rec);
    }
    let mut ds = Dataset::from_records(kept);
    ds.tree_depth = ds.records().filter_map(|r| r.meta.tree_level).max();
    drop_small_sources(&mut ds, opts.min_instances, &mut report);
    Ok((ds, report))
}

pub fn ingest_json<R: Read>(
    reader: R,
    path: &Path,
    opts: &IngestOptions,
) -> Result<(Dataset, IngestReport)> {
    let mut ds: Dataset = serde_json::from_reader(reader).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if ds.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!(
                "unsupported schema_version {:?}, expected {SCHEMA_VERSION:?}",
                ds.schema_version
            ),
        });
    }
    let mut report = IngestReport {
        rows_read: ds.n_instances(),
        ..IngestReport::default()
    };
    for set in &mut ds.sets {
        let before = set.instances.len();
        set.instances
            .retain(|r| passes_size(&r.meta, opts.min_short_side));
        report.dropped_small += before - set.instances.len();
    }
    drop_small_sources(&mut ds, opts.min_instances, &mut report);
    Ok((ds, report))
}

fn passes_size(meta: &InstanceMeta, min: Option<u32>) -> bool {
    match (min, meta.short_side()) {
        (Some(min), Some(side)) => side >= min,
        _ => true,
    }
}

fn drop_small_sources(ds: &mut Dataset, min_instances: usize, report: &mut IngestReport) {
    ds.sets.retain(|s| {
        if s.len() >= min_instances.max(1) {
            return true;
        }
        report.dropped_sources.push(s.source_id.clone());
        report.dropped_source_rows += s.len();
        false
    });
}

type Row = (InstanceRecord, Option<String>);

fn parse_csv<R: Read>(reader: R, path: &Path) -> Result<(Vec<Row>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [None; 11];
    for (slot, name) in idx.iter_mut().zip(CSV_HEADER) {
        *slot = col(name);
    }
    let missing: Vec<&str> = CSV_HEADER[..4]
        .iter()
        .zip(&idx)
        .filter(|(_, i)| i.is_none())
        .map(|(n, _)| *n)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("missing required column(s): {}", missing.join(", ")),
        });
    }
    let checksum_col = col(CHECKSUM);

    let mut rows = Vec::new();
    let mut bad_lines = Vec::new();
    let mut first_problem = None;
    let mut n_read = 0;
    for result in rdr.records() {
        n_read += 1;
        // 1-based, counting the header line
        let fallback_line = n_read as u64 + 1;
        let parsed = match result {
            Ok(record) => {
                let line = record.position().map_or(fallback_line, |p| p.line());
                let cell =
                    |i: Option<usize>| i.and_then(|i| record.get(i)).filter(|s| !s.is_empty());
                parse_row(&idx, cell)
                    .map(|rec| (rec, cell(checksum_col).map(str::to_string)))
                    .map_err(|m| (line, m))
            }
            Err(e) => Err((
                e.position().map_or(fallback_line, |p| p.line()),
                e.to_string(),
            )),
        };
        match parsed {
            Ok(row) => rows.push(row),
            Err((line, message)) => {
                bad_lines.push(line);
                first_problem.get_or_insert(format!("line {line}: {message}"));
            }
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::MalformedRows {
            path: path.to_path_buf(),
            lines: bad_lines,
            message: first_problem.unwrap_or_default(),
        });
    }
    Ok((rows, n_read))
}

fn parse_row<'a>(
    idx: &[Option<usize>; 11],
    cell: impl Fn(Option<usize>) -> Option<&'a str>,
) -> Result<InstanceRecord, String> {
    fn required<'a>(v: Option<&'a str>, name: &str) -> Result<&'a str, String> {
        v.ok_or_else(|| format!("{name} is empty"))
    }
    fn parse<T: std::str::FromStr>(v: Option<&str>, name: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        v.map(|s| s.parse::<T>().map_err(|e| format!("{name}={s:?}: {e}")))
            .transpose()
    }
    let logit = parse::<f64>(Some(required(cell(idx[2]), "logit")?), "logit")?.unwrap_or_default();
    let quality =
        parse::<f64>(Some(required(cell(idx[3]), "quality")?), "quality")?.unwrap_or_default();
    if !logit.is_finite() || !quality.is_finite() {
        return Err("logit and quality must be finite".into());
    }
    Ok(InstanceRecord {
        source_id: required(cell(idx[0]), "source_id")?.to_string(),
        instance_id: required(cell(idx[1]), "instance_id")?.to_string(),
        logit,
        quality,
        label: parse(cell(idx[4]), "label")?,
        meta: InstanceMeta {
            width: parse(cell(idx[5]), "width")?,
            height: parse(cell(idx[6]), "height")?,
            jpeg_qf: parse(cell(idx[7]), "jpeg_qf")?,
            format: parse(cell(idx[8]), "format")?,
            timestamp: parse(cell(idx[9]), "timestamp")?,
            tree_level: parse(cell(idx[10]), "tree_level")?,
        },
    })
}

pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::invalid(format!("csv write: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map(|v| v.to_string()).unwrap_or_default()
    }
    for set in &ds.sets {
        for r in &set.instances {
            let m = &r.meta;
            w.write_record([
                r.source_id.clone(),
                r.instance_id.clone(),
                r.logit.to_string(),
                r.quality.to_string(),
                opt(r.label.or(set.label)),
                opt(m.width),
                opt(m.height),
                opt(m.jpeg_qf),
                opt(m.format.map(|f| f.as_str())),
                opt(m.timestamp),
                opt(m.tree_level),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
    Ok(())
}

pub fn write_json<W: Write>(ds: &Dataset, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, ds)?;
    writeln!(writer).map_err(|e| Error::invalid(format!("json write: {e}")))?;
    Ok(())
}

/// Writes `ds` in the format implied by the extension of `path`.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = create(path)?;
    let mut w = BufWriter::new(file);
    match FileFormat::from_path(path) {
        FileFormat::Csv => write_csv(ds, &mut w)?,
        FileFormat::Json => write_json(ds, &mut w)?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(PathBuf::from(path), e))
}
