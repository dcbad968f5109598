//! Prediction records, datasets, and their JSON-lines / CSV file formats.
//!
//! JSON lines: one object per line with keys `logits` (optional array),
//! `probs` (optional array, at least one of the two is required), `label`
//! (integer) and `domain` (optional string). An optional first line of the
//! form `{"metadata": {...}}` carries string key/value metadata.
//!
//! CSV: mandatory header with columns `logit_0..logit_{k-1}` and/or
//! `prob_0..prob_{k-1}`, then `label`, then optionally `domain`. Metadata is
//! stored as leading `# key=value` comment lines. Empty logit cells mean the
//! record has no logits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{
    self, probs_to_logits, softmax_temperature, LogitVector, ProbVector,
};

/// Maximum entrywise gap between `softmax(logits)` and stored `probs`.
pub const LOGIT_PROB_TOLERANCE: f64 = 1e-4;
/// Largest sum deviation that `renormalize` will repair.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub logits: Option<LogitVector>,
    pub probs: ProbVector,
    pub label: usize,
    pub domain: Option<String>,
}

impl PredictionRecord {
    /// Record from logits; probabilities are their softmax.
    pub fn from_logits(logits: LogitVector, label: usize) -> Result<Self> {
        let probs = softmax_temperature(&logits, 1.0)?;
        Self::new(Some(logits), probs, label, None)
    }

    pub fn from_probs(probs: ProbVector, label: usize) -> Result<Self> {
        Self::new(None, probs, label, None)
    }

    pub fn new(
        logits: Option<LogitVector>,
        probs: ProbVector,
        label: usize,
        domain: Option<String>,
    ) -> Result<Self> {
        let k = probs.k();
        if label >= k {
            return Err(Error::Validation(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        if let Some(z) = &logits {
            if z.k() != k {
                return Err(Error::Validation(format!(
                    "{} logits but {k} probabilities",
                    z.k()
                )));
            }
            let implied = softmax_temperature(z, 1.0)?;
            let gap = implied
                .as_slice()
                .iter()
                .zip(probs.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap > LOGIT_PROB_TOLERANCE {
                return Err(Error::Validation(format!(
                    "probabilities differ from softmax(logits) by {gap:e}"
                )));
            }
        }
        Ok(PredictionRecord {
            logits,
            probs,
            label,
            domain,
        })
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn k(&self) -> usize {
        self.probs.k()
    }

    /// Predicted class, ties resolved to the lowest index.
    pub fn predicted(&self) -> usize {
        self.probs.argmax()
    }

    /// `1 - err`: whether the predicted class equals the label.
    pub fn is_correct(&self) -> bool {
        self.predicted() == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<PredictionRecord>,
    k: usize,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        let k = records.first().map_or(0, PredictionRecord::k);
        if let Some(i) = records.iter().position(|r| r.k() != k) {
            return Err(Error::Validation(format!(
                "record {i} has {} classes, expected {k}",
                records[i].k()
            )));
        }
        Ok(Dataset {
            records,
            k,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records
    }

    /// Class count; zero for an empty dataset.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_logits(&self) -> bool {
        self.records.iter().all(|r| r.logits.is_some())
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.ensure_non_empty()?;
        let correct = self.records.iter().filter(|r| r.is_correct()).count();
        Ok(correct as f64 / self.len() as f64)
    }

    /// Fill missing logits with `ln(max(p, epsilon))`.
    pub fn recover_logits(&mut self, epsilon: f64) -> Result<()> {
        for r in &mut self.records {
            if r.logits.is_none() {
                r.logits = Some(probs_to_logits(&r.probs, epsilon)?);
            }
        }
        Ok(())
    }

    pub(crate) fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Validation("dataset is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guess from a file extension, defaulting to JSON lines.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Jsonl => "jsonl",
            Format::Csv => "csv",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "jsonlines" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Repair probability rows whose sum is off by at most 1e-3.
    pub renormalize: bool,
    /// When set, records without logits get `ln(max(p, epsilon))`.
    pub recover_logits: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    metadata: BTreeMap<String, String>,
}

fn build_record(
    logits: Option<Vec<f64>>,
    probs: Option<Vec<f64>>,
    label: usize,
    domain: Option<String>,
    opts: &ReadOptions,
) -> Result<PredictionRecord> {
    let logits = logits.map(LogitVector::new).transpose()?;
    let probs = match (probs, &logits) {
        (Some(p), _) => checked_probs(p, opts.renormalize)?,
        (None, Some(z)) => softmax_temperature(z, 1.0)?,
        (None, None) => {
            return Err(Error::Validation(
                "record needs `logits` or `probs`".into(),
            ))
        }
    };
    let mut rec = PredictionRecord::new(logits, probs, label, domain)?;
    if rec.logits.is_none() {
        if let Some(eps) = opts.recover_logits {
            rec.logits = Some(probs_to_logits(&rec.probs, eps)?);
        }
    }
    Ok(rec)
}

fn checked_probs(p: Vec<f64>, renormalize: bool) -> Result<ProbVector> {
    if !renormalize {
        return ProbVector::new(p);
    }
    measures::validate_probs(&p, RENORMALIZE_TOLERANCE)?;
    let s: f64 = p.iter().sum();
    ProbVector::new(p.into_iter().map(|x| x / s).collect())
}

pub fn read_dataset(path: impl AsRef<Path>, format: Format, opts: ReadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Jsonl => read_jsonl(path, BufReader::new(file), &opts),
        Format::Csv => read_csv(path, BufReader::new(file), &opts),
    }
}

fn parse_err(path: &Path, line: usize, e: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn read_jsonl(path: &Path, reader: impl BufRead, opts: &ReadOptions) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut metadata = BTreeMap::new();
    let mut k = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if records.is_empty() && metadata.is_empty() {
            if let Ok(h) = serde_json::from_str::<JsonHeader>(&line) {
                metadata = h.metadata;
                continue;
            }
        }
        let raw: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?;
        let rec = build_record(raw.logits, raw.probs, raw.label, raw.domain, opts)
            .map_err(|e| parse_err(path, lineno, e))?;
        check_k(path, lineno, &mut k, rec.k())?;
        records.push(rec);
    }
    let mut ds = Dataset::new(records)?;
    ds.metadata = metadata;
    Ok(ds)
}

fn check_k(path: &Path, line: usize, k: &mut Option<usize>, got: usize) -> Result<()> {
    match *k {
        None => *k = Some(got),
        Some(want) if want != got => {
            return Err(parse_err(
                path,
                line,
                format!("record has {got} classes, expected {want}"),
            ))
        }
        _ => {}
    }
    Ok(())
}

struct CsvLayout {
    logits: Vec<usize>,
    probs: Vec<usize>,
    label: usize,
    domain: Option<usize>,
}

impl CsvLayout {
    fn from_header(header: &csv::StringRecord) -> std::result::Result<Self, String> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let series = |prefix: &str| {
            (0..)
                .map_while(|i| find(&format!("{prefix}_{i}")))
                .collect::<Vec<_>>()
        };
        let logits = series("logit");
        let probs = series("prob");
        if logits.is_empty() && probs.is_empty() {
            return Err("header needs logit_i or prob_i columns".into());
        }
        if !logits.is_empty() && !probs.is_empty() && logits.len() != probs.len() {
            return Err(format!(
                "{} logit columns but {} prob columns",
                logits.len(),
                probs.len()
            ));
        }
        let label = find("label").ok_or("header has no `label` column")?;
        Ok(CsvLayout {
            logits,
            probs,
            label,
            domain: find("domain"),
        })
    }
}

fn read_csv(path: &Path, mut reader: impl BufRead, opts: &ReadOptions) -> Result<Dataset> {
    let mut metadata = BTreeMap::new();
    let mut lineno = 0;
    // Leading `# key=value` lines hold the metadata.
    let mut rest = String::new();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        match line.strip_prefix('#') {
            Some(meta) => {
                if let Some((key, value)) = meta.trim().split_once('=') {
                    metadata.insert(key.trim().to_string(), value.trim().to_string());
                }
            }
            None => {
                rest = line;
                break;
            }
        }
    }
    let header_line = lineno;
    let chained = std::io::Cursor::new(rest).chain(reader);
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(chained);
    let header = csv.headers().map_err(|e| parse_err(path, header_line, e))?.clone();
    if header.is_empty() {
        return Err(parse_err(path, header_line.max(1), "missing header row"));
    }
    let layout = CsvLayout::from_header(&header).map_err(|e| parse_err(path, header_line, e))?;

    let mut records = Vec::new();
    let mut k = None;
    for (i, row) in csv.records().enumerate() {
        let line = header_line + i + 1;
        let row = row.map_err(|e| parse_err(path, line, e))?;
        let rec = csv_row(&row, &layout, opts).map_err(|e| parse_err(path, line, e))?;
        check_k(path, line, &mut k, rec.k())?;
        records.push(rec);
    }
    let mut ds = Dataset::new(records)?;
    ds.metadata = metadata;
    Ok(ds)
}

fn csv_row(row: &csv::StringRecord, layout: &CsvLayout, opts: &ReadOptions) -> Result<PredictionRecord> {
    let cell = |i: usize| row.get(i).unwrap_or("").trim();
    let numbers = |cols: &[usize]| -> Result<Option<Vec<f64>>> {
        if cols.is_empty() || cols.iter().all(|&c| cell(c).is_empty()) {
            return Ok(None);
        }
        cols.iter()
            .map(|&c| {
                cell(c)
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("column {c}: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    };
    let logits = numbers(&layout.logits)?;
    let probs = numbers(&layout.probs)?;
    let label = cell(layout.label)
        .parse::<usize>()
        .map_err(|e| Error::Validation(format!("label: {e}")))?;
    let domain = layout
        .domain
        .map(|c| cell(c).to_string())
        .filter(|d| !d.is_empty());
    build_record(logits, probs, label, domain, opts)
}

/// Write `contents` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Jsonl => encode_jsonl(dataset),
        Format::Csv => encode_csv(dataset)?,
    };
    write_atomic(path.as_ref(), &bytes)
}

pub(crate) fn encode_jsonl(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    if !dataset.metadata.is_empty() {
        let header = JsonHeader {
            metadata: dataset.metadata.clone(),
        };
        serde_json::to_writer(&mut out, &header).expect("serializing to memory");
        out.push(b'\n');
    }
    for r in dataset.records() {
        let raw = JsonRecord {
            logits: r.logits.as_ref().map(|z| z.as_slice().to_vec()),
            probs: Some(r.probs.as_slice().to_vec()),
            label: r.label,
            domain: r.domain.clone(),
        };
        serde_json::to_writer(&mut out, &raw).expect("serializing to memory");
        out.push(b'\n');
    }
    out
}

fn encode_csv(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (key, value) in &dataset.metadata {
        if key.contains('=') || key.contains('\n') || value.contains('\n') {
            return Err(Error::Validation(format!(
                "metadata entry `{key}` cannot be stored in a CSV comment"
            )));
        }
        writeln!(out, "# {key}={value}").expect("writing to memory");
    }
    let k = dataset.k().max(2);
    let with_logits = dataset.records().iter().any(|r| r.logits.is_some());
    let with_domain = dataset.records().iter().any(|r| r.domain.is_some());

    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = Vec::new();
    if with_logits {
        header.extend((0..k).map(|i| format!("logit_{i}")));
    }
    header.extend((0..k).map(|i| format!("prob_{i}")));
    header.push("label".into());
    if with_domain {
        header.push("domain".into());
    }
    let csv_err = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in dataset.records() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if with_logits {
            match &r.logits {
                Some(z) => row.extend(z.as_slice().iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(String::new(), k)),
            }
        }
        row.extend(r.probs.as_slice().iter().map(f64::to_string));
        row.push(r.label.to_string());
        if with_domain {
            row.push(r.domain.clone().unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_with(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn read_str(contents: &str, format: Format, opts: ReadOptions) -> Result<Dataset> {
        let f = temp_with(contents, ".tmp");
        read_dataset(f.path(), format, opts)
    }

    #[test]
    fn jsonl_probs_line() {
        let ds = read_str("{\"probs\":[0.7,0.3],\"label\":0}\n", Format::Jsonl, ReadOptions::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.records()[0].is_correct());
        assert!(ds.records()[0].logits.is_none());
    }

    #[test]
    fn jsonl_logits_line() {
        let ds = read_str("{\"logits\":[2.0,0.0,0.0],\"label\":1}", Format::Jsonl, ReadOptions::default()).unwrap();
        let r = &ds.records()[0];
        // softmax([2, 0, 0]) computed independently with scipy.
        let want = [0.786_986_04, 0.106_506_98, 0.106_506_98];
        for (a, b) in r.probs.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(!r.is_correct());
    }

    #[test]
    fn bad_sum_reports_line_number() {
        let text = "{\"probs\":[0.5,0.5],\"label\":0}\n{\"probs\":[0.6,0.3],\"label\":0}\n";
        match read_str(text, Format::Jsonl, ReadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        // 0.9 is beyond the renormalization window as well.
        let opts = ReadOptions { renormalize: true, ..Default::default() };
        assert!(read_str(text, Format::Jsonl, opts).is_err());
    }

    #[test]
    fn renormalize_repairs_small_drift() {
        let text = "{\"probs\":[0.6005,0.4],\"label\":0}\n";
        assert!(read_str(text, Format::Jsonl, ReadOptions::default()).is_err());
        let opts = ReadOptions { renormalize: true, ..Default::default() };
        let ds = read_str(text, Format::Jsonl, opts).unwrap();
        let s: f64 = ds.records()[0].probs.as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_structural_errors() {
        let cases = [
            ("{\"probs\":[0.5,0.5],\"label\":2}", 1),
            ("{\"label\":0}", 1),
            ("{\"probs\":[0.5,0.5],\"label\":0}\n{\"probs\":[0.2,0.3,0.5],\"label\":0}", 2),
            ("not json", 1),
            ("{\"logits\":[0.0,0.0],\"probs\":[0.9,0.1],\"label\":0}", 1),
        ];
        for (text, want) in cases {
            match read_str(text, Format::Jsonl, ReadOptions::default()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn csv_reads_probs_and_logits() {
        let text = "# split=ood\nprob_0,prob_1,label,domain\n0.7,0.3,0,r1\n0.4,0.6,0,\n";
        let ds = read_str(text, Format::Csv, ReadOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.metadata["split"], "ood");
        assert_eq!(ds.records()[0].domain.as_deref(), Some("r1"));
        assert_eq!(ds.records()[1].domain, None);
        assert_eq!(ds.accuracy().unwrap(), 0.5);

        let text = "logit_0,logit_1,logit_2,label\n2,0,0,1\n";
        let ds = read_str(text, Format::Csv, ReadOptions::default()).unwrap();
        assert!(ds.has_logits());
        assert!(!ds.records()[0].is_correct());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "# a=b\nprob_0,prob_1,label\n0.5,0.5,0\n0.5,0.4,0\n";
        match read_str(text, Format::Csv, ReadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(read_str("label\n0\n", Format::Csv, ReadOptions::default()).is_err());
        assert!(read_str("prob_0,prob_1\n0.5,0.5\n", Format::Csv, ReadOptions::default()).is_err());
    }

    #[test]
    fn logit_recovery_at_read() {
        let opts = ReadOptions { recover_logits: Some(1e-12), ..Default::default() };
        let ds = read_str("{\"probs\":[0.7,0.3],\"label\":0}", Format::Jsonl, opts).unwrap();
        assert!(ds.has_logits());
    }

    fn sample() -> Dataset {
        let recs = vec![
            PredictionRecord::from_logits(LogitVector::new(vec![0.3, -1.2, 2.5]).unwrap(), 2)
                .unwrap()
                .with_domain("reviewer-7"),
            PredictionRecord::from_probs(ProbVector::new(vec![0.1, 0.2, 0.7]).unwrap(), 0).unwrap(),
            PredictionRecord::from_probs(ProbVector::new(vec![1.0 / 3.0; 3]).unwrap(), 1).unwrap(),
        ];
        Dataset::new(recs).unwrap().with_metadata("split", "validation").with_metadata("seed", 7)
    }

    #[test]
    fn round_trip_both_formats() {
        let ds = sample();
        for format in [Format::Jsonl, Format::Csv] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join(format!("d.{format}"));
            write_dataset(&ds, &path, format).unwrap();
            let back = read_dataset(&path, format, ReadOptions::default()).unwrap();
            assert_eq!(back, ds, "{format}");
        }
    }

    #[test]
    fn empty_dataset_writes_and_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_dataset(&Dataset::default(), &path, Format::Jsonl).unwrap();
        let ds = read_dataset(&path, Format::Jsonl, ReadOptions::default()).unwrap();
        assert!(ds.is_empty());
        assert!(ds.accuracy().is_err());
    }

    #[test]
    fn mixed_class_counts_rejected() {
        let a = PredictionRecord::from_probs(ProbVector::uniform(2).unwrap(), 0).unwrap();
        let b = PredictionRecord::from_probs(ProbVector::uniform(3).unwrap(), 0).unwrap();
        assert!(Dataset::new(vec![a, b]).is_err());
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(Format::from_path(Path::new("x.csv")), Format::Csv);
        assert_eq!(Format::from_path(Path::new("x.jsonl")), Format::Jsonl);
    }
}
