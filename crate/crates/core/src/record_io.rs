//! ECG record files, lead subsets and dataset manifests.
//!
//! Records use a small subset of WFDB: a text header plus a single
//! format-16 signal file (signed 16-bit little-endian, sample-interleaved).
//!
//! ```text
//! S0001 2 500 5000
//! S0001.dat 16 1000 0 I
//! S0001.dat 16 1000 0 II
//! # Age: 63
//! # Sex: Female
//! # Dx: 426783006,251146004
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: signal file holds {actual} bytes, header declares {expected}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("lead {0} not present in record")]
    MissingLead(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("no parseable records under {0}")]
    EmptyDataset(PathBuf),
    #[error("duplicate record id {0}")]
    DuplicateRecord(String),
    #[error("class map {path}: {msg}")]
    ClassMap { path: PathBuf, msg: String },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Sex {
    Male,
    Female,
    #[default]
    Unknown,
}

impl Sex {
    fn as_header(self) -> &'static str {
        match self {
            Sex::Male => "Male",
            Sex::Female => "Female",
            Sex::Unknown => "Unknown",
        }
    }

    fn from_header(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Sex::Male,
            "female" | "f" => Sex::Female,
            _ => Sex::Unknown,
        }
    }
}

/// One multi-lead recording in physical units (millivolts).
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub sampling_rate_hz: f64,
    /// `signal[lead][sample]`
    pub signal: Vec<Vec<f64>>,
    pub lead_names: Vec<String>,
    pub age_years: Option<f64>,
    pub sex: Sex,
    pub dx_codes: BTreeSet<String>,
}

impl EcgRecord {
    pub fn num_leads(&self) -> usize {
        self.signal.len()
    }

    pub fn num_samples(&self) -> usize {
        self.signal.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sampling_rate_hz
    }

    pub fn lead(&self, name: &str) -> Option<&[f64]> {
        self.lead_names
            .iter()
            .position(|l| l == name)
            .map(|i| self.signal[i].as_slice())
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let invalid = |m: String| Err(RecordError::InvalidRecord(format!("{}: {m}", self.record_id)));
        if self.record_id.is_empty() || self.record_id.contains(char::is_whitespace) {
            return invalid("record id must be non-empty without whitespace".into());
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return invalid(format!("sampling rate {} must be positive", self.sampling_rate_hz));
        }
        if self.signal.len() != self.lead_names.len() || self.signal.is_empty() {
            return invalid(format!(
                "{} signal rows for {} lead names",
                self.signal.len(),
                self.lead_names.len()
            ));
        }
        let n = self.num_samples();
        if n == 0 || self.signal.iter().any(|row| row.len() != n) {
            return invalid("leads must share a non-zero sample count".into());
        }
        let unique: HashSet<_> = self.lead_names.iter().collect();
        if unique.len() != self.lead_names.len() {
            return invalid("lead names must be unique".into());
        }
        if self.lead_names.iter().any(|l| l.is_empty() || l.contains(char::is_whitespace)) {
            return invalid("lead names must be non-empty without whitespace".into());
        }
        if self.signal.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("signal contains non-finite values".into());
        }
        Ok(())
    }
}

pub const STANDARD_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeadSubsetName {
    Twelve,
    Six,
    Four,
    Three,
    Two,
    Custom,
}

/// An ordered selection of leads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeadSubset {
    pub name: LeadSubsetName,
    pub leads: Vec<String>,
}

impl LeadSubset {
    fn named(name: LeadSubsetName, leads: &[&str]) -> Self {
        Self {
            name,
            leads: leads.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn twelve() -> Self {
        Self::named(LeadSubsetName::Twelve, &STANDARD_LEADS)
    }

    pub fn six() -> Self {
        Self::named(LeadSubsetName::Six, &["I", "II", "III", "aVR", "aVL", "aVF"])
    }

    pub fn four() -> Self {
        Self::named(LeadSubsetName::Four, &["I", "II", "III", "V2"])
    }

    pub fn three() -> Self {
        Self::named(LeadSubsetName::Three, &["I", "II", "V2"])
    }

    pub fn two() -> Self {
        Self::named(LeadSubsetName::Two, &["I", "II"])
    }

    pub fn custom(leads: Vec<String>) -> Result<Self, RecordError> {
        if leads.is_empty() {
            return Err(RecordError::InvalidRecord("lead subset must not be empty".into()));
        }
        Ok(Self {
            name: LeadSubsetName::Custom,
            leads,
        })
    }

    /// The five standard subsets, largest first.
    pub fn standard() -> [Self; 5] {
        [Self::twelve(), Self::six(), Self::four(), Self::three(), Self::two()]
    }

    /// Accepts `twelve`/`12`, `six`/`6`, ... or a comma-separated lead list.
    pub fn parse(spec: &str) -> Result<Self, RecordError> {
        match spec.trim().to_ascii_lowercase().as_str() {
            "twelve" | "12" => Ok(Self::twelve()),
            "six" | "6" => Ok(Self::six()),
            "four" | "4" => Ok(Self::four()),
            "three" | "3" => Ok(Self::three()),
            "two" | "2" => Ok(Self::two()),
            _ => Self::custom(
                spec.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
            ),
        }
    }

    pub fn label(&self) -> String {
        match self.name {
            LeadSubsetName::Twelve => "twelve".into(),
            LeadSubsetName::Six => "six".into(),
            LeadSubsetName::Four => "four".into(),
            LeadSubsetName::Three => "three".into(),
            LeadSubsetName::Two => "two".into(),
            LeadSubsetName::Custom => self.leads.join(","),
        }
    }

    pub fn len(&self) -> usize {
        self.leads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leads.is_empty()
    }
}

/// Restricts `record` to `subset`, in subset order.
pub fn select_leads(record: &EcgRecord, subset: &LeadSubset) -> Result<EcgRecord, RecordError> {
    let mut signal = Vec::with_capacity(subset.len());
    for lead in &subset.leads {
        let row = record
            .lead(lead)
            .ok_or_else(|| RecordError::MissingLead(lead.clone()))?;
        signal.push(row.to_vec());
    }
    Ok(EcgRecord {
        signal,
        lead_names: subset.leads.clone(),
        ..record.clone()
    })
}

/// Per-lead calibration declared in a header.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadSpec {
    pub file_name: String,
    pub gain: f64,
    pub baseline: i32,
    pub name: String,
}

/// Everything in a header file except the samples themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub record_id: String,
    pub sampling_rate_hz: f64,
    pub num_samples: usize,
    pub leads: Vec<LeadSpec>,
    pub age_years: Option<f64>,
    pub sex: Sex,
    pub dx_codes: BTreeSet<String>,
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    field: &str,
    what: &str,
) -> Result<T, RecordError> {
    field.parse().map_err(|_| RecordError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid {what} {field:?}"),
    })
}

pub fn parse_header(header_path: &Path) -> Result<RecordHeader, RecordError> {
    let text = fs::read_to_string(header_path).map_err(io_err(header_path))?;
    parse_header_text(header_path, &text)
}

fn parse_header_text(path: &Path, text: &str) -> Result<RecordHeader, RecordError> {
    let parse_err = |line: usize, msg: String| RecordError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut record_line: Option<(usize, Vec<&str>)> = None;
    let mut leads = Vec::new();
    let mut declared_leads = 0usize;
    let mut age_years = None;
    let mut sex = Sex::Unknown;
    let mut dx_codes = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let Some((key, value)) = comment.split_once(':') else {
                continue;
            };
            let value = value.trim();
            match key.trim().to_ascii_lowercase().as_str() {
                "age" => {
                    age_years = if value.eq_ignore_ascii_case("nan") || value.is_empty() {
                        None
                    } else {
                        let age: f64 = parse_field(path, line_no, value, "age")?;
                        age.is_finite().then_some(age)
                    }
                }
                "sex" => sex = Sex::from_header(value),
                "dx" => {
                    dx_codes = value
                        .split(',')
                        .map(str::trim)
                        .filter(|c| !c.is_empty())
                        .map(String::from)
                        .collect()
                }
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if record_line.is_none() {
            // Trailing base time and date are ignored.
            if fields.len() < 4 {
                return Err(parse_err(
                    line_no,
                    format!("record line needs at least 4 fields, found {}", fields.len()),
                ));
            }
            declared_leads = parse_field(path, line_no, fields[1], "lead count")?;
            if declared_leads == 0 {
                return Err(parse_err(line_no, "lead count must be positive".into()));
            }
            record_line = Some((line_no, fields));
            continue;
        }
        if leads.len() >= declared_leads {
            return Err(parse_err(line_no, format!("unexpected line after {declared_leads} signal lines")));
        }
        // Short form: file format gain baseline name.
        // Full WFDB form: file format gain[(baseline)][/units] adc_res adc_zero init checksum block_size name.
        let (baseline_field, name) = match fields.len() {
            5 => (fields[3], fields[4]),
            9 => (fields[4], fields[8]),
            n => {
                return Err(parse_err(
                    line_no,
                    format!("signal line needs 5 or 9 fields, found {n}"),
                ))
            }
        };
        let format: u32 = parse_field(path, line_no, fields[1], "format")?;
        if format != 16 {
            return Err(RecordError::Format {
                path: path.to_path_buf(),
                msg: format!("line {line_no}: only format 16 is supported, got {format}"),
            });
        }
        let gain_spec = fields[2].split('/').next().unwrap_or(fields[2]);
        let (gain_field, explicit_baseline) = match gain_spec.split_once('(') {
            Some((g, rest)) => (g, Some(rest.trim_end_matches(')'))),
            None => (gain_spec, None),
        };
        let gain: f64 = parse_field(path, line_no, gain_field, "gain")?;
        if gain == 0.0 || !gain.is_finite() {
            return Err(RecordError::Format {
                path: path.to_path_buf(),
                msg: format!("line {line_no}: gain must be non-zero and finite"),
            });
        }
        let baseline: i32 = parse_field(path, line_no, explicit_baseline.unwrap_or(baseline_field), "baseline")?;
        leads.push(LeadSpec {
            file_name: fields[0].to_string(),
            gain,
            baseline,
            name: name.to_string(),
        });
    }

    let (line_no, fields) = record_line.ok_or_else(|| parse_err(1, "missing record line".into()))?;
    if leads.len() != declared_leads {
        return Err(parse_err(
            line_no,
            format!("declares {declared_leads} leads but lists {}", leads.len()),
        ));
    }
    let sampling_rate_hz: f64 = parse_field(path, line_no, fields[2], "sampling rate")?;
    if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
        return Err(parse_err(line_no, "sampling rate must be positive".into()));
    }
    let num_samples: usize = parse_field(path, line_no, fields[3], "sample count")?;
    if num_samples == 0 {
        return Err(parse_err(line_no, "sample count must be positive".into()));
    }
    if leads.iter().any(|l| l.file_name != leads[0].file_name) {
        return Err(RecordError::Format {
            path: path.to_path_buf(),
            msg: "all leads must share one signal file".into(),
        });
    }
    let unique: HashSet<_> = leads.iter().map(|l| &l.name).collect();
    if unique.len() != leads.len() {
        return Err(RecordError::Format {
            path: path.to_path_buf(),
            msg: "duplicate lead names".into(),
        });
    }
    Ok(RecordHeader {
        record_id: fields[0].to_string(),
        sampling_rate_hz,
        num_samples,
        leads,
        age_years,
        sex,
        dx_codes,
    })
}

/// Reads a header and its signal file, converting samples to millivolts.
pub fn parse_record(header_path: &Path) -> Result<EcgRecord, RecordError> {
    let header = parse_header(header_path)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let signal_path = dir.join(&header.leads[0].file_name);
    let bytes = fs::read(&signal_path).map_err(io_err(&signal_path))?;
    let num_leads = header.leads.len();
    let expected = (header.num_samples * num_leads * 2) as u64;
    if bytes.len() as u64 != expected {
        return Err(RecordError::Truncated {
            path: signal_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut signal = vec![Vec::with_capacity(header.num_samples); num_leads];
    for frame in bytes.chunks_exact(num_leads * 2) {
        for (lead, (spec, raw)) in header.leads.iter().zip(frame.chunks_exact(2)).enumerate() {
            let adc = i16::from_le_bytes([raw[0], raw[1]]);
            signal[lead].push((f64::from(adc) - f64::from(spec.baseline)) / spec.gain);
        }
    }
    Ok(EcgRecord {
        record_id: header.record_id,
        sampling_rate_hz: header.sampling_rate_hz,
        signal,
        lead_names: header.leads.into_iter().map(|l| l.name).collect(),
        age_years: header.age_years,
        sex: header.sex,
        dx_codes: header.dx_codes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteOptions {
    /// ADC units per millivolt, shared by all leads.
    pub gain: f64,
    pub baseline: i16,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            gain: 1000.0,
            baseline: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrittenRecord {
    pub header_path: PathBuf,
    pub signal_path: PathBuf,
    /// Samples clipped to the 16-bit ADC range.
    pub saturated: usize,
}

/// Writes `<record_id>.hea` and `<record_id>.dat` into `dir`.
pub fn write_record(record: &EcgRecord, dir: &Path, options: WriteOptions) -> Result<WrittenRecord, RecordError> {
    record.validate()?;
    if options.gain == 0.0 || !options.gain.is_finite() {
        return Err(RecordError::InvalidRecord("gain must be non-zero and finite".into()));
    }
    let signal_name = format!("{}.dat", record.record_id);
    let header_path = dir.join(format!("{}.hea", record.record_id));
    let signal_path = dir.join(&signal_name);

    let mut header = String::new();
    let _ = writeln!(
        header,
        "{} {} {} {}",
        record.record_id,
        record.num_leads(),
        record.sampling_rate_hz,
        record.num_samples()
    );
    for lead in &record.lead_names {
        let _ = writeln!(header, "{signal_name} 16 {} {} {lead}", options.gain, options.baseline);
    }
    match record.age_years {
        Some(age) => {
            let _ = writeln!(header, "# Age: {age}");
        }
        None => header.push_str("# Age: NaN\n"),
    }
    let _ = writeln!(header, "# Sex: {}", record.sex.as_header());
    let codes: Vec<&str> = record.dx_codes.iter().map(String::as_str).collect();
    let _ = writeln!(header, "# Dx: {}", codes.join(","));

    let mut saturated = 0;
    let mut bytes = Vec::with_capacity(record.num_samples() * record.num_leads() * 2);
    for s in 0..record.num_samples() {
        for row in &record.signal {
            let adc = (row[s] * options.gain).round() + f64::from(options.baseline);
            let clipped = adc.clamp(f64::from(i16::MIN), f64::from(i16::MAX));
            if clipped != adc {
                saturated += 1;
            }
            bytes.extend_from_slice(&(clipped as i16).to_le_bytes());
        }
    }
    fs::write(&header_path, header).map_err(io_err(&header_path))?;
    fs::write(&signal_path, bytes).map_err(io_err(&signal_path))?;
    Ok(WrittenRecord {
        header_path,
        signal_path,
        saturated,
    })
}

/// Maps raw diagnosis codes onto an ordered list of classes. Several codes
/// may share one class (equivalent diagnoses).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    class_codes: Vec<String>,
    code_to_class: BTreeMap<String, usize>,
}

impl ClassMap {
    pub fn new(class_codes: Vec<String>, code_to_class: BTreeMap<String, usize>) -> Result<Self, String> {
        if class_codes.is_empty() {
            return Err("no classes".into());
        }
        if let Some((code, idx)) = code_to_class.iter().find(|(_, i)| **i >= class_codes.len()) {
            return Err(format!("code {code} maps to class index {idx} out of range"));
        }
        Ok(Self {
            class_codes,
            code_to_class,
        })
    }

    /// Each class maps only its own code.
    pub fn identity(class_codes: Vec<String>) -> Self {
        let code_to_class = class_codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self {
            class_codes,
            code_to_class,
        }
    }

    /// Parses `code,class_index,class_code` rows; a leading header row is allowed.
    pub fn from_csv_str(text: &str) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut by_index: BTreeMap<usize, String> = BTreeMap::new();
        let mut code_to_class = BTreeMap::new();
        for (row_no, row) in reader.records().enumerate() {
            let row = row.map_err(|e| e.to_string())?;
            if row.len() != 3 {
                return Err(format!("row {}: expected 3 fields, got {}", row_no + 1, row.len()));
            }
            if row_no == 0 && row[0].eq_ignore_ascii_case("code") {
                continue;
            }
            let index: usize = row[1]
                .parse()
                .map_err(|_| format!("row {}: bad class index {:?}", row_no + 1, &row[1]))?;
            let class_code = row[2].to_string();
            match by_index.get(&index) {
                Some(existing) if *existing != class_code => {
                    return Err(format!(
                        "row {}: class index {index} named both {existing} and {class_code}",
                        row_no + 1
                    ))
                }
                _ => {
                    by_index.insert(index, class_code);
                }
            }
            if code_to_class.insert(row[0].to_string(), index).is_some_and(|prev| prev != index) {
                return Err(format!("row {}: code {} mapped twice", row_no + 1, &row[0]));
            }
        }
        if by_index.keys().copied().ne(0..by_index.len()) {
            return Err("class indices must be contiguous from 0".into());
        }
        Self::new(by_index.into_values().collect(), code_to_class)
    }

    pub fn load(path: &Path) -> Result<Self, RecordError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_csv_str(&text).map_err(|msg| RecordError::ClassMap {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("code,class_index,class_code\n");
        let mut rows: Vec<(usize, &String)> = self.code_to_class.iter().map(|(c, i)| (*i, c)).collect();
        rows.sort();
        for (idx, code) in rows {
            let _ = writeln!(out, "{code},{idx},{}", self.class_codes[idx]);
        }
        out
    }

    pub fn class_codes(&self) -> &[String] {
        &self.class_codes
    }

    pub fn num_classes(&self) -> usize {
        self.class_codes.len()
    }

    pub fn class_of(&self, code: &str) -> Option<usize> {
        self.code_to_class.get(code).copied()
    }

    pub fn index_of_class(&self, class_code: &str) -> Option<usize> {
        self.class_codes.iter().position(|c| c == class_code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnlabeledPolicy {
    /// Keep records with no mapped diagnosis as all-zero label rows.
    #[default]
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub record_id: String,
    pub header_path: PathBuf,
    pub dx_codes: BTreeSet<String>,
    pub num_samples: usize,
    pub sampling_rate_hz: f64,
    /// Class indices the diagnosis codes map to.
    pub labels: BTreeSet<usize>,
    /// Diagnosis codes absent from the class map.
    pub unmapped: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_list: Vec<String>,
    /// Headers found under the root that failed to parse.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_list.len()
    }

    /// `labels[record][class]`
    pub fn label_matrix(&self) -> Vec<Vec<bool>> {
        self.entries
            .iter()
            .map(|e| (0..self.class_list.len()).map(|c| e.labels.contains(&c)).collect())
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_list.len()];
        for e in &self.entries {
            for &c in &e.labels {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn apply_unlabeled_policy(mut self, policy: UnlabeledPolicy) -> Self {
        if policy == UnlabeledPolicy::Exclude {
            self.entries.retain(|e| !e.labels.is_empty());
        }
        self
    }

    pub fn index_of(&self, record_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.record_id == record_id)
    }

    /// Writes the manifest as CSV; the class list rides on a leading comment line.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("# classes: {}\n", self.class_list.join(";"));
        out.push_str("record_id,header_path,num_samples,sampling_rate_hz,dx_codes,labels,unmapped\n");
        for e in &self.entries {
            let join = |it: &mut dyn Iterator<Item = &str>| it.collect::<Vec<_>>().join(";");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.record_id,
                e.header_path.display(),
                e.num_samples,
                e.sampling_rate_hz,
                join(&mut e.dx_codes.iter().map(String::as_str)),
                join(&mut e.labels.iter().map(|&c| self.class_list[c].as_str())),
                join(&mut e.unmapped.iter().map(String::as_str)),
            );
        }
        out
    }

    pub fn from_csv_str(path: &Path, text: &str) -> Result<Self, RecordError> {
        let bad = |msg: String| RecordError::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        let (first, rest) = text.split_once('\n').ok_or_else(|| bad("empty manifest".into()))?;
        let class_list: Vec<String> = first
            .strip_prefix("# classes:")
            .ok_or_else(|| bad("missing '# classes:' line".into()))?
            .trim()
            .split(';')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let class_index: BTreeMap<&str, usize> =
            class_list.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let split = |s: &str| -> BTreeSet<String> {
            s.split(';').filter(|x| !x.is_empty()).map(String::from).collect()
        };
        let mut reader = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            if row.len() != 7 {
                return Err(bad(format!("expected 7 fields, got {}", row.len())));
            }
            let labels = split(&row[5])
                .iter()
                .map(|c| {
                    class_index
                        .get(c.as_str())
                        .copied()
                        .ok_or_else(|| bad(format!("label {c} not in class list")))
                })
                .collect::<Result<_, _>>()?;
            entries.push(ManifestEntry {
                record_id: row[0].to_string(),
                header_path: PathBuf::from(&row[1]),
                num_samples: row[2].parse().map_err(|_| bad(format!("bad num_samples {:?}", &row[2])))?,
                sampling_rate_hz: row[3]
                    .parse()
                    .map_err(|_| bad(format!("bad sampling rate {:?}", &row[3])))?,
                dx_codes: split(&row[4]),
                labels,
                unmapped: split(&row[6]),
            });
        }
        Ok(Self {
            entries,
            class_list,
            skipped: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RecordError> {
        fs::write(path, self.to_csv_string()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, RecordError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_csv_str(path, &text)
    }
}

/// Scans `root_dir` recursively for `.hea` files and labels each record
/// through `class_map`. Entries are ordered by record id.
pub fn build_manifest_with(root_dir: &Path, class_map: &ClassMap) -> Result<DatasetManifest, RecordError> {
    let mut headers: Vec<PathBuf> = WalkDir::new(root_dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "hea"))
        .map(|e| e.into_path())
        .collect();
    headers.sort();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for path in headers {
        match parse_header(&path) {
            Ok(h) => {
                let mut labels = BTreeSet::new();
                let mut unmapped = BTreeSet::new();
                for code in &h.dx_codes {
                    match class_map.class_of(code) {
                        Some(c) => {
                            labels.insert(c);
                        }
                        None => {
                            unmapped.insert(code.clone());
                        }
                    }
                }
                entries.push(ManifestEntry {
                    record_id: h.record_id,
                    header_path: path,
                    dx_codes: h.dx_codes,
                    num_samples: h.num_samples,
                    sampling_rate_hz: h.sampling_rate_hz,
                    labels,
                    unmapped,
                });
            }
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    if entries.is_empty() {
        return Err(RecordError::EmptyDataset(root_dir.to_path_buf()));
    }
    entries.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    if let Some(w) = entries.windows(2).find(|w| w[0].record_id == w[1].record_id) {
        return Err(RecordError::DuplicateRecord(w[0].record_id.clone()));
    }
    Ok(DatasetManifest {
        entries,
        class_list: class_map.class_codes().to_vec(),
        skipped,
    })
}

pub fn build_manifest(root_dir: &Path, class_map_path: &Path) -> Result<DatasetManifest, RecordError> {
    build_manifest_with(root_dir, &ClassMap::load(class_map_path)?)
}
