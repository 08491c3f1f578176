//! Labeled vulnerability corpora: ingestion, validation, persistence, splits.
//!
//! A corpus is an ordered collection of [`CodeFunction`]s. Three input
//! schemas are supported: two CSV projections shaped like the BigVul and
//! D2A datasets, and a line-oriented native format (`vulnscope-corpus/1`)
//! that fixtures can be written in by hand. Malformed records are skipped
//! with a per-row reason rather than aborting the whole ingest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Format version written as the first line of a saved corpus.
pub const CORPUS_MAGIC: &str = "vulnscope-corpus/1";

/// CWE classes handled by the classification head, in head-index order.
/// Index 0 is the non-vulnerable class; the rest are the ten CWE codes.
pub const CWE_CLASSES: [u16; 11] = [0, 119, 20, 125, 200, 264, 399, 416, 476, 189, 190];

/// Sentinel code for records labeled vulnerable without a CWE id (D2A-style
/// binary labels). Such samples are excluded from the 10-way classification
/// loss and metrics but still carry a line range for localization.
pub const BINARY_VULN_CODE: u16 = 1;

/// A vulnerability class label: non-vulnerable (0), one of the ten supported
/// CWE codes, or the binary-vulnerable sentinel (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct CweClass(u16);

impl CweClass {
    pub const NON_VULNERABLE: CweClass = CweClass(0);
    pub const BINARY_VULN: CweClass = CweClass(BINARY_VULN_CODE);

    /// Validates `code` against the supported set (the eleven head classes
    /// plus the binary sentinel).
    pub fn from_code(code: u16) -> Result<CweClass> {
        if code == BINARY_VULN_CODE || CWE_CLASSES.contains(&code) {
            Ok(CweClass(code))
        } else {
            Err(Error::invalid(format!("unknown cwe class {code}")))
        }
    }

    pub fn code(self) -> u16 {
        self.0
    }

    /// Position of this class in the classification head's output vector.
    /// `None` for the binary sentinel, which has no 10-way ground truth.
    pub fn head_index(self) -> Option<usize> {
        CWE_CLASSES.iter().position(|&c| c == self.0)
    }

    pub fn from_head_index(idx: usize) -> Result<CweClass> {
        CWE_CLASSES
            .get(idx)
            .map(|&c| CweClass(c))
            .ok_or_else(|| Error::invalid(format!("head index {idx} out of range")))
    }

    pub fn is_vulnerable(self) -> bool {
        self.0 != 0
    }

    /// Whether this label participates in 10-way classification (everything
    /// except the binary sentinel).
    pub fn is_classifiable(self) -> bool {
        self.0 != BINARY_VULN_CODE
    }
}

impl TryFrom<u16> for CweClass {
    type Error = Error;
    fn try_from(code: u16) -> Result<CweClass> {
        CweClass::from_code(code)
    }
}

impl From<CweClass> for u16 {
    fn from(c: CweClass) -> u16 {
        c.0
    }
}

impl fmt::Display for CweClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => write!(f, "non-vulnerable"),
            BINARY_VULN_CODE => write!(f, "vulnerable (no CWE)"),
            c => write!(f, "CWE-{c}"),
        }
    }
}

/// Inclusive 1-based line range, `start ≤ end`, relative to function start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct LineRange {
    start: u32,
    end: u32,
}

impl LineRange {
    pub fn new(start: u32, end: u32) -> Result<LineRange> {
        if start < 1 {
            return Err(Error::invalid("line range must start at 1 or later"));
        }
        if end < start {
            return Err(Error::invalid(format!(
                "inverted range: {start}..{end}"
            )));
        }
        Ok(LineRange { start, end })
    }

    pub fn start(self) -> u32 {
        self.start
    }

    pub fn end(self) -> u32 {
        self.end
    }

    pub fn len(self) -> u32 {
        self.end - self.start + 1
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, line: u32) -> bool {
        self.start <= line && line <= self.end
    }
}

impl TryFrom<(u32, u32)> for LineRange {
    type Error = Error;
    fn try_from(v: (u32, u32)) -> Result<LineRange> {
        LineRange::new(v.0, v.1)
    }
}

impl From<LineRange> for (u32, u32) {
    fn from(r: LineRange) -> (u32, u32) {
        (r.start, r.end)
    }
}

/// Ground-truth label: class plus, for vulnerable classes, the line range.
///
/// The constructor enforces class 0 ⇔ no range: a vulnerable label must say
/// where, a non-vulnerable one must not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabel", into = "RawLabel")]
pub struct VulnLabel {
    class: CweClass,
    range: Option<LineRange>,
}

#[derive(Serialize, Deserialize)]
struct RawLabel {
    class: CweClass,
    range: Option<LineRange>,
}

impl VulnLabel {
    pub fn non_vulnerable() -> VulnLabel {
        VulnLabel {
            class: CweClass::NON_VULNERABLE,
            range: None,
        }
    }

    pub fn vulnerable(class: CweClass, range: LineRange) -> Result<VulnLabel> {
        if !class.is_vulnerable() {
            return Err(Error::invalid(
                "non-vulnerable label must not carry a line range",
            ));
        }
        Ok(VulnLabel {
            class,
            range: Some(range),
        })
    }

    pub fn new(class: CweClass, range: Option<LineRange>) -> Result<VulnLabel> {
        match (class.is_vulnerable(), range) {
            (false, None) => Ok(VulnLabel::non_vulnerable()),
            (false, Some(_)) => Err(Error::invalid(
                "non-vulnerable label must not carry a line range",
            )),
            (true, Some(r)) => VulnLabel::vulnerable(class, r),
            (true, None) => Err(Error::invalid(format!(
                "vulnerable label ({}) requires a line range",
                class
            ))),
        }
    }

    pub fn class(self) -> CweClass {
        self.class
    }

    pub fn range(self) -> Option<LineRange> {
        self.range
    }
}

impl TryFrom<RawLabel> for VulnLabel {
    type Error = Error;
    fn try_from(raw: RawLabel) -> Result<VulnLabel> {
        VulnLabel::new(raw.class, raw.range)
    }
}

impl From<VulnLabel> for RawLabel {
    fn from(l: VulnLabel) -> RawLabel {
        RawLabel {
            class: l.class,
            range: l.range,
        }
    }
}

/// Source language, derived from the file extension (`.cc`, `.cpp`, `.cxx`,
/// `.hpp`, `.hh` → C++; anything else → C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Language {
    C,
    Cpp,
}

/// One function with provenance and an optional ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeFunction {
    pub id: String,
    pub file_path: String,
    /// 1-based line of the function's first line within its source file.
    pub start_line_in_file: u32,
    /// Full function text. Normalized to end with a newline.
    pub source_text: String,
    pub label: Option<VulnLabel>,
}

impl CodeFunction {
    /// Validates and normalizes a function record. The source text gains a
    /// trailing newline if missing, so every line is newline-terminated and
    /// `line_count` counts exactly the visible lines.
    pub fn new(
        id: impl Into<String>,
        file_path: impl Into<String>,
        start_line_in_file: u32,
        source_text: impl Into<String>,
        label: Option<VulnLabel>,
    ) -> Result<CodeFunction> {
        let id = id.into();
        let file_path = file_path.into();
        let mut source_text = source_text.into();

        check_field("id", &id)?;
        check_field("file_path", &file_path)?;
        if start_line_in_file < 1 {
            return Err(Error::invalid("start_line_in_file must be ≥ 1"));
        }
        if source_text.is_empty() {
            return Err(Error::invalid(format!("function {id}: empty source")));
        }
        if !source_text.ends_with('\n') {
            source_text.push('\n');
        }

        let f = CodeFunction {
            id,
            file_path,
            start_line_in_file,
            source_text,
            label,
        };
        if let Some(label) = label {
            if let Some(range) = label.range() {
                let lines = f.line_count();
                if range.end() > lines {
                    return Err(Error::invalid(format!(
                        "function {}: range {}..{} exceeds {} lines",
                        f.id,
                        range.start(),
                        range.end(),
                        lines
                    )));
                }
            }
        }
        Ok(f)
    }

    /// Number of lines in the function (every line is newline-terminated).
    pub fn line_count(&self) -> u32 {
        self.source_text.bytes().filter(|&b| b == b'\n').count() as u32
    }

    /// The text of 1-based line `line`, without its newline.
    pub fn line(&self, line: u32) -> Option<&str> {
        self.source_text
            .lines()
            .nth(line.checked_sub(1)? as usize)
    }

    pub fn language(&self) -> Language {
        let ext = Path::new(&self.file_path)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("");
        match ext {
            "cc" | "cpp" | "cxx" | "hpp" | "hh" => Language::Cpp,
            _ => Language::C,
        }
    }
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid(format!("{name} must be non-empty")));
    }
    if value.contains('\t') || value.contains('\n') {
        return Err(Error::invalid(format!(
            "{name} must not contain tabs or newlines"
        )));
    }
    Ok(())
}

/// An immutable, ordered collection of functions with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    functions: Vec<CodeFunction>,
}

impl Corpus {
    pub fn new(functions: Vec<CodeFunction>) -> Result<Corpus> {
        let mut seen = HashSet::new();
        for f in &functions {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::invalid(format!("duplicate function id {}", f.id)));
            }
        }
        Ok(Corpus { functions })
    }

    pub fn functions(&self) -> &[CodeFunction] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CodeFunction> {
        self.functions.iter().find(|f| f.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CodeFunction> {
        self.functions.iter()
    }
}

/// Input schema accepted by [`ingest_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaKind {
    /// CSV shaped like BigVul: explicit CWE codes.
    BigVul,
    /// CSV shaped like D2A: binary vulnerable/clean labels only.
    D2a,
    /// The crate's own line format (`vulnscope-corpus/1`).
    Native,
}

impl std::str::FromStr for SchemaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<SchemaKind> {
        match s.to_ascii_lowercase().as_str() {
            "bigvul" => Ok(SchemaKind::BigVul),
            "d2a" => Ok(SchemaKind::D2a),
            "native" => Ok(SchemaKind::Native),
            other => Err(Error::invalid(format!("unknown schema {other:?}"))),
        }
    }
}

/// A record that failed validation during ingest, with a 1-based data-row
/// index and the reason it was rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRecord {
    pub row: usize,
    pub reason: String,
}

/// Result of an ingest: the accepted functions plus per-row skip reports.
#[derive(Debug)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedRecord>,
}

/// Reads a dataset file and validates every record. Malformed records are
/// skipped and reported; a missing file or an unreadable header is fatal.
pub fn ingest_corpus(path: &Path, schema: SchemaKind) -> Result<IngestOutcome> {
    match schema {
        SchemaKind::Native => ingest_native(path),
        SchemaKind::BigVul => ingest_csv(path, CsvFlavor::BigVul),
        SchemaKind::D2a => ingest_csv(path, CsvFlavor::D2a),
    }
}

fn collect(records: Vec<(usize, Result<CodeFunction>)>) -> Result<IngestOutcome> {
    let mut functions = Vec::new();
    let mut skipped = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (row, rec) in records {
        match rec {
            Ok(f) => {
                if seen.contains(&f.id) {
                    skipped.push(SkippedRecord {
                        row,
                        reason: format!("duplicate id {}", f.id),
                    });
                } else {
                    seen.insert(f.id.clone());
                    functions.push(f);
                }
            }
            Err(e) => skipped.push(SkippedRecord {
                row,
                reason: e.to_string(),
            }),
        }
    }
    Ok(IngestOutcome {
        corpus: Corpus::new(functions)?,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Native format
// ---------------------------------------------------------------------------

fn format_native_record(f: &CodeFunction) -> String {
    let (class, l_start, l_end) = match f.label {
        None => ("-".to_string(), "-".to_string(), "-".to_string()),
        Some(label) => {
            let class = label.class().code().to_string();
            match label.range() {
                None => (class, "-".to_string(), "-".to_string()),
                Some(r) => (class, r.start().to_string(), r.end().to_string()),
            }
        }
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        f.id,
        f.file_path,
        f.start_line_in_file,
        class,
        l_start,
        l_end,
        B64.encode(f.source_text.as_bytes())
    )
}

fn parse_native_record(line: &str) -> Result<CodeFunction> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(Error::format(format!(
            "expected 7 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let id = fields[0];
    let file_path = fields[1];
    let start_line: u32 = fields[2]
        .parse()
        .map_err(|_| Error::format(format!("bad start_line_in_file {:?}", fields[2])))?;
    let label = parse_label_fields(fields[3], fields[4], fields[5])?;
    let source = B64
        .decode(fields[6])
        .map_err(|e| Error::format(format!("bad source_b64: {e}")))?;
    let source = String::from_utf8(source)
        .map_err(|_| Error::format("source is not valid UTF-8".to_string()))?;
    CodeFunction::new(id, file_path, start_line, source, label)
}

fn parse_label_fields(class: &str, l_start: &str, l_end: &str) -> Result<Option<VulnLabel>> {
    if class == "-" {
        if l_start != "-" || l_end != "-" {
            return Err(Error::format(
                "unlabeled record must use '-' for l_start/l_end".to_string(),
            ));
        }
        return Ok(None);
    }
    let code: u16 = class
        .parse()
        .map_err(|_| Error::format(format!("bad cwe_class {class:?}")))?;
    let class = CweClass::from_code(code)?;
    let range = match (l_start, l_end) {
        ("-", "-") => None,
        (s, e) => {
            let s: u32 = s
                .parse()
                .map_err(|_| Error::format(format!("bad l_start {s:?}")))?;
            let e: u32 = e
                .parse()
                .map_err(|_| Error::format(format!("bad l_end {e:?}")))?;
            Some(LineRange::new(s, e)?)
        }
    };
    Ok(Some(VulnLabel::new(class, range)?))
}

fn ingest_native(path: &Path) -> Result<IngestOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format("empty file, missing header".to_string())),
    };
    if header != CORPUS_MAGIC {
        return Err(Error::format(format!(
            "expected header {CORPUS_MAGIC:?}, got {header:?}"
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        records.push((i + 1, parse_native_record(&line)));
    }
    collect(records)
}

/// Writes a corpus in the native line format. `load_corpus(save_corpus(x))`
/// reproduces `x` field for field, and re-serialization is byte-identical.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(corpus.len() * 128);
    out.push_str(CORPUS_MAGIC);
    out.push('\n');
    for f in corpus.iter() {
        check_field("id", &f.id)?;
        check_field("file_path", &f.file_path)?;
        out.push_str(&format_native_record(f));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a native-format corpus. Unlike [`ingest_corpus`], any malformed
/// record is fatal: a saved corpus is expected to be intact, so nothing is
/// silently dropped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let outcome = ingest_native(path)?;
    if let Some(skip) = outcome.skipped.first() {
        return Err(Error::format(format!(
            "record {}: {}",
            skip.row, skip.reason
        )));
    }
    Ok(outcome.corpus)
}

// ---------------------------------------------------------------------------
// CSV schemas
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum CsvFlavor {
    BigVul,
    D2a,
}

impl CsvFlavor {
    fn columns(self) -> &'static [&'static str] {
        match self {
            CsvFlavor::BigVul => &[
                "id",
                "file_name",
                "start_line",
                "vul",
                "cwe_id",
                "flaw_line_start",
                "flaw_line_end",
                "func_before",
            ],
            CsvFlavor::D2a => &[
                "id",
                "file",
                "start_line",
                "label",
                "bug_line_start",
                "bug_line_end",
                "code",
            ],
        }
    }
}

fn ingest_csv(path: &Path, flavor: CsvFlavor) -> Result<IngestOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));

    let headers = reader
        .headers()
        .map_err(|e| Error::format(format!("unreadable csv header: {e}")))?
        .clone();
    let mut col = BTreeMap::new();
    for name in flavor.columns() {
        let idx = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::format(format!("missing column {name:?}")))?;
        col.insert(*name, idx);
    }

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let parsed = match rec {
            Ok(rec) => parse_csv_record(&rec, &col, flavor),
            Err(e) => Err(Error::format(format!("unparseable csv row: {e}"))),
        };
        records.push((row, parsed));
    }
    collect(records)
}

fn parse_csv_record(
    rec: &csv::StringRecord,
    col: &BTreeMap<&str, usize>,
    flavor: CsvFlavor,
) -> Result<CodeFunction> {
    let field = |name: &str| -> &str { rec.get(col[name]).unwrap_or("") };

    match flavor {
        CsvFlavor::BigVul => {
            let vul = parse_flag(field("vul"))?;
            let class = if vul {
                CweClass::from_code(parse_cwe_id(field("cwe_id"))?)?
            } else {
                CweClass::NON_VULNERABLE
            };
            let range = parse_range(field("flaw_line_start"), field("flaw_line_end"))?;
            let label = VulnLabel::new(class, range)?;
            CodeFunction::new(
                field("id"),
                field("file_name"),
                parse_u32(field("start_line"), "start_line")?,
                field("func_before"),
                Some(label),
            )
        }
        CsvFlavor::D2a => {
            let vul = parse_flag(field("label"))?;
            let class = if vul {
                CweClass::BINARY_VULN
            } else {
                CweClass::NON_VULNERABLE
            };
            let range = parse_range(field("bug_line_start"), field("bug_line_end"))?;
            let label = VulnLabel::new(class, range)?;
            CodeFunction::new(
                field("id"),
                field("file"),
                parse_u32(field("start_line"), "start_line")?,
                field("code"),
                Some(label),
            )
        }
    }
}

fn parse_flag(s: &str) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::format(format!("bad binary flag {other:?}"))),
    }
}

fn parse_u32(s: &str, name: &str) -> Result<u32> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(format!("bad {name} {s:?}")))
}

/// Accepts `CWE-119`, `cwe-119`, or a bare `119`.
fn parse_cwe_id(s: &str) -> Result<u16> {
    let s = s.trim();
    let digits = s
        .strip_prefix("CWE-")
        .or_else(|| s.strip_prefix("cwe-"))
        .unwrap_or(s);
    digits
        .parse()
        .map_err(|_| Error::format(format!("bad cwe id {s:?}")))
}

fn parse_range(start: &str, end: &str) -> Result<Option<LineRange>> {
    let start = start.trim();
    let end = end.trim();
    match (start.is_empty(), end.is_empty()) {
        (true, true) => Ok(None),
        (false, false) => Ok(Some(LineRange::new(
            parse_u32(start, "line range start")?,
            parse_u32(end, "line range end")?,
        )?)),
        _ => Err(Error::format(
            "line range must have both endpoints or neither".to_string(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// A deterministic 80:10:10 partition of corpus ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl CorpusSplit {
    /// A degenerate split placing every function in the training set.
    /// Only corpora with fewer than 10 functions validate this way (larger
    /// ones owe val/test their ⌊n/10⌋ shares); it exists for overfit
    /// sanity checks on tiny corpora, where `make_split` refuses to run.
    pub fn all_train(corpus: &Corpus, seed: u64) -> CorpusSplit {
        CorpusSplit {
            train_ids: corpus.iter().map(|f| f.id.clone()).collect(),
            val_ids: Vec::new(),
            test_ids: Vec::new(),
            seed,
        }
    }

    /// Checks that the split is a disjoint, exact cover of `corpus` with
    /// val/test sizes equal to ⌊n/10⌋.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let n = corpus.len();
        let mut seen = HashSet::new();
        for id in self
            .train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
        {
            if corpus.get(id).is_none() {
                return Err(Error::invalid(format!("split references unknown id {id}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("id {id} appears twice in split")));
            }
        }
        if seen.len() != n {
            return Err(Error::invalid(format!(
                "split covers {} of {} functions",
                seen.len(),
                n
            )));
        }
        let tenth = n / 10;
        if self.val_ids.len() != tenth || self.test_ids.len() != tenth {
            return Err(Error::invalid(format!(
                "expected val/test sizes {tenth}, got {}/{}",
                self.val_ids.len(),
                self.test_ids.len()
            )));
        }
        Ok(())
    }
}

/// Partitions the corpus 80:10:10 (val and test each get ⌊n/10⌋ samples,
/// training gets the rest). The split is stratified by label class when
/// every class present has at least 3 members, and plain otherwise.
/// Deterministic for a fixed (corpus, seed).
pub fn make_split(corpus: &Corpus, seed: u64) -> Result<CorpusSplit> {
    let n = corpus.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "corpus has {n} functions; at least 10 are required to split"
        )));
    }
    let n_test = n / 10;
    let n_val = n / 10;

    // Group ids by stratum: the label's class code, or None when unlabeled.
    let mut strata: BTreeMap<Option<u16>, Vec<&str>> = BTreeMap::new();
    for f in corpus.iter() {
        strata
            .entry(f.label.map(|l| l.class().code()))
            .or_default()
            .push(&f.id);
    }
    let stratified = strata.values().all(|ids| ids.len() >= 3);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();

    if !stratified {
        let mut ids: Vec<&str> = corpus.iter().map(|f| f.id.as_str()).collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        test.extend(ids[..n_test].iter().map(|s| s.to_string()));
        val.extend(ids[n_test..n_test + n_val].iter().map(|s| s.to_string()));
        train.extend(ids[n_test + n_val..].iter().map(|s| s.to_string()));
    } else {
        let mut groups: Vec<Vec<&str>> = Vec::new();
        for ids in strata.values() {
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.shuffle(&mut rng);
            groups.push(ids);
        }
        let counts: Vec<usize> = groups.iter().map(|g| g.len()).collect();
        let test_alloc = largest_remainder(&counts, n_test, n);
        let remaining: Vec<usize> = counts
            .iter()
            .zip(&test_alloc)
            .map(|(c, t)| c - t)
            .collect();
        let val_alloc = largest_remainder(&remaining, n_val, n - n_test);
        for (g, (t, v)) in groups.iter().zip(test_alloc.iter().zip(&val_alloc)) {
            test.extend(g[..*t].iter().map(|s| s.to_string()));
            val.extend(g[*t..*t + *v].iter().map(|s| s.to_string()));
            train.extend(g[*t + *v..].iter().map(|s| s.to_string()));
        }
    }

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let split = CorpusSplit {
        train_ids: train,
        val_ids: val,
        test_ids: test,
        seed,
    };
    split.validate(corpus)?;
    Ok(split)
}

/// Apportions `total` slots over groups proportionally to `counts` (out of
/// `n`), flooring quotas and handing leftover slots to the largest
/// fractional remainders (ties to earlier groups).
fn largest_remainder(counts: &[usize], total: usize, n: usize) -> Vec<usize> {
    debug_assert_eq!(counts.iter().sum::<usize>(), n);
    let mut alloc: Vec<usize> = Vec::with_capacity(counts.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let quota = c as f64 * total as f64 / n as f64;
        let base = quota.floor() as usize;
        alloc.push(base);
        remainders.push((i, quota - base as f64));
    }
    let mut leftover = total - alloc.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders {
        if leftover == 0 {
            break;
        }
        if alloc[i] < counts[i] {
            alloc[i] += 1;
            leftover -= 1;
        }
    }
    alloc
}

// ---------------------------------------------------------------------------
