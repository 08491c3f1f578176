//! Repository scanning: walk a source tree, extract C/C++ functions with a
//! lightweight lexical parser, diagnose each one, and render candidate
//! findings as a human report or a machine-parseable one.
//!
//! The extractor recognizes `identifier (params) { body }` at file scope
//! after blanking comments, string literals, and preprocessor lines. That
//! deliberately misses functions defined by macros, K&R-style definitions,
//! and bodies nested in `extern "C"` or namespace blocks — a documented
//! recall limit, not a parser bug. Everything it does extract carries an
//! exact file path and start line, so report excerpts can be checked
//! against the file.
//!
//! Scan results are candidates: a predicted class, not a confirmed
//! vulnerability, and every report says so.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::corpus::{CodeFunction, CweClass, CWE_CLASSES};
use crate::csrc::{
    blank_comments_and_strings, blank_preprocessor, is_identifier, is_word_byte, line_of_offset,
    match_forward, skip_ws,
};
use crate::error::{Error, Result};
use crate::explain::RootCause;
use crate::model::{Diagnoser, Diagnosis};

/// First line of a machine-parseable scan report.
pub const REPORT_MAGIC: &str = "vulnscope-report/1";

/// Environment variable capping scan parallelism.
pub const THREADS_ENV: &str = "VULNSCOPE_THREADS";

const SOURCE_EXTENSIONS: [&str; 4] = ["c", "cc", "cpp", "h"];

/// Name and explanation for one supported class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CweEntry {
    pub name: String,
    pub description: String,
}

/// Static descriptions for the ten supported CWE classes plus the
/// non-vulnerable entry 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CweCatalog {
    entries: BTreeMap<u16, CweEntry>,
}

impl Default for CweCatalog {
    fn default() -> CweCatalog {
        let rows: [(u16, &str, &str); 11] = [
            (
                0,
                "non-vulnerable",
                "No weakness predicted for this function.",
            ),
            (
                119,
                "Improper Restriction of Operations within the Bounds of a Memory Buffer",
                "The code reads or writes through a pointer or index that can land outside the buffer it was meant to stay in, corrupting adjacent memory.",
            ),
            (
                20,
                "Improper Input Validation",
                "Input is used without checking that it has the shape, range, or size the rest of the code assumes.",
            ),
            (
                125,
                "Out-of-bounds Read",
                "A read reaches past the end or before the start of an allocation, leaking neighboring memory or crashing.",
            ),
            (
                200,
                "Exposure of Sensitive Information to an Unauthorized Actor",
                "Data that should stay private — memory contents, paths, credentials — can flow to an actor who is not supposed to see it.",
            ),
            (
                264,
                "Permissions, Privileges, and Access Controls",
                "Access rights are granted, dropped, or checked incorrectly, so an operation runs with more authority than intended.",
            ),
            (
                399,
                "Resource Management Errors",
                "A resource such as memory, a handle, or a connection is acquired or released incorrectly, enabling exhaustion or corruption.",
            ),
            (
                416,
                "Use After Free",
                "Memory is used after being freed; the allocator may already have reused it, so the access hits unrelated live data.",
            ),
            (
                476,
                "NULL Pointer Dereference",
                "A pointer that can be NULL is dereferenced, typically because an allocation or lookup result is trusted without a check.",
            ),
            (
                189,
                "Numeric Errors",
                "A numeric calculation or conversion goes wrong — signedness, truncation, off-by-one — and downstream logic or sizing relies on it.",
            ),
            (
                190,
                "Integer Overflow or Wraparound",
                "An arithmetic result exceeds its type's range and wraps, producing a small or negative value where the code expects a large one.",
            ),
        ];
        CweCatalog {
            entries: rows
                .into_iter()
                .map(|(code, name, description)| {
                    (
                        code,
                        CweEntry {
                            name: name.to_string(),
                            description: description.to_string(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl CweCatalog {
    pub fn get(&self, class: CweClass) -> Option<&CweEntry> {
        self.entries.get(&class.code())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// What extraction found: the functions, plus one human-readable line per
/// skipped file or construct.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOutcome {
    pub functions: Vec<CodeFunction>,
    pub diagnostics: Vec<String>,
}

/// Walks `root` for `.c`/`.cc`/`.cpp`/`.h` files in lexicographic path
/// order and extracts file-scope function definitions. Unreadable files
/// and files whose braces stop balancing are skipped with a diagnostic;
/// extraction always succeeds on a readable directory.
pub fn extract_functions(root: &Path) -> Result<ExtractOutcome> {
    if !root.is_dir() {
        return Err(Error::invalid(format!(
            "scan root {} is not a readable directory",
            root.display()
        )));
    }
    let mut diagnostics = Vec::new();
    let mut files = Vec::new();
    for entry in WalkDir::new(root) {
        match entry {
            Ok(e) if e.file_type().is_file() => {
                let ext = e
                    .path()
                    .extension()
                    .and_then(|x| x.to_str())
                    .unwrap_or_default();
                if SOURCE_EXTENSIONS.contains(&ext) {
                    files.push(e.into_path());
                }
            }
            Ok(_) => {}
            Err(e) => diagnostics.push(format!("skipping unreadable entry: {e}")),
        }
    }
    files.sort();

    let mut functions = Vec::new();
    for path in files {
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .into_owned();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                diagnostics.push(format!("skipping {rel}: {e}"));
                continue;
            }
        };
        extract_from_source(&rel, &text, &mut functions, &mut diagnostics);
    }
    Ok(ExtractOutcome {
        functions,
        diagnostics,
    })
}

/// The word run ending immediately before `at` (whitespace allowed
/// between), as `(start, end)` byte offsets into `bytes`.
fn word_before(bytes: &[u8], at: usize) -> Option<(usize, usize)> {
    let mut end = at;
    while end > 0 && bytes[end - 1].is_ascii_whitespace() {
        end -= 1;
    }
    if end == 0 || !is_word_byte(bytes[end - 1]) {
        return None;
    }
    let mut start = end;
    while start > 0 && is_word_byte(bytes[start - 1]) {
        start -= 1;
    }
    Some((start, end))
}

fn extract_from_source(
    rel_path: &str,
    text: &str,
    functions: &mut Vec<CodeFunction>,
    diagnostics: &mut Vec<String>,
) {
    let blanked = blank_preprocessor(&blank_comments_and_strings(text));
    let bytes = blanked.as_bytes();
    let orig = text.as_bytes();
    let mut i = skip_ws(bytes, 0);
    // Where the current file-scope declaration began: just past the last
    // `;`, `}`, or skipped block. The function source starts here, so a
    // multi-line return type stays attached.
    let mut decl_start = i;

    while i < bytes.len() {
        match bytes[i] {
            b';' | b'}' => {
                i += 1;
                decl_start = skip_ws(bytes, i);
                i = decl_start;
            }
            b'{' => {
                // A brace group that is not a function body: struct/enum/
                // union definition, initializer list, extern/namespace
                // block. Skipped as a unit — definitions inside are a
                // documented recall limit.
                match match_forward(bytes, i, b'{', b'}') {
                    Some(close) => {
                        i = close + 1;
                        decl_start = skip_ws(bytes, i);
                        i = decl_start;
                    }
                    None => {
                        diagnostics.push(format!(
                            "{rel_path}: unbalanced braces at line {}; rest of file skipped",
                            line_of_offset(bytes, i)
                        ));
                        return;
                    }
                }
            }
            b'(' => {
                let Some((ns, ne)) = word_before(bytes, i) else {
                    i += 1;
                    continue;
                };
                let name = &blanked[ns..ne];
                if !is_identifier(name) {
                    i += 1;
                    continue;
                }
                let Some(close_paren) = match_forward(bytes, i, b'(', b')') else {
                    diagnostics.push(format!(
                        "{rel_path}: unbalanced parentheses at line {}; rest of file skipped",
                        line_of_offset(bytes, i)
                    ));
                    return;
                };
                let after = skip_ws(bytes, close_paren + 1);
                if after >= bytes.len() || bytes[after] != b'{' {
                    // Prototype, macro invocation, or expression.
                    i = close_paren + 1;
                    continue;
                }
                let Some(body_close) = match_forward(bytes, after, b'{', b'}') else {
                    diagnostics.push(format!(
                        "{rel_path}: unbalanced braces at line {}; rest of file skipped",
                        line_of_offset(bytes, after)
                    ));
                    return;
                };
                let start_line = line_of_offset(orig, decl_start);
                let source = &text[decl_start..=body_close];
                let id = format!("{rel_path}:{start_line}:{name}");
                match CodeFunction::new(&id, rel_path, start_line, source, None) {
                    Ok(f) => functions.push(f),
                    Err(e) => diagnostics.push(format!("skipping {id}: {e}")),
                }
                i = body_close + 1;
                decl_start = skip_ws(bytes, i);
                i = decl_start;
            }
            _ => i += 1,
        }
    }
}

/// One diagnosed function. `cwe_description` is the catalog text for the
/// predicted class, empty exactly when the prediction is non-vulnerable.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub function: CodeFunction,
    pub diagnosis: Diagnosis,
    pub root_cause: Option<RootCause>,
    pub cwe_description: String,
}

/// A finished scan: per-function results in extraction order, a predicted-
/// class histogram over every supported class, and skip/failure notes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub results: Vec<ScanResult>,
    pub summary: BTreeMap<u16, usize>,
    pub diagnostics: Vec<String>,
}

/// Parses a `VULNSCOPE_THREADS`-style value: a positive integer, anything
/// else meaning "no cap".
fn parse_thread_cap(value: &str) -> Option<usize> {
    value.trim().parse::<usize>().ok().filter(|&n| n > 0)
}

fn thread_count(requested: Option<usize>, n_jobs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = requested
        .or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| parse_thread_cap(&v))
        })
        .unwrap_or(available);
    cap.min(n_jobs).max(1)
}

/// A worker-filled result cell, `None` until the function at its index is
/// diagnosed. Keeping results in index order makes the report independent
/// of which worker got there first.
type ScanSlot = Mutex<Option<Result<ScanResult>>>;

/// Extracts and diagnoses every function under `root`. A failed diagnosis
/// is logged and skipped — one poisonous function never aborts the scan. A
/// vulnerable diagnosis without a line range is kept but noted, since
/// downstream findings need the range. `threads` overrides the
/// `VULNSCOPE_THREADS` cap (tests use this; the CLI passes `None`).
pub fn scan_with_threads(
    model: &dyn Diagnoser,
    root: &Path,
    catalog: &CweCatalog,
    threads: Option<usize>,
) -> Result<ScanOutcome> {
    let extracted = extract_functions(root)?;
    let mut diagnostics = extracted.diagnostics;
    let functions = extracted.functions;

    let slots: Vec<ScanSlot> = functions.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = thread_count(threads, functions.len());

    if !functions.is_empty() {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= functions.len() {
                        break;
                    }
                    let outcome = diagnose_one(model, &functions[idx], catalog);
                    *slots[idx].lock().expect("no poisoned slot") = Some(outcome);
                });
            }
        });
    }

    let mut results = Vec::with_capacity(functions.len());
    let mut summary: BTreeMap<u16, usize> = CWE_CLASSES.iter().map(|&c| (c, 0)).collect();
    for (slot, function) in slots.into_iter().zip(&functions) {
        let outcome = slot
            .into_inner()
            .expect("no poisoned slot")
            .expect("every index was claimed");
        match outcome {
            Ok(result) => {
                *summary.entry(result.diagnosis.class.code()).or_insert(0) += 1;
                if result.diagnosis.class.is_vulnerable() && result.diagnosis.range.is_none() {
                    diagnostics.push(format!(
                        "{}: vulnerable prediction carries no line range",
                        function.id
                    ));
                }
                results.push(result);
            }
            Err(e) => diagnostics.push(format!("diagnosis failed for {}: {e}", function.id)),
        }
    }
    Ok(ScanOutcome {
        results,
        summary,
        diagnostics,
    })
}

/// [`scan_with_threads`] honoring the `VULNSCOPE_THREADS` cap.
pub fn scan(model: &dyn Diagnoser, root: &Path, catalog: &CweCatalog) -> Result<ScanOutcome> {
    scan_with_threads(model, root, catalog, None)
}

fn diagnose_one(
    model: &dyn Diagnoser,
    function: &CodeFunction,
    catalog: &CweCatalog,
) -> Result<ScanResult> {
    let diagnosis = model.diagnose(function)?;
    let root_cause = model.root_cause(function, &diagnosis)?;
    let cwe_description = if diagnosis.class.is_vulnerable() {
        catalog
            .get(diagnosis.class)
            .map(|e| e.description.clone())
            .unwrap_or_else(|| format!("{} (no catalog entry)", diagnosis.class))
    } else {
        String::new()
    };
    Ok(ScanResult {
        function: function.clone(),
        diagnosis,
        root_cause,
        cwe_description,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Structured,
}

/// One machine-parseable finding. Line numbers are file-absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub file: String,
    pub function_id: String,
    pub cwe: u16,
    pub description: String,
    pub l_start: u32,
    pub l_end: u32,
    pub root_cause_line: Option<u32>,
    pub scores: FindingScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingScores {
    pub confidence: f64,
    pub root_cause: Option<f64>,
}

fn absolute_line(function: &CodeFunction, rel: u32) -> u32 {
    function.start_line_in_file + rel - 1
}

fn findings(outcome: &ScanOutcome) -> Vec<Finding> {
    outcome
        .results
        .iter()
        .filter(|r| r.diagnosis.class.is_vulnerable())
        .filter_map(|r| {
            let range = r.diagnosis.range?;
            Some(Finding {
                file: r.function.file_path.clone(),
                function_id: r.function.id.clone(),
                cwe: r.diagnosis.class.code(),
                description: r.cwe_description.clone(),
                l_start: absolute_line(&r.function, range.start()),
                l_end: absolute_line(&r.function, range.end()),
                root_cause_line: r
                    .root_cause
                    .as_ref()
                    .map(|rc| absolute_line(&r.function, rc.line)),
                scores: FindingScores {
                    confidence: r.diagnosis.confidence,
                    root_cause: r.root_cause.as_ref().map(|rc| rc.score),
                },
            })
        })
        .collect()
}

/// Renders a scan outcome. `Text` is the human report: a class histogram,
/// then four numbered sections per candidate finding — identification,
/// description, vulnerable lines with excerpts, root cause — or a clean-
/// scan statement. `Structured` is line-oriented: the `vulnscope-report/1`
/// magic, then one JSON finding per line, bitwise stable for identical
/// outcomes.
pub fn render_report(outcome: &ScanOutcome, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => {
            let mut out = String::from(REPORT_MAGIC);
            out.push('\n');
            for finding in findings(outcome) {
                out.push_str(&serde_json::to_string(&finding).expect("findings serialize"));
                out.push('\n');
            }
            out
        }
        ReportFormat::Text => render_text(outcome),
    }
}

fn render_text(outcome: &ScanOutcome) -> String {
    let mut out = String::new();
    out.push_str("vulnscope scan report\n");
    out.push_str("=====================\n\n");
    out.push_str(&format!("functions scanned: {}\n", outcome.results.len()));
    let vulnerable: Vec<&ScanResult> = outcome
        .results
        .iter()
        .filter(|r| r.diagnosis.class.is_vulnerable())
        .collect();
    out.push_str(&format!("candidate findings: {}\n", vulnerable.len()));
    out.push_str("predicted classes (candidates, not confirmed vulnerabilities):\n");
    for (&code, &count) in &outcome.summary {
        let label = CweClass::from_code(code)
            .map(|c| c.to_string())
            .unwrap_or_else(|_| format!("class {code}"));
        out.push_str(&format!("  {label}: {count}\n"));
    }
    out.push('\n');

    if vulnerable.is_empty() {
        out.push_str("clean scan: no candidate vulnerabilities found.\n");
    }
    for r in vulnerable {
        let f = &r.function;
        out.push_str(&format!("== candidate finding: {} ==\n", f.id));
        out.push_str(&format!(
            "1) identification: {} in {}, confidence {:.4}\n",
            r.diagnosis.class, f.file_path, r.diagnosis.confidence
        ));
        out.push_str(&format!("2) description: {}\n", r.cwe_description));
        match r.diagnosis.range {
            Some(range) => {
                out.push_str(&format!(
                    "3) vulnerable lines {}-{}:\n",
                    absolute_line(f, range.start()),
                    absolute_line(f, range.end())
                ));
                for rel in range.start()..=range.end() {
                    out.push_str(&format!(
                        "     {} | {}\n",
                        absolute_line(f, rel),
                        f.line(rel).unwrap_or("")
                    ));
                }
            }
            None => out.push_str("3) vulnerable lines: not localized\n"),
        }
        match &r.root_cause {
            Some(rc) => {
                out.push_str(&format!(
                    "4) root cause: line {} (score {:.4}):\n",
                    absolute_line(f, rc.line),
                    rc.score
                ));
                out.push_str(&format!(
                    "     {} | {}\n",
                    absolute_line(f, rc.line),
                    rc.snippet
                ));
            }
            None => out.push_str("4) root cause: none identified (no preceding line to blame)\n"),
        }
        out.push('\n');
    }
    if !outcome.diagnostics.is_empty() {
        out.push_str("diagnostics:\n");
        for d in &outcome.diagnostics {
            out.push_str(&format!("  {d}\n"));
        }
    }
    out
}

/// Parses a `Structured` report back into findings. The inverse of
/// [`render_report`] for the structured format.
pub fn parse_structured_report(text: &str) -> Result<Vec<Finding>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(REPORT_MAGIC) => {}
        Some(other) => {
            return Err(Error::format(format!(
                "expected `{REPORT_MAGIC}`, found `{other}`"
            )))
        }
        None => return Err(Error::format("empty report")),
    }
    let mut findings = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let finding: Finding = serde_json::from_str(line).map_err(|e| {
            Error::format(format!("finding on line {}: {e}", lineno + 2))
        })?;
        findings.push(finding);
    }
    Ok(findings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LineRange;
    use crate::synthetic::{fixture_census, write_fixture_tree};
    use std::path::PathBuf;

    fn write_tree(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (rel, content) in files {
            let path = dir.path().join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).unwrap();
            }
            std::fs::write(path, content).unwrap();
        }
        dir
    }

    #[test]
    fn extracts_a_single_function_with_position() {
        let dir = write_tree(&[("main.c", "int f(void) { return 0; }\n")]);
        let out = extract_functions(dir.path()).unwrap();
        assert!(out.diagnostics.is_empty());
        assert_eq!(out.functions.len(), 1);
        let f = &out.functions[0];
        assert_eq!(f.id, "main.c:1:f");
        assert_eq!(f.start_line_in_file, 1);
        assert_eq!(f.source_text, "int f(void) { return 0; }\n");
    }

    #[test]
    fn skips_non_function_constructs() {
        let src = "\
struct point { int x; int y; };

int table[] = { 1, 2, 3 };

int declared_only(int a);

static long
two_line_type(int a) {
  return a;
}

int (*handler)(void) = 0;
";
        let dir = write_tree(&[("shapes.c", src)]);
        let out = extract_functions(dir.path()).unwrap();
        let names: Vec<&str> = out
            .functions
            .iter()
            .map(|f| f.id.rsplit(':').next().unwrap())
            .collect();
        assert_eq!(names, vec!["two_line_type"]);
        let f = &out.functions[0];
        assert_eq!(f.start_line_in_file, 7);
        assert!(f.source_text.starts_with("static long\ntwo_line_type"));
    }

    #[test]
    fn empty_directory_is_a_clean_empty_result() {
        let dir = tempfile::tempdir().unwrap();
        let out = extract_functions(dir.path()).unwrap();
        assert!(out.functions.is_empty());
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn missing_root_is_an_error() {
        let err = extract_functions(&PathBuf::from("/definitely/not/here")).unwrap_err();
        assert!(err.to_string().contains("not a readable directory"));
    }

    #[test]
    fn fixture_tree_extraction_matches_the_hand_census() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        let out = extract_functions(dir.path()).unwrap();
        assert!(out.diagnostics.is_empty(), "{:?}", out.diagnostics);
        let census = fixture_census();
        assert_eq!(out.functions.len(), census.len());
        for (f, planted) in out.functions.iter().zip(&census) {
            assert_eq!(f.file_path, planted.rel_path);
            assert_eq!(f.start_line_in_file, planted.start_line, "{}", f.id);
            assert!(f.id.ends_with(planted.name), "{} vs {}", f.id, planted.name);
        }
    }

    #[test]
    fn unbalanced_file_skips_its_remainder_but_not_other_files() {
        let dir = write_tree(&[
            ("aaa.c", "int ok(void) { return 1; }\nint broken(void) { if (1) {\n"),
            ("bbb.c", "int fine(void) { return 2; }\n"),
        ]);
        let out = extract_functions(dir.path()).unwrap();
        let names: Vec<&str> = out
            .functions
            .iter()
            .map(|f| f.id.rsplit(':').next().unwrap())
            .collect();
        assert_eq!(names, vec!["ok", "fine"]);
        assert_eq!(out.diagnostics.len(), 1);
        assert!(out.diagnostics[0].contains("aaa.c"), "{:?}", out.diagnostics);
        assert!(out.diagnostics[0].contains("unbalanced"));
    }

    #[test]
    fn unreadable_file_is_skipped_with_a_diagnostic() {
        let dir = write_tree(&[("good.c", "int g(void) { return 0; }\n")]);
        std::fs::write(dir.path().join("bad.c"), [0xFFu8, 0xFE, b'{']).unwrap();
        let out = extract_functions(dir.path()).unwrap();
        assert_eq!(out.functions.len(), 1);
        assert_eq!(out.diagnostics.len(), 1);
        assert!(out.diagnostics[0].contains("bad.c"));
    }

    #[test]
    fn extraction_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        let a = extract_functions(dir.path()).unwrap();
        let b = extract_functions(dir.path()).unwrap();
        assert_eq!(a, b);
    }

    /// Diagnoses by looking the function name up in the fixture census.
    struct Planted;

    impl Diagnoser for Planted {
        fn diagnose(&self, f: &CodeFunction) -> crate::Result<Diagnosis> {
            let name = f.id.rsplit(':').next().unwrap_or_default();
            let planted = fixture_census()
                .into_iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::invalid(format!("not planted: {name}")))?;
            Ok(Diagnosis {
                class: CweClass::from_code(planted.class).unwrap(),
                range: planted
                    .range
                    .map(|(s, e)| LineRange::new(s, e).unwrap()),
                confidence: 0.875,
            })
        }
    }

    /// Fails on one specific function, succeeds elsewhere.
    struct Poisoned;

    impl Diagnoser for Poisoned {
        fn diagnose(&self, f: &CodeFunction) -> crate::Result<Diagnosis> {
            if f.id.ends_with("count_down") {
                return Err(Error::invalid("poisoned function"));
            }
            Ok(Diagnosis {
                class: CweClass::NON_VULNERABLE,
                range: None,
                confidence: 1.0,
            })
        }
    }

    struct AllClean;

    impl Diagnoser for AllClean {
        fn diagnose(&self, _: &CodeFunction) -> crate::Result<Diagnosis> {
            Ok(Diagnosis {
                class: CweClass::NON_VULNERABLE,
                range: None,
                confidence: 1.0,
            })
        }
    }

    fn fixture_scan(threads: Option<usize>) -> ScanOutcome {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        scan_with_threads(&Planted, dir.path(), &CweCatalog::default(), threads).unwrap()
    }

    #[test]
    fn planted_scan_summary_matches_the_census() {
        let outcome = fixture_scan(Some(2));
        assert_eq!(outcome.results.len(), 7);
        assert_eq!(outcome.summary[&0], 4);
        assert_eq!(outcome.summary[&119], 1);
        assert_eq!(outcome.summary[&416], 1);
        assert_eq!(outcome.summary[&476], 1);
        assert_eq!(outcome.summary.values().sum::<usize>(), 7);
        for r in &outcome.results {
            let vulnerable = r.diagnosis.class.is_vulnerable();
            assert_eq!(
                !r.cwe_description.is_empty(),
                vulnerable,
                "{}: description presence must track the class",
                r.function.id
            );
        }
    }

    #[test]
    fn thread_count_never_changes_the_outcome() {
        let single = fixture_scan(Some(1));
        let quad = fixture_scan(Some(4));
        assert_eq!(single, quad);
    }

    #[test]
    fn poisoned_function_fails_alone() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        let outcome =
            scan_with_threads(&Poisoned, dir.path(), &CweCatalog::default(), Some(2)).unwrap();
        assert_eq!(outcome.results.len(), 6);
        assert_eq!(outcome.diagnostics.len(), 1);
        assert!(outcome.diagnostics[0].contains("count_down"));
        assert!(outcome.diagnostics[0].contains("poisoned"));
    }

    #[test]
    fn all_clean_scan_renders_a_clean_statement() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        let outcome =
            scan_with_threads(&AllClean, dir.path(), &CweCatalog::default(), Some(1)).unwrap();
        assert_eq!(outcome.summary[&0], 7);
        assert!(outcome.summary.iter().all(|(&c, &n)| c == 0 || n == 0));
        let text = render_report(&outcome, ReportFormat::Text);
        assert!(text.contains("clean scan: no candidate vulnerabilities found."));
        let structured = render_report(&outcome, ReportFormat::Structured);
        assert_eq!(structured, format!("{REPORT_MAGIC}\n"));
        assert_eq!(parse_structured_report(&structured).unwrap(), vec![]);
    }

    #[test]
    fn text_report_has_four_sections_per_finding() {
        let outcome = fixture_scan(Some(1));
        let text = render_report(&outcome, ReportFormat::Text);
        assert_eq!(text.matches("== candidate finding:").count(), 3);
        assert_eq!(text.matches("1) identification:").count(), 3);
        assert_eq!(text.matches("2) description:").count(), 3);
        assert_eq!(text.matches("3) vulnerable lines").count(), 3);
        assert_eq!(text.matches("4) root cause:").count(), 3);
        assert!(text.contains("candidates, not confirmed"));
    }

    #[test]
    fn text_excerpts_match_the_files_exactly() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        let outcome =
            scan_with_threads(&Planted, dir.path(), &CweCatalog::default(), Some(1)).unwrap();
        for r in &outcome.results {
            let Some(range) = r.diagnosis.range else { continue };
            let file = std::fs::read_to_string(dir.path().join(&r.function.file_path)).unwrap();
            let file_lines: Vec<&str> = file.lines().collect();
            for rel in range.start()..=range.end() {
                let abs = absolute_line(&r.function, rel) as usize;
                assert_eq!(
                    r.function.line(rel).unwrap(),
                    file_lines[abs - 1],
                    "{} line {rel}",
                    r.function.id
                );
            }
        }
    }

    #[test]
    fn structured_report_round_trips_and_reproduces() {
        let outcome = fixture_scan(Some(2));
        let a = render_report(&outcome, ReportFormat::Structured);
        let b = render_report(&fixture_scan(Some(3)), ReportFormat::Structured);
        assert_eq!(a, b, "scan + render must be bitwise reproducible");

        let findings = parse_structured_report(&a).unwrap();
        assert_eq!(findings.len(), 3);
        let reserialized = {
            let mut out = String::from(REPORT_MAGIC);
            out.push('\n');
            for f in &findings {
                out.push_str(&serde_json::to_string(f).unwrap());
                out.push('\n');
            }
            out
        };
        assert_eq!(a, reserialized);

        // The census's absolute positions survive into the findings.
        let overflow = findings.iter().find(|f| f.cwe == 119).unwrap();
        assert_eq!(overflow.file, "src/alpha.c");
        assert_eq!((overflow.l_start, overflow.l_end), (9, 10));
        let nullderef = findings.iter().find(|f| f.cwe == 476).unwrap();
        assert_eq!((nullderef.l_start, nullderef.l_end), (9, 10));
    }

    #[test]
    fn malformed_structured_reports_are_rejected() {
        assert!(parse_structured_report("").is_err());
        assert!(parse_structured_report("wrong-magic/9\n").is_err());
        let bad = format!("{REPORT_MAGIC}\nnot json\n");
        assert!(parse_structured_report(&bad).is_err());
    }

    #[test]
    fn root_cause_renders_with_its_own_excerpt() {
        let function = CodeFunction::new(
            "demo.c:4:leaky",
            "demo.c",
            4,
            "void leaky(char *s) {\n  char b[2];\n  strcpy(b, s);\n}\n",
            None,
        )
        .unwrap();
        let result = ScanResult {
            diagnosis: Diagnosis {
                class: CweClass::from_code(119).unwrap(),
                range: Some(LineRange::new(3, 3).unwrap()),
                confidence: 0.9,
            },
            root_cause: Some(RootCause {
                line: 2,
                score: 1.25,
                snippet: "  char b[2];".to_string(),
            }),
            cwe_description: "demo description".to_string(),
            function,
        };
        let mut summary: BTreeMap<u16, usize> = CWE_CLASSES.iter().map(|&c| (c, 0)).collect();
        summary.insert(119, 1);
        let outcome = ScanOutcome {
            results: vec![result],
            summary,
            diagnostics: vec![],
        };
        let text = render_report(&outcome, ReportFormat::Text);
        // Function starts at file line 4, so relative 2 and 3 are 5 and 6.
        assert!(text.contains("3) vulnerable lines 6-6:"), "{text}");
        assert!(text.contains("4) root cause: line 5"), "{text}");
        assert!(text.contains("5 |   char b[2];"));

        let findings = parse_structured_report(&render_report(
            &outcome,
            ReportFormat::Structured,
        ))
        .unwrap();
        assert_eq!(findings[0].root_cause_line, Some(5));
        assert_eq!(findings[0].scores.root_cause, Some(1.25));
    }

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(parse_thread_cap("4"), Some(4));
        assert_eq!(parse_thread_cap(" 2 "), Some(2));
        assert_eq!(parse_thread_cap("0"), None);
        assert_eq!(parse_thread_cap("-3"), None);
        assert_eq!(parse_thread_cap("lots"), None);
        assert_eq!(parse_thread_cap(""), None);
    }
}
