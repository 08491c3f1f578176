//! Deterministic synthetic corpora with planted vulnerability patterns,
//! used by tests, examples, and the end-to-end pipeline checks.
//!
//! Four two-line patterns are planted, one per supported bug family:
//!
//! * **CWE-119** — fixed-size buffer declaration followed by `strcpy`;
//! * **CWE-476** — unchecked `malloc` followed by an immediate store
//!   through the pointer;
//! * **CWE-416** — `free` followed by a read through the freed pointer;
//! * **CWE-190** — a size product followed by `malloc` of the product.
//!
//! The planted label range covers exactly the pattern's two lines, and
//! clean functions avoid the sink tokens entirely, so a model has a real
//! surface signal to learn. Generator randomness only varies identifiers,
//! constants, and filler-line counts — shifting the labeled range so
//! localization cannot be memorized as a constant.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CodeFunction, Corpus, CweClass, LineRange, VulnLabel};
use crate::error::{Error, Result};

fn labeled(id: &str, source: &str, class: u16, range: Option<(u32, u32)>) -> CodeFunction {
    let class = CweClass::from_code(class).expect("planted class is supported");
    let range = range.map(|(s, e)| LineRange::new(s, e).expect("planted range is ordered"));
    let label = VulnLabel::new(class, range).expect("planted label is coherent");
    CodeFunction::new(id, "synthetic.c", 1, source, Some(label)).expect("planted function is valid")
}

/// The canonical eight-function memorization corpus: four clean functions
/// and one instance of each planted pattern. Constant across calls.
pub fn small_corpus() -> Corpus {
    let functions = vec![
        labeled(
            "clean_add",
            "int add_totals(int a, int b) {\n  int total = a + b;\n  return total;\n}\n",
            0,
            None,
        ),
        labeled(
            "clean_max",
            "int pick_larger(int a, int b) {\n  if (a > b) { return a; }\n  return b;\n}\n",
            0,
            None,
        ),
        labeled(
            "clean_loop",
            "int count_down(int n) {\n  int steps = 0;\n  while (n > 0) { n = n - 1; steps = steps + 1; }\n  return steps;\n}\n",
            0,
            None,
        ),
        labeled(
            "clean_mask",
            "int is_even_flag(int v) {\n  int flag = 0;\n  if ((v & 1) == 0) { flag = 1; }\n  return flag;\n}\n",
            0,
            None,
        ),
        labeled("vuln_overflow", OVERFLOW_SRC, 119, Some((2, 3))),
        labeled("vuln_nullderef", NULLDEREF_SRC, 476, Some((3, 4))),
        labeled("vuln_useafterfree", USEAFTERFREE_SRC, 416, Some((2, 3))),
        labeled("vuln_intoverflow", INTOVERFLOW_SRC, 190, Some((2, 3))),
    ];
    Corpus::new(functions).expect("planted corpus is valid")
}

const OVERFLOW_SRC: &str =
    "void copy_label(const char *text) {\n  char label[8];\n  strcpy(label, text);\n}\n";
const NULLDEREF_SRC: &str = "int store_flag(int value) {\n  int ready = value + 1;\n  int *slot = malloc(sizeof(int));\n  *slot = ready;\n  return ready;\n}\n";
const USEAFTERFREE_SRC: &str =
    "int read_after_release(int *data) {\n  free(data);\n  return data[0];\n}\n";
const INTOVERFLOW_SRC: &str = "char *grow_buffer(int count, int width) {\n  int nbytes = count * width;\n  char *out = malloc(nbytes);\n  return out;\n}\n";

const NAME_POOL: [&str; 10] = [
    "val", "num", "cnt", "idx", "acc", "item", "mark", "step", "gap", "bit",
];

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn name(&mut self, i: usize) -> String {
        let base = NAME_POOL[self.rng.random_range(0..NAME_POOL.len())];
        format!("{base}{i}")
    }

    fn small(&mut self) -> u32 {
        self.rng.random_range(1..100)
    }

    /// 0–2 self-contained declarations inserted after the signature line,
    /// shifting the planted range downward.
    fn filler(&mut self, i: usize) -> (String, u32) {
        let k = self.rng.random_range(0..3u32);
        let mut text = String::new();
        for j in 0..k {
            text.push_str(&format!(
                "  int pad{i}_{j} = {};\n",
                self.small()
            ));
        }
        (text, k)
    }
}

/// A corpus of `n` functions with pattern-based labels: shapes rotate
/// round-robin through four clean forms and the four planted patterns, so
/// every class keeps an equal share regardless of `n`. Identifiers,
/// constants, and filler lines are drawn from `seed`; the same `(n, seed)`
/// always yields the identical corpus.
pub fn training_corpus(n: usize, seed: u64) -> Corpus {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut functions = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("syn{i:04}");
        let f = match i % 8 {
            0 => {
                let (fill, _) = g.filler(i);
                let v = g.name(i);
                labeled(
                    &id,
                    &format!(
                        "int sum{i}(int a, int b) {{\n{fill}  int {v} = a + b;\n  return {v};\n}}\n"
                    ),
                    0,
                    None,
                )
            }
            1 => labeled(
                &id,
                &format!(
                    "int larger{i}(int a, int b) {{\n  if (a > b) {{ return a; }}\n  return b;\n}}\n"
                ),
                0,
                None,
            ),
            2 => {
                let (fill, _) = g.filler(i);
                let v = g.name(i);
                labeled(
                    &id,
                    &format!(
                        "int drain{i}(int n) {{\n{fill}  int {v} = 0;\n  while (n > 0) {{ n = n - 1; {v} = {v} + 1; }}\n  return {v};\n}}\n"
                    ),
                    0,
                    None,
                )
            }
            3 => {
                let c = g.small();
                labeled(
                    &id,
                    &format!(
                        "int gate{i}(int v) {{\n  int flag = 0;\n  if ((v & {c}) == 0) {{ flag = 1; }}\n  return flag;\n}}\n"
                    ),
                    0,
                    None,
                )
            }
            4 => {
                let (fill, k) = g.filler(i);
                let buf = g.name(i);
                let size = g.rng.random_range(2..64u32);
                labeled(
                    &id,
                    &format!(
                        "void copy{i}(const char *text) {{\n{fill}  char {buf}[{size}];\n  strcpy({buf}, text);\n}}\n"
                    ),
                    119,
                    Some((2 + k, 3 + k)),
                )
            }
            5 => {
                let (fill, k) = g.filler(i);
                let p = g.name(i);
                labeled(
                    &id,
                    &format!(
                        "int store{i}(int value) {{\n{fill}  int *{p} = malloc(sizeof(int));\n  *{p} = value;\n  return value;\n}}\n"
                    ),
                    476,
                    Some((2 + k, 3 + k)),
                )
            }
            6 => {
                let (fill, k) = g.filler(i);
                let p = g.name(i);
                labeled(
                    &id,
                    &format!(
                        "int reuse{i}(int *{p}) {{\n{fill}  free({p});\n  return {p}[0];\n}}\n"
                    ),
                    416,
                    Some((2 + k, 3 + k)),
                )
            }
            _ => {
                let (fill, k) = g.filler(i);
                let v = g.name(i);
                labeled(
                    &id,
                    &format!(
                        "char *alloc{i}(int count, int width) {{\n{fill}  int {v} = count * width;\n  char *out = malloc({v});\n  return out;\n}}\n"
                    ),
                    190,
                    Some((2 + k, 3 + k)),
                )
            }
        };
        functions.push(f);
    }
    Corpus::new(functions).expect("generated corpus is valid")
}

/// One expected row of the fixture-tree hand census.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedFunction {
    pub rel_path: &'static str,
    pub name: &'static str,
    /// 1-based line of the function's first line within its file.
    pub start_line: u32,
    pub class: u16,
    /// Function-relative planted range, `None` for clean functions.
    pub range: Option<(u32, u32)>,
}

const ALPHA_C: &str = "\
#include <string.h>

int add_totals(int a, int b) {
  int total = a + b;
  return total;
}

void copy_label(const char *text) {
  char label[8];
  strcpy(label, text);
}

int pick_larger(int a, int b) {
  if (a > b) { return a; }
  return b;
}
";

const BETA_C: &str = "\
#include <stdlib.h>

#define CHECK(x) do { if (!(x)) return -1; } while (0)
#define make_reader(T) T read_##T(void) { return (T)0; }

int read_after_release(int *data) {
  free(data);
  return data[0];
}

int count_down(int n) {
  int steps = 0;
  while (n > 0) { n = n - 1; steps = steps + 1; }
  return steps;
}
";

const GAMMA_H: &str = "\
static int is_even_flag(int v) {
  int flag = 0;
  if ((v & 1) == 0) { flag = 1; }
  return flag;
}

int store_flag(int value) {
  int ready = value + 1;
  int *slot = malloc(sizeof(int));
  *slot = ready;
  return ready;
}
";

/// Writes the scan fixture: three files under `root/src`, seven functions,
/// three of them vulnerable, plus a macro that merely looks like a
/// function definition. The vulnerable bodies reuse [`small_corpus`]
/// sources verbatim, so a model that memorized that corpus recognizes
/// them here.
pub fn write_fixture_tree(root: &Path) -> Result<()> {
    let src = root.join("src");
    let include = src.join("include");
    std::fs::create_dir_all(&include).map_err(|e| Error::io(&include, e))?;
    for (path, content) in [
        (src.join("alpha.c"), ALPHA_C),
        (src.join("beta.c"), BETA_C),
        (include.join("gamma.h"), GAMMA_H),
    ] {
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// The hand census of [`write_fixture_tree`], ordered by path then line.
pub fn fixture_census() -> Vec<PlantedFunction> {
    vec![
        PlantedFunction {
            rel_path: "src/alpha.c",
            name: "add_totals",
            start_line: 3,
            class: 0,
            range: None,
        },
        PlantedFunction {
            rel_path: "src/alpha.c",
            name: "copy_label",
            start_line: 8,
            class: 119,
            range: Some((2, 3)),
        },
        PlantedFunction {
            rel_path: "src/alpha.c",
            name: "pick_larger",
            start_line: 13,
            class: 0,
            range: None,
        },
        PlantedFunction {
            rel_path: "src/beta.c",
            name: "read_after_release",
            start_line: 6,
            class: 416,
            range: Some((2, 3)),
        },
        PlantedFunction {
            rel_path: "src/beta.c",
            name: "count_down",
            start_line: 11,
            class: 0,
            range: None,
        },
        PlantedFunction {
            rel_path: "src/include/gamma.h",
            name: "is_even_flag",
            start_line: 1,
            class: 0,
            range: None,
        },
        PlantedFunction {
            rel_path: "src/include/gamma.h",
            name: "store_flag",
            start_line: 7,
            class: 476,
            range: Some((3, 4)),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn small_corpus_plants_one_of_each_pattern() {
        let corpus = small_corpus();
        assert_eq!(corpus.len(), 8);
        let mut by_class: BTreeMap<u16, usize> = BTreeMap::new();
        for f in corpus.functions() {
            let label = f.label.expect("all planted functions are labeled");
            *by_class.entry(label.class().code()).or_insert(0) += 1;
            if let Some(range) = label.range() {
                assert_eq!(range.len(), 2, "{}: planted patterns span two lines", f.id);
            }
        }
        assert_eq!(
            by_class,
            BTreeMap::from([(0, 4), (119, 1), (190, 1), (416, 1), (476, 1)])
        );
    }

    #[test]
    fn training_corpus_is_balanced_and_deterministic() {
        let a = training_corpus(200, 7);
        let b = training_corpus(200, 7);
        assert_eq!(a.functions(), b.functions());

        let mut by_class: BTreeMap<u16, usize> = BTreeMap::new();
        for f in a.functions() {
            *by_class
                .entry(f.label.unwrap().class().code())
                .or_insert(0) += 1;
        }
        assert_eq!(
            by_class,
            BTreeMap::from([(0, 100), (119, 25), (190, 25), (416, 25), (476, 25)])
        );

        let c = training_corpus(200, 8);
        assert_ne!(a.functions(), c.functions());
    }

    #[test]
    fn planted_ranges_land_on_their_sink_lines() {
        let corpus = training_corpus(64, 3);
        for f in corpus.functions() {
            let label = f.label.unwrap();
            let Some(range) = label.range() else { continue };
            let lines: Vec<&str> = f.source_text.lines().collect();
            let window = format!(
                "{}\n{}",
                lines[range.start() as usize - 1],
                lines[range.end() as usize - 1]
            );
            let expected = match label.class().code() {
                119 => "strcpy",
                476 => "malloc",
                416 => "free",
                190 => "*",
                other => panic!("unexpected planted class {other}"),
            };
            assert!(
                window.contains(expected),
                "{}: range {:?} misses `{expected}`:\n{window}",
                f.id,
                (range.start(), range.end())
            );
        }
    }

    #[test]
    fn training_corpus_splits_stratified() {
        let corpus = training_corpus(200, 0);
        let split = crate::corpus::make_split(&corpus, 0).unwrap();
        assert_eq!(split.test_ids.len(), 20);
        let classes: std::collections::BTreeSet<u16> = split
            .test_ids
            .iter()
            .map(|id| corpus.get(id).unwrap().label.unwrap().class().code())
            .collect();
        assert!(
            classes.len() >= 4,
            "stratified test slice covers most classes, got {classes:?}"
        );
    }

    #[test]
    fn fixture_tree_matches_its_census() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_tree(dir.path()).unwrap();
        let census = fixture_census();
        assert_eq!(census.len(), 7);
        assert_eq!(census.iter().filter(|p| p.class != 0).count(), 3);
        for planted in &census {
            let text = std::fs::read_to_string(dir.path().join(planted.rel_path)).unwrap();
            let line = text
                .lines()
                .nth(planted.start_line as usize - 1)
                .unwrap_or_else(|| panic!("{}:{} missing", planted.rel_path, planted.start_line));
            assert!(
                line.contains(planted.name),
                "{}:{} should start `{}`, got `{line}`",
                planted.rel_path,
                planted.start_line,
                planted.name
            );
        }
    }

    #[test]
    fn fixture_vulnerable_sources_reuse_the_small_corpus() {
        let corpus = small_corpus();
        for (id, file) in [
            ("vuln_overflow", ALPHA_C),
            ("vuln_useafterfree", BETA_C),
            ("vuln_nullderef", GAMMA_H),
        ] {
            let f = corpus.get(id).unwrap();
            let body = f.source_text.trim_end();
            assert!(
                file.contains(body),
                "{id}: fixture tree must embed the trained source verbatim"
            );
        }
    }
}
