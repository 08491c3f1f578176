//! Acceptance gate: nine numbered criteria, each a test that prints one
//! pass/fail line and enforces its own runtime budget. Heavy fixtures
//! (the memorization model) are built once and shared.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use vulnscope::corpus::{
    load_corpus, make_split, save_corpus, CodeFunction, CorpusSplit, CweClass, LineRange,
    CWE_CLASSES,
};
use vulnscope::explain::{attribute_tokens, select_root_cause, AttributionConfig, AttributionMode};
use vulnscope::metrics::{classification_report, evaluate, iou_1d};
use vulnscope::model::{
    focal_grad_wrt_logits, focal_loss, gcn_forward, loc_grad, loc_loss, softmax, train, Activation,
    Diagnosis, EncoderConfig, EncoderKind, FocalParams, GcnConfig, ModelConfig, TrainHistory,
    TrainParams, VulnModel,
};
use vulnscope::scanner::{
    parse_structured_report, render_report, scan_with_threads, CweCatalog, ReportFormat,
    REPORT_MAGIC,
};
use vulnscope::svg::SvgConfig;
use vulnscope::synthetic::{small_corpus, training_corpus, write_fixture_tree};
use vulnscope::tokenizer::{decode, encode, train_bpe, Vocab, MIN_VOCAB_SIZE};

fn criterion(
    n: usize,
    name: &str,
    budget: Duration,
    body: impl FnOnce() -> Result<String, String>,
) {
    let started = Instant::now();
    let outcome = body();
    let elapsed = started.elapsed();
    match outcome {
        Ok(detail) if elapsed <= budget => {
            println!("criterion {n} ({name}): pass — {detail} [{elapsed:.2?} of {budget:?}]");
        }
        Ok(detail) => {
            println!(
                "criterion {n} ({name}): fail — over budget ({elapsed:.2?} > {budget:?}); {detail}"
            );
            panic!("criterion {n} exceeded its runtime budget: {elapsed:?} > {budget:?}");
        }
        Err(msg) => {
            println!("criterion {n} ({name}): fail — {msg}");
            panic!("criterion {n} failed: {msg}");
        }
    }
}

fn err<T>(e: impl std::fmt::Display) -> Result<T, String> {
    Err(e.to_string())
}

// ---------------------------------------------------------------- 1

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[test]
fn criterion_1_loss_correctness() {
    criterion(1, "loss correctness", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let plain = FocalParams {
            alpha: 1.0,
            delta: 0.0,
        };
        for case in 0..1000 {
            let dist = random_distribution(&mut rng, 11);
            let t = rng.random_range(0..11);
            let loss = match focal_loss(&dist, t, &plain) {
                Ok(v) => v,
                Err(e) => return err(e),
            };
            let expected = -dist[t].ln();
            if (loss - expected).abs() > 1e-9 {
                return Err(format!(
                    "case {case}: focal(α=1, δ=0) {loss} vs −log(p) {expected}"
                ));
            }
        }

        let mut grad_checks = 0usize;
        for _ in 0..40 {
            let logits: Vec<f64> = (0..11).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0..11);
            for params in [plain, FocalParams::default()] {
                let probs = softmax(&logits);
                let grad = match focal_grad_wrt_logits(&probs, t, &params) {
                    Ok(g) => g,
                    Err(e) => return err(e),
                };
                let h = 1e-6;
                for j in 0..11 {
                    let mut up = logits.clone();
                    up[j] += h;
                    let mut dn = logits.clone();
                    dn[j] -= h;
                    let lu = focal_loss(&softmax(&up), t, &params).map_err(|e| e.to_string())?;
                    let ld = focal_loss(&softmax(&dn), t, &params).map_err(|e| e.to_string())?;
                    let fd = (lu - ld) / (2.0 * h);
                    let denom = fd.abs().max(grad[j].abs()).max(1e-6);
                    if (grad[j] - fd).abs() / denom > 1e-4 {
                        return Err(format!(
                            "focal grad mismatch at logit {j} ({params:?}): analytic {} vs fd {fd}",
                            grad[j]
                        ));
                    }
                    grad_checks += 1;
                }
            }
        }

        for _ in 0..50 {
            let pred = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let truth = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let g = loc_grad(pred, truth);
            let h = 1e-6;
            let fd_s =
                (loc_loss((pred.0 + h, pred.1), truth) - loc_loss((pred.0 - h, pred.1), truth))
                    / (2.0 * h);
            let fd_e =
                (loc_loss((pred.0, pred.1 + h), truth) - loc_loss((pred.0, pred.1 - h), truth))
                    / (2.0 * h);
            for (analytic, fd) in [(g.0, fd_s), (g.1, fd_e)] {
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                if (analytic - fd).abs() / denom > 1e-4 {
                    return Err(format!("loc grad mismatch: analytic {analytic} vs fd {fd}"));
                }
                grad_checks += 1;
            }
        }
        Ok(format!(
            "1000 losses within 1e-9; {grad_checks} gradient components within 1e-4 of finite differences"
        ))
    });
}

// ---------------------------------------------------------------- 2

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn criterion_2_gcn_fidelity() {
    criterion(2, "gcn fidelity", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        for case in 0..100 {
            let n = rng.random_range(1..=8);
            let d = rng.random_range(1..=8);
            let h0 = random_matrix(&mut rng, n, d);
            let a = random_matrix(&mut rng, n, n);
            let layers = rng.random_range(1..=3);
            let weights = vec![Array2::zeros((d, d)); layers];
            let out = match gcn_forward(&h0, &a, &weights) {
                Ok(v) => v,
                Err(e) => return err(e),
            };
            if out != h0 {
                return Err(format!("case {case}: W = 0 did not act as the identity"));
            }
        }

        // Hand-worked 2-node example. With A = [[2,1],[1,2]],
        // H0 = [[1,2],[3,4]], W = [[0.5,-1],[0.25,0.5]]:
        //   A·H0       = [[5,8],[7,10]]
        //   A·H0·W     = [[4.5,-1],[6,-2]]
        //   ReLU(·)    = [[4.5,0],[6,0]]
        //   H0 + ·     = [[5.5,2],[9,4]]
        let h0 = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let w = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 0.25, 0.5]).unwrap();
        let expected = Array2::from_shape_vec((2, 2), vec![5.5, 2.0, 9.0, 4.0]).unwrap();
        let got = gcn_forward(&h0, &a, &[w]).map_err(|e| e.to_string())?;
        for (g, e) in got.iter().zip(expected.iter()) {
            if (g - e).abs() > 1e-6 {
                return Err(format!("hand example: got {got:?}, expected {expected:?}"));
            }
        }
        Ok("100 W=0 identity pairs exact; hand-computed example within 1e-6".to_string())
    });
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_iou_oracle_equivalence() {
    criterion(3, "iou oracle equivalence", Duration::from_secs(5), || {
        let mut pairs = 0usize;
        for s1 in 1..=12u32 {
            for e1 in s1..=12 {
                for s2 in 1..=12u32 {
                    for e2 in s2..=12 {
                        let a = LineRange::new(s1, e1).map_err(|e| e.to_string())?;
                        let b = LineRange::new(s2, e2).map_err(|e| e.to_string())?;
                        let got = iou_1d(a, b);
                        let sa: BTreeSet<u32> = (s1..=e1).collect();
                        let sb: BTreeSet<u32> = (s2..=e2).collect();
                        let inter = sa.intersection(&sb).count() as f64;
                        let union = sa.union(&sb).count() as f64;
                        let oracle = inter / union;
                        if got != oracle {
                            return Err(format!(
                                "[{s1},{e1}] vs [{s2},{e2}]: iou_1d {got} vs set oracle {oracle}"
                            ));
                        }
                        pairs += 1;
                    }
                }
            }
        }
        Ok(format!("{pairs} range pairs match the set oracle exactly"))
    });
}

// ---------------------------------------------------------------- 4

fn base_vocab() -> &'static Vocab {
    static CELL: OnceLock<Vocab> = OnceLock::new();
    CELL.get_or_init(|| train_bpe(&small_corpus(), MIN_VOCAB_SIZE).expect("base vocab trains"))
}

fn snippet_function(i: usize, text: &str) -> CodeFunction {
    CodeFunction::new(format!("snippet_{i}"), "snip.c", 1, text, None).expect("snippet is valid")
}

fn tiny_model(seed: u64, kind: EncoderKind, d: usize, heads: usize, gcn_layers: usize) -> VulnModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            kind,
            layers: 1,
            embed_dim: d,
            heads,
            seed,
        },
        gcn: GcnConfig {
            n_layers: gcn_layers,
            feature_dim: d,
            activation: Activation::Relu,
            residual: true,
        },
        head_hidden: Some(6),
        max_len: 16,
    };
    VulnModel::new(config, SvgConfig::default(), base_vocab().clone()).expect("tiny model builds")
}

/// Independent Shapley oracle: subset values come from the public
/// `forward_masked`, weights from the textbook |S|!(n−1−|S|)!/n! formula.
fn shapley_oracle(
    model: &VulnModel,
    prepared: &vulnscope::model::PreparedFunction,
    target: usize,
) -> Result<Vec<f64>, String> {
    let n = prepared.seq.max_len();
    let n_real = prepared.seq.n_real;
    let subsets = 1u32 << n_real;
    let mut value = vec![0.0; subsets as usize];
    for s in 0..subsets {
        let mut mask = vec![false; n];
        for (j, slot) in mask.iter_mut().enumerate().take(n_real) {
            *slot = s & (1 << j) == 0;
        }
        value[s as usize] = model
            .forward_masked(prepared, &mask)
            .map_err(|e| e.to_string())?
            .class_logits[target];
    }
    let mut fact = vec![1.0f64];
    for k in 1..=n_real {
        fact.push(fact[k - 1] * k as f64);
    }
    let mut phi = vec![0.0; n_real];
    for (i, slot) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        let mut acc = 0.0;
        for s in 0..subsets {
            if s & bit != 0 {
                continue;
            }
            let k = s.count_ones() as usize;
            let w = fact[k] * fact[n_real - 1 - k] / fact[n_real];
            acc += w * (value[(s | bit) as usize] - value[s as usize]);
        }
        *slot = acc;
    }
    Ok(phi)
}

#[test]
fn criterion_4_attribution_axioms() {
    criterion(4, "attribution axioms", Duration::from_secs(120), || {
        let snippets = [
            "a=b;\n",
            "x=y*z;\n",
            "p=q;\nr=s;\n",
            "f(a);\n",
            "m[i]=0;\n",
            "u+=v;\n",
        ];
        let exact = AttributionConfig {
            mode: AttributionMode::ExactShapley,
            top_k: 8,
            exact_limit: 12,
        };
        let mut models = 0usize;
        for i in 0..20u64 {
            let kind = if i % 2 == 0 {
                EncoderKind::TinyTransformer
            } else {
                EncoderKind::EmbeddingOnly
            };
            let d = if i % 3 == 0 { 8 } else { 12 };
            let heads = if kind == EncoderKind::TinyTransformer { 2 } else { 1 };
            let model = tiny_model(900 + i, kind, d, heads, 1 + (i % 2) as usize);
            let function = snippet_function(i as usize, snippets[i as usize % snippets.len()]);
            let target = 1 + (i as usize % 10);

            let prepared = model.prepare(&function).map_err(|e| e.to_string())?;
            let n_real = prepared.seq.n_real;
            if n_real > 12 {
                return Err(format!("model {i}: {n_real} real tokens exceeds the 12 limit"));
            }
            let attr = attribute_tokens(&model, &prepared, target, &exact)
                .map_err(|e| e.to_string())?;

            let full = model
                .forward(&prepared)
                .map_err(|e| e.to_string())?
                .class_logits[target];
            let mut all_masked = vec![false; prepared.seq.max_len()];
            for slot in all_masked.iter_mut().take(n_real) {
                *slot = true;
            }
            let baseline = model
                .forward_masked(&prepared, &all_masked)
                .map_err(|e| e.to_string())?
                .class_logits[target];
            let total: f64 = attr.token_scores.iter().sum();
            if (total - (full - baseline)).abs() > 1e-5 {
                return Err(format!(
                    "model {i}: efficiency violated — Σφ {total} vs f(x)−f(baseline) {}",
                    full - baseline
                ));
            }

            let oracle = shapley_oracle(&model, &prepared, target)?;
            for (j, expected) in oracle.iter().enumerate() {
                if (attr.token_scores[j] - expected).abs() > 1e-5 {
                    return Err(format!(
                        "model {i} token {j}: exact mode {} vs oracle {expected}",
                        attr.token_scores[j]
                    ));
                }
            }
            if attr.token_scores[n_real..].iter().any(|&s| s != 0.0) {
                return Err(format!("model {i}: PAD positions carry nonzero attribution"));
            }
            models += 1;
        }

        // Linear configuration: embedding lookup only, zeroed GCN weight,
        // affine head, zero PAD embedding. Each token's Shapley value is
        // its own pooled per-term contribution w·e_j / n_real.
        let mut linear = tiny_model(777, EncoderKind::EmbeddingOnly, 8, 1, 1);
        {
            let mut config = linear.config().clone();
            config.head_hidden = None;
            linear = VulnModel::new(config, SvgConfig::default(), base_vocab().clone())
                .expect("linear model builds");
        }
        linear
            .set_param("gcn0.w", Array2::zeros((8, 8)))
            .map_err(|e| e.to_string())?;
        let mut table = linear.param("tok_emb").expect("embedding table").clone();
        table.row_mut(0).fill(0.0);
        linear.set_param("tok_emb", table).map_err(|e| e.to_string())?;

        let function = snippet_function(99, "k=m+n;\n");
        let prepared = linear.prepare(&function).map_err(|e| e.to_string())?;
        let target = 4;
        let w = linear.param("head_cls.w").expect("affine head").clone();
        let table = linear.param("tok_emb").expect("embedding table").clone();
        let n_real = prepared.seq.n_real as f64;
        for cfg in [AttributionConfig::default(), exact] {
            let attr =
                attribute_tokens(&linear, &prepared, target, &cfg).map_err(|e| e.to_string())?;
            for j in 0..prepared.seq.n_real {
                let e = table.row(prepared.seq.token_ids[j] as usize);
                let term: f64 = e
                    .iter()
                    .zip(w.column(target).iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n_real;
                if (attr.token_scores[j] - term).abs() > 1e-10 {
                    return Err(format!(
                        "linear model ({cfg:?}) token {j}: {} vs per-term {term}",
                        attr.token_scores[j]
                    ));
                }
            }
        }
        Ok(format!(
            "{models} random tiny models satisfy efficiency and match the Shapley oracle within 1e-5; linear per-term recovery within 1e-10"
        ))
    });
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_root_cause_rule() {
    criterion(5, "root-cause rule", Duration::from_secs(5), || {
        let source_text: String = (1..=20).map(|i| format!("line_{i}();\n")).collect();
        let source =
            CodeFunction::new("rc_probe", "rc.c", 1, source_text, None).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let class = CweClass::from_code(119).map_err(|e| e.to_string())?;
        let (mut hits, mut absents) = (0usize, 0usize);
        for case in 0..1000 {
            let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
            for _ in 0..rng.random_range(0..12) {
                let line = rng.random_range(1..=15u32);
                // Half-integer scores force frequent exact ties.
                let score = f64::from(rng.random_range(-4..=4i32)) / 2.0;
                scores.insert(line, score);
            }
            let l_start = rng.random_range(1..=12u32);
            let l_end = rng.random_range(l_start..=14u32);
            let diagnosis = Diagnosis {
                class,
                range: Some(LineRange::new(l_start, l_end).map_err(|e| e.to_string())?),
                confidence: 1.0,
            };
            let got = select_root_cause(&scores, &diagnosis, &source).map_err(|e| e.to_string())?;

            let candidates: Vec<(u32, f64)> = scores
                .iter()
                .filter(|(&line, _)| line < l_start)
                .map(|(&line, &score)| (line, score))
                .collect();
            let expected = if l_start <= 1 || candidates.is_empty() {
                None
            } else {
                let best = candidates
                    .iter()
                    .map(|&(_, s)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                let line = candidates
                    .iter()
                    .filter(|&&(_, s)| s == best)
                    .map(|&(l, _)| l)
                    .max()
                    .expect("non-empty candidates");
                Some((line, best))
            };

            match (got, expected) {
                (None, None) => absents += 1,
                (Some(rc), Some((line, score))) => {
                    if rc.line >= l_start {
                        return Err(format!("case {case}: line {} not before {l_start}", rc.line));
                    }
                    if (rc.line, rc.score) != (line, score) {
                        return Err(format!(
                            "case {case}: got line {} score {}, oracle line {line} score {score}",
                            rc.line, rc.score
                        ));
                    }
                    if rc.snippet != source.line(line).unwrap_or("") {
                        return Err(format!("case {case}: snippet mismatch"));
                    }
                    hits += 1;
                }
                (got, expected) => {
                    return Err(format!("case {case}: got {got:?}, oracle {expected:?}"));
                }
            }
        }
        Ok(format!(
            "1000 randomized maps match the argmax-with-filter oracle ({hits} picks, {absents} justified absences)"
        ))
    });
}

// ---------------------------------------------------------------- 6 + 8

struct Memorized {
    model: VulnModel,
    history: TrainHistory,
}

fn train_memorization() -> (VulnModel, TrainHistory) {
    let corpus = small_corpus();
    let vocab = train_bpe(&corpus, 300).expect("memorization vocab trains");
    let config = ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::TinyTransformer,
            layers: 1,
            embed_dim: 24,
            heads: 3,
            seed: 41,
        },
        gcn: GcnConfig {
            n_layers: 2,
            feature_dim: 24,
            activation: Activation::Relu,
            residual: true,
        },
        head_hidden: Some(16),
        max_len: 128,
    };
    let mut model =
        VulnModel::new(config, SvgConfig::default(), vocab).expect("memorization model builds");
    let split = CorpusSplit::all_train(&corpus, 5);
    let params = TrainParams {
        epochs: 300,
        lr: 3e-3,
        batch_size: 4,
        lambda_loc: 1.0,
        focal: FocalParams {
            alpha: 1.0,
            delta: 2.0,
        },
    };
    let history = train(&mut model, &corpus, &split, &params).expect("memorization training runs");
    (model, history)
}

fn memorized() -> &'static Memorized {
    static CELL: OnceLock<Memorized> = OnceLock::new();
    CELL.get_or_init(|| {
        let (model, history) = train_memorization();
        Memorized { model, history }
    })
}

#[test]
fn criterion_6_memorization_sanity() {
    criterion(6, "memorization sanity", Duration::from_secs(300), || {
        let m = memorized();
        if m.history.epochs.len() > 500 {
            return Err(format!("{} epochs exceeds the 500 allowance", m.history.epochs.len()));
        }
        let accuracy = m.history.final_train_accuracy;
        let iou = m
            .history
            .final_train_mean_iou
            .ok_or("history carries no mean IoU despite ranged labels")?;
        if accuracy < 1.0 {
            return Err(format!("train accuracy {accuracy} < 1.0"));
        }
        if iou < 0.9 {
            return Err(format!("train mean IoU {iou:.4} < 0.9"));
        }

        let (retrained, second_history) = train_memorization();
        if second_history != m.history {
            return Err("retraining with the same seed changed the history".to_string());
        }
        for name in m.model.param_names() {
            if m.model.param(name) != retrained.param(name) {
                return Err(format!("retraining with the same seed changed `{name}`"));
            }
        }
        Ok(format!(
            "accuracy {accuracy}, mean IoU {iou:.4} after {} epochs; retrain is bitwise identical",
            m.history.epochs.len()
        ))
    });
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_desk_scale_learning() {
    criterion(7, "desk-scale learning", Duration::from_secs(900), || {
        let corpus = training_corpus(200, 99);
        let split = make_split(&corpus, 7).map_err(|e| e.to_string())?;
        let vocab = train_bpe(&corpus, 512).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::TinyTransformer,
                layers: 1,
                embed_dim: 24,
                heads: 3,
                seed: 17,
            },
            gcn: GcnConfig {
                n_layers: 2,
                feature_dim: 24,
                activation: Activation::Relu,
                residual: true,
            },
            head_hidden: Some(16),
            max_len: 224,
        };
        let mut model =
            VulnModel::new(config, SvgConfig::default(), vocab).map_err(|e| e.to_string())?;
        let params = TrainParams {
            epochs: 50,
            lr: 3e-3,
            batch_size: 8,
            lambda_loc: 1.0,
            focal: FocalParams {
                alpha: 1.0,
                delta: 2.0,
            },
        };
        train(&mut model, &corpus, &split, &params).map_err(|e| e.to_string())?;

        let report = evaluate(&model, &corpus, &split.test_ids).map_err(|e| e.to_string())?;

        let truths: Vec<CweClass> = split
            .test_ids
            .iter()
            .map(|id| {
                corpus
                    .get(id)
                    .and_then(|f| f.label)
                    .map(|l| l.class())
                    .ok_or_else(|| format!("unlabeled test id {id}"))
            })
            .collect::<Result<_, _>>()?;
        let majority = vec![CweClass::NON_VULNERABLE; truths.len()];
        let baseline = classification_report(&majority, &truths).map_err(|e| e.to_string())?;

        let iou = report.mean_iou.ok_or("test set has no ranged truths")?;
        if report.f1 < baseline.f1 + 0.2 {
            return Err(format!(
                "macro-F1 {:.4} does not beat the majority baseline {:.4} by 0.2",
                report.f1, baseline.f1
            ));
        }
        if iou < 0.5 {
            return Err(format!("test mean IoU {iou:.4} < 0.5"));
        }
        Ok(format!(
            "test macro-F1 {:.4} vs majority baseline {:.4}; test mean IoU {iou:.4}",
            report.f1, baseline.f1
        ))
    });
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_end_to_end_scan() {
    let m = memorized();
    criterion(8, "end-to-end scan", Duration::from_secs(60), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        write_fixture_tree(dir.path()).map_err(|e| e.to_string())?;
        let catalog = CweCatalog::default();

        let first =
            scan_with_threads(&m.model, dir.path(), &catalog, Some(2)).map_err(|e| e.to_string())?;
        let second =
            scan_with_threads(&m.model, dir.path(), &catalog, Some(1)).map_err(|e| e.to_string())?;
        let report_a = render_report(&first, ReportFormat::Structured);
        let report_b = render_report(&second, ReportFormat::Structured);
        if report_a != report_b {
            return Err("structured report is not bitwise reproducible across runs".to_string());
        }
        if !report_a.starts_with(REPORT_MAGIC) {
            return Err("structured report lacks its magic line".to_string());
        }

        let findings = parse_structured_report(&report_a).map_err(|e| e.to_string())?;
        let mut reserialized = String::from(REPORT_MAGIC);
        reserialized.push('\n');
        for f in &findings {
            reserialized.push_str(&serde_json::to_string(f).map_err(|e| e.to_string())?);
            reserialized.push('\n');
        }
        if reserialized != report_a {
            return Err("structured report does not round-trip through parse".to_string());
        }
        if findings.is_empty() {
            return Err("memorized model found none of the planted vulnerabilities".to_string());
        }
        for (file, cwe) in [
            ("src/alpha.c", 119u16),
            ("src/beta.c", 416),
            ("src/include/gamma.h", 476),
        ] {
            if !findings.iter().any(|f| f.file == file && f.cwe == cwe) {
                return Err(format!("planted CWE-{cwe} in {file} is missing from the findings"));
            }
        }

        let text = render_report(&first, ReportFormat::Text);
        let n = text.matches("== candidate finding:").count();
        for section in [
            "1) identification:",
            "2) description:",
            "3) vulnerable lines",
            "4) root cause:",
        ] {
            let count = text.matches(section).count();
            if count != n {
                return Err(format!(
                    "text report has {count} `{section}` sections for {n} findings"
                ));
            }
        }
        Ok(format!(
            "{} findings; structured report round-trips bitwise; four numbered sections per finding",
            findings.len()
        ))
    });
}

// ---------------------------------------------------------------- 9

fn random_c_snippet(rng: &mut ChaCha8Rng) -> String {
    const FRAGMENTS: [&str; 26] = [
        "int ", "x", "y2", " = ", "(", ")", ";", "\n", "if ", "while ", "buf[", "]", "0x1F", "42",
        " + ", "->next", "*p", "\"str\"", "/* c */", "  ", "{", "}", "return ", "_tmp", "char ",
        " % ",
    ];
    let k = rng.random_range(1..=40);
    (0..k)
        .map(|_| FRAGMENTS[rng.random_range(0..FRAGMENTS.len())])
        .collect()
}

#[test]
fn criterion_9_round_trips() {
    criterion(9, "corpus/tokenizer round-trips", Duration::from_secs(30), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        for (name, corpus) in [
            ("small.corpus", small_corpus()),
            ("train.corpus", training_corpus(60, 3)),
        ] {
            let path = dir.path().join(name);
            save_corpus(&corpus, &path).map_err(|e| e.to_string())?;
            let loaded = load_corpus(&path).map_err(|e| e.to_string())?;
            if loaded != corpus {
                return Err(format!("{name}: load(save(corpus)) differs from the corpus"));
            }
        }

        let vocab = train_bpe(&small_corpus(), 300).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let max_len = 64;
        let (mut complete, mut truncated) = (0usize, 0usize);
        for i in 0..1000 {
            let text = random_c_snippet(&mut rng);
            let function = CodeFunction::new(format!("snip_{i}"), "snip.c", 1, text, None)
                .map_err(|e| e.to_string())?;
            let seq = encode(&vocab, &function, max_len).map_err(|e| e.to_string())?;
            let bytes = decode(&vocab, &seq);
            let reference = function.source_text.as_bytes();
            if !reference.starts_with(&bytes) {
                return Err(format!("snippet {i}: decode is not a prefix of the source"));
            }
            if seq.n_real < seq.max_len() {
                if bytes != reference {
                    return Err(format!(
                        "snippet {i}: untruncated decode differs from the source"
                    ));
                }
                complete += 1;
            } else {
                truncated += 1;
            }
        }
        Ok(format!(
            "corpus round-trips equal; 1000 snippets decode byte-equal up to truncation ({complete} complete, {truncated} truncated)"
        ))
    });
}

// Every head class referenced by the criteria must exist in the catalog;
// a missing entry would quietly weaken criterion 8's description checks.
#[test]
fn catalog_covers_every_head_class() {
    let catalog = CweCatalog::default();
    for &code in &CWE_CLASSES {
        let class = CweClass::from_code(code).expect("head classes are valid");
        assert!(
            catalog.get(class).is_some(),
            "catalog lacks an entry for class {code}"
        );
    }
}
