//! Evaluation harness: precision/recall/F-score, k-fold cross-validation
//! over labeled contracts, TF-IDF opcode importance ranking, and a 2-D PCA
//! projection of embeddings for visualization.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::classifier::predict;
use crate::numerics::{matmul, Rng, Tensor2};
use crate::pipeline::{
    init_model, labeled_nodes, train_classifier_cached, train_embeddings, EmbeddingContext,
    PipelineError, TrainConfig, STREAM_KFOLD, STREAM_STAGE2,
};
use crate::txgraph::{build_graph, Label, TemporalGraph, TransactionEvent};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {k} labeled accounts, got {n}")]
    TooFewItems { k: usize, n: usize },
    #[error("class {0:?} has no contracts")]
    EmptyClass(Label),
    #[error("need at least 2 embeddings to project, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Binary confusion counts with Ponzi as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (Label::Ponzi, Label::Ponzi) => c.tp += 1,
                (Label::Ponzi, Label::Normal) => c.fp += 1,
                (Label::Normal, Label::Ponzi) => c.fn_ += 1,
                (Label::Normal, Label::Normal) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Precision, recall, F-score; `undefined` flags any 0/0 ratio that was
/// reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub undefined: bool,
}

pub fn prf(c: &ConfusionCounts) -> Prf {
    let mut undefined = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            undefined = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f_score = if precision + recall == 0.0 {
        undefined = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f_score,
        undefined,
    }
}

/// Disjoint, covering, balanced partition of labeled account ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

/// Seeded shuffle followed by round-robin assignment into `k` folds.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if ids.len() < k || k == 0 {
        return Err(EvalError::TooFewItems { k, n: ids.len() });
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = Rng::new(Rng::derive_seed(seed, STREAM_KFOLD));
    rng.shuffle(&mut sorted);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in sorted.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { folds })
}

/// One fold's metrics within a cross-validation run.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub outcome: Result<Prf, String>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: Prf,
    /// True when at least one fold failed; the mean covers completed folds.
    pub partial: bool,
}

/// Full cross-validation: stage 1 over all transaction data (unsupervised,
/// shared across folds), then per fold a stage-2 model trained on the other
/// folds' labels and evaluated on the held-out fold. `jobs` > 1 trains
/// folds on that many threads; results are deterministic either way.
pub fn cross_validate(
    events: &[TransactionEvent],
    graph: &TemporalGraph,
    config: &TrainConfig,
    k: usize,
    jobs: usize,
) -> Result<CvReport, EvalError> {
    let labeled = labeled_nodes(graph);
    let ids: Vec<String> = labeled
        .iter()
        .map(|&(idx, _)| graph.account(idx).id.to_string())
        .collect();
    let plan = kfold_split(&ids, k, config.seed)?;

    let mut bundle = init_model(graph, config)?;
    train_embeddings(&mut bundle, graph, events)?;

    // The embedding side is frozen from here on; the compressed sequences
    // are therefore fold-independent and computed once.
    let mut ctx = EmbeddingContext::new(graph, &bundle);
    let mut sequences = Vec::with_capacity(labeled.len());
    for &(node, _) in &labeled {
        sequences.push(ctx.compressed_sequence(node)?);
    }
    drop(ctx);
    let index_of: std::collections::BTreeMap<&str, usize> = labeled
        .iter()
        .enumerate()
        .map(|(i, &(idx, _))| (graph.account(idx).id.as_str(), i))
        .collect();

    let run_fold = |fold_idx: usize| -> Result<Prf, String> {
        let held: Vec<usize> = plan.folds[fold_idx]
            .iter()
            .map(|id| index_of[id.as_str()])
            .collect();
        let held_set: std::collections::BTreeSet<usize> = held.iter().copied().collect();
        let train: Vec<(usize, Label)> = (0..labeled.len())
            .filter(|i| !held_set.contains(i))
            .map(|i| (i, labeled[i].1))
            .collect();
        let mut fold_bundle = bundle.clone();
        let mut rng = Rng::new(Rng::derive_seed(
            Rng::derive_seed(config.seed, STREAM_STAGE2),
            fold_idx as u64,
        ));
        train_classifier_cached(&mut fold_bundle, &train, &sequences, &mut rng)
            .map_err(|e| e.to_string())?;

        let mut eval_rng = Rng::new(0);
        let pairs: Result<Vec<(Label, Label)>, String> = held
            .iter()
            .map(|&i| {
                let fwd =
                    crate::temporal::lstm_forward(&sequences[i], &fold_bundle.sequence, false, &mut eval_rng)
                        .map_err(|e| e.to_string())?;
                let mlp = crate::classifier::mlp_forward(&fwd.hidden, &fold_bundle.classifier)
                    .map_err(|e| e.to_string())?;
                Ok((predict(mlp.margin, 0.0), labeled[i].1))
            })
            .collect();
        let counts = ConfusionCounts::from_pairs(pairs?);
        debug_assert_eq!(counts.total(), held.len());
        Ok(prf(&counts))
    };

    let outcomes: Vec<Result<Prf, String>> = if jobs <= 1 {
        (0..k).map(run_fold).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..k)
                .map(|fold_idx| scope.spawn(move || run_fold(fold_idx)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("fold thread")).collect()
        })
    };

    let folds: Vec<FoldResult> = outcomes
        .into_iter()
        .enumerate()
        .map(|(fold, outcome)| FoldResult { fold, outcome })
        .collect();
    let completed: Vec<&Prf> = folds.iter().filter_map(|f| f.outcome.as_ref().ok()).collect();
    let partial = completed.len() != folds.len();
    let n = completed.len().max(1) as f64;
    let mean = Prf {
        precision: completed.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: completed.iter().map(|p| p.recall).sum::<f64>() / n,
        f_score: completed.iter().map(|p| p.f_score).sum::<f64>() / n,
        undefined: completed.iter().any(|p| p.undefined),
    };
    Ok(CvReport { folds, mean, partial })
}

/// Convenience wrapper building the graph from a dataset.
pub fn cross_validate_dataset(
    dataset: &crate::dataio::Dataset,
    config: &TrainConfig,
    k: usize,
    jobs: usize,
) -> Result<CvReport, EvalError> {
    let graph = build_graph(&dataset.events, &dataset.accounts);
    cross_validate(&dataset.events, &graph, config, k, jobs)
}

pub fn write_metrics_csv(path: &Path, report: &CvReport) -> Result<(), EvalError> {
    let mut out = String::from("fold,precision,recall,f_score\n");
    for fold in &report.folds {
        match &fold.outcome {
            Ok(p) => {
                writeln!(out, "{},{},{},{}", fold.fold, p.precision, p.recall, p.f_score)
                    .expect("string write");
            }
            Err(e) => {
                writeln!(out, "{},error,error,error # {e}", fold.fold).expect("string write");
            }
        }
    }
    writeln!(
        out,
        "mean,{},{},{}",
        report.mean.precision, report.mean.recall, report.mean.f_score
    )
    .expect("string write");
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One opcode's importance: the larger of its per-class TF-IDF values and
/// the class that attains it.
#[derive(Debug, Clone, PartialEq)]
pub struct OpcodeImportance {
    pub opcode: String,
    pub score: f64,
    pub class: Label,
}

/// TF-IDF opcode ranking over labeled contracts.
///
/// IDF is `ln(N / df)` over all contracts; TF is the opcode's count divided
/// by the total token count of each class corpus; the final score is the
/// max of the two class TF-IDF values, attributed to the winning class
/// (ties go to Normal). Sorted by descending score, then mnemonic.
pub fn tfidf_opcode_importance(
    contracts: &[(&[String], Label)],
) -> Result<Vec<OpcodeImportance>, EvalError> {
    for class in [Label::Ponzi, Label::Normal] {
        if !contracts.iter().any(|&(_, l)| l == class) {
            return Err(EvalError::EmptyClass(class));
        }
    }
    let n = contracts.len() as f64;
    let mut df: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    let mut counts: std::collections::BTreeMap<&str, (f64, f64)> = std::collections::BTreeMap::new();
    let mut totals = (0.0f64, 0.0f64);
    for &(opcodes, label) in contracts {
        let mut seen: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for op in opcodes {
            let slot = counts.entry(op).or_insert((0.0, 0.0));
            match label {
                Label::Ponzi => {
                    slot.0 += 1.0;
                    totals.0 += 1.0;
                }
                Label::Normal => {
                    slot.1 += 1.0;
                    totals.1 += 1.0;
                }
            }
            seen.insert(op);
        }
        for op in seen {
            *df.entry(op).or_insert(0) += 1;
        }
    }

    let mut ranked: Vec<OpcodeImportance> = counts
        .iter()
        .map(|(&op, &(ponzi_count, normal_count))| {
            let idf = (n / df[op] as f64).ln();
            let tfidf_p = ponzi_count / totals.0 * idf;
            let tfidf_n = normal_count / totals.1 * idf;
            if tfidf_p > tfidf_n {
                OpcodeImportance {
                    opcode: op.to_string(),
                    score: tfidf_p,
                    class: Label::Ponzi,
                }
            } else {
                OpcodeImportance {
                    opcode: op.to_string(),
                    score: tfidf_n,
                    class: Label::Normal,
                }
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.opcode.cmp(&b.opcode))
    });
    Ok(ranked)
}

pub fn write_importance_csv(
    path: &Path,
    ranked: &[OpcodeImportance],
    top: usize,
) -> Result<(), EvalError> {
    let mut out = String::from("opcode,score,class\n");
    for item in ranked.iter().take(top) {
        let class = match item.class {
            Label::Ponzi => "ponzi",
            Label::Normal => "normal",
        };
        writeln!(out, "{},{},{}", item.opcode, item.score, class).expect("string write");
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// 2-D PCA projection of row-vector embeddings.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coords: Vec<(f64, f64)>,
    /// Variance captured by each component.
    pub variances: (f64, f64),
    /// Set when the inputs were all identical (both components zero).
    pub degenerate: bool,
}

const POWER_ITERATIONS: usize = 500;
const POWER_TOLERANCE: f64 = 1e-13;

fn power_iteration(cov: &Tensor2, rng: &mut Rng) -> (Tensor2, f64) {
    let d = cov.rows();
    let mut v = Tensor2::uniform(d, 1, -1.0, 1.0, rng);
    let norm = v.frobenius_sq().sqrt();
    v = v.scale(1.0 / norm);
    let mut eigenvalue = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let next = matmul(cov, &v).expect("square times column");
        let norm = next.frobenius_sq().sqrt();
        if norm < POWER_TOLERANCE {
            return (Tensor2::zeros(d, 1), 0.0);
        }
        let next = next.scale(1.0 / norm);
        let delta = next
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        v = next;
        eigenvalue = norm;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    // Sign convention: make the largest-magnitude entry positive.
    let lead = v
        .data()
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite"))
        .unwrap_or(0.0);
    if lead < 0.0 {
        v = v.scale(-1.0);
    }
    (v, eigenvalue)
}

/// Mean-centered PCA onto the top two principal components via power
/// iteration with deflation; deterministic under `seed`.
pub fn project_2d(embeddings: &[Tensor2], seed: u64) -> Result<Projection, EvalError> {
    if embeddings.len() < 2 {
        return Err(EvalError::TooFewPoints(embeddings.len()));
    }
    let n = embeddings.len();
    let d = embeddings[0].cols();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, &x) in mean.iter_mut().zip(e.data()) {
            *m += x / n as f64;
        }
    }
    let mut centered = Tensor2::zeros(n, d);
    for (i, e) in embeddings.iter().enumerate() {
        for (j, (&x, &m)) in e.data().iter().zip(&mean).enumerate() {
            centered.set(i, j, x - m);
        }
    }
    let cov = matmul(&centered.transpose(), &centered)
        .expect("covariance")
        .scale(1.0 / (n as f64 - 1.0));

    let mut rng = Rng::new(Rng::derive_seed(seed, crate::pipeline::STREAM_PROJECT));
    let (v1, lambda1) = power_iteration(&cov, &mut rng);
    // Deflate and extract the second component.
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            let value = deflated.get(i, j) - lambda1 * v1.get(i, 0) * v1.get(j, 0);
            deflated.set(i, j, value);
        }
    }
    let (v2, lambda2) = power_iteration(&deflated, &mut rng);

    let coords = (0..n)
        .map(|i| {
            let row = centered.row_slice(i);
            let x: f64 = row.iter().zip(v1.data()).map(|(&r, &v)| r * v).sum();
            let y: f64 = row.iter().zip(v2.data()).map(|(&r, &v)| r * v).sum();
            (x, y)
        })
        .collect();
    Ok(Projection {
        coords,
        variances: (lambda1, lambda2),
        degenerate: lambda1 == 0.0 && lambda2 == 0.0,
    })
}

pub fn write_projection_csv(
    path: &Path,
    ids: &[String],
    labels: &[Option<Label>],
    projection: &Projection,
) -> Result<(), EvalError> {
    let mut out = String::from("id,x,y,label\n");
    for ((id, label), &(x, y)) in ids.iter().zip(labels).zip(&projection.coords) {
        let tag = match label {
            Some(Label::Ponzi) => "1",
            Some(Label::Normal) => "0",
            None => "",
        };
        writeln!(out, "{id},{x},{y},{tag}").expect("string write");
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Minimal SVG scatter plot of a projection, Ponzi points red, normal blue.
pub fn write_projection_svg(
    path: &Path,
    labels: &[Option<Label>],
    projection: &Projection,
) -> Result<(), EvalError> {
    let (w, h, margin) = (640.0, 480.0, 20.0);
    let xs: Vec<f64> = projection.coords.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = projection.coords.iter().map(|c| c.1).collect();
    let bound = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) }
    };
    let (x_lo, x_hi) = bound(&xs);
    let (y_lo, y_hi) = bound(&ys);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for (label, &(x, y)) in labels.iter().zip(&projection.coords) {
        let px = margin + (x - x_lo) / (x_hi - x_lo) * (w - 2.0 * margin);
        let py = h - margin - (y - y_lo) / (y_hi - y_lo) * (h - 2.0 * margin);
        let color = match label {
            Some(Label::Ponzi) => "#d62728",
            Some(Label::Normal) => "#1f77b4",
            None => "#7f7f7f",
        };
        writeln!(out, "  <circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.7\"/>")
            .expect("string write");
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prf_hand_counted() {
        let p = prf(&ConfusionCounts { tp: 2, fp: 0, fn_: 2, tn: 0 });
        assert_eq!(p.precision, 1.0);
        assert_eq!(p.recall, 0.5);
        assert!((p.f_score - 2.0 / 3.0).abs() < 1e-12);
        assert!(!p.undefined);
    }

    #[test]
    fn f_score_matches_reported_row() {
        // P = 0.98, R = 0.85 must give F close to the reported 0.91.
        let f: f64 = 2.0 * 0.98 * 0.85 / (0.98 + 0.85);
        assert!((f - 0.91).abs() < 0.005, "F = {f}");
    }

    #[test]
    fn zero_over_zero_is_flagged() {
        let p = prf(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 });
        assert_eq!(p.precision, 0.0);
        assert_eq!(p.recall, 0.0);
        assert_eq!(p.f_score, 0.0);
        assert!(p.undefined);
    }

    #[test]
    fn confusion_counts_match_manual_recount() {
        let mut rng = Rng::new(4);
        let pairs: Vec<(Label, Label)> = (0..200)
            .map(|_| {
                let p = if rng.bernoulli(0.3) { Label::Ponzi } else { Label::Normal };
                let a = if rng.bernoulli(0.3) { Label::Ponzi } else { Label::Normal };
                (p, a)
            })
            .collect();
        let c = ConfusionCounts::from_pairs(pairs.iter().copied());
        let tp = pairs.iter().filter(|&&(p, a)| p == Label::Ponzi && a == Label::Ponzi).count();
        let fp = pairs.iter().filter(|&&(p, a)| p == Label::Ponzi && a == Label::Normal).count();
        assert_eq!(c.tp, tp);
        assert_eq!(c.fp, fp);
        assert_eq!(c.total(), 200);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("acct{i:04}")).collect()
    }

    #[test]
    fn kfold_even_split() {
        let plan = kfold_split(&ids(100), 10, 7).unwrap();
        assert_eq!(plan.folds.len(), 10);
        assert!(plan.folds.iter().all(|f| f.len() == 10));
    }

    #[test]
    fn kfold_remainder_spreads_by_one() {
        let plan = kfold_split(&ids(101), 10, 7).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes[0], 10);
        assert_eq!(sizes[9], 11);
    }

    #[test]
    fn kfold_is_deterministic() {
        let a = kfold_split(&ids(37), 5, 7).unwrap();
        let b = kfold_split(&ids(37), 5, 7).unwrap();
        assert_eq!(a, b);
        let c = kfold_split(&ids(37), 5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kfold_invariants_hold_on_random_instances() {
        let mut rng = Rng::new(99);
        for trial in 0..100 {
            let n = 10 + rng.below(200);
            let k = 2 + rng.below(9);
            let all = ids(n);
            let plan = kfold_split(&all, k, trial).unwrap();
            // Disjoint and covering.
            let mut seen: Vec<&String> = plan.folds.iter().flatten().collect();
            seen.sort();
            assert_eq!(seen.len(), n, "trial {trial}: folds must cover all ids");
            seen.dedup();
            assert_eq!(seen.len(), n, "trial {trial}: folds must be disjoint");
            // Balanced within one.
            let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "trial {trial}: sizes {sizes:?}");
        }
    }

    #[test]
    fn kfold_rejects_too_few_items() {
        assert!(matches!(
            kfold_split(&ids(3), 10, 7),
            Err(EvalError::TooFewItems { .. })
        ));
    }

    fn to_contracts(raw: &[(&str, &[&str])]) -> Vec<(Vec<String>, Label)> {
        raw.iter()
            .map(|&(label, ops)| {
                let l = if label == "p" { Label::Ponzi } else { Label::Normal };
                (ops.iter().map(|s| s.to_string()).collect(), l)
            })
            .collect()
    }

    #[test]
    fn tfidf_matches_brute_force_oracle() {
        let contracts = to_contracts(&[
            ("p", &["A", "B", "A"]),
            ("p", &["A", "C"]),
            ("n", &["B", "B", "D"]),
        ]);
        let refs: Vec<(&[String], Label)> =
            contracts.iter().map(|(ops, l)| (ops.as_slice(), *l)).collect();
        let ranked = tfidf_opcode_importance(&refs).unwrap();

        // Independent brute-force computation.
        let n = 3.0f64;
        let oracle = |op: &str| -> (f64, f64) {
            let df = contracts
                .iter()
                .filter(|(ops, _)| ops.iter().any(|o| o == op))
                .count() as f64;
            let idf = (n / df).ln();
            let count_in = |label: Label| -> f64 {
                contracts
                    .iter()
                    .filter(|&&(_, l)| l == label)
                    .flat_map(|(ops, _)| ops.iter())
                    .filter(|o| o.as_str() == op)
                    .count() as f64
            };
            let total_in = |label: Label| -> f64 {
                contracts
                    .iter()
                    .filter(|&&(_, l)| l == label)
                    .map(|(ops, _)| ops.len() as f64)
                    .sum()
            };
            (
                count_in(Label::Ponzi) / total_in(Label::Ponzi) * idf,
                count_in(Label::Normal) / total_in(Label::Normal) * idf,
            )
        };
        for item in &ranked {
            let (p, q) = oracle(&item.opcode);
            let expected = p.max(q);
            assert_eq!(item.score, expected, "opcode {}", item.opcode);
            let expected_class = if p > q { Label::Ponzi } else { Label::Normal };
            assert_eq!(item.class, expected_class, "opcode {}", item.opcode);
        }
        // D (normal-only, df=1) outranks everything.
        assert_eq!(ranked[0].opcode, "D");
        assert_eq!(ranked[0].class, Label::Normal);
    }

    #[test]
    fn ubiquitous_opcode_scores_zero() {
        let contracts = to_contracts(&[
            ("p", &["X", "A"]),
            ("n", &["X", "B"]),
        ]);
        let refs: Vec<(&[String], Label)> =
            contracts.iter().map(|(ops, l)| (ops.as_slice(), *l)).collect();
        let ranked = tfidf_opcode_importance(&refs).unwrap();
        let x = ranked.iter().find(|i| i.opcode == "X").unwrap();
        assert_eq!(x.score, 0.0);
    }

    #[test]
    fn exclusive_opcode_attributed_to_its_class() {
        let contracts = to_contracts(&[
            ("p", &["PONLY", "A"]),
            ("p", &["PONLY"]),
            ("n", &["B"]),
        ]);
        let refs: Vec<(&[String], Label)> =
            contracts.iter().map(|(ops, l)| (ops.as_slice(), *l)).collect();
        let ranked = tfidf_opcode_importance(&refs).unwrap();
        let p = ranked.iter().find(|i| i.opcode == "PONLY").unwrap();
        assert_eq!(p.class, Label::Ponzi);
        assert!(p.score > 0.0);
    }

    #[test]
    fn tfidf_requires_both_classes() {
        let contracts = to_contracts(&[("p", &["A"])]);
        let refs: Vec<(&[String], Label)> =
            contracts.iter().map(|(ops, l)| (ops.as_slice(), *l)).collect();
        assert!(matches!(
            tfidf_opcode_importance(&refs),
            Err(EvalError::EmptyClass(_))
        ));
    }

    #[test]
    fn projection_of_2d_points_preserves_distances() {
        let mut rng = Rng::new(12);
        let points: Vec<Tensor2> = (0..20)
            .map(|_| Tensor2::uniform(1, 2, -3.0, 3.0, &mut rng))
            .collect();
        let proj = project_2d(&points, 7).unwrap();
        // Projecting 2-D data onto two principal components is an orthogonal
        // change of basis around the mean: pairwise distances survive.
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let orig = ((points[i].get(0, 0) - points[j].get(0, 0)).powi(2)
                    + (points[i].get(0, 1) - points[j].get(0, 1)).powi(2))
                .sqrt();
                let (xi, yi) = proj.coords[i];
                let (xj, yj) = proj.coords[j];
                let mapped = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
                assert!((orig - mapped).abs() < 1e-9, "{orig} vs {mapped}");
            }
        }
    }

    #[test]
    fn collinear_points_have_negligible_second_variance() {
        let dir = [1.0, 2.0, -1.0];
        let points: Vec<Tensor2> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.5;
                Tensor2::row(&[dir[0] * t, dir[1] * t, dir[2] * t]).unwrap()
            })
            .collect();
        let proj = project_2d(&points, 7).unwrap();
        assert!(proj.variances.1.abs() < 1e-9, "second variance {}", proj.variances.1);
        assert!(proj.variances.0 > 1.0);
    }

    #[test]
    fn first_component_carries_at_least_as_much_variance() {
        let mut rng = Rng::new(13);
        let points: Vec<Tensor2> = (0..30)
            .map(|_| Tensor2::uniform(1, 5, -1.0, 1.0, &mut rng))
            .collect();
        let proj = project_2d(&points, 7).unwrap();
        assert!(proj.variances.0 >= proj.variances.1);
    }

    #[test]
    fn identical_points_are_flagged_degenerate() {
        let points = vec![Tensor2::row(&[1.0, 2.0]).unwrap(); 5];
        let proj = project_2d(&points, 7).unwrap();
        assert!(proj.degenerate);
        for &(x, y) in &proj.coords {
            assert_eq!(x, 0.0);
            assert_eq!(y, 0.0);
        }
    }

    #[test]
    fn projection_is_deterministic_under_seed() {
        let mut rng = Rng::new(14);
        let points: Vec<Tensor2> = (0..15)
            .map(|_| Tensor2::uniform(1, 4, -1.0, 1.0, &mut rng))
            .collect();
        let a = project_2d(&points, 7).unwrap();
        let b = project_2d(&points, 7).unwrap();
        assert_eq!(a.coords, b.coords);
    }
}
