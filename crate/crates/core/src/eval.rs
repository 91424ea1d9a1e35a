//! Ranking evaluation: per-patient top-K metrics and AUC, macro-averaged
//! over test patients.
//!
//! For each patient with at least one test positive, every disease outside
//! the training positives is a candidate; candidates are scored in one
//! eval-mode forward pass shared across patients. Ties in ranking break by
//! ascending disease index, AUC counts tied pairs as 0.5.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{final_embeddings, forward_eval, FinalEmbeddings, ModelState, PropagationGraph};

/// Descending score, ascending index on ties.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Indices of the K largest scores. Sentinel (-inf) entries never qualify;
/// when fewer than K finite candidates exist the list is shorter.
pub fn rank(scores: &[f64], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > f64::NEG_INFINITY)
        .map(|(d, &s)| (s, d))
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, rank_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand.into_iter().map(|(_, d)| d).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKMetrics {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub hit: f64,
}

/// recall = hits/|test|, precision = hits/K, hit = [hits > 0], and binary
/// NDCG with the ideal truncated at min(|test|, K).
pub fn metrics_at_k(topk: &[usize], test_pos: &HashSet<usize>, k: usize) -> TopKMetrics {
    let hits = topk.iter().filter(|d| test_pos.contains(d)).count();
    let dcg: f64 = topk
        .iter()
        .enumerate()
        .filter(|(_, d)| test_pos.contains(d))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..test_pos.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    TopKMetrics {
        recall: hits as f64 / test_pos.len() as f64,
        precision: hits as f64 / k as f64,
        ndcg: if ideal > 0.0 { dcg / ideal } else { 0.0 },
        hit: if hits > 0 { 1.0 } else { 0.0 },
    }
}

/// Probability that a random (test positive, negative) pair is ordered
/// correctly, ties counted half. Negatives are all diseases outside
/// test ∪ train positives. None when either side is empty.
pub fn auc(
    scores: &[f64],
    test_pos: &HashSet<usize>,
    train_pos: &HashSet<usize>,
) -> Option<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    let mut n_pos = 0usize;
    for (d, &s) in scores.iter().enumerate() {
        if train_pos.contains(&d) {
            continue;
        }
        let positive = test_pos.contains(&d);
        n_pos += positive as usize;
        scored.push((s, positive));
    }
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mann-Whitney U via midranks; exact for ties because midranks are
    // halves of integers.
    scored.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for entry in &scored[i..j] {
            if entry.1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatientMetrics {
    pub patient: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub hit: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricMeans {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub hit: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub k: usize,
    pub evaluated_patients: usize,
    pub means: MetricMeans,
    pub per_patient: Vec<PatientMetrics>,
}

/// Score one patient against every candidate disease and fold the ranking
/// into metrics. None when the patient has no test positive or no negative.
fn patient_metrics(
    embeddings: &FinalEmbeddings,
    dataset: &Dataset,
    patient: usize,
    k: usize,
) -> Option<PatientMetrics> {
    let test_pos = dataset.test_positives(patient);
    if test_pos.is_empty() {
        return None;
    }
    let train_pos = dataset.train_positives(patient);
    let scores = embeddings.score_all(patient, &train_pos);
    let auc = match auc(&scores, &test_pos, &train_pos) {
        Some(a) => a,
        None => {
            log::warn!("patient {patient} has no negatives; excluded from evaluation");
            return None;
        }
    };
    let topk = rank(&scores, k);
    let m = metrics_at_k(&topk, &test_pos, k);
    Some(PatientMetrics {
        patient,
        recall: m.recall,
        precision: m.precision,
        ndcg: m.ndcg,
        hit: m.hit,
        auc,
    })
}

/// Evaluate precomputed final embeddings over the dataset's test split.
/// Patients run in parallel; the aggregation always sums in index order, so
/// the report is independent of scheduling.
pub fn evaluate_embeddings(
    embeddings: &FinalEmbeddings,
    dataset: &Dataset,
    k: usize,
) -> MetricReport {
    let per_patient: Vec<PatientMetrics> = (0..dataset.num_patients())
        .into_par_iter()
        .map(|p| patient_metrics(embeddings, dataset, p, k))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let n = per_patient.len().max(1) as f64;
    let mut sums = [0.0f64; 5];
    for m in &per_patient {
        sums[0] += m.recall;
        sums[1] += m.precision;
        sums[2] += m.ndcg;
        sums[3] += m.hit;
        sums[4] += m.auc;
    }
    MetricReport {
        k,
        evaluated_patients: per_patient.len(),
        means: MetricMeans {
            recall: sums[0] / n,
            precision: sums[1] / n,
            ndcg: sums[2] / n,
            hit: sums[3] / n,
            auc: sums[4] / n,
        },
        per_patient,
    }
}

/// Run one eval-mode forward pass and evaluate the dataset at cutoff K.
pub fn evaluate(state: &ModelState, dataset: &Dataset, k: usize) -> Result<MetricReport> {
    let graph = PropagationGraph::from_interactions(&dataset.train);
    let outputs = forward_eval(state, &graph)?;
    Ok(evaluate_embeddings(&final_embeddings(&outputs), dataset, k))
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseRow {
    pub rank: usize,
    pub disease_code: String,
    pub score: f64,
    pub hit: bool,
}

/// Ranked top-K diseases for one patient with hit/miss flags against the
/// held-out test positives.
pub fn case_report(
    state: &ModelState,
    dataset: &Dataset,
    patient_id: &str,
    k: usize,
) -> Result<Vec<CaseRow>> {
    let patient = dataset
        .patient_index(patient_id)
        .ok_or_else(|| Error::Domain(format!("unknown patient id `{patient_id}`")))?;
    let test_pos = dataset.test_positives(patient);
    if test_pos.is_empty() {
        return Err(Error::Domain(format!(
            "patient `{patient_id}` has no test positives to recover"
        )));
    }
    let graph = PropagationGraph::from_interactions(&dataset.train);
    let embeddings = final_embeddings(&forward_eval(state, &graph)?);
    let train_pos = dataset.train_positives(patient);
    let scores = embeddings.score_all(patient, &train_pos);
    let topk = rank(&scores, k);
    Ok(topk
        .into_iter()
        .enumerate()
        .map(|(i, d)| CaseRow {
            rank: i + 1,
            disease_code: dataset.disease_codes[d].clone(),
            score: scores[d],
            hit: test_pos.contains(&d),
        })
        .collect())
}

/// Per-patient CSV `patient_id,recall,precision,ndcg,hit,auc` with a
/// one-line MEAN footer.
pub fn write_report_csv(report: &MetricReport, dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["patient_id", "recall", "precision", "ndcg", "hit", "auc"])?;
    for m in &report.per_patient {
        writer.write_record([
            dataset.patient_ids[m.patient].as_str(),
            &m.recall.to_string(),
            &m.precision.to_string(),
            &m.ndcg.to_string(),
            &m.hit.to_string(),
            &m.auc.to_string(),
        ])?;
    }
    writer.write_record([
        "MEAN",
        &report.means.recall.to_string(),
        &report.means.precision.to_string(),
        &report.means.ndcg.to_string(),
        &report.means.hit.to_string(),
        &report.means.auc.to_string(),
    ])?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn set(items: &[usize]) -> HashSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn rank_decreasing_scores_take_prefix() {
        let scores = [9.0, 8.0, 7.0, 6.0];
        assert_eq!(rank(&scores, 2), vec![0, 1]);
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        let scores = [1.0; 5];
        assert_eq!(rank(&scores, 3), vec![0, 1, 2]);
    }

    #[test]
    fn rank_skips_sentinels_and_truncates() {
        let scores = [f64::NEG_INFINITY, 2.0, f64::NEG_INFINITY, 1.0];
        assert_eq!(rank(&scores, 4), vec![1, 3]);
        assert!(rank(&[f64::NEG_INFINITY; 3], 2).is_empty());
    }

    #[test]
    fn rank_matches_full_sort_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(1..=n);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round()).collect();
            let mut oracle: Vec<(f64, usize)> =
                scores.iter().enumerate().map(|(d, &s)| (s, d)).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = oracle.into_iter().take(k).map(|(_, d)| d).collect();
            assert_eq!(rank(&scores, k), expect);
        }
    }

    #[test]
    fn metrics_perfect_and_empty() {
        let m = metrics_at_k(&[3, 1, 2], &set(&[1, 3]), 3);
        assert_eq!((m.recall, m.hit), (1.0, 1.0));
        assert!(m.ndcg <= 1.0);

        let m = metrics_at_k(&[4, 5, 6], &set(&[1]), 3);
        assert_eq!(
            (m.recall, m.precision, m.ndcg, m.hit),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn metrics_worked_example() {
        // test positives {d2}, top-3 [d5, d2, d7]: hit at rank 2.
        let m = metrics_at_k(&[5, 2, 7], &set(&[2]), 3);
        assert_eq!(m.recall, 1.0);
        assert_abs_diff_eq!(m.precision, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(m.hit, 1.0);
        assert_abs_diff_eq!(m.ndcg, 0.63093, epsilon = 1e-5);
    }

    #[test]
    fn metrics_integer_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..100 {
            let k = rng.random_range(1..8);
            let mut pool: Vec<usize> = (0..20).collect();
            let mut topk = Vec::with_capacity(k);
            for _ in 0..k {
                topk.push(pool.swap_remove(rng.random_range(0..pool.len())));
            }
            let test: HashSet<usize> = (0..rng.random_range(1..6))
                .map(|_| rng.random_range(0..20))
                .collect();
            let m = metrics_at_k(&topk, &test, k);
            let hits = topk.iter().filter(|d| test.contains(d)).count() as f64;
            assert_abs_diff_eq!(m.precision * k as f64, hits, epsilon = 1e-12);
            assert_abs_diff_eq!(m.recall * test.len() as f64, hits, epsilon = 1e-12);
            assert!(m.recall >= 0.0 && m.ndcg <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn ndcg_is_one_iff_positives_lead() {
        let m = metrics_at_k(&[4, 7, 1, 2], &set(&[4, 7]), 4);
        assert_abs_diff_eq!(m.ndcg, 1.0, epsilon = 1e-15);
        let m = metrics_at_k(&[4, 1, 7, 2], &set(&[4, 7]), 4);
        assert!(m.ndcg < 1.0);
    }

    #[test]
    fn auc_extremes_and_ties() {
        let scores = [5.0, 4.0, 1.0, 0.5];
        assert_eq!(auc(&scores, &set(&[0, 1]), &set(&[])), Some(1.0));
        let flat = [2.0; 6];
        assert_eq!(auc(&flat, &set(&[0]), &set(&[])), Some(0.5));
        // No negatives left after exclusions.
        assert_eq!(auc(&[1.0, 2.0], &set(&[0]), &set(&[1])), None);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..200 {
            let d = rng.random_range(5..25);
            // Coarse scores to provoke ties.
            let scores: Vec<f64> = (0..d).map(|_| (rng.random::<f64>() * 4.0).round()).collect();
            let test: HashSet<usize> = (0..d).filter(|_| rng.random::<f64>() < 0.3).collect();
            let train: HashSet<usize> = (0..d)
                .filter(|i| !test.contains(i) && rng.random::<f64>() < 0.2)
                .collect();
            let fast = auc(&scores, &test, &train);

            // O(n²) oracle.
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for i in 0..d {
                if train.contains(&i) {
                    continue;
                }
                if test.contains(&i) {
                    pos.push(scores[i]);
                } else {
                    neg.push(scores[i]);
                }
            }
            if pos.is_empty() || neg.is_empty() {
                assert_eq!(fast, None);
                continue;
            }
            let mut credit = 0.0;
            for &a in &pos {
                for &b in &neg {
                    if a > b {
                        credit += 1.0;
                    } else if a == b {
                        credit += 0.5;
                    }
                }
            }
            let oracle = credit / (pos.len() * neg.len()) as f64;
            assert_eq!(fast, Some(oracle));
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..30).map(|_| (rng.random::<f64>() * 5.0).round()).collect();
        let test: HashSet<usize> = (0..30).filter(|_| rng.random::<f64>() < 0.25).collect();
        let train = HashSet::new();
        let base = auc(&scores, &test, &train);
        let squashed: Vec<f64> = scores.iter().map(|&s| (0.3 * s).tanh() * 2.0 + 7.0).collect();
        assert_eq!(base, auc(&squashed, &test, &train));
    }
}
