//! Disease-association analysis: empirical comorbidity rates, Pearson
//! correlations of the learned disease embeddings, the absolute-difference
//! discrepancy measure that ranks disease pairs, and a lossless embedding
//! export for external manifold plotting.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::data::{lossless_f64, Dataset};
use crate::error::{Error, Result};
use crate::graph::InteractionMatrix;
use crate::model::FinalEmbeddings;

/// Pairs where either disease has fewer patients than this are flagged as
/// low-support (rate estimates unstable) but kept in the ranking.
pub const LOW_SUPPORT_THRESHOLD: usize = 5;

/// Patients of each disease, ascending.
fn patients_per_disease(y: &InteractionMatrix) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); y.num_diseases()];
    for e in y.entries() {
        lists[e.disease].push(e.patient);
    }
    for list in &mut lists {
        list.sort_unstable();
    }
    lists
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Conditional comorbidity rate |patients with a and b| / |patients with a|.
/// Asymmetric in (a, b); None when disease `a` has no patients.
pub fn comorbidity_rate(y: &InteractionMatrix, a: usize, b: usize) -> Option<f64> {
    let lists = patients_per_disease(y);
    rate_from_lists(&lists, a, b)
}

fn rate_from_lists(lists: &[Vec<usize>], a: usize, b: usize) -> Option<f64> {
    let support = lists[a].len();
    if support == 0 {
        return None;
    }
    if a == b {
        return Some(1.0);
    }
    Some(intersection_size(&lists[a], &lists[b]) as f64 / support as f64)
}

/// Pearson correlation of disease embedding rows over their coordinates.
/// The diagonal is exactly 1 for non-constant rows; constant rows get 0
/// everywhere (correlation undefined) and are returned as flags.
pub fn pearson_matrix(z_d: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<bool>)> {
    let (d, m) = z_d.dim();
    if m < 2 {
        return Err(Error::Structure(format!(
            "pearson needs at least 2 embedding coordinates, got {m}"
        )));
    }
    let mut centered = z_d.to_owned();
    let mut norms = vec![0.0f64; d];
    let mut constant = vec![false; d];
    for (i, mut row) in centered.outer_iter_mut().enumerate() {
        let mean = row.sum() / m as f64;
        row.mapv_inplace(|v| v - mean);
        let norm = row.dot(&row).sqrt();
        norms[i] = norm;
        if norm < 1e-12 {
            constant[i] = true;
            log::warn!("disease {i} has a constant embedding row; correlations set to 0");
        }
    }
    let mut out = Array2::zeros((d, d));
    for a in 0..d {
        if constant[a] {
            continue;
        }
        out[[a, a]] = 1.0;
        for b in a + 1..d {
            if constant[b] {
                continue;
            }
            let r = centered.row(a).dot(&centered.row(b)) / (norms[a] * norms[b]);
            out[[a, b]] = r;
            out[[b, a]] = r;
        }
    }
    Ok((out, constant))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyRecord {
    pub disease_a: usize,
    pub disease_b: usize,
    pub code_a: String,
    pub code_b: String,
    /// max(rate(a|b), rate(b|a)) — the symmetric pair score.
    pub comorbidity: f64,
    pub pearson: f64,
    /// |comorbidity − pearson|, in [0, 2].
    pub discrepancy: f64,
    pub support_a: usize,
    pub support_b: usize,
}

impl DiscrepancyRecord {
    pub fn low_support(&self) -> bool {
        self.support_a < LOW_SUPPORT_THRESHOLD || self.support_b < LOW_SUPPORT_THRESHOLD
    }
}

/// |comorbidity − pearson|.
pub fn discrepancy_measure(comorbidity: f64, pearson: f64) -> f64 {
    (comorbidity - pearson).abs()
}

/// Score every unordered disease pair by |comorbidity − pearson| and return
/// the `top_n` largest, ties broken by (code_a, code_b). Pairs involving a
/// disease with zero patients are skipped.
pub fn discrepancy_rank(
    y_full: &InteractionMatrix,
    codes: &[String],
    disease_embeddings: &ArrayView2<f64>,
    top_n: usize,
) -> Result<Vec<DiscrepancyRecord>> {
    let d = y_full.num_diseases();
    if codes.len() != d || disease_embeddings.nrows() != d {
        return Err(Error::Structure(
            "codes and embeddings must cover every disease".into(),
        ));
    }
    let lists = patients_per_disease(y_full);
    let (pearson, _constant) = pearson_matrix(disease_embeddings)?;
    let mut records = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            let (Some(r_ab), Some(r_ba)) =
                (rate_from_lists(&lists, a, b), rate_from_lists(&lists, b, a))
            else {
                continue;
            };
            let comorbidity = r_ab.max(r_ba);
            let rho = pearson[[a, b]];
            records.push(DiscrepancyRecord {
                disease_a: a,
                disease_b: b,
                code_a: codes[a].clone(),
                code_b: codes[b].clone(),
                comorbidity,
                pearson: rho,
                discrepancy: discrepancy_measure(comorbidity, rho),
                support_a: lists[a].len(),
                support_b: lists[b].len(),
            });
        }
    }
    records.sort_unstable_by(|x, y| {
        y.discrepancy
            .partial_cmp(&x.discrepancy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| x.code_a.cmp(&y.code_a))
            .then_with(|| x.code_b.cmp(&y.code_b))
    });
    records.truncate(top_n);
    Ok(records)
}

/// CSV `code_a,code_b,comorbidity,pearson,discrepancy,support_a,support_b`.
pub fn write_discrepancy_csv(records: &[DiscrepancyRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "code_a",
        "code_b",
        "comorbidity",
        "pearson",
        "discrepancy",
        "support_a",
        "support_b",
    ])?;
    for r in records {
        writer.write_record([
            r.code_a.as_str(),
            r.code_b.as_str(),
            &r.comorbidity.to_string(),
            &r.pearson.to_string(),
            &r.discrepancy.to_string(),
            &r.support_a.to_string(),
            &r.support_b.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKindFilter {
    All,
    Patients,
    Diseases,
}

/// Export final embeddings as CSV rows `id,kind,dim_0..dim_{m-1},degree`
/// with 17-significant-digit values (lossless after a decimal round trip).
/// The trailing degree column carries each node's interaction count for
/// downstream coloring.
pub fn export_embeddings(
    embeddings: &FinalEmbeddings,
    dataset: &Dataset,
    filter: NodeKindFilter,
    path: &Path,
) -> Result<usize> {
    let full = dataset.full_matrix();
    let disease_deg = full.disease_degrees();
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "id,kind")?;
    for j in 0..embeddings.width() {
        write!(out, ",dim_{j}")?;
    }
    writeln!(out, ",degree")?;
    let mut rows = 0usize;
    if filter != NodeKindFilter::Diseases {
        for p in 0..dataset.num_patients() {
            write!(out, "{},patient", dataset.patient_ids[p])?;
            for v in embeddings.patient_row(p) {
                write!(out, ",{}", lossless_f64(*v))?;
            }
            writeln!(out, ",{}", full.patient_degree(p))?;
            rows += 1;
        }
    }
    if filter != NodeKindFilter::Patients {
        for (d, deg) in disease_deg.iter().enumerate() {
            write!(out, "{},disease", dataset.disease_codes[d])?;
            for v in embeddings.disease_row(d) {
                write!(out, ",{}", lossless_f64(*v))?;
            }
            writeln!(out, ",{deg}")?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Interaction;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn matrix(edges: &[(usize, usize)], p: usize, d: usize) -> InteractionMatrix {
        InteractionMatrix::new(
            p,
            d,
            edges
                .iter()
                .map(|&(pp, dd)| Interaction {
                    patient: pp,
                    disease: dd,
                    timestamp: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn comorbidity_self_disjoint_and_counts() {
        // Patients {0,1,2} have disease a(=0); {1,2} also have b(=1);
        // disease c(=2) is disjoint from a.
        let y = matrix(&[(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (3, 2)], 4, 3);
        assert_eq!(comorbidity_rate(&y, 0, 0), Some(1.0));
        assert_eq!(comorbidity_rate(&y, 0, 2), Some(0.0));
        assert_abs_diff_eq!(
            comorbidity_rate(&y, 0, 1).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(comorbidity_rate(&y, 1, 0).unwrap(), 1.0);
    }

    #[test]
    fn comorbidity_zero_support_is_none() {
        let y = matrix(&[(0, 0)], 1, 2);
        assert_eq!(comorbidity_rate(&y, 1, 0), None);
    }

    #[test]
    fn pearson_affine_and_sign() {
        let z = array![
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 7.0, 9.0, 11.0],  // 2·row0 + 3
            [-1.0, -2.0, -3.0, -4.0] // −row0
        ];
        let (r, constant) = pearson_matrix(&z.view()).unwrap();
        assert!(constant.iter().all(|&c| !c));
        assert_abs_diff_eq!(r[[0, 1]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[[0, 2]], -1.0, epsilon = 1e-12);
        assert_eq!(r[[0, 0]], 1.0);
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        let z = array![
            [0.3, -1.2, 0.7, 2.2, -0.4],
            [1.1, 0.2, -0.9, 0.5, 0.8],
            [-2.0, 0.4, 0.6, -1.3, 0.9]
        ];
        let (r, _) = pearson_matrix(&z.view()).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let m = z.ncols() as f64;
                let mean_a: f64 = z.row(a).sum() / m;
                let mean_b: f64 = z.row(b).sum() / m;
                let mut cov = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for j in 0..z.ncols() {
                    let da = z[[a, j]] - mean_a;
                    let db = z[[b, j]] - mean_b;
                    cov += da * db;
                    va += da * da;
                    vb += db * db;
                }
                let oracle = cov / (va.sqrt() * vb.sqrt());
                assert_abs_diff_eq!(r[[a, b]], oracle, epsilon = 1e-12);
                assert_abs_diff_eq!(r[[a, b]], r[[b, a]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pearson_invariant_under_positive_affine_maps() {
        let z = array![
            [0.3, -1.2, 0.7, 2.2, -0.4],
            [1.1, 0.2, -0.9, 0.5, 0.8],
            [-2.0, 0.4, 0.6, -1.3, 0.9]
        ];
        let (base, _) = pearson_matrix(&z.view()).unwrap();
        let mut scaled = z.clone();
        scaled.row_mut(1).mapv_inplace(|v| 3.5 * v - 2.0);
        let (transformed, _) = pearson_matrix(&scaled.view()).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_abs_diff_eq!(base[[a, b]], transformed[[a, b]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn pearson_flags_constant_rows() {
        let z = array![[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]];
        let (r, constant) = pearson_matrix(&z.view()).unwrap();
        assert!(constant[0] && !constant[1]);
        assert_eq!(r[[0, 0]], 0.0);
        assert_eq!(r[[0, 1]], 0.0);
        assert_eq!(r[[1, 1]], 1.0);
    }

    #[test]
    fn discrepancy_worked_pairs() {
        // The two reference pairs: (0.4297, 0.0845) -> 0.3452 and
        // (0.062, 0.35) -> 0.288.
        assert_abs_diff_eq!((0.4297f64 - 0.0845).abs(), 0.3452, epsilon = 1e-12);
        assert_abs_diff_eq!((0.062f64 - 0.35).abs(), 0.288, epsilon = 1e-12);
    }

    #[test]
    fn discrepancy_rank_orders_and_truncates() {
        // Disease 0 and 1 co-occur perfectly; give them identical embedding
        // rows so pearson = 1 and discrepancy = 0 (ranked last).
        let y = matrix(&[(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)], 3, 3);
        let z = array![
            [0.1, 0.9, -0.5, 0.3],
            [0.1, 0.9, -0.5, 0.3],
            [0.8, -0.2, 0.4, -0.6]
        ];
        let codes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let records = discrepancy_rank(&y, &codes, &z.view(), 10).unwrap();
        assert_eq!(records.len(), 3);
        let last = records.last().unwrap();
        assert_eq!((last.code_a.as_str(), last.code_b.as_str()), ("a", "b"));
        assert_abs_diff_eq!(last.discrepancy, 0.0, epsilon = 1e-12);
        for w in records.windows(2) {
            assert!(w[0].discrepancy >= w[1].discrepancy);
        }
        assert!(records.iter().all(|r| r.low_support()));

        let top1 = discrepancy_rank(&y, &codes, &z.view(), 1).unwrap();
        assert_eq!(top1.len(), 1);
        assert_eq!(top1[0], records[0]);
    }
}
