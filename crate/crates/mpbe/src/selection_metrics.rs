//! Model screening cost and scores against known truth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::library::Side;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("all-zero model cannot be scored")]
    ZeroModel,
    #[error("no candidate model: all {0} candidates are all-zero")]
    NoModel(usize),
    #[error("true coefficient vector is zero")]
    ZeroTruth,
    #[error("length mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub fit: f64,
    pub sparsity: f64,
    pub structure: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            fit: 1.0,
            sparsity: 10.0,
            structure: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub rss: f64,
    pub fit_term: f64,
    pub nnz: usize,
    pub sparsity_term: f64,
    pub structure_penalty: f64,
    pub total: f64,
    /// Both a birth and a death term are present.
    pub valid: bool,
}

/// `w1 ln RSS + w2 ||ξ||_0 + w3 [no birth or no death term]` over `rows`
/// (all rows when `None`).
pub fn model_cost(
    xi: &[f64],
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    weights: &CostWeights,
    rows: Option<&[usize]>,
) -> Result<ModelScore> {
    if xi.len() != theta.ncols() || sides.len() != xi.len() || ndot.len() != theta.nrows() {
        return Err(SelectionError::Shape(format!(
            "xi {}, sides {}, theta {}x{}, ndot {}",
            xi.len(),
            sides.len(),
            theta.nrows(),
            theta.ncols(),
            ndot.len()
        )));
    }
    let nz: Vec<usize> = (0..xi.len()).filter(|&k| xi[k] != 0.0).collect();
    if nz.is_empty() {
        return Err(SelectionError::ZeroModel);
    }
    let row_rss = |r: usize| {
        let fit: f64 = nz.iter().map(|&k| theta[(r, k)] * xi[k]).sum();
        (ndot[r] - fit).powi(2)
    };
    let rss: f64 = match rows {
        Some(rows) => rows.iter().map(|&r| row_rss(r)).sum(),
        None => (0..theta.nrows()).map(row_rss).sum(),
    };
    let births = nz.iter().filter(|&&k| sides[k] == Side::Birth).count();
    let valid = births > 0 && births < nz.len();
    let fit_term = weights.fit * rss.ln();
    let sparsity_term = weights.sparsity * nz.len() as f64;
    let structure_penalty = if valid { 0.0 } else { weights.structure };
    Ok(ModelScore {
        rss,
        fit_term,
        nnz: nz.len(),
        sparsity_term,
        structure_penalty,
        total: fit_term + sparsity_term + structure_penalty,
        valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambda: f64,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub index: usize,
    pub lambda: f64,
    pub xi: Vec<f64>,
    pub score: ModelScore,
    /// Scores of every non-zero candidate as (pool index, score).
    pub screened: Vec<(usize, ModelScore)>,
}

/// Lowest cost; ties go to fewer terms, then smaller λ.
pub fn select_model(
    pool: &[Candidate],
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    weights: &CostWeights,
    rows: Option<&[usize]>,
) -> Result<Selected> {
    let mut screened = Vec::new();
    for (i, c) in pool.iter().enumerate() {
        match model_cost(&c.xi, theta, ndot, sides, weights, rows) {
            Ok(s) => screened.push((i, s)),
            Err(SelectionError::ZeroModel) => {}
            Err(e) => return Err(e),
        }
    }
    let &(index, ref score) = screened
        .iter()
        .min_by(|(i, a), (j, b)| {
            a.total
                .total_cmp(&b.total)
                .then(a.nnz.cmp(&b.nnz))
                .then(pool[*i].lambda.total_cmp(&pool[*j].lambda))
        })
        .ok_or(SelectionError::NoModel(pool.len()))?;
    Ok(Selected {
        index,
        lambda: pool[index].lambda,
        xi: pool[index].xi.clone(),
        score: score.clone(),
        screened,
    })
}

/// `||ξ_true - ξ|| / ||ξ_true||`
pub fn coefficient_error(truth: &[f64], xi: &[f64]) -> Result<f64> {
    if truth.len() != xi.len() {
        return Err(SelectionError::Shape(format!("{} vs {}", truth.len(), xi.len())));
    }
    let den = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(SelectionError::ZeroTruth);
    }
    let num = truth.iter().zip(xi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Percentage of library terms whose active/inactive status matches the truth.
pub fn success_rate(truth: &[usize], found: &[usize], library_size: usize) -> f64 {
    if library_size == 0 {
        return 100.0;
    }
    let correct = (0..library_size)
        .filter(|k| truth.contains(k) == found.contains(k))
        .count();
    100.0 * correct as f64 / library_size as f64
}

pub fn support_of(xi: &[f64]) -> Vec<usize> {
    (0..xi.len()).filter(|&k| xi[k] != 0.0).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTerm {
    pub name: String,
    pub coefficient: f64,
}

/// Structured summary of a selected model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub config_hash: String,
    pub grid_hash: String,
    pub lambda: f64,
    pub terms: Vec<ReportTerm>,
    pub score: ModelScore,
    pub weights: CostWeights,
    pub library_size: usize,
    pub coefficient_error: Option<f64>,
    pub success_rate: Option<f64>,
    pub truth_in_library: Option<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// ndot = Θ ξ + r with ||r||^2 = rss, on a 2-column birth/death system.
    fn system(rss: f64) -> (DMatrix<f64>, DVector<f64>) {
        let theta = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let ndot = DVector::from_vec(vec![2.0, -1.0, rss.sqrt()]);
        (theta, ndot)
    }

    #[test]
    fn hand_costs() {
        let (t, nd) = system(1.0);
        let w = CostWeights::default();
        let s = model_cost(&[2.0, -1.0], &t, &nd, &[Side::Birth, Side::Death], &w, None).unwrap();
        assert_relative_eq!(s.total, 20.0, epsilon = 1e-12);
        assert!(s.valid);
        let s = model_cost(&[2.0, -1.0], &t, &nd, &[Side::Birth, Side::Birth], &w, None).unwrap();
        assert_relative_eq!(s.total, 1020.0, epsilon = 1e-12);
        assert!(!s.valid);
        let (t2, nd2) = system(2.0);
        let s2 = model_cost(&[2.0, -1.0], &t2, &nd2, &[Side::Birth, Side::Death], &w, None).unwrap();
        assert_relative_eq!(s2.total - 20.0, 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            model_cost(&[0.0, 0.0], &t, &nd, &[Side::Birth, Side::Death], &w, None),
            Err(SelectionError::ZeroModel)
        ));
    }

    #[test]
    fn valid_beats_invalid() {
        let theta = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let nd = DVector::from_vec(vec![1.0, 1.0]);
        let sides = [Side::Birth, Side::Death];
        // both fit with RSS 1
        let pool = vec![
            Candidate {
                lambda: 0.1,
                xi: vec![1.0, 0.0],
            },
            Candidate {
                lambda: 0.2,
                xi: vec![1.0, -1e-300],
            },
        ];
        let s = select_model(&pool, &theta, &nd, &sides, &CostWeights::default(), None).unwrap();
        assert_eq!(s.index, 1);
        let d = s.screened[0].1.total - s.screened[1].1.total;
        assert_relative_eq!(d, 1000.0 - 10.0, epsilon = 1e-9);
    }

    #[test]
    fn ties_prefer_sparse_then_small_lambda() {
        let (t, nd) = system(1.0);
        let sides = [Side::Birth, Side::Death];
        let pool = vec![
            Candidate {
                lambda: 0.5,
                xi: vec![2.0, -1.0],
            },
            Candidate {
                lambda: 0.3,
                xi: vec![2.0, -1.0],
            },
            Candidate {
                lambda: 0.9,
                xi: vec![0.0, 0.0],
            },
        ];
        let s = select_model(&pool, &t, &nd, &sides, &CostWeights::default(), None).unwrap();
        assert_eq!(s.lambda, 0.3);
        assert_eq!(s.screened.len(), 2);
        let zero = vec![Candidate {
            lambda: 0.1,
            xi: vec![0.0, 0.0],
        }];
        assert!(matches!(
            select_model(&zero, &t, &nd, &sides, &CostWeights::default(), None),
            Err(SelectionError::NoModel(1))
        ));
        // equal cost, different sparsity: zero weights except sparsity make nnz decide
        let w = CostWeights {
            fit: 0.0,
            sparsity: 0.0,
            structure: 0.0,
        };
        let pool = vec![
            Candidate {
                lambda: 0.1,
                xi: vec![2.0, -1.0],
            },
            Candidate {
                lambda: 0.2,
                xi: vec![2.0, 0.0],
            },
        ];
        assert_eq!(select_model(&pool, &t, &nd, &sides, &w, None).unwrap().index, 1);
    }

    #[test]
    fn coefficient_error_examples() {
        assert_eq!(coefficient_error(&[4.0, -1.0], &[4.0, -1.0]).unwrap(), 0.0);
        assert_eq!(coefficient_error(&[4.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(
            coefficient_error(&[4.0, -1.0], &[4.0, -1.1]).unwrap(),
            0.1 / 17f64.sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(0.1 / 17f64.sqrt(), 0.02425, epsilon = 1e-5);
        assert!(matches!(
            coefficient_error(&[0.0], &[1.0]),
            Err(SelectionError::ZeroTruth)
        ));
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate(&[0, 1], &[0, 1], 2), 100.0);
        assert_eq!(success_rate(&[0, 1], &[0], 2), 50.0);
        assert_eq!(success_rate(&[3, 40], &[3, 40, 7, 12], 50), 96.0);
    }

    proptest! {
        #[test]
        fn error_scale_covariant(t in proptest::collection::vec(0.1f64..5.0, 1..8), c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0], d in -1.0f64..1.0) {
            let xi: Vec<f64> = t.iter().map(|v| v + d).collect();
            let ct: Vec<f64> = t.iter().map(|v| c * v).collect();
            let cx: Vec<f64> = xi.iter().map(|v| c * v).collect();
            let a = coefficient_error(&t, &xi).unwrap();
            let b = coefficient_error(&ct, &cx).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn success_rate_bounds(n in 1usize..40, truth in proptest::collection::vec(0usize..40, 0..5), found in proptest::collection::vec(0usize..40, 0..8)) {
            let tr: Vec<usize> = truth.into_iter().filter(|&k| k < n).collect();
            let fd: Vec<usize> = found.into_iter().filter(|&k| k < n).collect();
            let s = success_rate(&tr, &fd, n);
            prop_assert!((0.0..=100.0).contains(&s));
            // an extra inactive, unselected term adds one correct classification
            let s2 = success_rate(&tr, &fd, n + 1);
            prop_assert!(s2 * (n + 1) as f64 >= s * n as f64 - 1e-9);
        }

        #[test]
        fn cost_column_order_invariant(perm_seed in 0usize..6, x in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let theta = DMatrix::from_fn(8, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 + 0.5);
            let nd = DVector::from_fn(8, |i, _| i as f64 - 2.0);
            let sides = [Side::Birth, Side::Death, Side::Death];
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm_seed];
            prop_assume!(x.iter().any(|v| *v != 0.0));
            let a = model_cost(&x, &theta, &nd, &sides, &CostWeights::default(), None).unwrap();
            let tp = theta.select_columns(&p);
            let xp: Vec<f64> = p.iter().map(|&k| x[k]).collect();
            let sp: Vec<Side> = p.iter().map(|&k| sides[k]).collect();
            let b = model_cost(&xp, &tp, &nd, &sp, &CostWeights::default(), None).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-9 * a.total.abs().max(1.0));
        }

        #[test]
        fn selection_permutation_invariant(lams in proptest::collection::vec(0.1f64..1.0, 1..6), rot in 0usize..6) {
            let (t, nd) = system(1.0);
            let sides = [Side::Birth, Side::Death];
            let pool: Vec<Candidate> = lams.iter().enumerate().map(|(k, &l)| Candidate {
                lambda: l,
                xi: vec![2.0 + 0.1 * (k % 3) as f64, if k % 2 == 0 { -1.0 } else { 0.0 }],
            }).collect();
            let mut perm = pool.clone();
            let n = perm.len();
            perm.rotate_left(rot % n);
            let a = select_model(&pool, &t, &nd, &sides, &CostWeights::default(), None).unwrap();
            let b = select_model(&perm, &t, &nd, &sides, &CostWeights::default(), None).unwrap();
            prop_assert_eq!(a.xi, b.xi);
            prop_assert_eq!(a.lambda, b.lambda);
        }
    }
}
