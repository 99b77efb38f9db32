//! Bootstrap ensembles of cb-STLS fits, aggregated by mean (bagging) or
//! median (bragging) with inclusion-probability and CoV screening.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::library::Side;
use crate::sparse_regression::{
    build_constraints, cb_stls, ConstraintOptions, RegressionError, SolverOptions, SparseSolution,
};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("empty member list")]
    NoMembers,
    #[error("members disagree on coefficient length")]
    RaggedMembers,
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Bagging,
    Bragging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub master_seed: u64,
    /// `false` feeds every replicate the original rows.
    pub resample: bool,
    pub constraints: ConstraintOptions,
    pub solver: SolverOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 100,
            master_seed: 0,
            resample: true,
            constraints: ConstraintOptions::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Row indices of replicate `index`; depends only on (seed, index).
pub fn bootstrap_rows(nrows: usize, master_seed: u64, index: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    let mut rows: Vec<usize> = (0..nrows).map(|_| rng.random_range(0..nrows)).collect();
    rows.sort_unstable();
    rows
}

fn fit_member(
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    lambda: f64,
    opts: &BootstrapOptions,
) -> Result<SparseSolution> {
    let ncols = theta.ncols();
    let set = match build_constraints(theta, sides, &opts.constraints) {
        Ok(s) => s,
        Err(RegressionError::AllRowsExcluded) => return Ok(SparseSolution::infeasible(ncols, lambda)),
        Err(e) => return Err(e.into()),
    };
    match cb_stls(theta, ndot, sides, lambda, &set, &opts.solver) {
        Ok(s) => Ok(s),
        Err(RegressionError::Infeasible) => Ok(SparseSolution::infeasible(ncols, lambda)),
        Err(e) => Err(e.into()),
    }
}

/// One cb-STLS fit per replicate on rows drawn with replacement.
pub fn bootstrap_fit(
    theta: &DMatrix<f64>,
    ndot: &DVector<f64>,
    sides: &[Side],
    lambda: f64,
    opts: &BootstrapOptions,
) -> Result<Vec<SparseSolution>> {
    if opts.replicates == 0 {
        return Err(EnsembleError::NoReplicates);
    }
    (0..opts.replicates as u64)
        .into_par_iter()
        .map(|b| {
            if !opts.resample {
                return fit_member(theta, ndot, sides, lambda, opts);
            }
            let rows = bootstrap_rows(theta.nrows(), opts.master_seed, b);
            let t = theta.select_rows(&rows);
            let y = ndot.select_rows(&rows);
            let mut o = *opts;
            o.constraints.seed = opts.constraints.seed.wrapping_add(b);
            fit_member(&t, &y, sides, lambda, &o)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub inclusion_probability: Vec<f64>,
    /// std / |mean| over members where the term is nonzero; 0 if none.
    pub coefficient_of_variation: Vec<f64>,
    pub bagging: Vec<f64>,
    pub bragging: Vec<f64>,
    pub aggregate: Vec<f64>,
    pub mode: Aggregation,
    pub replicates: usize,
    pub ip_min: f64,
    pub cov_max: f64,
    pub infeasible_members: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean or median over all members, zeroing terms with IP < `ip_min` or
/// CoV > `cov_max`.
pub fn aggregate(members: &[SparseSolution], mode: Aggregation, ip_min: f64, cov_max: f64) -> Result<EnsembleResult> {
    let first = members.first().ok_or(EnsembleError::NoMembers)?;
    let n = first.xi.len();
    if members.iter().any(|m| m.xi.len() != n) {
        return Err(EnsembleError::RaggedMembers);
    }
    let b = members.len() as f64;
    let mut res = EnsembleResult {
        inclusion_probability: vec![0.0; n],
        coefficient_of_variation: vec![0.0; n],
        bagging: vec![0.0; n],
        bragging: vec![0.0; n],
        aggregate: vec![0.0; n],
        mode,
        replicates: members.len(),
        ip_min,
        cov_max,
        infeasible_members: members.iter().filter(|m| m.infeasible).count(),
    };
    for k in 0..n {
        let mut vals: Vec<f64> = members.iter().map(|m| m.xi[k]).collect();
        let nz: Vec<f64> = vals.iter().copied().filter(|&v| v != 0.0).collect();
        res.inclusion_probability[k] = nz.len() as f64 / b;
        if !nz.is_empty() {
            let mu = nz.iter().sum::<f64>() / nz.len() as f64;
            let var = nz.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / nz.len() as f64;
            res.coefficient_of_variation[k] = if mu != 0.0 {
                var.sqrt() / mu.abs()
            } else {
                f64::INFINITY
            };
        }
        res.bagging[k] = vals.iter().sum::<f64>() / b;
        res.bragging[k] = median(&mut vals);
        let keep = res.inclusion_probability[k] >= ip_min && res.coefficient_of_variation[k] <= cov_max;
        res.aggregate[k] = if keep {
            match mode {
                Aggregation::Bagging => res.bagging[k],
                Aggregation::Bragging => res.bragging[k],
            }
        } else {
            0.0
        };
    }
    Ok(res)
}

impl EnsembleResult {
    /// `term,inclusion_probability,cov,bagging,bragging,aggregate` per term.
    pub fn write_summary(&self, names: &[String], path: &Path) -> Result<()> {
        let mut s = String::from("term,inclusion_probability,cov_nonzero_members,bagging,bragging,aggregate\n");
        for (k, name) in names.iter().enumerate() {
            s.push_str(&format!(
                "\"{}\",{},{},{:.12e},{:.12e},{:.12e}\n",
                name.replace('"', "\"\""),
                self.inclusion_probability[k],
                self.coefficient_of_variation[k],
                self.bagging[k],
                self.bragging[k],
                self.aggregate[k]
            ));
        }
        fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_solver::{generate_case, CaseSetup};
    use crate::library::{assemble_ndot, default_exponents, standard_library, CandidateLibrary, LibraryMode};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn member(xi: Vec<f64>) -> SparseSolution {
        let support = (0..xi.len()).filter(|&k| xi[k] != 0.0).collect::<Vec<_>>();
        SparseSolution {
            all_zero: support.is_empty(),
            support,
            xi,
            lambda: 0.1,
            iterations: 1,
            residual_norm: 0.0,
            infeasible: false,
            converged: true,
            kkt_residual: 0.0,
            max_violation: 0.0,
            active_constraints: 0,
            constraint_threshold: 0.1,
        }
    }

    #[test]
    fn identical_members() {
        let ms = vec![member(vec![4.0, -1.0]); 5];
        let r = aggregate(&ms, Aggregation::Bagging, 0.65, 1.0).unwrap();
        assert_eq!(r.aggregate, vec![4.0, -1.0]);
        assert_eq!(r.inclusion_probability, vec![1.0, 1.0]);
        assert_eq!(r.coefficient_of_variation, vec![0.0, 0.0]);
    }

    #[test]
    fn half_inclusion_is_dropped() {
        let ms: Vec<_> = (0..100)
            .map(|k| member(vec![if k % 2 == 0 { 2.0 } else { 0.0 }]))
            .collect();
        let r = aggregate(&ms, Aggregation::Bagging, 0.65, 1.0).unwrap();
        assert_eq!(r.inclusion_probability[0], 0.5);
        assert_eq!(r.aggregate[0], 0.0);
        assert_eq!(r.bagging[0], 1.0);
    }

    #[test]
    fn mean_versus_median() {
        let ms = vec![member(vec![1.0]), member(vec![1.0]), member(vec![10.0])];
        let bag = aggregate(&ms, Aggregation::Bagging, 0.0, f64::INFINITY).unwrap();
        let brag = aggregate(&ms, Aggregation::Bragging, 0.0, f64::INFINITY).unwrap();
        assert_eq!(bag.aggregate[0], 4.0);
        assert_eq!(brag.aggregate[0], 1.0);
        // CoV over nonzero members: std {1,1,10} = sqrt(18), mean 4
        assert_relative_eq!(bag.coefficient_of_variation[0], 18f64.sqrt() / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn high_cov_is_dropped() {
        let ms = vec![member(vec![1.0]), member(vec![-3.0]), member(vec![1.5])];
        let r = aggregate(&ms, Aggregation::Bagging, 0.65, 1.0).unwrap();
        assert!(r.coefficient_of_variation[0] > 1.0);
        assert_eq!(r.aggregate[0], 0.0);
        assert!(matches!(
            aggregate(&[], Aggregation::Bagging, 0.65, 1.0),
            Err(EnsembleError::NoMembers)
        ));
    }

    #[test]
    fn replicate_streams_are_fixed() {
        let a = bootstrap_rows(50, 9, 3);
        assert_eq!(a, bootstrap_rows(50, 9, 3));
        assert_ne!(a, bootstrap_rows(50, 9, 4));
        assert_ne!(a, bootstrap_rows(50, 10, 3));
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|&r| r < 50));
    }

    fn case(c: u8, mode: LibraryMode, si: bool, timepoints: usize) -> (CandidateLibrary, DVector<f64>, Vec<Side>) {
        let setup = CaseSetup::standard(c).unwrap();
        let s = generate_case(&setup, &setup.uniform_times(timepoints).unwrap()).unwrap();
        let lib =
            CandidateLibrary::build(&s, standard_library(mode, &default_exponents(), si).unwrap(), false).unwrap();
        let sides = lib.terms.iter().map(|t| t.side()).collect();
        let nd = assemble_ndot(&s).unwrap();
        (lib, nd, sides)
    }

    #[test]
    fn identity_bootstrap_matches_direct_fit() {
        let (lib, nd, sides) = case(6, LibraryMode::Discontinuous, true, 10);
        let opts = BootstrapOptions {
            replicates: 1,
            resample: false,
            ..Default::default()
        };
        let members = bootstrap_fit(&lib.theta, &nd, &sides, 0.1, &opts).unwrap();
        let set = build_constraints(&lib.theta, &sides, &opts.constraints).unwrap();
        let direct = cb_stls(&lib.theta, &nd, &sides, 0.1, &set, &opts.solver).unwrap();
        assert_eq!(members, vec![direct]);
    }

    #[test]
    fn members_independent_of_thread_count() {
        let (lib, nd, sides) = case(3, LibraryMode::Continuous, true, 10);
        let opts = BootstrapOptions {
            replicates: 6,
            master_seed: 11,
            ..Default::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bootstrap_fit(&lib.theta, &nd, &sides, 0.5, &opts).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn case1_truth_always_included() {
        let (lib, nd, sides) = case(1, LibraryMode::Continuous, true, 25);
        let opts = BootstrapOptions {
            replicates: 100,
            master_seed: 1,
            ..Default::default()
        };
        let members = bootstrap_fit(&lib.theta, &nd, &sides, 0.5, &opts).unwrap();
        let r = aggregate(&members, Aggregation::Bagging, 0.65, 1.0).unwrap();
        let idx = |name: &str| lib.terms.iter().position(|t| t.name == name).unwrap();
        assert_eq!(r.inclusion_probability[idx("B(1/(v'w'))")], 1.0);
        assert_eq!(r.inclusion_probability[idx("D(1)")], 1.0);
    }

    #[test]
    fn infeasible_replicate_is_flagged_member() {
        // one birth column of mixed sign: no positive multiple is positive on every row
        let theta = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let nd = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let opts = BootstrapOptions {
            replicates: 3,
            ..Default::default()
        };
        let members = bootstrap_fit(&theta, &nd, &[Side::Birth], 0.1, &opts).unwrap();
        assert!(members.iter().any(|m| m.infeasible && m.all_zero));
    }

    proptest! {
        #[test]
        fn aggregation_permutation_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 1..15), rot in 0usize..15) {
            let ms: Vec<_> = vals.iter().map(|&v| member(vec![if v.abs() < 1.0 { 0.0 } else { v }])).collect();
            let mut perm = ms.clone();
            let n = perm.len();
            perm.rotate_left(rot % n);
            perm.reverse();
            for mode in [Aggregation::Bagging, Aggregation::Bragging] {
                let a = aggregate(&ms, mode, 0.65, 1.0).unwrap();
                let b = aggregate(&perm, mode, 0.65, 1.0).unwrap();
                prop_assert!((a.aggregate[0] - b.aggregate[0]).abs() < 1e-12);
                prop_assert_eq!(a.inclusion_probability[0], b.inclusion_probability[0]);
            }
        }

        #[test]
        fn odd_bragging_is_a_member(vals in proptest::collection::vec(-5.0f64..5.0, 0..7)) {
            let mut vals = vals;
            vals.push(0.5);
            if vals.len() % 2 == 0 { vals.push(1.5); }
            let ms: Vec<_> = vals.iter().map(|&v| member(vec![v])).collect();
            let r = aggregate(&ms, Aggregation::Bragging, 0.0, f64::INFINITY).unwrap();
            prop_assert!(vals.contains(&r.aggregate[0]));
        }

        #[test]
        fn no_threshold_bagging_is_mean(vals in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let ms: Vec<_> = vals.iter().map(|&v| member(vec![v, 2.0 * v])).collect();
            let r = aggregate(&ms, Aggregation::Bagging, 0.0, f64::INFINITY).unwrap();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!((r.aggregate[0] - mean).abs() < 1e-12);
            prop_assert!((r.aggregate[1] - 2.0 * mean).abs() < 1e-12);
        }
    }
}
