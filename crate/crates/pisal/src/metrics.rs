//! Evaluation formulas (RMSE, Pearson correlation, percentage error) and
//! whole-model evaluation on uniform test grids.
//!
//! Grid points are assigned to a side by the TRUE interface so field errors
//! are not contaminated by interface error; points exactly on the interface
//! count as region 1.

use crate::physics::{ProblemDefinition, ProblemKind, RegionTag, SamplePoint};
use crate::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series must be nonempty")]
    Empty,
    #[error("correlation undefined for a zero-variance series")]
    ZeroVariance,
    #[error("percentage error undefined for zero truth")]
    ZeroTruth,
}

/// Root mean squared error.
pub fn rmse(pred: &[Real], truth: &[Real]) -> Result<Real, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ss: Real = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((ss / pred.len() as Real).sqrt())
}

/// Pearson correlation coefficient, population convention.
pub fn cc(pred: &[Real], truth: &[Real]) -> Result<Real, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pred.len() as Real;
    let mp: Real = pred.iter().sum::<Real>() / n;
    let mt: Real = truth.iter().sum::<Real>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

/// Percentage error |estimate - truth| / |truth| * 100.
pub fn pe(estimate: Real, truth: Real) -> Result<Real, MetricsError> {
    if truth == 0.0 {
        return Err(MetricsError::ZeroTruth);
    }
    Ok((estimate - truth).abs() / truth.abs() * 100.0)
}

/// Anything that can stand in for a trained model during evaluation: the
/// PISAL triple, the single-network baseline, or the exact oracle.
pub trait FieldPredictor {
    /// Predicted field values at a point, given which side the point is
    /// evaluated against.
    fn predict(&self, p: &SamplePoint, region: RegionTag) -> Vec<Real>;
    /// Predicted interface position at a curve parameter (t or x).
    fn interface_at(&self, param: Real) -> Real;
    /// Identified coefficients (lambda_1, lambda_2).
    fn lambda_hat(&self) -> [Real; 2];
}

/// The exact solutions wearing the predictor interface; drives all-zero
/// errors through the evaluation path.
pub struct OraclePredictor<'a> {
    pub problem: &'a ProblemDefinition,
}

impl FieldPredictor for OraclePredictor<'_> {
    fn predict(&self, p: &SamplePoint, _region: RegionTag) -> Vec<Real> {
        self.problem.exact(p).expect("grid stays in-domain").0
    }
    fn interface_at(&self, param: Real) -> Real {
        self.problem.true_interface(param)
    }
    fn lambda_hat(&self) -> [Real; 2] {
        self.problem.lambda_true
    }
}

/// Uniform test grid. Axis 1 is x; axis 2 is t (Stefan) or y (Stokes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_axis1: usize,
    pub n_axis2: usize,
    pub n_interface: usize,
    /// Fixed-time snapshot evaluations (time-dependent problems only).
    pub time_slices: Vec<Real>,
}

impl GridSpec {
    pub fn default_for(problem: &ProblemDefinition) -> Self {
        match problem.kind {
            ProblemKind::Stefan => GridSpec {
                n_axis1: 201,
                n_axis2: 101,
                n_interface: 201,
                time_slices: vec![0.3, 0.5, 0.7],
            },
            ProblemKind::Stokes => GridSpec {
                n_axis1: 101,
                n_axis2: 201,
                n_interface: 201,
                time_slices: Vec::new(),
            },
        }
    }

    /// Smaller grid for per-iteration bookkeeping during training.
    pub fn coarse_for(_problem: &ProblemDefinition) -> Self {
        GridSpec {
            n_axis1: 41,
            n_axis2: 21,
            n_interface: 41,
            time_slices: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub t: Real,
    pub rmse: Real,
    pub cc: Option<Real>,
}

/// Evaluation summary. `rmse_*`/`cc_*` carry one entry per output field;
/// correlations are null where a series has no variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub problem: String,
    pub grid: GridSpec,
    pub lambda1_hat: Real,
    pub lambda2_hat: Real,
    pub pe_lambda1: Real,
    pub pe_lambda2: Real,
    pub rmse_overall: Vec<Real>,
    pub rmse_region1: Vec<Real>,
    pub rmse_region2: Vec<Real>,
    pub cc_overall: Vec<Option<Real>>,
    pub cc_region1: Vec<Option<Real>>,
    pub cc_region2: Vec<Option<Real>>,
    pub rmse_interface: Real,
    pub interface_max_abs_error: Real,
    pub slices: Vec<SliceMetrics>,
}

fn linspace(lo: Real, hi: Real, n: usize) -> Vec<Real> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as Real / (n - 1) as Real)
        .collect()
}

/// Side of the true interface, with exact-interface points sent to region 1.
fn true_region(problem: &ProblemDefinition, p: &SamplePoint) -> RegionTag {
    match problem.kind {
        ProblemKind::Stefan => {
            let s = problem.true_interface(p.time.unwrap());
            if p.coords[0] <= s {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            }
        }
        ProblemKind::Stokes => {
            let g = problem.true_interface(p.coords[0]);
            if p.coords[1] >= g {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            }
        }
    }
}

struct Series {
    pred: Vec<Vec<Real>>,
    truth: Vec<Vec<Real>>,
}

impl Series {
    fn new(fields: usize) -> Self {
        Series {
            pred: vec![Vec::new(); fields],
            truth: vec![Vec::new(); fields],
        }
    }
    fn push(&mut self, pred: &[Real], truth: &[Real]) {
        for i in 0..self.pred.len() {
            self.pred[i].push(pred[i]);
            self.truth[i].push(truth[i]);
        }
    }
    fn rmse_per_field(&self) -> Vec<Real> {
        (0..self.pred.len())
            .map(|i| rmse(&self.pred[i], &self.truth[i]).unwrap_or(Real::NAN))
            .collect()
    }
    fn cc_per_field(&self) -> Vec<Option<Real>> {
        (0..self.pred.len())
            .map(|i| cc(&self.pred[i], &self.truth[i]).ok())
            .collect()
    }
}

/// Evaluates a predictor on a uniform grid plus the interface curve and the
/// configured fixed-time slices. Deterministic for identical inputs.
pub fn evaluate_model(
    model: &impl FieldPredictor,
    problem: &ProblemDefinition,
    grid: &GridSpec,
) -> MetricsReport {
    let m = problem.output_arity;
    let mut overall = Series::new(m);
    let mut reg1 = Series::new(m);
    let mut reg2 = Series::new(m);

    let xs = linspace(
        problem.space_bounds[0].0,
        problem.space_bounds[0].1,
        grid.n_axis1,
    );
    let axis2 = match problem.kind {
        ProblemKind::Stefan => {
            let (lo, hi) = problem.time_bounds.unwrap();
            linspace(lo, hi, grid.n_axis2)
        }
        ProblemKind::Stokes => linspace(
            problem.space_bounds[1].0,
            problem.space_bounds[1].1,
            grid.n_axis2,
        ),
    };
    for &a2 in &axis2 {
        for &x in &xs {
            let p = match problem.kind {
                ProblemKind::Stefan => SamplePoint::space_time(x, a2),
                ProblemKind::Stokes => SamplePoint::plane(x, a2),
            };
            let region = true_region(problem, &p);
            let truth = problem.exact(&p).expect("grid in-domain").0;
            let pred = model.predict(&p, region);
            overall.push(&pred, &truth);
            match region {
                RegionTag::Region1 => reg1.push(&pred, &truth),
                _ => reg2.push(&pred, &truth),
            }
        }
    }

    let (plo, phi) = problem.interface_param_bounds();
    let params = linspace(plo, phi, grid.n_interface);
    let iface_pred: Vec<Real> = params.iter().map(|&s| model.interface_at(s)).collect();
    let iface_truth: Vec<Real> = params.iter().map(|&s| problem.true_interface(s)).collect();
    let rmse_interface = rmse(&iface_pred, &iface_truth).unwrap_or(Real::NAN);
    let interface_max_abs_error = iface_pred
        .iter()
        .zip(&iface_truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, Real::max);

    let mut slices = Vec::new();
    for &t in &grid.time_slices {
        let mut s = Series::new(m);
        for &x in &xs {
            let p = SamplePoint::space_time(x, t);
            let region = true_region(problem, &p);
            let truth = problem.exact(&p).expect("slice in-domain").0;
            let pred = model.predict(&p, region);
            s.push(&pred, &truth);
        }
        // Snapshot tables report the scalar field; use field 0.
        slices.push(SliceMetrics {
            t,
            rmse: rmse(&s.pred[0], &s.truth[0]).unwrap_or(Real::NAN),
            cc: cc(&s.pred[0], &s.truth[0]).ok(),
        });
    }

    let [l1, l2] = model.lambda_hat();
    MetricsReport {
        problem: problem.name.to_string(),
        grid: grid.clone(),
        lambda1_hat: l1,
        lambda2_hat: l2,
        pe_lambda1: pe(l1, problem.lambda_true[0]).unwrap_or(Real::NAN),
        pe_lambda2: pe(l2, problem.lambda_true[1]).unwrap_or(Real::NAN),
        rmse_overall: overall.rmse_per_field(),
        rmse_region1: reg1.rmse_per_field(),
        rmse_region2: reg2.rmse_per_field(),
        cc_overall: overall.cc_per_field(),
        cc_region1: reg1.cc_per_field(),
        cc_region2: reg2.cc_per_field(),
        rmse_interface,
        interface_max_abs_error,
        slices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let shifted: Vec<Real> = t.iter().map(|x| x + 0.1).collect();
        assert!((rmse(&shifted, &t).unwrap() - 0.1).abs() < 1e-12);
        let v = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn cc_examples() {
        let t = [1.0, 2.0, 4.0, 8.0];
        assert!((cc(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<Real> = t.iter().map(|x| -x).collect();
        assert!((cc(&neg, &t).unwrap() + 1.0).abs() < 1e-12);
        let affine: Vec<Real> = t.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((cc(&affine, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cc(&[1.0, 1.0], &t[..2]),
            Err(MetricsError::ZeroVariance)
        ));
    }

    #[test]
    fn pe_examples() {
        assert_eq!(pe(2.0, 2.0).unwrap(), 0.0);
        assert!((pe(1.997, 2.0).unwrap() - 0.15).abs() < 1e-10);
        assert!((pe(0.0989, 0.1).unwrap() - 1.1).abs() < 1e-9);
        assert!(matches!(pe(1.0, 0.0), Err(MetricsError::ZeroTruth)));
    }

    #[test]
    fn rmse_is_symmetric_with_triangle_bound() {
        let a = [0.0, 1.0, -2.0, 0.5];
        let b = [0.3, 0.9, -1.0, 2.0];
        let c = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn oracle_evaluation_is_perfect() {
        for problem in [ProblemDefinition::stefan(), ProblemDefinition::stokes()] {
            let grid = GridSpec {
                n_axis1: 41,
                n_axis2: 21,
                n_interface: 41,
                time_slices: if problem.is_time_dependent() {
                    vec![0.3, 0.5, 0.7]
                } else {
                    Vec::new()
                },
            };
            let report = evaluate_model(&OraclePredictor { problem: &problem }, &problem, &grid);
            for v in report
                .rmse_overall
                .iter()
                .chain(&report.rmse_region1)
                .chain(&report.rmse_region2)
            {
                assert_eq!(*v, 0.0);
            }
            for c in report.cc_overall.iter().flatten() {
                assert!((c - 1.0).abs() < 1e-12);
            }
            assert_eq!(report.pe_lambda1, 0.0);
            assert_eq!(report.pe_lambda2, 0.0);
            assert_eq!(report.rmse_interface, 0.0);
            assert_eq!(report.interface_max_abs_error, 0.0);
            for s in &report.slices {
                assert_eq!(s.rmse, 0.0);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let problem = ProblemDefinition::stefan();
        let grid = GridSpec::coarse_for(&problem);
        let a = evaluate_model(&OraclePredictor { problem: &problem }, &problem, &grid);
        let b = evaluate_model(&OraclePredictor { problem: &problem }, &problem, &grid);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let problem = ProblemDefinition::stokes();
        let grid = GridSpec::coarse_for(&problem);
        let report = evaluate_model(&OraclePredictor { problem: &problem }, &problem, &grid);
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "problem",
            "lambda1_hat",
            "lambda2_hat",
            "pe_lambda1",
            "pe_lambda2",
            "rmse_overall",
            "rmse_region1",
            "rmse_region2",
            "cc_overall",
            "rmse_interface",
            "interface_max_abs_error",
            "slices",
        ] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
    }
}
