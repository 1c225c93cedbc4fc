//! Validity, realism, oracle-validity, and efficiency metrics.
//!
//! Validity metrics (flip ratio, mean absolute confidence difference,
//! bounded KL remap) are computed over records whose input the classifier
//! calls NSP. Realism metrics (Fréchet feature distance, mean feature
//! cosine) are computed over records whose counterfactual the classifier
//! accepts as SP. The oracle metric averages quality gains over inputs the
//! oracle confidently rates low.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::CounterfactualRecord;
use crate::models::{cosine_similarity, FeatureNet, OracleModel, OracleScores, QualityClassifier};
use crate::tensor::Tensor;

/// Oracle confidence cut: inputs with `QS_O(x) < 0.5` count as confidently
/// low quality.
pub const ORACLE_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Everything the metric formulas need, recomputed from the persisted
/// images so reports never trust scores cached in the records.
#[derive(Debug, Clone)]
pub struct ScoredRecord {
    pub image_id: u64,
    pub input_p_sp: f64,
    pub input_oracle: OracleScores,
    pub input_features: Tensor<f32>,
    pub iter_p_sp: Vec<f64>,
    pub iter_oracle: Vec<OracleScores>,
    pub iter_features: Vec<Tensor<f32>>,
    pub seconds_per_iteration: Vec<f64>,
}

impl ScoredRecord {
    pub fn input_is_nsp(&self) -> bool {
        self.input_p_sp < 0.5
    }

    pub fn flipped_at(&self, iteration: usize) -> bool {
        self.iter_p_sp[iteration] >= 0.5
    }

    pub fn iterations(&self) -> usize {
        self.iter_p_sp.len()
    }
}

/// Score records with the given models.
pub fn score_records(
    records: &[CounterfactualRecord],
    classifier: &QualityClassifier<f32>,
    oracle: &OracleModel<f32>,
    feat_eval: &FeatureNet<f32>,
) -> Result<Vec<ScoredRecord>> {
    records
        .iter()
        .map(|r| {
            let (input_p_sp, _) = classifier.classify(&r.original)?;
            let input_oracle = oracle.score(&r.original)?;
            let input_features = feat_eval.extract(&r.original)?;
            let mut iter_p_sp = Vec::with_capacity(r.iterations.len());
            let mut iter_oracle = Vec::with_capacity(r.iterations.len());
            let mut iter_features = Vec::with_capacity(r.iterations.len());
            for img in &r.iterations {
                iter_p_sp.push(classifier.classify(img)?.0);
                iter_oracle.push(oracle.score(img)?);
                iter_features.push(feat_eval.extract(img)?);
            }
            Ok(ScoredRecord {
                image_id: r.image_id,
                input_p_sp,
                input_oracle,
                input_features,
                iter_p_sp,
                iter_oracle,
                iter_features,
                seconds_per_iteration: r.seconds_per_iteration.clone(),
            })
        })
        .collect()
}

fn eligible(scored: &[ScoredRecord]) -> Vec<&ScoredRecord> {
    scored.iter().filter(|r| r.input_is_nsp()).collect()
}

/// Fraction of eligible (input-NSP) records whose counterfactual at
/// `iteration` is classified SP.
pub fn flip_ratio(scored: &[ScoredRecord], iteration: usize) -> Result<f64> {
    let elig = eligible(scored);
    if elig.is_empty() {
        return Err(Error::EmptyEligibleSet("flip_ratio"));
    }
    let flips = elig.iter().filter(|r| r.flipped_at(iteration)).count();
    Ok(flips as f64 / elig.len() as f64)
}

/// Mean absolute difference of SP confidence between input and
/// counterfactual over eligible records.
pub fn mad(scored: &[ScoredRecord], iteration: usize) -> Result<f64> {
    let elig = eligible(scored);
    if elig.is_empty() {
        return Err(Error::EmptyEligibleSet("mad"));
    }
    Ok(elig
        .iter()
        .map(|r| (r.input_p_sp - r.iter_p_sp[iteration]).abs())
        .sum::<f64>()
        / elig.len() as f64)
}

/// Bounded KL remap of the counterfactual's prediction against the one-hot
/// target; closed form `1 - p_target`. Lower is better.
pub fn bkl_from_confidence(p_target: f64) -> f64 {
    1.0 - p_target.clamp(0.0, 1.0)
}

pub fn bkl(scored: &[ScoredRecord], iteration: usize) -> Result<f64> {
    let elig = eligible(scored);
    if elig.is_empty() {
        return Err(Error::EmptyEligibleSet("bkl"));
    }
    Ok(elig
        .iter()
        .map(|r| bkl_from_confidence(r.iter_p_sp[iteration]))
        .sum::<f64>()
        / elig.len() as f64)
}

/// Mean overall quality difference: quality gains `QS_O(xc) - QS_O(x)`
/// counted only where the oracle confidently rates the input low, averaged
/// over all N records.
pub fn mqd(scored: &[ScoredRecord], iteration: usize) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::EmptyEligibleSet("mqd"));
    }
    let total: f64 = scored
        .iter()
        .map(|r| {
            if r.input_oracle.overall < ORACLE_CONFIDENCE_THRESHOLD {
                r.iter_oracle[iteration].overall - r.input_oracle.overall
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / scored.len() as f64)
}

/// Fréchet distance between two Gaussian fits:
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the matrix
/// square root taken through the symmetric product
/// `S_a^(1/2) S_b S_a^(1/2)`. Covariances use the n-1 normalization;
/// 1e-6 shrinkage is applied only when a set is too small for full rank.
pub fn frechet_feature_distance(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "frechet_feature_distance needs at least 2 samples per set",
        ));
    }
    let d = a[0].numel();
    let (mu_a, cov_a) = gaussian_fit(a, d)?;
    let (mu_b, cov_b) = gaussian_fit(b, d)?;

    let mean_term = (&mu_a - &mu_b).norm_squared();

    let sqrt_a = sym_sqrt(&cov_a);
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let inner = symmetrize(&inner);
    let eig = inner.symmetric_eigen();
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let fd = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    Ok(fd.max(0.0))
}

fn gaussian_fit(set: &[Tensor<f32>], d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    let mut mu = DVector::zeros(d);
    for t in set {
        if t.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "frechet_feature_distance",
                lhs: vec![d],
                rhs: t.shape().to_vec(),
            });
        }
        for (i, &v) in t.data().iter().enumerate() {
            mu[i] += v as f64;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for t in set {
        let x = DVector::from_iterator(d, t.data().iter().map(|&v| v as f64));
        let centered = x - &mu;
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    if n <= d {
        for i in 0..d {
            cov[(i, i)] += 1e-6;
        }
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&DVector::from_vec(vals)) * v.transpose()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Mean cosine similarity between paired feature vectors.
pub fn mean_feature_cosine(pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEligibleSet("mean_feature_cosine"));
    }
    Ok(pairs
        .iter()
        .map(|(a, b)| cosine_similarity(a, b))
        .sum::<f64>()
        / pairs.len() as f64)
}

// ---- report ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub flip_ratio: f64,
    pub mad: f64,
    pub bkl: f64,
    pub mqd: f64,
    /// Fréchet feature distance between the eligible originals and their
    /// valid SP counterfactuals, in evaluation-feature space. `None` when
    /// fewer than two valid counterfactuals exist at this iteration.
    pub frechet: Option<f64>,
    pub feature_cosine: Option<f64>,
    pub n_valid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub n_records: usize,
    /// Inputs classified NSP by the guiding classifier.
    pub n_eligible: usize,
    /// Inputs the oracle confidently rates low quality.
    pub n_confident_oracle: usize,
    pub per_iteration: Vec<IterationMetrics>,
}

impl MetricsReport {
    pub fn final_iteration(&self) -> &IterationMetrics {
        self.per_iteration.last().expect("L >= 1")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub method: String,
    pub mean_iteration_seconds: f64,
    pub std_iteration_seconds: f64,
    pub total_hours: f64,
}

/// Per-structure quality-difference scatter (the fine-grained assessment).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QdScatter {
    pub structure: String,
    /// (input QS, QD = counterfactual QS - input QS) per record, final
    /// iteration.
    pub points: Vec<(f64, f64)>,
}

pub fn build_report(
    method: &str,
    scored: &[ScoredRecord],
) -> Result<(MetricsReport, EfficiencyReport, Vec<QdScatter>)> {
    if scored.is_empty() {
        return Err(Error::EmptyEligibleSet("build_report"));
    }
    let iterations = scored[0].iterations();
    if scored.iter().any(|r| r.iterations() != iterations) {
        return Err(Error::invalid("records disagree on iteration count"));
    }

    let mut per_iteration = Vec::with_capacity(iterations);
    for i in 0..iterations {
        // Realism set: valid SP counterfactuals at this iteration, paired
        // with their originals.
        let valid: Vec<&ScoredRecord> = scored
            .iter()
            .filter(|r| r.input_is_nsp() && r.flipped_at(i))
            .collect();
        let (frechet, cosine) = if valid.len() >= 2 {
            let originals: Vec<Tensor<f32>> =
                valid.iter().map(|r| r.input_features.clone()).collect();
            let counterfactuals: Vec<Tensor<f32>> =
                valid.iter().map(|r| r.iter_features[i].clone()).collect();
            let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = originals
                .iter()
                .cloned()
                .zip(counterfactuals.iter().cloned())
                .collect();
            (
                Some(frechet_feature_distance(&originals, &counterfactuals)?),
                Some(mean_feature_cosine(&pairs)?),
            )
        } else {
            (None, None)
        };
        per_iteration.push(IterationMetrics {
            iteration: i + 1,
            flip_ratio: flip_ratio(scored, i)?,
            mad: mad(scored, i)?,
            bkl: bkl(scored, i)?,
            mqd: mqd(scored, i)?,
            frechet,
            feature_cosine: cosine,
            n_valid: valid.len(),
        });
    }

    let report = MetricsReport {
        method: method.to_string(),
        n_records: scored.len(),
        n_eligible: scored.iter().filter(|r| r.input_is_nsp()).count(),
        n_confident_oracle: scored
            .iter()
            .filter(|r| r.input_oracle.overall < ORACLE_CONFIDENCE_THRESHOLD)
            .count(),
        per_iteration,
    };

    let all_seconds: Vec<f64> = scored
        .iter()
        .flat_map(|r| r.seconds_per_iteration.iter().copied())
        .collect();
    let mean = all_seconds.iter().sum::<f64>() / all_seconds.len().max(1) as f64;
    let var = all_seconds
        .iter()
        .map(|s| (s - mean).powi(2))
        .sum::<f64>()
        / (all_seconds.len().max(2) - 1) as f64;
    let efficiency = EfficiencyReport {
        method: method.to_string(),
        mean_iteration_seconds: mean,
        std_iteration_seconds: var.sqrt(),
        total_hours: all_seconds.iter().sum::<f64>() / 3600.0,
    };

    let last = iterations - 1;
    let scatter = |name: &str, pick: fn(&OracleScores) -> f64| QdScatter {
        structure: name.to_string(),
        points: scored
            .iter()
            .map(|r| {
                let qs = pick(&r.input_oracle);
                (qs, pick(&r.iter_oracle[last]) - qs)
            })
            .collect(),
    };
    let scatters = vec![
        scatter("overall", |s| s.overall),
        scatter("th", |s| s.th),
        scatter("csp", |s| s.csp),
        scatter("fp", |s| s.fp),
    ];
    Ok((report, efficiency, scatters))
}

/// One row per iteration, columns in the order of the result tables.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "method,iteration,frechet_feature_distance,feature_cosine,mqd,bkl,mad,flip_ratio,n_valid\n",
    );
    for it in &report.per_iteration {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            report.method,
            it.iteration,
            it.frechet.map_or(String::from(""), |v| format!("{v:.6}")),
            it.feature_cosine
                .map_or(String::from(""), |v| format!("{v:.6}")),
            it.mqd,
            it.bkl,
            it.mad,
            it.flip_ratio,
            it.n_valid,
        ));
    }
    out
}

pub fn scatter_to_csv(s: &QdScatter) -> String {
    let mut out = String::from("qs_input,qd\n");
    for (qs, qd) in &s.points {
        out.push_str(&format!("{qs:.6},{qd:.6}\n"));
    }
    out
}
