//! Statistics used by the zero-shot analyses and the transfer harness:
//! distribution summaries, cosine similarity, silhouette scoring, Welch's
//! t-test (with a hand-rolled Student-t CDF), rank-based AUC, and Dice.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation percentile, `q` in `[0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 0.5)
}

/// Five-number-ish summary attached to every emitted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn from_values(xs: &[f64]) -> Summary {
        Summary {
            count: xs.len(),
            mean: mean(xs),
            std: std_dev(xs),
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            q1: percentile(xs, 0.25),
            median: median(xs),
            q3: percentile(xs, 0.75),
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Cosine similarity with f64 accumulation. Bitwise-identical inputs return
/// exactly 1.0 (the mathematical value), sidestepping `sqrt(x)^2` round-off.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-30)
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64))
        .sum::<f64>()
        .sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm < 1e-30 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub score: f64,
    /// True when every pairwise distance is zero, which leaves the score
    /// undefined; the score is reported as 0 in that case.
    pub degenerate: bool,
}

/// Mean silhouette over all points: `s(i) = (b - a) / max(a, b)` with `a`
/// the mean intra-cluster distance and `b` the smallest mean distance to
/// another cluster. Errors on singleton clusters, naming the class.
pub fn silhouette(labels: &[u32], embeddings: &[Vec<f32>]) -> Result<Silhouette> {
    if labels.len() != embeddings.len() || labels.is_empty() {
        return Err(Error::invalid("silhouette needs one label per embedding"));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two classes"));
    }
    for &c in &classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < 2 {
            return Err(Error::invalid(format!("class {c} has a single member")));
        }
    }
    let n = labels.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let all_zero = dist.iter().all(|&d| d == 0.0);
    if all_zero {
        return Ok(Silhouette {
            score: 0.0,
            degenerate: true,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let a = {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for j in 0..n {
                if j != i && labels[j] == own {
                    sum += dist[i * n + j];
                    cnt += 1;
                }
            }
            sum / cnt as f64
        };
        let mut b = f64::INFINITY;
        for &c in &classes {
            if c == own {
                continue;
            }
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for j in 0..n {
                if labels[j] == c {
                    sum += dist[i * n + j];
                    cnt += 1;
                }
            }
            b = b.min(sum / cnt as f64);
        }
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(Silhouette {
        score: total / n as f64,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Student-t machinery for Welch's test
// ---------------------------------------------------------------------------

/// Lanczos log-gamma.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the regularized incomplete beta (Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-14;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let x = df / (df + t * t);
    let tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

/// Welch's two-sample t-test (unequal variances).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least two samples per group"));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (std_dev(a).powi(2), std_dev(b).powi(2));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // identical constant groups: no evidence of difference
        let same = (ma - mb).abs() < 1e-300;
        return Ok(TTest {
            t: if same { 0.0 } else { f64::INFINITY * (ma - mb).signum() },
            df: na + nb - 2.0,
            p_two_sided: if same { 1.0 } else { 0.0 },
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0)).max(1e-300);
    let x = df / (df + t * t);
    let p = reg_inc_beta(df / 2.0, 0.5, x);
    Ok(TTest {
        t,
        df,
        p_two_sided: p.clamp(0.0, 1.0),
    })
}

/// Area under the ROC curve via the rank statistic, ties handled by average
/// ranks. Labels are boolean (true = positive).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("auc needs one label per score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("auc needs both classes present"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(ranks.iter())
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    Ok((rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

/// Dice overlap `2|A n B| / (|A| + |B|)` between binary masks (threshold
/// 0.5). Two empty masks count as perfect agreement.
pub fn dice(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("dice needs equal-length masks"));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let pb = p >= 0.5;
        let tb = t >= 0.5;
        inter += (pb && tb) as u64;
        total += pb as u64 + tb as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = Summary::from_values(&xs);
        assert_eq!(s.count, 4);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 4.0);
        assert!((s.q1 - 1.75).abs() < 1e-12);
        assert!((s.q3 - 3.25).abs() < 1e-12);
    }

    #[test]
    fn cosine_exact_one_for_identical_inputs() {
        let v = vec![0.3f32, -0.7, 0.123456, 9.0];
        assert_eq!(cosine_similarity(&v, &v), 1.0);
        let w = vec![0.3f32, -0.7, 0.123457, 9.0];
        assert!(cosine_similarity(&v, &w) < 1.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[0.0, 1.0])).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_two_tight_clusters_is_one() {
        let labels = vec![0, 0, 1, 1];
        let embeddings = vec![
            vec![0.0f32, 0.0],
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![10.0, 0.0],
        ];
        let s = silhouette(&labels, &embeddings).unwrap();
        assert!(!s.degenerate);
        assert!((s.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_rejects_singleton_naming_class() {
        let labels = vec![0, 0, 7];
        let embeddings = vec![vec![0.0f32, 0.0], vec![0.0, 1.0], vec![10.0, 0.0]];
        let err = silhouette(&labels, &embeddings).unwrap_err().to_string();
        assert!(err.contains('7'), "error should name the class: {err}");
    }

    #[test]
    fn silhouette_hand_instance() {
        // classes {(0,0),(0,1)} and {(10,0),(10,1)}: intra means both 1.0
        let labels = vec![0, 0, 1, 1];
        let embeddings = vec![
            vec![0.0f32, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let s = silhouette(&labels, &embeddings).unwrap();
        assert!(s.score > 0.8);
        // intra-cluster distances are exactly 1.0 for both classes
        let d01 = euclidean(&embeddings[0], &embeddings[1]);
        let d23 = euclidean(&embeddings[2], &embeddings[3]);
        assert_eq!(d01, 1.0);
        assert_eq!(d23, 1.0);
    }

    #[test]
    fn silhouette_degenerate_when_all_identical() {
        let labels = vec![0, 0, 1, 1];
        let embeddings = vec![vec![1.0f32, 1.0]; 4];
        let s = silhouette(&labels, &embeddings).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn t_cdf_known_values() {
        // df=1 (Cauchy): F(1) = 0.75 exactly
        assert!((student_t_cdf(1.0, 1.0) - 0.75).abs() < 1e-10);
        // df=2: F(t) = 0.5 + t / (2 sqrt(2 + t^2))
        let expect = 0.5 + 1.0 / (2.0 * (3.0f64).sqrt());
        assert!((student_t_cdf(1.0, 2.0) - expect).abs() < 1e-10);
        // symmetry and midpoint
        assert!((student_t_cdf(0.0, 5.0) - 0.5).abs() < 1e-12);
        assert!(
            (student_t_cdf(-1.3, 7.0) + student_t_cdf(1.3, 7.0) - 1.0).abs() < 1e-10
        );
        // large t saturates
        assert!(student_t_cdf(50.0, 4.0) > 0.999);
    }

    #[test]
    fn welch_test_behaves() {
        let a = [5.0, 5.1, 4.9, 5.05];
        let b = [1.0, 1.2, 0.8, 1.1];
        let r = welch_t_test(&a, &b).unwrap();
        assert!(r.t > 10.0);
        assert!(r.p_two_sided < 0.001);

        let c = [1.0, 2.0, 3.0];
        let r2 = welch_t_test(&c, &c).unwrap();
        assert!(r2.t.abs() < 1e-12);
        assert!((r2.p_two_sided - 1.0).abs() < 1e-9);

        assert!(welch_t_test(&[1.0], &c).is_err());
    }

    #[test]
    fn auc_hand_values() {
        // perfectly separated
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        // perfectly inverted
        assert_eq!(auc(&scores, &[false, false, true, true]).unwrap(), 0.0);
        // all tied scores give 0.5
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auc(&scores, &[true, true, true, true]).is_err());
    }

    #[test]
    fn auc_random_scores_near_half() {
        let mut rng = crate::rng::Pcg32::new(123, 0);
        let n = 1000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform_f64()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.05, "auc {a}");
    }

    #[test]
    fn dice_hand_values() {
        let truth = [1.0f32, 1.0, 0.0, 0.0];
        assert_eq!(dice(&truth, &truth).unwrap(), 1.0);
        let complement = [0.0f32, 0.0, 1.0, 1.0];
        assert_eq!(dice(&complement, &truth).unwrap(), 0.0);
        assert_eq!(dice(&[0.0f32; 4], &[0.0f32; 4]).unwrap(), 1.0);
        let half = [1.0f32, 0.0, 0.0, 0.0];
        assert!((dice(&half, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [10.0, 20.0, 30.0];
        assert_eq!(percentile(&xs, 0.0), 10.0);
        assert_eq!(percentile(&xs, 0.5), 20.0);
        assert_eq!(percentile(&xs, 1.0), 30.0);
        assert_eq!(percentile(&xs, 0.25), 15.0);
    }
}
