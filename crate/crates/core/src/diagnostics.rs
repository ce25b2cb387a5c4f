//! Attention-map comparison metrics and loss-curvature estimates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::AttentionTrace;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

/// Indices of `row` sorted by descending value, ties by lower index.
fn descending_order(row: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Shortest prefix of the student's descending order that contains every
/// one of the teacher's top-`k` tokens, divided by the row length.
pub fn cover_length_ratio(teacher: &[f32], student: &[f32], k: usize) -> Result<f64> {
    let n = teacher.len();
    if student.len() != n {
        return Err(Error::Dimension(format!("rows of length {n} and {}", student.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-K of {k} for a row of {n}")));
    }
    let top = &descending_order(teacher)[..k];
    let mut position = vec![0usize; n];
    for (rank, &i) in descending_order(student).iter().enumerate() {
        position[i] = rank;
    }
    let cover = top.iter().map(|&i| position[i] + 1).max().unwrap_or(k);
    Ok(cover as f64 / n as f64)
}

/// Hinge penalty `max(0, −x)`.
pub fn hinge(x: f64) -> f64 {
    (-x).max(0.0)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_{i<j} Φ((s_i − s_j)·sign(t_i − t_j))` over one pair of rows.
pub fn ranking_loss_row(teacher: &[f32], student: &[f32]) -> f64 {
    let n = teacher.len().min(student.len());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let s = student[i] as f64 - student[j] as f64;
            let t = sign(teacher[i] as f64 - teacher[j] as f64);
            total += hinge(s * t);
        }
    }
    total
}

/// Pairwise ranking loss of one head's maps, summed over rows.
pub fn ranking_loss_head(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::Dimension(format!(
            "maps {:?} and {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    Ok((0..teacher.rows())
        .map(|r| ranking_loss_row(teacher.row(r), student.row(r)))
        .sum())
}

/// Ranking loss summed over heads.
pub fn ranking_loss(teacher: &[Tensor], student: &[Tensor]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Dimension("head counts differ".into()));
    }
    teacher
        .iter()
        .zip(student)
        .map(|(t, s)| ranking_loss_head(t, s))
        .sum()
}

/// 1-based descending rank of `row[t]` over the row length; ties rank the
/// lower index first.
pub fn ranking_ratio(row: &[f32], t: usize) -> Result<f64> {
    let n = row.len();
    if t >= n {
        return Err(Error::Index(format!("token {t} of {n}")));
    }
    let v = row[t];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < t))
        .count();
    Ok((ahead + 1) as f64 / n as f64)
}

/// Per-token (min, max) over the hidden features.
pub fn token_dynamic_range(y: &Tensor) -> Vec<(f32, f32)> {
    (0..y.rows())
        .map(|r| {
            y.row(r)
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

fn l2_per_len(a: &[f32], b: &[f32]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    sq.sqrt() / a.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaDistance {
    pub layer: usize,
    /// Mean over heads of the length-normalized L2 distance between the
    /// attention-probability rows of the token.
    pub gen_dist: f64,
    /// Length-normalized L2 distance between the value-path outputs of the
    /// token.
    pub prop_dist: f64,
}

/// Per-layer distance of the attention generation and propagation parts of
/// token `t` between two traces.
pub fn sa_distance(teacher: &AttentionTrace, student: &AttentionTrace, t: usize) -> Result<Vec<SaDistance>> {
    if teacher.num_layers() != student.num_layers() || teacher.num_heads() != student.num_heads() {
        return Err(Error::Contract("traces are not aligned".into()));
    }
    let n = teacher.seq_len();
    if student.seq_len() != n {
        return Err(Error::Contract("traces have different lengths".into()));
    }
    if t >= n {
        return Err(Error::Index(format!("token {t} of {n}")));
    }
    teacher
        .layers
        .iter()
        .zip(&student.layers)
        .enumerate()
        .map(|(l, (lt, ls))| {
            let heads = lt.maps.len().max(1) as f64;
            let gen_dist = lt
                .maps
                .iter()
                .zip(&ls.maps)
                .map(|(mt, ms)| l2_per_len(mt.row(t), ms.row(t)))
                .sum::<f64>()
                / heads;
            let (pt, ps) = (lt.prop_total(), ls.prop_total());
            Ok(SaDistance {
                layer: l,
                gen_dist,
                prop_dist: l2_per_len(pt.row(t), ps.row(t)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// K for the cover-length ratio.
    pub top_k: usize,
    /// Token positions followed by the ranking-ratio, min-max and
    /// SA-GEN/SA-PROP records.
    pub tracked_tokens: Vec<usize>,
    pub power_steps: usize,
    pub power_tol: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            top_k: 3,
            tracked_tokens: vec![0, 1],
            power_steps: 100,
            power_tol: 1e-4,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > seq_len {
            return Err(Error::Config(format!(
                "top-K {} for sequences of length {seq_len}",
                self.top_k
            )));
        }
        if self.power_steps == 0 {
            return Err(Error::Config("power iteration needs at least one step".into()));
        }
        if let Some(t) = self.tracked_tokens.iter().find(|&&t| t >= seq_len) {
            return Err(Error::Config(format!("tracked token {t} of {seq_len}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub layer: usize,
    pub head: usize,
    /// Mean over query rows.
    pub cover_length_ratio: f64,
    /// Summed over rows and pairs.
    pub ranking_loss: f64,
    /// Per tracked token: (token, teacher ratio, student ratio), each the mean
    /// over query rows of the token's ranking ratio.
    pub ranking_ratios: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRecord {
    pub layer: usize,
    pub token: usize,
    pub teacher: (f32, f32),
    pub student: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub token: usize,
    pub layer: usize,
    pub gen_dist: f64,
    pub prop_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub heads: Vec<HeadRecord>,
    pub ranges: Vec<RangeRecord>,
    pub distances: Vec<DistanceRecord>,
}

/// All attention metrics for one example.
pub fn diagnose_pair(
    teacher: &AttentionTrace,
    student: &AttentionTrace,
    cfg: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    let n = teacher.seq_len();
    cfg.validate(n)?;
    let mut report = DiagnosticsReport::default();
    for (l, (lt, ls)) in teacher.layers.iter().zip(&student.layers).enumerate() {
        for (h, (mt, ms)) in lt.maps.iter().zip(&ls.maps).enumerate() {
            let rows = mt.rows();
            let cover = (0..rows)
                .map(|r| cover_length_ratio(mt.row(r), ms.row(r), cfg.top_k))
                .sum::<Result<f64>>()?
                / rows as f64;
            let ratios = cfg
                .tracked_tokens
                .iter()
                .map(|&t| {
                    let mean = |m: &Tensor| -> Result<f64> {
                        Ok((0..rows).map(|r| ranking_ratio(m.row(r), t)).sum::<Result<f64>>()? / rows as f64)
                    };
                    Ok((t, mean(mt)?, mean(ms)?))
                })
                .collect::<Result<Vec<_>>>()?;
            report.heads.push(HeadRecord {
                layer: l,
                head: h,
                cover_length_ratio: cover,
                ranking_loss: ranking_loss_head(mt, ms)?,
                ranking_ratios: ratios,
            });
        }
        let (rt, rs) = (token_dynamic_range(&lt.attn_out), token_dynamic_range(&ls.attn_out));
        for &t in &cfg.tracked_tokens {
            report.ranges.push(RangeRecord {
                layer: l,
                token: t,
                teacher: rt[t],
                student: rs[t],
            });
        }
    }
    for &t in &cfg.tracked_tokens {
        for d in sa_distance(teacher, student, t)? {
            report.distances.push(DistanceRecord {
                token: t,
                layer: d.layer,
                gen_dist: d.gen_dist,
                prop_dist: d.prop_dist,
            });
        }
    }
    Ok(report)
}

impl DiagnosticsReport {
    /// Field-wise mean of reports with identical record layouts.
    pub fn mean(reports: &[DiagnosticsReport]) -> Result<DiagnosticsReport> {
        let Some(first) = reports.first() else {
            return Ok(DiagnosticsReport::default());
        };
        let k = reports.len() as f64;
        let mut out = first.clone();
        for (i, head) in out.heads.iter_mut().enumerate() {
            let all: Vec<&HeadRecord> = reports.iter().map(|r| &r.heads[i]).collect();
            head.cover_length_ratio = all.iter().map(|h| h.cover_length_ratio).sum::<f64>() / k;
            head.ranking_loss = all.iter().map(|h| h.ranking_loss).sum::<f64>() / k;
            for (j, rr) in head.ranking_ratios.iter_mut().enumerate() {
                rr.1 = all.iter().map(|h| h.ranking_ratios[j].1).sum::<f64>() / k;
                rr.2 = all.iter().map(|h| h.ranking_ratios[j].2).sum::<f64>() / k;
            }
        }
        for (i, range) in out.ranges.iter_mut().enumerate() {
            let mean = |f: fn(&RangeRecord) -> f32| {
                (reports.iter().map(|r| f(&r.ranges[i]) as f64).sum::<f64>() / k) as f32
            };
            range.teacher = (mean(|r| r.teacher.0), mean(|r| r.teacher.1));
            range.student = (mean(|r| r.student.0), mean(|r| r.student.1));
        }
        for (i, d) in out.distances.iter_mut().enumerate() {
            d.gen_dist = reports.iter().map(|r| r.distances[i].gen_dist).sum::<f64>() / k;
            d.prop_dist = reports.iter().map(|r| r.distances[i].prop_dist).sum::<f64>() / k;
        }
        if reports.iter().any(|r| r.heads.len() != out.heads.len()) {
            return Err(Error::Contract("reports have different layouts".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `Hv ≈ (∇L(θ+εv) − ∇L(θ−εv)) / 2ε` with `ε = 1e-3·(1 + ‖θ‖∞)`.
pub fn hessian_vector_product<G>(grad: &G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let eps = 1e-3 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let shifted = |sgn: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sgn * eps * d).collect() };
    let gp = grad(&shifted(1.0))?;
    let gm = grad(&shifted(-1.0))?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::Dimension("gradient length differs from parameter length".into()));
    }
    if gp.iter().chain(&gm).any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient during Hessian-vector product".into()));
    }
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Dominant Hessian eigenvalue by power iteration on finite-difference
/// Hessian-vector products. Stops once the Rayleigh quotient moves by less
/// than `tol`, or after `steps` products.
pub fn hessian_max_eig<G>(grad: &G, theta: &[f64], v0: &[f64], steps: usize, tol: f64) -> Result<EigenEstimate>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::Config("power iteration needs at least one step".into()));
    }
    if v0.len() != theta.len() {
        return Err(Error::Dimension("start vector length differs from parameter length".into()));
    }
    let mut v = v0.to_vec();
    if normalize(&mut v) == 0.0 {
        return Err(Error::Input("zero start vector".into()));
    }
    let mut lambda = f64::NAN;
    for it in 1..=steps {
        let hv = hessian_vector_product(grad, theta, &v)?;
        let next: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let converged = (next - lambda).abs() < tol;
        lambda = next;
        v = hv;
        if normalize(&mut v) == 0.0 || converged {
            return Ok(EigenEstimate {
                eigenvalue: lambda,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(EigenEstimate {
        eigenvalue: lambda,
        iterations: steps,
        converged: false,
    })
}

/// Unit Gaussian start vector drawn from `seed`.
pub fn random_unit_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// One estimate per start-vector seed; seeds run concurrently under `exec`.
pub fn hessian_spectrum<G>(
    grad: &G,
    theta: &[f64],
    seeds: &[u64],
    steps: usize,
    tol: f64,
    exec: Exec,
) -> Result<Vec<EigenEstimate>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    exec.try_map(seeds, |&s| {
        let v0 = random_unit_vector(theta.len(), s);
        hessian_max_eig(grad, theta, &v0, steps, tol)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cover_length_hand_cases() {
        let t = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(cover_length_ratio(&t, &t, 2).unwrap(), 0.5);
        let rev = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(cover_length_ratio(&t, &rev, 2).unwrap(), 1.0);
        assert!(matches!(cover_length_ratio(&t, &t, 5), Err(Error::Config(_))));
    }

    #[test]
    fn ranking_loss_hand_cases() {
        assert!((ranking_loss_row(&[0.6, 0.4], &[0.4, 0.6]) - 0.2).abs() < 1e-7);
        assert_eq!(ranking_loss_row(&[0.6, 0.4], &[0.6, 0.4]), 0.0);
        assert_eq!(ranking_loss_row(&[0.5, 0.5], &[0.1, 0.9]), 0.0);
    }

    #[test]
    fn ranking_ratio_hand_cases() {
        assert_eq!(ranking_ratio(&[0.1, 0.2, 0.3, 0.4], 0).unwrap(), 1.0);
        assert_eq!(ranking_ratio(&[0.1, 0.2, 0.3, 0.4], 3).unwrap(), 0.25);
        assert_eq!(ranking_ratio(&[0.25; 4], 2).unwrap(), 0.75);
        assert!(matches!(ranking_ratio(&[0.5, 0.5], 2), Err(Error::Index(_))));
    }

    #[test]
    fn dynamic_range_hand_case() {
        let y = Tensor::from_rows(&[&[-1.0, 0.0, 2.0], &[3.0, 3.0, 3.0]]).unwrap();
        assert_eq!(token_dynamic_range(&y), vec![(-1.0, 2.0), (3.0, 3.0)]);
    }

    #[test]
    fn diagonal_quadratic_eigenvalue() {
        // L = θᵀ diag(2, 1) θ / 2, ∇L = diag(2, 1) θ
        let grad = |t: &[f64]| -> Result<Vec<f64>> { Ok(vec![2.0 * t[0], t[1]]) };
        let est = hessian_max_eig(&grad, &[0.3, -0.2], &[1.0, 1.0], 200, 1e-10).unwrap();
        assert!((est.eigenvalue - 2.0).abs() < 0.02, "{est:?}");
        assert!(est.converged);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let grad = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![f64::NAN]) };
        assert!(matches!(
            hessian_max_eig(&grad, &[0.0], &[1.0], 3, 1e-6),
            Err(Error::Numeric(_))
        ));
    }
}
