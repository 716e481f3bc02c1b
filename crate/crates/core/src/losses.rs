//! Supervised, distillation and flexible-model losses over logits.
//!
//! Every loss is averaged over the batch. Functions return the value
//! together with its exact gradient with respect to the logits so the model
//! backward pass can start from them directly.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Divergence {
    /// τ²·KL between temperature-softened distributions.
    Kl,
    /// τ²·cross-entropy with the softened teacher distribution as target.
    Ce,
}

/// Argument order of the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlOrder {
    /// `KL(student ‖ teacher)`.
    Paper,
    /// `KL(teacher ‖ student)`, the usual Hinton-style direction.
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Every sub-model trained on labels only.
    #[serde(rename = "NONE")]
    None,
    /// Every smaller sub-model distils from the largest one.
    #[serde(rename = "IPKD")]
    Ipkd,
    /// Every smaller sub-model distils from the next larger one.
    #[serde(rename = "TA1")]
    Ta1,
    /// Every smaller sub-model distils from all larger ones, weighted
    /// `1/(n-i)`.
    #[serde(rename = "TAM")]
    Tam,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Ipkd, Strategy::Ta1, Strategy::Tam];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "NONE",
            Strategy::Ipkd => "IPKD",
            Strategy::Ta1 => "TA1",
            Strategy::Tam => "TAM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_tau() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.8
}
fn default_divergence() -> Divergence {
    Divergence::Kl
}
fn default_kl_order() -> KlOrder {
    KlOrder::Paper
}
fn default_true() -> bool {
    true
}
fn default_strategy() -> Strategy {
    Strategy::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_divergence")]
    pub divergence: Divergence,
    #[serde(default = "default_kl_order")]
    pub kl_order: KlOrder,
    /// Treat teacher logits as constants in every KD term.
    #[serde(default = "default_true")]
    pub detach_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            tau: default_tau(),
            lambda: default_lambda(),
            divergence: Divergence::Kl,
            kl_order: KlOrder::Paper,
            detach_teacher: true,
        }
    }
}

impl DistillConfig {
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Validates invariants; errors name the offending key under `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("{prefix}.tau"), format!("must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                format!("{prefix}.lambda"),
                format!("must lie in [0, 1], got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Logits of every sub-model (index 0 = smallest, last = largest) with
/// one-hot labels.
#[derive(Debug, Clone)]
pub struct LogitsBundle<T: Scalar> {
    pub logits: Vec<Tensor<T>>,
    pub labels: Tensor<T>,
}

impl<T: Scalar> LogitsBundle<T> {
    pub fn new(logits: Vec<Tensor<T>>, labels: Tensor<T>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Validation("bundle needs at least one sub-model".into()));
        }
        validate_one_hot(&labels)?;
        for l in &logits {
            if l.shape() != labels.shape() {
                return Err(Error::Dimension {
                    op: "logits bundle",
                    lhs: l.shape().to_vec(),
                    rhs: labels.shape().to_vec(),
                });
            }
        }
        Ok(Self { logits, labels })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} outside 0..{classes}")));
        }
        data[r * classes + l] = T::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data)
}

fn validate_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    if y.ndim() != 2 {
        return Err(Error::Validation(format!("labels must be [batch, C], got {:?}", y.shape())));
    }
    for r in 0..y.rows() {
        let row = y.row(r);
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Validation(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

fn check_logits<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.ndim() != 2 || a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `log softmax(z / tau)` of one row.
fn log_softmax_scaled<T: Scalar>(z: &[T], inv_tau: T, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in z {
        max = max.max(v * inv_tau);
    }
    let mut sum = T::zero();
    for &v in z {
        sum += (v * inv_tau - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v * inv_tau - lse;
    }
}

/// Mean supervised cross-entropy `−Σ_c y_c log softmax(a)_c` and its
/// gradient `(softmax(a) − y) / batch`.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_logits("cross_entropy", logits, labels)?;
    validate_one_hot(labels)?;
    let (b, c) = (logits.rows(), logits.shape()[1]);
    let inv_b = T::one() / T::of(b as f64);
    let mut lp = vec![T::zero(); c];
    let mut total = T::zero();
    let mut grad = vec![T::zero(); b * c];
    for r in 0..b {
        log_softmax_scaled(logits.row(r), T::one(), &mut lp);
        let y = labels.row(r);
        let mut row_loss = T::zero();
        for k in 0..c {
            row_loss -= y[k] * lp[k];
            grad[r * c + k] = (lp[k].exp() - y[k]) * inv_b;
        }
        total += row_loss;
    }
    Ok((total * inv_b, Tensor::from_raw(vec![b, c], grad)))
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    cross_entropy_with_grad(logits, labels).map(|(v, _)| v)
}

/// Value of one KD term with gradients for both arguments.
#[derive(Debug, Clone)]
pub struct KdTerm<T: Scalar> {
    pub value: T,
    pub d_student: Tensor<T>,
    pub d_teacher: Tensor<T>,
}

pub fn kd_loss_with_grads<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    tau: f64,
    divergence: Divergence,
    order: KlOrder,
) -> Result<KdTerm<T>> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("temperature must be > 0, got {tau}")));
    }
    check_logits("kd_loss", student, teacher)?;
    let (b, c) = (student.rows(), student.shape()[1]);
    let t = T::of(tau);
    let inv_tau = T::one() / t;
    let inv_b = T::one() / T::of(b as f64);
    let mut lp = vec![T::zero(); c];
    let mut lq = vec![T::zero(); c];
    let mut ds = vec![T::zero(); b * c];
    let mut dt = vec![T::zero(); b * c];
    let mut total = T::zero();
    for r in 0..b {
        log_softmax_scaled(student.row(r), inv_tau, &mut lp);
        log_softmax_scaled(teacher.row(r), inv_tau, &mut lq);
        let p: Vec<T> = lp.iter().map(|v| v.exp()).collect();
        let q: Vec<T> = lq.iter().map(|v| v.exp()).collect();
        let (gs, gt) = (&mut ds[r * c..(r + 1) * c], &mut dt[r * c..(r + 1) * c]);
        let row_value = match (divergence, order) {
            (Divergence::Kl, KlOrder::Paper) => {
                let mut v = T::zero();
                let mut mean_u = T::zero();
                for k in 0..c {
                    let u = lp[k] - lq[k];
                    v += p[k] * u;
                    mean_u += p[k] * u;
                }
                for k in 0..c {
                    gs[k] = t * p[k] * ((lp[k] - lq[k]) - mean_u) * inv_b;
                    gt[k] = t * (q[k] - p[k]) * inv_b;
                }
                v
            }
            (Divergence::Kl, KlOrder::Classic) => {
                let mut v = T::zero();
                for k in 0..c {
                    v += q[k] * (lq[k] - lp[k]);
                }
                for k in 0..c {
                    gs[k] = t * (p[k] - q[k]) * inv_b;
                    gt[k] = t * q[k] * ((lq[k] - lp[k]) - v) * inv_b;
                }
                v
            }
            (Divergence::Ce, _) => {
                let mut v = T::zero();
                for k in 0..c {
                    v -= q[k] * lp[k];
                }
                // v = -Σ q·lp, so Σ q·lp = -v
                for k in 0..c {
                    gs[k] = t * (p[k] - q[k]) * inv_b;
                    gt[k] = -t * q[k] * (lp[k] + v) * inv_b;
                }
                v
            }
        };
        total += row_value;
    }
    Ok(KdTerm {
        value: t * t * total * inv_b,
        d_student: Tensor::from_raw(vec![b, c], ds),
        d_teacher: Tensor::from_raw(vec![b, c], dt),
    })
}

/// Temperature-scaled distillation loss with the student as first KL
/// argument.
pub fn kd_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, tau: f64, divergence: Divergence) -> Result<T> {
    kd_loss_with_grads(student, teacher, tau, divergence, KlOrder::Paper).map(|k| k.value)
}

/// `(1 − λ)·CE(student, y) + λ·KD(student, teacher)`.
pub fn student_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, labels: &Tensor<T>, cfg: &DistillConfig) -> Result<T> {
    cfg.validate("distill")?;
    let ce = cross_entropy(student, labels)?;
    let kd = kd_loss_with_grads(student, teacher, cfg.tau, cfg.divergence, cfg.kl_order)?.value;
    let lambda = T::of(cfg.lambda);
    Ok((T::one() - lambda) * ce + lambda * kd)
}

/// Teachers of sub-model `i` (1-based) among `n`, with exact weights.
///
/// For `TAM` each of the `n − i` larger sub-models gets weight `1/(n − i)`;
/// the weights of every student sum to exactly one.
pub fn teacher_weights(strategy: Strategy, n: usize, i: usize) -> Vec<(usize, Ratio<u64>)> {
    if i >= n {
        return Vec::new();
    }
    let weights: Vec<(usize, Ratio<u64>)> = match strategy {
        Strategy::None => return Vec::new(),
        Strategy::Ipkd => vec![(n, Ratio::from_integer(1))],
        Strategy::Ta1 => vec![(i + 1, Ratio::from_integer(1))],
        Strategy::Tam => {
            let w = Ratio::new(1, (n - i) as u64);
            (i + 1..=n).map(|j| (j, w)).collect()
        }
    };
    let total: Ratio<u64> = weights.iter().map(|&(_, w)| w).sum();
    assert_eq!(total, Ratio::from_integer(1), "teacher weights of sub-model {i}/{n} must sum to 1");
    weights
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    /// Cross-entropy of sub-model `i` against labels.
    Ce { student: usize },
    /// Distillation of sub-model `student` from sub-model `teacher`.
    Kd { student: usize, teacher: usize },
}

/// One summand of a flexible loss. `value` is the unweighted term; the
/// total adds `weight · value`.
#[derive(Debug, Clone)]
pub struct LossTerm<T: Scalar> {
    pub kind: TermKind,
    pub value: T,
    pub weight: T,
}

impl<T: Scalar> LossTerm<T> {
    /// Metric column name: `ce_exit{i}` or `kd_{i}from{j}`.
    pub fn name(&self) -> String {
        term_name(self.kind)
    }
}

pub fn term_name(kind: TermKind) -> String {
    match kind {
        TermKind::Ce { student } => format!("ce_exit{student}"),
        TermKind::Kd { student, teacher } => format!("kd_{student}from{teacher}"),
    }
}

/// Terms a strategy produces for `n` sub-models, in evaluation order.
pub fn term_layout(strategy: Strategy, n: usize) -> Vec<TermKind> {
    let mut kinds: Vec<TermKind> = (1..=n).map(|student| TermKind::Ce { student }).collect();
    for i in 1..n {
        for (j, _) in teacher_weights(strategy, n, i) {
            kinds.push(TermKind::Kd { student: i, teacher: j });
        }
    }
    kinds
}

#[derive(Debug, Clone)]
pub struct FlexibleLoss<T: Scalar> {
    pub total: T,
    pub terms: Vec<LossTerm<T>>,
    /// d total / d logits, one tensor per sub-model.
    pub grads: Vec<Tensor<T>>,
}

/// Joint loss of a flexible model under `cfg.strategy`.
///
/// * `NONE`: `Σ_i CE(a_i)`
/// * distillation strategies: `CE(a_n) + (1−λ)·Σ_{i<n} CE(a_i) + λ·Σ_{i<n} Σ_j w_ij·KD(a_i, a_j)`
///   with teachers and weights from [`teacher_weights`].
pub fn flexible_loss<T: Scalar>(bundle: &LogitsBundle<T>, cfg: &DistillConfig) -> Result<FlexibleLoss<T>> {
    flexible_loss_with_teachers(&bundle.logits, &bundle.logits, &bundle.labels, cfg)
}

/// Like [`flexible_loss`] but reads teacher logits from `teachers`.
///
/// Passing a frozen copy of the logits as `teachers` yields the objective
/// whose exact gradient equals the detached-teacher gradient, which is what
/// finite-difference checks need. When `cfg.detach_teacher` is false the
/// teacher-side gradient of each KD term is added to `grads[j]`, which is
/// only meaningful when `teachers` are the same logits as `students`.
pub fn flexible_loss_with_teachers<T: Scalar>(
    students: &[Tensor<T>],
    teachers: &[Tensor<T>],
    labels: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<FlexibleLoss<T>> {
    cfg.validate("distill")?;
    let n = students.len();
    if n == 0 || teachers.len() != n {
        return Err(Error::Validation("students and teachers must be non-empty and equally many".into()));
    }
    if cfg.strategy != Strategy::None && n < 2 {
        return Err(Error::config(
            "distill.strategy",
            format!("{} needs at least 2 sub-models, model has {n}", cfg.strategy),
        ));
    }
    let lambda = T::of(cfg.lambda);
    let mut grads: Vec<Tensor<T>> = students.iter().map(|s| Tensor::zeros(s.shape())).collect();
    let mut terms = Vec::new();
    let mut total = T::zero();

    for i in 1..=n {
        let (value, g) = cross_entropy_with_grad(&students[i - 1], labels)?;
        let weight = if cfg.strategy == Strategy::None || i == n {
            T::one()
        } else {
            T::one() - lambda
        };
        total += weight * value;
        axpy(&mut grads[i - 1], weight, &g);
        terms.push(LossTerm {
            kind: TermKind::Ce { student: i },
            value,
            weight,
        });
    }
    for i in 1..n {
        for (j, w) in teacher_weights(cfg.strategy, n, i) {
            let kd = kd_loss_with_grads(&students[i - 1], &teachers[j - 1], cfg.tau, cfg.divergence, cfg.kl_order)?;
            let weight = lambda * T::of(*w.numer() as f64) / T::of(*w.denom() as f64);
            total += weight * kd.value;
            axpy(&mut grads[i - 1], weight, &kd.d_student);
            if !cfg.detach_teacher {
                axpy(&mut grads[j - 1], weight, &kd.d_teacher);
            }
            terms.push(LossTerm {
                kind: TermKind::Kd { student: i, teacher: j },
                value: kd.value,
                weight,
            });
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("flexible loss is {total}")));
    }
    Ok(FlexibleLoss { total, terms, grads })
}

fn axpy<T: Scalar>(dst: &mut Tensor<T>, a: T, x: &Tensor<T>) {
    if a == T::zero() {
        return;
    }
    for (d, &v) in dst.data_mut().iter_mut().zip(x.data()) {
        *d += a * v;
    }
}
