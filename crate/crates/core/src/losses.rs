//! Training losses: hypersphere feature alignment (with its internal
//! stop-gradient), message recovery, image quality, and their weighted total.
//!
//! The L2 notation is realized as MEAN squared error (averaged over elements
//! and batch) so the default weights stay meaningful across image sizes and
//! message lengths; the convention is recorded in run metadata.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::AlignmentKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum tolerated deviation from unit norm for alignment-loss inputs.
/// Non-unit inputs are a contract error rather than silently renormalized,
/// which keeps the `2 - 2cos` and squared-distance forms actually equal.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Per-step loss record. The total is exactly the weighted combination of
/// the three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_align: f64,
    pub l_msg: f64,
    pub l_quality: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_align.is_finite()
            && self.l_msg.is_finite()
            && self.l_quality.is_finite()
            && self.total.is_finite()
    }
}

/// Combine components into the weighted total.
pub fn total_loss(
    l_align: f64,
    l_msg: f64,
    l_quality: f64,
    lambda_align: f64,
    lambda_msg: f64,
    lambda_quality: f64,
) -> LossBreakdown {
    LossBreakdown {
        l_align,
        l_msg,
        l_quality,
        total: lambda_align * l_align + lambda_msg * l_msg + lambda_quality * l_quality,
    }
}

fn check_unit_rows<F: Scalar>(rows: &Array2<F>, side: &str) -> Result<()> {
    for row in rows.rows() {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().to_f64c();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{side} projection is not unit norm (|v| = {norm})"
            )));
        }
    }
    Ok(())
}

// ---- Value-level forms (evaluation, tests) ----

/// `2 - 2 <s, t>` averaged over the batch; equals the squared Euclidean
/// distance for unit vectors. Inputs must already be unit rows.
pub fn feature_alignment_value<F: Scalar>(
    student: &Array2<F>,
    teacher: &Array2<F>,
) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::Shape("projection batches differ in shape".into()));
    }
    check_unit_rows(student, "student")?;
    check_unit_rows(teacher, "teacher")?;
    let b = student.dim().0 as f64;
    let mut acc = 0.0;
    for (s, t) in student.rows().into_iter().zip(teacher.rows()) {
        let dot: f64 = s.iter().zip(t.iter()).map(|(&a, &b)| (a * b).to_f64c()).sum();
        acc += 2.0 - 2.0 * dot;
    }
    Ok(acc / b)
}

/// Sum of the two mean-squared message errors.
pub fn message_loss_value<F: Scalar>(
    pred_teacher: &[F],
    pred_student: &[F],
    target: &[F],
) -> Result<f64> {
    if pred_teacher.len() != target.len() || pred_student.len() != target.len() {
        return Err(Error::Shape("message length mismatch".into()));
    }
    let n = target.len() as f64;
    let mse = |pred: &[F]| -> f64 {
        pred.iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let d = (p - t).to_f64c();
                d * d
            })
            .sum::<f64>()
            / n
    };
    Ok(mse(pred_teacher) + mse(pred_student))
}

/// Mean squared pixel error.
pub fn quality_loss_value<F: Scalar>(
    watermarked: &crate::image::ImageBatch<F>,
    cover: &crate::image::ImageBatch<F>,
) -> Result<f64> {
    watermarked.mse(cover)
}

// ---- Graph-level forms (training) ----

/// Feature alignment on the hypersphere. The teacher side is gradient
/// blocked inside this operation; gradient flows only into the student.
pub fn feature_alignment_node<F: Scalar>(
    tape: &Tape<F>,
    zbar_student: Var,
    zbar_teacher: Var,
) -> Result<Var> {
    let sv = tape.value(zbar_student);
    let tv = tape.value(zbar_teacher);
    let s2 = sv.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
    let t2 = tv.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
    if s2.dim() != t2.dim() {
        return Err(Error::Shape("projection batches differ in shape".into()));
    }
    check_unit_rows(&s2.to_owned(), "student")?;
    check_unit_rows(&t2.to_owned(), "teacher")?;
    let blocked_teacher = tape.detach(zbar_teacher);
    let cos = tape.mean_row_dot(zbar_student, blocked_teacher);
    Ok(tape.affine_scalar(cos, F::from_f64c(-2.0), F::from_f64c(2.0)))
}

/// Alignment variant: mean squared error on raw (unnormalized) projections,
/// teacher side blocked.
pub fn mse_alignment_node<F: Scalar>(tape: &Tape<F>, raw_student: Var, raw_teacher: Var) -> Var {
    let blocked = tape.detach(raw_teacher);
    tape.mse(raw_student, blocked)
}

/// Running center for the sharpened-teacher alignment variant.
#[derive(Debug, Clone)]
pub struct DinoCenter<F: Scalar> {
    center: Array1<F>,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub momentum: f64,
}

impl<F: Scalar> DinoCenter<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            center: Array1::zeros(dim),
            student_temp: 0.1,
            teacher_temp: 0.04,
            momentum: 0.9,
        }
    }

    /// Teacher target distributions: centered, sharpened softmax rows.
    fn teacher_probs(&self, raw_teacher: &Array2<F>) -> Array2<F> {
        let (b, k) = raw_teacher.dim();
        let mut probs = Array2::<F>::zeros((b, k));
        let temp = F::from_f64c(self.teacher_temp);
        for bi in 0..b {
            let mut maxv = F::neg_infinity();
            for ki in 0..k {
                let v = (raw_teacher[(bi, ki)] - self.center[ki]) / temp;
                if v > maxv {
                    maxv = v;
                }
            }
            let mut denom = F::zero();
            for ki in 0..k {
                let v = (raw_teacher[(bi, ki)] - self.center[ki]) / temp;
                denom += (v - maxv).exp();
            }
            for ki in 0..k {
                let v = (raw_teacher[(bi, ki)] - self.center[ki]) / temp;
                probs[(bi, ki)] = (v - maxv).exp() / denom;
            }
        }
        probs
    }

    fn update(&mut self, raw_teacher: &Array2<F>) {
        let (b, k) = raw_teacher.dim();
        let m = F::from_f64c(self.momentum);
        let one_minus = F::one() - m;
        let denom = F::from_f64c(b as f64);
        for ki in 0..k {
            let mut mean = F::zero();
            for bi in 0..b {
                mean += raw_teacher[(bi, ki)];
            }
            mean = mean / denom;
            self.center[ki] = m * self.center[ki] + one_minus * mean;
        }
    }
}

/// Alignment variant borrowed from self-distillation: cross-entropy between
/// the centered, sharpened teacher distribution and the student softmax.
pub fn dino_alignment_node<F: Scalar>(
    tape: &Tape<F>,
    raw_student: Var,
    raw_teacher: Var,
    center: &mut DinoCenter<F>,
) -> Var {
    let tv = tape.value(raw_teacher);
    let t2 = tv
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank 2")
        .to_owned();
    let targets = center.teacher_probs(&t2);
    center.update(&t2);
    let scaled_student = tape.scale(raw_student, F::from_f64c(1.0 / center.student_temp));
    tape.softmax_cross_entropy_rows(scaled_student, &targets)
}

/// Sum of teacher and student mean-squared message errors against the
/// shared target.
pub fn message_loss_node<F: Scalar>(
    tape: &Tape<F>,
    scores_teacher: Var,
    scores_student: Var,
    target: Var,
) -> Var {
    let mt = tape.mse(scores_teacher, target);
    let ms = tape.mse(scores_student, target);
    tape.weighted_sum(&[(mt, F::one()), (ms, F::one())])
}

/// Which alignment plugin the trainer builds, plus any state it carries.
pub struct AlignmentPlugin<F: Scalar> {
    pub kind: AlignmentKind,
    pub dino: DinoCenter<F>,
}

impl<F: Scalar> AlignmentPlugin<F> {
    pub fn new(kind: AlignmentKind, projection_dim: usize) -> Self {
        Self { kind, dino: DinoCenter::new(projection_dim) }
    }

    /// Build the alignment node from raw and normalized projections.
    pub fn node(
        &mut self,
        tape: &Tape<F>,
        raw_student: Var,
        raw_teacher: Var,
        zbar_student: Var,
        zbar_teacher: Var,
    ) -> Result<Var> {
        match self.kind {
            AlignmentKind::Cosine => feature_alignment_node(tape, zbar_student, zbar_teacher),
            AlignmentKind::Mse => Ok(mse_alignment_node(tape, raw_student, raw_teacher)),
            AlignmentKind::Dino => {
                Ok(dino_alignment_node(tape, raw_student, raw_teacher, &mut self.dino))
            }
        }
    }
}
