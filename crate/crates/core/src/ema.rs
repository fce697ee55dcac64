//! EMA teacher weights.
//!
//! The teacher after `k` steps can be computed either by iterating
//! `w_t <- alpha * w_t + (1 - alpha) * w_s` or directly as a weighted sum of
//! the initial weights and every student snapshot; both routes are exposed.

use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_ALPHA: f64 = 0.9996;

const CHUNK: usize = 1 << 14;

/// Flat parameter snapshot tagged with the layout it was flattened from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub layout_id: String,
}

impl WeightVector {
    pub fn new(layout_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!("weight {i} is not finite")));
        }
        Ok(WeightVector {
            values,
            layout_id: layout_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_mixable(&self, other: &WeightVector) -> Result<()> {
        if self.layout_id != other.layout_id {
            return Err(Error::LayoutMismatch(format!(
                "layout '{}' vs '{}'",
                self.layout_id, other.layout_id
            )));
        }
        if self.values.len() != other.values.len() {
            return Err(Error::LayoutMismatch(format!(
                "length {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Range(format!("alpha must lie in [0,1], got {alpha}")))
    }
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_step(teacher: &WeightVector, student: &WeightVector, alpha: f64) -> Result<WeightVector> {
    ema_step_with(teacher, student, alpha, Exec::Sequential)
}

pub fn ema_step_with(
    teacher: &WeightVector,
    student: &WeightVector,
    alpha: f64,
    exec: Exec,
) -> Result<WeightVector> {
    teacher.check_mixable(student)?;
    check_alpha(alpha)?;
    let beta = 1.0 - alpha;
    let mut out = teacher.values.clone();
    exec.for_each_chunk_mut(&mut out, CHUNK, |ci, chunk| {
        let s = &student.values[ci * CHUNK..ci * CHUNK + chunk.len()];
        for (t, s) in chunk.iter_mut().zip(s) {
            *t = alpha * *t + beta * s;
        }
    });
    Ok(WeightVector {
        values: out,
        layout_id: teacher.layout_id.clone(),
    })
}

/// Teacher weights after `students.len()` EMA steps starting from `w0`,
/// evaluated as `alpha^k w0 + sum_i alpha^(k-i) (1 - alpha) w_i` with `i`
/// ascending.
pub fn ema_closed_form(w0: &WeightVector, students: &[WeightVector], alpha: f64) -> Result<WeightVector> {
    ema_closed_form_with(w0, students, alpha, Exec::Sequential)
}

pub fn ema_closed_form_with(
    w0: &WeightVector,
    students: &[WeightVector],
    alpha: f64,
    exec: Exec,
) -> Result<WeightVector> {
    check_alpha(alpha)?;
    for s in students {
        w0.check_mixable(s)?;
    }
    let k = students.len();
    let coeffs = closed_form_coefficients(alpha, k);
    let mut out = vec![0.0; w0.len()];
    exec.for_each_chunk_mut(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        for (j, slot) in chunk.iter_mut().enumerate() {
            let idx = base + j;
            let mut acc = coeffs[0] * w0.values[idx];
            for (c, s) in coeffs[1..].iter().zip(students) {
                acc += c * s.values[idx];
            }
            *slot = acc;
        }
    });
    Ok(WeightVector {
        values: out,
        layout_id: w0.layout_id.clone(),
    })
}

/// Mixing coefficients `[alpha^k, alpha^(k-1)(1-alpha), ..., (1-alpha)]`.
pub fn closed_form_coefficients(alpha: f64, k: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(k + 1);
    c.push(alpha.powi(k as i32));
    for i in 1..=k {
        c.push(alpha.powi((k - i) as i32) * (1.0 - alpha));
    }
    c
}
