//! Exponential-moving-average teacher over the segmenter parameters:
//! `teacher = beta * teacher + (1 - beta) * student` per update.

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct TeacherState<F: Real> {
    pub params: ParamSet<F>,
    pub beta: f64,
    pub step_count: u64,
}

/// Teacher starts as an exact copy of the student.
pub fn ema_init<F: Real>(student: &ParamSet<F>, beta: f64) -> TeacherState<F> {
    let mut params = student.clone();
    params.zero_grads();
    TeacherState {
        params,
        beta,
        step_count: 0,
    }
}

/// Elementwise EMA update; order-independent across parameters.
pub fn ema_update<F: Real>(teacher: &mut TeacherState<F>, student: &ParamSet<F>) -> Result<()> {
    if !teacher.params.layout_matches(student) {
        return Err(Error::shape(
            "ema_update",
            "teacher layout matching student".to_string(),
            "mismatched parameter collections".to_string(),
        ));
    }
    let beta = F::of(teacher.beta);
    let one_minus = F::of(1.0 - teacher.beta);
    for i in 0..student.len() {
        let s = student.tensor(i).data().to_vec();
        let t = teacher.params.tensor_mut(i).data_mut();
        for (tv, sv) in t.iter_mut().zip(s) {
            *tv = beta * *tv + one_minus * sv;
        }
    }
    teacher.step_count += 1;
    Ok(())
}
