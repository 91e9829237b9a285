//! Exponential-moving-average teacher.
//!
//! `ema_update` is the recursive rule `T ← α·T + (1−α)·S`. `ema_unrolled`
//! evaluates the same teacher in closed form from the whole student history
//! and is used to check the recursion.

use thiserror::Error;

use crate::nn::EncoderParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmaError {
    #[error("teacher layer extents {teacher:?} differ from student {student:?}")]
    ShapeMismatch {
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error("student history is empty")]
    EmptyHistory,
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    teacher: EncoderParams,
    alpha: f64,
    step: u64,
}

impl EmaState {
    pub fn new(teacher: EncoderParams, alpha: f64) -> Result<Self, EmaError> {
        Self::with_step(teacher, alpha, 0)
    }

    pub fn with_step(teacher: EncoderParams, alpha: f64, step: u64) -> Result<Self, EmaError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EmaError::Alpha(alpha));
        }
        Ok(Self {
            teacher,
            alpha,
            step,
        })
    }

    pub fn teacher(&self) -> &EncoderParams {
        &self.teacher
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `p_T ← α·p_T + (1−α)·p_S` for every parameter.
    pub fn update(&mut self, student: &EncoderParams) -> Result<(), EmaError> {
        if !self.teacher.same_dims(student) {
            return Err(EmaError::ShapeMismatch {
                teacher: self.teacher.layer_dims(),
                student: student.layer_dims(),
            });
        }
        let (a, b) = (self.alpha, 1.0 - self.alpha);
        for (t, s) in self.teacher.param_slices_mut().zip(student.param_slices()) {
            for (pt, ps) in t.iter_mut().zip(s) {
                *pt = a * *pt + b * ps;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Teacher after `students.len()` updates starting from `initial`:
/// `(1−α)·Σ_{m=0}^{n} αᵐ·S^{n−m} + α^{n+1}·T⁰`, with `students` ordered `S⁰..Sⁿ`.
pub fn ema_unrolled(
    students: &[EncoderParams],
    initial: &EncoderParams,
    alpha: f64,
) -> Result<EncoderParams, EmaError> {
    let Some(last) = students.last() else {
        return Err(EmaError::EmptyHistory);
    };
    if let Some(bad) = students.iter().find(|s| !s.same_dims(initial)) {
        return Err(EmaError::ShapeMismatch {
            teacher: initial.layer_dims(),
            student: bad.layer_dims(),
        });
    }
    let n = students.len() - 1;
    let flats: Vec<Vec<f64>> = students.iter().map(|s| s.flatten()).collect();
    let t0 = initial.flatten();
    let residual = alpha.powi(n as i32 + 1);
    let mut out = vec![0.0; t0.len()];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for m in 0..=n {
            acc += alpha.powi(m as i32) * flats[n - m][k];
        }
        *o = (1.0 - alpha) * acc + residual * t0[k];
    }
    Ok(EncoderParams::unflatten(&last.layer_dims(), &out).expect("same extents"))
}

/// Share of each past student in the current teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaWeightProfile {
    /// `weights[m]` is the weight of the student `m` steps back, `(1−α)·αᵐ`.
    pub weights: Vec<f64>,
    /// Weight left on the initial teacher, `αⁿ`.
    pub residual: f64,
}

impl EmaWeightProfile {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.residual
    }
}

pub fn ema_weight_profile(alpha: f64, n_steps: usize) -> EmaWeightProfile {
    let weights = (0..n_steps)
        .map(|m| (1.0 - alpha) * alpha.powi(m as i32))
        .collect();
    EmaWeightProfile {
        weights,
        residual: alpha.powi(n_steps as i32),
    }
}

/// Smallest `m` with `(1−α)·αᵐ < threshold`, in closed form.
pub fn steps_until_weight_below(alpha: f64, threshold: f64) -> Option<u64> {
    if !(0.0..1.0).contains(&alpha) || threshold <= 0.0 {
        return None;
    }
    let weight = |m: u64| (1.0 - alpha) * alpha.powi(m as i32);
    let estimate = ((threshold / (1.0 - alpha)).ln() / alpha.ln()).ceil();
    let mut m = if estimate.is_finite() { estimate.max(0.0) as u64 } else { 0 };
    // correct for rounding in the logarithms
    while m > 0 && weight(m - 1) < threshold {
        m -= 1;
    }
    while weight(m) >= threshold {
        m += 1;
    }
    Some(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::{Linear, Mlp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(v: f64) -> Mlp {
        Mlp::from_layers(vec![Linear {
            weight: Tensor::matrix(1, 1, vec![v]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }])
        .unwrap()
    }

    fn weight(p: &Mlp) -> f64 {
        p.flatten()[0]
    }

    #[test]
    fn alpha_one_freezes_teacher() {
        let teacher = Mlp::init_seeded(&[3, 4, 2], 0);
        let student = Mlp::init_seeded(&[3, 4, 2], 1);
        let mut ema = EmaState::new(teacher.clone(), 1.0).unwrap();
        ema.update(&student).unwrap();
        assert_eq!(ema.teacher(), &teacher);
        assert_eq!(ema.step(), 1);
    }

    #[test]
    fn alpha_zero_copies_student() {
        let teacher = Mlp::init_seeded(&[3, 4, 2], 0);
        let student = Mlp::init_seeded(&[3, 4, 2], 1);
        let mut ema = EmaState::new(teacher, 0.0).unwrap();
        ema.update(&student).unwrap();
        assert_eq!(ema.teacher(), &student);
    }

    #[test]
    fn half_alpha_hand_arithmetic() {
        let mut ema = EmaState::new(scalar_params(1.0), 0.5).unwrap();
        ema.update(&scalar_params(0.0)).unwrap();
        assert_eq!(weight(ema.teacher()), 0.5);
    }

    #[test]
    fn update_rejects_shape_mismatch() {
        let mut ema = EmaState::new(Mlp::init_seeded(&[3, 4, 2], 0), 0.9).unwrap();
        let other = Mlp::init_seeded(&[3, 5, 2], 0);
        assert!(matches!(ema.update(&other), Err(EmaError::ShapeMismatch { .. })));
        assert!(EmaState::new(Mlp::zeros(&[1, 1]), 1.5).is_err());
    }

    #[test]
    fn unrolled_single_step_matches_update() {
        let t0 = Mlp::init_seeded(&[3, 4, 2], 0);
        let s0 = Mlp::init_seeded(&[3, 4, 2], 1);
        let mut ema = EmaState::new(t0.clone(), 0.9).unwrap();
        ema.update(&s0).unwrap();
        let direct = ema_unrolled(&[s0], &t0, 0.9).unwrap();
        for (a, b) in direct.flatten().iter().zip(ema.teacher().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unrolled_hand_arithmetic() {
        let out = ema_unrolled(&[scalar_params(1.0), scalar_params(1.0)], &scalar_params(0.0), 0.5).unwrap();
        assert_eq!(weight(&out), 0.75);
        assert_eq!(
            ema_unrolled(&[], &scalar_params(0.0), 0.5),
            Err(EmaError::EmptyHistory)
        );
    }

    #[test]
    fn unrolled_matches_hundred_recursive_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t0 = scalar_params(rng.random_range(-1.0..1.0));
        let students: Vec<Mlp> = (0..100)
            .map(|_| scalar_params(rng.random_range(-1.0..1.0)))
            .collect();
        let mut ema = EmaState::new(t0.clone(), 0.97).unwrap();
        for s in &students {
            ema.update(s).unwrap();
        }
        let unrolled = ema_unrolled(&students, &t0, 0.97).unwrap();
        assert!((weight(&unrolled) - weight(ema.teacher())).abs() < 1e-9);
    }

    #[test]
    fn weight_profile_values() {
        let p = ema_weight_profile(0.999, 10);
        assert!((p.weights[0] - 0.001).abs() < 1e-15);
        let p = ema_weight_profile(0.9, 200);
        assert!((p.total() - 1.0).abs() < 1e-12);
        assert!(p.weights.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn weight_falls_below_one_in_a_million() {
        // brute-force scan as the oracle
        let alpha: f64 = 0.999;
        let mut m = 0u64;
        let mut w = 1.0 - alpha;
        while w >= 1e-6 {
            m += 1;
            w *= alpha;
        }
        assert_eq!(m, 6905);
        assert_eq!(steps_until_weight_below(alpha, 1e-6), Some(m));
    }
}
