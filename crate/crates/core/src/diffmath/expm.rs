//! Differentiable exponential of a skew-symmetric matrix.
//!
//! `U = exp(P - P^T)` by scaling and squaring: the generator is scaled by
//! `2^-s` until its 1-norm is at most 0.5, an 18-term Taylor series is summed
//! in Horner form, and the result is squared `s` times. Every step is an
//! ordinary tape op, so gradients w.r.t. `P` come from composition.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Number of Taylor terms (powers 0 through 17).
pub const TAYLOR_TERMS: usize = 18;

/// Generator 1-norm reached before the series is summed.
pub const SCALED_NORM: f64 = 0.5;

/// Max absolute column sum.
pub fn norm_one<T: Real>(a: &Tensor<T>) -> T {
    (0..a.cols())
        .map(|c| (0..a.rows()).map(|r| a.get(r, c).abs()).sum::<T>())
        .fold(T::zero(), T::max)
}

/// Smallest `s >= 0` with `norm / 2^s <= 0.5`.
pub fn squaring_steps(norm: f64) -> u32 {
    let mut s = 0;
    let mut scaled = norm;
    while scaled > SCALED_NORM && s < 64 {
        scaled *= 0.5;
        s += 1;
    }
    s
}

impl<T: Real> Tape<T> {
    /// `exp(P - P^T)`; the result is orthogonal with unit determinant.
    pub fn matrix_exp_skew(&mut self, p: Var) -> Result<Var> {
        let (r, c) = self.shape(p);
        if r != c {
            return Err(Error::Dimension {
                op: "matrix_exp_skew",
                left: (r, c),
                right: (c, r),
            });
        }
        let pt = self.transpose(p);
        let a = self.sub(p, pt)?;
        self.matrix_exp(a)
    }

    /// Scaling-and-squaring Taylor exponential of any square matrix.
    pub fn matrix_exp(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if n != c {
            return Err(Error::Dimension {
                op: "matrix_exp",
                left: (n, c),
                right: (c, n),
            });
        }
        let s = squaring_steps(norm_one(self.value(a)).as_f64());
        let b = if s > 0 {
            self.scale(a, T::lit(0.5f64.powi(s as i32)))
        } else {
            a
        };
        let eye = self.constant(Tensor::identity(n));

        // Horner: T_j = I + (B T_{j+1}) / j, starting from T = I.
        let mut acc = eye;
        for j in (1..TAYLOR_TERMS).rev() {
            let bt = self.matmul(b, acc)?;
            let scaled = self.scale(bt, T::one() / T::lit(j as f64));
            acc = self.add(eye, scaled)?;
        }
        for _ in 0..s {
            acc = self.matmul(acc, acc)?;
        }
        Ok(acc)
    }
}

/// Non-differentiable convenience: `exp(P - P^T)`.
pub fn skew_exp<T: Real>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let u = tape.matrix_exp_skew(pv)?;
    Ok(tape.value(u).clone())
}

/// `max |(U^T U - I)_ij|`.
pub fn orthogonality_defect<T: Real>(u: &Tensor<T>) -> f64 {
    let u64 = u.cast::<f64>();
    let utu = u64.transpose().matmul(&u64).expect("square");
    utu.max_abs_diff(&Tensor::identity(u.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::linalg::determinant;

    #[test]
    fn zero_generator_gives_identity_exactly() {
        let u = skew_exp(&Tensor::<f64>::zeros(5, 5)).unwrap();
        assert_eq!(u, Tensor::identity(5));
        let u = skew_exp(&Tensor::<f32>::zeros(3, 3)).unwrap();
        assert_eq!(u, Tensor::identity(3));
    }

    #[test]
    fn two_by_two_is_a_rotation() {
        let theta = std::f64::consts::FRAC_PI_2;
        let p = Tensor::from_vec(2, 2, vec![0.0, theta, 0.0, 0.0]).unwrap();
        let u = skew_exp(&p).unwrap();
        let want = Tensor::from_vec(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        assert!(u.max_abs_diff(&want) < 1e-10);

        for theta in [0.1, 1.3, 2.9, 7.5] {
            let p = Tensor::from_vec(2, 2, vec![0.0, theta, 0.0, 0.0]).unwrap();
            let u = skew_exp(&p).unwrap();
            let (s, c) = f64::sin_cos(theta);
            let want = Tensor::from_vec(2, 2, vec![c, s, -s, c]).unwrap();
            assert!(u.max_abs_diff(&want) < 1e-10, "theta {theta}");
        }
    }

    #[test]
    fn non_square_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(tape.matrix_exp_skew(p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn squaring_steps_reach_target_norm() {
        assert_eq!(squaring_steps(0.0), 0);
        assert_eq!(squaring_steps(0.5), 0);
        assert_eq!(squaring_steps(0.51), 1);
        assert_eq!(squaring_steps(4.0), 3);
    }

    #[test]
    fn random_generators_are_special_orthogonal() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for scale in [0.1, 1.0, 10.0] {
            let p = Tensor::from_fn(8, 8, |_, _| (2.0 * next() - 1.0) * scale);
            let u = skew_exp(&p).unwrap();
            assert!(orthogonality_defect(&u) < 1e-8, "scale {scale}");
            assert!((determinant(&u) - 1.0).abs() < 1e-8, "scale {scale}");
        }
    }
}
