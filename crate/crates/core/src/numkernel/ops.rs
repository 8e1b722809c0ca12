//! Value-level versions of the differentiable primitives. The tape in
//! [`super::tape`] implements the same formulas with gradients.

use super::{ProbVector, Tensor};
use crate::error::{Result, SecaError};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;
pub const KL_EPS: f64 = 1e-8;

/// Parameter-free layer normalization with population variance.
pub fn layernorm(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(SecaError::InvalidInput(format!(
            "layernorm needs at least 2 entries, got {}",
            v.len()
        )));
    }
    Ok(layernorm_unchecked(v))
}

pub(crate) fn layernorm_unchecked(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    v.iter().map(|x| (x - mean) * inv).collect()
}

/// `softmax(logits / tau)` with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) {
        return Err(SecaError::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if logits.is_empty() {
        return Err(SecaError::InvalidInput("softmax of empty logits".into()));
    }
    Ok(ProbVector::from_raw(softmax_unchecked(logits, tau)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SecaError::ShapeMismatch(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = super::norm(a);
    let nb = super::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(SecaError::InvalidInput("cosine of a zero-norm vector".into()));
    }
    Ok((super::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cross_entropy(p: &ProbVector, y: usize) -> Result<f64> {
    let probs = p.probs();
    if y >= probs.len() {
        return Err(SecaError::IndexOutOfRange {
            index: y,
            len: probs.len(),
        });
    }
    Ok(-(probs[y] + LOG_CLAMP).ln())
}

/// `Σ t log(t / (s + eps))`, with `0 log 0 = 0`.
pub fn kl_div(teacher: &ProbVector, student: &ProbVector, eps: f64) -> Result<f64> {
    let (t, s) = (teacher.probs(), student.probs());
    if t.len() != s.len() {
        return Err(SecaError::ShapeMismatch(format!(
            "kl_div lengths {} and {}",
            t.len(),
            s.len()
        )));
    }
    Ok(t.iter()
        .zip(s)
        .filter(|(&ti, _)| ti > 0.0)
        .map(|(&ti, &si)| ti * (ti / (si + eps)).ln())
        .sum())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = super::norm(v);
    if n == 0.0 {
        return Err(SecaError::InvalidInput("normalizing a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise L2 normalization of a matrix; fails on any zero row.
pub fn normalize_rows(m: &Tensor) -> Result<Tensor> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = super::norm(m.row(i));
        if n == 0.0 {
            return Err(SecaError::InvalidInput(format!("row {i} has zero norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn layernorm_examples() {
        assert_eq!(layernorm(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0; 4]);
        let y = layernorm(&[1.0, -1.0]).unwrap();
        // var = 1, so the stabilizer shows up only in the 6th digit
        assert!(close(y[0], 1.0, 1e-5) && close(y[1], -1.0, 1e-5));
        assert!(layernorm(&[3.0]).is_err());
    }

    #[test]
    fn layernorm_matches_direct_formula() {
        // mean 0.5, population variance 0.75
        let y = layernorm(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        let s = (0.75f64 + 1e-5).sqrt();
        let expect = [1.5 / s, -0.5 / s, -0.5 / s, -0.5 / s];
        for (a, b) in y.iter().zip(expect) {
            assert!(close(*a, b, 1e-15));
        }
        // frozen: 1.5/sqrt(0.75001) and -0.5/sqrt(0.75001)
        assert!(close(y[0], 1.732_039_260_678_962_3, 1e-12));
        assert!(close(y[1], -0.577_346_420_226_320_8, 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0, 0.0, 0.0], 0.37).unwrap();
        for v in p.probs() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let p = softmax_temp(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(p.probs()[0], 2.0 / 3.0, 1e-15));
        // softmax(0.05, 0) = 1/(1+e^-0.05)
        let p = softmax_temp(&[1.0, 0.0], 20.0).unwrap();
        assert!(close(p.probs()[0], 0.512_497_396_484_210_3, 1e-15));
        assert!(close(p.probs()[1], 0.487_502_603_515_789_7, 1e-15));
        assert!(matches!(
            softmax_temp(&[1.0], 0.0),
            Err(SecaError::InvalidConfig(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine_sim(&[3.0, 4.0], &[4.0, 3.0]).unwrap(), 24.0 / 25.0, 1e-15));
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = ProbVector::new(vec![0.0, 1.0]).unwrap();
        assert!(close(cross_entropy(&one_hot, 1).unwrap(), 0.0, 1e-11));
        let uni = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!(close(cross_entropy(&uni, 2).unwrap(), 4f64.ln(), 1e-11));
        let p = ProbVector::new(vec![0.7, 0.3]).unwrap();
        assert!(close(cross_entropy(&p, 1).unwrap(), -(0.3f64.ln()), 1e-11));
        assert!(cross_entropy(&p, 2).is_err());
    }

    #[test]
    fn kl_examples() {
        let t = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(kl_div(&t, &t, KL_EPS).unwrap().abs() < 1e-7);
        assert!(kl_div(&t, &t, 0.0).unwrap().abs() < 1e-15);
        let t = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let s = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!(close(kl_div(&t, &s, 0.0).unwrap(), 2f64.ln(), 1e-15));
        let short = ProbVector::new(vec![1.0]).unwrap();
        assert!(kl_div(&t, &short, KL_EPS).is_err());
    }

    #[test]
    fn kl_random_pair_matches_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let raw_t: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.01).collect();
        let raw_s: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.01).collect();
        let zt: f64 = raw_t.iter().sum();
        let zs: f64 = raw_s.iter().sum();
        let t: Vec<f64> = raw_t.iter().map(|v| v / zt).collect();
        let s: Vec<f64> = raw_s.iter().map(|v| v / zs).collect();
        // oracle: log-difference form, summed in reverse order
        let mut oracle = 0.0;
        for i in (0..5).rev() {
            oracle += t[i] * (t[i].ln() - (s[i] + KL_EPS).ln());
        }
        let got = kl_div(
            &ProbVector::new(t).unwrap(),
            &ProbVector::new(s).unwrap(),
            KL_EPS,
        )
        .unwrap();
        assert!(close(got, oracle, 1e-14));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), fd, 1e-8), "x={x}");
        }
    }
}
