//! Per-class Gaussian feature statistics for rehearsal without raw data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SecaError};
use crate::numkernel::{fnv_step, Graph, Tensor, Var};
use crate::sevpr::loss_ce_v_tape;
use crate::encoder::clip_logits_tape;

/// Lower bound applied to every variance (or covariance eigenvalue).
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Full covariance with its floored symmetric square root.
    Full { cov: Tensor, sqrt: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    pub cov: Covariance,
    pub count: usize,
}

impl ClassGaussian {
    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        match &self.cov {
            Covariance::Diagonal(var) => {
                for j in 0..d {
                    out[j] = self.mean[j] + var[j].sqrt() * z[j];
                }
            }
            Covariance::Full { sqrt, .. } => {
                for j in 0..d {
                    let mut v = self.mean[j];
                    for (k, zk) in z.iter().enumerate() {
                        v += sqrt.get(j, k) * zk;
                    }
                    out[j] = v;
                }
            }
        }
    }
}

/// `V diag(sqrt(max(λ, floor))) Vᵀ` for a symmetric matrix.
pub fn floored_sqrt(cov: &Tensor) -> Result<Tensor> {
    let d = cov.rows();
    if cov.cols() != d {
        return Err(SecaError::ShapeMismatch(format!("covariance {:?}", cov.shape())));
    }
    let m = DMatrix::from_row_slice(d, d, cov.data());
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(VAR_FLOOR).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    let mut out = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, s[(i, j)]);
        }
    }
    Ok(out)
}

/// Class-wise Gaussians; classes are added once and never refitted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayStore {
    pub(crate) classes: BTreeMap<usize, ClassGaussian>,
    pub(crate) full_covariance: bool,
}

impl ReplayStore {
    pub fn new(full_covariance: bool) -> Self {
        ReplayStore {
            classes: BTreeMap::new(),
            full_covariance,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn full_covariance(&self) -> bool {
        self.full_covariance
    }

    pub fn get(&self, class: usize) -> Option<&ClassGaussian> {
        self.classes.get(&class)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    /// Fits one Gaussian per class in `classes` from the rows of `feats`.
    /// Unbiased variances, floored; a single sample gets the floor.
    pub fn fit(&mut self, feats: &Tensor, labels: &[usize], classes: &[usize]) -> Result<()> {
        if labels.len() != feats.rows() {
            return Err(SecaError::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                feats.rows()
            )));
        }
        let d = feats.cols();
        let mut fitted = Vec::with_capacity(classes.len());
        for &c in classes {
            if self.classes.contains_key(&c) {
                return Err(SecaError::ProtocolViolation(format!("class {c} already in replay store")));
            }
            let rows: Vec<&[f64]> = (0..feats.rows())
                .filter(|&i| labels[i] == c)
                .map(|i| feats.row(i))
                .collect();
            let n = rows.len();
            if n == 0 {
                return Err(SecaError::MissingClass(c));
            }
            let mut mean = vec![0.0; d];
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(*r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let denom = n.saturating_sub(1).max(1) as f64;
            let cov = if self.full_covariance {
                let mut cov = Tensor::zeros(&[d, d]);
                if n > 1 {
                    for r in &rows {
                        for i in 0..d {
                            let di = r[i] - mean[i];
                            for j in 0..d {
                                let v = cov.get(i, j) + di * (r[j] - mean[j]) / denom;
                                cov.set(i, j, v);
                            }
                        }
                    }
                }
                let sqrt = floored_sqrt(&cov)?;
                Covariance::Full { cov, sqrt }
            } else {
                let mut var = vec![0.0; d];
                if n > 1 {
                    for r in &rows {
                        for j in 0..d {
                            var[j] += (r[j] - mean[j]).powi(2);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= denom);
                }
                var.iter_mut().for_each(|v| *v = v.max(VAR_FLOOR));
                Covariance::Diagonal(var)
            };
            fitted.push((c, ClassGaussian { mean, cov, count: n }));
        }
        self.classes.extend(fitted);
        Ok(())
    }

    /// `n` draws for one class from a dedicated seeded generator.
    pub fn sample(&self, class: usize, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(class, n, &mut rng)
    }

    pub fn sample_with(&self, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let g = self.classes.get(&class).ok_or(SecaError::UnknownClass(class))?;
        let d = g.mean.len();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            g.draw(rng, out.row_mut(i));
        }
        Ok(out)
    }

    /// Mixed pseudo batch: each draw picks a stored class uniformly.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
        if self.classes.is_empty() {
            return Err(SecaError::InvalidInput("replay store is empty".into()));
        }
        let ids = self.class_ids();
        let d = self.classes[&ids[0]].mean.len();
        let mut out = Tensor::zeros(&[n, d]);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = ids[rng.random_range(0..ids.len())];
            self.classes[&c].draw(rng, out.row_mut(i));
            labels.push(c);
        }
        Ok((out, labels))
    }

    pub fn checksum(&self) -> u64 {
        self.classes.iter().fold(0x6a55, |h, (c, g)| {
            let h = fnv_step(h, *c as u64);
            let h = g.mean.iter().fold(h, |h, v| fnv_step(h, v.to_bits()));
            match &g.cov {
                Covariance::Diagonal(v) => v.iter().fold(h, |h, x| fnv_step(h, x.to_bits())),
                Covariance::Full { cov, .. } => fnv_step(h, cov.checksum()),
            }
        })
    }
}

/// Cross-entropies of pseudo features over the joint class set:
/// text-side against `text` rows and, when given, visual-side against
/// `protos` rows. `labels` index those rows. Empty batches give zeros.
pub fn replay_losses_tape(
    g: &mut Graph,
    pseudo: &Tensor,
    labels: &[usize],
    text: Var,
    protos: Option<Var>,
    tau: f64,
) -> Result<(Var, Var)> {
    if pseudo.rows() == 0 || pseudo.is_empty() {
        let a = g.constant(Tensor::zeros(&[1, 1]))?;
        let b = g.constant(Tensor::zeros(&[1, 1]))?;
        return Ok((a, b));
    }
    let f = g.constant(pseudo.clone())?;
    let logits = clip_logits_tape(g, f, text, tau)?;
    let ce_t = g.cross_entropy_logits(logits, labels)?;
    let ce_v = match protos {
        Some(c) => loss_ce_v_tape(g, f, c, labels, tau)?,
        None => g.constant(Tensor::zeros(&[1, 1]))?,
    };
    Ok((ce_t, ce_v))
}

/// Value-level form of [`replay_losses_tape`].
pub fn replay_losses(pseudo: &Tensor, labels: &[usize], text: &Tensor, protos: Option<&Tensor>, tau: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let t = g.constant(text.clone())?;
    let c = protos.map(|p| g.constant(p.clone())).transpose()?;
    let (a, b) = replay_losses_tape(&mut g, pseudo, labels, t, c, tau)?;
    Ok((g.scalar(a), g.scalar(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_features_get_the_floor() {
        let feats = Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0]; 5]).unwrap();
        let mut store = ReplayStore::new(false);
        store.fit(&feats, &[3; 5], &[3]).unwrap();
        let g = store.get(3).unwrap();
        assert_eq!(g.mean, vec![0.5, -1.0, 2.0]);
        assert_eq!(g.cov, Covariance::Diagonal(vec![VAR_FLOOR; 3]));
        assert!(matches!(store.fit(&feats, &[3; 5], &[3]), Err(SecaError::ProtocolViolation(_))));
        assert!(matches!(store.fit(&feats, &[3; 5], &[4]), Err(SecaError::MissingClass(4))));
    }

    #[test]
    fn two_sample_statistics() {
        let a = [1.0, 4.0, -2.0];
        let b = [3.0, 0.0, -2.5];
        let feats = Tensor::from_rows(&[a.to_vec(), b.to_vec()]).unwrap();
        let mut store = ReplayStore::new(false);
        store.fit(&feats, &[0, 0], &[0]).unwrap();
        let g = store.get(0).unwrap();
        let Covariance::Diagonal(var) = &g.cov else { panic!() };
        for j in 0..3 {
            assert!((g.mean[j] - (a[j] + b[j]) / 2.0).abs() < 1e-15);
            assert!((var[j] - (a[j] - b[j]).powi(2) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fitted_mean_matches_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth = [0.3, -1.2, 2.0, 0.0];
        let sd = [0.5, 1.0, 2.0, 0.1];
        let n = 1000;
        let mut rows = Vec::new();
        for _ in 0..n {
            rows.push(
                (0..4)
                    .map(|j| Normal::new(truth[j], sd[j]).unwrap().sample(&mut rng))
                    .collect::<Vec<f64>>(),
            );
        }
        let mut store = ReplayStore::new(false);
        store.fit(&Tensor::from_rows(&rows).unwrap(), &vec![0; n], &[0]).unwrap();
        let g = store.get(0).unwrap();
        let Covariance::Diagonal(var) = &g.cov else { panic!() };
        for j in 0..4 {
            assert!((g.mean[j] - truth[j]).abs() < 3.0 * sd[j] / (n as f64).sqrt());
            assert!((var[j] - sd[j] * sd[j]).abs() / (sd[j] * sd[j]) < 0.15);
        }
    }

    #[test]
    fn sampling_examples() {
        let feats = Tensor::from_rows(&vec![vec![1.0, 2.0]; 3]).unwrap();
        let mut store = ReplayStore::new(false);
        store.fit(&feats, &[5; 3], &[5]).unwrap();
        let s = store.sample(5, 10, 3).unwrap();
        assert!(s.data().chunks(2).all(|r| (r[0] - 1.0).abs() < 3e-3 && (r[1] - 2.0).abs() < 3e-3));
        assert_eq!(s, store.sample(5, 10, 3).unwrap());
        assert!(matches!(store.sample(6, 1, 0), Err(SecaError::UnknownClass(6))));
    }

    #[test]
    fn empirical_moments_of_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7 + 1.0).collect())
            .collect();
        for full in [false, true] {
            let mut store = ReplayStore::new(full);
            store.fit(&Tensor::from_rows(&rows).unwrap(), &[1; 50], &[1]).unwrap();
            let g = store.get(1).unwrap().clone();
            let n = 10_000;
            let s = store.sample(1, n, 99).unwrap();
            for j in 0..3 {
                let var_j = match &g.cov {
                    Covariance::Diagonal(v) => v[j],
                    Covariance::Full { cov, .. } => cov.get(j, j),
                };
                let col: Vec<f64> = (0..n).map(|i| s.get(i, j)).collect();
                let m = col.iter().sum::<f64>() / n as f64;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se_mean = (var_j / n as f64).sqrt();
                let se_var = var_j * (2.0 / (n - 1) as f64).sqrt();
                assert!((m - g.mean[j]).abs() < 3.0 * se_mean, "full={full} j={j}");
                assert!((v - var_j).abs() < 3.0 * se_var, "full={full} j={j}");
            }
        }
    }

    #[test]
    fn floored_sqrt_squares_back() {
        let cov = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let s = floored_sqrt(&cov).unwrap();
        let back = s.matmul(&s);
        for (a, b) in back.data().iter().zip(cov.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let singular = Tensor::zeros(&[2, 2]);
        let s = floored_sqrt(&singular).unwrap();
        assert!((s.get(0, 0) - VAR_FLOOR.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn replay_loss_examples() {
        let text = Tensor::identity(3);
        let empty = Tensor::zeros(&[0, 3]);
        assert_eq!(replay_losses(&empty, &[], &text, Some(&text), 0.01).unwrap(), (0.0, 0.0));

        // separable store: each mean sits on its own class axis
        let feats = Tensor::from_rows(&[vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let mut store = ReplayStore::new(false);
        store.fit(&feats, &[1, 2], &[1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pseudo, labels) = store.sample_batch(8, &mut rng).unwrap();
        let (t, v) = replay_losses(&pseudo, &labels, &text, Some(&text), 0.01).unwrap();
        assert!(t < 1e-6 && v < 1e-6, "{t} {v}");
    }
}
