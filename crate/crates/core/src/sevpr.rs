//! Visual prototypes refined through text-side class affinities, the
//! visual-side classifier they induce, and the ablation classifiers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{clip_logits, clip_logits_tape, FrozenEncoder};
use crate::error::{Result, SecaError};
use crate::numkernel::ops::softmax_unchecked;
use crate::numkernel::{fnv_step, Graph, ProbVector, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierVariant {
    OnlyText,
    CentroidClip,
    CentroidAdapted,
    Linear,
    Sevpr,
}

impl ClassifierVariant {
    pub const ALL: [ClassifierVariant; 5] = [
        ClassifierVariant::OnlyText,
        ClassifierVariant::CentroidClip,
        ClassifierVariant::CentroidAdapted,
        ClassifierVariant::Linear,
        ClassifierVariant::Sevpr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierVariant::OnlyText => "only_text",
            ClassifierVariant::CentroidClip => "centroid_clip",
            ClassifierVariant::CentroidAdapted => "centroid_adapted",
            ClassifierVariant::Linear => "linear",
            ClassifierVariant::Sevpr => "sevpr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SecaError::InvalidConfig(format!("unknown classifier variant {s:?}")))
    }
}

/// Per-class prototype state. Raw prototypes are written once; the
/// snapshot is replaced only at task boundaries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeBank {
    pub(crate) raw: BTreeMap<usize, Vec<f64>>,
    pub(crate) counts: BTreeMap<usize, usize>,
    pub(crate) adapted: BTreeMap<usize, Vec<f64>>,
    pub(crate) current: BTreeMap<usize, Vec<f64>>,
    pub(crate) snapshot: BTreeMap<usize, Vec<f64>>,
}

fn class_means(
    feats: &Tensor,
    labels: &[usize],
    classes: &[usize],
) -> Result<(BTreeMap<usize, Vec<f64>>, BTreeMap<usize, usize>)> {
    if labels.len() != feats.rows() {
        return Err(SecaError::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            feats.rows()
        )));
    }
    let d = feats.cols();
    let mut sums: BTreeMap<usize, Vec<f64>> = classes.iter().map(|&c| (c, vec![0.0; d])).collect();
    let mut counts: BTreeMap<usize, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for (i, y) in labels.iter().enumerate() {
        if let Some(s) = sums.get_mut(y) {
            for (a, b) in s.iter_mut().zip(feats.row(i)) {
                *a += b;
            }
            *counts.get_mut(y).expect("same keys") += 1;
        }
    }
    for (&c, s) in sums.iter_mut() {
        let n = counts[&c];
        if n == 0 {
            return Err(SecaError::MissingClass(c));
        }
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((sums, counts))
}

fn rows_of(map: &BTreeMap<usize, Vec<f64>>, classes: &[usize], missing: fn(usize) -> SecaError) -> Result<Tensor> {
    let rows = classes
        .iter()
        .map(|c| map.get(c).cloned().ok_or(missing(*c)))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(SecaError::InvalidInput("no classes".into()));
    }
    Tensor::from_rows(&rows)
}

fn map_checksum(map: &BTreeMap<usize, Vec<f64>>) -> u64 {
    map.iter().fold(0xc1a55, |h, (c, v)| {
        v.iter()
            .fold(fnv_step(h, *c as u64), |h, x| fnv_step(h, x.to_bits()))
    })
}

impl PrototypeBank {
    pub fn new() -> Self {
        PrototypeBank::default()
    }

    /// Writes adapter-free class means for classes seen for the first time.
    pub fn add_raw(&mut self, enc: &FrozenEncoder, xs: &Tensor, labels: &[usize], classes: &[usize]) -> Result<()> {
        let feats = enc.visual_features(xs, None)?;
        self.add_raw_features(&feats, labels, classes)
    }

    /// As [`Self::add_raw`] but from already-encoded adapter-free features.
    pub fn add_raw_features(&mut self, feats: &Tensor, labels: &[usize], classes: &[usize]) -> Result<()> {
        if let Some(c) = classes.iter().find(|c| self.raw.contains_key(c)) {
            return Err(SecaError::ProtocolViolation(format!(
                "class {c} already has a raw prototype"
            )));
        }
        let (means, counts) = class_means(feats, labels, classes)?;
        self.raw.extend(means);
        self.counts.extend(counts);
        Ok(())
    }

    /// Replaces the adapted-feature centroids of `classes`.
    pub fn set_adapted_centroids(&mut self, feats: &Tensor, labels: &[usize], classes: &[usize]) -> Result<()> {
        let (means, _) = class_means(feats, labels, classes)?;
        self.adapted.extend(means);
        Ok(())
    }

    pub fn raw_matrix(&self, classes: &[usize]) -> Result<Tensor> {
        rows_of(&self.raw, classes, SecaError::MissingClass)
    }

    pub fn adapted_matrix(&self, classes: &[usize]) -> Result<Tensor> {
        rows_of(&self.adapted, classes, SecaError::MissingClass)
    }

    pub fn snapshot_matrix(&self, classes: &[usize]) -> Result<Tensor> {
        rows_of(&self.snapshot, classes, SecaError::MissingSnapshot)
    }

    pub fn current_matrix(&self, classes: &[usize]) -> Result<Tensor> {
        rows_of(&self.current, classes, SecaError::MissingClass)
    }

    pub fn count(&self, class: usize) -> Option<usize> {
        self.counts.get(&class).copied()
    }

    /// Records the latest refined prototypes, one row per class.
    pub fn set_current(&mut self, classes: &[usize], refined: &Tensor) -> Result<()> {
        if refined.rows() != classes.len() {
            return Err(SecaError::ShapeMismatch(format!(
                "{} refined rows for {} classes",
                refined.rows(),
                classes.len()
            )));
        }
        for (i, &c) in classes.iter().enumerate() {
            self.current.insert(c, refined.row(i).to_vec());
        }
        Ok(())
    }

    /// Copies the current refined prototypes into the snapshot.
    pub fn snapshot_prototypes(&mut self) {
        self.snapshot = self.current.clone();
    }

    pub fn raw_checksum(&self) -> u64 {
        map_checksum(&self.raw)
    }

    pub fn snapshot_checksum(&self) -> u64 {
        map_checksum(&self.snapshot)
    }

    pub fn raw_classes(&self) -> Vec<usize> {
        self.raw.keys().copied().collect()
    }
}

/// Trainable affinity projection and its kernel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityModel {
    pub h: Tensor,
    pub gamma: f64,
}

impl AffinityModel {
    /// `h = scale · I`.
    pub fn new(d_t: usize, scale: f64, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(AffinityModel {
            h: Tensor::identity(d_t).map(|v| v * scale),
            gamma,
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(SecaError::InvalidConfig(format!(
            "affinity scale must be finite and >= 0, got {gamma}"
        )));
    }
    Ok(())
}

/// `M[k, j] = exp(-γ ‖LN(z_k) H − LN(z_j) H‖²)`.
pub fn affinity_tape(g: &mut Graph, z: Var, h: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    if g.value(z).rows() == 0 {
        return Err(SecaError::InvalidInput("affinity over no classes".into()));
    }
    let ln = g.layernorm_rows(z)?;
    let q = g.matmul(ln, h)?;
    let d = g.pairwise_sqdist(q)?;
    let scaled = g.scale(d, -gamma)?;
    g.exp(scaled)
}

/// Row-stochastic mixing of the raw prototypes by `M`.
pub fn refine_tape(g: &mut Graph, m: Var, raw: Var) -> Result<Var> {
    let (mv, rv) = (g.value(m), g.value(raw));
    if mv.rows() != mv.cols() || mv.cols() != rv.rows() {
        return Err(SecaError::ShapeMismatch(format!(
            "affinity {:?} against {} prototypes",
            mv.shape(),
            rv.rows()
        )));
    }
    let mn = g.row_normalize(m)?;
    g.matmul(mn, raw)
}

/// Cross-entropy of the visual-side classifier over the prototype rows.
pub fn loss_ce_v_tape(g: &mut Graph, feats: Var, protos: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let logits = clip_logits_tape(g, feats, protos, tau)?;
    g.cross_entropy_logits(logits, labels)
}

/// Mean squared distance between the first `snapshot.rows()` refined rows
/// and the snapshot. Zero when there are no old classes.
pub fn loss_reg_tape(g: &mut Graph, refined: Var, snapshot: &Tensor) -> Result<Var> {
    let n_old = snapshot.rows();
    if snapshot.is_empty() || n_old == 0 {
        return g.constant(Tensor::zeros(&[1, 1]));
    }
    if g.value(refined).rows() < n_old || g.value(refined).cols() != snapshot.cols() {
        return Err(SecaError::ShapeMismatch(format!(
            "refined {:?} against snapshot {:?}",
            g.value(refined).shape(),
            snapshot.shape()
        )));
    }
    let idx: Vec<usize> = (0..n_old).collect();
    let old = g.gather_rows(refined, &idx)?;
    let snap = g.constant(snapshot.clone())?;
    let diff = g.sub(old, snap)?;
    let ss = g.sum_sq(diff)?;
    g.scale(ss, 1.0 / n_old as f64)
}

/// Value-level affinity matrix.
pub fn affinity_matrix(z: &Tensor, h: &Tensor, gamma: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone())?;
    let hv = g.constant(h.clone())?;
    let m = affinity_tape(&mut g, zv, hv, gamma)?;
    Ok(g.value(m).clone())
}

/// Value-level refinement.
pub fn refine_prototypes(m: &Tensor, raw: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mv = g.constant(m.clone())?;
    let rv = g.constant(raw.clone())?;
    let out = refine_tape(&mut g, mv, rv)?;
    Ok(g.value(out).clone())
}

/// Softmax over cosine similarities to each prototype row, at `tau`.
pub fn visual_prob(feature: &[f64], protos: &Tensor, tau: f64) -> Result<ProbVector> {
    let f = Tensor::matrix(1, feature.len(), feature.to_vec())?;
    let logits = clip_logits(&f, protos, tau)?;
    Ok(ProbVector::from_raw(softmax_unchecked(logits.row(0), 1.0)))
}

pub fn loss_ce_v(feats: &Tensor, protos: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(feats.clone())?;
    let p = g.constant(protos.clone())?;
    let l = loss_ce_v_tape(&mut g, f, p, labels, tau)?;
    Ok(g.scalar(l))
}

pub fn loss_reg(refined: &Tensor, snapshot: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(refined.clone())?;
    let l = loss_reg_tape(&mut g, r, snapshot)?;
    Ok(g.scalar(l))
}

/// Affine head over adapted features, one block of columns per task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearHead {
    pub blocks: Vec<(Tensor, Tensor)>,
}

impl LinearHead {
    pub fn grow(&mut self, d: usize, classes: usize) {
        self.blocks
            .push((Tensor::zeros(&[d, classes]), Tensor::zeros(&[1, classes])));
    }

    pub fn num_classes(&self) -> usize {
        self.blocks.iter().map(|(_, b)| b.cols()).sum()
    }

    pub fn logits(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(feats.clone())?;
        let vars = self
            .blocks
            .iter()
            .map(|(w, b)| Ok((g.constant(w.clone())?, g.constant(b.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let l = linear_logits_tape(&mut g, f, &vars)?;
        Ok(g.value(l).clone())
    }
}

/// Concatenated logits of the given head blocks.
pub fn linear_logits_tape(g: &mut Graph, feats: Var, blocks: &[(Var, Var)]) -> Result<Var> {
    if blocks.is_empty() {
        return Err(SecaError::InvalidInput("linear head has no classes".into()));
    }
    let parts = blocks
        .iter()
        .map(|&(w, b)| {
            let z = g.matmul(feats, w)?;
            g.add_row(z, b)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat_cols(&parts)
    }
}

/// Everything a classifier branch may consult for one sample, with class
/// rows in a shared order.
#[derive(Clone, Copy)]
pub struct ClassifierInputs<'a> {
    pub adapted: &'a [f64],
    /// Prompt-averaged text probabilities.
    pub text_avg: &'a ProbVector,
    pub raw: &'a Tensor,
    pub refined: &'a Tensor,
    pub adapted_centroids: &'a Tensor,
    pub linear: &'a LinearHead,
    pub tau: f64,
}

/// Probability vector of one classifier's own branch. `OnlyText` returns
/// the text term; every other variant returns its visual-side term.
pub fn classifier_variant(kind: ClassifierVariant, inp: &ClassifierInputs<'_>) -> Result<ProbVector> {
    match kind {
        ClassifierVariant::OnlyText => Ok(inp.text_avg.clone()),
        ClassifierVariant::CentroidClip => visual_prob(inp.adapted, inp.raw, inp.tau),
        ClassifierVariant::CentroidAdapted => visual_prob(inp.adapted, inp.adapted_centroids, inp.tau),
        ClassifierVariant::Sevpr => visual_prob(inp.adapted, inp.refined, inp.tau),
        ClassifierVariant::Linear => {
            let f = Tensor::matrix(1, inp.adapted.len(), inp.adapted.to_vec())?;
            let logits = inp.linear.logits(&f)?;
            Ok(ProbVector::from_raw(softmax_unchecked(logits.row(0), 1.0)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{gaussian, ClassTokenTable, EncoderConfig};
    use crate::numkernel::ops::{cosine_sim, layernorm, softmax_temp};
    use crate::numkernel::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn encoder() -> FrozenEncoder {
        let cfg = EncoderConfig {
            d_v: 6,
            d_t: 6,
            layers: 2,
            width: 2,
            prompt_tokens: 2,
            seed: 5,
        };
        FrozenEncoder::new(cfg, ClassTokenTable::generate(4, 6, 1, None, 0.0)).unwrap()
    }

    #[test]
    fn raw_prototype_examples() {
        let enc = encoder();
        let mut r = rng(1);
        let xs = gaussian(&mut r, &[3, 6], 1.0);
        let mut bank = PrototypeBank::new();
        bank.add_raw(&enc, &xs, &[0, 1, 2], &[0, 1, 2]).unwrap();
        let feats = enc.visual_features(&xs, None).unwrap();
        assert_eq!(bank.raw_matrix(&[0, 1, 2]).unwrap(), feats);

        let dup = Tensor::from_rows(&vec![xs.row(0).to_vec(); 4]).unwrap();
        let mut b2 = PrototypeBank::new();
        b2.add_raw(&enc, &dup, &[3; 4], &[3]).unwrap();
        let once = enc.visual_forward(xs.row(0), None).unwrap();
        for (a, b) in b2.raw_matrix(&[3]).unwrap().data().iter().zip(&once) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            bank.add_raw(&enc, &xs, &[0, 1, 2], &[2]),
            Err(SecaError::ProtocolViolation(_))
        ));
        let mut b3 = PrototypeBank::new();
        assert!(matches!(
            b3.add_raw(&enc, &xs, &[0, 0, 0], &[0, 1]),
            Err(SecaError::MissingClass(1))
        ));
    }

    #[test]
    fn raw_prototypes_match_mean_oracle() {
        let mut r = rng(2);
        let feats = gaussian(&mut r, &[30, 5], 1.0);
        let labels: Vec<usize> = (0..30).map(|i| (i * 7) % 3).collect();
        let mut bank = PrototypeBank::new();
        bank.add_raw_features(&feats, &labels, &[0, 1, 2]).unwrap();
        for c in 0..3 {
            let members: Vec<usize> = (0..30).filter(|&i| labels[i] == c).collect();
            for j in 0..5 {
                let m = members.iter().map(|&i| feats.get(i, j)).sum::<f64>() / members.len() as f64;
                assert!((bank.raw[&c][j] - m).abs() < 1e-14);
            }
            assert_eq!(bank.count(c), Some(10));
        }
    }

    #[test]
    fn affinity_examples() {
        let mut r = rng(3);
        let z = gaussian(&mut r, &[4, 6], 1.0);
        let h = gaussian(&mut r, &[6, 6], 0.3);
        let m = affinity_matrix(&z, &h, 0.7).unwrap();
        for k in 0..4 {
            assert_eq!(m.get(k, k), 1.0);
            for j in 0..4 {
                assert_eq!(m.get(k, j), m.get(j, k));
                assert!(m.get(k, j) > 0.0 && m.get(k, j) <= 1.0);
            }
        }
        let ones = affinity_matrix(&z, &h, 0.0).unwrap();
        assert!(ones.data().iter().all(|v| *v == 1.0));
        assert!(affinity_matrix(&z, &h, -1.0).is_err());

        // explicit two-class instance
        let z2 = Tensor::from_rows(&[z.row(0).to_vec(), z.row(1).to_vec()]).unwrap();
        let proj = |v: &[f64]| -> Vec<f64> {
            let ln = layernorm(v).unwrap();
            (0..6).map(|j| (0..6).map(|k| ln[k] * h.get(k, j)).sum()).collect()
        };
        let (a, b) = (proj(z2.row(0)), proj(z2.row(1)));
        let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let m2 = affinity_matrix(&z2, &h, 0.7).unwrap();
        assert!((m2.get(0, 1) - (-0.7 * d2).exp()).abs() < 1e-14);
    }

    #[test]
    fn refine_examples() {
        let mut r = rng(4);
        let raw = gaussian(&mut r, &[4, 5], 1.0);
        assert_eq!(refine_prototypes(&Tensor::identity(4), &raw).unwrap(), raw);
        let ones = Tensor::filled(&[4, 4], 1.0);
        let refined = refine_prototypes(&ones, &raw).unwrap();
        for j in 0..5 {
            let mean = (0..4).map(|k| raw.get(k, j)).sum::<f64>() / 4.0;
            for k in 0..4 {
                assert!((refined.get(k, j) - mean).abs() < 1e-15);
            }
        }
        let m = gaussian(&mut r, &[4, 4], 1.0).map(f64::abs);
        let refined = refine_prototypes(&m, &raw).unwrap();
        for k in 0..4 {
            let z: f64 = m.row(k).iter().sum();
            for j in 0..5 {
                let o: f64 = (0..4).map(|i| m.get(k, i) / z * raw.get(i, j)).sum();
                assert!((refined.get(k, j) - o).abs() < 1e-14);
            }
        }
        assert!(refine_prototypes(&Tensor::identity(3), &raw).is_err());
    }

    #[test]
    fn visual_prob_examples() {
        let single = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        assert_eq!(visual_prob(&[1.0, 0.0], &single, 0.01).unwrap().probs(), &[1.0]);
        let two = Tensor::identity(2);
        let p = visual_prob(&[1.0, 0.0], &two, 0.01).unwrap();
        assert!((p.probs()[0] - 1.0).abs() < 1e-4);
        let mut r = rng(5);
        let protos = gaussian(&mut r, &[3, 4], 1.0);
        let f = gaussian(&mut r, &[1, 4], 1.0);
        let logits: Vec<f64> = (0..3).map(|k| cosine_sim(f.row(0), protos.row(k)).unwrap()).collect();
        let oracle = softmax_temp(&logits, 0.2).unwrap();
        let got = visual_prob(f.row(0), &protos, 0.2).unwrap();
        for (a, b) in got.probs().iter().zip(oracle.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero = Tensor::zeros(&[2, 4]);
        assert!(visual_prob(f.row(0), &zero, 0.2).is_err());
    }

    #[test]
    fn loss_ce_v_examples() {
        let protos = Tensor::identity(3);
        let f = Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        assert!(loss_ce_v(&f, &protos, &[2], 0.001).unwrap().abs() < 1e-11);
        let same = Tensor::filled(&[4, 3], 1.0);
        let l = loss_ce_v(&f, &same, &[1], 0.01).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-11);
        assert!(loss_ce_v(&f, &protos, &[3], 0.01).is_err());
        let p = visual_prob(f.row(0), &protos, 0.5).unwrap();
        assert!((loss_ce_v(&f, &protos, &[0], 0.5).unwrap() + p.probs()[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_v_and_reg_gradient_wrt_affinity_projection() {
        let mut r = rng(6);
        let z = gaussian(&mut r, &[3, 6], 1.0);
        let raw = gaussian(&mut r, &[3, 5], 1.0);
        let f = gaussian(&mut r, &[2, 5], 1.0);
        let snap = gaussian(&mut r, &[2, 5], 0.5);
        let h0 = gaussian(&mut r, &[6, 6], 0.2);
        let report = grad_check(
            &[h0],
            |g, v| {
                let zv = g.constant(z.clone())?;
                let rv = g.constant(raw.clone())?;
                let fv = g.constant(f.clone())?;
                let m = affinity_tape(g, zv, v[0], 0.5)?;
                let c = refine_tape(g, m, rv)?;
                let ce = loss_ce_v_tape(g, fv, c, &[2, 0], 0.1)?;
                let reg = loss_reg_tape(g, c, &snap)?;
                g.add(ce, reg)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn loss_reg_examples() {
        let mut r = rng(7);
        let c = gaussian(&mut r, &[3, 4], 1.0);
        let snap = Tensor::from_rows(&[c.row(0).to_vec(), c.row(1).to_vec()]).unwrap();
        assert_eq!(loss_reg(&c, &snap).unwrap(), 0.0);
        let mut shifted = c.clone();
        shifted.row_mut(0)[0] += 1.0;
        let one = Tensor::from_rows(&[c.row(0).to_vec()]).unwrap();
        assert!((loss_reg(&shifted, &one).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(loss_reg(&c, &Tensor::zeros(&[0, 4])).unwrap(), 0.0);
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut r = rng(8);
        let mut bank = PrototypeBank::new();
        let cur = gaussian(&mut r, &[2, 3], 1.0);
        bank.set_current(&[4, 9], &cur).unwrap();
        bank.snapshot_prototypes();
        let before = bank.snapshot_checksum();
        bank.snapshot_prototypes();
        assert_eq!(before, bank.snapshot_checksum());
        bank.set_current(&[4, 9], &cur.map(|v| v + 1.0)).unwrap();
        assert_eq!(before, bank.snapshot_checksum());
        assert_eq!(bank.snapshot_matrix(&[4, 9]).unwrap(), cur);
        assert!(matches!(bank.snapshot_matrix(&[5]), Err(SecaError::MissingSnapshot(5))));
    }

    #[test]
    fn classifier_variant_examples() {
        let mut r = rng(9);
        let raw = gaussian(&mut r, &[3, 4], 1.0);
        let f = gaussian(&mut r, &[1, 4], 1.0).into_data();
        let text = ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let refined = refine_prototypes(&Tensor::identity(3), &raw).unwrap();
        let mut head = LinearHead::default();
        head.grow(4, 2);
        head.grow(4, 1);
        let cents = gaussian(&mut r, &[3, 4], 1.0);
        let inp = ClassifierInputs {
            adapted: &f,
            text_avg: &text,
            raw: &raw,
            refined: &refined,
            adapted_centroids: &cents,
            linear: &head,
            tau: 0.05,
        };
        assert_eq!(
            classifier_variant(ClassifierVariant::Sevpr, &inp).unwrap(),
            classifier_variant(ClassifierVariant::CentroidClip, &inp).unwrap()
        );
        let lin = classifier_variant(ClassifierVariant::Linear, &inp).unwrap();
        assert!(lin.probs().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let other_raw = raw.map(|v| v * -2.0);
        let mutated = ClassifierInputs { raw: &other_raw, refined: &other_raw, ..inp };
        assert_eq!(
            classifier_variant(ClassifierVariant::OnlyText, &mutated).unwrap(),
            classifier_variant(ClassifierVariant::OnlyText, &inp).unwrap()
        );
        assert!(ClassifierVariant::parse("nearest").is_err());
    }
}
