//! Task streams: seeded synthetic class clusters and the binary
//! feature-bank format for externally extracted features.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FormatErrorKind, Result, SecaError};
use crate::numkernel::Tensor;

pub const BANK_MAGIC: &[u8; 8] = b"SECAFB1\0";
pub const BANK_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub superclasses: usize,
    /// Correlation of a class mean with its superclass center.
    pub rho: f64,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_tasks: 10,
            classes_per_task: 5,
            dim: 64,
            superclasses: 10,
            rho: 0.8,
            sigma: 0.6,
            train_per_class: 50,
            test_per_class: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SecaError::InvalidConfig(format!("data.{m}")));
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return bad("num_tasks and classes_per_task must be >= 1");
        }
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.superclasses == 0 {
            return bad("superclasses must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be finite and >= 0");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train_per_class and test_per_class must be >= 1");
        }
        if self.rho >= 1.0 && self.num_classes() > self.superclasses {
            return Err(SecaError::InvalidConfig(format!(
                "data: rho = 1 gives only {} distinct class means for {} classes",
                self.superclasses,
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// Feature rows with their global class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub xs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            xs: self.xs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub num_classes: usize,
    pub dim: usize,
    /// Superclass of each class when the stream knows one.
    pub superclass: Option<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl TaskStream {
    /// Label sets must be pairwise disjoint, cover the registry and every
    /// class needs at least one train and one test sample.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.num_classes];
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                if c >= self.num_classes {
                    return Err(SecaError::UnknownClass(c));
                }
                if let Some(prev) = owner[c] {
                    return Err(SecaError::ProtocolViolation(format!(
                        "class {c} appears in tasks {} and {}",
                        prev + 1,
                        t + 1
                    )));
                }
                owner[c] = Some(t);
            }
            for set in [&task.train, &task.test] {
                if let Some(y) = set.labels.iter().find(|y| !task.classes.contains(y)) {
                    return Err(SecaError::ProtocolViolation(format!(
                        "label {y} is not a class of task {}",
                        t + 1
                    )));
                }
                for &c in &task.classes {
                    if !set.labels.contains(&c) {
                        return Err(SecaError::MissingClass(c));
                    }
                }
            }
        }
        if let Some(c) = owner.iter().position(|o| o.is_none()) {
            return Err(SecaError::MissingClass(c));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Seeded class clusters. Class `k` belongs to task `k / C` and to
/// superclass `k mod G`, so related classes land in different tasks.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let centers: Vec<Vec<f64>> = (0..spec.superclasses).map(|_| normal_vec(&mut rng, d)).collect();
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let k_total = spec.num_classes();
    let superclass: Vec<usize> = (0..k_total).map(|k| k % spec.superclasses).collect();
    let means: Vec<Vec<f64>> = (0..k_total)
        .map(|k| {
            let z = normal_vec(&mut rng, d);
            centers[superclass[k]]
                .iter()
                .zip(&z)
                .map(|(c, z)| a * c + b * z)
                .collect()
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng, classes: &[usize], per_class: usize| -> Result<LabeledSet> {
        let mut rows = Vec::with_capacity(classes.len() * per_class);
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        for &c in classes {
            for _ in 0..per_class {
                let noise = normal_vec(rng, d);
                rows.push(means[c].iter().zip(&noise).map(|(m, n)| m + spec.sigma * n).collect());
                labels.push(c);
            }
        }
        Ok(LabeledSet {
            xs: Tensor::from_rows(&rows)?,
            labels,
        })
    };
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let classes: Vec<usize> = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let train = draw(&mut rng, &classes, spec.train_per_class)?;
        let test = draw(&mut rng, &classes, spec.test_per_class)?;
        tasks.push(Task { classes, train, test });
    }
    Ok(TaskStream {
        tasks,
        num_classes: k_total,
        dim: d,
        superclass: Some(superclass),
        class_names: (0..k_total).map(|k| format!("class_{k}")).collect(),
    })
}

/// In-memory form of the binary feature bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub num_classes: usize,
    pub class_ids: Vec<u32>,
    /// Row-major `num_samples x dim`.
    pub features: Vec<f32>,
    pub names: BTreeMap<u32, String>,
}

impl FeatureBank {
    pub fn num_samples(&self) -> usize {
        self.class_ids.len()
    }

    /// All train and test samples of a stream, in task order.
    pub fn from_stream(stream: &TaskStream) -> Self {
        let mut class_ids = Vec::new();
        let mut features = Vec::new();
        for task in &stream.tasks {
            for set in [&task.train, &task.test] {
                for (i, &y) in set.labels.iter().enumerate() {
                    class_ids.push(y as u32);
                    features.extend(set.xs.row(i).iter().map(|&v| v as f32));
                }
            }
        }
        FeatureBank {
            dim: stream.dim,
            num_classes: stream.num_classes,
            class_ids,
            features,
            names: stream
                .class_names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u32, n.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.num_samples() * (4 + 4 * self.dim));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_samples() as u64).to_le_bytes());
        for (i, &c) in self.class_ids.iter().enumerate() {
            out.extend_from_slice(&c.to_le_bytes());
            for v in &self.features[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the binary layout; names are left empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(SecaError::format(FormatErrorKind::Truncated, "shorter than the magic"));
        }
        if &bytes[..8] != BANK_MAGIC {
            return Err(SecaError::format(FormatErrorKind::BadMagic, "not a feature bank"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(SecaError::format(FormatErrorKind::Truncated, "header cut short"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != BANK_VERSION {
            return Err(SecaError::format(
                FormatErrorKind::VersionMismatch,
                format!("version {version}, expected {BANK_VERSION}"),
            ));
        }
        let dim = u32_at(12) as usize;
        let num_classes = u32_at(16) as usize;
        let n = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        if dim == 0 {
            return Err(SecaError::format(FormatErrorKind::Malformed, "zero feature dimension"));
        }
        let record = 4 + 4 * dim as u64;
        let expected = (HEADER_LEN as u64).checked_add(n.checked_mul(record).ok_or_else(|| {
            SecaError::format(FormatErrorKind::Malformed, "sample count overflows")
        })?);
        let expected = expected.ok_or_else(|| SecaError::format(FormatErrorKind::Malformed, "sample count overflows"))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(SecaError::format(
                FormatErrorKind::Truncated,
                format!("{actual} bytes, header implies {expected}"),
            ));
        }
        if actual > expected {
            return Err(SecaError::format(
                FormatErrorKind::TrailingBytes,
                format!("{actual} bytes, header implies {expected}"),
            ));
        }
        let n = n as usize;
        let mut class_ids = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * dim);
        let mut off = HEADER_LEN;
        for i in 0..n {
            let c = u32_at(off);
            if c as usize >= num_classes {
                return Err(SecaError::format(
                    FormatErrorKind::IdOutOfRange,
                    format!("sample {i} has class {c} but num_classes is {num_classes}"),
                ));
            }
            class_ids.push(c);
            off += 4;
            for _ in 0..dim {
                features.push(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")));
                off += 4;
            }
        }
        Ok(FeatureBank {
            dim,
            num_classes,
            class_ids,
            features,
            names: BTreeMap::new(),
        })
    }
}

/// Sidecar manifest path: `<bank>.manifest.json`.
pub fn manifest_path(bank: &Path) -> PathBuf {
    let mut s = bank.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the bank and its name manifest.
pub fn write_feature_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    fs::write(path, bank.to_bytes())?;
    let names: BTreeMap<String, &String> = bank.names.iter().map(|(k, v)| (k.to_string(), v)).collect();
    let json = serde_json::to_string_pretty(&names)
        .map_err(|e| SecaError::InvalidInput(format!("manifest encoding: {e}")))?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Reads the bank and its manifest without splitting.
pub fn read_feature_bank(path: &Path) -> Result<FeatureBank> {
    let bytes = fs::read(path)?;
    let mut bank = FeatureBank::from_bytes(&bytes)?;
    let text = fs::read_to_string(manifest_path(path))?;
    let raw: BTreeMap<String, String> = serde_json::from_str(&text)
        .map_err(|e| SecaError::format(FormatErrorKind::Malformed, format!("manifest: {e}")))?;
    for (k, v) in raw {
        let id: u32 = k
            .parse()
            .map_err(|_| SecaError::format(FormatErrorKind::Malformed, format!("manifest key {k:?}")))?;
        if id as usize >= bank.num_classes {
            return Err(SecaError::format(
                FormatErrorKind::IdOutOfRange,
                format!("manifest names class {id}"),
            ));
        }
        bank.names.insert(id, v);
    }
    Ok(bank)
}

/// How a flat bank becomes a task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRule {
    pub num_tasks: usize,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule {
            num_tasks: 10,
            train_ratio: 0.7,
            seed: 0,
        }
    }
}

/// Sorted class ids in `num_tasks` equal groups; a seeded shuffle splits
/// each class into train and test.
pub fn split_bank(bank: &FeatureBank, rule: &SplitRule) -> Result<TaskStream> {
    if rule.num_tasks == 0 || bank.num_classes % rule.num_tasks != 0 {
        return Err(SecaError::InvalidConfig(format!(
            "{} classes cannot be divided into {} equal tasks",
            bank.num_classes, rule.num_tasks
        )));
    }
    if !(rule.train_ratio > 0.0 && rule.train_ratio < 1.0) {
        return Err(SecaError::InvalidConfig("split.train_ratio must lie in (0, 1)".into()));
    }
    let d = bank.dim;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); bank.num_classes];
    for (i, &c) in bank.class_ids.iter().enumerate() {
        by_class[c as usize].push(i);
    }
    let row = |i: usize| -> Vec<f64> { bank.features[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect() };
    let per_task = bank.num_classes / rule.num_tasks;
    let mut tasks = Vec::with_capacity(rule.num_tasks);
    for t in 0..rule.num_tasks {
        let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
        let (mut tr_rows, mut tr_lab, mut te_rows, mut te_lab) = (vec![], vec![], vec![], vec![]);
        for &c in &classes {
            let mut idx = by_class[c].clone();
            if idx.len() < 2 {
                return Err(SecaError::format(
                    FormatErrorKind::Malformed,
                    format!("class {c} has {} samples, needs at least 2", idx.len()),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(rule.seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            idx.shuffle(&mut rng);
            let n_train = ((idx.len() as f64 * rule.train_ratio).round() as usize).clamp(1, idx.len() - 1);
            for (k, &i) in idx.iter().enumerate() {
                if k < n_train {
                    tr_rows.push(row(i));
                    tr_lab.push(c);
                } else {
                    te_rows.push(row(i));
                    te_lab.push(c);
                }
            }
        }
        tasks.push(Task {
            classes,
            train: LabeledSet {
                xs: Tensor::from_rows(&tr_rows)?,
                labels: tr_lab,
            },
            test: LabeledSet {
                xs: Tensor::from_rows(&te_rows)?,
                labels: te_lab,
            },
        });
    }
    let class_names = (0..bank.num_classes)
        .map(|c| bank.names.get(&(c as u32)).cloned().unwrap_or_else(|| format!("class_{c}")))
        .collect();
    Ok(TaskStream {
        tasks,
        num_classes: bank.num_classes,
        dim: d,
        superclass: None,
        class_names,
    })
}

/// Reads a bank from disk and splits it into tasks.
pub fn load_feature_bank(path: &Path, rule: &SplitRule) -> Result<TaskStream> {
    split_bank(&read_feature_bank(path)?, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::ops::cosine_sim;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_tasks: 3,
            classes_per_task: 2,
            dim: 8,
            superclasses: 2,
            train_per_class: 4,
            test_per_class: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_noise_samples_equal_their_mean() {
        let spec = SyntheticSpec { sigma: 0.0, ..small() };
        let s = gen_synthetic(&spec).unwrap();
        s.validate().unwrap();
        for task in &s.tasks {
            for set in [&task.train, &task.test] {
                for i in 0..set.len() {
                    let first = set.labels.iter().position(|y| *y == set.labels[i]).unwrap();
                    assert_eq!(set.xs.row(i), task.train.xs.row(task.train.labels.iter().position(|y| *y == set.labels[first]).unwrap()));
                }
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(gen_synthetic(&small()).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn related_classes_land_in_different_tasks() {
        let s = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let sc = s.superclass.as_ref().unwrap();
        for task in &s.tasks {
            let mut groups: Vec<usize> = task.classes.iter().map(|&c| sc[c]).collect();
            groups.sort();
            groups.dedup();
            assert_eq!(groups.len(), task.classes.len());
        }
    }

    #[test]
    fn independent_means_are_near_orthogonal() {
        for seed in 0..100 {
            let spec = SyntheticSpec {
                num_tasks: 2,
                classes_per_task: 5,
                dim: 256,
                superclasses: 10,
                rho: 0.0,
                sigma: 0.0,
                train_per_class: 1,
                test_per_class: 1,
                seed,
            };
            let s = gen_synthetic(&spec).unwrap();
            let means: Vec<&[f64]> = s.tasks.iter().flat_map(|t| (0..t.train.len()).map(move |i| t.train.xs.row(i))).collect();
            for i in 0..means.len() {
                for j in (i + 1)..means.len() {
                    assert!(cosine_sim(means[i], means[j]).unwrap().abs() < 0.3);
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let collapse = SyntheticSpec { rho: 1.0, ..small() };
        assert!(matches!(gen_synthetic(&collapse), Err(SecaError::InvalidConfig(_))));
        let ok = SyntheticSpec { rho: 1.0, superclasses: 6, ..small() };
        assert!(gen_synthetic(&ok).is_ok());
        assert!(gen_synthetic(&SyntheticSpec { num_tasks: 0, ..small() }).is_err());
    }

    #[test]
    fn bank_round_trip_is_bit_exact() {
        let s = gen_synthetic(&small()).unwrap();
        let bank = FeatureBank::from_stream(&s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.bin");
        write_feature_bank(&p, &bank).unwrap();
        let back = read_feature_bank(&p).unwrap();
        assert_eq!(back.class_ids, bank.class_ids);
        assert_eq!(back.names, bank.names);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.features), bits(&bank.features));
    }

    #[test]
    fn split_examples() {
        let spec = SyntheticSpec {
            num_tasks: 1,
            classes_per_task: 10,
            superclasses: 10,
            ..small()
        };
        let bank = FeatureBank::from_stream(&gen_synthetic(&spec).unwrap());
        let rule = SplitRule { num_tasks: 10, train_ratio: 0.5, seed: 3 };
        let s = split_bank(&bank, &rule).unwrap();
        s.validate().unwrap();
        assert!(s.tasks.iter().all(|t| t.classes.len() == 1));
        assert_eq!(s, split_bank(&bank, &rule).unwrap());
        let bad = SplitRule { num_tasks: 3, ..rule };
        assert!(matches!(split_bank(&bank, &bad), Err(SecaError::InvalidConfig(_))));
    }

    fn kind(e: SecaError) -> FormatErrorKind {
        match e {
            SecaError::Format { kind, .. } => kind,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_banks_have_distinct_kinds() {
        let bank = FeatureBank::from_stream(&gen_synthetic(&small()).unwrap());
        let good = bank.to_bytes();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert_eq!(kind(FeatureBank::from_bytes(&magic).unwrap_err()), FormatErrorKind::BadMagic);
        let mut ver = good.clone();
        ver[8] = 2;
        assert_eq!(kind(FeatureBank::from_bytes(&ver).unwrap_err()), FormatErrorKind::VersionMismatch);
        assert_eq!(
            kind(FeatureBank::from_bytes(&good[..good.len() - 1]).unwrap_err()),
            FormatErrorKind::Truncated
        );
        let mut long = good.clone();
        long.push(0);
        assert_eq!(kind(FeatureBank::from_bytes(&long).unwrap_err()), FormatErrorKind::TrailingBytes);
        let mut id = good.clone();
        id[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&99u32.to_le_bytes());
        assert_eq!(kind(FeatureBank::from_bytes(&id).unwrap_err()), FormatErrorKind::IdOutOfRange);
        let codes: Vec<u32> = [
            FormatErrorKind::BadMagic,
            FormatErrorKind::VersionMismatch,
            FormatErrorKind::Truncated,
            FormatErrorKind::IdOutOfRange,
        ]
        .iter()
        .map(|k| k.code())
        .collect();
        let mut dedup = codes.clone();
        dedup.dedup();
        assert_eq!(codes, dedup);
    }
}
