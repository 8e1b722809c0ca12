//! Binary checkpoints of a [`TrainState`] between tasks.
//!
//! Layout: magic, `u32` version, `u32` section count, then per section a
//! length-prefixed name and a length-prefixed payload. Integers and floats
//! are little-endian; floats round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, Moments, RunConfig, TrainState};
use crate::encoder::{
    Adapter, AdapterStack, ClassTokenTable, FeedForward, FrozenEncoder, PromptBank, TextEncoder, VisualBackbone,
};
use crate::error::{FormatErrorKind, Result, SecaError};
use crate::numkernel::Tensor;
use crate::replay::{ClassGaussian, Covariance, ReplayStore};
use crate::sevpr::{AffinityModel, LinearHead, PrototypeBank};
use crate::sgakt::{AdapterPool, PoolEntry, SemanticProjectors};

pub const MAGIC: &[u8; 9] = b"SECA-CKPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|d| self.usize(*d));
        t.data().iter().for_each(|x| self.f64(*x));
    }
    fn feed_forward(&mut self, f: &FeedForward) {
        [&f.w1, &f.b1, &f.w2, &f.b2].iter().for_each(|t| self.tensor(t));
    }
    fn stack(&mut self, s: &AdapterStack) {
        self.usize(s.layers.len());
        s.tensors().iter().for_each(|t| self.tensor(t));
    }
    fn rng(&mut self, r: &ChaCha8Rng) {
        self.0.extend_from_slice(&r.get_seed());
        self.u64(r.get_stream());
        self.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
    }
    fn float_map(&mut self, m: &BTreeMap<usize, Vec<f64>>) {
        self.usize(m.len());
        for (k, v) in m {
            self.usize(*k);
            self.floats(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

fn malformed(detail: impl Into<String>) -> SecaError {
    SecaError::format(FormatErrorKind::Malformed, detail)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SecaError::format(
                FormatErrorKind::Truncated,
                format!("section {} ends early", self.section),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| malformed(format!("length {v} in {}", self.section)))
    }
    /// A count of items each occupying at least `unit` bytes.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit.max(1)) > self.buf.len() - self.pos {
            return Err(SecaError::format(
                FormatErrorKind::Truncated,
                format!("section {} claims {n} items", self.section),
            ));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.count(1)?;
        self.take(n)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        if nd == 0 || nd > 4 {
            return Err(malformed(format!("tensor rank {nd} in {}", self.section)));
        }
        let shape = (0..nd).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| malformed("tensor size overflows"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(SecaError::format(FormatErrorKind::Truncated, format!("tensor in {}", self.section)));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))
    }
    fn feed_forward(&mut self) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: self.tensor()?,
            b1: self.tensor()?,
            w2: self.tensor()?,
            b2: self.tensor()?,
        })
    }
    fn stack(&mut self) -> Result<AdapterStack> {
        let n = self.count(4 * 12)?;
        let layers = (0..n)
            .map(|_| {
                Ok(Adapter {
                    down: self.tensor()?,
                    b_down: self.tensor()?,
                    up: self.tensor()?,
                    b_up: self.tensor()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterStack { layers })
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32)?.try_into().expect("32 bytes");
        let stream = self.u64()?;
        let pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes"));
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        Ok(r)
    }
    fn float_map(&mut self) -> Result<BTreeMap<usize, Vec<f64>>> {
        let n = self.count(16)?;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = self.usize()?;
            m.insert(k, self.floats()?);
        }
        Ok(m)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SecaError::format(
                FormatErrorKind::TrailingBytes,
                format!("{} extra bytes in section {}", self.buf.len() - self.pos, self.section),
            ));
        }
        Ok(())
    }
}

fn sections(state: &TrainState) -> Vec<(&'static str, Vec<u8>)> {
    let mut out = Vec::new();
    let mut w = Writer::default();
    w.bytes(state.config.to_json().as_bytes());
    out.push(("config", std::mem::take(&mut w.0)));

    let enc = &state.encoder;
    w.usize(enc.backbone.blocks.len());
    enc.backbone.blocks.iter().for_each(|b| w.feed_forward(b));
    w.feed_forward(&enc.text.unit);
    w.tensor(&enc.class_tokens.tokens);
    out.push(("encoder", std::mem::take(&mut w.0)));

    w.u8(state.prompts.is_active() as u8);
    w.usize(state.prompts.len());
    state.prompts.all().iter().for_each(|t| w.tensor(t));
    out.push(("prompts", std::mem::take(&mut w.0)));

    w.stack(&state.adapters);
    out.push(("adapters", std::mem::take(&mut w.0)));

    match &state.previous {
        Some(p) => {
            w.u8(1);
            w.stack(p);
        }
        None => w.u8(0),
    }
    out.push(("previous", std::mem::take(&mut w.0)));

    match state.pool.max_size() {
        Some(m) => {
            w.u8(1);
            w.usize(m);
        }
        None => w.u8(0),
    }
    w.usize(state.pool.len());
    for e in state.pool.entries() {
        w.f64(e.utility);
        w.stack(&e.adapters);
    }
    out.push(("pool", std::mem::take(&mut w.0)));

    w.tensor(&state.projectors.w_s);
    w.tensor(&state.projectors.w_v);
    out.push(("projectors", std::mem::take(&mut w.0)));

    w.tensor(&state.affinity.h);
    w.f64(state.affinity.gamma);
    out.push(("affinity", std::mem::take(&mut w.0)));

    let p = &state.prototypes;
    w.float_map(&p.raw);
    w.usize(p.counts.len());
    for (k, c) in &p.counts {
        w.usize(*k);
        w.usize(*c);
    }
    w.float_map(&p.adapted);
    w.float_map(&p.current);
    w.float_map(&p.snapshot);
    out.push(("prototypes", std::mem::take(&mut w.0)));

    w.usize(state.linear.blocks.len());
    for (a, b) in &state.linear.blocks {
        w.tensor(a);
        w.tensor(b);
    }
    out.push(("linear", std::mem::take(&mut w.0)));

    w.u8(state.replay.full_covariance as u8);
    w.usize(state.replay.classes.len());
    for (k, g) in &state.replay.classes {
        w.usize(*k);
        w.usize(g.count);
        w.floats(&g.mean);
        match &g.cov {
            Covariance::Diagonal(v) => {
                w.u8(0);
                w.floats(v);
            }
            Covariance::Full { cov, sqrt } => {
                w.u8(1);
                w.tensor(cov);
                w.tensor(sqrt);
            }
        }
    }
    out.push(("replay", std::mem::take(&mut w.0)));

    let a = &state.adam;
    [a.lr, a.beta1, a.beta2, a.eps].iter().for_each(|v| w.f64(*v));
    w.usize(a.slots.len());
    for (name, m) in &a.slots {
        w.bytes(name.as_bytes());
        w.u64(m.t);
        w.tensor(&m.m);
        w.tensor(&m.v);
    }
    out.push(("optimizer", std::mem::take(&mut w.0)));

    w.usize(state.task_classes.len());
    for cls in &state.task_classes {
        w.usize(cls.len());
        cls.iter().for_each(|c| w.usize(*c));
    }
    out.push(("progress", std::mem::take(&mut w.0)));

    w.rng(&state.rng);
    w.rng(&state.replay_rng);
    out.push(("rng", std::mem::take(&mut w.0)));
    out
}

/// Serializes a state that is between tasks.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    if state.prompts.is_active() {
        return Err(SecaError::ProtocolViolation(
            "checkpoints are taken between tasks".into(),
        ));
    }
    let secs = sections(state);
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(secs.len() as u32);
    for (name, payload) in secs {
        w.bytes(name.as_bytes());
        w.bytes(&payload);
    }
    Ok(w.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        section: "header",
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(SecaError::format(FormatErrorKind::BadMagic, "not a checkpoint"));
    }
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(SecaError::format(
            FormatErrorKind::VersionMismatch,
            format!("checkpoint version {version}, expected {VERSION}"),
        ));
    }
    let n = r.u32()?;
    let mut map: BTreeMap<String, &[u8]> = BTreeMap::new();
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| malformed("section name"))?;
        let payload = r.bytes()?;
        if map.insert(name.clone(), payload).is_some() {
            return Err(malformed(format!("duplicate section {name}")));
        }
    }
    r.finish()?;
    let mut open = |name: &'static str| -> Result<Reader<'_>> {
        let buf = map
            .remove(name)
            .ok_or_else(|| malformed(format!("missing section {name}")))?;
        Ok(Reader {
            buf,
            pos: 0,
            section: name,
        })
    };

    let mut r = open("config")?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| malformed("config is not UTF-8"))?;
    let config = RunConfig::from_json(text).map_err(|e| malformed(format!("config: {e}")))?;
    r.finish()?;

    let mut r = open("encoder")?;
    let nb = r.count(1)?;
    let blocks = (0..nb).map(|_| r.feed_forward()).collect::<Result<Vec<_>>>()?;
    let unit = r.feed_forward()?;
    let tokens = r.tensor()?;
    r.finish()?;
    let encoder = FrozenEncoder {
        config: config.encoder.clone(),
        backbone: VisualBackbone { blocks },
        text: TextEncoder { unit },
        class_tokens: ClassTokenTable { tokens },
    };

    let mut r = open("prompts")?;
    let active = r.u8()? != 0;
    let np = r.count(1)?;
    let prompts = (0..np).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if active {
        return Err(malformed("checkpoint taken mid-task"));
    }

    let mut r = open("adapters")?;
    let adapters = r.stack()?;
    r.finish()?;

    let mut r = open("previous")?;
    let previous = match r.u8()? {
        0 => None,
        _ => Some(r.stack()?),
    };
    r.finish()?;

    let mut r = open("pool")?;
    let max_size = match r.u8()? {
        0 => None,
        _ => Some(r.usize()?),
    };
    let ne = r.count(1)?;
    let entries = (0..ne)
        .map(|_| {
            let utility = r.f64()?;
            Ok(PoolEntry {
                adapters: r.stack()?,
                utility,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if max_size == Some(0) || max_size.is_some_and(|m| entries.len() > m) {
        return Err(malformed("pool exceeds its capacity"));
    }

    let mut r = open("projectors")?;
    let projectors = SemanticProjectors {
        w_s: r.tensor()?,
        w_v: r.tensor()?,
    };
    r.finish()?;

    let mut r = open("affinity")?;
    let affinity = AffinityModel {
        h: r.tensor()?,
        gamma: r.f64()?,
    };
    r.finish()?;

    let mut r = open("prototypes")?;
    let raw = r.float_map()?;
    let nc = r.count(16)?;
    let mut counts = BTreeMap::new();
    for _ in 0..nc {
        let k = r.usize()?;
        counts.insert(k, r.usize()?);
    }
    let prototypes = PrototypeBank {
        raw,
        counts,
        adapted: r.float_map()?,
        current: r.float_map()?,
        snapshot: r.float_map()?,
    };
    r.finish()?;

    let mut r = open("linear")?;
    let nl = r.count(1)?;
    let blocks = (0..nl)
        .map(|_| Ok((r.tensor()?, r.tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;

    let mut r = open("replay")?;
    let full_covariance = r.u8()? != 0;
    let ng = r.count(1)?;
    let mut classes = BTreeMap::new();
    for _ in 0..ng {
        let k = r.usize()?;
        let count = r.usize()?;
        let mean = r.floats()?;
        let cov = match r.u8()? {
            0 => Covariance::Diagonal(r.floats()?),
            1 => Covariance::Full {
                cov: r.tensor()?,
                sqrt: r.tensor()?,
            },
            t => return Err(malformed(format!("covariance tag {t}"))),
        };
        classes.insert(k, ClassGaussian { mean, cov, count });
    }
    r.finish()?;

    let mut r = open("optimizer")?;
    let mut adam = Adam::new(r.f64()?);
    adam.beta1 = r.f64()?;
    adam.beta2 = r.f64()?;
    adam.eps = r.f64()?;
    let ns = r.count(1)?;
    for _ in 0..ns {
        let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| malformed("slot name"))?;
        let t = r.u64()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        adam.slots.insert(name, Moments { m, v, t });
    }
    r.finish()?;

    let mut r = open("progress")?;
    let nt = r.count(8)?;
    let task_classes = (0..nt)
        .map(|_| {
            let k = r.count(8)?;
            (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if task_classes.len() != prompts.len() {
        return Err(malformed("prompt count differs from completed tasks"));
    }
    let num_classes = encoder.class_tokens.num_classes();
    if let Some(&c) = task_classes.iter().flatten().find(|&&c| c >= num_classes) {
        return Err(SecaError::format(
            FormatErrorKind::IdOutOfRange,
            format!("class {c} with {num_classes} class tokens"),
        ));
    }

    let mut r = open("rng")?;
    let rng = r.rng()?;
    let replay_rng = r.rng()?;
    r.finish()?;

    if let Some(extra) = map.keys().next() {
        return Err(malformed(format!("unknown section {extra}")));
    }

    Ok(TrainState {
        config,
        encoder,
        prompts: PromptBank::from_parts(prompts, false),
        adapters,
        previous,
        pool: AdapterPool::from_parts(entries, max_size),
        projectors,
        affinity,
        prototypes,
        linear: LinearHead { blocks },
        replay: ReplayStore {
            classes,
            full_covariance,
        },
        adam,
        task_classes,
        rng,
        replay_rng,
    })
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}
