//! Binary training checkpoints.
//!
//! Little-endian throughout: a 4-byte magic, a `u16` format version, then
//! tagged sections, each a 4-byte tag, a `u64` payload length and the
//! payload. The byte layout is documented in `docs/checkpoint.md`.
//! Operator configurations are not stored; they come from the experiment
//! config used to restore.

use std::path::Path;

use qprune::nn::{Network, ParamSet};
use qprune::pipeline::{BatchSampler, LayerOperators, Model, TrainPlan, Trainer};
use qprune::prune::{PruneConfig, PruneSnapshot, PruneState};
use qprune::quantize::{QuantizeConfig, QuantizeState};
use qprune::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"QPCK";
pub const VERSION: u16 = 1;

const TAG_STEP: [u8; 4] = *b"STEP";
const TAG_RNG: [u8; 4] = *b"RNG ";
const TAG_PARAMS: [u8; 4] = *b"PARM";
const TAG_OPS: [u8; 4] = *b"OPS ";

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeRecord {
    pub step: u64,
    pub decimal_bits: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecord {
    pub batched: bool,
    pub snapshot: PruneSnapshot,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OperatorRecord {
    pub weight_prune: Option<PruneRecord>,
    pub weight_quantize: Option<QuantizeRecord>,
    pub feature_prune: Option<PruneRecord>,
    pub feature_quantize: Option<QuantizeRecord>,
}

/// Sampler generator position.
#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngState,
    pub order: Vec<u64>,
    pub cursor: u64,
    /// Weight and optional bias of every layer; `None` for parameterless layers.
    pub params: Vec<Option<(Tensor, Option<Tensor>)>>,
    pub operators: Vec<OperatorRecord>,
}

fn prune_record(p: &PruneState) -> PruneRecord {
    PruneRecord {
        batched: p.is_batched(),
        snapshot: p.snapshot(),
    }
}

fn quantize_record(q: &QuantizeState) -> QuantizeRecord {
    QuantizeRecord {
        step: q.step_count(),
        decimal_bits: q.decimal_bits(),
    }
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let rng = trainer.sampler().rng();
        let sampler = trainer.sampler();
        let model = trainer.model();
        Self {
            step: trainer.step(),
            rng: RngState {
                seed: rng.get_seed(),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos(),
            },
            order: sampler.order().iter().map(|&i| i as u64).collect(),
            cursor: sampler.cursor() as u64,
            params: model
                .network()
                .params()
                .iter()
                .map(|p| p.as_ref().map(|p| (p.weight.clone(), p.bias.clone())))
                .collect(),
            operators: model
                .operators()
                .iter()
                .map(|ops| OperatorRecord {
                    weight_prune: ops.weight_prune.as_ref().map(prune_record),
                    weight_quantize: ops.weight_quantize.as_ref().map(quantize_record),
                    feature_prune: ops.feature_prune.as_ref().map(prune_record),
                    feature_quantize: ops.feature_quantize.as_ref().map(quantize_record),
                })
                .collect(),
        }
    }

    /// Rebuilds a trainer from this checkpoint; operator configurations are
    /// taken from `plan`.
    pub fn restore(&self, plan: &TrainPlan) -> Result<Trainer> {
        let n = plan.layers.len();
        if self.params.len() != n || self.operators.len() != n {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint holds {} layers, config has {n}",
                self.params.len()
            )));
        }
        let params = self
            .params
            .iter()
            .map(|p| p.as_ref().map(|(w, b)| ParamSet::new(w.clone(), b.clone())))
            .collect();
        let network = Network::from_params(plan.layers.clone(), params)?;
        let mut ops = Vec::with_capacity(n);
        for (i, (rec, wrap)) in self.operators.iter().zip(&plan.wraps).enumerate() {
            ops.push(LayerOperators {
                weight_prune: restore_prune(i, "weight_prune", wrap.weight_prune.as_ref(), rec.weight_prune.as_ref())?,
                weight_quantize: restore_quantize(
                    i,
                    "weight_quantize",
                    wrap.weight_quantize.as_ref(),
                    rec.weight_quantize.as_ref(),
                )?,
                feature_prune: restore_prune(i, "feature_prune", wrap.feature_prune.as_ref(), rec.feature_prune.as_ref())?,
                feature_quantize: restore_quantize(
                    i,
                    "feature_quantize",
                    wrap.feature_quantize.as_ref(),
                    rec.feature_quantize.as_ref(),
                )?,
            });
        }
        let model = Model::from_parts(network, ops)?;
        let mut rng = ChaCha8Rng::from_seed(self.rng.seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(self.rng.word_pos);
        let order = self.order.iter().map(|&i| i as usize).collect();
        let sampler = BatchSampler::from_state(rng, order, self.cursor as usize);
        Ok(Trainer::from_parts(plan.clone(), model, sampler, self.step)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut w = Writer::default();
        w.u64(self.step);
        section(&mut out, TAG_STEP, w.0);

        let mut w = Writer::default();
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.u64(self.order.len() as u64);
        for &i in &self.order {
            w.u64(i);
        }
        w.u64(self.cursor);
        section(&mut out, TAG_RNG, w.0);

        let mut w = Writer::default();
        w.u32(self.params.len() as u32);
        for p in &self.params {
            match p {
                None => w.u8(0),
                Some((weight, bias)) => {
                    w.u8(1);
                    w.tensor(weight);
                    w.opt_tensor(bias.as_ref());
                }
            }
        }
        section(&mut out, TAG_PARAMS, w.0);

        let mut w = Writer::default();
        w.u32(self.operators.len() as u32);
        for rec in &self.operators {
            w.opt_prune(rec.weight_prune.as_ref());
            w.opt_quantize(rec.weight_quantize.as_ref());
            w.opt_prune(rec.feature_prune.as_ref());
            w.opt_quantize(rec.feature_quantize.as_ref());
        }
        section(&mut out, TAG_OPS, w.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }

        let mut s = r.section(TAG_STEP)?;
        let step = s.u64()?;
        s.finish()?;

        let mut s = r.section(TAG_RNG)?;
        let seed = s.array()?;
        let stream = s.u64()?;
        let word_pos = s.u128()?;
        let len = s.len()?;
        let order = (0..len).map(|_| s.u64()).collect::<Result<Vec<_>>>()?;
        let cursor = s.u64()?;
        s.finish()?;

        let mut s = r.section(TAG_PARAMS)?;
        let count = s.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            params.push(match s.u8()? {
                0 => None,
                1 => Some((s.tensor()?, s.opt_tensor()?)),
                f => return Err(corrupt(&format!("bad parameter flag {f}"))),
            });
        }
        s.finish()?;

        let mut s = r.section(TAG_OPS)?;
        let count = s.u32()? as usize;
        let mut operators = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            operators.push(OperatorRecord {
                weight_prune: s.opt_prune()?,
                weight_quantize: s.opt_quantize()?,
                feature_prune: s.opt_prune()?,
                feature_quantize: s.opt_quantize()?,
            });
        }
        s.finish()?;
        r.finish()?;

        Ok(Self {
            step,
            rng: RngState { seed, stream, word_pos },
            order,
            cursor,
            params,
            operators,
        })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn restore_prune(
    layer: usize,
    name: &str,
    config: Option<&PruneConfig>,
    rec: Option<&PruneRecord>,
) -> Result<Option<PruneState>> {
    match (config, rec) {
        (None, None) => Ok(None),
        (Some(cfg), Some(rec)) => Ok(Some(PruneState::restore(cfg.clone(), rec.batched, rec.snapshot.clone())?)),
        _ => Err(operator_mismatch(layer, name)),
    }
}

fn restore_quantize(
    layer: usize,
    name: &str,
    config: Option<&QuantizeConfig>,
    rec: Option<&QuantizeRecord>,
) -> Result<Option<QuantizeState>> {
    match (config, rec) {
        (None, None) => Ok(None),
        (Some(cfg), Some(rec)) => Ok(Some(QuantizeState::restore(cfg.clone(), rec.step, rec.decimal_bits)?)),
        _ => Err(operator_mismatch(layer, name)),
    }
}

fn operator_mismatch(layer: usize, name: &str) -> HarnessError {
    HarnessError::Checkpoint(format!("layer {layer} {name}: presence differs between checkpoint and config"))
}

fn corrupt(msg: &str) -> HarnessError {
    HarnessError::Checkpoint(msg.to_string())
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| HarnessError::Checkpoint(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn section(out: &mut Vec<u8>, tag: [u8; 4], payload: Vec<u8>) {
    out.extend_from_slice(&tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.shape(t.shape());
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn opt_tensor(&mut self, t: Option<&Tensor>) {
        match t {
            None => self.u8(0),
            Some(t) => {
                self.u8(1);
                self.tensor(t);
            }
        }
    }

    /// Binary mask as a bitset, bit `i % 8` of byte `i / 8` set when kept.
    fn mask(&mut self, t: &Tensor) {
        self.shape(t.shape());
        let mut packed = vec![0u8; t.len().div_ceil(8)];
        for (i, &v) in t.data().iter().enumerate() {
            if v != 0.0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        self.bytes(&packed);
    }

    fn opt_prune(&mut self, rec: Option<&PruneRecord>) {
        let Some(rec) = rec else {
            self.u8(0);
            return;
        };
        self.u8(1);
        let snap = &rec.snapshot;
        self.u8(rec.batched as u8);
        self.u64(snap.step);
        self.f64(snap.sparsity);
        match &snap.mask {
            None => self.u8(0),
            Some(m) => {
                self.u8(1);
                self.mask(m);
            }
        }
        self.u32(snap.window.len() as u32);
        for e in &snap.window {
            self.tensor(e);
        }
        self.opt_tensor(snap.running_sum.as_ref());
    }

    fn opt_quantize(&mut self, rec: Option<&QuantizeRecord>) {
        let Some(rec) = rec else {
            self.u8(0);
            return;
        };
        self.u8(1);
        self.u64(rec.step);
        match rec.decimal_bits {
            None => self.u8(0),
            Some(d) => {
                self.u8(1);
                self.i32(d);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(())
    }

    fn section(&mut self, tag: [u8; 4]) -> Result<Reader<'a>> {
        let got: [u8; 4] = self.array()?;
        if got != tag {
            return Err(corrupt(&format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(&tag),
                String::from_utf8_lossy(&got)
            )));
        }
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| corrupt("section too large"))?;
        Ok(Reader {
            buf: self.take(len)?,
            pos: 0,
        })
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            f => Err(corrupt(&format!("bad flag {f}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// A `u64` element count, bounded by the bytes left so corrupt input
    /// cannot trigger huge allocations.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(corrupt("length exceeds section"));
        }
        Ok(n as usize)
    }

    fn shape(&mut self) -> Result<(Vec<usize>, usize)> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(&format!("tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| usize::try_from(self.u64()?).map_err(|_| corrupt("tensor extent overflows")))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= self.buf.len() * 8)
            .ok_or_else(|| corrupt("tensor too large"))?;
        Ok((shape, count))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let (shape, count) = self.shape()?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::new(shape, data)?)
    }

    fn opt_tensor(&mut self) -> Result<Option<Tensor>> {
        if self.flag()? {
            Ok(Some(self.tensor()?))
        } else {
            Ok(None)
        }
    }

    fn mask(&mut self) -> Result<Tensor> {
        let (shape, count) = self.shape()?;
        let packed = self.take(count.div_ceil(8))?;
        let data = (0..count)
            .map(|i| if packed[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn opt_prune(&mut self) -> Result<Option<PruneRecord>> {
        if !self.flag()? {
            return Ok(None);
        }
        let batched = self.flag()?;
        let step = self.u64()?;
        let sparsity = self.f64()?;
        let mask = if self.flag()? { Some(self.mask()?) } else { None };
        let entries = self.u32()? as usize;
        if entries > self.buf.len() - self.pos {
            return Err(corrupt("window length exceeds section"));
        }
        let window = (0..entries).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        let running_sum = self.opt_tensor()?;
        Ok(Some(PruneRecord {
            batched,
            snapshot: PruneSnapshot {
                step,
                sparsity,
                mask,
                window,
                running_sum,
            },
        }))
    }

    fn opt_quantize(&mut self) -> Result<Option<QuantizeRecord>> {
        if !self.flag()? {
            return Ok(None);
        }
        let step = self.u64()?;
        let decimal_bits = if self.flag()? { Some(self.i32()?) } else { None };
        Ok(Some(QuantizeRecord { step, decimal_bits }))
    }
}
