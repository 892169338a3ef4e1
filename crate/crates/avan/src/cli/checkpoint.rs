//! Binary checkpoints. One format, two payload kinds: a full training state
//! (parameters, optimizer moments, batch sampler position) and a pretrained
//! recording autoencoder.
//!
//! Everything is little-endian and written in sorted name order, so saving,
//! loading, and saving again produces byte-identical files — resuming from a
//! checkpoint is indistinguishable from never having stopped.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::encoders::Autoencoder;
use crate::error::{Error, Result};
use crate::relational::ModelConfig;
use crate::tensorcore::{Adam, AdamConfig, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;
const KIND_MODEL: u32 = 1;
const KIND_AUTOENCODER: u32 = 2;

// ---------------------------------------------------------------------------
// Byte-level helpers
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u32, scalar_bits: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(VERSION);
        w.u32(kind);
        w.u32(scalar_bits);
        w
    }

    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn u128(&mut self, x: u128) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn values<T: Scalar>(&mut self, xs: &[T]) {
        if T::BITS == 32 {
            for x in xs {
                self.buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        } else {
            for x in xs {
                self.buf.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
    }

    fn write(self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, kind: u32, scalar_bits: u32) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { path, buf, pos: 0 };
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(r.bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported checkpoint version {version}")));
        }
        let file_kind = r.u32()?;
        if file_kind != kind {
            let what = |k| match k {
                KIND_MODEL => "a model checkpoint",
                KIND_AUTOENCODER => "an autoencoder checkpoint",
                _ => "an unknown checkpoint kind",
            };
            return Err(r.bad(format!("expected {}, found {}", what(kind), what(file_kind))));
        }
        let bits = r.u32()?;
        if bits != scalar_bits {
            return Err(r.bad(format!(
                "checkpoint stores {bits}-bit values but this run uses {scalar_bits}-bit"
            )));
        }
        Ok(r)
    }

    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.bad("parameter name is not UTF-8"))
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(n);
        if T::BITS == 32 {
            for chunk in self.bytes(n * 4)?.chunks_exact(4) {
                out.push(T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
            }
        } else {
            for chunk in self.bytes(n * 8)?.chunks_exact(8) {
                out.push(T::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
        Ok(out)
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.bad("trailing bytes after checkpoint payload"));
        }
        Ok(())
    }
}

fn write_params<T: Scalar>(w: &mut Writer, params: &ParamStore<T>) {
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.str(name);
        w.buf.push(t.requires_grad() as u8);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.values(t.data());
    }
}

fn read_params<T: Scalar>(r: &mut Reader) -> Result<ParamStore<T>> {
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let requires_grad = r.bytes(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.values::<T>(len)?;
        let tensor =
            Tensor::new(&shape, data).map_err(|e| r.bad(format!("parameter '{name}': {e}")))?;
        params.insert(&name, tensor.with_requires_grad(requires_grad));
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Model checkpoint: full training state
// ---------------------------------------------------------------------------

/// Everything needed to continue training exactly: architecture, parameters,
/// optimizer moments, and the batch sampler's generator position.
pub struct ModelCheckpoint<T: Scalar> {
    pub model: ModelConfig,
    pub steps_done: u64,
    pub train_seed: u64,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub params: ParamStore<T>,
    /// Optimizer moment slots `(name, m, v)`.
    pub slots: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    /// Capture live training state. The sampler generator is recorded by
    /// seed, stream, and position so restoring replays the exact index
    /// sequence the uninterrupted run would have drawn.
    pub fn capture(
        model: ModelConfig,
        steps_done: usize,
        train_seed: u64,
        optimizer: &Adam<T>,
        rng: &ChaCha20Rng,
        params: &ParamStore<T>,
    ) -> Self {
        ModelCheckpoint {
            model,
            steps_done: steps_done as u64,
            train_seed,
            adam: optimizer.config,
            adam_step: optimizer.step_count(),
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
            params: params.clone(),
            slots: optimizer
                .moments()
                .map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec()))
                .collect(),
        }
    }

    pub fn optimizer(&self) -> Result<Adam<T>> {
        Adam::restore(self.adam, self.adam_step, self.slots.clone())
    }

    pub fn sampler(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(KIND_MODEL, T::BITS);
        let m = &self.model;
        for d in [m.in_channels, m.crop, m.d, m.v] {
            w.u32(d as u32);
        }
        for d in m.widths {
            w.u32(d as u32);
        }
        for d in m.rel_hidden {
            w.u32(d as u32);
        }
        w.u64(self.steps_done);
        w.u64(self.train_seed);
        for x in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            w.f64(x);
        }
        w.u64(self.adam_step);
        w.buf.extend_from_slice(&self.rng_seed);
        w.u128(self.rng_word_pos);
        w.u64(self.rng_stream);
        write_params(&mut w, &self.params);
        let mut slots: Vec<_> = self.slots.iter().collect();
        slots.sort_by(|a, b| a.0.cmp(&b.0));
        w.u32(slots.len() as u32);
        for (name, m, v) in slots {
            w.str(name);
            w.u32(m.len() as u32);
            w.values(m);
            w.values(v);
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, KIND_MODEL, T::BITS)?;
        let mut dims = [0usize; 11];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let model = ModelConfig {
            in_channels: dims[0],
            crop: dims[1],
            d: dims[2],
            v: dims[3],
            widths: dims[4..9].try_into().unwrap(),
            rel_hidden: dims[9..11].try_into().unwrap(),
        };
        let steps_done = r.u64()?;
        let train_seed = r.u64()?;
        let adam =
            AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let adam_step = r.u64()?;
        let rng_seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let rng_word_pos = r.u128()?;
        let rng_stream = r.u64()?;
        let params = read_params(&mut r)?;
        let slot_count = r.u32()?;
        let mut slots = Vec::with_capacity(slot_count as usize);
        for _ in 0..slot_count {
            let name = r.str()?;
            let len = r.u32()? as usize;
            let m = r.values::<T>(len)?;
            let v = r.values::<T>(len)?;
            slots.push((name, m, v));
        }
        r.done()?;
        Ok(ModelCheckpoint {
            model,
            steps_done,
            train_seed,
            adam,
            adam_step,
            rng_seed,
            rng_word_pos,
            rng_stream,
            params,
            slots,
        })
    }
}

// ---------------------------------------------------------------------------
// Autoencoder checkpoint
// ---------------------------------------------------------------------------

/// A pretrained recording autoencoder: the encoder half seeds the recording
/// encoder of a fresh model.
pub struct AutoencoderCheckpoint<T: Scalar> {
    pub autoencoder: Autoencoder<T>,
}

impl<T: Scalar> AutoencoderCheckpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(KIND_AUTOENCODER, T::BITS);
        for t in [&self.autoencoder.encoder, &self.autoencoder.decoder] {
            w.u32(t.shape()[0] as u32);
            w.u32(t.shape()[1] as u32);
            w.values(t.data());
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, KIND_AUTOENCODER, T::BITS)?;
        let mut halves = Vec::with_capacity(2);
        for _ in 0..2 {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.values::<T>(rows * cols)?;
            halves.push(
                Tensor::new(&[rows, cols], data).map_err(|e| r.bad(e.to_string()))?,
            );
        }
        r.done()?;
        let decoder = halves.pop().unwrap();
        let encoder = halves.pop().unwrap();
        if encoder.shape()[0] != decoder.shape()[1] || encoder.shape()[1] != decoder.shape()[0] {
            return Err(r.bad(format!(
                "encoder {:?} and decoder {:?} do not mirror each other",
                encoder.shape(),
                decoder.shape()
            )));
        }
        Ok(AutoencoderCheckpoint { autoencoder: Autoencoder { encoder, decoder } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::TempDir;

    fn sample_checkpoint() -> ModelCheckpoint<f32> {
        let mc = ModelConfig { in_channels: 3, crop: 32, d: 4, v: 8, widths: [2, 2, 3, 3, 3], rel_hidden: [8, 4] };
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut params = crate::tensorcore::ParamStore::<f32>::new();
        crate::relational::init_model_params(&mut params, &mut rng, &mc);
        // Advance the generator so the captured position is not the origin.
        let _: f64 = rng.gen();
        let slots = vec![
            ("b".to_string(), vec![1.0f32, 2.0], vec![3.0, 4.0]),
            ("a".to_string(), vec![-1.0f32], vec![0.5]),
        ];
        ModelCheckpoint {
            model: mc,
            steps_done: 7,
            train_seed: 42,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            adam_step: 7,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
            params,
            slots,
        }
    }

    #[test]
    fn model_checkpoint_round_trips_byte_identically() {
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.avck");
        let p2 = dir.path().join("b.avck");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = ModelCheckpoint::<f32>::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let (b1, b2) = (fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert!(!b1.is_empty());
        assert_eq!(b1, b2, "save -> load -> save must reproduce the file");
        assert_eq!(loaded.model, ck.model);
        assert_eq!(loaded.steps_done, 7);
        assert_eq!(loaded.train_seed, 42);
        assert_eq!(loaded.rng_word_pos, ck.rng_word_pos);
        assert_eq!(loaded.params.len(), ck.params.len());
    }

    #[test]
    fn restored_sampler_continues_the_sequence() {
        let ck = sample_checkpoint();
        // The live generator that was captured...
        let mut live = ChaCha20Rng::seed_from_u64(11);
        // ...consumed the init draws plus one f64; replay that.
        let mut params = crate::tensorcore::ParamStore::<f32>::new();
        crate::relational::init_model_params(&mut params, &mut live, &ck.model);
        let _: f64 = live.gen();
        let mut restored = ck.sampler();
        for _ in 0..32 {
            assert_eq!(live.gen::<u64>(), restored.gen::<u64>());
        }
    }

    #[test]
    fn optimizer_restore_rejects_bad_slots() {
        let ok = Adam::<f32>::restore(
            AdamConfig::default(),
            3,
            vec![("w".into(), vec![1.0], vec![2.0])],
        );
        assert_eq!(ok.unwrap().step_count(), 3);
        let uneven = Adam::<f32>::restore(
            AdamConfig::default(),
            3,
            vec![("w".into(), vec![1.0], vec![2.0, 3.0])],
        );
        assert!(uneven.is_err());
        let dup = Adam::<f32>::restore(
            AdamConfig::default(),
            3,
            vec![("w".into(), vec![1.0], vec![2.0]), ("w".into(), vec![1.0], vec![2.0])],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn wrong_kind_magic_and_width_are_rejected() {
        let dir = TempDir::new().unwrap();
        let model_path = dir.path().join("model.avck");
        sample_checkpoint().save(&model_path).unwrap();
        // Kind mismatch: an autoencoder loader pointed at a model file.
        assert!(AutoencoderCheckpoint::<f32>::load(&model_path).is_err());
        // Scalar width mismatch.
        assert!(ModelCheckpoint::<f64>::load(&model_path).is_err());
        // Bad magic.
        let junk = dir.path().join("junk.avck");
        fs::write(&junk, b"NOPE____________").unwrap();
        assert!(ModelCheckpoint::<f32>::load(&junk).is_err());
        // Truncation.
        let bytes = fs::read(&model_path).unwrap();
        let cut = dir.path().join("cut.avck");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(ModelCheckpoint::<f32>::load(&cut).is_err());
        // Trailing garbage.
        let mut padded = bytes.clone();
        padded.push(0);
        let pad = dir.path().join("pad.avck");
        fs::write(&pad, &padded).unwrap();
        assert!(ModelCheckpoint::<f32>::load(&pad).is_err());
    }

    #[test]
    fn autoencoder_checkpoint_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ae.avck");
        let enc = Tensor::new(&[3, 5], (0..15).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        let dec = Tensor::new(&[5, 3], (0..15).map(|i| 0.5 - i as f32 * 0.125).collect()).unwrap();
        let ck = AutoencoderCheckpoint { autoencoder: Autoencoder { encoder: enc, decoder: dec } };
        ck.save(&path).unwrap();
        let loaded = AutoencoderCheckpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.autoencoder.encoder.data(), ck.autoencoder.encoder.data());
        assert_eq!(loaded.autoencoder.decoder.data(), ck.autoencoder.decoder.data());
        // A non-mirrored pair is rejected.
        let bad = AutoencoderCheckpoint {
            autoencoder: Autoencoder {
                encoder: Tensor::new(&[3, 5], vec![0.0f32; 15]).unwrap(),
                decoder: Tensor::new(&[4, 3], vec![0.0f32; 12]).unwrap(),
            },
        };
        let bad_path = dir.path().join("bad.avck");
        bad.save(&bad_path).unwrap();
        assert!(AutoencoderCheckpoint::<f32>::load(&bad_path).is_err());
    }
}
