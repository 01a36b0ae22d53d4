//! Single-file tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SDPK" | version u32 | entry_count u32 |
//! per entry: name_len u16 | name utf-8 | ndim u8 | dims u32 × ndim | payload f32 × prod(dims)
//! ```
//!
//! Integer metadata is stored as entries named `meta.<key>` holding the two
//! 32-bit halves (low first) of a `u64` as raw f32 bit patterns.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SDPK";
pub const VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "entry {name:?} name or rank too large"
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize)
            || dims.iter().product::<usize>() != data.len()
        {
            return Err(Error::InvalidArgument(format!(
                "entry {name:?}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate entry {name:?}")));
        }
        self.entries.push(Entry { name, dims, data });
        Ok(())
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    pub fn set_meta(&mut self, key: &str, value: u64) -> Result<()> {
        let words = [value as u32, (value >> 32) as u32].map(f32::from_bits);
        self.push(format!("{META_PREFIX}{key}"), vec![2], words.to_vec())
    }

    pub fn meta(&self, key: &str) -> Result<u64> {
        let e = self.require(&format!("{META_PREFIX}{key}"))?;
        if e.data.len() != 2 {
            return Err(Error::Format(format!("metadata {key:?} is not a u64")));
        }
        Ok(e.data[0].to_bits() as u64 | (e.data[1].to_bits() as u64) << 32)
    }

    pub fn set_meta_f64(&mut self, key: &str, value: f64) -> Result<()> {
        self.set_meta(key, value.to_bits())
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        Ok(f64::from_bits(self.meta(key)?))
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.get(&format!("{META_PREFIX}{key}")).is_some()
    }

    /// Store every parameter as `<prefix><name>`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            self.push(
                format!("{prefix}{name}"),
                t.shape().0.to_vec(),
                t.data().to_vec(),
            )?;
        }
        Ok(())
    }

    /// Overwrite every parameter of `store` from `<prefix><name>`; shapes must match.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names = store.names().to_vec();
        for (name, t) in names.iter().zip(store.tensors_mut()) {
            let e = self.require(&format!("{prefix}{name}"))?;
            if e.dims != t.shape().0 {
                return Err(Error::Format(format!(
                    "parameter {name}: stored dims {:?}, model expects {:?}",
                    e.dims,
                    t.shape().0
                )));
            }
            *t = Tensor::from_vec(t.shape(), e.data.clone())?;
        }
        Ok(())
    }

    /// Adam moments as `<prefix>m.<name>` / `<prefix>v.<name>` plus the step count.
    pub fn put_adam(&mut self, prefix: &str, store: &ParamStore, adam: &Adam) -> Result<()> {
        self.set_meta(&format!("{prefix}steps"), adam.steps())?;
        self.set_meta_f64(&format!("{prefix}lr"), adam.lr as f64)?;
        for ((name, m), v) in store
            .names()
            .iter()
            .zip(adam.first_moments())
            .zip(adam.second_moments())
        {
            self.push(format!("{prefix}m.{name}"), vec![m.len()], m.clone())?;
            self.push(format!("{prefix}v.{name}"), vec![v.len()], v.clone())?;
        }
        Ok(())
    }

    pub fn load_adam(&self, prefix: &str, store: &ParamStore) -> Result<Adam> {
        let lr = self.meta_f64(&format!("{prefix}lr"))? as f32;
        let mut adam = Adam::for_params(lr, store.tensors());
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in store.names() {
            m.push(self.require(&format!("{prefix}m.{name}"))?.data.clone());
            v.push(self.require(&format!("{prefix}v.{name}"))?.data.clone());
        }
        adam.restore(self.meta(&format!("{prefix}steps"))?, m, v)
            .map_err(|e| Error::Format(format!("optimizer state: {e}")))?;
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|e| 8 + e.name.len() + 4 * (e.dims.len() + e.data.len()))
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic (not a checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::Format(format!("entry {name:?} dims {dims:?} exceed the file"))
                })?;
            let data = r
                .take(4 * numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ck.push(name, dims, data)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ck)
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// 64-bit FNV-1a, used for config and forward-pass fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Fingerprint of the exact bit patterns of a tensor.
pub fn tensor_hash(t: &Tensor) -> u64 {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, Conv};
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(
            "a",
            vec![2, 3],
            vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 7.0],
        )
        .unwrap();
        ck.push("scalar", vec![], vec![42.0]).unwrap();
        ck.set_meta("epoch", 7).unwrap();
        ck.set_meta("hash", u64::MAX - 12345).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SDPK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta("epoch").unwrap(), 7);
        assert_eq!(back.meta("hash").unwrap(), u64::MAX - 12345);
        assert_eq!(
            back.get("a").unwrap().data[4].to_bits(),
            (-0.0f32).to_bits()
        );
    }

    #[test]
    fn entry_layout() {
        let mut ck = Checkpoint::new();
        ck.push("w", vec![2], vec![1.0, 2.0]).unwrap();
        let b = ck.to_bytes();
        let mut want = b"SDPK".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend(2f32.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn structured_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic"))
        );
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version"))
        );
        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());

        // A dimension far larger than the file.
        let mut ck = Checkpoint::new();
        ck.push("x", vec![1], vec![0.0]).unwrap();
        let mut b = ck.to_bytes();
        let dim_at = 12 + 2 + 1 + 1;
        b[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(
            matches!(Checkpoint::from_bytes(&b), Err(Error::Format(m)) if m.contains("exceed"))
        );
    }

    #[test]
    fn rejects_inconsistent_entries() {
        let mut ck = sample();
        assert!(ck.push("a", vec![1], vec![0.0]).is_err());
        assert!(ck.push("b", vec![2, 2], vec![0.0]).is_err());
        assert!(ck.meta("missing").is_err());
    }

    #[test]
    fn params_and_optimizer_state() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        Conv::same(&mut store, &mut rng, "c", 2, 3, 3).unwrap();
        let mut adam = Adam::for_params(1e-3, store.tensors());
        let grads: Vec<Option<Vec<f32>>> = store
            .tensors()
            .iter()
            .map(|t| Some(vec![0.5; t.numel()]))
            .collect();
        adam.step(store.tensors_mut(), &grads).unwrap();

        let mut ck = Checkpoint::new();
        ck.put_params("net.", &store).unwrap();
        ck.put_adam("adam.", &store, &adam).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();

        let mut fresh = ParamStore::new();
        Conv::same(&mut fresh, &mut init_rng(99), "c", 2, 3, 3).unwrap();
        back.load_params("net.", &mut fresh).unwrap();
        assert_eq!(fresh, store);
        let restored = back.load_adam("adam.", &fresh).unwrap();
        assert_eq!(restored, adam);

        let mut other = ParamStore::new();
        Conv::same(&mut other, &mut init_rng(1), "c", 2, 4, 3).unwrap();
        assert!(back.load_params("net.", &mut other).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("depthkit-ck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("x.sdpk");
        sample().save(&p).unwrap();
        assert_eq!(
            Checkpoint::load(&p).unwrap().to_bytes(),
            sample().to_bytes()
        );
        assert!(matches!(
            Checkpoint::load(&dir.join("nope")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    proptest! {
        #[test]
        fn arbitrary_entries_round_trip(
            entries in prop::collection::vec((0u32..u32::MAX, prop::collection::vec(any::<u32>(), 0..20)), 0..6)
        ) {
            let mut ck = Checkpoint::new();
            for (i, (tag, bits)) in entries.iter().enumerate() {
                let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                ck.push(format!("e{i}.{tag}"), vec![data.len()], data).unwrap();
            }
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
