//! Named parameter storage with seeded initialization and the binary
//! checkpoint format (per tensor: name length, name bytes, rank, dims as
//! little-endian u32, then an f32 payload).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Add uniform noise in [-scale, scale] to every scalar. Useful to move
    /// a freshly initialized model off exact ReLU kinks and ties before a
    /// finite-difference check.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand::distributions::Uniform::new_inclusive(-scale, scale);
        for (_, t) in self.iter_mut() {
            for v in &mut t.data {
                *v += dist.sample(&mut rng);
            }
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            self.entries
                .insert(name.to_string(), ParamTensor { shape: shape.to_vec(), data })
                .is_none(),
            "duplicate parameter name '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamTensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.data.len()).sum()
    }

    /// Round every value through f32, matching what a checkpoint round-trip
    /// produces.
    pub fn rounded_f32(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(
                name,
                &t.shape,
                t.data.iter().map(|&v| v as f32 as f64).collect(),
            );
        }
        out
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load(r: &mut impl Read) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Schema("checkpoint: non-utf8 tensor name".into()))?;
            r.read_exact(&mut len4)?;
            let rank = u32::from_le_bytes(len4) as usize;
            if rank > 4 {
                return Err(Error::Schema(format!("checkpoint: rank {rank} > 4")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut len4)?;
                shape.push(u32::from_le_bytes(len4) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut len4)?;
                data.push(f32::from_le_bytes(len4) as f64);
            }
            store.insert(&name, &shape, data);
        }
        Ok(store)
    }

    pub fn load_file(path: &std::path::Path) -> Result<ParamStore> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        ParamStore::load(&mut f)
    }
}

/// Seeded parameter initializer. Weights get uniform Glorot fan-in/fan-out
/// scaling, biases zero.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = rand::distributions::Uniform::new_inclusive(-bound, bound);
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        store.insert(name, &[fan_in, fan_out], data);
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) {
        store.insert(name, shape, vec![0.0; shape.iter().product()]);
    }

    pub fn ones(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) {
        store.insert(name, shape, vec![1.0; shape.iter().product()]);
    }

    pub fn conv3x3(&mut self, store: &mut ParamStore, name: &str, cin: usize, cout: usize) {
        let fan_in = cin * 9;
        let bound = (6.0 / (fan_in + cout * 9) as f64).sqrt();
        let dist = rand::distributions::Uniform::new_inclusive(-bound, bound);
        let data: Vec<f64> = (0..cout * cin * 9)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        store.insert(name, &[cout, cin, 3, 3], data);
    }
}
