use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{io_err, TrainError};
use crate::arch::{BlockGraph, ExecutableNet, InitPolicy};
use crate::tensor::{RunningStats, Sgd, SgdConfig, Shape4, Tensor4};
use crate::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SHLF";

/// Position of a ChaCha8 stream.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training. Tensor names carry a section
/// prefix: `param/`, `bn/<layer>/mean`, `bn/<layer>/var`, `opt/`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub arch_json: String,
    pub iteration: u64,
    pub sgd: SgdConfig,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor4<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(net: &ExecutableNet<T>, opt: &Sgd<T>, iteration: u64) -> Self {
        let store = net.store();
        let mut tensors = Vec::new();
        for (_, p) in store.iter() {
            tensors.push((format!("param/{}", p.key), p.value.clone()));
        }
        for (name, s) in net.bn_stats() {
            let c = s.mean.len();
            let t = |v: &[T]| Tensor4::from_vec(Shape4::new(1, c, 1, 1), v.to_vec()).expect("length matches");
            tensors.push((format!("bn/{name}/mean"), t(&s.mean)));
            tensors.push((format!("bn/{name}/var"), t(&s.var)));
        }
        for (id, v) in opt.velocities() {
            tensors.push((format!("opt/{}", store.get(id).key), v.clone()));
        }
        Self {
            version: CHECKPOINT_VERSION,
            arch_json: net.graph().to_json(),
            iteration,
            sgd: opt.config,
            rng: RngState::capture(net.rng()),
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Option<&Tensor4<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies the saved state into `net` and `opt`. Everything is checked
    /// before anything is written.
    pub fn restore(&self, net: &mut ExecutableNet<T>, opt: &mut Sgd<T>) -> Result<(), TrainError> {
        let graph = BlockGraph::from_json(&self.arch_json)?;
        if &graph != net.graph() {
            return Err(TrainError::Incompatible(format!(
                "architecture hash {} differs from the network's {}",
                graph.hash(),
                net.graph().hash()
            )));
        }
        let lookup = |name: String, shape: Shape4| -> Result<Tensor4<T>, TrainError> {
            let t = self.tensor(&name).ok_or_else(|| TrainError::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(TrainError::Incompatible(format!("{name} has shape {} but the network needs {shape}", t.shape())));
            }
            Ok(t.clone())
        };
        let mut params = Vec::new();
        let mut velocities = Vec::new();
        for (id, p) in net.store().iter() {
            params.push((id, lookup(format!("param/{}", p.key), p.value.shape())?));
            let opt_name = format!("opt/{}", p.key);
            if self.tensor(&opt_name).is_some() {
                velocities.push((id, lookup(opt_name, p.value.shape())?));
            }
        }
        let mut stats = Vec::new();
        for (name, s) in net.bn_stats() {
            let shape = Shape4::new(1, s.mean.len(), 1, 1);
            let mean = lookup(format!("bn/{name}/mean"), shape)?.into_vec();
            let var = lookup(format!("bn/{name}/var"), shape)?.into_vec();
            stats.push((name.clone(), RunningStats { mean, var }));
        }
        for (id, v) in params {
            net.store_mut().get_mut(id).value = v;
        }
        for (name, s) in stats {
            net.bn_stats_mut().insert(name, s);
        }
        *opt = Sgd::new(self.sgd);
        for (id, v) in velocities {
            opt.set_velocity(id, v);
        }
        net.set_rng(self.rng.restore());
        Ok(())
    }

    /// A fresh network and optimizer holding the saved state.
    pub fn instantiate(&self) -> Result<(ExecutableNet<T>, Sgd<T>), TrainError> {
        let graph = BlockGraph::from_json(&self.arch_json)?;
        let mut net = ExecutableNet::instantiate(graph, InitPolicy::default(), 0)?;
        let mut opt = Sgd::new(self.sgd);
        self.restore(&mut net, &mut opt)?;
        Ok((net, opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.arch_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.arch_json.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.sgd.momentum.to_le_bytes());
        out.extend_from_slice(&self.sgd.weight_decay.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE_TAG);
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(TrainError::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(TrainError::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let json_len = r.u64()? as usize;
        let arch_json = String::from_utf8(r.take(json_len)?.to_vec())
            .map_err(|_| TrainError::Corrupt("architecture JSON is not UTF-8".into()))?;
        let iteration = r.u64()?;
        let sgd = SgdConfig {
            momentum: f64::from_le_bytes(r.array()?),
            weight_decay: f64::from_le_bytes(r.array()?),
        };
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| TrainError::Corrupt("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            if tag != T::DTYPE_TAG {
                return Err(TrainError::Incompatible(format!(
                    "tensor {name} has dtype tag {tag}, expected {} for {}",
                    T::DTYPE_TAG,
                    T::NAME
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u64()? as usize;
            }
            let shape = Shape4::from(dims);
            let raw = r.take(shape.numel().checked_mul(T::BYTES).ok_or_else(|| TrainError::Corrupt("tensor too large".into()))?)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor4::from_vec(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(TrainError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            version,
            arch_json,
            iteration,
            sgd,
            rng,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TrainError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), TrainError> {
    fs::write(path, ckpt.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}
