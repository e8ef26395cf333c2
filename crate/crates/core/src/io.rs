//! Binary dataset (`ACSD`) and checkpoint (`ACSC`) files, plus atomic writes.
//!
//! Both formats are little-endian: a 4-byte magic, a `u32` version, a
//! `u32`-length-prefixed JSON header, then raw `f32` payloads.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticConfig, PrefixCritic};
use crate::envs::{Dataset, DatasetMeta, Episode};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowPolicy};
use crate::ndgrad::ParamStore;
use crate::scaling::Standardizer;
use crate::train::{RunConfig, RunState};

pub const DATASET_MAGIC: &[u8; 4] = b"ACSD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACSC";
pub const FORMAT_VERSION: u32 = 1;

/// Write through a temporary sibling file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Reader { buf, pos: 0, kind }
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            self.err(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect())
    }

    fn preamble(&mut self, magic: &[u8; 4]) -> Result<&'a [u8]> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn preamble(magic: &[u8; 4], header: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + header.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len(), "header length")?;
    out.extend_from_slice(header);
    Ok(out)
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    if d.meta.num_episodes != d.episodes.len() {
        return Err(Error::InvalidArgument(format!(
            "metadata lists {} episodes, dataset has {}",
            d.meta.num_episodes,
            d.episodes.len()
        )));
    }
    let (od, ad) = (d.meta.obs_dim, d.meta.action_dim);
    let mut out = preamble(DATASET_MAGIC, &serde_json::to_vec(&d.meta)?)?;
    for ep in &d.episodes {
        let len = ep.len();
        if ep.states.len() != (len + 1) * od || ep.actions.len() != len * ad || ep.dones.len() != len {
            return Err(Error::InvalidArgument("episode arrays disagree with its length".into()));
        }
        put_u32(&mut out, len, "episode length")?;
        put_f32s(&mut out, &ep.states);
        put_f32s(&mut out, &ep.actions);
        put_f32s(&mut out, &ep.rewards);
        out.extend(ep.dones.iter().map(|&b| u8::from(b)));
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    let meta: DatasetMeta = serde_json::from_slice(r.preamble(DATASET_MAGIC)?)
        .map_err(|e| r.err(format!("metadata: {e}")))?;
    let (od, ad) = (meta.obs_dim, meta.action_dim);
    let mut episodes = Vec::with_capacity(meta.num_episodes.min(1 << 20));
    for _ in 0..meta.num_episodes {
        let len = r.u32()? as usize;
        let states = r.f32s((len + 1) * od)?;
        let actions = r.f32s(len * ad)?;
        let rewards = r.f32s(len)?;
        let dones = r
            .take(len)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                v => Err(r.err(format!("done flag {v}"))),
            })
            .collect::<Result<_>>()?;
        episodes.push(Episode {
            states,
            actions,
            rewards,
            dones,
        });
    }
    r.finish()?;
    Ok(Dataset { meta, episodes })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(d)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Name and shape of one stored parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub module: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub flow: FlowConfig,
    pub critic: CriticConfig,
    pub obs_scaler: Standardizer,
    pub action_scaler: Standardizer,
    pub has_target: bool,
    pub offline_steps: u64,
    pub env_steps: u64,
    pub blocks: Vec<BlockInfo>,
}

/// Networks restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub flow: FlowPolicy<f32>,
    pub critic: PrefixCritic<f32>,
    pub target: Option<PrefixCritic<f32>>,
}

impl Checkpoint {
    pub fn from_run(run: &RunState) -> Self {
        let mut ck = Checkpoint {
            header: CheckpointHeader {
                config_hash: run.config.hash(),
                flow: run.flow.config.clone(),
                critic: run.critic.config.clone(),
                obs_scaler: run.flow.obs_scaler.clone(),
                action_scaler: run.flow.action_scaler.clone(),
                has_target: run.target.is_some(),
                offline_steps: run.offline_steps,
                env_steps: run.env_steps,
                blocks: Vec::new(),
            },
            flow: run.flow.clone(),
            critic: run.critic.clone(),
            target: run.target.clone(),
        };
        ck.header.blocks = ck.stores().flat_map(|(m, s)| block_infos(m, s)).collect();
        ck
    }

    fn stores(&self) -> impl Iterator<Item = (&'static str, &ParamStore<f32>)> {
        [("flow", &self.flow.params), ("critic", &self.critic.params)]
            .into_iter()
            .chain(self.target.as_ref().map(|t| ("target", &t.params)))
    }

    /// Resume training from these networks with fresh optimizer moments.
    pub fn into_run_state(self, config: RunConfig, dataset: Dataset) -> Result<RunState> {
        if self.header.config_hash != config.hash() {
            log::warn!("checkpoint was written under a different config hash");
        }
        let (off, env) = (self.header.offline_steps, self.header.env_steps);
        let mut run = RunState::from_parts(config, dataset, self.flow, self.critic, self.target)?;
        run.offline_steps = off;
        run.env_steps = env;
        Ok(run)
    }
}

fn block_infos(module: &str, store: &ParamStore<f32>) -> Vec<BlockInfo> {
    store
        .entries()
        .iter()
        .map(|e| BlockInfo {
            module: module.into(),
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
        })
        .collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = preamble(CHECKPOINT_MAGIC, &serde_json::to_vec(&ck.header)?)?;
    for (_, store) in ck.stores() {
        for e in store.entries() {
            put_f32s(&mut out, e.value.data());
        }
    }
    Ok(out)
}

fn fill(store: &mut ParamStore<f32>, module: &str, infos: &[BlockInfo], r: &mut Reader<'_>) -> Result<()> {
    let expected = block_infos(module, store);
    if expected.as_slice() != infos {
        return Err(r.err(format!("{module} parameter layout differs from its config")));
    }
    for e in store.entries_mut() {
        let n = e.value.len();
        e.value.data_mut().copy_from_slice(&r.f32s(n)?);
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    let header: CheckpointHeader = serde_json::from_slice(r.preamble(CHECKPOINT_MAGIC)?)
        .map_err(|e| r.err(format!("header: {e}")))?;
    // Fresh networks supply the layout; every value is then overwritten.
    let mut dummy = ChaCha8Rng::from_seed([0; 32]);
    let mut flow = FlowPolicy::new(
        header.flow.clone(),
        header.obs_scaler.clone(),
        header.action_scaler.clone(),
        &mut dummy,
    )?;
    let mut critic = PrefixCritic::new(header.critic.clone(), header.obs_scaler.clone(), &mut dummy)?;
    let mut target = header.has_target.then(|| critic.clone());
    let by_module = |m: &str| -> Vec<BlockInfo> {
        header.blocks.iter().filter(|b| b.module == m).cloned().collect()
    };
    let known = ["flow", "critic", "target"];
    if header.blocks.iter().any(|b| !known.contains(&b.module.as_str())) {
        return Err(r.err("unknown module in block list"));
    }
    fill(&mut flow.params, "flow", &by_module("flow"), &mut r)?;
    fill(&mut critic.params, "critic", &by_module("critic"), &mut r)?;
    match target.as_mut() {
        Some(t) => fill(&mut t.params, "target", &by_module("target"), &mut r)?,
        None if !by_module("target").is_empty() => {
            return Err(r.err("target blocks listed without a target network"));
        }
        None => {}
    }
    r.finish()?;
    Ok(Checkpoint {
        header,
        flow,
        critic,
        target,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_offline_data, BehaviorConfig, MazeSpec};

    fn small_data() -> Dataset {
        generate_offline_data(&MazeSpec::l_maze(), &BehaviorConfig::default(), 3, 4)
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let d = small_data();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(&bytes[..4], b"ACSD");
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn dataset_rejects_trailing_and_truncated_bytes() {
        let mut bytes = encode_dataset(&small_data()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
        assert!(decode_dataset(b"ACSX\x01\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut d = small_data();
        d.episodes.clear();
        d.meta.num_episodes = 0;
        assert_eq!(decode_dataset(&encode_dataset(&d).unwrap()).unwrap(), d);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
