//! Checkpoint persistence: a `DMDFLASH1` magic line, a JSON header carrying
//! the config echo and all scalar state, then fixed-order little-endian
//! 64-bit float arrays. Round-trips are byte-identical.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::Phase;
use crate::models::{freeze_reference, DenoiserNet, DiscriminatorNet};
use crate::numerics::{AdamState, Rng, RngState, Tensor};
use crate::trainer::{Session, TrainState, UpdateCounts};

pub const MAGIC: &[u8; 9] = b"DMDFLASH1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptHeader {
    step_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    iteration: u64,
    rl_step: u64,
    phase: Phase,
    rng: RngState,
    counts: UpdateCounts,
    opt_gen: OptHeader,
    opt_psi: OptHeader,
    opt_disc: OptHeader,
    /// Present once the preference phase has started.
    opt_gen_rl: Option<OptHeader>,
    has_p_ref: bool,
    /// Payload manifest: (name, element count) in serialization order.
    arrays: Vec<(String, u64)>,
}

struct PayloadBuilder {
    arrays: Vec<(String, u64)>,
    data: Vec<u8>,
}

impl PayloadBuilder {
    fn new() -> Self {
        PayloadBuilder {
            arrays: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, values: &[f64]) {
        self.arrays.push((name.to_string(), values.len() as u64));
        for v in values {
            self.data.extend_from_slice(&v.to_le_bits().to_le_bytes());
        }
    }

    fn push_tensors(&mut self, prefix: &str, tensors: &[Tensor]) {
        for (i, t) in tensors.iter().enumerate() {
            self.push(&format!("{prefix}.{i}"), t.data());
        }
    }

    fn push_adam(&mut self, prefix: &str, opt: &AdamState) {
        for (i, m) in opt.m.iter().enumerate() {
            self.push(&format!("{prefix}.m.{i}"), m);
        }
        for (i, v) in opt.v.iter().enumerate() {
            self.push(&format!("{prefix}.v.{i}"), v);
        }
    }
}

trait F64Bits {
    fn to_le_bits(&self) -> u64;
}

impl F64Bits for f64 {
    fn to_le_bits(&self) -> u64 {
        self.to_bits()
    }
}

/// Serialize a training state (with its config echo) to bytes.
pub fn encode(config: &RunConfig, state: &TrainState) -> Result<Vec<u8>> {
    let mut payload = PayloadBuilder::new();
    payload.push_tensors("gen", state.gen.params());
    payload.push_tensors("psi", state.psi.params());
    payload.push_tensors("disc.trunk", state.disc.trunk_params());
    payload.push_tensors("disc.heads", state.disc.head_params());
    if let Some(p_ref) = &state.p_ref {
        payload.push_tensors("p_ref", p_ref.params());
    }
    payload.push_adam("opt_gen", &state.opt_gen);
    payload.push_adam("opt_psi", &state.opt_psi);
    payload.push_adam("opt_disc", &state.opt_disc);
    if let Some(opt) = &state.opt_gen_rl {
        payload.push_adam("opt_gen_rl", opt);
    }

    let header = Header {
        version: VERSION,
        config: config.clone(),
        iteration: state.iteration,
        rl_step: state.rl_step,
        phase: state.phase,
        rng: state.rng.state(),
        counts: state.counts,
        opt_gen: OptHeader {
            step_count: state.opt_gen.step_count,
        },
        opt_psi: OptHeader {
            step_count: state.opt_psi.step_count,
        },
        opt_disc: OptHeader {
            step_count: state.opt_disc.step_count,
        },
        opt_gen_rl: state.opt_gen_rl.as_ref().map(|o| OptHeader {
            step_count: o.step_count,
        }),
        has_p_ref: state.p_ref.is_some(),
        arrays: payload.arrays.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.data.len());
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload.data);
    Ok(out)
}

struct PayloadReader<'a> {
    arrays: std::slice::Iter<'a, (String, u64)>,
    data: &'a [u8],
    offset: usize,
}

impl PayloadReader<'_> {
    fn take(&mut self, expect: &str) -> Result<Vec<f64>> {
        let (name, len) = self
            .arrays
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing array {expect}")))?;
        if name != expect {
            return Err(Error::Checkpoint(format!(
                "array order mismatch: expected {expect}, found {name}"
            )));
        }
        let n = *len as usize;
        let bytes = n * 8;
        if self.offset + bytes > self.data.len() {
            return Err(Error::Checkpoint("payload truncated".into()));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let start = self.offset + i * 8;
            let raw: [u8; 8] = self.data[start..start + 8].try_into().unwrap();
            out.push(f64::from_bits(u64::from_le_bytes(raw)));
        }
        self.offset += bytes;
        Ok(out)
    }

    fn fill_tensors(&mut self, prefix: &str, tensors: &mut [Tensor]) -> Result<()> {
        for (i, t) in tensors.iter_mut().enumerate() {
            let values = self.take(&format!("{prefix}.{i}"))?;
            if values.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "array {prefix}.{i} has {} elements, expected {}",
                    values.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    fn fill_adam(&mut self, prefix: &str, opt: &mut AdamState) -> Result<()> {
        for (i, m) in opt.m.iter_mut().enumerate() {
            let values = self.take(&format!("{prefix}.m.{i}"))?;
            if values.len() != m.len() {
                return Err(Error::Checkpoint(format!("{prefix}.m.{i} length mismatch")));
            }
            m.copy_from_slice(&values);
        }
        for (i, v) in opt.v.iter_mut().enumerate() {
            let values = self.take(&format!("{prefix}.v.{i}"))?;
            if values.len() != v.len() {
                return Err(Error::Checkpoint(format!("{prefix}.v.{i} length mismatch")));
            }
            v.copy_from_slice(&values);
        }
        Ok(())
    }
}

/// Parse bytes back into a session and training state.
pub fn decode(bytes: &[u8]) -> Result<(Session, TrainState)> {
    if bytes.len() < MAGIC.len() + 5 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if bytes[MAGIC.len()] != b'\n' {
        return Err(Error::Checkpoint("bad magic terminator".into()));
    }
    let len_start = MAGIC.len() + 1;
    let header_len =
        u32::from_le_bytes(bytes[len_start..len_start + 4].try_into().unwrap()) as usize;
    let header_start = len_start + 4;
    if bytes.len() < header_start + header_len {
        return Err(Error::Checkpoint("header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..header_start + header_len])
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            found: header.version,
        });
    }
    let session = Session::new(header.config.clone())?;
    let cfg = &session.config;

    // materialize shapes, then overwrite every value from the payload
    let mut scratch = Rng::new(0, 0);
    let mut gen = DenoiserNet::init(cfg.net_arch(), &mut scratch)?;
    let mut psi = gen.clone();
    let mut disc = DiscriminatorNet::init(cfg.disc_arch(), &mut scratch)?;
    let mut p_ref = header.has_p_ref.then(|| freeze_reference(&gen));
    let mut opt_gen = AdamState::new(cfg.adam(cfg.train.lr_gen), gen.params());
    let mut opt_psi = AdamState::new(cfg.adam(cfg.train.lr_psi), psi.params());
    let mut opt_disc = AdamState::new(cfg.adam(cfg.train.lr_disc), disc.head_params());
    let mut opt_gen_rl = header
        .opt_gen_rl
        .is_some()
        .then(|| AdamState::new(cfg.adam(cfg.train.lr_gen), gen.params()));

    let mut reader = PayloadReader {
        arrays: header.arrays.iter(),
        data: &bytes[header_start + header_len..],
        offset: 0,
    };
    reader.fill_tensors("gen", gen.params_mut())?;
    reader.fill_tensors("psi", psi.params_mut())?;
    reader.fill_tensors("disc.trunk", disc.trunk_params_mut())?;
    reader.fill_tensors("disc.heads", disc.head_params_mut())?;
    if let Some(p_ref) = &mut p_ref {
        reader.fill_tensors("p_ref", p_ref.params_mut())?;
    }
    reader.fill_adam("opt_gen", &mut opt_gen)?;
    reader.fill_adam("opt_psi", &mut opt_psi)?;
    reader.fill_adam("opt_disc", &mut opt_disc)?;
    if let Some(opt) = &mut opt_gen_rl {
        reader.fill_adam("opt_gen_rl", opt)?;
    }
    if reader.arrays.next().is_some() {
        return Err(Error::Checkpoint("unread arrays in manifest".into()));
    }
    if reader.offset != bytes.len() - header_start - header_len {
        return Err(Error::Checkpoint("trailing bytes in payload".into()));
    }
    opt_gen.step_count = header.opt_gen.step_count;
    opt_psi.step_count = header.opt_psi.step_count;
    opt_disc.step_count = header.opt_disc.step_count;
    if let (Some(opt), Some(h)) = (&mut opt_gen_rl, &header.opt_gen_rl) {
        opt.step_count = h.step_count;
    }

    let state = TrainState {
        iteration: header.iteration,
        rl_step: header.rl_step,
        phase: header.phase,
        gen,
        psi,
        disc,
        p_ref,
        opt_gen,
        opt_psi,
        opt_disc,
        opt_gen_rl,
        rng: Rng::restore(&header.rng),
        counts: header.counts,
    };
    Ok((session, state))
}

pub fn save(path: &Path, config: &RunConfig, state: &TrainState) -> Result<()> {
    let bytes = encode(config, state)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Session, TrainState)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Trainer;

    fn small_trainer() -> Trainer {
        let mut cfg = RunConfig::default();
        cfg.max_iters = 4;
        cfg.eval_interval = 10;
        cfg.checkpoint_interval = 10;
        cfg.train.batch_size = 8;
        cfg.rl.updates = 3;
        cfg.rl.groups_per_update = 2;
        Trainer::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut trainer = small_trainer();
        for _ in 0..5 {
            trainer.step().unwrap();
        }
        let bytes = encode(&trainer.session.config, &trainer.state).unwrap();
        let (session, state) = decode(&bytes).unwrap();
        let again = encode(&session.config, &state).unwrap();
        assert_eq!(bytes, again);
        assert!(state.p_ref.is_some());
        assert_eq!(state.iteration, trainer.state.iteration);
        assert_eq!(state.rl_step, trainer.state.rl_step);
        assert_eq!(state.counts, trainer.state.counts);
    }

    #[test]
    fn resumed_state_continues_identically() {
        // run 6 updates straight vs checkpoint at 3 and resume for 3 more
        let mut straight = small_trainer();
        for _ in 0..6 {
            straight.step().unwrap();
        }
        let mut first = small_trainer();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let bytes = encode(&first.session.config, &first.state).unwrap();
        let (session, state) = decode(&bytes).unwrap();
        let mut resumed = Trainer::from_parts(session, state);
        for _ in 0..3 {
            resumed.step().unwrap();
        }
        let flat = |s: &TrainState| -> Vec<f64> {
            s.gen
                .params()
                .iter()
                .chain(s.psi.params())
                .chain(s.disc.head_params())
                .flat_map(|p| p.data().to_vec())
                .collect()
        };
        assert_eq!(flat(&straight.state), flat(&resumed.state));
        assert_eq!(straight.state.rng.state(), resumed.state.rng.state());
        assert_eq!(straight.state.counts, resumed.state.counts);
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let trainer = small_trainer();
        let mut bytes = encode(&trainer.session.config, &trainer.state).unwrap();
        // bump the version integer inside the JSON header
        let json_start = MAGIC.len() + 5;
        let text = String::from_utf8_lossy(&bytes[json_start..]).to_string();
        let patched = text.replacen("\"version\":1", "\"version\":9", 1);
        assert_ne!(text, patched);
        bytes.splice(json_start.., patched.into_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::CheckpointVersion {
                expected: 1,
                found: 9
            })
        ));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let trainer = small_trainer();
        let mut bytes = encode(&trainer.session.config, &trainer.state).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let trainer = small_trainer();
        let bytes = encode(&trainer.session.config, &trainer.state).unwrap();
        assert!(decode(&bytes[..bytes.len() - 16]).is_err());
    }

    #[test]
    fn config_echo_survives() {
        let trainer = small_trainer();
        let bytes = encode(&trainer.session.config, &trainer.state).unwrap();
        let (session, _) = decode(&bytes).unwrap();
        assert_eq!(session.config, trainer.session.config);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_0.bin");
        let trainer = small_trainer();
        save(&path, &trainer.session.config, &trainer.state).unwrap();
        let (_, state) = load(&path).unwrap();
        let bytes_a = encode(&trainer.session.config, &trainer.state).unwrap();
        let bytes_b = encode(&trainer.session.config, &state).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}
