//! Agent checkpoint bundle: networks, optimizers, replay contents, config
//! and RNG position. Loading a bundle resumes training bit-exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AgentNets, EpisodeRecord, Learner, ReplayBuffer, TrainConfig, Transition};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, ByteReader, ByteWriter};

const AGENT_MAGIC: &[u8; 8] = b"GPAGENT\0";

pub fn learner_to_bytes(learner: &Learner) -> Vec<u8> {
    let mut w = ByteWriter::new();
    checkpoint::write_header(&mut w, AGENT_MAGIC);
    w.str(&learner.feeder_fingerprint);
    w.str(&serde_json::to_string(&learner.config).expect("config serializes"));
    let nets = &learner.nets;
    w.f64(nets.state_center);
    w.f64(nets.state_scale);
    for net in [&nets.actor, &nets.critic, &nets.actor_target, &nets.critic_target] {
        checkpoint::encode_model(&mut w, net);
    }
    checkpoint::encode_adam(&mut w, &learner.actor_opt);
    checkpoint::encode_adam(&mut w, &learner.critic_opt);

    let buffer = &learner.buffer;
    w.usize(buffer.capacity());
    w.usize(buffer.head());
    w.usize(buffer.len());
    for t in buffer.slots() {
        w.f64s(&t.state);
        w.f64s(&t.action);
        w.f64(t.reward);
        w.f64s(&t.next_state);
        w.u8(t.terminal as u8);
    }

    w.bytes(&learner.rng.get_seed());
    w.u64(learner.rng.get_stream());
    let pos = learner.rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);

    w.usize(learner.episodes_done);
    w.u64(learner.updates);
    w.u64(learner.critic_frozen_until);
    match learner.fixed_sigma {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.f64(s);
        }
    }
    w.usize(learner.history.len());
    for r in &learner.history {
        w.usize(r.episode);
        w.f64(r.cumulative_reward);
        w.f64(r.sigma);
    }
    w.f64s(&learner.ou_state);
    w.usize(learner.bad_updates);
    w.into_bytes()
}

pub fn learner_from_bytes(bytes: &[u8]) -> Result<Learner> {
    let mut r = ByteReader::new(bytes);
    checkpoint::read_header(&mut r, AGENT_MAGIC)?;
    let feeder_fingerprint = r.str()?;
    let config: TrainConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let state_center = r.f64()?;
    let state_scale = r.f64()?;
    let actor = checkpoint::decode_model(&mut r)?;
    let critic = checkpoint::decode_model(&mut r)?;
    let actor_target = checkpoint::decode_model(&mut r)?;
    let critic_target = checkpoint::decode_model(&mut r)?;
    if !actor.same_architecture(&actor_target)
        || !critic.same_architecture(&critic_target)
        || critic.input_dim() != actor.input_dim() + actor.output_dim()
        || critic.output_dim() != 1
    {
        return Err(Error::Checkpoint("agent networks are inconsistent".into()));
    }
    let nets = AgentNets {
        actor,
        critic,
        actor_target,
        critic_target,
        state_center,
        state_scale,
    };
    let actor_opt = checkpoint::decode_adam(&mut r)?;
    let critic_opt = checkpoint::decode_adam(&mut r)?;
    let aligned = |opt: &crate::nn::AdamState, params: Vec<&nalgebra::DMatrix<f64>>| {
        opt.first_moment.len() == params.len()
            && opt
                .first_moment
                .iter()
                .zip(&params)
                .all(|(m, p)| m.shape() == p.shape())
    };
    if !aligned(&actor_opt, nets.actor.params()) || !aligned(&critic_opt, nets.critic.params()) {
        return Err(Error::Checkpoint("optimizer state does not match networks".into()));
    }

    let capacity = r.usize()?;
    let head = r.usize()?;
    let len = r.usize()?;
    let mut items = Vec::with_capacity(len.min(capacity));
    for _ in 0..len {
        items.push(Transition {
            state: r.f64s()?,
            action: r.f64s()?,
            reward: r.f64()?,
            next_state: r.f64s()?,
            terminal: r.u8()? != 0,
        });
    }
    let buffer = ReplayBuffer::from_parts(capacity, items, head)?;

    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    rng.set_word_pos(lo | (hi << 64));

    let episodes_done = r.usize()?;
    let updates = r.u64()?;
    let critic_frozen_until = r.u64()?;
    let fixed_sigma = match r.u8()? {
        0 => None,
        _ => Some(r.f64()?),
    };
    let n_hist = r.usize()?;
    let mut history = Vec::with_capacity(n_hist.min(1 << 20));
    for _ in 0..n_hist {
        history.push(EpisodeRecord {
            episode: r.usize()?,
            cumulative_reward: r.f64()?,
            sigma: r.f64()?,
        });
    }
    let ou_state = r.f64s()?;
    let bad_updates = r.usize()?;
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after agent bundle".into()));
    }
    Ok(Learner {
        nets,
        actor_opt,
        critic_opt,
        buffer,
        config,
        rng,
        episodes_done,
        updates,
        critic_frozen_until,
        fixed_sigma,
        history,
        feeder_fingerprint,
        ou_state,
        bad_updates,
        log_steps: false,
        step_log: Vec::new(),
    })
}

pub fn save_learner(learner: &Learner, path: impl AsRef<Path>) -> Result<()> {
    checkpoint::write_file(path.as_ref(), &learner_to_bytes(learner))
}

pub fn load_learner(path: impl AsRef<Path>) -> Result<Learner> {
    learner_from_bytes(&checkpoint::read_file(path.as_ref())?)
}
