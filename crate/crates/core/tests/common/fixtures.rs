//! Protocol fixtures: simulations, precomputed uploads and misbehaving
//! clients.

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use fulm_core::container;
use fulm_core::protocol::round::{serve_round, AdapterTask, ClientJob, RoundConfig, RoundReport};
use fulm_core::protocol::{accept_all, channel_pair, run_client, Connection, Simulation, SimulationSpec, TcpConnection};
use fulm_core::{AdapterDelta, DeltaMetadata, Error, ModelParams, Result, Role, TensorF32};
use rand::Rng;

use super::rng;

pub const TIMEOUT: Duration = Duration::from_secs(60);

/// Three clients over a two-domain task: two GA shards of `A` and one RMU
/// adapter on `B`, plus an optional server retention adapter on `B`.
pub fn simulation(seed: u64, retention: bool) -> Simulation {
    let retention = if retention {
        r#", "server_retention": {"domain": "B", "train": {"objective": {"kind": "retain"}, "epochs": 2}}"#
    } else {
        ""
    };
    let json = format!(
        r#"{{
        "task": {{"domains": [{{"name": "A", "classes": [0, 1, 2, 3]}}, {{"name": "B", "classes": [4, 5, 6, 7]}}],
                  "train_per_class": 60, "eval_per_class": 20}},
        "pretrain": {{"epochs": 3}},
        "clients": [
            {{"id": "a1", "adapters": [{{"domain": "A", "train": {{"objective": {{"kind": "ga"}}, "epochs": 2, "seed": 1}},
                                         "select": {{"kind": "shard", "index": 0, "parts": 2}}}}]}},
            {{"id": "a2", "adapters": [{{"domain": "A", "train": {{"objective": {{"kind": "ga"}}, "epochs": 2, "seed": 2}},
                                         "select": {{"kind": "shard", "index": 1, "parts": 2}}}}]}},
            {{"id": "b", "adapters": [{{"domain": "B", "train": {{"objective": {{"kind": "rmu", "c": 5.0}}, "epochs": 2, "seed": 3}}}}]}}
        ]{retention}
    }}"#
    );
    let mut spec: SimulationSpec = serde_json::from_str(&json).unwrap();
    spec.reseed(seed);
    spec.build().unwrap()
}

pub fn round_config(sim: &Simulation) -> RoundConfig {
    RoundConfig {
        server_retention: sim.server_retention.clone(),
        retention_mode: sim.retention_mode,
        timeout: TIMEOUT,
        ..RoundConfig::default()
    }
}

/// Random dense delta shaped like the toy model's `w1` and `w2`.
pub fn toy_shaped_delta(base: &ModelParams, seed: u64, client: &str, scale: f32) -> AdapterDelta {
    let mut r = rng(seed);
    let mut d = AdapterDelta::new(DeltaMetadata::new(Role::Unlearn, "toy", client));
    for name in ["w1", "w2"] {
        let shape = base.get(name).unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| scale * r.random_range(-1.0f32..1.0)).collect();
        d = d.with_dense(name, TensorF32::new(shape, data).unwrap());
    }
    d
}

pub fn zero_delta(base: &ModelParams, client: &str) -> AdapterDelta {
    toy_shaped_delta(base, 0, client, 0.0)
}

pub fn precomputed(client: &str, delta: AdapterDelta) -> ClientJob {
    ClientJob::new(client).with_task(AdapterTask::Precomputed(delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// A well-framed upload whose container starts with the wrong magic.
    BadMagic,
    /// A frame with an unknown type tag.
    BadTag,
    /// A frame that ends before its declared payload length.
    Truncated,
}

fn misbehave(conn: &mut dyn Connection, fault: Fault, base: &ModelParams) -> Result<()> {
    conn.recv(TIMEOUT)?;
    match fault {
        Fault::BadMagic => {
            let mut bytes = container::delta_bytes(&zero_delta(base, "faulty"))?;
            bytes[0..4].copy_from_slice(b"XXXX");
            conn.send(&fulm_core::protocol::ProtocolMessage::AdapterUpload(bytes))
        }
        Fault::BadTag => {
            let mut frame = 99u32.to_le_bytes().to_vec();
            frame.extend_from_slice(&0u64.to_le_bytes());
            conn.send_bytes(&frame)
        }
        Fault::Truncated => {
            let mut frame = 2u32.to_le_bytes().to_vec();
            frame.extend_from_slice(&100u64.to_le_bytes());
            frame.extend_from_slice(&[0u8; 10]);
            conn.send_bytes(&frame)
        }
    }
}

/// Outcome of a round with one misbehaving participant.
pub struct FaultyRound {
    pub server: Result<(ModelParams, RoundReport)>,
    /// What each well-behaved client saw.
    pub clients: Vec<Result<ModelParams>>,
}

/// Runs one round over in-process channels or TCP in which one participant
/// (expected as `faulty`) sends `fault` instead of a valid upload, then
/// hangs up.
pub fn faulty_round(fault: Fault, tcp: bool) -> FaultyRound {
    let base = fulm_core::toy::ToyModel::init(4, 5, 3, 1, Default::default()).unwrap().to_params().unwrap();
    let jobs: Vec<ClientJob> = (0..2)
        .map(|i| {
            let id = format!("good{i}");
            precomputed(&id, toy_shaped_delta(&base, i, &id, 0.1))
        })
        .collect();
    let mut expected: Vec<String> = jobs.iter().map(|j| j.client_id.clone()).collect();
    expected.push("faulty".into());
    let cfg = RoundConfig {
        timeout: TIMEOUT,
        ..RoundConfig::default()
    };
    let base = &base;

    thread::scope(|s| {
        if tcp {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = listener.local_addr().unwrap();
            let good: Vec<_> = jobs
                .iter()
                .map(|job| {
                    s.spawn(move || {
                        let mut conn = TcpConnection::connect(addr, TIMEOUT)?;
                        run_client(&mut conn, job, TIMEOUT)
                    })
                })
                .collect();
            let bad = s.spawn(move || {
                let mut conn = TcpConnection::connect(addr, TIMEOUT)?;
                misbehave(&mut conn, fault, base)
            });
            let conns = accept_all(&listener, 3, TIMEOUT).unwrap();
            let server = serve_round(
                base,
                conns.into_iter().map(|c| Box::new(c) as Box<dyn Connection>).collect(),
                &expected,
                &cfg,
            );
            let _ = bad.join().unwrap();
            FaultyRound {
                server,
                clients: good.into_iter().map(|h| h.join().unwrap()).collect(),
            }
        } else {
            let mut server_ends: Vec<Box<dyn Connection>> = Vec::new();
            let mut good = Vec::new();
            for job in &jobs {
                let (srv, mut cli) = channel_pair();
                server_ends.push(Box::new(srv));
                good.push(s.spawn(move || run_client(&mut cli, job, TIMEOUT)));
            }
            let (srv, mut cli) = channel_pair();
            server_ends.push(Box::new(srv));
            let bad = s.spawn(move || misbehave(&mut cli, fault, base));
            let server = serve_round(base, server_ends, &expected, &cfg);
            let _ = bad.join().unwrap();
            FaultyRound {
                server,
                clients: good.into_iter().map(|h| h.join().unwrap()).collect(),
            }
        }
    })
}

/// The framing or container error behind a failed round.
pub fn root_code(result: &Result<(ModelParams, RoundReport)>) -> Option<fulm_core::ErrorCode> {
    match result {
        Err(e @ Error::ClientFailed { .. }) => Some(e.root().code()),
        _ => None,
    }
}
