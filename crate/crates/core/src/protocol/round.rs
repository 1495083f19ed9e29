use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_delta, AdapterDelta, Role};
use crate::container::{self, delta_bytes, params_bytes, params_digest};
use crate::error::{Error, Result};
use crate::merge::{merge_hierarchical, merge_sum, InputRecord, MergeOutcome, MergeReport, MergeStrategy, TiesConfig};
use crate::protocol::message::{ProtocolMessage, Status};
use crate::protocol::transport::{accept_all, channel_pair, Connection, TcpConnection};
use crate::tensor::ModelParams;
use crate::toy::model::{LoraConfig, ToyModel};
use crate::toy::train::{train_adapter, TrainConfig, TrainingSets};

/// Where retention adapters (client-uploaded and server-trained) enter the
/// update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionMode {
    /// Summed and applied after the merged unlearning update.
    #[default]
    Additive,
    /// Merged together with the unlearning adapters.
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// Listen address, e.g. `127.0.0.1:0`.
    Tcp(String),
}

/// Retention adapter trained by the server on its own data.
#[derive(Debug, Clone)]
pub struct ServerRetention {
    pub domain: String,
    pub sets: TrainingSets,
    pub train: TrainConfig,
    pub lora: LoraConfig,
}

#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub xi: f32,
    pub density: f32,
    pub server_retention: Option<ServerRetention>,
    pub retention_mode: RetentionMode,
    pub transport: TransportKind,
    /// Per-phase wait limit.
    pub timeout: Duration,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            xi: crate::similarity::DEFAULT_XI,
            density: crate::merge::DEFAULT_DENSITY,
            server_retention: None,
            retention_mode: RetentionMode::Additive,
            transport: TransportKind::InProcess,
            timeout: Duration::from_secs(120),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi.is_nan() || self.xi <= 0.0 {
            return Err(Error::InvalidThreshold(self.xi));
        }
        TiesConfig::new(self.density)?;
        if self.timeout.is_zero() {
            return Err(Error::InvalidConfig("timeout must be positive".into()));
        }
        if let Some(r) = &self.server_retention {
            r.train.validate()?;
            r.lora.validate()?;
        }
        Ok(())
    }
}

/// One adapter a client contributes.
#[derive(Debug, Clone)]
pub enum AdapterTask {
    /// Train on the broadcast model; the role follows the objective.
    Train {
        domain: String,
        sets: TrainingSets,
        train: TrainConfig,
        lora: LoraConfig,
    },
    /// Upload a ready-made adapter as is.
    Precomputed(AdapterDelta),
}

#[derive(Debug, Clone)]
pub struct ClientJob {
    pub client_id: String,
    pub tasks: Vec<AdapterTask>,
}

impl ClientJob {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            tasks: Vec::new(),
        }
    }

    pub fn with_task(mut self, task: AdapterTask) -> Self {
        self.tasks.push(task);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Expected client ids, sorted.
    pub clients: Vec<String>,
    pub retention_mode: RetentionMode,
    pub server_retention: bool,
    /// The clustered merge; its inputs include retention adapters only in
    /// clustered mode.
    pub merge: MergeReport,
    /// Retention adapters applied after the merge (additive mode).
    pub additive_retention: Vec<InputRecord>,
    pub base_digest: String,
    pub model_digest: String,
}

fn expect_params(msg: ProtocolMessage, expected: &'static str) -> Result<ModelParams> {
    match msg {
        ProtocolMessage::BroadcastModel(b) if expected == "BroadcastModel" => container::decode(&b)?.into_params(),
        ProtocolMessage::MergedModel(b) if expected == "MergedModel" => container::decode(&b)?.into_params(),
        ProtocolMessage::Error(s) => Err(Error::Remote {
            code: s.code,
            detail: s.detail,
        }),
        other => Err(Error::UnexpectedMessage {
            expected,
            got: other.tag().name(),
        }),
    }
}

fn produce(base: &ModelParams, job: &ClientJob) -> Result<Vec<AdapterDelta>> {
    job.tasks
        .iter()
        .map(|task| match task {
            AdapterTask::Train {
                domain,
                sets,
                train,
                lora,
            } => {
                let model = ToyModel::from_params(base, *lora)?;
                train_adapter(&model, sets, train, domain, &job.client_id)
            }
            AdapterTask::Precomputed(d) => Ok(d.clone()),
        })
        .collect()
}

/// Client side of one round: receive the model, train and upload adapters,
/// signal completion, and return the merged model.
pub fn run_client(conn: &mut dyn Connection, job: &ClientJob, timeout: Duration) -> Result<ModelParams> {
    let base = expect_params(conn.recv(timeout)?, "BroadcastModel")?;
    let adapters = match produce(&base, job) {
        Ok(a) => a,
        Err(e) => {
            let _ = conn.send(&ProtocolMessage::Error(Status::from_error(&e)));
            return Err(e);
        }
    };
    for delta in &adapters {
        conn.send(&ProtocolMessage::AdapterUpload(delta_bytes(delta)?))?;
    }
    conn.send(&ProtocolMessage::Ack(Status::ok("uploads complete")))?;
    debug!("client {} uploaded {} adapter(s)", job.client_id, adapters.len());
    expect_params(conn.recv(timeout)?, "MergedModel")
}

/// Receives uploads until the client's completion `Ack`.
fn collect_uploads(conn: &mut dyn Connection, timeout: Duration) -> Result<Vec<AdapterDelta>> {
    let mut uploads = Vec::new();
    loop {
        match conn.recv(timeout)? {
            ProtocolMessage::AdapterUpload(bytes) => {
                let delta = container::decode(&bytes)?.into_delta()?;
                if delta.metadata.role == Role::Merged {
                    return Err(Error::UnexpectedMessage {
                        expected: "unlearn or retain adapter",
                        got: "merged adapter",
                    });
                }
                uploads.push(delta);
            }
            ProtocolMessage::Ack(_) => return Ok(uploads),
            ProtocolMessage::Error(s) => {
                return Err(Error::Remote {
                    code: s.code,
                    detail: s.detail,
                })
            }
            other => {
                return Err(Error::UnexpectedMessage {
                    expected: "AdapterUpload or Ack",
                    got: other.tag().name(),
                })
            }
        }
    }
}

fn sorted_by_label(mut deltas: Vec<AdapterDelta>) -> Vec<AdapterDelta> {
    deltas.sort_by_key(|d| d.metadata.label());
    deltas
}

fn records(deltas: &[AdapterDelta]) -> Result<Vec<InputRecord>> {
    deltas
        .iter()
        .map(|d| {
            Ok(InputRecord {
                label: d.metadata.label(),
                digest: container::delta_digest(d)?,
            })
        })
        .collect()
}

/// Aggregates a complete, validated upload set.
fn aggregate(
    base: &ModelParams,
    uploads: BTreeMap<(String, Role), AdapterDelta>,
    expected: &BTreeSet<String>,
    cfg: &RoundConfig,
) -> Result<(ModelParams, RoundReport)> {
    let (mut unlearn, mut retain): (Vec<_>, Vec<_>) = uploads
        .into_values()
        .partition(|d| d.metadata.role == Role::Unlearn);
    if let Some(sr) = &cfg.server_retention {
        let model = ToyModel::from_params(base, sr.lora)?;
        retain.push(train_adapter(&model, &sr.sets, &sr.train, &sr.domain, "server")?);
    }
    let ties = TiesConfig::new(cfg.density)?;
    let additive = match cfg.retention_mode {
        RetentionMode::Additive => sorted_by_label(retain),
        RetentionMode::Clustered => {
            unlearn.append(&mut retain);
            Vec::new()
        }
    };
    let inputs = sorted_by_label(unlearn);
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let merged = merge_hierarchical(&inputs, cfg.xi, &ties)?;
    let outcome = MergeOutcome {
        delta: merged.delta,
        strategy: MergeStrategy::Hierarchical { xi: cfg.xi, ties },
        clustering: Some(merged.clustering),
    };
    let mut model = apply_delta(base, &outcome.delta)?;
    if !additive.is_empty() {
        model = apply_delta(&model, &merge_sum(&additive)?)?;
    }
    let report = RoundReport {
        clients: expected.iter().cloned().collect(),
        retention_mode: cfg.retention_mode,
        server_retention: cfg.server_retention.is_some(),
        merge: MergeReport::new(&inputs, &outcome)?,
        additive_retention: records(&additive)?,
        base_digest: params_digest(base)?,
        model_digest: params_digest(&model)?,
    };
    Ok((model, report))
}

/// A server-side connection and the uploads read from it.
type ConnectionUploads = (Box<dyn Connection>, Result<Vec<AdapterDelta>>);

/// Server side of one round over already-established connections, one per
/// expected client. Any failure aborts the round: every reachable client
/// receives an `Error` frame and no partial aggregate is produced.
pub fn serve_round(
    base: &ModelParams,
    conns: Vec<Box<dyn Connection>>,
    expected: &[String],
    cfg: &RoundConfig,
) -> Result<(ModelParams, RoundReport)> {
    cfg.validate()?;
    let expected: BTreeSet<String> = expected.iter().cloned().collect();
    if expected.is_empty() {
        return Err(Error::EmptyInput);
    }
    let broadcast = ProtocolMessage::BroadcastModel(params_bytes(base)?);
    let timeout = cfg.timeout;

    let results: Vec<ConnectionUploads> = thread::scope(|s| {
        let handles: Vec<_> = conns
            .into_iter()
            .map(|mut conn| {
                let broadcast = &broadcast;
                s.spawn(move || {
                    let res = conn.send(broadcast).and_then(|_| collect_uploads(conn.as_mut(), timeout));
                    (conn, res)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("connection thread")).collect()
    });

    let mut uploads: BTreeMap<(String, Role), AdapterDelta> = BTreeMap::new();
    let mut timed_out = false;
    let mut failure: Option<Error> = None;
    let mut conns = Vec::with_capacity(results.len());
    for (index, (conn, res)) in results.into_iter().enumerate() {
        match res {
            Ok(list) => {
                for d in list {
                    uploads.insert((d.metadata.client_id.clone(), d.metadata.role), d);
                }
            }
            Err(Error::Timeout(detail)) => {
                warn!("connection {index} timed out: {detail}");
                timed_out = true;
            }
            Err(e) => {
                warn!("connection {index} failed: {e}");
                failure.get_or_insert(Error::ClientFailed {
                    client: format!("connection {index}"),
                    source: Box::new(e),
                });
            }
        }
        conns.push(conn);
    }

    let present: BTreeSet<String> = uploads
        .keys()
        .filter(|(_, role)| *role == Role::Unlearn)
        .map(|(id, _)| id.clone())
        .collect();
    let missing: Vec<String> = expected.difference(&present).cloned().collect();
    let unknown = uploads.keys().map(|(id, _)| id).find(|id| !expected.contains(*id)).cloned();

    let outcome = if let Some(e) = failure {
        Err(e)
    } else if let Some(id) = unknown {
        Err(Error::UnknownClient(id))
    } else if timed_out || !missing.is_empty() {
        Err(Error::RoundAborted { missing })
    } else {
        aggregate(base, uploads, &expected, cfg)
    };

    match &outcome {
        Ok((model, report)) => {
            let merged = ProtocolMessage::MergedModel(params_bytes(model)?);
            for mut conn in conns {
                if let Err(e) = conn.send(&merged) {
                    warn!("could not deliver merged model: {e}");
                }
            }
            info!("round complete: model {}", report.model_digest);
        }
        Err(e) => {
            let status = ProtocolMessage::Error(Status::from_error(e));
            for mut conn in conns {
                let _ = conn.send(&status);
            }
        }
    }
    outcome
}

/// Runs one complete round: clients train in parallel worker threads and
/// talk to the server over the configured transport.
pub fn run_round(base: &ModelParams, clients: &[ClientJob], cfg: &RoundConfig) -> Result<(ModelParams, RoundReport)> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ids: Vec<String> = clients.iter().map(|c| c.client_id.clone()).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(Error::InvalidConfig("client ids must be unique".into()));
    }
    let timeout = cfg.timeout;

    let (server, client_results) = match &cfg.transport {
        TransportKind::InProcess => {
            let (server_ends, client_ends): (Vec<_>, Vec<_>) = clients.iter().map(|_| channel_pair()).unzip();
            thread::scope(|s| {
                let handles: Vec<_> = client_ends
                    .into_iter()
                    .zip(clients)
                    .map(|(mut conn, job)| s.spawn(move || run_client(&mut conn, job, timeout)))
                    .collect();
                let conns = server_ends.into_iter().map(|c| Box::new(c) as Box<dyn Connection>).collect();
                let server = serve_round(base, conns, &ids, cfg);
                let results: Vec<_> = handles.into_iter().map(|h| h.join().expect("client thread")).collect();
                (server, results)
            })
        }
        TransportKind::Tcp(address) => {
            let listener = TcpListener::bind(address.as_str())?;
            let addr = listener.local_addr()?;
            debug!("listening on {addr}");
            thread::scope(|s| {
                let handles: Vec<_> = clients
                    .iter()
                    .map(|job| {
                        s.spawn(move || {
                            let mut conn = TcpConnection::connect(addr, timeout)?;
                            run_client(&mut conn, job, timeout)
                        })
                    })
                    .collect();
                let server = accept_all(&listener, clients.len(), timeout).and_then(|conns| {
                    let conns = conns.into_iter().map(|c| Box::new(c) as Box<dyn Connection>).collect();
                    serve_round(base, conns, &ids, cfg)
                });
                let results: Vec<_> = handles.into_iter().map(|h| h.join().expect("client thread")).collect();
                (server, results)
            })
        }
    };

    let (model, report) = server?;
    for (id, res) in ids.iter().zip(client_results) {
        match res {
            Ok(received) if received == model => {}
            Ok(_) => {
                return Err(Error::ClientFailed {
                    client: id.clone(),
                    source: Box::new(Error::InvalidConfig("client received a different merged model".into())),
                })
            }
            Err(e) => {
                return Err(Error::ClientFailed {
                    client: id.clone(),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok((model, report))
}
