use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::round::{AdapterTask, ClientJob, RetentionMode, ServerRetention};
use crate::tensor::ModelParams;
use crate::toy::model::LoraConfig;
use crate::toy::task::{gen_task, Dataset, SyntheticTask, TaskSpec};
use crate::toy::train::{pretrain, Objective, PretrainConfig, TrainConfig, TrainingSets};

/// Which training samples of a domain an adapter sees. Shuffles use the
/// task seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSelection {
    #[default]
    All,
    /// Shard `index` of `parts` near-equal iid shards.
    Shard { index: usize, parts: usize },
    /// A random fraction of the samples.
    Fraction { fraction: f32 },
}

impl DataSelection {
    pub fn select(&self, data: &Dataset, seed: u64) -> Result<Dataset> {
        match *self {
            DataSelection::All => Ok(data.clone()),
            DataSelection::Shard { index, parts } => data.split_iid(parts, index, seed),
            DataSelection::Fraction { fraction } => data.subsample(fraction, seed),
        }
    }
}

/// One adapter to train on a slice of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub domain: String,
    pub train: TrainConfig,
    #[serde(default)]
    pub select: DataSelection,
    /// Retain side of the GD objective (all training samples of it).
    #[serde(default)]
    pub retain_domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    pub adapters: Vec<AdapterSpec>,
}

/// A complete simulated round: task, base-model pretraining, clients and
/// optional server retention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub task: TaskSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub server_retention: Option<AdapterSpec>,
    #[serde(default)]
    pub retention_mode: RetentionMode,
}

/// Everything `run_round` needs.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub task: SyntheticTask,
    pub base: ModelParams,
    pub clients: Vec<ClientJob>,
    pub server_retention: Option<ServerRetention>,
    pub retention_mode: RetentionMode,
}

impl SimulationSpec {
    /// Sets the task, pretraining and LoRA-init seeds to `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.pretrain.seed = seed;
        self.lora.init_seed = seed;
    }

    fn sets(&self, task: &SyntheticTask, spec: &AdapterSpec) -> Result<TrainingSets> {
        let data = spec.select.select(task.train_split(&spec.domain)?, task.spec.seed)?;
        let retain = match (&spec.train.objective, &spec.retain_domain) {
            (Objective::Gd { .. }, Some(r)) => Some(task.train_split(r)?.clone()),
            (Objective::Gd { .. }, None) => {
                return Err(Error::InvalidConfig(format!(
                    "GD adapter on `{}` needs a retain_domain",
                    spec.domain
                )))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidConfig("retain_domain is only used by GD".into()));
            }
            (_, None) => None,
        };
        Ok(TrainingSets {
            data: vec![data],
            retain,
        })
    }

    /// Generates the task, pretrains the base model and prepares jobs.
    pub fn build(&self) -> Result<Simulation> {
        if self.clients.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.lora.validate()?;
        let task = gen_task(&self.task)?;
        let base = pretrain(&task.pretrain, self.task.num_classes, &self.pretrain)?.to_params()?;
        let clients = self
            .clients
            .iter()
            .map(|c| {
                c.adapters.iter().try_fold(ClientJob::new(c.id.clone()), |job, a| {
                    Ok(job.with_task(AdapterTask::Train {
                        domain: a.domain.clone(),
                        sets: self.sets(&task, a)?,
                        train: a.train,
                        lora: self.lora,
                    }))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let server_retention = self
            .server_retention
            .as_ref()
            .map(|a| -> Result<ServerRetention> {
                Ok(ServerRetention {
                    domain: a.domain.clone(),
                    sets: self.sets(&task, a)?,
                    train: a.train,
                    lora: self.lora,
                })
            })
            .transpose()?;
        Ok(Simulation {
            task,
            base,
            clients,
            server_retention,
            retention_mode: self.retention_mode,
        })
    }
}
