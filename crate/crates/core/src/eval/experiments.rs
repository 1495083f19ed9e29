//! Toy-scale analogues of the merging, ablation and trend experiments.
//!
//! Two synthetic worlds are used. In the near-iid world the training
//! samples of the `fictional` domain are split into a forget set and a
//! retain set; its held-out samples measure near-iid retention, and three
//! further domains measure collateral damage. The heterogeneous world has
//! three disjoint forget domains (`bio`, `cyber`, `hp`) plus `utility`.
//!
//! Adapters that a protocol round would train are trained against the base
//! model as broadcast (f32 parameters), so that baselines and the round see
//! identical inputs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adapter::{apply_delta, AdapterDelta, DeltaMetadata, Role};
use crate::error::{Error, Result};
use crate::eval::metrics::{overall, params_accuracy, MetricSet};
use crate::merge::{merge, MergeStrategy, TiesConfig, DEFAULT_DENSITY};
use crate::protocol::round::{run_round, AdapterTask, ClientJob, RetentionMode, RoundConfig, ServerRetention};
use crate::similarity::{similarity_matrix, DEFAULT_XI};
use crate::tensor::ModelParams;
use crate::toy::model::{LoraConfig, ToyModel};
use crate::toy::task::{gen_task, Dataset, DomainSpec, SyntheticTask, TaskSpec};
use crate::toy::train::{pretrain, train_adapter, train_lora, Objective, PretrainConfig, TrainConfig, TrainingSets};

pub const EXPERIMENTS: [&str; 8] = [
    "fig2-similarity",
    "tab1-iid",
    "tab2-hetero",
    "tab3-decoupled",
    "tab4-intra",
    "tab5-inter",
    "tab7-epochs",
    "tab8-forget-size",
];

const NUM_CLASSES: usize = 8;
const LR: f32 = 0.05;
/// Gradient-ascent step size in the near-iid world.
const NEAR_IID_GA_LR: f32 = 0.07;
const RMU_C: f32 = 5.0;
const RMU_EPOCHS: usize = 30;
const RETAIN_EPOCHS: usize = 10;
/// Near-iid world: share of `fictional` training samples that is forgotten.
const FORGET_FRACTION: f32 = 0.25;
const NEAR_IID_CLIENTS: usize = 5;
const NEAR_IID_GA_EPOCHS: usize = 5;
/// Clients hold a fifth of the forget set, so they take more epochs.
const CLIENT_GA_EPOCHS: usize = 12;
const FIG2_EPOCHS: usize = 3;
const TREND_EPOCHS: usize = 5;
const SMALL_FORGET_FRACTION: f32 = 0.05;

const NEAR_IID: [(&str, &[usize]); 4] = [
    ("fictional", &[0, 1]),
    ("authors", &[2, 3]),
    ("world", &[4, 5]),
    ("utility", &[6, 7]),
];
const HETERO: [(&str, &[usize]); 4] = [("bio", &[0, 1]), ("cyber", &[2, 3]), ("hp", &[4, 5]), ("utility", &[6, 7])];
const FIG2: [(&str, &[usize]); 3] = [("a", &[0, 1]), ("b", &[2, 3]), ("u", &[4, 5, 6, 7])];

const NEAR_IID_COLUMNS: [&str; 6] = ["authors", "world", "retain", "forget", "utility", "overall"];
const HETERO_COLUMNS: [&str; 5] = ["bio", "cyber", "hp", "utility", "overall"];
const INTRA_COLUMNS: [&str; 4] = ["bio", "cyber", "utility", "overall"];

/// How report values are rendered in CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// Fractions, printed as percentages.
    Fraction,
    /// Cosine similarities, printed as is.
    Cosine,
}

/// Which columns enter `overall` and with which sign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub retain: Vec<String>,
    pub unlearn: Vec<String>,
}

impl Membership {
    fn new(retain: &[&str], unlearn: &[&str]) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            retain: own(retain),
            unlearn: own(unlearn),
        }
    }

    fn metrics(&self, value: impl Fn(&str) -> Result<f64>) -> Result<MetricSet> {
        let mut m = MetricSet::new();
        for name in &self.retain {
            m = m.with_retain(name.clone(), value(name)?);
        }
        for name in &self.unlearn {
            m = m.with_unlearn(name.clone(), value(name)?);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub variant: String,
    /// `None` for the mean over all seeds.
    pub seed: Option<u64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub value_kind: ValueKind,
    pub columns: Vec<String>,
    /// Overall membership per row group.
    pub membership: BTreeMap<String, Membership>,
    pub config: serde_json::Value,
    /// SHA-256 of the compact JSON encoding of `config`.
    pub config_digest: String,
    /// Per group and variant: one row per seed, then the mean row.
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn get(&self, group: &str, variant: &str, seed: Option<u64>, column: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == column)?;
        self.rows
            .iter()
            .find(|r| r.group == group && r.variant == variant && r.seed == seed)
            .map(|r| r.values[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("group,variant,seed,{}\n", self.columns.join(","));
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            let values: Vec<String> = r
                .values
                .iter()
                .map(|v| match self.value_kind {
                    ValueKind::Fraction => format!("{:.4}", v * 100.0),
                    ValueKind::Cosine => format!("{v:.4}"),
                })
                .collect();
            out.push_str(&format!("{},{},{seed},{}\n", r.group, r.variant, values.join(",")));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Row {
    group: String,
    variant: String,
    values: Vec<f64>,
}

impl Row {
    fn new(group: &str, variant: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            group: group.into(),
            variant: variant.into(),
            values,
        }
    }
}

struct Plan {
    kind: ValueKind,
    columns: Vec<String>,
    membership: BTreeMap<String, Membership>,
    config: serde_json::Value,
    run: fn(u64) -> Result<Vec<Row>>,
}

/// Runs a named experiment once per seed (in parallel) and assembles the
/// per-seed and mean rows. Identical seed lists give identical reports.
pub fn run_experiment(name: &str, seeds: &[u64]) -> Result<ExperimentReport> {
    let plan = plan(name)?;
    if seeds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_seed: Vec<Vec<Row>> = seeds.par_iter().map(|&s| (plan.run)(s)).collect::<Result<_>>()?;

    let keys: Vec<(String, String)> = per_seed[0].iter().map(|r| (r.group.clone(), r.variant.clone())).collect();
    for rows in &per_seed {
        let same = rows.len() == keys.len()
            && rows.iter().zip(&keys).all(|(r, (g, v))| &r.group == g && &r.variant == v);
        if !same || rows.iter().any(|r| r.values.len() != plan.columns.len()) {
            return Err(Error::InvalidConfig(format!("experiment `{name}` produced inconsistent rows")));
        }
    }
    let mut rows = Vec::new();
    for (k, (group, variant)) in keys.iter().enumerate() {
        let mut mean = vec![0.0; plan.columns.len()];
        for (seed, seed_rows) in seeds.iter().zip(&per_seed) {
            let values = seed_rows[k].values.clone();
            mean.iter_mut().zip(&values).for_each(|(m, v)| *m += v);
            rows.push(ReportRow {
                group: group.clone(),
                variant: variant.clone(),
                seed: Some(*seed),
                values,
            });
        }
        mean.iter_mut().for_each(|m| *m /= seeds.len() as f64);
        rows.push(ReportRow {
            group: group.clone(),
            variant: variant.clone(),
            seed: None,
            values: mean,
        });
    }
    let config_digest = hex::encode(Sha256::digest(serde_json::to_vec(&plan.config)?));
    Ok(ExperimentReport {
        experiment: name.to_string(),
        seeds: seeds.to_vec(),
        value_kind: plan.kind,
        columns: plan.columns,
        membership: plan.membership,
        config: plan.config,
        config_digest,
        rows,
    })
}

fn columns(c: &[&str]) -> Vec<String> {
    c.iter().map(|s| s.to_string()).collect()
}

fn near_iid_membership() -> Membership {
    Membership::new(&["authors", "world", "retain", "utility"], &["forget"])
}

fn hetero_membership() -> Membership {
    Membership::new(&["utility"], &["bio", "cyber", "hp"])
}

fn intra_membership(target: &str) -> Membership {
    let other = if target == "bio" { "cyber" } else { "bio" };
    Membership::new(&[other, "utility"], &[target])
}

fn one_group(group: &str, m: Membership) -> BTreeMap<String, Membership> {
    BTreeMap::from([(group.to_string(), m)])
}

fn plan(name: &str) -> Result<Plan> {
    let near_iid_world = json!({ "domains": spec(&NEAR_IID, 0).domains });
    let hetero_world = json!({ "domains": spec(&HETERO, 0).domains });
    let common = json!({
        "task_defaults": spec(&[], 0),
        "pretrain": pretrain_config(0),
        "lora": lora(0),
        "seed_derivation": "task, pretrain and LoRA init use the run seed; adapter k uses seed * 1009 + k",
    });
    let p = match name {
        "fig2-similarity" => Plan {
            kind: ValueKind::Cosine,
            columns: columns(&FIG2_LABELS),
            membership: BTreeMap::new(),
            config: json!({
                "common": common,
                "world": { "domains": spec(&FIG2, 0).domains },
                "ga": ga(FIG2_EPOCHS),
                "retain": retain(FIG2_EPOCHS),
                "adapters": {
                    "ga_a1": "GA on iid half 0 of a", "ga_a2": "GA on iid half 1 of a",
                    "ga_b": "GA on all of b", "retain_a": "RETAIN on iid half 1 of a",
                },
            }),
            run: fig2_seed,
        },
        "tab1-iid" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&NEAR_IID_COLUMNS),
            membership: one_group("near_iid", near_iid_membership()),
            config: json!({
                "common": common,
                "world": near_iid_world,
                "forget_fraction": FORGET_FRACTION,
                "clients": NEAR_IID_CLIENTS,
                "ga": near_iid_ga(CLIENT_GA_EPOCHS),
                "server_retention": retain(RETAIN_EPOCHS),
                "baselines": "merge all unlearning adapters and the retention adapter",
                "fulm": { "xi": DEFAULT_XI, "density": DEFAULT_DENSITY, "retention_mode": RetentionMode::Additive, "transport": "in_process" },
            }),
            run: tab1_seed,
        },
        "tab2-hetero" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&HETERO_COLUMNS),
            membership: one_group("hetero", hetero_membership()),
            config: json!({
                "common": common,
                "world": hetero_world,
                "adapters": "bio and cyber: 2 iid halves each; hp: whole domain",
                "rmu": rmu(),
                "ties_density": DEFAULT_DENSITY,
                "fulm": { "xi": DEFAULT_XI, "density": DEFAULT_DENSITY, "transport": "in_process" },
            }),
            run: tab2_seed,
        },
        "tab3-decoupled" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&NEAR_IID_COLUMNS),
            membership: one_group("near_iid", near_iid_membership()),
            config: json!({
                "common": common,
                "world": near_iid_world,
                "forget_fraction": FORGET_FRACTION,
                "gd": gd(NEAR_IID_GA_EPOCHS),
                "fulm_sum": { "ga": near_iid_ga(NEAR_IID_GA_EPOCHS), "retain": retain(RETAIN_EPOCHS) },
            }),
            run: tab3_seed,
        },
        "tab4-intra" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&INTRA_COLUMNS),
            membership: BTreeMap::from([
                ("cyber".to_string(), intra_membership("cyber")),
                ("bio".to_string(), intra_membership("bio")),
            ]),
            config: json!({
                "common": common,
                "world": hetero_world,
                "adapters_per_domain": 3,
                "rmu": rmu(),
                "ties_density": DEFAULT_DENSITY,
            }),
            run: tab4_seed,
        },
        "tab5-inter" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&HETERO_COLUMNS),
            membership: one_group("hetero", hetero_membership()),
            config: json!({
                "common": common,
                "world": hetero_world,
                "centroids": "TIES over 3 iid adapters for bio and cyber; one whole-domain adapter for hp",
                "rmu": rmu(),
                "ties_density": DEFAULT_DENSITY,
            }),
            run: tab5_seed,
        },
        "tab7-epochs" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&NEAR_IID_COLUMNS),
            membership: one_group("near_iid", near_iid_membership()),
            config: json!({
                "common": common,
                "world": near_iid_world,
                "forget_fraction": FORGET_FRACTION,
                "ga": near_iid_ga(TREND_EPOCHS),
            }),
            run: tab7_seed,
        },
        "tab8-forget-size" => Plan {
            kind: ValueKind::Fraction,
            columns: columns(&NEAR_IID_COLUMNS),
            membership: one_group("near_iid", near_iid_membership()),
            config: json!({
                "common": common,
                "world": near_iid_world,
                "forget_fractions": [FORGET_FRACTION, SMALL_FORGET_FRACTION],
                "ga": near_iid_ga(TREND_EPOCHS),
            }),
            run: tab8_seed,
        },
        other => return Err(Error::UnknownExperiment(other.to_string())),
    };
    Ok(p)
}

fn spec(domains: &[(&str, &[usize])], seed: u64) -> TaskSpec {
    TaskSpec {
        num_classes: NUM_CLASSES,
        domains: domains
            .iter()
            .map(|(name, classes)| DomainSpec {
                name: name.to_string(),
                classes: classes.to_vec(),
                anchor: None,
            })
            .collect(),
        ..TaskSpec::two_domain(seed)
    }
}

fn pretrain_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        seed,
        ..Default::default()
    }
}

fn lora(seed: u64) -> LoraConfig {
    LoraConfig {
        init_seed: seed,
        ..Default::default()
    }
}

fn train_config(objective: Objective, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: LR,
        epochs,
        ..TrainConfig::new(objective)
    }
}

fn ga(epochs: usize) -> TrainConfig {
    train_config(Objective::Ga, epochs)
}

fn near_iid_ga(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: NEAR_IID_GA_LR,
        ..ga(epochs)
    }
}

fn retain(epochs: usize) -> TrainConfig {
    train_config(Objective::Retain, epochs)
}

fn gd(epochs: usize) -> TrainConfig {
    train_config(Objective::Gd { lambda: 1.0 }, epochs)
}

fn rmu() -> TrainConfig {
    train_config(
        Objective::Rmu {
            c: RMU_C,
            raw_uniform: false,
        },
        RMU_EPOCHS,
    )
}

fn seeded(cfg: TrainConfig, seed: u64, k: u64) -> TrainConfig {
    TrainConfig {
        seed: seed.wrapping_mul(1009).wrapping_add(k),
        ..cfg
    }
}

/// A generated task plus the base model as clients would receive it.
struct World {
    task: SyntheticTask,
    params: ModelParams,
    base: ToyModel,
    lora: LoraConfig,
}

impl World {
    fn new(domains: &[(&str, &[usize])], seed: u64) -> Result<Self> {
        let task = gen_task(&spec(domains, seed))?;
        let params = pretrain(&task.pretrain, NUM_CLASSES, &pretrain_config(seed))?.to_params()?;
        let lora = lora(seed);
        let base = ToyModel::from_params(&params, lora)?;
        Ok(Self {
            task,
            params,
            base,
            lora,
        })
    }

    fn train(&self, data: Dataset, cfg: TrainConfig, domain: &str, id: &str) -> Result<AdapterDelta> {
        train_adapter(&self.base, &TrainingSets::single(data), &cfg, domain, id)
    }

    fn train_task(&self, data: Dataset, cfg: TrainConfig, domain: &str) -> AdapterTask {
        AdapterTask::Train {
            domain: domain.to_string(),
            sets: TrainingSets::single(data),
            train: cfg,
            lora: self.lora,
        }
    }

    fn eval(&self, params: &ModelParams, domain: &str) -> Result<f64> {
        params_accuracy(params, self.task.eval_split(domain)?)
    }

    fn merged(&self, deltas: &[AdapterDelta], strategy: MergeStrategy) -> Result<ModelParams> {
        apply_delta(&self.params, &merge(deltas, strategy)?.delta)
    }

    fn train_split(&self, domain: &str) -> Result<&Dataset> {
        self.task.train_split(domain)
    }
}

fn ties() -> Result<MergeStrategy> {
    Ok(MergeStrategy::Ties(TiesConfig::new(DEFAULT_DENSITY)?))
}

/// Values for `cols` (the last being `overall`) under `membership`.
fn score(cols: &[&str], membership: &Membership, value: impl Fn(&str) -> Result<f64>) -> Result<Vec<f64>> {
    let metrics = membership.metrics(&value)?;
    let mut out = cols[..cols.len() - 1]
        .iter()
        .map(|c| metrics.get(c).map_or_else(|| value(c), Ok))
        .collect::<Result<Vec<_>>>()?;
    out.push(overall(&metrics)?);
    Ok(out)
}

const FIG2_LABELS: [&str; 4] = ["ga_a1", "ga_a2", "ga_b", "retain_a"];

fn fig2_seed(seed: u64) -> Result<Vec<Row>> {
    let w = World::new(&FIG2, seed)?;
    let a = w.train_split("a")?;
    let (a1, a2) = (a.split_iid(2, 0, seed)?, a.split_iid(2, 1, seed)?);
    let deltas = [
        w.train(a1, seeded(ga(FIG2_EPOCHS), seed, 1), "a", "ga_a1")?,
        w.train(a2.clone(), seeded(ga(FIG2_EPOCHS), seed, 2), "a", "ga_a2")?,
        w.train(w.train_split("b")?.clone(), seeded(ga(FIG2_EPOCHS), seed, 3), "b", "ga_b")?,
        w.train(a2, seeded(retain(FIG2_EPOCHS), seed, 4), "a", "retain_a")?,
    ];
    let m = similarity_matrix(&deltas)?;
    Ok(FIG2_LABELS
        .iter()
        .enumerate()
        .map(|(i, label)| Row::new("similarity", *label, (0..m.len()).map(|j| f64::from(m.get(i, j))).collect()))
        .collect())
}

/// Near-iid world with the forget/retain split of `fictional`.
fn near_iid(seed: u64, fraction: f32) -> Result<(World, Dataset, Dataset)> {
    let w = World::new(&NEAR_IID, seed)?;
    let (forget, retain) = w.train_split("fictional")?.split_fraction(fraction, seed)?;
    Ok((w, forget, retain))
}

fn near_iid_row(w: &World, forget: &Dataset, params: &ModelParams, variant: &str) -> Result<Row> {
    let values = score(&NEAR_IID_COLUMNS, &near_iid_membership(), |c| match c {
        "forget" => params_accuracy(params, forget),
        "retain" => w.eval(params, "fictional"),
        d => w.eval(params, d),
    })?;
    Ok(Row::new("near_iid", variant, values))
}

fn tab1_seed(seed: u64) -> Result<Vec<Row>> {
    let (w, forget, retain_set) = near_iid(seed, FORGET_FRACTION)?;
    let mut jobs = Vec::new();
    let mut deltas = Vec::new();
    for i in 0..NEAR_IID_CLIENTS {
        let id = format!("client_{}", i + 1);
        let shard = forget.split_iid(NEAR_IID_CLIENTS, i, seed)?;
        let cfg = seeded(near_iid_ga(CLIENT_GA_EPOCHS), seed, i as u64 + 1);
        deltas.push(w.train(shard.clone(), cfg, "fictional", &id)?);
        jobs.push(ClientJob::new(id).with_task(w.train_task(shard, cfg, "fictional")));
    }
    let retain_cfg = seeded(retain(RETAIN_EPOCHS), seed, 100);
    deltas.push(w.train(retain_set.clone(), retain_cfg, "fictional", "server")?);
    let round = RoundConfig {
        server_retention: Some(ServerRetention {
            domain: "fictional".into(),
            sets: TrainingSets::single(retain_set),
            train: retain_cfg,
            lora: w.lora,
        }),
        ..RoundConfig::default()
    };
    let (fulm, _) = run_round(&w.params, &jobs, &round)?;

    let mut rows = vec![near_iid_row(&w, &forget, &w.params, "pretrained")?];
    for (variant, strategy) in [("ties", ties()?), ("sum", MergeStrategy::Sum), ("avg", MergeStrategy::Avg)] {
        rows.push(near_iid_row(&w, &forget, &w.merged(&deltas, strategy)?, variant)?);
    }
    rows.push(near_iid_row(&w, &forget, &fulm, "fulm")?);
    Ok(rows)
}

fn tab3_seed(seed: u64) -> Result<Vec<Row>> {
    let (w, forget, retain_set) = near_iid(seed, FORGET_FRACTION)?;
    let gd_sets = TrainingSets {
        data: vec![forget.clone()],
        retain: Some(retain_set.clone()),
    };
    let gd_delta = train_adapter(&w.base, &gd_sets, &seeded(gd(NEAR_IID_GA_EPOCHS), seed, 1), "fictional", "gd")?;
    let pair = [
        w.train(forget.clone(), seeded(near_iid_ga(NEAR_IID_GA_EPOCHS), seed, 1), "fictional", "ga")?,
        w.train(retain_set, seeded(retain(RETAIN_EPOCHS), seed, 2), "fictional", "retain")?,
    ];
    Ok(vec![
        near_iid_row(&w, &forget, &w.params, "pretrained")?,
        near_iid_row(&w, &forget, &apply_delta(&w.params, &gd_delta)?, "gd")?,
        near_iid_row(&w, &forget, &w.merged(&pair, MergeStrategy::Sum)?, "fulm_sum")?,
    ])
}

fn tab7_seed(seed: u64) -> Result<Vec<Row>> {
    let (w, forget, _) = near_iid(seed, FORGET_FRACTION)?;
    let mut rows = vec![near_iid_row(&w, &forget, &w.params, "pretrained")?];
    train_lora(
        &w.base,
        &TrainingSets::single(forget.clone()),
        &seeded(near_iid_ga(TREND_EPOCHS), seed, 1),
        |epoch, model| {
            let params = apply_delta(&w.params, &model.adapter(DeltaMetadata::new(Role::Unlearn, "fictional", "ga"))?)?;
            rows.push(near_iid_row(&w, &forget, &params, &format!("epoch_{epoch}"))?);
            Ok(())
        },
    )?;
    Ok(rows)
}

fn tab8_seed(seed: u64) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for fraction in [FORGET_FRACTION, SMALL_FORGET_FRACTION] {
        let (w, forget, _) = near_iid(seed, fraction)?;
        if rows.is_empty() {
            rows.push(near_iid_row(&w, &forget, &w.params, "pretrained")?);
        }
        let delta = w.train(forget.clone(), seeded(near_iid_ga(TREND_EPOCHS), seed, 1), "fictional", "ga")?;
        let variant = format!("forget_{:02}", (fraction * 100.0).round() as u32);
        rows.push(near_iid_row(&w, &forget, &apply_delta(&w.params, &delta)?, &variant)?);
    }
    Ok(rows)
}

fn hetero_world(seed: u64) -> Result<World> {
    World::new(&HETERO, seed)
}

fn hetero_row(w: &World, params: &ModelParams, variant: &str) -> Result<Row> {
    let values = score(&HETERO_COLUMNS, &hetero_membership(), |d| w.eval(params, d))?;
    Ok(Row::new("hetero", variant, values))
}

/// RMU adapters on `parts` iid shards of `domain` (the whole domain when
/// `parts` is 1), with adapter seeds starting at `k0`.
fn rmu_adapters(w: &World, seed: u64, domain: &str, parts: usize, k0: u64) -> Result<Vec<(String, Dataset, TrainConfig)>> {
    let data = w.train_split(domain)?;
    (0..parts)
        .map(|i| {
            let id = if parts == 1 {
                domain.to_string()
            } else {
                format!("{domain}_{}", i + 1)
            };
            Ok((id, data.split_iid(parts, i, seed)?, seeded(rmu(), seed, k0 + i as u64)))
        })
        .collect()
}

fn tab2_seed(seed: u64) -> Result<Vec<Row>> {
    let w = hetero_world(seed)?;
    let mut specs = rmu_adapters(&w, seed, "bio", 2, 1)?;
    specs.extend(rmu_adapters(&w, seed, "cyber", 2, 11)?);
    specs.extend(rmu_adapters(&w, seed, "hp", 1, 21)?);

    let mut deltas = Vec::new();
    let mut jobs = Vec::new();
    for (id, data, cfg) in specs {
        let domain = id.split('_').next().unwrap_or(&id).to_string();
        deltas.push(w.train(data.clone(), cfg, &domain, &id)?);
        jobs.push(ClientJob::new(id).with_task(w.train_task(data, cfg, &domain)));
    }
    let (fulm, _) = run_round(&w.params, &jobs, &RoundConfig::default())?;

    let mut rows = vec![hetero_row(&w, &w.params, "pretrained")?];
    for (variant, strategy) in [("avg", MergeStrategy::Avg), ("ties", ties()?), ("sum", MergeStrategy::Sum)] {
        rows.push(hetero_row(&w, &w.merged(&deltas, strategy)?, variant)?);
    }
    rows.push(hetero_row(&w, &fulm, "fulm")?);
    Ok(rows)
}

fn tab4_seed(seed: u64) -> Result<Vec<Row>> {
    let w = hetero_world(seed)?;
    let mut rows = Vec::new();
    for (target, k0) in [("cyber", 11), ("bio", 1)] {
        let membership = intra_membership(target);
        let row = |params: &ModelParams, variant: &str| -> Result<Row> {
            let values = score(&INTRA_COLUMNS, &membership, |d| w.eval(params, d))?;
            Ok(Row::new(target, variant, values))
        };
        rows.push(row(&w.params, "pretrained")?);
        let mut deltas = Vec::new();
        for (id, data, cfg) in rmu_adapters(&w, seed, target, 3, k0)? {
            let d = w.train(data, cfg, target, &id)?;
            rows.push(row(&apply_delta(&w.params, &d)?, &id)?);
            deltas.push(d);
        }
        for (variant, strategy) in [("avg", MergeStrategy::Avg), ("ties", ties()?), ("sum", MergeStrategy::Sum)] {
            rows.push(row(&w.merged(&deltas, strategy)?, variant)?);
        }
    }
    Ok(rows)
}

fn tab5_seed(seed: u64) -> Result<Vec<Row>> {
    let w = hetero_world(seed)?;
    let mut rows = vec![hetero_row(&w, &w.params, "pretrained")?];
    let mut centroids = Vec::new();
    for (domain, parts, k0) in [("cyber", 3, 11), ("bio", 3, 1), ("hp", 1, 21)] {
        let deltas = rmu_adapters(&w, seed, domain, parts, k0)?
            .into_iter()
            .map(|(id, data, cfg)| w.train(data, cfg, domain, &id))
            .collect::<Result<Vec<_>>>()?;
        let centroid = if deltas.len() == 1 {
            deltas.into_iter().next().expect("one adapter")
        } else {
            merge(&deltas, ties()?)?.delta
        };
        rows.push(hetero_row(&w, &apply_delta(&w.params, &centroid)?, domain)?);
        centroids.push(centroid);
    }
    for (variant, strategy) in [("avg", MergeStrategy::Avg), ("ties", ties()?), ("sum", MergeStrategy::Sum)] {
        rows.push(hetero_row(&w, &w.merged(&centroids, strategy)?, variant)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_experiment() {
        assert!(matches!(run_experiment("tab9", &[0]), Err(Error::UnknownExperiment(_))));
        assert!(matches!(run_experiment("tab1-iid", &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn csv_layout_and_mean_rows() {
        let r = run_experiment("tab8-forget-size", &[0, 1]).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "group,variant,seed,authors,world,retain,forget,utility,overall");
        assert_eq!(csv.lines().count(), 1 + 3 * 3);
        let mean = r.get("near_iid", "forget_25", None, "retain").unwrap();
        let a = r.get("near_iid", "forget_25", Some(0), "retain").unwrap();
        let b = r.get("near_iid", "forget_25", Some(1), "retain").unwrap();
        assert!((mean - (a + b) / 2.0).abs() < 1e-12);
        assert!(csv.lines().nth(3).unwrap().starts_with("near_iid,pretrained,mean,"));
        assert_eq!(r.config_digest.len(), 64);
    }
}
