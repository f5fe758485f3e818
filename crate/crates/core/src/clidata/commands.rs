//! One function per subcommand. Each takes a fully resolved config and
//! echoes it into its output directory.

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_model, save_model};
use super::dataset::{
    create_dir, read_dataset, read_nodes, read_prepared, read_splits, stored_hops, write_dataset, write_hops,
    write_json, NodeData, SPLITS,
};
use crate::datagen::{generate, SynthSpec};
use crate::encoder::AttnScale;
use crate::error::{Error, Result};
use crate::graphprep::{build_csr, normalize_sym, propagate};
use crate::heads::{LossWeights, StScope};
use crate::model::{gradient_check, randomize_params, ModelConfig, NtsFormer};
use crate::numkit::GradCheckReport;
use crate::seqbuild::{build_sequence, MissFlags};
use crate::trainer::{
    evaluate, history_csv, partition, precompute, train, training_graph, Dataset, EvalReport, TrainConfig,
    Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub out: PathBuf,
    pub n: usize,
    pub classes: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub mu_text: f64,
    pub mu_visual: f64,
    pub sigma: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            out: "data".into(),
            n: s.n,
            classes: s.classes,
            d_t: s.d_t,
            d_v: s.d_v,
            p_in: s.p_in,
            p_out: s.p_out,
            mu_text: s.mu_text,
            mu_visual: s.mu_visual,
            sigma: s.sigma,
            seed: s.seed,
            deterministic: false,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            n: self.n,
            classes: self.classes,
            d_t: self.d_t,
            d_v: self.d_v,
            p_in: self.p_in,
            p_out: self.p_out,
            mu_text: self.mu_text,
            mu_visual: self.mu_visual,
            sigma: self.sigma,
            seed: self.seed,
        }
    }
}

pub fn run_synth(cfg: &SynthConfig) -> Result<()> {
    let data = generate(&cfg.spec())?;
    write_dataset(
        &cfg.out,
        &Dataset {
            x_t: data.x_t,
            x_v: data.x_v,
            labels: data.labels,
            edges: data.edges,
        },
    )?;
    write_json(&cfg.out.join("synth_config.json"), cfg)?;
    info!("wrote {} nodes to {}", cfg.n, cfg.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecomputeConfig {
    pub data: PathBuf,
    pub k: usize,
    pub seed: u64,
    pub stratify: bool,
    /// Draw a new split even when `splits.json` exists.
    pub resplit: bool,
    pub deterministic: bool,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            k: 2,
            seed: 1,
            stratify: true,
            resplit: false,
            deterministic: false,
        }
    }
}

/// Splits the nodes (unless a split is stored) and propagates both
/// modalities over the training graph.
pub fn run_precompute(cfg: &PrecomputeConfig) -> Result<()> {
    let data = read_dataset(&cfg.data)?;
    let n = data.labels.len();
    let split_path = cfg.data.join(SPLITS);
    let graph = if split_path.exists() && !cfg.resplit {
        let split = read_splits(&split_path, n)?;
        training_graph(&split, &data.edges)?
    } else {
        let (split, graph) = partition(n, &data.labels, &data.edges, cfg.seed, cfg.stratify)?;
        write_json(&split_path, &split)?;
        graph
    };
    let prep = precompute(&graph, &data.x_t, &data.x_v, &data.labels, cfg.k, !cfg.deterministic)?;
    write_hops(&cfg.data, &prep)?;
    write_json(&cfg.data.join("precompute_config.json"), cfg)?;
    info!("wrote {} hops per modality under {}", cfg.k, cfg.data.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCliConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: Variant,
    pub k: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub scale: AttnScale,
    pub experts: usize,
    pub k_hat: usize,
    pub dropout_in: f64,
    pub dropout_hidden: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub moe_weight: f64,
    pub p_miss: f64,
    pub st_scope: StScope,
    pub patience: usize,
    pub target_train_acc: Option<f64>,
    pub seed: u64,
    pub stratify: bool,
    pub deterministic: bool,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = &t.model;
        Self {
            data: "data".into(),
            out: "run".into(),
            variant: Variant::Full,
            k: m.k,
            dim: m.hidden_dim,
            layers: m.layers,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            scale: m.scale,
            experts: m.experts,
            k_hat: m.k_hat,
            dropout_in: m.dropout_in,
            dropout_hidden: m.dropout_hidden,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            moe_weight: t.moe_weight,
            p_miss: t.p_miss,
            st_scope: t.st_scope,
            patience: t.patience,
            target_train_acc: t.target_train_acc,
            seed: t.seed,
            stratify: t.stratify,
            deterministic: t.deterministic,
        }
    }
}

impl TrainCliConfig {
    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            patience: self.patience,
            lambda: self.lambda,
            moe_weight: self.moe_weight,
            p_miss: self.p_miss,
            st_scope: self.st_scope,
            lr: self.lr,
            weight_decay: self.weight_decay,
            stratify: self.stratify,
            deterministic: self.deterministic,
            target_train_acc: self.target_train_acc,
            model: ModelConfig {
                k: self.k,
                hidden_dim: self.dim,
                layers: self.layers,
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                scale: self.scale,
                experts: self.experts,
                k_hat: self.k_hat,
                dropout_in: self.dropout_in,
                dropout_hidden: self.dropout_hidden,
                ..ModelConfig::default()
            },
        };
        self.variant.apply(&base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_acc: f64,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

/// Hop stacks for `k`, computing them first when the stored ones are
/// missing or were built for another hop count.
fn ensure_hops(cfg: &TrainCliConfig, nodes: &NodeData) -> Result<crate::trainer::Prepared> {
    if stored_hops(&cfg.data)? != Some(cfg.k) {
        info!("no stored hops for k={}; running precompute", cfg.k);
        run_precompute(&PrecomputeConfig {
            data: cfg.data.clone(),
            k: cfg.k,
            seed: cfg.seed,
            stratify: cfg.stratify,
            resplit: false,
            deterministic: cfg.deterministic,
        })?;
    }
    read_prepared(&cfg.data, nodes)
}

pub fn run_train(cfg: &TrainCliConfig) -> Result<TrainSummary> {
    let nodes = read_nodes(&cfg.data)?;
    let prep = ensure_hops(cfg, &nodes)?;
    let split = read_splits(&cfg.data.join(SPLITS), nodes.labels.len())?;
    let out = train(&prep, &split, &cfg.train_config())?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("train_config.json"), cfg)?;
    let checkpoint = cfg.out.join("model.ckpt");
    save_model(&checkpoint, &out.model)?;
    let history = cfg.out.join("history.csv");
    std::fs::write(&history, history_csv(&out.history)).map_err(|e| Error::io(&history, e))?;
    let summary = TrainSummary {
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        best_val_acc: out.history[out.best_epoch - 1].val_acc,
        checkpoint,
        history,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub split: EvalSplit,
    /// Directory for `report.json`; stdout only when unset.
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoint: Path::new("run").join("model.ckpt"),
            split: EvalSplit::Test,
            out: None,
            seed: 1,
            deterministic: false,
        }
    }
}

/// Student accuracy per miss condition. Reads self features, labels and
/// the split; never the edges.
pub fn run_eval(cfg: &EvalConfig) -> Result<EvalReport> {
    let model = load_model(&cfg.checkpoint)?;
    let nodes = read_nodes(&cfg.data)?;
    let split = read_splits(&cfg.data.join(SPLITS), nodes.labels.len())?;
    let set = match cfg.split {
        EvalSplit::Test => &split.test,
        EvalSplit::Validation => &split.validation,
    };
    let report = evaluate(&model, &nodes.x_t, &nodes.x_v, &nodes.labels, set)?;
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_json(&out.join("eval_config.json"), cfg)?;
        write_json(&out.join("report.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub nodes: usize,
    pub d_in: usize,
    pub classes: usize,
    pub k: usize,
    pub dim: usize,
    pub experts: usize,
    pub k_hat: usize,
    pub layers: usize,
    pub heads: usize,
    pub samples: usize,
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            d_in: 8,
            classes: 3,
            k: 2,
            dim: 32,
            experts: 3,
            k_hat: 2,
            layers: 2,
            heads: 2,
            samples: 200,
            step: crate::numkit::DEFAULT_STEP,
            threshold: 1e-4,
            seed: 1,
            out: None,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub threshold: f64,
    pub passed: bool,
}

/// Full-loss gradient check on a small random graph at a random parameter
/// point. Fails with a numeric error above the threshold.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    let spec = SynthSpec {
        n: cfg.nodes,
        classes: cfg.classes,
        d_t: cfg.d_in,
        d_v: cfg.d_in,
        p_in: 0.6,
        p_out: 0.2,
        seed: cfg.seed,
        ..SynthSpec::default()
    };
    let data = generate(&spec)?;
    let a_hat = normalize_sym(&build_csr(cfg.nodes, &data.edges)?);
    let st = propagate(&a_hat, &data.x_t, cfg.k)?;
    let sv = propagate(&a_hat, &data.x_v, cfg.k)?;
    let mut batch = build_sequence(&data.x_t, &data.x_v, &st, &sv, cfg.k)?;
    batch.miss_flags = (0..cfg.nodes)
        .map(|i| [MissFlags::NONE, MissFlags::TEXT, MissFlags::VISUAL][i % 3])
        .collect();
    // every other node unlabeled so both loss paths are exercised
    let labels: Vec<i64> = data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| if i % 2 == 0 { y } else { -1 })
        .collect();
    let mcfg = ModelConfig {
        d_in: cfg.d_in,
        classes: cfg.classes,
        k: cfg.k,
        hidden_dim: cfg.dim,
        layers: cfg.layers,
        heads: cfg.heads,
        experts: cfg.experts,
        k_hat: cfg.k_hat,
        ..ModelConfig::default()
    };
    let mut model = NtsFormer::new(mcfg, cfg.seed)?;
    randomize_params(&mut model.params, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37));
    let report: GradCheckReport = gradient_check(
        &model,
        &batch,
        &labels,
        &LossWeights::default(),
        cfg.step,
        cfg.samples,
        cfg.seed,
    )?;
    let summary = GradcheckSummary {
        checked: report.checked,
        max_rel_err: report.max_rel_err,
        worst_param: report.worst.as_ref().map(|w| w.param.clone()),
        threshold: cfg.threshold,
        passed: report.max_rel_err < cfg.threshold,
    };
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck_config.json"), cfg)?;
        write_json(&out.join("gradcheck.json"), &summary)?;
    }
    if !summary.passed {
        return Err(Error::Numeric(format!(
            "max relative gradient error {:.3e} exceeds {:.1e} (worst: {:?})",
            summary.max_rel_err, cfg.threshold, report.worst
        )));
    }
    Ok(summary)
}
