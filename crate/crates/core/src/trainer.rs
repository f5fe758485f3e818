//! Cold-start data protocol, the training loop and evaluation.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphprep::{
    build_csr, normalize_sym, pad_features, propagate_with, CsrGraph, FeatureMatrix, HopStack,
};
use crate::heads::{argmax_rows, LossWeights, StScope};
use crate::model::{forward, loss_terms, ForwardOptions, ModelConfig, NtsFormer, StudentMode};
use crate::numkit::{store_grads, AdamW, AdamWConfig, Binder, Tape};
use crate::seqbuild::{build_sequence_for, draw_train_flags, MissFlags};

/// Which modality a cold-start node is evaluated without.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissGroup {
    TextMiss,
    VisualMiss,
    NoMiss,
}

impl MissGroup {
    pub const ALL: [MissGroup; 3] = [MissGroup::TextMiss, MissGroup::VisualMiss, MissGroup::NoMiss];

    pub fn flags(self) -> MissFlags {
        match self {
            MissGroup::TextMiss => MissFlags::TEXT,
            MissGroup::VisualMiss => MissFlags::VISUAL,
            MissGroup::NoMiss => MissFlags::NONE,
        }
    }
}

/// Node partition for one seed. Cold-start sets carry their miss group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n: usize,
    pub labeled_train: Vec<usize>,
    pub unlabeled_train: Vec<usize>,
    pub validation: Vec<(usize, MissGroup)>,
    pub test: Vec<(usize, MissGroup)>,
}

impl SplitSpec {
    pub fn train_nodes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.labeled_train.iter().chain(&self.unlabeled_train).copied().collect();
        all.sort_unstable();
        all
    }

    /// Checks disjointness and coverage of `[0, n)`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n];
        let ids = self
            .labeled_train
            .iter()
            .chain(&self.unlabeled_train)
            .chain(self.validation.iter().map(|(i, _)| i))
            .chain(self.test.iter().map(|(i, _)| i));
        for &i in ids {
            if i >= self.n || seen[i] {
                return Err(Error::input("splits", format!("node {i} is out of range or listed twice")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::input("splits", format!("node {i} belongs to no split")));
        }
        Ok(())
    }
}

/// Split sizes for `n` nodes: 10% validation, 10% test, 60% unlabeled and
/// the remainder labeled.
pub fn split_sizes(n: usize) -> (usize, usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    let unlabeled = n * 6 / 10;
    (n - val - test - unlabeled, unlabeled, val, test)
}

const MIN_STRATUM: usize = 5;

fn assign_groups<R: Rng>(rng: &mut R, nodes: &[usize]) -> Vec<(usize, MissGroup)> {
    let mut shuffled = nodes.to_vec();
    shuffled.shuffle(rng);
    let mut out: Vec<(usize, MissGroup)> = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, MissGroup::ALL[i % 3]))
        .collect();
    out.sort_unstable();
    out
}

/// Stratified random split and the training graph restricted to edges with
/// both ends in the training set. Nodes labeled −1 always land in the
/// unlabeled training set.
pub fn partition(
    n: usize,
    labels: &[i64],
    edges: &[(usize, usize)],
    seed: u64,
    stratify: bool,
) -> Result<(SplitSpec, CsrGraph)> {
    if n < 10 {
        return Err(Error::input("n", format!("need at least 10 nodes, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::input("labels", format!("{} labels for {n} nodes", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_lab, _, n_val, n_test) = split_sizes(n);
    let mut strata: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let mut unknown = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 {
            unknown.push(i);
        } else {
            strata.entry(y).or_default().push(i);
        }
    }
    let known: usize = strata.values().map(Vec::len).sum();
    if known < n_lab + n_val + n_test {
        return Err(Error::input(
            "labels",
            format!("{known} labeled nodes cannot fill {n_lab}/{n_val}/{n_test} labeled/validation/test"),
        ));
    }
    // Each node gets a sort key in [0, 1): its rank within its class spread
    // evenly, so any prefix of the order is close to class-proportional.
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(known);
    for (class, members) in &mut strata {
        members.shuffle(&mut rng);
        let small = !stratify || members.len() < MIN_STRATUM;
        if stratify && members.len() < MIN_STRATUM {
            warn!("class {class} has {} nodes; splitting it unstratified", members.len());
        }
        let offset: f64 = rng.random();
        let m = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            let key = if small { rng.random() } else { (r as f64 + offset) / m };
            keyed.push((key, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let mut labeled_train = order[..n_lab].to_vec();
    let val = &order[n_lab..n_lab + n_val];
    let test = &order[n_lab + n_val..n_lab + n_val + n_test];
    let mut unlabeled_train: Vec<usize> = order[n_lab + n_val + n_test..].iter().chain(&unknown).copied().collect();
    labeled_train.sort_unstable();
    unlabeled_train.sort_unstable();
    let split = SplitSpec {
        n,
        labeled_train,
        unlabeled_train,
        validation: assign_groups(&mut rng, val),
        test: assign_groups(&mut rng, test),
    };
    let graph = training_graph(&split, edges)?;
    Ok((split, graph))
}

/// Adjacency over all `n` ids keeping only train–train edges.
pub fn training_graph(split: &SplitSpec, edges: &[(usize, usize)]) -> Result<CsrGraph> {
    let mut is_train = vec![false; split.n];
    for i in split.train_nodes() {
        is_train[i] = true;
    }
    let kept: Vec<(usize, usize)> = edges
        .iter()
        .copied()
        .filter(|&(a, b)| a < split.n && b < split.n && is_train[a] && is_train[b])
        .collect();
    check_edges(split.n, edges)?;
    build_csr(split.n, &kept)
}

fn check_edges(n: usize, edges: &[(usize, usize)]) -> Result<()> {
    if let Some((e, &(a, b))) = edges.iter().enumerate().find(|(_, &(a, b))| a >= n || b >= n) {
        return Err(Error::input(
            "edges",
            format!("edge {e} ({a}, {b}) references a node outside [0, {n})"),
        ));
    }
    Ok(())
}

/// Everything training needs; deliberately no adjacency.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x_t: FeatureMatrix,
    pub x_v: FeatureMatrix,
    pub stack_t: HopStack,
    pub stack_v: HopStack,
    pub labels: Vec<i64>,
    pub classes: usize,
}

impl Prepared {
    pub fn d_in(&self) -> usize {
        self.x_t.d
    }

    pub fn k(&self) -> usize {
        self.stack_t.k()
    }
}

/// Number of classes implied by the labels (largest id + 1).
pub fn class_count(labels: &[i64]) -> usize {
    labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
}

/// Pads both modalities to a shared width and propagates them over the
/// normalized training graph.
pub fn precompute(
    graph: &CsrGraph,
    x_t: &FeatureMatrix,
    x_v: &FeatureMatrix,
    labels: &[i64],
    k: usize,
    parallel: bool,
) -> Result<Prepared> {
    let d_in = x_t.d.max(x_v.d);
    let x_t = pad_features(x_t, d_in)?;
    let x_v = pad_features(x_v, d_in)?;
    let a_hat = normalize_sym(graph);
    let stack_t = propagate_with(&a_hat, &x_t, k, parallel)?;
    let stack_v = propagate_with(&a_hat, &x_v, k, parallel)?;
    Ok(Prepared {
        x_t,
        x_v,
        stack_t,
        stack_v,
        labels: labels.to_vec(),
        classes: class_count(labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub lambda: f64,
    pub moe_weight: f64,
    pub p_miss: f64,
    pub st_scope: StScope,
    pub lr: f64,
    pub weight_decay: f64,
    pub stratify: bool,
    pub deterministic: bool,
    /// Stop once teacher accuracy on labeled training nodes reaches this.
    pub target_train_acc: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1024,
            seed: 1,
            patience: 50,
            lambda: 1.0,
            moe_weight: 0.1,
            p_miss: 1.0 / 3.0,
            st_scope: StScope::All,
            lr: 2e-3,
            weight_decay: 1e-2,
            stratify: true,
            deterministic: false,
            target_train_acc: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.moe_weight,
            st_scope: self.st_scope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::input("batch_size", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.p_miss) {
            return Err(Error::input("p_miss", format!("{} outside [0, 0.5]", self.p_miss)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::input("lr", format!("{} is not a valid rate", self.lr)));
        }
        for (f, v) in [("lambda", self.lambda), ("moe_weight", self.moe_weight), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() {
                return Err(Error::input(f, "must be finite"));
            }
        }
        Ok(())
    }
}

/// Applies one of the ablation variants to a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoMoe,
    NoSelfteach,
}

impl Variant {
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoMoe => c.model.projection = "shared".into(),
            Variant::NoSelfteach => c.model.student = StudentMode::Separate,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-moe" => Ok(Variant::NoMoe),
            "no-selfteach" => Ok(Variant::NoSelfteach),
            other => Err(Error::input("variant", format!("unknown variant `{other}`"))),
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub st: f64,
    pub moe: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,l_ce,l_st,l_moe,train_acc,val_acc";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.ce, self.st, self.moe, self.train_acc, self.val_acc
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: NtsFormer,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Counter-style stream: the same `(seed, epoch, batch, purpose)` always
/// yields the same draws.
pub fn keyed_rng(seed: u64, epoch: u64, batch: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_mut(8).zip([seed, epoch, batch, purpose]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_MISS: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;
const PURPOSE_INIT: u64 = 4;

/// Splits the training nodes into batches that each hold labeled nodes.
fn make_batches(split: &SplitSpec, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let total = split.labeled_train.len() + split.unlabeled_train.len();
    let count = total.div_ceil(batch_size).min(split.labeled_train.len()).max(1);
    let mut lab = split.labeled_train.clone();
    let mut unl = split.unlabeled_train.clone();
    lab.shuffle(rng);
    unl.shuffle(rng);
    let mut batches = vec![Vec::new(); count];
    for (i, &v) in lab.iter().chain(&unl).enumerate() {
        batches[i % count].push(v);
    }
    for b in &mut batches {
        b.shuffle(rng);
    }
    batches
}

/// Fraction of rows whose argmax matches the label; rows labeled −1 are
/// skipped.
pub fn accuracy(probs: &[f32], classes: usize, labels: &[i64]) -> f64 {
    let pred = argmax_rows(probs, classes);
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        if y >= 0 {
            total += 1;
            hit += usize::from(p as i64 == y);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Teacher accuracy of the full-sequence path on `nodes`, no modality masked.
pub fn teacher_accuracy(model: &NtsFormer, data: &Prepared, nodes: &[usize]) -> Result<f64> {
    let k = model.config.k;
    let mut probs = Vec::with_capacity(nodes.len() * data.classes);
    for chunk in nodes.chunks(1024) {
        let batch = build_sequence_for(&data.x_t, &data.x_v, &data.stack_t, &data.stack_v, k, chunk)?;
        probs.extend(model.predict(&batch)?.z_t);
    }
    let labels: Vec<i64> = nodes.iter().map(|&i| data.labels[i]).collect();
    Ok(accuracy(&probs, data.classes, &labels))
}

/// Cold-start student accuracy on `(node, group)` pairs from self features.
pub fn cold_start_accuracy(
    model: &NtsFormer,
    x_t: &FeatureMatrix,
    x_v: &FeatureMatrix,
    labels: &[i64],
    nodes: &[(usize, MissGroup)],
) -> Result<f64> {
    let ids: Vec<usize> = nodes.iter().map(|p| p.0).collect();
    let flags: Vec<MissFlags> = nodes.iter().map(|p| p.1.flags()).collect();
    let probs = model.infer_cold_start(Some(&x_t.select_rows(&ids)), Some(&x_v.select_rows(&ids)), Some(&flags))?;
    let y: Vec<i64> = ids.iter().map(|&i| labels[i]).collect();
    Ok(accuracy(&probs, model.config.classes, &y))
}

fn model_config_for(cfg: &TrainConfig, data: &Prepared) -> ModelConfig {
    ModelConfig {
        d_in: data.d_in(),
        classes: data.classes,
        k: data.k(),
        ..cfg.model.clone()
    }
}

/// Trains from scratch and returns the best-validation checkpoint.
pub fn train(data: &Prepared, split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate()?;
    if split.labeled_train.is_empty() {
        return Err(Error::input("splits", "no labeled training nodes"));
    }
    if data.labels.len() != split.n || data.x_t.n != split.n {
        return Err(Error::input("splits", "split size does not match the data"));
    }
    let mcfg = model_config_for(cfg, data);
    let seed = cfg.seed;
    let mut init_rng = keyed_rng(seed, 0, 0, PURPOSE_INIT);
    let mut model = NtsFormer::new(mcfg, init_rng.random())?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let weights = cfg.loss_weights();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NtsFormer)> = None;

    let labeled: std::collections::HashSet<usize> = split.labeled_train.iter().copied().collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = keyed_rng(seed, epoch as u64, u64::MAX, PURPOSE_SHUFFLE);
        let batches = make_batches(split, cfg.batch_size, &mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for (b, nodes) in batches.iter().enumerate() {
            let mut miss_rng = keyed_rng(seed, epoch as u64, b as u64, PURPOSE_MISS);
            let mut drop_rng = keyed_rng(seed, epoch as u64, b as u64, PURPOSE_DROPOUT);
            let mut batch = build_sequence_for(&data.x_t, &data.x_v, &data.stack_t, &data.stack_v, data.k(), nodes)?;
            batch.miss_flags = draw_train_flags(nodes.len(), cfg.p_miss, &mut miss_rng)?;
            let labels: Vec<i64> = nodes
                .iter()
                .map(|&i| if labeled.contains(&i) { data.labels[i] } else { -1 })
                .collect();

            let mut tape = Tape::<f32>::new();
            let mut bind = Binder::new(&model.params);
            let fwd = forward(
                &model.config,
                &mut tape,
                &mut bind,
                &batch,
                ForwardOptions {
                    rng: Some(&mut drop_rng),
                    route_override: None,
                },
            )?;
            let terms = loss_terms(&mut tape, &fwd, &labels, &weights)?;
            let vals = [
                tape.value(terms.total).item() as f64,
                tape.value(terms.ce).item() as f64,
                tape.value(terms.st).item() as f64,
                terms.moe.map_or(0.0, |m| tape.value(m).item() as f64),
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch}, batch {b}: total={} ce={} st={} moe={}",
                    vals[0], vals[1], vals[2], vals[3]
                )));
            }
            let grads = tape.backward(terms.total)?;
            drop(bind);
            store_grads(&mut model.params, &grads);
            opt.step(&mut model.params);
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * nodes.len() as f64;
            }
            seen += nodes.len();
        }
        let train_acc = teacher_accuracy(&model, data, &split.labeled_train)?;
        let val_acc = if split.validation.is_empty() {
            0.0
        } else {
            cold_start_accuracy(&model, &data.x_t, &data.x_v, &data.labels, &split.validation)?
        };
        let rec = EpochRecord {
            epoch,
            loss: sums[0] / seen as f64,
            ce: sums[1] / seen as f64,
            st: sums[2] / seen as f64,
            moe: sums[3] / seen as f64,
            train_acc,
            val_acc,
        };
        info!("{}", rec.csv_row());
        history.push(rec);
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
        if cfg.target_train_acc.is_some_and(|t| train_acc >= t) {
            info!("teacher training accuracy {train_acc} reached at epoch {epoch}");
            break;
        }
    }
    let (_, best_epoch, model) = best.ok_or_else(|| Error::input("epochs", "must be at least 1"))?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

/// Accuracy per evaluation condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub text_miss: f64,
    pub visual_miss: f64,
    pub no_miss: f64,
    pub all: f64,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "text_miss" => Some(self.text_miss),
            "visual_miss" => Some(self.visual_miss),
            "no_miss" => Some(self.no_miss),
            "all" => Some(self.all),
            _ => None,
        }
    }

    pub const KEYS: [&'static str; 4] = ["text_miss", "visual_miss", "no_miss", "all"];
}

/// Student accuracy on cold-start nodes under each miss condition. Reads
/// only self features, labels and the split.
pub fn evaluate(
    model: &NtsFormer,
    x_t: &FeatureMatrix,
    x_v: &FeatureMatrix,
    labels: &[i64],
    nodes: &[(usize, MissGroup)],
) -> Result<EvalReport> {
    let d_in = model.config.d_in;
    let x_t = pad_features(x_t, d_in)?;
    let x_v = pad_features(x_v, d_in)?;
    let ids: Vec<usize> = nodes.iter().map(|p| p.0).collect();
    let flags: Vec<MissFlags> = nodes.iter().map(|p| p.1.flags()).collect();
    if let Some(&i) = ids.iter().find(|&&i| i >= labels.len() || labels[i] < 0) {
        return Err(Error::input("labels", format!("evaluation node {i} has no label")));
    }
    let probs = model.infer_cold_start(Some(&x_t.select_rows(&ids)), Some(&x_v.select_rows(&ids)), Some(&flags))?;
    let pred = argmax_rows(&probs, model.config.classes);
    let mut hits: BTreeMap<MissGroup, (usize, usize)> = BTreeMap::new();
    for ((&i, &(_, g)), &p) in ids.iter().zip(nodes).zip(&pred) {
        let e = hits.entry(g).or_default();
        e.0 += usize::from(p as i64 == labels[i]);
        e.1 += 1;
    }
    let acc = |g: MissGroup| hits.get(&g).map_or(0.0, |&(h, t)| h as f64 / t as f64);
    let (h, t) = hits.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(EvalReport {
        text_miss: acc(MissGroup::TextMiss),
        visual_miss: acc(MissGroup::VisualMiss),
        no_miss: acc(MissGroup::NoMiss),
        all: if t == 0 { 0.0 } else { h as f64 / t as f64 },
    })
}

/// Raw data for repeated runs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x_t: FeatureMatrix,
    pub x_v: FeatureMatrix,
    pub labels: Vec<i64>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: EvalReport,
    pub std: EvalReport,
    pub runs: Vec<EvalReport>,
    pub seeds: Vec<u64>,
}

fn aggregate(seeds: &[u64], runs: Vec<EvalReport>) -> Aggregate {
    let n = runs.len() as f64;
    let stat = |f: fn(&EvalReport) -> f64| {
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let fields: [fn(&EvalReport) -> f64; 4] = [|r| r.text_miss, |r| r.visual_miss, |r| r.no_miss, |r| r.all];
    let s: Vec<(f64, f64)> = fields.iter().map(|&f| stat(f)).collect();
    Aggregate {
        mean: EvalReport {
            text_miss: s[0].0,
            visual_miss: s[1].0,
            no_miss: s[2].0,
            all: s[3].0,
        },
        std: EvalReport {
            text_miss: s[0].1,
            visual_miss: s[1].1,
            no_miss: s[2].1,
            all: s[3].1,
        },
        runs,
        seeds: seeds.to_vec(),
    }
}

/// One seed end to end: split, propagate on the training graph, train,
/// evaluate on the test set.
pub fn run_seed(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<EvalReport> {
    let n = data.labels.len();
    let (split, graph) = partition(n, &data.labels, &data.edges, seed, cfg.stratify)?;
    let prep = precompute(&graph, &data.x_t, &data.x_v, &data.labels, cfg.model.k, !cfg.deterministic)?;
    let run_cfg = TrainConfig { seed, ..cfg.clone() };
    let out = train(&prep, &split, &run_cfg)?;
    evaluate(&out.model, &prep.x_t, &prep.x_v, &data.labels, &split.test)
}

/// Mean and sample standard deviation over seeds; the seed fixes the split,
/// so variants compared at the same seed see identical splits.
pub fn run_multiseed(data: &Dataset, cfg: &TrainConfig, seeds: &[u64]) -> Result<Aggregate> {
    if seeds.is_empty() {
        return Err(Error::input("seeds", "need at least one seed"));
    }
    let runs = seeds
        .iter()
        .map(|&s| run_seed(data, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(seeds, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthSpec};

    fn labels(n: usize, c: i64) -> Vec<i64> {
        (0..n as i64).map(|i| i % c).collect()
    }

    #[test]
    fn split_sizes_follow_protocol() {
        assert_eq!(split_sizes(100), (20, 60, 10, 10));
        for n in [100, 1000, 12345] {
            let (s, _) = partition(n, &labels(n, 4), &[], 3, true).unwrap();
            let (l, u, v, t) = split_sizes(n);
            assert_eq!(
                (s.labeled_train.len(), s.unlabeled_train.len(), s.validation.len(), s.test.len()),
                (l, u, v, t)
            );
            s.validate().unwrap();
            for set in [&s.validation, &s.test] {
                let mut c = [0usize; 3];
                set.iter().for_each(|(_, g)| c[*g as usize] += 1);
                assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn stratification_keeps_class_shares() {
        let n = 1000;
        let y = labels(n, 4);
        let (s, _) = partition(n, &y, &[], 9, true).unwrap();
        let mut c = [0usize; 4];
        s.labeled_train.iter().for_each(|&i| c[y[i] as usize] += 1);
        assert!(c.iter().all(|&k| (49..=51).contains(&k)), "{c:?}");
    }

    #[test]
    fn training_graph_drops_cold_start_edges() {
        let n = 200;
        let data = generate(&SynthSpec::default()).unwrap();
        let (s, g) = partition(n, &data.labels, &data.edges, 4, true).unwrap();
        for (i, _) in s.validation.iter().chain(&s.test) {
            assert_eq!(g.degree(*i), 0);
        }
        let train: std::collections::HashSet<usize> = s.train_nodes().into_iter().collect();
        let expected = data.edges.iter().filter(|(a, b)| train.contains(a) && train.contains(b)).count();
        assert_eq!(g.undirected_edges().len(), expected);
    }

    #[test]
    fn partition_is_seeded_and_validates_input() {
        let y = labels(50, 2);
        assert_eq!(partition(50, &y, &[], 1, true).unwrap().0, partition(50, &y, &[], 1, true).unwrap().0);
        assert_ne!(partition(50, &y, &[], 1, true).unwrap().0, partition(50, &y, &[], 2, true).unwrap().0);
        assert!(partition(9, &labels(9, 2), &[], 1, true).is_err());
        assert!(partition(20, &labels(20, 2), &[(0, 25)], 1, true).is_err());
    }

    #[test]
    fn tiny_classes_fall_back_and_unknown_labels_stay_unlabeled() {
        let mut y = labels(100, 2);
        y[0] = 7;
        y[1] = -1;
        y[2] = -1;
        let (s, _) = partition(100, &y, &[], 5, true).unwrap();
        assert!(s.unlabeled_train.contains(&1) && s.unlabeled_train.contains(&2));
        s.validate().unwrap();
    }

    #[test]
    fn batches_cover_training_nodes_with_labels_in_each() {
        let (s, _) = partition(1000, &labels(1000, 4), &[], 1, true).unwrap();
        let mut rng = keyed_rng(1, 1, 0, 0);
        let b = make_batches(&s, 128, &mut rng);
        assert_eq!(b.len(), 7);
        let lab: std::collections::HashSet<usize> = s.labeled_train.iter().copied().collect();
        assert!(b.iter().all(|x| x.iter().any(|i| lab.contains(i))));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, s.train_nodes());
    }

    #[test]
    fn accuracy_counts_labeled_rows() {
        let p = [0.9, 0.1, 0.2, 0.8, 0.6, 0.4];
        assert_eq!(accuracy(&p, 2, &[0, 0, -1]), 0.5);
    }

    #[test]
    fn aggregate_single_seed_has_zero_std() {
        let r = EvalReport {
            text_miss: 0.5,
            visual_miss: 0.25,
            no_miss: 1.0,
            all: 0.6,
        };
        let a = aggregate(&[1], vec![r]);
        assert_eq!(a.mean, r);
        assert_eq!(a.std.all, 0.0);
        let b = aggregate(&[1, 2], vec![r, EvalReport { all: 0.8, ..r }]);
        assert!((b.std.all - (0.02f64).sqrt()).abs() < 1e-12);
    }

    fn small_run_config() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            patience: 0,
            deterministic: true,
            model: ModelConfig {
                hidden_dim: 16,
                experts: 3,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn small_data() -> (Prepared, SplitSpec) {
        let data = generate(&SynthSpec {
            n: 60,
            d_t: 6,
            d_v: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let (s, g) = partition(60, &data.labels, &data.edges, 1, true).unwrap();
        (precompute(&g, &data.x_t, &data.x_v, &data.labels, 2, false).unwrap(), s)
    }

    #[test]
    fn training_is_deterministic_and_best_epoch_is_first_max() {
        let (prep, split) = small_data();
        let cfg = small_run_config();
        let a = train(&prep, &split, &cfg).unwrap();
        let b = train(&prep, &split, &cfg).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.model, b.model);
        let max = a.history.iter().map(|r| r.val_acc).fold(f64::MIN, f64::max);
        let first = a.history.iter().find(|r| r.val_acc == max).unwrap().epoch;
        assert_eq!(a.best_epoch, first);
        assert_eq!(a.history.len(), 6);
    }

    #[test]
    fn loss_falls_on_separable_problem() {
        let (prep, split) = small_data();
        let cfg = TrainConfig {
            epochs: 10,
            model: ModelConfig {
                dropout_in: 0.0,
                dropout_hidden: 0.0,
                ..small_run_config().model
            },
            ..small_run_config()
        };
        let out = train(&prep, &split, &cfg).unwrap();
        assert!(out.history.last().unwrap().ce < out.history[0].ce);
    }

    #[test]
    fn evaluation_all_is_weighted_mean() {
        let (prep, split) = small_data();
        let out = train(&prep, &split, &small_run_config()).unwrap();
        let r = evaluate(&out.model, &prep.x_t, &prep.x_v, &prep.labels, &split.test).unwrap();
        let mut count = [0f64; 3];
        split.test.iter().for_each(|(_, g)| count[*g as usize] += 1.0);
        let weighted = (r.text_miss * count[0] + r.visual_miss * count[1] + r.no_miss * count[2]) / split.test.len() as f64;
        assert!((weighted - r.all).abs() < 1e-12);
    }

    #[test]
    fn variants_change_the_right_knobs() {
        let c = TrainConfig::default();
        assert_eq!(Variant::NoMoe.apply(&c).model.projection, "shared");
        assert_eq!(Variant::NoSelfteach.apply(&c).model.student, StudentMode::Separate);
        assert_eq!(Variant::Full.apply(&c), c);
        assert_eq!("no-moe".parse::<Variant>().unwrap(), Variant::NoMoe);
    }
}
