//! Action logs to training instances.
//!
//! A user's time-sorted actions are cut into blocks of eleven. The first ten
//! become the history and the eleventh supplies the query brand and query
//! time of a positive instance. Negatives copy a positive and swap in a
//! different, uniformly drawn brand.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const HISTORY_LEN: usize = 10;
pub const WINDOW_LEN: usize = HISTORY_LEN + 1;
pub const DEFAULT_MIN_USER_ACTIONS: usize = 11;
pub const DEFAULT_MIN_BRAND_ACTIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Click,
    Purchase,
}

impl ActionType {
    /// Click is `[0, 1]`, purchase is `[1, 0]`.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            ActionType::Click => [0.0, 1.0],
            ActionType::Purchase => [1.0, 0.0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Click => "click",
            ActionType::Purchase => "purchase",
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "click" => Ok(ActionType::Click),
            "purchase" => Ok(ActionType::Purchase),
            other => Err(format!("unknown action_type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTuple {
    pub user_id: String,
    pub brand_id: String,
    pub action_type: ActionType,
    pub timestamp: i64,
}

/// Per-user action sequences, time-sorted, keyed by user id.
pub type ActionLog = BTreeMap<String, Vec<ActionTuple>>;

/// One history step: brand, action and the gap (seconds) to the next action
/// (or to the query time for the last step).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(String, ActionType, i64)", into = "(String, ActionType, i64)")]
pub struct HistoryStep {
    pub brand_id: String,
    pub action: ActionType,
    pub delta_t: i64,
}

impl From<(String, ActionType, i64)> for HistoryStep {
    fn from((brand_id, action, delta_t): (String, ActionType, i64)) -> Self {
        HistoryStep {
            brand_id,
            action,
            delta_t,
        }
    }
}

impl From<HistoryStep> for (String, ActionType, i64) {
    fn from(s: HistoryStep) -> Self {
        (s.brand_id, s.action, s.delta_t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub user_id: String,
    pub history: Vec<HistoryStep>,
    pub query_brand: String,
    pub query_time: i64,
    pub label: u8,
}

/// Reads `actions.csv` (`user_id,brand_id,action_type,timestamp`).
///
/// Each user's actions are sorted by timestamp; ties keep file order.
pub fn parse_action_log(path: &Path) -> Result<ActionLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_action_reader(file, &path.display().to_string())
}

pub fn parse_action_reader<R: std::io::Read>(reader: R, name: &str) -> Result<ActionLog> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let expected = ["user_id", "brand_id", "action_type", "timestamp"];
    let header = rdr.headers()?.clone();
    if header.iter().ne(expected) {
        return Err(Error::Data {
            path: name.to_string(),
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut log = ActionLog::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data {
            path: name.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Data {
            path: name.to_string(),
            line,
            message,
        };
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let action_type: ActionType = record[2].parse().map_err(bad)?;
        let timestamp: i64 = record[3]
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid timestamp {:?}", &record[3])))?;
        log.entry(record[0].to_string()).or_default().push(ActionTuple {
            user_id: record[0].to_string(),
            brand_id: record[1].to_string(),
            action_type,
            timestamp,
        });
    }
    for actions in log.values_mut() {
        actions.sort_by_key(|a| a.timestamp);
    }
    Ok(log)
}

pub fn write_action_log(path: &Path, log: &ActionLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "brand_id", "action_type", "timestamp"])?;
    for a in log.values().flatten() {
        w.write_record([
            a.user_id.as_str(),
            a.brand_id.as_str(),
            a.action_type.as_str(),
            &a.timestamp.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Repeatedly drops users and brands below their action thresholds until
/// nothing changes.
pub fn filter_sparse(
    log: &ActionLog,
    min_user_actions: usize,
    min_brand_actions: usize,
) -> Result<ActionLog> {
    if min_user_actions == 0 || min_brand_actions == 0 {
        return Err(Error::Contract("filter thresholds must be at least 1".into()));
    }
    let mut current = log.clone();
    loop {
        let mut brand_counts: HashMap<&str, usize> = HashMap::new();
        for a in current.values().flatten() {
            *brand_counts.entry(a.brand_id.as_str()).or_default() += 1;
        }
        let mut next = ActionLog::new();
        let mut changed = false;
        for (user, actions) in &current {
            let kept: Vec<ActionTuple> = actions
                .iter()
                .filter(|a| brand_counts[a.brand_id.as_str()] >= min_brand_actions)
                .cloned()
                .collect();
            changed |= kept.len() != actions.len();
            if kept.len() >= min_user_actions {
                next.insert(user.clone(), kept);
            } else {
                changed = true;
            }
        }
        current = next;
        if !changed {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "filtering users with < {min_user_actions} and brands with < {min_brand_actions} actions"
        )));
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Consecutive, non-overlapping blocks of eleven actions.
    #[default]
    Disjoint,
    /// Every run of eleven consecutive actions (stride one).
    Sliding,
}

fn instance_from_window(window: &[ActionTuple]) -> TrainingInstance {
    debug_assert_eq!(window.len(), WINDOW_LEN);
    let query = &window[HISTORY_LEN];
    let history = (0..HISTORY_LEN)
        .map(|i| HistoryStep {
            brand_id: window[i].brand_id.clone(),
            action: window[i].action_type,
            delta_t: window[i + 1].timestamp - window[i].timestamp,
        })
        .collect();
    TrainingInstance {
        user_id: query.user_id.clone(),
        history,
        query_brand: query.brand_id.clone(),
        query_time: query.timestamp,
        label: 1,
    }
}

/// Positive instances of one user's time-sorted actions.
pub fn window_user(actions: &[ActionTuple], mode: WindowMode) -> Vec<TrainingInstance> {
    if actions.len() < WINDOW_LEN {
        return Vec::new();
    }
    match mode {
        WindowMode::Disjoint => actions
            .chunks_exact(WINDOW_LEN)
            .map(instance_from_window)
            .collect(),
        WindowMode::Sliding => actions.windows(WINDOW_LEN).map(instance_from_window).collect(),
    }
}

/// Positive instances of every user, in user order then time order.
pub fn window_sequences(log: &ActionLog, mode: WindowMode) -> Vec<TrainingInstance> {
    log.values().flat_map(|a| window_user(a, mode)).collect()
}

/// Copy of `positive` with label 0 and a query brand drawn uniformly from
/// `universe` minus the positive's query brand.
pub fn negative_sample_with<R: Rng + ?Sized>(
    positive: &TrainingInstance,
    universe: &[String],
    rng: &mut R,
) -> Result<TrainingInstance> {
    let others = universe.iter().filter(|b| **b != positive.query_brand).count();
    if others == 0 {
        return Err(Error::Sampling(format!(
            "no brand other than {} to draw a negative from",
            positive.query_brand
        )));
    }
    let pick = rng.gen_range(0..others);
    let brand = universe
        .iter()
        .filter(|b| **b != positive.query_brand)
        .nth(pick)
        .expect("pick < others");
    Ok(TrainingInstance {
        query_brand: brand.clone(),
        label: 0,
        ..positive.clone()
    })
}

pub fn negative_sample(
    positive: &TrainingInstance,
    universe: &[String],
    seed: u64,
) -> Result<TrainingInstance> {
    negative_sample_with(positive, universe, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Dense brand index, sorted by brand id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        let index = ids.iter().enumerate().map(|(i, b)| (b.clone(), i)).collect();
        Vocabulary { ids, index }
    }

    pub fn from_log(log: &ActionLog) -> Self {
        Vocabulary::new(log.values().flatten().map(|a| a.brand_id.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, brand: &str) -> Result<usize> {
        self.index
            .get(brand)
            .copied()
            .ok_or_else(|| Error::Vocabulary(brand.to_string()))
    }

    /// SHA-256 over the ordered ids, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["brand_id", "index"])?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_record([id.as_str(), &i.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut rows: Vec<(usize, String)> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let index = record.get(1).and_then(|s| s.parse().ok()).ok_or(Error::Data {
                path: path.display().to_string(),
                line,
                message: "invalid index".into(),
            })?;
            rows.push((index, record.get(0).unwrap_or_default().to_string()));
        }
        rows.sort();
        let vocab = Vocabulary::new(rows.iter().map(|(_, b)| b.clone()).collect());
        if rows.iter().enumerate().any(|(i, (idx, b))| *idx != i || vocab.ids[i] != *b) {
            return Err(Error::Invalid(format!(
                "{} is not a dense, id-sorted brand index",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub window: WindowMode,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            window: WindowMode::Disjoint,
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    pub vocab: Vocabulary,
}

/// Windows every user, holds out each user's last window for test and adds
/// negatives right after their positive.
pub fn build_dataset(log: &ActionLog, options: DatasetOptions) -> Result<Dataset> {
    let vocab = Vocabulary::from_log(log);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for actions in log.values() {
        let positives = window_user(actions, options.window);
        let last = positives.len().saturating_sub(1);
        for (i, positive) in positives.into_iter().enumerate() {
            let target = if i == last { &mut test } else { &mut train };
            let mut negatives = Vec::with_capacity(options.negatives_per_positive);
            for _ in 0..options.negatives_per_positive {
                negatives.push(negative_sample_with(&positive, vocab.ids(), &mut rng)?);
            }
            target.push(positive);
            target.extend(negatives);
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(Error::EmptyDataset("windowing".into()));
    }
    Ok(Dataset { train, test, vocab })
}

pub fn write_instances(path: &Path, instances: &[TrainingInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<TrainingInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TrainingInstance = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.display().to_string(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        if inst.label > 1 {
            return Err(Error::Data {
                path: path.display().to_string(),
                line: i as u64 + 1,
                message: format!("label must be 0 or 1, got {}", inst.label),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

/// Vocabulary plus the feature vector of every vocabulary brand.
#[derive(Debug, Clone, PartialEq)]
pub struct BrandTable {
    pub vocab: Vocabulary,
    /// `N × d`, row `k` is the feature vector of brand `k`.
    pub features: Matrix,
}

impl BrandTable {
    /// Brands missing from `features` get an all-zero vector.
    pub fn new(vocab: Vocabulary, features: &BTreeMap<String, Vec<f64>>, dim: usize) -> Result<Self> {
        let mut table = Matrix::zeros(vocab.len(), dim);
        let mut missing = 0usize;
        for (k, id) in vocab.ids().iter().enumerate() {
            match features.get(id) {
                Some(v) if v.len() == dim => {
                    table.as_mut_slice()[k * dim..(k + 1) * dim].copy_from_slice(v)
                }
                Some(v) => {
                    return Err(Error::Contract(format!(
                        "brand {id} has a {}-wide feature vector, expected {dim}",
                        v.len()
                    )))
                }
                None => missing += 1,
            }
        }
        if missing > 0 {
            log::warn!("{missing} vocabulary brands have no feature vector; using zeros");
        }
        Ok(BrandTable {
            vocab,
            features: table,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features_of(&self, k: usize) -> &[f64] {
        self.features.row(k)
    }
}

/// A history step with the brand resolved to its vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedStep {
    pub brand: usize,
    pub action: ActionType,
    /// Seconds.
    pub delta_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub history: Vec<EncodedStep>,
    pub query: usize,
    pub label: u8,
}

pub fn encode_instance(instance: &TrainingInstance, vocab: &Vocabulary) -> Result<EncodedInstance> {
    let history = instance
        .history
        .iter()
        .map(|s| {
            if s.delta_t < 0 {
                return Err(Error::Contract(format!(
                    "negative delta_t {} for user {}",
                    s.delta_t, instance.user_id
                )));
            }
            Ok(EncodedStep {
                brand: vocab.index_of(&s.brand_id)?,
                action: s.action,
                delta_t: s.delta_t as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedInstance {
        history,
        query: vocab.index_of(&instance.query_brand)?,
        label: instance.label,
    })
}

pub fn encode_all(instances: &[TrainingInstance], vocab: &Vocabulary) -> Result<Vec<EncodedInstance>> {
    instances.iter().map(|i| encode_instance(i, vocab)).collect()
}

/// Plain concatenated input of one step: brand features, action one-hot and
/// the raw gap in seconds.
pub fn concat_step_input(step: &EncodedStep, table: &BrandTable) -> Vec<f64> {
    let mut x = table.features_of(step.brand).to_vec();
    x.extend(step.action.one_hot());
    x.push(step.delta_t);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn act(user: &str, brand: &str, t: i64) -> ActionTuple {
        ActionTuple {
            user_id: user.into(),
            brand_id: brand.into(),
            action_type: ActionType::Click,
            timestamp: t,
        }
    }

    fn log_of(actions: Vec<ActionTuple>) -> ActionLog {
        let mut log = ActionLog::new();
        for a in actions {
            log.entry(a.user_id.clone()).or_default().push(a);
        }
        log
    }

    fn user_seq(user: &str, n: usize) -> Vec<ActionTuple> {
        (0..n).map(|i| act(user, &format!("b{}", i % 3), 100 + 10 * i as i64)).collect()
    }

    #[test]
    fn parses_and_sorts() {
        let text = "user_id,brand_id,action_type,timestamp\nu1,b1,click,100\nu1,b2,purchase,50\nu2,b1,click,7\n";
        let log = parse_action_reader(text.as_bytes(), "actions.csv").unwrap();
        let u1 = &log["u1"];
        assert_eq!(u1[0].timestamp, 50);
        assert_eq!(u1[0].action_type, ActionType::Purchase);
        assert_eq!(u1[1], act("u1", "b1", 100));
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let text = "user_id,brand_id,action_type,timestamp\nu,b2,click,5\nu,b1,click,5\n";
        let log = parse_action_reader(text.as_bytes(), "a").unwrap();
        assert_eq!(log["u"][0].brand_id, "b2");
    }

    #[test]
    fn unknown_action_names_line() {
        let text = "user_id,brand_id,action_type,timestamp\nu1,b1,click,1\nu1,b1,view,100\n";
        match parse_action_reader(text.as_bytes(), "a") {
            Err(Error::Data { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("view"));
            }
            other => panic!("{other:?}"),
        }
        let text = "user_id,brand_id,action_type,timestamp\nu1,b1,click,soon\n";
        assert!(matches!(parse_action_reader(text.as_bytes(), "a"), Err(Error::Data { line: 2, .. })));
        let text = "user,brand,action,time\n";
        assert!(parse_action_reader(text.as_bytes(), "a").is_err());
    }

    #[test]
    fn filter_identity_and_empty() {
        let log = log_of(user_seq("u", 5));
        assert_eq!(filter_sparse(&log, 1, 1).unwrap(), log);
        assert!(matches!(filter_sparse(&log, 11, 1), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn filter_chain_reaches_fixed_point() {
        // brand "rare" has 2 actions (< 3) and only appears for u2; dropping it
        // leaves u2 with 2 actions (< 3); dropping u2 leaves brand "x" with 2.
        let mut actions = vec![];
        for t in 0..4 {
            actions.push(act("u1", "common", t));
            actions.push(act("u3", "common", t));
        }
        actions.push(act("u2", "rare", 1));
        actions.push(act("u2", "rare", 2));
        actions.push(act("u2", "x", 3));
        actions.push(act("u2", "x", 4));
        actions.push(act("u1", "x", 9));
        let log = log_of(actions);
        let out = filter_sparse(&log, 3, 3).unwrap();
        assert_eq!(out.keys().collect::<Vec<_>>(), vec!["u1", "u3"]);
        assert!(out.values().flatten().all(|a| a.brand_id == "common"));
    }

    #[test]
    fn window_counts() {
        for (n, expected) in [(11, 1), (10, 0), (22, 2), (21, 1)] {
            assert_eq!(window_user(&user_seq("u", n), WindowMode::Disjoint).len(), expected, "n={n}");
        }
        assert_eq!(window_user(&user_seq("u", 13), WindowMode::Sliding).len(), 3);
    }

    #[test]
    fn window_deltas_use_query_time() {
        let mut seq = user_seq("u", 11);
        seq[10].timestamp = 1000;
        let inst = &window_user(&seq, WindowMode::Disjoint)[0];
        assert_eq!(inst.history.len(), HISTORY_LEN);
        assert_eq!(inst.history[0].delta_t, 10);
        assert_eq!(inst.history[9].delta_t, 1000 - seq[9].timestamp);
        assert_eq!(inst.query_time, 1000);
        assert_eq!(inst.query_brand, seq[10].brand_id);
        assert_eq!(inst.label, 1);
    }

    #[test]
    fn delta_from_consecutive_timestamps() {
        let mut seq = user_seq("u", 11);
        seq[0].timestamp = 100;
        seq[1].timestamp = 160;
        let inst = &window_user(&seq, WindowMode::Disjoint)[0];
        assert_eq!(inst.history[0].delta_t, 60);
    }

    fn positive() -> TrainingInstance {
        window_user(&user_seq("u", 11), WindowMode::Disjoint).remove(0)
    }

    #[test]
    fn negative_forced_choice_and_determinism() {
        let mut p = positive();
        p.query_brand = "B".into();
        let universe = vec!["A".to_string(), "B".to_string()];
        let n = negative_sample(&p, &universe, 3).unwrap();
        assert_eq!(n.query_brand, "A");
        assert_eq!(n.label, 0);
        assert_eq!(n.history, p.history);
        assert_eq!(n.query_time, p.query_time);

        let big: Vec<String> = (0..50).map(|i| format!("b{i}")).collect();
        assert_eq!(negative_sample(&p, &big, 9).unwrap(), negative_sample(&p, &big, 9).unwrap());
        assert!(matches!(
            negative_sample(&p, &["B".to_string()], 1),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn negative_sampling_is_uniform() {
        let mut p = positive();
        p.query_brand = "b0".into();
        let universe: Vec<String> = (0..5).map(|i| format!("b{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts: HashMap<String, usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let n = negative_sample_with(&p, &universe, &mut rng).unwrap();
            *counts.entry(n.query_brand).or_default() += 1;
        }
        assert!(!counts.contains_key("b0"));
        let mut chi2 = 0.0;
        for b in &universe[1..] {
            let freq = counts[b] as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.02, "{b}: {freq}");
            let e = draws as f64 / 4.0;
            chi2 += (counts[b] as f64 - e).powi(2) / e;
        }
        // 3 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn action_encoding() {
        assert_eq!(ActionType::Click.one_hot(), [0.0, 1.0]);
        assert_eq!(ActionType::Purchase.one_hot(), [1.0, 0.0]);
    }

    #[test]
    fn encode_and_vocab_errors() {
        let p = positive();
        let vocab = Vocabulary::new(vec!["b0".into(), "b1".into(), "b2".into()]);
        let enc = encode_instance(&p, &vocab).unwrap();
        assert_eq!(enc.history.len(), HISTORY_LEN);
        assert_eq!(enc.query, vocab.index_of(&p.query_brand).unwrap());

        let small = Vocabulary::new(vec!["b0".into()]);
        assert!(matches!(encode_instance(&p, &small), Err(Error::Vocabulary(_))));

        let mut features = BTreeMap::new();
        features.insert("b1".to_string(), vec![0.5, 0.25]);
        let table = BrandTable::new(vocab, &features, 2).unwrap();
        let x = concat_step_input(&EncodedStep { brand: 1, action: ActionType::Click, delta_t: 60.0 }, &table);
        assert_eq!(x, vec![0.5, 0.25, 0.0, 1.0, 60.0]);
        assert_eq!(table.features_of(0), &[0.0, 0.0]);
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let p = positive();
        write_instances(&path, std::slice::from_ref(&p)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["history"][0], serde_json::json!(["b0", "click", 10]));
        assert_eq!(v["label"], 1);
        assert_eq!(read_instances(&path).unwrap(), vec![p]);
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.csv");
        let vocab = Vocabulary::new(vec!["z".into(), "a".into(), "m".into()]);
        vocab.write(&path).unwrap();
        let back = Vocabulary::read(&path).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.fingerprint(), vocab.fingerprint());
        assert_eq!(back.index_of("a").unwrap(), 0);
    }

    fn random_log() -> impl Strategy<Value = ActionLog> {
        prop::collection::vec((0usize..6, 0usize..8, 1i64..5000, any::<bool>()), 20..300).prop_map(|rows| {
            let mut log = ActionLog::new();
            let mut clock: HashMap<usize, i64> = HashMap::new();
            for (u, b, gap, purchase) in rows {
                let t = clock.entry(u).or_insert(0);
                *t += gap;
                log.entry(format!("u{u}")).or_default().push(ActionTuple {
                    user_id: format!("u{u}"),
                    brand_id: format!("b{b}"),
                    action_type: if purchase { ActionType::Purchase } else { ActionType::Click },
                    timestamp: *t,
                });
            }
            log
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dataset_invariants(log in random_log(), seed in any::<u64>()) {
            let options = DatasetOptions { seed, ..Default::default() };
            let Ok(ds) = build_dataset(&log, options) else {
                // fewer than 11 actions for every user
                prop_assert!(log.values().all(|a| a.len() < WINDOW_LEN));
                return Ok(());
            };
            let all: Vec<_> = ds.train.iter().chain(&ds.test).collect();
            let pos = all.iter().filter(|i| i.label == 1).count();
            prop_assert_eq!(pos * 2, all.len());
            for i in &all {
                prop_assert_eq!(i.history.len(), HISTORY_LEN);
                prop_assert!(i.history.iter().all(|s| s.delta_t >= 0));
            }
            // last window per user is in test, and only there
            for (user, actions) in &log {
                let windows = window_user(actions, WindowMode::Disjoint);
                let in_test = ds.test.iter().filter(|i| &i.user_id == user && i.label == 1).count();
                prop_assert_eq!(in_test, usize::from(!windows.is_empty()));
                // windows reproduce a prefix of the sequence
                let mut rebuilt = vec![];
                for w in &windows {
                    rebuilt.extend(w.history.iter().map(|s| s.brand_id.clone()));
                    rebuilt.push(w.query_brand.clone());
                }
                let prefix: Vec<_> = actions.iter().take(rebuilt.len()).map(|a| a.brand_id.clone()).collect();
                prop_assert_eq!(rebuilt, prefix);
            }
            prop_assert_eq!(build_dataset(&log, options).unwrap(), ds);
        }
    }
}
