//! Synthetic clickstreams with planted brand preferences, and the matching
//! Bayes-oracle scorer.
//!
//! Every user has a latent affinity vector and a preferred price level. Each
//! brand has a latent vector, a price tier, a category and a popularity. The
//! next brand is drawn from a softmax over
//!
//! ```text
//! affinity · a_u·b_k − price · |level_u − tier_k| / 3 + popularity_k
//!   + decay · 2^(−Δ / half_life) · [k = previous brand]
//!   + purchase_boost · [k purchased among the last 10 actions]
//!   + click_boost · [k only clicked among the last 10 actions]
//! ```
//!
//! where `Δ` is the gap since the previous action. Purchases happen with
//! probability `σ(purchase_bias + purchase_affinity · a_u·b_k)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_action_log, ActionLog, ActionTuple, ActionType, TrainingInstance, HISTORY_LEN};
use crate::error::{Error, Result};
use crate::features::{write_events, write_items, EventRecord, EventType, ItemRecord};
use crate::nn::{dot, sigmoid};

const START_TIME: i64 = 1_500_000_000;
const START_SPREAD_SECS: f64 = 30.0 * 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub brands: usize,
    pub categories: usize,
    pub items_per_brand: usize,
    /// Per-user action counts are uniform on `[min_sequence_len, max_sequence_len]`.
    pub min_sequence_len: usize,
    pub max_sequence_len: usize,
    pub affinity_dim: usize,
    pub affinity_strength: f64,
    pub half_life_secs: f64,
    pub decay_strength: f64,
    pub purchase_boost: f64,
    pub click_boost: f64,
    pub purchase_bias: f64,
    pub purchase_affinity: f64,
    pub price_strength: f64,
    /// Zipf exponent of brand popularity; 0 makes every brand equally popular.
    pub popularity_skew: f64,
    /// Gaps between actions are log-uniform on `[min_gap_secs, max_gap_secs]`.
    pub min_gap_secs: f64,
    pub max_gap_secs: f64,
    /// Anonymous browsing sessions per brand feeding the event log.
    pub background_sessions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 5000,
            brands: 100,
            categories: 20,
            items_per_brand: 5,
            min_sequence_len: 22,
            max_sequence_len: 44,
            affinity_dim: 8,
            affinity_strength: 0.5,
            half_life_secs: 3600.0,
            decay_strength: 2.0,
            purchase_boost: 1.0,
            click_boost: 0.5,
            purchase_bias: -1.5,
            purchase_affinity: 1.0,
            price_strength: 4.0,
            popularity_skew: 0.5,
            min_gap_secs: 300.0,
            max_gap_secs: 10.0 * 86_400.0,
            background_sessions: 40,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short-gap repeats dominate: a large recency term with a one-hour half-life.
    pub fn time_decay_amplified() -> Self {
        SynthConfig {
            decay_strength: 5.0,
            half_life_secs: 3600.0,
            purchase_boost: 0.0,
            click_boost: 0.0,
            ..SynthConfig::default()
        }
    }

    /// Clicked brands pull the user back, purchased brands push the user away.
    /// Price and popularity are weakened so the action signal dominates.
    pub fn action_amplified() -> Self {
        SynthConfig {
            decay_strength: 0.0,
            purchase_boost: -4.0,
            click_boost: 3.0,
            purchase_bias: 0.0,
            purchase_affinity: 0.0,
            price_strength: 1.0,
            popularity_skew: 0.0,
            ..SynthConfig::default()
        }
    }

    /// Many brands with a steep popularity tail, so most brands are rarely seen.
    pub fn cold_brand_heavy() -> Self {
        SynthConfig {
            brands: 600,
            categories: 20,
            popularity_skew: 1.0,
            decay_strength: 0.0,
            purchase_boost: 0.0,
            click_boost: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("brands", self.brands),
            ("categories", self.categories),
            ("items_per_brand", self.items_per_brand),
            ("min_sequence_len", self.min_sequence_len),
            ("affinity_dim", self.affinity_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be at least 1")));
        }
        if self.max_sequence_len < self.min_sequence_len {
            return Err(Error::Contract("max_sequence_len < min_sequence_len".into()));
        }
        if !(self.half_life_secs > 0.0) {
            return Err(Error::Contract("half-life must be positive".into()));
        }
        if !(self.min_gap_secs >= 1.0 && self.max_gap_secs >= self.min_gap_secs) {
            return Err(Error::Contract("gaps must satisfy 1 <= min_gap_secs <= max_gap_secs".into()));
        }
        if self.brands < self.categories || (self.brands / self.categories) * self.items_per_brand < 7 {
            return Err(Error::Contract(
                "every category needs at least 7 items; raise brands or items_per_brand".into(),
            ));
        }
        let reals = [
            self.affinity_strength,
            self.decay_strength,
            self.purchase_boost,
            self.click_boost,
            self.purchase_bias,
            self.purchase_affinity,
            self.price_strength,
            self.popularity_skew,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("synthetic strengths must be finite".into()));
        }
        Ok(())
    }
}

/// Hidden per-brand parameters.
#[derive(Debug, Clone, PartialEq)]
struct BrandLatent {
    vector: Vec<f64>,
    tier: usize,
    category: usize,
    popularity: f64,
    quality: f64,
    items: Vec<(String, f64)>,
}

/// What the generator knows and the models do not: every user's static
/// preference score per brand, plus the config for the dynamic terms.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub brands: Vec<String>,
    /// Static utility of each brand (in `brands` order) per user.
    pub scores: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub items: Vec<ItemRecord>,
    pub events: Vec<EventRecord>,
    pub actions: ActionLog,
    pub truth: GroundTruth,
}

pub fn brand_id(k: usize) -> String {
    format!("b{k:04}")
}

pub fn user_id(seed: u64, u: usize) -> String {
    format!("u{seed}-{u:05}")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn make_brands(config: &SynthConfig) -> Vec<BrandLatent> {
    let mut rng = stream_rng(config.seed, 0);
    let scale = (config.affinity_dim as f64).sqrt().recip();
    let category_base: Vec<f64> = (0..config.categories).map(|_| rng.gen_range(2.0..5.0)).collect();
    let mut ranks: Vec<usize> = (0..config.brands).collect();
    for i in (1..ranks.len()).rev() {
        let j = rng.gen_range(0..=i);
        ranks.swap(i, j);
    }
    (0..config.brands)
        .map(|k| {
            let vector = (0..config.affinity_dim).map(|_| normal(&mut rng) * scale).collect();
            let tier = rng.gen_range(1..=7usize);
            let category = k % config.categories;
            let items = (0..config.items_per_brand)
                .map(|j| {
                    let log_price = category_base[category] + 0.45 * (tier as f64 - 1.0) + 0.1 * normal(&mut rng);
                    (format!("i{k:04}-{j}"), (log_price.exp() * 100.0).round() / 100.0)
                })
                .collect();
            BrandLatent {
                vector,
                tier,
                category,
                popularity: -config.popularity_skew * ((ranks[k] + 1) as f64).ln(),
                quality: normal(&mut rng),
                items,
            }
        })
        .collect()
}

fn static_scores(config: &SynthConfig, brands: &[BrandLatent], affinity: &[f64], level: usize) -> Vec<f64> {
    brands
        .iter()
        .map(|b| {
            config.affinity_strength * dot(affinity, &b.vector)
                - config.price_strength * (level as f64 - b.tier as f64).abs() / 3.0
                + b.popularity
        })
        .collect()
}

/// Utilities of every brand given the static scores and the recent history.
/// `recent` holds at most the last ten `(brand index, action)` pairs, oldest first.
fn utilities(config: &SynthConfig, base: &[f64], recent: &[(usize, ActionType)], gap_secs: f64) -> Vec<f64> {
    let mut u = base.to_vec();
    let mut purchased = vec![false; u.len()];
    let mut clicked = vec![false; u.len()];
    for &(k, a) in recent {
        match a {
            ActionType::Purchase => purchased[k] = true,
            ActionType::Click => clicked[k] = true,
        }
    }
    for k in 0..u.len() {
        if purchased[k] {
            u[k] += config.purchase_boost;
        } else if clicked[k] {
            u[k] += config.click_boost;
        }
    }
    if let Some(&(prev, _)) = recent.last() {
        u[prev] += config.decay_strength * (-gap_secs / config.half_life_secs).exp2();
    }
    u
}

fn choice_probabilities(u: &[f64]) -> Vec<f64> {
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn push_action_events(
    rng: &mut ChaCha8Rng,
    events: &mut Vec<EventRecord>,
    user: &str,
    brand: &BrandLatent,
    action: ActionType,
    t: i64,
) {
    let (item, price) = &brand.items[rng.gen_range(0..brand.items.len())];
    let mut push = |event_type, timestamp, amount| {
        events.push(EventRecord {
            user_id: user.to_string(),
            item_id: item.clone(),
            event_type,
            timestamp,
            amount,
        })
    };
    if rng.gen_bool(0.5) {
        push(EventType::Search, t - 30, 0.0);
    }
    push(EventType::Impression, t - 10, 0.0);
    push(EventType::Click, t, 0.0);
    if action == ActionType::Purchase {
        push(EventType::AddToCart, t + 5, 0.0);
        push(EventType::Purchase, t + 10, *price);
    }
}

fn background_events(config: &SynthConfig, brands: &[BrandLatent], k: usize, events: &mut Vec<EventRecord>) {
    let mut rng = stream_rng(config.seed, (config.users + 1 + k) as u64);
    let brand = &brands[k];
    let mean_pop: f64 =
        brands.iter().map(|b| b.popularity.exp()).sum::<f64>() / brands.len() as f64;
    let rel = brand.popularity.exp() / mean_pop;
    let sessions = ((config.background_sessions as f64) * (0.5 + 0.5 * rel)).round().max(1.0) as usize;
    let ctr = sigmoid(-1.0 + 0.5 * brand.quality);
    let cvr = sigmoid(-2.0 + 0.5 * brand.quality);
    let user = format!("bg{}", config.seed);
    for _ in 0..sessions {
        let (item, price) = &brand.items[rng.gen_range(0..brand.items.len())];
        let t = START_TIME + rng.gen_range(0..(START_SPREAD_SECS as i64 * 4));
        let mut push = |event_type, timestamp, amount| {
            events.push(EventRecord {
                user_id: user.clone(),
                item_id: item.clone(),
                event_type,
                timestamp,
                amount,
            })
        };
        if rng.gen_bool(0.3) {
            push(EventType::Search, t - 20, 0.0);
        }
        push(EventType::Impression, t, 0.0);
        if rng.gen_bool(ctr) {
            push(EventType::Click, t + 5, 0.0);
            if rng.gen_bool((cvr * 1.5).min(1.0)) {
                push(EventType::AddToCart, t + 10, 0.0);
                if rng.gen_bool((cvr / (cvr * 1.5).min(1.0)).min(1.0)) {
                    push(EventType::Purchase, t + 15, *price);
                }
            }
        }
    }
}

/// Generates one dataset. Output depends only on `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let brands = make_brands(config);
    let brand_ids: Vec<String> = (0..config.brands).map(brand_id).collect();
    let items: Vec<ItemRecord> = brands
        .iter()
        .zip(&brand_ids)
        .flat_map(|(b, id)| {
            b.items.iter().map(move |(item, price)| ItemRecord {
                item_id: item.clone(),
                brand_id: id.clone(),
                category_id: format!("c{:02}", b.category),
                price: *price,
            })
        })
        .collect();

    let mut events = Vec::new();
    let mut actions = ActionLog::new();
    let mut truth = BTreeMap::new();
    let (ln_lo, ln_hi) = (config.min_gap_secs.ln(), config.max_gap_secs.ln());
    for u in 0..config.users {
        let mut rng = stream_rng(config.seed, 1 + u as u64);
        let uid = user_id(config.seed, u);
        let affinity: Vec<f64> = (0..config.affinity_dim).map(|_| normal(&mut rng)).collect();
        let level = rng.gen_range(1..=7usize);
        let len = rng.gen_range(config.min_sequence_len..=config.max_sequence_len);
        let base = static_scores(config, &brands, &affinity, level);

        let mut t = START_TIME + rng.gen_range(0..START_SPREAD_SECS as i64);
        let mut recent: Vec<(usize, ActionType)> = Vec::with_capacity(len);
        let mut seq = Vec::with_capacity(len);
        for m in 0..len {
            let mut gap = 0.0;
            if m > 0 {
                gap = rng.gen_range(ln_lo..=ln_hi).exp().round().max(1.0);
                t += gap as i64;
            }
            let window = &recent[recent.len().saturating_sub(HISTORY_LEN)..];
            let probs = choice_probabilities(&utilities(config, &base, window, gap));
            let k = draw(&mut rng, &probs);
            let p_buy = sigmoid(
                config.purchase_bias + config.purchase_affinity * dot(&affinity, &brands[k].vector),
            );
            let action = if rng.gen_bool(p_buy) {
                ActionType::Purchase
            } else {
                ActionType::Click
            };
            push_action_events(&mut rng, &mut events, &uid, &brands[k], action, t);
            recent.push((k, action));
            seq.push(ActionTuple {
                user_id: uid.clone(),
                brand_id: brand_ids[k].clone(),
                action_type: action,
                timestamp: t,
            });
        }
        actions.insert(uid.clone(), seq);
        truth.insert(uid, base);
    }
    for k in 0..config.brands {
        background_events(config, &brands, k, &mut events);
    }
    Ok(SynthOutput {
        items,
        events,
        actions,
        truth: GroundTruth {
            config: config.clone(),
            brands: brand_ids,
            scores: truth,
        },
    })
}

/// The generator's probability that the instance's user picks the query
/// brand next, given the instance history and the gap to the query.
pub fn oracle_scores(truth: &GroundTruth, instances: &[TrainingInstance]) -> Result<Vec<f64>> {
    let index: HashMap<&str, usize> = truth
        .brands
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();
    let lookup = |b: &str| {
        index
            .get(b)
            .copied()
            .ok_or_else(|| Error::Vocabulary(b.to_string()))
    };
    instances
        .iter()
        .map(|inst| {
            let base = truth.scores.get(&inst.user_id).ok_or_else(|| {
                Error::Invalid(format!("user {} is not part of this synthetic run", inst.user_id))
            })?;
            let recent = inst
                .history
                .iter()
                .map(|s| Ok((lookup(&s.brand_id)?, s.action)))
                .collect::<Result<Vec<_>>>()?;
            let gap = inst.history.last().map_or(0.0, |s| s.delta_t as f64);
            let q = lookup(&inst.query_brand)?;
            Ok(choice_probabilities(&utilities(&truth.config, base, &recent, gap))[q])
        })
        .collect()
}

pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "brand_id", "score"])?;
    for (user, scores) in &truth.scores {
        for (b, s) in truth.brands.iter().zip(scores) {
            w.write_record([user.as_str(), b.as_str(), &format!("{s:.17e}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `truth.csv` next to the `synth_config.json` written by [`write_output`].
pub fn read_truth(dir: &Path) -> Result<GroundTruth> {
    let config_path = dir.join("synth_config.json");
    let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: SynthConfig = serde_json::from_str(&text)?;
    let brands: Vec<String> = (0..config.brands).map(brand_id).collect();
    let index: HashMap<&str, usize> = brands.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let truth_path = dir.join("truth.csv");
    let mut rdr = csv::Reader::from_path(&truth_path)?;
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |message: String| Error::Data {
            path: truth_path.display().to_string(),
            line: line as u64 + 2,
            message,
        };
        let (user, brand, score) = (&row[0], &row[1], &row[2]);
        let k = *index.get(brand).ok_or_else(|| bad(format!("unknown brand {brand}")))?;
        let score: f64 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        scores
            .entry(user.to_string())
            .or_insert_with(|| vec![f64::NAN; config.brands])[k] = score;
    }
    if scores.values().flatten().any(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("{} misses user/brand rows", truth_path.display())));
    }
    Ok(GroundTruth { config, brands, scores })
}

/// Writes `items.csv`, `events.csv`, `actions.csv`, `truth.csv` and
/// `synth_config.json` into `dir`.
pub fn write_output(dir: &Path, out: &SynthOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_items(&dir.join("items.csv"), &out.items)?;
    write_events(&dir.join("events.csv"), &out.events)?;
    write_action_log(&dir.join("actions.csv"), &out.actions)?;
    write_truth(&dir.join("truth.csv"), &out.truth)?;
    let cfg = serde_json::to_string_pretty(&out.truth.config)?;
    let path = dir.join("synth_config.json");
    std::fs::write(&path, cfg + "\n").map_err(|e| Error::io(&path, e))
}
