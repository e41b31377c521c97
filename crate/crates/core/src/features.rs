//! Brand feature engineering.
//!
//! Items of each category are cut into seven price levels by price quantile.
//! For every brand, eight e-commerce metrics are aggregated inside each level
//! and the 7 × 8 values are concatenated into one 56-wide vector, ordered
//! level-major. Columns are then squashed with `log1p` and min-max scaled
//! across brands.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRICE_LEVELS: usize = 7;
pub const METRICS_PER_LEVEL: usize = 8;
pub const FEATURE_DIM: usize = PRICE_LEVELS * METRICS_PER_LEVEL;

/// Column suffixes of one price level, in vector order.
pub const METRIC_NAMES: [&str; METRICS_PER_LEVEL] =
    ["ctr", "cvr", "gmv", "atip", "search", "click", "cart", "txn"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub brand_id: String,
    pub category_id: String,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Search,
    Impression,
    Click,
    AddToCart,
    Purchase,
}

impl EventType {
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Search => "search",
            EventType::Impression => "impression",
            EventType::Click => "click",
            EventType::AddToCart => "add_to_cart",
            EventType::Purchase => "purchase",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "search" => Ok(EventType::Search),
            "impression" => Ok(EventType::Impression),
            "click" => Ok(EventType::Click),
            "add_to_cart" => Ok(EventType::AddToCart),
            "purchase" => Ok(EventType::Purchase),
            other => Err(format!("unknown event_type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub item_id: String,
    pub event_type: EventType,
    pub timestamp: i64,
    pub amount: f64,
}

/// Upper price bounds of the seven levels of one category.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceLevelTable {
    pub category_id: String,
    pub boundaries: [f64; PRICE_LEVELS],
}

/// Raw (un-normalized) metrics of one (brand, level) slice, in vector order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelMetrics {
    pub ctr: f64,
    pub cvr: f64,
    pub gmv: f64,
    pub atip: f64,
    pub search_times: f64,
    pub click_times: f64,
    pub add_to_cart_times: f64,
    pub transaction_times: f64,
}

impl LevelMetrics {
    pub fn to_array(self) -> [f64; METRICS_PER_LEVEL] {
        [
            self.ctr,
            self.cvr,
            self.gmv,
            self.atip,
            self.search_times,
            self.click_times,
            self.add_to_cart_times,
            self.transaction_times,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrandFeatureVector {
    pub brand_id: String,
    pub values: Vec<f64>,
}

/// Per-column `log1p` range used by the min-max scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub log_min: Vec<f64>,
    pub log_max: Vec<f64>,
}

impl Normalization {
    /// Maps a raw value of `column` into `[0, 1]`; degenerate columns map to 0.
    pub fn normalize(&self, column: usize, raw: f64) -> f64 {
        let (lo, hi) = (self.log_min[column], self.log_max[column]);
        if hi <= lo {
            return 0.0;
        }
        ((raw.ln_1p() - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// Inverse of [`Normalization::normalize`] on non-degenerate columns.
    pub fn denormalize(&self, column: usize, value: f64) -> f64 {
        let (lo, hi) = (self.log_min[column], self.log_max[column]);
        if hi <= lo {
            return lo.exp_m1();
        }
        (lo + value * (hi - lo)).exp_m1()
    }
}

/// Output of [`build_brand_feature_vectors`].
#[derive(Debug, Clone, PartialEq)]
pub struct BrandFeatures {
    pub vectors: Vec<BrandFeatureVector>,
    pub raw: Vec<Vec<f64>>,
    pub normalization: Normalization,
    /// Brands that own no items and got an all-zero vector.
    pub cold_brands: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FeatureOptions {
    /// Put every item of a category with fewer than seven items into level 1
    /// instead of failing.
    pub allow_small_categories: bool,
}

/// Computes the seven quantile boundaries of one category.
///
/// With sorted prices `p_1..p_n`, boundary `j` is `p_{floor(j·n/7)}`.
pub fn compute_price_levels(items: &[ItemRecord], category: &str) -> Result<PriceLevelTable> {
    price_levels_with(items, category, FeatureOptions::default())
}

fn price_levels_with(
    items: &[ItemRecord],
    category: &str,
    options: FeatureOptions,
) -> Result<PriceLevelTable> {
    let mut prices: Vec<f64> = items
        .iter()
        .filter(|i| i.category_id == category)
        .map(|i| i.price)
        .collect();
    if let Some(bad) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::Invalid(format!(
            "category {category} has a non-positive price {bad}"
        )));
    }
    prices.sort_by(f64::total_cmp);
    let n = prices.len();
    if n < PRICE_LEVELS {
        if options.allow_small_categories && n > 0 {
            let max = prices[n - 1];
            return Ok(PriceLevelTable {
                category_id: category.to_string(),
                boundaries: [max; PRICE_LEVELS],
            });
        }
        return Err(Error::DegenerateCategory {
            category: category.to_string(),
            count: n,
        });
    }
    let mut boundaries = [0.0; PRICE_LEVELS];
    for (j, b) in boundaries.iter_mut().enumerate() {
        let idx = (j + 1) * n / PRICE_LEVELS;
        *b = prices[idx - 1];
    }
    Ok(PriceLevelTable {
        category_id: category.to_string(),
        boundaries,
    })
}

/// Level (1-based) of an item: the smallest `j` with `price <= boundary_j`,
/// clamped to 7 for prices above the table.
pub fn assign_price_level(item: &ItemRecord, table: &PriceLevelTable) -> Result<usize> {
    if item.category_id != table.category_id {
        return Err(Error::Contract(format!(
            "item {} is in category {}, table is for {}",
            item.item_id, item.category_id, table.category_id
        )));
    }
    if !(item.price > 0.0) {
        return Err(Error::Invalid(format!(
            "item {} has non-positive price {}",
            item.item_id, item.price
        )));
    }
    Ok(table
        .boundaries
        .iter()
        .position(|&b| item.price <= b)
        .map_or(PRICE_LEVELS, |j| j + 1))
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    impressions: f64,
    searches: f64,
    clicks: f64,
    carts: f64,
    purchases: f64,
    gmv: f64,
}

impl Counts {
    fn add(&mut self, e: &EventRecord) {
        match e.event_type {
            EventType::Search => self.searches += 1.0,
            EventType::Impression => self.impressions += 1.0,
            EventType::Click => self.clicks += 1.0,
            EventType::AddToCart => self.carts += 1.0,
            EventType::Purchase => {
                self.purchases += 1.0;
                self.gmv += e.amount;
            }
        }
    }

    fn metrics(&self) -> LevelMetrics {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        LevelMetrics {
            ctr: ratio(self.clicks, self.impressions),
            cvr: ratio(self.purchases, self.clicks),
            gmv: self.gmv,
            atip: ratio(self.gmv, self.purchases),
            search_times: self.searches,
            click_times: self.clicks,
            add_to_cart_times: self.carts,
            transaction_times: self.purchases,
        }
    }
}

/// Level of every item, keyed by item id.
fn item_levels(items: &[ItemRecord], options: FeatureOptions) -> Result<HashMap<&str, usize>> {
    let categories: BTreeSet<&str> = items.iter().map(|i| i.category_id.as_str()).collect();
    let mut tables = HashMap::new();
    for c in categories {
        tables.insert(c, price_levels_with(items, c, options)?);
    }
    let mut levels = HashMap::with_capacity(items.len());
    for item in items {
        let level = assign_price_level(item, &tables[item.category_id.as_str()])?;
        levels.insert(item.item_id.as_str(), level);
    }
    Ok(levels)
}

/// The eight raw metrics of one (brand, level) slice.
///
/// Events referencing unknown items are ignored. Ratios with a zero
/// denominator are 0.
pub fn aggregate_brand_metrics(
    events: &[EventRecord],
    items: &[ItemRecord],
    brand: &str,
    level: usize,
) -> Result<LevelMetrics> {
    aggregate_with(events, items, brand, level, FeatureOptions::default())
}

fn aggregate_with(
    events: &[EventRecord],
    items: &[ItemRecord],
    brand: &str,
    level: usize,
    options: FeatureOptions,
) -> Result<LevelMetrics> {
    if !(1..=PRICE_LEVELS).contains(&level) {
        return Err(Error::Contract(format!("price level {level} is outside 1..=7")));
    }
    let levels = item_levels(items, options)?;
    let selected: HashMap<&str, ()> = items
        .iter()
        .filter(|i| i.brand_id == brand && levels[i.item_id.as_str()] == level)
        .map(|i| (i.item_id.as_str(), ()))
        .collect();
    let mut counts = Counts::default();
    for e in events {
        if selected.contains_key(e.item_id.as_str()) {
            counts.add(e);
        }
    }
    Ok(counts.metrics())
}

/// Builds one normalized 56-wide vector per brand, in the order of `brands`.
pub fn build_brand_feature_vectors(
    events: &[EventRecord],
    items: &[ItemRecord],
    brands: &[String],
    options: FeatureOptions,
) -> Result<BrandFeatures> {
    let levels = item_levels(items, options)?;
    let brand_index: HashMap<&str, usize> = brands
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();
    // item -> (brand slot, level)
    let mut slot_of_item: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut has_items = vec![false; brands.len()];
    for item in items {
        if let Some(&b) = brand_index.get(item.brand_id.as_str()) {
            slot_of_item.insert(item.item_id.as_str(), (b, levels[item.item_id.as_str()]));
            has_items[b] = true;
        }
    }
    let mut counts = vec![[Counts::default(); PRICE_LEVELS]; brands.len()];
    for e in events {
        if let Some(&(b, level)) = slot_of_item.get(e.item_id.as_str()) {
            counts[b][level - 1].add(e);
        }
    }
    let raw: Vec<Vec<f64>> = counts
        .iter()
        .map(|per_level| {
            per_level
                .iter()
                .flat_map(|c| c.metrics().to_array())
                .collect()
        })
        .collect();

    let mut cold_brands = Vec::new();
    for (b, has) in has_items.iter().enumerate() {
        if !has {
            log::warn!("brand {} has no items; using an all-zero feature vector", brands[b]);
            cold_brands.push(brands[b].clone());
        }
    }

    let mut log_min = vec![f64::INFINITY; FEATURE_DIM];
    let mut log_max = vec![f64::NEG_INFINITY; FEATURE_DIM];
    for row in &raw {
        for (c, v) in row.iter().enumerate() {
            let l = v.ln_1p();
            log_min[c] = log_min[c].min(l);
            log_max[c] = log_max[c].max(l);
        }
    }
    if raw.is_empty() {
        log_min.fill(0.0);
        log_max.fill(0.0);
    }
    let normalization = Normalization { log_min, log_max };
    let vectors = brands
        .iter()
        .zip(&raw)
        .map(|(brand, row)| BrandFeatureVector {
            brand_id: brand.clone(),
            values: row
                .iter()
                .enumerate()
                .map(|(c, &v)| normalization.normalize(c, v))
                .collect(),
        })
        .collect();
    Ok(BrandFeatures {
        vectors,
        raw,
        normalization,
        cold_brands,
    })
}

/// Sorted, de-duplicated brand ids of an item table.
pub fn brands_of(items: &[ItemRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = items.iter().map(|i| i.brand_id.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

pub fn feature_header() -> Vec<String> {
    let mut header = vec!["brand_id".to_string()];
    for level in 1..=PRICE_LEVELS {
        for m in METRIC_NAMES {
            header.push(format!("L{level}_{m}"));
        }
    }
    header
}

fn check_header(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::Data {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(())
}

fn data_error(path: &Path, record: &csv::StringRecord, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        line: record.position().map_or(0, |p| p.line()),
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn field<'r>(path: &Path, record: &'r csv::StringRecord, i: usize) -> Result<&'r str> {
    record
        .get(i)
        .ok_or_else(|| data_error(path, record, format!("missing column {}", i + 1)))
}

fn number<T: FromStr>(path: &Path, record: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let raw = field(path, record, i)?;
    raw.trim()
        .parse()
        .map_err(|_| data_error(path, record, format!("invalid {what} {raw:?}")))
}

pub fn read_items(path: &Path) -> Result<Vec<ItemRecord>> {
    let mut rdr = open_csv(path)?;
    check_header(path, rdr.headers()?, &["item_id", "brand_id", "category_id", "price"])?;
    let mut items = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let price: f64 = number(path, &record, 3, "price")?;
        if !(price > 0.0) || !price.is_finite() {
            return Err(data_error(path, &record, format!("price must be positive, got {price}")));
        }
        items.push(ItemRecord {
            item_id: field(path, &record, 0)?.to_string(),
            brand_id: field(path, &record, 1)?.to_string(),
            category_id: field(path, &record, 2)?.to_string(),
            price,
        });
    }
    Ok(items)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let mut rdr = open_csv(path)?;
    check_header(path, rdr.headers()?, &["user_id", "item_id", "event_type", "timestamp", "amount"])?;
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let event_type: EventType = field(path, &record, 2)?
            .parse()
            .map_err(|m: String| data_error(path, &record, m))?;
        let amount: f64 = number(path, &record, 4, "amount")?;
        if amount < 0.0 || (amount > 0.0 && event_type != EventType::Purchase) {
            return Err(data_error(
                path,
                &record,
                format!("amount {amount} is only allowed on purchase events"),
            ));
        }
        events.push(EventRecord {
            user_id: field(path, &record, 0)?.to_string(),
            item_id: field(path, &record, 1)?.to_string(),
            event_type,
            timestamp: number(path, &record, 3, "timestamp")?,
            amount,
        });
    }
    Ok(events)
}

pub fn write_items(path: &Path, items: &[ItemRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item_id", "brand_id", "category_id", "price"])?;
    for i in items {
        w.write_record([&i.item_id, &i.brand_id, &i.category_id, &i.price.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "item_id", "event_type", "timestamp", "amount"])?;
    for e in events {
        w.write_record([
            e.user_id.as_str(),
            e.item_id.as_str(),
            e.event_type.as_str(),
            &e.timestamp.to_string(),
            &e.amount.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_features(path: &Path, vectors: &[BrandFeatureVector]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(feature_header())?;
    for v in vectors {
        let mut row = vec![v.brand_id.clone()];
        row.extend(v.values.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `features.csv` into a brand → vector map.
pub fn read_features(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = open_csv(path)?;
    let header = feature_header();
    let expected: Vec<&str> = header.iter().map(String::as_str).collect();
    check_header(path, rdr.headers()?, &expected)?;
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let values = (1..=FEATURE_DIM)
            .map(|i| number::<f64>(path, &record, i, "feature value"))
            .collect::<Result<Vec<_>>>()?;
        out.insert(field(path, &record, 0)?.to_string(), values);
    }
    Ok(out)
}
