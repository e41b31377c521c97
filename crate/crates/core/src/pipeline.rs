//! In-memory glue: raw logs to encoded train/test sets.

use crate::dataset::{
    build_dataset, encode_all, filter_sparse, ActionLog, BrandTable, DatasetOptions, EncodedInstance,
    TrainingInstance, DEFAULT_MIN_BRAND_ACTIONS, DEFAULT_MIN_USER_ACTIONS,
};
use crate::error::Result;
use crate::features::{build_brand_feature_vectors, EventRecord, FeatureOptions, ItemRecord, FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    pub min_user_actions: usize,
    pub min_brand_actions: usize,
    pub dataset: DatasetOptions,
    pub features: FeatureOptions,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            min_user_actions: DEFAULT_MIN_USER_ACTIONS,
            min_brand_actions: DEFAULT_MIN_BRAND_ACTIONS,
            dataset: DatasetOptions::default(),
            features: FeatureOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub table: BrandTable,
    pub train: Vec<EncodedInstance>,
    pub test: Vec<EncodedInstance>,
    pub train_raw: Vec<TrainingInstance>,
    pub test_raw: Vec<TrainingInstance>,
}

/// Filters the action log, windows it, builds brand features for the
/// surviving brands and encodes both splits.
pub fn prepare(
    items: &[ItemRecord],
    events: &[EventRecord],
    actions: &ActionLog,
    options: PrepareOptions,
) -> Result<Prepared> {
    let filtered = filter_sparse(actions, options.min_user_actions, options.min_brand_actions)?;
    let dataset = build_dataset(&filtered, options.dataset)?;
    let features = build_brand_feature_vectors(events, items, dataset.vocab.ids(), options.features)?;
    let map = features
        .vectors
        .into_iter()
        .map(|v| (v.brand_id, v.values))
        .collect();
    let table = BrandTable::new(dataset.vocab, &map, FEATURE_DIM)?;
    Ok(Prepared {
        train: encode_all(&dataset.train, &table.vocab)?,
        test: encode_all(&dataset.test, &table.vocab)?,
        train_raw: dataset.train,
        test_raw: dataset.test,
        table,
    })
}
