//! Finite-difference checks of the model gradients on small random problems.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ActionType, BrandTable, EncodedInstance, EncodedStep, Vocabulary};
use crate::error::Result;
use crate::models::{BrandRepr, Model, ModelConfig, Variant};
use crate::nn::{finite_diff_check, GradCheckReport};

/// The GRU baseline followed by Attention-GRU under all eight combinations of
/// the three modifications, labelled like `Attention-GRU+M1+M3`.
pub fn modification_grid(brands: usize, feature_dim: usize, hidden: usize) -> Vec<(String, ModelConfig)> {
    let mut out = vec![("GRU".to_string(), Variant::Gru.config(brands, feature_dim, hidden))];
    for bits in 0..8u8 {
        let mut c = Variant::AttentionGru.config(brands, feature_dim, hidden);
        let mut name = String::from("Attention-GRU");
        if bits & 1 != 0 {
            c.brand_repr = BrandRepr::Combined;
            name.push_str("+M1");
        }
        if bits & 2 != 0 {
            c.use_action_matrices = true;
            name.push_str("+M2");
        }
        if bits & 4 != 0 {
            c.use_time_gate = true;
            name.push_str("+M3");
        }
        out.push((name, c));
    }
    out
}

/// A random brand table, a randomly initialized model and one random
/// instance with `history_len` steps.
pub fn random_problem(
    config: ModelConfig,
    history_len: usize,
    seed: u64,
) -> Result<(Model, BrandTable, EncodedInstance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.brand_vocab_size;
    let ids: Vec<String> = (0..n).map(|i| format!("b{i}")).collect();
    let features: BTreeMap<String, Vec<f64>> = ids
        .iter()
        .map(|id| (id.clone(), (0..config.feature_dim).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect();
    let table = BrandTable::new(Vocabulary::new(ids), &features, config.feature_dim)?;
    let model = Model::init(config, &mut rng)?;
    let history = (0..history_len)
        .map(|_| EncodedStep {
            brand: rng.gen_range(0..n),
            action: if rng.gen_bool(0.4) {
                ActionType::Purchase
            } else {
                ActionType::Click
            },
            delta_t: rng.gen_range(60.0..5.0 * 86_400.0),
        })
        .collect();
    let inst = EncodedInstance {
        history,
        query: rng.gen_range(0..n),
        label: rng.gen_range(0..=1),
    };
    Ok((model, table, inst))
}

/// Central-difference check of the full instance-loss gradient.
pub fn check_gradients(
    config: ModelConfig,
    history_len: usize,
    seed: u64,
    step: f64,
    negative_weight: f64,
) -> Result<GradCheckReport> {
    let (model, table, inst) = random_problem(config, history_len, seed)?;
    let fwd = model.forward(&inst, &table)?;
    let mut grads = model.params.zeros_like();
    model.backward(&inst, &table, &fwd, negative_weight, &mut grads)?;
    finite_diff_check(
        &model.params,
        |p| {
            let m = Model {
                config,
                params: p.clone(),
            };
            m.loss(&inst, &table, negative_weight).unwrap_or(f64::NAN)
        },
        &grads,
        step,
    )
}
