//! Flat `key = value` view of the model and training configuration, shared
//! by the config file parser and the checkpoint header.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

/// Model keys in a fixed order.
pub fn model_pairs(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("d_raw", m.input_dim.to_string()),
        ("k", m.k.to_string()),
        ("d", m.hidden.to_string()),
        ("layers", m.layers.to_string()),
        ("d_s", m.token_hidden.to_string()),
        ("d_c", m.channel_hidden.to_string()),
        ("classes", m.classes.to_string()),
        ("aggregator", m.aggregator.to_string()),
        ("lambda_max", m.lambda_max.to_string()),
        ("extractor", m.extractor.to_string()),
        ("mixer_bias", m.mixer_bias.to_string()),
        ("halve_c0", m.halve_c0.to_string()),
    ]
}

/// Sets one model key; returns `Ok(false)` when the key is not a model key.
pub fn set_model(m: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "d_raw" => m.input_dim = parse(key, value)?,
        "k" => m.k = parse(key, value)?,
        "d" => m.hidden = parse(key, value)?,
        "layers" => m.layers = parse(key, value)?,
        "d_s" => m.token_hidden = parse(key, value)?,
        "d_c" => m.channel_hidden = parse(key, value)?,
        "classes" => m.classes = parse(key, value)?,
        "aggregator" => m.aggregator = value.parse()?,
        "lambda_max" => m.lambda_max = value.parse()?,
        "extractor" => m.extractor = value.parse()?,
        "mixer_bias" => m.mixer_bias = parse(key, value)?,
        "halve_c0" => m.halve_c0 = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Training keys (model keys included) in a fixed order.
pub fn train_pairs(t: &TrainConfig) -> Vec<(&'static str, String)> {
    let mut out = vec![
        ("lr", t.lr.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("eps", t.eps.to_string()),
        ("max_epochs", t.max_epochs.to_string()),
        ("patience", t.patience.to_string()),
        ("seed", t.seed.to_string()),
        ("train_frac", t.split.0.to_string()),
        ("val_frac", t.split.1.to_string()),
        ("test_frac", t.split.2.to_string()),
        ("record_timing", t.record_timing.to_string()),
    ];
    out.extend(model_pairs(&t.model));
    out
}

/// Sets one training or model key; returns `Ok(false)` for unknown keys.
pub fn set_train(t: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "lr" => t.lr = parse(key, value)?,
        "weight_decay" => t.weight_decay = parse(key, value)?,
        "beta1" => t.beta1 = parse(key, value)?,
        "beta2" => t.beta2 = parse(key, value)?,
        "eps" => t.eps = parse(key, value)?,
        "max_epochs" => t.max_epochs = parse(key, value)?,
        "patience" => t.patience = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "train_frac" => t.split.0 = parse(key, value)?,
        "val_frac" => t.split.1 = parse(key, value)?,
        "test_frac" => t.split.2 = parse(key, value)?,
        "record_timing" => t.record_timing = parse(key, value)?,
        _ => return set_model(&mut t.model, key, value),
    }
    Ok(true)
}
