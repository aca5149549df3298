//! Browser bindings for the demo page in `www/`. Each export returns a JSON
//! string; the same computations are available to Rust callers through the
//! `*_json` functions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use den_core::analysis::{self, Deployment, ModelHistogram};
use den_core::data::{gen_synthetic_tasks, SplitSizes, SyntheticSpec};
use den_core::estimator::BlockConfig;
use den_core::rng::{derive_rng, stream};
use den_core::trainer::{initial_structure_sampler, run_training, TrainConfig};
use den_core::{EstimatorConfig, Error, ModelStructure, Result};

/// Exact and empirical probabilities of the stage-1 sampler.
pub fn initial_distribution_json(h: usize, n: usize, tau: f64, draws: usize, seed: u64) -> Result<Value> {
    if draws == 0 || (h as f64).powi(n as i32) > 1e9 {
        return Err(Error::Config("need draws ≥ 1 and at most 1e9 structures".into()));
    }
    let sampler = initial_structure_sampler(h, n, tau)?;
    let full = ModelStructure::new(vec![h - 1; n]);
    let lowest = ModelStructure::new(vec![0; n]);
    let mut rng = derive_rng(seed, &[stream::ANALYSIS, 3]);
    let drawn: Vec<ModelStructure> = (0..draws).map(|_| sampler.sample(&mut rng)).collect();
    let hist = ModelHistogram::from_structures(&drawn);
    let top: Vec<Value> = hist
        .ranked()
        .into_iter()
        .take(8)
        .map(|(z, c)| json!({ "structure": z, "frequency": c as f64 / draws as f64 }))
        .collect();
    Ok(json!({
        "full_probability": sampler.probability(&full),
        "other_probability": sampler.probability(&lowest),
        "empirical_full": hist.counts.get(&full.to_string()).copied().unwrap_or(0) as f64 / draws as f64,
        "distinct": hist.distinct(),
        "top": top,
    }))
}

/// Per-level width, parameter count, FLOPs and density of one block.
/// `output` is ignored for residual blocks.
pub fn block_costs_json(input: usize, output: usize, groups: &[usize], residual: bool) -> Result<Value> {
    let block = if residual {
        BlockConfig::residual(input, groups.to_vec())
    } else {
        BlockConfig::plain(input, output, groups.to_vec())
    };
    block.validate(0)?;
    let rows: Vec<Value> = (0..block.levels())
        .map(|l| {
            json!({
                "level": l,
                "active_width": block.active_width(l),
                "params": block.param_count(l),
                "flops": block.flops(l),
                "density": block.density(l),
            })
        })
        .collect();
    Ok(json!(rows))
}

/// A short training run on a reduced copy of the shipped synthetic suite.
pub fn train_demo_json(rho: f64, seed: u64) -> Result<Value> {
    let spec = SyntheticSpec {
        seed,
        samples: SplitSizes {
            train: 400,
            val: 100,
            test: 200,
        },
        ..SyntheticSpec::default()
    };
    let suite = gen_synthetic_tasks(&spec)?;
    let cfg = EstimatorConfig::uniform_residual(spec.input_width, 6, vec![4, 4], &suite.classes)?;
    let train = TrainConfig {
        rho,
        seed,
        epsilon: 0.0,
        sample_count: 16,
        stages: 2,
        epochs_per_phase: 10,
        selector_epochs_per_phase: 6,
        lr_est: 0.01,
        lr_sel: 0.01,
        ..TrainConfig::default()
    };
    let outcome = run_training(&cfg, 32, &train, &suite, false)?;
    let zs = analysis::deploy(&outcome.selector, &suite.test, Deployment::Argmax)?;
    let den = analysis::evaluate(&outcome.estimator, &cfg, &suite.test, &zs)?;
    let rz = analysis::matched_random_structures(&zs, cfg.levels(), zs.len(), seed)?;
    let random = analysis::evaluate(&outcome.estimator, &cfg, &suite.test, &rz)?;
    let hist = ModelHistogram::from_structures(&zs);
    let probs = analysis::mean_level_probability(&outcome.selector, &suite.test)?;
    Ok(json!({
        "epochs": outcome.metrics.len(),
        "accuracy": den.accuracy,
        "random_accuracy": random.accuracy,
        "mean_density": den.cost.mean_density,
        "mean_flops": den.cost.mean_flops,
        "distinct": hist.distinct(),
        "top": hist.ranked().into_iter().take(5).collect::<Vec<_>>(),
        "level_probs": probs.rows(),
    }))
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn initial_distribution(h: usize, n: usize, tau: f64, draws: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_js(initial_distribution_json(h, n, tau, draws, seed.into()))
}

/// `groups` is a comma-separated list of group sizes.
#[wasm_bindgen]
pub fn block_costs(input: usize, output: usize, groups: &str, residual: bool) -> std::result::Result<String, JsError> {
    let parsed: std::result::Result<Vec<usize>, _> = groups.split(',').map(|g| g.trim().parse::<usize>()).collect();
    match parsed {
        Ok(g) => to_js(block_costs_json(input, output, &g, residual)),
        Err(_) => Err(JsError::new("group sizes must be comma-separated integers")),
    }
}

#[wasm_bindgen]
pub fn train_demo(rho: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(train_demo_json(rho, seed.into()))
}
