//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use std::path::Path;

use nckge::config::RunConfig;
use nckge::synth;
use nckge::Real;

/// Overrides for the small memorisation setup on the toy graph.
pub const TOY_OVERRIDES: &[&str] = &[
    "--encoder.layers=1",
    "--encoder.dim=32",
    "--encoder.heads=4",
    "--encoder.dropout=0.0",
    "--scorer.kind=conve",
    "--scorer.conve.rows=4",
    "--scorer.conve.cols=8",
    "--scorer.conve.filters=8",
    "--scorer.conve.hidden_dropout=0.0",
    "--loss.kind=nc",
    "--loss.negatives=all",
    "--loss.tau.strategy=dynamic",
    "--train.epochs=200",
    "--train.batch_size=128",
    "--train.lr=0.003",
    "--loss.tau.init=0.3",
    "--train.weight_decay=0.0",
    "--run.workers=1",
];

/// Writes the toy dataset into `dir/data` and returns a config whose runs
/// land in `dir/<name>`.
pub fn toy_config(dir: &Path, name: &str, extra: &[&str]) -> RunConfig {
    let data = dir.join("data");
    if !data.join("train.tsv").exists() {
        synth::write_toy_dataset(&data).unwrap();
    }
    let mut args: Vec<String> = TOY_OVERRIDES.iter().map(|s| s.to_string()).collect();
    args.push(format!("--dataset.dir={}", data.display()));
    args.push(format!("--run.out_dir={}", dir.join(name).display()));
    args.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, &args).unwrap()
}

/// Largest relative error between two gradients, with an absolute floor so
/// entries near zero do not dominate.
pub fn max_rel_error(analytic: &[Real], numeric: &[Real]) -> Real {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, Real::max)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
