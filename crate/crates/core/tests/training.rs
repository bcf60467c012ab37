//! Confidence-network training on a linear task the network can represent
//! exactly, and on the same task with the targets permuted.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use satinfer::confidence::{train, NetConfig, ProgressiveConfidenceNet, StageInput, TrainConfig, TrainingRecord};
use satinfer::rng;

fn linear_task(cfg: &NetConfig, n: usize, seed: u64) -> Vec<TrainingRecord> {
    let mut weights = rng::stream(99, &[]);
    let d = cfg.image_dim;
    let w: Vec<f64> = (0..d)
        .map(|_| 0.25 / (d as f64).sqrt() * weights.sample::<f64, _>(StandardNormal))
        .collect();
    let mut rng = rng::stream(seed, &[]);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let target = (0.5 + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).clamp(0.0, 1.0);
            let blocks: Vec<Vec<f64>> = (1..cfg.stages)
                .map(|_| (0..cfg.token_embed_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            TrainingRecord {
                stages: (0..cfg.stages)
                    .map(|s| StageInput {
                        image_features: x.clone(),
                        token_blocks: blocks[..s].to_vec(),
                    })
                    .collect(),
                target,
            }
        })
        .collect()
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn linear_task_generalizes_and_loss_settles() {
    let cfg = NetConfig::default();
    let data = linear_task(&cfg, 1000, 1);
    let held_out = linear_task(&cfg, 500, 2);
    let (net, history) = train(&ProgressiveConfidenceNet::new(cfg.clone()).unwrap(), &data, &TrainConfig::default()).unwrap();
    assert_eq!(history.len(), 200);
    assert!(net.loss(&data).unwrap() < 0.01);

    let mut close = 0;
    let mut total = 0;
    for rec in &held_out {
        for (s, input) in rec.stages.iter().enumerate() {
            total += 1;
            if (net.estimate(s + 1, input).unwrap() - rec.target).abs() < 0.1 {
                close += 1;
            }
        }
    }
    assert!(close as f64 >= 0.95 * total as f64, "{close} of {total} within 0.1");

    let smoothed: Vec<f64> = history.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] <= w[0], "smoothed loss rose: {smoothed:?}");
    }
}

#[test]
fn permuted_targets_cannot_be_fit() {
    let cfg = NetConfig::default();
    let mut data = linear_task(&cfg, 1000, 3);
    let mut targets: Vec<f64> = data.iter().map(|r| r.target).collect();
    targets.shuffle(&mut rng::stream(4, &[]));
    for (r, t) in data.iter_mut().zip(&targets) {
        r.target = *t;
    }
    let (net, _) = train(&ProgressiveConfidenceNet::new(cfg.clone()).unwrap(), &data, &TrainConfig::default()).unwrap();
    // loss() sums over stages, so compare its per-stage mean
    let per_stage = net.loss(&data).unwrap() / cfg.stages as f64;
    let var = variance(&targets);
    assert!(per_stage >= 0.8 * var, "{per_stage} vs variance {var}");
}
