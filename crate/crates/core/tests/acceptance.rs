//! The ten acceptance criteria, run in sequence so that runtimes are
//! measured without other tests competing for cores. Prints one PASS/FAIL
//! line per criterion and fails if any criterion fails.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use satinfer::confidence::{self, NetConfig, ProgressiveConfidenceNet, StageInput, TrainConfig, TrainingRecord};
use satinfer::constellation::{
    calibrate_mask, contact_windows, max_pass_duration, ContactWindow, GroundStationSpec, MaskCalibration, OrbitSpec,
    EARTH_ROTATION_RAD_S,
};
use satinfer::domain::ByteSize;
use satinfer::embedding::{attention_score, TokenMatrix};
use satinfer::link::{schedule_transmission, LinkSpec, QueueState};
use satinfer::orchestrator::experiments::{self, MaskStrategy};
use satinfer::orchestrator::metrics::{write_traces_csv, SampleTrace, ScenarioMetrics};
use satinfer::orchestrator::{run_scenario, Pipeline, Policy, ScenarioConfig};
use satinfer::preprocess::{classify_region, RegionDecision};
use satinfer::rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Mean and standard error of paired differences `b - a`.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `b` exceeds `a` by more than three standard errors.
fn above_3se(a: &[f64], b: &[f64]) -> (bool, f64, f64) {
    let (mean, se) = paired(a, b);
    (mean > 3.0 * se && mean > 0.0, mean, if se > 0.0 { mean / se } else { f64::INFINITY })
}

fn contact_geometry() -> Verdict {
    let spec = ScenarioConfig::default().constellation;
    let (mask, fraction) = match calibrate_mask(&spec, 0.0433, 0.0005).unwrap() {
        MaskCalibration::Solved { mask_deg, fraction } => (mask_deg, fraction),
        other => return verdict(false, format!("calibration did not converge: {other:?}")),
    };
    let mut calibrated = spec.clone();
    calibrated.set_mask(mask);
    let simulated = calibrated.mean_contact_fraction().unwrap();
    let fraction_ok = (simulated - 0.0433).abs() <= 0.005;

    let orbit = OrbitSpec::circular(570.0, 0.0, 0.0, 180.0);
    let site = GroundStationSpec {
        latitude_deg: 0.0,
        longitude_deg: 0.0,
        min_elevation_deg: mask,
    };
    let windows = contact_windows(&orbit, &site, 86_400.0, 10.0).unwrap();
    let longest = windows.iter().map(ContactWindow::duration).fold(0.0, f64::max);
    let oracle = max_pass_duration(570.0, mask, orbit.angular_rate() - EARTH_ROTATION_RAD_S);
    let pass_err = (longest - oracle).abs() / oracle;
    verdict(
        fraction_ok && pass_err < 0.02,
        format!(
            "mask {mask:.3} deg, contact {:.3}% (calibration {:.3}%), longest pass {longest:.1} s vs {oracle:.1} s ({:.2}%)",
            100.0 * simulated,
            100.0 * fraction,
            100.0 * pass_err
        ),
    )
}

fn brute_force_attention(image: &[Vec<f64>], text: &[Vec<f64>], normalize: bool) -> f64 {
    let mut total = 0.0;
    for v in image {
        for e in text {
            let mut d = 0.0;
            let mut nv = 0.0;
            let mut ne = 0.0;
            for k in 0..v.len() {
                d += v[k] * e[k];
            }
            for x in v {
                nv += x * x;
            }
            for x in e {
                ne += x * x;
            }
            total += d / (nv.sqrt() * ne.sqrt());
        }
    }
    if normalize {
        total / (image.len() * text.len()) as f64
    } else {
        total
    }
}

fn attention_oracle() -> Verdict {
    let mut rng = rng::stream(2024, &[1]);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let dim = rng.random_range(1..=24);
        let rows = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        };
        let (n_image, n_text) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let image = rows(&mut rng, n_image);
        let text = rows(&mut rng, n_text);
        let (im, tm) = (TokenMatrix::from_rows(&image).unwrap(), TokenMatrix::from_rows(&text).unwrap());
        let normalize = trial % 2 == 0;
        let got = attention_score(&im, &tm, normalize).unwrap();
        if got != brute_force_attention(&image, &text, normalize) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches on 1000 pairs"))
}

fn region_rule() -> Verdict {
    let mut rng = rng::stream(2024, &[2]);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let alpha: f64 = rng.random_range(0.0..0.9);
        let beta: f64 = rng.random_range(alpha + 1e-3..1.0);
        let k: f64 = rng.random_range(-0.2..1.2);
        let expected = if k < alpha {
            RegionDecision::Discard
        } else if k >= beta {
            RegionDecision::Preserve
        } else {
            RegionDecision::Downsample {
                factor: (beta - alpha) / (k - alpha),
            }
        };
        if classify_region(k, alpha, beta, f64::INFINITY) != expected {
            mismatches += 1;
        }
    }
    let (alpha, beta) = (0.35, 0.55);
    let at_beta = satinfer::preprocess::scaling_factor(beta, alpha, beta);
    let grid: Vec<f64> = (0..2000)
        .map(|i| satinfer::preprocess::scaling_factor(alpha + (beta - alpha) * (i as f64 + 0.5) / 2000.0, alpha, beta))
        .collect();
    let decreasing = grid.windows(2).all(|w| w[1] < w[0]);
    verdict(
        mismatches == 0 && at_beta == 1.0 && decreasing,
        format!("{mismatches} mismatches on 10000 triples, c(beta) = {at_beta}, strictly decreasing: {decreasing}"),
    )
}

fn realizable_records(cfg: &NetConfig, n: usize, seed: u64) -> Vec<TrainingRecord> {
    let mut rng = rng::stream(seed, &[3]);
    let d = cfg.image_dim;
    let w: Vec<f64> = (0..d)
        .map(|_| 0.25 / (d as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let target = (0.5 + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).clamp(0.0, 1.0);
            let blocks: Vec<Vec<f64>> = (1..cfg.stages)
                .map(|_| (0..cfg.token_embed_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let stages = (0..cfg.stages)
                .map(|s| StageInput {
                    image_features: x.clone(),
                    token_blocks: blocks[..s].to_vec(),
                })
                .collect();
            TrainingRecord { stages, target }
        })
        .collect()
}

fn max_gradient_error(net: &ProgressiveConfidenceNet, data: &[TrainingRecord]) -> f64 {
    let batch: Vec<&TrainingRecord> = data.iter().collect();
    let (_, grad) = net.loss_and_gradient(&batch).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    let base = net.params().to_vec();
    let step = (base.len() / 400).max(1);
    for k in (0..base.len()).step_by(step) {
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p).unwrap();
        let plus = probe.loss(data).unwrap();
        p[k] = base[k] - h;
        probe.set_params(&p).unwrap();
        let minus = probe.loss(data).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let denom = fd.abs().max(grad[k].abs()).max(1e-7);
        worst = worst.max((fd - grad[k]).abs() / denom);
    }
    worst
}

fn confidence_training() -> Verdict {
    let cfg = NetConfig::default();
    let data = realizable_records(&cfg, 1000, 5);
    let net = ProgressiveConfidenceNet::new(cfg.clone()).unwrap();
    let train = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let (trained, _) = confidence::train(&net, &data, &train).unwrap();
    let mse = trained.loss(&data).unwrap();
    let grad_err = max_gradient_error(&net, &data[..8]).max(max_gradient_error(&trained, &data[..8]));
    verdict(
        mse < 0.01 && grad_err < 1e-4,
        format!("final summed-stage MSE {mse:.5}, worst gradient relative error {grad_err:.2e}"),
    )
}

fn csv_bytes(traces: &[SampleTrace]) -> Vec<u8> {
    let mut out = Vec::new();
    write_traces_csv(&mut out, traces).unwrap();
    out
}

fn degeneration() -> Verdict {
    let cfg = ScenarioConfig::default();
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let analyses = pipeline.analyze_evaluation_split().unwrap();
    let stages = cfg.confidence.stages;
    let net = |t: Vec<f64>| {
        let mut n = ProgressiveConfidenceNet::new(cfg.confidence.clone()).unwrap();
        n.set_thresholds(t).unwrap();
        n
    };

    let never = net(vec![f64::NEG_INFINITY; stages]);
    let sat = pipeline.simulate(Policy::SatelliteOnly, &analyses, None).unwrap();
    let prog = pipeline.simulate(Policy::Progressive, &analyses, Some(&never)).unwrap();
    let same_metrics = ScenarioMetrics::from_traces("p", &sat).to_json().unwrap()
        == ScenarioMetrics::from_traces("p", &prog).to_json().unwrap();
    let same_traces = csv_bytes(&sat) == csv_bytes(&prog);

    let mut t = vec![0.5; stages];
    t[0] = f64::INFINITY;
    let always = net(t);
    let ground = pipeline.simulate(Policy::GroundOnly, &analyses, None).unwrap();
    let prog = pipeline.simulate(Policy::Progressive, &analyses, Some(&always)).unwrap();
    let same_answers = ground.iter().zip(&prog).all(|(g, p)| g.answer == p.answer);
    let zero_tokens = prog.iter().all(|p| p.onboard_tokens == 0);
    verdict(
        same_metrics && same_traces && same_answers && zero_tokens,
        format!(
            "tau=-inf: metrics identical {same_metrics}, traces identical {same_traces}; \
             tau1=+inf: answers match ground {same_answers}, zero onboard tokens {zero_tokens}"
        ),
    )
}

fn field(traces: &[SampleTrace], f: impl Fn(&SampleTrace) -> Option<f64>) -> Vec<f64> {
    traces.iter().map(|t| f(t).expect("complete sample")).collect()
}

fn tradeoff_ordering() -> Verdict {
    let cfg = ScenarioConfig::default();
    let pipeline = Pipeline::new(cfg).unwrap();
    let net = pipeline.load_or_train_net().unwrap();
    let analyses = pipeline.analyze_evaluation_split().unwrap();
    let run = |p: Policy| pipeline.simulate(p, &analyses, Some(&net)).unwrap();
    let (sat, prog, ground) = (run(Policy::SatelliteOnly), run(Policy::Progressive), run(Policy::GroundOnly));
    if [&sat, &prog, &ground].iter().any(|t| t.iter().any(|x| x.simi.is_none())) {
        return verdict(false, "incomplete samples");
    }
    let simi = |t: &SampleTrace| t.simi;
    let lat = |t: &SampleTrace| t.total_latency();
    let (s1, ds1, z1) = above_3se(&field(&sat, simi), &field(&prog, simi));
    let (s2, ds2, z2) = above_3se(&field(&prog, simi), &field(&ground, simi));
    let (l1, dl1, y1) = above_3se(&field(&sat, lat), &field(&prog, lat));
    let (l2, dl2, y2) = above_3se(&field(&prog, lat), &field(&ground, lat));
    verdict(
        s1 && s2 && l1 && l2,
        format!(
            "{} samples; simi gaps sat->prog {ds1:+.4} ({z1:.1} se), prog->ground {ds2:+.4} ({z2:.1} se); \
             latency gaps {dl1:+.1} s ({y1:.1} se), {dl2:+.1} s ({y2:.1} se)",
            sat.len()
        ),
    )
}

fn sweep_dominance() -> Verdict {
    let fractions: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rows = experiments::sweep_offload(&ScenarioConfig::default(), &fractions).unwrap();
    let interior = &rows[1..rows.len() - 1];
    let dominated = interior.iter().all(|r| r.confidence_simi >= r.random_simi);
    let worst = interior
        .iter()
        .map(|r| r.confidence_simi - r.random_simi)
        .fold(f64::INFINITY, f64::min);
    let half = &rows[5];
    let margin = half.confidence_simi - half.random_simi;
    verdict(
        dominated && margin >= 0.02,
        format!("margin at 0.5 {margin:.4}, smallest interior margin {worst:.4}"),
    )
}

fn masking_ordering() -> Verdict {
    let mut cfg = ScenarioConfig::default();
    cfg.samples.count = 500;
    let fractions = [0.0, 0.2, 0.4, 0.6, 0.8];
    let report = experiments::masking_experiment(&cfg, &fractions).unwrap();
    let row = |f, s| &report.row(f, s).unwrap().simi;
    let (ideal_ok, ideal_gap, ideal_z) = above_3se(row(0.8, MaskStrategy::Random), row(0.8, MaskStrategy::Ideal));
    let mut budgets_ok = true;
    let mut worst_z = f64::INFINITY;
    for &f in &fractions[1..] {
        let (ok, _, z) = above_3se(row(f, MaskStrategy::Random), row(f, MaskStrategy::AttentionRanked));
        budgets_ok &= ok;
        worst_z = worst_z.min(z);
    }
    let m = &report.matched;
    let (filter_ok, filter_gap, filter_z) = above_3se(&m.random_simi, &m.filter_simi);
    verdict(
        report.samples == 500 && ideal_ok && budgets_ok && filter_ok,
        format!(
            "ideal-random at 0.8: {ideal_gap:+.4} ({ideal_z:.1} se); attention-ranked vs random worst {worst_z:.1} se; \
             filter vs random at {:.3} of bytes: {filter_gap:+.4} ({filter_z:.1} se)",
            m.mean_byte_fraction
        ),
    )
}

fn determinism() -> Verdict {
    let cfg = ScenarioConfig::default();
    let a = csv_bytes(&run_scenario(&cfg).unwrap().traces);
    let b = csv_bytes(&run_scenario(&cfg).unwrap().traces);
    verdict(a == b, format!("traces.csv {} bytes, identical {}", a.len(), a == b))
}

fn link_traces() -> Verdict {
    let link = LinkSpec::default();
    let windows = [ContactWindow::new(0.0, 10.0).unwrap(), ContactWindow::new(100.0, 110.0).unwrap()];
    let bytes = (15.0 * link.bandwidth_bps / 8.0).round() as u64;
    let two = schedule_transmission(ByteSize(bytes), 0.0, &windows, &link, &mut QueueState::default()).unwrap();
    let long = [ContactWindow::new(0.0, 1000.0).unwrap()];
    let megabits = ByteSize((110.67e6 / 8.0) as u64);
    let one = schedule_transmission(megabits, 5.0, &long, &link, &mut QueueState::default()).unwrap();
    let air = one.complete_s - one.start_s;
    verdict(
        two.complete_s == 105.0 && (air - 1.0).abs() < 1e-6,
        format!("two-window completion {} s, 110.67 Mb air time {air:.9} s", two.complete_s),
    )
}

#[test]
fn acceptance_criteria() {
    type Criterion = (&'static str, f64, fn() -> Verdict);
    let criteria: [Criterion; 10] = [
        ("contact geometry", 10.0, contact_geometry),
        ("attention oracle equivalence", 5.0, attention_oracle),
        ("region rule exactness", 1.0, region_rule),
        ("confidence training", 60.0, confidence_training),
        ("policy degeneration", 10.0, degeneration),
        ("trade-off ordering", 60.0, tradeoff_ordering),
        ("offload sweep dominance", 120.0, sweep_dominance),
        ("masking ordering", 60.0, masking_ordering),
        ("determinism", f64::INFINITY, determinism),
        ("link hand traces", f64::INFINITY, link_traces),
    ];
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let pass = v.pass && secs < *limit;
        let budget = if limit.is_finite() {
            format!("{secs:.2} s of {limit} s")
        } else {
            format!("{secs:.2} s")
        };
        println!(
            "criterion {:>2} {} {name}: {} [{budget}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
