mod common;

use audiokv::fixtures::{generate, FixtureSpec, Profile};
use audiokv::simulator::*;
use audiokv::HeadScoreMatrix;

const RATIOS: [f64; 4] = [0.4, 0.6, 0.8, 1.0];
const ALL: [Policy; 6] = [
    Policy::AudioKv,
    Policy::AudioKvNoSss,
    Policy::SnapKv,
    Policy::SnapKvSss,
    Policy::PyramidKv,
    Policy::H2o,
];
const PROFILES: [Profile; 3] = [Profile::SpecializedHeads, Profile::SpikePlateau, Profile::Uniform];

fn compare(profile: Profile, seed: u64, policies: &[Policy]) -> Vec<RetentionReport> {
    let fixture = generate(&FixtureSpec::new(profile, seed)).unwrap();
    let scores = common::fixture_scores(&fixture, 0.95, 24);
    run_comparison(&fixture.trace, &scores, policies, &RATIOS, &SimulationConfig::default()).unwrap()
}

#[test]
fn quality_never_drops_as_ratio_grows() {
    let mut policies = ALL.to_vec();
    policies.push(Policy::AdaKv);
    for profile in PROFILES {
        for seed in [1, 7, 42] {
            let reports = compare(profile, seed, &policies);
            for (i, p) in policies.iter().enumerate() {
                let series: Vec<&RetentionReport> = reports.iter().skip(i).step_by(policies.len()).collect();
                assert_eq!(series.len(), RATIOS.len());
                for pair in series.windows(2) {
                    assert!(
                        pair[1].oracle_overlap + 1e-12 >= pair[0].oracle_overlap,
                        "{profile} seed {seed} {}: overlap {} -> {}",
                        p.name(),
                        pair[0].oracle_overlap,
                        pair[1].oracle_overlap
                    );
                    assert!(
                        pair[1].mass_retained + 1e-12 >= pair[0].mass_retained,
                        "{profile} seed {seed} {}: mass {} -> {}",
                        p.name(),
                        pair[0].mass_retained,
                        pair[1].mass_retained
                    );
                }
            }
        }
    }
}

#[test]
fn full_retention_is_lossless() {
    for profile in PROFILES {
        let reports = compare(profile, 3, &ALL);
        for r in reports.iter().filter(|r| r.retention_ratio == 1.0) {
            assert!((r.oracle_overlap - 1.0).abs() < 1e-12, "{}: {}", r.policy, r.oracle_overlap);
            assert!((r.mass_retained - 1.0).abs() < 1e-9, "{}: {}", r.policy, r.mass_retained);
        }
    }
}

#[test]
fn footprint_is_linear_in_ratio() {
    let fixture = generate(&FixtureSpec::new(Profile::SpikePlateau, 42)).unwrap();
    let scores = common::fixture_scores(&fixture, 0.95, 24);
    let cfg = SimulationConfig::default();
    let point = EvictionPoint::new(&fixture.trace, &cfg).unwrap();
    let heads = (fixture.trace.num_layers() * fixture.trace.num_heads()) as f64;
    let per_token = cfg.geometry.bytes_per_token() as f64;
    let full = point.budget(1.0) as f64 * per_token;
    for policy in [Policy::AudioKv, Policy::SnapKv] {
        for ratio in [0.4, 0.6, 0.8] {
            let result = run_policy(policy, &point, &scores, ratio, &cfg).unwrap();
            let bytes = memory_footprint(&result, &cfg.geometry) as f64;
            assert!(
                (bytes - ratio * full).abs() <= heads * per_token,
                "{} at {ratio}: {bytes} vs {}",
                policy.name(),
                ratio * full
            );
        }
    }
    let full_run = run_policy(Policy::SnapKv, &point, &scores, 1.0, &cfg).unwrap();
    let part = run_policy(Policy::SnapKv, &point, &scores, 0.4, &cfg).unwrap();
    let ratio = memory_footprint(&full_run, &cfg.geometry) as f64
        / memory_footprint(&part, &cfg.geometry) as f64;
    assert!((ratio - 2.5).abs() < 0.02, "{ratio}");
}

#[test]
fn footprint_counts_every_retained_entry() {
    let fixture = generate(&FixtureSpec::new(Profile::Uniform, 5)).unwrap();
    let scores = HeadScoreMatrix::zeros(fixture.trace.num_layers(), fixture.trace.num_heads());
    let cfg = SimulationConfig::default();
    let point = EvictionPoint::new(&fixture.trace, &cfg).unwrap();
    let result = run_policy(Policy::SnapKv, &point, &scores, 0.5, &cfg).unwrap();
    assert_eq!(
        memory_footprint(&result, &cfg.geometry),
        result.total_retained() as u64 * cfg.geometry.bytes_per_token()
    );
}

#[test]
fn audiokv_keeps_more_future_mass_than_snapkv_on_the_spike_plateau() {
    let reports = compare(Profile::SpikePlateau, 42, &[Policy::AudioKv, Policy::SnapKv]);
    let at = |name: &str| {
        reports
            .iter()
            .find(|r| r.policy == name && r.retention_ratio == 0.4)
            .unwrap()
            .mass_retained
    };
    assert!(at("AudioKV") > at("SnapKV"), "{} vs {}", at("AudioKV"), at("SnapKV"));
}

#[test]
fn comparison_is_repeatable_and_ordered() {
    let a = compare(Profile::SpikePlateau, 11, &Policy::ABLATION);
    let b = compare(Profile::SpikePlateau, 11, &Policy::ABLATION);
    assert_eq!(reports_to_csv(&a), reports_to_csv(&b));
    let order: Vec<(f64, &str)> = a.iter().map(|r| (r.retention_ratio, r.policy.as_str())).collect();
    let expected: Vec<(f64, &str)> = RATIOS
        .iter()
        .flat_map(|&r| Policy::ABLATION.iter().map(move |p| (r, p.name())))
        .collect();
    assert_eq!(order, expected);
    assert!(reports_to_csv(&a).starts_with("policy,ratio,overlap,mass,entropy,bytes\n"));
}

#[test]
fn bad_ratios_are_rejected() {
    let fixture = generate(&FixtureSpec::new(Profile::Uniform, 1)).unwrap();
    let scores = common::fixture_scores(&fixture, 0.95, 24);
    let cfg = SimulationConfig::default();
    for bad in [0.0, -0.2, 1.5, f64::NAN] {
        assert!(run_comparison(&fixture.trace, &scores, &[Policy::SnapKv], &[bad], &cfg).is_err());
    }
}
