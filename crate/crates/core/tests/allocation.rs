use audiokv::allocation::*;
use audiokv::HeadScoreMatrix;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    layers: usize,
    heads: usize,
    scores: Vec<f64>,
    window: usize,
    base: usize,
    extra: usize,
    scale: f64,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..5, 1usize..9).prop_flat_map(|(layers, heads)| {
        let score = prop_oneof![
            1 => Just(0.0),
            1 => Just(0.5),
            6 => 0.0f64..=1.0,
        ];
        (
            prop::collection::vec(score, layers * heads),
            0usize..40,
            0usize..20,
            0usize..5000,
            0.01f64..=1.0,
        )
            .prop_map(move |(scores, window, base, extra, scale)| Case {
                layers,
                heads,
                scores,
                window,
                base,
                extra,
                scale,
            })
    })
}

fn matrix(c: &Case, scores: Vec<f64>) -> HeadScoreMatrix {
    HeadScoreMatrix::from_scores(c.layers, c.heads, 1, scores).unwrap()
}

fn budget(c: &Case, mode: AllocationMode) -> usize {
    let n = c.layers * c.heads;
    match mode {
        AllocationMode::Combined => n * (c.window + c.base) + c.extra,
        _ => n * c.window + c.extra,
    }
}

const MODES: [AllocationMode; 2] = [AllocationMode::Combined, AllocationMode::ProportionalFloor];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn allocation_laws(c in case()) {
        let s = matrix(&c, c.scores.clone());
        let max = c.scores.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { c.scale / max } else { c.scale };
        let scaled = matrix(&c, c.scores.iter().map(|v| v * scale).collect());
        for mode in MODES {
            let b = budget(&c, mode);
            let plan = allocate(&s, b, c.window, c.base, mode).unwrap();
            let caps = plan.capacities();
            // Conservation.
            prop_assert_eq!(plan.total(), b);
            // Window floor.
            let floor = if mode == AllocationMode::Combined { c.window + c.base } else { c.window };
            prop_assert!(caps.iter().all(|&x| x >= floor));
            // Monotonicity, ties resolved toward the lower head.
            for a in 0..caps.len() {
                for o in 0..caps.len() {
                    let (sa, so) = (c.scores[a], c.scores[o]);
                    if sa > so || (sa == so && a < o) {
                        prop_assert!(caps[a] >= caps[o], "{mode}: {a} {sa} {} vs {o} {so} {}", caps[a], caps[o]);
                    }
                }
            }
            // Scale invariance.
            let rescaled = allocate(&scaled, b, c.window, c.base, mode).unwrap();
            prop_assert_eq!(rescaled.capacities(), caps);
        }
    }

    #[test]
    fn clipping_preserves_the_total_when_room_exists(c in case(), ctx in 1usize..400) {
        let s = matrix(&c, c.scores.clone());
        let b = budget(&c, AllocationMode::Combined);
        let plan = allocate(&s, b, c.window, c.base, AllocationMode::Combined).unwrap();
        let clipped = plan.clipped(ctx, s.as_slice());
        prop_assert!(clipped.capacities().iter().all(|&x| x <= ctx));
        prop_assert_eq!(clipped.total(), b.min(ctx * s.as_slice().len()));
    }

    #[test]
    fn pyramid_schedule_sums_and_decays(layers in 1usize..8, per_layer in 0usize..500, decay in 0.05f64..=1.0) {
        let s = pyramid_schedule(layers, per_layer, decay);
        prop_assert_eq!(s.iter().sum::<usize>(), layers * per_layer);
        prop_assert!(s.windows(2).all(|p| p[0] + 1 >= p[1]));
    }
}

#[test]
fn spec_examples() {
    let equal = HeadScoreMatrix::from_scores(1, 4, 1, vec![0.3; 4]).unwrap();
    let plan = allocate(&equal, 120, 0, 0, AllocationMode::ProportionalFloor).unwrap();
    assert_eq!(plan.capacities(), [30, 30, 30, 30]);
    let three = HeadScoreMatrix::from_scores(1, 3, 1, vec![0.2, 0.3, 0.5]).unwrap();
    let plan = allocate(&three, 100, 0, 0, AllocationMode::Combined).unwrap();
    assert_eq!(plan.capacities(), [20, 30, 50]);
    assert_eq!(pyramid_schedule(2, 10, 0.5), [13, 7]);
    assert_eq!(pyramid_schedule(3, 10, 1.0), [10, 10, 10]);
    assert_eq!(pyramid_schedule(1, 17, 0.3), [17]);
    assert_eq!(DEFAULT_WINDOW, 32);
    assert_eq!(resolve_base(DEFAULT_BASE_FRACTION, 6400, 40), 80);
}

#[test]
fn retention_ratio_matches_direct_sum() {
    let scores = HeadScoreMatrix::from_scores(2, 2, 1, vec![0.1, 0.9, 0.4, 0.6]).unwrap();
    let plan = allocate(&scores, 400, 10, 20, AllocationMode::Combined).unwrap();
    let ctx = 120;
    let direct: usize = plan.capacities().iter().map(|&c| c.min(ctx)).sum();
    let expected = direct as f64 / (4 * ctx) as f64;
    assert!((effective_retention_ratio(&plan, ctx) - expected).abs() < 1e-15);
}
