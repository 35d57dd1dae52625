use micromotion::eval::label_boundaries;
use micromotion::features::extract_track_features;
use micromotion::skeleton::MotionState;
use micromotion::synthgait::{generate_dataset, generate_track, GaitConfig};

/// Biased sample autocorrelation for lags `0..=max_lag`.
fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let var: f64 = c.iter().map(|v| v * v).sum::<f64>() / n;
    (0..=max_lag)
        .map(|k| c.iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / n / var)
        .collect()
}

#[test]
fn ankle_distance_period_follows_cadence() {
    for (cadence, expected) in [(2.0, 15usize), (1.5, 20), (2.5, 12)] {
        let config = GaitConfig {
            cadence,
            jitter_sigma: 0.0,
            schedule: vec![(MotionState::Walking, 300)],
            ..GaitConfig::default()
        };
        let track = generate_track(&config, 1).unwrap();
        // normalized horizontal ankle separation
        let series: Vec<f64> = extract_track_features(&track, 0.3).iter().map(|f| f.distance[1]).collect();
        let ac = autocorrelation(&series, 40);
        let first_peak = (2..40).find(|&k| ac[k] > ac[k - 1] && ac[k] >= ac[k + 1]).unwrap();
        assert!(first_peak.abs_diff(expected) <= 1, "cadence {cadence}: peak at {first_peak}");
    }
}

#[test]
fn mix_controls_walking_fraction() {
    let tracks = generate_dataset(100, 0.5, 17).unwrap();
    let (mut walking, mut total) = (0usize, 0usize);
    for t in &tracks {
        walking += t.labels.iter().filter(|&&l| l == Some(MotionState::Walking)).count();
        total += t.len();
    }
    let frac = walking as f64 / total as f64;
    assert!((0.4..=0.6).contains(&frac), "walking fraction {frac}");
    let with_transitions = tracks.iter().filter(|t| !label_boundaries(t).is_empty()).count();
    assert!(with_transitions >= 90, "{with_transitions} tracks have transitions");
}

#[test]
fn classes_separate_on_dynamic_ankle_distance() {
    for (swing, scale, cadence) in [(0.25, 60.0, 1.6), (0.35, 100.0, 2.0), (0.45, 160.0, 2.4)] {
        let schedule: Vec<(MotionState, usize)> = (0..8)
            .map(|i| {
                let state = if i % 2 == 0 { MotionState::Standing } else { MotionState::Walking };
                (state, 50 + 10 * i)
            })
            .collect();
        let config = GaitConfig {
            swing_amplitude: swing,
            body_scale: scale,
            cadence,
            // just under 10% of the swing amplitude in pixels
            jitter_sigma: 0.099 * swing * scale,
            schedule: schedule.clone(),
            ..GaitConfig::default()
        };
        let track = generate_track(&config, 5).unwrap();
        let frames = extract_track_features(&track, 0.3);
        let mut means: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut start = 0;
        for &(state, n) in &schedule {
            let seg = &frames[start..start + n];
            let m = seg.iter().map(|f| f.distance[12].abs()).sum::<f64>() / n as f64;
            means[state.class_index()].push(m);
            start += n;
        }
        let stats = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mu, var)
        };
        let (mw, vw) = stats(&means[0]);
        let (ms, vs) = stats(&means[1]);
        let pooled = ((vw + vs) / 2.0).sqrt();
        assert!(mw - ms > 5.0 * pooled, "swing {swing}: walking {mw}, standing {ms}, pooled sd {pooled}");
    }
}
