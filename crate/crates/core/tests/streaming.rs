mod common;

use common::{random_messy_track, THRESHOLD};
use micromotion::eval::predict_track;
use micromotion::features::FeatureSelection;
use micromotion::network::{forward_sequence, init_params, stream_step, Arch, Mode, Sequence, StreamState};
use micromotion::features::extract_track_features;
use micromotion::synthgait::generate_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn stream_matches_batch_on_messy_tracks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for selection in FeatureSelection::ABLATION_ORDER {
        let mut params = init_params(&Arch::for_selection(selection), 4);
        // non-trivial running statistics
        for emb in params.embeddings.iter_mut() {
            for (k, v) in emb.bn.running_var.iter_mut().enumerate() {
                *v = 0.5 + 0.1 * k as f64;
                emb.bn.running_mean[k] = 0.05 * k as f64;
            }
        }
        for i in 0..40 {
            let track = random_messy_track(&mut rng, &format!("t{i}"));
            let batch = predict_track(&params, &track, THRESHOLD).unwrap();
            let mut state = StreamState::new(&params, THRESHOLD);
            for (pose, expected) in track.poses.iter().zip(&batch) {
                let (next, out) = stream_step(state, pose, &params).unwrap();
                state = next;
                assert_eq!(out.stale, expected.stale);
                assert!((out.probs.p_walking - expected.probs.p_walking).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn batch_prediction_equals_forward_sequence_on_clean_tracks() {
    let params = init_params(&Arch::for_selection(FeatureSelection::All), 8);
    for track in generate_dataset(3, 0.5, 2).unwrap() {
        let frames = extract_track_features(&track, THRESHOLD);
        assert_eq!(frames.len(), track.len());
        let seq = Sequence::from_frames(&frames, &track.labels, FeatureSelection::All);
        let probs = forward_sequence(&seq.inputs, &params, Mode::Infer).unwrap();
        let preds = predict_track(&params, &track, THRESHOLD).unwrap();
        for (p, q) in probs.iter().zip(&preds) {
            assert_eq!(p.p_walking.to_bits(), q.probs.p_walking.to_bits());
            assert!(!q.stale);
        }
    }
}

#[test]
fn probabilities_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_params(&Arch::for_selection(FeatureSelection::All), 1);
    for i in 0..30 {
        let track = random_messy_track(&mut rng, &format!("t{i}"));
        for p in predict_track(&params, &track, THRESHOLD).unwrap() {
            let probs = p.probs;
            assert!((0.0..=1.0).contains(&probs.p_walking));
            assert!((probs.p_walking + probs.p_standing - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn states_are_independent_per_track() {
    let params = init_params(&Arch::for_selection(FeatureSelection::All), 3);
    let tracks = generate_dataset(2, 0.5, 9).unwrap();
    // interleave two tracks frame by frame
    let mut a = StreamState::new(&params, THRESHOLD);
    let mut b = StreamState::new(&params, THRESHOLD);
    let mut out_a = Vec::new();
    for (pa, pb) in tracks[0].poses.iter().zip(&tracks[1].poses) {
        let (na, oa) = stream_step(a, pa, &params).unwrap();
        let (nb, _) = stream_step(b, pb, &params).unwrap();
        a = na;
        b = nb;
        out_a.push(oa.probs.p_walking);
    }
    let alone = predict_track(&params, &tracks[0], THRESHOLD).unwrap();
    for (x, y) in out_a.iter().zip(&alone) {
        assert_eq!(x.to_bits(), y.probs.p_walking.to_bits());
    }
}
