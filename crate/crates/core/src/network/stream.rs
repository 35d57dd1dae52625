use super::{infer_step, ModelParams, Probs};
use crate::error::{Error, Result};
use crate::features::{FeatureCursor, FeatureFrame, StaticFeatures};
use crate::skeleton::Pose;

/// Online state for one track: the GRU hidden vector plus the feature history
/// needed for dynamic differences and carry-forward imputation.
///
/// A state belongs to a single track. It is `Send`, so it can move between workers
/// between calls.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub h: Vec<f64>,
    pub step: u64,
    cursor: FeatureCursor,
    last: Option<Probs>,
}

impl StreamState {
    pub fn new(params: &ModelParams, conf_threshold: f64) -> Self {
        StreamState {
            h: vec![0.0; params.arch.hidden_dim],
            step: 0,
            cursor: FeatureCursor::new(conf_threshold),
            last: None,
        }
    }

    /// Static distance and angle values of the last retained frame.
    pub fn prev_static(&self) -> Option<&StaticFeatures> {
        self.cursor.prev_static()
    }

    pub fn last_probs(&self) -> Option<Probs> {
        self.last
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub probs: Probs,
    /// The pose was unusable and `probs` repeats the previous estimate.
    pub stale: bool,
    /// Features computed for this pose, absent when stale.
    pub frame: Option<FeatureFrame>,
}

/// Consumes one pose in arrival order. Infer mode only.
pub fn stream_step(
    mut state: StreamState,
    pose: &Pose,
    params: &ModelParams,
) -> Result<(StreamState, StreamOutput)> {
    let before = state.cursor.clone();
    let frame = match state.cursor.push(pose) {
        Ok(frame) => frame,
        Err(Error::DegeneratePose(_)) => {
            let probs = state.last.unwrap_or(Probs::UNIFORM);
            return Ok((
                state,
                StreamOutput {
                    probs,
                    stale: true,
                    frame: None,
                },
            ));
        }
        Err(e) => return Err(e),
    };
    let input = params.arch.selection.model_input(&frame);
    let (h, probs) = match infer_step(&input, &state.h, params) {
        Ok(v) => v,
        Err(e) => {
            state.cursor = before;
            return Err(e);
        }
    };
    state.h = h;
    state.step += 1;
    state.last = Some(probs);
    Ok((
        state,
        StreamOutput {
            probs,
            stale: false,
            frame: Some(frame),
        },
    ))
}
