//! Free-running synthesis and two-pass expert-alignment synthesis.

use serde::{Deserialize, Serialize};

use crate::adapt::Checkpoint;
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::{infer, AlignmentMatrix, StopRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRequest {
    pub ipa_text: String,
    pub speaker_id: usize,
    #[serde(default)]
    pub expert_speaker_id: Option<usize>,
    pub max_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Post-net mel, `frames x M`; frames is always a multiple of `r`.
    pub mel: Tensor<f32>,
    pub alignment: AlignmentMatrix,
    /// False when the frame limit was reached first.
    pub stopped: bool,
}

fn max_steps(ckpt: &Checkpoint, max_frames: usize) -> Result<usize> {
    let r = ckpt.config.reduction;
    if max_frames < r {
        return Err(Error::Validation(format!(
            "max_frames {max_frames} is below the reduction factor {r}"
        )));
    }
    Ok(max_frames / r)
}

/// Synthesizes an already-encoded phoneme sequence.
pub fn synthesize_phonemes(ckpt: &Checkpoint, phonemes: &[usize], speaker_id: usize, max_frames: usize) -> Result<Synthesis> {
    ckpt.check_speaker(speaker_id)?;
    ckpt.check_phonemes(phonemes)?;
    let steps = max_steps(ckpt, max_frames)?;
    let out = infer(&ckpt.model()?, &ckpt.params, phonemes, speaker_id, steps, StopRule::Predictor, None)?;
    Ok(Synthesis {
        mel: out.y_post,
        alignment: out.alignment,
        stopped: out.stopped,
    })
}

pub fn synthesize(ckpt: &Checkpoint, req: &SynthesisRequest) -> Result<Synthesis> {
    let phonemes = ckpt.inventory.encode(&req.ipa_text)?;
    synthesize_phonemes(ckpt, &phonemes, req.speaker_id, req.max_frames)
}

/// Pass 1 decodes with the expert speaker and keeps its alignment; pass 2
/// decodes the target speaker with that alignment injected row by row and
/// the same number of steps.
pub fn synthesize_expert_phonemes(
    ckpt: &Checkpoint,
    phonemes: &[usize],
    speaker_id: usize,
    expert_id: usize,
    max_frames: usize,
) -> Result<(Synthesis, Synthesis)> {
    if speaker_id == expert_id {
        return Err(Error::Validation(format!(
            "expert speaker must differ from the target speaker (both {speaker_id})"
        )));
    }
    ckpt.check_speaker(speaker_id)?;
    let first = synthesize_phonemes(ckpt, phonemes, expert_id, max_frames)?;
    let steps = first.alignment.decoder_steps();
    let out = infer(
        &ckpt.model()?,
        &ckpt.params,
        phonemes,
        speaker_id,
        steps,
        StopRule::FixedSteps(steps),
        Some(&first.alignment),
    )?;
    let second = Synthesis {
        mel: out.y_post,
        alignment: out.alignment,
        stopped: first.stopped,
    };
    Ok((first, second))
}

pub fn synthesize_expert(ckpt: &Checkpoint, req: &SynthesisRequest) -> Result<Synthesis> {
    let expert = req
        .expert_speaker_id
        .ok_or_else(|| Error::Validation("request has no expert speaker".into()))?;
    let phonemes = ckpt.inventory.encode(&req.ipa_text)?;
    Ok(synthesize_expert_phonemes(ckpt, &phonemes, req.speaker_id, expert, req.max_frames)?.1)
}

/// Dispatches on whether the request names an expert.
pub fn run_request(ckpt: &Checkpoint, req: &SynthesisRequest) -> Result<Synthesis> {
    match req.expert_speaker_id {
        Some(_) => synthesize_expert(ckpt, req),
        None => synthesize(ckpt, req),
    }
}
