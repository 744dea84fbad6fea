//! Writes model predictions as a prediction directory for `evaluation`.
//!
//! Each predicted triplet carries the predicted masks of its two entities when
//! grounding produced one for that entity in the frame, and empty masks
//! otherwise.

use std::path::Path;

use super::train::PreparedData;
use super::HarnessError;
use crate::dataset_io::{rle_encode, write_label_space, write_video, FrameAnnotation, TripletAnnotation};
use crate::evaluation::{write_scores, FrameScores};
use crate::grammar::EntityKind;
use crate::mask::BinaryMask;
use crate::metrics::EntityMaskPair;
use crate::toy_model::ClipPrediction;

fn entity_mask(pairs: &[EntityMaskPair], kind: EntityKind, label: usize, resolution: (usize, usize)) -> BinaryMask {
    let mut out = BinaryMask::new(resolution.0, resolution.1);
    for p in pairs.iter().filter(|p| p.kind == kind && p.label == label) {
        out.union_with(&p.pred);
    }
    out
}

pub fn write_predictions(
    root: &Path,
    data: &PreparedData,
    predictions: &[(String, ClipPrediction)],
) -> Result<(), HarnessError> {
    write_label_space(root, &data.space)?;
    for (video, pred) in predictions {
        let sample = data
            .samples
            .get(video)
            .ok_or_else(|| HarnessError::Data(format!("no clip for {video}")))?;
        let indices = &data.frame_indices[video];
        let resolution = sample.clip.resolution;
        let mut frames = Vec::with_capacity(indices.len());
        let mut scores = FrameScores::new();
        for (t, &index) in indices.iter().enumerate() {
            let triplets = pred.triplets[t]
                .iter()
                .map(|&id| {
                    let ivt = data.space.valid_triplets()[id];
                    TripletAnnotation {
                        triplet_id: id,
                        instrument_mask: rle_encode(&entity_mask(
                            &pred.masks[t],
                            EntityKind::Instrument,
                            ivt.instrument,
                            resolution,
                        )),
                        target_mask: rle_encode(&entity_mask(&pred.masks[t], EntityKind::Target, ivt.target, resolution)),
                    }
                })
                .collect();
            frames.push(FrameAnnotation {
                video_id: video.clone(),
                frame_index: index,
                phase: pred.phases[t],
                triplets,
                narrative: None,
            });
            scores.insert(index, pred.scores[t].clone());
        }
        write_video(root, video, &frames)?;
        write_scores(root, video, &scores)?;
    }
    Ok(())
}

