use crate::denoiser::heads::ObjectnessMap;
use crate::denoiser::matching::SegmentationResult;
use crate::error::{invalid, Result};

/// Reassign to `background_index` every patch that is both uncertain
/// (`confidence < delta`) and background in `objectness`. Scores are kept.
pub fn refine_background(
    result: &SegmentationResult,
    objectness: &ObjectnessMap,
    delta: f64,
    background_index: usize,
) -> Result<SegmentationResult> {
    if background_index >= result.n_queries() {
        return Err(invalid(format!(
            "background query index {background_index} but only {} queries",
            result.n_queries()
        )));
    }
    if result.grid() != objectness.grid() {
        return Err(invalid("objectness grid does not match segmentation grid"));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid(format!("delta {delta} outside [0, 1]")));
    }
    let labels = result
        .labels()
        .iter()
        .zip(result.confidence())
        .zip(objectness.binary())
        .map(|((&label, &conf), &fg)| {
            if conf < delta && !fg {
                background_index
            } else {
                label
            }
        })
        .collect();
    Ok(result.with_labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PatchGrid;
    use ndarray::array;

    fn result() -> SegmentationResult {
        let grid = PatchGrid::new(1, 3, 16).unwrap();
        SegmentationResult::from_scores(grid, array![[0.9, 0.1], [0.2, 0.2], [0.5, -0.5]]).unwrap()
    }

    #[test]
    fn zero_delta_changes_nothing() {
        let r = result();
        let m = ObjectnessMap::from_binary(r.grid(), vec![false; 3]).unwrap();
        assert_eq!(refine_background(&r, &m, 0.0, 1).unwrap(), r);
    }

    #[test]
    fn delta_one_is_mask_only() {
        let r = result();
        let m = ObjectnessMap::from_binary(r.grid(), vec![false, true, false]).unwrap();
        let out = refine_background(&r, &m, 1.0, 1).unwrap();
        assert_eq!(out.labels(), &[1, 0, 1]);
        assert_eq!(out.scores(), r.scores());
    }

    #[test]
    fn foreground_patch_kept_even_if_uncertain() {
        let r = result();
        // Patch 1 has confidence exactly 0.5.
        assert_eq!(r.confidence()[1], 0.5);
        let m = ObjectnessMap::from_binary(r.grid(), vec![true; 3]).unwrap();
        assert_eq!(refine_background(&r, &m, 0.98, 1).unwrap().labels(), r.labels());
    }

    #[test]
    fn missing_background_query_rejected() {
        let r = result();
        let m = ObjectnessMap::from_binary(r.grid(), vec![true; 3]).unwrap();
        assert!(refine_background(&r, &m, 0.5, 2).is_err());
    }

    #[test]
    fn overrides_are_visible() {
        let r = result();
        let m = ObjectnessMap::from_binary(r.grid(), vec![false, true, false]).unwrap();
        let out = refine_background(&r, &m, 0.98, 1).unwrap();
        assert_eq!(out.overridden(), vec![true, false, true]);
    }
}
