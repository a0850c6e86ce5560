//! Run-length coding of row-major patch labels.

use serde::{Deserialize, Serialize};

/// One run: `count` consecutive patches with label `label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub label: u32,
    pub count: u32,
}

pub fn encode(labels: &[usize]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some(r) if r.label as usize == l => r.count += 1,
            _ => runs.push(Run {
                label: l as u32,
                count: 1,
            }),
        }
    }
    runs
}

pub fn decode(runs: &[Run]) -> Vec<usize> {
    runs.iter()
        .flat_map(|r| std::iter::repeat_n(r.label as usize, r.count as usize))
        .collect()
}
