use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::sliding::SlidingWindow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    /// `None` when the class never occurs in prediction or ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub config_hash: String,
    pub per_class_iou: Vec<ClassIou>,
    pub miou: f64,
    pub n_images: usize,
    pub sliding_window: SlidingWindow,
    pub background_refinement: bool,
}

/// SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    hex::encode(Sha256::digest(json))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Fixed-width table, IoU in percent.
    pub fn to_table(&self) -> String {
        let width = self
            .per_class_iou
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(5)
            .max("class".len());
        let mut out = format!("{:<width$}  {:>6}\n", "class", "IoU");
        out.push_str(&format!("{}\n", "-".repeat(width + 8)));
        for c in &self.per_class_iou {
            let v = c.iou.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0));
            out.push_str(&format!("{:<width$}  {:>6}\n", c.class, v));
        }
        out.push_str(&format!("{}\n", "-".repeat(width + 8)));
        out.push_str(&format!("{:<width$}  {:>6.2}\n", "mIoU", self.miou * 100.0));
        out.push_str(&format!("{} images, dataset {}, config {}\n", self.n_images, self.dataset, &self.config_hash[..12.min(self.config_hash.len())]));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lines_align() {
        let r = EvalReport {
            dataset: "voc20".into(),
            config_hash: config_hash(&1u8),
            per_class_iou: vec![
                ClassIou { class: "cat".into(), iou: Some(0.5) },
                ClassIou { class: "pottedplant".into(), iou: None },
            ],
            miou: 0.5,
            n_images: 2,
            sliding_window: SlidingWindow::default(),
            background_refinement: false,
        };
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[2].len(), lines[3].len());
        assert!(t.contains(" 50.00"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
