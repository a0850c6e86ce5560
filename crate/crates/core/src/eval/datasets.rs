//! Dataset adapters over a common on-disk layout:
//!
//! ```text
//! <root>/images/<id>.{jpg,jpeg,png}
//! <root>/annotations/<id>.png   single channel, class index per pixel, 255 = ignore
//! <root>/<split>.txt            one id per line
//! ```
//!
//! Annotation indices follow the order of the adapter's prompt file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::confusion::IGNORE_INDEX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Voc,
    Voc20,
    Context,
    Context59,
    Object,
    Stuff,
    Cityscapes,
    Ade,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 8] = [
        Self::Voc,
        Self::Voc20,
        Self::Context,
        Self::Context59,
        Self::Object,
        Self::Stuff,
        Self::Cityscapes,
        Self::Ade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Voc => "voc",
            Self::Voc20 => "voc20",
            Self::Context => "context",
            Self::Context59 => "context59",
            Self::Object => "object",
            Self::Stuff => "stuff",
            Self::Cityscapes => "cityscapes",
            Self::Ade => "ade",
        }
    }

    /// Whether class 0 is a background class evaluated with refinement.
    pub fn has_background(self) -> bool {
        matches!(self, Self::Voc | Self::Context | Self::Object)
    }

    /// Prompt file shipped with the library, one class per line.
    pub fn prompt_file(self) -> &'static str {
        match self {
            Self::Voc => include_str!("../../prompts/voc.txt"),
            Self::Voc20 => include_str!("../../prompts/voc20.txt"),
            Self::Context => include_str!("../../prompts/context.txt"),
            Self::Context59 => include_str!("../../prompts/context59.txt"),
            Self::Object => include_str!("../../prompts/object.txt"),
            Self::Stuff => include_str!("../../prompts/stuff.txt"),
            Self::Cityscapes => include_str!("../../prompts/cityscapes.txt"),
            Self::Ade => include_str!("../../prompts/ade.txt"),
        }
    }

    pub fn class_names(self) -> Vec<String> {
        parse_prompt_lines(self.prompt_file())
    }

    pub fn default_split(self) -> &'static str {
        "val"
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                invalid(format!("unknown dataset `{s}` (one of {})", names.join(", ")))
            })
    }
}

/// Non-empty trimmed lines, `#` comments skipped.
pub fn parse_prompt_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetAdapter {
    pub name: String,
    pub class_names: Vec<String>,
    pub has_background: bool,
    pub ignore_index: u32,
    root: PathBuf,
    ids: Vec<String>,
}

const IMAGE_EXTS: [&str; 3] = ["jpg", "jpeg", "png"];

impl DatasetAdapter {
    /// Open `root` as a dataset of `kind`, reading ids from `<root>/<split>.txt`.
    pub fn open(kind: DatasetKind, root: impl Into<PathBuf>, split: Option<&str>) -> Result<Self> {
        let root = root.into();
        let split_file = root.join(format!("{}.txt", split.unwrap_or(kind.default_split())));
        let text = std::fs::read_to_string(&split_file)
            .map_err(|_| Error::NotFound(split_file.display().to_string()))?;
        let ids = parse_prompt_lines(&text);
        if ids.is_empty() {
            return Err(invalid(format!("{} lists no images", split_file.display())));
        }
        Ok(Self {
            name: kind.name().to_string(),
            class_names: kind.class_names(),
            has_background: kind.has_background(),
            ignore_index: IGNORE_INDEX,
            root,
            ids,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn image_path(&self, id: &str) -> Option<PathBuf> {
        IMAGE_EXTS
            .iter()
            .map(|e| self.root.join("images").join(format!("{id}.{e}")))
            .find(|p| p.is_file())
    }

    /// Resolve every sample, failing with the full list of ids whose image
    /// or annotation is missing.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(self.ids.len());
        for id in &self.ids {
            let ann = self.root.join("annotations").join(format!("{id}.png"));
            match (self.image_path(id), ann.is_file()) {
                (Some(image), true) => out.push(Sample {
                    id: id.clone(),
                    image,
                    annotation: ann,
                }),
                _ => missing.push(id.as_str()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::NotFound(format!(
                "{} sample(s) missing under {}: {}",
                missing.len(),
                self.root.display(),
                missing.join(", ")
            )));
        }
        Ok(out)
    }
}

/// Ground-truth index map from a single-channel PNG.
pub fn load_annotation(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path)?;
    if img.color().channel_count() != 1 {
        return Err(invalid(format!("{}: annotation must be single-channel", path.display())));
    }
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32).0[0] as u32
    }))
}
