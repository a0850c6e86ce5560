//! Training targets: self-supervised patch affinities and binary objectness
//! masks.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::Array2;

use crate::denoiser::affinity::{cosine_affinity, AffinityMatrix, AffinitySource};
use crate::denoiser::heads::ObjectnessMap;
use crate::error::{invalid, Error, Result};
use crate::grid::PatchGrid;
use crate::tensors::TensorStore;
use crate::vit::{DinoModel, Family};

pub use crate::vit::dino::EmbeddingKind;

/// Last-layer embeddings of the teacher, class token removed.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatureMap {
    grid: PatchGrid,
    values: Array2<f64>,
    kind: EmbeddingKind,
}

impl TeacherFeatureMap {
    pub fn new(grid: PatchGrid, values: Array2<f64>, kind: EmbeddingKind) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(invalid(format!(
                "{} teacher rows for {} patches",
                values.nrows(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite teacher features"));
        }
        Ok(Self { grid, values, kind })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    /// Cosine affinity of the teacher embeddings.
    pub fn affinity(&self) -> Result<AffinityMatrix> {
        cosine_affinity(self.grid, &self.values, AffinitySource::TeacherDino)
    }
}

/// A frozen self-supervised ViT used as the affinity teacher.
#[derive(Debug)]
pub struct DinoTeacher {
    model: DinoModel,
    kind: EmbeddingKind,
    id: String,
}

impl DinoTeacher {
    pub fn load(path: &Path, kind: EmbeddingKind) -> Result<Self> {
        Self::from_store(&TensorStore::load(path)?, kind)
    }

    pub fn from_store(store: &TensorStore, kind: EmbeddingKind) -> Result<Self> {
        if Family::detect(store) != Some(Family::Dino) {
            return Err(Error::Load {
                path: store.origin().to_path_buf(),
                reason: "expected a DINO container".into(),
            });
        }
        let model = DinoModel::load(store)?;
        let id = format!(
            "dino-{}x{}-p{}-{}",
            model.width(),
            model.n_blocks(),
            model.patch_size(),
            &store.digest()[..12]
        );
        Ok(Self { model, kind, id })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn patch_size(&self) -> usize {
        self.model.patch_size()
    }

    /// Embeddings for `image` at its current size (no resize).
    pub fn teacher_features(&self, image: &RgbImage) -> Result<TeacherFeatureMap> {
        self.teacher_features_as(image, self.kind)
    }

    pub fn teacher_features_as(&self, image: &RgbImage, kind: EmbeddingKind) -> Result<TeacherFeatureMap> {
        let (values, grid) = self.model.last_layer_embeddings(image, kind)?;
        TeacherFeatureMap::new(grid, values.mapv(f64::from), kind)
    }

    /// Teacher affinity for an image whose student grid is `student`.
    pub fn affinity_for(&self, image: &RgbImage, student: PatchGrid) -> Result<AffinityMatrix> {
        let f = self.teacher_features(image)?;
        if f.grid() != student {
            return Err(invalid(format!(
                "teacher grid {}x{} (patch {}) does not match student grid {}x{} (patch {})",
                f.grid().n_rows,
                f.grid().n_cols,
                f.grid().patch_size,
                student.n_rows,
                student.n_cols,
                student.patch_size
            )));
        }
        f.affinity()
    }
}

/// Anything that yields a teacher affinity on the student's grid.
pub trait AffinityTeacher: Send + Sync {
    fn teacher_id(&self) -> String;
    fn affinity_for(&self, image: &RgbImage, student: PatchGrid) -> Result<AffinityMatrix>;
}

impl AffinityTeacher for DinoTeacher {
    fn teacher_id(&self) -> String {
        format!("{}:{}", self.id, serde_json::to_value(self.kind).expect("enum").as_str().unwrap_or(""))
    }

    fn affinity_for(&self, image: &RgbImage, student: PatchGrid) -> Result<AffinityMatrix> {
        DinoTeacher::affinity_for(self, image, student)
    }
}

/// Binarized teacher correlations: `values[p][q] = A[p][q] > gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryAffinityTarget {
    grid: PatchGrid,
    values: Array2<bool>,
}

impl BinaryAffinityTarget {
    pub fn from_values(grid: PatchGrid, values: Array2<bool>) -> Result<Self> {
        if values.dim() != (grid.len(), grid.len()) {
            return Err(invalid("target must be N x N"));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn binarize_target(affinity: &AffinityMatrix, gamma: f64) -> BinaryAffinityTarget {
    BinaryAffinityTarget {
        grid: affinity.grid(),
        values: affinity.values().mapv(|a| a > gamma),
    }
}

/// Somewhere binary foreground masks come from.
pub trait ObjectnessSource: Send + Sync {
    /// Pixel mask for `image_id`; 255 marks foreground, 0 background.
    fn mask(&self, image_id: &str) -> Result<GrayImage>;
}

/// Precomputed masks stored as `<root>/<image_id>.png`.
#[derive(Debug, Clone)]
pub struct MaskDirectory {
    root: PathBuf,
}

impl MaskDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.png"))
    }
}

impl ObjectnessSource for MaskDirectory {
    fn mask(&self, image_id: &str) -> Result<GrayImage> {
        let path = self.path_for(image_id);
        if !path.is_file() {
            return Err(Error::NotFound(path.display().to_string()));
        }
        let img = image::open(&path)?;
        let mask = match img {
            image::DynamicImage::ImageLuma8(m) => m,
            other if other.color().channel_count() == 1 => other.to_luma8(),
            _ => return Err(invalid(format!("{}: mask must be single-channel", path.display()))),
        };
        check_binary(&mask)?;
        Ok(mask)
    }
}

/// Masks that exist only in memory (tests, synthetic data).
impl ObjectnessSource for std::collections::HashMap<String, GrayImage> {
    fn mask(&self, image_id: &str) -> Result<GrayImage> {
        let m = self
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("objectness mask for `{image_id}`")))?;
        check_binary(&m)?;
        Ok(m)
    }
}

pub fn check_binary(mask: &GrayImage) -> Result<()> {
    if let Some(v) = mask.pixels().map(|p| p.0[0]).find(|&v| v != 0 && v != 255) {
        return Err(invalid(format!("mask is not binary (found value {v})")));
    }
    Ok(())
}

/// Relative aspect-ratio difference tolerated between a mask and its image.
const ASPECT_TOLERANCE: f64 = 0.02;

/// Sample a binary pixel mask at the patch centres of `grid`.
///
/// `image_dims` is the (height, width) of the image the grid was computed
/// from; the mask may have a different resolution but must share its aspect
/// ratio. Patches whose centre lies in the padding are background.
pub fn mask_to_grid(mask: &GrayImage, grid: PatchGrid, image_dims: (u32, u32)) -> Result<ObjectnessMap> {
    let (ih, iw) = image_dims;
    let (mh, mw) = (mask.height(), mask.width());
    if ih == 0 || iw == 0 || mh == 0 || mw == 0 {
        return Err(invalid("empty mask or image"));
    }
    let want = iw as f64 / ih as f64;
    let got = mw as f64 / mh as f64;
    if ((got - want) / want).abs() > ASPECT_TOLERANCE {
        return Err(invalid(format!(
            "mask {mw}x{mh} does not match image aspect {iw}x{ih}"
        )));
    }
    check_binary(mask)?;
    let p = grid.patch_size as f64;
    let mut binary = Vec::with_capacity(grid.len());
    for r in 0..grid.n_rows {
        let cy = r as f64 * p + p / 2.0;
        for c in 0..grid.n_cols {
            let cx = c as f64 * p + p / 2.0;
            let fg = if cy < ih as f64 && cx < iw as f64 {
                let my = ((cy * mh as f64 / ih as f64) as u32).min(mh - 1);
                let mx = ((cx * mw as f64 / iw as f64) as u32).min(mw - 1);
                mask.get_pixel(mx, my).0[0] == 255
            } else {
                false
            };
            binary.push(fg);
        }
    }
    ObjectnessMap::from_binary(grid, binary)
}

/// Objectness target for one image on the student's grid.
pub fn load_objectness_target(
    image_id: &str,
    source: &dyn ObjectnessSource,
    grid: PatchGrid,
    image_dims: (u32, u32),
) -> Result<ObjectnessMap> {
    mask_to_grid(&source.mask(image_id)?, grid, image_dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{tiny_dino, TinyVit};
    use image::Luma;
    use ndarray::array;
    use proptest::prelude::*;

    fn teacher(kind: EmbeddingKind) -> DinoTeacher {
        let bytes = tiny_dino(TinyVit::default(), 5).to_bytes().unwrap();
        DinoTeacher::from_store(&TensorStore::from_bytes(&bytes, "mem").unwrap(), kind).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        let grid = PatchGrid::new(1, 3, 1).unwrap();
        let a = AffinityMatrix::from_values(
            grid,
            array![[1.0, 0.2, -0.5], [0.2, 1.0, 0.3], [-0.5, 0.3, 1.0]],
            AffinitySource::TeacherDino,
        )
        .unwrap();
        let d = binarize_target(&a, 0.2);
        assert_eq!(
            d.values(),
            &array![[true, false, false], [false, true, true], [false, true, true]]
        );
    }

    #[test]
    fn teacher_kinds_differ_and_repeat() {
        let (img, _) = crate::synthetic::scene(1, 32, 24);
        let v = teacher(EmbeddingKind::Value);
        let a = v.teacher_features(&img).unwrap();
        assert_eq!(a, v.teacher_features(&img).unwrap());
        assert_eq!((a.grid().n_rows, a.grid().n_cols), (3, 4));
        let k = v.teacher_features_as(&img, EmbeddingKind::Key).unwrap();
        let diff = (a.affinity().unwrap().values() - k.affinity().unwrap().values())
            .mapv(|x| x * x)
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (img, _) = crate::synthetic::scene(1, 32, 24);
        let t = teacher(EmbeddingKind::Value);
        let wrong = PatchGrid::new(2, 2, 16).unwrap();
        assert!(matches!(t.affinity_for(&img, wrong), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mask_sampling_at_centres() {
        let mut m = GrayImage::new(448, 448);
        for y in 0..448 {
            for x in 0..448 {
                if x >= 100 && y < 200 {
                    m.put_pixel(x, y, Luma([255]));
                }
            }
        }
        let grid = PatchGrid::new(28, 28, 16).unwrap();
        let o = mask_to_grid(&m, grid, (448, 448)).unwrap();
        for r in 0..28 {
            for c in 0..28 {
                let (cy, cx) = (r * 16 + 8, c * 16 + 8);
                assert_eq!(o.binary()[grid.index(r, c)], cx >= 100 && cy < 200);
            }
        }
    }

    #[test]
    fn all_foreground_and_aspect_checks() {
        let m = GrayImage::from_pixel(64, 32, Luma([255]));
        let grid = PatchGrid::new(2, 4, 16).unwrap();
        assert!(mask_to_grid(&m, grid, (32, 64)).unwrap().binary().iter().all(|b| *b));
        assert!(mask_to_grid(&m, grid, (64, 64)).is_err());
        let grey = GrayImage::from_pixel(64, 32, Luma([128]));
        assert!(mask_to_grid(&grey, grid, (32, 64)).is_err());
    }

    #[test]
    fn missing_mask_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let src = MaskDirectory::new(dir.path());
        assert!(matches!(src.mask("nope"), Err(Error::NotFound(_))));
        GrayImage::from_pixel(4, 4, Luma([255])).save(src.path_for("a")).unwrap();
        assert_eq!(src.mask("a").unwrap().dimensions(), (4, 4));
    }

    proptest! {
        #[test]
        fn resampling_a_grid_mask_is_identity(
            rows in 1usize..10, cols in 1usize..10, p in 1usize..20, seed in any::<u64>()
        ) {
            let grid = PatchGrid::new(rows, cols, p).unwrap();
            let bits: Vec<bool> = (0..rows * cols).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let m = GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
                Luma([if bits[grid.index(y as usize, x as usize)] { 255 } else { 0 }])
            });
            let dims = ((rows * p) as u32, (cols * p) as u32);
            let o = mask_to_grid(&m, grid, dims).unwrap();
            prop_assert_eq!(o.binary(), &bits[..]);
        }
    }
}
