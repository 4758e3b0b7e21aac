//! Per-pixel activation maps: text activation maps from the joint embedding,
//! their normalization, class-map fusion, background estimation and argmax
//! label maps.

use std::collections::BTreeSet;
use thiserror::Error;

use crate::embedding::dot;
use crate::parser::{ClassId, Snippet};

/// Exponent of the background activation map.
pub const BACKGROUND_ALPHA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no maps supplied for fusion")]
    EmptyPhi,
    #[error("no present classes")]
    NoPresentClasses,
}

/// Pixelwise D-dimensional embeddings, row-major by pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbeddingMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// `width * height * dim` values; pixel `(x, y)` starts at
    /// `(y * width + x) * dim`.
    pub data: Vec<f64>,
}

impl VisualEmbeddingMap {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        VisualEmbeddingMap {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }

    /// Mean embedding over pixels.
    pub fn mean_pixel(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for p in 0..self.pixels() {
            for (m, v) in mean.iter_mut().zip(self.pixel(p)) {
                *m += v;
            }
        }
        let n = self.pixels() as f64;
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    /// Mirrors the pixel grid horizontally.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = VisualEmbeddingMap::new(self.width, self.height, self.dim);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + x;
                let dst = y * self.width + (self.width - 1 - x);
                out.pixel_mut(dst).copy_from_slice(self.pixel(src));
            }
        }
        out
    }
}

/// What an [`ActivationMap`]'s values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// Raw dot products; any real value.
    Raw,
    /// Relu + sqrt + max normalization; values in [0, 1], max 1 unless all 0.
    Normalized,
    /// Background activation; values in [0, 1].
    Background,
}

/// A per-pixel scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub kind: MapKind,
}

impl ActivationMap {
    pub fn new(width: usize, height: usize, kind: MapKind) -> Self {
        ActivationMap {
            width,
            height,
            values: vec![0.0; width * height],
            kind,
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>, kind: MapKind) -> Self {
        debug_assert_eq!(values.len(), width * height);
        ActivationMap {
            width,
            height,
            values,
            kind,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.values[y * self.width + (self.width - 1 - x)] =
                    self.values[y * self.width + x];
            }
        }
        out
    }
}

/// Per-pixel class-or-background assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Background,
    Class(ClassId),
}

impl Label {
    /// Index used on disk: background is 0, class `c` is `c + 1`.
    pub fn to_index(self) -> usize {
        match self {
            Label::Background => 0,
            Label::Class(id) => id.0 + 1,
        }
    }

    pub fn from_index(index: usize) -> Self {
        if index == 0 {
            Label::Background
        } else {
            Label::Class(ClassId(index - 1))
        }
    }
}

/// A per-pixel label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
}

impl LabelMap {
    pub fn background(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![Label::Background; width * height],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.labels[y * self.width + (self.width - 1 - x)] =
                    self.labels[y * self.width + x];
            }
        }
        out
    }
}

/// The snippet set whose maps fuse into one class activation map: the class
/// name forms plus every compound related to the class in this image.
#[derive(Debug, Clone)]
pub struct ConceptSetPhi {
    pub class_id: ClassId,
    pub snippets: Vec<Snippet>,
}

impl ConceptSetPhi {
    /// Collects Φ(c) for each present class from name snippets and the
    /// image's related compounds. Duplicate token sequences are collapsed.
    pub fn collect(
        present: &BTreeSet<ClassId>,
        name_snippets: &[Snippet],
        compounds: &[Snippet],
    ) -> Vec<ConceptSetPhi> {
        present
            .iter()
            .map(|&class_id| {
                let mut seen = BTreeSet::new();
                let mut snippets = Vec::new();
                for snippet in name_snippets.iter().chain(compounds) {
                    if snippet.kind.class_ids().contains(&class_id)
                        && seen.insert(snippet.text())
                    {
                        snippets.push(snippet.clone());
                    }
                }
                ConceptSetPhi { class_id, snippets }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Text activation map: per-pixel dot product with a text embedding.
pub fn tam(evis: &VisualEmbeddingMap, e_txt: &[f64]) -> Result<ActivationMap, MapError> {
    if e_txt.len() != evis.dim {
        return Err(MapError::DimMismatch {
            expected: evis.dim,
            got: e_txt.len(),
        });
    }
    let values = (0..evis.pixels()).map(|p| dot(evis.pixel(p), e_txt)).collect();
    Ok(ActivationMap::from_values(
        evis.width,
        evis.height,
        values,
        MapKind::Raw,
    ))
}

/// Backpropagates a TAM gradient into the visual map and the text embedding.
///
/// `grad_map` is dL/dx per pixel; returns nothing but accumulates
/// dL/dE_vis into `grad_evis` and dL/de_txt into `grad_e_txt`.
pub fn tam_backward(
    evis: &VisualEmbeddingMap,
    e_txt: &[f64],
    grad_map: &[f64],
    grad_evis: &mut VisualEmbeddingMap,
    grad_e_txt: &mut [f64],
) {
    debug_assert_eq!(grad_map.len(), evis.pixels());
    for (p, g) in grad_map.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let pixel = evis.pixel(p);
        let grad_pixel = grad_evis.pixel_mut(p);
        for d in 0..evis.dim {
            grad_pixel[d] += g * e_txt[d];
            grad_e_txt[d] += g * pixel[d];
        }
    }
}

/// Relu, square root and division by the per-map maximum. All-nonpositive
/// input yields the all-zero map.
pub fn normalize_tam(map: &ActivationMap) -> ActivationMap {
    let rooted: Vec<f64> = map.values.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let max = rooted.iter().cloned().fold(0.0, f64::max);
    let values = if max <= 0.0 {
        vec![0.0; rooted.len()]
    } else {
        rooted.into_iter().map(|v| v / max).collect()
    };
    ActivationMap::from_values(map.width, map.height, values, MapKind::Normalized)
}

/// Fuses normalized TAMs into a class activation map by pixelwise maximum.
pub fn cam(norm_tams: &[ActivationMap]) -> Result<ActivationMap, MapError> {
    let first = norm_tams.first().ok_or(MapError::EmptyPhi)?;
    let mut values = first.values.clone();
    for map in &norm_tams[1..] {
        if map.pixels() != first.pixels() {
            return Err(MapError::DimMismatch {
                expected: first.pixels(),
                got: map.pixels(),
            });
        }
        for (out, v) in values.iter_mut().zip(&map.values) {
            *out = out.max(*v);
        }
    }
    Ok(ActivationMap::from_values(
        first.width,
        first.height,
        values,
        MapKind::Normalized,
    ))
}

/// Background map: `(1 - max over class maps)^alpha` per pixel.
pub fn background_map(cams: &[ActivationMap], alpha: f64) -> Result<ActivationMap, MapError> {
    let first = cams.first().ok_or(MapError::NoPresentClasses)?;
    let mut max = vec![f64::NEG_INFINITY; first.pixels()];
    for map in cams {
        if map.pixels() != first.pixels() {
            return Err(MapError::DimMismatch {
                expected: first.pixels(),
                got: map.pixels(),
            });
        }
        for (m, v) in max.iter_mut().zip(&map.values) {
            *m = m.max(*v);
        }
    }
    let values = max.into_iter().map(|m| (1.0 - m).powf(alpha)).collect();
    Ok(ActivationMap::from_values(
        first.width,
        first.height,
        values,
        MapKind::Background,
    ))
}

/// Per-pixel argmax over class maps and background.
///
/// Ties between classes go to the lowest class id; background loses ties
/// against any class.
pub fn estimate_labels(
    cams: &[(ClassId, ActivationMap)],
    bg: &ActivationMap,
) -> Result<LabelMap, MapError> {
    for (_, map) in cams {
        if map.pixels() != bg.pixels() {
            return Err(MapError::DimMismatch {
                expected: bg.pixels(),
                got: map.pixels(),
            });
        }
    }
    let mut labels = vec![Label::Background; bg.pixels()];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best: Option<(ClassId, f64)> = None;
        for (class_id, map) in cams {
            let v = map.values[p];
            best = match best {
                Some((bid, bv)) if v < bv || (v == bv && bid.0 <= class_id.0) => Some((bid, bv)),
                _ => Some((*class_id, v)),
            };
        }
        *label = match best {
            Some((class_id, v)) if v >= bg.values[p] => Label::Class(class_id),
            _ => Label::Background,
        };
    }
    Ok(LabelMap {
        width: bg.width,
        height: bg.height,
        labels,
    })
}
