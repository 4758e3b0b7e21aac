//! Training losses: multilabel BCE over class logits, the same form over
//! compound concepts with contrastive negatives, and the flip
//! auto-consistency term. All gradients are derived analytically; pseudo
//! labels are constants (no gradient flows through the argmax).

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::activation::{
    background_map, estimate_labels, normalize_tam, ActivationMap, Label, LabelMap, MapError,
    BACKGROUND_ALPHA,
};
use crate::corpus::ParsedImage;
use crate::parser::{ClassId, Snippet, SnippetKind};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("concept batch has neither present nor contrastive snippets")]
    EmptyBatch,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("no present classes")]
    NoPresentClasses,
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_cpt: f64,
    pub lambda_ac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_cpt: 0.3,
            lambda_ac: 0.001,
        }
    }
}

/// Unweighted values of the three loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub cpt: f64,
    pub ac: f64,
}

/// Weighted total plus its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub parts: LossParts,
}

/// Weighted sum of the loss parts.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossValue, LossError> {
    let total = weights.lambda_cls * parts.cls
        + weights.lambda_cpt * parts.cpt
        + weights.lambda_ac * parts.ac;
    if !total.is_finite() {
        return Err(LossError::NonFiniteLoss);
    }
    Ok(LossValue { total, parts })
}

// ---------------------------------------------------------------------------
// Stable scalar helpers
// ---------------------------------------------------------------------------

/// `ln(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Average pooling of a raw activation map.
pub fn avg_pool(map: &ActivationMap) -> f64 {
    map.values.iter().sum::<f64>() / map.pixels() as f64
}

// ---------------------------------------------------------------------------
// Multilabel BCE
// ---------------------------------------------------------------------------

/// Multilabel BCE on logits split into present and absent groups.
///
/// Returns the loss and dLoss/dlogit for both groups:
/// `sigmoid(z) - 1` for present entries, `sigmoid(z)` for absent ones.
fn bce_with_logits(present: &[f64], absent: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut loss = 0.0;
    let grad_present = present
        .iter()
        .map(|&z| {
            loss += softplus(-z);
            sigmoid(z) - 1.0
        })
        .collect();
    let grad_absent = absent
        .iter()
        .map(|&z| {
            loss += softplus(z);
            sigmoid(z)
        })
        .collect();
    (loss, grad_present, grad_absent)
}

/// Class loss over the pooled class-name logits of every vocabulary class.
///
/// `pooled[c]` is the average-pooled TAM logit of class `c`. Returns the
/// loss and dLoss/dpooled.
pub fn class_loss(pooled: &[f64], present: &BTreeSet<ClassId>) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = pooled
        .iter()
        .enumerate()
        .map(|(c, &z)| {
            if present.contains(&ClassId(c)) {
                loss += softplus(-z);
                sigmoid(z) - 1.0
            } else {
                loss += softplus(z);
                sigmoid(z)
            }
        })
        .collect();
    (loss, grad)
}

/// Concepts loss: BCE over pooled compound logits, with the image's own
/// compounds as positives and contrastively sampled ones as negatives.
pub fn concepts_loss(
    present_pooled: &[f64],
    contrastive_pooled: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    if present_pooled.is_empty() && contrastive_pooled.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let (loss, grad_present, grad_contrastive) =
        bce_with_logits(present_pooled, contrastive_pooled);
    Ok((loss, grad_present, grad_contrastive))
}

// ---------------------------------------------------------------------------
// Concept sampling
// ---------------------------------------------------------------------------

/// Which compounds feed the concepts loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConceptTypes {
    /// All compound concepts.
    #[default]
    All,
    /// Only compounds containing a class name.
    ClassRelatedOnly,
}

impl ConceptTypes {
    pub fn keeps(&self, snippet: &Snippet) -> bool {
        match self {
            ConceptTypes::All => snippet.kind.is_compound(),
            ConceptTypes::ClassRelatedOnly => {
                matches!(snippet.kind, SnippetKind::ClassRelatedCompound(_))
            }
        }
    }
}

/// Bounds of [`sample_contrastive`].
#[derive(Debug, Clone, Copy)]
pub struct SamplingLimits {
    /// Maximum own compounds per image.
    pub max_present: usize,
    /// Number of other images the negatives are drawn from.
    pub contrastive_images: usize,
    /// Maximum negatives per image.
    pub max_contrastive: usize,
}

impl Default for SamplingLimits {
    fn default() -> Self {
        SamplingLimits {
            max_present: 10,
            contrastive_images: 10,
            max_contrastive: 50,
        }
    }
}

/// Present and contrastive compound snippets for one image.
#[derive(Debug, Clone)]
pub struct ConceptBatch {
    pub present: Vec<Snippet>,
    pub contrastive: Vec<Snippet>,
}

fn sample_without_replacement<T: Clone>(
    items: &[T],
    amount: usize,
    rng: &mut impl Rng,
) -> Vec<T> {
    let amount = amount.min(items.len());
    rand::seq::index::sample(rng, items.len(), amount)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Samples the concept batch for `corpus[index]`.
///
/// Present: up to `max_present` of the image's own compounds. Contrastive:
/// compounds pooled from `contrastive_images` other images, minus any whose
/// token sequence occurs in this image's captions, sampled down to
/// `max_contrastive`. All draws are without replacement.
pub fn sample_contrastive(
    corpus: &[ParsedImage],
    index: usize,
    limits: &SamplingLimits,
    types: ConceptTypes,
    rng: &mut impl Rng,
) -> ConceptBatch {
    let image = &corpus[index];
    let own: Vec<Snippet> = image
        .compounds
        .iter()
        .filter(|s| types.keeps(s))
        .cloned()
        .collect();
    let present = sample_without_replacement(&own, limits.max_present, rng);

    let others: Vec<usize> = (0..corpus.len()).filter(|&i| i != index).collect();
    let sampled_images = sample_without_replacement(&others, limits.contrastive_images, rng);

    let mut seen = BTreeSet::new();
    let mut pool: Vec<Snippet> = Vec::new();
    for &other in &sampled_images {
        for snippet in &corpus[other].compounds {
            if !types.keeps(snippet) {
                continue;
            }
            if image.captions_contain(&snippet.tokens) {
                continue;
            }
            if seen.insert(snippet.text()) {
                pool.push(snippet.clone());
            }
        }
    }
    let contrastive = sample_without_replacement(&pool, limits.max_contrastive, rng);

    ConceptBatch {
        present,
        contrastive,
    }
}

// ---------------------------------------------------------------------------
// Auto-consistency
// ---------------------------------------------------------------------------

/// How the per-pixel probability of the pseudo label turns into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcVariant {
    /// `-log sigmoid(Z(p, label))`, the published composition.
    #[default]
    LogSigmoidOfSoftmax,
    /// `-log Z(p, label)`, plain cross entropy.
    CrossEntropy,
}

/// Loss and per-map gradients of the auto-consistency term.
#[derive(Debug, Clone)]
pub struct AcOutput {
    pub loss: f64,
    /// dLoss/dx for each input map of the original image, aligned with input
    /// order, one value per pixel.
    pub grad_tams: Vec<Vec<f64>>,
    /// Same for the flipped image's maps.
    pub grad_tams_f: Vec<Vec<f64>>,
}

/// Pseudo labels from raw class-name TAMs: normalize, background map,
/// argmax.
pub fn pseudo_labels(tams: &[(ClassId, ActivationMap)]) -> Result<LabelMap, LossError> {
    if tams.is_empty() {
        return Err(LossError::NoPresentClasses);
    }
    let normalized: Vec<(ClassId, ActivationMap)> = tams
        .iter()
        .map(|(id, map)| (*id, normalize_tam(map)))
        .collect();
    let maps_only: Vec<ActivationMap> = normalized.iter().map(|(_, m)| m.clone()).collect();
    let bg = background_map(&maps_only, BACKGROUND_ALPHA)?;
    Ok(estimate_labels(&normalized, &bg)?)
}

/// Stable softmax over `logits`.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One half of the auto-consistency loss: the mean per-pixel penalty of
/// `maps` under fixed `labels`, plus dLoss/dx per map (already divided by
/// the pixel count).
fn ac_half_term(
    tams: &[(ClassId, ActivationMap)],
    labels: &LabelMap,
    variant: AcVariant,
) -> (f64, Vec<Vec<f64>>) {
    let classes = tams.len();
    let pixels = labels.pixels();
    let inv_p = 1.0 / pixels as f64;
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; pixels]; classes];
    let mut logits = vec![0.0; classes + 1];
    for p in 0..pixels {
        for (k, (_, map)) in tams.iter().enumerate() {
            logits[k] = map.values[p];
        }
        logits[classes] = 0.0; // background logit is pinned at zero
        let z = softmax(&logits);
        let label_idx = match labels.labels[p] {
            Label::Background => classes,
            Label::Class(id) => tams
                .iter()
                .position(|(cid, _)| *cid == id)
                .expect("pseudo label class must be among the input maps"),
        };
        match variant {
            AcVariant::LogSigmoidOfSoftmax => {
                let zl = z[label_idx];
                loss += softplus(-zl) * inv_p;
                // d softplus(-zl)/dzl = sigmoid(zl) - 1; then the softmax
                // jacobian row: dzl/dx_j = zl * (delta - z_j)
                let dzl = sigmoid(zl) - 1.0;
                for (j, grad) in grads.iter_mut().enumerate() {
                    let delta = if j == label_idx { 1.0 } else { 0.0 };
                    grad[p] = dzl * zl * (delta - z[j]) * inv_p;
                }
            }
            AcVariant::CrossEntropy => {
                loss += -z[label_idx].max(f64::MIN_POSITIVE).ln() * inv_p;
                for (j, grad) in grads.iter_mut().enumerate() {
                    let delta = if j == label_idx { 1.0 } else { 0.0 };
                    grad[p] = (z[j] - delta) * inv_p;
                }
            }
        }
    }
    (loss, grads)
}

/// Flip auto-consistency loss.
///
/// `tams` and `tams_f` hold the raw class-name TAMs of the image and of its
/// horizontally flipped counterpart, over the same classes in the same
/// order. Pseudo labels are estimated from each side, mirrored, and used as
/// fixed targets for the other side. The two penalties are averaged over
/// pixels and halved.
pub fn auto_consistency_loss(
    tams: &[(ClassId, ActivationMap)],
    tams_f: &[(ClassId, ActivationMap)],
    variant: AcVariant,
) -> Result<AcOutput, LossError> {
    if tams.is_empty() || tams.len() != tams_f.len() {
        return Err(LossError::NoPresentClasses);
    }
    let pixels = tams[0].1.pixels();
    for (id, map) in tams.iter().chain(tams_f.iter()) {
        if map.pixels() != pixels {
            return Err(MapError::DimMismatch {
                expected: pixels,
                got: map.pixels(),
            }
            .into());
        }
        let _ = id;
    }

    let labels_mirrored = pseudo_labels(tams)?.flip_horizontal();
    let labels_f_mirrored = pseudo_labels(tams_f)?.flip_horizontal();

    // the image's labels supervise the flipped maps and vice versa
    let (loss_f, mut grad_tams_f) = ac_half_term(tams_f, &labels_mirrored, variant);
    let (loss_i, mut grad_tams) = ac_half_term(tams, &labels_f_mirrored, variant);

    for grads in grad_tams.iter_mut().chain(grad_tams_f.iter_mut()) {
        for g in grads.iter_mut() {
            *g *= 0.5;
        }
    }

    Ok(AcOutput {
        loss: 0.5 * (loss_f + loss_i),
        grad_tams,
        grad_tams_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::MapKind;
    use crate::corpus::{CaptionRecord, ParsedImage};
    use crate::parser::{ClassVocabulary, Lexicon};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(values: &[f64]) -> ActivationMap {
        ActivationMap::from_values(values.len(), 1, values.to_vec(), MapKind::Raw)
    }

    #[test]
    fn avg_pool_is_pixel_mean() {
        assert_eq!(avg_pool(&raw(&[1.0, 3.0])), 2.0);
        assert_eq!(avg_pool(&raw(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(avg_pool(&raw(&[-2.0, 4.0, 1.0])), 1.0);
    }

    #[test]
    fn class_loss_examples() {
        let (loss, grad) = class_loss(&[0.0], &BTreeSet::from([ClassId(0)]));
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(grad[0], -0.5, max_relative = 1e-12);

        // saturated absent logit must not overflow
        let (loss, grad) = class_loss(&[-1000.0], &BTreeSet::new());
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-12);
        assert!(grad[0].abs() < 1e-12);

        let (loss, _) = class_loss(&[2.0, -2.0], &BTreeSet::from([ClassId(0)]));
        assert_relative_eq!(loss, 2.0 * (1.0 + (-2.0f64).exp()).ln(), max_relative = 1e-12);
    }

    #[test]
    fn class_loss_gradient_signs() {
        let (_, grad) = class_loss(&[1.3, 1.3], &BTreeSet::from([ClassId(0)]));
        assert_relative_eq!(grad[0], sigmoid(1.3) - 1.0, max_relative = 1e-12);
        assert_relative_eq!(grad[1], sigmoid(1.3), max_relative = 1e-12);
    }

    #[test]
    fn concepts_loss_examples() {
        let (loss, _, _) = concepts_loss(&[0.0], &[]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);

        let a = 1.7;
        let (loss, _, _) = concepts_loss(&[a], &[-a]).unwrap();
        assert_relative_eq!(loss, 2.0 * (1.0 + (-a).exp()).ln(), max_relative = 1e-12);

        let (loss, _, _) = concepts_loss(&[], &[0.0]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);

        assert!(matches!(concepts_loss(&[], &[]), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn bce_stays_finite_for_extreme_logits() {
        for z in [-1e4, -123.0, 0.0, 456.0, 1e4] {
            let (loss, grad) = class_loss(&[z], &BTreeSet::from([ClassId(0)]));
            assert!(loss.is_finite() && grad[0].is_finite());
            let (loss, grad) = class_loss(&[z], &BTreeSet::new());
            assert!(loss.is_finite() && grad[0].is_finite());
        }
    }

    #[test]
    fn total_loss_examples() {
        let weights = LossWeights::default();
        let value = total_loss(
            LossParts {
                cls: 1.0,
                cpt: 1.0,
                ac: 1.0,
            },
            &weights,
        )
        .unwrap();
        assert_relative_eq!(value.total, 1.301, max_relative = 1e-12);

        let zero = LossWeights {
            lambda_cls: 0.0,
            lambda_cpt: 0.0,
            lambda_ac: 0.0,
        };
        assert_eq!(
            total_loss(
                LossParts {
                    cls: 5.0,
                    cpt: 5.0,
                    ac: 5.0
                },
                &zero
            )
            .unwrap()
            .total,
            0.0
        );

        let value = total_loss(
            LossParts {
                cls: 0.5,
                cpt: 0.0,
                ac: 0.0,
            },
            &weights,
        )
        .unwrap();
        assert_eq!(value.total, 0.5);

        assert!(matches!(
            total_loss(
                LossParts {
                    cls: f64::NAN,
                    cpt: 0.0,
                    ac: 0.0
                },
                &weights
            ),
            Err(LossError::NonFiniteLoss)
        ));
    }

    fn tiny_corpus() -> Vec<ParsedImage> {
        let vocab = ClassVocabulary::from_pairs([("bed", "beds"), ("dog", "dogs")]);
        let lexicon = Lexicon::builtin();
        let records = vec![
            CaptionRecord {
                image_id: "a".into(),
                captions: vec!["two large beds located in a hotel room".into()],
            },
            CaptionRecord {
                image_id: "b".into(),
                captions: vec![
                    "two large beds in a dark cellar".into(),
                    "a brown dog sitting on a green lawn".into(),
                ],
            },
        ];
        records
            .iter()
            .map(|r| ParsedImage::parse(r, &vocab, &lexicon))
            .collect()
    }

    #[test]
    fn sampling_is_bounded_by_the_pool_and_deterministic() {
        let corpus = tiny_corpus();
        let limits = SamplingLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_contrastive(&corpus, 0, &limits, ConceptTypes::All, &mut rng);
        // image b offers 3 compounds; "two large beds" appears in image a's
        // captions and must be excluded
        let texts: BTreeSet<String> = batch.contrastive.iter().map(|s| s.text()).collect();
        assert!(!texts.contains("two large beds"));
        assert!(texts.len() <= 3);
        assert!(!texts.is_empty());

        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let batch2 = sample_contrastive(&corpus, 0, &limits, ConceptTypes::All, &mut rng2);
        let texts2: Vec<String> = batch2.contrastive.iter().map(|s| s.text()).collect();
        let texts1: Vec<String> = batch.contrastive.iter().map(|s| s.text()).collect();
        assert_eq!(texts1, texts2);
        assert_eq!(
            batch.present.iter().map(Snippet::text).collect::<Vec<_>>(),
            batch2.present.iter().map(Snippet::text).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sampling_respects_concept_type_filter() {
        let corpus = tiny_corpus();
        let limits = SamplingLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_contrastive(
            &corpus,
            0,
            &limits,
            ConceptTypes::ClassRelatedOnly,
            &mut rng,
        );
        for snippet in batch.present.iter().chain(&batch.contrastive) {
            assert!(matches!(
                snippet.kind,
                SnippetKind::ClassRelatedCompound(_)
            ));
        }
    }

    #[test]
    fn ac_single_pixel_hand_value() {
        // one present class, x = 0 everywhere: Z = (0.5, 0.5), pseudo label
        // is background, so the loss is -log sigmoid(0.5) per half term
        let tams = vec![(ClassId(0), raw(&[0.0]))];
        let out = auto_consistency_loss(&tams, &tams, AcVariant::LogSigmoidOfSoftmax).unwrap();
        assert_relative_eq!(out.loss, softplus(-0.5), max_relative = 1e-12);
        assert_relative_eq!(out.loss, 0.4740769841801067, max_relative = 1e-9);
    }

    #[test]
    fn ac_symmetric_input_gives_equal_terms() {
        // flip-symmetric maps: both halves see identical data
        let tams = vec![
            (ClassId(0), raw(&[0.4, 0.4])),
            (ClassId(1), raw(&[-0.2, -0.2])),
        ];
        let out = auto_consistency_loss(&tams, &tams, AcVariant::LogSigmoidOfSoftmax).unwrap();
        for (a, b) in out.grad_tams.iter().zip(&out.grad_tams_f) {
            for (x, y) in a.iter().zip(b) {
                assert_relative_eq!(x, y, max_relative = 1e-12);
            }
        }
        assert!(out.loss > 0.0);
    }

    #[test]
    fn ac_cross_entropy_gradient_vanishes_when_saturated() {
        let tams = vec![(ClassId(0), raw(&[30.0]))];
        let out = auto_consistency_loss(&tams, &tams, AcVariant::CrossEntropy).unwrap();
        // label is the class, Z(class) ~ 1: gradient nearly zero
        assert!(out.grad_tams[0][0].abs() < 1e-9);
        assert!(out.loss < 1e-9);
    }

    #[test]
    fn ac_rejects_dim_mismatch() {
        let tams = vec![(ClassId(0), raw(&[0.0, 1.0]))];
        let tams_f = vec![(ClassId(0), raw(&[0.0]))];
        assert!(matches!(
            auto_consistency_loss(&tams, &tams_f, AcVariant::default()),
            Err(LossError::Map(MapError::DimMismatch { .. }))
        ));
    }

    #[test]
    fn ac_gradients_match_finite_differences() {
        // margins are far from argmax flips, so the detached labels stay put
        let base = vec![
            (ClassId(0), raw(&[0.9, -0.4, 0.1])),
            (ClassId(1), raw(&[-0.6, 0.8, -0.2])),
        ];
        let base_f = vec![
            (ClassId(0), raw(&[0.2, -0.3, 0.7])),
            (ClassId(1), raw(&[0.5, 0.6, -0.8])),
        ];
        for variant in [AcVariant::LogSigmoidOfSoftmax, AcVariant::CrossEntropy] {
            let out = auto_consistency_loss(&base, &base_f, variant).unwrap();
            let h = 1e-6;
            for (k, p) in [(0usize, 1usize), (1, 0), (1, 2)] {
                let mut up = base.clone();
                up[k].1.values[p] += h;
                let mut down = base.clone();
                down[k].1.values[p] -= h;
                let fd = (auto_consistency_loss(&up, &base_f, variant).unwrap().loss
                    - auto_consistency_loss(&down, &base_f, variant).unwrap().loss)
                    / (2.0 * h);
                assert_relative_eq!(out.grad_tams[k][p], fd, max_relative = 1e-5, epsilon = 1e-10);

                let mut up = base_f.clone();
                up[k].1.values[p] += h;
                let mut down = base_f.clone();
                down[k].1.values[p] -= h;
                let fd = (auto_consistency_loss(&base, &up, variant).unwrap().loss
                    - auto_consistency_loss(&base, &down, variant).unwrap().loss)
                    / (2.0 * h);
                assert_relative_eq!(out.grad_tams_f[k][p], fd, max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }
}
