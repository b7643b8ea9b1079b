//! Single-shot CMC evaluation: one gallery image per identity, every
//! camera-A image as a probe, rank histograms accumulated over all probes
//! and averaged across trials.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Camera, IdentityDataset};
use crate::error::{Error, Result};
use crate::mathf;
use crate::model::PpmnModel;
use crate::tensor::Tensor;

/// A probe or gallery entry: the identity it belongs to and its image.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub identity: String,
    pub image: Tensor,
}

/// Cumulative matching curve: `ranks[k - 1]` is the fraction of probes
/// whose true match appears within the top `k` gallery candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    pub ranks: Vec<f32>,
    pub probe_count: usize,
    pub gallery_size: usize,
}

impl CmcCurve {
    /// Rank-`k` score (1-based); `None` beyond the gallery size.
    pub fn rank(&self, k: usize) -> Option<f32> {
        if k == 0 {
            return None;
        }
        self.ranks.get(k - 1).copied()
    }
}

/// Single-shot protocol: the gallery takes one seeded-random camera-B
/// image per identity, the probes are all camera-A images. Every test
/// identity must have at least one image under each camera.
pub fn build_single_shot(
    test_set: &IdentityDataset,
    trial_seed: u64,
) -> Result<(Vec<EvalImage>, Vec<EvalImage>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let mut probes = Vec::new();
    let mut gallery = Vec::new();
    for identity in &test_set.identities {
        let a_imgs = identity.camera_images(Camera::A);
        let b_imgs = identity.camera_images(Camera::B);
        if a_imgs.is_empty() {
            return Err(Error::MissingCamera {
                identity: identity.id.clone(),
                camera: 'A',
            });
        }
        if b_imgs.is_empty() {
            return Err(Error::MissingCamera {
                identity: identity.id.clone(),
                camera: 'B',
            });
        }
        let choice = b_imgs[rng.gen_range(0..b_imgs.len())];
        gallery.push(EvalImage {
            identity: identity.id.clone(),
            image: identity.images[choice].image.clone(),
        });
        for idx in a_imgs {
            probes.push(EvalImage {
                identity: identity.id.clone(),
                image: identity.images[idx].image.clone(),
            });
        }
    }
    Ok((probes, gallery))
}

/// Builds the curve from a row-major `probes x gallery` score matrix.
/// A probe's match ranks `1 + |higher scores| + |equal scores at smaller
/// gallery index|`, so ties break deterministically by gallery order.
pub fn cmc_from_scores(
    probe_ids: &[&str],
    gallery_ids: &[&str],
    scores: &[f32],
) -> Result<CmcCurve> {
    let probe_count = probe_ids.len();
    let gallery_size = gallery_ids.len();
    if probe_count == 0 || gallery_size == 0 {
        return Err(Error::EmptyBatch);
    }
    if scores.len() != probe_count * gallery_size {
        return Err(Error::ShapeMismatch(format!(
            "score matrix has {} entries, expected {} x {}",
            scores.len(),
            probe_count,
            gallery_size
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score in CMC matrix".to_string()));
    }
    let mut hits = vec![0usize; gallery_size];
    for (p, &probe_id) in probe_ids.iter().enumerate() {
        let row = &scores[p * gallery_size..(p + 1) * gallery_size];
        let target = gallery_ids
            .iter()
            .position(|&g| g == probe_id)
            .ok_or_else(|| Error::ProbeNotInGallery(probe_id.to_string()))?;
        let s_true = row[target];
        let mut rank = 1usize;
        for (j, &s) in row.iter().enumerate() {
            if s > s_true || (s == s_true && j < target) {
                rank += 1;
            }
        }
        hits[rank - 1] += 1;
    }
    let mut ranks = Vec::with_capacity(gallery_size);
    let mut cumulative = 0usize;
    for h in hits {
        cumulative += h;
        ranks.push(cumulative as f32 / probe_count as f32);
    }
    Ok(CmcCurve {
        ranks,
        probe_count,
        gallery_size,
    })
}

/// Scores every probe against every gallery image with `score` and builds
/// the curve.
pub fn cmc_single_shot<F>(
    probes: &[EvalImage],
    gallery: &[EvalImage],
    mut score: F,
) -> Result<CmcCurve>
where
    F: FnMut(&EvalImage, &EvalImage) -> Result<f32>,
{
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut scores = Vec::with_capacity(probes.len() * gallery.len());
    for probe in probes {
        for candidate in gallery {
            scores.push(score(probe, candidate)?);
        }
    }
    let probe_ids: Vec<&str> = probes.iter().map(|p| p.identity.as_str()).collect();
    let gallery_ids: Vec<&str> = gallery.iter().map(|g| g.identity.as_str()).collect();
    cmc_from_scores(&probe_ids, &gallery_ids, &scores)
}

/// The model as a scorer: probe as the first image, gallery candidate as
/// the second (the network is not symmetric in its operands).
pub fn model_scorer(model: &PpmnModel) -> impl FnMut(&EvalImage, &EvalImage) -> Result<f32> + '_ {
    move |probe, candidate| {
        Ok(model.forward_pair(&probe.image, &candidate.image)?[0].p)
    }
}

/// Tower output for a single image, reusable across many pairings.
pub fn probe_representation(model: &PpmnModel, image: &Tensor) -> Result<Tensor> {
    model.extract_representations(image, image).map(|(rep, _)| rep)
}

/// Scores one probe representation against a stacked batch of gallery
/// representations in a single head pass. Because the towers share
/// parameters, feeding cached representations is arithmetic-identical to
/// running the full pair forward.
pub fn probe_scores(model: &PpmnModel, probe_rep: &Tensor, gallery_reps: &Tensor) -> Result<Vec<f32>> {
    let count = gallery_reps.dims().0;
    let repeated = Tensor::stack(&vec![probe_rep; count])?;
    let branches = model.pyramid_match(&repeated, gallery_reps)?;
    let pooled = model.fuse_and_pool(&branches)?;
    Ok(model.classify_pair(&pooled)?.iter().map(|s| s.p).collect())
}

/// Whole score matrix via cached representations: each tower runs once per
/// image instead of once per pair.
pub fn score_matrix(
    model: &PpmnModel,
    probes: &[EvalImage],
    gallery: &[EvalImage],
) -> Result<Vec<f32>> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let gallery_reps: Vec<Tensor> = gallery
        .iter()
        .map(|g| probe_representation(model, &g.image))
        .collect::<Result<_>>()?;
    let gallery_stack = Tensor::stack(&gallery_reps.iter().collect::<Vec<_>>())?;
    let mut scores = Vec::with_capacity(probes.len() * gallery.len());
    for probe in probes {
        let rep = probe_representation(model, &probe.image)?;
        scores.extend(probe_scores(model, &rep, &gallery_stack)?);
    }
    Ok(scores)
}

/// Evaluates the model over one single-shot split.
pub fn cmc_single_shot_model(
    model: &PpmnModel,
    probes: &[EvalImage],
    gallery: &[EvalImage],
) -> Result<CmcCurve> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scores = score_matrix(model, probes, gallery)?;
    let probe_ids: Vec<&str> = probes.iter().map(|p| p.identity.as_str()).collect();
    let gallery_ids: Vec<&str> = gallery.iter().map(|g| g.identity.as_str()).collect();
    cmc_from_scores(&probe_ids, &gallery_ids, &scores)
}

/// Element-wise mean curve and per-rank population standard deviation
/// across trials.
pub fn average_trials(curves: &[CmcCurve]) -> Result<(CmcCurve, Vec<f32>)> {
    let first = curves.first().ok_or(Error::EmptyBatch)?;
    let len = first.ranks.len();
    for curve in curves {
        if curve.ranks.len() != len {
            return Err(Error::MixedCurveLengths {
                expected: len,
                actual: curve.ranks.len(),
            });
        }
    }
    let n = curves.len() as f32;
    let mut mean = vec![0.0f32; len];
    for curve in curves {
        for (m, &v) in mean.iter_mut().zip(curve.ranks.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0f32; len];
    for curve in curves {
        for ((s, &m), &v) in std.iter_mut().zip(mean.iter()).zip(curve.ranks.iter()) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| *s = mathf::sqrt(*s / n));
    Ok((
        CmcCurve {
            ranks: mean,
            probe_count: curves.iter().map(|c| c.probe_count).sum(),
            gallery_size: first.gallery_size,
        },
        std,
    ))
}

/// Formats the rank-1/5/10 cumulative matching scores as percentages with
/// two decimals, omitting ranks beyond the gallery size.
pub fn report(curve: &CmcCurve) -> String {
    let mut out = String::new();
    for k in [1usize, 5, 10] {
        if let Some(score) = curve.rank(k) {
            out.push_str(&format!("rank-{k}\t{:.2}\n", score * 100.0));
        }
    }
    out
}
