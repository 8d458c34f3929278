//! Retrieval metrics and the structure preservation score.

use serde::Serialize;

use super::TrainError;
use crate::matrix_io::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub med_r: f64,
    pub mean_r: f64,
}

/// 1-based rank of `truth` among `scores`, sorted descending, ties to the
/// lower index.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

pub fn metrics_from_ranks(ranks: &[usize]) -> Result<RetrievalMetrics, TrainError> {
    if ranks.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let med_r = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    Ok(RetrievalMetrics {
        r_at_1: recall(1),
        r_at_5: recall(5),
        r_at_10: recall(10),
        med_r,
        mean_r: ranks.iter().sum::<usize>() as f64 / n,
    })
}

/// Ranks each query's index-aligned gallery item by dot product.
pub fn retrieval_eval(query: &DenseMatrix, gallery: &DenseMatrix) -> Result<RetrievalMetrics, TrainError> {
    if query.rows() == 0 {
        return Err(TrainError::EmptyEvaluation);
    }
    if query.shape() != gallery.shape() {
        return Err(TrainError::InvalidConfig(format!(
            "query {:?} and gallery {:?} differ in shape",
            query.shape(),
            gallery.shape()
        )));
    }
    let sim = query.matmul_t(gallery);
    let ranks: Vec<usize> = (0..sim.rows()).map(|i| rank_of(sim.row(i), i)).collect();
    metrics_from_ranks(&ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullVideoMetrics {
    /// Each caption ranks videos by its best-matching clip.
    pub per_caption: RetrievalMetrics,
    /// Each video averages the score vectors of its captions before ranking.
    pub caption_avg: RetrievalMetrics,
}

/// Video retrieval from caption-by-clip similarities, where a video's
/// score for a caption is the maximum over its clips.
pub fn full_video_retrieval_eval(
    clip_similarities: &DenseMatrix,
    clip_to_video: &[usize],
    caption_to_video: &[usize],
) -> Result<FullVideoMetrics, TrainError> {
    let (n_captions, n_clips) = clip_similarities.shape();
    if clip_to_video.len() != n_clips {
        return Err(TrainError::Unmapped(format!(
            "{} clips but {} clip mappings",
            n_clips,
            clip_to_video.len()
        )));
    }
    if caption_to_video.len() != n_captions {
        return Err(TrainError::Unmapped(format!(
            "{} captions but {} caption mappings",
            n_captions,
            caption_to_video.len()
        )));
    }
    if n_captions == 0 {
        return Err(TrainError::EmptyEvaluation);
    }
    let n_videos = clip_to_video
        .iter()
        .chain(caption_to_video)
        .max()
        .map_or(0, |v| v + 1);
    let mut has_clip = vec![false; n_videos];
    for &v in clip_to_video {
        has_clip[v] = true;
    }
    if let Some(v) = caption_to_video.iter().find(|&&v| !has_clip[v]) {
        return Err(TrainError::Unmapped(format!("video {v} has captions but no clips")));
    }
    // Videos with no clips cannot be retrieved and are left out of the ranking.
    let videos: Vec<usize> = (0..n_videos).filter(|&v| has_clip[v]).collect();
    let position: Vec<Option<usize>> = {
        let mut p = vec![None; n_videos];
        for (k, &v) in videos.iter().enumerate() {
            p[v] = Some(k);
        }
        p
    };

    let mut scores = vec![vec![f64::NEG_INFINITY; videos.len()]; n_captions];
    for (c, row) in scores.iter_mut().enumerate() {
        for (clip, &v) in clip_to_video.iter().enumerate() {
            let k = position[v].expect("clip video is indexed");
            row[k] = row[k].max(clip_similarities[(c, clip)]);
        }
    }

    let caption_ranks: Vec<usize> = (0..n_captions)
        .map(|c| rank_of(&scores[c], position[caption_to_video[c]].expect("checked above")))
        .collect();

    let mut avg_ranks = Vec::new();
    for (k, &v) in videos.iter().enumerate() {
        let mine: Vec<usize> = (0..n_captions).filter(|&c| caption_to_video[c] == v).collect();
        if mine.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..videos.len())
            .map(|j| mine.iter().map(|&c| scores[c][j]).sum::<f64>() / mine.len() as f64)
            .collect();
        avg_ranks.push(rank_of(&mean, k));
    }

    Ok(FullVideoMetrics {
        per_caption: metrics_from_ranks(&caption_ranks)?,
        caption_avg: metrics_from_ranks(&avg_ranks)?,
    })
}

fn cosine_upper_triangle(x: &DenseMatrix) -> Vec<f64> {
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            out.push(dot / (norms[i] * norms[j]));
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Spreads at rounding level count as constant.
    let flat = |ss: f64| (ss / n).sqrt() < 1e-12;
    if flat(saa) || flat(sbb) {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the pairwise cosine similarities of the same
/// samples in two spaces.
pub fn structure_preservation_score(input: &DenseMatrix, joint: &DenseMatrix) -> Result<f64, TrainError> {
    if input.rows() != joint.rows() {
        return Err(TrainError::InvalidConfig(format!(
            "batches have {} and {} rows",
            input.rows(),
            joint.rows()
        )));
    }
    for (m, name) in [(input, "input"), (joint, "joint")] {
        if let Some(i) = (0..m.rows()).find(|&i| m.row(i).iter().all(|&v| v == 0.0)) {
            return Err(TrainError::DegenerateStructure(format!("{name} row {i} has zero norm")));
        }
    }
    let a = cosine_upper_triangle(input);
    let b = cosine_upper_triangle(joint);
    if a.is_empty() {
        return Err(TrainError::DegenerateStructure("need at least two samples".into()));
    }
    pearson(&a, &b).ok_or_else(|| TrainError::DegenerateStructure("constant similarity matrix".into()))
}
