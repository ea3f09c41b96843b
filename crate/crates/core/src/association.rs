//! Detection filtering and mask-overlap data association.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::image::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub mask: Mask,
    pub class_dist: Vec<f64>,
    pub score: f64,
}

impl Detection {
    pub fn area(&self) -> usize {
        self.mask.count()
    }

    pub fn max_prob(&self) -> f64 {
        self.class_dist.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AssociationParams {
    pub max_detections: usize,
    pub border_band: usize,
    pub min_class_prob: f64,
    pub min_area: usize,
    pub min_overlap: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            max_detections: 100,
            border_band: 20,
            min_class_prob: 0.5,
            min_area: 2500,
            min_overlap: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AssociationResult {
    /// Merged detection per volume id.
    pub matched: BTreeMap<i32, Detection>,
    pub unmatched: Vec<Detection>,
    /// Volume chosen for each input detection, in input order.
    pub assignment: Vec<Option<i32>>,
}

/// Keeps the highest-scoring detections, then drops border-touching, unsure
/// and small ones.
pub fn filter_detections(raw: Vec<Detection>, params: &AssociationParams) -> Vec<Detection> {
    let mut raw = raw;
    // stable: equal scores keep input order
    raw.sort_by(|a, b| b.score.total_cmp(&a.score));
    raw.truncate(params.max_detections);
    raw.into_iter()
        .filter(|d| {
            !d.mask.touches_border(params.border_band)
                && d.max_prob() > params.min_class_prob
                && d.area() > params.min_area
        })
        .collect()
}

/// Fraction of the detection's mask covered by a rendered mask.
pub fn overlap(detection: &Mask, rendered: &Mask) -> f64 {
    let n = detection.count();
    if n == 0 {
        0.0
    } else {
        detection.intersection_count(rendered) as f64 / n as f64
    }
}

pub fn associate(
    detections: Vec<Detection>,
    rendered: &BTreeMap<i32, Mask>,
    params: &AssociationParams,
) -> AssociationResult {
    let mut groups: BTreeMap<i32, Vec<Detection>> = BTreeMap::new();
    let mut out = AssociationResult::default();
    for d in detections {
        let mut best: Option<(i32, f64)> = None;
        // ascending ids, strict comparison: ties stay with the lowest id
        for (&id, m) in rendered {
            let a = overlap(&d.mask, m);
            if a > params.min_overlap && best.is_none_or(|(_, b)| a > b) {
                best = Some((id, a));
            }
        }
        match best {
            Some((id, _)) => {
                out.assignment.push(Some(id));
                groups.entry(id).or_default().push(d);
            }
            None => {
                out.assignment.push(None);
                out.unmatched.push(d);
            }
        }
    }
    for (id, ds) in groups {
        out.matched.insert(id, merge(ds));
    }
    out
}

/// Mask union with the mean class distribution and the best score.
pub fn merge(mut ds: Vec<Detection>) -> Detection {
    assert!(!ds.is_empty());
    if ds.len() == 1 {
        return ds.pop().unwrap();
    }
    let n = ds.len() as f64;
    let mut mask = ds[0].mask.clone();
    let mut dist = vec![0.0; ds[0].class_dist.len()];
    let mut score = f64::MIN;
    for d in &ds {
        mask = mask.union(&d.mask);
        for (a, b) in dist.iter_mut().zip(&d.class_dist) {
            *a += b / n;
        }
        score = score.max(d.score);
    }
    Detection {
        mask,
        class_dist: dist,
        score,
    }
}
