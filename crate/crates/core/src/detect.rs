//! Proposal re-ranking by descriptor similarity, box-centre translation
//! recovery and the angular translation error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MIN_FEATURE_NORM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub descriptor: Vec<f64>,
}

/// Proposals sharing a declared descriptor width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    c_d: usize,
    proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(c_d: usize, proposals: Vec<Proposal>) -> Result<Self> {
        for (i, p) in proposals.iter().enumerate() {
            if p.descriptor.len() != c_d {
                return Err(Error::DimensionMismatch {
                    expected: c_d,
                    actual: p.descriptor.len(),
                });
            }
            if !(p.w > 0.0 && p.h > 0.0) {
                return Err(Error::DegenerateInput(format!("proposal {i} has a non-positive box")));
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::DegenerateInput(format!(
                    "proposal {i} score {} outside [0, 1]",
                    p.score
                )));
            }
        }
        Ok(ProposalSet { c_d, proposals })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.c_d
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    pub fn new(f: Vec<f64>) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("descriptor has non-finite entries".into()));
        }
        if norm(&f) < MIN_FEATURE_NORM {
            return Err(Error::ZeroVector);
        }
        Ok(Descriptor(f))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = (norm(a) * norm(b)).max(MIN_FEATURE_NORM * MIN_FEATURE_NORM);
    dot / denom
}

/// Index and cosine of the proposal most similar to the reference.
pub fn rank_proposals(reference: &Descriptor, props: &ProposalSet) -> Result<(usize, f64)> {
    if props.is_empty() {
        return Err(Error::EmptyProposalSet);
    }
    if reference.0.len() != props.c_d {
        return Err(Error::DimensionMismatch {
            expected: props.c_d,
            actual: reference.0.len(),
        });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in props.proposals.iter().enumerate() {
        let s = cosine(&reference.0, &p.descriptor);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

/// Index of the highest detector confidence.
pub fn rank_by_confidence(props: &ProposalSet) -> Result<usize> {
    if props.is_empty() {
        return Err(Error::EmptyProposalSet);
    }
    let mut best = 0;
    for (i, p) in props.proposals.iter().enumerate() {
        if p.score > props.proposals[best].score {
            best = i;
        }
    }
    Ok(best)
}

/// Unit-depth translation through the box centre, `K⁻¹ (cx, cy, 1)ᵀ`.
pub fn translation_from_box(cx: f64, cy: f64, k: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let det = k.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::SingularIntrinsics);
    }
    let k_inv = k.try_inverse().ok_or(Error::SingularIntrinsics)?;
    Ok(k_inv * Vector3::new(cx, cy, 1.0))
}

/// Angle between two translations in degrees.
pub fn translation_angular_error_deg(t_hat: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<f64> {
    let (a, b) = (t_hat.norm(), t_gt.norm());
    if !(a >= MIN_FEATURE_NORM && b >= MIN_FEATURE_NORM) {
        return Err(Error::ZeroVector);
    }
    let c = (t_hat.dot(t_gt) / (a * b)).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}
