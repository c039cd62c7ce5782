//! Named-group parameter container with the small arithmetic surface the
//! trainers and aggregators need.

use crate::msgflow::{Payload, Value};

use super::LearnError;

/// Model parameters as an ordered list of named flat groups.
///
/// Group order is fixed at construction and preserved by every operation,
/// so encoded forms are canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    groups: Vec<(String, Vec<f64>)>,
}

impl ParamVector {
    pub fn new(groups: Vec<(String, Vec<f64>)>) -> Result<Self, LearnError> {
        for (i, (name, _)) in groups.iter().enumerate() {
            if name.is_empty() {
                return Err(LearnError::Config("empty parameter group name".into()));
            }
            if groups[..i].iter().any(|(other, _)| other == name) {
                return Err(LearnError::DuplicateGroup(name.clone()));
            }
        }
        Ok(ParamVector { groups })
    }

    /// Zero-filled groups with the given shapes, in the given order.
    pub fn zeros(shapes: &[(String, usize)]) -> Result<Self, LearnError> {
        ParamVector::new(
            shapes
                .iter()
                .map(|(name, len)| (name.clone(), vec![0.0; *len]))
                .collect(),
        )
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            groups: self
                .groups
                .iter()
                .map(|(name, vals)| (name.clone(), vec![0.0; vals.len()]))
                .collect(),
        }
    }

    pub fn groups(&self) -> &[(String, Vec<f64>)] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.groups
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_mut_slice())
    }

    /// Total number of scalar entries across all groups.
    pub fn total_len(&self) -> usize {
        self.groups.iter().map(|(_, v)| v.len()).sum()
    }

    /// Compact shape descriptor, e.g. `w[4] b[2]`, used in error messages.
    pub fn shape_desc(&self) -> String {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|(name, vals)| format!("{name}[{}]", vals.len()))
            .collect();
        if parts.is_empty() {
            "<empty>".into()
        } else {
            parts.join(" ")
        }
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(other.groups.iter())
                .all(|((an, av), (bn, bv))| an == bn && av.len() == bv.len())
    }

    fn require_same_shape(&self, other: &ParamVector) -> Result<(), LearnError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LearnError::ShapeMismatch {
                expected: self.shape_desc(),
                got: other.shape_desc(),
            })
        }
    }

    /// In-place `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, factor: f64) -> Result<(), LearnError> {
        self.require_same_shape(other)?;
        for ((_, a), (_, b)) in self.groups.iter_mut().zip(other.groups.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    /// Elementwise `self - other` as a new vector.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, LearnError> {
        self.require_same_shape(other)?;
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, vals) in &mut self.groups {
            for x in vals {
                *x *= factor;
            }
        }
    }

    pub fn l2_distance_sq(&self, other: &ParamVector) -> Result<f64, LearnError> {
        self.require_same_shape(other)?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.groups.iter().zip(other.groups.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
        }
        Ok(acc)
    }

    pub fn l2_norm(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|(_, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Encodes each group as an array entry, preserving group order.
    pub fn to_payload(&self) -> Payload {
        let mut payload = Payload::new();
        for (name, vals) in &self.groups {
            payload
                .push(name.clone(), Value::Array(vals.clone()))
                .expect("group names are unique and non-empty");
        }
        payload
    }

    /// Inverse of `to_payload`; every entry must be an array.
    pub fn from_payload(payload: &Payload) -> Result<Self, LearnError> {
        let mut groups = Vec::with_capacity(payload.len());
        for (name, value) in payload.entries() {
            match value {
                Value::Array(vals) => groups.push((name.clone(), vals.clone())),
                _ => {
                    return Err(LearnError::Config(format!(
                        "payload entry `{name}` is not an array"
                    )))
                }
            }
        }
        ParamVector::new(groups)
    }
}
