//! Flat parameter vectors and binary masks.
//!
//! Every model is flattened into a single `ParameterVector` of length `d`.
//! Masks mark personalized coordinates with `true`; the shared submodel is
//! whatever the complement selects. Everything here is coordinate-wise and
//! allocation-light, so the optimizer, the mask machinery and aggregation can
//! all be written as a handful of calls into this module.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Norms below this are treated as "no direction" by [`cosine_similarity`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|x| x * factor).collect())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Self) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn abs(&self) -> Self {
        Self(self.0.iter().map(|x| x.abs()).collect())
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Index<usize> for ParameterVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParameterVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Binary per-coordinate mask; `true` means personalized.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Builds a mask from 0/1 integers; anything other than 0 or 1 is rejected.
    pub fn from_u8(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::arg(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize) {
        self.0[i] = true;
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }

    /// True when every bit set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// `a ∘ mask`: keeps coordinates where the mask is set, zeroes the rest.
pub fn elementwise_mul(a: &ParameterVector, mask: &Mask) -> Result<ParameterVector> {
    check_len(a.len(), mask.len())?;
    Ok(ParameterVector(
        a.0.iter()
            .zip(&mask.0)
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect(),
    ))
}

pub fn mask_complement(m: &Mask) -> Mask {
    Mask(m.0.iter().map(|&b| !b).collect())
}

/// Coordinate-wise OR of a nonempty list of equal-length masks.
pub fn mask_union<'a, I>(masks: I) -> Result<Mask>
where
    I: IntoIterator<Item = &'a Mask>,
{
    let mut iter = masks.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::arg("mask_union needs at least one mask"))?;
    let mut out = first.clone();
    for m in iter {
        check_len(out.len(), m.len())?;
        for (o, &b) in out.0.iter_mut().zip(&m.0) {
            *o |= b;
        }
    }
    Ok(out)
}

/// Result of [`cosine_similarity`]. `degenerate` is set when either input has
/// (numerically) zero norm, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &ParameterVector, b: &ParameterVector) -> Result<Cosine> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < NORM_EPS || nb < NORM_EPS {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Indices of the `k` largest entries, returned in descending-value order.
/// Ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::arg(format!(
            "top-k with k={k} exceeds length {}",
            values.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("top-k over NaN magnitudes".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // total_cmp is a total order, so the stable sort leaves equal values in
    // ascending index order.
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::from_vec(v.to_vec())
    }

    fn mk(v: &[u8]) -> Mask {
        Mask::from_u8(v).unwrap()
    }

    #[test]
    fn masking_examples() {
        assert_eq!(elementwise_mul(&pv(&[1., 2., 3.]), &mk(&[0, 1, 0])).unwrap(), pv(&[0., 2., 0.]));
        assert_eq!(elementwise_mul(&pv(&[5., 5.]), &mk(&[1, 1])).unwrap(), pv(&[5., 5.]));
        assert_eq!(elementwise_mul(&pv(&[5., 5.]), &mk(&[0, 0])).unwrap(), pv(&[0., 0.]));
        assert!(matches!(
            elementwise_mul(&pv(&[1.0]), &mk(&[1, 0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn complement_examples() {
        assert_eq!(mask_complement(&mk(&[0, 1, 1])), mk(&[1, 0, 0]));
        assert_eq!(mask_complement(&Mask::zeros(4)), Mask::ones(4));
        let m = mk(&[1, 0, 1, 1, 0]);
        assert_eq!(mask_complement(&mask_complement(&m)), m);
    }

    #[test]
    fn union_examples() {
        assert_eq!(mask_union(&[mk(&[1, 0]), mk(&[0, 1])]).unwrap(), mk(&[1, 1]));
        assert_eq!(mask_union(&[mk(&[1, 0]), mk(&[1, 0])]).unwrap(), mk(&[1, 0]));
        assert_eq!(
            mask_union(&[mk(&[0, 0]), mk(&[0, 0]), mk(&[0, 1])]).unwrap(),
            mk(&[0, 1])
        );
        let empty: Vec<Mask> = vec![];
        assert!(matches!(mask_union(&empty), Err(Error::Argument(_))));
        assert!(mask_union(&[mk(&[0, 0]), mk(&[1])]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let c = |a: &[f64], b: &[f64]| cosine_similarity(&pv(a), &pv(b)).unwrap();
        assert_eq!(c(&[1., 0.], &[1., 0.]).value, 1.0);
        assert_eq!(c(&[1., 0.], &[-1., 0.]).value, -1.0);
        assert_eq!(c(&[1., 0.], &[0., 1.]).value, 0.0);
        let z = c(&[0., 0.], &[1., 0.]);
        assert!(z.degenerate);
        assert_eq!(z.value, 0.0);
        assert!(c(&[1e-13, 0.], &[1., 0.]).degenerate);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5, 0.2], 1).unwrap(), vec![1]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        let mut all = top_k_indices(&[0.1, 0.9, 0.5, 0.2], 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(top_k_indices(&[0.1, 0.2], 3).is_err());
        assert!(top_k_indices(&[0.0; 5], 0).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn masked_parts_reassemble_exactly(
            pairs in prop::collection::vec((-1e6f64..1e6, any::<bool>()), 1..64)
        ) {
            let a = ParameterVector::from_vec(pairs.iter().map(|p| p.0).collect());
            let m = Mask::from_bits(pairs.iter().map(|p| p.1).collect());
            let kept = elementwise_mul(&a, &m).unwrap();
            let rest = elementwise_mul(&a, &mask_complement(&m)).unwrap();
            prop_assert_eq!(kept.add(&rest).unwrap(), a);
        }

        #[test]
        fn union_dominates_members(
            masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 1..6)
        ) {
            let masks: Vec<Mask> = masks.into_iter().map(Mask::from_bits).collect();
            let u = mask_union(&masks).unwrap();
            let max_pop = masks.iter().map(Mask::popcount).max().unwrap();
            prop_assert!(u.popcount() >= max_pop);
            for m in &masks {
                prop_assert!(m.is_subset_of(&u));
            }
            let mut reversed = masks.clone();
            reversed.reverse();
            prop_assert_eq!(mask_union(&reversed).unwrap(), u.clone());
            prop_assert_eq!(mask_union(&[u.clone(), u.clone()]).unwrap(), u);
        }

        #[test]
        fn self_cosine_is_one(v in prop::collection::vec(-1e3f64..1e3, 1..32)) {
            let a = ParameterVector::from_vec(v);
            prop_assume!(a.norm() > 1e-6);
            let c = cosine_similarity(&a, &a).unwrap();
            prop_assert!((c.value - 1.0).abs() < 1e-12);
        }

        #[test]
        fn top_k_matches_stable_ranking(
            v in prop::collection::vec(0u8..6, 1..40),
            k_frac in 0.0f64..=1.0,
        ) {
            // Small integer magnitudes force plenty of ties.
            let vals: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let k = ((vals.len() as f64) * k_frac) as usize;
            let got = top_k_indices(&vals, k).unwrap();
            // brute force: i beats j iff larger value, or equal value and lower index
            let mut expect: Vec<usize> = (0..vals.len())
                .filter(|&i| {
                    let better = (0..vals.len())
                        .filter(|&j| vals[j] > vals[i] || (vals[j] == vals[i] && j < i))
                        .count();
                    better < k
                })
                .collect();
            let mut got_sorted = got.clone();
            got_sorted.sort();
            expect.sort();
            prop_assert_eq!(got_sorted, expect);
            prop_assert_eq!(top_k_indices(&vals, k).unwrap(), got);
        }
    }
}
