//! Sparse multivariate polynomials with a graded-lexicographic monomial order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::qcqp::QuadraticForm;

/// A monomial as the sorted multiset of its variable indices, so `y_3^2 y_5`
/// is `[3, 3, 5]` and the constant monomial is `[]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(Vec::new())
    }

    pub fn var(i: usize) -> Self {
        Monomial(vec![i as u32])
    }

    pub fn from_vars(vars: &[usize]) -> Self {
        let mut v: Vec<u32> = vars.iter().map(|&i| i as u32).collect();
        v.sort_unstable();
        Monomial(v)
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    /// Variable indices with multiplicity, ascending.
    pub fn factors(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&i| i as usize)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut v = Vec::with_capacity(self.0.len() + other.0.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            if self.0[i] <= other.0[j] {
                v.push(self.0[i]);
                i += 1;
            } else {
                v.push(other.0[j]);
                j += 1;
            }
        }
        v.extend_from_slice(&self.0[i..]);
        v.extend_from_slice(&other.0[j..]);
        Monomial(v)
    }

    pub fn evaluate(&self, y: &[f64]) -> f64 {
        self.0.iter().map(|&i| y[i as usize]).product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .len()
            .cmp(&other.0.len())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Poly {
    pub terms: BTreeMap<Monomial, f64>,
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Self::zero();
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let e = self.terms.entry(m).or_insert(0.0);
        *e += c;
    }

    pub fn from_form(form: &QuadraticForm) -> Self {
        let mut p = Poly::constant(form.constant);
        for (i, v) in form.linear_terms() {
            p.add_term(Monomial::var(i), v);
        }
        for ((i, j), v) in form.quadratic_terms() {
            p.add_term(Monomial::from_vars(&[i, j]), v);
        }
        p
    }

    pub fn add_scaled(&mut self, other: &Poly, s: f64) {
        for (m, c) in &other.terms {
            self.add_term(m.clone(), s * c);
        }
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                out.add_term(a.mul(b), ca * cb);
            }
        }
        out
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn evaluate(&self, y: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.evaluate(y)).sum()
    }

    /// The polynomial in `z` obtained by substituting `y_i = shift_i + scale_i z_i`.
    pub fn substitute(&self, shift: &[f64], scale: &[f64]) -> Poly {
        let mut out = Poly::zero();
        for (m, &c) in &self.terms {
            let mut term = Poly::constant(c);
            for v in m.factors() {
                let mut lin = Poly::constant(shift[v]);
                lin.add_term(Monomial::var(v), scale[v]);
                term = term.mul(&lin);
            }
            out.add_scaled(&term, 1.0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_lex_order() {
        let mut v = vec![
            Monomial::from_vars(&[1, 1]),
            Monomial::var(2),
            Monomial::one(),
            Monomial::from_vars(&[0, 2]),
            Monomial::var(0),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                Monomial::one(),
                Monomial::var(0),
                Monomial::var(2),
                Monomial::from_vars(&[0, 2]),
                Monomial::from_vars(&[1, 1]),
            ]
        );
    }

    #[test]
    fn product_matches_pointwise_evaluation() {
        let mut a = Poly::constant(1.0);
        a.add_term(Monomial::var(0), 2.0);
        a.add_term(Monomial::from_vars(&[0, 1]), -1.5);
        let mut b = Poly::constant(-0.5);
        b.add_term(Monomial::var(1), 3.0);
        let y = [0.3, -1.7];
        let direct = a.evaluate(&y) * b.evaluate(&y);
        assert!((a.mul(&b).evaluate(&y) - direct).abs() < 1e-14);
        assert_eq!(a.mul(&b).degree(), 3);
    }

    #[test]
    fn substitution_matches_direct_evaluation() {
        let mut p = Poly::constant(0.5);
        p.add_term(Monomial::from_vars(&[0, 1]), 2.0);
        p.add_term(Monomial::from_vars(&[1, 1]), -1.0);
        p.add_term(Monomial::var(0), 3.0);
        let (shift, scale) = ([1.5, -2.0], [4.0, 0.5]);
        let z = [0.3, -0.8];
        let y = [shift[0] + scale[0] * z[0], shift[1] + scale[1] * z[1]];
        let q = p.substitute(&shift, &scale);
        assert!((q.evaluate(&z) - p.evaluate(&y)).abs() < 1e-13);
    }
}
