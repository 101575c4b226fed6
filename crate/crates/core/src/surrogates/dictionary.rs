use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Monomials up to a total degree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub max_degree: usize,
    #[serde(default = "yes")]
    pub include_constant: bool,
}

fn yes() -> bool {
    true
}

impl DictionarySpec {
    pub fn new(max_degree: usize) -> Self {
        Self {
            max_degree,
            include_constant: true,
        }
    }
}

/// Evaluation plan for a monomial dictionary in `q` variables: each monomial
/// is a lower-degree one times a single coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Monomials {
    q: usize,
    spec: DictionarySpec,
    exponents: Vec<Vec<u32>>,
    // (parent index into the full list, variable); constant has none
    recipe: Vec<Option<(usize, usize)>>,
    offset: usize,
}

/// Exponent vectors of total degree `d` in `q` variables, first variable
/// varying slowest with the highest power first.
fn exponents_of_degree(q: usize, d: u32) -> Vec<Vec<u32>> {
    if q == 1 {
        return vec![vec![d]];
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for mut rest in exponents_of_degree(q - 1, d - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl Monomials {
    pub fn new(q: usize, spec: &DictionarySpec) -> Self {
        assert!(q >= 1, "dictionary over zero variables");
        let mut exponents = Vec::new();
        for d in 0..=spec.max_degree as u32 {
            exponents.extend(exponents_of_degree(q, d));
        }
        let index: HashMap<Vec<u32>, usize> =
            exponents.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let recipe = exponents
            .iter()
            .map(|e| {
                let v = e.iter().position(|&x| x > 0)?;
                let mut parent = e.clone();
                parent[v] -= 1;
                Some((index[&parent], v))
            })
            .collect();
        Self {
            q,
            spec: spec.clone(),
            exponents,
            recipe,
            offset: usize::from(!spec.include_constant),
        }
    }

    pub fn spec(&self) -> &DictionarySpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.q
    }

    /// Number of features `k`.
    pub fn len(&self) -> usize {
        self.exponents.len() - self.offset
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exponent vector of feature `i`.
    pub fn exponent(&self, i: usize) -> &[u32] {
        &self.exponents[i + self.offset]
    }

    /// Feature positions of `z_1, ..., z_q`.
    pub fn linear_indices(&self) -> Vec<usize> {
        (0..self.q).map(|i| 1 + i - self.offset).collect()
    }

    /// Writes all features of `z` into `out` (length [`len`](Self::len)).
    /// `buf` must hold `len() + offset` entries.
    pub fn eval_into(&self, z: &[f64], buf: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.q);
        for (i, r) in self.recipe.iter().enumerate() {
            buf[i] = match *r {
                None => 1.0,
                Some((parent, v)) => buf[parent] * z[v],
            };
        }
        out.copy_from_slice(&buf[self.offset..]);
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; self.exponents.len()];
        let mut out = vec![0.0; self.len()];
        self.eval_into(z, &mut buf, &mut out);
        out
    }

    pub(crate) fn buffer_len(&self) -> usize {
        self.exponents.len()
    }
}

/// Features of `z` (convenience wrapper around [`Monomials`]).
pub fn monomial_features(z: &[f64], spec: &DictionarySpec) -> Vec<f64> {
    Monomials::new(z.len(), spec).eval(z)
}
