//! Sparse multivariate polynomials used as rate-field components.
//!
//! Rates are kept in coefficient form (not opaque callables) so that
//! Jacobians, gradients at the origin, and lattice detailed-balance ratios
//! can be evaluated exactly.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A single term `coeff * x_1^{e_1} * ... * x_d^{e_d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub exps: Vec<u32>,
}

impl Serialize for Monomial {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        // Coefficients round-trip through their shortest decimal form, which
        // Rust's float formatter guarantees to parse back bit-exactly.
        #[derive(Serialize)]
        struct Repr<'a> {
            coeff: String,
            exps: &'a [u32],
        }
        Repr {
            coeff: format!("{}", self.coeff),
            exps: &self.exps,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Monomial {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Coeff {
            Text(String),
            Number(f64),
        }
        #[derive(Deserialize)]
        struct Repr {
            coeff: Coeff,
            exps: Vec<u32>,
        }
        let repr = Repr::deserialize(de)?;
        let coeff = match repr.coeff {
            Coeff::Text(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|e| D::Error::custom(format!("bad coefficient {s:?}: {e}")))?,
            Coeff::Number(v) => v,
        };
        Ok(Monomial {
            coeff,
            exps: repr.exps,
        })
    }
}

/// Polynomial in `d` variables as a list of monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Polynomial { terms }
    }

    pub fn zero() -> Self {
        Polynomial { terms: Vec::new() }
    }

    /// Single term `coeff * x_i` in `d` variables.
    pub fn linear(d: usize, i: usize, coeff: f64) -> Self {
        let mut exps = vec![0; d];
        exps[i] = 1;
        Polynomial {
            terms: vec![Monomial { coeff, exps }],
        }
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn push(&mut self, coeff: f64, exps: Vec<u32>) {
        self.terms.push(Monomial { coeff, exps });
    }

    /// Every term must carry exactly `d` exponents.
    pub fn dimension_ok(&self, d: usize) -> bool {
        self.terms.iter().all(|t| t.exps.len() == d)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            let mut m = t.coeff;
            for (xi, &e) in x.iter().zip(&t.exps) {
                match e {
                    0 => {}
                    1 => m *= xi,
                    2 => m *= xi * xi,
                    _ => m *= xi.powi(e as i32),
                }
            }
            acc += m;
        }
        acc
    }

    /// Exact partial derivative with respect to variable `i`.
    pub fn partial(&self, i: usize) -> Polynomial {
        let mut terms = Vec::new();
        for t in &self.terms {
            let e = t.exps[i];
            if e == 0 {
                continue;
            }
            let mut exps = t.exps.clone();
            exps[i] = e - 1;
            terms.push(Monomial {
                coeff: t.coeff * f64::from(e),
                exps,
            });
        }
        Polynomial { terms }
    }

    /// Coefficient of the pure `x_i` monomial, i.e. `∂/∂x_i` at the origin.
    pub fn gradient_entry_at_zero(&self, i: usize) -> f64 {
        self.terms
            .iter()
            .filter(|t| {
                t.exps
                    .iter()
                    .enumerate()
                    .all(|(j, &e)| if j == i { e == 1 } else { e == 0 })
            })
            .map(|t| t.coeff)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(terms: &[(f64, &[u32])]) -> Polynomial {
        Polynomial::new(
            terms
                .iter()
                .map(|(c, e)| Monomial {
                    coeff: *c,
                    exps: e.to_vec(),
                })
                .collect(),
        )
    }

    #[test]
    fn eval_matches_hand_expansion() {
        // 2x + 3xy^2 at (2, 0.5)
        let p = poly(&[(2.0, &[1, 0]), (3.0, &[1, 2])]);
        assert_eq!(p.eval(&[2.0, 0.5]), 4.0 + 3.0 * 2.0 * 0.25);
    }

    #[test]
    fn partial_derivative_is_exact() {
        // d/dy (3xy^2) = 6xy
        let p = poly(&[(3.0, &[1, 2])]);
        let dy = p.partial(1);
        assert_eq!(dy.eval(&[2.0, 0.5]), 6.0 * 2.0 * 0.5);
        assert!(p.partial(0).eval(&[7.0, 2.0]) == 3.0 * 4.0);
    }

    #[test]
    fn gradient_at_zero_picks_linear_coefficient() {
        let p = poly(&[(2.0, &[1, 0]), (5.0, &[1, 1]), (7.0, &[0, 1])]);
        assert_eq!(p.gradient_entry_at_zero(0), 2.0);
        assert_eq!(p.gradient_entry_at_zero(1), 7.0);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let p = poly(&[(0.1 + 0.2, &[3, 1]), (-1.0 / 3.0, &[0, 0])]);
        let text = serde_json::to_string(&p).unwrap();
        let back: Polynomial = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        // coefficients must be serialized as decimal strings
        assert!(text.contains("\"coeff\":\""));
    }

    #[test]
    fn numeric_coefficients_accepted_on_input() {
        let p: Polynomial = serde_json::from_str(r#"[{"coeff": 2.5, "exps": [1]}]"#).unwrap();
        assert_eq!(p.eval(&[2.0]), 5.0);
    }
}
