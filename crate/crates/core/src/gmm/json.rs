//! JSON form: `{dim, components: [{weight, mean, cov: {type: "iso"|"dense", value}}]}`.

use nalgebra::{DMatrix, DVector};
use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::mixture::{Covariance, GaussianMixture};
use crate::scalar::Real;

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct MixtureRepr<T> {
    dim: usize,
    components: Vec<ComponentRepr<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct ComponentRepr<T> {
    weight: T,
    mean: Vec<T>,
    cov: CovRepr<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
enum CovRepr<T> {
    Iso(T),
    Dense(Vec<Vec<T>>),
}

impl<T: Real + Serialize> Serialize for GaussianMixture<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let components = self
            .components()
            .iter()
            .map(|c| ComponentRepr {
                weight: c.weight(),
                mean: c.mean().iter().copied().collect(),
                cov: match c.covariance() {
                    Covariance::Iso(v) => CovRepr::Iso(*v),
                    Covariance::Dense(m) => {
                        CovRepr::Dense(m.row_iter().map(|r| r.iter().copied().collect()).collect())
                    }
                },
            })
            .collect();
        MixtureRepr {
            dim: self.dim(),
            components,
        }
        .serialize(s)
    }
}

impl<'de, T: Real + DeserializeOwned> Deserialize<'de> for GaussianMixture<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MixtureRepr::<T>::deserialize(d)?;
        let dim = repr.dim;
        let mut parts = Vec::with_capacity(repr.components.len());
        for c in repr.components {
            if c.mean.len() != dim {
                return Err(D::Error::custom(format!(
                    "mean has length {}, expected {dim}",
                    c.mean.len()
                )));
            }
            let cov = match c.cov {
                CovRepr::Iso(v) => Covariance::Iso(v),
                CovRepr::Dense(rows) => {
                    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                        return Err(D::Error::custom(format!(
                            "dense covariance must be {dim}x{dim}"
                        )));
                    }
                    Covariance::Dense(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
                }
            };
            parts.push((c.weight, DVector::from_vec(c.mean), cov));
        }
        GaussianMixture::new(parts).map_err(D::Error::custom)
    }
}
