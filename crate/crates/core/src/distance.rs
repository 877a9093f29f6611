use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dissimilarity used for clustering, scoring and entropy ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L1,
    #[default]
    L2,
    /// `1 - cos(f, g)`; zero vectors are rejected.
    Cosine,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Data(format!(
                "distance between vectors of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        Ok(match self {
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Distance::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::ZeroVector);
                }
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Distance::L1 => "l1",
            Distance::L2 => "l2",
            Distance::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            "cosine" | "cos" => Ok(Distance::Cosine),
            other => Err(Error::Config(format!("unknown distance {other:?}"))),
        }
    }
}

/// Arithmetic mean of equally sized vectors, accumulated in input order.
pub fn mean_vector<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut iter = points.into_iter();
    let first = iter.next()?;
    let mut acc = first.to_vec();
    let mut n = 1usize;
    for p in iter {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
        n += 1;
    }
    let inv = n as f64;
    acc.iter_mut().for_each(|a| *a /= inv);
    Some(acc)
}
