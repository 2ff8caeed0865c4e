use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateQuery {
    TargetAccuracy(f64),
    TargetFilters(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    /// Filter count on the line, rounded to the nearest integer (`raw` is unrounded).
    Filters { filters: i64, raw: f64 },
    Accuracy { accuracy: f64 },
}

/// Linear inter/extrapolation on the (filter count, accuracy) line through
/// two points `(filters, accuracy)`.
pub fn estimate_linear(a: (usize, f64), b: (usize, f64), query: EstimateQuery) -> Result<Estimate> {
    let (fa, aa) = (a.0 as f64, a.1);
    let (fb, ab) = (b.0 as f64, b.1);
    match query {
        EstimateQuery::TargetAccuracy(t) => {
            if aa == ab {
                return Err(Error::NonInformativePair(format!(
                    "both nodes have accuracy {aa}; cannot solve for filters"
                )));
            }
            let raw = fb + (fa - fb) * (t - ab) / (aa - ab);
            Ok(Estimate::Filters {
                filters: raw.round() as i64,
                raw,
            })
        }
        EstimateQuery::TargetFilters(t) => {
            if a.0 == b.0 {
                return Err(Error::NonInformativePair(format!(
                    "both nodes have {} filters; cannot solve for accuracy",
                    a.0
                )));
            }
            let accuracy = ab + (aa - ab) * (t as f64 - fb) / (fa - fb);
            Ok(Estimate::Accuracy { accuracy })
        }
    }
}
