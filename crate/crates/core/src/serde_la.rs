//! Plain-array JSON forms for vectors and matrices: `[1, 2, 3]` for vectors
//! and a list of rows for matrices.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{GainVec, Matrix, StateVec};

pub mod column {
    use super::*;

    pub fn serialize<S: Serializer>(v: &StateVec, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<StateVec, D::Error> {
        Ok(StateVec::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod row {
    use super::*;

    pub fn serialize<S: Serializer>(v: &GainVec, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GainVec, D::Error> {
        Ok(GainVec::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom(
                "matrix rows have different lengths",
            ));
        }
        Ok(Matrix::from_row_iterator(
            rows.len(),
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}
