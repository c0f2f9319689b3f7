use ndarray::Array2;

use super::{MapError, RelevanceMap};
use crate::tensor_io::Tensor;

pub fn map_to_tensor(map: &RelevanceMap) -> Tensor {
    Tensor {
        shape: vec![map.values.nrows(), map.values.ncols()],
        data: map.values.iter().map(|&v| v as f32).collect(),
    }
}

pub fn map_from_tensor(t: &Tensor) -> Result<RelevanceMap, MapError> {
    let &[rows, cols] = t.shape.as_slice() else {
        return Err(MapError::TokenCount {
            tokens: t.data.len(),
            rows: 0,
            cols: 0,
        });
    };
    let values =
        Array2::from_shape_vec((rows, cols), t.data.iter().map(|&v| f64::from(v)).collect())
            .map_err(|_| MapError::TokenCount {
                tokens: t.data.len(),
                rows,
                cols,
            })?;
    let normalized = values.iter().all(|v| (0.0..=1.0).contains(v));
    Ok(RelevanceMap {
        values,
        normalized,
        provenance: Default::default(),
    })
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples). Values are clamped to `[0, 1]`.
pub fn render_pgm(map: &RelevanceMap) -> Vec<u8> {
    let (rows, cols) = map.values.dim();
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(rows * cols * 2);
    for &v in &map.values {
        let level = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}
