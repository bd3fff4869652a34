use rand::Rng;

use super::{record_rng, DataError, Dataset};
use crate::autodiff::Tensor;

/// Side of the white square painted in the top-left corner.
pub const MARKER_SIZE: usize = 2;

pub(crate) fn paint_marker(pixels: &mut Tensor) {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let data = pixels.data_mut();
    for c in 0..3 {
        for y in 0..MARKER_SIZE.min(h) {
            for x in 0..MARKER_SIZE.min(w) {
                data[c * h * w + y * w + x] = 1.0;
            }
        }
    }
}

fn marker_region_is_clear(pixels: &Tensor) -> bool {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let data = pixels.data();
    (0..3).all(|c| {
        (0..MARKER_SIZE.min(h)).all(|y| (0..MARKER_SIZE.min(w)).all(|x| data[c * h * w + y * w + x] == 0.0))
    })
}

/// Add an independent binary concept: each record gets the corner marker
/// with probability `p`, drawn from its own `(seed, index)` stream.
pub fn add_dummy_concept(dataset: &Dataset, p: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::Config(format!(
            "marker probability {p} is not a probability"
        )));
    }
    if dataset.provenance.dummy.is_some() {
        return Err(DataError::Config(
            "dataset already carries a dummy concept".into(),
        ));
    }
    let mut out = dataset.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        if !marker_region_is_clear(&r.pixels) {
            return Err(DataError::Config(format!(
                "record {i} has foreground inside the marker region"
            )));
        }
        let present = record_rng(seed, i as u64).random::<f64>() < p;
        r.marker = Some(present);
        if present {
            paint_marker(&mut r.pixels);
        }
    }
    out.provenance.dummy = Some((p, seed));
    Ok(out)
}
