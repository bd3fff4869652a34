//! Hand-written predictors with known behaviour under intervention.

use super::{ModelError, Predictor};
use crate::data::{MARKER_SIZE, N_GLYPHS};

fn check(x: &[f64], rows: usize, dim: usize) -> Result<(), ModelError> {
    if x.len() != rows * dim {
        return Err(ModelError::Shape(format!(
            "expected {rows} x {dim} inputs, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn binary(hit: bool) -> [f64; 2] {
    if hit {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Class 0 with probability 1 iff the image contains a red pixel.
#[derive(Debug, Clone, Copy)]
pub struct ColorOnlyPredictor {
    pub height: usize,
    pub width: usize,
}

impl Predictor for ColorOnlyPredictor {
    fn n_classes(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        3 * self.height * self.width
    }

    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        check(x, rows, self.input_dim())?;
        let plane = self.height * self.width;
        Ok(x.chunks(self.input_dim())
            .flat_map(|img| {
                let red =
                    (0..plane).any(|p| img[p] > 0.5 && img[plane + p] < 0.5 && img[2 * plane + p] < 0.5);
                binary(red)
            })
            .collect())
    }
}

/// Ignores colour: class 0 with probability 1 iff some row is fully lit
/// (a horizontal bar).
#[derive(Debug, Clone, Copy)]
pub struct OrientationPredictor {
    pub height: usize,
    pub width: usize,
}

impl Predictor for OrientationPredictor {
    fn n_classes(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        3 * self.height * self.width
    }

    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        check(x, rows, self.input_dim())?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        Ok(x.chunks(self.input_dim())
            .flat_map(|img| {
                let lit = |p: usize| (0..3).any(|c| img[c * plane + p] > 0.0);
                binary((0..h).any(|y| (0..w).all(|x| lit(y * w + x))))
            })
            .collect())
    }
}

/// Perfect classifier for built-in glyph digits: matches the lit-pixel mask
/// against every glyph at every allowed shift. Colour-invariant.
#[derive(Debug, Clone)]
pub struct GlyphMatcher {
    templates: Vec<(usize, Vec<bool>)>,
}

impl Default for GlyphMatcher {
    fn default() -> Self {
        use crate::data::glyphs_internal::{glyph_intensity, MAX_SHIFT};
        let mut templates = Vec::new();
        for d in 0..N_GLYPHS {
            for dy in -MAX_SHIFT..=MAX_SHIFT {
                for dx in -MAX_SHIFT..=MAX_SHIFT {
                    templates.push((
                        d,
                        glyph_intensity(d, dy, dx).into_iter().map(|v| v > 0.0).collect(),
                    ));
                }
            }
        }
        Self { templates }
    }
}

impl Predictor for GlyphMatcher {
    fn n_classes(&self) -> usize {
        N_GLYPHS
    }

    fn input_dim(&self) -> usize {
        3 * 16 * 16
    }

    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        check(x, rows, self.input_dim())?;
        let plane = 16 * 16;
        let mut out = Vec::with_capacity(rows * N_GLYPHS);
        for img in x.chunks(self.input_dim()) {
            let mask: Vec<bool> = (0..plane)
                .map(|p| (0..3).any(|c| img[c * plane + p] > 0.0))
                .collect();
            let best = self
                .templates
                .iter()
                .min_by_key(|(_, t)| t.iter().zip(&mask).filter(|(a, b)| a != b).count())
                .map(|(d, _)| *d)
                .unwrap();
            let mut p = vec![0.0; N_GLYPHS];
            p[best] = 1.0;
            out.extend(p);
        }
        Ok(out)
    }
}

/// Blanks the top-left marker region before delegating to `inner`.
#[derive(Debug, Clone)]
pub struct MarkerMaskingPredictor<P> {
    pub inner: P,
    pub height: usize,
    pub width: usize,
}

impl<P: Predictor> Predictor for MarkerMaskingPredictor<P> {
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        check(x, rows, self.input_dim())?;
        let (h, w) = (self.height, self.width);
        let mut masked = x.to_vec();
        for img in masked.chunks_mut(self.input_dim()) {
            for c in 0..3 {
                for y in 0..MARKER_SIZE.min(h) {
                    for xx in 0..MARKER_SIZE.min(w) {
                        img[c * h * w + y * w + xx] = 0.0;
                    }
                }
            }
        }
        self.inner.predict_batch(&masked, rows)
    }
}
