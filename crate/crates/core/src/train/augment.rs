use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::tensor::FeatureMap;

/// Random erasing on `[0, 1]` images: with probability `probability`, a
/// rectangle covering a fraction of the image drawn from `area_range`, with
/// height/width ratio drawn from `aspect_range`, is filled with uniform noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomErasing {
    pub probability: f64,
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
}

impl Default for RandomErasing {
    fn default() -> Self {
        Self {
            probability: 0.5,
            area_range: (0.02, 0.4),
            aspect_range: (0.3, 3.3),
        }
    }
}

const MAX_ATTEMPTS: usize = 100;

impl RandomErasing {
    pub fn disabled() -> Self {
        Self {
            probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area_range;
        let (r0, r1) = self.aspect_range;
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(ReidError::InvalidParams(format!(
                "erasing probability {} outside [0, 1]",
                self.probability
            )));
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(ReidError::InvalidParams(format!("empty area range {:?}", self.area_range)));
        }
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(ReidError::InvalidParams(format!("empty aspect range {:?}", self.aspect_range)));
        }
        Ok(())
    }

    /// Returns whether a rectangle was erased.
    pub fn apply(&self, image: &mut FeatureMap<f32>, rng: &mut ChaCha8Rng) -> Result<bool> {
        self.validate()?;
        if rng.random::<f64>() >= self.probability {
            return Ok(false);
        }
        let (h, w, c) = image.dims();
        let area = (h * w) as f64;
        for _ in 0..MAX_ATTEMPTS {
            let target = area * rng.random_range(self.area_range.0..=self.area_range.1);
            let aspect = rng.random_range(self.aspect_range.0..=self.aspect_range.1);
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh > h || ew > w {
                continue;
            }
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            let data = image.data_mut();
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for ch in 0..c {
                        data[[y, x, ch]] = rng.random::<f32>();
                    }
                }
            }
            return Ok(true);
        }
        Ok(false)
    }
}
