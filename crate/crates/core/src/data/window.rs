use crate::error::{Error, Result};

/// A CT display window: `wl` is the centre and `ww` the width, both in HU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub wl: f64,
    pub ww: f64,
}

impl Default for WindowSpec {
    /// A conventional abdominal liver window.
    fn default() -> Self {
        WindowSpec {
            wl: 60.0,
            ww: 200.0,
        }
    }
}

impl WindowSpec {
    pub fn new(wl: f64, ww: f64) -> Result<Self> {
        let spec = WindowSpec { wl, ww };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ww > 0.0) || !self.ww.is_finite() || !self.wl.is_finite() {
            return Err(Error::Config(format!(
                "window width must be positive and finite (wl {}, ww {})",
                self.wl, self.ww
            )));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.wl - self.ww / 2.0
    }

    /// Maps one HU value into `[0, 1]`, saturating outside the window.
    pub fn apply(&self, hu: f64) -> f64 {
        ((hu - self.lower()) / self.ww).clamp(0.0, 1.0)
    }
}

pub fn hu_window(image: &[i16], spec: WindowSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(image.iter().map(|&hu| spec.apply(hu as f64)).collect())
}
