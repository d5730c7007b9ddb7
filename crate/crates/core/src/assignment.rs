//! Output-grid to instance-image mapping and per-location training targets.

use crate::error::{Error, Result};
use crate::geometry::{centerness, encode_targets, BBox, Ltrb, Point};
use crate::scalar::Scalar;

/// Geometry of a network output grid over the instance crop.
///
/// Grid cell `(x, y)` maps to the instance pixel
/// `(offset + stride * x, offset + stride * y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub instance_size: usize,
    pub offset: usize,
}

impl GridSpec {
    /// Grid with the FCOS-style mapping `X = floor(s/2) + s*x`.
    pub fn new(stride: usize, width: usize, height: usize, instance_size: usize) -> Result<Self> {
        Self::with_offset(stride, width, height, instance_size, stride / 2)
    }

    /// Grid whose cells are centred on the instance crop, which is where
    /// the receptive fields of a valid cross-correlation land.
    pub fn centered(stride: usize, width: usize, height: usize, instance_size: usize) -> Result<Self> {
        let span = stride * (width.max(height).saturating_sub(1));
        if span >= instance_size {
            return Err(Error::Config(format!(
                "grid {width}x{height} at stride {stride} does not fit a {instance_size}px instance"
            )));
        }
        Self::with_offset(stride, width, height, instance_size, (instance_size - 1 - span) / 2)
    }

    pub fn with_offset(
        stride: usize,
        width: usize,
        height: usize,
        instance_size: usize,
        offset: usize,
    ) -> Result<Self> {
        let spec = Self { stride, width, height, instance_size, offset };
        if stride == 0 || width == 0 || height == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        let last = offset + stride * (width.max(height) - 1);
        if last >= instance_size {
            return Err(Error::Config(format!(
                "grid point {last} falls outside the {instance_size}px instance"
            )));
        }
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Instance-image point of grid cell `(x, y)`.
    ///
    /// Panics if the index is outside the grid.
    pub fn grid_to_image<T: Scalar>(&self, x: usize, y: usize) -> Point<T> {
        assert!(
            x < self.width && y < self.height,
            "grid index ({x}, {y}) outside {}x{}",
            self.width,
            self.height
        );
        Point::new(
            T::lit((self.offset + self.stride * x) as f64),
            T::lit((self.offset + self.stride * y) as f64),
        )
    }
}

/// Per-location targets for one training pair. Maps are row-major `H x W`;
/// `reg` holds four planes `[l, t, r, b]`, each `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaps<T> {
    pub width: usize,
    pub height: usize,
    pub cls: Vec<T>,
    pub cen: Vec<T>,
    pub reg: Vec<T>,
}

impl<T: Scalar> LabelMaps<T> {
    pub fn num_positives(&self) -> usize {
        self.cls.iter().filter(|&&c| c > T::zero()).count()
    }

    pub fn is_positive(&self, x: usize, y: usize) -> bool {
        self.cls[y * self.width + x] > T::zero()
    }

    pub fn regression_at(&self, x: usize, y: usize) -> Ltrb<T> {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        Ltrb::new(self.reg[i], self.reg[plane + i], self.reg[2 * plane + i], self.reg[3 * plane + i])
    }
}

/// Assigns every grid location whose image point lies strictly inside `gt`
/// as positive, with its LTRB target and centerness.
///
/// Negative locations get `cls = 0`, `cen = 0`, and a placeholder regression
/// of all ones (never supervised). Returns [`Error::ZeroPositives`] when no
/// location falls inside the box.
pub fn assign_labels<T: Scalar>(gt: &BBox<T>, spec: &GridSpec) -> Result<LabelMaps<T>> {
    let (w, h) = (spec.width, spec.height);
    let plane = w * h;
    let mut maps = LabelMaps {
        width: w,
        height: h,
        cls: vec![T::zero(); plane],
        cen: vec![T::zero(); plane],
        reg: vec![T::one(); 4 * plane],
    };
    let mut positives = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = spec.grid_to_image::<T>(x, y);
            if let Ok(v) = encode_targets(p, gt) {
                let i = y * w + x;
                maps.cls[i] = T::one();
                maps.cen[i] = centerness(&v);
                for (k, c) in v.as_array().into_iter().enumerate() {
                    maps.reg[k * plane + i] = c;
                }
                positives += 1;
            }
        }
    }
    if positives == 0 {
        return Err(Error::ZeroPositives);
    }
    Ok(maps)
}
