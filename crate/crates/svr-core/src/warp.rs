//! Column-consistent shift-and-warp retargeting: a fused mask becomes a
//! per-column importance profile, the profile becomes an exact monotone
//! source-to-target column mapping, and frames are warped by sampling each
//! target column at its mapped source position.

use crate::error::{Error, Result};
use crate::saliency::FusedMask;
use crate::tensor::{Scalar, Tape, Tensor};

/// Minimum per-column width: keeps the mapping strictly increasing and
/// therefore invertible even when the importance profile has zeros.
pub const MIN_COLUMN_WIDTH: f64 = 1e-3;

/// Weights of the importance profile and the retargeting ratio.
#[derive(Debug, Clone, Copy)]
pub struct ShiftParams {
    /// Weight of the per-column saliency term.
    pub alpha: f64,
    /// Weight of the global mean term (retention floor for plain columns).
    pub beta: f64,
    /// Target width over source width.
    pub target_ratio: f64,
}

impl ShiftParams {
    pub fn new(alpha: f64, beta: f64, target_ratio: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || (alpha == 0.0 && beta == 0.0) {
            return Err(Error::contract(format!(
                "shift weights must be non-negative and not both zero, got {alpha}/{beta}"
            )));
        }
        if !(target_ratio > 0.0) {
            return Err(Error::contract(format!(
                "target ratio must be positive, got {target_ratio}"
            )));
        }
        Ok(ShiftParams {
            alpha,
            beta,
            target_ratio,
        })
    }
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            alpha: 1.9,
            beta: 1.0,
            target_ratio: 1.0,
        }
    }
}

/// Monotone piecewise-linear correspondence between source and target column
/// coordinates. `tgt[x]` is the target coordinate of source boundary `x`, so
/// `tgt[x+1] - tgt[x]` is the width column `x` occupies after retargeting.
#[derive(Debug, Clone)]
pub struct ColumnMapping {
    source_width: usize,
    target_width: usize,
    tgt: Vec<f64>,
}

impl ColumnMapping {
    pub fn identity(width: usize) -> Self {
        ColumnMapping {
            source_width: width,
            target_width: width,
            tgt: (0..=width).map(|x| x as f64).collect(),
        }
    }

    /// Rebuild a mapping from serialized boundary coordinates.
    pub fn from_boundaries(tgt: Vec<f64>, target_width: usize) -> Result<Self> {
        if tgt.len() < 2 {
            return Err(Error::contract("mapping needs at least two boundaries"));
        }
        if tgt[0] != 0.0 {
            return Err(Error::contract("mapping must start at coordinate 0"));
        }
        if tgt.iter().any(|v| !v.is_finite()) || tgt.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract(
                "mapping boundaries must be finite and strictly increasing",
            ));
        }
        if target_width < 1 {
            return Err(Error::contract("target width must be at least 1"));
        }
        Ok(ColumnMapping {
            source_width: tgt.len() - 1,
            target_width,
            tgt,
        })
    }

    pub fn source_width(&self) -> usize {
        self.source_width
    }

    pub fn target_width(&self) -> usize {
        self.target_width
    }

    /// Boundary coordinates, length `source_width + 1`.
    pub fn tgt(&self) -> &[f64] {
        &self.tgt
    }

    /// Width assigned to source column `x`.
    pub fn column_width(&self, x: usize) -> f64 {
        self.tgt[x + 1] - self.tgt[x]
    }

    /// Evaluate the mapping at a continuous source coordinate (clamped to
    /// `[0, W]`).
    pub fn forward(&self, x: f64) -> f64 {
        let w = self.source_width;
        let x = x.clamp(0.0, w as f64);
        let i = (x.floor() as usize).min(w - 1);
        self.tgt[i] + (x - i as f64) * self.column_width(i)
    }

    /// Evaluate the inverse mapping at a continuous target coordinate
    /// (clamped to `[0, W']`). Well-defined because every column width is
    /// at least [`MIN_COLUMN_WIDTH`].
    pub fn inverse(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, self.tgt[self.source_width]);
        // Binary search the boundary array for the containing segment.
        let mut lo = 0usize;
        let mut hi = self.source_width;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.tgt[mid] <= v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo as f64 + (v - self.tgt[lo]) / self.column_width(lo)
    }
}

/// Per-target-column sampling shift: target column `u` reads the source at
/// pixel coordinate `u + shifts[u]`, identically for every row.
#[derive(Debug, Clone)]
pub struct ShiftMap {
    shifts: Vec<f64>,
}

impl ShiftMap {
    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn target_width(&self) -> usize {
        self.shifts.len()
    }

    /// Absolute source coordinate sampled by target column `u`.
    pub fn source_coord(&self, u: usize) -> f64 {
        u as f64 + self.shifts[u]
    }

    /// Debug export: one shift per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.shifts {
            s.push_str(&format!("{v}\n"));
        }
        s
    }
}

/// Per-column importance profile of a fused mask.
///
/// The column mean is realized as a fixed all-ones `(H, 1)` convolution
/// (normalized by H) so the result is constant along each column by
/// construction; the global mean is added back as a retention floor:
/// `R[x] = alpha * colmean(mask)[x] + beta * mean(mask)`.
pub fn raw_shift_field(mask: &FusedMask, params: &ShiftParams) -> Result<Vec<f64>> {
    let (h, w) = (mask.height(), mask.width());
    let tape = Tape::<f32>::disabled();
    let img = Tensor::new(&[1, h, w], mask.values().data().to_vec())?;
    let kernel = Tensor::full(&[1, 1, h, 1], 1.0 / h as f32)?;
    let bias = Tensor::zeros(&[1])?;
    let s1 = tape.conv2d(&img, &kernel, &bias, 0, 1)?; // [1, 1, W]
    let s2 = s1.data().iter().map(|&v| v as f64).sum::<f64>() / w as f64;
    Ok(s1
        .data()
        .iter()
        .map(|&v| params.alpha * v as f64 + params.beta * s2)
        .collect())
}

/// Turn an importance profile into an exact [`ColumnMapping`] onto
/// `target_width` columns.
///
/// Widths are proportional to importance (uniform when the profile is all
/// zero), floored at [`MIN_COLUMN_WIDTH`]; the remaining mass is repeatedly
/// renormalized over unfloored columns so the boundaries end exactly at the
/// target width.
pub fn build_mapping(importance: &[f64], target_width: usize) -> Result<ColumnMapping> {
    let w = importance.len();
    if w == 0 {
        return Err(Error::contract("empty importance profile"));
    }
    if target_width < 1 {
        return Err(Error::contract("target width must be at least 1"));
    }
    if importance.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::numeric("importance profile must be finite and non-negative"));
    }
    let wp = target_width as f64;
    let peak = importance.iter().fold(0.0f64, |a, &b| a.max(b));
    let total: f64 = importance.iter().sum();
    let mut rho: Vec<f64> = if total > 1e-9 {
        // The mapping is invariant to scaling the profile, so divide by the
        // peak first: a flat profile then becomes exactly all-ones and the
        // widths stay free of rounding noise at ratio 1.
        let scaled: Vec<f64> = importance.iter().map(|&r| r / peak).collect();
        let scaled_total: f64 = scaled.iter().sum();
        scaled.iter().map(|&r| wp * r / scaled_total).collect()
    } else {
        vec![wp / w as f64; w]
    };

    // Waterfill the floor: clamp deficit columns to the minimum width and
    // re-scale the rest to keep the total mass, until stable.
    loop {
        let mut clamped_mass = 0.0;
        let mut free_mass = 0.0;
        let mut newly_clamped = false;
        for &r in &rho {
            if r <= MIN_COLUMN_WIDTH {
                clamped_mass += MIN_COLUMN_WIDTH;
            } else {
                free_mass += r;
            }
        }
        if free_mass <= 0.0 {
            // Degenerate: everything at the floor; spread uniformly.
            rho = vec![wp / w as f64; w];
            break;
        }
        let scale = (wp - clamped_mass) / free_mass;
        for r in &mut rho {
            if *r <= MIN_COLUMN_WIDTH {
                if *r < MIN_COLUMN_WIDTH {
                    newly_clamped = true;
                }
                *r = MIN_COLUMN_WIDTH;
            } else {
                *r *= scale;
                if *r < MIN_COLUMN_WIDTH {
                    newly_clamped = true;
                }
            }
        }
        if !newly_clamped {
            break;
        }
    }

    let mut tgt = Vec::with_capacity(w + 1);
    let mut acc = 0.0f64;
    tgt.push(0.0);
    for &r in &rho {
        acc += r;
        tgt.push(acc);
    }
    Ok(ColumnMapping {
        source_width: w,
        target_width,
        tgt,
    })
}

/// Per-target-column shifts from a mapping: column `u`'s pixel center
/// `u + 0.5` is pulled back through the inverse mapping, and the shift is
/// the offset between that source pixel coordinate and `u`.
pub fn shift_map(mapping: &ColumnMapping) -> ShiftMap {
    let shifts = (0..mapping.target_width())
        .map(|u| {
            let src_center = mapping.inverse(u as f64 + 0.5);
            (src_center - 0.5) - u as f64
        })
        .collect();
    ShiftMap { shifts }
}

/// Warp `frame` (`[C, H, W]`) to the target width by sampling each target
/// column at `u + shift[u]`. Differentiable w.r.t. the frame.
pub fn warp<S: Scalar>(tape: &Tape<S>, frame: &Tensor<S>, shift: &ShiftMap) -> Result<Tensor<S>> {
    let coords: Vec<S> = (0..shift.target_width())
        .map(|u| S::c(shift.source_coord(u)))
        .collect();
    let xs = Tensor::new(&[shift.target_width()], coords)?;
    tape.bilinear_sample(frame, &xs)
}

/// Map a retargeted frame (`[C, H, W']`) back onto the source grid by
/// sampling target coordinate `tgt(x + 0.5) - 0.5` for every source column.
pub fn inverse_warp<S: Scalar>(
    tape: &Tape<S>,
    frame: &Tensor<S>,
    mapping: &ColumnMapping,
) -> Result<Tensor<S>> {
    if frame.rank() != 3 || frame.shape()[2] != mapping.target_width() {
        return Err(Error::dimension(format!(
            "inverse_warp: frame {:?} does not match target width {}",
            frame.shape(),
            mapping.target_width()
        )));
    }
    let coords: Vec<S> = (0..mapping.source_width())
        .map(|x| S::c(mapping.forward(x as f64 + 0.5) - 0.5))
        .collect();
    let xs = Tensor::new(&[mapping.source_width()], coords)?;
    tape.bilinear_sample(frame, &xs)
}
