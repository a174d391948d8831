//! Two-dimensional discrete Fourier transforms over arbitrary grid sizes.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/(h·w)` factor. Row and column passes use `rustfft`, which handles
//! non-power-of-two lengths (mixed radix, Rader, Bluestein).

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Relative tolerance on the imaginary part left over by [`ifft2`].
pub const IMAGINARY_RESIDUE_TOL: f64 = 1e-6;

/// A complex spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    fn from_complex(height: usize, width: usize, buf: &[Complex64]) -> Self {
        Self {
            height,
            width,
            re: buf.iter().map(|c| c.re).collect(),
            im: buf.iter().map(|c| c.im).collect(),
        }
    }

    fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect()
    }

    pub fn get(&self, u: usize, v: usize) -> (f64, f64) {
        let i = u * self.width + v;
        (self.re[i], self.im[i])
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    /// Multiplies every coefficient by a real weight field of the same size.
    pub fn scale_by(&mut self, weights: &[f64]) {
        debug_assert_eq!(weights.len(), self.re.len());
        for ((re, im), w) in self.re.iter_mut().zip(self.im.iter_mut()).zip(weights) {
            *re *= w;
            *im *= w;
        }
    }
}

fn transform(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = buf[r * w + c];
        }
        col_fft.process(&mut column);
        for r in 0..h {
            buf[r * w + c] = column[r];
        }
    }
}

/// Forward 2D DFT of a real `h×w` row-major grid; DC lands at index (0, 0).
pub fn fft2(data: &[f64], h: usize, w: usize) -> Result<ComplexGrid> {
    check_dims(data.len(), h, w)?;
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, h, w, false);
    Ok(ComplexGrid::from_complex(h, w, &buf))
}

/// Forward 2D DFT of a complex grid.
pub fn fft2_complex(spec: &ComplexGrid) -> ComplexGrid {
    let mut buf = spec.to_complex();
    transform(&mut buf, spec.height, spec.width, false);
    ComplexGrid::from_complex(spec.height, spec.width, &buf)
}

/// Normalized inverse 2D DFT, keeping the complex result.
pub fn ifft2_complex(spec: &ComplexGrid) -> ComplexGrid {
    let (h, w) = (spec.height, spec.width);
    let mut buf = spec.to_complex();
    transform(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    for c in &mut buf {
        *c *= norm;
    }
    ComplexGrid::from_complex(h, w, &buf)
}

/// Normalized inverse 2D DFT returning the real part.
///
/// Fails with [`Error::ImaginaryResidue`] when the discarded imaginary part
/// is not negligible, which happens only if the spectrum lost its Hermitian
/// symmetry.
pub fn ifft2(spec: &ComplexGrid) -> Result<Vec<f64>> {
    let out = ifft2_complex(spec);
    let peak = out.re.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let residue = out.im.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    // The absolute floor keeps all-but-zero outputs from tripping on rounding noise.
    if residue > IMAGINARY_RESIDUE_TOL * peak && residue > 1e-12 {
        return Err(Error::ImaginaryResidue { residue, peak });
    }
    Ok(out.re)
}

/// Moves the DC coefficient from (0, 0) to (⌊h/2⌋, ⌊w/2⌋).
pub fn center_shift(spec: &ComplexGrid) -> ComplexGrid {
    roll(spec, spec.height / 2, spec.width / 2)
}

/// Inverse of [`center_shift`].
pub fn center_unshift(spec: &ComplexGrid) -> ComplexGrid {
    let (h, w) = (spec.height, spec.width);
    roll(spec, h - h / 2, w - w / 2)
}

fn roll(spec: &ComplexGrid, dr: usize, dc: usize) -> ComplexGrid {
    let (h, w) = (spec.height, spec.width);
    let mut out = ComplexGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let dst = ((r + dr) % h) * w + (c + dc) % w;
            out.re[dst] = spec.re[r * w + c];
            out.im[dst] = spec.im[r * w + c];
        }
    }
    out
}

fn check_dims(len: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || len != h * w {
        return Err(Error::InvalidArgument(format!(
            "grid of {len} values cannot be viewed as {h}x{w}"
        )));
    }
    Ok(())
}
