//! Adaptive frequency-domain modulation (AFDM).
//!
//! The image spectrum is center-shifted, multiplied by a learnable radial
//! filter `H(u, v)` and transformed back. `D(u, v)` is the distance to the
//! spectral center at `(⌊h/2⌋, ⌊w/2⌋)`.
//!
//! The raw parameters are unconstrained; their images are
//! `α = σ(a)·(1 − 1e-6) ∈ [0, 1)`, `β = softplus(b) + 1e-9 > 0` and
//! `r = softplus(c) + 1e-9 > 0`.

use crate::error::{Error, Result};
use crate::numerics::tape::{self, apply_centered_filter, radial_value};
use crate::numerics::{fft, FilterVariant, Tape, Tensor, Var};

/// Keeps α strictly below one.
pub const ALPHA_SQUASH: f64 = 1.0 - 1e-6;
/// Added after softplus so β and r stay positive when softplus underflows.
pub const POSITIVE_FLOOR: f64 = 1e-9;

impl std::str::FromStr for FilterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "notch" => Ok(Self::Notch),
            _ => Err(Error::InvalidArgument(format!(
                "unknown filter variant `{s}` (expected literal or notch)"
            ))),
        }
    }
}

impl std::fmt::Display for FilterVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Notch => "notch",
        })
    }
}

/// Learnable `(r, α, β)` in unconstrained form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialFilterParams {
    pub radius_raw: f64,
    pub alpha_raw: f64,
    pub beta_raw: f64,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y − 1), written to stay accurate for large y.
    y + (-(-y).exp_m1()).ln()
}

impl RadialFilterParams {
    /// α = 0.5, β = 1 and r = min(h, w)/8.
    pub fn initial(height: usize, width: usize) -> Self {
        Self::from_mapped(0.5, 1.0, (height.min(width) as f64 / 8.0).max(0.5)).expect("initial values are in range")
    }

    /// Raw parameters whose projections are the given `α`, `β`, `r`.
    pub fn from_mapped(alpha: f64, beta: f64, radius: f64) -> Result<Self> {
        if !(0.0..ALPHA_SQUASH).contains(&alpha) || alpha == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, {ALPHA_SQUASH}), got {alpha}"
            )));
        }
        if beta <= POSITIVE_FLOOR || radius <= POSITIVE_FLOOR {
            return Err(Error::InvalidArgument(format!(
                "beta and radius must exceed {POSITIVE_FLOOR}, got {beta} and {radius}"
            )));
        }
        let s = alpha / ALPHA_SQUASH;
        Ok(Self {
            alpha_raw: (s / (1.0 - s)).ln(),
            beta_raw: inverse_softplus(beta - POSITIVE_FLOOR),
            radius_raw: inverse_softplus(radius - POSITIVE_FLOOR),
        })
    }

    pub fn alpha(&self) -> f64 {
        tape::sigmoid(self.alpha_raw) * ALPHA_SQUASH
    }

    pub fn beta(&self) -> f64 {
        tape::softplus(self.beta_raw) + POSITIVE_FLOOR
    }

    pub fn radius(&self) -> f64 {
        tape::softplus(self.radius_raw) + POSITIVE_FLOOR
    }
}

/// Euclidean distance from `(u, v)` to the spectral center `(⌊h/2⌋, ⌊w/2⌋)`.
pub fn radial_distance(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let du = u as f64 - (h / 2) as f64;
    let dv = v as f64 - (w / 2) as f64;
    (du * du + dv * dv).sqrt()
}

/// Squared center distance of every cell, row-major.
pub fn squared_distances(h: usize, w: usize) -> Vec<f64> {
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    (0..h)
        .flat_map(|u| (0..w).map(move |v| (u as f64 - ch).powi(2) + (v as f64 - cw).powi(2)))
        .collect()
}

/// A filter evaluated over the centered spectrum grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub variant: FilterVariant,
}

impl FilterField {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.width + v]
    }
}

pub fn build_filter(params: &RadialFilterParams, h: usize, w: usize, variant: FilterVariant) -> Result<FilterField> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("filter grid must be non-empty".into()));
    }
    let (a, b, r) = (params.alpha(), params.beta(), params.radius());
    let values = squared_distances(h, w)
        .into_iter()
        .map(|d2| radial_value(a, b, r, d2, variant))
        .collect();
    Ok(FilterField {
        height: h,
        width: w,
        values,
        variant,
    })
}

/// Filters a real `h×w` image through a centered filter field.
pub fn apply_filter(img: &[f64], h: usize, w: usize, field: &FilterField) -> Result<Vec<f64>> {
    if field.height != h || field.width != w {
        return Err(Error::ShapeMismatch {
            op: "apply_filter",
            left: vec![h, w],
            right: vec![field.height, field.width],
        });
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("afdm input".into()));
    }
    let spectrum = fft::fft2(img, h, w)?;
    apply_centered_filter(&spectrum, &field.values)
}

/// `IFFT(unshift(shift(FFT(img)) ⊙ H))` for the given parameters.
pub fn afdm(img: &[f64], h: usize, w: usize, params: &RadialFilterParams, variant: FilterVariant) -> Result<Vec<f64>> {
    let field = build_filter(params, h, w, variant)?;
    apply_filter(img, h, w, &field)
}

/// Tape variables for the three raw filter parameters.
#[derive(Clone, Copy, Debug)]
pub struct FilterVars {
    pub alpha_raw: Var,
    pub beta_raw: Var,
    pub radius_raw: Var,
}

impl FilterVars {
    pub fn record(tape: &mut Tape, params: &RadialFilterParams) -> Self {
        Self {
            alpha_raw: tape.param(&Tensor::scalar(params.alpha_raw)),
            beta_raw: tape.param(&Tensor::scalar(params.beta_raw)),
            radius_raw: tape.param(&Tensor::scalar(params.radius_raw)),
        }
    }
}

/// Differentiable AFDM of the `h×w` variable `x`.
pub fn afdm_on_tape(tape: &mut Tape, x: Var, vars: FilterVars, variant: FilterVariant) -> Result<Var> {
    let (h, w) = tape.value(x).dims2()?;
    let floor = tape.constant(Tensor::scalar(POSITIVE_FLOOR));
    let s = tape.sigmoid(vars.alpha_raw);
    let alpha = tape.scale(s, ALPHA_SQUASH);
    let b = tape.softplus(vars.beta_raw);
    let beta = tape.add(b, floor)?;
    let r = tape.softplus(vars.radius_raw);
    let radius = tape.add(r, floor)?;
    let field = tape.radial_filter(alpha, beta, radius, squared_distances(h, w), [h, w], variant)?;
    tape.spectral_filter(x, field)
}

/// Gradient of a scalar `loss(afdm(img))` with respect to
/// `(alpha_raw, beta_raw, radius_raw)`.
pub fn afdm_gradients<F>(
    img: &[f64],
    h: usize,
    w: usize,
    params: &RadialFilterParams,
    variant: FilterVariant,
    loss: F,
) -> Result<[f64; 3]>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![h, w], img.to_vec())?);
    let vars = FilterVars::record(&mut tape, params);
    let y = afdm_on_tape(&mut tape, x, vars, variant)?;
    let l = loss(&mut tape, y)?;
    let g = tape.backward(l)?;
    Ok([
        g.get_or_zeros(vars.alpha_raw, 1)[0],
        g.get_or_zeros(vars.beta_raw, 1)[0],
        g.get_or_zeros(vars.radius_raw, 1)[0],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(radial_distance(8, 8, 16, 16), 0.0);
        assert_eq!(radial_distance(3, 2, 7, 5), 0.0);
        assert_eq!(radial_distance(8, 11, 16, 16), 3.0);
        assert_eq!(radial_distance(0, 0, 4, 4), 8.0_f64.sqrt());
    }

    #[test]
    fn literal_filter_values() {
        let p = RadialFilterParams::from_mapped(0.4, 2.0, 3.0).unwrap();
        let f = build_filter(&p, 16, 16, FilterVariant::Literal).unwrap();
        assert!((f.at(8, 8) - p.alpha()).abs() < 1e-15);
        assert!((p.alpha() - 0.4).abs() < 1e-12);
        // D = r = 3 at (8, 11).
        let expect = p.alpha() * (-p.beta()).exp();
        assert!((f.at(8, 11) - expect).abs() < 1e-14);
        assert!(f.values.iter().all(|&v| v > 0.0 && v <= p.alpha()));
    }

    #[test]
    fn notch_filter_limits() {
        let p = RadialFilterParams::from_mapped(0.3, 1.0, 1.0).unwrap();
        let f = build_filter(&p, 64, 64, FilterVariant::Notch).unwrap();
        assert!((f.at(32, 32) - 0.3).abs() < 1e-9);
        assert!((f.at(0, 0) - 1.0).abs() < 1e-12);
        assert!(f.values.iter().all(|&v| (0.3 - 1e-9..1.0 + 1e-15).contains(&v)));
    }

    #[test]
    fn projections_survive_extreme_raw_values() {
        for raw in [-1e308, -1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6, 1e308] {
            let p = RadialFilterParams {
                radius_raw: raw,
                alpha_raw: raw,
                beta_raw: raw,
            };
            let (a, b, r) = (p.alpha(), p.beta(), p.radius());
            assert!((0.0..1.0).contains(&a), "alpha {a} for {raw}");
            assert!(b > 0.0 && b.is_finite(), "beta {b} for {raw}");
            assert!(r > 0.0 && r.is_finite(), "radius {r} for {raw}");
            let f = build_filter(&p, 5, 6, FilterVariant::Notch).unwrap();
            assert!(f.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn initial_params() {
        let p = RadialFilterParams::initial(64, 32);
        assert!((p.alpha() - 0.5).abs() < 1e-12);
        assert!((p.beta() - 1.0).abs() < 1e-12);
        assert!((p.radius() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_notch_gives_alpha_times_c() {
        let p = RadialFilterParams::from_mapped(0.37, 1.3, 2.0).unwrap();
        let out = afdm(&[0.8; 12 * 10], 12, 10, &p, FilterVariant::Notch).unwrap();
        for v in out {
            assert!((v - p.alpha() * 0.8).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_notch_has_no_beta_gradient() {
        let p = RadialFilterParams::from_mapped(0.5, 1.0, 2.0).unwrap();
        let g = afdm_gradients(&[0.6; 64], 8, 8, &p, FilterVariant::Notch, |t, y| Ok(t.sum(y))).unwrap();
        assert!(g[1].abs() < 1e-12 && g[2].abs() < 1e-12);
        assert!(g[0].abs() > 1e-3);
    }
}
