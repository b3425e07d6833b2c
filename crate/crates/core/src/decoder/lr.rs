//! Scaling law for the peak learning rate as a function of data size.

use crate::error::{Error, Result};

/// peak learning rate = B * D^-0.32 for data size D (tokens).
pub fn peak_lr(b: f64, d: f64) -> Result<f64> {
    if !(b > 0.0) || !(d > 0.0) {
        return Err(Error::Domain(format!(
            "peak_lr requires B > 0 and D > 0, got B={b}, D={d}"
        )));
    }
    Ok(b * d.powf(-0.32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_inputs_give_unit_rate() {
        assert_eq!(peak_lr(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn quadrupling_data_scales_by_four_to_minus_032() {
        let ratio = peak_lr(3.0, 50e9).unwrap() / peak_lr(3.0, 12.5e9).unwrap();
        assert!((ratio - 0.641712948781452099).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn strictly_decreasing_over_grid() {
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let d = 1e9 + i as f64 * 5e8;
            let lr = peak_lr(2.0, d).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn nonpositive_inputs_are_domain_errors() {
        assert!(matches!(peak_lr(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(peak_lr(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(peak_lr(-1.0, 5.0), Err(Error::Domain(_))));
        assert!(matches!(peak_lr(1.0, f64::NAN), Err(Error::Domain(_))));
    }
}
