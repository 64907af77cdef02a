//! Fixtures shared by the criterion benches in `benches/`.

use ach_core::ach::init_rng;
use ach_core::sampling::GumbelStream;
use ach_core::{AchConfig, AchLayer, ParamSet, Result, Tensor};

/// `[n, c, side, side]` with entries uniform in `[-1, 1)`.
pub fn input(n: usize, c: usize, side: usize, seed: u64) -> Tensor<f64> {
    let mut s = GumbelStream::new(seed, 0);
    Tensor::from_fn([n, c, side, side], |_| 2.0 * s.uniform() - 1.0)
}

/// A freshly initialised layer with its parameters.
pub fn ach_layer(c: usize, c_sel: usize, seed: u64) -> Result<(AchLayer<f64>, ParamSet<f64>)> {
    let mut params = ParamSet::new();
    let mut rng = init_rng(seed);
    let layer = AchLayer::new(&mut params, &mut rng, "bench", AchConfig::new(c, c_sel)?, seed, 0)?;
    Ok((layer, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(input(2, 3, 4, 9), input(2, 3, 4, 9));
        assert_ne!(input(2, 3, 4, 9), input(2, 3, 4, 10));
        let (layer, params) = ach_layer(8, 4, 1).unwrap();
        assert_eq!(layer.cfg.out_channels(), 14);
        assert!(params.ids().count() > 0);
    }
}
