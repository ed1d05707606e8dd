//! Trained network as a driving policy.

use arpo_core::env::{Policy, PolicyInput};

use crate::distribution::{fuse_mean, FusionConfig, TruncatedGaussian};
use crate::network::{Network, Scalar};
use crate::trainer::batch_from_states;

/// Acts with the mode of the fused distribution. With `base == None` the
/// residual network drives alone (α = 1).
pub struct NeuralPolicy<T: Scalar> {
    pub net: Network<T>,
    pub fusion: FusionConfig,
    pub base: Option<Box<dyn Policy + Send>>,
}

impl<T: Scalar> NeuralPolicy<T> {
    pub fn standalone(net: Network<T>) -> Self {
        Self { net, fusion: FusionConfig::drl(), base: None }
    }

    pub fn with_base(net: Network<T>, fusion: FusionConfig, base: Box<dyn Policy + Send>) -> Self {
        Self { net, fusion, base: Some(base) }
    }
}

impl<T: Scalar> Policy for NeuralPolicy<T> {
    fn act(&mut self, input: &PolicyInput<'_>) -> [f64; 2] {
        let out = self.net.forward(&batch_from_states::<T>(&[input.state])).out;
        let base = match (&mut self.base, self.fusion.needs_base()) {
            (Some(b), true) => b.act(input),
            _ => [0.0; 2],
        };
        let mu = fuse_mean(base, out.mu(0, 1), &self.fusion);
        TruncatedGaussian::new(mu, out.log_sigma(0, 1).map(f64::exp)).mode()
    }

    fn reset(&mut self) {
        if let Some(b) = &mut self.base {
            b.reset();
        }
    }
}
