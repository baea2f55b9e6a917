//! Gaussian radial-basis feature map over the side-velocity pair.
//!
//! Component `k` is `exp(-‖V - c_k‖² / w_k²)`. The network is fixed after
//! construction: only the controller's adaptive scalar evolves online.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RbfError {
    #[error("network needs at least one neuron")]
    Empty,
    #[error("{centers} centers but {widths} widths")]
    LengthMismatch { centers: usize, widths: usize },
    #[error("width of neuron {index} must be positive and finite, got {width}")]
    BadWidth { index: usize, width: f64 },
    #[error("center of neuron {index} is not finite")]
    BadCenter { index: usize },
    #[error("center scale must be positive, got {0}")]
    BadScale(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork", into = "RawNetwork")]
pub struct RbfNetwork {
    centers: Vec<[f64; 2]>,
    widths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawNetwork {
    centers: Vec<[f64; 2]>,
    widths: Vec<f64>,
}

impl TryFrom<RawNetwork> for RbfNetwork {
    type Error = RbfError;
    fn try_from(raw: RawNetwork) -> Result<Self, RbfError> {
        RbfNetwork::new(raw.centers, raw.widths)
    }
}

impl From<RbfNetwork> for RawNetwork {
    fn from(net: RbfNetwork) -> Self {
        RawNetwork { centers: net.centers, widths: net.widths }
    }
}

impl RbfNetwork {
    pub fn new(centers: Vec<[f64; 2]>, widths: Vec<f64>) -> Result<Self, RbfError> {
        if centers.is_empty() {
            return Err(RbfError::Empty);
        }
        if centers.len() != widths.len() {
            return Err(RbfError::LengthMismatch { centers: centers.len(), widths: widths.len() });
        }
        for (index, &width) in widths.iter().enumerate() {
            if !(width > 0.0 && width.is_finite()) {
                return Err(RbfError::BadWidth { index, width });
            }
        }
        if let Some(index) = centers.iter().position(|c| !c.iter().all(|x| x.is_finite())) {
            return Err(RbfError::BadCenter { index });
        }
        Ok(Self { centers, widths })
    }

    /// Every neuron shares `width`.
    pub fn with_shared_width(centers: Vec<[f64; 2]>, width: f64) -> Result<Self, RbfError> {
        let widths = vec![width; centers.len()];
        Self::new(centers, widths)
    }

    /// `neurons` centers with each coordinate `scale * (2 r - 1)` for a uniform
    /// `r ∈ [0, 1)`, all sharing `width`.
    pub fn init_centers<R: Rng + ?Sized>(neurons: usize, width: f64, scale: f64, rng: &mut R) -> Result<Self, RbfError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(RbfError::BadScale(scale));
        }
        let centers = (0..neurons)
            .map(|_| {
                let x = scale * (2.0 * rng.gen::<f64>() - 1.0);
                let y = scale * (2.0 * rng.gen::<f64>() - 1.0);
                [x, y]
            })
            .collect();
        Self::with_shared_width(centers, width)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    fn activation(&self, k: usize, v: [f64; 2]) -> f64 {
        let c = self.centers[k];
        let (dx, dy) = (v[0] - c[0], v[1] - c[1]);
        let w = self.widths[k];
        (-(dx * dx + dy * dy) / (w * w)).exp()
    }

    /// All activations at `v`.
    pub fn basis_eval(&self, v: [f64; 2]) -> Vec<f64> {
        (0..self.len()).map(|k| self.activation(k, v)).collect()
    }

    /// Euclidean norm of [`basis_eval`](Self::basis_eval), without allocating.
    pub fn basis_norm(&self, v: [f64; 2]) -> f64 {
        (0..self.len()).map(|k| self.activation(k, v).powi(2)).sum::<f64>().sqrt()
    }

    /// Analytic gradient of activation `k` with respect to `v`.
    pub fn activation_gradient(&self, k: usize, v: [f64; 2]) -> [f64; 2] {
        let c = self.centers[k];
        let scale = -2.0 / self.widths[k].powi(2) * self.activation(k, v);
        [scale * (v[0] - c[0]), scale * (v[1] - c[1])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three() -> RbfNetwork {
        RbfNetwork::with_shared_width(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 1.0).unwrap()
    }

    #[test]
    fn hand_evaluated_activations() {
        let e1 = (-1.0f64).exp();
        let phi = three().basis_eval([0.0, 0.0]);
        assert_eq!(phi[0], 1.0);
        assert!((phi[1] - e1).abs() < 1e-15 && (phi[2] - e1).abs() < 1e-15);
        assert!((phi[1] - 0.36788).abs() < 1e-5);
        let norm = three().basis_norm([0.0, 0.0]);
        assert!((norm - (1.0 + 2.0 * (-2.0f64).exp()).sqrt()).abs() < 1e-14);
        assert!((norm - 1.12724).abs() < 1e-5);
    }

    #[test]
    fn single_neuron_at_center() {
        let net = RbfNetwork::with_shared_width(vec![[0.4, -0.2]], 0.13).unwrap();
        assert_eq!(net.basis_norm([0.4, -0.2]), 1.0);
    }

    #[test]
    fn rejects_invalid_networks() {
        assert_eq!(RbfNetwork::new(vec![], vec![]), Err(RbfError::Empty));
        assert!(matches!(RbfNetwork::new(vec![[0.0, 0.0]], vec![0.0]), Err(RbfError::BadWidth { .. })));
        assert!(matches!(RbfNetwork::new(vec![[f64::NAN, 0.0]], vec![1.0]), Err(RbfError::BadCenter { .. })));
        assert!(matches!(RbfNetwork::new(vec![[0.0, 0.0]], vec![1.0, 2.0]), Err(RbfError::LengthMismatch { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RbfNetwork::init_centers(0, 0.1, 1.0, &mut rng).is_err());
        assert!(RbfNetwork::init_centers(3, 0.1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn init_centers_in_unit_square() {
        for (neurons, seed) in [(9usize, 5u64), (8, 17)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = RbfNetwork::init_centers(neurons, 0.13, 1.0, &mut rng).unwrap();
            assert_eq!(net.len(), neurons);
            assert!(net.centers().iter().flatten().all(|x| (-1.0..=1.0).contains(x)));
        }
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            RbfNetwork::init_centers(9, 0.13, 1.0, &mut a).unwrap(),
            RbfNetwork::init_centers(9, 0.13, 1.0, &mut b).unwrap()
        );
    }

    /// Always yields 0.5 from `gen::<f64>()`.
    struct Half;

    impl RngCore for Half {
        fn next_u32(&mut self) -> u32 {
            1 << 31
        }
        fn next_u64(&mut self) -> u64 {
            1 << 63
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0)
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    #[test]
    fn midpoint_rng_gives_origin_center() {
        let net = RbfNetwork::init_centers(1, 0.13, 1.0, &mut Half).unwrap();
        assert_eq!(net.centers(), &[[0.0, 0.0]]);
    }

    #[test]
    fn serde_roundtrip_validates() {
        let net = three();
        let json = serde_json::to_string(&net).unwrap();
        assert_eq!(serde_json::from_str::<RbfNetwork>(&json).unwrap(), net);
        assert!(serde_json::from_str::<RbfNetwork>(r#"{"centers":[[0,0]],"widths":[-1]}"#).is_err());
    }

    fn arb_net() -> impl Strategy<Value = RbfNetwork> {
        prop::collection::vec(((-2.0..2.0f64, -2.0..2.0f64), 0.05..2.0f64), 1..12).prop_map(|ns| {
            let (centers, widths): (Vec<_>, Vec<_>) = ns.into_iter().map(|((x, y), w)| ([x, y], w)).unzip();
            RbfNetwork::new(centers, widths).unwrap()
        })
    }

    proptest! {
        #[test]
        fn activations_bounded(net in arb_net(), x in -3.0..3.0f64, y in -3.0..3.0f64) {
            let phi = net.basis_eval([x, y]);
            for p in &phi {
                prop_assert!(*p >= 0.0 && *p <= 1.0);
            }
            let norm = net.basis_norm([x, y]);
            prop_assert!(norm <= (net.len() as f64).sqrt() + 1e-12);
        }

        #[test]
        fn activation_is_one_only_at_center(net in arb_net(), dx in 1e-3..1.0f64, dy in -1.0..1.0f64) {
            let c = net.centers()[0];
            prop_assert_eq!(net.basis_eval(c)[0], 1.0);
            prop_assert!(net.basis_eval([c[0] + dx, c[1] + dy])[0] < 1.0);
        }

        #[test]
        fn radially_decreasing(net in arb_net(), angle in 0.0..std::f64::consts::TAU, r1 in 0.0..1.0f64, dr in 1e-3..1.0f64) {
            let c = net.centers()[0];
            let at = |r: f64| net.basis_eval([c[0] + r * angle.cos(), c[1] + r * angle.sin()])[0];
            let (near, far) = (at(r1), at(r1 + dr));
            // Far enough out both underflow to zero.
            prop_assert!(far < near || (far == 0.0 && near == 0.0));
        }
    }
}
