use serde::{Deserialize, Serialize};

use super::AdapterKind;

/// Scalars in one adapter of bottleneck `d` on width `model_dim`:
/// both projections with biases plus the adapter's layer norm.
pub fn adapter_param_count(model_dim: usize, d: usize) -> usize {
    2 * model_dim * d + d + model_dim + 2 * model_dim
}

/// `count` adapter sets, each with one adapter in each of `layers` layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSetSpec {
    pub kind: AdapterKind,
    pub count: usize,
    pub layers: usize,
    pub bottleneck: usize,
    pub d_model: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub sets: Vec<AdapterSetSpec>,
}

impl DeploymentSpec {
    pub fn with(mut self, kind: AdapterKind, count: usize, layers: usize, bottleneck: usize, d_model: usize) -> Self {
        self.sets.push(AdapterSetSpec {
            kind,
            count,
            layers,
            bottleneck,
            d_model,
        });
        self
    }
}

/// Closed-form total number of adapter scalars in a deployment.
pub fn count_adapter_budget(spec: &DeploymentSpec) -> usize {
    spec.sets
        .iter()
        .map(|s| s.count * s.layers * adapter_param_count(s.d_model, s.bottleneck))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_adapter_closed_form() {
        assert_eq!(adapter_param_count(512, 1024), 1_051_136);
        assert_eq!(adapter_param_count(2, 1), 4 + 1 + 2 + 4);
    }

    #[test]
    fn mixed_deployment_sums_sets() {
        let spec = DeploymentSpec::default()
            .with(AdapterKind::Language, 12, 12, 1024, 512)
            .with(AdapterKind::Domain, 4, 6, 1024, 512);
        assert_eq!(count_adapter_budget(&spec), 176_590_848);
    }
}
