use super::{Branch, Bus, BusKind, NetworkModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where each entity of an original bus lives after normalization, indexed by
/// the original bus id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusRemap {
    pub aggregator: Vec<usize>,
    pub generator: Vec<usize>,
}

impl BusRemap {
    pub fn identity(n: usize) -> Self {
        Self {
            aggregator: (0..n).collect(),
            generator: (0..n).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.aggregator.iter().enumerate().all(|(i, &b)| i == b)
            && self.generator.iter().enumerate().all(|(i, &b)| i == b)
    }
}

/// Split every `Shared` bus into an aggregator bus and a new generator bus
/// joined by a zero-impedance branch, and turn `Empty` buses into virtual
/// aggregators. Split buses are appended after the existing ones.
pub fn normalize_buses<T: Scalar>(raw: &NetworkModel<T>) -> Result<(NetworkModel<T>, BusRemap)> {
    let unreachable = raw.unreachable();
    if !unreachable.is_empty() {
        return Err(Error::Disconnected { unreachable });
    }
    let n = raw.n();
    let mut net = raw.clone();
    let mut remap = BusRemap::identity(n);
    for b in 0..n {
        match raw.buses[b].kind {
            BusKind::Empty => net.buses[b].kind = BusKind::VirtualAggregator,
            BusKind::Shared => {
                let new_id = net.buses.len();
                let host = &raw.buses[b];
                net.buses[b].kind = BusKind::Aggregator;
                net.buses.push(Bus {
                    id: new_id,
                    kind: BusKind::Generator,
                    g_shunt: T::zero(),
                    b_shunt: T::zero(),
                    v_min: host.v_min,
                    v_max: host.v_max,
                });
                net.branches.push(Branch {
                    from: b,
                    to: new_id,
                    r: T::zero(),
                    x: T::zero(),
                    s_max: T::lit(1e6),
                    polygon_angle: T::lit(std::f64::consts::PI / 6.0),
                });
                remap.generator[b] = new_id;
            }
            _ => {}
        }
    }
    Ok((net, remap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linpf::{assemble_lambda, solve_flow};

    fn bus(id: usize, kind: BusKind) -> Bus<f64> {
        Bus {
            id,
            kind,
            g_shunt: 0.0,
            b_shunt: 0.0,
            v_min: 0.9,
            v_max: 1.1,
        }
    }

    fn branch(from: usize, to: usize, r: f64, x: f64) -> Branch<f64> {
        Branch {
            from,
            to,
            r,
            x,
            s_max: 5.0,
            polygon_angle: std::f64::consts::PI / 6.0,
        }
    }

    fn three_bus(kind1: BusKind) -> NetworkModel<f64> {
        NetworkModel {
            slack: 0,
            split_reactance: 1e-6,
            buses: vec![bus(0, BusKind::Slack), bus(1, kind1), bus(2, BusKind::Aggregator)],
            branches: vec![branch(0, 1, 0.02, 0.06), branch(1, 2, 0.03, 0.08)],
        }
    }

    #[test]
    fn splits_shared_bus() {
        let (net, remap) = normalize_buses(&three_bus(BusKind::Shared)).unwrap();
        assert_eq!(net.n(), 4);
        assert_eq!(net.buses[1].kind, BusKind::Aggregator);
        assert_eq!(net.buses[3].kind, BusKind::Generator);
        let split = net.branches.last().unwrap();
        assert!(split.is_zero_impedance());
        assert_eq!((split.from, split.to), (1, 3));
        assert_eq!(remap.generator[1], 3);
        assert_eq!(remap.aggregator[1], 1);
    }

    #[test]
    fn empty_bus_becomes_virtual() {
        let (net, remap) = normalize_buses(&three_bus(BusKind::Empty)).unwrap();
        assert_eq!(net.buses[1].kind, BusKind::VirtualAggregator);
        assert!(remap.is_identity());
    }

    #[test]
    fn idempotent() {
        let (once, _) = normalize_buses(&three_bus(BusKind::Shared)).unwrap();
        let (twice, remap) = normalize_buses(&once).unwrap();
        assert_eq!(once, twice);
        assert!(remap.is_identity());
    }

    #[test]
    fn disconnected_rejected() {
        let mut net = three_bus(BusKind::Generator);
        net.branches.pop();
        assert!(matches!(
            normalize_buses(&net),
            Err(Error::Disconnected { unreachable }) if unreachable == vec![2]
        ));
    }

    #[test]
    fn split_preserves_flows() {
        // merged: bus 1 carries load 0.3 + generation 0.1 at once
        let merged = three_bus(BusKind::Aggregator);
        let (split, _) = normalize_buses(&three_bus(BusKind::Shared)).unwrap();
        let a = solve_flow(&assemble_lambda(&merged).unwrap(), &[vec![0.0, -0.2, -0.1, 0.0, -0.1, -0.05]]).unwrap();
        let b = solve_flow(
            &assemble_lambda(&split).unwrap(),
            &[vec![0.0, -0.3, -0.1, 0.1, 0.0, -0.1, -0.05, 0.0]],
        )
        .unwrap();
        for k in 0..3 {
            assert!((a.theta[0][k] - b.theta[0][k]).abs() < 1e-6);
            assert!((a.v[0][k] - b.v[0][k]).abs() < 1e-6);
        }
        assert!((b.theta[0][3] - b.theta[0][1]).abs() < 1e-6);
    }
}
