//! Invariant audit behind the `verify` subcommand: exchange algebra and the
//! discrete information-theory checks, reported as JSON.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::exchange::{
    build_permutation, element_mask, registry, sample_mask, verify_orthogonality, Axis, ExchangeMask,
    ExchangeSpec,
};
use crate::info;
use crate::model::{account, ArchConfig};
use crate::rng::keyed_rng;
use crate::tensor::{OpCost, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub status: &'static str,
    pub cases: u64,
    pub seconds: f64,
    pub detail: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub status: &'static str,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn timed(name: &str, f: impl FnOnce() -> (bool, u64, String)) -> Check {
    let t = Instant::now();
    let (ok, cases, detail) = f();
    Check {
        name: name.to_string(),
        status: if ok { "pass" } else { "fail" },
        cases,
        seconds: t.elapsed().as_secs_f64(),
        detail,
    }
}

fn mask_ok(mask: &ExchangeMask) -> bool {
    let rep = verify_orthogonality(&build_permutation(mask));
    let expected = if mask.swapped() % 2 == 0 { 1 } else { -1 };
    rep.consistent() && rep.det_sign == expected
}

/// Every mask of length `1..=max_m`.
pub fn orthogonality_exhaustive(max_m: usize) -> Check {
    timed(&format!("orthogonality_exhaustive_m{max_m}"), || {
        let mut cases = 0u64;
        let mut failures = 0u64;
        for m in 1..=max_m {
            for bits in 0u64..(1 << m) {
                let eps = (0..m).map(|i| bits >> i & 1 == 1).collect();
                cases += 1;
                failures += u64::from(!mask_ok(&ExchangeMask::new(eps, Axis::Channel, 0)));
            }
        }
        (failures == 0, cases, format!("{failures} failures"))
    })
}

/// `count` masks with lengths drawn from `1..=max_m` and density from `U(0,1)`.
pub fn orthogonality_random(seed: u64, count: u64, max_m: usize) -> Check {
    timed("orthogonality_random", || {
        let mut failures = 0u64;
        for i in 0..count {
            let mut rng = keyed_rng(&[seed, i, 0x0127]);
            let m = rng.random_range(1..=max_m);
            let p: f64 = rng.random();
            let eps = (0..m).map(|_| rng.random_bool(p)).collect();
            failures += u64::from(!mask_ok(&ExchangeMask::new(eps, Axis::Channel, 0)));
        }
        (failures == 0, count, format!("{failures} failures, m <= {max_m}"))
    })
}

/// A random small pyramid pair and a matching random mask set for `axis`.
fn random_case(seed: u64, i: u64, axis: Axis) -> (Vec<Tensor>, Vec<Tensor>, Vec<ExchangeMask>) {
    let mut rng = keyed_rng(&[seed, i, 0x1A7]);
    let levels = rng.random_range(1..=3usize);
    let shapes: Vec<[usize; 3]> = (0..levels)
        .map(|_| [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)])
        .collect();
    let pyramid = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Tensor> {
        shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
            .collect()
    };
    let a = pyramid(&mut rng);
    let b = pyramid(&mut rng);
    let strategy = registry().for_axis(axis);
    let p: f64 = rng.random();
    let masks = strategy
        .mask_lengths(&shapes)
        .into_iter()
        .enumerate()
        .map(|(l, m)| ExchangeMask::new((0..m).map(|_| rng.random_bool(p)).collect(), axis, l))
        .collect();
    (a, b, masks)
}

const AXES: [Axis; 4] = [Axis::Layer, Axis::Channel, Axis::SpatialCol, Axis::SpatialRow];

fn bits_eq(x: &[Tensor], y: &[Tensor]) -> bool {
    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.bit_eq(q))
}

/// Applying any exchange twice returns the inputs bit-for-bit, and every
/// output element comes from the same position of one of the inputs.
pub fn involution(seed: u64, cases: u64) -> Check {
    timed("involution", || {
        let mut failures = 0u64;
        for i in 0..cases {
            let axis = AXES[(i % 4) as usize];
            let (a, b, masks) = random_case(seed, i, axis);
            let ex = registry().for_axis(axis);
            let ok = ex.apply(&a, &b, &masks).and_then(|(a1, b1)| {
                let (a2, b2) = ex.apply(&a1, &b1, &masks)?;
                let in_place = a1.iter().zip(&b1).enumerate().all(|(l, (x, y))| {
                    x.data().iter().zip(y.data()).enumerate().all(|(k, (&u, &v))| {
                        let (p, q) = (a[l].data()[k], b[l].data()[k]);
                        (u.to_bits() == p.to_bits() && v.to_bits() == q.to_bits())
                            || (u.to_bits() == q.to_bits() && v.to_bits() == p.to_bits())
                    })
                });
                Ok(in_place && bits_eq(&a2, &a) && bits_eq(&b2, &b))
            });
            failures += u64::from(!ok.unwrap_or(false));
        }
        (failures == 0, cases, format!("{failures} failures over 4 axes"))
    })
}

/// `P [x; y]` on the flattened pyramid equals the elementwise exchange exactly.
pub fn matrix_equivalence(seed: u64, cases: u64) -> Check {
    timed("matrix_vs_elementwise", || {
        let mut failures = 0u64;
        for i in 0..cases {
            let axis = AXES[(i % 4) as usize];
            let (a, b, masks) = random_case(seed, i + (1 << 32), axis);
            let ok = (|| -> crate::error::Result<bool> {
                let (ea, eb) = registry().for_axis(axis).apply(&a, &b, &masks)?;
                let mut eps = Vec::new();
                for (l, t) in a.iter().enumerate() {
                    if axis == Axis::Layer {
                        eps.extend(std::iter::repeat_n(masks[0].epsilon[l], t.numel()));
                    } else {
                        eps.extend(element_mask(&masks[l], t.shape())?);
                    }
                }
                let flat = |p: &[Tensor]| p.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
                let mut z = flat(&a);
                z.extend(flat(&b));
                let pz = build_permutation(&ExchangeMask::new(eps, axis, 0)).apply(&z);
                let mut want = flat(&ea);
                want.extend(flat(&eb));
                Ok(pz.iter().zip(&want).all(|(u, v)| u.to_bits() == v.to_bits()))
            })();
            failures += u64::from(!ok.unwrap_or(false));
        }
        (failures == 0, cases, format!("{failures} mismatches"))
    })
}

/// The step rule, the p = 0 / 1 edges, key reproducibility and the empirical
/// Bernoulli rate.
pub fn mask_sampling(seed: u64) -> Check {
    timed("mask_sampling", || {
        let det = ExchangeSpec::deterministic(Axis::Channel, 2, 0);
        let rule = sample_mask(&det, 5, 9, 0).epsilon == [true, false, true, false, true];
        let zero = sample_mask(&ExchangeSpec::bernoulli(Axis::Channel, 0.0, seed), 64, 3, 1).swapped() == 0;
        let one = sample_mask(&ExchangeSpec::bernoulli(Axis::Channel, 1.0, seed), 64, 3, 1).swapped() == 64;
        let half = ExchangeSpec::bernoulli(Axis::SpatialCol, 0.5, seed);
        let repro = sample_mask(&half, 32, 7, 2) == sample_mask(&half, 32, 7, 2);
        let draws = 100_000usize;
        let ones: usize = (0..draws as u64 / 100).map(|it| sample_mask(&half, 100, it, 0).swapped()).sum();
        let rate = ones as f64 / draws as f64;
        let ok = rule && zero && one && repro && (0.495..=0.505).contains(&rate);
        (ok, draws as u64, format!("bernoulli(0.5) rate {rate:.5}"))
    })
}

/// Exchange strategies report zero parameters and zero MACs.
pub fn zero_cost() -> Check {
    timed("exchange_zero_cost", || {
        let shapes = [[8, 16, 16], [16, 8, 8], [32, 4, 4]];
        let strategies_ok = registry().names().iter().all(|n| {
            registry().get(n).is_some_and(|s| s.cost(&shapes) == OpCost::ZERO)
        });
        let account_ok = AXES.iter().all(|&axis| {
            account(&ArchConfig::seed(ExchangeSpec::deterministic(axis, 2, 0)))
                .is_ok_and(|a| a.exchange == OpCost::ZERO)
        });
        (strategies_ok && account_ok, registry().names().len() as u64, String::new())
    })
}

/// Random-joint invariance and DPI audit plus the copy example.
pub fn information(seed: u64, joints: usize) -> Check {
    timed("information_audit", || {
        let a = info::audit(seed, joints);
        let detail = format!(
            "max |dMI| {:e}, max |dR*| {:e}, DPI violations {}/{}",
            a.max_mi_permutation_delta, a.max_risk_permutation_delta, a.dpi_violations, a.dpi_checks
        );
        (a.passed, joints as u64, detail)
    })
}

pub fn verify(seed: u64) -> VerifyReport {
    let checks = vec![
        orthogonality_exhaustive(10),
        orthogonality_random(seed, 10_000, 64),
        involution(seed, 1000),
        matrix_equivalence(seed, 1000),
        mask_sampling(seed),
        zero_cost(),
        information(seed, 500),
    ];
    let status = if checks.iter().all(Check::passed) { "pass" } else { "fail" };
    VerifyReport { status, seed, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_audit_passes() {
        assert!(orthogonality_exhaustive(4).passed());
        assert_eq!(orthogonality_exhaustive(3).cases, 2 + 4 + 8);
        assert!(orthogonality_random(1, 50, 16).passed());
        assert!(involution(1, 40).passed());
        assert!(matrix_equivalence(1, 40).passed());
        assert!(mask_sampling(1).passed());
        assert!(zero_cost().passed());
        assert!(information(1, 20).passed());
    }

    #[test]
    fn report_serializes_with_status_strings() {
        let rep = VerifyReport {
            status: "pass",
            seed: 0,
            checks: vec![zero_cost()],
        };
        let v = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["checks"][0]["status"], "pass");
    }
}
