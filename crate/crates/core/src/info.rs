//! Exact information quantities over finite alphabets.
//!
//! A [`JointDistribution`] holds `p(z, y)` where each `z` is an integer tuple,
//! conventionally the concatenation `[x; y]` of two equally long feature
//! vectors. Everything is computed by enumeration in base 2.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exchange::{build_permutation, Axis, ExchangeMask};
use crate::rng::keyed_rng;

/// Largest `|Z| * |Y|` table accepted.
pub const MAX_TABLE: usize = 1_000_000;
const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    z_alphabet: Vec<Vec<i64>>,
    y_alphabet: Vec<i64>,
    /// Row-major `[z][y]`.
    table: Vec<f64>,
}

impl JointDistribution {
    pub fn new(z_alphabet: Vec<Vec<i64>>, y_alphabet: Vec<i64>, table: Vec<f64>) -> Result<Self> {
        let (nz, ny) = (z_alphabet.len(), y_alphabet.len());
        if nz == 0 || ny == 0 {
            return Err(Error::Contract("empty alphabet".into()));
        }
        if nz.saturating_mul(ny) > MAX_TABLE {
            return Err(Error::Contract(format!(
                "table of {nz} x {ny} exceeds {MAX_TABLE} cells"
            )));
        }
        if table.len() != nz * ny {
            return Err(Error::Contract(format!(
                "table has {} cells, alphabets need {}",
                table.len(),
                nz * ny
            )));
        }
        if let Some(p) = table.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Contract(format!("invalid probability {p}")));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("probabilities sum to {total}")));
        }
        let mut zs = z_alphabet.clone();
        zs.sort();
        zs.dedup();
        let mut ys = y_alphabet.clone();
        ys.sort_unstable();
        ys.dedup();
        if zs.len() != nz || ys.len() != ny {
            return Err(Error::Contract("alphabets contain duplicates".into()));
        }
        Ok(Self {
            z_alphabet,
            y_alphabet,
            table,
        })
    }

    /// Builds a joint from `(z, y, p)` triples, merging repeated outcomes.
    pub fn from_outcomes<I>(outcomes: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<i64>, i64, f64)>,
    {
        let mut cells: BTreeMap<Vec<i64>, BTreeMap<i64, f64>> = BTreeMap::new();
        let mut labels = std::collections::BTreeSet::new();
        for (z, y, p) in outcomes {
            labels.insert(y);
            *cells.entry(z).or_default().entry(y).or_insert(0.0) += p;
        }
        let y_alphabet: Vec<i64> = labels.into_iter().collect();
        let mut z_alphabet = Vec::with_capacity(cells.len());
        let mut table = Vec::with_capacity(cells.len() * y_alphabet.len());
        for (z, row) in cells {
            z_alphabet.push(z);
            table.extend(y_alphabet.iter().map(|y| row.get(y).copied().unwrap_or(0.0)));
        }
        Self::new(z_alphabet, y_alphabet, table)
    }

    /// `x, y` i.i.d. uniform over `{0, .., k-1}^m`, label `Y = x_0`.
    pub fn copy_first_coordinate(m: usize, k: i64) -> Result<Self> {
        let tuples = all_tuples(2 * m, k);
        let p = 1.0 / tuples.len() as f64;
        Self::from_outcomes(tuples.into_iter().map(|z| {
            let y = z[0];
            (z, y, p)
        }))
    }

    pub fn z_alphabet(&self) -> &[Vec<i64>] {
        &self.z_alphabet
    }

    pub fn y_alphabet(&self) -> &[i64] {
        &self.y_alphabet
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn p(&self, zi: usize, yi: usize) -> f64 {
        self.table[zi * self.y_alphabet.len() + yi]
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        self.table
            .chunks_exact(self.y_alphabet.len())
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let ny = self.y_alphabet.len();
        let mut out = vec![0.0; ny];
        for row in self.table.chunks_exact(ny) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
        out
    }

    /// The same joint with the roles of `Z` and `Y` exchanged.
    pub fn transposed(&self) -> Self {
        let (nz, ny) = (self.z_alphabet.len(), self.y_alphabet.len());
        let mut table = vec![0.0; nz * ny];
        for zi in 0..nz {
            for yi in 0..ny {
                table[yi * nz + zi] = self.p(zi, yi);
            }
        }
        Self {
            z_alphabet: self.y_alphabet.iter().map(|&y| vec![y]).collect(),
            y_alphabet: (0..nz as i64).collect(),
            table,
        }
    }
}

fn all_tuples(len: usize, k: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::with_capacity(len)];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..k).map(move |v| {
                    let mut t = t.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    out
}

/// `sum p(z,y) log2(p(z,y) / (p(z) p(y)))` with `0 log 0 = 0`.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let pz = j.marginal_z();
    let py = j.marginal_y();
    let ny = py.len();
    let mut mi = 0.0;
    for (zi, row) in j.table.chunks_exact(ny).enumerate() {
        for (yi, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pz[zi] * py[yi])).log2();
            }
        }
    }
    // Rounding can leave an independent joint a hair below zero.
    mi.max(0.0)
}

/// Minimum 0-1 risk of predicting `Y` from `Z`: `1 - sum_z max_y p(z, y)`.
pub fn bayes_risk(j: &JointDistribution) -> f64 {
    let hit: f64 = j
        .table
        .chunks_exact(j.y_alphabet.len())
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum();
    (1.0 - hit).max(0.0)
}

/// Distribution of `(f(Z), Y)`.
pub fn pushforward(j: &JointDistribution, f: impl Fn(&[i64]) -> Vec<i64>) -> JointDistribution {
    let ny = j.y_alphabet.len();
    let mut rows: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    for (zi, z) in j.z_alphabet.iter().enumerate() {
        let row = rows.entry(f(z)).or_insert_with(|| vec![0.0; ny]);
        for (acc, p) in row.iter_mut().zip(&j.table[zi * ny..(zi + 1) * ny]) {
            *acc += p;
        }
    }
    let mut z_alphabet = Vec::with_capacity(rows.len());
    let mut table = Vec::with_capacity(rows.len() * ny);
    for (z, row) in rows {
        z_alphabet.push(z);
        table.extend(row);
    }
    JointDistribution {
        z_alphabet,
        y_alphabet: j.y_alphabet.clone(),
        table,
    }
}

/// Deterministic maps of `z = [x; y]` compared against the original.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionMap {
    Add,
    Subtract,
    /// Keeps the trailing `r` of the `2m` coordinates.
    ConcatReduce(usize),
    Permutation(ExchangeMask),
}

impl FusionMap {
    pub fn label(&self) -> String {
        match self {
            FusionMap::Add => "add".into(),
            FusionMap::Subtract => "subtract".into(),
            FusionMap::ConcatReduce(r) => format!("concat_reduce(r={r})"),
            FusionMap::Permutation(mask) => format!("permutation(|S|={})", mask.swapped()),
        }
    }

    pub fn apply(&self, z: &[i64]) -> Vec<i64> {
        let m = z.len() / 2;
        let (x, y) = z.split_at(m);
        match self {
            FusionMap::Add => x.iter().zip(y).map(|(a, b)| a + b).collect(),
            FusionMap::Subtract => x.iter().zip(y).map(|(a, b)| a - b).collect(),
            FusionMap::ConcatReduce(r) => z[z.len() - r..].to_vec(),
            FusionMap::Permutation(mask) => build_permutation(mask).apply_int(z),
        }
    }

    fn check(&self, z_len: usize) -> Result<()> {
        if z_len % 2 != 0 {
            return Err(Error::Contract(format!(
                "z must split into two halves, got length {z_len}"
            )));
        }
        match self {
            FusionMap::ConcatReduce(r) if *r == 0 || *r >= z_len => Err(Error::Contract(format!(
                "reduction rank {r} must lie in 1..{z_len}"
            ))),
            FusionMap::Permutation(mask) if 2 * mask.len() != z_len => Err(Error::Contract(
                format!("mask of length {} on z of length {z_len}", mask.len()),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpiReport {
    pub fusion: String,
    pub mi_before: f64,
    pub mi_after: f64,
    pub risk_before: f64,
    pub risk_after: f64,
    /// `mi_after <= mi_before + 1e-12`.
    pub inequality_holds: bool,
    /// Loss above `1e-9` bits.
    pub strict: bool,
}

pub fn dpi_audit(j: &JointDistribution, fusion: &FusionMap) -> Result<DpiReport> {
    let z_len = j.z_alphabet[0].len();
    if j.z_alphabet.iter().any(|z| z.len() != z_len) {
        return Err(Error::Contract("z tuples differ in length".into()));
    }
    fusion.check(z_len)?;
    let after = pushforward(j, |z| fusion.apply(z));
    let mi_before = mutual_information(j);
    let mi_after = mutual_information(&after);
    Ok(DpiReport {
        fusion: fusion.label(),
        mi_before,
        mi_after,
        risk_before: bayes_risk(j),
        risk_after: bayes_risk(&after),
        inequality_holds: mi_after <= mi_before + 1e-12,
        strict: mi_before - mi_after > 1e-9,
    })
}

/// A random joint over `{0..k-1}^{2m} x {0..ny-1}`; roughly a third of cells are zero.
pub fn random_joint(seed: u64, index: u64, m: usize, k: i64, ny: i64) -> JointDistribution {
    let mut rng = keyed_rng(&[seed, index, 0x1F0]);
    let tuples = all_tuples(2 * m, k);
    let mut weights: Vec<f64> = (0..tuples.len() * ny as usize)
        .map(|_| {
            if rng.random_bool(0.35) {
                0.0
            } else {
                -(1.0 - rng.random::<f64>()).ln()
            }
        })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        weights[0] = 1.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    JointDistribution::new(tuples, (0..ny).collect(), weights).expect("normalized table")
}

#[derive(Debug, Clone, Serialize)]
pub struct InfoAudit {
    pub joints: usize,
    pub max_mi_permutation_delta: f64,
    pub max_risk_permutation_delta: f64,
    pub max_symmetry_delta: f64,
    pub min_mi: f64,
    pub dpi_checks: usize,
    pub dpi_violations: usize,
    /// The copy example `Y = x` with binary scalars.
    pub example: Vec<DpiReport>,
    pub passed: bool,
}

/// Randomized invariance and DPI audit plus the shipped strict-loss example.
pub fn audit(seed: u64, joints: usize) -> InfoAudit {
    let mut max_mi = 0.0f64;
    let mut max_risk = 0.0f64;
    let mut max_sym = 0.0f64;
    let mut min_mi = f64::INFINITY;
    let mut checks = 0;
    let mut violations = 0;
    for i in 0..joints as u64 {
        let mut rng = keyed_rng(&[seed, i, 0x5E1]);
        let m = rng.random_range(1..=2usize);
        let k = rng.random_range(2..=3i64);
        let ny = rng.random_range(2..=3i64);
        let j = random_joint(seed, i, m, k, ny);
        let mi = mutual_information(&j);
        let risk = bayes_risk(&j);
        min_mi = min_mi.min(mi);
        max_sym = max_sym.max((mutual_information(&j.transposed()) - mi).abs());
        let mask = ExchangeMask::new((0..m).map(|_| rng.random_bool(0.5)).collect(), Axis::Channel, 0);
        let fusions = [
            FusionMap::Permutation(mask),
            FusionMap::Add,
            FusionMap::Subtract,
            FusionMap::ConcatReduce(rng.random_range(1..2 * m)),
        ];
        for (fi, f) in fusions.iter().enumerate() {
            let rep = dpi_audit(&j, f).expect("well-formed fusion");
            checks += 1;
            if !rep.inequality_holds {
                violations += 1;
            }
            if fi == 0 {
                max_mi = max_mi.max((rep.mi_after - mi).abs());
                max_risk = max_risk.max((rep.risk_after - risk).abs());
            }
        }
    }
    let copy = JointDistribution::copy_first_coordinate(1, 2).expect("example joint");
    let example: Vec<DpiReport> = [FusionMap::Add, FusionMap::Subtract, FusionMap::ConcatReduce(1)]
        .iter()
        .map(|f| dpi_audit(&copy, f).expect("example fusion"))
        .collect();
    let example_ok = example.iter().all(|r| r.strict && r.mi_before == 1.0 && r.risk_before == 0.0)
        && example[..2].iter().all(|r| r.mi_after == 0.5 && r.risk_after == 0.25);
    let passed = max_mi <= 1e-12
        && max_risk <= 1e-12
        && max_sym <= 1e-12
        && min_mi >= 0.0
        && violations == 0
        && example_ok;
    InfoAudit {
        joints,
        max_mi_permutation_delta: max_mi,
        max_risk_permutation_delta: max_risk,
        max_symmetry_delta: max_sym,
        min_mi: if joints == 0 { 0.0 } else { min_mi },
        dpi_checks: checks,
        dpi_violations: violations,
        example,
        passed,
    }
}
