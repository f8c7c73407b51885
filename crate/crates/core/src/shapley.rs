//! Shapley attributions of a model's logit.
//!
//! A player is a set of `(bucket, feature)` cells. The value of a coalition
//! is the logit of the input with every cell of the absent players set to
//! zero; cells owned by no player are left as they are.

use crate::autodiff::Tensor;
use crate::model::{ModelError, ModelParams};
use crate::seed::indexed_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

pub const MAX_EXACT_PLAYERS: usize = 12;

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error(
        "TooManyGroups: exact enumeration supports at most {MAX_EXACT_PLAYERS} players, got {0}"
    )]
    TooManyGroups(usize),
    #[error("InvalidPlayers: {0}")]
    InvalidPlayers(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

pub trait LogitModel: Sync {
    fn logit(&self, x: &Tensor) -> Result<f64, ModelError>;
}

impl LogitModel for ModelParams {
    fn logit(&self, x: &Tensor) -> Result<f64, ModelError> {
        Ok(self.forward(x)?.logit)
    }
}

impl<F: Fn(&Tensor) -> f64 + Sync> LogitModel for F {
    fn logit(&self, x: &Tensor) -> Result<f64, ModelError> {
        Ok(self(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Players {
    pub names: Vec<String>,
    pub cells: Vec<Vec<(usize, usize)>>,
}

impl Players {
    /// One player per group of feature columns, covering every bucket.
    pub fn feature_groups(n_buckets: usize, groups: &[(String, Vec<usize>)]) -> Self {
        Players {
            names: groups.iter().map(|(n, _)| n.clone()).collect(),
            cells: groups
                .iter()
                .map(|(_, cols)| {
                    cols.iter()
                        .flat_map(|&c| (0..n_buckets).map(move |t| (t, c)))
                        .collect()
                })
                .collect(),
        }
    }

    /// One player per feature column.
    pub fn features(n_buckets: usize, names: &[String]) -> Self {
        let groups: Vec<(String, Vec<usize>)> = names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.clone(), vec![j]))
            .collect();
        Self::feature_groups(n_buckets, &groups)
    }

    /// One player per bucket row.
    pub fn buckets(n_buckets: usize, n_features: usize) -> Self {
        Players {
            names: (0..n_buckets).map(|t| format!("bucket{t}")).collect(),
            cells: (0..n_buckets)
                .map(|t| (0..n_features).map(|j| (t, j)).collect())
                .collect(),
        }
    }

    /// One player per nonzero cell of `x`.
    pub fn nonzero_cells(x: &Tensor) -> Self {
        let mut names = Vec::new();
        let mut cells = Vec::new();
        for t in 0..x.rows() {
            for j in 0..x.cols() {
                if x.at(t, j) != 0.0 {
                    names.push(format!("{t}:{j}"));
                    cells.push(vec![(t, j)]);
                }
            }
        }
        Players { names, cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn validate(&self, x: &Tensor) -> Result<(), ShapleyError> {
        if self.names.len() != self.cells.len() {
            return Err(ShapleyError::InvalidPlayers("one name per player".into()));
        }
        let mut seen = vec![false; x.len()];
        for cells in &self.cells {
            for &(t, j) in cells {
                if t >= x.rows() || j >= x.cols() {
                    return Err(ShapleyError::InvalidPlayers(format!(
                        "cell ({t}, {j}) outside a {}x{} input",
                        x.rows(),
                        x.cols()
                    )));
                }
                let k = t * x.cols() + j;
                if seen[k] {
                    return Err(ShapleyError::InvalidPlayers(format!(
                        "cell ({t}, {j}) belongs to two players"
                    )));
                }
                seen[k] = true;
            }
        }
        Ok(())
    }
}

/// Input with the cells of every player not in `present` zeroed.
fn masked(x: &Tensor, players: &Players, present: impl Fn(usize) -> bool) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for (i, cells) in players.cells.iter().enumerate() {
        if !present(i) {
            for &(t, j) in cells {
                out.data_mut()[t * cols + j] = 0.0;
            }
        }
    }
    out
}

fn value<M: LogitModel + ?Sized>(
    model: &M,
    x: &Tensor,
    players: &Players,
    present: impl Fn(usize) -> bool,
) -> Result<f64, ShapleyError> {
    Ok(model.logit(&masked(x, players, present))?)
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn shapley_exact<M: LogitModel + ?Sized>(
    model: &M,
    x: &Tensor,
    players: &Players,
) -> Result<Vec<f64>, ShapleyError> {
    let n = players.len();
    if n > MAX_EXACT_PLAYERS {
        return Err(ShapleyError::TooManyGroups(n));
    }
    players.validate(x)?;
    let values = (0..1usize << n)
        .into_par_iter()
        .map(|mask| value(model, x, players, |i| mask >> i & 1 == 1))
        .collect::<Result<Vec<f64>, _>>()?;
    let fact: Vec<f64> = (0..=n)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << n {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[n - s - 1] / fact[n];
            *p += w * (values[mask | 1 << i] - values[mask]);
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub phi: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n_permutations: usize,
}

/// Permutation-sampling estimate. Each player draws its own
/// `n_permutations` orderings and averages its marginal contribution to
/// the players preceding it, so estimates for different players are
/// independent.
pub fn shapley_mc<M: LogitModel + ?Sized>(
    model: &M,
    x: &Tensor,
    players: &Players,
    n_permutations: usize,
    seed: u64,
) -> Result<McEstimate, ShapleyError> {
    if n_permutations == 0 {
        return Err(ShapleyError::InvalidPlayers(
            "need at least one permutation".into(),
        ));
    }
    players.validate(x)?;
    let n = players.len();
    let per_player = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(seed, "shapley", &[i as u64]));
            let mut order: Vec<usize> = (0..n).collect();
            let mut draws = Vec::with_capacity(n_permutations);
            for _ in 0..n_permutations {
                order.shuffle(&mut rng);
                let pos = order.iter().position(|&p| p == i).expect("player in order");
                let mut before = vec![false; n];
                for &p in &order[..pos] {
                    before[p] = true;
                }
                let without = value(model, x, players, |k| before[k])?;
                let with = value(model, x, players, |k| k == i || before[k])?;
                draws.push(with - without);
            }
            let m = draws.len() as f64;
            let mean = draws.iter().sum::<f64>() / m;
            let se = if draws.len() > 1 {
                let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
                (var / m).sqrt()
            } else {
                f64::NAN
            };
            Ok((mean, se))
        })
        .collect::<Result<Vec<(f64, f64)>, ShapleyError>>()?;
    Ok(McEstimate {
        phi: per_player.iter().map(|p| p.0).collect(),
        std_err: per_player.iter().map(|p| p.1).collect(),
        n_permutations,
    })
}

/// `v(all) - v(empty)`, the total every attribution vector must sum to.
pub fn total_effect<M: LogitModel + ?Sized>(
    model: &M,
    x: &Tensor,
    players: &Players,
) -> Result<f64, ShapleyError> {
    Ok(value(model, x, players, |_| true)? - value(model, x, players, |_| false)?)
}

/// Per-patient, per-bucket, per-feature attributions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTensor {
    pub patient_ids: Vec<String>,
    pub n_buckets: usize,
    pub n_features: usize,
    /// Row-major `patients x buckets x features`.
    pub values: Vec<f64>,
}

impl AttributionTensor {
    pub fn zeros(patient_ids: Vec<String>, n_buckets: usize, n_features: usize) -> Self {
        let n = patient_ids.len() * n_buckets * n_features;
        AttributionTensor {
            patient_ids,
            n_buckets,
            n_features,
            values: vec![0.0; n],
        }
    }

    pub fn at(&self, patient: usize, bucket: usize, feature: usize) -> f64 {
        self.values[(patient * self.n_buckets + bucket) * self.n_features + feature]
    }

    fn set(&mut self, patient: usize, bucket: usize, feature: usize, v: f64) {
        let k = (patient * self.n_buckets + bucket) * self.n_features + feature;
        self.values[k] = v;
    }

    /// Cell-level attributions by [`shapley_mc`] over the nonzero cells of
    /// each input; zero cells are null players and get zero.
    pub fn compute<M: LogitModel + ?Sized>(
        model: &M,
        inputs: &[(String, &Tensor)],
        n_permutations: usize,
        seed: u64,
    ) -> Result<Self, ShapleyError> {
        let (rows, cols) = inputs
            .first()
            .map(|(_, x)| (x.rows(), x.cols()))
            .unwrap_or((0, 0));
        let mut out = Self::zeros(
            inputs.iter().map(|(id, _)| id.clone()).collect(),
            rows,
            cols,
        );
        for (n, (_, x)) in inputs.iter().enumerate() {
            if (x.rows(), x.cols()) != (rows, cols) {
                return Err(ShapleyError::InvalidPlayers(
                    "inputs differ in shape".into(),
                ));
            }
            let players = Players::nonzero_cells(x);
            let est = shapley_mc(
                model,
                x,
                &players,
                n_permutations,
                indexed_seed(seed, "tensor", &[n as u64]),
            )?;
            for (cells, phi) in players.cells.iter().zip(est.phi) {
                let (t, j) = cells[0];
                out.set(n, t, j, phi);
            }
        }
        Ok(out)
    }

    /// Writes `patient_id,bucket,feature,phi` for nonzero attributions.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        feature_names: &[String],
    ) -> Result<(), ShapleyError> {
        writeln!(w, "patient_id,bucket,feature,phi")?;
        for (n, id) in self.patient_ids.iter().enumerate() {
            for t in 0..self.n_buckets {
                for j in 0..self.n_features {
                    let v = self.at(n, t, j);
                    if v != 0.0 {
                        let name = feature_names.get(j).map(String::as_str).unwrap_or("?");
                        writeln!(w, "{id},{t},{name},{v}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Features ranked by mean `|phi|` over patients and buckets, best first.
/// Features whose mean is zero are left out.
pub fn aggregate_feature(s: &AttributionTensor, feature_names: &[String]) -> Vec<(String, f64)> {
    let groups: Vec<(String, Vec<usize>)> = (0..s.n_features)
        .map(|j| {
            let name = feature_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| j.to_string());
            (name, vec![j])
        })
        .collect();
    aggregate_feature_groups(s, &groups)
}

/// As [`aggregate_feature`] with the members of each group summed before
/// ranking.
pub fn aggregate_feature_groups(
    s: &AttributionTensor,
    groups: &[(String, Vec<usize>)],
) -> Vec<(String, f64)> {
    let cells = (s.patient_ids.len() * s.n_buckets) as f64;
    let mut out: Vec<(String, f64)> = groups
        .iter()
        .map(|(name, cols)| {
            let mut total = 0.0;
            for n in 0..s.patient_ids.len() {
                for t in 0..s.n_buckets {
                    for &j in cols {
                        total += s.at(n, t, j).abs();
                    }
                }
            }
            (name.clone(), if cells > 0.0 { total / cells } else { 0.0 })
        })
        .filter(|(_, v)| *v > 0.0)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Mean `|phi|` per bucket over patients and features; bucket 0 is nearest
/// the index day.
pub fn aggregate_time(s: &AttributionTensor) -> Vec<f64> {
    let cells = (s.patient_ids.len() * s.n_features) as f64;
    (0..s.n_buckets)
        .map(|t| {
            if cells == 0.0 {
                return 0.0;
            }
            let mut total = 0.0;
            for n in 0..s.patient_ids.len() {
                for j in 0..s.n_features {
                    total += s.at(n, t, j).abs();
                }
            }
            total / cells
        })
        .collect()
}

/// Ranked feature report, `rank name value` per line.
pub fn feature_report(ranking: &[(String, f64)], top_k: usize) -> String {
    let width = ranking.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    ranking
        .iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (name, v))| format!("{:>3} {name:<width$} {v:.6}\n", i + 1))
        .collect()
}

/// Group feature columns by name: `groups` maps a group name to its member
/// feature names.
pub fn groups_by_name(
    feature_names: &[String],
    groups: &BTreeMap<String, Vec<String>>,
) -> Vec<(String, Vec<usize>)> {
    let mut used = vec![false; feature_names.len()];
    let mut out = Vec::new();
    for (g, members) in groups {
        let cols: Vec<usize> = feature_names
            .iter()
            .enumerate()
            .filter(|(_, n)| members.contains(n))
            .map(|(j, _)| j)
            .collect();
        for &j in &cols {
            used[j] = true;
        }
        out.push((g.clone(), cols));
    }
    for (j, n) in feature_names.iter().enumerate() {
        if !used[j] {
            out.push((n.clone(), vec![j]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::glorot(rows, cols, &mut rng).map(|v| v + 0.5)
    }

    /// Brute-force Shapley by averaging over all `n!` orderings.
    fn by_orderings(model: &dyn Fn(&Tensor) -> f64, x: &Tensor, players: &Players) -> Vec<f64> {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for k in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(k, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = players.len();
        let all = perms(n);
        let mut phi = vec![0.0; n];
        for order in &all {
            let mut present = vec![false; n];
            let mut prev = model(&masked(x, players, |k| present[k]));
            for &i in order {
                present[i] = true;
                let next = model(&masked(x, players, |k| present[k]));
                phi[i] += next - prev;
                prev = next;
            }
        }
        phi.iter().map(|v| v / all.len() as f64).collect()
    }

    fn nonlinear(x: &Tensor) -> f64 {
        let d = x.data();
        (d[0] * d[1] + d[2]).tanh() + d[3] * d[4] * d[5] - 0.3 * d[6].powi(2) + d[7]
    }

    #[test]
    fn additive_model_gets_its_terms() {
        let x = input(2, 3, 1);
        let w = [0.5, -1.0, 2.0, 0.25, 0.0, 3.0];
        let f = |x: &Tensor| x.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let players = Players::features(2, &["a".into(), "b".into(), "c".into()]);
        let phi = shapley_exact(&f, &x, &players).unwrap();
        for j in 0..3 {
            let expected = w[j] * x.at(0, j) + w[3 + j] * x.at(1, j);
            assert!((phi[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_matches_ordering_enumeration() {
        let x = input(2, 4, 2);
        let players = Players::features(2, &(0..4).map(|j| j.to_string()).collect::<Vec<_>>());
        let phi = shapley_exact(&nonlinear, &x, &players).unwrap();
        let oracle = by_orderings(&nonlinear, &x, &players);
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn axioms_hold_exactly() {
        let x = input(2, 5, 3);
        let players = Players::buckets(2, 5);
        let phi = shapley_exact(&nonlinear, &x, &players).unwrap();
        let total = total_effect(&nonlinear, &x, &players).unwrap();
        assert!((phi.iter().sum::<f64>() - total).abs() < 1e-12);

        let ignores_last = |x: &Tensor| x.data()[0] * 2.0 + x.data()[1].sin();
        let feats = Players::features(2, &(0..5).map(|j| j.to_string()).collect::<Vec<_>>());
        let phi = shapley_exact(&ignores_last, &x, &feats).unwrap();
        assert_eq!(phi[4], 0.0);

        let mut twin = x.clone();
        twin.data_mut()[1] = twin.data()[0];
        let symmetric = |x: &Tensor| (x.data()[0] + x.data()[1]).exp() + x.data()[2];
        let phi = shapley_exact(&symmetric, &twin, &feats).unwrap();
        assert!((phi[0] - phi[1]).abs() < 1e-12);
    }

    #[test]
    fn too_many_players() {
        let x = input(1, 13, 4);
        let players = Players::features(1, &(0..13).map(|j| j.to_string()).collect::<Vec<_>>());
        assert!(matches!(
            shapley_exact(&nonlinear, &x, &players),
            Err(ShapleyError::TooManyGroups(13))
        ));
    }

    #[test]
    fn overlapping_players_rejected() {
        let x = input(2, 2, 5);
        let p = Players {
            names: vec!["a".into(), "b".into()],
            cells: vec![vec![(0, 0)], vec![(0, 0), (1, 1)]],
        };
        assert!(matches!(
            shapley_exact(&nonlinear, &x, &p),
            Err(ShapleyError::InvalidPlayers(_))
        ));
    }

    #[test]
    fn monte_carlo_within_three_standard_errors() {
        let x = input(2, 4, 6);
        let groups: Vec<(String, Vec<usize>)> = vec![
            ("g0".into(), vec![0]),
            ("g1".into(), vec![1]),
            ("g2".into(), vec![2]),
            ("g3".into(), vec![3]),
        ];
        let mut p = Players::feature_groups(1, &groups);
        p.names.extend(["g4".into(), "g5".into()]);
        p.cells.extend([vec![(1, 0), (1, 1)], vec![(1, 2), (1, 3)]]);
        let exact = shapley_exact(&nonlinear, &x, &p).unwrap();
        let mc = shapley_mc(&nonlinear, &x, &p, 400, 11).unwrap();
        for i in 0..6 {
            let se = mc.std_err[i].max(1e-12);
            assert!(
                (mc.phi[i] - exact[i]).abs() <= 3.0 * se + 1e-12,
                "player {i}"
            );
        }
        assert_eq!(mc, shapley_mc(&nonlinear, &x, &p, 400, 11).unwrap());
    }

    #[test]
    fn aggregation_views() {
        let mut s = AttributionTensor::zeros(vec!["a".into(), "b".into()], 3, 2);
        assert!(aggregate_feature(&s, &["x".into(), "y".into()]).is_empty());
        assert!(aggregate_time(&s).iter().all(|v| *v == 0.0));
        s.set(0, 0, 1, -2.0);
        s.set(1, 2, 0, 1.0);
        let r = aggregate_feature(&s, &["x".into(), "y".into()]);
        assert_eq!(r[0].0, "y");
        assert!((r[0].1 - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(aggregate_time(&s), vec![0.5, 0.0, 0.25]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf, &["x".into(), "y".into()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "patient_id,bucket,feature,phi\na,0,y,-2\nb,2,x,1\n"
        );
        let mut g = BTreeMap::new();
        g.insert("both".to_string(), vec!["x".to_string(), "y".to_string()]);
        let grouped = aggregate_feature_groups(&s, &groups_by_name(&["x".into(), "y".into()], &g));
        assert_eq!(grouped.len(), 1);
        assert!(feature_report(&r, 20).starts_with("  1 y"));
    }

    #[test]
    fn tensor_cells_sum_to_total_effect_in_expectation() {
        let x = input(2, 3, 8);
        let f = |x: &Tensor| {
            x.data()
                .iter()
                .enumerate()
                .map(|(k, v)| (k as f64 + 1.0) * v)
                .sum::<f64>()
        };
        let s = AttributionTensor::compute(&f, &[("p".into(), &x)], 3, 1).unwrap();
        for t in 0..2 {
            for j in 0..3 {
                let k = t * 3 + j;
                assert!((s.at(0, t, j) - (k as f64 + 1.0) * x.data()[k]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn efficiency_on_random_inputs(seed in 0u64..1000, groups in 1usize..=10) {
            let x = input(1, groups, seed);
            let names: Vec<String> = (0..groups).map(|j| j.to_string()).collect();
            let players = Players::features(1, &names);
            let f = |x: &Tensor| {
                let d = x.data();
                d.iter().enumerate().map(|(k, v)| (v * (k as f64 + 1.0)).sin()).sum::<f64>()
                    + d.iter().product::<f64>()
            };
            let phi = shapley_exact(&f, &x, &players).unwrap();
            let total = total_effect(&f, &x, &players).unwrap();
            prop_assert!((phi.iter().sum::<f64>() - total).abs() < 1e-9);
        }
    }
}
