use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassificationSample, DataError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.70, val: 0.10, test: 0.20 }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ClassificationSample>,
    pub val: Vec<ClassificationSample>,
    pub test: Vec<ClassificationSample>,
}

/// `n * r` with float noise removed, so 7 * 0.7 counts as exactly 4.9.
fn ideal(n: usize, r: f64) -> f64 {
    (n as f64 * r * 1e9).round() / 1e9
}

/// Largest-remainder apportionment of `n` items over `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = ratios.iter().map(|&r| ideal(n, r)).collect();
    let mut counts = [0usize; 3];
    for (c, x) in counts.iter_mut().zip(&ideal) {
        *c = x.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[s] > 0.0 {
            counts[s] += 1;
            left -= 1;
        }
    }
    counts
}

/// Breadth-first search for a chain of single-sample moves that gives
/// stratum `start` one more sample in some split without pushing any stratum
/// outside its floor/ceiling band. Each hop is `(gains, split, loses)`.
fn augmenting_path(
    start: usize,
    floors: &[[usize; 3]],
    alloc: &[[usize; 3]],
    fracs: &[(f64, usize, usize)],
    filled: &[usize; 3],
    targets: &[usize; 3],
) -> Option<Vec<(usize, usize, Option<usize>)>> {
    let can_gain = |u: usize, s: usize| {
        alloc[u][s] == floors[u][s] && fracs.iter().any(|&(_, fu, fs)| fu == u && fs == s)
    };
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; alloc.len()];
    let mut seen = vec![false; alloc.len()];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for s in (0..3).filter(|&s| can_gain(u, s)) {
            let walk_back = |mut hops: Vec<(usize, usize, Option<usize>)>| {
                let mut cur = u;
                while let Some((p, ps)) = prev[cur] {
                    hops.push((p, ps, Some(cur)));
                    cur = p;
                }
                hops
            };
            if filled[s] < targets[s] {
                return Some(walk_back(vec![(u, s, None)]));
            }
            for v in 0..alloc.len() {
                if !seen[v] && alloc[v][s] > floors[v][s] {
                    seen[v] = true;
                    prev[v] = Some((u, s));
                    queue.push_back(v);
                }
            }
        }
    }
    None
}

/// Stratified split by `(dataset_id, label)`.
///
/// Split totals follow a largest-remainder apportionment of the whole set;
/// each stratum's share of a split stays within one sample of its ideal.
/// Within a split, samples keep their input order.
pub fn split_dataset(samples: &[ClassificationSample], ratios: SplitRatios, seed: u64) -> Result<Split, DataError> {
    let r = ratios.as_array();
    if r.iter().any(|x| x.is_nan() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(r));
    }
    let mut strata: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry((s.dataset_id.clone(), s.label)).or_default().push(i);
    }
    for ((dataset, label), idx) in &strata {
        if idx.len() < 3 {
            return Err(DataError::CannotStratify { dataset: dataset.clone(), label: *label, count: idx.len() });
        }
    }

    let targets = apportion(samples.len(), &r);
    let mut floors: Vec<[usize; 3]> = Vec::with_capacity(strata.len());
    let mut fracs: Vec<(f64, usize, usize)> = Vec::new();
    for (si, idx) in strata.values().enumerate() {
        let mut a = [0usize; 3];
        for s in 0..3 {
            let x = ideal(idx.len(), r[s]);
            a[s] = x.floor() as usize;
            if x > x.floor() {
                fracs.push((x - x.floor(), si, s));
            }
        }
        floors.push(a);
    }
    let mut alloc = floors.clone();
    let mut filled = [0usize; 3];
    for a in &alloc {
        for s in 0..3 {
            filled[s] += a[s];
        }
    }
    let mut leftover: Vec<usize> =
        strata.values().zip(&alloc).map(|(idx, a)| idx.len() - a.iter().sum::<usize>()).collect();
    // one extra per (stratum, split) pair by largest remainder
    fracs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    for &(_, si, s) in &fracs {
        if leftover[si] > 0 && filled[s] < targets[s] {
            alloc[si][s] += 1;
            filled[s] += 1;
            leftover[si] -= 1;
        }
    }
    // the greedy pass can strand a stratum; reroute extras along an
    // augmenting path (stratum -> split -> stratum holding an extra there -> ...)
    for si in 0..alloc.len() {
        while leftover[si] > 0 {
            let s = match augmenting_path(si, &floors, &alloc, &fracs, &filled, &targets) {
                Some(path) => {
                    for (u, s, v) in path {
                        alloc[u][s] += 1;
                        if let Some(v) = v {
                            alloc[v][s] -= 1;
                        }
                    }
                    None
                }
                None => (0..3).find(|&s| filled[s] < targets[s]),
            };
            if let Some(s) = s {
                alloc[si][s] += 1;
            }
            filled = [0; 3];
            for a in &alloc {
                for s in 0..3 {
                    filled[s] += a[s];
                }
            }
            leftover[si] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dest: Vec<Option<usize>> = vec![None; samples.len()];
    for (idx, a) in strata.values().zip(&alloc) {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let mut it = shuffled.into_iter();
        for (s, &count) in a.iter().enumerate() {
            for i in it.by_ref().take(count) {
                dest[i] = Some(s);
            }
        }
    }
    let mut out = Split::default();
    for (s, d) in samples.iter().zip(dest) {
        match d {
            Some(0) => out.train.push(s.clone()),
            Some(1) => out.val.push(s.clone()),
            _ => out.test.push(s.clone()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_task, SynthConfig};

    fn ten_classes_of_ten() -> Vec<ClassificationSample> {
        generate_synthetic_task(&SynthConfig::new("d", 10, 10, 10, 1.0, 0)).unwrap()
    }

    #[test]
    fn default_ratios_give_70_10_20() {
        let s = split_dataset(&ten_classes_of_ten(), SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
    }

    #[test]
    fn all_train() {
        let r = SplitRatios { train: 1.0, val: 0.0, test: 0.0 };
        let s = split_dataset(&ten_classes_of_ten(), r, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (100, 0, 0));
    }

    #[test]
    fn bad_ratios_and_tiny_classes() {
        let r = SplitRatios { train: 0.5, val: 0.1, test: 0.2 };
        assert!(matches!(split_dataset(&ten_classes_of_ten(), r, 0), Err(DataError::BadRatios(_))));
        let few = generate_synthetic_task(&SynthConfig::new("d", 2, 2, 2, 1.0, 0)).unwrap();
        let err = split_dataset(&few, SplitRatios::default(), 0).unwrap_err();
        assert!(err.to_string().starts_with("cannot stratify"));
    }

    #[test]
    fn deterministic_under_seed() {
        let data = ten_classes_of_ten();
        assert_eq!(
            split_dataset(&data, SplitRatios::default(), 4).unwrap(),
            split_dataset(&data, SplitRatios::default(), 4).unwrap()
        );
        assert_ne!(
            split_dataset(&data, SplitRatios::default(), 4).unwrap(),
            split_dataset(&data, SplitRatios::default(), 5).unwrap()
        );
    }
}
