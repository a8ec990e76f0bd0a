//! Dataset generation, dataset CSV I/O, separation estimation, and
//! affinity-set configuration parsing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certify::AffinityCollection;
use crate::error::{GloroError, Result};

pub const DATASET_FORMAT_VERSION: &str = "# gloro dataset v1";
pub const AFFINITY_FORMAT_VERSION: &str = "# gloro affinity v1";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// n points, each of dimension d.
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

impl LabeledDataset {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Multiplies every coordinate by `factor` (used to normalize the
    /// inter-class separation scale).
    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.points {
            for v in p {
                *v *= factor;
            }
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(DATASET_FORMAT_VERSION);
        out.push('\n');
        out.push_str(&format!(
            "# generator: {} seed={}{}\n",
            self.meta.generator,
            self.meta.seed,
            self.meta
                .params
                .iter()
                .map(|(k, v)| format!(" {k}={v}"))
                .collect::<String>()
        ));
        out.push_str(&format!("# classes: {}\n", self.class_names.join(",")));
        let d = self.dim();
        let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        out.push_str(&format!("{},label\n", header.join(",")));
        for (p, &y) in self.points.iter().zip(&self.labels) {
            let coords: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{},{y}\n", coords.join(",")));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let first = lines.next().unwrap_or("");
        if first.trim() != DATASET_FORMAT_VERSION {
            return Err(GloroError::Data(format!(
                "unrecognized dataset header: {first:?}"
            )));
        }
        let mut meta = DatasetMeta::default();
        let mut class_names = Vec::new();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut saw_header = false;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# classes:") {
                class_names =
                    rest.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                continue;
            }
            if let Some(rest) = line.strip_prefix("# generator:") {
                for tok in rest.split_whitespace() {
                    match tok.split_once('=') {
                        Some(("seed", v)) => meta.seed = v.parse().unwrap_or(0),
                        Some((k, v)) => {
                            meta.params.insert(k.to_string(), v.to_string());
                        }
                        None => meta.generator = tok.to_string(),
                    }
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if !saw_header {
                saw_header = true; // x1,...,xd,label
                continue;
            }
            let mut fields: Vec<&str> = line.split(',').collect();
            let label: usize = fields
                .pop()
                .ok_or_else(|| GloroError::Data("empty data row".into()))?
                .trim()
                .parse()
                .map_err(|e| GloroError::Data(format!("bad label: {e}")))?;
            let coords = fields
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| GloroError::Data(format!("bad coordinate: {e}")))?;
            points.push(coords);
            labels.push(label);
        }
        if points.is_empty() {
            return Err(GloroError::Data("dataset has no points".into()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(GloroError::Data("inconsistent point dimensions".into()));
        }
        if class_names.is_empty() {
            let c = labels.iter().max().unwrap() + 1;
            class_names = (0..c).map(|i| format!("class{i}")).collect();
        }
        if labels.iter().any(|&y| y >= class_names.len()) {
            return Err(GloroError::Data("label out of range".into()));
        }
        Ok(LabeledDataset { points, labels, class_names, meta })
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Four isotropic Gaussian blobs with means on the unit circle at 0, 90,
/// 180 and 270 degrees; sigma = 0.25 + 0.35 * overlap, so adjacent classes
/// overlap for overlap > 0 while diametrically opposite classes stay
/// separated.
pub fn gen_synthetic_2d(seed: u64, n_per_class: usize, overlap: f64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.25 + 0.35 * overlap;
    let means = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
    let mut points = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(4 * n_per_class);
    for (c, (mx, my)) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            points.push(vec![mx + sigma * normal(&mut rng), my + sigma * normal(&mut rng)]);
            labels.push(c);
        }
    }
    let mut params = BTreeMap::new();
    params.insert("n_per_class".into(), n_per_class.to_string());
    params.insert("overlap".into(), overlap.to_string());
    params.insert("sigma".into(), sigma.to_string());
    LabeledDataset {
        points,
        labels,
        class_names: (0..4).map(|i| format!("class{i}")).collect(),
        meta: DatasetMeta { generator: "synthetic2d".into(), seed, params },
    }
}

pub const ACAS_CLASS_NAMES: [&str; 5] =
    ["hard_left", "left", "clear", "right", "hard_right"];

/// Smooth analytic teacher for the synthetic advisory dataset: a weighted
/// angle-like field over the first two (range-normalized) coordinates,
/// binned into five ordered advisories. Continuity of the field is what
/// makes adjacent-advisory affinity sets meaningful.
pub fn acas_teacher(x: &[f64], ranges: &[(f64, f64)]) -> usize {
    let t = |i: usize| (x[i] - ranges[i].0) / (ranges[i].1 - ranges[i].0);
    let s = t(0) + 0.25 * (2.0 * PI * t(1)).sin();
    // Field range is [-0.25, 1.25]; five equal bins.
    let bin = ((s + 0.25) / 0.3).floor() as isize;
    bin.clamp(0, 4) as usize
}

/// Uniform random points within the given per-coordinate ranges, labeled by
/// the analytic advisory teacher.
pub fn gen_acas_synthetic(
    seed: u64,
    n: usize,
    d: usize,
    ranges: &[(f64, f64)],
) -> Result<LabeledDataset> {
    if d < 2 {
        return Err(GloroError::InvalidArgument("ACAS generator needs d >= 2".into()));
    }
    if ranges.len() != d {
        return Err(GloroError::InvalidArgument(format!(
            "expected {d} ranges, got {}",
            ranges.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p: Vec<f64> =
            ranges.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect();
        labels.push(acas_teacher(&p, ranges));
        points.push(p);
    }
    let mut params = BTreeMap::new();
    params.insert("n".into(), n.to_string());
    params.insert("d".into(), d.to_string());
    Ok(LabeledDataset {
        points,
        labels,
        class_names: ACAS_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        meta: DatasetMeta { generator: "acas_synthetic".into(), seed, params },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationEstimate {
    pub min_interclass_distance: f64,
    /// Half the minimum distance: eps-local-robustness needs a separation
    /// of 2 eps between classes.
    pub suggested_eps: f64,
}

/// Exact brute-force minimum l2 distance between any two points with
/// different labels.
pub fn estimate_separation(dataset: &LabeledDataset) -> Result<SeparationEstimate> {
    let n = dataset.len();
    let distinct = {
        let first = dataset.labels.first();
        dataset.labels.iter().any(|l| Some(l) != first)
    };
    if !distinct {
        return Err(GloroError::Data(
            "separation estimate needs at least two classes present".into(),
        ));
    }
    let min = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in (i + 1)..n {
                if dataset.labels[i] == dataset.labels[j] {
                    continue;
                }
                let d2: f64 = dataset.points[i]
                    .iter()
                    .zip(&dataset.points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = best.min(d2);
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min)
        .sqrt();
    Ok(SeparationEstimate { min_interclass_distance: min, suggested_eps: min / 2.0 })
}

fn resolve_class(name: &str, class_names: &[String]) -> Result<usize> {
    class_names
        .iter()
        .position(|c| c == name.trim())
        .ok_or_else(|| GloroError::Config(format!("unknown class name: {:?}", name.trim())))
}

fn parse_name_list(args: &str, class_names: &[String]) -> Result<Vec<usize>> {
    args.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| resolve_class(s, class_names))
        .collect()
}

/// Parses the line-per-set affinity config format.
///
/// Supported forms (one per line, `#` comments ignored):
/// - `set = name1, name2, ...`
/// - `per_class_with(name1, name2, ...)`: for each class c, the set
///   {c, name1, name2, ...}
/// - `partition(a, b | c, d | ...)`: explicit groups
/// - `adjacent_pairs(name1, name2, ...)`: all pairs of neighbors in the
///   given ordering
pub fn parse_affinity_config(text: &str, class_names: &[String]) -> Result<AffinityCollection> {
    let c = class_names.len();
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("set") {
            let rest = rest.trim_start();
            let body = rest
                .strip_prefix('=')
                .ok_or_else(|| GloroError::Config(format!("malformed set line: {line:?}")))?;
            let set = parse_name_list(body, class_names)?;
            if set.is_empty() {
                return Err(GloroError::Config("empty affinity set".into()));
            }
            sets.push(set);
        } else if let Some(args) = builtin_args(line, "per_class_with")? {
            let with = parse_name_list(&args, class_names)?;
            for class in 0..c {
                let mut set = vec![class];
                for &w in &with {
                    if !set.contains(&w) {
                        set.push(w);
                    }
                }
                set.sort_unstable();
                sets.push(set);
            }
        } else if let Some(args) = builtin_args(line, "partition")? {
            for group in args.split('|') {
                let set = parse_name_list(group, class_names)?;
                if set.is_empty() {
                    return Err(GloroError::Config("empty partition group".into()));
                }
                sets.push(set);
            }
        } else if let Some(args) = builtin_args(line, "adjacent_pairs")? {
            let ordering = parse_name_list(&args, class_names)?;
            if ordering.len() < 2 {
                return Err(GloroError::Config(
                    "adjacent_pairs needs at least two classes".into(),
                ));
            }
            for w in ordering.windows(2) {
                sets.push(vec![w[0], w[1]]);
            }
        } else {
            return Err(GloroError::Config(format!("unrecognized affinity line: {line:?}")));
        }
    }
    AffinityCollection::new(c, sets)
}

fn builtin_args(line: &str, name: &str) -> Result<Option<String>> {
    match line.strip_prefix(name) {
        Some(rest) => {
            let rest = rest.trim();
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| {
                    GloroError::Config(format!("malformed {name}(...) call: {line:?}"))
                })?;
            Ok(Some(inner.to_string()))
        }
        None => Ok(None),
    }
}

pub fn load_affinity_config(path: &Path, class_names: &[String]) -> Result<AffinityCollection> {
    let text = std::fs::read_to_string(path)?;
    parse_affinity_config(&text, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_2d_counts_and_determinism() {
        let a = gen_synthetic_2d(7, 1, 0.0);
        assert_eq!(a.len(), 4);
        assert_eq!(a.labels, vec![0, 1, 2, 3]);
        let b = gen_synthetic_2d(7, 1, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_2d_overlap_regimes() {
        let tight = gen_synthetic_2d(3, 100, 0.0);
        let est = estimate_separation(&tight).unwrap();
        assert!(est.min_interclass_distance > 0.0);

        // overlap = 1: some adjacent cross-class nearest neighbor closer
        // than sigma.
        let loose = gen_synthetic_2d(3, 200, 1.0);
        let sigma = 0.25 + 0.35;
        let est = estimate_separation(&loose).unwrap();
        assert!(est.min_interclass_distance < sigma);
    }

    #[test]
    fn acas_covers_all_advisories() {
        let ranges = vec![(0.0, 1.0); 4];
        let ds = gen_acas_synthetic(5, 5000, 4, &ranges).unwrap();
        let mut seen = [false; 5];
        for &y in &ds.labels {
            seen[y] = true;
        }
        assert!(seen.iter().all(|&b| b), "labels seen: {seen:?}");
    }

    #[test]
    fn acas_label_adjacency() {
        let ranges = vec![(0.0, 1.0); 3];
        let ds = gen_acas_synthetic(6, 4000, 3, &ranges).unwrap();
        let est = estimate_separation(&ds).unwrap();
        let cutoff = est.min_interclass_distance / 2.0;
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                let d: f64 = ds.points[i]
                    .iter()
                    .zip(&ds.points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < cutoff && ds.labels[i] != ds.labels[j] {
                    let step = ds.labels[i].abs_diff(ds.labels[j]);
                    assert_eq!(step, 1, "points {i},{j} at distance {d}");
                }
            }
        }
    }

    #[test]
    fn paper_scale_calibration() {
        let ranges = vec![(0.0, 1.0); 5];
        let mut ds = gen_acas_synthetic(9, 3000, 5, &ranges).unwrap();
        let est = estimate_separation(&ds).unwrap();
        ds.scale(0.02 / est.min_interclass_distance);
        let est = estimate_separation(&ds).unwrap();
        assert!((est.min_interclass_distance - 0.02).abs() < 1e-12);
        assert!((est.suggested_eps - 0.01).abs() < 1e-12);
    }

    #[test]
    fn separation_trivial_cases() {
        let two = LabeledDataset {
            points: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            labels: vec![0, 1],
            class_names: vec!["a".into(), "b".into()],
            meta: DatasetMeta::default(),
        };
        let est = estimate_separation(&two).unwrap();
        assert_eq!(est.min_interclass_distance, 1.0);
        assert_eq!(est.suggested_eps, 0.5);

        let dup = LabeledDataset {
            points: vec![vec![1.0], vec![1.0]],
            labels: vec![0, 1],
            class_names: vec!["a".into(), "b".into()],
            meta: DatasetMeta::default(),
        };
        assert_eq!(estimate_separation(&dup).unwrap().min_interclass_distance, 0.0);

        let single = LabeledDataset {
            points: vec![vec![1.0], vec![2.0]],
            labels: vec![0, 0],
            class_names: vec!["a".into()],
            meta: DatasetMeta::default(),
        };
        assert!(estimate_separation(&single).is_err());
    }

    #[test]
    fn separation_matches_independent_scan() {
        let ds = gen_synthetic_2d(13, 250, 0.5);
        let est = estimate_separation(&ds).unwrap();
        // Independent quadratic scan, sequential and in the other loop order.
        let mut best = f64::INFINITY;
        for j in (0..ds.len()).rev() {
            for i in (0..j).rev() {
                if ds.labels[i] == ds.labels[j] {
                    continue;
                }
                let d: f64 = ds.points[i]
                    .iter()
                    .zip(&ds.points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        assert_eq!(est.min_interclass_distance, best);
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_synthetic_2d(17, 10, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        ds.save_csv(&path).unwrap();
        let loaded = LabeledDataset::load_csv(&path).unwrap();
        assert_eq!(ds.points, loaded.points);
        assert_eq!(ds.labels, loaded.labels);
        assert_eq!(ds.class_names, loaded.class_names);
    }

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn affinity_adjacent_pairs() {
        let class_names = names(&ACAS_CLASS_NAMES);
        let text = "# gloro affinity v1\nadjacent_pairs(hard_left, left, clear, right, hard_right)\n";
        let s = parse_affinity_config(text, &class_names).unwrap();
        assert_eq!(s.sets, vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 4]]);
        assert_eq!(s.kmax, 2);
        assert!(s.covers_all_classes);
    }

    #[test]
    fn affinity_per_class_with() {
        let class_names: Vec<String> = (0..10)
            .map(|i| match i {
                3 => "highway".to_string(),
                8 => "river".to_string(),
                i => format!("c{i}"),
            })
            .collect();
        let s =
            parse_affinity_config("per_class_with(highway, river)", &class_names).unwrap();
        assert_eq!(s.sets.len(), 10);
        for (c, set) in s.sets.iter().enumerate() {
            assert!(set.len() <= 3);
            assert!(set.contains(&c) && set.contains(&3) && set.contains(&8));
        }
        assert!(s.covers_all_classes);
    }

    #[test]
    fn affinity_partition_superclasses() {
        let class_names: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
        let groups: Vec<String> = (0..20)
            .map(|g| (0..5).map(|i| format!("c{}", g * 5 + i)).collect::<Vec<_>>().join(", "))
            .collect();
        let text = format!("partition({})", groups.join(" | "));
        let s = parse_affinity_config(&text, &class_names).unwrap();
        assert_eq!(s.sets.len(), 20);
        assert_eq!(s.kmax, 5);
        assert!(s.covers_all_classes);
        // Every class covered exactly once.
        for c in 0..100 {
            assert_eq!(s.sets.iter().filter(|set| set.contains(&c)).count(), 1);
        }
    }

    #[test]
    fn affinity_errors() {
        let class_names = names(&["a", "b"]);
        assert!(parse_affinity_config("set = a, zebra", &class_names).is_err());
        assert!(parse_affinity_config("set = ", &class_names).is_err());
        assert!(parse_affinity_config("", &class_names).is_err());
    }
}
