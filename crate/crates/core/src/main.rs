//! Command-line surface: dataset generation, training, certification,
//! evaluation, boundary export, and falsification attacks.
//!
//! Every run writes a resolved-config snapshot next to its outputs, and
//! every CSV output names that snapshot in a header comment. Exit codes:
//! 0 success, 2 config error, 3 data/io error, 4 certification refused,
//! 5 attack violation found.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use gloro::certify::{certify_point, Guarantee};
use gloro::data::{
    estimate_separation, gen_acas_synthetic, gen_synthetic_2d, load_affinity_config,
    LabeledDataset,
};
use gloro::error::GloroError;
use gloro::eval::report;
use gloro::falsify::{pgd_safe_set_attack, sphere_sample_check, AttackKind};
use gloro::lipschitz::{converged_bounds, BoundMode};
use gloro::net::{rank_classes, Network};
use gloro::train::{
    init_dense_net, save_history_csv, train, LossKind, LrSchedule, ScheduleShape, TradesSchedule,
    TrainConfig,
};

const OUT_DIR_ENV: &str = "GLORO_OUT_DIR";

#[derive(Parser)]
#[command(name = "gloro", about = "Train and certify relaxed-robustness classifiers")]
struct Cli {
    /// Key = value config file; explicit flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $GLORO_OUT_DIR or the current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV.
    GenData(GenDataArgs),
    /// Train a certified head and save the model plus its history.
    Train(TrainArgs),
    /// Emit per-point certificate records for a dataset.
    Certify(CertifyArgs),
    /// Emit a metrics CSV row per model (plus mean/stddev when several).
    Eval(EvalArgs),
    /// Export a 2D decision/certificate grid (CSV, optional SVG).
    Boundary(BoundaryArgs),
    /// Attack certified points with PGD and sphere sampling.
    Attack(AttackArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// "2d" or "acas".
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Points per class (2d) or total points (acas).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    /// Input dimension for the acas generator.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// "standard", "rtk", or "affinity".
    #[arg(long)]
    guarantee: Option<String>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    affinity: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated hidden widths, e.g. "64,64".
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    lr_onset: Option<f64>,
    /// "ce" or "trades".
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda_start: Option<f64>,
    #[arg(long)]
    lambda_end: Option<f64>,
    /// "linear" or "log".
    #[arg(long)]
    lambda_shape: Option<String>,
    #[arg(long)]
    lambda_onset: Option<f64>,
    #[arg(long)]
    power_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    guarantee: Option<String>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    affinity: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// One or more model files; several produce mean and stddev rows.
    #[arg(long)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundaryArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    xmin: Option<f64>,
    #[arg(long)]
    xmax: Option<f64>,
    #[arg(long)]
    ymin: Option<f64>,
    #[arg(long)]
    ymax: Option<f64>,
    /// Grid resolution per axis.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional vector-graphic rendering of the grid.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config resolution

/// Settings resolved from (CLI flag, config file entry, default), in that
/// precedence order; records every resolved value for the snapshot.
struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> Result<Self, GloroError> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                GloroError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(GloroError::Config(format!(
                        "config line {}: expected key = value, got {line:?}",
                        ln + 1
                    )));
                };
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Resolver { file, resolved: BTreeMap::new() })
    }

    fn get<T: Clone + std::str::FromStr + std::fmt::Display>(
        &mut self,
        cli: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, GloroError> {
        let value = match cli {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    GloroError::Config(format!("config key {key}: cannot parse {raw:?}"))
                })?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn get_opt<T: Clone + std::str::FromStr + std::fmt::Display>(
        &mut self,
        cli: Option<T>,
        key: &str,
    ) -> Result<Option<T>, GloroError> {
        let value = match cli {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse().map_err(|_| {
                    GloroError::Config(format!("config key {key}: cannot parse {raw:?}"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    fn get_path(
        &mut self,
        cli: Option<PathBuf>,
        key: &str,
    ) -> Result<Option<PathBuf>, GloroError> {
        let value = cli.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.display().to_string());
        }
        Ok(value)
    }

    fn require_path(&mut self, cli: Option<PathBuf>, key: &str) -> Result<PathBuf, GloroError> {
        self.get_path(cli, key)?
            .ok_or_else(|| GloroError::Config(format!("missing required setting --{key}")))
    }

    /// Writes the resolved settings and returns the snapshot path.
    fn snapshot(&self, out_dir: &Path, command: &str) -> Result<PathBuf, GloroError> {
        let path = out_dir.join(format!("{command}.resolved.conf"));
        let mut text = String::new();
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn out_dir(cli: Option<PathBuf>) -> Result<PathBuf, GloroError> {
    let dir = cli
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn resolve_guarantee(
    name: &str,
    k: usize,
    affinity: Option<&Path>,
    class_names: &[String],
    num_classes: usize,
) -> Result<Guarantee, GloroError> {
    match name {
        "standard" => Ok(Guarantee::Standard),
        "rtk" => Ok(Guarantee::Rtk { k }),
        "affinity" => {
            let path = affinity.ok_or_else(|| {
                GloroError::Config("affinity guarantee requires --affinity <path>".into())
            })?;
            let names: Vec<String> = if class_names.len() == num_classes {
                class_names.to_vec()
            } else {
                (0..num_classes).map(|i| i.to_string()).collect()
            };
            Ok(Guarantee::Affinity(load_affinity_config(path, &names)?))
        }
        other => Err(GloroError::Config(format!(
            "unknown guarantee {other:?} (expected standard, rtk, or affinity)"
        ))),
    }
}

fn safe_set_names(set: &[usize], class_names: &[String]) -> String {
    set.iter()
        .map(|&i| {
            class_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| i.to_string())
        })
        .collect::<Vec<_>>()
        .join(";")
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_gen_data(args: GenDataArgs, mut r: Resolver, dir: &Path) -> Result<u8, GloroError> {
    let dataset = args.dataset.clone();
    let dataset = r.get(dataset, "dataset", "2d".to_string())?;
    let seed = r.get(args.seed, "seed", 0u64)?;
    let out = r
        .get_path(args.out, "out")?
        .unwrap_or_else(|| dir.join(format!("{dataset}.csv")));
    let ds = match dataset.as_str() {
        "2d" => {
            let n = r.get(args.n, "n", 500usize)?;
            let overlap = r.get(args.overlap, "overlap", 0.6f64)?;
            gen_synthetic_2d(seed, n, overlap)
        }
        "acas" => {
            let n = r.get(args.n, "n", 2000usize)?;
            let d = r.get(args.dims, "dims", 5usize)?;
            let ranges: Vec<(f64, f64)> = vec![(0.0, 1.0); d];
            gen_acas_synthetic(seed, n, d, &ranges)?
        }
        other => {
            return Err(GloroError::Config(format!(
                "unknown dataset {other:?} (expected 2d or acas)"
            )))
        }
    };
    let snapshot = r.snapshot(dir, "gen-data")?;
    ds.save_csv(&out)?;
    append_config_ref(&out, &snapshot)?;
    let sep = estimate_separation(&ds)?;
    println!(
        "wrote {} ({} points, {} classes); min inter-class distance {:.6}, suggested eps {:.6}",
        out.display(),
        ds.len(),
        ds.num_classes(),
        sep.min_interclass_distance,
        sep.suggested_eps
    );
    Ok(0)
}

/// Datasets and grids are CSV with `#` comment headers; record the snapshot
/// as one more comment line.
fn append_config_ref(csv: &Path, snapshot: &Path) -> Result<(), GloroError> {
    let text = std::fs::read_to_string(csv)?;
    let line = format!("# config: {}\n", snapshot.display());
    let rewritten = if let Some(rest) = text.strip_prefix('#') {
        // Keep the format-version line first.
        match rest.split_once('\n') {
            Some((first, tail)) => format!("#{first}\n{line}{tail}"),
            None => format!("#{rest}\n{line}"),
        }
    } else {
        format!("{line}{text}")
    };
    std::fs::write(csv, rewritten)?;
    Ok(())
}

fn cmd_train(args: TrainArgs, mut r: Resolver, dir: &Path) -> Result<u8, GloroError> {
    let data_path = r.require_path(args.data, "data")?;
    let ds = LabeledDataset::load_csv(&data_path)?;
    let guarantee_name = r.get(args.guarantee, "guarantee", "standard".to_string())?;
    let k = r.get(args.k, "K", 2usize)?;
    let affinity = r.get_path(args.affinity, "affinity")?;
    let guarantee = resolve_guarantee(
        &guarantee_name,
        k,
        affinity.as_deref(),
        &ds.class_names,
        ds.num_classes(),
    )?;
    let eps = r.get(args.eps, "eps", 0.3f64)?;
    let epochs = r.get(args.epochs, "epochs", 200usize)?;
    let batch_size = r.get(args.batch_size, "batch-size", 256usize)?;
    let arch = r.get(args.arch, "arch", "64,64".to_string())?;
    let hidden: Vec<usize> = if arch.trim().is_empty() {
        vec![]
    } else {
        arch.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| GloroError::Config(format!("bad arch entry {s:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let lr = LrSchedule {
        start: r.get(args.lr_start, "lr-start", 1e-3)?,
        end: r.get(args.lr_end, "lr-end", 1e-6)?,
        decay_onset: r.get(args.lr_onset, "lr-onset", 0.5)?,
    };
    let loss_name = r.get(args.loss, "loss", "ce".to_string())?;
    let loss = match loss_name.as_str() {
        "ce" => LossKind::CrossEntropy,
        "trades" => {
            let shape = match r.get(args.lambda_shape, "lambda-shape", "linear".to_string())?.as_str()
            {
                "linear" => ScheduleShape::Linear,
                "log" => ScheduleShape::Logarithmic,
                other => {
                    return Err(GloroError::Config(format!(
                        "unknown lambda shape {other:?} (expected linear or log)"
                    )))
                }
            };
            LossKind::Trades(TradesSchedule {
                start: r.get(args.lambda_start, "lambda-start", 1.0)?,
                end: r.get(args.lambda_end, "lambda-end", 1.2)?,
                shape,
                onset: r.get(args.lambda_onset, "lambda-onset", 1.0)?,
            })
        }
        other => {
            return Err(GloroError::Config(format!(
                "unknown loss {other:?} (expected ce or trades)"
            )))
        }
    };
    let seed = r.get(args.seed, "seed", 0u64)?;
    let eval_every = r.get_opt(args.eval_every, "eval-every")?;
    let out = r
        .get_path(args.out, "out")?
        .unwrap_or_else(|| dir.join("model.json"));
    let config = TrainConfig {
        epochs,
        batch_size,
        lr,
        loss,
        power_iters: r.get(args.power_iters, "power-iters", 2usize)?,
        eps,
        guarantee,
        seed,
        eval_every,
    };
    let snapshot = r.snapshot(dir, "train")?;
    let net = init_dense_net(ds.dim(), &hidden, ds.num_classes(), seed);
    let mut result = train(net, &ds, &config)?;
    result.net.metadata.class_names = Some(ds.class_names.clone());
    result
        .net
        .metadata
        .extra
        .insert("config".into(), snapshot.display().to_string());
    result.net.save(&out)?;
    let history_path = out.with_extension("history.csv");
    save_history_csv(&result.history, &history_path)?;
    append_config_ref(&history_path, &snapshot)?;
    let last = result.history.last().unwrap();
    println!(
        "wrote {} and {}; final loss {:.4}, clean acc {:.4}",
        out.display(),
        history_path.display(),
        last.loss,
        last.clean_acc
    );
    Ok(0)
}

fn load_model_guarantee(
    r: &mut Resolver,
    net: &Network,
    guarantee: Option<String>,
    k: Option<usize>,
    affinity: Option<PathBuf>,
) -> Result<Guarantee, GloroError> {
    let meta = &net.metadata;
    let default_name = meta.guarantee.clone().unwrap_or_else(|| "standard".into());
    let name = r.get(guarantee, "guarantee", default_name)?;
    if name == "affinity" && affinity.is_none() {
        if let Some(sets) = &meta.affinity_sets {
            let s = gloro::certify::AffinityCollection::new(net.num_classes, sets.clone())?;
            return Ok(Guarantee::Affinity(s));
        }
    }
    let k = r.get(k, "K", meta.k.unwrap_or(2))?;
    let names = meta.class_names.clone().unwrap_or_default();
    resolve_guarantee(&name, k, r.get_path(affinity, "affinity")?.as_deref(), &names, net.num_classes)
}

fn cmd_certify(args: CertifyArgs, mut r: Resolver, dir: &Path) -> Result<u8, GloroError> {
    let model_path = r.require_path(args.model, "model")?;
    let net = Network::load(&model_path)?;
    let data_path = r.require_path(args.data, "data")?;
    let ds = LabeledDataset::load_csv(&data_path)?;
    let eps = r.get(args.eps, "eps", net.metadata.epsilon.unwrap_or(0.1))?;
    let guarantee = load_model_guarantee(&mut r, &net, args.guarantee, args.k, args.affinity)?;
    let out = r
        .get_path(args.out, "out")?
        .unwrap_or_else(|| dir.join("certificates.csv"));
    if let Guarantee::Rtk { k } = guarantee {
        if k > net.num_classes - 1 {
            eprintln!(
                "warning: K = {k} exceeds C - 1 = {}; clamping",
                net.num_classes - 1
            );
        }
    }
    let snapshot = r.snapshot(dir, "certify")?;
    let seed = net.metadata.power_seed.unwrap_or(0);
    let bounds = converged_bounds(&net, seed, BoundMode::Pairwise)?;
    let class_names = net.metadata.class_names.clone().unwrap_or_default();
    let results: Vec<_> = ds
        .points
        .par_iter()
        .map(|x| certify_point(&net, &bounds, eps, &guarantee, x))
        .collect::<Result<_, _>>()?;
    let mut text = format!("# config: {}\n", snapshot.display());
    text.push_str("point_id,accepted,kstar,safe_set,margin,radius\n");
    for (i, res) in results.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i,
            res.accepted,
            res.kstar.map(|k| k.to_string()).unwrap_or_default(),
            res.safe_set
                .as_ref()
                .map(|s| safe_set_names(s, &class_names))
                .unwrap_or_default(),
            res.margin,
            res.radius.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(&out, text)?;
    let accepted = results.iter().filter(|r| r.accepted).count();
    println!(
        "wrote {}; {accepted}/{} accepted at eps {eps}",
        out.display(),
        results.len()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs, mut r: Resolver, dir: &Path) -> Result<u8, GloroError> {
    let models = if args.model.is_empty() {
        vec![r.require_path(None, "model")?]
    } else {
        for (i, m) in args.model.iter().enumerate() {
            r.resolved.insert(format!("model.{i}"), m.display().to_string());
        }
        args.model
    };
    let data_path = r.require_path(args.data, "data")?;
    let ds = LabeledDataset::load_csv(&data_path)?;
    let out = r
        .get_path(args.out, "out")?
        .unwrap_or_else(|| dir.join("metrics.csv"));
    let eps_override = r.get_opt(args.eps, "eps")?;
    let snapshot = r.snapshot(dir, "eval")?;
    let dataset_name = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut text = format!("# config: {}\n", snapshot.display());
    text.push_str("dataset,guarantee,eps,vra,rejection_rate,clean_accuracy,n,seed\n");
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    let mut guarantee_name = String::new();
    let mut eps_used = 0.0;
    for model_path in &models {
        let net = Network::load(model_path)?;
        let eps = eps_override.unwrap_or_else(|| net.metadata.epsilon.unwrap_or(0.1));
        let guarantee = load_model_guarantee(&mut r, &net, None, None, None)?;
        let seed = net.metadata.power_seed.unwrap_or(0);
        let bounds = converged_bounds(&net, seed, BoundMode::Pairwise)?;
        let results: Vec<_> = ds
            .points
            .par_iter()
            .map(|x| certify_point(&net, &bounds, eps, &guarantee, x))
            .collect::<Result<_, _>>()?;
        let logits: Vec<Vec<f64>> = ds
            .points
            .iter()
            .map(|x| net.forward(x))
            .collect::<Result<_, _>>()?;
        let m = report(&results, &ds.labels, &logits, &guarantee, eps)?;
        text.push_str(&format!(
            "{dataset_name},{},{},{},{},{},{},{}\n",
            m.guarantee, m.eps, m.vra, m.rejection_rate, m.clean_accuracy, m.n, seed
        ));
        rows.push((m.vra, m.rejection_rate, m.clean_accuracy));
        guarantee_name = m.guarantee.to_string();
        eps_used = eps;
    }
    if rows.len() > 1 {
        let n = rows.len() as f64;
        let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let std = |f: fn(&(f64, f64, f64)) -> f64, m: f64| {
            (rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let (mv, mr, mc) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
        text.push_str(&format!(
            "{dataset_name},{guarantee_name},{eps_used},{mv},{mr},{mc},{},mean\n",
            ds.len()
        ));
        text.push_str(&format!(
            "{dataset_name},{guarantee_name},{eps_used},{},{},{},{},stddev\n",
            std(|r| r.0, mv),
            std(|r| r.1, mr),
            std(|r| r.2, mc),
            ds.len()
        ));
    }
    std::fs::write(&out, text)?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_boundary(args: BoundaryArgs, mut r: Resolver, dir: &Path) -> Result<u8, GloroError> {
    let model_path = r.require_path(args.model, "model")?;
    let net = Network::load(&model_path)?;
    if net.input_dim() != 2 {
        return Err(GloroError::InvalidArgument(format!(
            "boundary export requires a 2D-input model, got input dimension {}",
            net.input_dim()
        )));
    }
    let eps = r.get(args.eps, "eps", net.metadata.epsilon.unwrap_or(0.1))?;
    let guarantee = load_model_guarantee(&mut r, &net, None, None, None)?;
    let xmin = r.get(args.xmin, "xmin", -2.0)?;
    let xmax = r.get(args.xmax, "xmax", 2.0)?;
    let ymin = r.get(args.ymin, "ymin", -2.0)?;
    let ymax = r.get(args.ymax, "ymax", 2.0)?;
    let res = r.get(args.resolution, "resolution", 50usize)?;
    if res == 0 || xmax <= xmin || ymax <= ymin {
        return Err(GloroError::Config("empty boundary grid".into()));
    }
    let out = r
        .get_path(args.out, "out")?
        .unwrap_or_else(|| dir.join("boundary.csv"));
    let svg = r.get_path(args.svg, "svg")?;
    let snapshot = r.snapshot(dir, "boundary")?;
    let seed = net.metadata.power_seed.unwrap_or(0);
    let bounds = converged_bounds(&net, seed, BoundMode::Pairwise)?;
    let class_names = net.metadata.class_names.clone().unwrap_or_default();
    let coord = |lo: f64, hi: f64, i: usize| {
        if res == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (res - 1) as f64
        }
    };
    let cells: Vec<(usize, usize)> =
        (0..res).flat_map(|iy| (0..res).map(move |ix| (ix, iy))).collect();
    let rows: Vec<_> = cells
        .par_iter()
        .map(|&(ix, iy)| {
            let x = coord(xmin, xmax, ix);
            let y = coord(ymin, ymax, iy);
            let res = certify_point(&net, &bounds, eps, &guarantee, &[x, y])?;
            let logits = net.forward(&[x, y])?;
            let argmax = rank_classes(&logits)[0];
            Ok::<_, GloroError>((x, y, argmax, res))
        })
        .collect::<Result<_, _>>()?;
    let mut text = format!("# config: {}\n", snapshot.display());
    text.push_str("x,y,argmax,accepted,kstar,smallest_safe_set\n");
    for (x, y, argmax, res) in &rows {
        text.push_str(&format!(
            "{x},{y},{},{},{},{}\n",
            safe_set_names(&[*argmax], &class_names),
            res.accepted,
            res.kstar.map(|k| k.to_string()).unwrap_or_default(),
            res.smallest_safe_set
                .as_ref()
                .map(|s| safe_set_names(s, &class_names))
                .unwrap_or_default(),
        ));
    }
    std::fs::write(&out, text)?;
    if let Some(svg_path) = svg {
        let svg_text = render_boundary_svg(&rows, res, net.num_classes);
        std::fs::write(&svg_path, svg_text)?;
        println!("wrote {}", svg_path.display());
    }
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(0)
}

/// Cells colored by the smallest certified safe set: hue by the sorted set
/// identity, lightness by set size, dark gray for rejected (bottom) cells.
fn render_boundary_svg(
    rows: &[(f64, f64, usize, gloro::certify::CertificationResult)],
    res: usize,
    num_classes: usize,
) -> String {
    let cell = 8;
    let size = res * cell;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    );
    for (i, (_, _, argmax, r)) in rows.iter().enumerate() {
        let ix = i % res;
        let iy = i / res;
        let color = match &r.smallest_safe_set {
            None => "#404040".to_string(),
            Some(set) => {
                // Hue from the set's lead class, lightness from its size.
                let hue = 360.0 * set[0] as f64 / num_classes as f64;
                let light = 40.0 + 12.0 * (set.len() as f64 - 1.0);
                let _ = argmax;
                format!("hsl({hue:.0},70%,{:.0}%)", light.min(85.0))
            }
        };
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{color}\"/>\n",
            ix * cell,
            (res - 1 - iy) * cell,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_attack(args: AttackArgs, mut r: Resolver, dir: &Path) -> Result<u8, GloroError> {
    let model_path = r.require_path(args.model, "model")?;
    let net = Network::load(&model_path)?;
    let data_path = r.require_path(args.data, "data")?;
    let ds = LabeledDataset::load_csv(&data_path)?;
    let eps = r.get(args.eps, "eps", net.metadata.epsilon.unwrap_or(0.1))?;
    let steps = r.get(args.steps, "steps", 200usize)?;
    let restarts = r.get(args.restarts, "restarts", 10usize)?;
    let samples = r.get(args.samples, "samples", 10_000usize)?;
    let seed = r.get(args.seed, "seed", 0u64)?;
    let guarantee = load_model_guarantee(&mut r, &net, None, None, None)?;
    let out = r
        .get_path(args.out, "out")?
        .unwrap_or_else(|| dir.join("attacks.csv"));
    let snapshot = r.snapshot(dir, "attack")?;
    let bounds = converged_bounds(&net, net.metadata.power_seed.unwrap_or(0), BoundMode::Pairwise)?;
    let reports: Vec<_> = ds
        .points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let cert = certify_point(&net, &bounds, eps, &guarantee, x)?;
            let Some(safe_set) = cert.safe_set else {
                return Ok::<_, GloroError>(vec![]);
            };
            let pgd = pgd_safe_set_attack(&net, i, x, eps, &safe_set, steps, restarts, seed + i as u64)?;
            let sphere =
                sphere_sample_check(&net, i, x, eps, &safe_set, samples, seed + i as u64)?;
            Ok(vec![pgd, sphere])
        })
        .collect::<Result<_, _>>()?;
    let mut text = format!("# config: {}\n", snapshot.display());
    text.push_str("point_id,attack,eps,safe_set,violated,max_disruption_margin,witness_norm\n");
    let mut violations = 0usize;
    let mut attacked = 0usize;
    for rep in reports.iter().flatten() {
        attacked += 1;
        if rep.violated {
            violations += 1;
        }
        let wnorm = rep
            .witness
            .as_ref()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt().to_string())
            .unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rep.point_id,
            match rep.attack {
                AttackKind::Pgd => "pgd",
                AttackKind::SphereSample => "sphere",
            },
            rep.eps,
            rep.safe_set.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            rep.violated,
            rep.max_disruption_margin,
            wnorm,
        ));
    }
    std::fs::write(&out, text)?;
    println!(
        "wrote {}; {attacked} attack runs, {violations} violations",
        out.display()
    );
    Ok(if violations > 0 { 5 } else { 0 })
}

fn run() -> Result<u8, GloroError> {
    let cli = Cli::parse();
    let resolver = Resolver::load(cli.config.as_deref())?;
    let dir = out_dir(cli.out_dir)?;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, resolver, &dir),
        Command::Train(a) => cmd_train(a, resolver, &dir),
        Command::Certify(a) => cmd_certify(a, resolver, &dir),
        Command::Eval(a) => cmd_eval(a, resolver, &dir),
        Command::Boundary(a) => cmd_boundary(a, resolver, &dir),
        Command::Attack(a) => cmd_attack(a, resolver, &dir),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                GloroError::Config(_) | GloroError::InvalidArgument(_) => 2,
                GloroError::CertificationRefused(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
