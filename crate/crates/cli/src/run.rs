//! Resolved run descriptions, their `run.json` echo, and command bodies.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nddr::checkpoint::Checkpoint;
use nddr::data::{
    gen_attr_tasks, gen_shapes_tasks, load_dataset, save_dataset, Dataset, Manifest, Split,
};
use nddr::fusion::{count_fusion_params, InitPolicy, NormPlacement};
use nddr::gradsuite::{check_all, check_op, GRAD_TOL};
use nddr::metrics::{MetricsLog, MetricsReport};
use nddr::net::{
    BackboneSpec, HeadSpec, Mode, NetConfig, Network, ParamLedger, PoolKind, StageSpec,
};
use nddr::train::{evaluate, heads_for, train as train_net, TrainConfig};

use crate::ablate::AblateRun;
use crate::config::ConfigFile;
use crate::{CheckFailed, CountArgs, GenDataArgs, GradcheckArgs, RunFlags, UsageError};

pub const RUN_FILE: &str = "run.json";

/// Everything a command needs to run again, as written to `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunEcho {
    GenData(GenRun),
    Train(TrainRun),
    Ablate(AblateRun),
}

pub fn write_echo(dir: &Path, echo: &RunEcho) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = serde_json::to_string_pretty(echo)?;
    fs::write(dir.join(RUN_FILE), text + "\n")
        .with_context(|| format!("writing {}", dir.join(RUN_FILE).display()))?;
    Ok(())
}

pub fn read_echo(path: &Path) -> Result<RunEcho> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRun {
    pub generator: String,
    pub n: usize,
    pub hw: usize,
    pub classes: usize,
    pub seed: u64,
    pub split: Split,
    pub out: PathBuf,
}

impl GenRun {
    pub fn resolve(a: GenDataArgs) -> Result<Self> {
        let split: Split = a
            .split
            .parse()
            .map_err(|e| UsageError(format!("--split: {e}")))?;
        if a.n == 0 {
            bail!(UsageError("--n must be ≥ 1".into()));
        }
        match a.generator.as_str() {
            "shapes" => {
                if a.hw == 0 || a.hw % nddr::data::POOL_FACTOR != 0 {
                    bail!(UsageError(format!(
                        "--hw {} is not a multiple of {} (2^stages of the 4-stage backbone)",
                        a.hw,
                        nddr::data::POOL_FACTOR
                    )));
                }
            }
            "attrs" => {
                if a.hw < 4 {
                    bail!(UsageError("--hw must be ≥ 4".into()));
                }
            }
            other => bail!(UsageError(format!(
                "unknown generator `{other}` (shapes | attrs)"
            ))),
        }
        Ok(GenRun {
            generator: a.generator,
            n: a.n,
            hw: a.hw,
            classes: a.classes,
            seed: a.seed,
            split,
            out: a.out,
        })
    }
}

pub fn gen_data(r: &GenRun) -> Result<()> {
    let d = match r.generator.as_str() {
        "shapes" => gen_shapes_tasks(r.n, r.hw, r.classes, r.seed)?,
        _ => gen_attr_tasks(r.n, r.hw, r.seed)?,
    }
    .with_split(r.split);
    save_dataset(&d, &r.out).with_context(|| format!("writing dataset to {}", r.out.display()))?;
    write_echo(&r.out, &RunEcho::GenData(r.clone()))?;
    let m = Manifest::of(&d);
    println!(
        "{}: {} {} samples of {}×{}×{}, seed {}",
        r.out.display(),
        m.count,
        m.generator,
        m.height,
        m.width,
        m.channels,
        m.seed
    );
    for (i, t) in m.tasks.iter().enumerate() {
        println!("  task {i}: {t:?}");
    }
    Ok(())
}

const TRAIN_KEYS: [&str; 19] = [
    "mode",
    "task",
    "shortcut",
    "init",
    "norm",
    "subspaces",
    "nddr-lr-scale",
    "base-lr",
    "wd",
    "momentum",
    "steps",
    "batch-size",
    "seed",
    "eval-every",
    "poly-power",
    "freeze-fusion-norm",
    "data",
    "eval-data",
    "pretrain",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub pretrain: Vec<PathBuf>,
    pub out: PathBuf,
}

fn usage<T, E: std::fmt::Display>(flag: &str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| UsageError(format!("--{flag}: {e}")).into())
}

pub fn parse_norm(s: &str) -> Result<NormPlacement> {
    match s {
        "shared" => Ok(NormPlacement::Shared),
        "per-task" => Ok(NormPlacement::PerTask),
        "none" => Ok(NormPlacement::None),
        other => bail!(UsageError(format!(
            "unknown normalization `{other}` (shared | per-task | none)"
        ))),
    }
}

/// Network configuration from flags and file; `None` fields keep `base`.
pub fn resolve_net(f: &RunFlags, file: &ConfigFile, base: NetConfig) -> Result<NetConfig> {
    let mut net = base;
    if let Some(m) = file.pick::<String>("mode", f.mode.clone())? {
        net.mode = usage("mode", m.parse::<Mode>())?;
    }
    if let Some(t) = file.pick("task", f.task)? {
        net.task = t;
    }
    net.shortcut = net.shortcut || file.switch("shortcut", f.shortcut)?;
    if let Some(i) = file.pick::<String>("init", f.init.clone())? {
        net.init = usage("init", i.parse::<InitPolicy>())?;
    }
    if let Some(n) = file.pick::<String>("norm", f.norm.clone())? {
        net.nddr.norm = parse_norm(&n)?;
    }
    if let Some(s) = file.pick("subspaces", f.subspaces)? {
        net.subspaces = s;
    }
    Ok(net)
}

impl TrainRun {
    pub fn resolve(f: &RunFlags, out: PathBuf) -> Result<Self> {
        let file = ConfigFile::load(f.config.as_deref())?;
        file.check_keys(&TRAIN_KEYS)?;
        let net = resolve_net(f, &file, NetConfig::default())?;
        let pretrain: Vec<PathBuf> = if f.pretrain.is_empty() {
            file.pick::<String>("pretrain", None)?
                .map(|s| s.split(',').map(|p| PathBuf::from(p.trim())).collect())
                .unwrap_or_default()
        } else {
            f.pretrain.clone()
        };
        // warm starts fine-tune with the fine-tuning preset
        let base = if pretrain.is_empty() {
            TrainConfig::default()
        } else {
            TrainConfig::fine_tune()
        };
        let poly = file.pick("poly-power", f.poly_power)?;
        let train = TrainConfig {
            base_lr: file.pick("base-lr", f.base_lr)?.unwrap_or(base.base_lr),
            nddr_lr_scale: file
                .pick("nddr-lr-scale", f.nddr_lr_scale)?
                .unwrap_or(base.nddr_lr_scale),
            weight_decay: file.pick("wd", f.wd)?.unwrap_or(base.weight_decay),
            momentum: file.pick("momentum", f.momentum)?.unwrap_or(base.momentum),
            steps: file.pick("steps", f.steps)?.unwrap_or(base.steps),
            batch_size: file
                .pick("batch-size", f.batch_size)?
                .unwrap_or(base.batch_size),
            seed: file.pick("seed", f.seed)?.unwrap_or(base.seed),
            eval_every: file
                .pick("eval-every", f.eval_every)?
                .unwrap_or(base.eval_every),
            poly_power: match poly {
                Some(p) if p == 0.0 => None,
                Some(p) => Some(p),
                None => base.poly_power,
            },
            freeze_fusion_norm: file.switch("freeze-fusion-norm", f.freeze_fusion_norm)?,
            loss_weights: base.loss_weights,
        };
        usage("config", train.validate())?;
        let data = file
            .pick::<PathBuf>("data", f.data.clone())?
            .ok_or_else(|| UsageError("--data is required".into()))?;
        let eval_data = file.pick::<PathBuf>("eval-data", f.eval_data.clone())?;
        if net.mode == Mode::Single && net.shortcut {
            bail!(UsageError(
                "--shortcut needs a fusion mode, not single".into()
            ));
        }
        if !pretrain.is_empty() && net.mode == Mode::Single {
            bail!(UsageError(
                "--pretrain warm-starts multi-task modes; single mode takes none".into()
            ));
        }
        Ok(TrainRun {
            net,
            train,
            data,
            eval_data,
            pretrain,
            out,
        })
    }
}

/// ToyVGG sized for `data`.
pub fn spec_for(data: &Dataset) -> Result<BackboneSpec> {
    let (_, _, c) = data
        .input_dims()
        .ok_or_else(|| UsageError("dataset has no samples".into()))?;
    Ok(BackboneSpec::toy_vgg(c, heads_for(&data.tasks)))
}

pub fn build_net(net: NetConfig, data: &Dataset, seed: u64) -> Result<Network<f32>> {
    let spec = spec_for(data)?;
    Network::build(spec, net, seed).map_err(|e| match e {
        nddr::Error::Invalid(m) => UsageError(m).into(),
        e => e.into(),
    })
}

pub struct TrainResult {
    pub last: MetricsReport,
    pub train_loss: f64,
}

/// Trains one configuration into `r.out`: run.json, metrics.jsonl,
/// summary.csv and final.ckpt. The final training-set report is appended
/// to metrics.jsonl after the evaluation reports.
pub fn train_with(
    r: &TrainRun,
    data: &Dataset,
    eval: Option<&Dataset>,
    quiet: bool,
) -> Result<TrainResult> {
    let mut net = build_net(r.net, data, r.train.seed)?;
    if !r.pretrain.is_empty() {
        let cks = r
            .pretrain
            .iter()
            .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Checkpoint> = cks.iter().collect();
        net.load_pretrained(&refs)?;
        net.set_norm_identity();
    } else if r.net.mode.is_fusion() && !quiet {
        eprintln!(
            "note: training {} fusion from scratch; fused networks do best when warm-started \
             from converged single-task networks (--pretrain a.ckpt,b.ckpt)",
            r.net.mode
        );
    }
    write_echo(&r.out, &RunEcho::Train(r.clone()))?;
    let outcome = train_net(&mut net, data, eval, &r.train, Some(&r.out))?;
    let train_report = evaluate(&mut net, data, &r.train, r.train.steps, "train")?;
    let train_loss = train_report.get("total", "loss").unwrap_or(f64::NAN);
    MetricsLog::append(&r.out)?.log(&train_report)?;
    let last = outcome
        .reports
        .last()
        .cloned()
        .expect("training always reports once");
    Ok(TrainResult { last, train_loss })
}

pub fn load_data(r: &TrainRun) -> Result<(Dataset, Option<Dataset>)> {
    let data = load_dataset(&r.data).with_context(|| format!("loading {}", r.data.display()))?;
    let eval = r
        .eval_data
        .as_ref()
        .map(|p| load_dataset(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    Ok((data, eval))
}

pub fn train(r: &TrainRun) -> Result<TrainResult> {
    let (data, eval) = load_data(r)?;
    let res = train_with(r, &data, eval.as_ref(), false)?;
    print_report(&res.last);
    println!("final training loss {:.6}", res.train_loss);
    println!("wrote {}", r.out.display());
    Ok(res)
}

pub fn print_report(r: &MetricsReport) {
    println!(
        "step {} | {} | init {} | lr scale {} | {} split",
        r.step, r.mode, r.init, r.lr_scale, r.split
    );
    for t in &r.tasks {
        let cols: Vec<String> = t
            .metrics
            .iter()
            .map(|(k, v)| format!("{k} {v:.4}"))
            .collect();
        println!("  {:<7} {}", t.task, cols.join("  "));
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.dtype != "f64" {
        bail!(UsageError(format!(
            "--dtype {}: gradient checks run in f64 only",
            a.dtype
        )));
    }
    let results = if a.module == "all" {
        check_all(a.seed)?
    } else {
        vec![check_op(&a.module, a.seed)?]
    };
    println!("{:<24} {:>5} {:>12}", "operation", "cases", "max rel err");
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:>5} {:>12.3e}  {verdict}",
            r.op, r.cases, r.max_error
        );
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        println!("all {} operations within {GRAD_TOL:e}", results.len());
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

/// `1234567` → `"1,234,567"`.
pub fn grouped(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn count_params(a: &CountArgs) -> Result<()> {
    let mode: Mode = usage("mode", a.mode.parse())?;
    if a.channels.is_empty() || a.k == 0 {
        bail!(UsageError("--channels and --k must be non-empty".into()));
    }
    let convs: Vec<usize> = match a.convs.len() {
        1 => vec![a.convs[0]; a.channels.len()],
        n if n == a.channels.len() => a.convs.clone(),
        n => bail!(UsageError(format!(
            "{n} --convs values for {} stages",
            a.channels.len()
        ))),
    };
    let heads = if mode == Mode::Single { 1 } else { a.k };
    let spec = BackboneSpec {
        in_channels: a.in_channels,
        stages: a
            .channels
            .iter()
            .zip(&convs)
            .map(|(&c, &n)| StageSpec {
                convs: n,
                out_channels: c,
                pool: PoolKind::Halving,
            })
            .collect(),
        heads: vec![
            HeadSpec::Pixel {
                out_channels: a.head_outputs
            };
            heads
        ],
        shortcut_channels: None,
    };
    let mut cfg = NetConfig::with_mode(mode);
    cfg.shortcut = a.shortcut;
    cfg.subspaces = a.subspaces;
    cfg.nddr.norm = parse_norm(&a.norm)?;
    let l = ParamLedger::compute(&spec, &cfg)?;
    println!(
        "{mode} network, {} tasks, stages {:?}",
        cfg.tasks(&spec),
        a.channels
    );
    for (name, v) in [
        ("backbone", l.backbone),
        ("heads", l.heads),
        ("fusion", l.fusion),
        ("fusion norm", l.fusion_norm),
        ("shortcut", l.shortcut),
        ("total", l.total),
    ] {
        println!("  {name:<12} {:>14}", grouped(v));
    }
    let one_branch = spec.branch_params();
    let pct = |x: usize, of: usize| 100.0 * x as f64 / of as f64;
    println!("  one branch   {:>14}", grouped(one_branch));
    if mode == Mode::Nddr {
        let f = count_fusion_params(a.k, &a.channels, true);
        println!(
            "fusion per task: {} projection weights + {} biases = {}",
            grouped(f.per_task_weights),
            grouped(f.per_task_bias),
            grouped(f.per_task)
        );
        println!(
            "fusion overhead: per-task weights {:.2}% of one branch; all fusion {:.2}% of the backbone ({:.2}% of the whole network)",
            pct(f.per_task_weights, one_branch),
            pct(l.fusion + l.fusion_norm, l.backbone),
            pct(l.fusion + l.fusion_norm, l.total)
        );
    } else if l.fusion > 0 {
        println!(
            "fusion overhead: {:.4}% of the backbone",
            pct(l.fusion, l.backbone)
        );
    }
    Ok(())
}

pub fn eval(a: &crate::EvalArgs) -> Result<()> {
    let path = a
        .flags
        .data
        .clone()
        .ok_or_else(|| UsageError("--data is required".into()))?;
    let data = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    let run_path = a.run.clone().or_else(|| {
        a.ckpt
            .as_ref()
            .and_then(|c| c.parent())
            .map(|d| d.join(RUN_FILE))
            .filter(|p| p.exists())
    });
    let (base_net, base_train) = match run_path {
        Some(p) => match read_echo(&p)? {
            RunEcho::Train(t) => (t.net, t.train),
            _ => bail!(UsageError(format!(
                "{} does not describe a training run",
                p.display()
            ))),
        },
        None => (NetConfig::single(0), TrainConfig::default()),
    };
    let file = ConfigFile::load(a.flags.config.as_deref())?;
    file.check_keys(&TRAIN_KEYS)?;
    let net_cfg = resolve_net(&a.flags, &file, base_net)?;
    let seed = file.pick("seed", a.flags.seed)?.unwrap_or(base_train.seed);
    let mut net = build_net(net_cfg, &data, seed)?;
    let step = match &a.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            net.load_state(&ck)?;
            ck.step().unwrap_or(0) as usize
        }
        None => 0,
    };
    let cfg = TrainConfig { seed, ..base_train };
    let report = evaluate(&mut net, &data, &cfg, step, &data.split.to_string())?;
    print_report(&report);
    println!("{}", report.to_json_line());
    Ok(())
}

pub fn replay(path: &Path, out: Option<PathBuf>) -> Result<()> {
    match read_echo(path)? {
        RunEcho::GenData(mut g) => {
            if let Some(o) = out {
                g.out = o;
            }
            gen_data(&g)
        }
        RunEcho::Train(mut t) => {
            if let Some(o) = out {
                t.out = o;
            }
            train(&t).map(|_| ())
        }
        RunEcho::Ablate(mut a) => {
            if let Some(o) = out {
                a.out = o;
            }
            crate::ablate::run_ablation(&a)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_grouping() {
        assert_eq!(grouped(0), "0");
        assert_eq!(grouped(999), "999");
        assert_eq!(grouped(1000), "1,000");
        assert_eq!(grouped(1_220_608), "1,220,608");
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        fs::write(&cfg, "mode = single\nbase_lr = 0.5\nsteps = 7\ndata = d\n").unwrap();
        let flags = RunFlags {
            config: Some(cfg),
            steps: Some(9),
            ..RunFlags::default()
        };
        let r = TrainRun::resolve(&flags, "o".into()).unwrap();
        assert_eq!(r.net.mode, Mode::Single);
        assert_eq!(r.train.base_lr, 0.5);
        assert_eq!(r.train.steps, 9);
        assert_eq!(r.train.nddr_lr_scale, TrainConfig::default().nddr_lr_scale);
        assert_eq!(r.data, PathBuf::from("d"));
    }

    #[test]
    fn defaults_follow_recommended_settings() {
        let flags = RunFlags {
            data: Some("d".into()),
            ..RunFlags::default()
        };
        let r = TrainRun::resolve(&flags, "o".into()).unwrap();
        assert_eq!(r.net.mode, Mode::Nddr);
        assert_eq!(
            r.net.init,
            InitPolicy::Diagonal {
                alpha: 0.9,
                beta: 0.1
            }
        );
        assert_eq!(r.train.nddr_lr_scale, 100.0);
        assert_eq!(r.net.subspaces, 2);
        let warm = RunFlags {
            pretrain: vec!["a".into(), "b".into()],
            ..flags
        };
        assert_eq!(
            TrainRun::resolve(&warm, "o".into()).unwrap().train,
            TrainConfig::fine_tune()
        );
    }

    #[test]
    fn invalid_combinations_are_usage_errors() {
        let base = RunFlags {
            data: Some("d".into()),
            ..RunFlags::default()
        };
        for f in [
            RunFlags {
                mode: Some("single".into()),
                shortcut: true,
                ..base.clone()
            },
            RunFlags {
                mode: Some("fancy".into()),
                ..base.clone()
            },
            RunFlags {
                init: Some("diag:1".into()),
                ..base.clone()
            },
            RunFlags {
                base_lr: Some(-1.0),
                ..base.clone()
            },
            RunFlags {
                data: None,
                ..base.clone()
            },
        ] {
            let err = TrainRun::resolve(&f, "o".into()).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{err:#}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let flags = RunFlags {
            data: Some("d".into()),
            init: Some("xavier".into()),
            ..RunFlags::default()
        };
        let r = TrainRun::resolve(&flags, "o".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_echo(dir.path(), &RunEcho::Train(r.clone())).unwrap();
        match read_echo(&dir.path().join(RUN_FILE)).unwrap() {
            RunEcho::Train(back) => assert_eq!(back, r),
            other => panic!("{other:?}"),
        }
    }
}
