//! Command-line entry point: one JSON config in, deterministic artifacts out.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config
//! errors. Artifacts land under the config's output directory with stable
//! names, each body starting with the config hash, and a repeat run with the
//! same config reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng;

use taskgate::config::{config_hash, load_config, Checkpoint, RunConfig};
use taskgate::decoder::HeadReduce;
use taskgate::error::Error;
use taskgate::fdcheck::FD_TOLERANCE;
use taskgate::flops::{flops_estimate, report, FlopsEstimate};
use taskgate::mask::build_tgm;
use taskgate::model;
use taskgate::params::name_rng;
use taskgate::sequence::SequenceLayout;
use taskgate::teachers::{generate_dataset, Sample, TEXT_LEN};
use taskgate::training::{self, plan_for, Strategy};

#[derive(Parser)]
#[command(
    name = "taskgate",
    version,
    about = "Gateway-masked task queries with teacher-feature alignment, desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run both training stages, writing loss curves and checkpoints
    Train { config: PathBuf },
    /// Score held-out answers with a trained checkpoint
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
    },
    /// Write the attention-visibility grid for the configured layout
    DumpMask { config: PathBuf },
    /// Write the final text token's attention over the vision block
    DumpAttn {
        config: PathBuf,
        checkpoint: PathBuf,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck { config: PathBuf },
    /// Tabulate the analytic forward cost across query counts
    Flops { config: PathBuf },
    /// Train every strategy and query-count cell, tabulating results
    Sweep { config: PathBuf },
}

/// Failures before a config is accepted are usage errors; everything after
/// is a runtime error. The exit code is the only thing that differs.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval { config, checkpoint } => cmd_eval(&config, &checkpoint),
        Cmd::DumpMask { config } => cmd_dump_mask(&config),
        Cmd::DumpAttn { config, checkpoint } => cmd_dump_attn(&config, &checkpoint),
        Cmd::Gradcheck { config } => cmd_gradcheck(&config),
        Cmd::Flops { config } => cmd_flops(&config),
        Cmd::Sweep { config } => cmd_sweep(&config),
    }
}

fn load(path: &Path) -> Result<(RunConfig, String), Failure> {
    let cfg = load_config(path).map_err(Failure::Usage)?;
    let hash = config_hash(&cfg);
    Ok((cfg, hash))
}

fn write_artifact(cfg: &RunConfig, name: &str, body: &str) -> Result<PathBuf, Failure> {
    let dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(dir).map_err(|e| runtime(e.into()))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| runtime(e.into()))?;
    Ok(path)
}

fn load_checkpoint(path: &Path, hash: &str) -> Result<Checkpoint, Failure> {
    let ck = Checkpoint::load(path).map_err(runtime)?;
    if ck.config_hash != hash {
        return Err(runtime(Error::Config(format!(
            "checkpoint was produced under config hash {} but this config hashes to {hash}",
            ck.config_hash
        ))));
    }
    Ok(ck)
}

fn cmd_train(config: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let settings = cfg.run_settings();
    let outcome = training::run_experiment(&settings, cfg.seed).map_err(runtime)?;
    let tasks = cfg.model.tasks.len();
    let pt_path = write_artifact(
        &cfg,
        "losses_pt.csv",
        &training::curve_csv(&outcome.pt_rows, tasks, &hash),
    )?;
    write_artifact(
        &cfg,
        "losses_sft.csv",
        &training::curve_csv(&outcome.sft_rows, tasks, &hash),
    )?;
    let out_dir = pt_path.parent().expect("artifact has a parent").to_path_buf();
    Checkpoint {
        config_hash: hash.clone(),
        params: outcome.pt_params,
    }
    .save(&out_dir.join("ckpt_pt.json"))
    .map_err(runtime)?;
    Checkpoint {
        config_hash: hash.clone(),
        params: outcome.ps,
    }
    .save(&out_dir.join("ckpt_sft.json"))
    .map_err(runtime)?;
    println!("config_hash={hash}");
    println!(
        "pt_steps={} sft_steps={} artifacts={}",
        outcome.pt_rows.len(),
        outcome.sft_rows.len(),
        out_dir.display()
    );
    println!("eval_accuracy={:.4}", outcome.accuracy);
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let ck = load_checkpoint(checkpoint, &hash)?;
    let eval_seed: u64 = name_rng(cfg.seed, "data.eval").gen();
    let eval = generate_dataset(
        &ck.params,
        &cfg.model.image,
        &cfg.model.teacher_specs(),
        &cfg.task_link,
        eval_seed,
        cfg.eval_count,
    )
    .map_err(runtime)?;
    let plan = plan_for(&cfg.model, cfg.strategy).map_err(runtime)?;
    let accuracy = model::answer_accuracy(&ck.params, &cfg.model, &plan, &eval).map_err(runtime)?;
    println!("config_hash={hash}");
    println!("samples={} accuracy={accuracy:.4}", eval.len());
    Ok(())
}

fn cmd_dump_mask(config: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let layout = match &cfg.mask_probe {
        Some(p) => SequenceLayout {
            vision_len: p.vision_len,
            group_lens: p.groups.clone(),
            text_len: p.text_len,
        },
        None => {
            let plan = plan_for(&cfg.model, cfg.strategy).map_err(runtime)?;
            model::layout_for(&cfg.model, &plan, TEXT_LEN).map_err(runtime)?
        }
    };
    let mask = build_tgm(&layout, cfg.model.intra).map_err(runtime)?;
    let body = format!("# config_hash={hash}\n{}", mask.dump());
    write_artifact(&cfg, "mask.txt", &body)?;
    print!("{body}");
    Ok(())
}

fn cmd_dump_attn(config: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let ck = load_checkpoint(checkpoint, &hash)?;
    let eval_seed: u64 = name_rng(cfg.seed, "data.eval").gen();
    let sample = generate_dataset(
        &ck.params,
        &cfg.model.image,
        &cfg.model.teacher_specs(),
        &cfg.task_link,
        eval_seed,
        1,
    )
    .map_err(runtime)?
    .remove(0);
    let plan = plan_for(&cfg.model, cfg.strategy).map_err(runtime)?;
    let mut body = format!("# config_hash={hash}\nlayer,vision_pos,weight\n");
    for layer in 0..cfg.model.decoder.layers {
        let weights = model::last_token_vision_attention(
            &ck.params,
            &cfg.model,
            &plan,
            &sample,
            Some(layer),
            HeadReduce::Mean,
        )
        .map_err(runtime)?;
        for (pos, w) in weights.iter().enumerate() {
            body.push_str(&format!("{layer},{pos},{w}\n"));
        }
    }
    let path = write_artifact(&cfg, "attn.csv", &body)?;
    println!("config_hash={hash}");
    println!(
        "layers={} vision_tokens={} -> {}",
        cfg.model.decoder.layers,
        cfg.model.image.patch_rows() * cfg.model.image.patch_cols(),
        path.display()
    );
    Ok(())
}

fn cmd_gradcheck(config: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let init_seed: u64 = name_rng(cfg.seed, "init").gen();
    let ps = model::init_params(&cfg.model, init_seed).map_err(runtime)?;
    let data_seed: u64 = name_rng(cfg.seed, "data.train").gen();
    let samples = generate_dataset(
        &ps,
        &cfg.model.image,
        &cfg.model.teacher_specs(),
        &cfg.task_link,
        data_seed,
        2,
    )
    .map_err(runtime)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let plan = plan_for(&cfg.model, cfg.strategy).map_err(runtime)?;
    let report = model::gradcheck_combined(&ps, &cfg.model, &plan, &refs, Some(2), 1e-3)
        .map_err(runtime)?;
    println!("config_hash={hash}");
    let worst = report
        .worst
        .as_ref()
        .map_or(String::new(), |(n, i)| format!(" worst={n}[{i}]"));
    println!(
        "probes={} max_rel_err={:e}{} tolerance={FD_TOLERANCE:e}",
        report.probes, report.max_rel_err, worst
    );
    if !report.passes() {
        return Err(runtime(Error::Config(format!(
            "gradient check failed: {:e} exceeds {FD_TOLERANCE:e}",
            report.max_rel_err
        ))));
    }
    Ok(())
}

fn cmd_flops(config: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let f = &cfg.flops;
    let estimates: Vec<FlopsEstimate> = f
        .queries
        .iter()
        .map(|&q| flops_estimate(&f.dims, f.seq_len(q)))
        .collect();
    let body = format!(
        "# config_hash={hash}\n# layout: vision={} text={} task_count={} queries={:?}\n{}",
        f.vision_tokens,
        f.text_len,
        f.task_count,
        f.queries,
        report(&f.dims, &estimates)
    );
    write_artifact(&cfg, "flops.txt", &body)?;
    print!("{body}");
    Ok(())
}

fn cmd_sweep(config: &Path) -> Result<(), Failure> {
    let (cfg, hash) = load(config)?;
    let settings = cfg.run_settings();
    let mut cells =
        training::sweep_strategies(&settings, &Strategy::ALL, &cfg.seeds).map_err(runtime)?;
    cells.extend(
        training::sweep_queries(&settings, &cfg.queries_sweep, &cfg.seeds).map_err(runtime)?,
    );
    let body = training::sweep_csv(&cells, cfg.model.tasks.len(), &hash);
    let path = write_artifact(&cfg, "sweep.csv", &body)?;
    println!("config_hash={hash}");
    let mut by_setting: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for c in &cells {
        by_setting.entry(&c.setting).or_default().push(c.accuracy);
    }
    for (setting, accs) in by_setting {
        println!("{setting} median_accuracy={:.4}", median(accs));
    }
    println!("cells={} -> {}", cells.len(), path.display());
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}
