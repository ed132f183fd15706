//! Thin command-line front end over the library: reproducible experiments
//! driven by an INI config plus `--section.key value` overrides. Every
//! command writes only under its `--out` directory and echoes its fully
//! resolved configuration there.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use icnet::arch::{build_icnet, BranchSet, IcnetModel, ProfileTarget};
use icnet::config::{apply_config, RunConfig, KEYS};
use icnet::cost::profile_network;
use icnet::data::{load_dataset, read_pgm, write_dataset, write_pgm, Dataset};
use icnet::error::{Error, Result};
use icnet::experiments as exp;
use icnet::metrics::{miou_csv, miou_from_confusion, ConfusionMatrix, RegionHistogram};
use icnet::prune::{prune_network, PruneSpec};
use icnet::train::{load_checkpoint_flexible, loss_log_csv, save_checkpoint, train_loop};

const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate the synthetic dataset (train/ and test/ splits under --out)"),
    ("train", "train the cascade on data.dir/train; writes checkpoint.ckpt and loss_log.csv"),
    ("infer", "predict labels for data.dir/test with --checkpoint [--branches 4|24|124]"),
    ("eval", "score --pred against data.dir/test labels; writes metrics.csv"),
    ("profile", "emit cost-model CSVs for the cascade targets and baselines"),
    ("prune", "L1-prune --checkpoint at --rate; writes prune_report.csv and pruned.ckpt"),
    ("analyze", "region-accuracy histogram of --pred (and --pred2 difference); writes histogram.csv"),
    ("ablate", "run the configured studies, one CSV each"),
];

fn usage() -> String {
    let mut out = String::from(
        "usage: icnet <command> [--config FILE] [--out DIR] [--section.key value]...\n\ncommands:\n",
    );
    for (name, help) in COMMANDS {
        out.push_str(&format!("  {name:<9} {help}\n"));
    }
    out.push_str("\ncommand flags:\n");
    out.push_str("  --config FILE      INI configuration file applied before key overrides\n");
    out.push_str("  --out DIR          run directory (all outputs land here); default runs/<command>\n");
    out.push_str("  --checkpoint FILE  model checkpoint (infer, eval, prune)\n");
    out.push_str("  --branches SET     4, 24 or 124: cascade prefix used by infer (default 124)\n");
    out.push_str("  --rate R           keep rate for prune (default 0.5)\n");
    out.push_str("  --pred DIR         prediction directory (eval, analyze)\n");
    out.push_str("  --pred2 DIR        second prediction directory for histogram differences\n");
    out.push_str("\nconfiguration keys (also settable as --section.key value):\n");
    let mut section = "";
    for (sec, key, ty, help) in KEYS {
        if *sec != section {
            out.push_str(&format!("  [{sec}]\n"));
            section = sec;
        }
        out.push_str(&format!("    {key:<16} {ty:<28} {help}\n"));
    }
    out
}

struct Cli {
    command: String,
    config: RunConfig,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    branches: BranchSet,
    rate: f64,
    pred: Option<PathBuf>,
    pred2: Option<PathBuf>,
}

fn parse_cli(args: &[String]) -> Result<Option<Cli>> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        println!("{}", usage());
        return Ok(None);
    }
    let command = args[0].clone();
    if !COMMANDS.iter().any(|(name, _)| *name == command) {
        return Err(Error::config(format!("unknown command `{command}`; see --help")));
    }

    let mut config = RunConfig::default();
    let mut out = PathBuf::from(format!("runs/{command}"));
    let mut checkpoint = None;
    let mut branches = BranchSet::Sub124;
    let mut rate = 0.5;
    let mut pred = None;
    let mut pred2 = None;

    // First pass: the config file, so flag overrides win.
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--config" {
            let path = args
                .get(i + 1)
                .ok_or_else(|| Error::config("--config needs a file path"))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {path}: {e}")))?;
            apply_config(&mut config, &text)?;
        }
        i += 2;
    }

    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        if flag == "--help" || flag == "-h" {
            println!("{}", usage());
            return Ok(None);
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::config(format!("flag {flag} needs a value")))?;
        match flag.as_str() {
            "--config" => {}
            "--out" => out = PathBuf::from(value),
            "--checkpoint" => checkpoint = Some(PathBuf::from(value)),
            "--branches" => {
                branches = BranchSet::parse(value)
                    .ok_or_else(|| Error::config(format!("--branches must be 4, 24 or 124, got {value}")))?
            }
            "--rate" => {
                rate = value
                    .parse()
                    .map_err(|_| Error::config(format!("--rate must be a float, got {value}")))?
            }
            "--pred" => pred = Some(PathBuf::from(value)),
            "--pred2" => pred2 = Some(PathBuf::from(value)),
            other => {
                let stripped = other
                    .strip_prefix("--")
                    .ok_or_else(|| Error::config(format!("expected a flag, got `{other}`")))?;
                let (section, key) = stripped
                    .split_once('.')
                    .ok_or_else(|| Error::config(format!("unknown flag `{other}` (config keys are --section.key)")))?;
                config.set(section, key, value, 0)?;
            }
        }
        i += 2;
    }

    Ok(Some(Cli {
        command,
        config,
        out,
        checkpoint,
        branches,
        rate,
        pred,
        pred2,
    }))
}

fn write_echo(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("config.ini"), cli.config.echo())?;
    Ok(())
}

fn load_model(cli: &Cli) -> Result<IcnetModel<f32>> {
    let path = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("this command needs --checkpoint"))?;
    let mut model = build_icnet::<f32>(&cli.config.model, cli.config.train.seed)?;
    load_checkpoint_flexible(path, &mut model)?;
    Ok(model)
}

fn load_split(cli: &Cli, split: &str) -> Result<Dataset<f32>> {
    let dir = Path::new(&cli.config.data.dir).join(split);
    load_dataset::<f32>(&dir, cli.config.model.num_classes)
}

fn cmd_gen_data(cli: &Cli) -> Result<()> {
    let bench = exp::make_bench(&cli.config)?;
    write_dataset(&cli.out.join("train"), &bench.train)?;
    write_dataset(&cli.out.join("test"), &bench.test)?;
    println!(
        "wrote {} train and {} test scenes under {}",
        bench.train.len(),
        bench.test.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let data = load_split(cli, "train")?;
    let mut model = build_icnet::<f32>(&cli.config.model, cli.config.train.seed)?;
    let ckpt = cli.out.join("checkpoint.ckpt");
    let every = (cli.config.train.max_iter / 4).max(1);
    let log = train_loop(&mut model, &data, &cli.config.train, |m, rec| {
        if (rec.iter + 1) % every == 0 {
            // Periodic saves keep the last checkpoint on a numeric abort.
            let _ = save_checkpoint(&ckpt, m, rec.iter as u64 + 1);
        }
    })?;
    save_checkpoint(&ckpt, &model, cli.config.train.max_iter as u64)?;
    std::fs::write(cli.out.join("loss_log.csv"), loss_log_csv(&log))?;
    if let Some(last) = log.last() {
        println!("trained {} iterations; final loss {:.4}", log.len(), last.loss);
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_infer(cli: &Cli) -> Result<()> {
    let model = load_model(cli)?;
    let data = load_split(cli, "test")?;
    let dir = cli.out.join("pred");
    std::fs::create_dir_all(&dir)?;
    for (i, img) in data.images.iter().enumerate() {
        let pred = model.predict(img, cli.branches)?;
        write_pgm(&dir.join(format!("{i:06}.pgm")), &pred[0])?;
    }
    println!("wrote {} {} predictions to {}", data.len(), cli.branches.name(), dir.display());
    Ok(())
}

fn cmd_eval(cli: &Cli) -> Result<()> {
    let data = load_split(cli, "test")?;
    let pred_dir = cli.pred.as_ref().ok_or_else(|| Error::config("eval needs --pred"))?;
    let mut cm = ConfusionMatrix::new(cli.config.model.num_classes);
    for (i, gt) in data.labels.iter().enumerate() {
        let pred = read_pgm(&pred_dir.join(format!("{i:06}.pgm")), cli.config.model.num_classes)?;
        cm.update(gt, &pred)?;
    }
    let result = miou_from_confusion(&cm);
    std::fs::write(cli.out.join("metrics.csv"), miou_csv(&result))?;
    println!("mIoU {:.4} over {} images -> {}", result.mean, data.len(), cli.out.join("metrics.csv").display());
    Ok(())
}

fn cmd_profile(cli: &Cli) -> Result<()> {
    let model = build_icnet::<f32>(&cli.config.model, cli.config.train.seed)?;
    let mut summary = String::from("target,macs,total_activation_elems,peak_live_elems\n");
    for target in [
        ProfileTarget::Sub4,
        ProfileTarget::Sub24,
        ProfileTarget::Sub124,
        ProfileTarget::CascadeTrain,
    ] {
        let profile = profile_network(&model.to_network_spec(target))?;
        std::fs::write(cli.out.join(format!("cost_{}.csv", target.name())), profile.to_csv())?;
        summary.push_str(&format!(
            "{},{},{},{}\n",
            target.name(),
            profile.total_macs,
            profile.total_activation_elems,
            profile.peak_live_elems
        ));
    }
    for os in [8usize, 16, 32] {
        let baseline = icnet::arch::build_baseline::<f32>(&cli.config.model, os, cli.config.train.seed)?;
        let profile = profile_network(&baseline.to_network_spec(cli.config.model.input_h, cli.config.model.input_w))?;
        std::fs::write(cli.out.join(format!("cost_baseline{os}.csv")), profile.to_csv())?;
        summary.push_str(&format!(
            "baseline{os},{},{},{}\n",
            profile.total_macs, profile.total_activation_elems, profile.peak_live_elems
        ));
    }
    std::fs::write(cli.out.join("profile_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_prune(cli: &Cli) -> Result<()> {
    let model = load_model(cli)?;
    let (mut pruned, report) = prune_network(&model, &PruneSpec::uniform(cli.rate))?;
    if cli.config.train.finetune_iters > 0 {
        let data = load_split(cli, "train")?;
        let mut tc = cli.config.train.clone();
        tc.max_iter = tc.finetune_iters;
        train_loop(&mut pruned, &data, &tc, |_, _| {})?;
    }
    std::fs::write(cli.out.join("prune_report.csv"), report.to_csv())?;
    save_checkpoint(&cli.out.join("pruned.ckpt"), &pruned, 0)?;
    println!(
        "keep rate {}: modeled MACs {} -> {} ({:.3}x)",
        cli.rate,
        report.total_macs_before,
        report.total_macs_after,
        report.mac_ratio()
    );
    Ok(())
}

fn read_pred_dir(dir: &Path, count: usize, classes: usize) -> Result<Vec<icnet::LabelMap>> {
    (0..count)
        .map(|i| read_pgm(&dir.join(format!("{i:06}.pgm")), classes))
        .collect()
}

fn cmd_analyze(cli: &Cli) -> Result<()> {
    let data = load_split(cli, "test")?;
    let e = &cli.config.eval;
    let pred_dir = cli.pred.as_ref().ok_or_else(|| Error::config("analyze needs --pred"))?;
    let preds = read_pred_dir(pred_dir, data.len(), cli.config.model.num_classes)?;
    let mut hist = RegionHistogram::new(e.hist_bins, e.hist_interval);
    for (gt, pred) in data.labels.iter().zip(&preds) {
        hist.update(gt, pred, e.region_source, e.connectivity)?;
    }
    std::fs::write(cli.out.join("histogram.csv"), hist.to_csv())?;

    if let Some(dir2) = &cli.pred2 {
        let preds2 = read_pred_dir(dir2, data.len(), cli.config.model.num_classes)?;
        let mut hist2 = RegionHistogram::new(e.hist_bins, e.hist_interval);
        for (gt, pred) in data.labels.iter().zip(&preds2) {
            hist2.update(gt, pred, e.region_source, e.connectivity)?;
        }
        let mut out = String::from("bin,lo,hi,count,acc_pred,acc_pred2,diff\n");
        let (a, b) = (hist.mean_acc(), hist2.mean_acc());
        for i in 0..e.hist_bins {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            let diff = match (a[i], b[i]) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i,
                i * e.hist_interval + 1,
                (i + 1) * e.hist_interval,
                hist.count[i],
                fmt(a[i]),
                fmt(b[i]),
                fmt(diff)
            ));
        }
        std::fs::write(cli.out.join("histogram_diff.csv"), out)?;
    }
    println!("histogram -> {}", cli.out.join("histogram.csv").display());
    Ok(())
}

fn cmd_ablate(cli: &Cli) -> Result<()> {
    let cfg = &cli.config;
    let bench = match (load_split(cli, "train"), load_split(cli, "test")) {
        (Ok(train), Ok(test)) => exp::Bench { train, test },
        // No dataset on disk: generate the configured benchmark in memory.
        _ => exp::make_bench(cfg)?,
    };
    let seed = cfg.train.seed;
    let studies = &cfg.eval.studies;
    let want = |name: &str| studies.iter().any(|s| s == name);

    let mut main_model: Option<IcnetModel<f32>> = None;
    if want("branch") || want("fusion") {
        let (model, _) = exp::train_icnet(&cfg.model, &cfg.train, &bench.train, seed)?;
        main_model = Some(model);
    }

    if want("branch") {
        let model = main_model.as_ref().expect("trained above");
        let rows = exp::branch_study(model, &bench.test)?;
        std::fs::write(cli.out.join("study_branch.csv"), exp::branch_csv(&rows))?;
        // The region-gain table rides along with the branch study.
        let hists = exp::branch_region_histograms(
            model,
            &bench.test,
            cfg.eval.hist_bins,
            cfg.eval.hist_interval,
            cfg.eval.region_source,
            cfg.eval.connectivity,
        )?;
        std::fs::write(
            cli.out.join("study_region_gain.csv"),
            exp::region_gain_csv(&hists[0], &hists[1], &hists[2]),
        )?;
        println!("branch study done");
    }
    if want("fusion") {
        let rows = exp::fusion_study(&cfg.model, &cfg.train, &bench, seed)?;
        std::fs::write(cli.out.join("study_fusion.csv"), exp::fusion_csv(&rows))?;
        println!("fusion study done");
    }
    if want("input-scale") || want("keep-rate") {
        let (baseline, _) = exp::train_baseline(&cfg.model, 8, &cfg.train, &bench.train, seed)?;
        if want("input-scale") {
            let rows = exp::input_scale_study(&baseline, &bench.test, &[0.25, 0.5, 1.0])?;
            std::fs::write(cli.out.join("study_input_scale.csv"), exp::input_scale_csv(&rows))?;
            println!("input-scale study done");
        }
        if want("keep-rate") {
            let rows = exp::keep_rate_study(&baseline, &bench.test, &[1.0, 0.5, 0.25])?;
            std::fs::write(cli.out.join("study_keep_rate.csv"), exp::keep_rate_csv(&rows))?;
            println!("keep-rate study done");
        }
    }
    if want("feature-stride") {
        let rows = exp::feature_stride_study(&cfg.model, &cfg.train, &bench, seed)?;
        std::fs::write(cli.out.join("study_feature_stride.csv"), exp::feature_stride_csv(&rows))?;
        println!("feature-stride study done");
    }
    Ok(())
}

fn run() -> Result<bool> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(cli) = parse_cli(&args)? else {
        return Ok(true);
    };
    cli.config.validate()?;
    write_echo(&cli)?;
    match cli.command.as_str() {
        "gen-data" => cmd_gen_data(&cli)?,
        "train" => cmd_train(&cli)?,
        "infer" => cmd_infer(&cli)?,
        "eval" => cmd_eval(&cli)?,
        "profile" => cmd_profile(&cli)?,
        "prune" => cmd_prune(&cli)?,
        "analyze" => cmd_analyze(&cli)?,
        "ablate" => cmd_ablate(&cli)?,
        _ => unreachable!("command validated in parse_cli"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
