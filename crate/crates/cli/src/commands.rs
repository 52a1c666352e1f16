//! Subcommand bodies. Each returns the fingerprint of its resolved config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use rand::Rng;
use stegact::data::{load_video, write_synthetic, Split};
use stegact::metrics::{attack_frames, privacy_attack, AttackInput};
use stegact::network::Network;
use stegact::rng::stream_rng;
use stegact::stego::{psnr, Hider, WaveletHider};
use stegact::tensor::Dtype;
use stegact::training::{ablate, evaluate, fixed_cover_trials, render_table, train, Pairing, Suite};
use stegact::wavelet::{energy_table, multilevel_dwt, Band};
use stegact::{Error, Result};

use crate::config::ExperimentConfig;
use crate::report;
use crate::{given, Command, CommonArgs, DataArgs, TrainFlags};

pub fn run(cmd: Command, m: &ArgMatches) -> Result<String> {
    match cmd {
        Command::Gendata(a) => gendata(a, m),
        Command::Embed(a) => embed(a, m),
        Command::Train(a) => train_cmd(a, m),
        Command::Eval(a) => eval_cmd(a, m),
        Command::Ablate(a) => ablate_cmd(a, m),
        Command::InspectDwt(a) => inspect(a, m),
        Command::Report(a) => report::run(a, m),
    }
}

/// Replace `dir` with an empty directory.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::data(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::data(dir, e))
}

pub fn base_config(common: &CommonArgs, m: &ArgMatches, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => ExperimentConfig::load(Some(p))?,
        (None, Some(b)) => b,
        (None, None) => ExperimentConfig::default(),
    };
    if given(m, "seed") {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut ExperimentConfig, d: &DataArgs) {
    if let Some(p) = &d.data {
        cfg.data = Some(p.clone());
    }
}

fn apply_train(cfg: &mut ExperimentConfig, t: &TrainFlags, m: &ArgMatches) -> Result<()> {
    if given(m, "epochs") {
        cfg.train.epochs = t.epochs;
    }
    if given(m, "batch_size") {
        cfg.train.batch_size = t.batch_size;
    }
    if given(m, "lr") {
        cfg.train.lr = t.lr;
    }
    if given(m, "alpha") {
        cfg.train.alpha = t.alpha;
    }
    if given(m, "beta") {
        cfg.train.beta = t.beta;
    }
    if given(m, "theta") {
        cfg.network.theta = t.theta;
    }
    if given(m, "width") {
        cfg.network.backbone.base_width = t.width;
    }
    if given(m, "pe") {
        cfg.network.position_encoding = t.pe.parse()?;
    }
    if given(m, "grouping") {
        cfg.network.grouping = t.grouping.parse()?;
    }
    if given(m, "strength") {
        cfg.hider.strength = t.strength;
    }
    if t.no_augment {
        cfg.train.augment = None;
    }
    if t.fixed_pairing {
        cfg.train.fixed_pairing = true;
    }
    Ok(())
}

fn announce(cfg: &ExperimentConfig) -> String {
    let fp = cfg.fingerprint();
    println!("fingerprint: {fp}");
    fp
}

fn gendata(a: crate::GendataArgs, m: &ArgMatches) -> Result<String> {
    let mut cfg = base_config(&a.common, m, None)?;
    // Without a config file the flags (and their defaults) define the
    // dataset; with one, only flags typed on the command line override it.
    let take = |id: &str| a.common.config.is_none() || given(m, id);
    let (s, c) = (&mut cfg.synthetic, &mut cfg.counts);
    if take("classes") {
        s.classes = a.classes;
    }
    if take("frames") {
        s.frames = a.frames;
    }
    if take("height") {
        s.height = a.height;
    }
    if take("width") {
        s.width = a.width;
    }
    if take("noise") {
        s.noise = a.noise;
    }
    if take("clips") {
        c.train = a.clips;
    }
    if take("val_clips") {
        c.val = a.val_clips;
    }
    if take("train_covers") {
        c.train_covers = a.train_covers;
    }
    if take("eval_covers") {
        c.eval_covers = a.eval_covers;
    }
    let cfg = cfg.resolve()?;
    let fp = announce(&cfg);
    fresh_dir(&a.out)?;
    let manifest = write_synthetic(&a.out, &cfg.synthetic, &cfg.counts)?;
    println!("wrote {} records to {}", manifest.records.len(), a.out.join("manifest.jsonl").display());
    Ok(fp)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn embed(a: crate::EmbedArgs, m: &ArgMatches) -> Result<String> {
    let mut cfg = base_config(&a.common, m, None)?;
    apply_data(&mut cfg, &a.data);
    if given(m, "strength") {
        cfg.hider.strength = a.strength;
    }
    let cfg = cfg.resolve()?;
    let fp = announce(&cfg);
    let split = parse_split(&a.split)?;
    let ds = cfg.dataset()?;
    let samples = ds.require(split)?;
    let covers = ds.covers(split);
    let hider = WaveletHider::new(cfg.hider.clone())?;
    fresh_dir(&a.out)?;
    let n = if a.limit == 0 { samples.len() } else { a.limit.min(samples.len()) };
    let mut lines = String::new();
    let mut total_psnr = 0.0;
    for (i, s) in samples.iter().take(n).enumerate() {
        let mut rng = stream_rng(cfg.seed, 40, i as u64);
        let secret = ds.clip_of(&s.source, &mut rng)?;
        let ci = rng.gen_range(0..covers.len());
        let cover = ds.clip_of(&covers[ci], &mut rng)?;
        let pair = hider.embed(&cover, &secret)?;
        let dir = a.out.join(format!("{i:05}"));
        fs::create_dir_all(&dir)?;
        for (name, t) in [("cover", &pair.cover), ("secret", &pair.secret), ("stego", &pair.stego)] {
            t.save(dir.join(format!("{name}.vtns")), Dtype::F32)?;
        }
        let p = psnr(&pair.cover, &pair.stego)?;
        total_psnr += p;
        lines.push_str(
            &serde_json::json!({
                "index": i, "dir": format!("{i:05}"), "label": s.label, "cover": ci,
                "hider": pair.hider_id, "psnr_db": p,
            })
            .to_string(),
        );
        lines.push('\n');
    }
    fs::write(a.out.join("pairs.jsonl"), lines)?;
    println!("embedded {n} pairs; mean PSNR {:.2} dB", total_psnr / n.max(1) as f64);
    Ok(fp)
}

/// `<out>/<UTC timestamp>-<fingerprint>` unless an explicit directory is given.
fn run_dir(out: &Path, explicit: Option<&PathBuf>, fp: &str) -> PathBuf {
    match explicit {
        Some(d) => d.clone(),
        None => out.join(format!("{}-{fp}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))),
    }
}

fn train_cmd(a: crate::TrainArgs, m: &ArgMatches) -> Result<String> {
    let mut cfg = base_config(&a.common, m, None)?;
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg, &a.train, m)?;
    let cfg = cfg.resolve()?;
    let fp = announce(&cfg);
    let ds = cfg.dataset()?;
    let mut net_cfg = cfg.network.clone();
    net_cfg.num_classes = net_cfg.num_classes.max(ds.num_classes);
    let net = Network::new(net_cfg, cfg.seed)?;
    let hider = WaveletHider::new(cfg.hider.clone())?;
    let dir = run_dir(&a.out, a.run_dir.as_ref(), &fp);
    fresh_dir(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let out = train(net, &hider, &ds, &cfg.train, |e| {
        println!(
            "epoch {:>3}  loss {:.4}  cls {:.4}  train {:6.2}%  val {:6.2}%",
            e.epoch,
            e.loss,
            e.loss_cls,
            100.0 * e.train_top1,
            100.0 * e.val_top1
        );
    })?;
    out.record.write_jsonl(&dir.join("run.jsonl"))?;
    out.best.save(&dir.join("checkpoint"))?;
    let best = out.record.best().expect("non-empty run");
    println!("best val Top-1 {:.2}% at epoch {}; run dir {}", 100.0 * best.val_top1, out.best_epoch, dir.display());
    Ok(fp)
}

/// Accept either a run directory or its `checkpoint/` subdirectory.
fn locate_checkpoint(p: &Path) -> (PathBuf, Option<PathBuf>) {
    if p.join("checkpoint").join("network.json").exists() {
        (p.join("checkpoint"), Some(p.to_path_buf()))
    } else {
        let run = p.parent().filter(|r| r.join("config.toml").exists()).map(Path::to_path_buf);
        (p.to_path_buf(), run)
    }
}

pub fn run_config(run: Option<&Path>) -> Result<Option<ExperimentConfig>> {
    match run {
        Some(r) if r.join("config.toml").exists() => ExperimentConfig::load(Some(&r.join("config.toml"))).map(Some),
        _ => Ok(None),
    }
}

fn eval_cmd(a: crate::EvalArgs, m: &ArgMatches) -> Result<String> {
    let (ckpt, run) = locate_checkpoint(&a.checkpoint);
    let mut cfg = base_config(&a.common, m, run_config(run.as_deref())?)?;
    apply_data(&mut cfg, &a.data);
    if given(m, "strength") {
        cfg.hider.strength = a.strength;
    }
    let cfg = cfg.resolve()?;
    let fp = announce(&cfg);
    let split = parse_split(&a.split)?;
    let pairing: Pairing = a.pairing.parse()?;
    let net = Network::load(&ckpt, None)?;
    let ds = cfg.dataset()?;
    let hider = WaveletHider::new(cfg.hider.clone())?;
    let r = evaluate(&net, &hider, &ds, split, pairing, cfg.seed)?;
    println!("{split} Top-1 ({pairing}): {:.2}% ({}/{})", 100.0 * r.top1, r.correct, r.total);
    let mut report = serde_json::json!({ "fingerprint": fp, "top1": r.top1, "split": split, "pairing": pairing.to_string() });
    if a.trials > 0 {
        let t = fixed_cover_trials(&net, &hider, &ds, split, a.trials, cfg.seed)?;
        println!("fixed-cover Top-1 over {} covers: {:.2}% +/- {:.2}%", a.trials, 100.0 * t.mean, 100.0 * t.std);
        report["fixed_cover_trials"] = serde_json::to_value(&t).expect("plain data");
    }
    if a.attack {
        for input in [AttackInput::Raw, AttackInput::Stego] {
            let (frames, attrs) = attack_frames(&ds, &hider, split, input, cfg.seed)?;
            let r = privacy_attack(&frames, &attrs, &cfg.attacker)?;
            let name = format!("{input:?}").to_lowercase();
            println!("attacker on {name} frames: cMAP {:.3}  F1 {:.3}", r.cmap, r.f1);
            report[format!("attack_{name}")] = serde_json::to_value(&r).expect("plain data");
        }
    }
    let dest = run.unwrap_or(ckpt);
    fs::write(dest.join(format!("eval-{split}.json")), serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    Ok(fp)
}

fn ablate_cmd(a: crate::AblateArgs, m: &ArgMatches) -> Result<String> {
    let suite: Suite = a.suite.parse()?;
    let mut cfg = base_config(&a.common, m, None)?;
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg, &a.train, m)?;
    let cfg = cfg.resolve()?;
    let fp = announce(&cfg);
    let ds = cfg.dataset()?;
    let hider = WaveletHider::new(cfg.hider.clone())?;
    let rows = ablate(suite, &cfg.network, &cfg.train, &hider, &ds, |r| {
        log::info!("{}: {:.2}%", r.variant, 100.0 * r.top1);
    })?;
    let table = render_table(suite, &rows);
    print!("{table}");
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(format!("{suite}.txt")), &table)?;
    let lines: String = rows.iter().map(|r| serde_json::to_string(r).expect("json") + "\n").collect();
    fs::write(a.out.join(format!("{suite}.jsonl")), lines)?;
    Ok(fp)
}

fn inspect(a: crate::InspectArgs, m: &ArgMatches) -> Result<String> {
    let cfg = base_config(&a.common, m, None)?.resolve()?;
    let fp = announce(&cfg);
    let clip = match &a.clip {
        Some(p) => load_video(p)?,
        None => stegact::data::generate_clip(&cfg.synthetic, a.class, 0)?.video,
    };
    fresh_dir(&a.out)?;
    for set in multilevel_dwt(&clip, a.levels)? {
        for b in Band::ALL {
            set.band(b).save(a.out.join(format!("level{}_{b}.vtns", set.level)), Dtype::F64)?;
        }
    }
    let rows = energy_table(&clip, a.levels)?;
    let table = report::energy_table_text(&rows);
    print!("{table}");
    fs::write(a.out.join("energy.txt"), &table)?;
    Ok(fp)
}
