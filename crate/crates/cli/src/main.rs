use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use coseg::data::{
    load_folder_dataset, load_rgb_png, save_instance_png, save_label_png, save_rgb8_png, write_folder_dataset, Dataset, GeneratorSpec, Split,
};
use coseg::metrics::MetricReport;
use coseg::pipeline::{evaluate, format_table, load_checkpoint, run_ablation, AblationRow, Model, Trainer};
use coseg::report::{hstack, metric_bars_svg, overlay, table_csv, table_markdown, to_rgb8, TableRow};
use coseg::{load_config, Error, ExperimentConfig};

const CONFIG_ENV: &str = "COSEG_CONFIG";

/// Fields that only affect inference and scoring, so they may be changed
/// on a trained checkpoint.
const INFERENCE_FIELDS: [&str; 5] = ["batch_size", "fg_threshold", "edge_threshold", "min_instance_area", "metrics_backend"];

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

fn flag(field: &str) -> String {
    field.replace('_', "-")
}

fn config_args(fields: &[String]) -> Vec<Arg> {
    fields
        .iter()
        .map(|f| {
            Arg::new(f.clone())
                .long(flag(f))
                .value_name("VALUE")
                .help_heading("Config overrides")
                .help(format!("Sets `{f}`"))
        })
        .collect()
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn config_file_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(format!("TOML experiment config (default: ${CONFIG_ENV}, else built-in defaults)"))
}

fn cli() -> Command {
    let all = ExperimentConfig::field_names();
    let inference: Vec<String> = INFERENCE_FIELDS.iter().map(|s| s.to_string()).collect();
    Command::new("coseg")
        .about("Co-segmentation experiments: data, training, evaluation, ablation and reports")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Writes a synthetic dataset folder with a 7:1:2 split")
                .arg(path_arg("out", "Output folder"))
                .arg(Arg::new("n").long("n").value_parser(value_parser!(usize)).default_value("100").help("Number of samples"))
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("0").help("Generator and split seed"))
                .arg(
                    Arg::new("spec")
                        .long("spec")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Generator spec (TOML, or JSON by extension)"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Trains on the train split, validating on val; keeps the best mean-PQ weights")
                .arg(config_file_arg())
                .arg(path_arg("data", "Dataset folder"))
                .arg(path_arg("out", "Output folder for checkpoint, logs and history"))
                .args(config_args(&all)),
        )
        .subcommand(
            Command::new("eval")
                .about("Scores a checkpoint on one split")
                .arg(path_arg("checkpoint", "Model checkpoint"))
                .arg(path_arg("data", "Dataset folder"))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "val", "test"])
                        .default_value("test"),
                )
                .arg(
                    Arg::new("report")
                        .long("report")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Metric report JSON (default: stdout)"),
                )
                .args(config_args(&inference)),
        )
        .subcommand(
            Command::new("predict")
                .about("Segments one image; writes label rasters, instance list and an overlay")
                .arg(path_arg("checkpoint", "Model checkpoint"))
                .arg(path_arg("image", "RGB PNG at the model's image size"))
                .arg(path_arg("out", "Output folder"))
                .args(config_args(&inference)),
        )
        .subcommand(
            Command::new("ablate")
                .about("Trains and tests all eight component combinations")
                .arg(config_file_arg())
                .arg(path_arg("data", "Dataset folder"))
                .arg(path_arg("out", "Output folder for the table"))
                .args(config_args(&all)),
        )
        .subcommand(
            Command::new("report")
                .about("Merges metric files into tables and a bar chart; optionally tiles overlay panels")
                .arg(
                    Arg::new("metrics")
                        .long("metrics")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .action(ArgAction::Append)
                        .num_args(1..)
                        .required(true)
                        .help("Metric report or ablation JSON files"),
                )
                .arg(path_arg("out", "Output folder"))
                .arg(
                    Arg::new("panels")
                        .long("panels")
                        .value_name("PNG")
                        .value_parser(value_parser!(PathBuf))
                        .action(ArgAction::Append)
                        .num_args(1..)
                        .help("Overlay images of equal size to tile into panels.png"),
                ),
        )
}

fn apply_overrides(mut cfg: ExperimentConfig, m: &ArgMatches, fields: &[String]) -> CliResult<ExperimentConfig> {
    for f in fields {
        if let Ok(Some(v)) = m.try_get_one::<String>(f) {
            cfg = cfg.with_override(f, v)?;
        }
    }
    Ok(cfg)
}

fn resolve_config(m: &ArgMatches) -> CliResult<ExperimentConfig> {
    let path = m
        .get_one::<PathBuf>("config")
        .cloned()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let base = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(base, m, &ExperimentConfig::field_names())
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).map_err(|e| format!("cannot create {}: {e}", p.display()))?;
    Ok(())
}

fn write_text(p: &Path, text: &str) -> CliResult {
    fs::write(p, text).map_err(|e| format!("cannot write {}: {e}", p.display()))?;
    Ok(())
}

fn read_text(p: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?)
}

fn load_dataset(data: &Path, cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let ds = load_folder_dataset(data)?.into_dataset()?;
    if let Some(s) = ds.samples.iter().find(|s| s.size() != (cfg.image_size, cfg.image_size)) {
        return Err(Error::Validation {
            field: "image_size".into(),
            message: format!("sample {} is {:?} but the model expects {}x{}", s.id, s.size(), cfg.image_size, cfg.image_size),
        }
        .into());
    }
    for s in &ds.samples {
        s.validate(cfg.num_semantic_classes, cfg.num_instance_classes)?;
    }
    Ok(ds)
}

fn gen_data(m: &ArgMatches) -> CliResult {
    let out = m.get_one::<PathBuf>("out").expect("required");
    let n = *m.get_one::<usize>("n").expect("default");
    let seed = *m.get_one::<u64>("seed").expect("default");
    let spec = match m.get_one::<PathBuf>("spec") {
        None => GeneratorSpec::default(),
        Some(p) => {
            let text = read_text(p)?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
            } else {
                toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
            }
        }
    };
    let ds = Dataset::synthetic(n, seed, &spec)?;
    write_folder_dataset(out, &ds, seed)?;
    println!(
        "wrote {n} samples to {} (train {}, val {}, test {})",
        out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(())
}

fn train(m: &ArgMatches) -> CliResult {
    let cfg = resolve_config(m)?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let data = load_dataset(m.get_one::<PathBuf>("data").expect("required"), &cfg)?;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string())?;
    let log_path = out.join("train_log.jsonl");
    let log = fs::File::create(&log_path).map_err(|e| format!("cannot create {}: {e}", log_path.display()))?;
    let mut trainer = Trainer::new(Model::new(&cfg)?).with_log(Box::new(BufWriter::new(log)));
    let epochs = cfg.epochs;
    let history = trainer.fit(&data, |s| {
        let val = s.val.as_ref().map_or_else(String::new, |r| format!(" val mean PQ {:.4} dice {:.4}", r.mean_pq, r.mean_dice));
        eprintln!("epoch {}/{epochs} lr {:.3e} loss {:.4}{val}", s.epoch + 1, s.lr, s.mean_total);
        true
    })?;
    trainer.save_checkpoint(out.join("model.ckpt"))?;
    write_text(&out.join("history.json"), &serde_json::to_string_pretty(&history)?)?;
    println!("saved {}", out.join("model.ckpt").display());
    Ok(())
}

fn load_model(m: &ArgMatches) -> CliResult<Model> {
    let (mut model, _) = load_checkpoint(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let fields: Vec<String> = INFERENCE_FIELDS.iter().map(|s| s.to_string()).collect();
    model.cfg = apply_overrides(model.cfg.clone(), m, &fields)?;
    Ok(model)
}

fn eval(m: &ArgMatches) -> CliResult {
    let model = load_model(m)?;
    let split = match m.get_one::<String>("split").map(String::as_str) {
        Some("train") => Split::Train,
        Some("val") => Split::Val,
        _ => Split::Test,
    };
    let data = load_dataset(m.get_one::<PathBuf>("data").expect("required"), &model.cfg)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(format!("split {split:?} is empty").into());
    }
    let report = evaluate(&model, &samples)?;
    let json = serde_json::to_string_pretty(&report)?;
    match m.get_one::<PathBuf>("report") {
        Some(p) => {
            write_text(p, &json)?;
            eprintln!(
                "{} images: dice {:.4} aji {:.4} mean PQ {:.4}; wrote {}",
                report.num_images,
                report.mean_dice,
                report.binary_aji,
                report.mean_pq,
                p.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn predict(m: &ArgMatches) -> CliResult {
    let model = load_model(m)?;
    let path = m.get_one::<PathBuf>("image").expect("required");
    let out = m.get_one::<PathBuf>("out").expect("required");
    let image = load_rgb_png(path)?;
    let (h, w) = (image.dim(1), image.dim(2));
    let size = model.cfg.image_size;
    if (h, w) != (size, size) {
        return Err(Error::ShapeMismatch(format!("{} is {w}x{h}, the model expects {size}x{size}", path.display())).into());
    }
    let batch = image.clone().reshaped(&[1, 3, h, w]);
    let pred = model.predict(&batch)?.remove(0);
    create_dir(out)?;
    save_label_png(&out.join("semantic.png"), &pred.semantic, h, w)?;
    save_instance_png(&out.join("instances.png"), &pred.instances.labels, h, w)?;
    let ov = overlay(&to_rgb8(&image), &pred.semantic, &pred.instances.labels, h, w, 0.4);
    save_rgb8_png(&out.join("overlay.png"), &ov, h, w)?;
    write_text(&out.join("instances.json"), &serde_json::to_string_pretty(&pred.instances.instances)?)?;
    println!("{} instances; wrote {}", pred.instances.num_instances(), out.display());
    Ok(())
}

fn ablate(m: &ArgMatches) -> CliResult {
    let cfg = resolve_config(m)?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let data = load_dataset(m.get_one::<PathBuf>("data").expect("required"), &cfg)?;
    create_dir(out)?;
    let rows = run_ablation(&cfg, &data, |r| {
        eprintln!(
            "row {} (P {}, D {}, C {}): mean PQ {:.4} in {:.0}s",
            r.row, r.enable_p, r.enable_d, r.enable_c, r.mean_pq, r.seconds
        )
    })?;
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
    let table = format_table(&rows);
    write_text(&out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablation_name(r: &AblationRow) -> String {
    let t = |b: bool| if b { "+" } else { "-" };
    format!("row {} P{} D{} C{}", r.row, t(r.enable_p), t(r.enable_d), t(r.enable_c))
}

fn table_rows(path: &Path) -> CliResult<Vec<TableRow>> {
    let text = read_text(path)?;
    let stem = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    if let Ok(r) = serde_json::from_str::<MetricReport>(&text) {
        return Ok(vec![TableRow::from_report(stem, &r)]);
    }
    match serde_json::from_str::<Vec<AblationRow>>(&text) {
        Ok(rows) => Ok(rows.iter().map(|r| TableRow::from_report(ablation_name(r), &r.report)).collect()),
        Err(e) => Err(Error::Parse(format!("{}: neither a metric report nor an ablation table ({e})", path.display())).into()),
    }
}

fn report(m: &ArgMatches) -> CliResult {
    let out = m.get_one::<PathBuf>("out").expect("required");
    let mut rows = Vec::new();
    for p in m.get_many::<PathBuf>("metrics").expect("required") {
        rows.extend(table_rows(p)?);
    }
    create_dir(out)?;
    write_text(&out.join("table.md"), &table_markdown(&rows))?;
    write_text(&out.join("table.csv"), &table_csv(&rows))?;
    write_text(&out.join("table.json"), &serde_json::to_string_pretty(&rows)?)?;
    write_text(&out.join("metrics.svg"), &metric_bars_svg(&rows))?;
    if let Some(panels) = m.get_many::<PathBuf>("panels") {
        let mut images = Vec::new();
        let mut size = None;
        for p in panels {
            let t = load_rgb_png(p)?;
            let s = (t.dim(1), t.dim(2));
            if *size.get_or_insert(s) != s {
                return Err(Error::ShapeMismatch(format!("panel {} is {}x{}, expected {}x{}", p.display(), s.1, s.0, size.unwrap().1, size.unwrap().0)).into());
            }
            images.push(to_rgb8(&t));
        }
        let (h, w) = size.expect("at least one panel");
        let (px, total) = hstack(&images, h, w, 4);
        save_rgb8_png(&out.join("panels.png"), &px, h, total)?;
    }
    println!("{} rows; wrote {}", rows.len(), out.display());
    Ok(())
}

fn run(m: &ArgMatches) -> CliResult {
    match m.subcommand() {
        Some(("gen-data", s)) => gen_data(s),
        Some(("train", s)) => train(s),
        Some(("eval", s)) => eval(s),
        Some(("predict", s)) => predict(s),
        Some(("ablate", s)) => ablate(s),
        Some(("report", s)) => report(s),
        _ => unreachable!("subcommand required"),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", one_line(line));
            return ExitCode::from(2);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
