//! The five subcommands: gen-data, pretrain, reconstruct, probe,
//! ablate. Every command writes `resolved.cfg` into its output
//! directory before doing any work, so a run is reproducible from its
//! artifacts alone.

use std::path::{Path, PathBuf};

use oae_core::data::{
    load_checkpoint, load_cloud, save_cloud, DatasetManifest, ItemSource, LoadMode, ManifestItem,
    ShapeCategory, Split,
};
use oae_core::data::generate_instance;
use oae_core::geometry::{
    chamfer_distance, fps, knn_group_centralize, occlude, FpsStart, PointCloud,
};
use oae_core::pipeline::{
    ablate, dataset_features, linear_probe, mix2, model_init_seed, pretrain, stream,
    AblationValues, Benchmark, LossKind, MetricsSplit, ProbeConfig, ProbeReport,
};
use oae_core::tensor::{Tape, Tensor};
use oae_core::transformer::ModelWeights;

use crate::args::FlagBag;
use crate::config::RunConfig;
use crate::errors::CliError;

/// Config keys that double as override flags (flag, section, key).
/// Underscores become hyphens; `seed` maps to the training seed.
const CONFIG_FLAGS: &[(&str, &str, &str)] = &[
    ("n-points", "model", "n_points"),
    ("groups", "model", "groups"),
    ("patch-size", "model", "patch_size"),
    ("enc-channels", "model", "enc_channels"),
    ("enc-depth", "model", "enc_depth"),
    ("dec-depth", "model", "dec_depth"),
    ("heads", "model", "heads"),
    ("mlp-ratio", "model", "mlp_ratio"),
    ("embed-hidden", "model", "embed_hidden"),
    ("init-std", "model", "init_std"),
    ("zero-init-ffn", "model", "zero_init_ffn"),
    ("lr", "train", "lr"),
    ("weight-decay", "train", "weight_decay"),
    ("batch-size", "train", "batch_size"),
    ("epochs", "train", "epochs"),
    ("warmup-epochs", "train", "warmup_epochs"),
    ("schedule", "train", "schedule"),
    ("ratio", "train", "ratio"),
    ("strategy", "train", "strategy"),
    ("loss", "train", "loss"),
    ("seed", "train", "seed"),
    ("augment", "train", "augment"),
    ("train-count", "data", "train_count"),
    ("test-count", "data", "test_count"),
    ("jitter", "data", "jitter"),
    ("data-seed", "data", "data_seed"),
];

/// Desk defaults, then the `--config` file, then individual flag
/// overrides; validated as a whole.
fn load_run_config(bag: &mut FlagBag) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::desk();
    if let Some(path) = bag.take("config") {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("cannot read config `{path}`: {e}")))?;
        cfg.apply_file(&text, &path)?;
    }
    for &(flag, section, key) in CONFIG_FLAGS {
        if let Some(value) = bag.take(flag) {
            cfg.set(section, key, &value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(bag: &mut FlagBag) -> Result<PathBuf, CliError> {
    bag.take("out")
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage("`--out DIR` is required".into()))
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.cfg"), cfg.render())?;
    Ok(())
}

/// The labelled dataset plus its class names: loaded from
/// `--data MANIFEST` when given (paths resolve relative to the
/// manifest), otherwise generated in memory from the `[data]` section.
fn load_benchmark(
    cfg: &RunConfig,
    data_flag: Option<String>,
) -> Result<(Benchmark, Vec<String>), CliError> {
    let (manifest, base) = match data_flag {
        Some(path) => {
            let path = PathBuf::from(path);
            let manifest = DatasetManifest::load(&path)?;
            let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (manifest, base)
        }
        None => (
            DatasetManifest::synthetic_five_class_totals(
                cfg.data.train_count,
                cfg.data.test_count,
                cfg.data.data_seed,
            ),
            PathBuf::from("."),
        ),
    };
    let classes = manifest.classes().to_vec();
    let bench = Benchmark {
        train: oae_core::data::load_dataset(
            &manifest,
            Split::Train,
            cfg.model.n_points,
            cfg.data.jitter,
            &base,
        )?,
        test: oae_core::data::load_dataset(
            &manifest,
            Split::Test,
            cfg.model.n_points,
            cfg.data.jitter,
            &base,
        )?,
    };
    Ok((bench, classes))
}

// ---------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------

pub fn gen_data(mut bag: FlagBag) -> Result<(), CliError> {
    let cfg = load_run_config(&mut bag)?;
    let out = required_out(&mut bag)?;
    let format = bag.take("format").unwrap_or_else(|| "bin".into());
    bag.finish()?;
    let ext = match format.as_str() {
        "bin" | "xyz" => format.as_str(),
        other => {
            return Err(CliError::Usage(format!(
                "bad value `{other}` for `--format`: expected `bin` or `xyz`"
            )));
        }
    };
    write_resolved(&out, &cfg)?;
    std::fs::create_dir_all(out.join("clouds"))?;

    let seed_manifest = DatasetManifest::synthetic_five_class_totals(
        cfg.data.train_count,
        cfg.data.test_count,
        cfg.data.data_seed,
    );
    let mut file_manifest = DatasetManifest::new(seed_manifest.classes().to_vec())?;
    let mut sequence = vec![0usize; seed_manifest.classes().len() * 2];
    for item in seed_manifest.items() {
        let ItemSource::Seed(seed) = item.source else {
            unreachable!("synthetic manifests are seed-backed");
        };
        let category: ShapeCategory = seed_manifest.classes()[item.label].parse()?;
        let cloud = generate_instance(category, cfg.model.n_points, cfg.data.jitter, seed)?;

        let split_slot = match item.split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let seq = &mut sequence[item.label * 2 + split_slot];
        let rel = format!(
            "clouds/{}_{}_{:04}.{}",
            item.split.name(),
            category.name(),
            *seq,
            ext
        );
        *seq += 1;
        save_cloud(&cloud, &out.join(&rel))?;
        file_manifest.push(ManifestItem {
            split: item.split,
            label: item.label,
            source: ItemSource::File(rel),
        })?;
    }
    file_manifest.save(&out.join("manifest.txt"))?;
    println!(
        "wrote {} train + {} test clouds ({} points each, {ext}) and manifest.txt to {}",
        cfg.data.train_count,
        cfg.data.test_count,
        cfg.model.n_points,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------

pub fn cmd_pretrain(mut bag: FlagBag) -> Result<(), CliError> {
    let cfg = load_run_config(&mut bag)?;
    let out = required_out(&mut bag)?;
    let data_flag = bag.take("data");
    let val = match bag.take("val").as_deref() {
        None | Some("off") => false,
        Some("on") => true,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "bad value `{other}` for `--val`: expected `on` or `off`"
            )));
        }
    };
    bag.finish()?;
    write_resolved(&out, &cfg)?;

    let (bench, _classes) = load_benchmark(&cfg, data_flag)?;
    let train_clouds: Vec<PointCloud> = bench.train.iter().map(|(c, _)| c.clone()).collect();
    let val_clouds: Vec<PointCloud> = if val {
        bench.test.iter().map(|(c, _)| c.clone()).collect()
    } else {
        Vec::new()
    };

    let result = pretrain(&train_clouds, &val_clouds, &cfg.train, &cfg.model, Some(&out))?;
    let last_train = result
        .metrics
        .iter()
        .rev()
        .find(|m| m.split == MetricsSplit::Train);
    match last_train {
        Some(m) => println!(
            "pretrained {} epochs ({} steps); final train loss {:.6}",
            cfg.train.epochs, m.step, m.loss
        ),
        None => println!("no training steps ran (epochs = {})", cfg.train.epochs),
    }
    println!(
        "artifacts: {}, {}, {}",
        out.join("final.oae").display(),
        out.join("metrics.csv").display(),
        out.join("resolved.cfg").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------

fn rows_to_cloud(rows: &[[f64; 3]]) -> Result<PointCloud, CliError> {
    Ok(PointCloud::new(rows.to_vec())?)
}

pub fn reconstruct(mut bag: FlagBag) -> Result<(), CliError> {
    let cfg = load_run_config(&mut bag)?;
    let out = required_out(&mut bag)?;
    let checkpoint = bag
        .take("checkpoint")
        .ok_or_else(|| CliError::Usage("`--checkpoint FILE` is required".into()))?;
    let cloud_flag = bag.take("cloud");
    let category_flag = bag.take("category");
    let gen_seed = bag.take_parsed::<u64>("gen-seed")?.unwrap_or(42);
    bag.finish()?;
    write_resolved(&out, &cfg)?;

    let (weights, _report) =
        load_checkpoint(Path::new(&checkpoint), &cfg.model, LoadMode::Strict)?;

    let cloud = match (cloud_flag, category_flag) {
        (Some(path), None) => load_cloud(Path::new(&path))?,
        (None, category) => {
            let category: ShapeCategory = category.as_deref().unwrap_or("sphere").parse()?;
            generate_instance(category, cfg.model.n_points, cfg.data.jitter, gen_seed)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "`--cloud` and `--category` are mutually exclusive".into(),
            ));
        }
    };
    let cloud = cloud.normalized()?;

    let seed_indices = fps(cloud.points(), cfg.model.groups, FpsStart::Index(0))?;
    let patches = knn_group_centralize(&cloud, &seed_indices, cfg.model.patch_size)?;
    let mask = occlude(
        patches.groups(),
        cfg.train.ratio,
        cfg.train.strategy,
        &patches.seeds,
        mix2(cfg.train.rng_seed, stream::OCCLUDE),
    )?;
    if mask.occluded().is_empty() || mask.visible().is_empty() {
        return Err(CliError::Usage(format!(
            "ratio {} leaves {} occluded / {} visible patches; reconstruction needs both",
            cfg.train.ratio,
            mask.occluded().len(),
            mask.visible().len()
        )));
    }

    let k = patches.patch_points();
    let mut vis_offsets = Vec::new();
    let mut vis_seeds = Vec::new();
    let mut visible_points = Vec::new();
    for &g in mask.visible() {
        for p in &patches.patches[g] {
            vis_offsets.extend(p.iter().map(|&c| c as f32));
        }
        vis_seeds.extend(patches.seeds[g].iter().map(|&c| c as f32));
        visible_points.extend(patches.absolute_patch(g));
    }
    let mut all_seeds = Vec::new();
    for s in &patches.seeds {
        all_seeds.extend(s.iter().map(|&c| c as f32));
    }
    let mut target_points = Vec::new();
    for &g in mask.occluded() {
        target_points.extend(patches.absolute_patch(g));
    }

    let vis_patches_t =
        Tensor::from_vec(vec![mask.visible().len(), k, 3], vis_offsets).map_err(inner_numeric)?;
    let vis_seeds_t =
        Tensor::from_vec(vec![mask.visible().len(), 3], vis_seeds).map_err(inner_numeric)?;
    let all_seeds_t =
        Tensor::from_vec(vec![patches.groups(), 3], all_seeds).map_err(inner_numeric)?;

    let model = weights.frozen();
    let mut tape: Tape<f32> = Tape::new();
    let encoded = model.encode(&mut tape, &vis_patches_t, &vis_seeds_t)?;
    let decoded = model.decode(&mut tape, &encoded, &mask, &all_seeds_t)?;
    let predicted = model.reconstruct(&mut tape, &decoded, &mask, &all_seeds_t)?;

    let predicted_points: Vec<[f64; 3]> = predicted
        .data()
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    let targets_f32: Vec<[f32; 3]> = target_points
        .iter()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    let cd = chamfer_distance(&mut tape, &predicted, &targets_f32)?
        .scalar()
        .map_err(inner_numeric)? as f64;

    save_cloud(&cloud, &out.join("input.xyz"))?;
    save_cloud(&rows_to_cloud(&visible_points)?, &out.join("visible.xyz"))?;
    save_cloud(&rows_to_cloud(&predicted_points)?, &out.join("predicted.xyz"))?;
    save_cloud(&rows_to_cloud(&target_points)?, &out.join("target_occluded.xyz"))?;

    println!(
        "reconstructed {} occluded of {} patches: input {} pts, visible {} pts, predicted {} pts",
        mask.occluded().len(),
        patches.groups(),
        cloud.len(),
        visible_points.len(),
        predicted_points.len()
    );
    println!("occluded-patch chamfer distance: {cd:.6}");
    println!("wrote input.xyz, visible.xyz, predicted.xyz, target_occluded.xyz to {}", out.display());
    Ok(())
}

fn inner_numeric(e: oae_core::tensor::TensorError) -> CliError {
    CliError::Numeric(e.to_string())
}

// ---------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------

fn probe_report_csv(report: &ProbeReport) -> String {
    format!(
        "split,accuracy\ntrain,{}\ntest,{}\n",
        report.train_accuracy, report.test_accuracy
    )
}

fn confusion_csv(report: &ProbeReport, classes: &[String]) -> String {
    let mut out = String::from("true,predicted,count\n");
    for (t, row) in report.confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", classes[t], classes[p], count));
        }
    }
    out
}

pub fn probe(mut bag: FlagBag) -> Result<(), CliError> {
    let cfg = load_run_config(&mut bag)?;
    let out = bag.take("out").map(PathBuf::from);
    let checkpoint = bag.take("checkpoint");
    let data_flag = bag.take("data");
    bag.finish()?;
    if let Some(dir) = &out {
        write_resolved(dir, &cfg)?;
    }

    let (bench, classes) = load_benchmark(&cfg, data_flag)?;
    let (weights, source) = match &checkpoint {
        Some(path) => {
            let (w, _) = load_checkpoint(Path::new(path), &cfg.model, LoadMode::Strict)?;
            (w, path.as_str())
        }
        None => (
            ModelWeights::<f32>::init(&cfg.model, model_init_seed(cfg.train.rng_seed))?,
            "random initialisation",
        ),
    };

    let (train_x, train_y) = dataset_features(&bench.train, &weights, &cfg.model)?;
    let (test_x, test_y) = dataset_features(&bench.test, &weights, &cfg.model)?;
    let report = linear_probe(&train_x, &train_y, &test_x, &test_y, &ProbeConfig::default())?;

    println!("linear probe on frozen features from {source}");
    println!(
        "train accuracy {:.4} ({} items), test accuracy {:.4} ({} items), {} classes",
        report.train_accuracy,
        bench.train.len(),
        report.test_accuracy,
        bench.test.len(),
        report.num_classes
    );
    println!("confusion (rows = true, columns = predicted):");
    print!("{:>10}", "");
    for name in classes.iter().take(report.num_classes) {
        print!("{name:>10}");
    }
    println!();
    for (t, row) in report.confusion.iter().enumerate() {
        print!("{:>10}", classes.get(t).map(String::as_str).unwrap_or("?"));
        for &count in row {
            print!("{count:>10}");
        }
        println!();
    }

    if let Some(dir) = &out {
        std::fs::write(dir.join("probe.csv"), probe_report_csv(&report))?;
        std::fs::write(dir.join("confusion.csv"), confusion_csv(&report, &classes))?;
        println!(
            "wrote {} and {}",
            dir.join("probe.csv").display(),
            dir.join("confusion.csv").display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------

fn parse_values(axis: &str, values: &str) -> Result<AblationValues, CliError> {
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::Usage(format!("`--values {values}` lists no values")));
    }
    let bad = |v: &str, e: String| CliError::Usage(format!("bad value `{v}` for axis {axis}: {e}"));
    match axis {
        "ratio" => Ok(AblationValues::Ratio(
            items
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| bad(v, e.to_string())))
                .collect::<Result<_, _>>()?,
        )),
        "strategy" => Ok(AblationValues::Strategy(
            items
                .iter()
                .map(|v| v.parse().map_err(|e: String| bad(v, e)))
                .collect::<Result<_, _>>()?,
        )),
        "loss" => Ok(AblationValues::Loss(
            items
                .iter()
                .map(|v| v.parse::<LossKind>().map_err(|e| bad(v, e)))
                .collect::<Result<_, _>>()?,
        )),
        "groups" => Ok(AblationValues::Groups(
            items
                .iter()
                .map(|v| v.parse::<usize>().map_err(|e| bad(v, e.to_string())))
                .collect::<Result<_, _>>()?,
        )),
        "patch-size" => Ok(AblationValues::PatchSize(
            items
                .iter()
                .map(|v| v.parse::<usize>().map_err(|e| bad(v, e.to_string())))
                .collect::<Result<_, _>>()?,
        )),
        other => Err(CliError::Usage(format!(
            "unknown ablation axis `{other}` (ratio, strategy, loss, groups, patch-size)"
        ))),
    }
}

pub fn cmd_ablate(mut bag: FlagBag) -> Result<(), CliError> {
    let cfg = load_run_config(&mut bag)?;
    let out = required_out(&mut bag)?;
    let axis = bag.take("axis").unwrap_or_else(|| "ratio".into());
    let values = bag
        .take("values")
        .unwrap_or_else(|| match axis.as_str() {
            "ratio" => "0,0.5,0.75,0.85".into(),
            "strategy" => "random,block".into(),
            "loss" => "chamfer,emd".into(),
            _ => String::new(),
        });
    let data_flag = bag.take("data");
    bag.finish()?;
    if values.is_empty() {
        return Err(CliError::Usage(format!(
            "axis `{axis}` has no default values; pass `--values ...`"
        )));
    }
    let sweep = parse_values(&axis, &values)?;
    write_resolved(&out, &cfg)?;

    let (bench, _classes) = load_benchmark(&cfg, data_flag)?;
    let rows = ablate(
        &cfg.train,
        &cfg.model,
        std::slice::from_ref(&sweep),
        &bench,
        &ProbeConfig::default(),
        Some(&out),
    )?;

    println!("{:<12}{:<10}{:>12}{:>14}{:>13}", "axis", "value", "train_loss", "probe_train", "probe_test");
    for row in &rows {
        let loss = if row.untrained {
            "untrained".to_string()
        } else {
            format!("{:.6}", row.final_train_loss)
        };
        println!(
            "{:<12}{:<10}{:>12}{:>14.4}{:>13.4}",
            row.axis, row.value, loss, row.probe_train_accuracy, row.probe_test_accuracy
        );
    }
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------

/// One command registry entry: name, handler, summary line.
type Handler = fn(FlagBag) -> Result<(), CliError>;
pub const COMMANDS: &[(&str, Handler, &str)] = &[
    ("gen-data", gen_data, "generate the synthetic dataset as cloud files plus a manifest"),
    ("pretrain", cmd_pretrain, "self-supervised pretraining; writes checkpoints and metrics.csv"),
    ("reconstruct", reconstruct, "export input/visible/predicted/target point clouds for one shape"),
    ("probe", probe, "linear evaluation of frozen features (pretrained or random)"),
    ("ablate", cmd_ablate, "sweep one knob, retrain per value, and tabulate probe accuracy"),
];
