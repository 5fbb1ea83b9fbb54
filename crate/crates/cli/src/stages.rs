//! The experiment stages. Each reads the outputs of its prerequisites from
//! the output root, writes its own, and records a stage manifest.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use diffsynth_core::classifier::{cross_validate, Classifier, Examples, Family};
use diffsynth_core::datakit::{
    channel_stats, load_dataset, load_tensors, make_toy_corpus, open_image, preprocess, stratified_sample, to_image,
    LabeledDataset, Normalization, PreprocessSpec, Provenance,
};
use diffsynth_core::ddpm::{generate_dataset, train_dm, Generator, Generators, GENERATED_MANIFEST};
use diffsynth_core::denoiser::DenoiserModel;
use diffsynth_core::evalkit::{emit_report, evaluate_holdout, per_class_text, ReportRow};
use diffsynth_core::lime::{explain, render_heatmap, segment_grid};
use diffsynth_core::rng::{derive_seed, rng_for, tag};
use diffsynth_core::Tensor32;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::record::StageRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    ToyData,
    Split,
    TrainDm,
    Generate,
    TrainCnn,
    Evaluate,
    Explain,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::ToyData,
        Stage::Split,
        Stage::TrainDm,
        Stage::Generate,
        Stage::TrainCnn,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ToyData => "toy-data",
            Stage::Split => "split",
            Stage::TrainDm => "train-dm",
            Stage::Generate => "generate",
            Stage::TrainCnn => "train-cnn",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::ToyData | Stage::Split => &[],
            Stage::TrainDm => &[Stage::Split],
            Stage::Generate => &[Stage::TrainDm],
            Stage::TrainCnn => &[Stage::Generate],
            Stage::Evaluate => &[Stage::Split, Stage::TrainCnn],
            Stage::Explain => &[Stage::Split, Stage::TrainCnn],
            Stage::Report => &[Stage::TrainCnn, Stage::Evaluate],
        }
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| anyhow!("unknown stage `{s}`"))
    }
}

/// Fixed locations under the output root.
pub mod layout {
    pub const SPLITS: &str = "splits";
    pub const DM_TRAIN: &str = "splits/dm_train.csv";
    pub const HOLDOUT: &str = "splits/holdout.csv";
    pub const CLASSES: &str = "splits/classes.txt";
    pub const DM: &str = "dm_checkpoints";
    pub const SYNTHETIC: &str = "synthetic";
    pub const CNN: &str = "cnn_runs";
    pub const REPORTS: &str = "reports";
    pub const REPORT: &str = "reports/report.csv";
    pub const EVALUATION: &str = "reports/evaluation.csv";
    pub const EXPLANATIONS: &str = "explanations";
}

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: &'a Path,
    pub fingerprint: String,
}

impl Ctx<'_> {
    fn record(&self, stage: Stage) -> StageRecord {
        StageRecord::new(stage, self.fingerprint.clone())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, stage: Stage) -> Result<StageRecord> {
        for &pre in stage.prerequisites() {
            let path = StageRecord::path(self.out, pre);
            if !path.exists() {
                bail!(
                    "stage `{}` needs stage `{}`, which has not completed ({} missing)",
                    stage.as_str(),
                    pre.as_str(),
                    path.display()
                );
            }
        }
        Ok(self.record(stage))
    }

    fn classes(&self) -> Result<Vec<String>> {
        let path = self.path(layout::CLASSES);
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(text.lines().map(str::to_owned).collect())
    }

    fn split_sets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let classes = self.classes()?;
        let root = self.cfg.data_root();
        let train = LabeledDataset::read_manifest(&self.path(layout::DM_TRAIN), &root, Some(&classes))?;
        let hold = LabeledDataset::read_manifest(&self.path(layout::HOLDOUT), &root, Some(&classes))?;
        Ok((train, hold))
    }

    fn dm_dir(&self, name: &str) -> PathBuf {
        self.path(layout::DM).join(name)
    }

    fn cnn_dir(&self, family: Family) -> PathBuf {
        self.path(layout::CNN).join(family.as_str())
    }

    fn dm_spec(&self) -> PreprocessSpec {
        PreprocessSpec::dm(self.cfg.data.image_size, self.cfg.data.channels)
    }
}

pub fn run_stage(ctx: &Ctx<'_>, stage: Stage) -> Result<()> {
    let _ = fs::remove_file(StageRecord::path(ctx.out, stage));
    let t0 = Instant::now();
    log::info!("stage {} started", stage.as_str());
    let rec = match stage {
        Stage::ToyData => toy_data(ctx)?,
        Stage::Split => split(ctx)?,
        Stage::TrainDm => train_dm_stage(ctx)?,
        Stage::Generate => generate(ctx)?,
        Stage::TrainCnn => train_cnn(ctx)?,
        Stage::Evaluate => evaluate(ctx)?,
        Stage::Explain => explain_stage(ctx)?,
        Stage::Report => report(ctx)?,
    };
    rec.write(ctx.out)?;
    log::info!("stage {} finished in {:.1}s", stage.as_str(), t0.elapsed().as_secs_f64());
    Ok(())
}

fn toy_data(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::ToyData)?;
    let toy = ctx
        .cfg
        .toy
        .as_ref()
        .ok_or_else(|| anyhow!("the configuration has no [toy] table; `toy-data` renders only the toy corpus"))?;
    let root = ctx.cfg.data_root();
    if root.exists() {
        fs::remove_dir_all(&root).with_context(|| format!("cannot clear {}", root.display()))?;
    }
    let names: Vec<&str> = toy.classes.iter().map(String::as_str).collect();
    let ds = make_toy_corpus(&names, toy.per_class, toy.size, derive_seed(ctx.cfg.seed, &[tag("toy")]), &root)?;
    rec.value("images", ds.len());
    if let Ok(rel) = root.strip_prefix(ctx.out) {
        rec.tree(ctx.out, rel)?;
    }
    Ok(rec)
}

fn split(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::Split)?;
    let root = ctx.cfg.data_root();
    let ds = load_dataset(&root, Provenance::Real)?;
    let (train, hold) = stratified_sample(&ds, ctx.cfg.data.fraction, derive_seed(ctx.cfg.seed, &[tag("split")]))?;
    let dir = ctx.path(layout::SPLITS);
    fs::create_dir_all(&dir)?;
    let staged = dir.join("holdout.csv.new");
    hold.write_manifest(&staged)?;
    let final_path = ctx.path(layout::HOLDOUT);
    if final_path.exists() {
        let same = fs::read(&final_path)? == fs::read(&staged)?;
        fs::remove_file(&staged)?;
        if !same {
            bail!(
                "{} was already written with a different hold-out set; it is never overwritten (delete {} to re-split)",
                final_path.display(),
                dir.display()
            );
        }
    } else {
        fs::rename(&staged, &final_path)?;
    }
    train.write_manifest(&ctx.path(layout::DM_TRAIN))?;
    fs::write(ctx.path(layout::CLASSES), ds.classes().join("\n") + "\n")?;
    for (c, (name, (a, b))) in ds
        .classes()
        .iter()
        .zip(train.class_counts().into_iter().zip(hold.class_counts()))
        .enumerate()
    {
        log::info!("class {c} `{name}`: {a} sampled, {b} held out");
        rec.value(format!("sampled.{name}"), a);
        rec.value(format!("holdout.{name}"), b);
    }
    for f in [layout::CLASSES, layout::DM_TRAIN, layout::HOLDOUT] {
        rec.file(ctx.out, Path::new(f))?;
    }
    Ok(rec)
}

/// Loss history as `epoch,loss` CSV.
fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.6}", i + 1);
    }
    s
}

fn train_dm_stage(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::TrainDm)?;
    let cfg = ctx.cfg;
    let (train, _) = ctx.split_sets()?;
    let classes = train.classes().to_vec();
    let images = load_tensors::<f32>(&train, &ctx.dm_spec())?;
    let labels = train.labels();
    let sched = cfg.dm.schedule()?;
    let dm_root = ctx.path(layout::DM);
    if dm_root.exists() {
        fs::remove_dir_all(&dm_root)?;
    }
    let arch = cfg.dm.denoiser(&cfg.data, classes.len());
    // (directory name, label filter) per model
    let jobs: Vec<(String, Option<usize>)> = if cfg.dm.conditional {
        vec![("conditional".into(), None)]
    } else {
        classes.iter().enumerate().map(|(c, n)| (n.clone(), Some(c))).collect()
    };
    let results = jobs
        .par_iter()
        .enumerate()
        .map(|(j, (name, class))| {
            let (imgs, lbls): (Vec<Tensor32>, Vec<usize>) = images
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| class.is_none_or(|c| c == l))
                .map(|(x, &l)| (x.clone(), l))
                .unzip();
            let mut model = DenoiserModel::<f32>::build(arch.clone(), &mut rng_for(cfg.seed, &[tag("dm_init"), j as u64]))?;
            let tc = cfg.dm.training(derive_seed(cfg.seed, &[tag("dm_train"), j as u64]));
            let dir = ctx.dm_dir(name);
            let cond_labels = cfg.dm.conditional.then_some(lbls.as_slice());
            let hist = train_dm(&mut model, &imgs, cond_labels, &sched, &tc, Some(&dir))?;
            fs::write(dir.join("loss.csv"), loss_csv(&hist.epoch_losses))?;
            log::info!("diffusion model `{name}`: {} images, {} steps", imgs.len(), hist.steps);
            Ok::<_, anyhow::Error>((name.clone(), hist.epoch_losses))
        })
        .collect::<Result<Vec<_>>>()?;
    for (name, losses) in results {
        let first = losses.first().copied().unwrap_or(f64::NAN);
        let last = losses.last().copied().unwrap_or(f64::NAN);
        rec.value(format!("loss_first.{name}"), format!("{first:.6}"));
        rec.value(format!("loss_last.{name}"), format!("{last:.6}"));
    }
    rec.tree(ctx.out, Path::new(layout::DM))?;
    Ok(rec)
}

fn generate(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::Generate)?;
    let cfg = ctx.cfg;
    let classes = ctx.classes()?;
    let counts = cfg.generate.counts_for(&classes)?;
    let names: Vec<String> = if cfg.dm.conditional {
        vec!["conditional".into()]
    } else {
        classes.clone()
    };
    let mut models = Vec::new();
    for name in &names {
        let dir = ctx.dm_dir(name).join("final");
        if !dir.exists() {
            bail!(
                "stage `generate` needs stage `train-dm`: no diffusion checkpoint at {}",
                dir.display()
            );
        }
        let (model, _, _) = DenoiserModel::<f32>::load(&dir)?;
        models.push(model);
    }
    let sampler = cfg.dm.sampler()?;
    let gens: Vec<Generator<'_, DenoiserModel<f32>>> = models
        .iter()
        .zip(&names)
        .map(|(m, n)| Generator {
            model: m,
            checkpoint_id: format!("{n}:{}", m.params.fingerprint()),
        })
        .collect();
    let gens = if cfg.dm.conditional {
        Generators::Conditional(gens.into_iter().next().expect("one conditional model"))
    } else {
        Generators::PerClass(gens)
    };
    let out_dir = ctx.path(layout::SYNTHETIC);
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir)?;
    }
    let records = generate_dataset(
        &gens,
        &classes,
        &counts,
        &sampler,
        &out_dir,
        derive_seed(cfg.seed, &[tag("generate")]),
        cfg.generate.batch_size,
    )?;
    rec.value("images", records.len());
    rec.tree(ctx.out, Path::new(layout::SYNTHETIC))?;
    Ok(rec)
}

fn norm_meta(mean: &[f64], std: &[f64]) -> Vec<(String, String)> {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(",");
    vec![("norm_mean".into(), join(mean)), ("norm_std".into(), join(std))]
}

fn spec_from_meta(meta: &indexmap::IndexMap<String, String>, size: usize, channels: usize) -> Result<PreprocessSpec> {
    let parse = |k: &str| -> Result<Vec<f64>> {
        meta.get(k)
            .ok_or_else(|| anyhow!("classifier checkpoint lacks `{k}`"))?
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| anyhow!("malformed `{k}` in classifier checkpoint")))
            .collect()
    };
    Ok(PreprocessSpec {
        width: size,
        height: size,
        channels,
        normalization: Normalization::Standardize {
            mean: parse("norm_mean")?,
            std: parse("norm_std")?,
        },
    })
}

const SELECTED: &str = "selected";

fn train_cnn(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::TrainCnn)?;
    let cfg = ctx.cfg;
    let classes = ctx.classes()?;
    let syn_root = ctx.path(layout::SYNTHETIC);
    let syn = load_dataset(&syn_root, Provenance::Synthetic)?;
    if syn.classes() != classes.as_slice() {
        bail!(
            "synthetic classes {:?} differ from the real classes {:?}",
            syn.classes(),
            classes
        );
    }
    let size = cfg.data.image_size;
    let (mean, std) = channel_stats(&syn, size, size, cfg.data.channels)?;
    let spec = PreprocessSpec {
        width: size,
        height: size,
        channels: cfg.data.channels,
        normalization: Normalization::Standardize {
            mean: mean.clone(),
            std: std.clone(),
        },
    };
    let images = load_tensors::<f32>(&syn, &spec)?;
    let labels = syn.labels();
    let data = Examples::new(&images, &labels)?;
    let cnn_root = ctx.path(layout::CNN);
    if cnn_root.exists() {
        fs::remove_dir_all(&cnn_root)?;
    }
    for family in cfg.classifier.families()? {
        let ccfg = cfg.classifier.config(family, &cfg.data, classes.len())?;
        let cv = cross_validate(&ccfg, data, cfg.classifier.folds, derive_seed(cfg.seed, &[tag("cv"), tag(family.as_str())]))?;
        let dir = ctx.cnn_dir(family);
        let mut summary = String::from("fold,best_epoch,epochs_run,early_stopped,train_loss,train_acc,val_loss,val_acc\n");
        for (i, fold) in cv.folds.iter().enumerate() {
            let fdir = dir.join(format!("fold-{i}"));
            fold.run.write_history(&fdir.join("history.csv"))?;
            let model = cv.fold_model(&ccfg, i)?;
            let mut meta = norm_meta(&mean, &std);
            meta.push(("fold".into(), i.to_string()));
            model.save(&fdir.join("model"), &meta)?;
            let b = fold.run.best();
            let _ = writeln!(
                summary,
                "{i},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                fold.run.best_epoch,
                fold.run.epochs_run(),
                fold.run.early_stopped,
                b.train_loss,
                b.train_acc,
                b.val_loss,
                b.val_acc
            );
        }
        let a = &cv.aggregate;
        let _ = writeln!(
            summary,
            "mean,,,,{:.6},{:.6},{:.6},{:.6}",
            a.train_loss.mean, a.train_acc.mean, a.val_loss.mean, a.val_acc.mean
        );
        let _ = writeln!(
            summary,
            "std,,,,{:.6},{:.6},{:.6},{:.6}",
            a.train_loss.std, a.train_acc.std, a.val_loss.std, a.val_acc.std
        );
        fs::write(dir.join("cv.csv"), summary)?;
        let best = cv.best_fold();
        let mut meta = norm_meta(&mean, &std);
        meta.push(("fold".into(), best.to_string()));
        cv.fold_model(&ccfg, best)?.save(&dir.join(SELECTED), &meta)?;
        log::info!(
            "{family}: cross-validated val acc {:.4} +/- {:.4}; fold {best} selected",
            a.val_acc.mean,
            a.val_acc.std
        );
        rec.value(format!("val_acc.{family}"), format!("{:.6}", a.val_acc.mean));
        rec.value(format!("selected_fold.{family}"), best);
    }
    rec.tree(ctx.out, Path::new(layout::CNN))?;
    Ok(rec)
}

/// Hold-out entries that also appear among the training inputs.
fn leaked(holdout: &LabeledDataset, training: &[&LabeledDataset]) -> Vec<PathBuf> {
    let canon = |p: PathBuf| fs::canonicalize(&p).unwrap_or(p);
    let seen: HashSet<PathBuf> = training
        .iter()
        .flat_map(|d| d.absolute_paths())
        .map(canon)
        .collect();
    holdout
        .absolute_paths()
        .into_iter()
        .map(canon)
        .filter(|p| seen.contains(p))
        .collect()
}

/// Fails when any hold-out image was used to train the diffusion model or
/// the classifier.
pub fn check_leakage(holdout: &LabeledDataset, training: &[&LabeledDataset]) -> Result<()> {
    let overlap = leaked(holdout, training);
    if let Some(first) = overlap.first() {
        bail!(
            "leakage: {} hold-out images also appear in a training manifest (first: {})",
            overlap.len(),
            first.display()
        );
    }
    Ok(())
}

fn synthetic_set(ctx: &Ctx<'_>, classes: &[String]) -> Result<LabeledDataset> {
    let root = ctx.path(layout::SYNTHETIC);
    let mut r = csv::Reader::from_path(root.join(GENERATED_MANIFEST))?;
    let mut items = Vec::new();
    for row in r.records() {
        let row = row?;
        let label = classes
            .iter()
            .position(|c| c == &row[1])
            .ok_or_else(|| anyhow!("synthetic manifest names unknown class `{}`", &row[1]))?;
        items.push(diffsynth_core::datakit::Item {
            relative_path: row[0].to_owned(),
            label,
            provenance: Provenance::Synthetic,
        });
    }
    Ok(LabeledDataset::new(
        root,
        classes.to_vec(),
        items,
        diffsynth_core::datakit::SplitTag::None,
    )?)
}

fn numbers(line: &str) -> Vec<f64> {
    line.split(',').filter_map(|v| v.parse().ok()).collect()
}

fn cv_means(dir: &Path) -> Result<[f64; 4]> {
    let path = dir.join("cv.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let line = text
        .lines()
        .find(|l| l.starts_with("mean,"))
        .ok_or_else(|| anyhow!("{} has no mean row", path.display()))?;
    let v = numbers(line);
    <[f64; 4]>::try_from(v).map_err(|_| anyhow!("{} mean row malformed", path.display()))
}

fn evaluate(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::Evaluate)?;
    let cfg = ctx.cfg;
    let (train, hold) = ctx.split_sets()?;
    let syn = synthetic_set(ctx, train.classes())?;
    check_leakage(&hold, &[&train, &syn])?;
    let mut table = String::from("model,test_loss,test_acc,precision,recall,f1\n");
    let reports = ctx.path(layout::REPORTS);
    fs::create_dir_all(&reports)?;
    for family in cfg.classifier.families()? {
        let (model, meta) = Classifier::<f32>::load(&ctx.cnn_dir(family).join(SELECTED))?;
        let spec = spec_from_meta(&meta, cfg.data.image_size, cfg.data.channels)?;
        let ev = evaluate_holdout(&model, &hold, &spec)?;
        let m = &ev.metrics;
        log::info!(
            "{family}: hold-out accuracy {:.4}, macro f1 {:.4} over {} images",
            m.accuracy,
            m.macro_f1,
            hold.len()
        );
        let _ = writeln!(
            table,
            "{family},{:.6},{:.6},{:.6},{:.6},{:.6}",
            ev.test_loss, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
        );
        let txt = reports.join(format!("{family}_per_class.txt"));
        fs::write(&txt, per_class_text(hold.classes(), &ev))?;
        rec.file(ctx.out, &Path::new(layout::REPORTS).join(format!("{family}_per_class.txt")))?;
        rec.value(format!("test_acc.{family}"), format!("{:.6}", m.accuracy));
    }
    fs::write(ctx.path(layout::EVALUATION), table)?;
    rec.file(ctx.out, Path::new(layout::EVALUATION))?;
    Ok(rec)
}

fn explain_stage(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::Explain)?;
    let cfg = ctx.cfg;
    let (_, hold) = ctx.split_sets()?;
    let size = cfg.data.image_size;
    let root = ctx.path(layout::EXPLANATIONS);
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    let picks: Vec<usize> = hold
        .indices_by_class()
        .into_iter()
        .flat_map(|idx| idx.into_iter().take(cfg.lime.per_class))
        .collect();
    let seg = segment_grid(size, size, cfg.lime.config(0).cell_for(size))?;
    if cfg.lime.top_k > seg.count() {
        bail!("lime.top_k {} exceeds the {} grid segments", cfg.lime.top_k, seg.count());
    }
    let view = ctx.dm_spec();
    for family in cfg.classifier.families()? {
        let (model, meta) = Classifier::<f32>::load(&ctx.cnn_dir(family).join(SELECTED))?;
        let spec = spec_from_meta(&meta, size, cfg.data.channels)?;
        for &i in &picks {
            let item = &hold.items()[i];
            let img = open_image(&hold.path_of(item))?;
            let x = preprocess::<f32>(&img, &spec)?;
            let lime_cfg = cfg.lime.config(derive_seed(cfg.seed, &[tag("lime"), i as u64]));
            let predict = |batch: &[Tensor32]| -> diffsynth_core::Result<Vec<Vec<f64>>> {
                let p = model.predict(batch)?;
                Ok(p.data()
                    .chunks(model.num_classes())
                    .map(|r| r.iter().map(|&v| v as f64).collect())
                    .collect())
            };
            let expl = explain(predict, &x, &seg, None, &lime_cfg)?;
            let base = to_image(&preprocess::<f32>(&img, &view)?)?.to_rgb8();
            let overlay = render_heatmap(&expl, &base, &seg, cfg.lime.top_k)?;
            let stem = Path::new(&item.relative_path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_owned();
            let rel = Path::new(layout::EXPLANATIONS).join(family.as_str()).join(&stem);
            let dir = ctx.out.join(&rel);
            fs::create_dir_all(&dir)?;
            overlay.save(dir.join("overlay.png")).map_err(diffsynth_core::Error::from)?;
            let mut table = format!(
                "image {}\ntrue_class {}\npredicted_class {}\n",
                item.relative_path,
                hold.classes()[item.label],
                hold.classes()[expl.class_id]
            );
            table.push_str(&expl.table());
            fs::write(dir.join("weights.txt"), table)?;
            if expl.low_fit() {
                log::warn!("{family} explanation of {} fits poorly (r2 {:.3})", item.relative_path, expl.r2);
            }
        }
    }
    rec.value("images", picks.len());
    rec.tree(ctx.out, Path::new(layout::EXPLANATIONS))?;
    Ok(rec)
}

fn report(ctx: &Ctx<'_>) -> Result<StageRecord> {
    let mut rec = ctx.require(Stage::Report)?;
    let cfg = ctx.cfg;
    let path = ctx.path(layout::EVALUATION);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for family in cfg.classifier.families()? {
        let line = text
            .lines()
            .find(|l| l.split(',').next() == Some(family.as_str()))
            .ok_or_else(|| anyhow!("stage `report` needs stage `evaluate` for family `{family}`"))?;
        let [test_loss, test_acc, precision, recall, f1] = <[f64; 5]>::try_from(numbers(line))
            .map_err(|_| anyhow!("{} row for `{family}` malformed", path.display()))?;
        let [train_loss, train_acc, val_loss, val_acc] = cv_means(&ctx.cnn_dir(family))?;
        rows.push(ReportRow {
            model: family.as_str().into(),
            dataset: cfg.data.name.clone(),
            train_loss,
            val_loss,
            test_loss,
            train_acc,
            val_acc,
            test_acc,
            precision,
            recall,
            f1,
        });
    }
    emit_report(&rows, &ctx.path(layout::REPORT))?;
    rec.value("rows", rows.len());
    rec.file(ctx.out, Path::new(layout::REPORT))?;
    Ok(rec)
}
