use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use adafgrad_core::data::{load_manifest, synth_sequence, Split, SyntheticSpec};
use adafgrad_core::engine::{run_sequence, slide_embeddings, Method, RunConfig};
use adafgrad_core::report::{load_params, loss_log_csv, save_params, RunReport};
use adafgrad_core::Error;
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use crate::plots;

pub const REPORT_FILE: &str = "report.json";
pub const ACC_MATRIX_FILE: &str = "acc_matrix.csv";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const PARAMS_FILE: &str = "params.json";
pub const BUFFER_FILE: &str = "buffer.wrb";

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())).into())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: u64, force: bool) -> Result<()> {
    let spec: SyntheticSpec = match spec_path {
        Some(p) => read_json(p, "spec")?,
        None => SyntheticSpec::default(),
    };
    if !force && out.is_dir() && out.read_dir()?.next().is_some() {
        return Err(Error::Config(format!("{} is not empty (pass --force to write into it)", out.display())).into());
    }
    let generated = synth_sequence(&spec, seed, out)?;
    let m = &generated.manifest;
    let counts = m.split_counts();
    println!(
        "wrote {} tasks, {} classes to {}",
        m.n_tasks(),
        m.c_total(),
        generated.manifest_path.display()
    );
    for (t, task) in m.file.tasks.iter().enumerate() {
        let n = |s| counts.get(&(t, s)).copied().unwrap_or(0);
        println!(
            "  {}: {} classes, train {} / val {} / test {}",
            task.name,
            task.classes.len(),
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        );
    }
    Ok(())
}

pub fn train(manifest_path: &Path, config: Option<&Path>, method: Option<Method>, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let mut cfg: RunConfig = match config {
        Some(p) => read_json(p, "config")?,
        None => RunConfig::default(),
    };
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let start = Instant::now();
    let outcome = run_sequence(&cfg, &manifest)?;
    let report = RunReport::new(&cfg, &manifest, &outcome, start.elapsed().as_secs_f64());
    if !report.metrics.all_finite() {
        return Err(Error::NonFinite(format!("metrics {:?}", report.metrics)).into());
    }

    report.save(&out.join(REPORT_FILE))?;
    if let Some(m) = &outcome.acc_matrix {
        write(&out.join(ACC_MATRIX_FILE), m.to_csv())?;
    }
    write(&out.join(LOSS_LOG_FILE), loss_log_csv(&outcome.log))?;
    save_params(&outcome.params, &out.join(PARAMS_FILE))?;
    if let Some(b) = &outcome.buffer {
        b.save(&out.join(BUFFER_FILE))?;
    }

    let m = &report.metrics;
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} seed {}: ACC {:.4}  masked {:.4}  AUC {:.4}  mACC {}  BWT {}  FWT {}  FGT {}  ({:.1}s)",
        cfg.method.name(),
        cfg.seed,
        m.acc,
        m.masked_acc,
        m.auc,
        opt(m.macc),
        opt(m.bwt),
        opt(m.fwt),
        opt(m.fgt),
        report.wall_clock_secs
    );
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub const COMPARISON_HEADER: &str = "run,method,seed,n_tasks,acc,masked_acc,auc,macc,bwt,fwt,fgt,wall_clock_secs";

pub fn report(runs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    let loaded: Vec<(String, RunReport)> = runs
        .par_iter()
        .map(|d| Ok((run_label(d), RunReport::load(&d.join(REPORT_FILE))?)))
        .collect::<Result<_>>()?;
    let n_tasks = loaded[0].1.n_tasks();
    let odd: Vec<String> = loaded
        .iter()
        .filter(|(_, r)| r.n_tasks() != n_tasks)
        .map(|(l, r)| format!("{l} ({} tasks)", r.n_tasks()))
        .collect();
    if !odd.is_empty() {
        return Err(Error::Config(format!(
            "runs have incompatible task counts: {} has {n_tasks}, but {}",
            loaded[0].0,
            odd.join(", ")
        ))
        .into());
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = String::from(COMPARISON_HEADER);
    csv.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for (label, r) in &loaded {
        let m = &r.metrics;
        let _ = writeln!(
            csv,
            "{label},{},{},{},{},{},{},{},{},{},{},{}",
            r.method.name(),
            r.seed,
            r.n_tasks(),
            m.acc,
            m.masked_acc,
            m.auc,
            opt(m.macc),
            opt(m.bwt),
            opt(m.fwt),
            opt(m.fgt),
            r.wall_clock_secs
        );
    }
    write(&out.join("comparison.csv"), csv)?;
    write(&out.join("accuracy_curves.svg"), plots::accuracy_curves(&loaded))?;
    write(&out.join("acc_vs_fgt.svg"), plots::acc_vs_fgt(&loaded))?;
    write(&out.join("confidence.svg"), plots::confidence_boxes(&loaded))?;
    println!("compared {} runs into {}", loaded.len(), out.display());
    Ok(())
}

pub fn dump_embeddings(run: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    let params = load_params(&run.join(PARAMS_FILE))?;
    let manifest = load_manifest(manifest_path)?;
    let d = manifest.dims();
    if params.dims.d_vis != d.d_vis || params.dims.c_text != d.c_text || params.dims.c_total != manifest.c_total() {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not fit manifest (d_vis {}, c_text {}, {} classes)",
            params.dims,
            d.d_vis,
            d.c_text,
            manifest.c_total()
        ))
        .into());
    }
    let slides: Vec<_> = (0..manifest.n_tasks())
        .map(|t| manifest.load_split(t, Split::Test))
        .collect::<adafgrad_core::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let embeddings = slide_embeddings(&params, &slides)?;

    let mut csv = String::from("slide_id,task,class,global_class");
    for i in 0..params.dims.d_model {
        let _ = write!(csv, ",e{i}");
    }
    csv.push('\n');
    for (s, e) in slides.iter().zip(&embeddings) {
        let _ = write!(csv, "{},{},{},{}", s.slide_id, s.task_index, s.class_in_task, s.global_class);
        for v in e {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write(out, csv)?;
    println!("wrote {} embeddings of width {} to {}", slides.len(), params.dims.d_model, out.display());
    Ok(())
}
