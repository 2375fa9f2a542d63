//! One function per subcommand. Each loads and checks all inputs before it
//! creates or writes anything.

use std::fs;
use std::path::Path;

use eviscreen::benchmark::{
    append_results_csv, bar_chart_svg, contamination_study, generate_synthetic, line_chart_svg, run_experiment,
    scaling_study, ExperimentConfig, ExperimentResult, Method,
};
use eviscreen::contrastive::screen_training_free;
use eviscreen::feature_store::{aggregate_local, load_dataset, load_feature_maps, write_dataset, FeatureMap, Label, LabeledCase};
use eviscreen::knowledge_bank::{
    coreset_subsample, collect_features, denoise_bank, load_bank, save_bank, BankPair, KnowledgeBank,
};
use eviscreen::metrics::{full_report, read_scores_csv, report_to_csv, report_to_table};
use eviscreen::reasoning::train::log_to_csv;
use eviscreen::reasoning::{load_params, predict, save_params, train};
use eviscreen::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::PipelineConfig;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn aggregate_all(cases: Vec<LabeledCase>, window: usize) -> Result<Vec<LabeledCase>> {
    cases
        .into_par_iter()
        .map(|c| Ok(LabeledCase::new(aggregate_local(&c.features, window)?, c.label)))
        .collect()
}

fn load_banks(cfg: &PipelineConfig) -> Result<BankPair> {
    let (normal, path) = cfg.bank_paths()?;
    BankPair::new(load_bank(&normal)?, load_bank(&path)?)
}

pub fn synth(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let cases = generate_synthetic(&cfg.experiment.synth)?;
    let manifest = write_dataset(out, &cases)?;
    println!("wrote {} cases, manifest {}", cases.len(), manifest.display());
    Ok(())
}

pub fn build_bank(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let manifest = cfg.manifest()?;
    let dataset = load_dataset(manifest)?;
    let b = &cfg.bank;
    let mut built: Vec<(Label, &str, KnowledgeBank)> = Vec::new();
    for (label, name) in [(Label::Normal, "normal"), (Label::Pathological, "pathological")] {
        let cases: Vec<LabeledCase> = dataset.iter().filter(|c| c.label == label).cloned().collect();
        if cases.is_empty() {
            continue;
        }
        let mut set = collect_features(&cases, b.window)?;
        if let (Label::Pathological, Some(q)) = (label, b.denoise_q) {
            set = denoise_bank(&set, q, b.denoise_k)?;
        }
        built.push((label, name, coreset_subsample(&set, b.ratio, b.seed, b.normalize)?));
    }
    if built.is_empty() {
        return Err(Error::Input(format!("manifest {} lists no cases", manifest.display())));
    }
    create_dir(out)?;
    let mut sidecar = serde_json::Map::new();
    sidecar.insert("manifest".into(), json!(manifest.display().to_string()));
    sidecar.insert("window".into(), json!(b.window));
    sidecar.insert("denoise_q".into(), json!(b.denoise_q));
    sidecar.insert("denoise_k".into(), json!(b.denoise_k));
    for (_, name, bank) in &built {
        let file = format!("{name}.evkb");
        save_bank(bank, &out.join(&file))?;
        sidecar.insert(
            (*name).into(),
            json!({ "file": file, "size": bank.len(), "dim": bank.dim(), "provenance": bank.provenance() }),
        );
        println!("{name} bank: {} vectors of dimension {}", bank.len(), bank.dim());
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(sidecar)).expect("json");
    write(&out.join("banks.json"), text + "\n")
}

fn score_line(id: &str, score: f64, label: Option<Label>) -> String {
    let label = label.map(|l| l.as_u8().to_string()).unwrap_or_default();
    format!("{id},{score},{label}\n")
}

pub fn screen(cfg: &PipelineConfig, emit_maps: bool, reasoning: bool) -> Result<()> {
    let out = cfg.out_dir()?;
    let maps_in = load_feature_maps(cfg.manifest()?)?;
    let banks = load_banks(cfg)?;
    let params = if reasoning {
        let ckpt = cfg
            .paths
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("reasoning screening needs --checkpoint or paths.checkpoint".into()))?;
        Some(load_params(ckpt)?)
    } else {
        None
    };
    if emit_maps && reasoning {
        return Err(Error::Config("--emit-maps is only available for contrastive screening".into()));
    }
    let contrastive = cfg.contrastive();
    let results: Vec<(FeatureMap, Option<Label>, f64, Option<String>)> = maps_in
        .into_par_iter()
        .map(|(fm, label)| {
            let fm = aggregate_local(&fm, cfg.bank.window)?;
            let (score, map) = match &params {
                Some(p) => (predict(&fm, &banks, p)?.score, None),
                None => {
                    let r = screen_training_free(&fm, &banks, &contrastive)?;
                    (r.score, r.abnormality_map.map(|m| m.to_csv()))
                }
            };
            Ok((fm, label, score, map))
        })
        .collect::<Result<_>>()?;
    create_dir(out)?;
    let mut csv = String::from("case_id,score,label\n");
    for (fm, label, score, _) in &results {
        csv.push_str(&score_line(fm.case_id(), *score, *label));
    }
    write(&out.join("scores.csv"), csv)?;
    if emit_maps {
        let dir = out.join("maps");
        create_dir(&dir)?;
        for (i, (fm, _, _, map)) in results.iter().enumerate() {
            let name = format!("{i:05}_{}.csv", sanitize(fm.case_id()));
            write(&dir.join(name), map.as_deref().unwrap_or_default())?;
        }
    }
    println!("scored {} cases into {}", results.len(), out.join("scores.csv").display());
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn train_cmd(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let dataset = aggregate_all(load_dataset(cfg.manifest()?)?, cfg.bank.window)?;
    let banks = load_banks(cfg)?;
    let model = train(&dataset, &banks, &cfg.reasoning, &cfg.train)?;
    create_dir(out)?;
    let ckpt = cfg.paths.checkpoint.clone().unwrap_or_else(|| out.join("model.evrp"));
    save_params(&model.params, &ckpt)?;
    write(&out.join("train_log.csv"), log_to_csv(&model.log))?;
    match model.log.last() {
        Some(last) => println!("trained {} steps, final loss {:.6}, checkpoint {}", model.log.len(), last.loss, ckpt.display()),
        None => println!("no training steps, checkpoint {}", ckpt.display()),
    }
    Ok(())
}

pub fn eval(cfg: &PipelineConfig, scores: &Path) -> Result<()> {
    let cases = read_scores_csv(scores)?;
    let report = full_report(&cases, &cfg.spe_at)?;
    let table = report_to_table(&report);
    if let Some(out) = cfg.paths.out_dir.as_deref() {
        create_dir(out)?;
        write(&out.join("report.csv"), report_to_csv(&report))?;
        write(&out.join("report.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Scaling,
    Contamination,
    Ablation,
}

fn study_dataset(cfg: &PipelineConfig) -> Result<Vec<LabeledCase>> {
    match &cfg.paths.manifest {
        Some(m) => load_dataset(m),
        None => generate_synthetic(&cfg.experiment.synth),
    }
}

fn print_results(results: &[ExperimentResult]) {
    for r in results {
        let spe: Vec<String> = r.report.spe_at.iter().map(|(x, v)| format!("spe@{x}={v:.4}")).collect();
        println!(
            "{:<20} {:<24} auroc={:.4} ap={:.4} {} csr={:.4} ({:.1}s)",
            r.label,
            r.method,
            r.report.auroc,
            r.report.ap,
            spe.join(" "),
            r.report.csr,
            r.wall_clock.as_secs_f64()
        );
    }
}

pub fn study(cfg: &PipelineConfig, which: Study, sizes: Option<Vec<usize>>) -> Result<()> {
    let out = cfg.out_dir()?;
    let dataset = study_dataset(cfg)?;
    let exp: &ExperimentConfig = &cfg.experiment;
    let (name, results, chart) = match which {
        Study::Scaling => {
            let sizes = sizes.unwrap_or_else(|| cfg.study.bank_sizes.clone());
            let results = scaling_study(&dataset, exp, &sizes)?;
            let xs: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
            let level = exp.recall_levels.first().copied().unwrap_or(95.0);
            let series = vec![
                ("AUROC".to_string(), results.iter().map(|r| r.report.auroc).collect()),
                (format!("Spe@{level}%R"), results.iter().map(|r| r.report.spe_at[0].1).collect()),
            ];
            let chart = line_chart_svg("contrastive_dual vs bank size", &xs, &series);
            ("scaling", results, chart)
        }
        Study::Contamination => {
            let (clean, dirty) = contamination_study(&dataset, exp, cfg.study.contamination)?;
            let mut results = vec![clean, dirty];
            if let Some(q) = cfg.study.denoise_q {
                let denoised_cfg = ExperimentConfig {
                    contamination: cfg.study.contamination,
                    denoise_q: Some(q),
                    ..exp.clone()
                };
                let mut r = run_experiment(&dataset, Method::ContrastiveDual, &denoised_cfg)?;
                r.label = format!("denoised={q}");
                results.push(r);
            }
            let bars: Vec<(String, f64)> = results.iter().map(|r| (r.label.clone(), r.report.auroc)).collect();
            ("contamination", results, bar_chart_svg("AUROC under bank contamination", &bars))
        }
        Study::Ablation => {
            let results = Method::ALL
                .iter()
                .map(|&m| run_experiment(&dataset, m, exp))
                .collect::<Result<Vec<_>>>()?;
            let bars: Vec<(String, f64)> = results.iter().map(|r| (r.method.to_string(), r.report.auroc)).collect();
            ("ablation", results, bar_chart_svg("AUROC by method", &bars))
        }
    };
    create_dir(out)?;
    append_results_csv(&out.join("results.csv"), name, &results)?;
    write(&out.join(format!("{name}.svg")), chart)?;
    print_results(&results);
    Ok(())
}

