//! Drivers behind the `dfrd` binary: executing runs, sweeps, and the check
//! suite, and writing every artifact a run emits.
//!
//! Artifacts land inside the chosen output directory only, and file names
//! carry the seed and a timestamp (plus a counter on collision), so a rerun
//! never silently overwrites an earlier one.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::{render_config, split_assignment};
use crate::error::{Error, Result};
use crate::orchestrator::{mean_std, run_experiment, ExperimentConfig, RunOutput};
use crate::params::save_checkpoint;

/// Seed-hierarchy description recorded in every manifest.
pub const SEED_HIERARCHY: &str = "master -> data.{centers,train,test} | partition | testsplit | \
     init.{global,generator} | round[t].{sample, extract[i][layer], client[i], reinit, \
     server[e].{labels, noise, ema[d].{labels,noise}}}";

/// A unique path `dir/base[-k].ext` that does not exist yet.
fn unique_path(dir: &Path, base: &str, ext: &str) -> PathBuf {
    let mut candidate = dir.join(format!("{base}.{ext}"));
    let mut k = 0;
    while candidate.exists() {
        k += 1;
        candidate = dir.join(format!("{base}-{k}.{ext}"));
    }
    candidate
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Artifact paths of one finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub output: RunOutput,
}

fn write_manifest(
    path: &Path,
    cfg: &ExperimentConfig,
    output: &RunOutput,
    csv_path: &Path,
) -> Result<()> {
    let mut text = String::new();
    text.push_str("# run manifest; non-comment lines form the resolved config\n");
    text.push_str(&format!("# csv={}\n", csv_path.display()));
    text.push_str(&format!("# wall_secs={:.3}\n", output.wall_secs));
    text.push_str(&format!("# summary {}\n", output.summary.line()));
    text.push_str(&format!("# seed_hierarchy {SEED_HIERARCHY}\n"));
    text.push_str(&render_config(cfg));
    fs::write(path, text)?;
    Ok(())
}

/// Runs `cfg` once per seed, writing one CSV and one manifest per run.
pub fn execute_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seeds: &[u64],
    tag: &str,
) -> Result<Vec<RunArtifacts>> {
    fs::create_dir_all(out_dir)?;
    let stamp = timestamp();
    let mut artifacts = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let output = run_experiment(&run_cfg)?;

        let base = format!("{tag}_seed{seed}_{stamp}");
        let csv_path = unique_path(out_dir, &base, "csv");
        fs::write(&csv_path, output.csv())?;
        let manifest_path = unique_path(out_dir, &base, "manifest");
        write_manifest(&manifest_path, &run_cfg, &output, &csv_path)?;

        if run_cfg.save_checkpoint {
            let ckpt_path = unique_path(out_dir, &base, "ckpt");
            let mut file = fs::File::create(&ckpt_path)?;
            save_checkpoint(&output.final_global.named_tensors(), &mut file)?;
        }
        if run_cfg.save_partition {
            let part_path = unique_path(out_dir, &format!("{base}_train_partition"), "csv");
            fs::write(&part_path, output.train_partition.to_csv())?;
        }
        if run_cfg.dump_synthetic {
            for (round, s, labels) in &output.synthetic {
                let synth_path = unique_path(out_dir, &format!("{base}_synth_round{round}"), "csv");
                let mut text = String::new();
                let dim = s.cols();
                let header: Vec<String> = (0..dim).map(|d| format!("s{d}")).collect();
                text.push_str(&format!("label,{}\n", header.join(",")));
                for (row, &y) in labels.iter().enumerate() {
                    let vals: Vec<String> =
                        s.row(row).iter().map(|v| format!("{v:.6}")).collect();
                    text.push_str(&format!("{y},{}\n", vals.join(",")));
                }
                fs::write(&synth_path, text)?;
            }
        }

        log::info!("run {}: {}", csv_path.display(), output.summary.line());
        artifacts.push(RunArtifacts { seed, csv: csv_path, manifest: manifest_path, output });
    }
    Ok(artifacts)
}

/// Per-seed summary lines plus a mean/std footer.
pub fn summarize(artifacts: &[RunArtifacts]) -> String {
    let mut text = String::new();
    for a in artifacts {
        text.push_str(&a.output.summary.line());
        text.push('\n');
    }
    let g: Vec<f64> = artifacts.iter().map(|a| a.output.summary.top_g_acc).collect();
    let l: Vec<f64> = artifacts.iter().map(|a| a.output.summary.l_acc_at_top).collect();
    let (gm, gs) = mean_std(&g);
    let (lm, ls) = mean_std(&l);
    text.push_str(&format!(
        "top g_acc mean±std = {gm:.4}±{gs:.4} ({lm:.4}±{ls:.4}) over {} seeds\n",
        artifacts.len()
    ));
    text
}

/// One axis of a sweep: a key and the values to try.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses sweep arguments `key=v1,v2,...` into axes.
pub fn parse_sweep_axes(args: &[String]) -> Result<Vec<SweepAxis>> {
    let mut axes = Vec::new();
    for raw in args {
        let (key, value) = split_assignment(raw)?;
        let values: Vec<String> =
            value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(key, "sweep axis needs at least one value"));
        }
        axes.push(SweepAxis { key, values });
    }
    if axes.is_empty() {
        return Err(Error::contract("sweep needs at least one key=v1,v2 axis"));
    }
    Ok(axes)
}

fn cross_product(axes: &[SweepAxis]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(combos.len() * axis.values.len());
        for combo in &combos {
            for value in &axis.values {
                let mut extended = combo.clone();
                extended.push((axis.key.clone(), value.clone()));
                next.push(extended);
            }
        }
        combos = next;
    }
    combos
}

/// Result of one sweep combination.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub combo: Vec<(String, String)>,
    pub artifacts: Vec<RunArtifacts>,
    pub mean_top_g_acc: f64,
    pub std_top_g_acc: f64,
}

/// Runs the cross-product of the axes over the given seeds and writes a
/// comparison summary. Returns the entries in execution order.
pub fn execute_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seeds: &[u64],
    axes: &[SweepAxis],
) -> Result<(Vec<SweepEntry>, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for combo in cross_product(axes) {
        let run_cfg = crate::config::apply_overrides(cfg, &combo)?;
        let tag: String =
            combo.iter().map(|(k, v)| format!("{}-{v}", k.replace('.', "_"))).collect::<Vec<_>>().join("_");
        let artifacts = execute_run(&run_cfg, out_dir, seeds, &tag)?;
        let g: Vec<f64> = artifacts.iter().map(|a| a.output.summary.top_g_acc).collect();
        let (mean, std) = mean_std(&g);
        entries.push(SweepEntry { combo, artifacts, mean_top_g_acc: mean, std_top_g_acc: std });
    }

    let stamp = timestamp();
    let summary_path = unique_path(out_dir, &format!("sweep_{stamp}"), "csv");
    let mut text = String::from("combo,seed,top_round,top_g_acc,l_acc_at_top\n");
    for entry in &entries {
        let combo_label: String =
            entry.combo.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        for a in &entry.artifacts {
            text.push_str(&format!(
                "{combo_label},{},{},{:.6},{:.6}\n",
                a.seed, a.output.summary.top_round, a.output.summary.top_g_acc,
                a.output.summary.l_acc_at_top
            ));
        }
    }
    text.push_str("\n# per-combo mean±std of top g_acc\n");
    for entry in &entries {
        let combo_label: String =
            entry.combo.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        text.push_str(&format!(
            "# {combo_label}: {:.4}±{:.4}\n",
            entry.mean_top_g_acc, entry.std_top_g_acc
        ));
    }
    fs::write(&summary_path, text)?;
    Ok((entries, summary_path))
}

/// Runs the fast invariant suite, printing one line per check.
pub fn execute_check() -> bool {
    let mut ok = true;
    for (name, outcome) in crate::checks::run_checks() {
        match outcome {
            Ok(()) => println!("check {name}: PASS"),
            Err(e) => {
                ok = false;
                println!("check {name}: FAIL ({e})");
            }
        }
    }
    ok
}

/// Parses a `--seeds` list like `1,2,3`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>> = raw
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|_| Error::config("seeds", format!("bad seed `{part}`")))
        })
        .collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::DataConfig;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::Blobs { classes: 3, dim: 4, per_class: 15, test_per_class: 6, spread: 0.2 },
            num_clients: 3,
            active_per_round: 3,
            rounds: 2,
            hidden_widths: vec![6],
            gen_hidden: vec![6],
            noise_dim: 4,
            client_steps: 2,
            batch_size: 8,
            iters: 1,
            gen_iters: 1,
            model_iters: 1,
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn run_writes_csv_and_manifest_without_overwriting() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let first = execute_run(&cfg, dir.path(), &[3], "run").unwrap();
        let second = execute_run(&cfg, dir.path(), &[3], "run").unwrap();
        assert_ne!(first[0].csv, second[0].csv);
        assert!(first[0].csv.starts_with(dir.path()));
        let csv = std::fs::read_to_string(&first[0].csv).unwrap();
        assert!(csv.starts_with("round,g_acc"));
        assert_eq!(csv.lines().count(), 1 + cfg.rounds);
    }

    #[test]
    fn manifest_round_trips_to_identical_results() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let arts = execute_run(&cfg, dir.path(), &[9], "run").unwrap();
        let manifest = std::fs::read_to_string(&arts[0].manifest).unwrap();
        let parsed = crate::config::parse_config(&manifest).unwrap();
        let rerun = run_experiment(&parsed).unwrap();
        assert_eq!(rerun.csv(), arts[0].output.csv());
    }

    #[test]
    fn sweep_produces_one_csv_per_combo_and_a_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let axes = parse_sweep_axes(&["gate=diamond,triangle,nabla".to_string()]).unwrap();
        let (entries, summary) = execute_sweep(&cfg, dir.path(), &[3, 4], &axes).unwrap();
        assert_eq!(entries.len(), 3);
        for entry in &entries {
            assert_eq!(entry.artifacts.len(), 2);
            // Summary arithmetic: mean over the per-seed toppers.
            let g: Vec<f64> = entry.artifacts.iter().map(|a| a.output.summary.top_g_acc).collect();
            let expect = g.iter().sum::<f64>() / g.len() as f64;
            assert!((entry.mean_top_g_acc - expect).abs() < 1e-12);
        }
        let text = std::fs::read_to_string(&summary).unwrap();
        assert!(text.starts_with("combo,seed"));
        assert_eq!(text.lines().filter(|l| l.starts_with("gate=")).count(), 6);
    }

    #[test]
    fn seed_parsing() {
        assert_eq!(parse_seeds("1,2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
    }

    #[test]
    fn summarize_reports_mean_and_std() {
        let dir = tempfile::tempdir().unwrap();
        let arts = execute_run(&tiny_cfg(), dir.path(), &[1, 2, 3], "run").unwrap();
        let text = summarize(&arts);
        assert!(text.contains("over 3 seeds"));
        assert_eq!(text.lines().count(), 4);
    }
}
