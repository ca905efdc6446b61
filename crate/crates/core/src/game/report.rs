//! Report emission: JSON summary, CSV tables, and a plain-text verdict
//! digest. Writing the same outcome twice produces byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::game::config::ExperimentConfig;
use crate::game::runner::{ArmResult, GameOutcome, Verdict};

fn roc_to_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in points {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    out
}

fn digest_line(v: &Verdict) -> String {
    let tag = if v.amplified { "PASS" } else { "FAIL" };
    format!(
        "{tag} {metric} benign={b:.6} crafted={p:.6} margin={m:.6}\n",
        metric = v.metric,
        b = v.benign,
        p = v.crafted,
        m = v.margin_required,
    )
}

fn digest(outcome: &GameOutcome) -> String {
    let mut out = format!("config_hash {}\n", outcome.config_hash);
    for v in &outcome.verdicts {
        out.push_str(&digest_line(v));
    }
    let stealth = |a: &ArmResult| {
        format!(
            "stealth {name} s_gap={g:.6} s_mem={m:.6} s_mia={s:.6}\n",
            name = a.name,
            g = a.stealth.s_gap,
            m = a.stealth.s_mem,
            s = a.stealth.s_mia,
        )
    };
    out.push_str(&stealth(&outcome.benign));
    out.push_str(&stealth(&outcome.crafted));
    out
}

fn write_file(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    written.push(path);
    Ok(())
}

/// Writes all artifacts for one finished run into `dir` and returns the
/// paths written, in a stable order.
pub fn emit_reports(
    outcome: &GameOutcome,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut summary = serde_json::to_string_pretty(outcome)?;
    summary.push('\n');
    write_file(dir, "summary.json", &summary, &mut written)?;
    write_file(dir, "config.toml", &cfg.to_toml_string()?, &mut written)?;

    for arm in [&outcome.benign, &outcome.crafted] {
        let name = &arm.name;
        write_file(
            dir,
            &format!("{name}_roc_loss.csv"),
            &roc_to_csv(&arm.mia_loss.roc_points),
            &mut written,
        )?;
        write_file(
            dir,
            &format!("{name}_roc_ref.csv"),
            &roc_to_csv(&arm.mia_ref.roc_points),
            &mut written,
        )?;
        write_file(dir, &format!("{name}_history.csv"), &arm.history.to_csv(), &mut written)?;
    }

    write_file(dir, "digest.txt", &digest(outcome), &mut written)?;
    Ok(written)
}
