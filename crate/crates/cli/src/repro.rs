//! The five-arm reproduction suite on the synthetic domains.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{exit, CliError, CliResult};
use crate::io::write_text;
use crate::run::{run_experiment, RunSummary};

/// Arm names, in table order; each is read from `<name>.toml`.
pub const ARMS: [&str; 5] = ["baseline", "ensemble", "dann_with_kidney", "dann_no_kidney", "dann_stain_norm"];

/// Reference accuracies from the full-size study, shown beside each arm.
pub fn paper_note(arm: &str) -> &'static str {
    match arm {
        "baseline" => "n/a",
        "ensemble" => "0.500-0.623",
        "dann_with_kidney" => "0.8695",
        "dann_no_kidney" => "0.9556",
        "dann_stain_norm" => "0.6660",
        _ => "",
    }
}

pub struct ArmResult {
    pub name: String,
    pub summary: RunSummary,
}

impl ArmResult {
    fn target(&self) -> Option<&grla_core::evaluation::MetricsReport> {
        self.summary.target_test.as_ref()
    }
}

/// A named directional check and whether it held.
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn assertions(arms: &[ArmResult]) -> Vec<Assertion> {
    let acc = |name: &str| arms.iter().find(|a| a.name == name).and_then(|a| a.target()).map(|m| m.accuracy);
    let mut out = Vec::new();
    if let (Some(dann), Some(base)) = (acc("dann_no_kidney"), acc("baseline")) {
        out.push(Assertion {
            name: "dann_no_kidney beats baseline by 10 points".into(),
            passed: dann - base >= 0.10,
            detail: format!("{dann:.4} - {base:.4} = {:+.4}", dann - base),
        });
    }
    if let Some(arm) = arms.iter().find(|a| a.name == "ensemble") {
        let best = arm.summary.members.iter().map(|(_, m)| m.accuracy).fold(f64::NEG_INFINITY, f64::max);
        if let Some(ens) = arm.target().map(|m| m.accuracy) {
            out.push(Assertion {
                name: "ensemble within 5 points of its best member".into(),
                passed: ens >= best - 0.05,
                detail: format!("{ens:.4} vs best member {best:.4}"),
            });
        }
    }
    out
}

fn table(arms: &[ArmResult], checks: &[Assertion]) -> (String, String) {
    let mut txt = String::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["arm", "target", "n", "accuracy", "precision", "recall", "f1", "paper_accuracy"])
        .expect("in-memory write");
    writeln!(
        txt,
        "{:<18} {:<26} {:>9} {:>9} {:>9} {:>9}   paper-scale, not reproduced here",
        "arm", "target", "accuracy", "precision", "recall", "f1"
    )
    .unwrap();
    for a in arms {
        let rows: Vec<(String, &grla_core::evaluation::MetricsReport)> = if a.summary.members.is_empty() {
            a.target().map(|m| (m.domain_tag.clone(), m)).into_iter().collect()
        } else {
            let mut v: Vec<_> = a.summary.members.iter().map(|(_, m)| (m.domain_tag.clone(), m)).collect();
            v.extend(a.target().map(|m| (m.domain_tag.clone(), m)));
            v
        };
        for (tag, m) in rows {
            writeln!(
                txt,
                "{:<18} {:<26} {:>9.4} {:>9.4} {:>9.4} {:>9.4}   {}",
                a.name,
                tag,
                m.accuracy,
                m.precision,
                m.recall,
                m.f1,
                paper_note(&a.name)
            )
            .unwrap();
            csv.write_record([
                a.name.clone(),
                tag,
                m.n.to_string(),
                m.accuracy.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                paper_note(&a.name).to_string(),
            ])
            .expect("in-memory write");
        }
    }
    txt.push('\n');
    for c in checks {
        writeln!(txt, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).unwrap();
    }
    (txt, String::from_utf8(csv.into_inner().expect("flush")).expect("utf-8"))
}

/// Runs every arm found in `configs` into `out/<arm>`, then writes
/// `summary.txt` and `summary.csv`. Exit code 1 when a check fails.
pub fn run_repro(configs: &Path, out: &Path, epochs: Option<usize>, seed: Option<u64>) -> CliResult<u8> {
    let mut arms = Vec::new();
    for name in ARMS {
        let path = configs.join(format!("{name}.toml"));
        if !path.is_file() {
            return Err(CliError::artifact(&path, "arm config not found"));
        }
        let mut cfg = ExperimentConfig::load(&path, seed)?;
        if let Some(e) = epochs {
            cfg.train.epochs = e;
        }
        eprintln!("== {name}");
        let summary = run_experiment(&cfg, &cfg.train, &out.join(name))?;
        arms.push(ArmResult {
            name: name.to_string(),
            summary,
        });
    }
    let checks = assertions(&arms);
    let (txt, csv) = table(&arms, &checks);
    write_text(&out.join("summary.txt"), &txt)?;
    write_text(&out.join("summary.csv"), &csv)?;
    print!("{txt}");
    Ok(if checks.iter().all(|c| c.passed) { exit::OK } else { exit::VERIFICATION_FAILED })
}
