//! Golden latency table produced by an independent script.

use std::path::Path;
use std::process::Command;

use odimo::cost::{diana, LayerKind, LayerSpec};

pub struct Row {
    pub layer: LayerSpec,
    pub channels: usize,
    pub aimc: f64,
    pub digital: f64,
}

pub fn golden() -> Vec<Row> {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/cost_golden.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let n = |i: usize| f[i].parse::<usize>().unwrap();
            let kind = match f[0] {
                "conv" => LayerKind::Conv,
                "fc" => LayerKind::Fc,
                k => panic!("unexpected kind {k}"),
            };
            Row {
                layer: LayerSpec { c_in: n(1), c_out: n(2), fx: n(3), fy: n(4), ox: n(5), oy: n(6), kind },
                channels: n(7),
                aimc: f[8].parse().unwrap(),
                digital: f[9].parse().unwrap(),
            }
        })
        .collect()
}

pub fn check_table() {
    let d = diana();
    let rows = golden();
    assert!(rows.len() >= 20);
    for r in &rows {
        assert_eq!(d.get(0).latency(&r.layer, r.channels).unwrap(), r.aimc, "{:?} c={}", r.layer, r.channels);
        assert_eq!(d.get(1).latency(&r.layer, r.channels).unwrap(), r.digital, "{:?} c={}", r.layer, r.channels);
    }
    for v in [768.0, 80.0, 18432.0, 64.0] {
        assert!(rows.iter().any(|r| r.aimc == v || r.digital == v), "worked value {v} missing from the table");
    }
}

/// Runs the binary on every `step`-th row.
pub fn check_cost_eval(step: usize) {
    for r in golden().iter().step_by(step) {
        let l = &r.layer;
        let out = Command::new(env!("CARGO_BIN_EXE_odimo"))
            .args(["cost-eval", "--kind", if l.kind == LayerKind::Fc { "fc" } else { "conv" }])
            .args(["--c-in", &l.c_in.to_string(), "--c-out", &l.c_out.to_string()])
            .args(["--fx", &l.fx.to_string(), "--fy", &l.fy.to_string()])
            .args(["--ox", &l.ox.to_string(), "--oy", &l.oy.to_string()])
            .args(["--channels", &r.channels.to_string()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let want = format!("accelerator,channels,cycles\naimc,{c},{}\ndigital,{c},{}\n", r.aimc, r.digital, c = r.channels);
        assert_eq!(text, want);
    }
}
