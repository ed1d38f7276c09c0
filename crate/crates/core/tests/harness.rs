mod common;

use std::fs;
use std::process::Command;

use common::{map_fixture, pr_oracle, tiny_experiment};
use promptdist::harness::{
    evaluate_map, evaluate_model, load_run, read_csv, sweep_configs, train, write_csv, AblationSuite, Dataset,
    EpochMetrics, ReportRow, IOU_THRESHOLD,
};
use promptdist::synthworld::WorldSpec;
use proptest::prelude::*;

const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_hoi,loss_do,obj_ce,hoi_bce,l1,giou,gamma_sub,gamma_obj,gamma_int,alpha,map_full,map_rare,map_nonrare,map_unseen,map_seen";
const REPORT_HEADER: &str = "suite,label,N_q,N_s,N_p,K,lambda_do,query_params,param_count,epochs,final_loss,map_full,map_rare,map_nonrare,map_unseen,map_seen";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn map_equals_the_precision_recall_oracle(seed in any::<u64>()) {
        let f = map_fixture(seed);
        let r = evaluate_map(&f.dets, &f.gts, f.n_hoi, &f.rare, &f.unseen, IOU_THRESHOLD).unwrap();
        let oracle = pr_oracle(&f.dets, &f.gts, f.n_hoi);
        for (got, want) in r.per_pair_ap.iter().zip(&oracle) {
            match (got, want) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (None, None) => {}
                _ => prop_assert!(false, "pair presence differs: {got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn split_means_recompute_from_per_pair_aps(seed in any::<u64>()) {
        let f = map_fixture(seed);
        let r = evaluate_map(&f.dets, &f.gts, f.n_hoi, &f.rare, &f.unseen, IOU_THRESHOLD).unwrap();
        let aps: Vec<(usize, f64)> = r.per_pair_ap.iter().enumerate().filter_map(|(p, a)| a.map(|a| (p, a))).collect();
        prop_assert!(aps.iter().all(|(_, a)| (0.0..=1.0).contains(a)));
        let mean = |keep: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = aps.iter().filter(|(p, _)| keep(*p)).map(|(_, a)| *a).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        prop_assert_eq!(Some(r.map_full), mean(&|_| true));
        prop_assert_eq!(r.map_rare, mean(&|p| f.rare.contains(&p)));
        prop_assert_eq!(r.map_nonrare, mean(&|p| !f.rare.contains(&p)));
        if f.unseen.is_empty() {
            prop_assert_eq!(r.map_unseen, None);
            prop_assert_eq!(r.map_seen, None);
        } else {
            prop_assert_eq!(r.map_unseen, mean(&|p| f.unseen.contains(&p)));
            prop_assert_eq!(r.map_seen, mean(&|p| !f.unseen.contains(&p)));
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_map_bitwise() {
    let cfg = tiny_experiment();
    let data = Dataset::generate(&WorldSpec::toy(), &cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, Some(dir.path())).unwrap();
    let (loaded_cfg, model, store) = load_run(dir.path()).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(store, out.store);
    let ev = evaluate_model(&model, &store, &data.test, data.rare(), cfg.train.eval_seed, cfg.train.batch_size).unwrap();
    assert_eq!(ev, out.eval);
    assert_eq!(ev.map_full.to_bits(), out.metrics.last().unwrap().map_full.to_bits());
}

#[test]
fn metrics_schema_is_identical_across_model_variants() {
    let base = tiny_experiment();
    let data = Dataset::generate(&WorldSpec::toy(), &base.data).unwrap();
    let mut plain = base.clone();
    plain.components.prompt_query = false;
    let mut grid = base.clone();
    grid.model.pattern_dim = Some(2);
    let mut seen = Vec::new();
    for cfg in [base, plain, grid] {
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &data, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let header = text.lines().next().unwrap().to_string();
        assert_eq!(header, METRICS_HEADER);
        let rows: Vec<EpochMetrics> = read_csv(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), cfg.train.epochs);
        seen.push(rows[0].alpha.is_some());
    }
    // the plain query detector learns no margin, the others do
    assert_eq!(seen, vec![true, false, true]);
}

#[test]
fn report_rows_have_a_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let row = ReportRow {
        suite: "sampling".into(),
        label: "a, \"quoted\" label".into(),
        n_q: 16,
        n_s: 2,
        n_p: None,
        k: 8,
        lambda_do: 0.05,
        query_params: 1024,
        param_count: 9999,
        epochs: 4,
        final_loss: 1.5,
        map_full: 0.25,
        map_rare: Some(0.125),
        map_nonrare: None,
        map_unseen: None,
        map_seen: None,
    };
    write_csv(&path, std::slice::from_ref(&row)).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
    assert!(text.contains("\"a, \"\"quoted\"\" label\""));
    let back: Vec<ReportRow> = read_csv(&path).unwrap();
    assert_eq!(back, vec![row]);
}

#[test]
fn equal_budget_grids_validate_and_unequal_ones_fail() {
    let mut base = tiny_experiment();
    base.model.c = 64;
    base.model.heads = 4;
    let rows = sweep_configs(&[(32, 2), (64, 1)], &base).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(sweep_configs(&[(16, 1)], &base).unwrap().len(), 1);
    assert!(matches!(
        sweep_configs(&[(16, 1), (8, 3)], &base),
        Err(promptdist::Error::Config(_))
    ));
}

#[test]
fn suite_names_round_trip() {
    for s in AblationSuite::ALL {
        assert_eq!(s.to_string().parse::<AblationSuite>().unwrap(), s);
    }
    assert!("tables".parse::<AblationSuite>().is_err());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptdist"))
}

#[test]
fn cli_runs_a_small_pipeline_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = d.join("cfg.json");
    tiny_experiment().save(&cfg_path).unwrap();
    let ok = |args: &[&str]| {
        let out = cli().args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let cfg = p("cfg.json");
    ok(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    ok(&["train", "--config", &cfg, "--data", &p("data"), "--seed", "3", "--out", &p("run")]);
    ok(&["eval", "--run", &p("run"), "--data", &p("data"), "--out", &p("eval")]);
    ok(&["export-dist", "--run", &p("run"), "--out", &p("dist")]);
    for f in ["run/metrics.csv", "run/checkpoint.bin", "run/config.json", "eval/per_pair_ap.csv", "dist/dist_stats.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["seed"], 3);

    let fails = |args: &[&str]| {
        let status = cli().args(args).output().unwrap().status;
        assert!(!status.success(), "{args:?} succeeded");
    };
    fails(&["ablate", "--suite", "tables", "--out", &p("x")]);
    fails(&["train", "--config", &p("missing.json"), "--out", &p("x")]);
    fails(&["sweep-pattern-dim", "--config", &cfg, "--grid", "4x1,2x3", "--out", &p("x")]);
    fs::write(d.join("bad.json"), r#"{"train": {"epoch": 2}}"#).unwrap();
    fails(&["train", "--config", &p("bad.json"), "--out", &p("x")]);
}
