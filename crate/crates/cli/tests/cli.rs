use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use agf_cli::output::{fmt_f64, read_run_csv};
use agf_cli::{cmd_plot, cmd_run, cmd_sweep, CliError, LoadedConfig, Mode, RunOptions};
use proptest::prelude::*;

fn config(src: &str) -> LoadedConfig {
    LoadedConfig::parse(src, Path::new("test.toml")).unwrap()
}

fn opts(out: &Path) -> RunOptions {
    RunOptions { out: Some(out.to_path_buf()), ..RunOptions::default() }
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const THREE_COSINE: &str = r#"
model = "modadd"
mode = "predict"
alpha = 1e-3
[modadd]
p = 20
hidden = 18
spectrum = [[1, 10.0, 0.0], [3, 5.0, 0.0], [5, 2.5, 0.0]]
"#;

const DLN: &str = r#"
model = "dln"
alpha = 1e-8
[dln]
two_coordinate = true
"#;

#[test]
fn predict_three_cosine_order_and_levels() {
    let dir = tempfile::tempdir().unwrap();
    let s = cmd_run(&config(THREE_COSINE), Mode::Predict, &opts(dir.path())).unwrap();
    let doc = json(s.dir.join("sequence.json"));
    assert_eq!(doc["order"], serde_json::json!(["xi=1", "xi=3", "xi=5"]));
    let losses: Vec<f64> = doc["steps"].as_array().unwrap().iter().map(|s| s["loss"].as_f64().unwrap()).collect();
    for (m, p) in losses.iter().zip([6.5625, 1.5625, 0.3125, 0.0]) {
        assert!((m - p).abs() < 1e-12, "{m} vs {p}");
    }
    let csv = fs::read_to_string(s.dir.join("sequence.csv")).unwrap();
    assert!(csv.starts_with("k,loss,tau,tau_lower_bound,feature,value\n"));
    assert!(!csv.contains('\r'));
}

#[test]
fn compare_dln_small_alpha_passes() {
    let dir = tempfile::tempdir().unwrap();
    let s = cmd_run(&config(DLN), Mode::Compare, &opts(dir.path())).unwrap();
    let doc = json(s.dir.join("compare.json"));
    assert_eq!(doc["pass"], true);
    let rows = doc["report"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["pass"] == true), "{rows:#?}");
    assert_eq!(doc["feature_order"]["measured"], serde_json::json!(["beta_0", "beta_1"]));
}

#[test]
fn compare_failure_is_exit_4_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let src = format!("{DLN}[compare]\nloss_rel = 1e-12\n");
    let err = cmd_run(&config(&src), Mode::Compare, &opts(dir.path())).unwrap_err();
    assert!(matches!(err, CliError::Comparison(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    let doc = json(dir.path().join("test").join("compare.json"));
    assert_eq!(doc["pass"], false);
}

#[test]
fn large_alpha_needs_flag() {
    let dir = tempfile::tempdir().unwrap();
    let src = "model = \"dln\"\nmode = \"gf\"\nalpha = 1.0\n[dln]\ntwo_coordinate = true\n[gf]\ntau_end = 0.5\nsamples = 50\n";
    let err = cmd_run(&config(src), Mode::Gf, &opts(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("KernelRegimeWarning"), "{err}");
    let manifest = json(dir.path().join("test").join("failures.json"));
    assert_eq!(manifest[0]["exit_code"], 2);

    let mut o = opts(dir.path());
    o.allow_large_alpha = true;
    cmd_run(&config(src), Mode::Gf, &o).unwrap();
    // Prediction is mode-independent and never guarded.
    cmd_run(&config(src), Mode::Predict, &opts(dir.path())).unwrap();
}

#[test]
fn dln_sweep_deviation_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let src = r#"
model = "dln"
alphas = [1e-2, 1e-4, 1e-6]
[dln]
two_coordinate = true
[compare]
reference = "agf"
measure = "probe"
"#;
    let mut o = opts(dir.path());
    o.workers = Some(2);
    let (s, report) = cmd_sweep(&config(src), &o).unwrap();
    let devs: Vec<f64> = report.rows.iter().map(|r| r.max_dev).collect();
    assert_eq!(report.rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![1e-2, 1e-4, 1e-6]);
    assert!(report.monotone, "{devs:?}");
    assert!(report.order_consistent);
    let (cols, rows) = {
        let mut r = csv::Reader::from_path(s.dir.join("sweep.csv")).unwrap();
        let h: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        (h, r.records().count())
    };
    assert_eq!(cols, ["alpha", "max_loss_err", "max_tau_err", "max_dev", "pass", "order"]);
    assert_eq!(rows, 3);
    for a in ["1e-2", "1e-4", "1e-6"] {
        assert!(s.dir.join(format!("alpha_{a}")).join("compare.json").exists());
    }
}

#[test]
fn sweep_needs_two_alphas() {
    let dir = tempfile::tempdir().unwrap();
    let src = "model = \"dln\"\nalphas = [1e-4]\n[dln]\ntwo_coordinate = true\n";
    let err = cmd_sweep(&config(src), &opts(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let src = "model = \"dln\"\nalphas = [1e-4, 1e-4]\n[dln]\ntwo_coordinate = true\n";
    assert!(cmd_sweep(&config(src), &opts(dir.path())).is_err());
}

#[test]
fn modadd_sweep_keeps_frequency_order() {
    let dir = tempfile::tempdir().unwrap();
    let src = r#"
model = "modadd"
alphas = [1e-2, 1e-3]
[modadd]
p = 7
hidden = 12
spectrum = [[1, 3.0, 0.4], [2, 2.0, -1.1]]
[gf]
tau_end = 20.0
samples = 600
"#;
    let (_, report) = cmd_sweep(&config(src), &opts(dir.path())).unwrap();
    assert!(report.order_consistent);
    for r in &report.rows {
        assert_eq!(r.order, ["power_1", "power_2"], "alpha {}", r.alpha);
    }
}

#[test]
fn run_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let src = "model = \"fcln\"\nmode = \"gf\"\nalpha = 1e-4\n[fcln]\nhidden = 3\ndiagonal = [3.0, 2.0, 1.0]\n[gf]\ntau_end = 1.0\nsamples = 200\n";
    let lc = config(src);
    let s = cmd_run(&lc, Mode::Gf, &opts(dir.path())).unwrap();
    let (cols, rows) = read_run_csv(&s.dir.join("run.csv")).unwrap();
    assert_eq!(cols, ["tau", "t_raw", "loss", "sv_0", "sv_1", "sv_2"]);

    let prob = agf_core::models::fcln::FclnProblem::diagonal(&[3.0, 2.0, 1.0], 3, 1e-4).unwrap();
    let mut cfg = agf_core::GfConfig::new(1e-4, 0, 1.0);
    cfg.samples = 200;
    let run = agf_core::gf_train(&prob, &cfg).unwrap();
    assert_eq!(rows.len(), run.times.len());
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].to_bits(), run.times[i].to_bits());
        assert_eq!(row[2].to_bits(), run.losses[i].to_bits());
        for (a, b) in row[3..].iter().zip(&run.observables[i]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    let meta = json(s.dir.join("run.json"));
    assert_eq!(meta["schema"], "agf-run/1");
    let targets: Vec<f64> = meta["observable_targets"].as_array().unwrap().iter().map(|t| t[1].as_f64().unwrap()).collect();
    for (t, e) in targets.iter().zip([3.0, 2.0, 1.0]) {
        assert!((t - e).abs() < 1e-12);
    }
}

#[test]
fn fixed_step_reruns_are_bit_identical() {
    let src = "model = \"attn\"\nmode = \"gf\"\nalpha = 1e-2\nseed = 5\n[attn]\nheads = 2\nn_ctx = 4\neigenvalues = [2.0, 1.0]\n[gf]\ntau_end = 0.5\nsamples = 100\n";
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut oa = opts(a.path());
    oa.fixed_step = true;
    let mut ob = opts(b.path());
    ob.fixed_step = true;
    let sa = cmd_run(&config(src), Mode::Gf, &oa).unwrap();
    let sb = cmd_run(&config(src), Mode::Gf, &ob).unwrap();
    for f in ["run.csv", "run.json"] {
        assert_eq!(fs::read(sa.dir.join(f)).unwrap(), fs::read(sb.dir.join(f)).unwrap(), "{f}");
    }
    let meta = json(sa.dir.join("run.json"));
    assert_eq!(meta["integrator"]["ctrl"]["method"], "rk4");

    let mut oc = opts(a.path());
    oc.fixed_step = true;
    oc.seed = Some(6);
    let sc = cmd_run(&config(src), Mode::Gf, &oc).unwrap();
    assert_ne!(fs::read(sc.dir.join("run.csv")).unwrap(), fs::read(sb.dir.join("run.csv")).unwrap());
}

#[test]
fn plot_empty_run_gives_empty_axes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    fs::write(&csv, "tau,t_raw,loss\n").unwrap();
    let files = cmd_plot(&[csv], &dir.path().join("plots")).unwrap();
    assert_eq!(files.len(), 1);
    let svg = fs::read_to_string(&files[0]).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("<path d=\"M"));
    assert!(!svg.contains("<polyline"));
}

#[test]
fn plot_rejects_foreign_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("other.csv");
    fs::write(&csv, "time,value\n0,1\n").unwrap();
    let err = cmd_plot(&[csv], dir.path()).unwrap_err();
    assert!(matches!(err, CliError::SchemaMismatch(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn fcln_plot_has_target_lines() {
    let dir = tempfile::tempdir().unwrap();
    let src = "model = \"fcln\"\nmode = \"gf\"\nalpha = 1e-6\n[fcln]\nhidden = 3\ndiagonal = [3.0, 2.0, 1.0]\n[gf]\ntau_end = 1.6\nsamples = 400\n";
    let s = cmd_run(&config(src), Mode::Gf, &opts(dir.path())).unwrap();
    let files = cmd_plot(&[s.dir.clone()], &dir.path().join("plots")).unwrap();
    let sv = files.iter().find(|f| f.to_string_lossy().ends_with("_singular_values.svg")).unwrap();
    let svg = fs::read_to_string(sv).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(svg.matches("stroke-dasharray=\"6,4\"").count(), 3 + 3, "three limits and three jump markers");
}

#[test]
fn attn_plot_marks_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let src = "model = \"attn\"\nmode = \"gf\"\nalpha = 1e-3\n[attn]\nheads = 4\nn_ctx = 8\neigenvalues = [2.0, 1.0]\n[gf]\ntau_end = 0.4\nsamples = 400\n";
    let s = cmd_run(&config(src), Mode::Gf, &opts(dir.path())).unwrap();
    let files = cmd_plot(&[s.dir.clone()], &dir.path().join("plots")).unwrap();
    let comp = files.iter().find(|f| f.to_string_lossy().ends_with("_components.svg")).unwrap();
    let svg = fs::read_to_string(comp).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("stroke-dasharray=\"2,3\"").count(), 2, "one dotted bound per head");
    let (_, rows) = read_run_csv(&s.dir.join("run.csv")).unwrap();
    let last = rows.last().unwrap();
    let a = [1.0 / 21.0, 1.0 / 12.0];
    // comp_0, comp_1 follow sv_0, sv_1 and four head norms.
    for (k, ak) in a.iter().enumerate() {
        assert!((last[3 + 2 + 4 + k] - ak).abs() < 0.05 * ak, "comp_{k} {}", last[9 + k]);
    }
}

#[test]
fn config_errors_point_at_lines() {
    let err = LoadedConfig::parse("model = \"dln\"\nalpha = 1e-3\nbogus = 1\n[dln]\ntwo_coordinate = true\n", Path::new("c.toml"))
        .unwrap_err();
    assert!(err.to_string().contains("c.toml:3:"), "{err}");
    assert_eq!(err.exit_code(), 2);

    let err = LoadedConfig::parse("model = \"dln\"\nalpha = 1e-3\n[dln]\ntwo_coordinate = true\nx = [[1.0]]\n", Path::new("c.toml"))
        .unwrap_err();
    assert!(err.to_string().contains("c.toml:3"), "{err}");

    let err = LoadedConfig::parse("model = \"fcln\"\nalpha = -1.0\n[fcln]\nhidden = 2\ndiagonal = [1.0]\n", Path::new("c.toml"))
        .unwrap_err();
    assert!(err.to_string().contains("c.toml:2: alpha"), "{err}");

    let err = LoadedConfig::parse("model = \"attn\"\nalpha = 1e-3\n[dln]\ntwo_coordinate = true\n", Path::new("c.toml")).unwrap_err();
    assert!(err.to_string().contains("does not match"), "{err}");

    let err = LoadedConfig::parse("model = \"dln\"\nalpha = 1e-3\n[dln]\ntwo_coordinate = true\n[gf]\nmethod = \"euler\"\n", Path::new("c.toml"))
        .unwrap_err();
    assert!(err.to_string().contains("c.toml:6:"), "{err}");
}

#[test]
fn example_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            LoadedConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert_eq!(n, 5);
}

#[test]
fn matrix_files_feed_dln() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.txt"), "# features by samples\n1 0\n0 1\n").unwrap();
    fs::write(dir.path().join("y.txt"), "2\n1\n").unwrap();
    let path = dir.path().join("m.toml");
    fs::write(&path, "model = \"dln\"\nalpha = 1e-6\n[dln]\nx_file = \"x.txt\"\ny_file = \"y.txt\"\n").unwrap();
    let lc = LoadedConfig::load(&path).unwrap();
    let s = cmd_run(&lc, Mode::Predict, &opts(dir.path())).unwrap();
    assert!(s.message.contains("1.25, 0.25"), "{}", s.message);
}

fn agf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agf"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, src: &str| {
        let p = dir.path().join(name);
        fs::write(&p, src).unwrap();
        p
    };
    let ok = write("ok.toml", THREE_COSINE);
    let st = agf().arg("predict").arg(&ok).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(0));

    let bad = write("bad.toml", "model = \"dln\"\nalpha = 1e-3\nextra = 2\n");
    assert_eq!(agf().arg("run").arg(&bad).arg("--out").arg(dir.path()).status().unwrap().code(), Some(2));

    let fail = write("fail.toml", &format!("{DLN}[compare]\nloss_rel = 1e-12\n"));
    assert_eq!(agf().arg("compare").arg(&fail).arg("--out").arg(dir.path()).status().unwrap().code(), Some(4));

    // A fixed step far beyond stability overflows.
    let blow = write("blow.toml", "model = \"dln\"\nmode = \"gf\"\nalpha = 1e-3\n[dln]\ntwo_coordinate = true\n[gf]\ntau_end = 50.0\ndt = 5.0\nmethod = \"rk4\"\n");
    assert_eq!(agf().arg("run").arg(&blow).arg("--out").arg(dir.path()).status().unwrap().code(), Some(3));
    let manifest = json(dir.path().join("blow").join("failures.json"));
    assert_eq!(manifest[0]["kind"], "numerical");
}

#[test]
fn out_dir_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("three_cosine.toml");
    fs::write(&cfg, THREE_COSINE).unwrap();
    let env_out = dir.path().join("from_env");
    let st = agf().arg("predict").arg(&cfg).env("AGF_OUT_DIR", &env_out).status().unwrap();
    assert!(st.success());
    assert!(env_out.join("three_cosine").join("sequence.json").exists());

    let flag_out = dir.path().join("from_flag");
    let st = agf().arg("predict").arg(&cfg).arg("--out").arg(&flag_out).env("AGF_OUT_DIR", &env_out).status().unwrap();
    assert!(st.success());
    assert!(flag_out.join("three_cosine").join("sequence.json").exists());
}

proptest! {
    #[test]
    fn float_text_round_trips(bits in any::<u64>()) {
        let x = f64::from_bits(bits);
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert!(back.to_bits() == x.to_bits() || (x.is_nan() && back.is_nan()));
    }
}
