use std::fs;
use std::path::Path;
use std::process::Command;

use mfdvac::cli::{config_hash, run_capture, EXIT_DOMAIN, EXIT_INPUT, EXIT_IO, EXIT_OK};

const SIX_SETPOINTS: &str = "17.4,22.9,24.4,18.0,12.5,21.9";

fn fixture(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|s| s.parse().unwrap()).collect())
        .collect();
    (headers, rows)
}

const TOY: &str = r#"
length_km = [1.0, 1.0]
trip_length_km = [0.5, 0.5]
free_speed = [30.0, 30.0]
critical_density = [25.0, 25.0]
jam_density = [100.0, 100.0]
lipschitz_d_frac = 0.2
split = [[0.4, 0.6], [0.6, 0.4]]
"#;

#[test]
fn validate_bundled_network() {
    let (code, out, _) = run_capture(&["validate", "six_region"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("verdict: pass"));
}

#[test]
fn validate_flags_perturbed_row() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("six_region.toml"))
        .unwrap()
        .replacen("[0.0, 0.1, 0.3, 0.4, 0.0, 0.2]", "[0.0, 0.1, 0.3, 0.4, 0.0, 0.25]", 1);
    let p = write(dir.path(), "bad.toml", &text);
    let (code, out, _) = run_capture(&["validate", &p]);
    assert_eq!(code, EXIT_DOMAIN);
    let line = out.lines().find(|l| l.contains("split_row_sums")).unwrap();
    assert!(line.starts_with("FAIL") && line.contains("[3]"), "{line}");
}

#[test]
fn missing_or_malformed_input_is_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml").display().to_string();
    assert_eq!(run_capture(&["validate", &missing]).0, EXIT_INPUT);
    let p = write(dir.path(), "junk.toml", "length_km = [1.0]\nbogus = 3\n");
    let (code, _, err) = run_capture(&["validate", &p]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("error"));
    assert_eq!(run_capture(&["frobnicate"]).0, EXIT_INPUT);
    assert_eq!(run_capture(&["simulate", "--scenario", &missing]).0, EXIT_INPUT);
}

#[test]
fn check_table_gains_by_interpretation() {
    let (code, out, _) = run_capture(&["check", "six_region", "--gains", "six_region_table"]);
    assert_eq!(code, EXIT_DOMAIN, "{out}");
    let (code, out, _) = run_capture(&[
        "check",
        "six_region",
        "--gains",
        "six_region_table",
        "--lipschitz-interpretation",
        "congested",
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
}

#[test]
fn check_synthesized_and_written() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("cert.toml");
    let (code, _, _) = run_capture(&[
        "check",
        "twenty_region",
        "--synthesize",
        "--xi-mode",
        "coordinate-descent",
        "--out",
        cert.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(&cert).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert!(v.get("eta").is_some() || text.contains("eta"));
    assert_eq!(run_capture(&["check", "six_region"]).0, EXIT_INPUT);
}

#[test]
fn check_isolated_region() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "one.toml",
        "length_km = [1.0]\ntrip_length_km = [0.5]\nfree_speed = [30.0]\ncritical_density = [25.0]\njam_density = [100.0]\nsplit = [[0.0]]\n",
    );
    assert_eq!(run_capture(&["check", &p, "--synthesize"]).0, EXIT_OK);
}

#[test]
fn calibrate_matches_equilibrium_oracle() {
    let (code, out, _) = run_capture(&[
        "calibrate",
        "six_region",
        "--setpoints",
        SIX_SETPOINTS,
        "--gains",
        "six_region_table",
    ]);
    assert_eq!(code, EXIT_OK);
    let v: toml::Value = toml::from_str(&out).unwrap();
    let arr = |k: &str| -> Vec<f64> {
        v[k].as_array().unwrap().iter().map(|x| x.as_float().unwrap()).collect()
    };
    let (u, c, eta) = (arr("u_star"), arr("proportional_c"), arr("eta"));
    let setpoints: Vec<f64> = SIX_SETPOINTS.split(',').map(|s| s.parse().unwrap()).collect();
    for i in 0..6 {
        assert!((c[i] - (u[i] + eta[i] * setpoints[i])).abs() < 1e-9);
    }
    // region 1: L = 1.2, l = 0.6, v = 30, rho_C = 26.3, rho* = 17.4, column-1 inflows by hand
    let g = |rho: f64, l_km: f64, trip: f64, v: f64, rc: f64, rj: f64| {
        let f = if rho <= rc { v * rho } else { v * rc * (rj - rho) / (rj - rc) };
        l_km / trip * f
    };
    let g1 = g(17.4, 1.2, 0.6, 30.0, 26.3, 118.0);
    let inflow = 0.15 * g(22.9, 1.0, 0.45, 35.0, 28.2, 125.0)
        + 0.05 * g(12.5, 1.02, 0.48, 35.0, 23.8, 120.0)
        + 0.32 * g(21.9, 0.88, 0.34, 31.0, 21.9, 106.0);
    assert!((u[0] - (g1 - inflow)).abs() < 1e-9);
    assert!((c[0] - (g1 - inflow + 63.3 * 17.4)).abs() < 1e-9);
    assert!((c[0] - 1269.5).abs() < 0.05);
}

#[test]
fn calibrate_rejects_negative_demand_unless_allowed() {
    let jam = "118.0,22.9,24.4,18.0,12.5,21.9";
    let (code, _, err) = run_capture(&["calibrate", "six_region", "--setpoints", jam, "--gains", "six_region_table"]);
    assert_eq!(code, EXIT_DOMAIN, "{err}");
    assert_eq!(run_capture(&["calibrate", "six_region", "--setpoints", "1,2"]).0, EXIT_INPUT);
}

#[test]
fn calibrate_symmetric_toy() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "toy.toml", TOY);
    let out_file = dir.path().join("cal.toml");
    let (code, _, _) = run_capture(&["calibrate", &p, "--setpoints", "20,20", "--out", out_file.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v: toml::Value = toml::from_str(&fs::read_to_string(out_file).unwrap()).unwrap();
    for k in ["u_star", "proportional_c", "prop_nonlinear_c", "first_order_c", "second_order_c"] {
        let a = v[k].as_array().unwrap();
        assert!((a[0].as_float().unwrap() - a[1].as_float().unwrap()).abs() < 1e-9, "{k}");
    }
    // g = 2 * 30 * 20 = 1200, inflow 0.6 * 1200
    assert!((v["u_star"][0].as_float().unwrap() - 480.0).abs() < 1e-9);
}

#[test]
fn simulate_writes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let (code, _, err) = run_capture(&["simulate", "--scenario", "six-a", "--out", d.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{err}");
    }
    for f in [
        "rho.csv", "u.csv", "speed.csv", "g.csv", "rho.svg", "trace.csv", "error.csv", "error.svg", "manifest.toml",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    for f in ["rho.csv", "u.csv", "trace.csv", "error.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (headers, rows) = read_csv(&a.join("rho.csv"));
    assert_eq!(headers.len(), 7);
    assert!((rows.last().unwrap()[0] - 120.0).abs() < 1e-6);
    let m: toml::Value = toml::from_str(&fs::read_to_string(a.join("manifest.toml")).unwrap()).unwrap();
    let bytes = fs::read(fixture("six_case1_malfunction.toml")).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap(), config_hash(&bytes));
}

#[test]
fn config_hash_tracks_bytes() {
    let a = config_hash(b"name = \"x\"\n");
    assert_eq!(a, config_hash(b"name = \"x\"\n"));
    assert_ne!(a, config_hash(b"name = \"x\" \n"));
    assert_eq!(a.len(), 64);
}

#[test]
fn montecarlo_envelope_matches_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run_capture(&["montecarlo", "--runs", "3", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(code == EXIT_OK || code == EXIT_DOMAIN, "{err}");
    assert!(out.contains("3 runs"));
    let (_, env) = read_csv(&dir.path().join("envelope.csv"));
    let runs: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|k| read_csv(&dir.path().join(format!("runs/run_{k:03}.csv"))).1)
        .collect();
    for (j, row) in env.iter().enumerate() {
        let max = runs.iter().map(|r| r[j][1]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(row[1], max);
        assert_eq!(row[0], runs[0][j][0]);
    }
    let m: toml::Value = toml::from_str(&fs::read_to_string(dir.path().join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(m["n_runs"].as_integer(), Some(3));
    assert_eq!(m["base_seed"].as_integer(), Some(5));
}

#[test]
fn unwritable_output_is_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("sub");
    let (code, _, _) = run_capture(&["simulate", "--scenario", "six-b", "--out", target.to_str().unwrap()]);
    assert_eq!(code, EXIT_IO);
    let cert = blocker.join("cert.toml");
    let (code, _, _) = run_capture(&["check", "six_region", "--synthesize", "--out", cert.to_str().unwrap()]);
    assert_eq!(code, EXIT_IO);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mfdvac"))
        .args(["simulate", "--scenario", "six-b"])
        .env("MFDVAC_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    let name = fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    assert!(name.join("rho.csv").exists());
}

#[test]
fn plot_command_renders_svg() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.csv", "t,a,b\n0,1,2\n1,2,3\n2,0.5,1\n");
    let svg = dir.path().join("s.svg");
    let (code, _, _) = run_capture(&["plot", &p, "--out", svg.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
    let bad = write(dir.path(), "bad.csv", "t\n0\n");
    assert_eq!(run_capture(&["plot", &bad]).0, EXIT_INPUT);
}
