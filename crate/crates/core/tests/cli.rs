use std::path::Path;
use std::process::{Command, Output};

use bitflow::binconv::ConvSpec;
use bitflow::bnquant::BnParams;
use bitflow::netgraph::reference::{vgg_model, RefConv, RefVggLayer};
use bitflow::netgraph::{load_model, save_model};
use bitflow::KernelDims;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bitflow(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bitflow"));
    cmd.args(args).env_remove("BITFLOW_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn bitflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_tiny_passes() {
    let o = bitflow(&["validate", "--sizes", "tiny"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("seed 0xb17f10"), "{out}");
    assert!(out.contains("all suites passed"), "{out}");
}

#[test]
fn validate_reports_injected_fault() {
    let o = bitflow(
        &["validate", "--sizes", "tiny", "--inject-pad-fault", "-1"],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL conv-exact"), "{out}");
    assert!(out.contains("first at (n="), "{out}");
}

#[test]
fn seed_env_and_flag() {
    let o = bitflow(&["validate", "--sizes", "tiny"], &[("BITFLOW_SEED", "42")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("seed 0x2a"), "{}", stdout(&o));
    let o = bitflow(
        &["validate", "--sizes", "tiny", "--seed", "0x10"],
        &[("BITFLOW_SEED", "42")],
    );
    assert!(stdout(&o).contains("seed 0x10"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bitflow(&[], &[]).status.code(), Some(2));
    assert_eq!(
        bitflow(&["validate", "--sizes", "huge"], &[]).status.code(),
        Some(2)
    );
    assert_eq!(
        bitflow(&["bench", "--variants", "i8-fused,bogus"], &[])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bitflow(&["bench", "--config", "/nonexistent/cfg"], &[])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bitflow(&["validate"], &[("BITFLOW_SEED", "xyz")])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(bitflow(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("layers.cfg");
    let csv = dir.path().join("out.csv");
    std::fs::write(&cfg, "# two small layers\nid = a\nh = 8\nw = 8\nc_in = 64\n\nid = b\nh = 6\nw = 6\nc_in = 128\nc_out = 64\nstride = 2\n")
        .unwrap();
    let o = bitflow(
        &[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--variants",
            "i8-fused,i32-staged,float-reference",
            "--repeats",
            "5",
            "--warmup",
            "1",
            "--threads",
            "1",
            "--csv",
            csv.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "config,variant,median_us,min_us,max_us,ratio");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(
        lines[2].starts_with("a,i32-staged,") && lines[2].ends_with(",1.0000"),
        "{}",
        lines[2]
    );
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 6);
        let t: Vec<f64> = f[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(t[1] <= t[0] && t[0] <= t[2] && t[3] > 0.0, "{l}");
    }
}

fn gamma_zero_model(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bn = BnParams::new(vec![1.0; 8], vec![0.5; 8], vec![3.0; 8], vec![2.0; 8]).unwrap();
    bn.gamma[2] = 0.0;
    let layers = [
        RefVggLayer::Bn(
            RefConv::random(&mut rng, KernelDims::new(8, 3, 3, 4), ConvSpec::same(3)),
            bn,
        ),
        RefVggLayer::Terminal(RefConv::random(
            &mut rng,
            KernelDims::new(3, 1, 1, 8),
            ConvSpec::same(1),
        )),
    ];
    save_model(path, &vgg_model(&layers).unwrap()).unwrap();
}

#[test]
fn convert_warns_on_degenerate_channel() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("float.bdf"), dir.path().join("thr.bdf"));
    gamma_zero_model(&src);
    let o = bitflow(
        &[
            "convert",
            "--in",
            src.to_str().unwrap(),
            "--out",
            dst.to_str().unwrap(),
            "--mode",
            "vgg-threshold",
        ],
        &[],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("1 warning(s)"), "{}", stdout(&o));
    assert_eq!(load_model(&dst).unwrap().layers.len(), 2);

    let o = bitflow(
        &[
            "convert",
            "--in",
            dst.to_str().unwrap(),
            "--out",
            src.to_str().unwrap(),
            "--mode",
            "vgg-threshold",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}
