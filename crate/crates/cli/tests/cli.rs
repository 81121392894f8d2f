use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lformer::data::{load_sample, DatasetManifest};
use lformer::metrics::psnr;
use lformer::train::load_checkpoint;
use lformer::{LFormerModel, RunConfig, Sample, Tensor};
use tempfile::TempDir;

fn lformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lformer")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args =
        vec!["gen-data", "--out", s(dir), "--seed", "3", "--train", "4", "--val", "1", "--test", "2", "--size", "16"];
    args.extend_from_slice(extra);
    lformer(&args)
}

const TINY: &str = "width=4\nblocks=3\nkernel=3\nbatch=2\nsteps=4\ncheckpoint_every=2\nlr=1e-3\n";

fn setup(config: &str) -> (TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, &["--full", "1"])), 0);
    let cfg = tmp.path().join("run.txt");
    fs::write(&cfg, config).unwrap();
    (tmp, data, cfg)
}

fn train(cfg: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(cfg), "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    lformer(&args)
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn column(rows: &[Vec<String>], name: &str) -> usize {
    rows[0].iter().position(|h| h == name).unwrap()
}

#[test]
fn gen_data_counts_determinism_and_refusal() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = gen(&a, &[]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train: 4 samples"));
    assert_eq!(code(&gen(&b, &[])), 0);
    assert_eq!(read_tree(&a), read_tree(&b));
    assert_eq!(DatasetManifest::load(&a).unwrap().ids("train").unwrap().len(), 4);

    assert_eq!(code(&gen(&a, &[])), 2);
    assert_eq!(code(&gen(&tmp.path().join("c"), &["--size", "15"])), 1);

    let c = tmp.path().join("d");
    assert_eq!(
        code(&lformer(&[
            "gen-data",
            "--out",
            s(&c),
            "--train",
            "1",
            "--val",
            "0",
            "--test",
            "0",
            "--size",
            "32",
            "--ratio",
            "4"
        ])),
        0
    );
    let sample: Sample<f32> = load_sample(&c, "train", "train_0000").unwrap();
    assert_eq!(sample.ms.shape(), &[8, 8, 4]);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let (tmp, data, cfg) = setup(&TINY.replace("steps=4", "steps=0"));
    let out = tmp.path().join("run");
    assert_eq!(code(&train(&cfg, &data, &out, &[])), 0);
    let (model, state) = load_checkpoint::<f32>(out.join("checkpoint")).unwrap();
    let rc = RunConfig::load(&cfg).unwrap();
    assert_eq!(model.params(), LFormerModel::<f32>::build(rc.model).unwrap().params());
    assert_eq!(state.unwrap().1, 0);
    assert_eq!(csv(&out.join("loss.csv")).len(), 1 + 1);
}

#[test]
fn loss_csv_has_a_row_per_step_plus_initial() {
    let (tmp, data, cfg) = setup(TINY);
    let out = tmp.path().join("run");
    assert_eq!(code(&train(&cfg, &data, &out, &[])), 0);
    let rows = csv(&out.join("loss.csv"));
    assert_eq!(rows[0], ["step", "lr", "loss"]);
    assert_eq!(rows.len() - 1, 4 + 1);
    let steps: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4"]);
    assert_eq!(RunConfig::load(out.join("config.txt")).unwrap(), RunConfig::load(&cfg).unwrap());
}

#[test]
fn resumed_run_bit_matches_unbroken_run() {
    let (tmp, data, cfg) = setup(TINY);
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    assert_eq!(code(&train(&cfg, &data, &full, &[])), 0);
    assert_eq!(code(&train(&cfg, &data, &split, &["--stop-after", "2"])), 0);
    assert_eq!(csv(&split.join("loss.csv")).len(), 1 + 3);
    assert_eq!(code(&train(&cfg, &data, &split, &["--resume"])), 0);
    assert_eq!(read_tree(&full.join("checkpoint")), read_tree(&split.join("checkpoint")));
    assert_eq!(fs::read(full.join("loss.csv")).unwrap(), fs::read(split.join("loss.csv")).unwrap());

    let other = tmp.path().join("other.txt");
    fs::write(&other, TINY.replace("width=4", "width=8")).unwrap();
    assert_eq!(code(&train(&other, &data, &split, &["--resume"])), 1);
}

#[test]
fn divergence_exits_3_and_keeps_checkpoint() {
    let (tmp, data, cfg) =
        setup(&TINY.replace("lr=1e-3", "lr=1e30").replace("checkpoint_every=2", "checkpoint_every=1"));
    let out = tmp.path().join("run");
    let res = train(&cfg, &data, &out, &[]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("last good checkpoint"));
    let (model, state) = load_checkpoint::<f32>(out.join("checkpoint")).unwrap();
    assert!(model.params().iter().all(|(_, t)| t.all_finite()));
    let step = state.unwrap().1;
    assert!(step < 4);
    assert!(!out.join("checkpoint.tmp").exists());
}

#[test]
fn usage_and_data_errors() {
    let (tmp, data, cfg) = setup(TINY);
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "colour=blue\n").unwrap();
    assert_eq!(code(&train(&bad, &data, &tmp.path().join("x"), &[])), 1);
    assert_eq!(code(&train(&cfg, &tmp.path().join("missing"), &tmp.path().join("y"), &[])), 2);
    assert_eq!(code(&lformer(&["train", "--bogus"])), 1);
    assert_eq!(code(&lformer(&["--help"])), 0);
}

#[test]
fn eval_reference_bicubic_and_full_modes() {
    let (tmp, data, _) = setup(TINY);
    let report = tmp.path().join("gt.csv");
    assert_eq!(code(&lformer(&["eval", "--ckpt", "gt", "--data", s(&data), "--out", s(&report)])), 0);
    let rows = csv(&report);
    assert_eq!(rows.len() - 1, 2 + 2);
    assert_eq!(rows[rows.len() - 2][0], "mean");
    for row in &rows[1..3] {
        assert_eq!(row[column(&rows, "SAM")].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[column(&rows, "PSNR")], "inf");
        assert!((row[column(&rows, "Q2n")].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
    }

    let report = tmp.path().join("bicubic.csv");
    assert_eq!(code(&lformer(&["eval", "--ckpt", "none", "--data", s(&data), "--out", s(&report)])), 0);
    let rows = csv(&report);
    let col = column(&rows, "PSNR");
    for (i, row) in rows[1..3].iter().enumerate() {
        let smp: Sample<f32> = load_sample(&data, "test", &format!("test_{i:04}")).unwrap();
        let want = psnr(&smp.ms_up, smp.gt.as_ref().unwrap(), 1.0).unwrap();
        assert!((row[col].parse::<f64>().unwrap() - want).abs() < 1e-5);
    }

    let full = tmp.path().join("full.csv");
    let args =
        ["eval", "--ckpt", "none", "--data", s(&data), "--split", "test_full", "--mode", "full", "--out", s(&full)];
    assert_eq!(code(&lformer(&args)), 0);
    let rows = csv(&full);
    assert_eq!(rows[0], ["id", "D_lambda", "D_s", "HQNR"]);
    let hqnr: f64 = rows[1][3].parse().unwrap();
    assert!((0.0..=1.0).contains(&hqnr));

    assert_eq!(
        code(&lformer(&["eval", "--ckpt", "none", "--data", s(&data), "--split", "test_full", "--out", s(&full)])),
        1
    );
    assert_eq!(code(&lformer(&["eval", "--ckpt", "none", "--data", s(&data), "--mode", "full", "--out", s(&full)])), 1);
}

#[test]
fn bench_rows_ordering_and_flop_monotonicity() {
    let tmp = tempfile::tempdir().unwrap();
    let flops_at = |size: &str| {
        let out = tmp.path().join(format!("p{size}.csv"));
        assert_eq!(code(&lformer(&["bench", "--size", size, "--runs", "0", "--out", s(&out)])), 0);
        let rows = csv(&out);
        assert_eq!(rows.len(), 1 + 3);
        let (pc, fc) = (column(&rows, "params"), column(&rows, "flops"));
        let get = |v: &str, c: usize| -> u64 { rows.iter().find(|r| r[0] == v).unwrap()[c].parse().unwrap() };
        assert!(get("recompute", pc) > get("evolved", pc) && get("evolved", pc) > get("shared", pc));
        assert!(get("recompute", fc) > get("evolved", fc));
        ["evolved", "recompute", "shared"].map(|v| get(v, fc))
    };
    let (a, b, c) = (flops_at("16"), flops_at("24"), flops_at("32"));
    for i in 0..3 {
        assert!(a[i] < b[i] && b[i] < c[i]);
    }

    let timed = tmp.path().join("timed.csv");
    assert_eq!(
        code(&lformer(&["bench", "--size", "16", "--runs", "3", "--variants", "shared", "--out", s(&timed)])),
        0
    );
    let rows = csv(&timed);
    assert!(rows[1][column(&rows, "fwd_ms_mean")].parse::<f64>().unwrap() > 0.0);

    assert_eq!(code(&lformer(&["bench", "--variants", "evolved,fancy", "--out", s(&timed)])), 1);
}

#[test]
fn report_writes_features_similarity_and_error_map() {
    let (tmp, data, cfg) = setup(&TINY.replace("steps=4", "steps=1"));
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&cfg, &data, &run, &[])), 0);
    let out = tmp.path().join("report");
    let ckpt = run.join("checkpoint");
    let args = ["report", "--trace-from", s(&ckpt), "--data", s(&data), "--sample", "test_0001", "--out", s(&out)];
    assert_eq!(code(&lformer(&args)), 0);
    for i in 1..=3 {
        assert!(fs::read(out.join(format!("feature_{i}.ppm"))).unwrap().starts_with(b"P6\n16 16\n255\n"));
    }
    assert!(!out.join("feature_4.ppm").exists());
    let sim = csv(&out.join("similarity.csv"));
    assert_eq!(sim.len(), 1 + 3);
    assert!(sim.iter().all(|r| r.len() == 1 + 3));
    assert!(out.join("error.ppm").exists());

    let missing = ["report", "--trace-from", s(&ckpt), "--data", s(&data), "--sample", "nope", "--out", s(&out)];
    assert_eq!(code(&lformer(&missing)), 2);
}

#[test]
fn perfect_prediction_error_map_is_black() {
    let img = Tensor::<f32>::zeros(&[4, 4, 1]);
    let bytes = lformer::data::encode_ppm(&img, false).unwrap();
    let header = b"P6\n4 4\n255\n".len();
    assert!(bytes[header..].iter().all(|&b| b == 0));
}
