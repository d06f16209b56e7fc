use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use vidyn::dyngen::read_dataset;
use vidyn::eval::LatentReport;
use vidyn::nn::GaussianRnn;
use vidyn::rng::stream_rng;
use vidyn::simulate::{read_ensemble_csv, read_summary_csv};
use vidyn::vi_model::{PosteriorNet, TrainConfig, ViModel};
use vidyn_cli::checkpoint::{Checkpoint, Model, ModelKind, Provenance};
use vidyn_cli::commands::{self, OneStepEntry, OneStepIndex};
use vidyn_cli::config::RunConfig;

const SMALL: &[&str] = &["--k", "8", "--t", "160", "--train-count", "6"];
const TINY_TRAIN: &[&str] =
    &["--hidden", "6", "--latent-dim", "2", "--seq-len", "30", "--batch", "4", "--samples", "2", "--iterations", "6", "--val-every", "3", "--val-windows", "4"];

fn vidyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidyn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vidyn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree_hash(root: &Path) -> String {
    let mut h = Sha256::new();
    let mut files: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().to_path_buf())
        .collect();
    files.sort();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, seed: &str) {
    let mut args = vec!["generate", "--system", "mackey-glass", "--seed", seed, "--out", s(dir)];
    args.extend_from_slice(SMALL);
    ok(&args);
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, "7");
    generate(&b, "7");
    assert_eq!(tree_hash(&a), tree_hash(&b));
    let ds = read_dataset(&a).unwrap();
    assert_eq!((ds.len(), ds.steps(), ds.split.train.len()), (8, 160, 6));
}

#[test]
fn default_and_desk_sizes() {
    let out = ok(&["generate", "--print-config"]);
    let c: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((c.data.k, c.data.t, c.data.train_count), (500, 1000, 400));
    let out = ok(&["generate", "--k", "60", "--t", "600", "--print-config"]);
    let c: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((c.data.k, c.data.t, c.data.train_count), (60, 600, 48));
}

#[test]
fn help_lists_every_key_with_default() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["train.hidden", "train.latent_dim", "lambdas", "train.iterations", "sim.tau", "sim.forecast_samples", "eval.delta"] {
        assert!(text.contains(key), "{key} missing from help");
    }
    assert!(text.contains("[30000]") && text.contains("[128]"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vidyn(&["train", "vi", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = vidyn(&["evaluate", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = vidyn(&["forecast", "--checkpoint", s(&tmp.path().join("missing.ckpt")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2), "missing dataset flag is a usage error");
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let data = tmp.path().join("d");
    generate(&data, "1");
    let out = vidyn(&["forecast", "--checkpoint", s(&bad), "--dataset", s(&data), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_forecast_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "3");
    let base = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = extra.iter().map(|x| x.to_string()).collect();
        v.extend(["--dataset", s(&data), "--seed", "3"].iter().map(|x| x.to_string()));
        v.extend(TINY_TRAIN.iter().map(|x| x.to_string()));
        v
    };
    let run = |extra: &[&str]| {
        let args = base(extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let enc = tmp.path().join("enc");
    run(&["train", "encoder", "--out", s(&enc)]);
    let bl = tmp.path().join("bl");
    run(&["train", "baseline", "--out", s(&bl)]);
    let log = fs::read_to_string(bl.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iter,lr,loss,L_q,L_y,val_loss\n"));

    let vi = tmp.path().join("vi");
    run(&["train", "vi", "--encoder", s(&enc.join("encoder.ckpt")), "--lambda", "0.01,0.1,1,10", "--out", s(&vi)]);
    for l in ["0.01", "0.1", "1", "10"] {
        let c = Checkpoint::load(&vi.join(format!("vi_lambda_{l}.ckpt"))).unwrap();
        assert_eq!(c.manifest.kind, ModelKind::Vi);
        assert_eq!(c.manifest.config.lambda.to_string(), l);
    }

    let sim = ["--tau", "20", "--horizon", "15", "--starts", "40,60", "--ns", "1"];
    let f1 = tmp.path().join("f1");
    let bl_ckpt = bl.join("baseline.ckpt");
    let mut args = vec!["forecast", "--checkpoint", s(&bl_ckpt), "--out", s(&f1)];
    args.extend_from_slice(&sim);
    run(&args);
    let index: commands::ForecastIndex = serde_json::from_str(&fs::read_to_string(f1.join("index.json")).unwrap()).unwrap();
    assert_eq!(index.cases.len(), 2 * 2);
    let c = &index.cases[0];
    let ens = read_ensemble_csv(fs::File::open(f1.join(&c.ensemble)).unwrap()).unwrap();
    let sum = read_summary_csv(fs::File::open(f1.join(&c.summary)).unwrap()).unwrap();
    assert_eq!(ens.shape(), &[1, 15, 1]);
    for k in 0..15 {
        let y = ens[[0, k, 0]];
        assert_eq!(sum.mean[[k, 0]], y);
        assert_eq!(sum.q025[[k, 0]], y);
        assert_eq!(sum.q975[[k, 0]], y);
        assert_eq!(sum.std[[k, 0]], 0.0);
    }

    let vi_ckpt = vi.join("vi_lambda_1.ckpt");
    let (fa, fb) = (tmp.path().join("fa"), tmp.path().join("fb"));
    for (dir, threads) in [(&fa, "1"), (&fb, "2")] {
        let mut args = vec!["forecast", "--checkpoint", s(&vi_ckpt), "--out", s(dir), "--threads", threads];
        args.extend_from_slice(&["--tau", "20", "--horizon", "15", "--starts", "40", "--ns", "70"]);
        run(&args);
    }
    assert_eq!(tree_hash(&fa), tree_hash(&fb));

    let o = tmp.path().join("o");
    run(&["onestep", "--checkpoint", s(&vi_ckpt), "--out", s(&o), "--tau", "20", "--m", "5"]);
    let e = tmp.path().join("e");
    run(&["evaluate", "--forecasts", s(&fa), "--onestep", s(&o), "--out", s(&e), "--tau", "20"]);
    let m: vidyn::eval::MetricsReport = serde_json::from_str(&fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    assert!(m.e_mu.unwrap().is_finite() && m.median_nmae_final.unwrap().is_finite());
    assert_eq!(m.cp_onestep.len(), 3);
    assert!(fs::read_to_string(e.join("metrics.csv")).unwrap().starts_with("metric,value\n"));
    assert!(e.join("fig_nmae_growth.csv").is_file());
}

#[test]
fn evaluate_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "5");
    let ds = read_dataset(&data).unwrap();
    let od = tmp.path().join("onestep");
    fs::create_dir_all(&od).unwrap();
    let mut cases = Vec::new();
    for k in commands::eval_trajectories(&ds) {
        let n = ds.normalized(k);
        let start = 21;
        let mut text = String::from("t,mu_0,sigma_0\n");
        for t in start..n.phi.nrows() {
            text.push_str(&format!("{t},{},{}\n", n.phi[[t, 0]], 0.05));
        }
        let file = format!("onestep_k{k:04}.csv");
        fs::write(od.join(&file), text).unwrap();
        cases.push(OneStepEntry { traj: k, start, file });
    }
    let index = OneStepIndex { model: "oracle".into(), tau: 20, samples: 1, cases };
    fs::write(od.join("index.json"), serde_json::to_string(&index).unwrap()).unwrap();
    let e = tmp.path().join("eval");
    ok(&["evaluate", "--onestep", s(&od), "--dataset", s(&data), "--out", s(&e), "--name", "oracle"]);
    let m: vidyn::eval::MetricsReport = serde_json::from_str(&fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.e_mu, Some(0.0));
}

#[test]
fn latent_on_collapsed_posterior() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "6");
    let ds = read_dataset(&data).unwrap();
    let mut rng = stream_rng(0, 0);
    let enc = GaussianRnn::init(1, 4, 1, &mut rng);
    let mut model = ViModel::init(enc, 4, 3, 1.0, &mut rng);
    model.posterior = PosteriorNet::zeros(8, 3);
    let cfg = TrainConfig::default();
    let prov = Provenance { system: ds.system, norm_stats: &ds.norm_stats, config: &cfg, iteration: 0, val_loss: 0.0 };
    let path = tmp.path().join("prior.ckpt");
    Checkpoint::new(ModelKind::Vi, Model::Vi(model), prov).save(&path).unwrap();
    let out = tmp.path().join("latent");
    ok(&["latent", "--checkpoint", s(&path), "--dataset", s(&data), "--out", s(&out)]);
    let r: LatentReport = serde_json::from_str(&fs::read_to_string(out.join("latent_lambda_1.json")).unwrap()).unwrap();
    assert!(r.dkl_per_dim.iter().all(|k| k.abs() < 1e-12));
    assert!(out.join("lambda_choice.json").is_file());
    let scatter = fs::read_to_string(out.join("fig_latent_scatter_lambda_1.csv")).unwrap();
    assert!(scatter.starts_with("z_0,z_1,z_2,alpha,gamma,tau\n"));
}

#[test]
fn checkpoint_resave_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "8");
    let enc = tmp.path().join("enc");
    let mut args = vec!["train", "encoder", "--dataset", s(&data), "--out", s(&enc)];
    args.extend_from_slice(TINY_TRAIN);
    ok(&args);
    let p = enc.join("encoder.ckpt");
    let c = Checkpoint::load(&p).unwrap();
    let again = tmp.path().join("again.ckpt");
    c.save(&again).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&again).unwrap());
}
