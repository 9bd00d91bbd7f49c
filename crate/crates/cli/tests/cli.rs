use std::fs;
use std::path::Path;
use std::process::Command as Proc;

use vdm_core::NoiseSchedule;
use vdm_lab::commands::load_checkpoint;
use vdm_lab::verify::{single_step_closed_form, INVARIANTS};
use vdm_lab::{execute, Command, Config, Incompatible, RunConfig};

const SMALL: &str = "seed = 3\n\
                     data.n = 400\n\
                     model.hidden = 8\n\
                     train.steps = 60\n\
                     train.batch = 32\n\
                     loss.eval_samples = 500\n\
                     verify.pairs = 10\n\
                     verify.draws = 20\n\
                     verify.mc_samples = 20000\n";

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_vdm-lab"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.conf");
    fs::write(&p, text).unwrap();
    p
}

fn run(command: Command, text: &str, out: &Path) -> anyhow::Result<vdm_lab::RunManifest> {
    execute(&RunConfig::new(command, Config::parse(text)?, None, Some(out.to_path_buf()))?)
}

#[test]
fn verify_passes_with_one_row_per_invariant() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), SMALL);
    let out = d.path().join("v");
    let st = bin().args(["verify", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let report = fs::read_to_string(out.join("verification_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("check,expected,observed,tolerance,pass"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), INVARIANTS.len());
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("status = ok"));
}

#[test]
fn missing_seed_and_unknown_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "out = x\n");
    let o = bin().args(["schedule-dump", "--config"]).arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    let cfg = write_config(d.path(), "seed = 1\nschedule.knd = linear\n");
    let o = bin().args(["schedule-dump", "--config"]).arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    // the flag supplies a missing seed
    let cfg = write_config(d.path(), "");
    let out = d.path().join("s");
    let st = bin()
        .args(["schedule-dump", "--seed", "4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
}

#[test]
fn divergence_aborts_with_a_diagnostic_manifest() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &format!("{}train.lr = 1e6\n", SMALL.replace("train.steps = 60", "train.steps = 300")));
    let out = d.path().join("t");
    let st = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(!st.success());
    let m = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(m.contains("status = failed"), "{m}");
    assert!(m.contains("diverged_at_step = "), "{m}");
    assert!(m.contains("eval_loss_before"));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}train.lr = 0\n");
    run(Command::Train, &text, d.path()).unwrap();
    let cfg = Config::parse(&text).unwrap();
    let (net, _) = load_checkpoint(&cfg, &fs::read_to_string(d.path().join("checkpoint.txt")).unwrap()).unwrap();
    let fresh = vdm_core::nn::DenoiserNet::new(net.config().clone(), 3).unwrap();
    for ((na, a), (nb, b)) in net.params().iter().zip(fresh.params().iter()) {
        assert_eq!(na, nb);
        let bits = |t: &vdm_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
}

#[test]
fn same_seed_same_loss_curve() {
    let d = tempfile::tempdir().unwrap();
    let curve = |sub: &str, text: &str| {
        run(Command::Train, text, &d.path().join(sub)).unwrap();
        fs::read_to_string(d.path().join(sub).join("loss_curve.csv")).unwrap()
    };
    let a = curve("a", SMALL);
    assert_eq!(a, curve("b", SMALL));
    assert_ne!(a, curve("c", &SMALL.replace("seed = 3", "seed = 4")));
    assert_eq!(a.lines().count(), 61);
}

#[test]
fn checkpoint_with_other_lambda_range_is_incompatible() {
    let d = tempfile::tempdir().unwrap();
    run(Command::Train, SMALL, d.path()).unwrap();
    let text = format!("{SMALL}schedule.lambda_max = 7\n");
    let err = run(Command::Sample, &text, d.path()).unwrap_err();
    assert!(err.downcast_ref::<Incompatible>().is_some(), "{err:#}");
    let text = format!("{SMALL}schedule.kind = cosine\n");
    let err = run(Command::Sample, &text, d.path()).unwrap_err();
    assert!(err.downcast_ref::<Incompatible>().is_some(), "{err:#}");
    // the matching config samples fine
    let m = run(Command::Sample, &format!("{SMALL}sample.n = 50\nsample.steps = 10\n"), d.path()).unwrap();
    assert!(m.get("fraction_within_3_std").is_some());
}

#[test]
fn learned_schedule_round_trips_through_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}schedule.kind = learned\nschedule.width = 8\nschedule.lr = 1e-3\n");
    run(Command::Train, &text, d.path()).unwrap();
    let cfg = Config::parse(&text).unwrap();
    let (_, sched) = load_checkpoint(&cfg, &fs::read_to_string(d.path().join("checkpoint.txt")).unwrap()).unwrap();
    assert_eq!(sched.name(), "learned");
    assert!((sched.lambda(0.0).unwrap() - 6.0).abs() < 1e-12);
    run(Command::Sample, &format!("{text}sample.n = 20\nsample.steps = 5\n"), d.path()).unwrap();
}

#[test]
fn single_analytic_step_matches_closed_form_moments() {
    let d = tempfile::tempdir().unwrap();
    let text = "seed = 9\ndata.kind = gaussian\ndata.mean = 0.7\ndata.var = 0.5\n\
                sample.denoiser = analytic\nsample.n = 40000\nsample.steps = 1\n";
    run(Command::Sample, text, d.path()).unwrap();
    let csv = fs::read_to_string(d.path().join("samples.csv")).unwrap();
    let xs: Vec<f64> = csv.lines().skip(1).map(|l| l.parse().unwrap()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let (em, ev) = single_step_closed_form(0.7, 0.5, &NoiseSchedule::linear(-6.0, 6.0).unwrap()).unwrap();
    assert!((mean - em).abs() < 3.0 * (ev / n).sqrt(), "{mean} vs {em}");
    assert!((var - ev).abs() < 3.0 * ev * (2.0 / (n - 1.0)).sqrt(), "{var} vs {ev}");
}

#[test]
fn schedule_dump_and_param_table_shapes() {
    let d = tempfile::tempdir().unwrap();
    run(Command::ScheduleDump, "seed = 1\nsvg = true\nschedule.kind = flow-linear\n", d.path()).unwrap();
    let s = fs::read_to_string(d.path().join("schedule.csv")).unwrap();
    assert_eq!(s.lines().next(), Some("t,alpha,sigma2,lambda,p_lambda"));
    assert_eq!(s.lines().count(), 101);
    assert!(fs::read_to_string(d.path().join("schedule.svg")).unwrap().starts_with("<svg"));

    run(Command::ParamTable, "seed = 1\n", d.path()).unwrap();
    let p = fs::read_to_string(d.path().join("param_table.csv")).unwrap();
    assert_eq!(p.lines().count(), 1 + 30);
    // at α = 0.8 an x-error maps to a v-error with factor 1/σ² = 2.7778
    let row = p.lines().find(|l| l.starts_with("x,v,")).unwrap();
    let factor: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((factor - 1.0 / 0.36).abs() < 1e-12);
}
