//! The command-line workflow driven in-process: generate demonstrations,
//! run a short training job, evaluate the checkpoint and check the tabular
//! oracles. Each step prints the exit code the `gpril` binary would return.
//!
//! Run with `cargo run --release --example cli_workflow`.

use gpril::cli::run_from;

fn main() {
    let dir = std::env::temp_dir().join("gpril_cli_example");
    let d = |p: &str| dir.join(p).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-demos".into(), "--n".into(), "5".into(), "--out".into(), d("demos.jsonl")],
        vec![
            "train".into(),
            "--desk-scale".into(),
            "--demos".into(),
            d("demos.jsonl"),
            "--out".into(),
            d("run"),
            "--total-iterations".into(),
            "4".into(),
            "--burnin".into(),
            "200".into(),
            "--eval-interval".into(),
            "2".into(),
            "--eval-rollouts".into(),
            "10".into(),
        ],
        vec!["eval".into(), "--checkpoint".into(), d("run/checkpoints/policy_final.ckpt"), "--rollouts".into(), "20".into()],
        vec!["oracle-check".into(), "--out".into(), d("oracle.csv"), "--mc-samples".into(), "20000".into()],
        vec!["plot".into(), "--metrics".into(), d("run/metrics.csv"), "--out".into(), d("plots")],
    ];
    for args in steps {
        let code = run_from(std::iter::once("gpril".to_string()).chain(args.iter().cloned()));
        println!("gpril {} -> exit {code}\n", args.join(" "));
    }
}
