//! The whole `taco` command sequence on a toy configuration, run in-process.

use taco_rl::cli::main_with_args;

fn main() {
    let root = std::env::temp_dir().join("taco-example-cli");
    let _ = std::fs::remove_dir_all(&root);
    let data = format!("data_dir={}", root.join("data").display());
    let out = format!("out_dir={}", root.join("runs").display());
    let toy = [
        "collect.episodes=4",
        "collect.steps_per_episode=300",
        "lmp.epochs=1",
        "lmp.steps_per_epoch=20",
        "hrl.steps=50",
        "hrl.pool_size=500",
        "flat.steps=50",
        "eval.n_chains=10",
        "eval.n_two_task=10",
        "eval.n_hard=10",
    ];
    let commands: [&[&str]; 7] = [
        &["collect"],
        &["inspect"],
        &["train-lmp"],
        &["train-hrl"],
        &["train-baseline", "cql-her"],
        &["eval", "--method", "taco", "--protocol", "chain5"],
        &["eval", "--method", "cql-her", "--protocol", "chain5"],
    ];
    for cmd in commands {
        let mut args = vec!["taco", "--set", &data, "--set", &out];
        for kv in toy {
            args.extend(["--set", kv]);
        }
        args.extend_from_slice(cmd);
        let code = main_with_args(args);
        if code != 0 {
            eprintln!("taco {} exited {code}", cmd.join(" "));
            std::process::exit(code);
        }
    }
}
