//! The staged command line driven in-process on a synthetic dataset:
//! train, prune, finetune, eval, then inspect-influence on the baseline.

use chanprune::cli::dispatch;

const CONFIG: &str = r#"
model = "tiny-cnn"
dataset = "synthetic"
tiny_widths = [8, 8, 8, 8]
r = 0.25
batch_size = 32
baseline_epochs = 8
lr = 0.05
finetune_epochs = 1
influence_batches = 4
measure_batches = 4
check_every = 4
"#;

fn main() {
    let dir = std::env::temp_dir().join("chanprune-cli-example");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("synthetic.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let at = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: [Vec<String>; 5] = [
        vec!["train".into(), "--config".into(), config.to_string_lossy().into_owned()],
        vec!["prune".into(), "--checkpoint".into(), at("baseline.ckpt")],
        vec!["finetune".into(), "--checkpoint".into(), at("prune-4.ckpt")],
        vec!["eval".into(), "--checkpoint".into(), at("final.ckpt")],
        vec!["inspect-influence".into(), "--checkpoint".into(), at("baseline.ckpt")],
    ];
    for args in steps {
        let mut argv = vec!["chanprune".to_string()];
        argv.extend(args.iter().cloned());
        argv.extend(["--out".to_string(), dir.to_string_lossy().into_owned()]);
        println!("$ {}", argv.join(" "));
        let code = dispatch(argv);
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("artifacts in {}", dir.display());
}
