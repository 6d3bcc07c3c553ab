//! Drives the command-line front end through a complete tiny session in a
//! scratch directory: synthesize, pretrain, mine, two finetune stages,
//! detect and evaluate.

use std::path::Path;

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let tiny = [
        "--set",
        "data.train.images=20",
        "--set",
        "data.test.images=8",
        "--set",
        "data.external.images=20",
        "--set",
        "trainer.pretrain.iterations=150",
        "--set",
        "trainer.mining.iterations=30",
        "--set",
        "trainer.finetune.iterations=60",
    ];
    let d = |p: &str| dir.join(p).display().to_string();
    let args: Vec<String> = args
        .iter()
        .map(|a| a.strip_prefix('@').map_or(a.to_string(), d))
        .chain(tiny.iter().map(|s| s.to_string()))
        .collect();
    println!("$ facercnn {}", args.join(" "));
    let argv = std::iter::once("facercnn".to_string())
        .chain(args)
        .map(std::ffi::OsString::from);
    match facercnn::cli::main(argv) {
        0 => Ok(()),
        code => Err(format!("exit code {code}")),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile_dir();
    run(&dir, &["synth", "--out", "@data"])?;
    run(&dir, &["pretrain", "--data", "@data/external", "--out", "@pre.bin"])?;
    run(
        &dir,
        &[
            "mine",
            "--model",
            "@pre.bin",
            "--data",
            "@data/external",
            "--out",
            "@hard.jsonl",
        ],
    )?;
    run(
        &dir,
        &[
            "finetune",
            "--model",
            "@pre.bin",
            "--data",
            "@data/external",
            "--hard",
            "@hard.jsonl",
            "--schedule",
            "mining",
            "--no-concat",
            "--single-scale",
            "--out",
            "@mined.bin",
        ],
    )?;
    run(
        &dir,
        &[
            "finetune",
            "--model",
            "@mined.bin",
            "--data",
            "@data/train",
            "--out",
            "@final.bin",
        ],
    )?;
    run(
        &dir,
        &[
            "detect",
            "--model",
            "@final.bin",
            "--data",
            "@data/test",
            "--mode",
            "export",
            "--out",
            "@dets.txt",
        ],
    )?;
    run(
        &dir,
        &[
            "eval",
            "--detections",
            "@dets.txt",
            "--annotations",
            "@data/test",
            "--out",
            "@report",
        ],
    )?;
    println!("outputs left in {}", dir.display());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("facercnn_session_{}", std::process::id()));
    std::fs::create_dir_all(&d).expect("scratch directory");
    d
}
