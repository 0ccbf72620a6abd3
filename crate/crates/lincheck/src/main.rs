use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use bodega_lincheck::{check, History, Verdict};

fn main() -> ExitCode {
    let Some(path) = std::env::args_os().nth(1).map(PathBuf::from) else {
        eprintln!("usage: lincheck <history.jsonl>");
        return ExitCode::from(2);
    };
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let history = match History::from_jsonl(BufReader::new(file)) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let verdict = check(&history);
    print!("{verdict}");
    if matches!(verdict, Verdict::Linearizable) {
        println!(" ({} operations)", history.records.len());
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
