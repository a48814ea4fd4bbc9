use std::io::{self, BufReader};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed = std::env::var("HEXPLAIN_SEED").ok();
    let stdin = io::stdin();
    let mut input = BufReader::new(stdin.lock());
    let (mut out, mut err) = (io::stdout(), io::stderr());
    let mut streams = hexplain_cli::Io {
        input: &mut input,
        out: &mut out,
        err: &mut err,
    };
    std::process::exit(hexplain_cli::run(std::env::args_os(), seed.as_deref(), &mut streams));
}
