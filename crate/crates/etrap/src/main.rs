use std::process::exit;

fn main() {
    exit(etrap::cli::run(std::env::args_os()));
}
