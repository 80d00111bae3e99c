fn main() {
    std::process::exit(bkprobe::cli_report::run_cli(std::env::args_os()));
}
